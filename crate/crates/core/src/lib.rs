//! Cooperative netting of trading costs across independently run portfolios.

pub mod backtest;
pub mod cli;
pub mod conic;
pub mod coordination;
pub mod error;
pub mod joint_solver;
pub mod market_model;
pub mod pm_oracle;
pub mod synthetic_market;

pub use error::{Error, Result};
