//! A small multi-seed backtest of the four scenarios and the comparison table.

use std::sync::Arc;

use netcoop::backtest::{
    compare_scenarios, comparison_csv, prepare_inputs, run_batch, BacktestConfig, RunOptions, Scenario,
};
use netcoop::conic::ClarabelSolver;
use netcoop::synthetic_market::{gen_market, AlphaGenSpec, MarketSpec};

pub fn run() -> netcoop::Result<()> {
    let config = BacktestConfig { num_pms: 3, periods: 30, n_factors: 5, ..BacktestConfig::default() };
    let alpha = AlphaGenSpec { horizon: 21, ..AlphaGenSpec::default() };
    let spec = MarketSpec { n_assets: 15, periods: 51, ..MarketSpec::default() };
    let inputs = [1, 2]
        .into_iter()
        .map(|seed| prepare_inputs(&config, &alpha, gen_market(&spec, seed)?.0, seed))
        .collect::<netcoop::Result<Vec<_>>>()?;
    let scenarios = [Scenario::Independent, Scenario::FullCooperative, Scenario::Admm(2), Scenario::Admm(5)];
    let solver = Arc::new(ClarabelSolver::with_tolerance(1e-8));
    let results = run_batch(&config, &inputs, &scenarios, RunOptions::default(), solver)?;
    let comparison = compare_scenarios(&scenarios, &results, config.periods_per_year as f64)?;
    print!("{}", comparison_csv(&comparison)?);
    Ok(())
}

#[allow(dead_code)]
fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
