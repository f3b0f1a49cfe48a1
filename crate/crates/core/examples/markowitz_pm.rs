//! One manager's Markowitz problem on synthetic data: the stand-alone trade
//! and a single protocol step against a made-up price signal.

use std::sync::Arc;

use netcoop::backtest::{build_pm_problems, prepare_inputs, AccountState, BacktestConfig};
use netcoop::conic::{ClarabelSolver, ConvexSolverPort};
use netcoop::market_model::ScalingMatrix;
use netcoop::pm_oracle::{markowitz_initial_solve, AdmmStep, MarkowitzOracle, PmOracle};
use netcoop::synthetic_market::{gen_market, AlphaGenSpec, MarketSpec};

pub fn run() -> netcoop::Result<()> {
    let config = BacktestConfig { num_pms: 2, periods: 5, n_factors: 3, ..BacktestConfig::default() };
    let alpha = AlphaGenSpec { horizon: 10, ..AlphaGenSpec::default() };
    let spec = MarketSpec { n_assets: 10, periods: 15, ..MarketSpec::default() };
    let (market, _) = gen_market(&spec, 3)?;
    let inputs = prepare_inputs(&config, &alpha, market, 3)?;
    let state = AccountState::new(inputs.pms.iter().map(|p| p.initial_nav).collect(), 10);
    let problem = build_pm_problems(&config, &inputs, &state, 0)?.remove(0);

    let solver: Arc<dyn ConvexSolverPort> = Arc::new(ClarabelSolver::default());
    let sol = markowitz_initial_solve(&problem, solver.as_ref())?;
    println!("NAV {:.0}, tradable {} of 10", state.navs[0], problem.tradable.iter().filter(|t| **t).count());
    println!("objective {:.6e}, cash {:.4}", sol.objective, sol.cash);
    println!("risk {:.4e} (target {:.4e})", problem.risk(&sol.weights), problem.risk_target);
    println!("trade {:?}", sol.trade.iter().map(|x| (x * 1e4).round() / 1e4).collect::<Vec<_>>());

    // A positive signal makes buying dearer; the step trades less on the long side.
    let oracle = MarkowitzOracle::new(problem, solver);
    let ell = vec![1e-4; 10];
    let scaling = ScalingMatrix::identity(10);
    let step = AdmmStep { ell: &ell, x_prev: &sol.trade, lambda: 0.5, rho: 10.0, scaling: &scaling };
    let x = oracle.admm_step(&step)?;
    println!("after step {:?}", x.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>());
    Ok(())
}

#[allow(dead_code)]
fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
