//! Runs the coordination protocol for quadratic managers and prints the
//! per-round residual and the first messages of the transcript.

use netcoop::coordination::{run_protocol, ProtocolParams};
use netcoop::joint_solver::{JointProblem, PmSpec};
use netcoop::market_model::{compute_scaling, CostModel, ImpactShape};
use netcoop::pm_oracle::{PmOracle, QuadraticOracle, QuadraticPmData};

pub fn run() -> netcoop::Result<()> {
    let targets = [vec![0.10, -0.05, 0.08, 0.00], vec![-0.08, 0.06, 0.02, 0.04], vec![0.03, 0.02, -0.07, -0.05]];
    let navs = [3e7, 2e7, 5e7];
    let data: Vec<QuadraticPmData> = targets.iter().cloned().map(QuadraticPmData::new).collect();
    let oracles: Vec<QuadraticOracle> = data.iter().cloned().map(QuadraticOracle::new).collect();
    let refs: Vec<&dyn PmOracle> = oracles.iter().map(|o| o as &dyn PmOracle).collect();

    let mut cost = CostModel::from_coefficients(vec![0.001; 4], vec![0.05, 0.10, 0.20, 0.40], ImpactShape::ThreeHalves)?;
    cost.params_mut().gamma_tc = 0.15;
    let params = ProtocolParams::new(compute_scaling(cost.kappa_impact())?, 20);
    let out = run_protocol(&refs, &navs, &params, &cost, None)?;

    let members = data.into_iter().map(PmSpec::Quadratic).collect();
    let problem = JointProblem::new(members, &navs, cost, None)?;
    println!("round  residual      firm objective");
    for (k, rec) in out.transcript.rounds.iter().enumerate() {
        let residual = rec.net.iter().zip(&rec.z_sum).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        println!("{k:>5}  {residual:.3e}  {:.8}", problem.objective(&out.history[k])?);
    }
    println!("\nnet trade: {:?}", out.net);
    println!("\nfirst transcript lines:");
    for m in out.transcript.messages.iter().take(5) {
        println!("{}", m.to_json_line()?);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
