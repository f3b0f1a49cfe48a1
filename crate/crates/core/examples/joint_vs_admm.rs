//! Distance between the protocol's firm objective and the joint optimum as
//! the number of rounds grows.

use netcoop::coordination::{run_protocol, ProtocolParams};
use netcoop::joint_solver::{solve_joint_quadratic, JointProblem, PmSpec};
use netcoop::market_model::{compute_scaling, CostModel, ImpactShape};
use netcoop::pm_oracle::{PmOracle, QuadraticOracle, QuadraticPmData};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn run() -> netcoop::Result<()> {
    let (n, m) = (6, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let data: Vec<QuadraticPmData> = (0..m)
        .map(|_| QuadraticPmData::new((0..n).map(|_| rng.random_range(-0.3..0.3)).collect()))
        .collect();
    let navs: Vec<f64> = (0..m).map(|_| rng.random_range(1e7..5e7)).collect();
    let cost = CostModel::from_coefficients(
        vec![0.0; n],
        (0..n).map(|_| rng.random_range(0.05..0.5)).collect(),
        ImpactShape::Quadratic,
    )?;

    let members = data.iter().cloned().map(PmSpec::Quadratic).collect();
    let problem = JointProblem::new(members, &navs, cost.clone(), None)?;
    let joint = solve_joint_quadratic(&problem)?;
    let independent: Vec<Vec<f64>> = data.iter().map(|d| d.target.clone()).collect();
    println!("joint optimum        {:.10}", joint.objective);
    println!("independent trades   {:.10}", problem.objective(&independent)?);

    let oracles: Vec<QuadraticOracle> = data.into_iter().map(QuadraticOracle::new).collect();
    let refs: Vec<&dyn PmOracle> = oracles.iter().map(|o| o as &dyn PmOracle).collect();
    for rounds in [0, 1, 2, 5, 10, 20, 50] {
        let params = ProtocolParams::new(compute_scaling(cost.kappa_impact())?, rounds);
        let out = run_protocol(&refs, &navs, &params, &cost, None)?;
        let gap = problem.objective(&out.trades)? - joint.objective;
        println!("K = {rounds:>2}  gap {gap:.3e}");
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
