//! Trading cost of two managers trading alone versus through one netted order.
//!
//! Offsetting trades cross internally and cost nothing. Trades in the same
//! direction cost more when combined, since impact grows faster than size.

use netcoop::coordination::{nav_weights, net_trade};
use netcoop::market_model::{compute_scaling, CostModel, CostModelParams};

pub fn run() -> netcoop::Result<()> {
    // Three assets: liquid, mid, thin.
    let params = CostModelParams::new(
        vec![0.0002, 0.0005, 0.0010],
        vec![1.0; 3],
        vec![0.010, 0.015, 0.020],
        vec![5e8, 1e8, 2e7],
        1e8,
    );
    let firm = CostModel::new(params.clone())?;
    println!("impact coefficients: {:?}", firm.kappa_impact());
    println!("protocol scaling:    {:?}", compute_scaling(firm.kappa_impact())?.as_slice());

    let navs = [6e7, 4e7];
    let trades = vec![vec![0.05, -0.02, 0.03], vec![-0.06, 0.015, 0.01]];
    let lambda = nav_weights(&navs)?;
    let z = net_trade(&lambda, &trades)?;

    let mut alone = 0.0;
    let mut alone_by_asset = vec![0.0; 3];
    for (i, x) in trades.iter().enumerate() {
        let own = CostModel::new(CostModelParams { nav: navs[i], ..params.clone() })?;
        for (j, c) in own.tcost_per_asset(x)?.iter().enumerate() {
            alone_by_asset[j] += c * navs[i];
        }
        let cost = own.tcost(x)? * navs[i];
        println!("manager {i} alone: {cost:>10.2}");
        alone += cost;
    }
    let netted_by_asset: Vec<f64> = firm.tcost_per_asset(&z)?.iter().map(|c| c * params.nav).collect();
    for j in 0..3 {
        println!("  asset {j}: solo {:>9.2}  netted {:>9.2}", alone_by_asset[j], netted_by_asset[j]);
    }
    let netted = firm.tcost(&z)? * params.nav;
    println!("sum of solo costs: {alone:>10.2}");
    println!("netted firm order: {netted:>10.2}  (net trade {z:?})");
    println!("saving:            {:>9.1}%", 100.0 * (1.0 - netted / alone));
    Ok(())
}

#[allow(dead_code)]
fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
