//! Factor risk models estimated on windows of growing length, compared with
//! the covariance the synthetic returns were drawn from.

use netcoop::synthetic_market::{estimate_factor_model, gen_market, MarketSpec};

pub fn run() -> netcoop::Result<()> {
    let spec = MarketSpec { n_assets: 30, periods: 2000, n_factors: 5, ..MarketSpec::default() };
    let (market, truth) = gen_market(&spec, 9)?;
    let target = truth.covariance();
    println!("window  factors  relative error");
    for window in [42, 126, 504, 2000] {
        for j in [5, 15] {
            let fm = estimate_factor_model(&market.returns.rows(0, window).into_owned(), j)?;
            let err = (fm.covariance() - &target).norm() / target.norm();
            println!("{window:>6}  {j:>7}  {err:.3}");
        }
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
