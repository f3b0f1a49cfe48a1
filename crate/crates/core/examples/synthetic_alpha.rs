//! Noisy forward-looking alphas and their realized information coefficient.
//!
//! A one-period horizon keeps the samples independent, so the realized IC
//! lands close to its target.

use netcoop::synthetic_market::{gen_alpha_paths, gen_market, AlphaGenSpec, MarketSpec};

fn corr(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

pub fn run() -> netcoop::Result<()> {
    let spec = AlphaGenSpec { horizon: 1, ..AlphaGenSpec::default() };
    let market_spec = MarketSpec { n_assets: 20, periods: 2000, ..MarketSpec::default() };
    let (market, _) = gen_market(&market_spec, 5)?;
    let h = spec.horizon;
    let realized = market.forward_returns(h).rows(0, market_spec.periods - h).into_owned();
    let sigma = market.sample_covariance() * h as f64;
    let config = spec.draw(3, 5);
    let paths = gen_alpha_paths(&config, &realized, &sigma)?;

    println!("pm  target IC  realized IC  autocorr");
    for (i, path) in paths.iter().enumerate() {
        let a: Vec<f64> = path.iter().copied().collect();
        let r: Vec<f64> = realized.iter().copied().collect();
        println!("{i:>2}  {:>9.3}  {:>11.3}  {:>8.3}", config.target_ic[i], corr(&a, &r), config.autocorr[i]);
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
