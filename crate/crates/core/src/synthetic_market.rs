//! Synthetic markets, noisy alphas and factor risk models.
//!
//! Prices follow a fixed ground-truth factor model. Alphas are noised
//! estimates of realized forward returns,
//!
//! ```text
//! alpha_t^i = c_i (R_t + E_t^i),    E_t = Phi E_{t-1} + U_t,
//! Cov(E) = S_E (x) Sigma_asset,     Cov(U) = Cov(E) - Phi Cov(E) Phi'
//! ```
//!
//! with `c_i = ic_i^2` and noise scale `v_i = sqrt(1/ic_i^2 - 1)`, so that the
//! correlation between alpha and realized return equals the target IC.
//!
//! Both the alphas and the risk models look *forward* in time. They are
//! useful for studying the protocol but are not implementable in practice.

use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Standardized returns are clamped to this many standard deviations.
pub const WINSOR_LIMIT: f64 = 4.2;
/// Number of factors retained by default.
pub const DEFAULT_FACTORS: usize = 15;
/// Volatilities below this value are floored.
pub const SIGMA_FLOOR: f64 = 1e-12;
/// Price every asset starts from.
pub const INITIAL_PRICE: f64 = 100.0;

/// Shrinkage `c = ic^2` and noise scale `v = sqrt(1/ic^2 - 1)` for a target IC.
pub fn calibrate_ic(ic: f64) -> Result<(f64, f64)> {
    if !(ic > 0.0 && ic <= 1.0) {
        return Err(Error::InvalidParameter(format!("target IC must lie in (0, 1], got {ic}")));
    }
    let c = ic * ic;
    Ok((c, (1.0 / c - 1.0).max(0.0).sqrt()))
}

/// Largest eigenvalue modulus of a square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().schur().complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Symmetrizes and clips negative eigenvalues to zero.
pub fn psd_clip(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return sym;
    }
    let clipped = eig.eigenvalues.map(|l| l.max(0.0));
    &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose()
}

/// A matrix `L` with `L L' = m` for a symmetric PSD `m` (negative
/// eigenvalues are treated as zero).
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    eig.eigenvectors * DMatrix::from_diagonal(&roots)
}

/// Innovation covariance of a stationary VAR(1) with transition `phi` and
/// stationary covariance `sigma_e`.
pub fn solve_lyapunov(phi: &DMatrix<f64>, sigma_e: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = sigma_e.nrows();
    check_len(n, sigma_e.ncols())?;
    check_len(n, phi.nrows())?;
    check_len(n, phi.ncols())?;
    let radius = spectral_radius(phi);
    if radius >= 1.0 {
        return Err(Error::InvalidParameter(format!("transition is not stable: spectral radius {radius}")));
    }
    let sigma_u = sigma_e - phi * sigma_e * phi.transpose();
    Ok(psd_clip(&sigma_u))
}

/// `max |sigma_e - phi sigma_e phi' - sigma_u|`.
pub fn lyapunov_residual(phi: &DMatrix<f64>, sigma_e: &DMatrix<f64>, sigma_u: &DMatrix<f64>) -> f64 {
    (sigma_e - phi * sigma_e * phi.transpose() - sigma_u).amax()
}

/// Distributions the per-manager alpha parameters are drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlphaGenSpec {
    pub ic_range: [f64; 2],
    pub autocorr_range: [f64; 2],
    pub cross_strategy_corr: f64,
    /// Forward-return window in periods.
    pub horizon: usize,
}

impl Default for AlphaGenSpec {
    fn default() -> Self {
        Self { ic_range: [0.06, 0.10], autocorr_range: [0.75, 0.85], cross_strategy_corr: 0.3, horizon: 42 }
    }
}

impl AlphaGenSpec {
    pub fn validate(&self) -> Result<()> {
        let [ic_lo, ic_hi] = self.ic_range;
        let [ac_lo, ac_hi] = self.autocorr_range;
        if !(ic_lo > 0.0 && ic_lo <= ic_hi && ic_hi <= 1.0) {
            return Err(Error::Config(format!("alpha.ic_range must satisfy 0 < lo <= hi <= 1, got {:?}", self.ic_range)));
        }
        if !(ac_lo >= 0.0 && ac_lo <= ac_hi && ac_hi < 1.0) {
            return Err(Error::Config(format!(
                "alpha.autocorr_range must satisfy 0 <= lo <= hi < 1, got {:?}",
                self.autocorr_range
            )));
        }
        if !(0.0..1.0).contains(&self.cross_strategy_corr) {
            return Err(Error::Config(format!(
                "alpha.cross_strategy_corr must lie in [0, 1), got {}",
                self.cross_strategy_corr
            )));
        }
        if self.horizon == 0 {
            return Err(Error::Config("alpha.horizon must be positive".into()));
        }
        Ok(())
    }

    /// Draws per-manager IC and autocorrelation uniformly from the ranges.
    pub fn draw(&self, num_pms: usize, seed: u64) -> AlphaGenConfig {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |[lo, hi]: [f64; 2]| if hi > lo { rng.random_range(lo..hi) } else { lo };
        let target_ic = (0..num_pms).map(|_| uniform(self.ic_range)).collect();
        let autocorr = (0..num_pms).map(|_| uniform(self.autocorr_range)).collect();
        AlphaGenConfig {
            target_ic,
            autocorr,
            cross_strategy_corr: self.cross_strategy_corr,
            horizon: self.horizon,
            seed,
        }
    }
}

/// Realized alpha parameters for each manager.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaGenConfig {
    pub target_ic: Vec<f64>,
    pub autocorr: Vec<f64>,
    pub cross_strategy_corr: f64,
    pub horizon: usize,
    pub seed: u64,
}

impl AlphaGenConfig {
    pub fn num_pms(&self) -> usize {
        self.target_ic.len()
    }

    pub fn validate(&self) -> Result<()> {
        check_len(self.num_pms(), self.autocorr.len())?;
        for &ic in &self.target_ic {
            calibrate_ic(ic)?;
        }
        if let Some(phi) = self.autocorr.iter().find(|p| !(0.0..1.0).contains(*p)) {
            return Err(Error::InvalidParameter(format!("autocorrelation must lie in [0, 1), got {phi}")));
        }
        if !(0.0..1.0).contains(&self.cross_strategy_corr) {
            return Err(Error::InvalidParameter(format!(
                "cross-strategy correlation must lie in [0, 1), got {}",
                self.cross_strategy_corr
            )));
        }
        Ok(())
    }

    /// `(c_i, v_i)` per manager.
    pub fn calibration(&self) -> Result<Vec<(f64, f64)>> {
        self.target_ic.iter().map(|&ic| calibrate_ic(ic)).collect()
    }

    /// Strategy covariance `S_E` with `S_ii = v_i^2` and `S_ij = corr v_i v_j`.
    pub fn strategy_covariance(&self) -> Result<DMatrix<f64>> {
        let v: Vec<f64> = self.calibration()?.into_iter().map(|(_, v)| v).collect();
        let m = v.len();
        let s = DMatrix::from_fn(m, m, |i, j| {
            let corr = if i == j { 1.0 } else { self.cross_strategy_corr };
            corr * v[i] * v[j]
        });
        let min_eig = SymmetricEigen::new(s.clone()).eigenvalues.min();
        if m > 0 && min_eig < -1e-12 * s.amax().max(1.0) {
            return Err(Error::InvalidParameter(format!("strategy covariance is not PSD (eigenvalue {min_eig})")));
        }
        Ok(s)
    }
}

/// Running state of the stacked VAR(1) noise process.
///
/// The noise of manager `i` on asset `j` sits at index `i * n + j`.
#[derive(Clone, Debug)]
pub struct AlphaGenState {
    e_prev: DVector<f64>,
    transition: Vec<f64>,
    innovation_factor: DMatrix<f64>,
    n: usize,
    rng: ChaCha8Rng,
}

impl AlphaGenState {
    /// Builds the process and draws its first value from the stationary law.
    pub fn new(config: &AlphaGenConfig, sigma_asset: &DMatrix<f64>) -> Result<Self> {
        config.validate()?;
        let n = sigma_asset.nrows();
        check_len(n, sigma_asset.ncols())?;
        let m = config.num_pms();
        let sigma_e = config.strategy_covariance()?.kronecker(&psd_clip(sigma_asset));
        let transition: Vec<f64> = config.autocorr.iter().flat_map(|&p| std::iter::repeat_n(p, n)).collect();
        let phi = DMatrix::from_diagonal(&DVector::from_vec(transition.clone()));
        let sigma_u = solve_lyapunov(&phi, &sigma_e)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let e0 = psd_factor(&sigma_e) * standard_normal(&mut rng, m * n);
        Ok(Self { e_prev: e0, transition, innovation_factor: psd_factor(&sigma_u), n, rng })
    }

    /// Current stacked noise vector.
    pub fn current(&self) -> &DVector<f64> {
        &self.e_prev
    }

    /// Noise of manager `pm`.
    pub fn noise(&self, pm: usize) -> &[f64] {
        &self.e_prev.as_slice()[pm * self.n..(pm + 1) * self.n]
    }

    /// Advances one period.
    pub fn step(&mut self) -> &DVector<f64> {
        let shock = &self.innovation_factor * standard_normal(&mut self.rng, self.e_prev.len());
        for (k, e) in self.e_prev.iter_mut().enumerate() {
            *e = self.transition[k] * *e + shock[k];
        }
        &self.e_prev
    }
}

fn standard_normal(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Per-manager alpha paths `c_i (R_t + E_t^i)`, one `T x N` matrix each.
///
/// `realized` holds the forward-window returns `R_t` in its rows.
pub fn gen_alpha_paths(
    config: &AlphaGenConfig,
    realized: &DMatrix<f64>,
    sigma_asset: &DMatrix<f64>,
) -> Result<Vec<DMatrix<f64>>> {
    let (t_len, n) = realized.shape();
    check_len(n, sigma_asset.nrows())?;
    let calib = config.calibration()?;
    let mut state = AlphaGenState::new(config, sigma_asset)?;
    let mut paths = vec![DMatrix::zeros(t_len, n); config.num_pms()];
    for t in 0..t_len {
        if t > 0 {
            state.step();
        }
        for (i, &(c, _)) in calib.iter().enumerate() {
            let e = state.noise(i);
            for j in 0..n {
                paths[i][(t, j)] = c * (realized[(t, j)] + e[j]);
            }
        }
    }
    Ok(paths)
}

/// Covariance model `F F' + diag(idio_var)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorModel {
    /// `N x J` loadings.
    pub loadings: DMatrix<f64>,
    pub idio_var: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Set when some asset had (numerically) zero variance in the window.
    pub degenerate: bool,
}

impl FactorModel {
    pub fn n_assets(&self) -> usize {
        self.loadings.nrows()
    }

    pub fn n_factors(&self) -> usize {
        self.loadings.ncols()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.loadings * self.loadings.transpose() + DMatrix::from_diagonal(&DVector::from_column_slice(&self.idio_var))
    }
}

/// Estimates a `j`-factor model from a `T x N` window of returns.
///
/// Returns are standardized with their window volatility, winsorized, and
/// the top eigenpairs of the resulting correlation matrix become
/// `F = diag(sigma) Q Lambda^{1/2}`. The idiosyncratic variance is whatever
/// of `sigma^2` the factors leave unexplained, clipped at zero. Requesting
/// more factors than assets keeps all of them.
pub fn estimate_factor_model(window: &DMatrix<f64>, j: usize) -> Result<FactorModel> {
    let (t_len, n) = window.shape();
    if t_len < 2 {
        return Err(Error::InvalidParameter(format!("factor window needs at least 2 rows, got {t_len}")));
    }
    if j == 0 {
        return Err(Error::InvalidParameter("factor model needs at least one factor".into()));
    }
    let k = j.min(n);
    let mut degenerate = false;
    let mut sigma = vec![0.0; n];
    let mut z = DMatrix::zeros(t_len, n);
    for a in 0..n {
        let col = window.column(a);
        let (mean, sd) = mean_sd(col.iter().copied());
        sigma[a] = if sd < SIGMA_FLOOR {
            degenerate = true;
            SIGMA_FLOOR
        } else {
            sd
        };
        for t in 0..t_len {
            z[(t, a)] = ((col[t] - mean) / sigma[a]).clamp(-WINSOR_LIMIT, WINSOR_LIMIT);
        }
    }
    // Re-standardize the winsorized columns so the correlation has a unit diagonal.
    let mut active = vec![false; n];
    for a in 0..n {
        let (mean, sd) = mean_sd(z.column(a).iter().copied());
        active[a] = sd > 0.0;
        for t in 0..t_len {
            z[(t, a)] = if active[a] { (z[(t, a)] - mean) / sd } else { 0.0 };
        }
    }
    let mut corr = z.transpose() * &z / t_len as f64;
    for a in 0..n {
        corr[(a, a)] = 1.0;
    }
    let eig = SymmetricEigen::new(corr);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]));
    let mut loadings = DMatrix::zeros(n, k);
    for (col, &idx) in order.iter().take(k).enumerate() {
        let root = eig.eigenvalues[idx].max(0.0).sqrt();
        for a in 0..n {
            loadings[(a, col)] = sigma[a] * eig.eigenvectors[(a, idx)] * root;
        }
    }
    let idio_var = (0..n)
        .map(|a| {
            let explained: f64 = loadings.row(a).iter().map(|f| f * f).sum();
            (sigma[a] * sigma[a] - explained).max(0.0)
        })
        .collect();
    Ok(FactorModel { loadings, idio_var, sigma, degenerate })
}

/// Mean and population standard deviation.
fn mean_sd(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (count, sum) = xs.clone().fold((0usize, 0.0), |(c, s), x| (c + 1, s + x));
    let mean = sum / count as f64;
    let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / count as f64;
    (mean, var.sqrt())
}

/// Parameters of the synthetic market generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarketSpec {
    pub n_assets: usize,
    pub periods: usize,
    pub n_factors: usize,
    /// Per-period volatility of each factor's contribution.
    pub factor_vol: f64,
    /// Per-period idiosyncratic volatility range.
    pub idio_vol_range: [f64; 2],
    /// Annualized expected return shared by all assets.
    pub annual_drift: f64,
    /// Median dollar volume per period.
    pub volume_median: f64,
    /// Log-scale dispersion of median volumes across assets.
    pub volume_dispersion: f64,
    /// Log-scale noise of volumes around each asset's median.
    pub volume_noise: f64,
    /// Spread range in basis points.
    pub spread_bp_range: [f64; 2],
    pub annual_risk_free: f64,
    pub periods_per_year: usize,
    pub start_date: NaiveDate,
}

impl Default for MarketSpec {
    fn default() -> Self {
        Self {
            n_assets: 30,
            periods: 600,
            n_factors: 5,
            factor_vol: 0.01,
            idio_vol_range: [0.01, 0.02],
            annual_drift: 0.05,
            volume_median: 5e7,
            volume_dispersion: 0.5,
            volume_noise: 0.25,
            spread_bp_range: [1.0, 10.0],
            annual_risk_free: 0.02,
            periods_per_year: 252,
            start_date: NaiveDate::from_ymd_opt(2000, 1, 3).expect("valid date"),
        }
    }
}

impl MarketSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_assets == 0 || self.periods == 0 {
            return bad("market.n_assets and market.periods must be positive".into());
        }
        if self.factor_vol < 0.0 || self.idio_vol_range[0] < 0.0 || self.idio_vol_range[0] > self.idio_vol_range[1] {
            return bad(format!(
                "market volatilities must be nonnegative with lo <= hi, got factor_vol {} and idio_vol_range {:?}",
                self.factor_vol, self.idio_vol_range
            ));
        }
        if !(self.volume_median > 0.0) || self.volume_dispersion < 0.0 || self.volume_noise < 0.0 {
            return bad("market.volume_median must be positive and dispersions nonnegative".into());
        }
        let [lo, hi] = self.spread_bp_range;
        if !(lo >= 0.0 && lo <= hi) {
            return bad(format!("market.spread_bp_range must satisfy 0 <= lo <= hi, got {:?}", self.spread_bp_range));
        }
        if self.periods_per_year == 0 {
            return bad("market.periods_per_year must be positive".into());
        }
        Ok(())
    }

    /// Risk-free rate per period.
    pub fn period_risk_free(&self) -> f64 {
        self.annual_risk_free / self.periods_per_year as f64
    }
}

/// The factor model the synthetic returns are drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// `N x K` loadings.
    pub loadings: DMatrix<f64>,
    pub idio_var: Vec<f64>,
    pub drift: f64,
}

impl GroundTruth {
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.loadings * self.loadings.transpose() + DMatrix::from_diagonal(&DVector::from_column_slice(&self.idio_var))
    }
}

/// Per-period market data. Row `t` of every matrix belongs to `dates[t]`.
///
/// `returns[t]` is the return realized over period `t`, so
/// `prices[t] = prices[t-1] * (1 + returns[t])` with an implicit
/// [`INITIAL_PRICE`] before the first row.
#[derive(Clone, Debug, PartialEq)]
pub struct MarketSeries {
    pub dates: Vec<NaiveDate>,
    pub prices: DMatrix<f64>,
    pub returns: DMatrix<f64>,
    /// Dollar volumes.
    pub volumes: DMatrix<f64>,
    /// Fractional bid-ask spreads.
    pub spreads: DMatrix<f64>,
    pub risk_free: Vec<f64>,
}

impl MarketSeries {
    pub fn periods(&self) -> usize {
        self.dates.len()
    }

    pub fn n_assets(&self) -> usize {
        self.prices.ncols()
    }

    /// Rebuilds returns from prices.
    pub fn from_prices(
        dates: Vec<NaiveDate>,
        prices: DMatrix<f64>,
        volumes: DMatrix<f64>,
        spreads: DMatrix<f64>,
        risk_free: f64,
    ) -> Result<Self> {
        let (t_len, n) = prices.shape();
        check_len(t_len, dates.len())?;
        for m in [&volumes, &spreads] {
            check_len(t_len, m.nrows())?;
            check_len(n, m.ncols())?;
        }
        let returns = DMatrix::from_fn(t_len, n, |t, j| {
            let prev = if t == 0 { INITIAL_PRICE } else { prices[(t - 1, j)] };
            prices[(t, j)] / prev - 1.0
        });
        let series = Self { dates, prices, returns, volumes, spreads, risk_free: vec![risk_free; t_len] };
        series.validate()?;
        Ok(series)
    }

    pub fn validate(&self) -> Result<()> {
        if self.prices.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return Err(Error::InvalidParameter("prices must be positive and finite".into()));
        }
        if self.volumes.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidParameter("volumes must be positive and finite".into()));
        }
        if self.spreads.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
            return Err(Error::InvalidParameter("spreads must be nonnegative and finite".into()));
        }
        Ok(())
    }

    /// Compounded return over periods `t+1 ..= t+h`.
    pub fn forward_return(&self, t: usize, h: usize) -> DVector<f64> {
        let n = self.n_assets();
        DVector::from_fn(n, |j, _| {
            (t + 1..=t + h).map(|s| 1.0 + self.returns[(s, j)]).product::<f64>() - 1.0
        })
    }

    /// Forward returns for every `t` with a full window, one row per `t`.
    pub fn forward_returns(&self, h: usize) -> DMatrix<f64> {
        let rows = self.periods().saturating_sub(h);
        let mut out = DMatrix::zeros(rows, self.n_assets());
        for t in 0..rows {
            out.set_row(t, &self.forward_return(t, h).transpose());
        }
        out
    }

    /// Returns of periods `t+1 ..= t+h` as an `h x N` window.
    pub fn forward_window(&self, t: usize, h: usize) -> DMatrix<f64> {
        self.returns.rows(t + 1, h).into_owned()
    }

    /// Sample covariance (population normalization) of all period returns.
    pub fn sample_covariance(&self) -> DMatrix<f64> {
        sample_covariance(&self.returns)
    }
}

/// Population covariance of the columns of `x`.
pub fn sample_covariance(x: &DMatrix<f64>) -> DMatrix<f64> {
    let t_len = x.nrows() as f64;
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(x.nrows(), x.ncols(), |t, j| x[(t, j)] - mean[j]);
    centered.transpose() * &centered / t_len
}

/// `n` consecutive business days starting at (or after) `start`.
pub fn business_days(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d += Duration::days(1);
    }
    out
}

/// Draws the ground-truth factor model of a spec.
pub fn ground_truth(spec: &MarketSpec, rng: &mut ChaCha8Rng) -> GroundTruth {
    let (n, k) = (spec.n_assets, spec.n_factors);
    let scale = if k > 0 { spec.factor_vol / (k as f64).sqrt() } else { 0.0 };
    let loadings = DMatrix::from_fn(n, k, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
    let [lo, hi] = spec.idio_vol_range;
    let idio_var = (0..n)
        .map(|_| {
            let vol = if hi > lo { rng.random_range(lo..hi) } else { lo };
            vol * vol
        })
        .collect();
    GroundTruth { loadings, idio_var, drift: spec.annual_drift / spec.periods_per_year as f64 }
}

/// Generates a synthetic market. Deterministic in `(spec, seed)`.
pub fn gen_market(spec: &MarketSpec, seed: u64) -> Result<(MarketSeries, GroundTruth)> {
    spec.validate()?;
    let (n, t_len) = (spec.n_assets, spec.periods);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = ground_truth(spec, &mut rng);
    let log_median = spec.volume_median.ln();
    let medians: Vec<f64> =
        (0..n).map(|_| log_median + spec.volume_dispersion * rng.sample::<f64, _>(StandardNormal)).collect();
    let [lo, hi] = spec.spread_bp_range;
    let spreads: Vec<f64> = (0..n).map(|_| 1e-4 * if hi > lo { rng.random_range(lo..hi) } else { lo }).collect();
    let idio_vol: Vec<f64> = truth.idio_var.iter().map(|v| v.sqrt()).collect();

    let mut returns = DMatrix::zeros(t_len, n);
    let mut prices = DMatrix::zeros(t_len, n);
    let mut volumes = DMatrix::zeros(t_len, n);
    for t in 0..t_len {
        let factors = standard_normal(&mut rng, truth.loadings.ncols());
        let common = &truth.loadings * factors;
        for j in 0..n {
            let eps: f64 = rng.sample(StandardNormal);
            let r = (truth.drift + common[j] + idio_vol[j] * eps).max(-0.95);
            returns[(t, j)] = r;
            let prev = if t == 0 { INITIAL_PRICE } else { prices[(t - 1, j)] };
            prices[(t, j)] = prev * (1.0 + r);
            let noise: f64 = rng.sample(StandardNormal);
            volumes[(t, j)] = (medians[j] + spec.volume_noise * noise).exp();
        }
    }
    let spreads = DMatrix::from_fn(t_len, n, |_, j| spreads[j]);
    let series = MarketSeries {
        dates: business_days(spec.start_date, t_len),
        prices,
        returns,
        volumes,
        spreads,
        risk_free: vec![spec.period_risk_free(); t_len],
    };
    series.validate()?;
    Ok((series, truth))
}

/// Formats `x` as a plain decimal with 12 significant digits.
pub fn format_sig12(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x.is_finite() { "0".into() } else { x.to_string() };
    }
    let exponent = x.abs().log10().floor() as i32;
    let decimals = (11 - exponent).clamp(0, 40) as usize;
    format!("{x:.decimals$}")
}

/// Writes a `T x N` series in long format with header `date,asset_id,value`.
pub fn write_series_csv(path: &Path, dates: &[NaiveDate], values: &DMatrix<f64>) -> Result<()> {
    check_len(dates.len(), values.nrows())?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["date", "asset_id", "value"])?;
    for (t, date) in dates.iter().enumerate() {
        let d = date.format("%Y-%m-%d").to_string();
        for j in 0..values.ncols() {
            w.write_record([d.as_str(), &j.to_string(), &format_sig12(values[(t, j)])])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a series written by [`write_series_csv`].
pub fn read_series_csv(path: &Path) -> Result<(Vec<NaiveDate>, DMatrix<f64>)> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?;
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["date", "asset_id", "value"] {
        return Err(Error::MissingInput(format!("{}: unexpected header {headers:?}", path.display())));
    }
    let malformed = |line: usize, what: &str| Error::MissingInput(format!("{}:{line}: bad {what}", path.display()));
    let mut dates: Vec<NaiveDate> = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let date = NaiveDate::parse_from_str(&rec[0], "%Y-%m-%d").map_err(|_| malformed(line, "date"))?;
        let asset: usize = rec[1].parse().map_err(|_| malformed(line, "asset_id"))?;
        let value: f64 = rec[2].parse().map_err(|_| malformed(line, "value"))?;
        if dates.last() != Some(&date) {
            dates.push(date);
            rows.push(Vec::new());
        }
        let row = rows.last_mut().expect("row pushed above");
        if asset != row.len() {
            return Err(malformed(line, "asset order"));
        }
        row.push(value);
    }
    let n = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || rows.iter().any(|r| r.len() != n) {
        return Err(Error::MissingInput(format!("{}: ragged or empty series", path.display())));
    }
    let matrix = DMatrix::from_fn(rows.len(), n, |t, j| rows[t][j]);
    Ok((dates, matrix))
}
