//! Transaction-cost and shorting-cost models.
//!
//! The trading cost of a net trade `z` (in portfolio-weight units of the
//! executing NAV) is
//!
//! ```text
//! phi_tc(z) = 1/2 * spread' |z| + kappa_impact' |z|^{3/2}
//! kappa_impact_j = b_j * nu_j / sqrt(omega_j / V)
//! ```
//!
//! All cost values here are unscaled; the penalty weights `gamma_tc` and
//! `gamma_short` are applied by the optimization layers that use them.
//! Volatility, dollar volume and the borrow rate are per rebalance period.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Lower bound applied to every diagonal entry of the ADMM scaling matrix.
pub const SCALING_FLOOR: f64 = 1e-6;

/// Functional form of the market-impact term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImpactShape {
    /// `1/2 spread'|z| + kappa'|z|^{3/2}`.
    #[default]
    ThreeHalves,
    /// Smooth approximation `spread'|z| + z' diag(kappa) z`.
    Quadratic,
}

/// Per-asset bounds on the net trade weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

/// Inputs of the netted transaction-cost model.
#[derive(Clone, Debug, PartialEq)]
pub struct CostModelParams {
    /// Fractional bid-ask spread per asset.
    pub spread: Vec<f64>,
    /// Market-impact coefficient `b` per asset.
    pub impact_coeff: Vec<f64>,
    /// Return volatility per asset over the period.
    pub volatility: Vec<f64>,
    /// Dollar volume per asset over the period.
    pub dollar_volume: Vec<f64>,
    /// NAV whose weights the trade is expressed in.
    pub nav: f64,
    pub gamma_tc: f64,
    pub gamma_short: f64,
    /// Borrow rate per period charged on short weights.
    pub short_rate: f64,
    pub net_box: Option<NetBox>,
    pub shape: ImpactShape,
}

impl CostModelParams {
    /// Spread-only or impact-free models are convenient in tests; this sets
    /// the defaults for everything except the per-asset vectors.
    pub fn new(
        spread: Vec<f64>,
        impact_coeff: Vec<f64>,
        volatility: Vec<f64>,
        dollar_volume: Vec<f64>,
        nav: f64,
    ) -> Self {
        Self {
            spread,
            impact_coeff,
            volatility,
            dollar_volume,
            nav,
            gamma_tc: 1.0,
            gamma_short: 1.0,
            short_rate: 0.0,
            net_box: None,
            shape: ImpactShape::ThreeHalves,
        }
    }

    pub fn len(&self) -> usize {
        self.spread.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spread.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        check_len(n, self.impact_coeff.len())?;
        check_len(n, self.volatility.len())?;
        check_len(n, self.dollar_volume.len())?;
        let nonneg = |name: &str, v: &[f64]| -> Result<()> {
            if v.iter().all(|x| x.is_finite() && *x >= 0.0) {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!("{name} must be finite and >= 0")))
            }
        };
        nonneg("spread", &self.spread)?;
        nonneg("impact coefficient", &self.impact_coeff)?;
        nonneg("volatility", &self.volatility)?;
        if !self.dollar_volume.iter().all(|w| w.is_finite() && *w > 0.0) {
            return Err(Error::InvalidParameter("dollar volume must be > 0".into()));
        }
        if !(self.nav.is_finite() && self.nav > 0.0) {
            return Err(Error::InvalidParameter(format!("nav must be > 0, got {}", self.nav)));
        }
        if !(self.gamma_tc >= 0.0 && self.gamma_short >= 0.0) {
            return Err(Error::InvalidParameter("cost scales must be >= 0".into()));
        }
        if !(self.short_rate >= 0.0) {
            return Err(Error::InvalidParameter("short rate must be >= 0".into()));
        }
        if let Some(b) = &self.net_box {
            check_len(n, b.lo.len())?;
            check_len(n, b.hi.len())?;
            if b.lo.iter().zip(&b.hi).any(|(lo, hi)| !(*lo <= 0.0 && 0.0 <= *hi)) {
                return Err(Error::InvalidParameter("net box must satisfy lo <= 0 <= hi".into()));
            }
        }
        Ok(())
    }
}

/// Per-asset impact coefficients `b nu / sqrt(omega / V)`.
pub fn compute_impact_coeffs(params: &CostModelParams) -> Result<Vec<f64>> {
    params.validate()?;
    Ok(params
        .impact_coeff
        .iter()
        .zip(&params.volatility)
        .zip(&params.dollar_volume)
        .map(|((b, nu), omega)| b * nu / (omega / params.nav).sqrt())
        .collect())
}

/// Cost model with impact coefficients precomputed.
#[derive(Clone, Debug)]
pub struct CostModel {
    params: CostModelParams,
    kappa_impact: Vec<f64>,
}

impl CostModel {
    pub fn new(params: CostModelParams) -> Result<Self> {
        let kappa_impact = compute_impact_coeffs(&params)?;
        Ok(Self { params, kappa_impact })
    }

    /// Builds a model directly from spread and impact coefficients.
    pub fn from_coefficients(
        spread: Vec<f64>,
        kappa_impact: Vec<f64>,
        shape: ImpactShape,
    ) -> Result<Self> {
        check_len(spread.len(), kappa_impact.len())?;
        if kappa_impact.iter().any(|k| !(k.is_finite() && *k >= 0.0)) {
            return Err(Error::InvalidParameter("impact coefficients must be >= 0".into()));
        }
        let n = spread.len();
        let mut params =
            CostModelParams::new(spread, vec![0.0; n], vec![0.0; n], vec![1.0; n], 1.0);
        params.shape = shape;
        params.validate()?;
        Ok(Self { params, kappa_impact })
    }

    pub fn params(&self) -> &CostModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut CostModelParams {
        &mut self.params
    }

    pub fn kappa_impact(&self) -> &[f64] {
        &self.kappa_impact
    }

    pub fn len(&self) -> usize {
        self.kappa_impact.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kappa_impact.is_empty()
    }

    /// Unscaled cost contribution of a single asset.
    pub fn tcost_coord(&self, j: usize, z: f64) -> f64 {
        let a = z.abs();
        match self.params.shape {
            ImpactShape::ThreeHalves => {
                0.5 * self.params.spread[j] * a + self.kappa_impact[j] * a * a.sqrt()
            }
            ImpactShape::Quadratic => self.params.spread[j] * a + self.kappa_impact[j] * a * a,
        }
    }

    /// Unscaled cost of the trade `z` as a fraction of NAV.
    pub fn tcost(&self, z: &[f64]) -> Result<f64> {
        check_len(self.len(), z.len())?;
        Ok(z.iter().enumerate().map(|(j, &zj)| self.tcost_coord(j, zj)).sum())
    }

    /// Unscaled cost broken out by asset.
    pub fn tcost_per_asset(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_len(self.len(), z.len())?;
        Ok(z.iter().enumerate().map(|(j, &zj)| self.tcost_coord(j, zj)).collect())
    }

    /// Derivative of the unscaled cost at `z != 0`, or the subgradient
    /// interval at `z = 0`.
    pub fn tcost_subgradient(&self, j: usize, z: f64) -> Subgradient {
        let (lin, curv) = match self.params.shape {
            ImpactShape::ThreeHalves => (0.5 * self.params.spread[j], 1.5 * self.kappa_impact[j]),
            ImpactShape::Quadratic => (self.params.spread[j], 2.0 * self.kappa_impact[j]),
        };
        if z == 0.0 {
            return Subgradient::new(-lin, lin);
        }
        let growth = match self.params.shape {
            ImpactShape::ThreeHalves => curv * z.abs().sqrt(),
            ImpactShape::Quadratic => curv * z.abs(),
        };
        Subgradient::point(z.signum() * (lin + growth))
    }
}

/// Unscaled transaction cost `phi_tc(z)`.
pub fn eval_tcost(z: &[f64], params: &CostModelParams) -> Result<f64> {
    CostModel::new(params.clone())?.tcost(z)
}

/// Borrow cost `rate * sum_j max(0, -w_j)` on short weights.
pub fn eval_short_cost(w: &[f64], rate: f64) -> Result<f64> {
    if !(rate >= 0.0) {
        return Err(Error::InvalidParameter(format!("short rate must be >= 0, got {rate}")));
    }
    Ok(rate * w.iter().map(|x| (-x).max(0.0)).sum::<f64>())
}

/// Closed interval `[lo, hi]` of subgradients of a scalar convex function.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Subgradient {
    pub lo: f64,
    pub hi: f64,
}

impl Subgradient {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn shift(self, by: f64) -> Self {
        Self::new(self.lo + by, self.hi + by)
    }

    pub fn scale(self, by: f64) -> Self {
        Self::new(self.lo * by, self.hi * by)
    }

    pub fn add(self, other: Self) -> Self {
        Self::new(self.lo + other.lo, self.hi + other.hi)
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn is_point(&self) -> bool {
        self.lo == self.hi
    }
}

/// Diagonal ADMM scaling matrix `D`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingMatrix(Vec<f64>);

impl ScalingMatrix {
    pub fn new(d: Vec<f64>) -> Result<Self> {
        if d.iter().all(|x| x.is_finite() && *x > 0.0) {
            Ok(Self(d))
        } else {
            Err(Error::InvalidParameter("scaling entries must be > 0".into()))
        }
    }

    pub fn identity(n: usize) -> Self {
        Self(vec![1.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::ops::Index<usize> for ScalingMatrix {
    type Output = f64;

    fn index(&self, j: usize) -> &f64 {
        &self.0[j]
    }
}

/// `D_jj = max(sqrt(2 kappa_impact_j), SCALING_FLOOR)`.
pub fn compute_scaling(kappa_impact: &[f64]) -> Result<ScalingMatrix> {
    if kappa_impact.iter().any(|k| !(k.is_finite() && *k >= 0.0)) {
        return Err(Error::InvalidParameter("impact coefficients must be >= 0".into()));
    }
    Ok(ScalingMatrix(
        kappa_impact.iter().map(|k| (2.0 * k).sqrt().max(SCALING_FLOOR)).collect(),
    ))
}

/// Firm-level coupling cost `g`: scaled trading cost of the net trade plus
/// the scaled borrow cost on net short holdings, restricted to the net box.
///
/// The shorting term needs the firm's current net weights `h`; it is charged
/// on `max(0, -(h + z))`. Without holdings the term is dropped.
#[derive(Clone, Debug)]
pub struct NetCost {
    model: CostModel,
    holdings: Option<Vec<f64>>,
}

impl NetCost {
    pub fn new(model: CostModel, holdings: Option<Vec<f64>>) -> Result<Self> {
        if let Some(h) = &holdings {
            check_len(model.len(), h.len())?;
        }
        Ok(Self { model, holdings })
    }

    pub fn model(&self) -> &CostModel {
        &self.model
    }

    pub fn holdings(&self) -> Option<&[f64]> {
        self.holdings.as_deref()
    }

    pub fn len(&self) -> usize {
        self.model.len()
    }

    pub fn is_empty(&self) -> bool {
        self.model.is_empty()
    }

    fn short_slope(&self) -> f64 {
        self.model.params.gamma_short * self.model.params.short_rate
    }

    /// Feasible interval for coordinate `j`.
    pub fn bounds(&self, j: usize) -> (f64, f64) {
        match &self.model.params.net_box {
            Some(b) => (b.lo[j], b.hi[j]),
            None => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    /// Points where the coordinate cost is not differentiable.
    pub fn kinks(&self, j: usize) -> Vec<f64> {
        let mut k = vec![0.0];
        if let Some(h) = &self.holdings {
            if self.short_slope() > 0.0 {
                k.push(-h[j]);
            }
        }
        k
    }

    /// Cost of coordinate `j` ignoring the box.
    pub fn value(&self, j: usize, z: f64) -> f64 {
        let mut v = self.model.params.gamma_tc * self.model.tcost_coord(j, z);
        if let Some(h) = &self.holdings {
            v += self.short_slope() * (-(h[j] + z)).max(0.0);
        }
        v
    }

    /// Total cost, `+inf` outside the box.
    pub fn total(&self, z: &[f64]) -> Result<f64> {
        check_len(self.len(), z.len())?;
        let mut acc = 0.0;
        for (j, &zj) in z.iter().enumerate() {
            let (lo, hi) = self.bounds(j);
            if zj < lo || zj > hi {
                return Ok(f64::INFINITY);
            }
            acc += self.value(j, zj);
        }
        Ok(acc)
    }

    /// Second derivative of the coordinate cost away from its kinks.
    pub fn curvature(&self, j: usize, z: f64) -> f64 {
        let k = self.model.kappa_impact[j] * self.model.params.gamma_tc;
        match self.model.params.shape {
            ImpactShape::ThreeHalves if z != 0.0 => 0.75 * k / z.abs().sqrt(),
            ImpactShape::ThreeHalves => f64::INFINITY,
            ImpactShape::Quadratic => 2.0 * k,
        }
    }

    /// Subgradient of the coordinate cost, box excluded.
    pub fn subgradient(&self, j: usize, z: f64) -> Subgradient {
        let mut s = self.model.tcost_subgradient(j, z).scale(self.model.params.gamma_tc);
        if let Some(h) = &self.holdings {
            let slope = self.short_slope();
            let pos = h[j] + z;
            let short = if pos < 0.0 {
                Subgradient::point(-slope)
            } else if pos > 0.0 {
                Subgradient::point(0.0)
            } else {
                Subgradient::new(-slope, 0.0)
            };
            s = s.add(short);
        }
        s
    }
}

/// Subgradient of `gamma_tc phi_tc + gamma_short phi_short` at coordinate `j`
/// with zero net holdings.
pub fn net_cost_derivative(z_j: f64, params: &CostModelParams, j: usize) -> Result<Subgradient> {
    let n = params.len();
    if j >= n {
        return Err(Error::Dimension { expected: n, actual: j + 1 });
    }
    let cost = NetCost::new(CostModel::new(params.clone())?, Some(vec![0.0; n]))?;
    Ok(cost.subgradient(j, z_j))
}
