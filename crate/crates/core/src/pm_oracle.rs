//! Portfolio-manager subproblem solvers.
//!
//! The protocol only ever talks to a manager through [`PmOracle`]: one call
//! for the unmodified optimal trade and one for the price-adjusted,
//! proximally-anchored re-solve of each round. Two implementations live
//! here: [`QuadraticOracle`], with a closed-form step used throughout the
//! tests, and [`MarkowitzOracle`], the single-period Markowitz policy with
//! leverage, concentration, shorting, turnover and risk limits.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::conic::{Affine, ConicProgram, ConvexSolverPort};
use crate::error::{check_len, Error, Result};
use crate::market_model::{CostModel, CostModelParams, ImpactShape, ScalingMatrix};

/// Inputs of one price-adjusted oracle step:
/// `argmin_x lambda f(x) + lambda ell' D x + rho/2 ||lambda D (x - x_prev)||^2`.
#[derive(Clone, Copy, Debug)]
pub struct AdmmStep<'a> {
    pub ell: &'a [f64],
    pub x_prev: &'a [f64],
    pub lambda: f64,
    pub rho: f64,
    pub scaling: &'a ScalingMatrix,
}

impl AdmmStep<'_> {
    fn validate(&self, n: usize) -> Result<()> {
        check_len(n, self.ell.len())?;
        check_len(n, self.x_prev.len())?;
        check_len(n, self.scaling.len())?;
        if !(self.lambda > 0.0 && self.rho > 0.0) {
            return Err(Error::InvalidParameter("lambda and rho must be > 0".into()));
        }
        Ok(())
    }

    /// Weight of the proximal term after dividing the objective by lambda.
    fn prox_weight(&self, j: usize) -> f64 {
        0.5 * self.rho * self.lambda * self.scaling[j] * self.scaling[j]
    }
}

/// A manager's private trade-selection procedure.
pub trait PmOracle: Send + Sync {
    fn dim(&self) -> usize;

    /// `argmin_x f(x)`.
    fn initial_solve(&self) -> Result<Vec<f64>>;

    /// Re-solve with the broadcast price adjustment and stability penalty.
    fn admm_step(&self, step: &AdmmStep<'_>) -> Result<Vec<f64>>;
}

/// `f(x) = 1/2 ||x - target||^2` restricted to the tradable coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticPmData {
    pub target: Vec<f64>,
    pub tradable: Vec<bool>,
}

impl QuadraticPmData {
    pub fn new(target: Vec<f64>) -> Self {
        let n = target.len();
        Self { target, tradable: vec![true; n] }
    }

    pub fn with_mask(target: Vec<f64>, tradable: Vec<bool>) -> Result<Self> {
        check_len(target.len(), tradable.len())?;
        Ok(Self { target, tradable })
    }

    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    /// Objective value; `+inf` if a masked coordinate is nonzero.
    pub fn objective(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((xj, aj), ok) in x.iter().zip(&self.target).zip(&self.tradable) {
            if *ok {
                acc += 0.5 * (xj - aj) * (xj - aj);
            } else if *xj != 0.0 {
                return f64::INFINITY;
            }
        }
        acc
    }
}

/// Unconstrained minimizer with masked coordinates zeroed.
pub fn quadratic_initial_solve(data: &QuadraticPmData) -> Vec<f64> {
    data.target
        .iter()
        .zip(&data.tradable)
        .map(|(a, ok)| if *ok { *a } else { 0.0 })
        .collect()
}

/// Closed-form step
/// `x_j = (a_j - ell_j D_jj + rho lambda D_jj^2 x_prev_j) / (1 + rho lambda D_jj^2)`.
pub fn quadratic_admm_step(data: &QuadraticPmData, step: &AdmmStep<'_>) -> Result<Vec<f64>> {
    step.validate(data.len())?;
    Ok((0..data.len())
        .map(|j| {
            if !data.tradable[j] {
                return 0.0;
            }
            let d = step.scaling[j];
            let k = step.rho * step.lambda * d * d;
            (data.target[j] - step.ell[j] * d + k * step.x_prev[j]) / (1.0 + k)
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct QuadraticOracle {
    pub data: QuadraticPmData,
}

impl QuadraticOracle {
    pub fn new(data: QuadraticPmData) -> Self {
        Self { data }
    }
}

impl PmOracle for QuadraticOracle {
    fn dim(&self) -> usize {
        self.data.len()
    }

    fn initial_solve(&self) -> Result<Vec<f64>> {
        Ok(quadratic_initial_solve(&self.data))
    }

    fn admm_step(&self, step: &AdmmStep<'_>) -> Result<Vec<f64>> {
        quadratic_admm_step(&self.data, step)
    }
}

/// Limits and penalty weights shared by all managers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PmParams {
    /// Leverage limit on `||w||_1`.
    pub leverage: f64,
    /// Per-asset concentration limit on `|w_j|`.
    pub concentration: f64,
    /// Limit on total short weight.
    pub short_limit: f64,
    /// Turnover limit; the constraint uses `2 * turnover`.
    pub turnover: f64,
    pub gamma_risk: f64,
    pub gamma_turn: f64,
    pub gamma_tc: f64,
    pub gamma_short: f64,
}

impl Default for PmParams {
    fn default() -> Self {
        Self {
            leverage: 1.5,
            concentration: 0.2,
            short_limit: 0.5,
            turnover: 0.2,
            gamma_risk: 20.0,
            gamma_turn: 1.0,
            gamma_tc: 0.15,
            gamma_short: 1.0,
        }
    }
}

impl PmParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.leverage >= 0.0
            && self.concentration > 0.0
            && self.short_limit >= 0.0
            && self.turnover >= 0.0
            && self.gamma_risk > 0.0
            && self.gamma_turn > 0.0
            && self.gamma_tc > 0.0
            && self.gamma_short > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("manager parameters out of range: {self:?}")))
        }
    }
}

/// Everything one manager's Markowitz problem needs.
///
/// Risk is modelled as `Sigma = F F' + diag(idio_var)`. The trade cost uses
/// `cost` with this manager's own NAV; its `gamma_*` and `short_rate` fields
/// are ignored in favour of [`PmParams`] and `risk_free`.
#[derive(Clone, Debug)]
pub struct PmProblemData {
    pub alpha: Vec<f64>,
    pub factor_loadings: DMatrix<f64>,
    pub idio_var: Vec<f64>,
    pub risk_free: f64,
    pub w_curr: Vec<f64>,
    pub c_curr: f64,
    pub risk_target: f64,
    pub params: PmParams,
    pub cost: CostModel,
    pub tradable: Vec<bool>,
}

/// Optimal point of the Markowitz problem.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkowitzSolution {
    pub weights: Vec<f64>,
    pub cash: f64,
    pub trade: Vec<f64>,
    pub risk_slack: f64,
    pub turnover_slack: f64,
    pub objective: f64,
}

impl PmProblemData {
    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        check_len(n, self.factor_loadings.nrows())?;
        check_len(n, self.idio_var.len())?;
        check_len(n, self.w_curr.len())?;
        check_len(n, self.cost.len())?;
        check_len(n, self.tradable.len())?;
        self.params.validate()?;
        if self.idio_var.iter().any(|d| !(*d >= 0.0)) {
            return Err(Error::InvalidParameter("idiosyncratic variance must be >= 0".into()));
        }
        if !(self.risk_target >= 0.0) {
            return Err(Error::InvalidParameter("risk target must be >= 0".into()));
        }
        if !(self.risk_free >= 0.0) {
            return Err(Error::InvalidParameter("risk-free rate must be >= 0".into()));
        }
        if self.alpha.iter().chain(&self.w_curr).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("alpha and weights must be finite".into()));
        }
        Ok(())
    }

    /// `||Sigma^{1/2} w||_2`.
    pub fn risk(&self, w: &[f64]) -> f64 {
        let fw = self.factor_loadings.tr_mul(&nalgebra::DVector::from_column_slice(w));
        let idio: f64 = w.iter().zip(&self.idio_var).map(|(x, d)| d * x * x).sum();
        (fw.norm_squared() + idio).sqrt()
    }

    /// Cash implied by the budget constraint.
    pub fn cash_after(&self, w: &[f64]) -> f64 {
        1.0 - w.iter().sum::<f64>()
    }

    fn turnover_measure(&self, trade: &[f64]) -> f64 {
        let w: Vec<f64> = self.w_curr.iter().zip(trade).map(|(a, b)| a + b).collect();
        let norm = trade.iter().map(|x| x * x).sum::<f64>().sqrt();
        norm + (self.cash_after(&w) - self.c_curr).abs()
    }

    /// Objective of the Markowitz problem at `trade`, with the slacks at
    /// their smallest feasible values. `own_costs` toggles this manager's
    /// trading and shorting cost terms.
    pub fn objective(&self, trade: &[f64], own_costs: bool) -> f64 {
        let p = &self.params;
        let w: Vec<f64> = self.w_curr.iter().zip(trade).map(|(a, b)| a + b).collect();
        let c = self.cash_after(&w);
        let risk_slack = (self.risk(&w) - self.risk_target).max(0.0);
        let turn_slack = (self.turnover_measure(trade) - 2.0 * p.turnover).max(0.0);
        let mut v = -self.alpha.iter().zip(&w).map(|(a, x)| a * x).sum::<f64>()
            - self.risk_free * c
            + p.gamma_risk * risk_slack
            + p.gamma_turn * turn_slack;
        if own_costs {
            v += p.gamma_tc * self.cost.tcost(trade).unwrap_or(f64::INFINITY);
            v += p.gamma_short * self.risk_free * w.iter().map(|x| (-x).max(0.0)).sum::<f64>();
        }
        v
    }

    /// Largest violation of the hard constraints (leverage, concentration,
    /// shorting, universe) at `trade`.
    pub fn constraint_violation(&self, trade: &[f64]) -> f64 {
        let p = &self.params;
        let w: Vec<f64> = self.w_curr.iter().zip(trade).map(|(a, b)| a + b).collect();
        let lev = w.iter().map(|x| x.abs()).sum::<f64>() - p.leverage;
        let conc = w.iter().map(|x| x.abs() - p.concentration).fold(f64::MIN, f64::max);
        let short = w.iter().map(|x| (-x).max(0.0)).sum::<f64>() - p.short_limit;
        let universe = trade
            .iter()
            .zip(&self.tradable)
            .filter(|(_, ok)| !**ok)
            .map(|(x, _)| x.abs())
            .fold(0.0, f64::max);
        [lev, conc, short, universe].into_iter().fold(0.0, f64::max)
    }
}

/// Variable layout of one manager's problem inside a [`ConicProgram`].
#[derive(Clone, Debug)]
pub(crate) struct MarkowitzBlock {
    /// Tradable asset indices, in variable order.
    assets: Vec<usize>,
    w: usize,
    risk_slack: usize,
    turn_slack: usize,
    n: usize,
}

impl MarkowitzBlock {
    /// Appends the manager's variables, constraints and objective scaled by
    /// `weight`. With `own_costs` the manager's trading and borrow costs are
    /// included; the joint problem replaces them with firm-level terms.
    pub(crate) fn append(
        prog: &mut ConicProgram,
        data: &PmProblemData,
        weight: f64,
        own_costs: bool,
    ) -> Self {
        let p = &data.params;
        let n = data.len();
        let assets: Vec<usize> = (0..n).filter(|j| data.tradable[*j]).collect();
        let nt = assets.len();
        let w = prog.add_vars(nt);
        let sh = prog.add_vars(nt);
        let risk_slack = prog.add_var();
        let turn_slack = prog.add_var();
        let turn_norm = prog.add_var();
        let cash_dev = prog.add_var();

        // Weight of asset j: variable if tradable, else fixed at w_curr.
        let mut weight_expr: Vec<Affine> =
            data.w_curr.iter().map(|c| Affine::constant(*c)).collect();
        for (k, &j) in assets.iter().enumerate() {
            weight_expr[j] = Affine::var(w + k);
        }
        let fixed_short: f64 = (0..n)
            .filter(|j| !data.tradable[*j])
            .map(|j| (-data.w_curr[j]).max(0.0))
            .sum();
        let fixed_abs: f64 = (0..n)
            .filter(|j| !data.tradable[*j])
            .map(|j| data.w_curr[j].abs())
            .sum();
        let fixed_sum: f64 = (0..n).filter(|j| !data.tradable[*j]).map(|j| data.w_curr[j]).sum();

        // cash = 1 - 1'w
        let mut cash = Affine::constant(1.0 - fixed_sum);
        for k in 0..nt {
            cash = cash.plus(w + k, -1.0);
        }

        // objective: -alpha'w - r_rf c + gamma_risk s_risk + gamma_turn s_turn
        for (k, &j) in assets.iter().enumerate() {
            prog.add_linear_cost(w + k, -weight * data.alpha[j]);
        }
        let fixed_alpha: f64 = (0..n)
            .filter(|j| !data.tradable[*j])
            .map(|j| data.alpha[j] * data.w_curr[j])
            .sum();
        prog.add_constant_cost(-weight * fixed_alpha);
        prog.add_affine_cost(&cash, -weight * data.risk_free);
        prog.add_linear_cost(risk_slack, weight * p.gamma_risk);
        prog.add_linear_cost(turn_slack, weight * p.gamma_turn);
        prog.nonneg(Affine::var(risk_slack));
        prog.nonneg(Affine::var(turn_slack));

        // |w_j| <= C, sh_j >= max(0, -w_j)
        for k in 0..nt {
            prog.le(Affine::var(w + k), Affine::constant(p.concentration));
            prog.le(Affine::term(w + k, -1.0), Affine::constant(p.concentration));
            prog.nonneg(Affine::var(sh + k));
            prog.nonneg(Affine::var(sh + k).plus(w + k, 1.0));
        }
        // ||w||_1 = sum (w + 2 sh) <= L ;  sum sh <= S
        let mut lev = Affine::constant(fixed_abs);
        let mut shorts = Affine::constant(fixed_short);
        for k in 0..nt {
            lev = lev.plus(w + k, 1.0).plus(sh + k, 2.0);
            shorts = shorts.plus(sh + k, 1.0);
        }
        prog.le(lev, Affine::constant(p.leverage));
        prog.le(shorts.clone(), Affine::constant(p.short_limit));

        // ||w - w_curr||_2 + |c - c_curr| <= 2T + s_turn
        let trades: Vec<Affine> = assets
            .iter()
            .enumerate()
            .map(|(k, &j)| Affine::var(w + k).plus_const(-data.w_curr[j]))
            .collect();
        prog.soc(Affine::var(turn_norm), trades.clone());
        let cash_move = cash.clone().plus_const(-data.c_curr);
        prog.nonneg(Affine::var(cash_dev).add(&cash_move, -1.0));
        prog.nonneg(Affine::var(cash_dev).add(&cash_move, 1.0));
        prog.le(
            Affine::var(turn_norm).plus(cash_dev, 1.0),
            Affine::constant(2.0 * p.turnover).plus(turn_slack, 1.0),
        );

        // ||Sigma^{1/2} w||_2 <= sigma_target + s_risk
        let mut risk_rows = Vec::with_capacity(data.factor_loadings.ncols() + n);
        for f in 0..data.factor_loadings.ncols() {
            let mut e = Affine::default();
            for j in 0..n {
                let l = data.factor_loadings[(j, f)];
                if l != 0.0 {
                    e = e.add(&weight_expr[j], l);
                }
            }
            risk_rows.push(e);
        }
        for j in 0..n {
            if data.idio_var[j] > 0.0 && (data.tradable[j] || data.w_curr[j] != 0.0) {
                risk_rows.push(Affine::default().add(&weight_expr[j], data.idio_var[j].sqrt()));
            }
        }
        prog.soc(Affine::constant(data.risk_target).plus(risk_slack, 1.0), risk_rows);

        if own_costs {
            prog.add_affine_cost(&shorts, weight * p.gamma_short * data.risk_free);
            let scale = weight * p.gamma_tc;
            append_trade_cost(prog, &data.cost, &assets, &trades, scale);
        }

        Self { assets, w, risk_slack, turn_slack, n }
    }

    /// Trade `w_j - w_curr_j` of asset `j` as an expression.
    pub(crate) fn trade_expr(&self, data: &PmProblemData, j: usize) -> Affine {
        match self.assets.iter().position(|a| *a == j) {
            Some(k) => Affine::var(self.w + k).plus_const(-data.w_curr[j]),
            None => Affine::default(),
        }
    }

    pub(crate) fn trade(&self, data: &PmProblemData, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; self.n];
        for (k, &j) in self.assets.iter().enumerate() {
            t[j] = x[self.w + k] - data.w_curr[j];
        }
        t
    }

    pub(crate) fn solution(&self, data: &PmProblemData, x: &[f64], objective: f64) -> MarkowitzSolution {
        let trade = self.trade(data, x);
        let weights: Vec<f64> = data.w_curr.iter().zip(&trade).map(|(a, b)| a + b).collect();
        MarkowitzSolution {
            cash: data.cash_after(&weights),
            weights,
            trade,
            risk_slack: x[self.risk_slack],
            turnover_slack: x[self.turn_slack],
            objective,
        }
    }

    /// Adds `rho lambda / 2 ||D (x - x_prev)||^2 + ell' D x` on the trade.
    pub(crate) fn add_prox(&self, prog: &mut ConicProgram, data: &PmProblemData, step: &AdmmStep<'_>) {
        for (k, &j) in self.assets.iter().enumerate() {
            let d = step.scaling[j];
            prog.add_linear_cost(self.w + k, step.ell[j] * d);
            prog.add_constant_cost(-step.ell[j] * d * data.w_curr[j]);
            prog.add_square_cost(self.w + k, step.prox_weight(j), data.w_curr[j] + step.x_prev[j]);
        }
    }
}

/// Appends `scale * phi_tc(z)` for the per-asset trade expressions `z`.
pub(crate) fn append_trade_cost(
    prog: &mut ConicProgram,
    cost: &CostModel,
    assets: &[usize],
    trades: &[Affine],
    scale: f64,
) {
    let spread = &cost.params().spread;
    let kappa = cost.kappa_impact();
    let shape = cost.params().shape;
    for (z, &j) in trades.iter().zip(assets) {
        let lin = match shape {
            ImpactShape::ThreeHalves => 0.5 * spread[j],
            ImpactShape::Quadratic => spread[j],
        };
        let three_halves = shape == ImpactShape::ThreeHalves && kappa[j] > 0.0;
        if lin > 0.0 || three_halves {
            // a >= |z|
            let a = prog.add_var();
            prog.nonneg(Affine::var(a).add(z, -1.0));
            prog.nonneg(Affine::var(a).add(z, 1.0));
            prog.add_linear_cost(a, scale * lin);
            if three_halves {
                let t = prog.add_var();
                prog.three_halves_epigraph_soc(Affine::var(t), Affine::var(a));
                prog.add_linear_cost(t, scale * kappa[j]);
            }
        }
        if shape == ImpactShape::Quadratic && kappa[j] > 0.0 {
            // z is `var + constant` here
            let (v, a) = z.terms[0];
            debug_assert!(z.terms.len() == 1 && a == 1.0);
            prog.add_square_cost(v, scale * kappa[j], -z.constant);
        }
    }
}

/// Solves the Markowitz problem for the manager's preferred trade.
pub fn markowitz_initial_solve(
    data: &PmProblemData,
    solver: &dyn ConvexSolverPort,
) -> Result<MarkowitzSolution> {
    markowitz_solve(data, true, solver)
}

/// Solves the Markowitz problem with or without the manager's own trading
/// and borrow costs.
pub fn markowitz_solve(
    data: &PmProblemData,
    own_costs: bool,
    solver: &dyn ConvexSolverPort,
) -> Result<MarkowitzSolution> {
    data.validate()?;
    let mut prog = ConicProgram::new();
    let block = MarkowitzBlock::append(&mut prog, data, 1.0, own_costs);
    let sol = solver.solve(&prog)?;
    Ok(block.solution(data, &sol.x, sol.objective))
}

/// Solves the price-adjusted Markowitz problem and returns the trade.
///
/// The manager's own trading and borrow costs are left out: inside the
/// protocol the firm prices the net trade through `ell` instead.
pub fn markowitz_admm_step(
    data: &PmProblemData,
    step: &AdmmStep<'_>,
    solver: &dyn ConvexSolverPort,
) -> Result<Vec<f64>> {
    data.validate()?;
    step.validate(data.len())?;
    let mut prog = ConicProgram::new();
    let block = MarkowitzBlock::append(&mut prog, data, 1.0, false);
    block.add_prox(&mut prog, data, step);
    let sol = solver.solve(&prog)?;
    Ok(block.trade(data, &sol.x))
}

/// Markowitz policy behind the oracle interface.
///
/// The initial trade is the manager's stand-alone optimum, own costs
/// included; protocol rounds then use the cost-free objective.
#[derive(Clone)]
pub struct MarkowitzOracle {
    pub data: PmProblemData,
    solver: Arc<dyn ConvexSolverPort>,
}

impl MarkowitzOracle {
    pub fn new(data: PmProblemData, solver: Arc<dyn ConvexSolverPort>) -> Self {
        Self { data, solver }
    }
}

impl PmOracle for MarkowitzOracle {
    fn dim(&self) -> usize {
        self.data.len()
    }

    fn initial_solve(&self) -> Result<Vec<f64>> {
        Ok(markowitz_solve(&self.data, true, self.solver.as_ref())?.trade)
    }

    fn admm_step(&self, step: &AdmmStep<'_>) -> Result<Vec<f64>> {
        markowitz_admm_step(&self.data, step, self.solver.as_ref())
    }
}

/// Cost parameters for a manager trading alone with NAV `nav`.
pub fn own_cost_params(firm: &CostModelParams, nav: f64) -> CostModelParams {
    CostModelParams { nav, ..firm.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conic::ClarabelSolver;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn step<'a>(ell: &'a [f64], x_prev: &'a [f64], lambda: f64, rho: f64, d: &'a ScalingMatrix) -> AdmmStep<'a> {
        AdmmStep { ell, x_prev, lambda, rho, scaling: d }
    }

    #[test]
    fn quadratic_initial_examples() {
        assert_eq!(quadratic_initial_solve(&QuadraticPmData::new(vec![1.0, -2.0])), vec![1.0, -2.0]);
        let masked = QuadraticPmData::with_mask(vec![1.0, -2.0], vec![true, false]).unwrap();
        assert_eq!(quadratic_initial_solve(&masked), vec![1.0, 0.0]);
        assert_eq!(quadratic_initial_solve(&QuadraticPmData::new(vec![0.0; 3])), vec![0.0; 3]);
    }

    #[test]
    fn quadratic_step_examples() {
        let d = ScalingMatrix::identity(1);
        let data = QuadraticPmData::new(vec![1.0]);
        let x = quadratic_admm_step(&data, &step(&[0.0], &[0.0], 0.5, 2.0, &d)).unwrap();
        assert_abs_diff_eq!(x[0], 0.5, epsilon = 1e-15);

        let data = QuadraticPmData::new(vec![0.3, -0.7]);
        let d2 = ScalingMatrix::new(vec![0.4, 1.3]).unwrap();
        let a = data.target.clone();
        let x = quadratic_admm_step(&data, &step(&[0.0, 0.0], &a, 0.7, 10.0, &d2)).unwrap();
        assert_abs_diff_eq!(x[0], a[0], epsilon = 1e-15);
        assert_abs_diff_eq!(x[1], a[1], epsilon = 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let n = 4;
            let data = QuadraticPmData::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect());
            let ell: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let prev: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let d = ScalingMatrix::new((0..n).map(|_| rng.random_range(0.5..2.0)).collect()).unwrap();
            let x = quadratic_admm_step(&data, &step(&ell, &prev, rng.random_range(0.5..1.0), 1e6, &d)).unwrap();
            for j in 0..n {
                assert!((x[j] - prev[j]).abs() <= 1e-3);
            }
        }
    }

    #[test]
    fn quadratic_step_masks_and_validates() {
        let d = ScalingMatrix::identity(2);
        let data = QuadraticPmData::with_mask(vec![1.0, 1.0], vec![false, true]).unwrap();
        let x = quadratic_admm_step(&data, &step(&[0.5, 0.5], &[0.2, 0.2], 1.0, 1.0, &d)).unwrap();
        assert_eq!(x[0], 0.0);
        assert!(quadratic_admm_step(&data, &step(&[0.5], &[0.2, 0.2], 1.0, 1.0, &d)).is_err());
        assert!(quadratic_admm_step(&data, &step(&[0.5, 0.5], &[0.2, 0.2], 0.0, 1.0, &d)).is_err());
    }

    /// Same augmented quadratic problem solved through the conic port.
    #[test]
    fn quadratic_step_matches_generic_solver() {
        let solver = ClarabelSolver::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.random_range(1..=10);
            let target: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.8)).collect();
            let data = QuadraticPmData::with_mask(target, mask).unwrap();
            let ell: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
            let prev: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let d = ScalingMatrix::new((0..n).map(|_| rng.random_range(0.1..2.0)).collect()).unwrap();
            let (lambda, rho) = (rng.random_range(0.1..1.0), rng.random_range(0.5..20.0));
            let closed = quadratic_admm_step(&data, &step(&ell, &prev, lambda, rho, &d)).unwrap();

            let mut prog = ConicProgram::new();
            let x = prog.add_vars(n);
            for j in 0..n {
                if data.tradable[j] {
                    prog.add_square_cost(x + j, 0.5 * lambda, data.target[j]);
                } else {
                    prog.eq(Affine::var(x + j));
                }
                prog.add_linear_cost(x + j, lambda * ell[j] * d[j]);
                prog.add_square_cost(x + j, 0.5 * rho * (lambda * d[j]).powi(2), prev[j]);
            }
            let sol = solver.solve(&prog).unwrap();
            for j in 0..n {
                assert_abs_diff_eq!(sol.x[x + j], closed[j], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn quadratic_oracle_contract() {
        let o = QuadraticOracle::new(QuadraticPmData::with_mask(vec![0.2, -0.1, 0.4], vec![true, true, false]).unwrap());
        let x0 = o.initial_solve().unwrap();
        let d = ScalingMatrix::new(vec![0.3, 0.9, 1.1]).unwrap();
        let x1 = o.admm_step(&step(&[0.0; 3], &x0, 0.4, 10.0, &d)).unwrap();
        for j in 0..3 {
            assert_abs_diff_eq!(x0[j], x1[j], epsilon = 1e-12);
        }
    }

    pub(crate) fn sample_problem(rng: &mut ChaCha8Rng, n: usize, j_factors: usize) -> PmProblemData {
        let f = DMatrix::from_fn(n, j_factors, |_, _| rng.random_range(-0.01..0.01));
        let idio: Vec<f64> = (0..n).map(|_| rng.random_range(1e-5..4e-4)).collect();
        let spread: Vec<f64> = (0..n).map(|_| rng.random_range(1e-4..1e-3)).collect();
        let vol: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.03)).collect();
        let volume: Vec<f64> = (0..n).map(|_| rng.random_range(1e6..1e8)).collect();
        let cost = CostModel::new(CostModelParams::new(spread, vec![1.0; n], vol, volume, 1e7)).unwrap();
        PmProblemData {
            alpha: (0..n).map(|_| rng.random_range(-2e-3..2e-3)).collect(),
            factor_loadings: f,
            idio_var: idio,
            risk_free: 1e-4,
            w_curr: vec![0.0; n],
            c_curr: 1.0,
            risk_target: 0.01,
            params: PmParams::default(),
            cost,
            tradable: (0..n).map(|j| j % 4 != 3).collect(),
        }
    }

    #[test]
    fn zero_alpha_means_no_trade() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut data = sample_problem(&mut rng, 6, 2);
        data.alpha = vec![0.0; 6];
        data.risk_free = 0.0;
        let sol = markowitz_initial_solve(&data, &ClarabelSolver::default()).unwrap();
        assert!(sol.trade.iter().all(|x| x.abs() < 1e-6), "{:?}", sol.trade);
        assert_abs_diff_eq!(sol.cash, 1.0, epsilon = 1e-6);
        assert!(sol.objective >= -1e-8);
        // the no-trade point is feasible with zero slacks
        assert_eq!(data.constraint_violation(&[0.0; 6]), 0.0);
        assert_eq!(data.objective(&[0.0; 6], true), 0.0);
    }

    #[test]
    fn huge_alpha_hits_concentration_bound() {
        let cost = CostModel::from_coefficients(vec![1e-4], vec![1e-3], ImpactShape::ThreeHalves).unwrap();
        let data = PmProblemData {
            alpha: vec![10.0],
            factor_loadings: DMatrix::zeros(1, 0),
            idio_var: vec![1e-4],
            risk_free: 0.0,
            w_curr: vec![0.0],
            c_curr: 1.0,
            risk_target: 1.0,
            params: PmParams::default(),
            cost,
            tradable: vec![true],
        };
        let sol = markowitz_initial_solve(&data, &ClarabelSolver::default()).unwrap();
        // brute-force grid over the feasible interval [-C, C]
        let c = data.params.concentration;
        let best = (0..=4000)
            .map(|i| -c + 2.0 * c * i as f64 / 4000.0)
            .min_by(|a, b| data.objective(&[*a], true).total_cmp(&data.objective(&[*b], true)))
            .unwrap();
        assert_abs_diff_eq!(best, 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.weights[0], 0.2, epsilon = 1e-6);
    }

    #[test]
    fn markowitz_solution_is_feasible() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let mut data = sample_problem(&mut rng, 12, 3);
            data.w_curr = (0..12).map(|j| if data.tradable[j] { rng.random_range(-0.1..0.1) } else { 0.0 }).collect();
            data.c_curr = 1.0 - data.w_curr.iter().sum::<f64>();
            let sol = markowitz_initial_solve(&data, &ClarabelSolver::default()).unwrap();
            let p = &data.params;
            let w = &sol.weights;
            assert!(w.iter().map(|x| x.abs()).sum::<f64>() <= p.leverage + 1e-6);
            assert!(w.iter().all(|x| x.abs() <= p.concentration + 1e-6));
            assert!(w.iter().map(|x| (-x).max(0.0)).sum::<f64>() <= p.short_limit + 1e-6);
            assert_abs_diff_eq!(1.0 - w.iter().sum::<f64>(), sol.cash, epsilon = 1e-8);
            assert!(data.risk(w) <= data.risk_target + sol.risk_slack + 1e-6);
            assert!(data.turnover_measure(&sol.trade) <= 2.0 * p.turnover + sol.turnover_slack + 1e-6);
            for j in 0..12 {
                if !data.tradable[j] {
                    assert_eq!(sol.trade[j], 0.0);
                }
            }
            // solver objective agrees with the direct evaluation
            assert_abs_diff_eq!(data.objective(&sol.trade, true), sol.objective, epsilon = 1e-7);
        }
    }

    #[test]
    fn markowitz_step_contract() {
        let solver = ClarabelSolver::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data = sample_problem(&mut rng, 10, 2);
        // Without own costs the initial solve is the fixed point of a zero-signal step.
        let mut free = data.clone();
        free.cost = CostModel::from_coefficients(vec![0.0; 10], vec![0.0; 10], ImpactShape::ThreeHalves).unwrap();
        free.risk_free = 0.0;
        let x0 = markowitz_initial_solve(&free, &solver).unwrap().trade;
        let mut data = data;
        data.risk_free = 0.0;
        let d = ScalingMatrix::new((0..10).map(|_| rng.random_range(0.05..0.5)).collect()).unwrap();
        let zero = vec![0.0; 10];

        let x1 = markowitz_admm_step(&data, &step(&zero, &x0, 0.3, 10.0, &d), &solver).unwrap();
        for j in 0..10 {
            assert_abs_diff_eq!(x1[j], x0[j], epsilon = 1e-5);
        }

        let anchor: Vec<f64> = (0..10).map(|j| if data.tradable[j] { 0.05 } else { 0.0 }).collect();
        let x2 = markowitz_admm_step(&data, &step(&zero, &anchor, 0.3, 1e6, &d), &solver).unwrap();
        for j in 0..10 {
            assert!((x2[j] - anchor[j]).abs() <= 1e-3);
        }

        let premium = vec![0.01; 10];
        let x3 = markowitz_admm_step(&data, &step(&premium, &x0, 0.3, 10.0, &d), &solver).unwrap();
        assert!(x3.iter().sum::<f64>() < x0.iter().sum::<f64>());
        for j in 0..10 {
            if !data.tradable[j] {
                assert_eq!(x3[j], 0.0);
            }
        }
    }

    #[test]
    fn higher_risk_aversion_never_adds_risk() {
        let solver = ClarabelSolver::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..4 {
            let mut data = sample_problem(&mut rng, 10, 3);
            data.risk_target = 0.002;
            let lo = markowitz_initial_solve(&data, &solver).unwrap();
            data.params.gamma_risk *= 5.0;
            let hi = markowitz_initial_solve(&data, &solver).unwrap();
            assert!(data.risk(&hi.weights) <= data.risk(&lo.weights) + 1e-7);
        }
    }
}
