//! Centralized solution of the firm problem
//!
//! ```text
//! minimize  sum_i lambda_i f_i(x_i) + g(z)   subject to  z = sum_i lambda_i x_i
//! ```
//!
//! where `g` is the firm-level trading cost plus the firm-wide borrow cost
//! and optional net-trade box. This needs every manager's data in one place
//! and serves as the fully cooperative baseline and as a test oracle for
//! the protocol.

use serde::{Deserialize, Serialize};

use crate::conic::{Affine, ConicProgram, ConvexSolverPort};
use crate::coordination::nav_weights;
use crate::error::{check_len, Error, Result};
use crate::market_model::{CostModel, ImpactShape, NetCost};
use crate::pm_oracle::{append_trade_cost, MarkowitzBlock, PmProblemData, QuadraticPmData};

/// One manager's explicit problem.
#[derive(Clone, Debug)]
pub enum PmSpec {
    Quadratic(QuadraticPmData),
    /// Markowitz problem; its own cost terms are replaced by the firm terms.
    Markowitz(Box<PmProblemData>),
}

impl PmSpec {
    pub fn len(&self) -> usize {
        match self {
            PmSpec::Quadratic(d) => d.len(),
            PmSpec::Markowitz(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn tradable(&self, j: usize) -> bool {
        match self {
            PmSpec::Quadratic(d) => d.tradable[j],
            PmSpec::Markowitz(d) => d.tradable[j],
        }
    }

    /// `f_i` at `trade`, without manager-level trading or borrow costs.
    pub fn objective(&self, trade: &[f64]) -> f64 {
        match self {
            PmSpec::Quadratic(d) => d.objective(trade),
            PmSpec::Markowitz(d) => d.objective(trade, false),
        }
    }
}

#[derive(Clone, Debug)]
pub struct JointProblem {
    pub members: Vec<PmSpec>,
    pub lambda: Vec<f64>,
    /// Firm cost; `gamma_tc`, `gamma_short`, `short_rate` and `net_box` are
    /// taken from its parameters.
    pub cost: CostModel,
    /// Firm net weights before trading, for the borrow cost.
    pub holdings_net: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointSolution {
    pub trades: Vec<Vec<f64>>,
    pub net: Vec<f64>,
    pub objective: f64,
}

impl JointProblem {
    pub fn new(
        members: Vec<PmSpec>,
        navs: &[f64],
        cost: CostModel,
        holdings_net: Option<Vec<f64>>,
    ) -> Result<Self> {
        check_len(members.len(), navs.len())?;
        let lambda = nav_weights(navs)?;
        let n = cost.len();
        for m in &members {
            check_len(n, m.len())?;
        }
        if let Some(h) = &holdings_net {
            check_len(n, h.len())?;
        }
        Ok(Self { members, lambda, cost, holdings_net })
    }

    pub fn len(&self) -> usize {
        self.cost.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cost.is_empty()
    }

    pub fn net_cost(&self) -> Result<NetCost> {
        NetCost::new(self.cost.clone(), self.holdings_net.clone())
    }

    /// Firm objective at the stacked trades; `+inf` outside the net box.
    pub fn objective(&self, trades: &[Vec<f64>]) -> Result<f64> {
        check_len(self.members.len(), trades.len())?;
        let net = crate::coordination::net_trade(&self.lambda, trades)?;
        let own: f64 = self
            .members
            .iter()
            .zip(&self.lambda)
            .zip(trades)
            .map(|((m, l), x)| l * m.objective(x))
            .sum();
        Ok(own + self.net_cost()?.total(&net)?)
    }
}

/// Closed-form optimum for quadratic managers and a purely quadratic
/// firm cost `gamma_tc z' diag(kappa) z`.
pub fn solve_joint_quadratic(problem: &JointProblem) -> Result<JointSolution> {
    let p = problem.cost.params();
    if p.shape != ImpactShape::Quadratic || p.spread.iter().any(|s| *s != 0.0) {
        return Err(Error::InvalidParameter(
            "closed form needs a quadratic impact model with zero spread".into(),
        ));
    }
    if p.net_box.is_some() || (problem.holdings_net.is_some() && p.gamma_short * p.short_rate > 0.0) {
        return Err(Error::InvalidParameter("closed form does not support box or borrow terms".into()));
    }
    let targets: Vec<&QuadraticPmData> = problem
        .members
        .iter()
        .map(|m| match m {
            PmSpec::Quadratic(d) => Ok(d),
            PmSpec::Markowitz(_) => Err(Error::InvalidParameter("closed form needs quadratic managers".into())),
        })
        .collect::<Result<_>>()?;

    let n = problem.len();
    let kappa = problem.cost.kappa_impact();
    let mut trades = vec![vec![0.0; n]; targets.len()];
    let mut net = vec![0.0; n];
    for j in 0..n {
        let c = 2.0 * p.gamma_tc * kappa[j];
        let mut weight = 0.0;
        let mut pull = 0.0;
        for (d, l) in targets.iter().zip(&problem.lambda) {
            if d.tradable[j] {
                weight += l;
                pull += l * d.target[j];
            }
        }
        let denom = 1.0 + c * weight;
        if !(denom > 0.0 && denom.is_finite()) {
            return Err(Error::Numerical(format!("singular stationarity system at asset {j}")));
        }
        let z = pull / denom;
        for (x, d) in trades.iter_mut().zip(&targets) {
            if d.tradable[j] {
                x[j] = d.target[j] - c * z;
            }
        }
    }
    for (x, l) in trades.iter().zip(&problem.lambda) {
        for (acc, v) in net.iter_mut().zip(x) {
            *acc += l * v;
        }
    }
    let objective = problem.objective(&trades)?;
    Ok(JointSolution { trades, net, objective })
}

/// Solves the firm problem as one conic program.
pub fn solve_joint_general(problem: &JointProblem, solver: &dyn ConvexSolverPort) -> Result<JointSolution> {
    let n = problem.len();
    let params = problem.cost.params();
    let mut prog = ConicProgram::new();

    enum Layout {
        Quadratic(usize),
        Markowitz(MarkowitzBlock),
    }
    let mut layouts = Vec::with_capacity(problem.members.len());
    let mut trade_exprs: Vec<Vec<Affine>> = Vec::with_capacity(problem.members.len());
    for (m, &l) in problem.members.iter().zip(&problem.lambda) {
        match m {
            PmSpec::Quadratic(d) => {
                let x = prog.add_vars(n);
                for j in 0..n {
                    if d.tradable[j] {
                        prog.add_square_cost(x + j, 0.5 * l, d.target[j]);
                    } else {
                        prog.eq(Affine::var(x + j));
                    }
                }
                trade_exprs.push((0..n).map(|j| Affine::var(x + j)).collect());
                layouts.push(Layout::Quadratic(x));
            }
            PmSpec::Markowitz(d) => {
                d.validate()?;
                let block = MarkowitzBlock::append(&mut prog, d, l, false);
                trade_exprs.push((0..n).map(|j| block.trade_expr(d, j)).collect());
                layouts.push(Layout::Markowitz(block));
            }
        }
    }

    // z_j = sum_i lambda_i x_ij
    let z = prog.add_vars(n);
    for j in 0..n {
        let mut e = Affine::var(z + j);
        for (exprs, &l) in trade_exprs.iter().zip(&problem.lambda) {
            e = e.add(&exprs[j], -l);
        }
        prog.eq(e);
    }
    let all: Vec<usize> = (0..n).collect();
    let nets: Vec<Affine> = (0..n).map(|j| Affine::var(z + j)).collect();
    append_trade_cost(&mut prog, &problem.cost, &all, &nets, params.gamma_tc);

    let slope = params.gamma_short * params.short_rate;
    if let (Some(h), true) = (&problem.holdings_net, slope > 0.0) {
        for j in 0..n {
            let s = prog.add_var();
            prog.nonneg(Affine::var(s));
            prog.nonneg(Affine::var(s).plus(z + j, 1.0).plus_const(h[j]));
            prog.add_linear_cost(s, slope);
        }
    }
    if let Some(b) = &params.net_box {
        for j in 0..n {
            prog.le(Affine::constant(b.lo[j]), Affine::var(z + j));
            prog.le(Affine::var(z + j), Affine::constant(b.hi[j]));
        }
    }

    let sol = solver.solve(&prog)?;
    let trades: Vec<Vec<f64>> = problem
        .members
        .iter()
        .zip(&layouts)
        .map(|(m, lay)| match (m, lay) {
            (PmSpec::Quadratic(d), Layout::Quadratic(x)) => {
                (0..n).map(|j| if d.tradable[j] { sol.x[x + j] } else { 0.0 }).collect()
            }
            (PmSpec::Markowitz(d), Layout::Markowitz(b)) => b.trade(d, &sol.x),
            _ => unreachable!("layout follows member kind"),
        })
        .collect();
    let net = sol.x[z..z + n].to_vec();
    let objective = problem.objective(&trades)?;
    Ok(JointSolution { trades, net, objective })
}

/// Whether every member can trade asset `j`.
pub fn tradable_by_all(problem: &JointProblem, j: usize) -> bool {
    problem.members.iter().all(|m| m.tradable(j))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conic::ClarabelSolver;
    use crate::market_model::{CostModelParams, NetBox};
    use crate::pm_oracle::{markowitz_initial_solve, PmParams};
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn quad_cost(kappa: Vec<f64>, gamma: f64) -> CostModel {
        let n = kappa.len();
        let mut c = CostModel::from_coefficients(vec![0.0; n], kappa, ImpactShape::Quadratic).unwrap();
        c.params_mut().gamma_tc = gamma;
        c
    }

    fn random_quadratic(rng: &mut ChaCha8Rng, n: usize, m: usize) -> JointProblem {
        let members = (0..m)
            .map(|_| {
                let t = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
                let mask = (0..n).map(|_| rng.random_bool(0.8)).collect();
                PmSpec::Quadratic(QuadraticPmData::with_mask(t, mask).unwrap())
            })
            .collect();
        let navs: Vec<f64> = (0..m).map(|_| rng.random_range(0.5..2.0)).collect();
        let kappa = (0..n).map(|_| rng.random_range(0.1..3.0)).collect();
        JointProblem::new(members, &navs, quad_cost(kappa, rng.random_range(0.5..2.0)), None).unwrap()
    }

    #[test]
    fn single_manager_without_cost_keeps_target() {
        let p = JointProblem::new(
            vec![PmSpec::Quadratic(QuadraticPmData::new(vec![0.3, -0.1]))],
            &[2.0],
            quad_cost(vec![0.0, 0.0], 1.0),
            None,
        )
        .unwrap();
        let s = solve_joint_quadratic(&p).unwrap();
        assert_eq!(s.trades[0], vec![0.3, -0.1]);
    }

    #[test]
    fn opposite_managers_net_to_zero() {
        let a = vec![0.2, -0.4, 0.1];
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        let p = JointProblem::new(
            vec![PmSpec::Quadratic(QuadraticPmData::new(a.clone())), PmSpec::Quadratic(QuadraticPmData::new(neg.clone()))],
            &[1.0, 1.0],
            quad_cost(vec![1.0, 2.0, 0.5], 1.0),
            None,
        )
        .unwrap();
        let s = solve_joint_quadratic(&p).unwrap();
        assert!(s.net.iter().all(|z| z.abs() < 1e-15));
        assert_eq!(s.trades, vec![a, neg]);
        let g = solve_joint_general(&p, &ClarabelSolver::default()).unwrap();
        assert!(g.net.iter().all(|z| z.abs() < 1e-7));
    }

    fn coordinate_descent(p: &JointProblem) -> Vec<Vec<f64>> {
        let n = p.len();
        let kappa = p.cost.kappa_impact();
        let gamma = p.cost.params().gamma_tc;
        let data: Vec<&QuadraticPmData> = p
            .members
            .iter()
            .map(|m| match m {
                PmSpec::Quadratic(d) => d,
                _ => unreachable!(),
            })
            .collect();
        let mut x = vec![vec![0.0; n]; data.len()];
        for _ in 0..20_000 {
            let mut moved = 0.0_f64;
            for j in 0..n {
                for i in 0..data.len() {
                    if !data[i].tradable[j] {
                        continue;
                    }
                    let l = p.lambda[i];
                    let rest: f64 = (0..data.len()).filter(|k| *k != i).map(|k| p.lambda[k] * x[k][j]).sum();
                    let c = 2.0 * gamma * kappa[j];
                    let new = (data[i].target[j] - c * rest) / (1.0 + c * l);
                    moved = moved.max((new - x[i][j]).abs());
                    x[i][j] = new;
                }
            }
            if moved < 1e-16 {
                break;
            }
        }
        x
    }

    #[test]
    fn closed_form_matches_coordinate_descent_and_kkt() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let p = random_quadratic(&mut rng, 4, 3);
            let s = solve_joint_quadratic(&p).unwrap();
            let cd = coordinate_descent(&p);
            for (a, b) in s.trades.iter().flatten().zip(cd.iter().flatten()) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-10);
            }
            // stationarity: lambda (x - a) + 2 gamma kappa z lambda = 0 on tradables
            let gamma = p.cost.params().gamma_tc;
            for (i, m) in p.members.iter().enumerate() {
                let PmSpec::Quadratic(d) = m else { unreachable!() };
                for j in 0..4 {
                    if d.tradable[j] {
                        let r = p.lambda[i] * (s.trades[i][j] - d.target[j])
                            + 2.0 * gamma * p.cost.kappa_impact()[j] * s.net[j] * p.lambda[i];
                        assert!(r.abs() <= 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn backends_agree_on_quadratic_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let solver = ClarabelSolver::default();
        for _ in 0..5 {
            let p = random_quadratic(&mut rng, 5, 3);
            let a = solve_joint_quadratic(&p).unwrap();
            let b = solve_joint_general(&p, &solver).unwrap();
            for (x, y) in a.trades.iter().flatten().zip(b.trades.iter().flatten()) {
                assert_abs_diff_eq!(*x, *y, epsilon = 1e-6);
            }
            assert_abs_diff_eq!(a.objective, b.objective, epsilon = 1e-8);
        }
    }

    #[test]
    fn rescaling_navs_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_quadratic(&mut rng, 4, 3);
        let navs = [1.3, 0.7, 2.2];
        let scaled: Vec<f64> = navs.iter().map(|v| v * 1e6).collect();
        let a = JointProblem::new(p.members.clone(), &navs, p.cost.clone(), None).unwrap();
        let b = JointProblem::new(p.members.clone(), &scaled, p.cost.clone(), None).unwrap();
        let (sa, sb) = (solve_joint_quadratic(&a).unwrap(), solve_joint_quadratic(&b).unwrap());
        for (x, y) in sa.trades.iter().flatten().zip(sb.trades.iter().flatten()) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
        }
    }

    #[test]
    fn closed_form_rejects_unsupported_costs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = random_quadratic(&mut rng, 2, 2);
        p.cost.params_mut().net_box = Some(NetBox { lo: vec![-1.0; 2], hi: vec![1.0; 2] });
        assert!(solve_joint_quadratic(&p).is_err());
        let mut p = random_quadratic(&mut rng, 2, 2);
        p.cost.params_mut().shape = ImpactShape::ThreeHalves;
        assert!(solve_joint_quadratic(&p).is_err());
    }

    fn markowitz(rng: &mut ChaCha8Rng, n: usize, nav: f64) -> PmProblemData {
        let spread: Vec<f64> = (0..n).map(|_| rng.random_range(1e-4..1e-3)).collect();
        let vol: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.03)).collect();
        let volume: Vec<f64> = (0..n).map(|_| rng.random_range(1e5..1e7)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-0.05..0.1)).collect();
        PmProblemData {
            alpha: (0..n).map(|_| rng.random_range(-3e-3..3e-3)).collect(),
            factor_loadings: DMatrix::from_fn(n, 2, |_, _| rng.random_range(-0.01..0.01)),
            idio_var: (0..n).map(|_| rng.random_range(1e-5..2e-4)).collect(),
            risk_free: 2e-4,
            c_curr: 1.0 - w.iter().sum::<f64>(),
            w_curr: w,
            risk_target: 0.01,
            params: PmParams::default(),
            cost: CostModel::new(CostModelParams::new(spread, vec![1.0; n], vol, volume, nav)).unwrap(),
            tradable: (0..n).map(|j| j != 1).collect(),
        }
    }

    fn firm_cost(template: &CostModel, nav: f64, pm: &PmParams, rate: f64) -> CostModel {
        let mut params = CostModelParams { nav, ..template.params().clone() };
        params.gamma_tc = pm.gamma_tc;
        params.gamma_short = pm.gamma_short;
        params.short_rate = rate;
        CostModel::new(params).unwrap()
    }

    #[test]
    fn single_markowitz_member_matches_standalone_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let solver = ClarabelSolver::precise();
        for _ in 0..3 {
            let d = markowitz(&mut rng, 6, 1e7);
            let alone = markowitz_initial_solve(&d, &solver).unwrap();
            let cost = firm_cost(&d.cost, 1e7, &d.params, d.risk_free);
            let p = JointProblem::new(vec![PmSpec::Markowitz(Box::new(d.clone()))], &[1e7], cost, Some(d.w_curr.clone()))
                .unwrap();
            let s = solve_joint_general(&p, &solver).unwrap();
            for (a, b) in s.trades[0].iter().zip(&alone.trade) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-6);
            }
            assert_abs_diff_eq!(s.objective, alone.objective, epsilon = 1e-8);
        }
    }

    #[test]
    fn joint_dominates_independent_trades() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let solver = ClarabelSolver::default();
        for _ in 0..3 {
            let navs = [3e6, 1e7, 5e6];
            let members: Vec<PmProblemData> = navs.iter().map(|v| markowitz(&mut rng, 8, *v)).collect();
            let lambda = nav_weights(&navs).unwrap();
            let total: f64 = navs.iter().sum();
            let mut h = vec![0.0; 8];
            for (m, l) in members.iter().zip(&lambda) {
                for j in 0..8 {
                    h[j] += l * m.w_curr[j];
                }
            }
            let cost = firm_cost(&members[0].cost, total, &members[0].params, members[0].risk_free);
            let indep: Vec<Vec<f64>> =
                members.iter().map(|m| markowitz_initial_solve(m, &solver).unwrap().trade).collect();
            let p = JointProblem::new(
                members.into_iter().map(|m| PmSpec::Markowitz(Box::new(m))).collect(),
                &navs,
                cost,
                Some(h),
            )
            .unwrap();
            let s = solve_joint_general(&p, &solver).unwrap();
            let net = crate::coordination::net_trade(&p.lambda, &s.trades).unwrap();
            for (a, b) in net.iter().zip(&s.net) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-8);
            }
            assert!(s.objective <= p.objective(&indep).unwrap() + 1e-8);
        }
    }

    #[test]
    fn net_box_is_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = random_quadratic(&mut rng, 4, 2);
        p.cost.params_mut().net_box = Some(NetBox { lo: vec![-0.01; 4], hi: vec![0.01; 4] });
        let s = solve_joint_general(&p, &ClarabelSolver::default()).unwrap();
        assert!(s.net.iter().all(|z| z.abs() <= 0.01 + 1e-8));
        assert!(p.objective(&s.trades).unwrap().is_finite() || s.net.iter().any(|z| z.abs() > 0.01));
    }
}
