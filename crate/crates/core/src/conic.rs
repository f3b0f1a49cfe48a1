//! Structured convex programs and the solver port used by the Markowitz
//! oracle and the joint solver.
//!
//! Programs are assembled as affine expressions constrained to cones:
//! equalities, nonnegativity, second-order cones and 3-d power cones. The
//! objective is `sum_j w_j (x_j - c_j)^2 + q'x + q0`. [`ClarabelSolver`]
//! maps this onto Clarabel's `Ax + s = b, s in K` form.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};

use crate::error::{Error, Result};

/// Affine expression `sum a_i x_i + c`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Affine {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl Affine {
    pub fn constant(c: f64) -> Self {
        Self { terms: Vec::new(), constant: c }
    }

    pub fn var(v: usize) -> Self {
        Self { terms: vec![(v, 1.0)], constant: 0.0 }
    }

    pub fn term(v: usize, a: f64) -> Self {
        Self { terms: vec![(v, a)], constant: 0.0 }
    }

    pub fn plus(mut self, v: usize, a: f64) -> Self {
        if a != 0.0 {
            self.terms.push((v, a));
        }
        self
    }

    pub fn plus_const(mut self, c: f64) -> Self {
        self.constant += c;
        self
    }

    pub fn add(mut self, other: &Affine, scale: f64) -> Self {
        self.terms.extend(other.terms.iter().map(|(v, a)| (*v, a * scale)));
        self.constant += other.constant * scale;
        self
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|(v, a)| a * x[*v]).sum::<f64>() + self.constant
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Cone {
    Zero,
    Nonneg,
    Soc,
    Pow(f64),
}

/// A convex program under construction.
#[derive(Clone, Debug, Default)]
pub struct ConicProgram {
    n_vars: usize,
    quad_diag: Vec<(usize, f64)>,
    linear: Vec<f64>,
    offset: f64,
    blocks: Vec<(Cone, Vec<Affine>)>,
}

impl ConicProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    /// Adds `count` fresh variables and returns the index of the first.
    pub fn add_vars(&mut self, count: usize) -> usize {
        let first = self.n_vars;
        self.n_vars += count;
        self.linear.resize(self.n_vars, 0.0);
        first
    }

    pub fn add_var(&mut self) -> usize {
        self.add_vars(1)
    }

    pub fn add_linear_cost(&mut self, v: usize, coeff: f64) {
        self.linear[v] += coeff;
    }

    pub fn add_affine_cost(&mut self, e: &Affine, scale: f64) {
        for (v, a) in &e.terms {
            self.linear[*v] += a * scale;
        }
        self.offset += e.constant * scale;
    }

    pub fn add_constant_cost(&mut self, c: f64) {
        self.offset += c;
    }

    /// Adds `weight * (x_v - center)^2` to the objective.
    pub fn add_square_cost(&mut self, v: usize, weight: f64, center: f64) {
        if weight == 0.0 {
            return;
        }
        self.quad_diag.push((v, 2.0 * weight));
        self.linear[v] -= 2.0 * weight * center;
        self.offset += weight * center * center;
    }

    /// `e == 0`.
    pub fn eq(&mut self, e: Affine) {
        self.blocks.push((Cone::Zero, vec![e]));
    }

    /// `e >= 0`.
    pub fn nonneg(&mut self, e: Affine) {
        self.blocks.push((Cone::Nonneg, vec![e]));
    }

    /// `lhs <= rhs`.
    pub fn le(&mut self, lhs: Affine, rhs: Affine) {
        self.nonneg(rhs.add(&lhs, -1.0));
    }

    /// `t >= ||rest||_2`.
    pub fn soc(&mut self, t: Affine, rest: Vec<Affine>) {
        let mut rows = Vec::with_capacity(rest.len() + 1);
        rows.push(t);
        rows.extend(rest);
        self.blocks.push((Cone::Soc, rows));
    }

    /// `t >= |x|^{3/2}`, as the power cone `t^{2/3} 1^{1/3} >= |x|`.
    pub fn three_halves_epigraph(&mut self, t: Affine, x: Affine) {
        self.blocks
            .push((Cone::Pow(2.0 / 3.0), vec![t, Affine::constant(1.0), x]));
    }

    /// `x^2 <= y z` with `y, z >= 0`.
    pub fn rotated_soc(&mut self, y: Affine, z: Affine, x: Affine) {
        let sum = y.clone().add(&z, 1.0);
        let diff = y.add(&z, -1.0);
        self.soc(sum, vec![diff, Affine::default().add(&x, 2.0)]);
    }

    /// `t >= a^{3/2}` for an expression `a` already known to be nonnegative,
    /// via `s^2 <= a` and `a^2 <= s t`. Only second-order cones are used.
    pub fn three_halves_epigraph_soc(&mut self, t: Affine, a: Affine) {
        let s = self.add_var();
        self.rotated_soc(a.clone(), Affine::constant(1.0), Affine::var(s));
        self.rotated_soc(Affine::var(s), t, a);
    }

    /// Objective value at `x`.
    pub fn objective(&self, x: &[f64]) -> f64 {
        let quad: f64 = self.quad_diag.iter().map(|(v, p)| 0.5 * p * x[*v] * x[*v]).sum();
        let lin: f64 = self.linear.iter().zip(x).map(|(q, xi)| q * xi).sum();
        quad + lin + self.offset
    }

    /// Largest violation of any cone constraint at `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for (cone, rows) in &self.blocks {
            let vals: Vec<f64> = rows.iter().map(|r| r.eval(x)).collect();
            let v = match cone {
                Cone::Zero => vals[0].abs(),
                Cone::Nonneg => (-vals[0]).max(0.0),
                Cone::Soc => {
                    let norm = vals[1..].iter().map(|a| a * a).sum::<f64>().sqrt();
                    (norm - vals[0]).max(0.0)
                }
                Cone::Pow(a) => {
                    let lhs = vals[0].max(0.0).powf(*a) * vals[1].max(0.0).powf(1.0 - a);
                    (vals[2].abs() - lhs).max(0.0)
                }
            };
            worst = worst.max(v);
        }
        worst
    }
}

/// Solver outcome with its optimality certificate.
#[derive(Clone, Debug)]
pub struct ConicSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub dual_objective: f64,
    pub iterations: u32,
}

impl ConicSolution {
    /// Absolute primal-dual gap.
    pub fn gap(&self) -> f64 {
        (self.objective - self.dual_objective).abs()
    }
}

/// Port to a convex-program solver.
pub trait ConvexSolverPort: Send + Sync {
    fn solve(&self, program: &ConicProgram) -> Result<ConicSolution>;
}

/// Interior-point backend.
#[derive(Clone, Debug)]
pub struct ClarabelSolver {
    pub tol_gap_abs: f64,
    pub tol_gap_rel: f64,
    pub tol_feas: f64,
    pub max_iter: u32,
    /// Accepted relative certificate gap.
    pub certify_gap_rel: f64,
    /// Accepted relative primal and dual residuals when the solver stops
    /// short of its own tolerances.
    pub certify_residual: f64,
}

impl Default for ClarabelSolver {
    fn default() -> Self {
        Self {
            tol_gap_abs: 1e-10,
            tol_gap_rel: 1e-10,
            tol_feas: 1e-10,
            max_iter: 200,
            certify_gap_rel: 1e-7,
            certify_residual: 1e-7,
        }
    }
}

impl ClarabelSolver {
    /// Tight gap tolerances for small objectives, where trades must be
    /// accurate well below the objective's own scale.
    pub fn precise() -> Self {
        Self { tol_gap_abs: 1e-14, tol_gap_rel: 1e-14, ..Self::default() }
    }

    /// Same gap and feasibility tolerance everywhere.
    pub fn with_tolerance(tol: f64) -> Self {
        Self { tol_gap_abs: tol, tol_gap_rel: tol, tol_feas: tol, ..Self::default() }
    }
}

impl ConvexSolverPort for ClarabelSolver {
    fn solve(&self, program: &ConicProgram) -> Result<ConicSolution> {
        let n = program.n_vars;

        let (pi, pj, pv): (Vec<usize>, Vec<usize>, Vec<f64>) = program
            .quad_diag
            .iter()
            .fold((vec![], vec![], vec![]), |(mut i, mut j, mut v), (k, p)| {
                i.push(*k);
                j.push(*k);
                v.push(*p);
                (i, j, v)
            });
        let p = CscMatrix::new_from_triplets(n, n, pi, pj, pv);

        // Zero and nonnegative rows go first so each collapses into one cone.
        let mut ordered: Vec<&(Cone, Vec<Affine>)> = Vec::with_capacity(program.blocks.len());
        ordered.extend(program.blocks.iter().filter(|b| b.0 == Cone::Zero));
        ordered.extend(program.blocks.iter().filter(|b| b.0 == Cone::Nonneg));
        ordered.extend(
            program
                .blocks
                .iter()
                .filter(|b| !matches!(b.0, Cone::Zero | Cone::Nonneg)),
        );

        let mut ai = Vec::new();
        let mut aj = Vec::new();
        let mut av = Vec::new();
        let mut b = Vec::new();
        let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
        let mut row = 0usize;
        for (cone, rows) in ordered {
            for e in rows {
                for (v, a) in &e.terms {
                    ai.push(row);
                    aj.push(*v);
                    av.push(-a);
                }
                b.push(e.constant);
                row += 1;
            }
            let spec = match cone {
                Cone::Zero => SupportedConeT::ZeroConeT(1),
                Cone::Nonneg => SupportedConeT::NonnegativeConeT(1),
                Cone::Soc => SupportedConeT::SecondOrderConeT(rows.len()),
                Cone::Pow(a) => SupportedConeT::PowerConeT(*a),
            };
            match (cones.last_mut(), &spec) {
                (Some(SupportedConeT::ZeroConeT(k)), SupportedConeT::ZeroConeT(_))
                | (Some(SupportedConeT::NonnegativeConeT(k)), SupportedConeT::NonnegativeConeT(_)) => {
                    *k += 1
                }
                _ => cones.push(spec),
            }
        }
        let a = CscMatrix::new_from_triplets(row, n, ai, aj, av);

        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .max_iter(self.max_iter)
            .tol_gap_abs(self.tol_gap_abs)
            .tol_gap_rel(self.tol_gap_rel)
            .tol_feas(self.tol_feas)
            .presolve_enable(false)
            .build()
            .map_err(|e| Error::Solver(format!("settings: {e:?}")))?;

        let mut solver = DefaultSolver::new(&p, &program.linear, &a, &b, &cones, settings)
            .map_err(|e| Error::Solver(format!("setup: {e:?}")))?;
        solver.solve();
        let sol = &solver.solution;
        let info = &solver.info;
        match sol.status {
            SolverStatus::Solved | SolverStatus::AlmostSolved => {}
            // the best iterate is kept; accept it if it certifies below
            SolverStatus::InsufficientProgress | SolverStatus::MaxIterations
                if info.res_primal.max(info.res_dual) <= self.certify_residual => {}
            other => {
                return Err(Error::Solver(format!(
                    "status {other:?} (gap {:.2e}, residuals {:.2e}/{:.2e})",
                    info.gap_abs, info.res_primal, info.res_dual
                )))
            }
        }
        let out = ConicSolution {
            x: sol.x.clone(),
            objective: sol.obj_val + program.offset,
            dual_objective: sol.obj_val_dual + program.offset,
            iterations: sol.iterations,
        };
        let scale = out.objective.abs().max(out.dual_objective.abs()).max(1.0);
        if !(out.objective.is_finite() && out.gap() <= self.certify_gap_rel * scale) {
            return Err(Error::Solver(format!(
                "uncertified: gap {:.3e} at objective {:.6e}",
                out.gap(),
                out.objective
            )));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn projection_onto_halfspace() {
        // min (x0-1)^2 + (x1-1)^2  s.t.  x0 + x1 <= 1
        let mut p = ConicProgram::new();
        let x = p.add_vars(2);
        p.add_square_cost(x, 1.0, 1.0);
        p.add_square_cost(x + 1, 1.0, 1.0);
        p.le(Affine::var(x).plus(x + 1, 1.0), Affine::constant(1.0));
        let s = ClarabelSolver::default().solve(&p).unwrap();
        assert_abs_diff_eq!(s.x[0], 0.5, epsilon = 1e-7);
        assert_abs_diff_eq!(s.x[1], 0.5, epsilon = 1e-7);
        assert_abs_diff_eq!(s.objective, 0.5, epsilon = 1e-7);
        assert_abs_diff_eq!(p.objective(&s.x), s.objective, epsilon = 1e-7);
    }

    #[test]
    fn three_halves_epigraph_is_tight() {
        // min t - 0.3 x  s.t.  t >= |x|^{3/2}, x <= 1  ->  1.5 sqrt(x) = 0.3
        let mut p = ConicProgram::new();
        let t = p.add_var();
        let x = p.add_var();
        p.add_linear_cost(t, 1.0);
        p.add_linear_cost(x, -0.3);
        p.three_halves_epigraph(Affine::var(t), Affine::var(x));
        p.le(Affine::var(x), Affine::constant(1.0));
        let s = ClarabelSolver::default().solve(&p).unwrap();
        assert_abs_diff_eq!(s.x[x], 0.04, epsilon = 1e-5);
        assert_abs_diff_eq!(s.x[t], 0.008, epsilon = 1e-6);
        assert!(p.max_violation(&s.x) < 1e-7);
    }

    #[test]
    fn three_halves_soc_epigraph_is_tight() {
        // same problem with a >= |x| and the two rotated cones
        let mut p = ConicProgram::new();
        let t = p.add_var();
        let x = p.add_var();
        let a = p.add_var();
        p.add_linear_cost(t, 1.0);
        p.add_linear_cost(x, -0.3);
        p.nonneg(Affine::var(a).plus(x, -1.0));
        p.nonneg(Affine::var(a).plus(x, 1.0));
        p.three_halves_epigraph_soc(Affine::var(t), Affine::var(a));
        p.le(Affine::var(x), Affine::constant(1.0));
        let s = ClarabelSolver::default().solve(&p).unwrap();
        assert_abs_diff_eq!(s.x[x], 0.04, epsilon = 1e-5);
        assert_abs_diff_eq!(s.x[t], 0.008, epsilon = 1e-6);
        assert_abs_diff_eq!(s.objective, 0.008 - 0.012, epsilon = 1e-9);
    }

    #[test]
    fn second_order_cone() {
        // min x0 + x1  s.t.  ||(x0, x1)|| <= 1  ->  x = -(1,1)/sqrt 2
        let mut p = ConicProgram::new();
        let x = p.add_vars(2);
        p.add_linear_cost(x, 1.0);
        p.add_linear_cost(x + 1, 1.0);
        p.soc(Affine::constant(1.0), vec![Affine::var(x), Affine::var(x + 1)]);
        let s = ClarabelSolver::default().solve(&p).unwrap();
        assert_abs_diff_eq!(s.x[0], -0.5f64.sqrt(), epsilon = 1e-7);
        assert_abs_diff_eq!(s.objective, -2f64.sqrt(), epsilon = 1e-7);
    }

    #[test]
    fn infeasible_is_an_error() {
        let mut p = ConicProgram::new();
        let x = p.add_var();
        p.add_linear_cost(x, 1.0);
        p.nonneg(Affine::var(x).plus_const(-1.0));
        p.le(Affine::var(x), Affine::constant(0.0));
        assert!(matches!(ClarabelSolver::default().solve(&p), Err(Error::Solver(_))));
    }
}
