//! The distributed cost-mitigation protocol.
//!
//! A central planner repeatedly broadcasts a price-adjustment signal `ell`,
//! each manager re-solves its own problem against that signal, and the
//! planner aggregates the NAV-weighted trades, solves a separable proximal
//! problem for the consensus net trade and updates a shared dual vector.
//!
//! ```text
//! ell^k       = u^k + rho/M (D net^k - D z_sum^k)
//! x^{i,k+1}   = argmin lambda_i f_i(x) + lambda_i ell' D x + rho/2 ||lambda_i D (x - x^{i,k})||^2
//! z_sum^{k+1} = argmin g(z) - u' D z + rho/(2M) ||D z - D net^{k+1}||^2
//! u^{k+1}     = u^k + varphi rho/M (D net^{k+1} - D z_sum^{k+1})
//! ```
//!
//! [`run_unreduced_admm`] implements the same method with one dual and one
//! split variable per manager; it only exists to cross-check the protocol.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::market_model::{CostModel, NetCost, ScalingMatrix};
use crate::pm_oracle::{quadratic_initial_solve, AdmmStep, PmOracle, QuadraticPmData};

/// Upper end of the admissible dual step-size interval, `(1 + sqrt 5) / 2`.
pub const MAX_DUAL_STEP: f64 = 1.618033;

const MAX_SCALAR_STEPS: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolParams {
    pub rho: f64,
    pub varphi: f64,
    pub rounds: usize,
    pub scaling: ScalingMatrix,
}

impl ProtocolParams {
    pub const DEFAULT_RHO: f64 = 10.0;
    pub const DEFAULT_VARPHI: f64 = 1.0;

    pub fn new(scaling: ScalingMatrix, rounds: usize) -> Self {
        Self { rho: Self::DEFAULT_RHO, varphi: Self::DEFAULT_VARPHI, rounds, scaling }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidParameter(format!("rho must be > 0, got {}", self.rho)));
        }
        if !(self.varphi > 0.0 && self.varphi < MAX_DUAL_STEP) {
            return Err(Error::InvalidParameter(format!(
                "dual step must lie in (0, {MAX_DUAL_STEP}), got {}",
                self.varphi
            )));
        }
        Ok(())
    }
}

/// Planner-side protocol state.
#[derive(Clone, Debug, PartialEq)]
pub struct PlannerState {
    pub u: Vec<f64>,
    pub z_sum: Vec<f64>,
    pub round: usize,
    /// Firm net weights before trading, for the shorting term.
    pub holdings_net: Option<Vec<f64>>,
}

impl PlannerState {
    pub fn new(n: usize, holdings_net: Option<Vec<f64>>) -> Self {
        Self { u: vec![0.0; n], z_sum: vec![0.0; n], round: 0, holdings_net }
    }
}

/// One protocol message.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    /// A manager's NAV-weighted trade `lambda_i x^{i,k}`.
    TradeSubmission { pm_id: usize, round: usize, weights: Vec<f64>, nav_weight: f64 },
    BroadcastSignal { round: usize, ell: Vec<f64> },
    RoundComplete { round: usize },
}

fn push_num(out: &mut String, x: f64) -> Result<()> {
    if !x.is_finite() {
        return Err(Error::Numerical(format!("cannot serialize non-finite value {x}")));
    }
    write!(out, "{x:.16e}").expect("writing to a String");
    Ok(())
}

fn push_vec(out: &mut String, v: &[f64]) -> Result<()> {
    out.push('[');
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        push_num(out, *x)?;
    }
    out.push(']');
    Ok(())
}

impl Message {
    /// Single-line JSON with every double written to 17 significant digits.
    pub fn to_json_line(&self) -> Result<String> {
        let mut s = String::with_capacity(64);
        match self {
            Message::TradeSubmission { pm_id, round, weights, nav_weight } => {
                write!(s, "{{\"type\":\"trade_submission\",\"pm_id\":{pm_id},\"round\":{round},\"weights\":")
                    .expect("writing to a String");
                push_vec(&mut s, weights)?;
                s.push_str(",\"nav_weight\":");
                push_num(&mut s, *nav_weight)?;
                s.push('}');
            }
            Message::BroadcastSignal { round, ell } => {
                write!(s, "{{\"type\":\"broadcast_signal\",\"round\":{round},\"ell\":")
                    .expect("writing to a String");
                push_vec(&mut s, ell)?;
                s.push('}');
            }
            Message::RoundComplete { round } => {
                write!(s, "{{\"type\":\"round_complete\",\"round\":{round}}}")
                    .expect("writing to a String");
            }
        }
        Ok(s)
    }
}

/// Planner state snapshot at the start of a round.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    /// Broadcast signal; `None` for the final state.
    pub ell: Option<Vec<f64>>,
    pub net: Vec<f64>,
    pub z_sum: Vec<f64>,
    pub u: Vec<f64>,
}

/// Everything the planner saw and sent.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Transcript {
    pub messages: Vec<Message>,
    pub rounds: Vec<RoundRecord>,
}

impl Transcript {
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for m in &self.messages {
            writeln!(out, "{}", m.to_json_line()?)?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<Message>> {
        let mut out = Vec::new();
        for line in input.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                out.push(serde_json::from_str(&line)?);
            }
        }
        Ok(out)
    }
}

/// NAV weights `lambda_i = V_i / sum V`.
pub fn nav_weights(navs: &[f64]) -> Result<Vec<f64>> {
    if navs.is_empty() {
        return Err(Error::InvalidParameter("at least one manager is required".into()));
    }
    if navs.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidParameter("NAVs must be positive".into()));
    }
    let total: f64 = navs.iter().sum();
    Ok(navs.iter().map(|v| v / total).collect())
}

/// `sum_i lambda_i x_i`, accumulated in manager order.
pub fn net_trade(lambda: &[f64], trades: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_len(lambda.len(), trades.len())?;
    let n = trades.first().map_or(0, Vec::len);
    let mut net = vec![0.0; n];
    for (l, x) in lambda.iter().zip(trades) {
        check_len(n, x.len())?;
        for (acc, xj) in net.iter_mut().zip(x) {
            *acc += l * xj;
        }
    }
    Ok(net)
}

/// `ell = u + rho/M (D net - D z_sum)`.
pub fn broadcast_signal(
    state: &PlannerState,
    net: &[f64],
    params: &ProtocolParams,
    num_pms: usize,
) -> Result<Vec<f64>> {
    let n = state.u.len();
    check_len(n, net.len())?;
    check_len(n, state.z_sum.len())?;
    check_len(n, params.scaling.len())?;
    let step = params.rho / num_pms as f64;
    Ok((0..n)
        .map(|j| {
            let d = params.scaling[j];
            state.u[j] + step * (-d * state.z_sum[j] + d * net[j])
        })
        .collect())
}

/// `u + varphi rho/M (D net - D z_next)`.
pub fn dual_update(
    state: &PlannerState,
    net: &[f64],
    z_next: &[f64],
    params: &ProtocolParams,
    num_pms: usize,
) -> Result<Vec<f64>> {
    let n = state.u.len();
    check_len(n, net.len())?;
    check_len(n, z_next.len())?;
    let step = params.varphi * params.rho / num_pms as f64;
    Ok((0..n)
        .map(|j| {
            let d = params.scaling[j];
            state.u[j] + step * (d * net[j] - d * z_next[j])
        })
        .collect())
}

/// Minimizes `g_j(z) - c z + q/2 (z - center)^2` over the box of asset `j`,
/// where `g_j` is the coordinate cost of `cost` and `q > 0`.
///
/// Kinks and box ends are tested against the subgradient interval first;
/// otherwise the root of the derivative on the bracketing smooth segment is
/// found by Newton steps safeguarded with bisection.
pub fn solve_scalar_prox(cost: &NetCost, j: usize, c: f64, q: f64, center: f64) -> Result<f64> {
    if !(q > 0.0 && q.is_finite()) {
        return Err(Error::InvalidParameter(format!("proximal weight must be > 0, got {q}")));
    }
    let grad = |z: f64| cost.subgradient(j, z).shift(-c + q * (z - center));
    let (lo, hi) = cost.bounds(j);

    let mut breaks: Vec<f64> = cost.kinks(j).into_iter().filter(|k| *k >= lo && *k <= hi).collect();
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    for &k in &breaks {
        if grad(k).contains(0.0) {
            return Ok(k);
        }
    }
    if lo.is_finite() && grad(lo).hi >= 0.0 {
        return Ok(lo);
    }
    if hi.is_finite() && grad(hi).lo <= 0.0 {
        return Ok(hi);
    }

    // Locate the smooth segment holding the root.
    let mut left = lo;
    let mut right = hi;
    for &k in &breaks {
        if grad(k).hi < 0.0 {
            left = k;
        } else {
            right = k;
            break;
        }
    }
    let anchor = if left.is_finite() { left } else { right };
    let mut width = 1.0_f64.max(anchor.abs()).max((center - anchor).abs());
    let mut expand = 0;
    while !left.is_finite() {
        let cand = right - width;
        if grad(cand).hi < 0.0 {
            left = cand;
        } else {
            right = cand;
        }
        width *= 2.0;
        expand += 1;
        if expand > MAX_SCALAR_STEPS {
            return Err(Error::Numerical("scalar prox: cannot bracket from below".into()));
        }
    }
    while !right.is_finite() {
        let cand = left + width;
        if grad(cand).lo > 0.0 {
            right = cand;
        } else {
            left = cand;
        }
        width *= 2.0;
        expand += 1;
        if expand > MAX_SCALAR_STEPS {
            return Err(Error::Numerical("scalar prox: cannot bracket from above".into()));
        }
    }

    let mut z = 0.5 * (left + right);
    for _ in 0..MAX_SCALAR_STEPS {
        let f = grad(z).lo;
        if f == 0.0 {
            return Ok(z);
        }
        if f < 0.0 {
            left = z;
        } else {
            right = z;
        }
        let slope = cost.curvature(j, z) + q;
        let newton = z - f / slope;
        let next = if newton > left && newton < right { newton } else { 0.5 * (left + right) };
        let tol = 4.0 * f64::EPSILON * z.abs().max(f64::MIN_POSITIVE);
        if (next - z).abs() <= tol || right - left <= tol {
            return Ok(next);
        }
        z = next;
    }
    Err(Error::Numerical(format!(
        "scalar prox for asset {j} did not converge in {MAX_SCALAR_STEPS} steps"
    )))
}

/// `argmin_z g(z) - u' D z + rho/(2M) ||D z - D net||^2`, coordinate-wise.
pub fn solve_net_update(
    state: &PlannerState,
    net: &[f64],
    params: &ProtocolParams,
    num_pms: usize,
    cost: &CostModel,
) -> Result<Vec<f64>> {
    let n = state.u.len();
    check_len(n, net.len())?;
    check_len(n, cost.len())?;
    check_len(n, params.scaling.len())?;
    let g = NetCost::new(cost.clone(), state.holdings_net.clone())?;
    (0..n)
        .map(|j| {
            let d = params.scaling[j];
            let q = params.rho * d * d / num_pms as f64;
            solve_scalar_prox(&g, j, state.u[j] * d, q, net[j])
        })
        .collect()
}

/// A manager whose oracle failed during the rounds.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleFailure {
    pub pm: usize,
    pub round: usize,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct ProtocolOutcome {
    pub lambda: Vec<f64>,
    /// Trades after the last completed round.
    pub trades: Vec<Vec<f64>>,
    /// Trades of every completed round, starting with the initial solves.
    pub history: Vec<Vec<Vec<f64>>>,
    pub state: PlannerState,
    pub net: Vec<f64>,
    pub transcript: Transcript,
    pub failure: Option<OracleFailure>,
}

fn submissions<'a>(round: usize, lambda: &'a [f64], trades: &'a [Vec<f64>]) -> impl Iterator<Item = Message> + 'a {
    trades.iter().enumerate().map(move |(i, x)| Message::TradeSubmission {
        pm_id: i,
        round,
        weights: x.iter().map(|v| lambda[i] * v).collect(),
        nav_weight: lambda[i],
    })
}

/// Initial trades and planner state: `u = 0` and `z_sum` from one net update
/// against the initial net trade.
pub fn initialize(
    oracles: &[&dyn PmOracle],
    navs: &[f64],
    params: &ProtocolParams,
    cost: &CostModel,
    holdings_net: Option<Vec<f64>>,
) -> Result<(PlannerState, Vec<Vec<f64>>)> {
    params.validate()?;
    check_len(oracles.len(), navs.len())?;
    let lambda = nav_weights(navs)?;
    let n = cost.len();
    let trades = oracles
        .par_iter()
        .enumerate()
        .map(|(i, o)| {
            let x = o
                .initial_solve()
                .map_err(|e| Error::Oracle { pm: i, reason: e.to_string() })?;
            check_len(n, x.len())?;
            Ok(x)
        })
        .collect::<Result<Vec<_>>>()?;
    let net = net_trade(&lambda, &trades)?;
    let mut state = PlannerState::new(n, holdings_net);
    state.z_sum = solve_net_update(&state, &net, params, oracles.len(), cost)?;
    Ok((state, trades))
}

/// Runs the protocol for `params.rounds` rounds.
///
/// An oracle failure during the rounds stops the run; the outcome then holds
/// the last completed round and describes the failure.
pub fn run_protocol(
    oracles: &[&dyn PmOracle],
    navs: &[f64],
    params: &ProtocolParams,
    cost: &CostModel,
    holdings_net: Option<Vec<f64>>,
) -> Result<ProtocolOutcome> {
    let (mut state, mut trades) = initialize(oracles, navs, params, cost, holdings_net)?;
    let lambda = nav_weights(navs)?;
    let m = oracles.len();
    let mut net = net_trade(&lambda, &trades)?;
    let mut transcript = Transcript::default();
    transcript.messages.extend(submissions(0, &lambda, &trades));
    let mut history = vec![trades.clone()];
    let mut failure = None;

    for k in 0..params.rounds {
        let ell = broadcast_signal(&state, &net, params, m)?;
        transcript.rounds.push(RoundRecord {
            round: k,
            ell: Some(ell.clone()),
            net: net.clone(),
            z_sum: state.z_sum.clone(),
            u: state.u.clone(),
        });
        transcript.messages.push(Message::BroadcastSignal { round: k, ell: ell.clone() });

        let results: Vec<Result<Vec<f64>>> = oracles
            .par_iter()
            .enumerate()
            .map(|(i, o)| {
                let step = AdmmStep {
                    ell: &ell,
                    x_prev: &trades[i],
                    lambda: lambda[i],
                    rho: params.rho,
                    scaling: &params.scaling,
                };
                let x = o.admm_step(&step)?;
                check_len(trades[i].len(), x.len())?;
                Ok(x)
            })
            .collect();
        if let Some((pm, err)) = results.iter().enumerate().find_map(|(i, r)| r.as_ref().err().map(|e| (i, e))) {
            failure = Some(OracleFailure { pm, round: k + 1, reason: err.to_string() });
            transcript.rounds.pop();
            break;
        }
        let next: Vec<Vec<f64>> = results.into_iter().map(|r| r.expect("checked above")).collect();
        transcript.messages.extend(submissions(k + 1, &lambda, &next));

        let net_next = net_trade(&lambda, &next)?;
        let z_next = solve_net_update(&state, &net_next, params, m, cost)?;
        state.u = dual_update(&state, &net_next, &z_next, params, m)?;
        state.z_sum = z_next;
        state.round = k + 1;
        trades = next;
        net = net_next;
        history.push(trades.clone());
        transcript.messages.push(Message::RoundComplete { round: k + 1 });
    }
    transcript.rounds.push(RoundRecord {
        round: state.round,
        ell: None,
        net: net.clone(),
        z_sum: state.z_sum.clone(),
        u: state.u.clone(),
    });
    Ok(ProtocolOutcome { lambda, trades, history, state, net, transcript, failure })
}

/// Iterates of the per-manager-dual form, indexed `[round][pm][asset]`.
#[derive(Clone, Debug, Default)]
pub struct UnreducedHistory {
    /// NAV-scaled trades `lambda_i x_i`.
    pub x_scaled: Vec<Vec<Vec<f64>>>,
    pub z: Vec<Vec<Vec<f64>>>,
    pub u: Vec<Vec<Vec<f64>>>,
    /// `sum_i z_i` per round.
    pub z_sum: Vec<Vec<f64>>,
}

impl UnreducedHistory {
    /// Unscaled trades of round `k`.
    pub fn trades(&self, k: usize, lambda: &[f64]) -> Vec<Vec<f64>> {
        self.x_scaled[k]
            .iter()
            .zip(lambda)
            .map(|(x, l)| x.iter().map(|v| v / l).collect())
            .collect()
    }
}

/// Plain bisection for `0 in dg(s) - mean_u D + rho D^2/M (s - total)` over
/// the box.
fn split_sum_root(g: &NetCost, j: usize, mean_u_d: f64, q: f64, total: f64) -> Result<f64> {
    let grad = |s: f64| g.subgradient(j, s).shift(-mean_u_d + q * (s - total));
    let (lo, hi) = g.bounds(j);
    let mut a = if lo.is_finite() { lo } else { -1.0 };
    let mut b = if hi.is_finite() { hi } else { 1.0 };
    let mut grow = 0;
    while !lo.is_finite() && grad(a).hi >= 0.0 && grow < 200 {
        a = 2.0 * a - 1.0;
        grow += 1;
    }
    while !hi.is_finite() && grad(b).lo <= 0.0 && grow < 400 {
        b = 2.0 * b + 1.0;
        grow += 1;
    }
    if grad(a).hi >= 0.0 {
        return Ok(a);
    }
    if grad(b).lo <= 0.0 {
        return Ok(b);
    }
    for _ in 0..400 {
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            return Ok(mid);
        }
        let s = grad(mid);
        if s.lo > 0.0 {
            b = mid;
        } else if s.hi < 0.0 {
            a = mid;
        } else {
            return Ok(mid);
        }
    }
    Ok(0.5 * (a + b))
}

/// ADMM on the split problem with one dual vector and one copy of the net
/// trade per manager, for quadratic managers.
///
/// Starts from equal (zero) duals and the same initial point as
/// [`run_protocol`], so its iterates can be compared round by round.
pub fn run_unreduced_admm(
    problems: &[QuadraticPmData],
    navs: &[f64],
    params: &ProtocolParams,
    cost: &CostModel,
    holdings_net: Option<Vec<f64>>,
) -> Result<UnreducedHistory> {
    params.validate()?;
    check_len(problems.len(), navs.len())?;
    let lambda = nav_weights(navs)?;
    let m = problems.len();
    let mf = m as f64;
    let n = cost.len();
    for p in problems {
        check_len(n, p.len())?;
    }
    let g = NetCost::new(cost.clone(), holdings_net)?;
    let d = &params.scaling;
    let rho = params.rho;

    let sum_over = |v: &[Vec<f64>], j: usize| v.iter().map(|x| x[j]).sum::<f64>();
    let z_step = |xs: &[Vec<f64>], us: &[Vec<f64>]| -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let mut z = vec![vec![0.0; n]; m];
        let mut total_z = vec![0.0; n];
        for j in 0..n {
            let total_x = sum_over(xs, j);
            let mean_u = sum_over(us, j) / mf;
            let q = rho * d[j] * d[j] / mf;
            let s = split_sum_root(&g, j, mean_u * d[j], q, total_x)?;
            let sum_shift: f64 = us.iter().map(|u| u[j] / (rho * d[j])).sum();
            let common = (total_x + sum_shift - s) / mf;
            for i in 0..m {
                z[i][j] = xs[i][j] + us[i][j] / (rho * d[j]) - common;
            }
            total_z[j] = s;
        }
        Ok((z, total_z))
    };

    let x0: Vec<Vec<f64>> = problems
        .iter()
        .zip(&lambda)
        .map(|(p, l)| quadratic_initial_solve(p).iter().map(|v| l * v).collect())
        .collect();
    let u0 = vec![vec![0.0; n]; m];
    let (z0, s0) = z_step(&x0, &u0)?;
    let mut hist = UnreducedHistory {
        x_scaled: vec![x0],
        z: vec![z0],
        u: vec![u0],
        z_sum: vec![s0],
    };

    for _ in 0..params.rounds {
        let z = hist.z.last().expect("nonempty");
        let u = hist.u.last().expect("nonempty");
        let x: Vec<Vec<f64>> = (0..m)
            .map(|i| {
                let p = &problems[i];
                (0..n)
                    .map(|j| {
                        if !p.tradable[j] {
                            return 0.0;
                        }
                        let dj = d[j];
                        (p.target[j] - u[i][j] * dj + rho * dj * dj * z[i][j])
                            / (1.0 / lambda[i] + rho * dj * dj)
                    })
                    .collect()
            })
            .collect();
        let (z_next, s_next) = z_step(&x, u)?;
        let u_next: Vec<Vec<f64>> = (0..m)
            .map(|i| {
                (0..n)
                    .map(|j| u[i][j] + params.varphi * rho * (d[j] * x[i][j] - d[j] * z_next[i][j]))
                    .collect()
            })
            .collect();
        hist.x_scaled.push(x);
        hist.z.push(z_next);
        hist.u.push(u_next);
        hist.z_sum.push(s_next);
    }
    Ok(hist)
}
