//! Multi-period simulation of a firm of portfolio managers.
//!
//! Each rebalance period every manager builds its Markowitz problem from
//! its current holdings and the period's models. The scenario decides how
//! trades are chosen:
//!
//! * `independent`: each manager solves alone, pricing its own trades.
//! * `full_cooperative`: the firm solves the joint problem centrally.
//! * `admm_k:<K>`: the distributed protocol runs for `K` rounds.
//!
//! The net trade is executed, the firm is charged the unscaled trading cost
//! and the borrow cost of its net shorts, the costs are allocated to the
//! managers, and holdings drift with the period's returns.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conic::ConvexSolverPort;
use crate::coordination::{nav_weights, net_trade, run_protocol, Message, ProtocolParams};
use crate::error::{check_len, Error, Result};
use crate::joint_solver::{solve_joint_general, JointProblem, PmSpec};
use crate::market_model::{compute_scaling, CostModel, CostModelParams};
use crate::pm_oracle::{markowitz_initial_solve, MarkowitzOracle, PmOracle, PmParams, PmProblemData};
use crate::synthetic_market::{
    estimate_factor_model, format_sig12, gen_alpha_paths, AlphaGenSpec, FactorModel, MarketSeries,
};

/// Largest fraction of rebalances allowed to fall back to a zero trade.
pub const MAX_FLAGGED_FRACTION: f64 = 0.05;

/// How trades are chosen each rebalance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scenario {
    Independent,
    FullCooperative,
    /// The protocol with a fixed number of rounds.
    Admm(usize),
}

impl Scenario {
    pub const VALID_NAMES: &'static str = "independent, full_cooperative, admm_2_iter, admm_5_iter, admm_k:<K>";
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scenario::Independent => f.write_str("independent"),
            Scenario::FullCooperative => f.write_str("full_cooperative"),
            Scenario::Admm(k @ (2 | 5)) => write!(f, "admm_{k}_iter"),
            Scenario::Admm(k) => write!(f, "admm_k:{k}"),
        }
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::Config(format!("unknown scenario `{s}`; valid names: {}", Scenario::VALID_NAMES));
        match s {
            "independent" => Ok(Scenario::Independent),
            "full_cooperative" => Ok(Scenario::FullCooperative),
            "admm_2_iter" => Ok(Scenario::Admm(2)),
            "admm_5_iter" => Ok(Scenario::Admm(5)),
            _ => s.strip_prefix("admm_k:").and_then(|k| k.parse().ok()).map(Scenario::Admm).ok_or_else(unknown),
        }
    }
}

/// Protocol hyperparameters; the scaling is rebuilt from the firm's impact
/// coefficients every rebalance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub rho: f64,
    pub varphi: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self { rho: ProtocolParams::DEFAULT_RHO, varphi: ProtocolParams::DEFAULT_VARPHI }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BacktestConfig {
    pub num_pms: usize,
    pub periods: usize,
    /// Periods between optimizations.
    pub rebalance_every: usize,
    /// Annualized risk targets are drawn uniformly from this range.
    pub risk_target_range: [f64; 2],
    /// Initial NAVs are drawn log-uniformly between these powers of ten.
    pub nav_log10_range: [f64; 2],
    /// Share of the universe each manager may trade.
    pub universe_fraction: f64,
    /// Market-impact coefficient `b`, shared by all assets.
    pub impact_coeff: f64,
    pub n_factors: usize,
    pub periods_per_year: usize,
    pub pm: PmParams,
    /// Read from its own section of a run configuration.
    #[serde(skip)]
    pub protocol: ProtocolConfig,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            num_pms: 4,
            periods: 500,
            rebalance_every: 1,
            risk_target_range: [0.06, 0.15],
            nav_log10_range: [6.5, 7.5],
            universe_fraction: 0.75,
            impact_coeff: 1.0,
            n_factors: crate::synthetic_market::DEFAULT_FACTORS,
            periods_per_year: 252,
            pm: PmParams::default(),
            protocol: ProtocolConfig::default(),
        }
    }
}

impl BacktestConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_pms == 0 || self.periods == 0 || self.rebalance_every == 0 {
            return bad("backtest.num_pms, backtest.periods and backtest.rebalance_every must be positive".into());
        }
        let [r_lo, r_hi] = self.risk_target_range;
        if !(r_lo >= 0.0 && r_lo <= r_hi) {
            return bad(format!("backtest.risk_target_range must satisfy 0 <= lo <= hi, got {:?}", self.risk_target_range));
        }
        let [n_lo, n_hi] = self.nav_log10_range;
        if !(n_lo.is_finite() && n_lo <= n_hi && n_hi.is_finite()) {
            return bad(format!("backtest.nav_log10_range must satisfy lo <= hi, got {:?}", self.nav_log10_range));
        }
        if !(self.universe_fraction > 0.0 && self.universe_fraction <= 1.0) {
            return bad(format!("backtest.universe_fraction must lie in (0, 1], got {}", self.universe_fraction));
        }
        if !(self.impact_coeff >= 0.0) || self.n_factors == 0 || self.periods_per_year == 0 {
            return bad("backtest.impact_coeff must be >= 0 and n_factors, periods_per_year positive".into());
        }
        if !(self.protocol.rho > 0.0) || !(self.protocol.varphi > 0.0 && self.protocol.varphi < crate::coordination::MAX_DUAL_STEP) {
            return bad(format!("protocol parameters out of range: {:?}", self.protocol));
        }
        self.pm.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

/// Independent sub-seed for one consumer of a run seed.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

const PM_STREAM: u64 = 1;
const ALPHA_STREAM: u64 = 2;

/// Static description of one manager.
#[derive(Clone, Debug, PartialEq)]
pub struct PmSetup {
    pub initial_nav: f64,
    /// Annualized risk target.
    pub risk_target: f64,
    pub tradable: Vec<bool>,
}

/// Draws risk targets, NAVs and universes for every manager.
pub fn draw_pm_setups(config: &BacktestConfig, n_assets: usize, seed: u64) -> Vec<PmSetup> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = ((config.universe_fraction * n_assets as f64).round() as usize).clamp(1, n_assets);
    let uniform = |rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]| if hi > lo { rng.random_range(lo..hi) } else { lo };
    (0..config.num_pms)
        .map(|_| {
            let risk_target = uniform(&mut rng, config.risk_target_range);
            let initial_nav = 10f64.powf(uniform(&mut rng, config.nav_log10_range));
            let mut tradable = vec![false; n_assets];
            for j in sample(&mut rng, n_assets, count) {
                tradable[j] = true;
            }
            PmSetup { initial_nav, risk_target, tradable }
        })
        .collect()
}

/// Everything a scenario run reads; shared unchanged by all scenarios of a seed.
#[derive(Clone, Debug)]
pub struct BacktestInputs {
    pub seed: u64,
    pub market: MarketSeries,
    /// Per-manager alpha per period, already divided by the horizon.
    pub alphas: Vec<DMatrix<f64>>,
    /// Risk model per period, estimated on the forward window.
    pub risk_models: Vec<FactorModel>,
    pub pms: Vec<PmSetup>,
    pub periods: usize,
}

/// Derives alphas, risk models and manager setups from a market.
///
/// The market needs `periods + horizon` rows: period `t` looks at returns
/// `t+1 ..= t+horizon` and realizes return `t+1`.
pub fn prepare_inputs(
    config: &BacktestConfig,
    alpha: &AlphaGenSpec,
    market: MarketSeries,
    seed: u64,
) -> Result<BacktestInputs> {
    config.validate()?;
    alpha.validate()?;
    let h = alpha.horizon;
    let needed = config.periods + h;
    if market.periods() < needed {
        return Err(Error::MissingInput(format!(
            "market has {} periods, the backtest needs {needed} ({} + horizon {h})",
            market.periods(),
            config.periods
        )));
    }
    let n = market.n_assets();
    let pms = draw_pm_setups(config, n, sub_seed(seed, PM_STREAM));
    let alpha_cfg = alpha.draw(config.num_pms, sub_seed(seed, ALPHA_STREAM));
    let realized = market.forward_returns(h).rows(0, config.periods).into_owned();
    let sigma_asset = market.sample_covariance() * h as f64;
    let alphas = gen_alpha_paths(&alpha_cfg, &realized, &sigma_asset)?
        .into_iter()
        .map(|a| a / h as f64)
        .collect();
    let risk_models = (0..config.periods)
        .map(|t| estimate_factor_model(&market.forward_window(t, h), config.n_factors))
        .collect::<Result<Vec<_>>>()?;
    Ok(BacktestInputs { seed, market, alphas, risk_models, pms, periods: config.periods })
}

/// Holdings and cost ledgers of every manager.
#[derive(Clone, Debug, PartialEq)]
pub struct AccountState {
    pub weights: Vec<Vec<f64>>,
    pub cash: Vec<f64>,
    pub navs: Vec<f64>,
    /// Cumulative trading cost per manager, in currency.
    pub tcost: Vec<f64>,
    /// Cumulative borrow cost per manager, in currency.
    pub short_cost: Vec<f64>,
}

impl AccountState {
    /// All-cash start.
    pub fn new(navs: Vec<f64>, n_assets: usize) -> Self {
        let m = navs.len();
        Self {
            weights: vec![vec![0.0; n_assets]; m],
            cash: vec![1.0; m],
            navs,
            tcost: vec![0.0; m],
            short_cost: vec![0.0; m],
        }
    }

    pub fn firm_nav(&self) -> f64 {
        self.navs.iter().sum()
    }

    pub fn firm_tcost(&self) -> f64 {
        self.tcost.iter().sum()
    }

    pub fn lambda(&self) -> Result<Vec<f64>> {
        nav_weights(&self.navs)
    }

    /// Firm holdings as weights of firm NAV.
    pub fn net_weights(&self) -> Result<Vec<f64>> {
        net_trade(&self.lambda()?, &self.weights)
    }
}

/// Costs and P&L of one executed period.
#[derive(Clone, Debug, PartialEq)]
pub struct PeriodCosts {
    pub net_trade: Vec<f64>,
    /// Firm trading cost per asset, in currency.
    pub tcost_per_asset: Vec<f64>,
    /// Firm borrow cost per asset, in currency.
    pub short_per_asset: Vec<f64>,
    /// Trading cost charged to each manager.
    pub pm_tcost: Vec<f64>,
    pub pm_short: Vec<f64>,
    /// Holding and cash P&L after costs were paid.
    pub pnl: f64,
}

/// Executes trades, charges costs and applies one period of returns.
///
/// `cost` supplies spreads and impact inputs; its NAV is replaced by the
/// firm NAV and its `gamma_*` scales are ignored. The borrow cost is charged
/// at `risk_free` on the firm's post-trade net short weights.
pub fn step_period(
    state: &AccountState,
    trades: &[Vec<f64>],
    returns: &[f64],
    risk_free: f64,
    cost: &CostModelParams,
) -> Result<(AccountState, PeriodCosts)> {
    let m = state.navs.len();
    let n = returns.len();
    check_len(m, trades.len())?;
    let firm_nav = state.firm_nav();
    let lambda = state.lambda()?;
    let z = net_trade(&lambda, trades)?;
    check_len(n, z.len())?;
    let model = CostModel::new(CostModelParams { nav: firm_nav, ..cost.clone() })?;
    let tcost_per_asset: Vec<f64> = model.tcost_per_asset(&z)?.into_iter().map(|c| c * firm_nav).collect();

    let post: Vec<Vec<f64>> =
        state.weights.iter().zip(trades).map(|(w, x)| w.iter().zip(x).map(|(a, b)| a + b).collect()).collect();
    let mut short_per_asset = vec![0.0; n];
    let mut pm_tcost = vec![0.0; m];
    let mut pm_short = vec![0.0; m];
    for j in 0..n {
        let gross: f64 = (0..m).map(|i| lambda[i] * trades[i][j].abs()).sum();
        if gross > 0.0 {
            for i in 0..m {
                pm_tcost[i] += tcost_per_asset[j] * lambda[i] * trades[i][j].abs() / gross;
            }
        }
        let net: f64 = (0..m).map(|i| lambda[i] * post[i][j]).sum();
        if net < 0.0 {
            short_per_asset[j] = firm_nav * risk_free * -net;
            let shorts: f64 = (0..m).map(|i| lambda[i] * (-post[i][j]).max(0.0)).sum();
            for i in 0..m {
                pm_short[i] += short_per_asset[j] * lambda[i] * (-post[i][j]).max(0.0) / shorts;
            }
        }
    }

    let mut next = state.clone();
    let mut pnl = 0.0;
    for i in 0..m {
        let v = state.navs[i];
        let holdings: Vec<f64> = post[i].iter().zip(returns).map(|(w, r)| v * w * (1.0 + r)).collect();
        let cash_before = v * (state.cash[i] - trades[i].iter().sum::<f64>()) - pm_tcost[i] - pm_short[i];
        let cash = cash_before * (1.0 + risk_free);
        pnl += post[i].iter().zip(returns).map(|(w, r)| v * w * r).sum::<f64>() + cash_before * risk_free;
        let nav = holdings.iter().sum::<f64>() + cash;
        if !(nav > 0.0 && nav.is_finite()) {
            return Err(Error::Numerical(format!("manager {i} NAV fell to {nav}; scenario halted")));
        }
        next.weights[i] = holdings.iter().map(|h| h / nav).collect();
        next.cash[i] = cash / nav;
        next.navs[i] = nav;
        next.tcost[i] += pm_tcost[i];
        next.short_cost[i] += pm_short[i];
    }
    Ok((next, PeriodCosts { net_trade: z, tcost_per_asset, short_per_asset, pm_tcost, pm_short, pnl }))
}

/// Annualized performance of a NAV path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerformanceStats {
    pub ann_return: f64,
    pub ann_volatility: f64,
    /// `None` when the volatility is zero.
    pub sharpe: Option<f64>,
}

/// Statistics of the per-period returns of `navs` (one more entry than
/// `risk_free`).
pub fn compute_stats(navs: &[f64], risk_free: &[f64], periods_per_year: f64) -> Result<PerformanceStats> {
    if navs.len() < 3 {
        return Err(Error::InvalidParameter(format!("need at least 2 periods of returns, got {}", navs.len().saturating_sub(1))));
    }
    check_len(navs.len() - 1, risk_free.len())?;
    let r: Vec<f64> = navs.windows(2).map(|w| w[1] / w[0] - 1.0).collect();
    let count = r.len() as f64;
    let mean = r.iter().sum::<f64>() / count;
    let var = r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / count;
    let ann_return = mean * periods_per_year;
    let std = var.sqrt();
    let ann_volatility = if std <= 1e-12 * mean.abs() || std == 0.0 { 0.0 } else { std * periods_per_year.sqrt() };
    let rf = risk_free.iter().sum::<f64>() / count * periods_per_year;
    let sharpe = (ann_volatility > 0.0).then(|| (ann_return - rf) / ann_volatility);
    Ok(PerformanceStats { ann_return, ann_volatility, sharpe })
}

/// Objective of the joint problem at the cooperative and at the independent trades.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DominanceRecord {
    pub period: usize,
    pub cooperative: f64,
    pub independent: f64,
}

/// Switches for optional bookkeeping.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RunOptions {
    pub keep_transcripts: bool,
    /// Also solve the independent problems at every cooperative rebalance
    /// and record both joint objectives.
    pub check_dominance: bool,
}

/// Path of one scenario on one seed. Series have `periods + 1` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioResult {
    pub scenario: Scenario,
    pub seed: u64,
    pub firm_nav: Vec<f64>,
    /// Indexed `[pm][t]`.
    pub pm_nav: Vec<Vec<f64>>,
    /// Cumulative trading cost in currency.
    pub firm_tcost: Vec<f64>,
    pub pm_tcost: Vec<Vec<f64>>,
    /// Cumulative trading cost as a fraction of the NAV at the time it was paid.
    pub firm_tcost_frac: Vec<f64>,
    pub pm_tcost_frac: Vec<Vec<f64>>,
    pub firm_short_cost: f64,
    /// Executed net trade per period, as weights of firm NAV.
    pub net_trades: Vec<Vec<f64>>,
    pub risk_free: Vec<f64>,
    pub rebalances: usize,
    /// Rebalance periods that fell back to a zero trade.
    pub flagged: Vec<(usize, String)>,
    /// Protocol messages per rebalance period.
    pub transcripts: Vec<(usize, Vec<Message>)>,
    pub dominance: Vec<DominanceRecord>,
}

impl ScenarioResult {
    pub fn num_pms(&self) -> usize {
        self.pm_nav.len()
    }
}

/// Builds each manager's problem for period `t`.
pub fn build_pm_problems(
    config: &BacktestConfig,
    inputs: &BacktestInputs,
    state: &AccountState,
    t: usize,
) -> Result<Vec<PmProblemData>> {
    let ppy = config.periods_per_year as f64;
    let risk = &inputs.risk_models[t];
    let firm = firm_cost_params(config, inputs, state.firm_nav(), t);
    inputs
        .pms
        .iter()
        .enumerate()
        .map(|(i, pm)| {
            let data = PmProblemData {
                alpha: inputs.alphas[i].row(t).iter().copied().collect(),
                factor_loadings: risk.loadings.clone(),
                idio_var: risk.idio_var.clone(),
                risk_free: inputs.market.risk_free[t],
                w_curr: state.weights[i].clone(),
                c_curr: state.cash[i],
                risk_target: pm.risk_target / ppy.sqrt(),
                params: config.pm,
                cost: CostModel::new(CostModelParams { nav: state.navs[i], ..firm.clone() })?,
                tradable: pm.tradable.clone(),
            };
            data.validate()?;
            Ok(data)
        })
        .collect()
}

/// Firm cost inputs for period `t`; volatility comes from the risk model.
pub fn firm_cost_params(config: &BacktestConfig, inputs: &BacktestInputs, firm_nav: f64, t: usize) -> CostModelParams {
    let n = inputs.market.n_assets();
    let cov_diag = inputs.risk_models[t].covariance().diagonal();
    let mut p = CostModelParams::new(
        inputs.market.spreads.row(t).iter().copied().collect(),
        vec![config.impact_coeff; n],
        cov_diag.iter().map(|v| v.max(0.0).sqrt()).collect(),
        inputs.market.volumes.row(t).iter().copied().collect(),
        firm_nav,
    );
    p.gamma_tc = config.pm.gamma_tc;
    p.gamma_short = config.pm.gamma_short;
    p.short_rate = inputs.market.risk_free[t];
    p
}

fn independent_trades(problems: &[PmProblemData], solver: &dyn ConvexSolverPort) -> Result<Vec<Vec<f64>>> {
    problems
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            markowitz_initial_solve(p, solver).map(|s| s.trade).map_err(|e| Error::Oracle { pm: i, reason: e.to_string() })
        })
        .collect()
}

fn joint_problem(problems: &[PmProblemData], state: &AccountState, firm: &CostModelParams) -> Result<JointProblem> {
    let members = problems.iter().map(|p| PmSpec::Markowitz(Box::new(p.clone()))).collect();
    JointProblem::new(members, &state.navs, CostModel::new(firm.clone())?, Some(state.net_weights()?))
}

struct Decision {
    trades: Vec<Vec<f64>>,
    messages: Option<Vec<Message>>,
    dominance: Option<(f64, f64)>,
    /// Set when the trades are usable but the run was cut short.
    warning: Option<String>,
}

fn decide(
    scenario: Scenario,
    config: &BacktestConfig,
    problems: &[PmProblemData],
    state: &AccountState,
    firm: &CostModelParams,
    options: RunOptions,
    solver: &Arc<dyn ConvexSolverPort>,
) -> Result<Decision> {
    match scenario {
        Scenario::Independent => Ok(Decision {
            trades: independent_trades(problems, solver.as_ref())?,
            messages: None,
            dominance: None,
            warning: None,
        }),
        Scenario::FullCooperative => {
            let problem = joint_problem(problems, state, firm)?;
            let trades = solve_joint_general(&problem, solver.as_ref())?.trades;
            let dominance = if options.check_dominance {
                let alone = independent_trades(problems, solver.as_ref())?;
                Some((problem.objective(&trades)?, problem.objective(&alone)?))
            } else {
                None
            };
            Ok(Decision { trades, messages: None, dominance, warning: None })
        }
        Scenario::Admm(rounds) => {
            let cost = CostModel::new(firm.clone())?;
            let mut params = ProtocolParams::new(compute_scaling(cost.kappa_impact())?, rounds);
            params.rho = config.protocol.rho;
            params.varphi = config.protocol.varphi;
            let oracles: Vec<MarkowitzOracle> =
                problems.iter().map(|p| MarkowitzOracle::new(p.clone(), Arc::clone(solver))).collect();
            let refs: Vec<&dyn PmOracle> = oracles.iter().map(|o| o as &dyn PmOracle).collect();
            let outcome = run_protocol(&refs, &state.navs, &params, &cost, Some(state.net_weights()?))?;
            let warning = outcome.failure.as_ref().map(|f| format!("protocol stopped in round {}: pm {}: {}", f.round, f.pm, f.reason));
            Ok(Decision {
                trades: outcome.trades,
                messages: options.keep_transcripts.then_some(outcome.transcript.messages),
                dominance: None,
                warning,
            })
        }
    }
}

/// Runs one scenario over the whole horizon.
///
/// A rebalance whose optimization fails trades nothing and is flagged; more
/// than [`MAX_FLAGGED_FRACTION`] flagged rebalances fail the run.
pub fn run_scenario(
    config: &BacktestConfig,
    inputs: &BacktestInputs,
    scenario: Scenario,
    options: RunOptions,
    solver: Arc<dyn ConvexSolverPort>,
) -> Result<ScenarioResult> {
    config.validate()?;
    let n = inputs.market.n_assets();
    let m = inputs.pms.len();
    let periods = inputs.periods;
    let mut state = AccountState::new(inputs.pms.iter().map(|p| p.initial_nav).collect(), n);
    let mut result = ScenarioResult {
        scenario,
        seed: inputs.seed,
        firm_nav: vec![state.firm_nav()],
        pm_nav: state.navs.iter().map(|v| vec![*v]).collect(),
        firm_tcost: vec![0.0],
        pm_tcost: vec![vec![0.0]; m],
        firm_tcost_frac: vec![0.0],
        pm_tcost_frac: vec![vec![0.0]; m],
        firm_short_cost: 0.0,
        net_trades: Vec::with_capacity(periods),
        risk_free: inputs.market.risk_free[..periods].to_vec(),
        rebalances: 0,
        flagged: Vec::new(),
        transcripts: Vec::new(),
        dominance: Vec::new(),
    };
    let zero = vec![vec![0.0; n]; m];
    for t in 0..periods {
        let firm = firm_cost_params(config, inputs, state.firm_nav(), t);
        let mut trades = zero.clone();
        if t % config.rebalance_every == 0 {
            result.rebalances += 1;
            let decided = build_pm_problems(config, inputs, &state, t)
                .and_then(|problems| decide(scenario, config, &problems, &state, &firm, options, &solver));
            match decided {
                Ok(d) => {
                    trades = d.trades;
                    if let Some(msgs) = d.messages {
                        result.transcripts.push((t, msgs));
                    }
                    if let Some((cooperative, independent)) = d.dominance {
                        result.dominance.push(DominanceRecord { period: t, cooperative, independent });
                    }
                    if let Some(w) = d.warning {
                        result.flagged.push((t, w));
                    }
                }
                Err(e) => result.flagged.push((t, e.to_string())),
            }
        }
        let returns: Vec<f64> = inputs.market.returns.row(t + 1).iter().copied().collect();
        let (next, costs) = step_period(&state, &trades, &returns, inputs.market.risk_free[t], &firm)?;
        let firm_nav = state.firm_nav();
        let firm_cost: f64 = costs.tcost_per_asset.iter().sum();
        result.firm_tcost.push(result.firm_tcost.last().unwrap() + firm_cost);
        result.firm_tcost_frac.push(result.firm_tcost_frac.last().unwrap() + firm_cost / firm_nav);
        result.firm_short_cost += costs.short_per_asset.iter().sum::<f64>();
        result.net_trades.push(costs.net_trade);
        for i in 0..m {
            result.pm_tcost[i].push(next.tcost[i]);
            let frac = result.pm_tcost_frac[i].last().unwrap() + costs.pm_tcost[i] / state.navs[i];
            result.pm_tcost_frac[i].push(frac);
            result.pm_nav[i].push(next.navs[i]);
        }
        result.firm_nav.push(next.firm_nav());
        state = next;
    }
    let limit = MAX_FLAGGED_FRACTION * result.rebalances as f64;
    if result.flagged.len() as f64 > limit {
        let detail: Vec<String> = result.flagged.iter().take(5).map(|(t, e)| format!("period {t}: {e}")).collect();
        return Err(Error::Numerical(format!(
            "{} of {} rebalances failed in scenario {scenario} (seed {}); first failures: {}",
            result.flagged.len(),
            result.rebalances,
            inputs.seed,
            detail.join("; ")
        )));
    }
    Ok(result)
}

/// Runs every scenario on every seed's inputs in parallel.
///
/// Results come back ordered by scenario, then seed. The first failing run
/// aborts the batch.
pub fn run_batch(
    config: &BacktestConfig,
    inputs: &[BacktestInputs],
    scenarios: &[Scenario],
    options: RunOptions,
    solver: Arc<dyn ConvexSolverPort>,
) -> Result<Vec<ScenarioResult>> {
    let jobs: Vec<(Scenario, &BacktestInputs)> =
        scenarios.iter().flat_map(|s| inputs.iter().map(move |i| (*s, i))).collect();
    let mut results = jobs
        .into_par_iter()
        .map(|(s, i)| run_scenario(config, i, s, options, Arc::clone(&solver)))
        .collect::<Result<Vec<_>>>()?;
    results.sort_by_key(|r| (r.scenario, r.seed));
    Ok(results)
}

/// Row of a statistics table.
#[derive(Clone, Debug, PartialEq)]
pub struct EntityStats {
    pub scenario: Scenario,
    pub seed: u64,
    /// `None` for the firm.
    pub pm: Option<usize>,
    pub stats: PerformanceStats,
    pub cum_tcost: f64,
    pub cum_tcost_frac: f64,
}

fn entity_label(pm: Option<usize>) -> String {
    pm.map_or_else(|| "firm".to_string(), |i| i.to_string())
}

/// Firm row followed by one row per manager.
pub fn scenario_stats(result: &ScenarioResult, periods_per_year: f64) -> Result<Vec<EntityStats>> {
    let mut rows = vec![EntityStats {
        scenario: result.scenario,
        seed: result.seed,
        pm: None,
        stats: compute_stats(&result.firm_nav, &result.risk_free, periods_per_year)?,
        cum_tcost: *result.firm_tcost.last().unwrap(),
        cum_tcost_frac: *result.firm_tcost_frac.last().unwrap(),
    }];
    for i in 0..result.num_pms() {
        rows.push(EntityStats {
            scenario: result.scenario,
            seed: result.seed,
            pm: Some(i),
            stats: compute_stats(&result.pm_nav[i], &result.risk_free, periods_per_year)?,
            cum_tcost: *result.pm_tcost[i].last().unwrap(),
            cum_tcost_frac: *result.pm_tcost_frac[i].last().unwrap(),
        });
    }
    Ok(rows)
}

fn opt_num(x: Option<f64>) -> String {
    x.map(format_sig12).unwrap_or_default()
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// `stats.csv` contents, ordered by scenario, seed and entity.
pub fn stats_csv(results: &[ScenarioResult], periods_per_year: f64) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["scenario", "seed", "entity", "return", "volatility", "sharpe", "cum_tcost", "cum_tcost_frac"])?;
    for r in sorted(results) {
        for s in scenario_stats(r, periods_per_year)? {
            w.write_record([
                s.scenario.to_string(),
                s.seed.to_string(),
                entity_label(s.pm),
                format_sig12(s.stats.ann_return),
                format_sig12(s.stats.ann_volatility),
                opt_num(s.stats.sharpe),
                format_sig12(s.cum_tcost),
                format_sig12(s.cum_tcost_frac),
            ])?;
        }
    }
    finish(w)
}

/// `series.csv` contents in long format.
pub fn series_csv(results: &[ScenarioResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["scenario", "seed", "entity", "period", "nav", "cum_return", "cum_tcost", "cum_tcost_frac"])?;
    for r in sorted(results) {
        let mut write = |pm: Option<usize>, nav: &[f64], tc: &[f64], frac: &[f64]| -> Result<()> {
            for t in 0..nav.len() {
                w.write_record([
                    r.scenario.to_string(),
                    r.seed.to_string(),
                    entity_label(pm),
                    t.to_string(),
                    format_sig12(nav[t]),
                    format_sig12(nav[t] / nav[0] - 1.0),
                    format_sig12(tc[t]),
                    format_sig12(frac[t]),
                ])?;
            }
            Ok(())
        };
        write(None, &r.firm_nav, &r.firm_tcost, &r.firm_tcost_frac)?;
        for i in 0..r.num_pms() {
            write(Some(i), &r.pm_nav[i], &r.pm_tcost[i], &r.pm_tcost_frac[i])?;
        }
    }
    finish(w)
}

/// Protocol messages of one seed, one JSON object per line tagged with the
/// rebalance period.
pub fn transcript_jsonl(result: &ScenarioResult) -> Result<String> {
    let mut out = String::new();
    for (t, msgs) in &result.transcripts {
        for m in msgs {
            out.push_str(&format!("{{\"period\":{t},\"message\":{}}}\n", m.to_json_line()?));
        }
    }
    Ok(out)
}

fn sorted(results: &[ScenarioResult]) -> Vec<&ScenarioResult> {
    let mut v: Vec<&ScenarioResult> = results.iter().collect();
    v.sort_by_key(|r| (r.scenario, r.seed));
    v
}

/// Seed-averaged statistics of one entity in one scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub scenario: Scenario,
    pub pm: Option<usize>,
    pub ann_return: f64,
    pub ann_volatility: f64,
    /// Mean over the seeds where it is defined.
    pub sharpe: Option<f64>,
    pub cum_tcost: f64,
    pub cum_tcost_frac: f64,
    pub seeds: usize,
}

/// Firm rows, one per scenario, then manager rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub firm: Vec<ComparisonRow>,
    pub pms: Vec<ComparisonRow>,
}

/// Seed-averaged comparison of scenarios in the given order.
///
/// Every scenario must have been run on the same seeds with the same
/// number of managers.
pub fn compare_scenarios(
    scenarios: &[Scenario],
    results: &[ScenarioResult],
    periods_per_year: f64,
) -> Result<Comparison> {
    let mut rows = Vec::new();
    for r in sorted(results) {
        rows.extend(scenario_stats(r, periods_per_year)?);
    }
    compare_stats(scenarios, &rows)
}

/// [`compare_scenarios`] over precomputed statistics rows.
pub fn compare_stats(scenarios: &[Scenario], rows: &[EntityStats]) -> Result<Comparison> {
    let seeds_of = |s: Scenario| {
        let mut v: Vec<u64> = rows.iter().filter(|r| r.scenario == s && r.pm.is_none()).map(|r| r.seed).collect();
        v.sort_unstable();
        v
    };
    let reference = scenarios.first().map(|s| seeds_of(*s)).unwrap_or_default();
    if reference.is_empty() {
        return Err(Error::Mismatch("no results to compare".into()));
    }
    for s in scenarios {
        let seeds = seeds_of(*s);
        if seeds != reference {
            return Err(Error::Mismatch(format!("scenario {s} ran on seeds {seeds:?}, expected {reference:?}")));
        }
    }
    let entities = |s: Scenario, seed: u64| {
        let mut v: Vec<&EntityStats> = rows.iter().filter(|r| r.scenario == s && r.seed == seed).collect();
        v.sort_by_key(|r| r.pm.map_or(0, |i| i + 1));
        v
    };
    let m = entities(scenarios[0], reference[0]).len() - 1;
    for s in scenarios {
        for seed in &reference {
            let e = entities(*s, *seed);
            if e.len() != m + 1 || e.iter().skip(1).enumerate().any(|(i, r)| r.pm != Some(i)) {
                return Err(Error::Mismatch(format!("scenario {s} seed {seed} does not have managers 0..{m}")));
            }
        }
    }
    let mut firm = Vec::new();
    let mut pms = Vec::new();
    for &s in scenarios {
        let per_seed: Vec<Vec<&EntityStats>> = reference.iter().map(|seed| entities(s, *seed)).collect();
        for e in 0..=m {
            let picked: Vec<&EntityStats> = per_seed.iter().map(|r| r[e]).collect();
            let k = picked.len() as f64;
            let mean = |f: &dyn Fn(&EntityStats) -> f64| picked.iter().map(|x| f(x)).sum::<f64>() / k;
            let sharpes: Vec<f64> = picked.iter().filter_map(|x| x.stats.sharpe).collect();
            let row = ComparisonRow {
                scenario: s,
                pm: picked[0].pm,
                ann_return: mean(&|x| x.stats.ann_return),
                ann_volatility: mean(&|x| x.stats.ann_volatility),
                sharpe: (!sharpes.is_empty()).then(|| sharpes.iter().sum::<f64>() / sharpes.len() as f64),
                cum_tcost: mean(&|x| x.cum_tcost),
                cum_tcost_frac: mean(&|x| x.cum_tcost_frac),
                seeds: picked.len(),
            };
            if e == 0 {
                firm.push(row);
            } else {
                pms.push(row);
            }
        }
    }
    Ok(Comparison { firm, pms })
}

/// Reads rows written by [`stats_csv`].
pub fn parse_stats_csv(text: &str) -> Result<Vec<EntityStats>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let bad = |what: &str, line: usize| Error::MissingInput(format!("stats.csv line {line}: bad {what}"));
    let num = |v: &str, what: &str, line: usize| v.parse::<f64>().map_err(|_| bad(what, line));
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        if rec.len() != 8 {
            return Err(bad("field count", line));
        }
        let pm = match &rec[2] {
            "firm" => None,
            e => Some(e.parse().map_err(|_| bad("entity", line))?),
        };
        rows.push(EntityStats {
            scenario: rec[0].parse()?,
            seed: rec[1].parse().map_err(|_| bad("seed", line))?,
            pm,
            stats: PerformanceStats {
                ann_return: num(&rec[3], "return", line)?,
                ann_volatility: num(&rec[4], "volatility", line)?,
                sharpe: if rec[5].is_empty() { None } else { Some(num(&rec[5], "sharpe", line)?) },
            },
            cum_tcost: num(&rec[6], "cum_tcost", line)?,
            cum_tcost_frac: num(&rec[7], "cum_tcost_frac", line)?,
        });
    }
    Ok(rows)
}

/// `comparison.csv` contents: the firm block, then the manager block.
pub fn comparison_csv(c: &Comparison) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["block", "scenario", "entity", "return", "volatility", "sharpe", "cum_tcost", "cum_tcost_frac", "seeds"])?;
    for (block, rows) in [("firm", &c.firm), ("pm", &c.pms)] {
        for r in rows {
            w.write_record([
                block.to_string(),
                r.scenario.to_string(),
                entity_label(r.pm),
                format_sig12(r.ann_return),
                format_sig12(r.ann_volatility),
                opt_num(r.sharpe),
                format_sig12(r.cum_tcost),
                format_sig12(r.cum_tcost_frac),
                r.seeds.to_string(),
            ])?;
        }
    }
    finish(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conic::ClarabelSolver;
    use crate::synthetic_market::{gen_market, MarketSpec};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn tiny_config(num_pms: usize, periods: usize) -> BacktestConfig {
        BacktestConfig { num_pms, periods, n_factors: 2, ..BacktestConfig::default() }
    }

    fn tiny_alpha() -> AlphaGenSpec {
        AlphaGenSpec { horizon: 5, ..AlphaGenSpec::default() }
    }

    fn tiny_inputs(config: &BacktestConfig, n: usize, seed: u64) -> BacktestInputs {
        let alpha = tiny_alpha();
        let spec = MarketSpec { n_assets: n, periods: config.periods + alpha.horizon, ..MarketSpec::default() };
        let (market, _) = gen_market(&spec, seed).unwrap();
        prepare_inputs(config, &alpha, market, seed).unwrap()
    }

    fn solver() -> Arc<dyn ConvexSolverPort> {
        Arc::new(ClarabelSolver::with_tolerance(1e-8))
    }

    fn unit_cost(n: usize, spread: f64, nu: f64) -> CostModelParams {
        CostModelParams::new(vec![spread; n], vec![1.0; n], vec![nu; n], vec![1e6; n], 1e6)
    }

    const ALL: [Scenario; 4] = [Scenario::Independent, Scenario::FullCooperative, Scenario::Admm(2), Scenario::Admm(5)];

    #[test]
    fn scenario_names_round_trip() {
        for (name, s) in [
            ("independent", Scenario::Independent),
            ("full_cooperative", Scenario::FullCooperative),
            ("admm_2_iter", Scenario::Admm(2)),
            ("admm_5_iter", Scenario::Admm(5)),
            ("admm_k:7", Scenario::Admm(7)),
        ] {
            assert_eq!(name.parse::<Scenario>().unwrap(), s);
            assert_eq!(s.to_string(), name);
        }
        assert_eq!("admm_k:2".parse::<Scenario>().unwrap(), Scenario::Admm(2));
        match "admm_3".parse::<Scenario>() {
            Err(Error::Config(msg)) => assert!(msg.contains("full_cooperative") && msg.contains("admm_k:<K>")),
            other => panic!("unexpected {other:?}"),
        }
        assert!("admm_k:x".parse::<Scenario>().is_err());
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = BacktestConfig::default();
        assert_eq!((c.num_pms, c.rebalance_every), (4, 1));
        assert_eq!(c.risk_target_range, [0.06, 0.15]);
        assert_eq!(c.nav_log10_range, [6.5, 7.5]);
        assert_eq!(c.universe_fraction, 0.75);
        assert_eq!((c.protocol.rho, c.protocol.varphi), (10.0, 1.0));
        c.validate().unwrap();
        for bad in [
            BacktestConfig { num_pms: 0, ..c.clone() },
            BacktestConfig { rebalance_every: 0, ..c.clone() },
            BacktestConfig { universe_fraction: 1.5, ..c.clone() },
            BacktestConfig { risk_target_range: [0.2, 0.1], ..c.clone() },
            BacktestConfig { protocol: ProtocolConfig { rho: 0.0, varphi: 1.0 }, ..c.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn pm_setups_follow_ranges() {
        let config = BacktestConfig { num_pms: 50, ..BacktestConfig::default() };
        let pms = draw_pm_setups(&config, 30, 9);
        for pm in &pms {
            assert!((0.06..0.15).contains(&pm.risk_target));
            assert!((10f64.powf(6.5)..10f64.powf(7.5)).contains(&pm.initial_nav));
            assert_eq!(pm.tradable.iter().filter(|t| **t).count(), 23);
        }
        assert_eq!(pms, draw_pm_setups(&config, 30, 9));
        assert_ne!(pms, draw_pm_setups(&config, 30, 10));
    }

    #[test]
    fn short_market_is_missing_input() {
        let config = tiny_config(2, 20);
        let spec = MarketSpec { n_assets: 4, periods: 22, ..MarketSpec::default() };
        let (market, _) = gen_market(&spec, 1).unwrap();
        assert!(matches!(prepare_inputs(&config, &tiny_alpha(), market, 1), Err(Error::MissingInput(_))));
    }

    #[test]
    fn idle_period_leaves_state_unchanged() {
        let state = AccountState {
            weights: vec![vec![0.3, -0.1], vec![0.0, 0.5]],
            cash: vec![0.8, 0.5],
            navs: vec![2e6, 3e6],
            tcost: vec![1.0, 2.0],
            short_cost: vec![0.0, 0.0],
        };
        let (next, costs) = step_period(&state, &[vec![0.0; 2], vec![0.0; 2]], &[0.0, 0.0], 0.0, &unit_cost(2, 0.01, 0.02)).unwrap();
        assert_eq!(costs.pnl, 0.0);
        for i in 0..2 {
            assert_relative_eq!(next.navs[i], state.navs[i], max_relative = 1e-15);
            assert_relative_eq!(next.cash[i], state.cash[i], max_relative = 1e-15);
            for j in 0..2 {
                assert_relative_eq!(next.weights[i][j], state.weights[i][j], max_relative = 1e-15);
            }
        }
        assert_eq!(next.tcost, state.tcost);
    }

    #[test]
    fn internal_crossing_costs_nothing() {
        let state = AccountState::new(vec![5e6, 5e6], 1);
        let (next, costs) = step_period(&state, &[vec![0.1], vec![-0.1]], &[0.0], 0.0, &unit_cost(1, 0.01, 2.0)).unwrap();
        assert_eq!(costs.net_trade, vec![0.0]);
        assert_eq!(costs.tcost_per_asset, vec![0.0]);
        assert_eq!(costs.pm_tcost, vec![0.0, 0.0]);
        assert_eq!(next.navs, vec![5e6, 5e6]);
    }

    #[test]
    fn single_trade_cost_example() {
        let state = AccountState::new(vec![1e6], 1);
        let (next, costs) = step_period(&state, &[vec![0.04]], &[0.0], 0.0, &unit_cost(1, 0.01, 2.0)).unwrap();
        assert_relative_eq!(costs.tcost_per_asset[0], 16_200.0, max_relative = 1e-12);
        assert_relative_eq!(costs.pm_tcost[0], 16_200.0, max_relative = 1e-12);
        assert_relative_eq!(next.navs[0], 1e6 - 16_200.0, max_relative = 1e-12);
    }

    #[test]
    fn net_shorts_pay_the_borrow_rate() {
        // Net short of 0.1 on asset 0 split 3:1 between the two shorting managers.
        let state = AccountState::new(vec![1e6, 1e6, 2e6], 2);
        let trades = [vec![-0.3, 0.0], vec![-0.1, 0.0], vec![0.0, 0.1]];
        let (_, costs) = step_period(&state, &trades, &[0.0, 0.0], 0.001, &unit_cost(2, 0.0, 0.0)).unwrap();
        let firm = 4e6 * 0.001 * 0.1;
        assert_relative_eq!(costs.short_per_asset[0], firm, max_relative = 1e-12);
        assert_eq!(costs.short_per_asset[1], 0.0);
        assert_relative_eq!(costs.pm_short[0], 0.75 * firm, max_relative = 1e-12);
        assert_relative_eq!(costs.pm_short[1], 0.25 * firm, max_relative = 1e-12);
        assert_eq!(costs.pm_short[2], 0.0);
    }

    fn account(m: usize, n: usize) -> impl Strategy<Value = (AccountState, Vec<Vec<f64>>, Vec<f64>, f64)> {
        (
            prop::collection::vec(prop::collection::vec(-0.3..0.3f64, n), m),
            prop::collection::vec(1e5..1e8f64, m),
            prop::collection::vec(prop::collection::vec(-0.1..0.1f64, n), m),
            prop::collection::vec(-0.05..0.05f64, n),
            0.0..1e-3f64,
        )
            .prop_map(|(w, navs, x, r, rf)| {
                let cash = w.iter().map(|wi| 1.0 - wi.iter().sum::<f64>()).collect();
                let m = navs.len();
                (AccountState { weights: w, cash, navs, tcost: vec![0.0; m], short_cost: vec![0.0; m] }, x, r, rf)
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn accounting_is_conserved((state, trades, returns, rf) in account(3, 4)) {
            let cost = unit_cost(4, 0.002, 0.02);
            let (next, costs) = step_period(&state, &trades, &returns, rf, &cost).unwrap();
            let v = state.firm_nav();
            let paid: f64 = costs.tcost_per_asset.iter().sum::<f64>() + costs.short_per_asset.iter().sum::<f64>();
            let expected = v + costs.pnl - paid;
            prop_assert!((next.firm_nav() - expected).abs() <= 1e-8 * v);
            prop_assert!((next.firm_nav() - next.navs.iter().sum::<f64>()).abs() <= 1e-8 * v);
            let allocated: f64 = costs.pm_tcost.iter().sum::<f64>() + costs.pm_short.iter().sum::<f64>();
            prop_assert!((allocated - paid).abs() <= 1e-10 * paid.max(1.0));
            for i in 0..3 {
                let budget = next.weights[i].iter().sum::<f64>() + next.cash[i];
                prop_assert!((budget - 1.0).abs() < 1e-10);
            }
        }

        #[test]
        fn per_asset_allocation_sums(
            (state, trades, returns, rf) in account(3, 1),
        ) {
            // With one asset the per-manager charges are exactly that asset's shares.
            let (_, costs) = step_period(&state, &trades, &returns, rf, &unit_cost(1, 0.002, 0.02)).unwrap();
            let firm = costs.tcost_per_asset[0];
            prop_assert!((costs.pm_tcost.iter().sum::<f64>() - firm).abs() <= 1e-12 * firm.max(1.0));
            let lambda = state.lambda().unwrap();
            for i in 0..3 {
                if trades[i][0] == 0.0 || lambda[i] == 0.0 {
                    prop_assert_eq!(costs.pm_tcost[i], 0.0);
                }
            }
        }
    }

    #[test]
    fn bankrupt_manager_halts() {
        let state = AccountState::new(vec![1e6], 1);
        let r = step_period(&state, &[vec![1.0]], &[-1.5], 0.0, &unit_cost(1, 0.0, 0.0));
        assert!(matches!(r, Err(Error::Numerical(_))));
    }

    #[test]
    fn stats_examples() {
        let flat = compute_stats(&[1.0, 1.0, 1.0, 1.0], &[0.0; 3], 252.0).unwrap();
        assert_eq!((flat.ann_return, flat.ann_volatility, flat.sharpe), (0.0, 0.0, None));

        let swing = compute_stats(&[1.0, 1.01, 1.01 * 0.99], &[0.0; 2], 252.0).unwrap();
        assert!(swing.ann_return.abs() < 1e-15);
        assert_relative_eq!(swing.ann_volatility, 0.01 * 252f64.sqrt(), max_relative = 1e-12);
        assert_relative_eq!(swing.ann_volatility, 0.15875, epsilon = 1e-5);
        assert!(swing.sharpe.unwrap().abs() < 1e-12);

        let navs: Vec<f64> = (0..11).map(|k| 1.001f64.powi(k)).collect();
        let steady = compute_stats(&navs, &[0.0; 10], 252.0).unwrap();
        assert_relative_eq!(steady.ann_return, 0.252, max_relative = 1e-10);
        assert_eq!(steady.ann_volatility, 0.0);
        assert_eq!(steady.sharpe, None);

        assert!(compute_stats(&[1.0, 1.1], &[0.0], 252.0).is_err());
        assert!(compute_stats(&[1.0, 1.1, 1.2], &[0.0], 252.0).is_err());
    }

    #[test]
    fn sharpe_subtracts_the_risk_free_rate() {
        let navs = [1.0, 1.02, 1.02 * 1.0];
        let s = compute_stats(&navs, &[0.001, 0.001], 252.0).unwrap();
        let vol = 0.01 * 252f64.sqrt();
        assert_relative_eq!(s.sharpe.unwrap(), (0.01 * 252.0 - 0.001 * 252.0) / vol, max_relative = 1e-10);
    }

    #[test]
    fn zero_alpha_means_flat_navs_everywhere() {
        let config = tiny_config(3, 6);
        let mut inputs = tiny_inputs(&config, 5, 3);
        for a in &mut inputs.alphas {
            a.fill(0.0);
        }
        inputs.market.risk_free.iter_mut().for_each(|r| *r = 0.0);
        for s in ALL {
            let r = run_scenario(&config, &inputs, s, RunOptions::default(), Arc::new(ClarabelSolver::precise())).unwrap();
            assert!(r.flagged.is_empty(), "{s}: {:?}", r.flagged);
            for z in &r.net_trades {
                assert!(z.iter().all(|v| v.abs() < 1e-8), "{s}: {z:?}");
            }
            let v0 = r.firm_nav[0];
            assert!(r.firm_nav.iter().all(|v| ((v - v0) / v0).abs() < 1e-8), "{s}");
            assert!(*r.firm_tcost.last().unwrap() < 1e-6, "{s}");
            assert!(r.firm_short_cost < 1e-6, "{s}");
        }
    }

    #[test]
    fn one_manager_cooperation_is_independence() {
        let config = tiny_config(1, 8);
        let inputs = tiny_inputs(&config, 6, 4);
        let precise: Arc<dyn ConvexSolverPort> = Arc::new(ClarabelSolver::precise());
        let alone = run_scenario(&config, &inputs, Scenario::Independent, RunOptions::default(), Arc::clone(&precise)).unwrap();
        let joint = run_scenario(&config, &inputs, Scenario::FullCooperative, RunOptions::default(), precise).unwrap();
        let mut traded = 0.0f64;
        for (a, b) in alone.net_trades.iter().zip(&joint.net_trades) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-6, "{x} vs {y}");
                traded = traded.max(x.abs());
            }
        }
        assert!(traded > 1e-3);
    }

    #[test]
    fn runs_conserve_nav_and_record_everything() {
        let config = tiny_config(3, 10);
        let inputs = tiny_inputs(&config, 6, 5);
        let options = RunOptions { keep_transcripts: true, check_dominance: true };
        for s in ALL {
            let r = run_scenario(&config, &inputs, s, options, solver()).unwrap();
            assert_eq!(r.firm_nav.len(), 11);
            assert_eq!(r.net_trades.len(), 10);
            assert_eq!(r.rebalances, 10);
            for t in 0..=10 {
                let sum: f64 = r.pm_nav.iter().map(|p| p[t]).sum();
                assert!((sum - r.firm_nav[t]).abs() <= 1e-8 * r.firm_nav[t]);
                let tc: f64 = r.pm_tcost.iter().map(|p| p[t]).sum();
                assert!((tc - r.firm_tcost[t]).abs() <= 1e-8 * r.firm_tcost[t].max(1.0));
            }
            assert!(r.firm_tcost.windows(2).all(|w| w[1] >= w[0]));
            match s {
                Scenario::Admm(k) => {
                    assert_eq!(r.transcripts.len(), 10);
                    for (_, msgs) in &r.transcripts {
                        let rounds = msgs.iter().filter(|m| matches!(m, Message::RoundComplete { .. })).count();
                        assert_eq!(rounds, k);
                    }
                }
                _ => assert!(r.transcripts.is_empty()),
            }
            if s == Scenario::FullCooperative {
                assert_eq!(r.dominance.len(), 10);
                for d in &r.dominance {
                    assert!(d.cooperative <= d.independent + 1e-8, "{d:?}");
                }
            } else {
                assert!(r.dominance.is_empty());
            }
        }
    }

    #[test]
    fn rebalance_every_skips_periods() {
        let config = BacktestConfig { rebalance_every: 3, ..tiny_config(2, 7) };
        let inputs = tiny_inputs(&config, 5, 6);
        let r = run_scenario(&config, &inputs, Scenario::Independent, RunOptions::default(), solver()).unwrap();
        assert_eq!(r.rebalances, 3);
        for (t, z) in r.net_trades.iter().enumerate() {
            if t % 3 != 0 {
                assert!(z.iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let config = tiny_config(2, 6);
        let a = tiny_inputs(&config, 5, 7);
        let b = tiny_inputs(&config, 5, 7);
        let scenarios = [Scenario::Independent, Scenario::Admm(2)];
        let options = RunOptions { keep_transcripts: true, check_dominance: false };
        let ra = run_batch(&config, &[a], &scenarios, options, solver()).unwrap();
        let rb = run_batch(&config, &[b], &scenarios, options, solver()).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(stats_csv(&ra, 252.0).unwrap(), stats_csv(&rb, 252.0).unwrap());
        assert_eq!(series_csv(&ra).unwrap(), series_csv(&rb).unwrap());
        assert_eq!(transcript_jsonl(&ra[1]).unwrap(), transcript_jsonl(&rb[1]).unwrap());
    }

    struct FailingSolver {
        inner: ClarabelSolver,
        calls: std::sync::atomic::AtomicUsize,
        fail_below: usize,
    }

    impl ConvexSolverPort for FailingSolver {
        fn solve(&self, program: &crate::conic::ConicProgram) -> Result<crate::conic::ConicSolution> {
            if self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst) < self.fail_below {
                return Err(Error::Solver("injected".into()));
            }
            self.inner.solve(program)
        }
    }

    fn failing(fail_below: usize) -> Arc<dyn ConvexSolverPort> {
        Arc::new(FailingSolver { inner: ClarabelSolver::with_tolerance(1e-8), calls: 0.into(), fail_below })
    }

    #[test]
    fn failed_rebalances_trade_nothing_and_are_flagged() {
        let config = tiny_config(1, 20);
        let inputs = tiny_inputs(&config, 5, 8);
        let r = run_scenario(&config, &inputs, Scenario::Independent, RunOptions::default(), failing(1)).unwrap();
        assert_eq!(r.flagged.len(), 1);
        assert_eq!(r.flagged[0].0, 0);
        assert!(r.net_trades[0].iter().all(|v| *v == 0.0));

        let too_many = run_scenario(&config, &inputs, Scenario::Independent, RunOptions::default(), failing(2));
        match too_many {
            Err(Error::Numerical(msg)) => assert!(msg.contains("2 of 20") && msg.contains("injected")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_layouts() {
        let config = tiny_config(2, 4);
        let inputs = tiny_inputs(&config, 4, 9);
        let results = run_batch(&config, &[inputs], &[Scenario::Independent], RunOptions::default(), solver()).unwrap();
        let stats = stats_csv(&results, 252.0).unwrap();
        let lines: Vec<&str> = stats.lines().collect();
        assert_eq!(lines[0], "scenario,seed,entity,return,volatility,sharpe,cum_tcost,cum_tcost_frac");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("independent,9,firm,"));
        assert!(lines[3].starts_with("independent,9,1,"));
        let series = series_csv(&results).unwrap();
        assert_eq!(series.lines().count(), 1 + 3 * 5);
        assert!(series.lines().nth(1).unwrap().starts_with("independent,9,firm,0,"));
    }

    #[test]
    fn comparison_shapes_and_mismatch() {
        let config = tiny_config(2, 4);
        let inputs: Vec<BacktestInputs> = [11, 12].iter().map(|s| tiny_inputs(&config, 4, *s)).collect();
        let scenarios = [Scenario::Independent, Scenario::FullCooperative];
        let results = run_batch(&config, &inputs, &scenarios, RunOptions::default(), solver()).unwrap();
        let c = compare_scenarios(&scenarios, &results, 252.0).unwrap();
        assert_eq!(c.firm.len(), 2);
        assert_eq!(c.pms.len(), 4);
        assert!(c.firm.iter().all(|r| r.seeds == 2));
        let mean_tc = (results[0].firm_tcost.last().unwrap() + results[1].firm_tcost.last().unwrap()) / 2.0;
        assert_relative_eq!(c.firm[0].cum_tcost, mean_tc, max_relative = 1e-12);

        let same = compare_scenarios(&[Scenario::Independent, Scenario::Independent], &results, 252.0).unwrap();
        assert_eq!(same.firm[0], same.firm[1]);
        let csv = comparison_csv(&c).unwrap();
        assert_eq!(csv.lines().count(), 1 + 2 + 4);

        let partial: Vec<ScenarioResult> =
            results.iter().filter(|r| !(r.scenario == Scenario::FullCooperative && r.seed == 12)).cloned().collect();
        assert!(matches!(compare_scenarios(&scenarios, &partial, 252.0), Err(Error::Mismatch(_))));
        assert!(matches!(compare_scenarios(&[Scenario::Admm(2)], &results, 252.0), Err(Error::Mismatch(_))));
    }
}
