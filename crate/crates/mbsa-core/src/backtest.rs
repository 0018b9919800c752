//! Daily simulation loop: snapshot, covariance update, rebalance, cost
//! accrual, and cash/NAV accounting.
//!
//! Accounting convention: on day `t` the portfolio is first marked to
//! market (`c = c_prev + p_t . q_prev`), the rebalance decides and executes
//! at day-`t` prices, and both the trading cost and the holding cost on the
//! post-rebalance book are charged against cash the same day. Under cash
//! neutrality the NAV equals the cash account.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::arb::{snapshot, ArbSnapshot, Mbsa};
use crate::covariance::{arb_covariance, factorize, CovarianceSmoother, IewmaState};
use crate::error::{Error, Result};
use crate::market_data::MarketData;
use crate::markowitz::{
    build_problem, objective_value, soften_problem, solve, MarkowitzInputs, RebalanceResult,
    SolveDiagnostics, Tolerances,
};
use crate::metrics;

/// Simulation parameters. JSON keys match field names; defaults follow the
/// standard recipe (21-day window, 500-day lifetime with a 21-day ramp,
/// unit cost weights, 10% annualized risk target, 125/250/250 half-lives).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestConfig {
    /// Midpoint and price-centering window M.
    pub window: usize,
    /// Periods an arb stays in the book before its ramp when the basket
    /// file does not give an explicit decommission date.
    pub lifetime: usize,
    /// Ramp length l for the size-limit decay.
    pub ramp: usize,
    /// Size limit xi common to all arbs.
    pub xi_max: f64,
    /// Collateral parameter eta >= 1.
    pub eta: f64,
    /// Annualized risk target; divided by sqrt(periods_per_year) per period.
    pub sigma_annual: f64,
    pub gamma_trade: f64,
    pub gamma_short: f64,
    /// Mismatch penalty weight for the softened variant.
    pub gamma_hold: Option<f64>,
    pub vol_half_life: f64,
    pub corr_half_life: f64,
    pub smooth_half_life: f64,
    pub periods_per_year: f64,
    pub initial_cash: f64,
    /// Solve the softened variant instead of the hard-coupled one.
    pub soften: bool,
    /// Maximum tolerated solver fallbacks before the CLI reports failure.
    pub fallback_limit: usize,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            window: 21,
            lifetime: 500,
            ramp: 21,
            xi_max: 1.0,
            eta: 1.0,
            sigma_annual: 0.10,
            gamma_trade: 1.0,
            gamma_short: 1.0,
            gamma_hold: None,
            vol_half_life: 125.0,
            corr_half_life: 250.0,
            smooth_half_life: 250.0,
            periods_per_year: 250.0,
            initial_cash: 1.0,
            soften: false,
            fallback_limit: 0,
        }
    }
}

impl BacktestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.ramp == 0 || self.lifetime == 0 {
            return Err(Error::Validation(
                "window, ramp, and lifetime must be positive".into(),
            ));
        }
        if !(self.xi_max > 0.0) || !(self.sigma_annual > 0.0) || !(self.initial_cash > 0.0) {
            return Err(Error::Validation(
                "xi_max, sigma_annual, and initial_cash must be positive".into(),
            ));
        }
        if self.eta < 1.0 {
            return Err(Error::Validation(format!(
                "eta must be >= 1, got {}",
                self.eta
            )));
        }
        if self.gamma_trade < 0.0 || self.gamma_short < 0.0 {
            return Err(Error::Validation("cost weights must be >= 0".into()));
        }
        if !(self.periods_per_year > 0.0) {
            return Err(Error::Validation("periods_per_year must be positive".into()));
        }
        if self.soften && !self.gamma_hold.map(|g| g > 0.0).unwrap_or(false) {
            return Err(Error::Validation(
                "soften requires gamma_hold > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn sigma_per_period(&self) -> f64 {
        self.sigma_annual / self.periods_per_year.sqrt()
    }
}

/// Per-date solver diagnostics for the run log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveLog {
    pub date: NaiveDate,
    pub status: String,
    pub num_active: usize,
    pub iterations: u32,
    pub objective: f64,
    pub max_violation: f64,
    pub fallback: bool,
    pub forced_unwinds: Vec<String>,
}

/// Full record of one simulation.
#[derive(Debug, Clone)]
pub struct BacktestResult {
    pub dates: Vec<NaiveDate>,
    /// NAV path; equals the cash account under cash neutrality.
    pub nav: Vec<f64>,
    pub cash: Vec<f64>,
    /// Simple returns, with a leading zero on the first date.
    pub returns: Vec<f64>,
    /// Per-date (arb id, position) pairs in active-set order.
    pub q_history: Vec<Vec<(String, f64)>>,
    /// Per-date asset holdings in shares.
    pub h_history: Vec<DVector<f64>>,
    pub trade_costs: Vec<f64>,
    pub short_costs: Vec<f64>,
    pub turnover: Vec<f64>,
    pub solver_log: Vec<SolveLog>,
    /// First date index with a nonempty tradeable set; metrics start here.
    pub first_traded: Option<usize>,
}

impl BacktestResult {
    pub fn num_fallbacks(&self) -> usize {
        self.solver_log.iter().filter(|l| l.fallback).count()
    }
}

/// Optional heavy diagnostics captured during a run.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub dump_problems: bool,
    pub dump_covariances: bool,
}

/// One per-day problem summary for offline reproduction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemDump {
    pub date: NaiveDate,
    pub n_assets: usize,
    pub num_active: usize,
    pub active_ids: Vec<String>,
    pub alphas: Vec<f64>,
    pub arb_prices: Vec<f64>,
    pub size_limits: Vec<f64>,
    pub risk_budget: f64,
    pub kappa_trade: Vec<f64>,
    pub kappa_short: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct RunArtifacts {
    pub problems: Vec<ProblemDump>,
    pub covariances: Vec<(NaiveDate, DMatrix<f64>)>,
}

/// Transaction plus holding cost for one rebalance.
pub fn accrue_costs(
    h_new: &DVector<f64>,
    h_old: &DVector<f64>,
    kappa_trade: &DVector<f64>,
    kappa_short: &DVector<f64>,
) -> f64 {
    let (trade, short) = cost_parts(h_new, h_old, kappa_trade, kappa_short);
    trade + short
}

fn cost_parts(
    h_new: &DVector<f64>,
    h_old: &DVector<f64>,
    kappa_trade: &DVector<f64>,
    kappa_short: &DVector<f64>,
) -> (f64, f64) {
    let mut trade = 0.0;
    let mut short = 0.0;
    for i in 0..h_new.len() {
        trade += kappa_trade[i] * (h_new[i] - h_old[i]).abs();
        short += kappa_short[i] * (-h_new[i]).max(0.0);
    }
    (trade, short)
}

/// Carry positions across a change of active set.
///
/// Positions travel by id; newly active arbs start at zero. Ids that left
/// the set holding zero are dropped silently; leavers with a nonzero
/// position are returned as forced unwinds (their value was realized into
/// cash at the mark).
pub fn map_previous_q(
    prev: &[(String, f64)],
    current_ids: &[String],
) -> (DVector<f64>, Vec<String>) {
    let lookup: BTreeMap<&str, f64> = prev.iter().map(|(id, q)| (id.as_str(), *q)).collect();
    let aligned = DVector::from_fn(current_ids.len(), |j, _| {
        lookup.get(current_ids[j].as_str()).copied().unwrap_or(0.0)
    });
    let unwinds = prev
        .iter()
        .filter(|(id, q)| *q != 0.0 && !current_ids.contains(id))
        .map(|(id, _)| id.clone())
        .collect();
    (aligned, unwinds)
}

/// Mark yesterday's arb positions at today's prices.
pub fn mark_positions(
    positions: &[(String, f64)],
    arbs_by_id: &BTreeMap<String, Mbsa>,
    asset_prices: &DVector<f64>,
) -> Result<f64> {
    let mut value = 0.0;
    for (id, q) in positions {
        let arb = arbs_by_id.get(id).ok_or_else(|| {
            Error::Validation(format!("position references unknown arb `{id}`"))
        })?;
        value += q * arb.price(asset_prices)?;
    }
    Ok(value)
}

pub fn run(data: &MarketData, arbs: &[Mbsa], config: &BacktestConfig) -> Result<BacktestResult> {
    run_with_options(data, arbs, config, &RunOptions::default()).map(|(result, _)| result)
}

pub fn run_with_options(
    data: &MarketData,
    arbs: &[Mbsa],
    config: &BacktestConfig,
    options: &RunOptions,
) -> Result<(BacktestResult, RunArtifacts)> {
    config.validate()?;
    let n = data.num_assets();
    let t_len = data.num_periods();
    let m = config.window;
    if t_len <= m {
        return Err(Error::InsufficientHistory {
            needed: m + 1,
            available: t_len,
        });
    }

    let mut arbs_by_id: BTreeMap<String, Mbsa> = BTreeMap::new();
    for arb in arbs {
        // Fail fast on bad references and duplicate ids before simulating.
        arb.dense_holdings(n)?;
        if arbs_by_id.insert(arb.id().to_string(), arb.clone()).is_some() {
            return Err(Error::Validation(format!("duplicate arb id `{}`", arb.id())));
        }
    }

    let mut iewma = IewmaState::new(n, m, config.vol_half_life, config.corr_half_life)?;
    let mut smoother = CovarianceSmoother::new(config.smooth_half_life)?;
    let tolerances = Tolerances::default();
    let sigma_per_period = config.sigma_per_period();

    let mut result = BacktestResult {
        dates: data.dates.clone(),
        nav: Vec::with_capacity(t_len),
        cash: Vec::with_capacity(t_len),
        returns: Vec::with_capacity(t_len),
        q_history: Vec::with_capacity(t_len),
        h_history: Vec::with_capacity(t_len),
        trade_costs: Vec::with_capacity(t_len),
        short_costs: Vec::with_capacity(t_len),
        turnover: Vec::with_capacity(t_len),
        solver_log: Vec::with_capacity(t_len),
        first_traded: None,
    };
    let mut artifacts = RunArtifacts::default();

    let mut cash = config.initial_cash;
    let mut prev_positions: Vec<(String, f64)> = Vec::new();
    let mut prev_h = DVector::zeros(n);

    for t in 0..t_len {
        let date = data.dates[t];
        let asset_prices = data.price_row(t);

        if t + 1 < m {
            // Covariance warm-up: absorb prices, hold everything flat.
            iewma.absorb(&asset_prices)?;
            result.nav.push(cash);
            result.cash.push(cash);
            result
                .returns
                .push(day_return(&result.nav, t));
            result.q_history.push(Vec::new());
            result.h_history.push(prev_h.clone());
            result.trade_costs.push(0.0);
            result.short_costs.push(0.0);
            result.turnover.push(0.0);
            result.solver_log.push(SolveLog {
                date,
                status: "warmup".into(),
                num_active: 0,
                iterations: 0,
                objective: 0.0,
                max_violation: 0.0,
                fallback: false,
                forced_unwinds: Vec::new(),
            });
            continue;
        }

        let sigma_assets = smoother.smooth(&iewma.update(&asset_prices)?)?;
        if options.dump_covariances {
            artifacts.covariances.push((date, sigma_assets.clone()));
        }

        // Mark yesterday's book at today's prices; this is the portfolio
        // value the optimizer may allocate.
        let mark = mark_positions(&prev_positions, &arbs_by_id, &asset_prices)?;
        let pinned = cash + mark;

        let snap = snapshot(arbs, &data.prices, t, m, config.xi_max)?;
        if result.first_traded.is_none() && snap.num_active() > 0 {
            result.first_traded = Some(t);
        }
        let (prev_q, forced_unwinds) = map_previous_q(&prev_positions, &snap.active_ids);

        let sigma_arbs = arb_covariance(&snap.stacking, &sigma_assets)?;
        let sigma_root = factorize(&sigma_arbs)?;
        let inputs = MarkowitzInputs {
            snapshot: snap,
            asset_prices: asset_prices.clone(),
            sigma_root,
            kappa_trade: data.half_spread_row(t),
            kappa_short: data.short_rate_row(t),
            prev_q,
            prev_h: prev_h.clone(),
            prev_cash: cash,
            gamma_trade: config.gamma_trade,
            gamma_short: config.gamma_short,
            gamma_hold: config.gamma_hold.unwrap_or(0.0),
            eta: config.eta,
            sigma_per_period,
            soften: config.soften,
        };

        if options.dump_problems {
            artifacts.problems.push(ProblemDump {
                date,
                n_assets: n,
                num_active: inputs.snapshot.num_active(),
                active_ids: inputs.snapshot.active_ids.clone(),
                alphas: inputs.snapshot.alphas.iter().copied().collect(),
                arb_prices: inputs.snapshot.prices.iter().copied().collect(),
                size_limits: inputs.snapshot.size_limits.iter().copied().collect(),
                risk_budget: sigma_per_period * pinned,
                kappa_trade: inputs.kappa_trade.iter().copied().collect(),
                kappa_short: inputs.kappa_short.iter().copied().collect(),
            });
        }

        let built = if config.soften {
            soften_problem(&inputs)
        } else {
            build_problem(&inputs)
        };
        let (rebalance, fallback) = match built.and_then(|p| solve(&p, &inputs, &tolerances)) {
            Ok(r) => (r, false),
            Err(Error::SolverFailure { status }) => {
                (hold_previous(&inputs, pinned, status), true)
            }
            Err(Error::InfeasibleState(_)) => {
                return Err(Error::Bankruptcy {
                    date: date.to_string(),
                    cash: pinned,
                });
            }
            Err(other) => return Err(other),
        };

        let (trade_cost, short_cost) = cost_parts(
            &rebalance.h,
            &prev_h,
            &inputs.kappa_trade,
            &inputs.kappa_short,
        );
        let new_cash = pinned - trade_cost - short_cost;
        if !(new_cash > 0.0) {
            return Err(Error::Bankruptcy {
                date: date.to_string(),
                cash: new_cash,
            });
        }

        result.nav.push(new_cash);
        result.cash.push(new_cash);
        result.returns.push(day_return(&result.nav, t));
        result
            .turnover
            .push(metrics::turnover(&rebalance.h, &prev_h, &asset_prices, new_cash)?);
        result.trade_costs.push(trade_cost);
        result.short_costs.push(short_cost);
        let positions: Vec<(String, f64)> = inputs
            .snapshot
            .active_ids
            .iter()
            .cloned()
            .zip(rebalance.q.iter().copied())
            .collect();
        result.q_history.push(positions.clone());
        result.h_history.push(rebalance.h.clone());
        result.solver_log.push(SolveLog {
            date,
            status: rebalance.diagnostics.status.clone(),
            num_active: inputs.snapshot.num_active(),
            iterations: rebalance.diagnostics.iterations,
            objective: rebalance.objective,
            max_violation: rebalance.diagnostics.max_violation,
            fallback,
            forced_unwinds,
        });

        prev_positions = positions;
        prev_h = rebalance.h;
        cash = new_cash;
    }

    Ok((result, artifacts))
}

fn day_return(nav: &[f64], t: usize) -> f64 {
    if t == 0 {
        0.0
    } else {
        (nav[t] - nav[t - 1]) / nav[t - 1]
    }
}

/// Hold-previous fallback after a failed solve: keep carried positions,
/// force arbs whose size limit has reached zero flat, and mark the event.
fn hold_previous(inputs: &MarkowitzInputs, pinned: f64, status: String) -> RebalanceResult {
    let k = inputs.snapshot.num_active();
    let q = DVector::from_fn(k, |j, _| {
        if inputs.snapshot.size_limits[j] == 0.0 {
            0.0
        } else {
            inputs.prev_q[j]
        }
    });
    let h = &inputs.snapshot.stacking * &q;
    let objective = objective_value(inputs, &h, &q);
    RebalanceResult {
        q,
        h,
        cash: pinned,
        objective,
        diagnostics: SolveDiagnostics {
            status: format!("fallback: {status}"),
            iterations: 0,
            solve_time: 0.0,
            max_violation: f64::NAN,
        },
        binding: Vec::new(),
    }
}
