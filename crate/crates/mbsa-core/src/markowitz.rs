//! Per-period portfolio construction.
//!
//! Each rebalance maximizes alpha exposure net of trading and shorting
//! costs, subject to cash-neutrality, the arb-to-asset coupling, per-arb
//! size limits, a collateral floor for shorts, and a second-order-cone
//! risk budget `||Sigma^{1/2} q||_2 <= sigma * c`. The program is assembled
//! in the conic standard form and handed to a conforming solver; accepted
//! solutions are re-audited from raw inputs, never trusted on solver
//! status alone.
//!
//! The cash variable is pinned by the mark-to-market equality
//! `c = c_prev + p . q_prev` before costs, so every other constraint is
//! linear or second-order cone in `(h, q)`.

use nalgebra::{DMatrix, DVector};

use crate::arb::ArbSnapshot;
use crate::error::{Error, Result};
use crate::socp::{ClarabelSolver, ConicProblem, ConicSolver, LinearExpr};

/// Nudge on the traded-value epigraph when a zero cost weight would leave
/// the turnover direction degenerate; keeps optima unique and runs
/// reproducible without visibly moving the objective.
const TURNOVER_EPSILON: f64 = 1e-12;

/// Everything one rebalance needs.
#[derive(Debug, Clone)]
pub struct MarkowitzInputs {
    pub snapshot: ArbSnapshot,
    /// Asset prices `P_t` in USD.
    pub asset_prices: DVector<f64>,
    /// K x K root `R` with `R' R = Sigma_t`.
    pub sigma_root: DMatrix<f64>,
    /// Half-spreads in USD per share.
    pub kappa_trade: DVector<f64>,
    /// Shorting rates in USD per share per period.
    pub kappa_short: DVector<f64>,
    /// Previous arb positions mapped onto the current active set.
    pub prev_q: DVector<f64>,
    /// Previous asset holdings in shares.
    pub prev_h: DVector<f64>,
    /// Previous cash in USD.
    pub prev_cash: f64,
    pub gamma_trade: f64,
    pub gamma_short: f64,
    /// Weight of the holdings-mismatch penalty in the softened variant.
    pub gamma_hold: f64,
    /// Collateral parameter, >= 1.
    pub eta: f64,
    /// Per-period risk target as a fraction of portfolio value.
    pub sigma_per_period: f64,
    pub soften: bool,
}

impl MarkowitzInputs {
    pub fn validate(&self) -> Result<()> {
        let n = self.snapshot.num_assets();
        let k = self.snapshot.num_active();
        for (len, name) in [
            (self.asset_prices.len(), "asset_prices"),
            (self.kappa_trade.len(), "kappa_trade"),
            (self.kappa_short.len(), "kappa_short"),
            (self.prev_h.len(), "prev_h"),
        ] {
            if len != n {
                return Err(Error::Dimension(format!(
                    "{name} has length {len}, expected {n}"
                )));
            }
        }
        if self.prev_q.len() != k {
            return Err(Error::Dimension(format!(
                "prev_q has length {}, expected {k}",
                self.prev_q.len()
            )));
        }
        if self.sigma_root.shape() != (k, k) {
            return Err(Error::Dimension(format!(
                "sigma_root is {:?}, expected {k}x{k}",
                self.sigma_root.shape()
            )));
        }
        if self.eta < 1.0 {
            return Err(Error::Validation(format!("eta must be >= 1, got {}", self.eta)));
        }
        if !(self.sigma_per_period > 0.0) {
            return Err(Error::Validation(format!(
                "sigma_per_period must be positive, got {}",
                self.sigma_per_period
            )));
        }
        if self.gamma_trade < 0.0 || self.gamma_short < 0.0 || self.gamma_hold < 0.0 {
            return Err(Error::Validation("cost weights must be >= 0".into()));
        }
        if self.snapshot.size_limits.iter().any(|x| *x < 0.0) {
            return Err(Error::Validation("size limits must be >= 0".into()));
        }
        Ok(())
    }

    /// Portfolio value available to allocate: `c_prev + p . q_prev`.
    pub fn pinned_cash(&self) -> f64 {
        self.prev_cash + self.snapshot.prices.dot(&self.prev_q)
    }
}

/// Index bookkeeping for the stacked variable vector
/// `[h, q, c, u, v (, w)]` where `u` bounds `|h - h_prev|`, `v` bounds
/// `(-h)_+`, and `w` bounds the softened holdings mismatch in USD.
#[derive(Debug, Clone, Copy)]
struct Layout {
    n: usize,
    k: usize,
    soft: bool,
}

impl Layout {
    fn h(&self, i: usize) -> usize {
        i
    }
    fn q(&self, j: usize) -> usize {
        self.n + j
    }
    fn c(&self) -> usize {
        self.n + self.k
    }
    fn u(&self, i: usize) -> usize {
        self.n + self.k + 1 + i
    }
    fn v(&self, i: usize) -> usize {
        self.n + self.k + 1 + self.n + i
    }
    fn w(&self, i: usize) -> usize {
        debug_assert!(self.soft);
        self.n + self.k + 1 + 2 * self.n + i
    }
    fn num_vars(&self) -> usize {
        self.n + self.k + 1 + 2 * self.n + if self.soft { self.n } else { 0 }
    }
}

/// A rebalance program ready to solve.
#[derive(Debug, Clone)]
pub struct RebalanceProblem {
    pub program: ConicProblem,
    layout: Layout,
    pinned_cash: f64,
}

impl RebalanceProblem {
    pub fn pinned_cash(&self) -> f64 {
        self.pinned_cash
    }
}

/// Build the hard-coupled variant with `h = S q` as equalities.
pub fn build_problem(inputs: &MarkowitzInputs) -> Result<RebalanceProblem> {
    build(inputs, false)
}

/// Build the softened variant: the coupling equality is replaced by the
/// penalty `gamma_hold * ||P . (h - S q)||_1` in the objective.
pub fn soften_problem(inputs: &MarkowitzInputs) -> Result<RebalanceProblem> {
    if !(inputs.gamma_hold > 0.0) {
        return Err(Error::Validation(
            "softening requires gamma_hold > 0; an unpenalized decoupling is unbounded".into(),
        ));
    }
    build(inputs, true)
}

fn build(inputs: &MarkowitzInputs, soft: bool) -> Result<RebalanceProblem> {
    inputs.validate()?;
    let pinned = inputs.pinned_cash();
    if !(pinned > 0.0) {
        return Err(Error::InfeasibleState(format!(
            "portfolio value {pinned} must be positive to rebalance"
        )));
    }

    let n = inputs.snapshot.num_assets();
    let k = inputs.snapshot.num_active();
    let layout = Layout { n, k, soft };
    let mut program = ConicProblem::new(layout.num_vars());
    let snap = &inputs.snapshot;
    let prices = &inputs.asset_prices;

    // Objective (minimized): -alpha' q + trade costs on u + shorting costs
    // on v (+ the mismatch penalty on w when softened).
    for j in 0..k {
        program.add_objective_term(layout.q(j), -snap.alphas[j]);
    }
    for i in 0..n {
        let trade_coeff = inputs.gamma_trade * inputs.kappa_trade[i];
        program.add_objective_term(
            layout.u(i),
            if trade_coeff > 0.0 {
                trade_coeff
            } else {
                TURNOVER_EPSILON * prices[i]
            },
        );
        program.add_objective_term(layout.v(i), inputs.gamma_short * inputs.kappa_short[i]);
        if soft {
            program.add_objective_term(layout.w(i), inputs.gamma_hold);
        }
    }

    // Arb-to-asset coupling.
    if !soft {
        for i in 0..n {
            let mut terms = vec![(layout.h(i), 1.0)];
            for j in 0..k {
                let s = snap.stacking[(i, j)];
                if s != 0.0 {
                    terms.push((layout.q(j), -s));
                }
            }
            program.add_equality(terms, 0.0);
        }
    } else {
        // w_i >= |P_i (h - S q)_i| as two inequalities.
        for i in 0..n {
            let mut pos = vec![(layout.h(i), prices[i]), (layout.w(i), -1.0)];
            let mut neg = vec![(layout.h(i), -prices[i]), (layout.w(i), -1.0)];
            for j in 0..k {
                let s = snap.stacking[(i, j)];
                if s != 0.0 {
                    pos.push((layout.q(j), -prices[i] * s));
                    neg.push((layout.q(j), prices[i] * s));
                }
            }
            program.add_inequality(pos, 0.0);
            program.add_inequality(neg, 0.0);
        }
    }

    // Cash-neutrality.
    if k > 0 {
        let terms: Vec<(usize, f64)> = (0..k)
            .filter(|j| snap.prices[*j] != 0.0)
            .map(|j| (layout.q(j), snap.prices[j]))
            .collect();
        program.add_equality(terms, 0.0);
    }

    // The cash account is known before trading costs.
    program.add_equality(vec![(layout.c(), 1.0)], pinned);

    // Traded-shares epigraph: u_i >= |h_i - h_prev_i|.
    for i in 0..n {
        program.add_inequality(
            vec![(layout.h(i), 1.0), (layout.u(i), -1.0)],
            inputs.prev_h[i],
        );
        program.add_inequality(
            vec![(layout.h(i), -1.0), (layout.u(i), -1.0)],
            -inputs.prev_h[i],
        );
    }

    // Short-position epigraph: v_i >= (-h_i)_+.
    for i in 0..n {
        program.add_inequality(vec![(layout.h(i), -1.0), (layout.v(i), -1.0)], 0.0);
        program.add_inequality(vec![(layout.v(i), -1.0)], 0.0);
    }

    // Size limits |q_k| |p_k| <= xi_k c; a zero limit pins the position
    // outright so decommissions land exactly at zero.
    for j in 0..k {
        let xi = snap.size_limits[j];
        if xi == 0.0 {
            program.add_equality(vec![(layout.q(j), 1.0)], 0.0);
            continue;
        }
        let abs_price = snap.prices[j].abs();
        if abs_price > 0.0 {
            program.add_inequality(vec![(layout.q(j), abs_price), (layout.c(), -xi)], 0.0);
            program.add_inequality(vec![(layout.q(j), -abs_price), (layout.c(), -xi)], 0.0);
        }
    }

    // Collateral: c >= (eta - 1) P' (h)_-; vacuous at eta = 1.
    if inputs.eta > 1.0 {
        let mut terms: Vec<(usize, f64)> = (0..n)
            .map(|i| (layout.v(i), (inputs.eta - 1.0) * prices[i]))
            .collect();
        terms.push((layout.c(), -1.0));
        program.add_inequality(terms, 0.0);
    }

    // Risk budget as one second-order cone.
    if k > 0 {
        let bound = LinearExpr::new(vec![(layout.c(), inputs.sigma_per_period)], 0.0);
        let inside = (0..k)
            .map(|r| {
                let terms = (0..k)
                    .filter(|j| inputs.sigma_root[(r, *j)] != 0.0)
                    .map(|j| (layout.q(j), inputs.sigma_root[(r, j)]))
                    .collect();
                LinearExpr::new(terms, 0.0)
            })
            .collect();
        program.add_soc(bound, inside);
    }

    Ok(RebalanceProblem {
        program,
        layout,
        pinned_cash: pinned,
    })
}

/// Numerical acceptance thresholds; absolute tolerances scale with cash.
#[derive(Debug, Clone, Copy)]
pub struct Tolerances {
    /// Absolute tolerance per unit of cash (tol_abs = abs_per_cash * c).
    pub abs_per_cash: f64,
    pub rel: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            abs_per_cash: 1e-6,
            rel: 1e-6,
        }
    }
}

impl Tolerances {
    pub fn abs(&self, cash: f64) -> f64 {
        self.abs_per_cash * cash
    }
}

/// Solver diagnostics carried alongside a rebalance.
#[derive(Debug, Clone)]
pub struct SolveDiagnostics {
    pub status: String,
    pub iterations: u32,
    pub solve_time: f64,
    /// Largest enforced constraint violation from the independent audit.
    pub max_violation: f64,
}

/// The new portfolio after one rebalance.
#[derive(Debug, Clone)]
pub struct RebalanceResult {
    /// Arb positions aligned with the snapshot's active ids.
    pub q: DVector<f64>,
    /// Asset holdings in shares.
    pub h: DVector<f64>,
    /// Cash in USD (before the costs charged by the accounting layer).
    pub cash: f64,
    /// Objective value at the solution: alpha exposure net of modeled
    /// costs (and the mismatch penalty when softened).
    pub objective: f64,
    pub diagnostics: SolveDiagnostics,
    /// Names of inequality constraints active within tolerance.
    pub binding: Vec<String>,
}

/// One audited constraint residual.
#[derive(Debug, Clone)]
pub struct ConstraintCheck {
    pub name: String,
    /// Signed violation; negative values mean slack.
    pub violation: f64,
    pub tolerance: f64,
    /// Whether exceeding the tolerance fails the audit (the softened
    /// coupling is reported but not enforced).
    pub enforced: bool,
}

/// Independent feasibility audit of a rebalance.
#[derive(Debug, Clone)]
pub struct ViolationReport {
    pub checks: Vec<ConstraintCheck>,
}

impl ViolationReport {
    pub fn max_violation(&self) -> f64 {
        self.checks
            .iter()
            .filter(|c| c.enforced)
            .map(|c| c.violation)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self) -> bool {
        self.checks
            .iter()
            .filter(|c| c.enforced)
            .all(|c| c.violation <= c.tolerance)
    }

    pub fn failures(&self) -> Vec<&ConstraintCheck> {
        self.checks
            .iter()
            .filter(|c| c.enforced && c.violation > c.tolerance)
            .collect()
    }
}

/// Recompute every constraint residual from raw inputs.
pub fn verify(
    result: &RebalanceResult,
    inputs: &MarkowitzInputs,
    tol: &Tolerances,
) -> ViolationReport {
    let snap = &inputs.snapshot;
    let cash = result.cash;
    let abs_tol = tol.abs(cash);
    let mut checks = Vec::new();

    checks.push(ConstraintCheck {
        name: "cash_neutrality".into(),
        violation: snap.prices.dot(&result.q).abs(),
        tolerance: abs_tol,
        enforced: true,
    });

    let mismatch = &result.h - &snap.stacking * &result.q;
    checks.push(ConstraintCheck {
        name: "arb_to_asset".into(),
        violation: mismatch.amax(),
        tolerance: abs_tol,
        enforced: !inputs.soften,
    });

    let risk = (&inputs.sigma_root * &result.q).norm();
    let risk_bound = inputs.sigma_per_period * cash;
    checks.push(ConstraintCheck {
        name: "risk".into(),
        violation: risk - risk_bound,
        tolerance: tol.rel * risk_bound,
        enforced: true,
    });

    for j in 0..snap.num_active() {
        checks.push(ConstraintCheck {
            name: format!("size_limit[{}]", snap.active_ids[j]),
            violation: result.q[j].abs() * snap.prices[j].abs() - snap.size_limits[j] * cash,
            tolerance: tol.rel * snap.size_limits[j] * cash,
            enforced: true,
        });
    }

    let short_value: f64 = (0..result.h.len())
        .map(|i| inputs.asset_prices[i] * (-result.h[i]).max(0.0))
        .sum();
    checks.push(ConstraintCheck {
        name: "collateral".into(),
        violation: (inputs.eta - 1.0) * short_value - cash,
        tolerance: abs_tol,
        enforced: true,
    });

    ViolationReport { checks }
}

/// Objective of the rebalance program at a candidate `(h, q)`.
pub fn objective_value(inputs: &MarkowitzInputs, h: &DVector<f64>, q: &DVector<f64>) -> f64 {
    let snap = &inputs.snapshot;
    let alpha_term = snap.alphas.dot(q);
    let mut trade = 0.0;
    let mut hold = 0.0;
    for i in 0..h.len() {
        trade += inputs.kappa_trade[i] * (h[i] - inputs.prev_h[i]).abs();
        hold += inputs.kappa_short[i] * (-h[i]).max(0.0);
    }
    let mut value = alpha_term - inputs.gamma_trade * trade - inputs.gamma_short * hold;
    if inputs.soften {
        let mismatch = h - &snap.stacking * q;
        let penalty: f64 = (0..h.len())
            .map(|i| (inputs.asset_prices[i] * mismatch[i]).abs())
            .sum();
        value -= inputs.gamma_hold * penalty;
    }
    value
}

/// Solve a built problem with the default Clarabel backend.
pub fn solve(
    problem: &RebalanceProblem,
    inputs: &MarkowitzInputs,
    tol: &Tolerances,
) -> Result<RebalanceResult> {
    solve_with(&ClarabelSolver::default(), problem, inputs, tol)
}

/// Solve with an explicit conic backend.
///
/// The empty hard-coupled problem short-circuits to the exact carry-forward
/// solution. Results are audited against raw inputs before acceptance; an
/// audit failure is a solver failure regardless of reported status.
pub fn solve_with(
    solver: &dyn ConicSolver,
    problem: &RebalanceProblem,
    inputs: &MarkowitzInputs,
    tol: &Tolerances,
) -> Result<RebalanceResult> {
    let layout = problem.layout;
    if layout.k == 0 && !layout.soft {
        let h = DVector::zeros(layout.n);
        let q = DVector::zeros(0);
        let objective = objective_value(inputs, &h, &q);
        let mut result = RebalanceResult {
            q,
            h,
            cash: problem.pinned_cash,
            objective,
            diagnostics: SolveDiagnostics {
                status: "trivial".into(),
                iterations: 0,
                solve_time: 0.0,
                max_violation: 0.0,
            },
            binding: Vec::new(),
        };
        let report = verify(&result, inputs, tol);
        result.diagnostics.max_violation = report.max_violation();
        return Ok(result);
    }

    let solution = solver.solve(&problem.program)?;
    let h = DVector::from_fn(layout.n, |i, _| solution.x[layout.h(i)]);
    let mut q = DVector::from_fn(layout.k, |j, _| solution.x[layout.q(j)]);
    // Positions pinned to zero by the decommission schedule are recorded
    // as exact zeros.
    for j in 0..layout.k {
        if inputs.snapshot.size_limits[j] == 0.0 {
            q[j] = 0.0;
        }
    }
    let cash = problem.pinned_cash;
    let objective = objective_value(inputs, &h, &q);

    let mut result = RebalanceResult {
        q,
        h,
        cash,
        objective,
        diagnostics: SolveDiagnostics {
            status: solution.status.to_string(),
            iterations: solution.iterations,
            solve_time: solution.solve_time,
            max_violation: 0.0,
        },
        binding: Vec::new(),
    };

    let report = verify(&result, inputs, tol);
    result.diagnostics.max_violation = report.max_violation();
    if !report.passes() {
        let detail: Vec<String> = report
            .failures()
            .iter()
            .map(|c| format!("{} violated by {:.3e}", c.name, c.violation))
            .collect();
        return Err(Error::SolverFailure {
            status: format!(
                "{} but audit failed: {}",
                result.diagnostics.status,
                detail.join(", ")
            ),
        });
    }

    result.binding = binding_constraints(&result, inputs, tol);
    Ok(result)
}

fn binding_constraints(
    result: &RebalanceResult,
    inputs: &MarkowitzInputs,
    tol: &Tolerances,
) -> Vec<String> {
    let snap = &inputs.snapshot;
    let cash = result.cash;
    let slack_tol = tol.abs(cash);
    let mut out = Vec::new();

    if snap.num_active() > 0 {
        let risk = (&inputs.sigma_root * &result.q).norm();
        if inputs.sigma_per_period * cash - risk <= slack_tol {
            out.push("risk".to_string());
        }
    }
    for j in 0..snap.num_active() {
        let slack = snap.size_limits[j] * cash - result.q[j].abs() * snap.prices[j].abs();
        if slack <= slack_tol {
            out.push(format!("size_limit[{}]", snap.active_ids[j]));
        }
    }
    if inputs.eta > 1.0 {
        let short_value: f64 = (0..result.h.len())
            .map(|i| inputs.asset_prices[i] * (-result.h[i]).max(0.0))
            .sum();
        if cash - (inputs.eta - 1.0) * short_value <= slack_tol {
            out.push("collateral".to_string());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arb::ArbSnapshot;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Hand-assembled snapshot for direct optimizer tests.
    fn snapshot_from_parts(
        stacking: DMatrix<f64>,
        prices: DVector<f64>,
        alphas: DVector<f64>,
        size_limits: DVector<f64>,
    ) -> ArbSnapshot {
        let midpoints = &prices + &alphas;
        let active_ids = (0..prices.len()).map(|j| format!("arb-{j}")).collect();
        ArbSnapshot {
            time: 0,
            active_ids,
            stacking,
            prices,
            midpoints,
            alphas,
            size_limits,
        }
    }

    fn two_arb_inputs(sigma: f64, cash: f64) -> MarkowitzInputs {
        // Two unit-asset arbs with prices (1, -1) and alphas (1, 1).
        let stacking = DMatrix::from_column_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let snapshot = snapshot_from_parts(
            stacking,
            DVector::from_vec(vec![1.0, -1.0]),
            DVector::from_vec(vec![1.0, 1.0]),
            DVector::from_vec(vec![1.0, 1.0]),
        );
        MarkowitzInputs {
            snapshot,
            asset_prices: DVector::from_vec(vec![1.0, 1.0]),
            sigma_root: DMatrix::identity(2, 2),
            kappa_trade: DVector::zeros(2),
            kappa_short: DVector::zeros(2),
            prev_q: DVector::zeros(2),
            prev_h: DVector::zeros(2),
            prev_cash: cash,
            gamma_trade: 0.0,
            gamma_short: 0.0,
            gamma_hold: 0.0,
            eta: 1.0,
            sigma_per_period: sigma,
            soften: false,
        }
    }

    #[test]
    fn analytic_two_arb_solution() {
        // Neutrality forces q = (x, x); with Sigma = I the optimum sits on
        // the risk boundary at x = sigma c / sqrt(2).
        let sigma = 0.1;
        let cash = 1.0;
        let inputs = two_arb_inputs(sigma, cash);
        let problem = build_problem(&inputs).unwrap();
        let result = solve(&problem, &inputs, &Tolerances::default()).unwrap();
        let expected = sigma * cash / 2f64.sqrt();
        assert_relative_eq!(result.q[0], expected, epsilon = 1e-4);
        assert_relative_eq!(result.q[1], expected, epsilon = 1e-4);
        assert_relative_eq!(result.objective, 2.0 * expected, epsilon = 1e-4);
        assert!(result.binding.contains(&"risk".to_string()));
        assert!(verify(&result, &inputs, &Tolerances::default()).passes());
    }

    #[test]
    fn empty_active_set_carries_cash_forward() {
        let inputs = MarkowitzInputs {
            snapshot: ArbSnapshot::empty(0, 3),
            asset_prices: DVector::from_vec(vec![10.0, 20.0, 30.0]),
            sigma_root: DMatrix::zeros(0, 0),
            kappa_trade: DVector::from_element(3, 0.01),
            kappa_short: DVector::from_element(3, 0.001),
            prev_q: DVector::zeros(0),
            prev_h: DVector::zeros(3),
            prev_cash: 2.5,
            gamma_trade: 1.0,
            gamma_short: 1.0,
            gamma_hold: 0.0,
            eta: 1.0,
            sigma_per_period: 0.01,
            soften: false,
        };
        let problem = build_problem(&inputs).unwrap();
        let result = solve(&problem, &inputs, &Tolerances::default()).unwrap();
        assert_eq!(result.q.len(), 0);
        assert_eq!(result.h, DVector::zeros(3));
        assert_relative_eq!(result.cash, 2.5);
        assert_relative_eq!(result.objective, 0.0);
        assert_eq!(result.diagnostics.status, "trivial");
    }

    #[test]
    fn zero_alpha_means_no_trade() {
        let mut inputs = two_arb_inputs(0.1, 1.0);
        inputs.snapshot.alphas = DVector::zeros(2);
        inputs.snapshot.midpoints = inputs.snapshot.prices.clone();
        inputs.kappa_trade = DVector::from_element(2, 0.01);
        inputs.gamma_trade = 1.0;
        let problem = build_problem(&inputs).unwrap();
        let result = solve(&problem, &inputs, &Tolerances::default()).unwrap();
        assert!(result.q.amax() < 1e-7, "q = {:?}", result.q);
        assert!(result.objective.abs() < 1e-7);
    }

    #[test]
    fn variable_count_matches_the_transformation() {
        // n=3, K=2 hard variant: h, q, c plus n trade-cost and n shorting
        // epigraph auxiliaries.
        let stacking = DMatrix::from_column_slice(3, 2, &[1.0, -1.0, 0.0, 0.0, 1.0, -1.0]);
        let snapshot = snapshot_from_parts(
            stacking,
            DVector::from_vec(vec![2.0, 3.0]),
            DVector::from_vec(vec![0.1, -0.2]),
            DVector::from_vec(vec![1.0, 1.0]),
        );
        let inputs = MarkowitzInputs {
            snapshot,
            asset_prices: DVector::from_vec(vec![10.0, 12.0, 9.0]),
            sigma_root: DMatrix::identity(2, 2),
            kappa_trade: DVector::from_element(3, 0.01),
            kappa_short: DVector::from_element(3, 0.001),
            prev_q: DVector::zeros(2),
            prev_h: DVector::zeros(3),
            prev_cash: 1.0,
            gamma_trade: 1.0,
            gamma_short: 1.0,
            gamma_hold: 0.0,
            eta: 1.0,
            sigma_per_period: 0.05,
            soften: false,
        };
        let problem = build_problem(&inputs).unwrap();
        let (n, k) = (3, 2);
        assert_eq!(problem.program.num_vars(), n + k + 1 + n + n);
        assert_eq!(problem.program.num_cones(), 1);
    }

    #[test]
    fn non_positive_portfolio_value_is_rejected() {
        let mut inputs = two_arb_inputs(0.1, 0.0);
        inputs.prev_cash = 0.0;
        assert!(matches!(
            build_problem(&inputs),
            Err(Error::InfeasibleState(_))
        ));
    }

    #[test]
    fn zero_size_limit_pins_position_exactly() {
        let mut inputs = two_arb_inputs(0.1, 1.0);
        inputs.snapshot.size_limits = DVector::from_vec(vec![1.0, 0.0]);
        let problem = build_problem(&inputs).unwrap();
        let result = solve(&problem, &inputs, &Tolerances::default()).unwrap();
        assert_eq!(result.q[1], 0.0);
        // Neutrality then forces the other leg to zero as well.
        assert!(result.q[0].abs() < 1e-7);
    }

    #[test]
    fn soften_with_zero_gamma_hold_is_rejected() {
        let mut inputs = two_arb_inputs(0.1, 1.0);
        inputs.soften = true;
        inputs.gamma_hold = 0.0;
        assert!(soften_problem(&inputs).is_err());
    }

    #[test]
    fn large_gamma_hold_matches_hard_variant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let stacking = DMatrix::from_fn(3, 2, |_, _| rng.random_range(-2.0f64..2.0).round());
        let prices = DVector::from_fn(3, |_, _| rng.random_range(5.0..20.0));
        let arb_prices = stacking.transpose() * &prices;
        let snapshot = snapshot_from_parts(
            stacking,
            arb_prices,
            DVector::from_vec(vec![0.8, -0.3]),
            DVector::from_vec(vec![1.0, 1.0]),
        );
        let mut inputs = MarkowitzInputs {
            snapshot,
            asset_prices: prices,
            sigma_root: DMatrix::identity(2, 2),
            kappa_trade: DVector::from_element(3, 0.01),
            kappa_short: DVector::from_element(3, 0.002),
            prev_q: DVector::zeros(2),
            prev_h: DVector::zeros(3),
            prev_cash: 1.0,
            gamma_trade: 1.0,
            gamma_short: 1.0,
            gamma_hold: 0.0,
            eta: 1.0,
            sigma_per_period: 0.05,
            soften: false,
        };
        let hard = solve(
            &build_problem(&inputs).unwrap(),
            &inputs,
            &Tolerances::default(),
        )
        .unwrap();

        inputs.soften = true;
        inputs.gamma_hold = 1e6;
        let soft = solve(
            &soften_problem(&inputs).unwrap(),
            &inputs,
            &Tolerances::default(),
        )
        .unwrap();
        assert!(
            (&hard.q - &soft.q).amax() < 1e-3,
            "hard {:?} vs soft {:?}",
            hard.q,
            soft.q
        );
    }

    #[test]
    fn softened_zero_alpha_still_prefers_no_position() {
        let mut inputs = two_arb_inputs(0.1, 1.0);
        inputs.snapshot.alphas = DVector::zeros(2);
        inputs.snapshot.midpoints = inputs.snapshot.prices.clone();
        inputs.kappa_trade = DVector::from_element(2, 0.01);
        inputs.gamma_trade = 1.0;
        inputs.soften = true;
        inputs.gamma_hold = 10.0;
        let problem = soften_problem(&inputs).unwrap();
        let result = solve(&problem, &inputs, &Tolerances::default()).unwrap();
        assert!(result.q.amax() < 1e-6);
        assert!(result.h.amax() < 1e-6);
    }

    #[test]
    fn verify_flags_hand_built_neutrality_violation() {
        let inputs = two_arb_inputs(0.1, 1.0);
        let result = RebalanceResult {
            // p = (1, -1), so q = (1, 0) misses neutrality by exactly 1.
            q: DVector::from_vec(vec![1.0, 0.0]),
            h: DVector::from_vec(vec![1.0, 0.0]),
            cash: 1.0,
            objective: 0.0,
            diagnostics: SolveDiagnostics {
                status: "hand".into(),
                iterations: 0,
                solve_time: 0.0,
                max_violation: 0.0,
            },
            binding: Vec::new(),
        };
        let report = verify(&result, &inputs, &Tolerances::default());
        let neutrality = report
            .checks
            .iter()
            .find(|c| c.name == "cash_neutrality")
            .unwrap();
        assert_relative_eq!(neutrality.violation, 1.0);
        assert!(!report.passes());
    }

    #[test]
    fn softened_mismatch_is_reported_not_enforced() {
        let mut inputs = two_arb_inputs(0.1, 1.0);
        inputs.soften = true;
        inputs.gamma_hold = 0.01;
        inputs.kappa_trade = DVector::from_element(2, 0.3);
        inputs.gamma_trade = 1.0;
        inputs.prev_h = DVector::from_vec(vec![0.05, 0.05]);
        let problem = soften_problem(&inputs).unwrap();
        let result = solve(&problem, &inputs, &Tolerances::default()).unwrap();
        let report = verify(&result, &inputs, &Tolerances::default());
        let coupling = report.checks.iter().find(|c| c.name == "arb_to_asset").unwrap();
        assert!(!coupling.enforced);
        assert!(report.passes());
    }

    #[test]
    fn scale_invariance_in_cash() {
        // The program is positively homogeneous in (h, q, c).
        let base = two_arb_inputs(0.08, 1.0);
        let tol = Tolerances::default();
        let base_result = solve(&build_problem(&base).unwrap(), &base, &tol).unwrap();
        for lambda in [0.5, 3.0, 40.0] {
            let mut scaled = base.clone();
            scaled.prev_cash = lambda;
            let result = solve(&build_problem(&scaled).unwrap(), &scaled, &tol).unwrap();
            assert_relative_eq!(
                result.q[0],
                lambda * base_result.q[0],
                max_relative = 1e-5,
                epsilon = 1e-8
            );
            assert_relative_eq!(
                result.objective,
                lambda * base_result.objective,
                max_relative = 1e-5,
                epsilon = 1e-8
            );
        }
    }

    fn random_instance(rng: &mut ChaCha8Rng, n: usize, k: usize) -> MarkowitzInputs {
        loop {
            let stacking =
                DMatrix::from_fn(n, k, |_, _| rng.random_range(-2.0f64..=2.0).round());
            if (0..k).any(|j| stacking.column(j).amax() == 0.0) {
                continue;
            }
            let prices = DVector::from_fn(n, |_, _| rng.random_range(5.0..50.0));
            let arb_prices = stacking.transpose() * &prices;
            if k == 2 && arb_prices.norm() < 1e-6 {
                continue;
            }
            let alphas = DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0));
            let size_limits = DVector::from_fn(k, |_, _| rng.random_range(0.1..1.0));
            let snapshot = snapshot_from_parts(stacking, arb_prices, alphas, size_limits);
            let sigma_root = DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
            let prev_q = DVector::from_fn(k, |_, _| rng.random_range(-0.01..0.01));
            let prev_h = DVector::from_fn(n, |_, _| rng.random_range(-0.02..0.02));
            return MarkowitzInputs {
                snapshot,
                asset_prices: prices,
                sigma_root,
                kappa_trade: DVector::from_fn(n, |_, _| rng.random_range(0.0..0.02)),
                kappa_short: DVector::from_fn(n, |_, _| rng.random_range(0.0..0.001)),
                prev_q,
                prev_h,
                prev_cash: rng.random_range(0.5..4.0),
                gamma_trade: rng.random_range(0.0..2.0),
                gamma_short: rng.random_range(0.0..2.0),
                gamma_hold: 0.0,
                eta: *[1.0, 1.5, 2.02].iter().nth(rng.random_range(0..3)).unwrap(),
                sigma_per_period: rng.random_range(0.01..0.1),
                soften: false,
            };
        }
    }

    /// Dense feasible-set search along the cash-neutral line, independent
    /// of the conic path.
    fn grid_search_best(inputs: &MarkowitzInputs) -> f64 {
        let k = inputs.snapshot.num_active();
        let cash = inputs.pinned_cash();
        let sigma_cash = inputs.sigma_per_period * cash;
        let p = &inputs.snapshot.prices;
        let evaluate = |q: &DVector<f64>| -> Option<f64> {
            let h = &inputs.snapshot.stacking * q;
            if (&inputs.sigma_root * q).norm() > sigma_cash * (1.0 + 1e-9) {
                return None;
            }
            for j in 0..k {
                if q[j].abs() * p[j].abs() > inputs.snapshot.size_limits[j] * cash * (1.0 + 1e-9) {
                    return None;
                }
            }
            let short_value: f64 = (0..h.len())
                .map(|i| inputs.asset_prices[i] * (-h[i]).max(0.0))
                .sum();
            if (inputs.eta - 1.0) * short_value > cash * (1.0 + 1e-9) {
                return None;
            }
            Some(objective_value(inputs, &h, q))
        };

        let mut best = evaluate(&DVector::zeros(k)).expect("origin is feasible");
        if k == 1 {
            // Neutrality pins q to zero whenever the arb price is nonzero.
            if p[0].abs() > 1e-12 {
                return best;
            }
        }
        // Null direction of p'q = 0 for k = 2.
        let mut dir = DVector::from_vec(vec![p[1], -p[0]]);
        dir /= dir.norm();
        let step = sigma_cash / 200.0;
        let risk_dir = (&inputs.sigma_root * &dir).norm();
        let mut reach = if risk_dir > 1e-9 {
            sigma_cash / risk_dir
        } else {
            f64::INFINITY
        };
        for j in 0..k {
            let denom = dir[j].abs() * p[j].abs();
            if denom > 1e-9 {
                reach = reach.min(inputs.snapshot.size_limits[j] * cash / denom);
            }
        }
        assert!(reach.is_finite(), "unbounded neutral line in test instance");
        let steps = (reach / step).ceil() as i64;
        for s in -steps..=steps {
            let q = &dir * (s as f64 * step);
            if let Some(value) = evaluate(&q) {
                best = best.max(value);
            }
        }
        best
    }

    #[test]
    fn solver_beats_the_grid_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let tol = Tolerances::default();
        for trial in 0..5 {
            let n = rng.random_range(2..=4);
            let k = rng.random_range(1..=2);
            let inputs = random_instance(&mut rng, n, k);
            let result = solve(&build_problem(&inputs).unwrap(), &inputs, &tol).unwrap();
            let grid = grid_search_best(&inputs);
            let scale = grid.abs().max(inputs.sigma_per_period * inputs.pinned_cash());
            assert!(
                result.objective >= grid - 0.01 * scale,
                "trial {trial}: solver {} below grid {grid}",
                result.objective
            );
            assert!(verify(&result, &inputs, &tol).passes());
        }
    }

    #[test]
    fn higher_trade_aversion_never_increases_turnover() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let tol = Tolerances::default();
        for _ in 0..4 {
            let inputs = random_instance(&mut rng, 3, 2);
            let mut last_turnover = f64::INFINITY;
            for gamma in [0.0, 0.5, 1.0, 4.0, 16.0] {
                let mut tuned = inputs.clone();
                tuned.gamma_trade = gamma;
                tuned.kappa_trade = DVector::from_element(3, 0.01);
                let result = solve(&build_problem(&tuned).unwrap(), &tuned, &tol).unwrap();
                let traded: f64 = (0..3)
                    .map(|i| {
                        (tuned.asset_prices[i] * (result.h[i] - tuned.prev_h[i])).abs()
                    })
                    .sum();
                assert!(
                    traded <= last_turnover + 1e-6,
                    "turnover rose from {last_turnover} to {traded} at gamma {gamma}"
                );
                last_turnover = traded;
            }
        }
    }
}
