//! Conic standard form and the solver bridge.
//!
//! A problem is a linear objective over dense-indexed variables, linear
//! equalities, linear `<=` inequalities, and second-order cone constraints
//! `||inside||_2 <= bound` where both sides are affine. Any conforming
//! conic solver can sit behind [`ConicSolver`]; the default is Clarabel.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};

use crate::error::{Error, Result};

/// An affine expression `sum(coeff * x[var]) + constant`.
#[derive(Debug, Clone, Default)]
pub struct LinearExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl LinearExpr {
    pub fn new(terms: Vec<(usize, f64)>, constant: f64) -> Self {
        Self { terms, constant }
    }

    pub fn evaluate(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|(i, c)| c * x[*i]).sum::<f64>()
    }
}

/// `||inside||_2 <= bound`, both sides affine.
#[derive(Debug, Clone)]
pub struct SocConstraint {
    pub bound: LinearExpr,
    pub inside: Vec<LinearExpr>,
}

/// Linear constraint `terms . x (=|<=) rhs`.
#[derive(Debug, Clone)]
pub struct LinearConstraint {
    pub terms: Vec<(usize, f64)>,
    pub rhs: f64,
}

/// A conic program in the standard form described in the module docs.
#[derive(Debug, Clone)]
pub struct ConicProblem {
    num_vars: usize,
    objective: Vec<f64>,
    equalities: Vec<LinearConstraint>,
    inequalities: Vec<LinearConstraint>,
    cones: Vec<SocConstraint>,
}

impl ConicProblem {
    pub fn new(num_vars: usize) -> Self {
        Self {
            num_vars,
            objective: vec![0.0; num_vars],
            equalities: Vec::new(),
            inequalities: Vec::new(),
            cones: Vec::new(),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn num_equalities(&self) -> usize {
        self.equalities.len()
    }

    pub fn num_inequalities(&self) -> usize {
        self.inequalities.len()
    }

    pub fn num_cones(&self) -> usize {
        self.cones.len()
    }

    /// Add `coeff` to the minimized objective's coefficient on `var`.
    pub fn add_objective_term(&mut self, var: usize, coeff: f64) {
        self.objective[var] += coeff;
    }

    pub fn objective_coefficients(&self) -> &[f64] {
        &self.objective
    }

    pub fn add_equality(&mut self, terms: Vec<(usize, f64)>, rhs: f64) {
        self.equalities.push(LinearConstraint { terms, rhs });
    }

    /// Add `terms . x <= rhs`.
    pub fn add_inequality(&mut self, terms: Vec<(usize, f64)>, rhs: f64) {
        self.inequalities.push(LinearConstraint { terms, rhs });
    }

    pub fn add_soc(&mut self, bound: LinearExpr, inside: Vec<LinearExpr>) {
        self.cones.push(SocConstraint { bound, inside });
    }
}

/// Terminal state of a solve attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    /// Converged at reduced accuracy; acceptance still hinges on the
    /// independent feasibility audit.
    AlmostOptimal,
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SolveStatus::Optimal => write!(f, "optimal"),
            SolveStatus::AlmostOptimal => write!(f, "almost_optimal"),
        }
    }
}

/// Primal solution of a conic program.
#[derive(Debug, Clone)]
pub struct ConicSolution {
    pub x: Vec<f64>,
    /// Value of the minimized objective reported by the solver.
    pub objective: f64,
    pub status: SolveStatus,
    pub iterations: u32,
    pub solve_time: f64,
}

/// A solver able to handle the standard form.
pub trait ConicSolver {
    fn solve(&self, problem: &ConicProblem) -> Result<ConicSolution>;
}

/// Clarabel interior-point backend.
#[derive(Debug, Clone)]
pub struct ClarabelSolver {
    pub max_iterations: u32,
    /// Duality-gap and feasibility tolerance handed to the solver.
    pub tolerance: f64,
    pub verbose: bool,
}

impl Default for ClarabelSolver {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            tolerance: 1e-9,
            verbose: false,
        }
    }
}

impl ConicSolver for ClarabelSolver {
    fn solve(&self, problem: &ConicProblem) -> Result<ConicSolution> {
        let n = problem.num_vars;
        let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
        let mut b: Vec<f64> = Vec::new();
        let mut cones: Vec<SupportedConeT<f64>> = Vec::new();

        // Zero cone: s = b - Ax = 0.
        if !problem.equalities.is_empty() {
            cones.push(SupportedConeT::ZeroConeT(problem.equalities.len()));
            for eq in &problem.equalities {
                rows.push(eq.terms.clone());
                b.push(eq.rhs);
            }
        }
        // Nonnegative cone: s = rhs - terms.x >= 0.
        if !problem.inequalities.is_empty() {
            cones.push(SupportedConeT::NonnegativeConeT(problem.inequalities.len()));
            for ineq in &problem.inequalities {
                rows.push(ineq.terms.clone());
                b.push(ineq.rhs);
            }
        }
        // Second-order cones: s_0 = bound, s_i = inside_i, so A carries the
        // negated coefficients and b the constants.
        for cone in &problem.cones {
            cones.push(SupportedConeT::SecondOrderConeT(cone.inside.len() + 1));
            rows.push(negate(&cone.bound.terms));
            b.push(cone.bound.constant);
            for inner in &cone.inside {
                rows.push(negate(&inner.terms));
                b.push(inner.constant);
            }
        }

        let a = rows_to_csc(&rows, n);
        let p = CscMatrix::zeros((n, n));
        let settings = DefaultSettings {
            verbose: self.verbose,
            max_iter: self.max_iterations,
            tol_gap_abs: self.tolerance,
            tol_gap_rel: self.tolerance,
            tol_feas: self.tolerance,
            ..DefaultSettings::default()
        };
        let mut solver = DefaultSolver::new(&p, &problem.objective, &a, &b, &cones, settings)
            .map_err(|e| Error::SolverFailure {
                status: format!("setup: {e:?}"),
            })?;
        solver.solve();

        let solution = &solver.solution;
        let status = match solution.status {
            SolverStatus::Solved => SolveStatus::Optimal,
            SolverStatus::AlmostSolved => SolveStatus::AlmostOptimal,
            other => {
                return Err(Error::SolverFailure {
                    status: format!("{other:?}"),
                })
            }
        };
        Ok(ConicSolution {
            x: solution.x.clone(),
            objective: solution.obj_val,
            status,
            iterations: solution.iterations,
            solve_time: solution.solve_time,
        })
    }
}

fn negate(terms: &[(usize, f64)]) -> Vec<(usize, f64)> {
    terms.iter().map(|(i, c)| (*i, -c)).collect()
}

fn rows_to_csc(rows: &[Vec<(usize, f64)>], n: usize) -> CscMatrix<f64> {
    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
    for (r, row) in rows.iter().enumerate() {
        for (c, v) in row {
            if *v != 0.0 {
                triplets.push((r, *c, *v));
            }
        }
    }
    triplets.sort_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
    let mut colptr = vec![0usize; n + 1];
    let mut rowval = Vec::with_capacity(triplets.len());
    let mut nzval = Vec::with_capacity(triplets.len());
    for (r, c, v) in &triplets {
        colptr[c + 1] += 1;
        rowval.push(*r);
        nzval.push(*v);
    }
    for c in 0..n {
        colptr[c + 1] += colptr[c];
    }
    CscMatrix::new(rows.len(), n, colptr, rowval, nzval)
}
