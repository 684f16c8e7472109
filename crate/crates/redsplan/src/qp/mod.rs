//! Convex QP solvers used by every optimization layer.
//!
//! Two entry points share the same primal-dual interior-point iteration
//! (Mehrotra predictor-corrector):
//!
//! * [`solve_qp`] — dense solver for the general problem container
//!   [`QpProblem`]. Used for small generic problems and as the independent
//!   backend of the enumeration oracle.
//! * [`ocp::solve_ocp_qp`] — stage-structured solver whose KKT systems are
//!   factorized by a Riccati-style backward recursion. All planner
//!   subproblems (relaxations, fixed-binary QPs, projector subproblems) are
//!   assembled in this form; cost per iteration is linear in the horizon.

pub mod dense;
pub mod ocp;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub use dense::{solve_qp, solve_qp_with};

#[derive(Debug, Error, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("cost matrix is not positive semidefinite ({0})")]
    NotPsd(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

/// Termination status of a QP solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

/// Dense convex QP
/// `min 1/2 x'Hx + g'x  s.t.  A_eq x = b_eq,  lb_in <= A_in x <= ub_in,
/// lb <= x <= ub` (either side of a two-sided constraint may be infinite).
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub lb_in: DVector<f64>,
    pub ub_in: DVector<f64>,
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
}

impl QpProblem {
    /// Unconstrained problem skeleton; fill in constraint blocks as needed.
    pub fn new(h: DMatrix<f64>, g: DVector<f64>) -> Self {
        let n = g.len();
        Self {
            h,
            g,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, n),
            lb_in: DVector::zeros(0),
            ub_in: DVector::zeros(0),
            lb: DVector::from_element(n, f64::NEG_INFINITY),
            ub: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.g.len()
    }

    pub fn check_dims(&self) -> Result<(), QpError> {
        let n = self.num_vars();
        let ok = self.h.nrows() == n
            && self.h.ncols() == n
            && self.a_eq.ncols() == n
            && self.a_eq.nrows() == self.b_eq.len()
            && self.a_in.ncols() == n
            && self.a_in.nrows() == self.lb_in.len()
            && self.a_in.nrows() == self.ub_in.len()
            && self.lb.len() == n
            && self.ub.len() == n;
        if ok {
            Ok(())
        } else {
            Err(QpError::DimensionMismatch(format!(
                "n={n}, H {}x{}, A_eq {}x{} b_eq {}, A_in {}x{} lb/ub {}/{}",
                self.h.nrows(),
                self.h.ncols(),
                self.a_eq.nrows(),
                self.a_eq.ncols(),
                self.b_eq.len(),
                self.a_in.nrows(),
                self.a_in.ncols(),
                self.lb_in.len(),
                self.ub_in.len()
            )))
        }
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * (x.transpose() * &self.h * x)[(0, 0)] + self.g.dot(x)
    }
}

/// Solution of a [`QpProblem`] with duals per constraint class.
#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Equality duals.
    pub y_eq: DVector<f64>,
    /// Duals of the inequality lower / upper sides (nonnegative).
    pub z_lo: DVector<f64>,
    pub z_hi: DVector<f64>,
    /// Duals of the variable bounds (nonnegative).
    pub w_lo: DVector<f64>,
    pub w_hi: DVector<f64>,
    pub objective: f64,
    pub status: QpStatus,
    pub iterations: usize,
}

/// Max-norm KKT residuals (stationarity, primal feasibility,
/// complementarity), each scaled by the magnitude of the problem data.
pub fn kkt_residuals(p: &QpProblem, sol: &QpSolution) -> (f64, f64, f64) {
    let x = &sol.x;
    let n = p.num_vars();

    // stationarity: Hx + g + A_eq'y + A_in'(z_hi - z_lo) + (w_hi - w_lo)
    let mut r = &p.h * x + &p.g;
    if p.a_eq.nrows() > 0 {
        r += p.a_eq.transpose() * &sol.y_eq;
    }
    if p.a_in.nrows() > 0 {
        r += p.a_in.transpose() * (&sol.z_hi - &sol.z_lo);
    }
    for j in 0..n {
        r[j] += sol.w_hi[j] - sol.w_lo[j];
    }
    let scale_d = 1.0 + p.g.amax() + (&p.h * x).amax();
    let stationarity = r.amax() / scale_d;

    // primal feasibility
    let mut primal: f64 = 0.0;
    let mut scale_p: f64 = 1.0;
    if p.a_eq.nrows() > 0 {
        primal = primal.max((&p.a_eq * x - &p.b_eq).amax());
        scale_p = scale_p.max(p.b_eq.amax());
    }
    let ax = if p.a_in.nrows() > 0 {
        &p.a_in * x
    } else {
        DVector::zeros(0)
    };
    for i in 0..p.a_in.nrows() {
        if p.ub_in[i].is_finite() {
            primal = primal.max(ax[i] - p.ub_in[i]);
            scale_p = scale_p.max(p.ub_in[i].abs());
        }
        if p.lb_in[i].is_finite() {
            primal = primal.max(p.lb_in[i] - ax[i]);
            scale_p = scale_p.max(p.lb_in[i].abs());
        }
    }
    for j in 0..n {
        if p.ub[j].is_finite() {
            primal = primal.max(x[j] - p.ub[j]);
        }
        if p.lb[j].is_finite() {
            primal = primal.max(p.lb[j] - x[j]);
        }
    }
    let primal = primal.max(0.0) / scale_p;

    // complementarity: dual * slack per active side
    let mut comp: f64 = 0.0;
    for i in 0..p.a_in.nrows() {
        if p.ub_in[i].is_finite() {
            comp = comp.max((sol.z_hi[i] * (p.ub_in[i] - ax[i])).abs());
        }
        if p.lb_in[i].is_finite() {
            comp = comp.max((sol.z_lo[i] * (ax[i] - p.lb_in[i])).abs());
        }
    }
    for j in 0..n {
        if p.ub[j].is_finite() {
            comp = comp.max((sol.w_hi[j] * (p.ub[j] - x[j])).abs());
        }
        if p.lb[j].is_finite() {
            comp = comp.max((sol.w_lo[j] * (x[j] - p.lb[j])).abs());
        }
    }
    let comp = comp / (1.0 + sol.objective.abs());

    (stationarity, primal, comp)
}

/// Lagrangian dual objective evaluated at the returned point; for an optimal
/// solution `primal - dual` is (numerically) zero.
pub fn dual_objective(p: &QpProblem, sol: &QpSolution) -> f64 {
    let x = &sol.x;
    let mut d = -0.5 * (x.transpose() * &p.h * x)[(0, 0)];
    d -= p.b_eq.dot(&sol.y_eq);
    for i in 0..p.a_in.nrows() {
        if p.lb_in[i].is_finite() {
            d += sol.z_lo[i] * p.lb_in[i];
        }
        if p.ub_in[i].is_finite() {
            d -= sol.z_hi[i] * p.ub_in[i];
        }
    }
    for j in 0..p.num_vars() {
        if p.lb[j].is_finite() {
            d += sol.w_lo[j] * p.lb[j];
        }
        if p.ub[j].is_finite() {
            d -= sol.w_hi[j] * p.ub[j];
        }
    }
    d
}

/// Shared interior-point settings.
#[derive(Debug, Clone, Copy)]
pub struct IpmSettings {
    pub max_iter: usize,
    /// Scaled feasibility tolerance for acceptance.
    pub feas_tol: f64,
    /// Relative complementarity-gap target the solver keeps pushing for.
    pub gap_tol: f64,
    /// Scaled infeasibility level below which a stall is never declared.
    pub infeas_tol: f64,
    /// Consecutive stalled iterations before declaring infeasibility.
    pub stall_limit: usize,
    /// Static regularization.
    pub reg: f64,
    /// Relative gap below which a feasible iterate that has stopped
    /// improving is accepted as optimal.
    pub accept_gap: f64,
}

impl Default for IpmSettings {
    fn default() -> Self {
        Self {
            max_iter: 100,
            feas_tol: 1e-9,
            gap_tol: 1e-11,
            infeas_tol: 1e-6,
            stall_limit: 10,
            reg: 1e-9,
            accept_gap: 1e-7,
        }
    }
}

impl IpmSettings {
    /// High-accuracy profile for objective comparisons (polish and scoring
    /// solves).
    pub fn tight() -> Self {
        Self {
            gap_tol: 1e-13,
            accept_gap: 5e-11,
            max_iter: 200,
            ..Self::default()
        }
    }
}

/// Largest step in `[0, 1]` keeping `v + alpha dv` strictly positive, with
/// fraction-to-boundary factor `tau`.
pub(crate) fn max_step(v: &[f64], dv: &[f64], tau: f64) -> f64 {
    let mut alpha: f64 = 1.0;
    for (vi, dvi) in v.iter().zip(dv) {
        if *dvi < 0.0 {
            alpha = alpha.min(-tau * vi / dvi);
        }
    }
    alpha.min(1.0)
}

/// Tracks the primal infeasibility measure and reports a stall above the
/// given level.
#[derive(Debug, Clone)]
pub(crate) struct StallDetector {
    level: f64,
    limit: usize,
    best: f64,
    stalled: usize,
}

impl StallDetector {
    pub fn new(level: f64, limit: usize) -> Self {
        Self {
            level,
            limit,
            best: f64::INFINITY,
            stalled: 0,
        }
    }

    /// Feed the current infeasibility; returns the number of consecutive
    /// iterations it has stalled above the level.
    pub fn update(&mut self, infeas: f64) -> usize {
        if infeas < self.level {
            self.stalled = 0;
            self.best = self.best.min(infeas);
            return 0;
        }
        if infeas < 0.9 * self.best {
            self.best = infeas;
            self.stalled = 0;
        } else {
            self.stalled += 1;
        }
        self.stalled
    }

    /// Infeasibility verdict: the primal residual has stalled for the limit
    /// while complementarity converged or the duals diverged, or it has
    /// stalled three times the limit regardless.
    pub fn verdict(&self, stalled: usize, gap: f64, dual_max: f64) -> bool {
        (stalled >= self.limit && (gap <= 1e-7 || dual_max >= 1e9)) || stalled >= 3 * self.limit
    }
}
