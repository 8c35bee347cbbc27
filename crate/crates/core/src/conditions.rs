//! Per-trajectory descent diagnostics and the event `A`.
//!
//! Three constants summarize how well-behaved a recorded trajectory is:
//!
//! * `a_star` — the largest sufficient-descent constant: the smallest
//!   per-step ratio `(loss^t - loss^{t+1}) / ||dx^t||^2`. A trajectory
//!   admits `loss^{t+1} + a ||dx||^2 <= loss^t` for every step exactly when
//!   `a <= a_star`.
//! * `b_star` — the smallest relative-error constant: the largest per-step
//!   ratio `||v^{t+1}|| / ||dx^t||` of gradient norm to step norm.
//! * `c_star` — the iterate bound `max_t ||x^t||`.
//!
//! Zero-length steps get the weakest consistent convention: a zero step
//! with a loss increase makes `a_star` undefined, a zero step with a
//! nonzero gradient makes `b_star` undefined, and a `0/0` step constrains
//! neither. [`event_a`] turns the constants into the indicator of
//! `A = A_desc ∩ A_err ∩ A_bound` against configurable thresholds; a
//! trajectory in `A` is a certified descent run, which is the per-problem
//! event the certificates bound.
//!
//! Convergence itself is checked separately: by loss tolerance for problems
//! with a known optimal value ([`convergence_event_quadratic`]), or by
//! distance to a gradient-descent-refined critical point for network
//! training ([`approximate_critical_point`], [`convergence_event_nn`]).

use crate::problems::{
    regression_loss_grad, NetLayout, Objective, ProblemError, RegressionInstance,
    RegressionObjective,
};
use crate::trajectory::Trajectory;
use crate::vecmath::{all_finite, dist, norm};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConditionError {
    /// The trajectory has no recorded iterates.
    #[error("empty trajectory: no recorded iterates")]
    EmptyTrajectory,
    /// Gradient-descent refinement produced a non-finite iterate.
    #[error("refinement produced a non-finite value at iteration {iter}")]
    RefinementDiverged { iter: usize },
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

/// Largest sufficient-descent constant `a_star`, or `None` when no positive
/// constant works (a loss increase somewhere), or `+inf` when every step
/// has zero length and the losses are non-increasing.
pub fn descent_constant(traj: &Trajectory) -> Result<Option<f64>, ConditionError> {
    if traj.losses.is_empty() {
        return Err(ConditionError::EmptyTrajectory);
    }
    let mut a_star = f64::INFINITY;
    for t in 1..traj.losses.len() {
        let decrease = traj.losses[t - 1] - traj.losses[t];
        let s = traj.step_norms[t];
        if s > 0.0 {
            a_star = a_star.min(decrease / (s * s));
        } else if decrease < 0.0 {
            // A zero-length step must not increase the loss; no a > 0 can
            // compensate for it.
            return Ok(None);
        }
    }
    Ok(if a_star > 0.0 { Some(a_star) } else { None })
}

/// Smallest relative-error constant `b_star`, or `None` when a zero-length
/// step carries a nonzero gradient (no finite constant works). Steps with
/// both quantities zero constrain nothing; a trajectory without steps gives
/// `0`.
pub fn relative_error_constant(traj: &Trajectory) -> Result<Option<f64>, ConditionError> {
    if traj.losses.is_empty() {
        return Err(ConditionError::EmptyTrajectory);
    }
    let mut b_star = 0.0f64;
    for t in 1..traj.losses.len() {
        let v = traj.grad_norms[t];
        let s = traj.step_norms[t];
        if s > 0.0 {
            b_star = b_star.max(v / s);
        } else if v > 0.0 {
            return Ok(None);
        }
    }
    Ok(Some(b_star))
}

/// Iterate bound `c_star = max_t ||x^t||`; `+inf` for a diverged
/// trajectory (the escaping iterate is not in the record but is certainly
/// unbounded for our purposes).
pub fn bound_constant(traj: &Trajectory) -> f64 {
    if traj.diverged {
        return f64::INFINITY;
    }
    traj.state_norms.iter().copied().fold(0.0, f64::max)
}

/// Thresholds defining the event `A`. The underlying conditions only need
/// *some* positive constants to exist, so the defaults are wide enough to
/// act as existence checks while still excluding degenerate runs.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EventThresholds {
    /// Minimum acceptable `a_star`.
    pub a_min: f64,
    /// Maximum acceptable `b_star`.
    pub b_max: f64,
    /// Maximum acceptable `c_star`.
    pub c_max: f64,
}

impl Default for EventThresholds {
    fn default() -> Self {
        Self {
            a_min: 1e-12,
            b_max: 1e12,
            c_max: 1e8,
        }
    }
}

/// Per-trajectory constants, event membership, and (once evaluated) the
/// convergence outcome. One row of the experiment report.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionReport {
    pub instance: u64,
    pub algorithm: String,
    /// `None` when no positive constant exists; may be `+inf`.
    pub a_star: Option<f64>,
    /// `None` when no finite constant exists.
    pub b_star: Option<f64>,
    /// May be `+inf` (diverged trajectory).
    pub c_star: f64,
    pub in_a_desc: bool,
    pub in_a_err: bool,
    pub in_a_bound: bool,
    pub in_a: bool,
    /// `None` until a convergence criterion has been evaluated.
    pub converged: Option<bool>,
    /// Tag of the criterion behind `converged` (e.g. `loss_tol`).
    pub criterion: Option<String>,
}

/// Column header matching [`ConditionReport::csv_row`].
pub const REPORT_CSV_HEADER: &str =
    "instance,algorithm,a_star,b_star,c_star,in_A_desc,in_A_err,in_A_bound,in_A,converged";

impl ConditionReport {
    /// Attach the instance id and algorithm tag (reports start unlabeled).
    pub fn labeled(mut self, instance: u64, algorithm: impl Into<String>) -> Self {
        self.instance = instance;
        self.algorithm = algorithm.into();
        self
    }

    /// Record the outcome of a convergence check and its criterion tag.
    pub fn with_convergence(mut self, converged: bool, criterion: impl Into<String>) -> Self {
        self.converged = Some(converged);
        self.criterion = Some(criterion.into());
        self
    }

    /// One CSV row under [`REPORT_CSV_HEADER`]. Missing constants become
    /// empty cells; infinite ones print as `inf`.
    pub fn csv_row(&self) -> String {
        let opt = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let conv = self
            .converged
            .map(|b| b.to_string())
            .unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.instance,
            self.algorithm,
            opt(&self.a_star),
            opt(&self.b_star),
            self.c_star,
            self.in_a_desc,
            self.in_a_err,
            self.in_a_bound,
            self.in_a,
            conv
        )
    }
}

/// Compute all three constants and the membership indicator for
/// `A = A_desc ∩ A_err ∩ A_bound`.
pub fn event_a(
    traj: &Trajectory,
    thresholds: &EventThresholds,
) -> Result<ConditionReport, ConditionError> {
    let a_star = descent_constant(traj)?;
    let b_star = relative_error_constant(traj)?;
    let c_star = bound_constant(traj);
    let in_a_desc = a_star.is_some_and(|a| a >= thresholds.a_min);
    let in_a_err = b_star.is_some_and(|b| b <= thresholds.b_max);
    let in_a_bound = c_star <= thresholds.c_max;
    Ok(ConditionReport {
        instance: 0,
        algorithm: String::new(),
        a_star,
        b_star,
        c_star,
        in_a_desc,
        in_a_err,
        in_a_bound,
        in_a: in_a_desc && in_a_err && in_a_bound,
        converged: None,
        criterion: None,
    })
}

/// Convergence on problems whose optimal value is zero: did the loss ever
/// drop below `tol`?
pub fn convergence_event_quadratic(traj: &Trajectory, tol: f64) -> bool {
    traj.min_loss() < tol
}

/// Criterion tag recorded for [`convergence_event_quadratic`] outcomes.
pub const CRITERION_LOSS_TOL: &str = "loss_tol";
/// Criterion tag recorded for [`convergence_event_nn`] outcomes.
pub const CRITERION_DIST_TO_CRITICAL: &str = "dist_to_critical";

/// Plain gradient descent with a fixed step size, used to refine a point
/// toward a critical point. Fails (with the iteration index) rather than
/// returning garbage if an iterate turns non-finite.
pub fn gd_refine(
    obj: &dyn Objective,
    x0: &[f64],
    iters: usize,
    step: f64,
) -> Result<Vec<f64>, ConditionError> {
    let mut x = x0.to_vec();
    for iter in 0..iters {
        let (_, grad) = obj.loss_grad(&x);
        if !all_finite(&grad) {
            return Err(ConditionError::RefinementDiverged { iter });
        }
        for (xi, gi) in x.iter_mut().zip(&grad) {
            *xi -= step * gi;
        }
        if !all_finite(&x) {
            return Err(ConditionError::RefinementDiverged { iter });
        }
    }
    Ok(x)
}

/// Full-scale refinement budget; desk-scale runs use far fewer iterations
/// through the experiment config.
pub const REFINE_ITERS_FULL: usize = 50_000;
/// Default refinement step size.
pub const REFINE_STEP: f64 = 1e-6;

/// Estimate the critical point a network-training run was heading to, by
/// refining its final iterate with small-step gradient descent. Returns the
/// refined weights and the gradient norm there.
pub fn approximate_critical_point(
    inst: &RegressionInstance,
    layout: NetLayout,
    x_last: &[f64],
    iters: usize,
    step: f64,
) -> Result<(Vec<f64>, f64), ConditionError> {
    let obj = RegressionObjective::new(inst.clone(), layout)?;
    let x_hat = gd_refine(&obj, x_last, iters, step)?;
    let (_, grad) = regression_loss_grad(inst, layout, &x_hat)?;
    Ok((x_hat, norm(&grad)))
}

/// Convergence for network training: is the final iterate within `radius`
/// of the estimated critical point?
pub fn convergence_event_nn(traj: &Trajectory, x_hat: &[f64], radius: f64) -> bool {
    dist(&traj.final_state, x_hat) <= radius
}
