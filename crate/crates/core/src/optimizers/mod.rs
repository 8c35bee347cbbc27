//! Update rules and the rollout driver.
//!
//! An update rule is a function from the current [`AlgoState`] and the
//! evaluated point ([`PointEval`]) to the next state. [`rollout`] iterates
//! one, records a [`Trajectory`], applies a stop rule, and converts any
//! non-finite iterate into a `diverged` flag instead of a panic.
//!
//! Learned rules carry their weights as [`Hyperparameters`]: a flat vector
//! plus a [`HyperLayout`] describing the per-block shapes, so checkpoints,
//! perturbations, and gradient updates all operate on one dense vector.

pub mod classic;
pub mod learned;

use crate::problems::Objective;
use crate::trajectory::{StopReason, Trajectory};
use crate::vecmath::{all_finite, dist, norm};
use serde::{Deserialize, Serialize};

/// Iteration state of an algorithm: the step counter (starting at 1), the
/// current and previous iterates, and algorithm-private scratch vectors
/// (e.g. Adam's moment estimates).
#[derive(Debug, Clone)]
pub struct AlgoState {
    pub t: usize,
    pub x_curr: Vec<f64>,
    pub x_prev: Vec<f64>,
    pub scratch: Vec<Vec<f64>>,
}

impl AlgoState {
    /// State before the first step: `t = 1` and both iterates equal to `x0`.
    pub fn new(x0: Vec<f64>) -> Self {
        Self {
            t: 1,
            x_curr: x0.clone(),
            x_prev: x0,
            scratch: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.x_curr.len()
    }

    /// Successor state holding `x_next`, with the step counter advanced and
    /// the given scratch carried over.
    pub fn advanced(&self, x_next: Vec<f64>, scratch: Vec<Vec<f64>>) -> AlgoState {
        AlgoState {
            t: self.t + 1,
            x_prev: self.x_curr.clone(),
            x_curr: x_next,
            scratch,
        }
    }
}

/// Loss and gradient at the current iterate, plus the loss at the previous
/// iterate (needed by learned features). At `t = 1`, `prev_loss` equals
/// `loss`.
#[derive(Debug, Clone)]
pub struct PointEval {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub prev_loss: f64,
}

// ---------------------------------------------------------------------------
// Hyperparameters
// ---------------------------------------------------------------------------

/// Shape of one named block inside a flat hyperparameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl BlockSpec {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self {
            name: name.into(),
            rows,
            cols,
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered block shapes of a hyperparameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HyperLayout {
    pub blocks: Vec<BlockSpec>,
}

impl HyperLayout {
    pub fn total(&self) -> usize {
        self.blocks.iter().map(BlockSpec::len).sum()
    }

    /// Range of block `idx` inside the flat vector.
    pub fn range(&self, idx: usize) -> std::ops::Range<usize> {
        let start: usize = self.blocks[..idx].iter().map(BlockSpec::len).sum();
        start..start + self.blocks[idx].len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.name == name)
    }
}

/// A flat weight vector tied to its layout. The length invariant is
/// enforced at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparameters {
    layout: HyperLayout,
    flat: Vec<f64>,
}

impl Hyperparameters {
    /// Panics if `flat.len()` does not match the layout.
    pub fn new(layout: HyperLayout, flat: Vec<f64>) -> Self {
        assert_eq!(
            flat.len(),
            layout.total(),
            "hyperparameter vector length {} does not match layout total {}",
            flat.len(),
            layout.total()
        );
        Self { layout, flat }
    }

    pub fn zeros(layout: HyperLayout) -> Self {
        let n = layout.total();
        Self::new(layout, vec![0.0; n])
    }

    pub fn layout(&self) -> &HyperLayout {
        &self.layout
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    /// Mutable view of the weights; the length cannot change through it.
    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn block(&self, idx: usize) -> &[f64] {
        &self.flat[self.layout.range(idx)]
    }

    pub fn block_by_name(&self, name: &str) -> Option<&[f64]> {
        self.layout.index_of(name).map(|i| self.block(i))
    }

    /// Root-mean-square of the weights; zero for an all-zero vector.
    pub fn rms(&self) -> f64 {
        if self.flat.is_empty() {
            0.0
        } else {
            (self.flat.iter().map(|v| v * v).sum::<f64>() / self.flat.len() as f64).sqrt()
        }
    }
}

// ---------------------------------------------------------------------------
// Rollout
// ---------------------------------------------------------------------------

/// When a rollout stops before its horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StopRule {
    /// Run the full horizon.
    Never,
    /// Stop once the loss falls strictly below the tolerance.
    LossBelow(f64),
}

/// Rollout parameters.
#[derive(Debug, Clone)]
pub struct RolloutConfig {
    /// Number of steps to attempt.
    pub horizon: usize,
    pub stop: StopRule,
    /// Keep full iterates (memory scales with `horizon * dim`).
    pub record_states: bool,
}

impl RolloutConfig {
    pub fn new(horizon: usize) -> Self {
        Self {
            horizon,
            stop: StopRule::Never,
            record_states: false,
        }
    }

    pub fn with_stop(mut self, stop: StopRule) -> Self {
        self.stop = stop;
        self
    }

    pub fn recording_states(mut self) -> Self {
        self.record_states = true;
        self
    }
}

/// Iterate `step` from `x0`, recording one row per retained iterate.
///
/// The `observer`, when present, is evaluated at every retained iterate and
/// stored in [`Trajectory::aux`] (used e.g. for distance-to-minimizer
/// curves). If the step produces a non-finite iterate, or the objective
/// returns a non-finite loss or gradient, the rollout keeps the finite
/// prefix and sets the `diverged` flag; it never panics on NaN.
pub fn rollout(
    step: &mut dyn FnMut(&AlgoState, &PointEval) -> AlgoState,
    obj: &dyn Objective,
    x0: &[f64],
    config: &RolloutConfig,
    observer: Option<&dyn Fn(&[f64]) -> f64>,
) -> Trajectory {
    let mut losses = Vec::with_capacity(config.horizon + 1);
    let mut grad_norms = Vec::with_capacity(config.horizon + 1);
    let mut step_norms = Vec::with_capacity(config.horizon + 1);
    let mut state_norms = Vec::with_capacity(config.horizon + 1);
    let mut aux = observer.map(|_| Vec::with_capacity(config.horizon + 1));
    let mut states: Option<Vec<Vec<f64>>> = config.record_states.then(Vec::new);

    let mut state = AlgoState::new(x0.to_vec());
    let mut stop = StopReason::Horizon;
    let mut diverged = false;

    let (loss0, grad0) = obj.loss_grad(&state.x_curr);
    if !all_finite(x0) || !loss0.is_finite() || !all_finite(&grad0) {
        return Trajectory {
            losses,
            grad_norms,
            step_norms,
            state_norms,
            aux,
            final_state: x0.to_vec(),
            states,
            diverged: true,
            stop: StopReason::Diverged,
        };
    }

    let record = |x: &[f64],
                      loss: f64,
                      gnorm: f64,
                      snorm: f64,
                      losses: &mut Vec<f64>,
                      grad_norms: &mut Vec<f64>,
                      step_norms: &mut Vec<f64>,
                      state_norms: &mut Vec<f64>,
                      aux: &mut Option<Vec<f64>>,
                      states: &mut Option<Vec<Vec<f64>>>| {
        losses.push(loss);
        grad_norms.push(gnorm);
        step_norms.push(snorm);
        state_norms.push(norm(x));
        if let (Some(a), Some(obs)) = (aux.as_mut(), observer) {
            a.push(obs(x));
        }
        if let Some(s) = states.as_mut() {
            s.push(x.to_vec());
        }
    };

    record(
        &state.x_curr,
        loss0,
        norm(&grad0),
        0.0,
        &mut losses,
        &mut grad_norms,
        &mut step_norms,
        &mut state_norms,
        &mut aux,
        &mut states,
    );
    let mut eval = PointEval {
        loss: loss0,
        grad: grad0,
        prev_loss: loss0,
    };

    let fired = |loss: f64| match config.stop {
        StopRule::Never => false,
        StopRule::LossBelow(tol) => loss < tol,
    };

    if fired(loss0) {
        stop = StopReason::LossTol;
    } else {
        for _ in 1..=config.horizon {
            let next = step(&state, &eval);
            debug_assert_eq!(next.dim(), state.dim(), "step changed the dimension");
            debug_assert_eq!(next.t, state.t + 1, "step must advance the counter");
            if !all_finite(&next.x_curr) {
                diverged = true;
                break;
            }
            let (loss, grad) = obj.loss_grad(&next.x_curr);
            if !loss.is_finite() || !all_finite(&grad) {
                diverged = true;
                break;
            }
            let snorm = dist(&next.x_curr, &state.x_curr);
            record(
                &next.x_curr,
                loss,
                norm(&grad),
                snorm,
                &mut losses,
                &mut grad_norms,
                &mut step_norms,
                &mut state_norms,
                &mut aux,
                &mut states,
            );
            eval = PointEval {
                prev_loss: eval.loss,
                loss,
                grad,
            };
            state = next;
            if fired(loss) {
                stop = StopReason::LossTol;
                break;
            }
        }
    }

    let traj = Trajectory {
        losses,
        grad_norms,
        step_norms,
        state_norms,
        aux,
        final_state: state.x_curr,
        states,
        diverged,
        stop: if diverged { StopReason::Diverged } else { stop },
    };
    traj.assert_consistent();
    traj
}
