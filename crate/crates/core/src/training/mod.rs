//! The training pipeline: per-step performance training, progressive
//! probabilistic constraining, prior construction by sampling, posterior
//! optimization, and final selection.
//!
//! The pipeline runs on three disjoint datasets with fixed roles:
//!
//! 1. **Prior problems** drive all weight updates — both the initial
//!    performance phase ([`train_performance`]) and the training inside
//!    each refinement window ([`constrained_refinement`]).
//! 2. **Validation problems** are only ever used to *measure* the
//!    empirical event frequency `P̂{A}`: the refinement acceptance test and
//!    the per-atom prior diagnostics read them, no gradient ever does.
//! 3. **Training problems** (in the PAC-Bayes sense) produce the per-atom
//!    risks that the certificate is computed from; nothing upstream of
//!    certification touches them, which is what makes the certificate's
//!    i.i.d. assumption honest.
//!
//! Weight updates use plain gradient descent (optionally with a momentum
//! buffer) on the per-step ratio loss, differentiated through one algorithm
//! step by the graphs in [`graphs`]. Every random choice derives from the
//! config seed through fixed streams, so a rerun reproduces the run byte
//! for byte.

pub mod graphs;
pub mod rundir;

use crate::autodiff::GraphError;
use crate::conditions::{event_a, ConditionError, ConditionReport, EventThresholds};
use crate::optimizers::learned::{
    init_nn_hyper, init_quad_hyper, learned_nn_step, learned_quad_step, nn_layout, quad_layout,
};
use crate::optimizers::{
    rollout, AlgoState, HyperLayout, Hyperparameters, PointEval, RolloutConfig, StopRule,
};
use crate::pacbayes::{
    certify, default_lambda_grid, empirical_risk, select_final_hyper, Certificate,
    DiscreteMeasure, PacBayesError,
};
use crate::problems::{
    sample_quadratic_set, sample_regression_set, Family, NetLayout, Objective, ProblemError,
    ProblemSet, QuadraticFamilyConfig, QuadraticInstance, RegressionFamilyConfig,
    RegressionObjective,
};
use crate::rng::{rng_for, streams};
use crate::trajectory::Trajectory;
use crate::vecmath::{all_finite, norm};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;
use thiserror::Error;

/// Instance-id bases for the three pipeline datasets; keeping them 10⁴
/// apart makes stage provenance readable off any report row.
pub const PRIOR_ID_BASE: u64 = 0;
pub const VAL_ID_BASE: u64 = 10_000;
pub const TRAIN_ID_BASE: u64 = 20_000;
/// Largest per-stage dataset size the id bases can keep disjoint.
pub const MAX_STAGE_SIZE: usize = 10_000;

/// Stage-tagged pipeline failure.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("problem stage: {0}")]
    Problem(#[from] ProblemError),
    #[error("autodiff stage: {0}")]
    Graph(#[from] GraphError),
    #[error("condition stage: {0}")]
    Condition(#[from] ConditionError),
    #[error("certification stage: {0}")]
    Certify(#[from] PacBayesError),
    #[error("dataset stages share instance id {0}")]
    DatasetOverlap(u64),
    #[error("hyperparameter layout does not match the problem family")]
    LayoutMismatch,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
}

// ---------------------------------------------------------------------------
// Configuration and mutable training state
// ---------------------------------------------------------------------------

/// Everything the pipeline needs, fully resolved. [`PipelineConfig::desk`]
/// is the scaled-down configuration the acceptance experiments run at;
/// full-scale counts are plain field changes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Inner iterations of the initial performance-training phase.
    pub n_iter_perf: usize,
    /// Inner iterations per refinement window.
    pub check_every: usize,
    /// Maximum number of refinement windows.
    pub max_windows: usize,
    /// Refinement stops once the incumbent's `P̂{A}` reaches this.
    pub target_p_hat: f64,
    /// Number of prior atoms.
    pub n_sample: usize,
    /// Sizes of the three stage datasets.
    pub n_prior: usize,
    pub n_val: usize,
    pub n_train: usize,
    /// Rollout horizon during training and `P̂{A}` estimation.
    pub t_train: usize,
    /// Convergence threshold defining the set `C = { loss < tol }`.
    pub tol: f64,
    /// Gradient-descent step size on the weights.
    pub lr: f64,
    /// Global-norm gradient clip; zero or negative disables clipping.
    pub grad_clip: f64,
    /// Momentum coefficient for the weight updates; 0 is plain descent.
    pub momentum: f64,
    /// Scale of the random weight initialization.
    pub init_scale: f64,
    /// Prior perturbation scale; `None` defaults to `0.01 * rms(alpha_0)`.
    pub perturb_sd: Option<f64>,
    /// Certificate confidence parameter.
    pub epsilon: f64,
    /// Candidate λ values; `None` means the default grid around `n_train`.
    pub lambda_grid: Option<Vec<f64>>,
    /// Event thresholds for `A`.
    pub thresholds: EventThresholds,
    /// Quadratic-family sampling parameters.
    pub quad: QuadraticFamilyConfig,
    /// Regression-family sampling parameters.
    pub regression: RegressionFamilyConfig,
    pub seed: u64,
}

impl PipelineConfig {
    /// Desk-scale quadratic defaults: every structural step of the full
    /// procedure at sizes that finish in minutes.
    pub fn desk(seed: u64) -> Self {
        Self {
            n_iter_perf: 5_000,
            check_every: 1_000,
            max_windows: 10,
            target_p_hat: 0.9,
            n_sample: 10,
            n_prior: 100,
            n_val: 100,
            n_train: 50,
            t_train: 100,
            tol: 1e-16,
            lr: 1e-4,
            grad_clip: 1.0,
            momentum: 0.9,
            init_scale: 0.5,
            perturb_sd: None,
            epsilon: 0.05,
            lambda_grid: None,
            thresholds: EventThresholds::default(),
            quad: QuadraticFamilyConfig::default(),
            regression: RegressionFamilyConfig::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        for (name, v) in [
            ("n_sample", self.n_sample),
            ("n_prior", self.n_prior),
            ("n_val", self.n_val),
            ("n_train", self.n_train),
            ("t_train", self.t_train),
        ] {
            if v == 0 {
                return Err(PipelineError::Config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [("n_prior", self.n_prior), ("n_val", self.n_val), ("n_train", self.n_train)] {
            if v > MAX_STAGE_SIZE {
                return Err(PipelineError::Config(format!(
                    "{name} = {v} exceeds the id-block size {MAX_STAGE_SIZE}"
                )));
            }
        }
        if !(self.tol > 0.0) {
            return Err(PipelineError::Config(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(PipelineError::Config(format!(
                "lr must be positive and finite, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.epsilon) || self.epsilon == 0.0 {
            return Err(PipelineError::Config(format!(
                "epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        if !(0.0..=1.0).contains(&self.target_p_hat) {
            return Err(PipelineError::Config(format!(
                "target_p_hat must lie in [0, 1], got {}",
                self.target_p_hat
            )));
        }
        Ok(())
    }
}

/// One refinement acceptance decision.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AcceptanceRecord {
    pub window: usize,
    pub candidate_p_hat: f64,
    pub incumbent_p_hat: f64,
    pub accepted: bool,
}

/// Mutable state threaded through the training phases: the weights, the
/// momentum buffer, counters, and the acceptance log. Accepted log entries
/// carry strictly increasing `candidate_p_hat` by construction.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub hyper: Hyperparameters,
    /// Momentum buffer, same length as the flat weight vector.
    pub velocity: Vec<f64>,
    /// Total inner iterations consumed so far.
    pub iteration: usize,
    /// Updates skipped because the one-step gradient was non-finite.
    pub skipped_nan: usize,
    pub acceptance: Vec<AcceptanceRecord>,
}

impl TrainState {
    pub fn fresh(hyper: Hyperparameters) -> Self {
        let n = hyper.flat().len();
        Self {
            hyper,
            velocity: vec![0.0; n],
            iteration: 0,
            skipped_nan: 0,
            acceptance: Vec::new(),
        }
    }
}

// ---------------------------------------------------------------------------
// Per-family plumbing
// ---------------------------------------------------------------------------

/// Family-specific pieces the generic pipeline code dispatches through: how
/// to evaluate an instance, where rollouts start, how the learned rule
/// steps, and how one step differentiates.
pub(crate) trait FamilyOps: Sync {
    fn len(&self) -> usize;
    fn id(&self, idx: usize) -> u64;
    fn objective(&self, idx: usize) -> &dyn Objective;
    fn x0(&self, idx: usize, master_seed: u64) -> Vec<f64>;
    fn layout(&self) -> HyperLayout;
    fn step(&self, state: &AlgoState, eval: &PointEval, hyper: &Hyperparameters) -> AlgoState;
    fn ratio_gradient(
        &self,
        idx: usize,
        state: &AlgoState,
        eval: &PointEval,
        hyper: &Hyperparameters,
    ) -> Result<(f64, Vec<f64>), GraphError>;
    /// Starting state for a *training* episode. Defaults to the evaluation
    /// protocol's start; families may widen the distribution so every
    /// feature regime the rule will meet at test time also appears during
    /// training.
    fn train_start(&self, idx: usize, master_seed: u64, rng: &mut ChaCha8Rng) -> AlgoState {
        let _ = rng;
        AlgoState::new(self.x0(idx, master_seed))
    }
}

struct QuadOps {
    insts: Vec<QuadraticInstance>,
}

impl FamilyOps for QuadOps {
    fn len(&self) -> usize {
        self.insts.len()
    }
    fn id(&self, idx: usize) -> u64 {
        self.insts[idx].id
    }
    fn objective(&self, idx: usize) -> &dyn Objective {
        &self.insts[idx]
    }
    fn x0(&self, idx: usize, _master_seed: u64) -> Vec<f64> {
        // Quadratic rollouts start at the origin; the draw of the instance
        // itself is the randomness.
        vec![0.0; self.insts[idx].dim()]
    }
    fn layout(&self) -> HyperLayout {
        quad_layout()
    }
    fn step(&self, state: &AlgoState, eval: &PointEval, hyper: &Hyperparameters) -> AlgoState {
        learned_quad_step(state, eval, hyper)
    }
    fn ratio_gradient(
        &self,
        idx: usize,
        state: &AlgoState,
        eval: &PointEval,
        hyper: &Hyperparameters,
    ) -> Result<(f64, Vec<f64>), GraphError> {
        graphs::quad_ratio_gradient(&self.insts[idx], state, eval, hyper)
    }
    /// Half the episodes run the evaluation protocol (start at the origin);
    /// the other half restart near the minimizer at a log-uniform distance,
    /// with a synthetic previous iterate at an independent log-uniform
    /// scale below that distance. A 100-step episode from the origin never
    /// sees losses much below 1e-4, so without the restarts the rule's
    /// behavior on the last twelve decades down to the 1e-16 convergence
    /// threshold would be pure extrapolation. The skewed previous iterate
    /// matters just as much: it puts gradient pressure on the states where
    /// the last step was far smaller than the distance still to cover,
    /// which is exactly the regime where a rule that keys its step size off
    /// the previous step size freezes in place — monotone at every step,
    /// certified by the short-horizon event check, and never reaching the
    /// convergence set.
    fn train_start(&self, idx: usize, _master_seed: u64, rng: &mut ChaCha8Rng) -> AlgoState {
        let inst = &self.insts[idx];
        if rng.random_range(0..2) == 0 {
            return AlgoState::new(vec![0.0; inst.dim()]);
        }
        let scale = 10f64.powf(rng.random_range(-8.0..0.0));
        let noise = Normal::new(0.0, scale).expect("positive sd");
        let x0: Vec<f64> = inst
            .minimizer
            .iter()
            .map(|&m| m + noise.sample(rng))
            .collect();
        let prev_scale = scale * 10f64.powf(rng.random_range(-6.0..0.0));
        let prev_noise = Normal::new(0.0, prev_scale).expect("positive sd");
        let x_prev: Vec<f64> = x0.iter().map(|&x| x - prev_noise.sample(rng)).collect();
        AlgoState {
            t: 1,
            x_curr: x0,
            x_prev,
            scratch: Vec::new(),
        }
    }
}

struct NnOps {
    objs: Vec<RegressionObjective>,
    net: NetLayout,
}

/// He-style starting weights for one network-training rollout, derived
/// deterministically from the master seed and the instance id.
pub fn nn_initial_point(net: NetLayout, master_seed: u64, instance_id: u64) -> Vec<f64> {
    let mut rng = rng_for(master_seed, streams::ROLLOUT_X0, instance_id);
    let mut x0 = Vec::with_capacity(net.total());
    let w1 = Normal::new(0.0, (2.0 / net.input as f64).sqrt()).expect("positive sd");
    for _ in 0..net.w1_len() {
        x0.push(w1.sample(&mut rng));
    }
    x0.extend(std::iter::repeat(0.0).take(net.b1_len()));
    let w2 = Normal::new(0.0, (2.0 / net.hidden as f64).sqrt()).expect("positive sd");
    for _ in 0..net.w2_len() {
        x0.push(w2.sample(&mut rng));
    }
    x0.extend(std::iter::repeat(0.0).take(net.b2_len()));
    x0
}

impl FamilyOps for NnOps {
    fn len(&self) -> usize {
        self.objs.len()
    }
    fn id(&self, idx: usize) -> u64 {
        self.objs[idx].inst.id
    }
    fn objective(&self, idx: usize) -> &dyn Objective {
        &self.objs[idx]
    }
    fn x0(&self, idx: usize, master_seed: u64) -> Vec<f64> {
        nn_initial_point(self.net, master_seed, self.objs[idx].inst.id)
    }
    fn layout(&self) -> HyperLayout {
        nn_layout(self.net.total())
    }
    fn step(&self, state: &AlgoState, eval: &PointEval, hyper: &Hyperparameters) -> AlgoState {
        learned_nn_step(state, eval, hyper)
    }
    fn ratio_gradient(
        &self,
        idx: usize,
        state: &AlgoState,
        eval: &PointEval,
        hyper: &Hyperparameters,
    ) -> Result<(f64, Vec<f64>), GraphError> {
        graphs::nn_ratio_gradient(&self.objs[idx].inst, self.net, state, eval, hyper)
    }
}

/// Wrap a problem set in its family operations (regression objectives cache
/// their loss graphs here, once per instance).
pub(crate) fn prepare_ops(set: &ProblemSet) -> Result<Box<dyn FamilyOps>, PipelineError> {
    match set {
        ProblemSet::Quadratic { instances, .. } => Ok(Box::new(QuadOps {
            insts: instances.clone(),
        })),
        ProblemSet::NnRegression {
            instances, layout, ..
        } => {
            let objs = instances
                .iter()
                .map(|inst| RegressionObjective::new(inst.clone(), *layout))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Box::new(NnOps {
                objs,
                net: *layout,
            }))
        }
    }
}

/// Starting weights for the given family.
pub fn initial_hyper(family: Family, config: &PipelineConfig) -> Hyperparameters {
    let mut rng = rng_for(config.seed, streams::HYPER_INIT, 0);
    match family {
        Family::Quadratic => init_quad_hyper(config.init_scale, &mut rng),
        Family::NnRegression => {
            init_nn_hyper(config.regression.layout.total(), config.init_scale, &mut rng)
        }
    }
}

// ---------------------------------------------------------------------------
// Per-step loss and the inner training loop
// ---------------------------------------------------------------------------

/// The per-step training loss: the loss ratio of one algorithm step, gated
/// to zero when the current loss is non-positive or already inside the
/// convergence set `C = { loss < tol }`.
pub fn per_step_training_loss(obj: &dyn Objective, x_t: &[f64], x_next: &[f64], tol: f64) -> f64 {
    let (loss_t, _) = obj.loss_grad(x_t);
    if !(loss_t > 0.0) || loss_t < tol {
        return 0.0;
    }
    let (loss_next, _) = obj.loss_grad(x_next);
    loss_next / loss_t
}

fn apply_update(state: &mut TrainState, grad: &[f64], config: &PipelineConfig) {
    let gnorm = norm(grad);
    let scale = if config.grad_clip > 0.0 && gnorm > config.grad_clip {
        config.grad_clip / gnorm
    } else {
        1.0
    };
    let flat = state.hyper.flat_mut();
    for i in 0..flat.len() {
        let g = grad[i] * scale;
        state.velocity[i] = config.momentum * state.velocity[i] + g;
        flat[i] -= config.lr * state.velocity[i];
    }
}

struct Episode {
    idx: usize,
    algo: AlgoState,
    eval: PointEval,
    steps: usize,
}

/// Run `iters` inner iterations: each samples a fresh episode when needed,
/// differentiates the ratio loss at the current state, takes one algorithm
/// step with the pre-update weights, and then applies the weight update.
fn train_loop(
    ops: &dyn FamilyOps,
    state: &mut TrainState,
    config: &PipelineConfig,
    iters: usize,
    rng: &mut ChaCha8Rng,
) {
    let mut episode: Option<Episode> = None;
    for _ in 0..iters {
        // Retire finished episodes: horizon reached, converged, or the
        // objective went non-finite.
        if episode.as_ref().is_some_and(|ep| {
            ep.steps >= config.t_train || !ep.eval.loss.is_finite() || ep.eval.loss < config.tol
        }) {
            episode = None;
        }
        if episode.is_none() {
            let idx = rng.random_range(0..ops.len());
            let start = ops.train_start(idx, config.seed, rng);
            let (loss, grad) = ops.objective(idx).loss_grad(&start.x_curr);
            let prev_loss = if start.x_prev == start.x_curr {
                loss
            } else {
                ops.objective(idx).loss_grad(&start.x_prev).0
            };
            episode = Some(Episode {
                idx,
                algo: start,
                eval: PointEval {
                    loss,
                    grad,
                    prev_loss,
                },
                steps: 0,
            });
        }
        let ep = episode.as_mut().expect("episode was just ensured");

        // Differentiate the ratio at the current state (when its indicator
        // is active) before the weights move.
        let active = ep.eval.loss.is_finite() && ep.eval.loss >= config.tol;
        let mut queued: Option<Vec<f64>> = None;
        if active {
            match ops.ratio_gradient(ep.idx, &ep.algo, &ep.eval, &state.hyper) {
                Ok((ratio, grad)) if ratio.is_finite() && all_finite(&grad) => {
                    queued = Some(grad);
                }
                _ => state.skipped_nan += 1,
            }
        }

        // Advance the episode one step under the weights it was rolled with.
        let next = ops.step(&ep.algo, &ep.eval, &state.hyper);
        if all_finite(&next.x_curr) {
            let (loss, grad) = ops.objective(ep.idx).loss_grad(&next.x_curr);
            ep.eval = PointEval {
                prev_loss: ep.eval.loss,
                loss,
                grad,
            };
            ep.algo = next;
            ep.steps += 1;
        } else {
            episode = None;
        }

        if let Some(grad) = queued {
            apply_update(state, &grad, config);
        }
        state.iteration += 1;
    }
}

fn check_layout(state: &TrainState, ops: &dyn FamilyOps) -> Result<(), PipelineError> {
    if state.hyper.layout() == &ops.layout() {
        Ok(())
    } else {
        Err(PipelineError::LayoutMismatch)
    }
}

/// Performance phase: `n_iter_perf` inner iterations of per-step ratio
/// training on the given problems. The loop's problem-sampling stream is
/// keyed by the starting iteration count, so resuming a returned state is
/// itself deterministic.
pub fn train_performance(
    mut state: TrainState,
    problems: &ProblemSet,
    config: &PipelineConfig,
) -> Result<TrainState, PipelineError> {
    config.validate()?;
    if problems.is_empty() {
        return Err(PipelineError::Config("training problem set is empty".into()));
    }
    let ops = prepare_ops(problems)?;
    check_layout(&state, ops.as_ref())?;
    let mut rng = rng_for(config.seed, streams::TRAIN_LOOP, state.iteration as u64);
    train_loop(ops.as_ref(), &mut state, config, config.n_iter_perf, &mut rng);
    Ok(state)
}

// ---------------------------------------------------------------------------
// Empirical event frequency
// ---------------------------------------------------------------------------

fn learned_rollout(
    ops: &dyn FamilyOps,
    idx: usize,
    hyper: &Hyperparameters,
    config: &PipelineConfig,
    horizon: usize,
) -> Trajectory {
    let mut step = |s: &AlgoState, e: &PointEval| ops.step(s, e, hyper);
    let rc = RolloutConfig::new(horizon).with_stop(StopRule::LossBelow(config.tol));
    rollout(
        &mut step,
        ops.objective(idx),
        &ops.x0(idx, config.seed),
        &rc,
        None,
    )
}

fn in_a_fraction(reports: &[ConditionReport]) -> f64 {
    if reports.is_empty() {
        return 0.0;
    }
    reports.iter().filter(|r| r.in_a).count() as f64 / reports.len() as f64
}

fn p_hat_reports(
    ops: &dyn FamilyOps,
    hyper: &Hyperparameters,
    config: &PipelineConfig,
    label: &str,
) -> Result<Vec<ConditionReport>, ConditionError> {
    (0..ops.len())
        .into_par_iter()
        .map(|idx| {
            let traj = learned_rollout(ops, idx, hyper, config, config.t_train);
            event_a(&traj, &config.thresholds).map(|r| r.labeled(ops.id(idx), label))
        })
        .collect()
}

/// Empirical `P̂{A}` of the given weights over a problem set: one rollout
/// per instance (horizon `t_train`, stopping inside `C`), then the event
/// check. Returns the fraction and the per-instance reports.
pub fn empirical_p_hat(
    hyper: &Hyperparameters,
    problems: &ProblemSet,
    config: &PipelineConfig,
    label: &str,
) -> Result<(f64, Vec<ConditionReport>), PipelineError> {
    let ops = prepare_ops(problems)?;
    let reports = p_hat_reports(ops.as_ref(), hyper, config, label)?;
    Ok((in_a_fraction(&reports), reports))
}

// ---------------------------------------------------------------------------
// Probabilistic constraining
// ---------------------------------------------------------------------------

/// Refinement phase: windows of `check_every` training iterations on
/// `problems`, each followed by an acceptance test of `P̂{A}` on `val`. A
/// candidate is accepted only if it strictly improves on the incumbent;
/// otherwise the incumbent's weights (and momentum buffer) are restored and
/// the next window starts from them, with the problem-sampling stream
/// continuing so the retry is not a verbatim replay. Stops when `P̂{A}`
/// reaches `target_p_hat` or after `max_windows` windows.
pub fn constrained_refinement(
    mut state: TrainState,
    problems: &ProblemSet,
    val: &ProblemSet,
    config: &PipelineConfig,
) -> Result<TrainState, PipelineError> {
    config.validate()?;
    if problems.is_empty() || val.is_empty() {
        return Err(PipelineError::Config(
            "refinement needs nonempty training and validation sets".into(),
        ));
    }
    let ops = prepare_ops(problems)?;
    check_layout(&state, ops.as_ref())?;
    let (mut incumbent_p, _) = empirical_p_hat(&state.hyper, val, config, "incumbent")?;
    let mut rng = rng_for(config.seed, streams::REFINE_LOOP, state.iteration as u64);
    for window in 0..config.max_windows {
        if incumbent_p >= config.target_p_hat {
            break;
        }
        let snap_hyper = state.hyper.clone();
        let snap_velocity = state.velocity.clone();
        train_loop(ops.as_ref(), &mut state, config, config.check_every, &mut rng);
        let (candidate_p, _) = empirical_p_hat(&state.hyper, val, config, "candidate")?;
        let accepted = candidate_p > incumbent_p;
        state.acceptance.push(AcceptanceRecord {
            window,
            candidate_p_hat: candidate_p,
            incumbent_p_hat: incumbent_p,
            accepted,
        });
        if accepted {
            incumbent_p = candidate_p;
        } else {
            state.hyper = snap_hyper;
            state.velocity = snap_velocity;
        }
    }
    Ok(state)
}

// ---------------------------------------------------------------------------
// Prior construction
// ---------------------------------------------------------------------------

/// A discrete prior over weight vectors: the atoms, the (uniform) measure
/// with atom ids `0..n`, and each atom's diagnostic `P̂{A}` on the
/// validation problems.
#[derive(Debug, Clone)]
pub struct Prior {
    pub atoms: Vec<Hyperparameters>,
    pub measure: DiscreteMeasure,
    pub val_p_hat: Vec<f64>,
}

/// Build the discrete prior by sampling around `alpha0`: atom 0 is
/// `alpha0` itself, atoms `1..n_sample` add isotropic normal perturbations
/// with standard deviation `perturb_sd` (default `0.01 * rms(alpha0)`).
/// The validation problems are only read to record each atom's `P̂{A}`.
pub fn build_prior(
    alpha0: &Hyperparameters,
    n_sample: usize,
    perturb_sd: Option<f64>,
    rng: &mut ChaCha8Rng,
    val: &ProblemSet,
    config: &PipelineConfig,
) -> Result<Prior, PipelineError> {
    if n_sample == 0 {
        return Err(PipelineError::Config("n_sample must be at least 1".into()));
    }
    let sd = perturb_sd.unwrap_or_else(|| 0.01 * alpha0.rms());
    if !sd.is_finite() || sd < 0.0 {
        return Err(PipelineError::Config(format!(
            "perturbation scale must be finite and non-negative, got {sd}"
        )));
    }
    let mut atoms = Vec::with_capacity(n_sample);
    atoms.push(alpha0.clone());
    if sd > 0.0 {
        let normal = Normal::new(0.0, sd).expect("validated sd");
        for _ in 1..n_sample {
            let mut atom = alpha0.clone();
            for w in atom.flat_mut() {
                *w += normal.sample(rng);
            }
            atoms.push(atom);
        }
    } else {
        atoms.extend(std::iter::repeat_with(|| alpha0.clone()).take(n_sample - 1));
    }
    let measure = DiscreteMeasure::uniform((0..n_sample as u64).collect())?;

    let ops = prepare_ops(val)?;
    let val_p_hat = atoms
        .iter()
        .map(|atom| {
            p_hat_reports(ops.as_ref(), atom, config, "prior-atom").map(|r| in_a_fraction(&r))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Prior {
        atoms,
        measure,
        val_p_hat,
    })
}

// ---------------------------------------------------------------------------
// End-to-end pipeline
// ---------------------------------------------------------------------------

/// The three stage datasets, ids guaranteed disjoint.
#[derive(Debug, Clone)]
pub struct StageDatasets {
    pub prior: ProblemSet,
    pub val: ProblemSet,
    pub train: ProblemSet,
}

/// Draw the three independent datasets from their dedicated streams and
/// assert their ids never overlap.
pub fn sample_stage_datasets(
    family: Family,
    config: &PipelineConfig,
) -> Result<StageDatasets, PipelineError> {
    config.validate()?;
    let sample = |base: u64, count: usize, stream: u64| -> Result<ProblemSet, ProblemError> {
        let mut rng = rng_for(config.seed, stream, 0);
        match family {
            Family::Quadratic => sample_quadratic_set(base, count, &config.quad, &mut rng),
            Family::NnRegression => {
                sample_regression_set(base, count, &config.regression, &mut rng)
            }
        }
    };
    let prior = sample(PRIOR_ID_BASE, config.n_prior, streams::PRIOR_PROBLEMS)?;
    let val = sample(VAL_ID_BASE, config.n_val, streams::VAL_PROBLEMS)?;
    let train = sample(TRAIN_ID_BASE, config.n_train, streams::TRAIN_PROBLEMS)?;

    let mut seen = HashSet::new();
    for id in prior
        .ids()
        .into_iter()
        .chain(val.ids())
        .chain(train.ids())
    {
        if !seen.insert(id) {
            return Err(PipelineError::DatasetOverlap(id));
        }
    }
    Ok(StageDatasets { prior, val, train })
}

/// Everything the pipeline produces.
#[derive(Debug)]
pub struct PipelineOutput {
    /// State after refinement; `state.hyper` is the prior center `alpha_0`.
    pub state: TrainState,
    pub datasets: StageDatasets,
    pub prior: Prior,
    /// Per-atom condition reports on the certification problems
    /// (`n_sample * n_train` rows, labeled `atom-<i>`).
    pub train_reports: Vec<ConditionReport>,
    /// Per-atom empirical complement-risks on the certification problems.
    pub risks: Vec<f64>,
    pub certificate: Certificate,
    /// Index of the posterior-mode atom.
    pub final_atom: usize,
    pub final_hyper: Hyperparameters,
}

/// Run the whole procedure: sample datasets, performance-train, refine
/// under the probabilistic constraint, build the prior, estimate per-atom
/// risks on the held-apart certification problems, certify, and select the
/// posterior mode. When `out_dir` is given, all artifacts are written there
/// (config, datasets, checkpoints, acceptance log, certificate, report).
pub fn run_pipeline(
    family: Family,
    config: &PipelineConfig,
    out_dir: Option<&Path>,
) -> Result<PipelineOutput, PipelineError> {
    config.validate()?;
    let datasets = sample_stage_datasets(family, config)?;

    let state = TrainState::fresh(initial_hyper(family, config));
    let state = train_performance(state, &datasets.prior, config)?;
    let state = constrained_refinement(state, &datasets.prior, &datasets.val, config)?;

    let mut atom_rng = rng_for(config.seed, streams::PRIOR_ATOMS, 0);
    let prior = build_prior(
        &state.hyper,
        config.n_sample,
        config.perturb_sd,
        &mut atom_rng,
        &datasets.val,
        config,
    )?;

    // Per-atom risks on the certification problems — the only place they
    // are ever read.
    let train_ops = prepare_ops(&datasets.train)?;
    let mut train_reports = Vec::with_capacity(config.n_sample * config.n_train);
    let mut risks = Vec::with_capacity(config.n_sample);
    for (i, atom) in prior.atoms.iter().enumerate() {
        let reports = p_hat_reports(train_ops.as_ref(), atom, config, &format!("atom-{i}"))?;
        risks.push(empirical_risk(&reports));
        train_reports.extend(reports);
    }

    let grid = config
        .lambda_grid
        .clone()
        .unwrap_or_else(|| default_lambda_grid(config.n_train));
    let certificate = certify(
        &prior.measure,
        &risks,
        &grid,
        config.epsilon,
        config.n_train,
    )?;
    let final_atom = select_final_hyper(&certificate.posterior) as usize;
    let final_hyper = prior.atoms[final_atom].clone();

    let output = PipelineOutput {
        state,
        datasets,
        prior,
        train_reports,
        risks,
        certificate,
        final_atom,
        final_hyper,
    };
    if let Some(dir) = out_dir {
        rundir::write_run_dir(dir, family, config, &output)?;
    }
    Ok(output)
}
