//! Training and certification of learned optimizers.
//!
//! The crate rolls out iterative optimization algorithms — classical baselines
//! (heavy-ball, Adam) and small learned update rules — on sampled problem
//! instances, checks each trajectory against descent conditions that are
//! sufficient for convergence to a critical point, and turns the empirical
//! frequency of those checks into a PAC-Bayes lower bound on the probability
//! that the algorithm converges on a fresh instance.
//!
//! The pieces, bottom up:
//!
//! * [`autodiff`] — a small reverse-mode tape over dense vector operations.
//!   Used for inner-problem gradients and for differentiating the training
//!   loss of a learned update rule through one algorithm step.
//! * [`problems`] — sampled problem families: diagonal quadratics with a
//!   controlled curvature range, and two-layer ReLU regression fits to noisy
//!   polynomial data.
//! * [`optimizers`] — update rules and the rollout driver that records
//!   trajectories.
//! * [`conditions`] — per-trajectory constants for the sufficient-decrease,
//!   relative-error, and boundedness conditions, and the event `A` that all
//!   three hold with configured thresholds.
//! * [`pacbayes`] — discrete priors/posteriors over hyperparameter atoms,
//!   the inverted rate function, KL divergence, Gibbs posteriors, and the
//!   certified lower bound.
//! * [`training`] — the two-phase training pipeline (performance training,
//!   then probabilistically constrained refinement), prior construction, and
//!   the on-disk run directory.
//! * [`counterexamples`] — two closed-form sequences showing that dropping a
//!   single condition breaks the convergence guarantee.
//! * [`experiment`] — end-to-end experiment driver behind the CLI: problem
//!   generation, training, certification, test-set evaluation, reporting.

pub mod autodiff;
pub mod conditions;
pub mod counterexamples;
pub mod experiment;
pub mod optimizers;
pub mod pacbayes;
pub mod problems;
pub mod rng;
pub mod trajectory;
pub mod training;
pub mod vecmath;
