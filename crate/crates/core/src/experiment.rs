//! End-to-end experiments: train a rule, certify it, roll it and the
//! classical baselines on held-out test sets, and write plot-ready CSVs.
//!
//! [`run_experiment`] owns the whole flow. Given an [`ExperimentSpec`] it
//! trains the learned algorithm through [`crate::training::run_pipeline`]
//! (or reuses an existing training directory whose recorded configuration
//! matches byte-for-byte), samples fresh test sets, runs one rollout per
//! problem per algorithm, evaluates the per-trajectory event and the
//! convergence event, and writes a self-describing result directory:
//!
//! ```text
//! spec.json               the fully resolved spec, seed included
//! training/               the pipeline run directory (checkpoints, ...)
//! certificate.json        copy of the training certificate
//! loss_quantiles.csv      per-iteration loss spread, one column block per
//!                         algorithm: <algo>_mean, _median, _q025, _q975
//! distance_quantiles.csv  same for distance to the minimizer (quadratics)
//! test_sets.csv           per-set event frequency, convergence frequency,
//!                         and the certified bound
//! report.csv              per-trajectory condition constants, all algorithms
//! exceptions.csv          rows whose event held but which never reached
//!                         the convergence set (quadratics)
//! ```
//!
//! [`emit_report`] reopens such a directory and condenses it into a short
//! text summary plus machine-readable JSON; every number it prints is
//! recomputed from the CSVs, so the summary never carries hidden state.
//!
//! Randomness follows the crate convention: test set `i` draws its problems
//! from `rng_for(seed, streams::TEST_PROBLEMS, i)`, and network starting
//! points derive from the seed and the instance id. Rollouts within a set
//! run in parallel across problems; everything else is sequential, so a
//! rerun with the same spec writes byte-identical files.

use crate::conditions::{
    convergence_event_quadratic, event_a, ConditionError, ConditionReport, CRITERION_LOSS_TOL,
    REPORT_CSV_HEADER,
};
use crate::optimizers::classic::{adam_step, hbf_optimal_coeffs, hbf_step, AdamParams, CoeffError};
use crate::optimizers::{rollout, AlgoState, PointEval, RolloutConfig, StopRule};
use crate::pacbayes::{Certificate, PacBayesError};
use crate::problems::{sample_quadratic_set, sample_regression_set, Family, ProblemError, ProblemSet};
use crate::rng::{rng_for, streams};
use crate::trajectory::{StopReason, Trajectory};
use crate::training::rundir::{self, load_checkpoint};
use crate::training::{prepare_ops, run_pipeline, FamilyOps, PipelineConfig, PipelineError};
use crate::vecmath::dist;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// First instance id of the first test set. Test ids grow by `set_size`
/// per set, so they stay globally unique in `report.csv` and clear of the
/// training-stage id blocks (which live below 30 000).
pub const TEST_ID_BASE: u64 = 30_000;

/// Rollouts run this multiple of the training horizon, so a trajectory
/// whose event held on the training prefix gets a generous window to
/// actually reach the convergence set.
pub const CONVERGENCE_WINDOW_FACTOR: usize = 10;

/// Label used for the learned algorithm in every CSV.
pub const LEARNED_LABEL: &str = "learned";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("spec: {0}")]
    Spec(String),
    #[error("training: {0}")]
    Pipeline(#[from] PipelineError),
    #[error("problems: {0}")]
    Problem(#[from] ProblemError),
    #[error("evaluation: {0}")]
    Condition(#[from] ConditionError),
    #[error("certificate: {0}")]
    Certificate(#[from] PacBayesError),
    #[error("baseline: {0}")]
    Coeff(#[from] CoeffError),
    #[error("io {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("incomplete run directory {dir}: missing {}", files.join(", "))]
    MissingArtifacts { dir: String, files: Vec<String> },
    #[error("parse {path}: {reason}")]
    Parse { path: String, reason: String },
}

fn io_err(path: &Path, source: std::io::Error) -> ExperimentError {
    ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Spec
// ---------------------------------------------------------------------------

/// Classical algorithms rolled next to the learned one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// Heavy ball with per-instance worst-case-optimal coefficients;
    /// quadratics only, since it needs the instance's curvature bounds.
    Hbf,
    /// Adam with its stock parameters.
    Adam,
}

impl Baseline {
    pub fn label(self) -> &'static str {
        match self {
            Baseline::Hbf => "hbf",
            Baseline::Adam => "adam",
        }
    }
}

/// Everything one experiment depends on. The spec is serialized into the
/// result directory verbatim, so a result is reproducible from its own
/// `spec.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub family: Family,
    /// Training/certification configuration. Its embedded seed is
    /// overwritten by [`ExperimentSpec::seed`] when the experiment runs;
    /// the experiment seed is the single source of randomness.
    pub pipeline: PipelineConfig,
    pub baselines: Vec<Baseline>,
    /// Held-out test sets: how many, and how many problems each.
    pub n_test_sets: usize,
    pub set_size: usize,
    /// Result directory; created if absent.
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl ExperimentSpec {
    /// Desk-scale quadratic experiment: the full pipeline at sizes that
    /// finish in minutes, compared against optimally tuned heavy ball on
    /// 20 test sets of 50 problems.
    pub fn desk_quadratic(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            family: Family::Quadratic,
            pipeline: PipelineConfig::desk(1),
            baselines: vec![Baseline::Hbf],
            n_test_sets: 20,
            set_size: 50,
            out_dir: out_dir.into(),
            seed: 1,
        }
    }

    /// Desk-scale network-training experiment, compared against Adam. No
    /// convergence event here: the regression problems have no computable
    /// minimizer, so only the trajectory event is estimated.
    pub fn desk_regression(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            family: Family::NnRegression,
            pipeline: PipelineConfig::desk(1),
            baselines: vec![Baseline::Adam],
            n_test_sets: 20,
            set_size: 50,
            out_dir: out_dir.into(),
            seed: 1,
        }
    }

    /// The spec as actually run: the experiment seed pushed into the
    /// pipeline configuration.
    pub fn resolved(&self) -> Self {
        let mut spec = self.clone();
        spec.pipeline.seed = self.seed;
        spec
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.n_test_sets == 0 || self.set_size == 0 {
            return Err(ExperimentError::Spec(
                "n_test_sets and set_size must be positive".into(),
            ));
        }
        for (i, b) in self.baselines.iter().enumerate() {
            if self.baselines[..i].contains(b) {
                return Err(ExperimentError::Spec(format!(
                    "duplicate baseline {:?}",
                    b.label()
                )));
            }
            if *b == Baseline::Hbf && self.family == Family::NnRegression {
                return Err(ExperimentError::Spec(
                    "hbf baseline needs curvature bounds; not available for nn-regression".into(),
                ));
            }
        }
        Ok(())
    }

    /// Evaluation rollout horizon: the training horizon times the
    /// convergence window factor.
    pub fn eval_horizon(&self) -> usize {
        CONVERGENCE_WINDOW_FACTOR * self.pipeline.t_train
    }
}

// ---------------------------------------------------------------------------
// Experiment driver
// ---------------------------------------------------------------------------

/// Per-test-set frequencies next to the certified bound.
#[derive(Debug, Clone, Copy)]
pub struct TestSetStats {
    pub set: usize,
    /// Fraction of the set's learned-rule trajectories in the event.
    pub p_hat_a: f64,
    /// Fraction that reached the convergence set; `None` when the family
    /// has no convergence event.
    pub p_hat_aconv: Option<f64>,
    pub bound: f64,
}

impl TestSetStats {
    /// Does the predicted chain `bound <= P̂{A} <= P̂{A_conv}` hold on this
    /// set? Without a convergence event only the first link is checked.
    pub fn chain_holds(&self) -> bool {
        self.bound <= self.p_hat_a && self.p_hat_aconv.map_or(true, |c| self.p_hat_a <= c)
    }
}

/// What [`run_experiment`] hands back in memory; everything here is also
/// on disk in the result directory.
#[derive(Debug)]
pub struct ExperimentOutput {
    /// The resolved spec, as serialized to `spec.json`.
    pub spec: ExperimentSpec,
    pub certificate: Certificate,
    pub sets: Vec<TestSetStats>,
    /// Trajectories whose event held but which never reached the
    /// convergence set within the extended window (any algorithm).
    pub exceptions: Vec<ConditionReport>,
    /// Mean loss at the training horizon across the whole test pool,
    /// keyed by algorithm label.
    pub mean_loss_at_t_train: BTreeMap<String, f64>,
}

#[derive(Clone, Copy)]
enum Algo {
    Base(Baseline),
    Learned,
}

impl Algo {
    fn label(self) -> &'static str {
        match self {
            Algo::Base(b) => b.label(),
            Algo::Learned => LEARNED_LABEL,
        }
    }
}

/// Per-instance data the baselines and observers need beyond the
/// objective itself; present for quadratics only.
struct QuadMeta {
    coeffs: (f64, f64),
    minimizer: Vec<f64>,
}

struct TrajEval {
    report: ConditionReport,
    /// Losses padded to the full evaluation horizon.
    losses: Vec<f64>,
    /// Distance to the minimizer, same padding; quadratics only.
    dist: Option<Vec<f64>>,
}

/// Run the full experiment described by `spec` and write its result
/// directory. See the module docs for the directory layout.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutput, ExperimentError> {
    spec.validate()?;
    let spec = spec.resolved();
    spec.pipeline.validate()?;
    let out = &spec.out_dir;
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    write_spec(&out.join("spec.json"), &spec)?;

    let trained = train_or_load(&spec)?;
    trained.certificate.save(&out.join("certificate.json"))?;
    let bound = trained.certificate.bound;

    let algos: Vec<Algo> = spec
        .baselines
        .iter()
        .map(|&b| Algo::Base(b))
        .chain(std::iter::once(Algo::Learned))
        .collect();
    let labels: Vec<&str> = algos.iter().map(|a| a.label()).collect();
    let rows = spec.eval_horizon() + 1;
    let quad = spec.family == Family::Quadratic;

    // Pooled padded series per algorithm, and per-trajectory reports in
    // (set, problem, algorithm) order.
    let mut losses: Vec<Vec<Vec<f64>>> = vec![Vec::new(); algos.len()];
    let mut dists: Vec<Vec<Vec<f64>>> = vec![Vec::new(); algos.len()];
    let mut reports: Vec<ConditionReport> = Vec::new();
    let mut sets = Vec::with_capacity(spec.n_test_sets);

    for set_idx in 0..spec.n_test_sets {
        let problems = sample_test_set(&spec, set_idx)?;
        let evals = eval_set(&spec, &problems, &trained, &algos)?;

        let learned_pos = algos.len() - 1;
        let learned: Vec<&ConditionReport> =
            evals.iter().map(|per_algo| &per_algo[learned_pos].report).collect();
        let n = learned.len() as f64;
        let p_hat_a = learned.iter().filter(|r| r.in_a).count() as f64 / n;
        let p_hat_aconv = quad.then(|| {
            learned.iter().filter(|r| r.converged == Some(true)).count() as f64 / n
        });
        sets.push(TestSetStats {
            set: set_idx,
            p_hat_a,
            p_hat_aconv,
            bound,
        });

        for per_algo in evals {
            for (k, eval) in per_algo.into_iter().enumerate() {
                reports.push(eval.report);
                losses[k].push(eval.losses);
                if let Some(d) = eval.dist {
                    dists[k].push(d);
                }
            }
        }
    }

    write_quantile_csv(&out.join("loss_quantiles.csv"), &labels, &losses, rows)?;
    if quad {
        write_quantile_csv(&out.join("distance_quantiles.csv"), &labels, &dists, rows)?;
    }
    write_test_sets_csv(&out.join("test_sets.csv"), &sets)?;
    write_report_csv(&out.join("report.csv"), reports.iter())?;
    let exceptions: Vec<ConditionReport> = reports
        .iter()
        .filter(|r| r.in_a && r.converged == Some(false))
        .cloned()
        .collect();
    if quad {
        write_report_csv(&out.join("exceptions.csv"), exceptions.iter())?;
    }

    let t = spec.pipeline.t_train;
    let mean_loss_at_t_train = labels
        .iter()
        .zip(&losses)
        .map(|(label, series)| (label.to_string(), column_mean(series, t)))
        .collect();

    Ok(ExperimentOutput {
        spec,
        certificate: trained.certificate,
        sets,
        exceptions,
        mean_loss_at_t_train,
    })
}

struct TrainedArtifacts {
    hyper: crate::optimizers::Hyperparameters,
    certificate: Certificate,
}

/// Train under `training/`, or load the checkpoints already there when
/// that directory's recorded configuration matches the resolved spec
/// byte-for-byte. Anything else — absent, partial, or differently
/// configured — triggers a fresh training run that overwrites it.
fn train_or_load(spec: &ExperimentSpec) -> Result<TrainedArtifacts, ExperimentError> {
    let dir = spec.out_dir.join("training");
    let expected = rundir::config_json(spec.family, &spec.pipeline)?;
    let recorded = std::fs::read_to_string(dir.join("config.json")).unwrap_or_default();
    if recorded == expected {
        let hyper = load_checkpoint(&dir.join("checkpoints").join("final.bin"))?;
        let certificate = Certificate::load(&dir.join("certificate.json"))?;
        return Ok(TrainedArtifacts { hyper, certificate });
    }
    let output = run_pipeline(spec.family, &spec.pipeline, Some(&dir))?;
    Ok(TrainedArtifacts {
        hyper: output.final_hyper,
        certificate: output.certificate,
    })
}

/// Draw test set `set_idx`: its own stream index, and an id block disjoint
/// from every other set and from the training stages.
pub fn sample_test_set(
    spec: &ExperimentSpec,
    set_idx: usize,
) -> Result<ProblemSet, ExperimentError> {
    let first_id = TEST_ID_BASE + (set_idx * spec.set_size) as u64;
    let mut rng = rng_for(spec.seed, streams::TEST_PROBLEMS, set_idx as u64);
    let set = match spec.family {
        Family::Quadratic => {
            sample_quadratic_set(first_id, spec.set_size, &spec.pipeline.quad, &mut rng)?
        }
        Family::NnRegression => {
            sample_regression_set(first_id, spec.set_size, &spec.pipeline.regression, &mut rng)?
        }
    };
    Ok(set)
}

/// Roll every algorithm on every problem of one set (parallel across
/// problems) and evaluate the events. Returns one inner vector per
/// problem, ordered like `algos`.
fn eval_set(
    spec: &ExperimentSpec,
    problems: &ProblemSet,
    trained: &TrainedArtifacts,
    algos: &[Algo],
) -> Result<Vec<Vec<TrajEval>>, ExperimentError> {
    let ops = prepare_ops(problems)?;
    let meta: Option<Vec<QuadMeta>> = match problems {
        ProblemSet::Quadratic { instances, .. } => Some(
            instances
                .iter()
                .map(|inst| {
                    Ok(QuadMeta {
                        coeffs: hbf_optimal_coeffs(inst.m, inst.l)?,
                        minimizer: inst.minimizer.clone(),
                    })
                })
                .collect::<Result<_, CoeffError>>()?,
        ),
        ProblemSet::NnRegression { .. } => None,
    };

    let horizon = spec.eval_horizon();
    let rows = horizon + 1;
    let rc = RolloutConfig::new(horizon).with_stop(StopRule::LossBelow(spec.pipeline.tol));

    (0..ops.len())
        .into_par_iter()
        .map(|idx| {
            let x0 = ops.x0(idx, spec.seed);
            let meta = meta.as_ref().map(|m| &m[idx]);
            algos
                .iter()
                .map(|&algo| {
                    let traj = roll_one(ops.as_ref(), idx, algo, trained, meta, &rc, &x0);
                    eval_one(spec, ops.id(idx), algo, meta.is_some(), &traj, rows)
                })
                .collect::<Result<Vec<_>, _>>()
        })
        .collect()
}

fn roll_one(
    ops: &dyn FamilyOps,
    idx: usize,
    algo: Algo,
    trained: &TrainedArtifacts,
    meta: Option<&QuadMeta>,
    rc: &RolloutConfig,
    x0: &[f64],
) -> Trajectory {
    let observe;
    let observer: Option<&dyn Fn(&[f64]) -> f64> = match meta {
        Some(m) => {
            observe = |x: &[f64]| dist(x, &m.minimizer);
            Some(&observe)
        }
        None => None,
    };
    let obj = ops.objective(idx);
    match algo {
        Algo::Learned => {
            let mut step =
                |s: &AlgoState, e: &PointEval| ops.step(s, e, &trained.hyper);
            rollout(&mut step, obj, x0, rc, observer)
        }
        Algo::Base(Baseline::Hbf) => {
            let (b1, b2) = meta.expect("hbf is rejected without curvature bounds").coeffs;
            let mut step = move |s: &AlgoState, e: &PointEval| hbf_step(s, e, b1, b2);
            rollout(&mut step, obj, x0, rc, observer)
        }
        Algo::Base(Baseline::Adam) => {
            let params = AdamParams::default();
            let mut step = move |s: &AlgoState, e: &PointEval| adam_step(s, e, &params);
            rollout(&mut step, obj, x0, rc, observer)
        }
    }
}

fn eval_one(
    spec: &ExperimentSpec,
    id: u64,
    algo: Algo,
    quad: bool,
    traj: &Trajectory,
    rows: usize,
) -> Result<TrajEval, ExperimentError> {
    let prefix = event_prefix(traj, spec.pipeline.t_train);
    let mut report =
        event_a(&prefix, &spec.pipeline.thresholds)?.labeled(id, algo.label());
    if quad {
        let converged = convergence_event_quadratic(traj, spec.pipeline.tol);
        report = report.with_convergence(converged, CRITERION_LOSS_TOL);
    }
    Ok(TrajEval {
        report,
        losses: pad_series(traj.losses.clone(), rows),
        dist: traj.aux.as_ref().map(|d| pad_series(d.clone(), rows)),
    })
}

/// The first `horizon + 1` rows of a trajectory as their own record. The
/// event is judged on the training horizon while rollouts continue past
/// it; rows after the cut do not exist as far as the event is concerned.
/// Only the per-row records are rewritten — `final_state` still refers to
/// the end of the full rollout, which the event never reads.
fn event_prefix(traj: &Trajectory, horizon: usize) -> Trajectory {
    let keep = traj.losses.len().min(horizon + 1);
    let cut = |v: &[f64]| v[..keep].to_vec();
    Trajectory {
        losses: cut(&traj.losses),
        grad_norms: cut(&traj.grad_norms),
        step_norms: cut(&traj.step_norms),
        state_norms: cut(&traj.state_norms),
        aux: None,
        final_state: traj.final_state.clone(),
        states: None,
        diverged: traj.diverged && keep == traj.losses.len(),
        stop: if keep < traj.losses.len() {
            StopReason::Horizon
        } else {
            traj.stop
        },
    }
}

/// Fix a per-iteration series to exactly `rows` values by repeating the
/// last one: a trajectory that stopped inside the convergence set (or lost
/// its tail to a non-finite step) holds its final recorded value for the
/// remaining iterations.
fn pad_series(mut s: Vec<f64>, rows: usize) -> Vec<f64> {
    let last = s.last().copied().unwrap_or(f64::NAN);
    s.resize(rows, last);
    s
}

fn column_mean(series: &[Vec<f64>], t: usize) -> f64 {
    series.iter().map(|s| s[t]).sum::<f64>() / series.len() as f64
}

// ---------------------------------------------------------------------------
// Result files
// ---------------------------------------------------------------------------

fn write_spec(path: &Path, spec: &ExperimentSpec) -> Result<(), ExperimentError> {
    let json = serde_json::to_string_pretty(spec).map_err(|e| ExperimentError::Parse {
        path: path.display().to_string(),
        reason: format!("spec serialization: {e}"),
    })?;
    std::fs::write(path, json + "\n").map_err(|e| io_err(path, e))
}

/// Empirical quantile with linear interpolation between order statistics
/// (the convention plotting stacks default to). `sorted` must be sorted
/// and nonempty.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// One row per iteration; per algorithm the mean, median, and the 95%
/// band (2.5% and 97.5% quantiles) across the pooled test trajectories.
fn write_quantile_csv(
    path: &Path,
    labels: &[&str],
    series: &[Vec<Vec<f64>>],
    rows: usize,
) -> Result<(), ExperimentError> {
    let mut out = String::from("t");
    for label in labels {
        out.push_str(&format!(
            ",{label}_mean,{label}_median,{label}_q025,{label}_q975"
        ));
    }
    out.push('\n');
    let mut sorted = Vec::new();
    for t in 0..rows {
        out.push_str(&t.to_string());
        for algo in series {
            sorted.clear();
            sorted.extend(algo.iter().map(|s| s[t]));
            let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
            sorted.sort_unstable_by(f64::total_cmp);
            let median = quantile_sorted(&sorted, 0.5);
            let lo = quantile_sorted(&sorted, 0.025);
            let hi = quantile_sorted(&sorted, 0.975);
            out.push_str(&format!(",{mean},{median},{lo},{hi}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

fn write_test_sets_csv(path: &Path, sets: &[TestSetStats]) -> Result<(), ExperimentError> {
    let mut out = String::from("set,p_hat_a,p_hat_aconv,bound\n");
    for s in sets {
        let conv = s.p_hat_aconv.map(|c| c.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", s.set, s.p_hat_a, conv, s.bound));
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

fn write_report_csv<'a>(
    path: &Path,
    reports: impl Iterator<Item = &'a ConditionReport>,
) -> Result<(), ExperimentError> {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

/// Machine-readable digest of a result directory.
#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub bound: f64,
    /// Mean event frequency across the test sets.
    #[serde(rename = "P_hat_A")]
    pub p_hat_a: f64,
    /// Mean convergence frequency; absent when the family has no
    /// convergence event.
    #[serde(rename = "P_hat_Aconv", skip_serializing_if = "Option::is_none")]
    pub p_hat_aconv: Option<f64>,
    /// Test sets on which `bound <= P̂{A} <= P̂{A_conv}` held.
    pub chain_ok_sets: usize,
    pub n_test_sets: usize,
    /// Mean loss at the training horizon, keyed by algorithm label.
    pub mean_loss_at_t_train: BTreeMap<String, f64>,
}

/// Output of [`emit_report`]: a short human-readable text and the same
/// numbers as JSON-ready [`Summary`].
#[derive(Debug, Clone)]
pub struct Report {
    pub summary: Summary,
    pub text: String,
}

/// Condense a completed result directory. All numbers are recomputed from
/// `test_sets.csv` and `loss_quantiles.csv`; the certificate and spec are
/// read only for the bound and the layout (family, horizon, labels).
pub fn emit_report(dir: &Path) -> Result<Report, ExperimentError> {
    let required = [
        "spec.json",
        "certificate.json",
        "test_sets.csv",
        "loss_quantiles.csv",
        "report.csv",
    ];
    let missing: Vec<String> = required
        .iter()
        .filter(|name| !dir.join(name).is_file())
        .map(|name| name.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(ExperimentError::MissingArtifacts {
            dir: dir.display().to_string(),
            files: missing,
        });
    }

    let spec: ExperimentSpec = read_json(&dir.join("spec.json"))?;
    let certificate = Certificate::load(&dir.join("certificate.json"))?;
    let sets = read_test_sets(&dir.join("test_sets.csv"))?;
    if sets.is_empty() {
        return Err(ExperimentError::Parse {
            path: dir.join("test_sets.csv").display().to_string(),
            reason: "no test sets recorded".into(),
        });
    }
    let mean_loss_at_t_train =
        read_mean_losses(&dir.join("loss_quantiles.csv"), spec.pipeline.t_train)?;

    let n = sets.len() as f64;
    let p_hat_a = sets.iter().map(|s| s.p_hat_a).sum::<f64>() / n;
    let convs: Vec<f64> = sets.iter().filter_map(|s| s.p_hat_aconv).collect();
    let p_hat_aconv = (convs.len() == sets.len())
        .then(|| convs.iter().sum::<f64>() / n);
    let chain_ok_sets = sets.iter().filter(|s| s.chain_holds()).count();

    let summary = Summary {
        bound: certificate.bound,
        p_hat_a,
        p_hat_aconv,
        chain_ok_sets,
        n_test_sets: sets.len(),
        mean_loss_at_t_train,
    };

    let mut text = String::new();
    text.push_str(&format!("certificate bound: {}\n", summary.bound));
    text.push_str(&format!(
        "mean P_hat{{A}} over {} test sets: {}\n",
        summary.n_test_sets, summary.p_hat_a
    ));
    if let Some(c) = summary.p_hat_aconv {
        text.push_str(&format!("mean P_hat{{A_conv}}: {c}\n"));
        text.push_str(&format!(
            "chain bound <= P_hat{{A}} <= P_hat{{A_conv}}: {}/{} sets\n",
            summary.chain_ok_sets, summary.n_test_sets
        ));
    } else {
        text.push_str(&format!(
            "chain bound <= P_hat{{A}}: {}/{} sets (no convergence event for this family)\n",
            summary.chain_ok_sets, summary.n_test_sets
        ));
    }
    let t = spec.pipeline.t_train;
    for (label, loss) in &summary.mean_loss_at_t_train {
        text.push_str(&format!("mean loss at t={t}: {label} {loss}\n"));
    }
    Ok(Report { summary, text })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ExperimentError> {
    let json = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&json).map_err(|e| ExperimentError::Parse {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

fn parse_field(path: &Path, cell: &str, what: &str) -> Result<f64, ExperimentError> {
    cell.parse().map_err(|_| ExperimentError::Parse {
        path: path.display().to_string(),
        reason: format!("bad {what}: {cell:?}"),
    })
}

fn read_test_sets(path: &Path) -> Result<Vec<TestSetStats>, ExperimentError> {
    let body = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut sets = Vec::new();
    for line in body.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 4 {
            return Err(ExperimentError::Parse {
                path: path.display().to_string(),
                reason: format!("expected 4 cells, got {}: {line:?}", cells.len()),
            });
        }
        let p_hat_aconv = if cells[2].is_empty() {
            None
        } else {
            Some(parse_field(path, cells[2], "p_hat_aconv")?)
        };
        sets.push(TestSetStats {
            set: parse_field(path, cells[0], "set index")? as usize,
            p_hat_a: parse_field(path, cells[1], "p_hat_a")?,
            p_hat_aconv,
            bound: parse_field(path, cells[3], "bound")?,
        });
    }
    Ok(sets)
}

/// Pull the `<algo>_mean` columns out of the quantile CSV at iteration `t`.
fn read_mean_losses(path: &Path, t: usize) -> Result<BTreeMap<String, f64>, ExperimentError> {
    let body = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = body.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| ExperimentError::Parse {
            path: path.display().to_string(),
            reason: "empty file".into(),
        })?
        .split(',')
        .collect();
    let row = lines.nth(t).ok_or_else(|| ExperimentError::Parse {
        path: path.display().to_string(),
        reason: format!("no row for t={t}"),
    })?;
    let cells: Vec<&str> = row.split(',').collect();
    let mut means = BTreeMap::new();
    for (i, name) in header.iter().enumerate() {
        if let Some(label) = name.strip_suffix("_mean") {
            means.insert(label.to_string(), parse_field(path, cells[i], name)?);
        }
    }
    Ok(means)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::NetLayout;
    use tempfile::tempdir;

    #[test]
    fn quantiles_interpolate_between_order_statistics() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert_eq!(quantile_sorted(&v, 1.0), 4.0);
        assert_eq!(quantile_sorted(&v, 0.5), 2.5);
        let w = [0.0, 1.0, 2.0, 3.0];
        assert!((quantile_sorted(&w, 0.025) - 0.075).abs() < 1e-15);
        assert_eq!(quantile_sorted(&[5.0], 0.5), 5.0);
    }

    #[test]
    fn padding_repeats_the_final_value() {
        assert_eq!(pad_series(vec![3.0, 1.0], 4), vec![3.0, 1.0, 1.0, 1.0]);
        assert_eq!(pad_series(vec![3.0, 1.0], 2), vec![3.0, 1.0]);
    }

    fn synthetic_traj(rows: usize, stop: StopReason) -> Trajectory {
        let series: Vec<f64> = (0..rows).map(|t| t as f64).collect();
        Trajectory {
            losses: series.clone(),
            grad_norms: series.clone(),
            step_norms: series.clone(),
            state_norms: series,
            aux: None,
            final_state: vec![7.0],
            states: None,
            diverged: false,
            stop,
        }
    }

    #[test]
    fn the_event_is_judged_on_the_training_prefix() {
        let long = synthetic_traj(12, StopReason::Horizon);
        let prefix = event_prefix(&long, 3);
        assert_eq!(prefix.losses, vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(prefix.state_norms.len(), 4);
        assert_eq!(prefix.stop, StopReason::Horizon);

        // A rollout that stopped inside the convergence set before the
        // horizon is kept whole, stop reason included.
        let short = synthetic_traj(2, StopReason::LossTol);
        let prefix = event_prefix(&short, 3);
        assert_eq!(prefix.losses.len(), 2);
        assert_eq!(prefix.stop, StopReason::LossTol);
    }

    /// Shrunk quadratic experiment: every stage of the real thing at
    /// sizes that keep one run well under a second.
    fn tiny_spec(out: &Path, seed: u64) -> ExperimentSpec {
        let mut pipeline = PipelineConfig::desk(seed);
        pipeline.quad.dim = 6;
        pipeline.n_prior = 12;
        pipeline.n_val = 12;
        pipeline.n_train = 8;
        pipeline.n_sample = 3;
        pipeline.n_iter_perf = 150;
        pipeline.check_every = 100;
        pipeline.max_windows = 2;
        pipeline.t_train = 30;
        ExperimentSpec {
            family: Family::Quadratic,
            pipeline,
            baselines: vec![Baseline::Hbf],
            n_test_sets: 2,
            set_size: 5,
            out_dir: out.into(),
            seed,
        }
    }

    #[test]
    fn bad_specs_are_rejected() {
        let dir = tempdir().unwrap();
        let mut spec = tiny_spec(dir.path(), 3);
        spec.n_test_sets = 0;
        assert!(matches!(spec.validate(), Err(ExperimentError::Spec(_))));

        let mut spec = tiny_spec(dir.path(), 3);
        spec.set_size = 0;
        assert!(spec.validate().is_err());

        let mut spec = tiny_spec(dir.path(), 3);
        spec.baselines = vec![Baseline::Hbf, Baseline::Hbf];
        assert!(spec.validate().is_err());

        let mut spec = tiny_spec(dir.path(), 3);
        spec.family = Family::NnRegression;
        assert!(spec.validate().is_err(), "hbf has no curvature bounds to use");
    }

    #[test]
    fn the_experiment_seed_overrides_the_pipeline_seed() {
        let dir = tempdir().unwrap();
        let mut spec = tiny_spec(dir.path(), 5);
        spec.pipeline.seed = 99;
        assert_eq!(spec.resolved().pipeline.seed, 5);
    }

    #[test]
    fn quadratic_experiment_writes_a_complete_result_directory() {
        let dir = tempdir().unwrap();
        let spec = tiny_spec(dir.path(), 3);
        let out = run_experiment(&spec).unwrap();

        for name in [
            "spec.json",
            "certificate.json",
            "loss_quantiles.csv",
            "distance_quantiles.csv",
            "test_sets.csv",
            "report.csv",
            "exceptions.csv",
            "training/checkpoints/final.bin",
        ] {
            assert!(dir.path().join(name).exists(), "missing {name}");
        }

        let quantiles = std::fs::read_to_string(dir.path().join("loss_quantiles.csv")).unwrap();
        let mut lines = quantiles.lines();
        assert_eq!(
            lines.next().unwrap(),
            "t,hbf_mean,hbf_median,hbf_q025,hbf_q975,\
             learned_mean,learned_median,learned_q025,learned_q975"
                .replace(" ", "")
        );
        // Header plus one row per iteration of the extended window.
        assert_eq!(quantiles.lines().count(), 1 + spec.eval_horizon() + 1);

        let report = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert_eq!(report.lines().count(), 1 + 2 * 5 * 2, "two algos per problem");

        assert_eq!(out.sets.len(), 2);
        for s in &out.sets {
            assert!((0.0..=1.0).contains(&s.p_hat_a));
            assert!((0.0..=1.0).contains(&s.p_hat_aconv.unwrap()));
            assert!((0.0..=1.0).contains(&s.bound));
        }
        let learned = out.mean_loss_at_t_train["learned"];
        let hbf = out.mean_loss_at_t_train["hbf"];
        assert!(learned.is_finite() && hbf.is_finite());
    }

    #[test]
    fn reruns_write_byte_identical_results() {
        let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
        run_experiment(&tiny_spec(a.path(), 11)).unwrap();
        run_experiment(&tiny_spec(b.path(), 11)).unwrap();
        // spec.json records the output directory itself, so it is compared
        // everywhere except there.
        for name in [
            "certificate.json",
            "loss_quantiles.csv",
            "distance_quantiles.csv",
            "test_sets.csv",
            "report.csv",
            "exceptions.csv",
        ] {
            let left = std::fs::read(a.path().join(name)).unwrap();
            let right = std::fs::read(b.path().join(name)).unwrap();
            assert_eq!(left, right, "{name} differs between reruns");
        }
    }

    #[test]
    fn matching_training_directories_are_reused() {
        let dir = tempdir().unwrap();
        let spec = tiny_spec(dir.path(), 4);
        run_experiment(&spec).unwrap();

        // Drop a file only a fresh training run would rewrite. A second
        // run with the same spec must load the existing checkpoints and
        // leave the gap alone.
        let marker = dir.path().join("training/problems/val.json");
        std::fs::remove_file(&marker).unwrap();
        run_experiment(&spec).unwrap();
        assert!(!marker.exists(), "matching config should not retrain");

        // A different seed invalidates the recorded config and retrains.
        let mut other = spec.clone();
        other.seed = 5;
        run_experiment(&other).unwrap();
        assert!(marker.exists(), "changed config must retrain");
    }

    #[test]
    fn report_condenses_the_result_directory() {
        let dir = tempdir().unwrap();
        let spec = tiny_spec(dir.path(), 3);
        let out = run_experiment(&spec).unwrap();
        let report = emit_report(dir.path()).unwrap();

        assert_eq!(report.summary.bound, out.certificate.bound);
        assert_eq!(report.summary.n_test_sets, 2);
        let expected =
            out.sets.iter().map(|s| s.p_hat_a).sum::<f64>() / out.sets.len() as f64;
        assert_eq!(report.summary.p_hat_a, expected);
        assert!(report.summary.p_hat_aconv.is_some());
        assert_eq!(
            report.summary.mean_loss_at_t_train,
            out.mean_loss_at_t_train
        );

        let json = serde_json::to_value(&report.summary).unwrap();
        for key in ["bound", "P_hat_A", "P_hat_Aconv", "chain_ok_sets"] {
            assert!(json.get(key).is_some(), "summary missing {key}");
        }
        assert!(report.text.contains("certificate bound"));
        assert!(report.text.contains("chain"));
    }

    #[test]
    fn missing_artifacts_are_listed_by_name() {
        let dir = tempdir().unwrap();
        match emit_report(dir.path()) {
            Err(ExperimentError::MissingArtifacts { files, .. }) => {
                assert_eq!(
                    files,
                    vec![
                        "spec.json",
                        "certificate.json",
                        "test_sets.csv",
                        "loss_quantiles.csv",
                        "report.csv"
                    ]
                );
            }
            other => panic!("expected missing-artifact error, got {other:?}"),
        }
    }

    #[test]
    fn regression_experiments_have_no_convergence_event() {
        let dir = tempdir().unwrap();
        let mut spec = tiny_spec(dir.path(), 16);
        spec.family = Family::NnRegression;
        spec.baselines = vec![Baseline::Adam];
        spec.pipeline.regression.k = 6;
        spec.pipeline.regression.layout = NetLayout {
            input: 2,
            hidden: 3,
        };
        spec.pipeline.n_iter_perf = 40;
        spec.pipeline.check_every = 30;
        spec.pipeline.t_train = 15;
        spec.pipeline.lr = 1e-3;
        spec.n_test_sets = 2;
        spec.set_size = 4;
        let out = run_experiment(&spec).unwrap();

        assert!(out.sets.iter().all(|s| s.p_hat_aconv.is_none()));
        assert!(out.exceptions.is_empty());
        assert!(!dir.path().join("distance_quantiles.csv").exists());
        assert!(!dir.path().join("exceptions.csv").exists());

        let sets = std::fs::read_to_string(dir.path().join("test_sets.csv")).unwrap();
        for line in sets.lines().skip(1) {
            let cells: Vec<&str> = line.split(',').collect();
            assert_eq!(cells[2], "", "convergence cell must stay empty");
        }

        let report = emit_report(dir.path()).unwrap();
        assert!(report.summary.p_hat_aconv.is_none());
        let json = serde_json::to_value(&report.summary).unwrap();
        assert!(json.get("P_hat_Aconv").is_none());
        assert!(json.get("P_hat_A").is_some());
        assert!(report.text.contains("no convergence event"));
    }
}
