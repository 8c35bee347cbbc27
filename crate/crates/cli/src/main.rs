//! `l2o` — train, certify, and evaluate learned optimizers from the
//! command line.
//!
//! Every subcommand is driven by an experiment spec (JSON, see
//! `ExperimentSpec`); without `--spec` the desk-scale quadratic experiment
//! runs against heavy ball. `--out` and `--seed` override the spec's
//! output directory and master seed, `--threads` caps the rayon pool.
//!
//! Exit codes: 0 on success, otherwise a stage-specific code with a tagged
//! message on stderr — 2 spec, 3 training, 4 problems, 5 evaluation,
//! 6 certificate, 7 io, 8 malformed or missing artifacts.

use clap::{Parser, Subcommand};
use l2o_core::conditions::REPORT_CSV_HEADER;
use l2o_core::counterexamples::demo_table;
use l2o_core::experiment::{
    emit_report, run_experiment, sample_test_set, ExperimentError, ExperimentSpec, Report,
};
use l2o_core::pacbayes::{certify, Certificate, PacBayesError};
use l2o_core::problems::ProblemError;
use l2o_core::training::{run_pipeline, sample_stage_datasets, PipelineError};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Parser)]
#[command(name = "l2o", version, about = "Learned optimizers with certified convergence odds")]
struct Cli {
    /// Experiment spec file (JSON); defaults to the desk-scale quadratic
    /// experiment writing under runs/desk-quadratic.
    #[arg(long, global = true, value_name = "file")]
    spec: Option<PathBuf>,
    /// Output directory; overrides the spec's.
    #[arg(long, global = true, value_name = "dir")]
    out: Option<PathBuf>,
    /// Master seed; overrides the spec's.
    #[arg(long, global = true, value_name = "u64")]
    seed: Option<u64>,
    /// Worker threads for the rollout pool (default: all cores).
    #[arg(long, global = true, value_name = "n")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the training-stage datasets and the test sets, writing each
    /// as JSON under <out>/problems.
    GenProblems,
    /// Run the training pipeline and write its run directory under
    /// <out>/training.
    Train,
    /// Re-derive the certificate from a run directory's recorded per-atom
    /// reports and check it against the stored certificate.json.
    Certify,
    /// Run the full experiment: train (or reuse), roll the test sets,
    /// write CSVs, and print the summary.
    Evaluate,
    /// Print the two analytic sequences that each break one condition of
    /// the convergence event.
    Counterexamples,
    /// Summarize a completed result directory (prints text, writes
    /// summary.json).
    Report,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("spec file {path}: {reason}")]
    SpecFile { path: String, reason: String },
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error("training: {0}")]
    Pipeline(#[from] PipelineError),
    #[error("problems: {0}")]
    Problem(#[from] ProblemError),
    #[error("certificate: {0}")]
    PacBayes(#[from] PacBayesError),
    #[error("certificate: stored {field} {stored} does not match recomputed {recomputed}")]
    CertificateMismatch {
        field: &'static str,
        stored: f64,
        recomputed: f64,
    },
    #[error("io {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("report {path}: {reason}")]
    BadReport { path: String, reason: String },
    #[error("threads: {0}")]
    Threads(String),
}

fn exit_code(e: &CliError) -> i32 {
    match e {
        CliError::SpecFile { .. } => 2,
        CliError::Experiment(inner) => match inner {
            ExperimentError::Spec(_) => 2,
            ExperimentError::Pipeline(_) => 3,
            ExperimentError::Problem(_) => 4,
            ExperimentError::Condition(_) => 5,
            ExperimentError::Certificate(_) | ExperimentError::Coeff(_) => 6,
            ExperimentError::Io { .. } => 7,
            ExperimentError::MissingArtifacts { .. } | ExperimentError::Parse { .. } => 8,
        },
        CliError::Pipeline(_) => 3,
        CliError::Problem(_) => 4,
        CliError::PacBayes(_) | CliError::CertificateMismatch { .. } => 6,
        CliError::Io { .. } => 7,
        CliError::BadReport { .. } => 8,
        CliError::Threads(_) => 2,
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Threads(e.to_string()))?;
    }
    let spec = load_spec(&cli)?;
    match cli.command {
        Command::GenProblems => gen_problems(&spec),
        Command::Train => train(&spec),
        Command::Certify => certify_run(&spec),
        Command::Evaluate => {
            run_experiment(&spec)?;
            report(&spec.out_dir)
        }
        Command::Counterexamples => {
            print_counterexamples();
            Ok(())
        }
        Command::Report => report(&spec.out_dir),
    }
}

/// The spec the subcommand acts on: the file (or the desk default), with
/// the command-line overrides applied and the seed pushed through.
fn load_spec(cli: &Cli) -> Result<ExperimentSpec, CliError> {
    let mut spec = match &cli.spec {
        Some(path) => {
            let json =
                std::fs::read_to_string(path).map_err(|e| CliError::SpecFile {
                    path: path.display().to_string(),
                    reason: e.to_string(),
                })?;
            serde_json::from_str(&json).map_err(|e| CliError::SpecFile {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?
        }
        None => ExperimentSpec::desk_quadratic("runs/desk-quadratic"),
    };
    if let Some(out) = &cli.out {
        spec.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    Ok(spec.resolved())
}

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn gen_problems(spec: &ExperimentSpec) -> Result<(), CliError> {
    let dir = spec.out_dir.join("problems");
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let stages = sample_stage_datasets(spec.family, &spec.pipeline)?;
    stages.prior.save(&dir.join("prior.json"))?;
    stages.val.save(&dir.join("val.json"))?;
    stages.train.save(&dir.join("train.json"))?;
    for i in 0..spec.n_test_sets {
        let set = sample_test_set(spec, i)?;
        set.save(&dir.join(format!("test-{i:03}.json")))?;
    }
    println!(
        "wrote {} stage datasets and {} test sets to {}",
        3,
        spec.n_test_sets,
        dir.display()
    );
    Ok(())
}

fn train(spec: &ExperimentSpec) -> Result<(), CliError> {
    let dir = spec.out_dir.join("training");
    let output = run_pipeline(spec.family, &spec.pipeline, Some(&dir))?;
    println!("run directory: {}", dir.display());
    println!(
        "certificate bound: {} (lambda = {}, KL = {})",
        output.certificate.bound, output.certificate.lambda, output.certificate.kl
    );
    Ok(())
}

/// Where a run directory's certificate lives: under `training/` for an
/// experiment directory, at the top for a bare pipeline run.
fn locate_run_dir(out: &Path) -> PathBuf {
    if out.join("training").join("certificate.json").is_file() {
        out.join("training")
    } else {
        out.to_path_buf()
    }
}

fn certify_run(spec: &ExperimentSpec) -> Result<(), CliError> {
    let dir = locate_run_dir(&spec.out_dir);
    let stored = Certificate::load(&dir.join("certificate.json"))?;
    let risks = atom_risks(&dir.join("report.csv"), stored.risks.len(), stored.n)?;
    let recomputed = certify(
        &stored.prior,
        &risks,
        &stored.lambda_grid,
        stored.epsilon,
        stored.n,
    )?;
    for (field, s, r) in [
        ("bound", stored.bound, recomputed.bound),
        ("lambda", stored.lambda, recomputed.lambda),
        ("kl", stored.kl, recomputed.kl),
        ("empirical term", stored.empirical_term, recomputed.empirical_term),
    ] {
        if s != r {
            return Err(CliError::CertificateMismatch {
                field,
                stored: s,
                recomputed: r,
            });
        }
    }
    println!(
        "certificate verified: bound {} from {} atoms on {} problems",
        stored.bound,
        risks.len(),
        stored.n
    );
    Ok(())
}

/// Per-atom complement-risks out of a run directory's report.csv: rows are
/// labeled `atom-<i>`, the risk is the fraction of rows not in the event.
fn atom_risks(path: &Path, n_atoms: usize, n: usize) -> Result<Vec<f64>, CliError> {
    let bad = |reason: String| CliError::BadReport {
        path: path.display().to_string(),
        reason,
    };
    let body = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = body.lines();
    match lines.next() {
        Some(h) if h == REPORT_CSV_HEADER => {}
        other => return Err(bad(format!("unexpected header {other:?}"))),
    }
    let mut misses = vec![0usize; n_atoms];
    let mut counts = vec![0usize; n_atoms];
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() < 9 {
            return Err(bad(format!("short row {line:?}")));
        }
        let atom: usize = cells[1]
            .strip_prefix("atom-")
            .and_then(|i| i.parse().ok())
            .ok_or_else(|| bad(format!("expected atom-<i> label, got {:?}", cells[1])))?;
        if atom >= n_atoms {
            return Err(bad(format!("atom {atom} out of range (certificate has {n_atoms})")));
        }
        counts[atom] += 1;
        if cells[8] != "true" {
            misses[atom] += 1;
        }
    }
    for (i, &c) in counts.iter().enumerate() {
        if c != n {
            return Err(bad(format!(
                "atom {i} has {c} rows, certificate says {n} problems"
            )));
        }
    }
    Ok(misses
        .iter()
        .zip(&counts)
        .map(|(&m, &c)| m as f64 / c as f64)
        .collect())
}

fn report(dir: &Path) -> Result<(), CliError> {
    let Report { summary, text } = emit_report(dir)?;
    let path = dir.join("summary.json");
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    std::fs::write(&path, json + "\n").map_err(|e| io_err(&path, e))?;
    print!("{text}");
    println!("summary: {}", path.display());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        None => "-".into(),
        Some(x) if x.is_infinite() => "inf".into(),
        Some(x) if x != 0.0 && (x.abs() < 1e-3 || x.abs() >= 1e4) => format!("{x:.3e}"),
        Some(x) => format!("{x:.4}"),
    }
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

fn print_counterexamples() {
    println!(
        "{:<11}{:>8}  {:>10}  {:>10}  {:>10}  {:>5}  {:>4}  {:>6}  {:>5}  violated",
        "example", "T", "a_star", "b_star", "c_star", "desc", "err", "bound", "in_A"
    );
    for row in demo_table() {
        let r = &row.report;
        println!(
            "{:<11}{:>8}  {:>10}  {:>10}  {:>10}  {:>5}  {:>4}  {:>6}  {:>5}  {}",
            row.example,
            row.horizon,
            fmt_opt(r.a_star),
            fmt_opt(r.b_star),
            fmt_opt(Some(r.c_star)),
            yes_no(r.in_a_desc),
            yes_no(r.in_a_err),
            yes_no(r.in_a_bound),
            yes_no(r.in_a),
            row.violated.join(", "),
        );
    }
}
