//! The acceptance gate: seven numbered criteria, one test each, every test
//! printing a single `criterion N (...): PASS/FAIL` line with its runtime.
//! A criterion fails by listing what broke, never silently; runtime budgets
//! are part of the criterion.
//!
//! Criteria 5-7 share one desk-scale experiment run (trained once per test
//! process); criterion 7 pays for its own second run to compare bytes.

use l2o_core::conditions::{bound_constant, descent_constant, relative_error_constant};
use l2o_core::counterexamples::{example1_prefix, example2_loss_grad, example2_limit_point, example2_prefix};
use l2o_core::experiment::{run_experiment, ExperimentOutput, ExperimentSpec};
use l2o_core::pacbayes::{
    certify, default_lambda_grid, gibbs_posterior, kl_discrete, phi_inverse, DiscreteMeasure,
};
use l2o_core::problems::{sample_regression, Objective, RegressionFamilyConfig, RegressionObjective};
use l2o_core::rng::rng_for;
use l2o_core::vecmath::norm;
use rand::Rng;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;
use tempfile::TempDir;

/// Run one criterion's checks, print its line, and fail the test with the
/// collected reasons if any check (or the runtime budget) broke.
fn criterion(n: usize, label: &str, budget_s: Option<f64>, body: impl FnOnce(&mut Vec<String>)) {
    let start = Instant::now();
    let mut failures = Vec::new();
    body(&mut failures);
    let elapsed = start.elapsed().as_secs_f64();
    if let Some(b) = budget_s {
        if elapsed >= b {
            failures.push(format!("runtime {elapsed:.1} s exceeds the {b:.0} s budget"));
        }
    }
    if failures.is_empty() {
        println!("criterion {n} ({label}): PASS ({elapsed:.1} s)");
    } else {
        let msg = format!(
            "criterion {n} ({label}): FAIL ({elapsed:.1} s) — {}",
            failures.join("; ")
        );
        println!("{msg}");
        panic!("{msg}");
    }
}

fn check(failures: &mut Vec<String>, ok: bool, msg: impl FnOnce() -> String) {
    if !ok {
        failures.push(msg());
    }
}

// ---------------------------------------------------------------------------
// 1. Certified-bound primitives
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_certified_bound_primitives() {
    criterion(1, "certified-bound primitives", Some(1.0), |f| {
        // Endpoint identities are exact, not approximate.
        for a in [1e-10, 1e-6, 0.5, 1.0, 7.0, 50.0, 300.0] {
            check(f, phi_inverse(a, 0.0).unwrap() == 0.0, || {
                format!("phi_inverse({a}, 0) != 0")
            });
            check(f, phi_inverse(a, 1.0).unwrap() == 1.0, || {
                format!("phi_inverse({a}, 1) != 1")
            });
        }

        // Monotone in p for a thousand random (a, p1 < p2).
        let mut rng = rng_for(1, 101, 0);
        for _ in 0..1_000 {
            let a = 10f64.powf(rng.random_range(-6.0..2.5));
            let (u, v) = (rng.random::<f64>(), rng.random::<f64>());
            let (p1, p2) = if u <= v { (u, v) } else { (v, u) };
            let (y1, y2) = (phi_inverse(a, p1).unwrap(), phi_inverse(a, p2).unwrap());
            check(f, y1 <= y2, || {
                format!("phi_inverse({a}, .) not monotone: p {p1} -> {y1}, p {p2} -> {y2}")
            });
            check(f, (0.0..=1.0).contains(&y1), || {
                format!("phi_inverse({a}, {p1}) = {y1} outside [0, 1]")
            });
        }

        // KL is nonnegative, zero exactly on identical measures.
        let atoms: Vec<u64> = (0..5).collect();
        for i in 0..50u64 {
            let mut rng = rng_for(2, 101, i);
            let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> DiscreteMeasure {
                let raw: Vec<f64> = (0..5).map(|_| -(rng.random::<f64>()).ln()).collect();
                let total: f64 = raw.iter().sum();
                DiscreteMeasure::new(atoms.clone(), raw.iter().map(|w| w / total).collect())
                    .unwrap()
            };
            let prior = draw(&mut rng);
            let rho = draw(&mut rng);
            let kl = kl_discrete(&rho, &prior);
            check(f, kl >= 0.0, || format!("KL = {kl} < 0"));
            let differ = rho
                .weights()
                .iter()
                .zip(prior.weights())
                .any(|(a, b)| (a - b).abs() > 1e-9);
            if differ {
                check(f, kl > 0.0, || "KL = 0 on unequal measures".into());
            }
            check(f, kl_discrete(&rho, &rho) == 0.0, || {
                "KL(rho || rho) != 0".into()
            });
        }

        // Gibbs: lambda = 0 returns the prior; the two-atom posterior at
        // lambda = 1 and risks (0, 1) is 1/(1+e^-1) ~ 0.7311 per the
        // closed form.
        let prior = DiscreteMeasure::new(vec![0, 1], vec![0.5, 0.5]).unwrap();
        let same = gibbs_posterior(&prior, &[0.3, 0.9], 0.0).unwrap();
        for (a, b) in same.weights().iter().zip(prior.weights()) {
            check(f, (a - b).abs() <= 1e-12, || {
                format!("lambda=0 posterior weight {a} != prior {b}")
            });
        }
        let two = gibbs_posterior(&prior, &[0.0, 1.0], 1.0).unwrap();
        let expect = 1.0 / (1.0 + (-1.0f64).exp());
        check(f, (two.weights()[0] - expect).abs() < 1e-6, || {
            format!("two-atom posterior {} vs {expect}", two.weights()[0])
        });
        check(f, (two.weights()[1] - (1.0 - expect)).abs() < 1e-6, || {
            format!("two-atom posterior {} vs {}", two.weights()[1], 1.0 - expect)
        });
    });
}

// ---------------------------------------------------------------------------
// 2. Gradient oracle
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_gradient_oracle() {
    criterion(2, "gradient oracle", Some(30.0), |f| {
        let config = RegressionFamilyConfig::default();
        let layout = config.layout;
        let n = layout.total();
        let h = 1e-5;

        let mut masked_total = 0usize;
        for i in 0..100u64 {
            let inst = sample_regression(i, &config, &mut rng_for(7, 102, i)).unwrap();
            let obj = RegressionObjective::new(inst, layout).unwrap();
            let mut rng = rng_for(8, 102, i);
            let beta: Vec<f64> = (0..n).map(|_| 0.3 * rng.random::<f64>() - 0.15).collect();

            // A central difference in coordinate j is only valid where its
            // stencil stays on one side of every ReLU kink. Perturbing
            // w1[u,c] by h moves unit u's preactivation at sample x by
            // h*|phi_c(x)|, and b1[u] moves it by h; second-layer weights
            // never move it. Mask out exactly the coordinates whose
            // stencil can cross, and compare the rest.
            let keep = kink_free_coordinates(&obj, &beta, 2.0 * h);
            let kept = keep.iter().filter(|&&k| k).count();
            masked_total += n - kept;

            let (_, grad) = obj.loss_grad(&beta);
            let mut err2 = 0.0;
            let mut ref2 = 0.0;
            let mut plus = beta.clone();
            let mut minus = beta;
            for j in 0..n {
                if !keep[j] {
                    continue;
                }
                let orig = plus[j];
                plus[j] = orig + h;
                minus[j] = orig - h;
                let fd = (obj.loss(&plus).unwrap() - obj.loss(&minus).unwrap()) / (2.0 * h);
                plus[j] = orig;
                minus[j] = orig;
                err2 += (grad[j] - fd) * (grad[j] - fd);
                ref2 += grad[j] * grad[j];
            }
            let rel = err2.sqrt() / ref2.sqrt().max(1e-9);
            check(f, rel < 1e-4, || {
                format!("instance {i}: autodiff vs central differences rel err {rel:.2e}")
            });
            check(f, kept * 10 >= n * 9, || {
                format!("instance {i}: only {kept}/{n} coordinates away from kinks")
            });
        }
        // Masking must stay the exception, not the rule.
        check(f, masked_total < 100 * n / 20, || {
            format!("{masked_total} masked coordinates across 100 instances")
        });
    });
}

/// `true` for each coordinate whose finite-difference stencil of radius
/// `reach` cannot flip any ReLU preactivation's sign.
fn kink_free_coordinates(obj: &RegressionObjective, beta: &[f64], reach: f64) -> Vec<bool> {
    let layout = obj.layout;
    let [w1r, b1r, ..] = layout.block_ranges();
    let (w1, b1) = (&beta[w1r.clone()], &beta[b1r.clone()]);
    let phis: Vec<Vec<f64>> = obj.inst.xs.iter().map(|&x| layout.features(x)).collect();

    let mut keep = vec![true; layout.total()];
    for u in 0..layout.hidden {
        let row = &w1[u * layout.input..(u + 1) * layout.input];
        for phi in &phis {
            let pre: f64 = row.iter().zip(phi).map(|(w, p)| w * p).sum::<f64>() + b1[u];
            for (c, p) in phi.iter().enumerate() {
                if pre.abs() <= reach * p.abs() {
                    keep[w1r.start + u * layout.input + c] = false;
                }
            }
            if pre.abs() <= reach {
                keep[b1r.start + u] = false;
            }
        }
    }
    keep
}

// ---------------------------------------------------------------------------
// 3. Counterexample constants
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_counterexample_constants() {
    criterion(3, "counterexample constants", Some(5.0), |f| {
        let t1 = example1_prefix(100_000);
        let a1 = descent_constant(&t1).unwrap();
        check(f, a1.is_some_and(|a| a >= 0.0817), || {
            format!("example 1 descent constant {a1:?} < 0.0817")
        });
        let c1 = bound_constant(&t1);
        check(f, c1 > 12.0, || format!("example 1 iterate bound {c1} <= 12"));

        let x0 = [1.0, 1.0];
        let t2 = example2_prefix(50, x0);
        let a2 = descent_constant(&t2).unwrap();
        check(f, a2.is_some_and(|a| (a - 9.5).abs() <= 1e-9), || {
            format!("example 2 descent constant {a2:?} != 9.5")
        });
        let (_, limit_grad) = example2_loss_grad(example2_limit_point(x0));
        let gap = (norm(&limit_grad) - x0[1].abs()).abs();
        check(f, gap <= 1e-12, || {
            format!("limit gradient norm off by {gap:.2e} from |x2|")
        });
        let b2 = relative_error_constant(&t2).unwrap();
        check(f, b2.is_some_and(|b| b > 1e4), || {
            format!("example 2 relative-error constant at T=50 is {b2:?}, not above 1e4")
        });
    });
}

// ---------------------------------------------------------------------------
// 4. Monte-Carlo soundness of the certificate
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_monte_carlo_soundness() {
    criterion(4, "Monte-Carlo soundness", Some(60.0), |f| {
        let true_risks = [0.05, 0.1, 0.2, 0.3, 0.5];
        let prior = DiscreteMeasure::new((0..5).collect(), vec![0.2; 5]).unwrap();
        let grid = default_lambda_grid(50);
        let (n, redraws) = (50usize, 200usize);

        let mut sound = 0;
        for j in 0..redraws as u64 {
            let mut rng = rng_for(4, 104, j);
            let empirical: Vec<f64> = true_risks
                .iter()
                .map(|&p| {
                    (0..n).filter(|_| rng.random::<f64>() < p).count() as f64 / n as f64
                })
                .collect();
            let cert = certify(&prior, &empirical, &grid, 0.05, n).unwrap();
            // The bound claims at least this success probability for the
            // Gibbs posterior the data selected; the truth is known here.
            let true_value = 1.0
                - cert
                    .posterior
                    .weights()
                    .iter()
                    .zip(&true_risks)
                    .map(|(w, p)| w * p)
                    .sum::<f64>();
            if cert.bound <= true_value {
                sound += 1;
            }
        }
        // 1 - epsilon minus three binomial standard errors.
        check(f, sound >= 186, || {
            format!("bound <= true value on only {sound}/200 redraws, need 186")
        });
    });
}

// ---------------------------------------------------------------------------
// 5-7. Desk-scale experiment
// ---------------------------------------------------------------------------

struct DeskRun {
    dir: TempDir,
    out: ExperimentOutput,
}

static DESK: OnceLock<DeskRun> = OnceLock::new();

/// The shared end-to-end run: desk quadratic spec, trained and evaluated
/// once per test process.
fn desk_run() -> &'static DeskRun {
    DESK.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let spec = ExperimentSpec::desk_quadratic(dir.path().join("run"));
        let out = run_experiment(&spec).expect("desk experiment");
        DeskRun { dir, out }
    })
}

fn run_dir(desk: &DeskRun) -> std::path::PathBuf {
    desk.dir.path().join("run")
}

/// Learned-rule rows of a run's report.csv as (in_event, converged) pairs.
fn learned_outcomes(dir: &Path) -> Vec<(bool, bool)> {
    let body = std::fs::read_to_string(dir.join("report.csv")).expect("report.csv");
    body.lines()
        .skip(1)
        .map(|line| line.split(',').collect::<Vec<_>>())
        .filter(|cells| cells[1] == "learned")
        .map(|cells| (cells[8] == "true", cells[9] == "true"))
        .collect()
}

#[test]
fn criterion_5_event_to_convergence_surrogate() {
    criterion(5, "event-to-convergence surrogate", Some(120.0), |f| {
        let desk = desk_run();
        let outcomes = learned_outcomes(&run_dir(desk));
        check(f, outcomes.len() == 20 * 50, || {
            format!("expected 1000 learned test trajectories, found {}", outcomes.len())
        });

        let in_event = outcomes.iter().filter(|(a, _)| *a).count();
        let missed = outcomes.iter().filter(|(a, c)| *a && !*c).count();
        check(f, in_event > 0, || "no trajectory entered the event".into());
        let frac = 1.0 - missed as f64 / in_event.max(1) as f64;
        check(f, frac >= 0.99, || {
            format!("{missed}/{in_event} in-event trajectories missed the convergence set ({frac:.4} < 0.99)")
        });

        // Every exception is on disk, one logged row per miss.
        let logged = std::fs::read_to_string(run_dir(desk).join("exceptions.csv"))
            .expect("exceptions.csv")
            .lines()
            .skip(1)
            .filter(|line| line.split(',').nth(1) == Some("learned"))
            .count();
        check(f, logged == missed, || {
            format!("{missed} exceptions but {logged} learned rows logged")
        });
    });
}

#[test]
fn criterion_6_end_to_end_desk_experiment() {
    criterion(6, "end-to-end desk experiment", Some(900.0), |f| {
        let desk = desk_run();
        let bound = desk.out.certificate.bound;
        check(f, (0.0..=1.0).contains(&bound), || {
            format!("certificate bound {bound} outside [0, 1]")
        });

        check(f, desk.out.sets.len() == 20, || {
            format!("expected 20 test sets, found {}", desk.out.sets.len())
        });
        let chain_ok = desk.out.sets.iter().filter(|s| s.chain_holds()).count();
        check(f, chain_ok >= 19, || {
            format!("bound <= P(A) <= P(A_conv) held on only {chain_ok}/20 sets")
        });

        // The final-loss comparison is reported either way; training
        // quality is seed-sensitive and not a certificate property.
        let learned = desk.out.mean_loss_at_t_train["learned"];
        let hbf = desk.out.mean_loss_at_t_train["hbf"];
        let verdict = if learned <= hbf { "beats" } else { "does not beat" };
        println!(
            "criterion 6 note: learned mean loss at t=100 is {learned:.3e}, \
             {verdict} heavy ball at {hbf:.3e}"
        );
    });
}

#[test]
fn criterion_7_byte_identical_reruns() {
    criterion(7, "byte-identical reruns", None, |f| {
        let desk = desk_run();
        let again = tempfile::tempdir().expect("tempdir");
        let spec = ExperimentSpec::desk_quadratic(again.path().join("run"));
        run_experiment(&spec).expect("rerun");

        for name in [
            "certificate.json",
            "loss_quantiles.csv",
            "distance_quantiles.csv",
            "test_sets.csv",
            "report.csv",
            "exceptions.csv",
        ] {
            let first = std::fs::read(run_dir(desk).join(name)).expect(name);
            let second = std::fs::read(again.path().join("run").join(name)).expect(name);
            check(f, first == second, || format!("{name} differs between reruns"));
        }
    });
}
