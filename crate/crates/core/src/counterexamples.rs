//! Two closed-form sequences showing that the descent conditions are not
//! individually dispensable: each satisfies sufficient descent yet fails
//! to converge to a critical point, for a different reason.
//!
//! * **Example 1** (unboundedness): `x^1 = 1`, `x^t = x^{t-1} + 1/t` on
//!   `f(x) = exp(-x)`. Every step decreases the loss fast enough relative
//!   to its squared length, but the iterates are the harmonic numbers and
//!   drift to infinity.
//! * **Example 2** (relative-error failure): `(x1, x2) <- (0.9 x1, x2)` on
//!   `f(x) = (x1^2 + x2^2) / 2`. The descent constant is exactly 9.5, but
//!   the gradient norm stays near `|x2^0|` while the step norms shrink
//!   geometrically, so the gradient-to-step ratio blows up. The sequence
//!   converges — to `(0, x2^0)`, which is not a critical point.
//!
//! Both generators emit exact losses and gradients of their objective, so
//! the condition scans downstream see the analytic values up to rounding.

use crate::conditions::ConditionReport;
use crate::trajectory::{StopReason, Trajectory};

/// Default prefix length for the harmonic sequence; long enough for the
/// iterate bound to pass 12.
pub const EXAMPLE1_DEFAULT_T: usize = 100_000;
/// Default number of contraction steps. Long enough for the
/// gradient-to-step ratio to exceed 10^4, yet short enough that the loss
/// decrement `0.095 * 0.81^t` has not yet been swallowed by rounding
/// against the constant `x2^2 / 2` part of the loss — past t ≈ 171 the
/// stored losses become exactly equal and the descent signal vanishes.
pub const EXAMPLE2_DEFAULT_T: usize = 100;

/// Prefix `x^1, ..., x^T` of the harmonic sequence with losses
/// `exp(-x^t)`. Needs `t_len >= 1`.
pub fn example1_prefix(t_len: usize) -> Trajectory {
    assert!(t_len >= 1, "need at least one iterate");
    let mut losses = Vec::with_capacity(t_len);
    let mut grad_norms = Vec::with_capacity(t_len);
    let mut step_norms = Vec::with_capacity(t_len);
    let mut state_norms = Vec::with_capacity(t_len);
    let mut x = 1.0f64;
    for t in 1..=t_len {
        if t > 1 {
            let step = 1.0 / t as f64;
            x += step;
            step_norms.push(step);
        } else {
            step_norms.push(0.0);
        }
        let loss = (-x).exp();
        losses.push(loss);
        // f'(x) = -exp(-x), so the gradient norm equals the loss.
        grad_norms.push(loss);
        state_norms.push(x);
    }
    Trajectory {
        losses,
        grad_norms,
        step_norms,
        state_norms,
        aux: None,
        final_state: vec![x],
        states: None,
        diverged: false,
        stop: StopReason::Horizon,
    }
}

/// Loss and gradient of the Example 2 objective `(x1^2 + x2^2) / 2`.
pub fn example2_loss_grad(x: [f64; 2]) -> (f64, [f64; 2]) {
    (0.5 * (x[0] * x[0] + x[1] * x[1]), x)
}

/// `t_steps` applications of `(x1, x2) <- (0.9 x1, x2)` starting at `x0`,
/// recording exact losses and gradients (T+1 iterates).
pub fn example2_prefix(t_steps: usize, x0: [f64; 2]) -> Trajectory {
    let n = t_steps + 1;
    let mut losses = Vec::with_capacity(n);
    let mut grad_norms = Vec::with_capacity(n);
    let mut step_norms = Vec::with_capacity(n);
    let mut state_norms = Vec::with_capacity(n);
    let mut x = x0;
    for t in 0..n {
        if t > 0 {
            let next = 0.9 * x[0];
            step_norms.push((x[0] - next).abs());
            x[0] = next;
        } else {
            step_norms.push(0.0);
        }
        let (loss, grad) = example2_loss_grad(x);
        losses.push(loss);
        let norm = (grad[0] * grad[0] + grad[1] * grad[1]).sqrt();
        grad_norms.push(norm);
        state_norms.push(norm); // ∇f(x) = x, so the two norms coincide.
    }
    Trajectory {
        losses,
        grad_norms,
        step_norms,
        state_norms,
        aux: None,
        final_state: x.to_vec(),
        states: None,
        diverged: false,
        stop: StopReason::Horizon,
    }
}

/// Where the Example 2 sequence converges: the first coordinate dies, the
/// second never moves.
pub fn example2_limit_point(x0: [f64; 2]) -> [f64; 2] {
    [0.0, x0[1]]
}

/// Names of the conditions a report fails, in fixed order.
pub fn violated_conditions(report: &ConditionReport) -> Vec<&'static str> {
    let mut v = Vec::new();
    if !report.in_a_desc {
        v.push("sufficient-descent");
    }
    if !report.in_a_err {
        v.push("relative-error");
    }
    if !report.in_a_bound {
        v.push("boundedness");
    }
    v
}

/// One row of the demo table printed by the CLI.
#[derive(Debug, Clone)]
pub struct DemoRow {
    pub example: &'static str,
    pub horizon: usize,
    pub report: ConditionReport,
    pub violated: Vec<&'static str>,
}

/// Both demos with thresholds chosen so each exhibits exactly its own
/// violation at the default prefix length: the harmonic sequence against
/// an iterate bound of 10, the contraction against a gradient-to-step
/// bound of 10^4 (which its ratio passes near t = 67 while the descent
/// constant still reads 9.5).
pub fn demo_table() -> Vec<DemoRow> {
    use crate::conditions::{event_a, EventThresholds};
    let t1 = example1_prefix(EXAMPLE1_DEFAULT_T);
    let th1 = EventThresholds {
        c_max: 10.0,
        ..EventThresholds::default()
    };
    let r1 = event_a(&t1, &th1)
        .expect("nonempty analytic prefix")
        .labeled(0, "example-1");

    let t2 = example2_prefix(EXAMPLE2_DEFAULT_T, [1.0, 1.0]);
    let th2 = EventThresholds {
        b_max: 1e4,
        ..EventThresholds::default()
    };
    let r2 = event_a(&t2, &th2)
        .expect("nonempty analytic prefix")
        .labeled(0, "example-2");

    vec![
        DemoRow {
            example: "example-1",
            horizon: EXAMPLE1_DEFAULT_T,
            violated: violated_conditions(&r1),
            report: r1,
        },
        DemoRow {
            example: "example-2",
            horizon: EXAMPLE2_DEFAULT_T,
            violated: violated_conditions(&r2),
            report: r2,
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditions::{
        bound_constant, descent_constant, event_a, relative_error_constant, EventThresholds,
    };

    #[test]
    fn example1_first_iterates_match_the_recurrence() {
        let t = example1_prefix(3);
        assert_eq!(t.state_norms[0], 1.0);
        assert_eq!(t.state_norms[1], 1.5);
        assert!((t.state_norms[2] - (1.5 + 1.0 / 3.0)).abs() < 1e-15);
        assert_eq!(t.step_norms[1], 0.5);
        // Loss, gradient norm, and iterate satisfy the analytic relations.
        for i in 0..3 {
            assert_eq!(t.losses[i], (-t.state_norms[i]).exp());
            assert_eq!(t.grad_norms[i], t.losses[i]);
        }
        t.assert_consistent();
    }

    #[test]
    fn example1_descent_constant_approaches_exp_minus_gamma() {
        // The per-step ratio decreases toward exp(-gamma) where gamma is
        // the Euler-Mascheroni constant, so the minimum over a long prefix
        // sits just above it.
        let t = example1_prefix(EXAMPLE1_DEFAULT_T);
        let a = descent_constant(&t).unwrap().unwrap();
        let exp_minus_gamma = (-0.577_215_664_901_532_9f64).exp();
        assert!(
            (a - exp_minus_gamma).abs() < 1e-5,
            "a_star = {a}, exp(-gamma) = {exp_minus_gamma}"
        );
        assert!(a >= 0.0817, "comfortably above the rough 4/(9*2e) estimate");
    }

    #[test]
    fn example1_iterates_pass_twelve_by_the_default_horizon() {
        let t = example1_prefix(EXAMPLE1_DEFAULT_T);
        let c = bound_constant(&t);
        // c_star is the harmonic number H_{100000} = 12.0901461...
        assert!(c > 12.0);
        assert!((c - 12.090_146_129_863_27).abs() < 1e-9, "c_star = {c}");
    }

    #[test]
    fn example1_fails_only_boundedness_against_a_bound_of_ten() {
        let t = example1_prefix(EXAMPLE1_DEFAULT_T);
        let th = EventThresholds {
            c_max: 10.0,
            ..EventThresholds::default()
        };
        let r = event_a(&t, &th).unwrap();
        assert!(r.in_a_desc);
        assert!(r.in_a_err);
        assert!(!r.in_a_bound);
        assert!(!r.in_a);
        assert_eq!(violated_conditions(&r), vec!["boundedness"]);
    }

    #[test]
    fn example2_descent_constant_is_nine_point_five_up_to_cancellation() {
        // The analytic constant is exactly 9.5 at every step. What the
        // scan sees degrades with t: the decrement 0.095 * 0.81^t is
        // recovered by subtracting two losses near x2^2/2 = 0.5, so its
        // relative error grows like ulp(0.5) / decrement.
        for (t_steps, tol) in [(1, 1e-14), (10, 1e-12), (50, 1e-9), (100, 1e-4)] {
            let t = example2_prefix(t_steps, [1.0, 1.0]);
            let a = descent_constant(&t).unwrap().unwrap();
            assert!(
                (a - 9.5).abs() < tol,
                "T = {t_steps}: a_star = {a}, tol {tol}"
            );
        }
        // Same constant from a different start (it is scale-free in x1).
        let t = example2_prefix(20, [-3.0, 0.5]);
        let a = descent_constant(&t).unwrap().unwrap();
        assert!((a - 9.5).abs() < 1e-12);
    }

    #[test]
    fn example2_long_prefixes_lose_the_descent_signal_to_rounding() {
        // Past t ~ 171 the stored losses for x0 = (1,1) are exactly equal
        // step to step, so the best per-step ratio is 0 and no positive
        // descent constant exists — while the gradient-to-step ratio keeps
        // exploding. This is why the demo stops at T = 100.
        let t = example2_prefix(1_000, [1.0, 1.0]);
        assert_eq!(descent_constant(&t).unwrap(), None);
        let b = relative_error_constant(&t).unwrap().unwrap();
        assert!(b > 1e12, "b_star(1000) = {b}");
    }

    #[test]
    fn example2_limit_is_not_a_critical_point() {
        let x0 = [1.0, 1.0];
        let limit = example2_limit_point(x0);
        assert_eq!(limit, [0.0, 1.0]);
        let (_, grad) = example2_loss_grad(limit);
        let gnorm = (grad[0] * grad[0] + grad[1] * grad[1]).sqrt();
        assert!((gnorm - x0[1].abs()).abs() < 1e-12, "gradient norm {gnorm}");
        assert!(gnorm > 0.0);
        // The trajectory does head there (x1 contracts geometrically, x2
        // never moves).
        let t = example2_prefix(1_000, x0);
        assert!((t.final_state[0] - limit[0]).abs() < 1e-40);
        assert_eq!(t.final_state[1], limit[1]);
    }

    #[test]
    fn example2_gradient_to_step_ratio_grows_geometrically() {
        // The largest ratio is at the final step:
        // sqrt(0.81^T + 1) / (0.1 * 0.9^{T-1}).
        let closed = |t: i32| {
            (0.81f64.powi(t) + 1.0).sqrt() / (0.1 * 0.9f64.powi(t - 1))
        };
        let t50 = example2_prefix(50, [1.0, 1.0]);
        let b50 = relative_error_constant(&t50).unwrap().unwrap();
        assert!(
            (b50 - closed(50)).abs() < 1e-6 * closed(50),
            "b_star(50) = {b50}, closed form {}",
            closed(50)
        );
        assert!(b50 > 1746.0 && b50 < 1747.0, "b_star(50) = {b50}");
        // The ratio crosses 10^4 between 66 and 67 steps.
        let b66 = relative_error_constant(&example2_prefix(66, [1.0, 1.0]))
            .unwrap()
            .unwrap();
        let b67 = relative_error_constant(&example2_prefix(67, [1.0, 1.0]))
            .unwrap()
            .unwrap();
        assert!(b66 < 1e4, "b_star(66) = {b66}");
        assert!(b67 > 1e4, "b_star(67) = {b67}");
    }

    #[test]
    fn example2_fails_only_relative_error_at_default_length() {
        let t = example2_prefix(EXAMPLE2_DEFAULT_T, [1.0, 1.0]);
        let th = EventThresholds {
            b_max: 1e4,
            ..EventThresholds::default()
        };
        let r = event_a(&t, &th).unwrap();
        assert!(r.in_a_desc);
        assert!(!r.in_a_err);
        assert!(r.in_a_bound);
        assert!(!r.in_a);
        assert_eq!(violated_conditions(&r), vec!["relative-error"]);
    }

    #[test]
    fn demo_table_shows_one_violation_each() {
        let rows = demo_table();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].example, "example-1");
        assert_eq!(rows[0].violated, vec!["boundedness"]);
        assert_eq!(rows[1].example, "example-2");
        assert_eq!(rows[1].violated, vec!["relative-error"]);
        for row in &rows {
            assert!(!row.report.in_a, "{} must sit outside A", row.example);
            assert!(row.report.in_a_desc, "{} satisfies descent", row.example);
        }
    }

    #[test]
    fn example2_runs_fast_enough_for_interactive_use() {
        // The demo pair plus condition scans is an interactive-latency
        // operation; guard against accidental quadratic blowups.
        let start = std::time::Instant::now();
        let _ = demo_table();
        assert!(
            start.elapsed().as_secs_f64() < 5.0,
            "demo took {:?}",
            start.elapsed()
        );
    }
}
