//! Learned update rules.
//!
//! Two small coordinate-wise architectures, one per problem family. Both
//! separate *what direction to move* from *how far to move*, and both act on
//! normalized quantities so the same weights transfer across problem scales:
//!
//! * **Quadratic rule**: a shared-weight per-coordinate MLP (a stack of 1x1
//!   convolutions) maps the channels `(d1, d2, d1 .* d2)` — normalized
//!   gradient, normalized momentum, and their product — to a direction
//!   `d^t`, while a separate scalar MLP maps `(log(1+||grad||),
//!   log(1+||dx||), log(1+loss), log(1+prev_loss))` to a step size
//!   `beta^t`. Update: `x^{t+1} = x^t + beta^t * d^t`.
//! * **Network-training rule**: a scalar MLP maps six features (gradient
//!   norm, momentum norm, loss difference, gradient/momentum alignment,
//!   max gradient coordinate, iteration counter) to four channel weights
//!   `w1..w4`; a per-coordinate MLP then maps the channels `(w1 * g .* d1,
//!   w2 * d1, w3 * d2, w4 * p .* d2)` — with learned preconditioners `g`,
//!   `p` — to a direction `u^t`. Update: `x^{t+1} = x^t + u^t / sqrt(t)`.
//!
//! No layer has a bias, so the all-zero weight vector yields the identity
//! update. Weight sharing across coordinates makes both rules equivariant
//! under coordinate permutations (for the network rule, jointly with its
//! preconditioners).

use super::{AlgoState, BlockSpec, HyperLayout, Hyperparameters, PointEval};
use crate::vecmath::{dot, norm, normalize_or_zero};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Inputs with norm below this are treated as exactly zero when normalizing.
pub const NORM_EPS: f64 = 1e-12;

/// Widths of the per-coordinate direction MLP for quadratics.
pub const QUAD_DIR_WIDTHS: [usize; 7] = [3, 30, 30, 20, 10, 10, 1];
/// Widths of the scalar step-size MLP for quadratics.
pub const QUAD_STEP_WIDTHS: [usize; 7] = [4, 30, 30, 20, 10, 10, 1];
/// Zero-based layer indices followed by a ReLU (both quadratic blocks):
/// after the 2nd, 3rd, and 4th of the six layers.
pub const QUAD_RELU_AFTER: [usize; 3] = [1, 2, 3];

/// Widths of the scalar channel-weight MLP for network training.
pub const NN_WEIGHT_WIDTHS: [usize; 5] = [6, 30, 20, 10, 4];
/// Widths of the per-coordinate direction MLP for network training.
pub const NN_DIR_WIDTHS: [usize; 5] = [4, 20, 20, 20, 1];
/// ReLU after the 1st, 2nd, and 3rd of the four layers (both blocks).
pub const NN_RELU_AFTER: [usize; 3] = [0, 1, 2];

/// Forward pass of a bias-free MLP applied independently to each packed
/// column of `input` with shared weights. `weights[l]` is row-major
/// `widths[l+1] x widths[l]`; ReLU follows the layers listed in
/// `relu_after`.
pub fn batched_mlp(
    widths: &[usize],
    relu_after: &[usize],
    weights: &[&[f64]],
    input: &[f64],
) -> Vec<f64> {
    assert_eq!(weights.len(), widths.len() - 1, "one weight block per layer");
    assert_eq!(
        input.len() % widths[0],
        0,
        "input length {} not a multiple of the input width {}",
        input.len(),
        widths[0]
    );
    let cols = input.len() / widths[0];
    let mut h = input.to_vec();
    for (l, w) in weights.iter().enumerate() {
        let (rows, inn) = (widths[l + 1], widths[l]);
        assert_eq!(w.len(), rows * inn, "layer {l} weight length");
        let mut out = vec![0.0; rows * cols];
        for c in 0..cols {
            let hcol = &h[c * inn..(c + 1) * inn];
            for o in 0..rows {
                let wrow = &w[o * inn..(o + 1) * inn];
                let mut acc = 0.0;
                for i in 0..inn {
                    acc += wrow[i] * hcol[i];
                }
                out[c * rows + o] = acc;
            }
        }
        if relu_after.contains(&l) {
            for v in &mut out {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        h = out;
    }
    h
}

fn mlp_blocks(prefix: &str, widths: &[usize]) -> Vec<BlockSpec> {
    (0..widths.len() - 1)
        .map(|l| BlockSpec::new(format!("{prefix}{l}"), widths[l + 1], widths[l]))
        .collect()
}

fn he_init_into(flat: &mut Vec<f64>, blocks: &[BlockSpec], scale: f64, rng: &mut impl Rng) {
    for b in blocks {
        let sd = scale * (2.0 / b.cols as f64).sqrt();
        let normal = Normal::new(0.0, sd).expect("positive sd");
        for _ in 0..b.len() {
            flat.push(normal.sample(rng));
        }
    }
}

// ---------------------------------------------------------------------------
// Quadratic rule
// ---------------------------------------------------------------------------

/// Block layout of the quadratic rule: six direction layers then six
/// step-size layers.
pub fn quad_layout() -> HyperLayout {
    let mut blocks = mlp_blocks("dir_w", &QUAD_DIR_WIDTHS);
    blocks.extend(mlp_blocks("step_w", &QUAD_STEP_WIDTHS));
    HyperLayout { blocks }
}

/// Random initialization: zero-mean normal per layer with He-style standard
/// deviation `scale * sqrt(2 / fan_in)`.
pub fn init_quad_hyper(scale: f64, rng: &mut impl Rng) -> Hyperparameters {
    let layout = quad_layout();
    let mut flat = Vec::with_capacity(layout.total());
    he_init_into(&mut flat, &layout.blocks, scale, rng);
    Hyperparameters::new(layout, flat)
}

/// Features of the quadratic rule: per-coordinate channels `(d1, d2,
/// d1 .* d2)` packed per coordinate, and the four log-scaled scalars.
pub fn quad_features(state: &AlgoState, eval: &PointEval) -> (Vec<f64>, [f64; 4]) {
    let d = state.dim();
    let dx: Vec<f64> = (0..d).map(|i| state.x_curr[i] - state.x_prev[i]).collect();
    let gnorm = norm(&eval.grad);
    let dxnorm = norm(&dx);
    let d1 = normalize_or_zero(&eval.grad, NORM_EPS);
    let d2 = normalize_or_zero(&dx, NORM_EPS);
    let mut channels = Vec::with_capacity(3 * d);
    for i in 0..d {
        channels.push(d1[i]);
        channels.push(d2[i]);
        channels.push(d1[i] * d2[i]);
    }
    let scalars = [
        gnorm.ln_1p(),
        dxnorm.ln_1p(),
        eval.loss.ln_1p(),
        eval.prev_loss.ln_1p(),
    ];
    (channels, scalars)
}

fn block_slices<'a>(hyper: &'a Hyperparameters, start: usize, count: usize) -> Vec<&'a [f64]> {
    (start..start + count).map(|i| hyper.block(i)).collect()
}

/// Direction vector and scalar step size of the quadratic rule.
pub fn quad_direction_and_step(
    hyper: &Hyperparameters,
    channels: &[f64],
    scalars: &[f64; 4],
) -> (Vec<f64>, f64) {
    debug_assert_eq!(hyper.layout(), &quad_layout(), "hyper layout mismatch");
    let dir_w = block_slices(hyper, 0, 6);
    let step_w = block_slices(hyper, 6, 6);
    let dir = batched_mlp(&QUAD_DIR_WIDTHS, &QUAD_RELU_AFTER, &dir_w, channels);
    let beta = batched_mlp(&QUAD_STEP_WIDTHS, &QUAD_RELU_AFTER, &step_w, scalars)[0];
    (dir, beta)
}

/// One step of the learned quadratic rule:
/// `x^{t+1} = x^t + beta^t * d^t`.
pub fn learned_quad_step(state: &AlgoState, eval: &PointEval, hyper: &Hyperparameters) -> AlgoState {
    let (channels, scalars) = quad_features(state, eval);
    let (dir, beta) = quad_direction_and_step(hyper, &channels, &scalars);
    let x = (0..state.dim())
        .map(|i| state.x_curr[i] + beta * dir[i])
        .collect();
    state.advanced(x, Vec::new())
}

// ---------------------------------------------------------------------------
// Network-training rule
// ---------------------------------------------------------------------------

/// Block layout of the network-training rule for optimization dimension
/// `dim`: four channel-weight layers, four direction layers, and the two
/// learned preconditioners.
pub fn nn_layout(dim: usize) -> HyperLayout {
    let mut blocks = mlp_blocks("wb_w", &NN_WEIGHT_WIDTHS);
    blocks.extend(mlp_blocks("dir_w", &NN_DIR_WIDTHS));
    blocks.push(BlockSpec::new("precond_g", dim, 1));
    blocks.push(BlockSpec::new("precond_m", dim, 1));
    HyperLayout { blocks }
}

/// He-style initialization for the MLP layers; preconditioners start at the
/// identity (all ones).
pub fn init_nn_hyper(dim: usize, scale: f64, rng: &mut impl Rng) -> Hyperparameters {
    let layout = nn_layout(dim);
    let mut flat = Vec::with_capacity(layout.total());
    he_init_into(&mut flat, &layout.blocks[..8], scale, rng);
    flat.extend(std::iter::repeat(1.0).take(2 * dim));
    Hyperparameters::new(layout, flat)
}

/// Features of the network-training rule: six scalars plus the normalized
/// gradient and momentum directions.
pub fn nn_features(state: &AlgoState, eval: &PointEval) -> ([f64; 6], Vec<f64>, Vec<f64>) {
    let d = state.dim();
    let dx: Vec<f64> = (0..d).map(|i| state.x_curr[i] - state.x_prev[i]).collect();
    let gnorm = norm(&eval.grad);
    let dxnorm = norm(&dx);
    let d1 = normalize_or_zero(&eval.grad, NORM_EPS);
    let d2 = normalize_or_zero(&dx, NORM_EPS);
    let gmax = eval.grad.iter().fold(0.0f64, |acc, g| acc.max(g.abs()));
    let scalars = [
        gnorm.ln_1p(),
        dxnorm.ln_1p(),
        eval.loss - eval.prev_loss,
        dot(&d1, &d2),
        gmax,
        state.t as f64,
    ];
    (scalars, d1, d2)
}

/// One step of the learned network-training rule:
/// `x^{t+1} = x^t + u^t / sqrt(t)`.
pub fn learned_nn_step(state: &AlgoState, eval: &PointEval, hyper: &Hyperparameters) -> AlgoState {
    let d = state.dim();
    debug_assert_eq!(hyper.layout(), &nn_layout(d), "hyper layout mismatch");
    let (scalars, d1, d2) = nn_features(state, eval);
    let wb = block_slices(hyper, 0, 4);
    let db = block_slices(hyper, 4, 4);
    let g = hyper.block(8);
    let p = hyper.block(9);

    let w = batched_mlp(&NN_WEIGHT_WIDTHS, &NN_RELU_AFTER, &wb, &scalars);
    let mut channels = Vec::with_capacity(4 * d);
    for i in 0..d {
        channels.push(w[0] * g[i] * d1[i]);
        channels.push(w[1] * d1[i]);
        channels.push(w[2] * d2[i]);
        channels.push(w[3] * p[i] * d2[i]);
    }
    let u = batched_mlp(&NN_DIR_WIDTHS, &NN_RELU_AFTER, &db, &channels);
    let damp = (state.t as f64).sqrt();
    let x = (0..d).map(|i| state.x_curr[i] + u[i] / damp).collect();
    state.advanced(x, Vec::new())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    #[test]
    fn parameter_counts_are_frozen() {
        // Direction: 3*30 + 30*30 + 30*20 + 20*10 + 10*10 + 10*1 = 1900.
        // Step: 4*30 + 30*30 + 30*20 + 20*10 + 10*10 + 10*1 = 1930.
        assert_eq!(quad_layout().total(), 3830);
        // Weights: 6*30 + 30*20 + 20*10 + 10*4 = 1020.
        // Direction: 4*20 + 20*20 + 20*20 + 20*1 = 900. Preconditioners: 2d.
        assert_eq!(nn_layout(351).total(), 1020 + 900 + 702);
        assert_eq!(nn_layout(10).total(), 1940);
    }

    #[test]
    fn batched_mlp_matches_hand_matvec() {
        // Single layer 2 -> 2, two columns.
        let w = [1.0, 2.0, -3.0, 0.5];
        let input = [1.0, 1.0, 2.0, -1.0];
        let out = batched_mlp(&[2, 2], &[], &[&w], &input);
        assert_eq!(out, vec![3.0, -2.5, 0.0, -6.5]);
    }

    #[test]
    fn relu_placement_is_after_the_listed_layers() {
        // Chain 1 -> 1 -> 1 with weights -1 then 1.
        let w1 = [-1.0];
        let w2 = [1.0];
        // ReLU after layer 0 kills the negative intermediate.
        let out = batched_mlp(&[1, 1, 1], &[0], &[&w1, &w2], &[1.0]);
        assert_eq!(out, vec![0.0]);
        // ReLU after layer 1 clamps only the final value.
        let out = batched_mlp(&[1, 1, 1], &[1], &[&w1, &w2], &[1.0]);
        assert_eq!(out, vec![0.0]);
        let out = batched_mlp(&[1, 1, 1], &[], &[&w1, &w2], &[1.0]);
        assert_eq!(out, vec![-1.0]);
    }

    fn sample_state_eval(dim: usize, seed: u64) -> (AlgoState, PointEval) {
        let mut rng = rng_for(seed, 77, 0);
        let x_curr: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x_prev: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let grad: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let state = AlgoState {
            t: 5,
            x_curr,
            x_prev,
            scratch: Vec::new(),
        };
        let eval = PointEval {
            loss: 1.7,
            grad,
            prev_loss: 2.4,
        };
        (state, eval)
    }

    #[test]
    fn zero_hyper_gives_identity_update() {
        let (state, eval) = sample_state_eval(6, 1);
        let hyper = Hyperparameters::zeros(quad_layout());
        let next = learned_quad_step(&state, &eval, &hyper);
        assert_eq!(next.x_curr, state.x_curr);

        let hyper = Hyperparameters::zeros(nn_layout(6));
        let next = learned_nn_step(&state, &eval, &hyper);
        assert_eq!(next.x_curr, state.x_curr);
    }

    #[test]
    fn quad_features_match_hand_values() {
        let state = AlgoState {
            t: 1,
            x_curr: vec![1.0, 2.0],
            x_prev: vec![1.0, 2.0],
            scratch: Vec::new(),
        };
        let eval = PointEval {
            loss: std::f64::consts::E - 1.0,
            grad: vec![3.0, 4.0],
            prev_loss: 0.0,
        };
        let (channels, scalars) = quad_features(&state, &eval);
        // d1 = (0.6, 0.8), d2 = 0 (no movement yet), product 0.
        assert_eq!(channels, vec![0.6, 0.0, 0.0, 0.8, 0.0, 0.0]);
        assert!((scalars[0] - 6.0f64.ln()).abs() < 1e-15);
        assert_eq!(scalars[1], 0.0);
        assert!((scalars[2] - 1.0).abs() < 1e-15, "log(1 + (e-1)) = 1");
        assert_eq!(scalars[3], 0.0);
    }

    #[test]
    fn nn_features_match_hand_values() {
        let state = AlgoState {
            t: 9,
            x_curr: vec![1.0, 0.0],
            x_prev: vec![0.0, 0.0],
            scratch: Vec::new(),
        };
        let eval = PointEval {
            loss: 0.5,
            grad: vec![-2.0, 0.0],
            prev_loss: 0.75,
        };
        let (s, d1, d2) = nn_features(&state, &eval);
        assert!((s[0] - 3.0f64.ln()).abs() < 1e-15);
        assert!((s[1] - 2.0f64.ln()).abs() < 1e-15);
        assert!((s[2] + 0.25).abs() < 1e-15, "loss difference");
        assert!((s[3] + 1.0).abs() < 1e-15, "alignment of (-1,0) and (1,0)");
        assert!((s[4] - 2.0).abs() < 1e-15, "max abs gradient coordinate");
        assert_eq!(s[5], 9.0, "iteration counter");
        assert_eq!(d1, vec![-1.0, 0.0]);
        assert_eq!(d2, vec![1.0, 0.0]);
    }

    fn permuted(v: &[f64], perm: &[usize]) -> Vec<f64> {
        perm.iter().map(|&i| v[i]).collect()
    }

    #[test]
    fn quad_step_is_permutation_equivariant() {
        let dim = 7;
        let hyper = init_quad_hyper(1.0, &mut rng_for(3, 78, 0));
        let (state, eval) = sample_state_eval(dim, 2);
        let next = learned_quad_step(&state, &eval, &hyper);

        let perm = [3, 0, 6, 1, 5, 2, 4];
        let pstate = AlgoState {
            t: state.t,
            x_curr: permuted(&state.x_curr, &perm),
            x_prev: permuted(&state.x_prev, &perm),
            scratch: Vec::new(),
        };
        let peval = PointEval {
            loss: eval.loss,
            grad: permuted(&eval.grad, &perm),
            prev_loss: eval.prev_loss,
        };
        let pnext = learned_quad_step(&pstate, &peval, &hyper);
        for (k, &i) in perm.iter().enumerate() {
            assert!(
                (pnext.x_curr[k] - next.x_curr[i]).abs() < 1e-12,
                "coordinate {k}: {} vs {}",
                pnext.x_curr[k],
                next.x_curr[i]
            );
        }
    }

    #[test]
    fn nn_step_is_permutation_equivariant_with_preconditioners() {
        let dim = 5;
        let mut rng = rng_for(4, 78, 1);
        let mut hyper = init_nn_hyper(dim, 1.0, &mut rng);
        // Random (non-identity) preconditioners so equivariance is only true
        // when they are permuted along with the coordinates.
        let layout = hyper.layout().clone();
        {
            let flat = hyper.flat_mut();
            for i in layout.range(8).chain(layout.range(9)) {
                flat[i] = rng.random_range(0.5..1.5);
            }
        }
        let (state, eval) = sample_state_eval(dim, 5);
        let next = learned_nn_step(&state, &eval, &hyper);

        let perm = [2, 4, 0, 3, 1];
        let mut phyper = hyper.clone();
        {
            let src = hyper.flat().to_vec();
            let flat = phyper.flat_mut();
            let gr = layout.range(8);
            let mr = layout.range(9);
            for (k, &i) in perm.iter().enumerate() {
                flat[gr.start + k] = src[gr.start + i];
                flat[mr.start + k] = src[mr.start + i];
            }
        }
        let pstate = AlgoState {
            t: state.t,
            x_curr: permuted(&state.x_curr, &perm),
            x_prev: permuted(&state.x_prev, &perm),
            scratch: Vec::new(),
        };
        let peval = PointEval {
            loss: eval.loss,
            grad: permuted(&eval.grad, &perm),
            prev_loss: eval.prev_loss,
        };
        let pnext = learned_nn_step(&pstate, &peval, &phyper);
        for (k, &i) in perm.iter().enumerate() {
            assert!(
                (pnext.x_curr[k] - next.x_curr[i]).abs() < 1e-12,
                "coordinate {k}: {} vs {}",
                pnext.x_curr[k],
                next.x_curr[i]
            );
        }
    }

    #[test]
    fn learned_steps_are_bit_deterministic() {
        let (state, eval) = sample_state_eval(4, 9);
        let hyper = init_quad_hyper(1.0, &mut rng_for(8, 78, 2));
        let a = learned_quad_step(&state, &eval, &hyper);
        let b = learned_quad_step(&state, &eval, &hyper);
        for (x, y) in a.x_curr.iter().zip(&b.x_curr) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn nn_damping_shrinks_with_t() {
        // Same state except for t: the update at t = 16 is exactly half the
        // update at t = 4 (damping 1/sqrt(t)), since t enters the scalar
        // features only through s6, which we pin by zeroing the first
        // weight-block column... simpler: verify via two manual calls with
        // the weight block ignoring s6 (zero weights in that column).
        let dim = 3;
        let mut hyper = init_nn_hyper(dim, 1.0, &mut rng_for(10, 78, 3));
        let layout = hyper.layout().clone();
        {
            // Zero the s6 (iteration counter) input column of the first
            // weight-block layer so t only affects the damping.
            let r = layout.range(0); // wb_w0 is 30 x 6 row-major
            let flat = hyper.flat_mut();
            for row in 0..30 {
                flat[r.start + row * 6 + 5] = 0.0;
            }
        }
        let (mut state, eval) = sample_state_eval(dim, 11);
        state.t = 4;
        let a = learned_nn_step(&state, &eval, &hyper);
        state.t = 16;
        let b = learned_nn_step(&state, &eval, &hyper);
        for i in 0..dim {
            let da = a.x_curr[i] - state.x_curr[i];
            let db = b.x_curr[i] - state.x_curr[i];
            assert!((da - 2.0 * db).abs() < 1e-12, "damping ratio broken: {da} vs {db}");
        }
    }
}
