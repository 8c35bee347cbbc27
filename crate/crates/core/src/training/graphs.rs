//! One-step differentiable graphs for the learned rules.
//!
//! Training updates the rule's weights by gradient descent on the per-step
//! ratio `loss(x^{t+1}) / loss(x^t)`, differentiated with respect to the
//! weights *through one algorithm step*. The autodiff layer has no
//! machinery for unrolling, so each builder here lays out exactly one step:
//! the current iterate, its features, and the problem data enter as
//! constants, the weight blocks enter as leaves (in layout order), and the
//! scalar output is the ratio.
//!
//! The forward pass of each graph reproduces the corresponding plain step
//! function (`learned_quad_step` / `learned_nn_step`) followed by the
//! family's loss; for the quadratic rule the arithmetic is
//! operation-for-operation identical, so graph and plain step agree to the
//! bit. Callers are expected to gate on the ratio's indicator themselves
//! (no graph is built when `loss(x^t)` is below the convergence tolerance).

use crate::autodiff::{CompGraph, GraphError, NodeId};
use crate::optimizers::learned::{
    nn_features, nn_layout, quad_features, quad_layout, NN_DIR_WIDTHS, NN_RELU_AFTER,
    NN_WEIGHT_WIDTHS, QUAD_DIR_WIDTHS, QUAD_RELU_AFTER, QUAD_STEP_WIDTHS,
};
use crate::optimizers::{AlgoState, Hyperparameters, PointEval};
use crate::problems::{NetLayout, QuadraticInstance, RegressionInstance};

/// Chain of bias-free affine layers with ReLU after the listed layers;
/// the shared-weight in-graph counterpart of `batched_mlp`.
fn mlp_chain(
    g: &mut CompGraph,
    widths: &[usize],
    relu_after: &[usize],
    weights: &[NodeId],
    input: NodeId,
) -> Result<NodeId, GraphError> {
    debug_assert_eq!(weights.len(), widths.len() - 1);
    let mut h = input;
    for (l, &w) in weights.iter().enumerate() {
        h = g.affine(w, h, None, widths[l + 1], widths[l])?;
        if relu_after.contains(&l) {
            h = g.relu(h);
        }
    }
    Ok(h)
}

/// Declare one leaf per hyperparameter block, in layout order, so that the
/// graph's bindings are exactly the block slices of the flat weight vector.
fn layout_leaves(g: &mut CompGraph, layout: &crate::optimizers::HyperLayout) -> Vec<NodeId> {
    layout
        .blocks
        .iter()
        .map(|b| g.leaf(&b.name, b.len()))
        .collect()
}

/// Ratio graph for the quadratic rule: one learned step from the current
/// iterate, then `loss(x^{t+1}) / loss(x^t)` on the given instance. Leaves
/// are the twelve weight blocks of the quadratic layout.
pub fn quad_step_ratio_graph(
    inst: &QuadraticInstance,
    state: &AlgoState,
    eval: &PointEval,
) -> Result<CompGraph, GraphError> {
    let (channels, scalars) = quad_features(state, eval);
    let layout = quad_layout();
    let mut g = CompGraph::new();
    let leaves = layout_leaves(&mut g, &layout);

    let ch = g.constant(channels);
    let sc = g.constant(scalars.to_vec());
    let dir = mlp_chain(&mut g, &QUAD_DIR_WIDTHS, &QUAD_RELU_AFTER, &leaves[..6], ch)?;
    let beta = mlp_chain(&mut g, &QUAD_STEP_WIDTHS, &QUAD_RELU_AFTER, &leaves[6..], sc)?;

    let x = g.constant(state.x_curr.clone());
    let update = g.scale(beta, dir)?;
    let x_next = g.add(x, update)?;

    // 0.5 ||diag .* x_next - rhs||^2, mirroring the closed-form loss.
    let diag = g.constant(inst.diag.clone());
    let rhs = g.constant(inst.rhs.clone());
    let ax = g.mul(diag, x_next)?;
    let r = g.sub(ax, rhs)?;
    let sq = g.dot(r, r)?;
    let next_loss = g.scale_by(0.5, sq)?;

    let denom = g.scalar(eval.loss);
    let ratio = g.div(next_loss, denom)?;
    g.set_output(ratio)?;
    Ok(g)
}

/// Ratio graph for the network-training rule: one learned step on the flat
/// net parameters, then the regression MSE ratio. Leaves are the ten blocks
/// of the network-rule layout (two MLPs plus both preconditioners).
pub fn nn_step_ratio_graph(
    inst: &RegressionInstance,
    net: NetLayout,
    state: &AlgoState,
    eval: &PointEval,
) -> Result<CompGraph, GraphError> {
    let d = state.dim();
    let (scalars, d1, d2) = nn_features(state, eval);
    let layout = nn_layout(d);
    let mut g = CompGraph::new();
    let leaves = layout_leaves(&mut g, &layout);
    let (wb, db) = (&leaves[..4], &leaves[4..8]);
    let (pre_g, pre_m) = (leaves[8], leaves[9]);

    // Scalar MLP -> four channel weights.
    let sc = g.constant(scalars.to_vec());
    let w = mlp_chain(&mut g, &NN_WEIGHT_WIDTHS, &NN_RELU_AFTER, wb, sc)?;

    // Per-coordinate channels (w1 g.*d1, w2 d1, w3 d2, w4 m.*d2).
    let d1c = g.constant(d1);
    let d2c = g.constant(d2);
    let gd1 = g.mul(pre_g, d1c)?;
    let md2 = g.mul(pre_m, d2c)?;
    let mut chans = Vec::with_capacity(4);
    for (k, base) in [gd1, d1c, d2c, md2].into_iter().enumerate() {
        let wk = g.slice(w, k, 1)?;
        chans.push(g.scale(wk, base)?);
    }
    let packed = g.interleave(&chans)?;
    let u = mlp_chain(&mut g, &NN_DIR_WIDTHS, &NN_RELU_AFTER, db, packed)?;

    let x = g.constant(state.x_curr.clone());
    let damped = g.scale_by(1.0 / (state.t as f64).sqrt(), u)?;
    let x_next = g.add(x, damped)?;

    // Regression forward at x_next, mirroring the objective graph.
    let k = inst.k();
    let [w1r, b1r, w2r, b2r] = net.block_ranges();
    let w1 = g.slice(x_next, w1r.start, w1r.len())?;
    let b1 = g.slice(x_next, b1r.start, b1r.len())?;
    let w2 = g.slice(x_next, w2r.start, w2r.len())?;
    let b2 = g.slice(x_next, b2r.start, b2r.len())?;
    let mut phi = Vec::with_capacity(net.input * k);
    for &xv in &inst.xs {
        phi.extend(net.features(xv));
    }
    let phi = g.constant(phi);
    let ys = g.constant(inst.ys.clone());
    let pre = g.affine(w1, phi, Some(b1), net.hidden, net.input)?;
    let act = g.relu(pre);
    let preds = g.affine(w2, act, Some(b2), 1, net.hidden)?;
    let resid = g.sub(preds, ys)?;
    let sq = g.dot(resid, resid)?;
    let next_loss = g.scale_by(1.0 / k as f64, sq)?;

    let denom = g.scalar(eval.loss);
    let ratio = g.div(next_loss, denom)?;
    g.set_output(ratio)?;
    Ok(g)
}

fn block_bindings(hyper: &Hyperparameters) -> Vec<&[f64]> {
    (0..hyper.layout().blocks.len())
        .map(|i| hyper.block(i))
        .collect()
}

fn flatten_grads(grads: &[Vec<f64>], total: usize) -> Vec<f64> {
    let mut flat = Vec::with_capacity(total);
    for block in grads {
        flat.extend_from_slice(block);
    }
    flat
}

/// Ratio value and its flat gradient with respect to the quadratic-rule
/// weights, at the given state.
pub fn quad_ratio_gradient(
    inst: &QuadraticInstance,
    state: &AlgoState,
    eval: &PointEval,
    hyper: &Hyperparameters,
) -> Result<(f64, Vec<f64>), GraphError> {
    let g = quad_step_ratio_graph(inst, state, eval)?;
    let res = g.gradient(&block_bindings(hyper))?;
    Ok((res.value, flatten_grads(&res.grads, hyper.flat().len())))
}

/// Ratio value and its flat gradient with respect to the network-rule
/// weights, at the given state.
pub fn nn_ratio_gradient(
    inst: &RegressionInstance,
    net: NetLayout,
    state: &AlgoState,
    eval: &PointEval,
    hyper: &Hyperparameters,
) -> Result<(f64, Vec<f64>), GraphError> {
    let g = nn_step_ratio_graph(inst, net, state, eval)?;
    let res = g.gradient(&block_bindings(hyper))?;
    Ok((res.value, flatten_grads(&res.grads, hyper.flat().len())))
}
