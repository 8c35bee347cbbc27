//! Classical baselines: heavy-ball with friction and Adam.

use super::{AlgoState, PointEval};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoeffError {
    #[error("curvature bounds must satisfy 0 < m <= L, got m={m}, L={l}")]
    BadCurvature { m: f64, l: f64 },
}

/// Heavy-ball step `x^{t+1} = x^t - b1 * grad + b2 * (x^t - x^{t-1})`.
pub fn hbf_step(state: &AlgoState, eval: &PointEval, beta1: f64, beta2: f64) -> AlgoState {
    let mut x = Vec::with_capacity(state.dim());
    for i in 0..state.dim() {
        x.push(state.x_curr[i] - beta1 * eval.grad[i] + beta2 * (state.x_curr[i] - state.x_prev[i]));
    }
    state.advanced(x, Vec::new())
}

/// Worst-case-optimal heavy-ball coefficients for curvature bounds `[m, L]`:
/// `b1 = (2 / (sqrt(L) + sqrt(m)))^2`, `b2 = ((sqrt(L) - sqrt(m)) / (sqrt(L) + sqrt(m)))^2`.
pub fn hbf_optimal_coeffs(m: f64, l: f64) -> Result<(f64, f64), CoeffError> {
    if !(0.0 < m && m <= l && l.is_finite()) {
        return Err(CoeffError::BadCurvature { m, l });
    }
    let (sm, sl) = (m.sqrt(), l.sqrt());
    let beta1 = (2.0 / (sl + sm)).powi(2);
    let beta2 = ((sl - sm) / (sl + sm)).powi(2);
    Ok((beta1, beta2))
}

/// Adam settings; defaults are the common ones with the step size used by
/// the network-training baseline.
#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub kappa: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            kappa: 0.008,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam step. The first and second moment estimates live
/// in `state.scratch` (initialized to zero on the first step); the update is
/// `x - kappa * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_step(state: &AlgoState, eval: &PointEval, params: &AdamParams) -> AlgoState {
    let d = state.dim();
    let (mut m, mut v) = if state.scratch.len() == 2 {
        (state.scratch[0].clone(), state.scratch[1].clone())
    } else {
        (vec![0.0; d], vec![0.0; d])
    };
    let t = state.t as i32;
    let bc1 = 1.0 - params.beta1.powi(t);
    let bc2 = 1.0 - params.beta2.powi(t);
    let mut x = Vec::with_capacity(d);
    for i in 0..d {
        let g = eval.grad[i];
        m[i] = params.beta1 * m[i] + (1.0 - params.beta1) * g;
        v[i] = params.beta2 * v[i] + (1.0 - params.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        x.push(state.x_curr[i] - params.kappa * m_hat / (v_hat.sqrt() + params.eps));
    }
    state.advanced(x, vec![m, v])
}
