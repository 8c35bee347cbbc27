//! Sampled problem families.
//!
//! Two families are supported:
//!
//! * **Diagonal quadratics** `f(x) = 0.5 ||A x - b||^2` where `A` is diagonal
//!   with entries ramping linearly from `sqrt(m)` to `sqrt(L)`, so the
//!   Hessian `A^T A` has eigenvalues spanning `[m, L]`. Sampling draws the
//!   curvature bounds uniformly from configured ranges and the right-hand
//!   side from an isotropic Gaussian.
//! * **Two-layer ReLU regression**: fit a `5 -> hidden -> 1` network with the
//!   polynomial feature map `x -> (x, x^2, ..., x^5)` to `k` noisy samples of
//!   a random degree-5 polynomial, under mean squared error. The optimization
//!   variable is the flattened parameter vector `(w1, b1, w2, b2)`.
//!
//! Both families expose `(loss, gradient)` evaluation — closed form for
//! quadratics, reverse-mode autodiff for the network — and serialize to a
//! versioned JSON problem-set file used for train/validation/test splits.

use crate::autodiff::{CompGraph, GraphError};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Problem-set schema version written to and checked from JSON files.
pub const PROBLEM_SET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("invalid curvature config: require 0 < m_lo <= m_hi < l_lo <= l_hi, got m=[{m_lo}, {m_hi}], L=[{l_lo}, {l_hi}]")]
    CurvatureRange {
        m_lo: f64,
        m_hi: f64,
        l_lo: f64,
        l_hi: f64,
    },
    #[error("invalid family config: {0}")]
    Config(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("problem set version {got} unsupported (expected {expected})")]
    Version { got: u32, expected: u32 },
    #[error("duplicate instance id {0} in problem set")]
    DuplicateId(u64),
    #[error("graph construction failed: {0}")]
    Graph(#[from] GraphError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("json error on {path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
}

/// Problem family tag, also used by the CLI and experiment specs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Quadratic,
    NnRegression,
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Family::Quadratic => write!(f, "quadratic"),
            Family::NnRegression => write!(f, "nn-regression"),
        }
    }
}

/// Anything a rollout can optimize: a dimension and a joint loss/gradient
/// evaluation at a point.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    /// Returns `(loss, gradient)` at `x`. Implementations may return
    /// non-finite values on overflow; rollouts treat those as divergence.
    fn loss_grad(&self, x: &[f64]) -> (f64, Vec<f64>);
}

// ---------------------------------------------------------------------------
// Diagonal quadratics
// ---------------------------------------------------------------------------

/// One diagonal quadratic `0.5 ||A x - b||^2`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuadraticInstance {
    pub id: u64,
    /// Diagonal of `A`: strictly increasing, inside `[sqrt(m), sqrt(L)]`.
    pub diag: Vec<f64>,
    /// Right-hand side `b`.
    pub rhs: Vec<f64>,
    /// Lower curvature bound of the Hessian `A^T A`.
    pub m: f64,
    /// Upper curvature bound of the Hessian `A^T A`.
    pub l: f64,
    /// Unique minimizer `A^{-1} b`.
    pub minimizer: Vec<f64>,
}

impl QuadraticInstance {
    pub fn dim(&self) -> usize {
        self.diag.len()
    }
}

impl Objective for QuadraticInstance {
    fn dim(&self) -> usize {
        self.diag.len()
    }

    fn loss_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        quadratic_loss_grad(self, x)
    }
}

/// Sampling ranges for the quadratic family.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuadraticFamilyConfig {
    pub dim: usize,
    /// Range for the lower curvature bound `m`.
    pub m_range: (f64, f64),
    /// Range for the upper curvature bound `L`.
    pub l_range: (f64, f64),
    /// Standard deviation of the Gaussian right-hand side.
    pub rhs_scale: f64,
}

impl Default for QuadraticFamilyConfig {
    fn default() -> Self {
        Self {
            dim: 20,
            m_range: (0.05, 0.5),
            l_range: (50.0, 500.0),
            rhs_scale: 1.0,
        }
    }
}

impl QuadraticFamilyConfig {
    pub fn validate(&self) -> Result<(), ProblemError> {
        let (m_lo, m_hi) = self.m_range;
        let (l_lo, l_hi) = self.l_range;
        if !(0.0 < m_lo && m_lo <= m_hi && m_hi < l_lo && l_lo <= l_hi) {
            return Err(ProblemError::CurvatureRange {
                m_lo,
                m_hi,
                l_lo,
                l_hi,
            });
        }
        if self.dim == 0 {
            return Err(ProblemError::Config("dimension must be positive".into()));
        }
        if !(self.rhs_scale > 0.0 && self.rhs_scale.is_finite()) {
            return Err(ProblemError::Config(format!(
                "rhs_scale must be positive and finite, got {}",
                self.rhs_scale
            )));
        }
        Ok(())
    }
}

/// Build the diagonal for given curvature bounds: entry `i` (1-based) is
/// `sqrt(m) + i (sqrt(L) - sqrt(m)) / d`, so the last entry is exactly
/// `sqrt(L)` and all entries sit in `(sqrt(m), sqrt(L)]`.
pub fn quadratic_diag(dim: usize, m: f64, l: f64) -> Vec<f64> {
    let (sm, sl) = (m.sqrt(), l.sqrt());
    (1..=dim)
        .map(|i| sm + (i as f64) * (sl - sm) / (dim as f64))
        .collect()
}

/// Draw one quadratic instance: `m`, `L` uniform from their ranges, `b`
/// Gaussian with the configured scale.
pub fn sample_quadratic(
    id: u64,
    config: &QuadraticFamilyConfig,
    rng: &mut impl Rng,
) -> Result<QuadraticInstance, ProblemError> {
    config.validate()?;
    let m = sample_uniform(config.m_range, rng);
    let l = sample_uniform(config.l_range, rng);
    let diag = quadratic_diag(config.dim, m, l);
    let normal = Normal::new(0.0, config.rhs_scale).expect("validated scale");
    let rhs: Vec<f64> = (0..config.dim).map(|_| normal.sample(rng)).collect();
    let minimizer: Vec<f64> = rhs.iter().zip(&diag).map(|(b, a)| b / a).collect();
    Ok(QuadraticInstance {
        id,
        diag,
        rhs,
        m,
        l,
        minimizer,
    })
}

fn sample_uniform(range: (f64, f64), rng: &mut impl Rng) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        Uniform::new(range.0, range.1)
            .expect("validated range")
            .sample(rng)
    }
}

/// Loss `0.5 ||A x - b||^2` and gradient `A^T (A x - b)` in closed form.
pub fn quadratic_loss_grad(inst: &QuadraticInstance, x: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(
        x.len(),
        inst.diag.len(),
        "quadratic_loss_grad: x has length {}, instance dimension {}",
        x.len(),
        inst.diag.len()
    );
    let mut loss = 0.0;
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let r = inst.diag[i] * x[i] - inst.rhs[i];
        loss += 0.5 * r * r;
        grad[i] = inst.diag[i] * r;
    }
    (loss, grad)
}

// ---------------------------------------------------------------------------
// Two-layer ReLU regression
// ---------------------------------------------------------------------------

/// Dimensions of the regression network. The parameter vector is the
/// concatenation `(w1, b1, w2, b2)` with `w1` stored row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetLayout {
    /// Input features; also the top polynomial degree of the feature map.
    pub input: usize,
    pub hidden: usize,
}

impl Default for NetLayout {
    fn default() -> Self {
        Self {
            input: 5,
            hidden: 50,
        }
    }
}

impl NetLayout {
    pub fn w1_len(&self) -> usize {
        self.hidden * self.input
    }
    pub fn b1_len(&self) -> usize {
        self.hidden
    }
    pub fn w2_len(&self) -> usize {
        self.hidden
    }
    pub fn b2_len(&self) -> usize {
        1
    }
    /// Total parameter count; 351 for the default 5 -> 50 -> 1 layout.
    pub fn total(&self) -> usize {
        self.w1_len() + self.b1_len() + self.w2_len() + self.b2_len()
    }
    /// Offsets of the four blocks inside the flat parameter vector.
    pub fn block_ranges(&self) -> [std::ops::Range<usize>; 4] {
        let w1 = 0..self.w1_len();
        let b1 = w1.end..w1.end + self.b1_len();
        let w2 = b1.end..b1.end + self.w2_len();
        let b2 = w2.end..w2.end + self.b2_len();
        [w1, b1, w2, b2]
    }
    /// Polynomial feature map `x -> (x, x^2, ..., x^input)`.
    pub fn features(&self, x: f64) -> Vec<f64> {
        let mut phi = Vec::with_capacity(self.input);
        let mut p = 1.0;
        for _ in 0..self.input {
            p *= x;
            phi.push(p);
        }
        phi
    }
}

/// One regression fit: `k` noisy samples of a random polynomial.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressionInstance {
    pub id: u64,
    /// Sample locations.
    pub xs: Vec<f64>,
    /// Noisy targets.
    pub ys: Vec<f64>,
    /// Coefficients `(c_0, ..., c_degree)` of the generating polynomial.
    pub coeffs: Vec<f64>,
}

impl RegressionInstance {
    pub fn k(&self) -> usize {
        self.xs.len()
    }
}

/// Sampling configuration for the regression family.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressionFamilyConfig {
    /// Number of data points per instance.
    pub k: usize,
    /// Degree of the generating polynomial.
    pub degree: usize,
    /// Coefficients drawn uniformly from `[-coeff_bound, coeff_bound]`.
    pub coeff_bound: f64,
    /// Sample locations drawn uniformly from `[-x_bound, x_bound]`.
    pub x_bound: f64,
    /// Standard deviation of the additive target noise.
    pub noise_sd: f64,
    pub layout: NetLayout,
}

impl Default for RegressionFamilyConfig {
    fn default() -> Self {
        Self {
            k: 50,
            degree: 5,
            coeff_bound: 5.0,
            x_bound: 2.0,
            noise_sd: 1.0,
            layout: NetLayout::default(),
        }
    }
}

impl RegressionFamilyConfig {
    pub fn validate(&self) -> Result<(), ProblemError> {
        if self.k == 0 {
            return Err(ProblemError::Config("k must be positive".into()));
        }
        if self.coeff_bound <= 0.0 || self.x_bound <= 0.0 || self.noise_sd < 0.0 {
            return Err(ProblemError::Config(format!(
                "bounds must be positive (coeff {}, x {}) and noise_sd non-negative ({})",
                self.coeff_bound, self.x_bound, self.noise_sd
            )));
        }
        if self.layout.input == 0 || self.layout.hidden == 0 {
            return Err(ProblemError::Config("layout dims must be positive".into()));
        }
        Ok(())
    }
}

/// Evaluate the generating polynomial `sum_j c_j x^j`.
pub fn poly_eval(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

/// Draw one regression instance.
pub fn sample_regression(
    id: u64,
    config: &RegressionFamilyConfig,
    rng: &mut impl Rng,
) -> Result<RegressionInstance, ProblemError> {
    config.validate()?;
    let coeff = Uniform::new(-config.coeff_bound, config.coeff_bound).expect("validated");
    let coeffs: Vec<f64> = (0..=config.degree).map(|_| coeff.sample(rng)).collect();
    let xdist = Uniform::new(-config.x_bound, config.x_bound).expect("validated");
    let xs: Vec<f64> = (0..config.k).map(|_| xdist.sample(rng)).collect();
    let noise = Normal::new(0.0, config.noise_sd).expect("validated");
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| poly_eval(&coeffs, x) + noise.sample(rng))
        .collect();
    Ok(RegressionInstance { id, xs, ys, coeffs })
}

/// Regression objective with the loss graph built once and reused; loss and
/// gradient come from reverse-mode autodiff on that graph.
pub struct RegressionObjective {
    pub inst: RegressionInstance,
    pub layout: NetLayout,
    graph: CompGraph,
}

impl RegressionObjective {
    pub fn new(inst: RegressionInstance, layout: NetLayout) -> Result<Self, ProblemError> {
        let graph = build_regression_graph(&inst, layout)?;
        Ok(Self {
            inst,
            layout,
            graph,
        })
    }

    fn split<'a>(&self, beta: &'a [f64]) -> [&'a [f64]; 4] {
        let [w1, b1, w2, b2] = self.layout.block_ranges();
        [&beta[w1], &beta[b1], &beta[w2], &beta[b2]]
    }

    pub fn loss(&self, beta: &[f64]) -> Result<f64, GraphError> {
        let [w1, b1, w2, b2] = self.split(beta);
        self.graph.evaluate(&[w1, b1, w2, b2])
    }

    /// Loss and flat gradient over `(w1, b1, w2, b2)`.
    pub fn loss_grad_checked(&self, beta: &[f64]) -> Result<(f64, Vec<f64>), GraphError> {
        let [w1, b1, w2, b2] = self.split(beta);
        let res = self.graph.gradient(&[w1, b1, w2, b2])?;
        let mut grad = Vec::with_capacity(self.layout.total());
        for g in &res.grads {
            grad.extend_from_slice(g);
        }
        Ok((res.value, grad))
    }
}

impl Objective for RegressionObjective {
    fn dim(&self) -> usize {
        self.layout.total()
    }

    fn loss_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        match self.loss_grad_checked(x) {
            Ok(pair) => pair,
            // Overflow inside the net surfaces as a non-finite evaluation;
            // report it as such and let the rollout flag divergence.
            Err(_) => (f64::NAN, vec![f64::NAN; self.dim()]),
        }
    }
}

/// Mean-squared-error graph of the network over all data points, with leaves
/// `(w1, b1, w2, b2)` and the per-point features baked in as constants.
fn build_regression_graph(
    inst: &RegressionInstance,
    layout: NetLayout,
) -> Result<CompGraph, ProblemError> {
    let k = inst.k();
    let mut g = CompGraph::new();
    let w1 = g.leaf("w1", layout.w1_len());
    let b1 = g.leaf("b1", layout.b1_len());
    let w2 = g.leaf("w2", layout.w2_len());
    let b2 = g.leaf("b2", layout.b2_len());

    let mut phi = Vec::with_capacity(layout.input * k);
    for &x in &inst.xs {
        phi.extend(layout.features(x));
    }
    let phi = g.constant(phi);
    let ys = g.constant(inst.ys.clone());

    let pre = g.affine(w1, phi, Some(b1), layout.hidden, layout.input)?;
    let act = g.relu(pre);
    let preds = g.affine(w2, act, Some(b2), 1, layout.hidden)?;
    let resid = g.sub(preds, ys)?;
    let sq = g.dot(resid, resid)?;
    let mse = g.scale_by(1.0 / k as f64, sq)?;
    g.set_output(mse)?;
    Ok(g)
}

/// MSE loss and gradient of the regression network at the flat parameter
/// vector `beta`, via autodiff.
pub fn regression_loss_grad(
    inst: &RegressionInstance,
    layout: NetLayout,
    beta: &[f64],
) -> Result<(f64, Vec<f64>), ProblemError> {
    if beta.len() != layout.total() {
        return Err(ProblemError::Dimension {
            expected: layout.total(),
            got: beta.len(),
        });
    }
    let obj = RegressionObjective::new(inst.clone(), layout)?;
    Ok(obj.loss_grad_checked(beta)?)
}

// ---------------------------------------------------------------------------
// Problem-set files
// ---------------------------------------------------------------------------

/// A serializable set of instances from one family.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum ProblemSet {
    Quadratic {
        version: u32,
        instances: Vec<QuadraticInstance>,
    },
    NnRegression {
        version: u32,
        instances: Vec<RegressionInstance>,
        layout: NetLayout,
    },
}

impl ProblemSet {
    pub fn family(&self) -> Family {
        match self {
            ProblemSet::Quadratic { .. } => Family::Quadratic,
            ProblemSet::NnRegression { .. } => Family::NnRegression,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ProblemSet::Quadratic { instances, .. } => instances.len(),
            ProblemSet::NnRegression { instances, .. } => instances.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ids(&self) -> Vec<u64> {
        match self {
            ProblemSet::Quadratic { instances, .. } => instances.iter().map(|i| i.id).collect(),
            ProblemSet::NnRegression { instances, .. } => instances.iter().map(|i| i.id).collect(),
        }
    }

    fn validate(&self) -> Result<(), ProblemError> {
        let version = match self {
            ProblemSet::Quadratic { version, .. } => *version,
            ProblemSet::NnRegression { version, .. } => *version,
        };
        if version != PROBLEM_SET_VERSION {
            return Err(ProblemError::Version {
                got: version,
                expected: PROBLEM_SET_VERSION,
            });
        }
        let mut seen = std::collections::HashSet::new();
        for id in self.ids() {
            if !seen.insert(id) {
                return Err(ProblemError::DuplicateId(id));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), ProblemError> {
        self.validate()?;
        let text = serde_json::to_string_pretty(self).map_err(|source| ProblemError::Json {
            path: path.display().to_string(),
            source,
        })?;
        std::fs::write(path, text).map_err(|source| ProblemError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ProblemError> {
        let text = std::fs::read_to_string(path).map_err(|source| ProblemError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let set: ProblemSet = serde_json::from_str(&text).map_err(|source| ProblemError::Json {
            path: path.display().to_string(),
            source,
        })?;
        set.validate()?;
        Ok(set)
    }
}

/// Sample `count` quadratic instances with ids `first_id..first_id + count`.
pub fn sample_quadratic_set(
    first_id: u64,
    count: usize,
    config: &QuadraticFamilyConfig,
    rng: &mut impl Rng,
) -> Result<ProblemSet, ProblemError> {
    let mut instances = Vec::with_capacity(count);
    for i in 0..count {
        instances.push(sample_quadratic(first_id + i as u64, config, rng)?);
    }
    Ok(ProblemSet::Quadratic {
        version: PROBLEM_SET_VERSION,
        instances,
    })
}

/// Sample `count` regression instances with ids `first_id..first_id + count`.
pub fn sample_regression_set(
    first_id: u64,
    count: usize,
    config: &RegressionFamilyConfig,
    rng: &mut impl Rng,
) -> Result<ProblemSet, ProblemError> {
    let mut instances = Vec::with_capacity(count);
    for i in 0..count {
        instances.push(sample_regression(first_id + i as u64, config, rng)?);
    }
    Ok(ProblemSet::NnRegression {
        version: PROBLEM_SET_VERSION,
        instances,
        layout: config.layout,
    })
}
