//! Certification machinery: discrete measures over hyperparameter atoms,
//! the inverse moment map `phi_inverse`, discrete KL divergence, the Gibbs
//! posterior, and the high-probability lower bound on the probability that
//! a fresh problem's trajectory lands in the certified descent event.
//!
//! The bound has the shape
//!
//! ```text
//! rho[P{converged}] >= 1 - phi_inverse(lambda/N,
//!     sum_i rho_i * r_i + (KL(rho || prior) + log(G/eps)) / lambda)
//! ```
//!
//! where `r_i` is the empirical complement-risk of atom `i` over `N`
//! problems (the fraction of trajectories *outside* the event), `rho` is
//! the Gibbs posterior `rho_i ∝ prior_i * exp(-lambda * r_i)`, and the
//! `log(G/eps)` term pays a union bound over a grid of `G` candidate
//! `lambda` values so the certificate stays valid after picking the best
//! one. The bound holds with probability at least `1 - eps` over the draw
//! of the `N` problems; [`certify`] reports both the raw value and the
//! `[0, 1]`-clamped one.

use crate::conditions::ConditionReport;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PacBayesError {
    #[error("measure has {atoms} atoms but {weights} weights")]
    WeightShape { atoms: usize, weights: usize },
    #[error("weight {value} at index {index} is negative or non-finite")]
    BadWeight { index: usize, value: f64 },
    #[error("weights sum to {sum}, expected 1 within 1e-12")]
    NotNormalized { sum: f64 },
    #[error("a measure needs at least one atom")]
    EmptyMeasure,
    #[error("phi_inverse needs a positive scale, got {0}")]
    InvalidPhiScale(f64),
    #[error("invalid lambda {0}: must be finite and nonnegative")]
    InvalidLambda(f64),
    #[error("invalid confidence {0}: must lie in (0, 1)")]
    InvalidEpsilon(f64),
    #[error("lambda grid is empty")]
    EmptyGrid,
    #[error("expected {expected} per-atom risks, got {got}")]
    RiskCount { expected: usize, got: usize },
    #[error("risk {value} at index {index} is outside [0, 1]")]
    RiskOutOfRange { index: usize, value: f64 },
    #[error("dataset size must be at least 1")]
    EmptyDataset,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// A probability measure on finitely many hyperparameter atoms, identified
/// by id. Weights are validated at construction: nonnegative and summing
/// to 1 within `1e-12`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMeasure {
    atoms: Vec<u64>,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(atoms: Vec<u64>, weights: Vec<f64>) -> Result<Self, PacBayesError> {
        if atoms.is_empty() {
            return Err(PacBayesError::EmptyMeasure);
        }
        if atoms.len() != weights.len() {
            return Err(PacBayesError::WeightShape {
                atoms: atoms.len(),
                weights: weights.len(),
            });
        }
        for (index, &value) in weights.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(PacBayesError::BadWeight { index, value });
            }
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(PacBayesError::NotNormalized { sum });
        }
        Ok(Self { atoms, weights })
    }

    pub fn uniform(atoms: Vec<u64>) -> Result<Self, PacBayesError> {
        let n = atoms.len();
        if n == 0 {
            return Err(PacBayesError::EmptyMeasure);
        }
        // Exactly equal weights; the accumulated rounding in their sum
        // stays far inside the constructor's 1e-12 tolerance for any
        // realistic atom count, and unequal "repaired" weights would break
        // exact ties downstream.
        Self::new(atoms, vec![1.0 / n as f64; n])
    }

    pub fn atoms(&self) -> &[u64] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }
}

/// The map `p -> (1 - exp(-a p)) / (1 - exp(-a))` for scale `a > 0`.
///
/// Strictly increasing in `p`, fixing 0 and 1. Arguments above 1 are
/// allowed (the certificate clamps afterwards). Below `a = 1e-8` the
/// closed form loses precision to cancellation, so a second-order series
/// in `a` takes over; the two agree to better than `1e-10` across the
/// switchover.
pub fn phi_inverse(a: f64, p: f64) -> Result<f64, PacBayesError> {
    if !(a > 0.0) || !a.is_finite() {
        return Err(PacBayesError::InvalidPhiScale(a));
    }
    if a < 1e-8 {
        return Ok(p * (1.0 + a * (1.0 - p) / 2.0));
    }
    Ok((-a * p).exp_m1() / (-a).exp_m1())
}

/// `KL(rho || prior)` for discrete measures, matching atoms by id:
/// `sum_i rho_i log(rho_i / prior_i)`, with `0 log 0 = 0` and `+inf` as
/// soon as `rho` puts mass where the prior has none.
pub fn kl_discrete(rho: &DiscreteMeasure, prior: &DiscreteMeasure) -> f64 {
    let prior_of: HashMap<u64, f64> = prior
        .atoms
        .iter()
        .copied()
        .zip(prior.weights.iter().copied())
        .collect();
    let mut kl = 0.0;
    for (&atom, &r) in rho.atoms.iter().zip(&rho.weights) {
        if r == 0.0 {
            continue;
        }
        let p = prior_of.get(&atom).copied().unwrap_or(0.0);
        if p == 0.0 {
            return f64::INFINITY;
        }
        kl += r * (r / p).ln();
    }
    kl
}

/// Fraction of reports outside the event `A`. Needs at least one report.
pub fn empirical_risk(reports: &[ConditionReport]) -> f64 {
    assert!(!reports.is_empty(), "empirical risk over zero reports");
    let misses = reports.iter().filter(|r| !r.in_a).count();
    misses as f64 / reports.len() as f64
}

/// The Gibbs posterior `rho_i ∝ prior_i * exp(-lambda * r_i)`.
///
/// Risks are shifted by their minimum over the prior's support before
/// exponentiating, which changes nothing mathematically but keeps at least
/// one factor at 1 so the normalizer cannot underflow to zero.
pub fn gibbs_posterior(
    prior: &DiscreteMeasure,
    risks: &[f64],
    lambda: f64,
) -> Result<DiscreteMeasure, PacBayesError> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(PacBayesError::InvalidLambda(lambda));
    }
    if risks.len() != prior.len() {
        return Err(PacBayesError::RiskCount {
            expected: prior.len(),
            got: risks.len(),
        });
    }
    for (index, &value) in risks.iter().enumerate() {
        if !value.is_finite() {
            return Err(PacBayesError::RiskOutOfRange { index, value });
        }
    }
    if lambda == 0.0 {
        return Ok(prior.clone());
    }
    let shift = prior
        .weights
        .iter()
        .zip(risks)
        .filter(|(&w, _)| w > 0.0)
        .map(|(_, &r)| r)
        .fold(f64::INFINITY, f64::min);
    let unnormalized: Vec<f64> = prior
        .weights
        .iter()
        .zip(risks)
        .map(|(&w, &r)| {
            // Skip the exponential off-support: its argument may be
            // positive there (risk below the supported minimum), and
            // 0 * inf would poison the weight with NaN.
            if w == 0.0 {
                0.0
            } else {
                w * (-lambda * (r - shift)).exp()
            }
        })
        .collect();
    let z: f64 = unnormalized.iter().sum();
    debug_assert!(z > 0.0, "normalizer vanished despite risk shifting");
    DiscreteMeasure::new(
        prior.atoms.clone(),
        unnormalized.iter().map(|&w| w / z).collect(),
    )
}

/// Atom of maximal posterior weight; ties go to the lowest index.
pub fn select_final_hyper(posterior: &DiscreteMeasure) -> u64 {
    let mut best = 0;
    for i in 1..posterior.len() {
        if posterior.weights[i] > posterior.weights[best] {
            best = i;
        }
    }
    posterior.atoms[best]
}

/// The standard grid of candidate `lambda` values around the dataset size:
/// `{N/4, N/2, N, 2N, 4N}`.
pub fn default_lambda_grid(n: usize) -> Vec<f64> {
    let n = n as f64;
    vec![n / 4.0, n / 2.0, n, 2.0 * n, 4.0 * n]
}

/// Everything needed to audit a certification run. `bound` is
/// `bound_raw.clamp(0, 1)`; a vacuous certificate reports 0 but keeps the
/// raw value for diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub prior: DiscreteMeasure,
    pub posterior: DiscreteMeasure,
    /// Per-atom empirical complement-risks, in prior atom order.
    pub risks: Vec<f64>,
    pub lambda_grid: Vec<f64>,
    /// Grid entry that produced the best bound.
    pub lambda: f64,
    pub epsilon: f64,
    /// Dataset size behind the empirical risks.
    pub n: usize,
    pub kl: f64,
    /// `sum_i rho_i r_i` for the winning posterior.
    pub empirical_term: f64,
    pub bound_raw: f64,
    pub bound: f64,
}

impl Certificate {
    pub fn save(&self, path: &Path) -> Result<(), PacBayesError> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PacBayesError> {
        let json = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&json)?)
    }
}

/// Evaluate the bound for every `lambda` in the grid — Gibbs posterior,
/// KL, empirical term, confidence budget `epsilon / grid_len` each — and
/// return the certificate of the best (largest raw) bound. Earlier grid
/// entries win ties.
pub fn certify(
    prior: &DiscreteMeasure,
    risks: &[f64],
    lambda_grid: &[f64],
    epsilon: f64,
    n: usize,
) -> Result<Certificate, PacBayesError> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(PacBayesError::InvalidEpsilon(epsilon));
    }
    if lambda_grid.is_empty() {
        return Err(PacBayesError::EmptyGrid);
    }
    if n == 0 {
        return Err(PacBayesError::EmptyDataset);
    }
    for (index, &value) in risks.iter().enumerate() {
        if !(0.0..=1.0).contains(&value) {
            return Err(PacBayesError::RiskOutOfRange { index, value });
        }
    }
    for &lambda in lambda_grid {
        if !lambda.is_finite() || lambda <= 0.0 {
            return Err(PacBayesError::InvalidLambda(lambda));
        }
    }

    let grid_len = lambda_grid.len() as f64;
    // log(G / eps): the confidence budget after the union bound.
    let confidence = (grid_len / epsilon).ln();
    let mut best: Option<Certificate> = None;
    for &lambda in lambda_grid {
        let posterior = gibbs_posterior(prior, risks, lambda)?;
        let kl = kl_discrete(&posterior, prior);
        let empirical_term: f64 = posterior
            .weights()
            .iter()
            .zip(risks)
            .map(|(&w, &r)| w * r)
            .sum();
        let arg = empirical_term + (kl + confidence) / lambda;
        let bound_raw = 1.0 - phi_inverse(lambda / n as f64, arg)?;
        if best.as_ref().is_none_or(|b| bound_raw > b.bound_raw) {
            best = Some(Certificate {
                prior: prior.clone(),
                posterior,
                risks: risks.to_vec(),
                lambda_grid: lambda_grid.to_vec(),
                lambda,
                epsilon,
                n,
                kl,
                empirical_term,
                bound_raw,
                bound: bound_raw.clamp(0.0, 1.0),
            });
        }
    }
    Ok(best.expect("nonempty grid"))
}
