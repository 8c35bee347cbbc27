//! Dense vector helpers shared across the crate.
//!
//! Everything here is plain `&[f64]` arithmetic; problem dimensions stay in
//! the hundreds, so there is no reason to reach for anything heavier.

/// Euclidean inner product. Panics if lengths differ.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot: length mismatch {} vs {}", a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean norm.
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Euclidean distance between two vectors of equal length.
pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dist: length mismatch {} vs {}", a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `y += alpha * x`, in place.
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    assert_eq!(x.len(), y.len(), "axpy: length mismatch {} vs {}", x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `x / ||x||`, or the zero vector when `||x||` is below `eps`.
///
/// Update rules feed normalized gradients and displacements into learned
/// blocks; mapping near-zero inputs to exactly zero keeps those features
/// well-defined at initialization and at convergence.
pub fn normalize_or_zero(x: &[f64], eps: f64) -> Vec<f64> {
    let n = norm(x);
    if n < eps {
        vec![0.0; x.len()]
    } else {
        x.iter().map(|v| v / n).collect()
    }
}

/// True iff every entry is finite.
pub fn all_finite(x: &[f64]) -> bool {
    x.iter().all(|v| v.is_finite())
}
