//! Minimal dense numeric kernel.
//!
//! Training math throughout the crate is 64-bit and single-threaded per
//! trainer; every backward pass here is written explicitly (no autodiff
//! graph) so it can be validated against [`gradcheck`].

pub mod embedding;
pub mod gradcheck;
pub mod matrix;
pub mod mlp;
pub mod optimizer;

pub use embedding::EmbeddingTable;
pub use gradcheck::{finite_diff_check, finite_diff_check_sampled, GradCheckReport};
pub use matrix::Matrix;
pub use mlp::{Activation, Mlp, MlpCache, MlpGrads};
pub use optimizer::{Optimizer, OptimizerKind};

/// Dense 64-bit vector. Length is the shape.
pub type Vector = Vec<f64>;

/// Inner product. Panics on length mismatch (programmer error on a hot path).
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot: length mismatch");
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    assert_eq!(x.len(), y.len(), "axpy: length mismatch");
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Squared L2 distance between two equal-length slices.
#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "sq_dist: length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax with max-subtraction. Input is consumed as logits.
pub fn softmax(logits: &[f64]) -> Vector {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vector = logits.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = out.iter().sum();
    for v in &mut out {
        *v /= z;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_sums_to_one() {
        let a = softmax(&[1.0, 2.0, 3.0]);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(a.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn softmax_handles_large_logits() {
        let a = softmax(&[1e6, 1e6 - 1.0]);
        assert!(a.iter().all(|x| x.is_finite()));
        assert!(a[0] > a[1]);
    }
}
