//! Embedding table with hashed lookup and sum pooling.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;

/// Embedding table for sparse id features. Ids are hashed into the row range,
/// so out-of-vocabulary ids never fail; collisions are accepted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    weights: Matrix,
}

/// Sparse gradient for one table: touched row -> gradient row. Ordered so
/// optimizer updates run in a deterministic order.
pub type SparseGrad = BTreeMap<usize, Vec<f64>>;

/// Multiply-shift mix of a 64-bit id, reduced mod `rows`.
#[inline]
pub fn hash_id(id: u64, rows: usize) -> usize {
    let h = id.wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 17;
    (h % rows as u64) as usize
}

impl EmbeddingTable {
    /// `rows` is both the table size and the hashing modulus.
    pub fn new<R: Rng + ?Sized>(rows: usize, dim: usize, rng: &mut R) -> Self {
        let scale = 1.0 / (dim as f64).sqrt();
        let mut weights = Matrix::zeros(rows, dim);
        for v in weights.as_mut_slice() {
            *v = rng.gen_range(-scale..scale);
        }
        EmbeddingTable { weights }
    }

    pub fn rows(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Matrix {
        &mut self.weights
    }

    /// Sum-pooled lookup. An empty id list yields the zero vector.
    pub fn lookup_sum(&self, ids: &[u64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for &id in ids {
            let row = self.weights.row(hash_id(id, self.rows()));
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    /// Accumulates the gradient of a sum-pooled lookup into `acc`.
    pub fn backward_into(&self, ids: &[u64], grad_out: &[f64], acc: &mut SparseGrad) {
        debug_assert_eq!(grad_out.len(), self.dim());
        for &id in ids {
            let r = hash_id(id, self.rows());
            let slot = acc.entry(r).or_insert_with(|| vec![0.0; self.dim()]);
            for (s, g) in slot.iter_mut().zip(grad_out) {
                *s += g;
            }
        }
    }
}
