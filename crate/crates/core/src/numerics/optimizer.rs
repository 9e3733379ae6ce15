//! SGD and Adagrad with slot-based accumulator state.
//!
//! A trainer walks its parameter tensors in a fixed order every step; the
//! optimizer assigns one state slot per tensor in call order. `begin_step`
//! resets the slot cursor. Changing the walk order between steps corrupts
//! Adagrad state, so trainers must keep it stable.

use serde::{Deserialize, Serialize};

use super::embedding::SparseGrad;
use super::matrix::Matrix;
use crate::{Error, Result};

const ADAGRAD_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adagrad,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    slots: Vec<Vec<f64>>,
    cursor: usize,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            slots: Vec::new(),
            cursor: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Resets the slot cursor; call once per training step before any update.
    pub fn begin_step(&mut self) {
        self.cursor = 0;
    }

    fn next_slot(&mut self, len: usize) -> Result<usize> {
        let idx = self.cursor;
        self.cursor += 1;
        if idx == self.slots.len() {
            self.slots.push(vec![0.0; len]);
        } else if self.slots[idx].len() != len {
            return Err(Error::dim("optimizer slot", self.slots[idx].len(), len));
        }
        Ok(idx)
    }

    /// Dense update: `p -= lr * g` (sgd) or the adagrad rule.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim("optimizer update", params.len(), grads.len()));
        }
        let slot = self.next_slot(params.len())?;
        let lr = self.lr;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adagrad => {
                let acc = &mut self.slots[slot];
                for ((p, g), a) in params.iter_mut().zip(grads).zip(acc.iter_mut()) {
                    *a += g * g;
                    *p -= lr * g / (*a + ADAGRAD_EPS).sqrt();
                }
            }
        }
        Ok(())
    }

    /// Sparse update over touched embedding rows only. The slot still covers
    /// the full table so adagrad accumulators persist per row.
    pub fn update_sparse(&mut self, table: &mut Matrix, grads: &SparseGrad) -> Result<()> {
        let (rows, cols) = (table.rows(), table.cols());
        let slot = self.next_slot(rows * cols)?;
        let lr = self.lr;
        for (&r, g) in grads {
            if r >= rows || g.len() != cols {
                return Err(Error::dim("optimizer sparse row", cols, g.len()));
            }
            let row = table.row_mut(r);
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, gv) in row.iter_mut().zip(g) {
                        *p -= lr * gv;
                    }
                }
                OptimizerKind::Adagrad => {
                    let acc = &mut self.slots[slot][r * cols..(r + 1) * cols];
                    for ((p, gv), a) in row.iter_mut().zip(g).zip(acc.iter_mut()) {
                        *a += gv * gv;
                        *p -= lr * gv / (*a + ADAGRAD_EPS).sqrt();
                    }
                }
            }
        }
        Ok(())
    }
}

/// Single-tensor convenience wrapper: one full optimizer step over `params`.
pub fn optimizer_step(opt: &mut Optimizer, params: &mut [f64], grads: &[f64]) -> Result<()> {
    opt.begin_step();
    opt.update(params, grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_definition() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1);
        let mut p = [1.0];
        optimizer_step(&mut opt, &mut p, &[1.0]).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adagrad] {
            let mut opt = Optimizer::new(kind, 0.5);
            let mut p = [1.0, -2.0];
            optimizer_step(&mut opt, &mut p, &[0.0, 0.0]).unwrap();
            assert_eq!(p, [1.0, -2.0]);
        }
    }

    #[test]
    fn adagrad_two_steps_direct_evaluation() {
        let mut opt = Optimizer::new(OptimizerKind::Adagrad, 1.0);
        let p0 = 3.0;
        let mut p = [p0];
        optimizer_step(&mut opt, &mut p, &[1.0]).unwrap();
        let after1 = p0 - 1.0 / (1.0f64 + ADAGRAD_EPS).sqrt();
        assert!((p[0] - after1).abs() < 1e-15);
        optimizer_step(&mut opt, &mut p, &[1.0]).unwrap();
        let after2 = after1 - 1.0 / (2.0f64 + ADAGRAD_EPS).sqrt();
        assert!((p[0] - after2).abs() < 1e-15);
    }

    #[test]
    fn adagrad_accumulators_are_nondecreasing() {
        let mut opt = Optimizer::new(OptimizerKind::Adagrad, 0.1);
        let mut p = [1.0, 2.0];
        optimizer_step(&mut opt, &mut p, &[0.5, -0.5]).unwrap();
        let acc1 = opt.slots[0].clone();
        optimizer_step(&mut opt, &mut p, &[0.1, 0.0]).unwrap();
        for (a1, a2) in acc1.iter().zip(&opt.slots[0]) {
            assert!(a2 >= a1);
            assert!(*a2 >= 0.0);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1);
        let mut p = [1.0];
        assert!(optimizer_step(&mut opt, &mut p, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn sparse_update_touches_only_listed_rows() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 1.0);
        let mut table = Matrix::zeros(3, 2);
        let mut g = SparseGrad::new();
        g.insert(1, vec![1.0, 2.0]);
        opt.begin_step();
        opt.update_sparse(&mut table, &g).unwrap();
        assert_eq!(table.row(0), &[0.0, 0.0]);
        assert_eq!(table.row(1), &[-1.0, -2.0]);
        assert_eq!(table.row(2), &[0.0, 0.0]);
    }
}
