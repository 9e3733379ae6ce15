//! Hierarchical structured retrieval at desk scale.
//!
//! This crate jointly learns a hierarchical item index and a modular tower
//! scoring model, then serves top-k retrieval over the learned hierarchy at
//! sublinear scoring cost. Everything is built on a small explicit-gradient
//! numeric kernel (no autodiff framework), so every loss in the system can be
//! verified against central finite differences.
//!
//! Module map:
//!
//! - [`numerics`]: dense vectors/matrices, MLPs with hand-rolled backprop,
//!   embedding tables, SGD/Adagrad, and a finite-difference gradient checker.
//! - [`datagen`]: synthetic users/items/impressions with planted hierarchical
//!   cluster structure, dataset file I/O, and an item-churn stream.
//! - [`features`]: feature schema, tower input assembly, and inverted-index
//!   interaction features (I2IF).
//! - [`monn`]: the modular scoring model (user/item/interaction towers +
//!   over-arch) with multi-task and distillation losses.
//! - [`index`]: gradient-descent index learning (soft assignment, temperature
//!   schedule, balance regularizer, residual chain) plus k-means and EM
//!   baselines.
//! - [`hsnn`]: the layered model over the hierarchical index and the joint
//!   training loop (JOIM / SIL / EM modes).
//! - [`serving`]: model splitting, the inverted index over per-level cluster
//!   ids, layer-wise beam retrieval, budgeted cluster-queue retrieval, and
//!   MAC-cost accounting.
//! - [`eval`]: normalized entropy, recall@k, balance statistics, and the
//!   ablation grid harness.

pub mod artifact;
pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod features;
pub mod hsnn;
pub mod index;
pub mod monn;
pub mod numerics;
pub mod serving;

pub use error::{Error, Result};
