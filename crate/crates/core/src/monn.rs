//! Modular scoring model: user/item/interaction towers feeding an over-arch
//! that emits per-task logits, plus the multi-task supervised loss and the
//! distillation loss.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::datagen::{ItemRecord, StreamEvent};
use crate::features::{FeatureSchema, I2ifIndex, TowerInput, TowerKind};
use crate::numerics::embedding::SparseGrad;
use crate::numerics::{dot, sigmoid, Activation, EmbeddingTable, Mlp, MlpCache, MlpGrads, Optimizer};
use crate::{Error, Result};

/// Probabilities are clamped to `[CLAMP, 1-CLAMP]` inside losses so log terms
/// stay finite; gradients are zero in the clamped region.
pub const PROB_CLAMP: f64 = 1e-7;

// ---------------------------------------------------------------------------
// Towers
// ---------------------------------------------------------------------------

/// Size specification for one tower network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TowerSpec {
    /// Count of output embeddings.
    pub num_embed: usize,
    /// Size of each output embedding.
    pub dim: usize,
    /// Hidden layer widths of the tower network.
    pub hidden: Vec<usize>,
    /// Embedding dim of each sparse feature table.
    pub sparse_embed_dim: usize,
}

impl TowerSpec {
    pub fn output_dim(&self) -> usize {
        self.num_embed * self.dim
    }
}

/// Embedding tables (one per sparse field) plus the tower network. Input is
/// `concat(dense, pooled sparse embeddings)` in schema order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tower {
    dense_dim: usize,
    tables: Vec<EmbeddingTable>,
    mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct TowerCache {
    ids: Vec<Vec<u64>>,
    mlp_cache: MlpCache,
}

#[derive(Debug, Clone)]
pub struct TowerGrads {
    pub tables: Vec<SparseGrad>,
    pub mlp: MlpGrads,
}

impl TowerGrads {
    pub fn zeros_like(t: &Tower) -> Self {
        TowerGrads {
            tables: t.tables.iter().map(|_| SparseGrad::new()).collect(),
            mlp: MlpGrads::zeros_like(&t.mlp),
        }
    }

    pub fn accumulate(&mut self, other: &TowerGrads) {
        for (mine, theirs) in self.tables.iter_mut().zip(&other.tables) {
            for (&row, g) in theirs {
                let slot = mine.entry(row).or_insert_with(|| vec![0.0; g.len()]);
                for (s, v) in slot.iter_mut().zip(g) {
                    *s += v;
                }
            }
        }
        self.mlp.accumulate(&other.mlp);
    }
}

impl Tower {
    /// `sparse_fields` come from the schema in declaration order.
    pub fn new<R: Rng + ?Sized>(
        dense_dim: usize,
        sparse_fields: &[(String, usize)],
        spec: &TowerSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let tables: Vec<EmbeddingTable> = sparse_fields
            .iter()
            .map(|(_, modulus)| EmbeddingTable::new(*modulus, spec.sparse_embed_dim, rng))
            .collect();
        let in_dim = dense_dim + tables.len() * spec.sparse_embed_dim;
        if in_dim == 0 {
            return Err(Error::Config("tower has no inputs".into()));
        }
        let mut sizes = vec![in_dim];
        sizes.extend_from_slice(&spec.hidden);
        sizes.push(spec.output_dim());
        let mlp = Mlp::new(&sizes, Activation::Identity, rng)?;
        Ok(Tower {
            dense_dim,
            tables,
            mlp,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn mac_cost(&self) -> u64 {
        self.mlp.mac_cost()
    }

    pub fn tables(&self) -> &[EmbeddingTable] {
        &self.tables
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn param_count(&self) -> usize {
        self.mlp.param_count()
            + self
                .tables
                .iter()
                .map(|t| t.rows() * t.dim())
                .sum::<usize>()
    }

    fn assemble(&self, input: &TowerInput) -> Result<Vec<f64>> {
        if input.dense.len() != self.dense_dim {
            return Err(Error::dim("tower dense input", self.dense_dim, input.dense.len()));
        }
        if input.sparse.len() != self.tables.len() {
            return Err(Error::dim("tower sparse fields", self.tables.len(), input.sparse.len()));
        }
        let mut x = input.dense.clone();
        for (table, ids) in self.tables.iter().zip(&input.sparse) {
            x.extend_from_slice(&table.lookup_sum(ids));
        }
        Ok(x)
    }

    pub fn forward(&self, input: &TowerInput) -> Result<Vec<f64>> {
        let x = self.assemble(input)?;
        self.mlp.forward(&x)
    }

    pub fn forward_cached(&self, input: &TowerInput) -> Result<(Vec<f64>, TowerCache)> {
        let x = self.assemble(input)?;
        let (y, mlp_cache) = self.mlp.forward_cached(&x)?;
        Ok((
            y,
            TowerCache {
                ids: input.sparse.clone(),
                mlp_cache,
            },
        ))
    }

    pub fn backward(&self, cache: &TowerCache, grad_out: &[f64]) -> Result<TowerGrads> {
        let (mlp_grads, grad_in) = self.mlp.backward(&cache.mlp_cache, grad_out)?;
        let mut tables = Vec::with_capacity(self.tables.len());
        let mut off = self.dense_dim;
        for (table, ids) in self.tables.iter().zip(&cache.ids) {
            let mut acc = SparseGrad::new();
            table.backward_into(ids, &grad_in[off..off + table.dim()], &mut acc);
            off += table.dim();
            tables.push(acc);
        }
        Ok(TowerGrads {
            tables,
            mlp: mlp_grads,
        })
    }

    /// Applies accumulated gradients. Walk order (tables, then network
    /// layers) is part of the optimizer slot contract.
    pub fn apply_grads(&mut self, g: &TowerGrads, opt: &mut Optimizer) -> Result<()> {
        for (table, sg) in self.tables.iter_mut().zip(&g.tables) {
            opt.update_sparse(table.weights_mut(), sg)?;
        }
        apply_mlp_grads(&mut self.mlp, &g.mlp, opt)
    }

    pub fn visit_tensors(&self, prefix: &str, f: &mut dyn FnMut(String, &[f64], Vec<usize>)) {
        for (i, t) in self.tables.iter().enumerate() {
            f(
                format!("{prefix}.table{i}"),
                t.weights().as_slice(),
                vec![t.rows(), t.dim()],
            );
        }
        visit_mlp(&self.mlp, &format!("{prefix}.net"), f);
    }

    pub fn visit_tensors_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        for (i, t) in self.tables.iter_mut().enumerate() {
            f(format!("{prefix}.table{i}"), t.weights_mut().as_mut_slice());
        }
        visit_mlp_mut(&mut self.mlp, &format!("{prefix}.net"), f);
    }
}

pub fn apply_mlp_grads(mlp: &mut Mlp, g: &MlpGrads, opt: &mut Optimizer) -> Result<()> {
    for (layer, (gw, gb)) in mlp.layers_mut().iter_mut().zip(&g.layers) {
        opt.update(layer.weight.as_mut_slice(), gw.as_slice())?;
        opt.update(&mut layer.bias, gb)?;
    }
    Ok(())
}

pub fn visit_mlp(mlp: &Mlp, prefix: &str, f: &mut dyn FnMut(String, &[f64], Vec<usize>)) {
    for (i, l) in mlp.layers().iter().enumerate() {
        f(
            format!("{prefix}.l{i}.w"),
            l.weight.as_slice(),
            vec![l.out_dim(), l.in_dim()],
        );
        f(format!("{prefix}.l{i}.b"), &l.bias, vec![l.out_dim()]);
    }
}

pub fn visit_mlp_mut(mlp: &mut Mlp, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
    for (i, l) in mlp.layers_mut().iter_mut().enumerate() {
        f(format!("{prefix}.l{i}.w"), l.weight.as_mut_slice());
        f(format!("{prefix}.l{i}.b"), &mut l.bias);
    }
}

// ---------------------------------------------------------------------------
// Over-arch
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverArchKind {
    Mlp,
    /// Two-tower degenerate form: a single dot of the first two parts,
    /// broadcast across tasks.
    Dot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OverArch {
    Mlp(Mlp),
    Dot,
}

#[derive(Debug, Clone)]
pub enum OverArchCache {
    Mlp(MlpCache),
    Dot { a: Vec<f64>, b: Vec<f64> },
}

impl OverArch {
    pub fn mac_cost(&self, part_dims: &[usize]) -> u64 {
        match self {
            OverArch::Mlp(m) => m.mac_cost(),
            OverArch::Dot => part_dims.first().copied().unwrap_or(0) as u64,
        }
    }

    /// Raw logits from tower embeddings. Parts are concatenated in the fixed
    /// order (user, item-side, interaction).
    pub fn forward_cached(
        &self,
        parts: &[&[f64]],
        num_tasks: usize,
    ) -> Result<(Vec<f64>, OverArchCache)> {
        match self {
            OverArch::Mlp(m) => {
                let z: Vec<f64> = parts.iter().flat_map(|p| p.iter().copied()).collect();
                let (y, cache) = m.forward_cached(&z)?;
                if y.len() != num_tasks {
                    return Err(Error::dim("overarch output", num_tasks, y.len()));
                }
                Ok((y, OverArchCache::Mlp(cache)))
            }
            OverArch::Dot => {
                if parts.len() < 2 {
                    return Err(Error::Config("dot over-arch needs two parts".into()));
                }
                let (a, b) = (parts[0], parts[1]);
                if a.len() != b.len() {
                    return Err(Error::dim("dot over-arch", a.len(), b.len()));
                }
                let s = dot(a, b);
                Ok((
                    vec![s; num_tasks],
                    OverArchCache::Dot {
                        a: a.to_vec(),
                        b: b.to_vec(),
                    },
                ))
            }
        }
    }

    /// Backward through the over-arch: parameter grads (None for dot) and
    /// gradients per input part.
    pub fn backward(
        &self,
        cache: &OverArchCache,
        part_dims: &[usize],
        grad_logits: &[f64],
    ) -> Result<(Option<MlpGrads>, Vec<Vec<f64>>)> {
        match (self, cache) {
            (OverArch::Mlp(m), OverArchCache::Mlp(c)) => {
                let (grads, gin) = m.backward(c, grad_logits)?;
                let mut parts = Vec::with_capacity(part_dims.len());
                let mut off = 0;
                for &d in part_dims {
                    parts.push(gin[off..off + d].to_vec());
                    off += d;
                }
                Ok((Some(grads), parts))
            }
            (OverArch::Dot, OverArchCache::Dot { a, b }) => {
                let g: f64 = grad_logits.iter().sum();
                let mut parts = vec![b.iter().map(|&v| g * v).collect::<Vec<f64>>()];
                parts.push(a.iter().map(|&v| g * v).collect());
                for &d in part_dims.iter().skip(2) {
                    parts.push(vec![0.0; d]);
                }
                Ok((None, parts))
            }
            _ => Err(Error::Config("over-arch cache kind mismatch".into())),
        }
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Named size presets. The ladder is monotone in serving MACs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Two-tower: dot-product over-arch, no interaction tower.
    Xs,
    S,
    M,
    L,
}

/// Full architectural specification of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonnSpec {
    pub user: TowerSpec,
    pub item: TowerSpec,
    pub inter: Option<TowerSpec>,
    pub overarch_hidden: Vec<usize>,
    pub overarch: OverArchKind,
}

impl MonnSpec {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Xs => MonnSpec {
                user: TowerSpec {
                    num_embed: 1,
                    dim: 8,
                    hidden: vec![],
                    sparse_embed_dim: 4,
                },
                item: TowerSpec {
                    num_embed: 1,
                    dim: 8,
                    hidden: vec![],
                    sparse_embed_dim: 4,
                },
                inter: None,
                overarch_hidden: vec![],
                overarch: OverArchKind::Dot,
            },
            Preset::S => MonnSpec {
                user: TowerSpec {
                    num_embed: 2,
                    dim: 8,
                    hidden: vec![16],
                    sparse_embed_dim: 4,
                },
                item: TowerSpec {
                    num_embed: 1,
                    dim: 8,
                    hidden: vec![16],
                    sparse_embed_dim: 4,
                },
                inter: Some(TowerSpec {
                    num_embed: 1,
                    dim: 8,
                    hidden: vec![8],
                    sparse_embed_dim: 4,
                }),
                overarch_hidden: vec![16],
                overarch: OverArchKind::Mlp,
            },
            Preset::M => MonnSpec {
                user: TowerSpec {
                    num_embed: 2,
                    dim: 16,
                    hidden: vec![32],
                    sparse_embed_dim: 8,
                },
                item: TowerSpec {
                    num_embed: 2,
                    dim: 16,
                    hidden: vec![32],
                    sparse_embed_dim: 8,
                },
                inter: Some(TowerSpec {
                    num_embed: 1,
                    dim: 16,
                    hidden: vec![16],
                    sparse_embed_dim: 8,
                }),
                overarch_hidden: vec![32],
                overarch: OverArchKind::Mlp,
            },
            Preset::L => MonnSpec {
                user: TowerSpec {
                    num_embed: 4,
                    dim: 16,
                    hidden: vec![64, 32],
                    sparse_embed_dim: 8,
                },
                item: TowerSpec {
                    num_embed: 2,
                    dim: 16,
                    hidden: vec![64],
                    sparse_embed_dim: 8,
                },
                inter: Some(TowerSpec {
                    num_embed: 1,
                    dim: 16,
                    hidden: vec![32],
                    sparse_embed_dim: 8,
                }),
                overarch_hidden: vec![64],
                overarch: OverArchKind::Mlp,
            },
        }
    }
}

/// Per-task logits and probabilities of one example.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl Prediction {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let probs = logits.iter().map(|&l| sigmoid(l)).collect();
        Prediction { logits, probs }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonnModel {
    pub spec: MonnSpec,
    pub user: Tower,
    pub item: Tower,
    pub inter: Option<Tower>,
    pub overarch: OverArch,
    pub task_weights: Vec<f64>,
    /// Per-task calibration bias, fit post-hoc; not gradient-trained.
    pub calibration: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MonnCache {
    pub user: TowerCache,
    pub item: TowerCache,
    pub inter: Option<TowerCache>,
    pub user_emb: Vec<f64>,
    pub item_emb: Vec<f64>,
    pub inter_emb: Vec<f64>,
    pub overarch: OverArchCache,
}

#[derive(Debug, Clone)]
pub struct MonnGrads {
    pub user: TowerGrads,
    pub item: TowerGrads,
    pub inter: Option<TowerGrads>,
    pub overarch: Option<MlpGrads>,
}

impl MonnGrads {
    pub fn zeros_like(m: &MonnModel) -> Self {
        MonnGrads {
            user: TowerGrads::zeros_like(&m.user),
            item: TowerGrads::zeros_like(&m.item),
            inter: m.inter.as_ref().map(TowerGrads::zeros_like),
            overarch: match &m.overarch {
                OverArch::Mlp(mlp) => Some(MlpGrads::zeros_like(mlp)),
                OverArch::Dot => None,
            },
        }
    }

    pub fn accumulate(&mut self, other: &MonnGrads) {
        self.user.accumulate(&other.user);
        self.item.accumulate(&other.item);
        if let (Some(a), Some(b)) = (self.inter.as_mut(), other.inter.as_ref()) {
            a.accumulate(b);
        }
        if let (Some(a), Some(b)) = (self.overarch.as_mut(), other.overarch.as_ref()) {
            a.accumulate(b);
        }
    }
}

impl MonnModel {
    pub fn new<R: Rng + ?Sized>(
        schema: &FeatureSchema,
        spec: &MonnSpec,
        num_tasks: usize,
        rng: &mut R,
    ) -> Result<Self> {
        schema.validate()?;
        let user = Tower::new(
            schema.dense_dim(TowerKind::User),
            &schema.sparse_fields(TowerKind::User),
            &spec.user,
            rng,
        )?;
        let item = Tower::new(
            schema.dense_dim(TowerKind::Item),
            &schema.sparse_fields(TowerKind::Item),
            &spec.item,
            rng,
        )?;
        let inter = match &spec.inter {
            Some(ts) => Some(Tower::new(
                schema.dense_dim(TowerKind::Interaction),
                &schema.sparse_fields(TowerKind::Interaction),
                ts,
                rng,
            )?),
            None => None,
        };
        let overarch = match spec.overarch {
            OverArchKind::Dot => {
                if spec.inter.is_some() {
                    return Err(Error::Config(
                        "dot over-arch cannot take an interaction tower".into(),
                    ));
                }
                if spec.user.output_dim() != spec.item.output_dim() {
                    return Err(Error::dim(
                        "dot over-arch tower dims",
                        spec.user.output_dim(),
                        spec.item.output_dim(),
                    ));
                }
                OverArch::Dot
            }
            OverArchKind::Mlp => {
                let in_dim = spec.user.output_dim()
                    + spec.item.output_dim()
                    + spec.inter.as_ref().map_or(0, |t| t.output_dim());
                let mut sizes = vec![in_dim];
                sizes.extend_from_slice(&spec.overarch_hidden);
                sizes.push(num_tasks);
                OverArch::Mlp(Mlp::new(&sizes, Activation::Identity, rng)?)
            }
        };
        Ok(MonnModel {
            spec: spec.clone(),
            user,
            item,
            inter,
            overarch,
            task_weights: vec![1.0; num_tasks],
            calibration: vec![0.0; num_tasks],
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.task_weights.len()
    }

    /// Per-pair serving cost: interaction tower plus over-arch MACs. Tower
    /// embeddings are assumed cached (user computed once per request, item
    /// asynchronously), matching the cost-model convention. Embedding table
    /// pooling is lookup work, not counted as MACs.
    pub fn serve_mac_cost(&self) -> u64 {
        let part_dims = [self.user.output_dim(), self.item.output_dim()];
        self.inter.as_ref().map_or(0, |t| t.mac_cost()) + self.overarch.mac_cost(&part_dims)
    }

    /// Full single-inference cost including all towers.
    pub fn full_mac_cost(&self) -> u64 {
        self.user.mac_cost() + self.item.mac_cost() + self.serve_mac_cost()
    }

    pub fn forward(
        &self,
        user_in: &TowerInput,
        item_in: &TowerInput,
        inter_in: &TowerInput,
    ) -> Result<Prediction> {
        Ok(self.forward_cached(user_in, item_in, inter_in)?.0)
    }

    pub fn forward_cached(
        &self,
        user_in: &TowerInput,
        item_in: &TowerInput,
        inter_in: &TowerInput,
    ) -> Result<(Prediction, MonnCache)> {
        let (user_emb, user_cache) = self.user.forward_cached(user_in)?;
        let (item_emb, item_cache) = self.item.forward_cached(item_in)?;
        let (inter_emb, inter_cache) = match &self.inter {
            Some(t) => {
                let (e, c) = t.forward_cached(inter_in)?;
                (e, Some(c))
            }
            None => (Vec::new(), None),
        };
        let mut parts: Vec<&[f64]> = vec![&user_emb, &item_emb];
        if self.inter.is_some() {
            parts.push(&inter_emb);
        }
        let (mut logits, oa_cache) = self.overarch.forward_cached(&parts, self.num_tasks())?;
        for (l, b) in logits.iter_mut().zip(&self.calibration) {
            *l += b;
        }
        Ok((
            Prediction::from_logits(logits),
            MonnCache {
                user: user_cache,
                item: item_cache,
                inter: inter_cache,
                user_emb,
                item_emb,
                inter_emb,
                overarch: oa_cache,
            },
        ))
    }

    /// Backward from per-task logit gradients to all parameter gradients.
    pub fn backward(&self, cache: &MonnCache, grad_logits: &[f64]) -> Result<MonnGrads> {
        let mut part_dims = vec![self.user.output_dim(), self.item.output_dim()];
        if let Some(t) = &self.inter {
            part_dims.push(t.output_dim());
        }
        let (oa_grads, part_grads) =
            self.overarch.backward(&cache.overarch, &part_dims, grad_logits)?;
        let user = self.user.backward(&cache.user, &part_grads[0])?;
        let item = self.item.backward(&cache.item, &part_grads[1])?;
        let inter = match (&self.inter, cache.inter.as_ref()) {
            (Some(t), Some(c)) => Some(t.backward(c, &part_grads[2])?),
            _ => None,
        };
        Ok(MonnGrads {
            user,
            item,
            inter,
            overarch: oa_grads,
        })
    }

    /// Applies accumulated gradients in the fixed slot order: user tower,
    /// item tower, interaction tower, over-arch.
    pub fn apply_grads(&mut self, g: &MonnGrads, opt: &mut Optimizer) -> Result<()> {
        self.user.apply_grads(&g.user, opt)?;
        self.item.apply_grads(&g.item, opt)?;
        if let (Some(t), Some(tg)) = (self.inter.as_mut(), g.inter.as_ref()) {
            t.apply_grads(tg, opt)?;
        }
        if let (OverArch::Mlp(m), Some(og)) = (&mut self.overarch, g.overarch.as_ref()) {
            apply_mlp_grads(m, og, opt)?;
        }
        Ok(())
    }

    pub fn visit_tensors(&self, f: &mut dyn FnMut(String, &[f64], Vec<usize>)) {
        self.user.visit_tensors("user", f);
        self.item.visit_tensors("item", f);
        if let Some(t) = &self.inter {
            t.visit_tensors("inter", f);
        }
        if let OverArch::Mlp(m) = &self.overarch {
            visit_mlp(m, "overarch", f);
        }
    }

    pub fn visit_tensors_mut(&mut self, f: &mut dyn FnMut(String, &mut [f64])) {
        self.user.visit_tensors_mut("user", f);
        self.item.visit_tensors_mut("item", f);
        if let Some(t) = &mut self.inter {
            t.visit_tensors_mut("inter", f);
        }
        if let OverArch::Mlp(m) = &mut self.overarch {
            visit_mlp_mut(m, "overarch", f);
        }
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_tensors(&mut |_, data, _| out.extend_from_slice(data));
        out
    }

    pub fn set_flat_params(&mut self, p: &[f64]) {
        let mut off = 0;
        self.visit_tensors_mut(&mut |_, data| {
            data.copy_from_slice(&p[off..off + data.len()]);
            off += data.len();
        });
        assert_eq!(off, p.len(), "flat param length mismatch");
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

fn clamped(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

fn bce(p: f64, y: f64) -> f64 {
    let p = clamped(p);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Multi-task cross-entropy: `-(1/S) sum_i sum_t w_t [y log p + (1-y) log(1-p)]`.
pub fn supervised_loss(preds: &[Prediction], labels: &[Vec<u8>], task_weights: &[f64]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::dim("supervised_loss batch", preds.len(), labels.len()));
    }
    let s = preds.len().max(1) as f64;
    let mut total = 0.0;
    for (p, y) in preds.iter().zip(labels) {
        if p.probs.len() != task_weights.len() || y.len() != task_weights.len() {
            return Err(Error::dim("supervised_loss tasks", task_weights.len(), y.len()));
        }
        for ((&prob, &label), &w) in p.probs.iter().zip(y.iter()).zip(task_weights) {
            total += w * bce(prob, label as f64);
        }
    }
    Ok(total / s)
}

/// Per-example, per-task `dLoss/dlogit` of [`supervised_loss`]. Zero in the
/// clamped probability region, matching the computed loss exactly.
pub fn supervised_loss_grad(preds: &[Prediction], labels: &[Vec<u8>], task_weights: &[f64]) -> Vec<Vec<f64>> {
    let s = preds.len().max(1) as f64;
    preds
        .iter()
        .zip(labels)
        .map(|(p, y)| {
            p.probs
                .iter()
                .zip(y.iter())
                .zip(task_weights)
                .map(|((&prob, &label), &w)| {
                    if prob <= PROB_CLAMP || prob >= 1.0 - PROB_CLAMP {
                        0.0
                    } else {
                        w * (prob - label as f64) / s
                    }
                })
                .collect()
        })
        .collect()
}

/// Soft cross-entropy against teacher probabilities.
pub fn distillation_loss(preds: &[Prediction], teacher: &[Vec<f64>]) -> Result<f64> {
    if preds.len() != teacher.len() {
        return Err(Error::dim("distillation_loss batch", preds.len(), teacher.len()));
    }
    let s = preds.len().max(1) as f64;
    let mut total = 0.0;
    for (p, q) in preds.iter().zip(teacher) {
        if p.probs.len() != q.len() {
            return Err(Error::dim("distillation_loss tasks", p.probs.len(), q.len()));
        }
        for (&prob, &soft) in p.probs.iter().zip(q) {
            total += bce(prob, soft);
        }
    }
    Ok(total / s)
}

/// `dLoss/dlogit` of [`distillation_loss`].
pub fn distillation_loss_grad(preds: &[Prediction], teacher: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let s = preds.len().max(1) as f64;
    preds
        .iter()
        .zip(teacher)
        .map(|(p, q)| {
            p.probs
                .iter()
                .zip(q)
                .map(|(&prob, &soft)| {
                    if prob <= PROB_CLAMP || prob >= 1.0 - PROB_CLAMP {
                        0.0
                    } else {
                        (prob - soft) / s
                    }
                })
                .collect()
        })
        .collect()
}

/// Supervised plus optional distillation term.
pub fn total_loss(
    preds: &[Prediction],
    labels: &[Vec<u8>],
    task_weights: &[f64],
    teacher: Option<&[Vec<f64>]>,
) -> Result<f64> {
    let mut l = supervised_loss(preds, labels, task_weights)?;
    if let Some(t) = teacher {
        l += distillation_loss(preds, t)?;
    }
    Ok(l)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainMonnConfig {
    /// Snapshot every this many batches; 0 disables snapshots.
    pub snapshot_interval: usize,
    /// Distill from the provided teacher model when true.
    pub distill: bool,
}

#[derive(Debug, Clone, Default)]
pub struct TrainTrace {
    /// Loss after each batch, in stream order.
    pub losses: Vec<f64>,
    /// (batch index, snapshot) pairs at the configured interval.
    pub snapshots: Vec<(usize, MonnModel)>,
}

/// Computes predictions for a batch with an existing I2IF index.
pub fn predict_batch(
    model: &MonnModel,
    schema: &FeatureSchema,
    batch: &[crate::datagen::Example],
    i2if: &I2ifIndex,
) -> Result<Vec<Prediction>> {
    batch
        .iter()
        .map(|ex| {
            let inputs = schema.assemble_inputs(ex, i2if)?;
            model.forward(&inputs.user, &inputs.item, &inputs.interaction)
        })
        .collect()
}

/// One gradient step over a minibatch. Returns the batch loss. Shared by the
/// standalone trainer and the joint (single-layer) training path so the two
/// stay numerically identical.
pub fn train_step(
    model: &mut MonnModel,
    schema: &FeatureSchema,
    batch: &[crate::datagen::Example],
    i2if: &I2ifIndex,
    opt: &mut Optimizer,
    teacher_soft: Option<&[Vec<f64>]>,
) -> Result<f64> {
    let mut preds = Vec::with_capacity(batch.len());
    let mut caches = Vec::with_capacity(batch.len());
    for ex in batch {
        let inputs = schema.assemble_inputs(ex, i2if)?;
        let (p, c) = model.forward_cached(&inputs.user, &inputs.item, &inputs.interaction)?;
        preds.push(p);
        caches.push(c);
    }
    let labels: Vec<Vec<u8>> = batch.iter().map(|e| e.y.clone()).collect();
    let mut loss = supervised_loss(&preds, &labels, &model.task_weights)?;
    let mut grad = supervised_loss_grad(&preds, &labels, &model.task_weights);
    if let Some(soft) = teacher_soft {
        loss += distillation_loss(&preds, soft)?;
        let dg = distillation_loss_grad(&preds, soft);
        for (g, d) in grad.iter_mut().zip(&dg) {
            for (gi, di) in g.iter_mut().zip(d) {
                *gi += di;
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("monn training loss".into()));
    }
    let mut acc = MonnGrads::zeros_like(model);
    for (cache, g) in caches.iter().zip(&grad) {
        let gi = model.backward(cache, g)?;
        acc.accumulate(&gi);
    }
    opt.begin_step();
    model.apply_grads(&acc, opt)?;
    Ok(loss)
}

/// Online training over an ordered impression stream. Events are consumed in
/// stream order (no sorting); churn events rebuild the I2IF index before any
/// later batch is touched.
pub fn train_monn(
    model: &mut MonnModel,
    schema: &FeatureSchema,
    stream: &crate::datagen::ImpressionStream,
    catalog: &[ItemRecord],
    opt: &mut Optimizer,
    cfg: &TrainMonnConfig,
    teacher: Option<&MonnModel>,
) -> Result<TrainTrace> {
    let mut live: Vec<ItemRecord> = catalog.to_vec();
    let mut i2if = I2ifIndex::build(&live);
    let mut trace = TrainTrace::default();
    let mut batch_idx = 0usize;
    for event in &stream.events {
        match event {
            StreamEvent::Churn(c) => {
                let removed: std::collections::BTreeSet<u64> = c.removed.iter().copied().collect();
                live.retain(|it| !removed.contains(&it.item_id));
                live.extend(c.added.iter().cloned());
                i2if = I2ifIndex::build(&live);
            }
            StreamEvent::Batch(batch) => {
                let soft_labels;
                let teacher_arg = match (cfg.distill, teacher) {
                    (true, Some(t)) => {
                        soft_labels = predict_batch(t, schema, batch, &i2if)?
                            .into_iter()
                            .map(|p| p.probs)
                            .collect::<Vec<_>>();
                        Some(soft_labels.as_slice())
                    }
                    _ => None,
                };
                let loss = train_step(model, schema, batch, &i2if, opt, teacher_arg)?;
                trace.losses.push(loss);
                batch_idx += 1;
                if cfg.snapshot_interval > 0 && batch_idx % cfg.snapshot_interval == 0 {
                    trace.snapshots.push((batch_idx, model.clone()));
                }
            }
        }
    }
    Ok(trace)
}

/// Fits per-task calibration biases so the mean predicted probability matches
/// the mean label on the slice. Bisection over the (monotone) shifted mean.
pub fn calibrate(model: &mut MonnModel, preds_raw: &[Prediction], labels: &[Vec<u8>]) -> Result<Vec<f64>> {
    if preds_raw.is_empty() || preds_raw.len() != labels.len() {
        return Err(Error::Degenerate("calibration slice empty or mismatched".into()));
    }
    let t_count = model.num_tasks();
    let mut biases = Vec::with_capacity(t_count);
    for t in 0..t_count {
        let logits: Vec<f64> = preds_raw.iter().map(|p| p.logits[t]).collect();
        let target = labels.iter().map(|y| y[t] as f64).sum::<f64>() / labels.len() as f64;
        let b = fit_bias(&logits, target);
        biases.push(b);
        model.calibration[t] += b;
    }
    Ok(biases)
}

/// Finds `b` with `mean(sigmoid(logit + b)) = target` by bisection.
pub fn fit_bias(logits: &[f64], target: f64) -> f64 {
    let mean_at = |b: f64| logits.iter().map(|&l| sigmoid(l + b)).sum::<f64>() / logits.len() as f64;
    let target = target.clamp(1e-6, 1.0 - 1e-6);
    let (mut lo, mut hi) = (-40.0, 40.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_at(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

// ---------------------------------------------------------------------------
// Snapshot format
// ---------------------------------------------------------------------------

pub const SNAPSHOT_FORMAT_VERSION: u64 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonnManifest {
    pub format_version: u64,
    pub spec: MonnSpec,
    pub task_weights: Vec<f64>,
    pub calibration: Vec<f64>,
    pub schema_hash: String,
    pub step: usize,
    pub tensors: BTreeMap<String, Vec<usize>>,
}

/// Hash of the schema JSON; snapshots refuse to load against a different one.
pub fn schema_hash(schema: &FeatureSchema) -> String {
    use sha2::{Digest, Sha256};
    let bytes = serde_json::to_vec(schema).expect("schema serializes");
    let out = Sha256::digest(&bytes);
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes one tensor file per named parameter plus a manifest.
pub fn save_monn(model: &MonnModel, schema: &FeatureSchema, step: usize, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut tensors = BTreeMap::new();
    let mut err = None;
    model.visit_tensors(&mut |name, data, dims| {
        if err.is_some() {
            return;
        }
        if let Err(e) = artifact::write_tensor(&dir.join(artifact::tensor_file_name(&name)), &dims, data) {
            err = Some(e);
        }
        tensors.insert(name, dims);
    });
    if let Some(e) = err {
        return Err(e);
    }
    let manifest = MonnManifest {
        format_version: SNAPSHOT_FORMAT_VERSION,
        spec: model.spec.clone(),
        task_weights: model.task_weights.clone(),
        calibration: model.calibration.clone(),
        schema_hash: schema_hash(schema),
        step,
        tensors,
    };
    artifact::write_manifest(&dir.join("manifest.json"), &manifest)
}

/// Loads a snapshot saved by [`save_monn`]. The schema must hash-match.
pub fn load_monn(dir: &Path, schema: &FeatureSchema) -> Result<(MonnModel, MonnManifest)> {
    use rand::SeedableRng;
    let manifest: MonnManifest = artifact::read_manifest(&dir.join("manifest.json"))?;
    if manifest.format_version != SNAPSHOT_FORMAT_VERSION {
        return Err(Error::Artifact(format!(
            "unsupported snapshot format version {}",
            manifest.format_version
        )));
    }
    if manifest.schema_hash != schema_hash(schema) {
        return Err(Error::Artifact("snapshot schema hash mismatch".into()));
    }
    // Deterministic placeholder init, then overwrite every tensor from disk.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut model = MonnModel::new(schema, &manifest.spec, manifest.task_weights.len(), &mut rng)?;
    model.task_weights = manifest.task_weights.clone();
    model.calibration = manifest.calibration.clone();
    let mut err = None;
    model.visit_tensors_mut(&mut |name, data| {
        if err.is_some() {
            return;
        }
        match artifact::read_tensor(&dir.join(artifact::tensor_file_name(&name))) {
            Ok((_, loaded)) if loaded.len() == data.len() => data.copy_from_slice(&loaded),
            Ok((_, loaded)) => err = Some(Error::dim(format!("tensor {name}"), data.len(), loaded.len())),
            Err(e) => err = Some(e),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_world, SyntheticWorldConfig};
    use crate::numerics::finite_diff_check;
    use crate::numerics::OptimizerKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn world_and_schema() -> (crate::datagen::World, FeatureSchema) {
        let cfg = SyntheticWorldConfig {
            num_users: 8,
            num_items: 60,
            coarse_clusters: 2,
            fine_per_coarse: 3,
            ..Default::default()
        };
        let world = generate_world(&cfg).unwrap();
        let schema = FeatureSchema::default_for_world(cfg.latent_dim);
        (world, schema)
    }

    fn tiny_spec() -> MonnSpec {
        MonnSpec {
            user: TowerSpec {
                num_embed: 1,
                dim: 4,
                hidden: vec![6],
                sparse_embed_dim: 3,
            },
            item: TowerSpec {
                num_embed: 1,
                dim: 4,
                hidden: vec![6],
                sparse_embed_dim: 3,
            },
            inter: Some(TowerSpec {
                num_embed: 1,
                dim: 4,
                hidden: vec![4],
                sparse_embed_dim: 3,
            }),
            overarch_hidden: vec![6],
            overarch: OverArchKind::Mlp,
        }
    }

    fn example_inputs(
        world: &crate::datagen::World,
        schema: &FeatureSchema,
        seed: u64,
    ) -> (crate::features::AssembledInputs, Vec<u8>) {
        let i2if = I2ifIndex::build(&world.items);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ex = &world.sample_impressions(1, 0, &mut rng)[0];
        (schema.assemble_inputs(ex, &i2if).unwrap(), ex.y.clone())
    }

    #[test]
    fn zero_overarch_weights_give_half_probs() {
        let (world, schema) = world_and_schema();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = MonnModel::new(&schema, &tiny_spec(), 2, &mut rng).unwrap();
        if let OverArch::Mlp(m) = &mut model.overarch {
            for l in m.layers_mut() {
                l.weight.fill(0.0);
                l.bias.fill(0.0);
            }
        }
        let (inputs, _) = example_inputs(&world, &schema, 3);
        let pred = model.forward(&inputs.user, &inputs.item, &inputs.interaction).unwrap();
        assert_eq!(pred.logits, vec![0.0, 0.0]);
        assert_eq!(pred.probs, vec![0.5, 0.5]);
    }

    #[test]
    fn dot_overarch_reproduces_two_tower_score() {
        let (world, schema) = world_and_schema();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = MonnModel::new(&schema, &MonnSpec::preset(Preset::Xs), 2, &mut rng).unwrap();
        for seed in 0..10 {
            let (inputs, _) = example_inputs(&world, &schema, seed);
            let pred = model.forward(&inputs.user, &inputs.item, &inputs.interaction).unwrap();
            let u = model.user.forward(&inputs.user).unwrap();
            let v = model.item.forward(&inputs.item).unwrap();
            let expected = dot(&u, &v);
            for t in 0..2 {
                assert!((pred.logits[t] - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn tiny_model_logits_match_scalar_loop_oracle() {
        // Dense-only schema so the oracle stays hand-checkable.
        let schema = FeatureSchema {
            dense: vec![
                crate::features::DenseFeatureSpec {
                    name: "u".into(),
                    dim: 2,
                    tower: TowerKind::User,
                },
                crate::features::DenseFeatureSpec {
                    name: "v".into(),
                    dim: 2,
                    tower: TowerKind::Item,
                },
            ],
            sparse: vec![],
            i2if: None,
        };
        let spec = MonnSpec {
            user: TowerSpec {
                num_embed: 1,
                dim: 2,
                hidden: vec![],
                sparse_embed_dim: 1,
            },
            item: TowerSpec {
                num_embed: 1,
                dim: 2,
                hidden: vec![],
                sparse_embed_dim: 1,
            },
            inter: None,
            overarch_hidden: vec![],
            overarch: OverArchKind::Mlp,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = MonnModel::new(&schema, &spec, 1, &mut rng).unwrap();
        model.user.mlp_mut().layers_mut()[0].weight =
            crate::numerics::Matrix::from_vec(2, 2, vec![1.0, 0.5, -0.5, 1.0]).unwrap();
        model.user.mlp_mut().layers_mut()[0].bias = vec![0.1, -0.1];
        model.item.mlp_mut().layers_mut()[0].weight =
            crate::numerics::Matrix::from_vec(2, 2, vec![0.2, 0.0, 0.0, 0.2]).unwrap();
        model.item.mlp_mut().layers_mut()[0].bias = vec![0.0, 0.0];
        if let OverArch::Mlp(m) = &mut model.overarch {
            m.layers_mut()[0].weight =
                crate::numerics::Matrix::from_vec(1, 4, vec![1.0, -1.0, 2.0, 0.5]).unwrap();
            m.layers_mut()[0].bias = vec![0.25];
        }
        let user_in = TowerInput {
            dense: vec![0.3, -0.6],
            sparse: vec![],
        };
        let item_in = TowerInput {
            dense: vec![1.0, 2.0],
            sparse: vec![],
        };
        let inter_in = TowerInput {
            dense: vec![],
            sparse: vec![],
        };
        // Scalar oracle.
        let ue = [1.0 * 0.3 + 0.5 * -0.6 + 0.1, -0.5 * 0.3 + 1.0 * -0.6 - 0.1];
        let ve = [0.2 * 1.0, 0.2 * 2.0];
        let logit = 1.0 * ue[0] - 1.0 * ue[1] + 2.0 * ve[0] + 0.5 * ve[1] + 0.25;
        let pred = model.forward(&user_in, &item_in, &inter_in).unwrap();
        assert!((pred.logits[0] - logit).abs() < 1e-14);
    }

    #[test]
    fn dim_mismatch_is_a_structured_error() {
        let (world, schema) = world_and_schema();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = MonnModel::new(&schema, &tiny_spec(), 2, &mut rng).unwrap();
        let (mut inputs, _) = example_inputs(&world, &schema, 1);
        inputs.user.dense.pop();
        let err = model.forward(&inputs.user, &inputs.item, &inputs.interaction).unwrap_err();
        assert!(matches!(err, Error::DimMismatch { .. }));
    }

    #[test]
    fn perfect_confident_predictions_have_negligible_loss() {
        let preds = vec![Prediction::from_logits(vec![30.0, -30.0])];
        let labels = vec![vec![1u8, 0u8]];
        let loss = supervised_loss(&preds, &labels, &[1.0, 1.0]).unwrap();
        assert!(loss <= 1e-6 * 2.0, "loss {loss}");
    }

    #[test]
    fn half_probs_give_t_ln2() {
        let preds = vec![Prediction::from_logits(vec![0.0, 0.0]); 7];
        let labels = vec![vec![1u8, 0u8]; 7];
        let loss = supervised_loss(&preds, &labels, &[1.0, 1.0]).unwrap();
        assert!((loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn zero_task_weight_removes_the_task() {
        let preds = vec![Prediction::from_logits(vec![1.3, -0.4])];
        let labels = vec![vec![0u8, 1u8]];
        let both = supervised_loss(&preds, &labels, &[1.0, 0.0]).unwrap();
        let only_first = supervised_loss(&preds, &labels, &[1.0, 1.0]).unwrap()
            - supervised_loss(&preds, &labels, &[0.0, 1.0]).unwrap();
        assert!((both - only_first).abs() < 1e-12);
    }

    #[test]
    fn supervised_loss_is_reorder_invariant() {
        let preds: Vec<Prediction> = (0..6)
            .map(|i| Prediction::from_logits(vec![0.3 * i as f64 - 1.0]))
            .collect();
        let labels: Vec<Vec<u8>> = (0..6).map(|i| vec![(i % 2) as u8]).collect();
        let a = supervised_loss(&preds, &labels, &[1.0]).unwrap();
        let mut reordered: Vec<(Prediction, Vec<u8>)> = preds.into_iter().zip(labels).collect();
        reordered.reverse();
        let (p2, l2): (Vec<_>, Vec<_>) = reordered.into_iter().unzip();
        let b = supervised_loss(&p2, &l2, &[1.0]).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn distillation_self_consistency_is_teacher_entropy() {
        let q = [0.3, 0.8];
        let preds = vec![Prediction {
            logits: vec![0.0, 0.0],
            probs: q.to_vec(),
        }];
        let loss = distillation_loss(&preds, &[q.to_vec()]).unwrap();
        let entropy: f64 = q.iter().map(|&p| -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())).sum();
        assert!((loss - entropy).abs() < 1e-12);
    }

    #[test]
    fn distillation_limit_goes_to_zero() {
        let preds = vec![Prediction::from_logits(vec![30.0])];
        let loss = distillation_loss(&preds, &[vec![1.0]]).unwrap();
        assert!(loss < 1e-6);
    }

    #[test]
    fn distillation_matches_closed_form() {
        let p = 0.62;
        let q = 0.27;
        let preds = vec![Prediction {
            logits: vec![0.0],
            probs: vec![p],
        }];
        let loss = distillation_loss(&preds, &[vec![q]]).unwrap();
        let expected = -(q * p.ln() + (1.0 - q) * (1.0 - p).ln());
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn total_loss_is_additive() {
        let preds = vec![Prediction::from_logits(vec![0.4, -0.2])];
        let labels = vec![vec![1u8, 0u8]];
        let teacher = vec![vec![0.7, 0.1]];
        let sup = supervised_loss(&preds, &labels, &[1.0, 1.0]).unwrap();
        let dis = distillation_loss(&preds, &teacher).unwrap();
        let total = total_loss(&preds, &labels, &[1.0, 1.0], Some(&teacher)).unwrap();
        assert!((total - (sup + dis)).abs() < 1e-15);
        let no_teacher = total_loss(&preds, &labels, &[1.0, 1.0], None).unwrap();
        assert!((no_teacher - sup).abs() < 1e-15);
    }

    pub fn flatten_monn_grads(model: &MonnModel, g: &MonnGrads) -> Vec<f64> {
        // Mirrors visit_tensors order: user, item, inter, overarch.
        let mut out = Vec::new();
        let push_tower = |out: &mut Vec<f64>, tower: &Tower, tg: &TowerGrads| {
            for (table, sg) in tower.tables.iter().zip(&tg.tables) {
                let mut dense = vec![0.0; table.rows() * table.dim()];
                for (&row, gr) in sg {
                    dense[row * table.dim()..(row + 1) * table.dim()].copy_from_slice(gr);
                }
                out.extend_from_slice(&dense);
            }
            for (w, b) in &tg.mlp.layers {
                out.extend_from_slice(w.as_slice());
                out.extend_from_slice(b);
            }
        };
        push_tower(&mut out, &model.user, &g.user);
        push_tower(&mut out, &model.item, &g.item);
        if let (Some(t), Some(tg)) = (&model.inter, &g.inter) {
            push_tower(&mut out, t, tg);
        }
        if let Some(og) = &g.overarch {
            for (w, b) in &og.layers {
                out.extend_from_slice(w.as_slice());
                out.extend_from_slice(b);
            }
        }
        out
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let (world, schema) = world_and_schema();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = MonnModel::new(&schema, &tiny_spec(), 2, &mut rng).unwrap();
        let i2if = I2ifIndex::build(&world.items);
        let batch = {
            let mut r = ChaCha8Rng::seed_from_u64(21);
            world.sample_impressions(3, 0, &mut r)
        };
        let labels: Vec<Vec<u8>> = batch.iter().map(|e| e.y.clone()).collect();
        let teacher_soft: Vec<Vec<f64>> = vec![vec![0.4, 0.6]; 3];

        let params = model.flat_params();
        let loss_fn = |p: &[f64]| {
            let mut m = model.clone();
            m.set_flat_params(p);
            let preds = predict_batch(&m, &schema, &batch, &i2if).unwrap();
            total_loss(&preds, &labels, &m.task_weights, Some(&teacher_soft)).unwrap()
        };

        // Analytic: combined supervised + distillation gradient.
        let mut acc = MonnGrads::zeros_like(&model);
        let mut preds = Vec::new();
        let mut caches = Vec::new();
        for ex in &batch {
            let inputs = schema.assemble_inputs(ex, &i2if).unwrap();
            let (p, c) = model
                .forward_cached(&inputs.user, &inputs.item, &inputs.interaction)
                .unwrap();
            preds.push(p);
            caches.push(c);
        }
        let mut grad = supervised_loss_grad(&preds, &labels, &model.task_weights);
        for (g, d) in grad.iter_mut().zip(distillation_loss_grad(&preds, &teacher_soft)) {
            for (gi, di) in g.iter_mut().zip(d) {
                *gi += di;
            }
        }
        for (c, g) in caches.iter().zip(&grad) {
            acc.accumulate(&model.backward(c, g).unwrap());
        }
        let analytic = flatten_monn_grads(&model, &acc);
        let report = finite_diff_check(loss_fn, &params, &analytic, 1e-5, 1e-4).unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn zero_lr_training_leaves_params_unchanged() {
        let (mut world, schema) = world_and_schema();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = MonnModel::new(&schema, &tiny_spec(), 2, &mut rng).unwrap();
        let before = model.flat_params();
        let catalog = world.items.clone();
        let stream = world.make_stream(5, 8, 0, 1);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.0);
        train_monn(
            &mut model,
            &schema,
            &stream,
            &catalog,
            &mut opt,
            &TrainMonnConfig::default(),
            None,
        )
        .unwrap();
        assert_eq!(model.flat_params(), before);
    }

    #[test]
    fn separable_toy_data_converges() {
        // Two users, two items, deterministic preferences.
        let schema = FeatureSchema {
            dense: vec![],
            sparse: vec![
                crate::features::SparseFeatureSpec {
                    name: "user_id".into(),
                    hash_modulus: 8,
                    tower: TowerKind::User,
                },
                crate::features::SparseFeatureSpec {
                    name: "item_id".into(),
                    hash_modulus: 8,
                    tower: TowerKind::Item,
                },
            ],
            i2if: None,
        };
        let spec = MonnSpec {
            user: TowerSpec {
                num_embed: 1,
                dim: 4,
                hidden: vec![],
                sparse_embed_dim: 4,
            },
            item: TowerSpec {
                num_embed: 1,
                dim: 4,
                hidden: vec![],
                sparse_embed_dim: 4,
            },
            inter: None,
            overarch_hidden: vec![8],
            overarch: OverArchKind::Mlp,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut model = MonnModel::new(&schema, &spec, 1, &mut rng).unwrap();
        let make_ex = |u: u64, v: u64, y: u8, ts: u64| crate::datagen::Example {
            user_id: u,
            item_id: v,
            user_dense: vec![],
            user_sparse: [("user_id".to_string(), vec![u])].into(),
            item_dense: vec![],
            item_sparse: [("item_id".to_string(), vec![v])].into(),
            inter_sparse: BTreeMap::new(),
            y: vec![y],
            ts,
        };
        let i2if = I2ifIndex::build(&[]);
        let mut opt = Optimizer::new(OptimizerKind::Adagrad, 0.3);
        let mut last = f64::INFINITY;
        for step in 0..500 {
            let batch = vec![
                make_ex(0, 0, 1, step),
                make_ex(0, 1, 0, step),
                make_ex(1, 0, 0, step),
                make_ex(1, 1, 1, step),
            ];
            last = train_step(&mut model, &schema, &batch, &i2if, &mut opt, None).unwrap();
            if last < 0.1 {
                break;
            }
        }
        assert!(last < 0.1, "loss stuck at {last}");
    }

    #[test]
    fn training_respects_stream_order_and_rejects_reversed_streams() {
        use crate::datagen::{ChurnEvent, ImpressionStream};
        let (world, schema) = world_and_schema();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut model = MonnModel::new(&schema, &tiny_spec(), 2, &mut rng).unwrap();
        let catalog = world.items.clone();

        // Batch referencing item 0, then churn removing item 0 and adding a
        // fresh item, then a batch referencing the fresh item.
        let user = &world.users[0];
        let old_item = world.items[0].clone();
        let mut new_item = world.items[1].clone();
        new_item.item_id = 9_999;
        let ex_old = world.example_from(user, &old_item, vec![0, 0], 0);
        let ex_new = world.example_from(user, &new_item, vec![0, 0], 10);
        let churn = ChurnEvent {
            removed: vec![old_item.item_id],
            added: vec![new_item],
            ts: 5,
        };
        let events = vec![
            StreamEvent::Batch(vec![ex_old]),
            StreamEvent::Churn(churn),
            StreamEvent::Batch(vec![ex_new]),
        ];
        let stream = ImpressionStream {
            events: events.clone(),
        };
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.01);
        train_monn(
            &mut model,
            &schema,
            &stream,
            &catalog,
            &mut opt,
            &TrainMonnConfig::default(),
            None,
        )
        .unwrap();
        // Reversed (as if sorted differently): the fresh item is unknown.
        let reversed = ImpressionStream {
            events: events.into_iter().rev().collect(),
        };
        let mut opt2 = Optimizer::new(OptimizerKind::Sgd, 0.01);
        let err = train_monn(
            &mut model,
            &schema,
            &reversed,
            &catalog,
            &mut opt2,
            &TrainMonnConfig::default(),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::UnknownItem(9_999)));
    }

    #[test]
    fn snapshot_interval_records_snapshots() {
        let (mut world, schema) = world_and_schema();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = MonnModel::new(&schema, &tiny_spec(), 2, &mut rng).unwrap();
        let catalog = world.items.clone();
        let stream = world.make_stream(6, 4, 0, 1);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.05);
        let trace = train_monn(
            &mut model,
            &schema,
            &stream,
            &catalog,
            &mut opt,
            &TrainMonnConfig {
                snapshot_interval: 2,
                distill: false,
            },
            None,
        )
        .unwrap();
        assert_eq!(
            trace.snapshots.iter().map(|(i, _)| *i).collect::<Vec<_>>(),
            vec![2, 4, 6]
        );
        assert_eq!(trace.losses.len(), 6);
    }

    #[test]
    fn calibration_matches_base_rate_and_preserves_ranking() {
        let (world, schema) = world_and_schema();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut model = MonnModel::new(&schema, &tiny_spec(), 2, &mut rng).unwrap();
        let i2if = I2ifIndex::build(&world.items);
        let mut r = ChaCha8Rng::seed_from_u64(31);
        let slice = world.sample_impressions(400, 0, &mut r);
        let labels: Vec<Vec<u8>> = slice.iter().map(|e| e.y.clone()).collect();
        let before = predict_batch(&model, &schema, &slice, &i2if).unwrap();
        calibrate(&mut model, &before, &labels).unwrap();
        let after = predict_batch(&model, &schema, &slice, &i2if).unwrap();
        for t in 0..2 {
            let mean_y: f64 = labels.iter().map(|y| y[t] as f64).sum::<f64>() / labels.len() as f64;
            let mean_p: f64 = after.iter().map(|p| p.probs[t]).sum::<f64>() / after.len() as f64;
            assert!((mean_p - mean_y).abs() < 1e-3, "task {t}: {mean_p} vs {mean_y}");
        }
        // Monotone shift: ranking by task-0 logit unchanged.
        let order = |preds: &[Prediction]| {
            let mut idx: Vec<usize> = (0..preds.len()).collect();
            idx.sort_by(|&a, &b| {
                preds[b].logits[0]
                    .partial_cmp(&preds[a].logits[0])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            idx
        };
        assert_eq!(order(&before), order(&after));
    }

    #[test]
    fn already_calibrated_model_gets_near_zero_bias() {
        // Constant predictor at the empirical base rate.
        let preds: Vec<Prediction> = (0..100)
            .map(|_| Prediction::from_logits(vec![0.0]))
            .collect();
        let labels: Vec<Vec<u8>> = (0..100).map(|i| vec![u8::from(i % 2 == 0)]).collect();
        let (_, schema) = world_and_schema();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = MonnModel::new(&schema, &tiny_spec(), 1, &mut rng).unwrap();
        let biases = calibrate(&mut model, &preds, &labels).unwrap();
        assert!(biases[0].abs() < 1e-6, "bias {}", biases[0]);
    }

    #[test]
    fn preset_ladder_is_monotone_in_serving_macs() {
        let schema = FeatureSchema::default_for_world(8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let costs: Vec<u64> = [Preset::Xs, Preset::S, Preset::M, Preset::L]
            .iter()
            .map(|&p| {
                MonnModel::new(&schema, &MonnSpec::preset(p), 2, &mut rng)
                    .unwrap()
                    .serve_mac_cost()
            })
            .collect();
        assert!(costs.windows(2).all(|w| w[0] < w[1]), "{costs:?}");
    }

    #[test]
    fn snapshot_round_trips_bitwise() {
        let (world, schema) = world_and_schema();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = MonnModel::new(&schema, &tiny_spec(), 2, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_monn(&model, &schema, 42, dir.path()).unwrap();
        let (loaded, manifest) = load_monn(dir.path(), &schema).unwrap();
        assert_eq!(manifest.step, 42);
        assert_eq!(loaded.flat_params(), model.flat_params());
        let (inputs, _) = example_inputs(&world, &schema, 2);
        let a = model.forward(&inputs.user, &inputs.item, &inputs.interaction).unwrap();
        let b = loaded.forward(&inputs.user, &inputs.item, &inputs.interaction).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn tampered_manifest_version_is_rejected() {
        let (_, schema) = world_and_schema();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = MonnModel::new(&schema, &tiny_spec(), 2, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_monn(&model, &schema, 0, dir.path()).unwrap();
        let mpath = dir.path().join("manifest.json");
        let mut m: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&mpath).unwrap()).unwrap();
        m["format_version"] = serde_json::json!(99);
        std::fs::write(&mpath, serde_json::to_string(&m).unwrap()).unwrap();
        assert!(load_monn(dir.path(), &schema).is_err());
    }
}
