//! Layered model over the hierarchical index.
//!
//! N scoring layers of decreasing granularity share a user tower and an item
//! tower. Coarse layers score (user, quantized item embedding) with a
//! dedicated interaction tower fed user+item features; the finest layer
//! scores real items with inverted-index interaction features. Layer logits
//! are combined by a learned linear ensemble. Joint training (JOIM) steps one
//! total loss through everything, including the soft-assignment chain into
//! the codebooks; SIL freezes a k-means index; EM alternates training and
//! re-clustering.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Example, ItemRecord};
use crate::features::{FeatureBundle, FeatureSchema, I2ifIndex, TowerInput, TowerKind};
use crate::index::{
    self, chain_forward, chain_backward, scheduler_alpha, warmup_weight, BalanceReg, ChainCache,
    ChainGradInput, HierarchicalIndex, SchedulerState,
};
use crate::monn::{
    apply_mlp_grads, supervised_loss, supervised_loss_grad, visit_mlp, visit_mlp_mut, MonnModel,
    OverArch, OverArchCache, OverArchKind, Prediction, Tower, TowerCache, TowerGrads, TowerSpec,
};
use crate::numerics::{Activation, Matrix, Mlp, MlpCache, MlpGrads, Optimizer, OptimizerKind};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Specs and model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HsnnLayerSpec {
    /// Interaction tower. Coarse layers consume combined user+item features;
    /// the finest layer consumes I2IF interaction features.
    pub inter: Option<TowerSpec>,
    pub overarch_hidden: Vec<usize>,
    pub overarch: OverArchKind,
    /// Give the layer its own user tower instead of the shared one.
    pub own_user_tower: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HsnnSpec {
    /// Shared user tower.
    pub user: TowerSpec,
    /// Shared item tower; its output is the space the index quantizes.
    pub item: TowerSpec,
    /// Scoring layers, coarse to fine. `layers.len() = N >= 1`.
    pub layers: Vec<HsnnLayerSpec>,
    /// Index nodes per level, one per coarse layer (`N - 1` entries).
    pub ks: Vec<usize>,
}

impl HsnnSpec {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_levels(&self) -> usize {
        self.ks.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("hsnn needs at least one layer".into()));
        }
        if self.ks.len() + 1 != self.layers.len() {
            return Err(Error::Config(format!(
                "ks ({}) must have one entry per coarse layer ({})",
                self.ks.len(),
                self.layers.len() - 1
            )));
        }
        if self.ks.iter().any(|&k| k == 0) {
            return Err(Error::Config("index levels need at least one node".into()));
        }
        // The auxiliary MSE pairs coarse interaction towers with the finest
        // one; dims must agree wherever both exist.
        if let Some(fine) = self.layers.last().and_then(|l| l.inter.as_ref()) {
            for (j, l) in self.layers[..self.layers.len() - 1].iter().enumerate() {
                if let Some(t) = &l.inter {
                    if t.output_dim() != fine.output_dim() {
                        return Err(Error::dim(
                            format!("layer {j} interaction dim (must match finest)"),
                            fine.output_dim(),
                            t.output_dim(),
                        ));
                    }
                }
            }
        }
        for (j, l) in self.layers.iter().enumerate() {
            if l.overarch == OverArchKind::Dot && l.inter.is_some() {
                return Err(Error::Config(format!(
                    "layer {j}: dot over-arch cannot take an interaction tower"
                )));
            }
        }
        Ok(())
    }

    /// Desk-scale ladder from named presets, coarse to fine. The shared
    /// towers come from the finest preset; coarse layers contribute their
    /// interaction/over-arch sizes. Interaction output dims are forced to
    /// the finest layer's so the auxiliary MSE is well-defined.
    pub fn from_presets(presets: &[crate::monn::Preset], ks: &[usize]) -> Result<Self> {
        if presets.is_empty() || presets.len() != ks.len() + 1 {
            return Err(Error::Config("need one preset per layer and one k per coarse layer".into()));
        }
        let fine = crate::monn::MonnSpec::preset(*presets.last().unwrap());
        let fine_inter_dim = fine.inter.as_ref().map(|t| t.output_dim());
        let layers: Vec<HsnnLayerSpec> = presets
            .iter()
            .map(|&p| {
                let spec = crate::monn::MonnSpec::preset(p);
                let inter = spec.inter.clone().map(|mut t| {
                    if let Some(target) = fine_inter_dim {
                        // Align output dim with the finest layer for the MSE.
                        t.num_embed = 1;
                        t.dim = target;
                    }
                    t
                });
                HsnnLayerSpec {
                    inter,
                    overarch_hidden: spec.overarch_hidden.clone(),
                    overarch: spec.overarch,
                    own_user_tower: false,
                }
            })
            .collect();
        Ok(HsnnSpec {
            user: fine.user.clone(),
            item: fine.item.clone(),
            layers,
            ks: ks.to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HsnnLayer {
    /// Per-layer user tower when unshared.
    pub user_tower: Option<Tower>,
    /// Projection of the user embedding for dot over-arches.
    pub user_head: Option<Mlp>,
    pub inter: Option<Tower>,
    pub overarch: OverArch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HsnnModel {
    pub spec: HsnnSpec,
    pub user_tower: Tower,
    pub item_tower: Tower,
    pub layers: Vec<HsnnLayer>,
    /// Index codebooks, coarse to fine (`N - 1` of them). Zero-sized until
    /// initialized by a trainer.
    pub codebooks: Vec<Matrix>,
    /// Linear projection of the user embedding into item-embedding space for
    /// the index supervision dot product.
    pub index_user_proj: Option<Mlp>,
    /// Per-layer, per-task mixing weights; `None` for a single layer.
    pub ensemble: Option<Matrix>,
    pub task_weights: Vec<f64>,
    /// Per-layer, per-task calibration bias applied inside layer logits.
    pub calibration: Vec<Vec<f64>>,
    /// Per-task calibration bias on the ensemble output.
    pub ensemble_calibration: Vec<f64>,
}

impl HsnnModel {
    pub fn new<R: Rng + ?Sized>(
        schema: &FeatureSchema,
        spec: &HsnnSpec,
        num_tasks: usize,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        schema.validate()?;
        let n = spec.num_layers();
        let user_tower = Tower::new(
            schema.dense_dim(TowerKind::User),
            &schema.sparse_fields(TowerKind::User),
            &spec.user,
            rng,
        )?;
        let item_tower = Tower::new(
            schema.dense_dim(TowerKind::Item),
            &schema.sparse_fields(TowerKind::Item),
            &spec.item,
            rng,
        )?;
        let d_item = spec.item.output_dim();
        let u_dim = spec.user.output_dim();

        let mut layers = Vec::with_capacity(n);
        for (j, lspec) in spec.layers.iter().enumerate() {
            let own_user = if lspec.own_user_tower {
                Some(Tower::new(
                    schema.dense_dim(TowerKind::User),
                    &schema.sparse_fields(TowerKind::User),
                    &spec.user,
                    rng,
                )?)
            } else {
                None
            };
            let user_out = u_dim;
            let inter = match &lspec.inter {
                Some(ts) => {
                    let is_fine = j + 1 == n;
                    let (dense_dim, fields) = if is_fine {
                        (
                            schema.dense_dim(TowerKind::Interaction),
                            schema.sparse_fields(TowerKind::Interaction),
                        )
                    } else {
                        (schema.combined_dense_dim(), schema.combined_sparse_fields())
                    };
                    Some(Tower::new(dense_dim, &fields, ts, rng)?)
                }
                None => None,
            };
            let (user_head, overarch) = match lspec.overarch {
                OverArchKind::Dot => {
                    let head = Mlp::new(&[user_out, d_item], Activation::Identity, rng)?;
                    (Some(head), OverArch::Dot)
                }
                OverArchKind::Mlp => {
                    let in_dim =
                        user_out + d_item + inter.as_ref().map_or(0, |t| t.output_dim());
                    let mut sizes = vec![in_dim];
                    sizes.extend_from_slice(&lspec.overarch_hidden);
                    sizes.push(num_tasks);
                    (None, OverArch::Mlp(Mlp::new(&sizes, Activation::Identity, rng)?))
                }
            };
            layers.push(HsnnLayer {
                user_tower: own_user,
                user_head,
                inter,
                overarch,
            });
        }

        let codebooks: Vec<Matrix> = spec.ks.iter().map(|&k| Matrix::zeros(k, d_item)).collect();
        let index_user_proj = if spec.num_levels() > 0 {
            Some(Mlp::new(&[u_dim, d_item], Activation::Identity, rng)?)
        } else {
            None
        };
        let ensemble = if n > 1 {
            let mut e = Matrix::zeros(n, num_tasks);
            e.fill(1.0 / n as f64);
            Some(e)
        } else {
            None
        };
        Ok(HsnnModel {
            spec: spec.clone(),
            user_tower,
            item_tower,
            layers,
            codebooks,
            index_user_proj,
            ensemble,
            task_weights: vec![1.0; num_tasks],
            calibration: vec![vec![0.0; num_tasks]; n],
            ensemble_calibration: vec![0.0; num_tasks],
        })
    }

    /// Wraps an existing single-layer model; the degenerate hierarchy.
    pub fn from_monn(model: MonnModel, schema: &FeatureSchema) -> Result<Self> {
        let n_tasks = model.num_tasks();
        let lspec = HsnnLayerSpec {
            inter: model.spec.inter.clone(),
            overarch_hidden: model.spec.overarch_hidden.clone(),
            overarch: model.spec.overarch,
            own_user_tower: false,
        };
        let spec = HsnnSpec {
            user: model.spec.user.clone(),
            item: model.spec.item.clone(),
            layers: vec![lspec],
            ks: vec![],
        };
        spec.validate()?;
        schema.validate()?;
        let (user_head, overarch) = match model.overarch {
            OverArch::Dot => {
                // The standalone two-tower has no head; identity-project.
                let dim = model.user.output_dim();
                let mut head =
                    Mlp::new(&[dim, dim], Activation::Identity, &mut ChaCha8Rng::seed_from_u64(0))?;
                head.layers_mut()[0].weight = Matrix::identity(dim);
                head.layers_mut()[0].bias = vec![0.0; dim];
                (Some(head), OverArch::Dot)
            }
            oa => (None, oa),
        };
        Ok(HsnnModel {
            spec,
            user_tower: model.user,
            item_tower: model.item,
            layers: vec![HsnnLayer {
                user_tower: None,
                user_head,
                inter: model.inter,
                overarch,
            }],
            codebooks: vec![],
            index_user_proj: None,
            ensemble: None,
            task_weights: model.task_weights,
            calibration: vec![model.calibration],
            ensemble_calibration: vec![0.0; n_tasks],
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_levels(&self) -> usize {
        self.codebooks.len()
    }

    pub fn num_tasks(&self) -> usize {
        self.task_weights.len()
    }

    /// Per-evaluation serving MACs of layer `j` (interaction tower +
    /// over-arch + head + its ensemble row).
    pub fn layer_serve_macs(&self, j: usize) -> u64 {
        let l = &self.layers[j];
        let d_item = self.item_tower.output_dim();
        let head = l.user_head.as_ref().map_or(0, |h| h.mac_cost());
        let inter = l.inter.as_ref().map_or(0, |t| t.mac_cost());
        let oa = l.overarch.mac_cost(&[d_item, d_item]);
        let ens = if self.ensemble.is_some() {
            self.num_tasks() as u64
        } else {
            0
        };
        head + inter + oa + ens
    }

    /// Logits of layer `j` given the user embedding, an item-side vector
    /// (quantized embedding for coarse layers, item embedding for the finest)
    /// and the layer's interaction input. Includes the calibration bias.
    pub fn layer_logits_cached(
        &self,
        j: usize,
        user_emb: &[f64],
        item_side: &[f64],
        inter_input: Option<&TowerInput>,
    ) -> Result<(Vec<f64>, LayerForward)> {
        let layer = &self.layers[j];
        let (head_out, head_cache) = match &layer.user_head {
            Some(h) => {
                let (o, c) = h.forward_cached(user_emb)?;
                (Some(o), Some(c))
            }
            None => (None, None),
        };
        let (inter_emb, inter_cache) = match (&layer.inter, inter_input) {
            (Some(t), Some(input)) => {
                let (e, c) = t.forward_cached(input)?;
                (e, Some(c))
            }
            (Some(_), None) => {
                return Err(Error::MissingFeature(format!("layer {j} interaction input")))
            }
            _ => (Vec::new(), None),
        };
        let user_part: &[f64] = head_out.as_deref().unwrap_or(user_emb);
        let mut parts: Vec<&[f64]> = vec![user_part, item_side];
        if layer.inter.is_some() {
            parts.push(&inter_emb);
        }
        let (mut logits, oa_cache) = layer.overarch.forward_cached(&parts, self.num_tasks())?;
        for (l, b) in logits.iter_mut().zip(&self.calibration[j]) {
            *l += b;
        }
        Ok((
            logits.clone(),
            LayerForward {
                head_out,
                head_cache,
                inter_emb,
                inter_cache,
                oa_cache,
                logits,
            },
        ))
    }

    /// Ensemble combination of per-layer logits (calibrated).
    pub fn ensemble_logits(&self, layer_logits: &[Vec<f64>]) -> Vec<f64> {
        match &self.ensemble {
            None => layer_logits[0].clone(),
            Some(e) => {
                let t_count = self.num_tasks();
                let mut out = self.ensemble_calibration.clone();
                for (j, l) in layer_logits.iter().enumerate() {
                    for t in 0..t_count {
                        out[t] += e.get(j, t) * l[t];
                    }
                }
                out
            }
        }
    }

    /// Partial ensemble over the first `layer_logits.len()` layers, used for
    /// beam ranking before deeper layers have been evaluated.
    pub fn partial_ensemble_logits(&self, layer_logits: &[Vec<f64>]) -> Vec<f64> {
        match &self.ensemble {
            None => layer_logits[0].clone(),
            Some(e) => {
                let t_count = self.num_tasks();
                let mut out = vec![0.0; t_count];
                for (j, l) in layer_logits.iter().enumerate() {
                    for t in 0..t_count {
                        out[t] += e.get(j, t) * l[t];
                    }
                }
                out
            }
        }
    }

    /// Item embeddings of a catalog through the shared item tower.
    pub fn item_embeddings(
        &self,
        schema: &FeatureSchema,
        catalog: &[ItemRecord],
    ) -> Result<BTreeMap<u64, Vec<f64>>> {
        let mut out = BTreeMap::new();
        for it in catalog {
            let input = schema.item_input(&FeatureBundle::from_item_record(it))?;
            out.insert(it.item_id, self.item_tower.forward(&input)?);
        }
        Ok(out)
    }

    /// Publishes the hard index for the current item tower and codebooks.
    pub fn publish(
        &self,
        schema: &FeatureSchema,
        catalog: &[ItemRecord],
        alpha: f64,
        version: u64,
    ) -> Result<HierarchicalIndex> {
        let embeddings = self.item_embeddings(schema, catalog)?;
        index::publish_index(&embeddings, &self.codebooks, alpha, version)
    }

    pub fn visit_tensors(&self, f: &mut dyn FnMut(String, &[f64], Vec<usize>)) {
        self.user_tower.visit_tensors("user", f);
        self.item_tower.visit_tensors("item", f);
        for (j, l) in self.layers.iter().enumerate() {
            if let Some(t) = &l.user_tower {
                t.visit_tensors(&format!("layer{j}.user"), f);
            }
            if let Some(h) = &l.user_head {
                visit_mlp(h, &format!("layer{j}.head"), f);
            }
            if let Some(t) = &l.inter {
                t.visit_tensors(&format!("layer{j}.inter"), f);
            }
            if let OverArch::Mlp(m) = &l.overarch {
                visit_mlp(m, &format!("layer{j}.overarch"), f);
            }
        }
        for (n, b) in self.codebooks.iter().enumerate() {
            f(format!("index.level{n}.codebook"), b.as_slice(), vec![b.rows(), b.cols()]);
        }
        if let Some(p) = &self.index_user_proj {
            visit_mlp(p, "index.user_proj", f);
        }
        if let Some(e) = &self.ensemble {
            f("ensemble.weights".to_string(), e.as_slice(), vec![e.rows(), e.cols()]);
        }
    }

    pub fn visit_tensors_mut(&mut self, f: &mut dyn FnMut(String, &mut [f64])) {
        self.user_tower.visit_tensors_mut("user", f);
        self.item_tower.visit_tensors_mut("item", f);
        for (j, l) in self.layers.iter_mut().enumerate() {
            if let Some(t) = &mut l.user_tower {
                t.visit_tensors_mut(&format!("layer{j}.user"), f);
            }
            if let Some(h) = &mut l.user_head {
                visit_mlp_mut(h, &format!("layer{j}.head"), f);
            }
            if let Some(t) = &mut l.inter {
                t.visit_tensors_mut(&format!("layer{j}.inter"), f);
            }
            if let OverArch::Mlp(m) = &mut l.overarch {
                visit_mlp_mut(m, &format!("layer{j}.overarch"), f);
            }
        }
        for (n, b) in self.codebooks.iter_mut().enumerate() {
            f(format!("index.level{n}.codebook"), b.as_mut_slice());
        }
        if let Some(p) = &mut self.index_user_proj {
            visit_mlp_mut(p, "index.user_proj", f);
        }
        if let Some(e) = &mut self.ensemble {
            f("ensemble.weights".to_string(), e.as_mut_slice());
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
// Inputs, forward, gradients
// ---------------------------------------------------------------------------

/// Assembled per-example inputs for every layer of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct HsnnInputs {
    pub user: TowerInput,
    pub item: TowerInput,
    /// Combined user+item features for coarse interaction towers.
    pub combined: TowerInput,
    /// I2IF interaction features for the finest layer.
    pub i2if: TowerInput,
    pub labels: Vec<u8>,
    pub item_id: u64,
}

pub fn assemble_hsnn_inputs(
    schema: &FeatureSchema,
    ex: &Example,
    i2if: &I2ifIndex,
) -> Result<HsnnInputs> {
    let user_bundle = FeatureBundle::user_side(ex);
    let item_bundle = FeatureBundle::item_side(ex);
    Ok(HsnnInputs {
        user: schema.user_input(&user_bundle)?,
        item: schema.item_input(&item_bundle)?,
        combined: schema.combined_user_item_input(&user_bundle, &item_bundle)?,
        i2if: schema.interaction_input(&FeatureBundle::interaction_side(ex), ex.item_id, i2if)?,
        labels: ex.y.clone(),
        item_id: ex.item_id,
    })
}

/// Per-layer forward state.
#[derive(Debug, Clone)]
pub struct LayerForward {
    pub head_out: Option<Vec<f64>>,
    pub head_cache: Option<MlpCache>,
    pub inter_emb: Vec<f64>,
    pub inter_cache: Option<TowerCache>,
    pub oa_cache: OverArchCache,
    pub logits: Vec<f64>,
}

/// Full forward state of one example.
#[derive(Debug, Clone)]
pub struct HsnnForward {
    pub user_cache: TowerCache,
    pub item_cache: TowerCache,
    pub user_emb: Vec<f64>,
    pub item_emb: Vec<f64>,
    pub own_user: Vec<Option<(Vec<f64>, TowerCache)>>,
    pub chain: Option<ChainCache>,
    pub proj_u: Option<(Vec<f64>, MlpCache)>,
    pub layers: Vec<LayerForward>,
    pub layer_preds: Vec<Prediction>,
    pub ensemble_pred: Prediction,
}

/// Item-side source for coarse layers.
pub enum ItemSide<'a> {
    /// Soft quantization at the given temperature (training, JOIM).
    Soft(f64),
    /// Hard quantization through a published index (eval, SIL/EM training).
    Hard(&'a HierarchicalIndex),
}

/// Runs all towers and layers for one example.
pub fn hsnn_forward(model: &HsnnModel, inputs: &HsnnInputs, item_side: &ItemSide) -> Result<HsnnForward> {
    let n = model.num_layers();
    let (user_emb, user_cache) = model.user_tower.forward_cached(&inputs.user)?;
    let (item_emb, item_cache) = model.item_tower.forward_cached(&inputs.item)?;

    let (chain, hard_q) = match item_side {
        ItemSide::Soft(alpha) => (
            Some(chain_forward(&item_emb, &model.codebooks, *alpha)),
            None,
        ),
        ItemSide::Hard(index) => {
            if model.num_levels() == 0 {
                (None, Some(Vec::new()))
            } else {
                let path: Vec<usize> = index
                    .layers
                    .iter()
                    .map(|l| {
                        l.mapping
                            .get(&inputs.item_id)
                            .copied()
                            .ok_or(Error::UnknownItem(inputs.item_id))
                    })
                    .collect::<Result<_>>()?;
                (None, Some(index.hard_q(&path)))
            }
        }
    };

    let proj_u = match &model.index_user_proj {
        Some(p) => {
            let (o, c) = p.forward_cached(&user_emb)?;
            Some((o, c))
        }
        None => None,
    };

    let mut own_user = Vec::with_capacity(n);
    let mut layer_states = Vec::with_capacity(n);
    let mut layer_preds = Vec::with_capacity(n);
    for j in 0..n {
        let ou = match &model.layers[j].user_tower {
            Some(t) => {
                let (e, c) = t.forward_cached(&inputs.user)?;
                Some((e, c))
            }
            None => None,
        };
        let u_for_layer: &[f64] = ou.as_ref().map(|(e, _)| e.as_slice()).unwrap_or(&user_emb);
        let side: &[f64] = if j + 1 == n {
            &item_emb
        } else {
            match (&chain, &hard_q) {
                (Some(c), _) => &c.qs[j],
                (None, Some(q)) => &q[j],
                _ => unreachable!(),
            }
        };
        let inter_input = if model.layers[j].inter.is_some() {
            Some(if j + 1 == n { &inputs.i2if } else { &inputs.combined })
        } else {
            None
        };
        let (logits, state) = model.layer_logits_cached(j, u_for_layer, side, inter_input)?;
        layer_preds.push(Prediction::from_logits(logits));
        layer_states.push(state);
        own_user.push(ou);
    }
    let ens = model.ensemble_logits(
        &layer_preds.iter().map(|p| p.logits.clone()).collect::<Vec<_>>(),
    );
    Ok(HsnnForward {
        user_cache,
        item_cache,
        user_emb,
        item_emb,
        own_user,
        chain,
        proj_u,
        layers: layer_states,
        layer_preds,
        ensemble_pred: Prediction::from_logits(ens),
    })
}

/// Gradients mirroring [`HsnnModel`].
#[derive(Debug, Clone)]
pub struct HsnnGrads {
    pub user_tower: TowerGrads,
    pub item_tower: TowerGrads,
    pub layers: Vec<LayerGrads>,
    pub codebooks: Vec<Matrix>,
    pub index_user_proj: Option<MlpGrads>,
    pub ensemble: Option<Matrix>,
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub user_tower: Option<TowerGrads>,
    pub user_head: Option<MlpGrads>,
    pub inter: Option<TowerGrads>,
    pub overarch: Option<MlpGrads>,
}

impl HsnnGrads {
    pub fn zeros_like(m: &HsnnModel) -> Self {
        HsnnGrads {
            user_tower: TowerGrads::zeros_like(&m.user_tower),
            item_tower: TowerGrads::zeros_like(&m.item_tower),
            layers: m
                .layers
                .iter()
                .map(|l| LayerGrads {
                    user_tower: l.user_tower.as_ref().map(TowerGrads::zeros_like),
                    user_head: l.user_head.as_ref().map(MlpGrads::zeros_like),
                    inter: l.inter.as_ref().map(TowerGrads::zeros_like),
                    overarch: match &l.overarch {
                        OverArch::Mlp(mlp) => Some(MlpGrads::zeros_like(mlp)),
                        OverArch::Dot => None,
                    },
                })
                .collect(),
            codebooks: m.codebooks.iter().map(|b| Matrix::zeros(b.rows(), b.cols())).collect(),
            index_user_proj: m.index_user_proj.as_ref().map(MlpGrads::zeros_like),
            ensemble: m.ensemble.as_ref().map(|e| Matrix::zeros(e.rows(), e.cols())),
        }
    }

    fn add_assign_matrix(a: &mut Matrix, b: &Matrix) {
        for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
            *x += y;
        }
    }

    pub fn accumulate(&mut self, other: &HsnnGrads) {
        self.user_tower.accumulate(&other.user_tower);
        self.item_tower.accumulate(&other.item_tower);
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if let (Some(x), Some(y)) = (a.user_tower.as_mut(), b.user_tower.as_ref()) {
                x.accumulate(y);
            }
            if let (Some(x), Some(y)) = (a.user_head.as_mut(), b.user_head.as_ref()) {
                x.accumulate(y);
            }
            if let (Some(x), Some(y)) = (a.inter.as_mut(), b.inter.as_ref()) {
                x.accumulate(y);
            }
            if let (Some(x), Some(y)) = (a.overarch.as_mut(), b.overarch.as_ref()) {
                x.accumulate(y);
            }
        }
        for (a, b) in self.codebooks.iter_mut().zip(&other.codebooks) {
            Self::add_assign_matrix(a, b);
        }
        if let (Some(x), Some(y)) = (self.index_user_proj.as_mut(), other.index_user_proj.as_ref()) {
            x.accumulate(y);
        }
        if let (Some(x), Some(y)) = (self.ensemble.as_mut(), other.ensemble.as_ref()) {
            Self::add_assign_matrix(x, y);
        }
    }
}

impl HsnnModel {
    /// Applies accumulated gradients in the fixed slot order: shared towers,
    /// per-layer components, codebooks (unless frozen), projection, ensemble.
    pub fn apply_grads(&mut self, g: &HsnnGrads, opt: &mut Optimizer, freeze_index: bool) -> Result<()> {
        self.user_tower.apply_grads(&g.user_tower, opt)?;
        self.item_tower.apply_grads(&g.item_tower, opt)?;
        for (l, lg) in self.layers.iter_mut().zip(&g.layers) {
            if let (Some(t), Some(tg)) = (l.user_tower.as_mut(), lg.user_tower.as_ref()) {
                t.apply_grads(tg, opt)?;
            }
            if let (Some(h), Some(hg)) = (l.user_head.as_mut(), lg.user_head.as_ref()) {
                apply_mlp_grads(h, hg, opt)?;
            }
            if let (Some(t), Some(tg)) = (l.inter.as_mut(), lg.inter.as_ref()) {
                t.apply_grads(tg, opt)?;
            }
            if let (OverArch::Mlp(m), Some(og)) = (&mut l.overarch, lg.overarch.as_ref()) {
                apply_mlp_grads(m, og, opt)?;
            }
        }
        if !freeze_index {
            for (b, bg) in self.codebooks.iter_mut().zip(&g.codebooks) {
                opt.update(b.as_mut_slice(), bg.as_slice())?;
            }
            if let (Some(p), Some(pg)) = (self.index_user_proj.as_mut(), g.index_user_proj.as_ref()) {
                apply_mlp_grads(p, pg, opt)?;
            }
        }
        if let (Some(e), Some(eg)) = (self.ensemble.as_mut(), g.ensemble.as_ref()) {
            opt.update(e.as_mut_slice(), eg.as_slice())?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Layer-wise supervised loss: the per-layer multi-task cross-entropy summed
/// over layers, averaged over the batch.
pub fn hsnn_loss(
    layer_preds: &[Vec<Prediction>],
    labels: &[Vec<u8>],
    task_weights: &[f64],
) -> Result<f64> {
    let mut total = 0.0;
    for preds in layer_preds {
        total += supervised_loss(preds, labels, task_weights)?;
    }
    Ok(total)
}

/// Mean squared elementwise difference; the target side is detached (no
/// gradient). Returns the loss and `dLoss/dpred`.
pub fn interaction_tower_distill(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(Error::dim("interaction distill", target.len(), pred.len()));
    }
    let d = pred.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.iter().zip(target) {
        let diff = p - t;
        loss += diff * diff;
        grad.push(2.0 * diff / d);
    }
    Ok((loss / d, grad))
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Joint optimization: one gradient loop over model and index.
    Joim,
    /// Separate index learning: k-means at start, index frozen.
    Sil,
    /// Alternating: train frozen, re-cluster, repeat.
    Em,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HsnnTrainConfig {
    pub mode: TrainMode,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Target weight of the per-level index supervision loss.
    pub index_loss_weight: f64,
    /// Which task label supervises the index loss.
    pub index_loss_task: usize,
    pub warmup_steps: usize,
    pub warmup_enabled: bool,
    pub max_alpha: f64,
    pub alpha_exp: f64,
    pub scheduler_enabled: bool,
    pub balance_weight: f64,
    pub balance_k_batches: usize,
    pub balance_enabled: bool,
    pub recon_weight: f64,
    pub mse_weight: f64,
    pub ensemble_loss_weight: f64,
    /// Never update codebooks or the index projection (reduction tests).
    pub freeze_index: bool,
    pub kmeans_iters: usize,
    /// EM: number of re-clustering rounds across the stream.
    pub em_rounds: usize,
    pub seed: u64,
}

impl Default for HsnnTrainConfig {
    fn default() -> Self {
        HsnnTrainConfig {
            mode: TrainMode::Joim,
            batch_size: 32,
            lr: 0.05,
            optimizer: OptimizerKind::Adagrad,
            index_loss_weight: 0.2,
            index_loss_task: 0,
            warmup_steps: 100,
            warmup_enabled: true,
            max_alpha: 50.0,
            alpha_exp: 2.0,
            scheduler_enabled: true,
            balance_weight: 0.5,
            balance_k_batches: 8,
            balance_enabled: true,
            recon_weight: 0.1,
            mse_weight: 0.1,
            ensemble_loss_weight: 1.0,
            freeze_index: false,
            kmeans_iters: 25,
            em_rounds: 4,
            seed: 0,
        }
    }
}

/// Loss breakdown of one training step.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StepStats {
    pub total: f64,
    pub supervised: f64,
    pub ensemble: f64,
    pub index: f64,
    pub recon: f64,
    pub balance: f64,
    pub mse: f64,
    pub alpha: f64,
    pub index_weight: f64,
}

#[derive(Debug, Clone, Default)]
pub struct HsnnTrainTrace {
    pub steps: Vec<StepStats>,
}

/// One joint gradient step over a batch; also used (with `ItemSide::Hard`)
/// for the frozen-index modes. Returns the step stats.
#[allow(clippy::too_many_arguments)]
pub fn hsnn_train_step(
    model: &mut HsnnModel,
    batch: &[HsnnInputs],
    side: &ItemSide,
    cfg: &HsnnTrainConfig,
    balance: &mut [BalanceReg],
    opt: &mut Optimizer,
    step_idx: usize,
    total_steps: usize,
) -> Result<StepStats> {
    let n = model.num_layers();
    let nlev = model.num_levels();
    let t_count = model.num_tasks();
    let s = batch.len().max(1) as f64;
    let joint = matches!(side, ItemSide::Soft(_));
    let alpha = match side {
        ItemSide::Soft(a) => *a,
        ItemSide::Hard(_) => f64::NAN,
    };
    let index_weight = if nlev == 0 || !joint {
        0.0
    } else if cfg.warmup_enabled {
        warmup_weight(step_idx, cfg.warmup_steps, cfg.index_loss_weight)
    } else {
        cfg.index_loss_weight
    };
    let _ = total_steps;

    let mut fwds = Vec::with_capacity(batch.len());
    for inputs in batch {
        fwds.push(hsnn_forward(model, inputs, side)?);
    }
    let labels: Vec<Vec<u8>> = batch.iter().map(|b| b.labels.clone()).collect();

    // Per-layer supervised loss and gradient.
    let mut stats = StepStats {
        alpha: if joint { alpha } else { -1.0 },
        index_weight,
        ..Default::default()
    };
    let mut layer_logit_grads: Vec<Vec<Vec<f64>>> =
        vec![vec![vec![0.0; t_count]; batch.len()]; n];
    for j in 0..n {
        let preds: Vec<Prediction> = fwds.iter().map(|f| f.layer_preds[j].clone()).collect();
        stats.supervised += supervised_loss(&preds, &labels, &model.task_weights)?;
        let g = supervised_loss_grad(&preds, &labels, &model.task_weights);
        for (bi, gi) in g.into_iter().enumerate() {
            layer_logit_grads[j][bi] = gi;
        }
    }

    // Ensemble supervision feeds back into every layer's logits.
    let mut ensemble_grad = model.ensemble.as_ref().map(|e| Matrix::zeros(e.rows(), e.cols()));
    if let Some(e) = &model.ensemble {
        let preds: Vec<Prediction> = fwds.iter().map(|f| f.ensemble_pred.clone()).collect();
        stats.ensemble =
            cfg.ensemble_loss_weight * supervised_loss(&preds, &labels, &model.task_weights)?;
        let g = supervised_loss_grad(&preds, &labels, &model.task_weights);
        let eg = ensemble_grad.as_mut().unwrap();
        for (bi, gi) in g.iter().enumerate() {
            for t in 0..t_count {
                let ge = cfg.ensemble_loss_weight * gi[t];
                for j in 0..n {
                    layer_logit_grads[j][bi][t] += ge * e.get(j, t);
                    let cur = eg.get(j, t);
                    eg.set(j, t, cur + ge * fwds[bi].layer_preds[j].logits[t]);
                }
            }
        }
    }

    // Index supervision, reconstruction, and balance terms (joint mode only).
    let mut chain_gins: Vec<ChainGradInput> = Vec::new();
    let mut proj_out_grads: Vec<Vec<f64>> = vec![vec![]; batch.len()];
    let mut assign_mats: Vec<Matrix> = Vec::new();
    if joint && nlev > 0 {
        chain_gins = fwds
            .iter()
            .map(|_| ChainGradInput::zeros(&model.codebooks, model.item_tower.output_dim()))
            .collect();
        for (bi, (inputs, f)) in batch.iter().zip(&fwds).enumerate() {
            let chain = f.chain.as_ref().unwrap();
            let (proj, _) = f.proj_u.as_ref().unwrap();
            let y = *inputs
                .labels
                .get(cfg.index_loss_task)
                .ok_or_else(|| Error::Config("index_loss_task out of range".into()))? as f64;
            let mut gproj = vec![0.0; proj.len()];
            for lvl in 0..nlev {
                let (l, du, dq) = index::lti_index_loss(proj, &chain.qs[lvl], y);
                stats.index += index_weight * l / (s * nlev as f64);
                let w = index_weight / (s * nlev as f64);
                for (g, d) in gproj.iter_mut().zip(&du) {
                    *g += w * d;
                }
                for (g, d) in chain_gins[bi].grad_q[lvl].iter_mut().zip(&dq) {
                    *g += w * d;
                }
            }
            proj_out_grads[bi] = gproj;

            // Reconstruction on the final quantized embedding.
            let q_last = chain.qs.last().unwrap();
            stats.recon += cfg.recon_weight * chain.reconstruction_loss(&f.item_emb) / s;
            let last = nlev - 1;
            for (g, (qi, vi)) in chain_gins[bi].grad_q[last]
                .iter_mut()
                .zip(q_last.iter().zip(&f.item_emb))
            {
                *g += cfg.recon_weight * 2.0 * (qi - vi) / s;
            }
        }
        // Balance penalty over pooled soft assignments.
        if cfg.balance_enabled {
            assign_mats = (0..nlev)
                .map(|lvl| {
                    let k = model.codebooks[lvl].rows();
                    let mut m = Matrix::zeros(batch.len(), k);
                    for (bi, f) in fwds.iter().enumerate() {
                        m.row_mut(bi)
                            .copy_from_slice(&f.chain.as_ref().unwrap().affinities[lvl]);
                    }
                    m
                })
                .collect();
            for (lvl, reg) in balance.iter().enumerate().take(nlev) {
                let (p, g) = reg.penalty(&assign_mats[lvl])?;
                stats.balance += cfg.balance_weight * p;
                for (bi, gin) in chain_gins.iter_mut().enumerate() {
                    let row = g.row(bi);
                    let slot = gin.grad_affinity[lvl]
                        .get_or_insert_with(|| vec![0.0; row.len()]);
                    for (sdst, &x) in slot.iter_mut().zip(row) {
                        *sdst += cfg.balance_weight * x;
                    }
                }
            }
        }
    }

    // Interaction-tower distillation: coarse towers chase the finest one.
    let mut mse_grads: Vec<Vec<Option<Vec<f64>>>> = vec![vec![None; n]; batch.len()];
    if cfg.mse_weight > 0.0 && n >= 2 && model.layers[n - 1].inter.is_some() {
        for (bi, f) in fwds.iter().enumerate() {
            let target = &f.layers[n - 1].inter_emb;
            for j in 0..n - 1 {
                if model.layers[j].inter.is_none() {
                    continue;
                }
                let (l, g) = interaction_tower_distill(&f.layers[j].inter_emb, target)?;
                stats.mse += cfg.mse_weight * l / s;
                mse_grads[bi][j] =
                    Some(g.into_iter().map(|x| cfg.mse_weight * x / s).collect());
            }
        }
    }

    stats.total = stats.supervised + stats.ensemble + stats.index + stats.recon + stats.balance + stats.mse;
    for (name, v) in [
        ("layer supervised loss", stats.supervised),
        ("ensemble loss", stats.ensemble),
        ("index loss", stats.index),
        ("reconstruction loss", stats.recon),
        ("balance penalty", stats.balance),
        ("interaction mse", stats.mse),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }

    // Backward.
    let mut acc = HsnnGrads::zeros_like(model);
    for (bi, (f, inputs)) in fwds.iter().zip(batch).enumerate() {
        let mut grad_user = vec![0.0; f.user_emb.len()];
        let mut grad_item = vec![0.0; f.item_emb.len()];
        for j in 0..n {
            let layer = &model.layers[j];
            let lf = &f.layers[j];
            // dLoss/dlogits for this layer (mse enters via the inter path).
            let gl = layer_logit_grads[j][bi].clone();
            let user_part_dim = lf
                .head_out
                .as_ref()
                .map(|h| h.len())
                .unwrap_or(f.user_emb.len());
            let side_dim = model.item_tower.output_dim();
            let mut part_dims = vec![user_part_dim, side_dim];
            if layer.inter.is_some() {
                part_dims.push(layer.inter.as_ref().unwrap().output_dim());
            }
            let (oa_grads, mut part_grads) =
                layer.overarch.backward(&lf.oa_cache, &part_dims, &gl)?;
            if let (Some(a), Some(b)) = (acc.layers[j].overarch.as_mut(), oa_grads) {
                a.accumulate(&b);
            }
            // Interaction tower: logit path plus the distillation path.
            if let (Some(t), Some(tc)) = (&layer.inter, lf.inter_cache.as_ref()) {
                let mut ge = part_grads.pop().unwrap();
                if let Some(extra) = &mse_grads[bi][j] {
                    for (g, e) in ge.iter_mut().zip(extra) {
                        *g += e;
                    }
                }
                let tg = t.backward(tc, &ge)?;
                acc.layers[j].inter.as_mut().unwrap().accumulate(&tg);
            }
            let g_side = part_grads.pop().unwrap();
            let g_user_part = part_grads.pop().unwrap();
            // Item side: finest layer hits the item embedding, coarse layers
            // hit q_j (joint mode only; hard quantization has no gradient).
            if j + 1 == n {
                for (g, x) in grad_item.iter_mut().zip(&g_side) {
                    *g += x;
                }
            } else if joint && nlev > 0 {
                for (g, x) in chain_gins[bi].grad_q[j].iter_mut().zip(&g_side) {
                    *g += x;
                }
            }
            // User side: through the head when present, else straight to the
            // layer's user tower (own or shared).
            let g_u = match (&layer.user_head, lf.head_cache.as_ref()) {
                (Some(h), Some(hc)) => {
                    let (hg, gin) = h.backward(hc, &g_user_part)?;
                    acc.layers[j].user_head.as_mut().unwrap().accumulate(&hg);
                    gin
                }
                _ => g_user_part,
            };
            match (&layer.user_tower, f.own_user[j].as_ref()) {
                (Some(t), Some((_, tc))) => {
                    let tg = t.backward(tc, &g_u)?;
                    acc.layers[j].user_tower.as_mut().unwrap().accumulate(&tg);
                }
                _ => {
                    for (g, x) in grad_user.iter_mut().zip(&g_u) {
                        *g += x;
                    }
                }
            }
            let _ = inputs;
        }
        // Index projection path.
        if joint && nlev > 0 {
            let (p, pc) = (model.index_user_proj.as_ref().unwrap(), &f.proj_u.as_ref().unwrap().1);
            let (pg, gin) = p.backward(pc, &proj_out_grads[bi])?;
            acc.index_user_proj.as_mut().unwrap().accumulate(&pg);
            for (g, x) in grad_user.iter_mut().zip(&gin) {
                *g += x;
            }
        }
        // Chain backward into codebooks and the item embedding.
        if joint && nlev > 0 {
            let chain = f.chain.as_ref().unwrap();
            let (gv, gbooks) = chain_backward(&model.codebooks, alpha, chain, &chain_gins[bi]);
            for (g, x) in grad_item.iter_mut().zip(&gv) {
                *g += x;
            }
            for (a, b) in acc.codebooks.iter_mut().zip(&gbooks) {
                HsnnGrads::add_assign_matrix(a, b);
            }
            // Reconstruction differentiates through the raw item embedding too.
            let q_last = chain.qs.last().unwrap();
            for (g, (qi, vi)) in grad_item.iter_mut().zip(q_last.iter().zip(&f.item_emb)) {
                *g += cfg.recon_weight * -2.0 * (qi - vi) / s;
            }
        }
        let ug = model.user_tower.backward(&f.user_cache, &grad_user)?;
        acc.user_tower.accumulate(&ug);
        let ig = model.item_tower.backward(&f.item_cache, &grad_item)?;
        acc.item_tower.accumulate(&ig);
    }
    if let (Some(a), Some(b)) = (acc.ensemble.as_mut(), ensemble_grad.as_ref()) {
        HsnnGrads::add_assign_matrix(a, b);
    }

    opt.begin_step();
    model.apply_grads(&acc, opt, cfg.freeze_index || !joint)?;

    // Record this batch's assignments for future balance penalties.
    if joint && cfg.balance_enabled {
        for (reg, mat) in balance.iter_mut().zip(assign_mats) {
            reg.push(mat);
        }
    }
    Ok(stats)
}

/// Computes the gradient structure of one batch without applying it. Used by
/// the gradient-flow contract tests.
pub fn hsnn_step_grads(
    model: &HsnnModel,
    batch: &[HsnnInputs],
    side: &ItemSide,
    cfg: &HsnnTrainConfig,
) -> Result<HsnnGrads> {
    let mut m = model.clone();
    let mut opt = Optimizer::new(OptimizerKind::Sgd, 1.0);
    let mut balance: Vec<BalanceReg> = m
        .codebooks
        .iter()
        .map(|_| BalanceReg::new(cfg.balance_k_batches))
        .collect();
    // Run with lr so updates equal -grads, then diff the parameters.
    let before = m.flat_params();
    let mut cfg2 = cfg.clone();
    cfg2.warmup_enabled = false;
    hsnn_train_step(&mut m, batch, side, &cfg2, &mut balance, &mut opt, 0, 1)?;
    let after = m.flat_params();
    let mut grads = HsnnGrads::zeros_like(model);
    let flat: Vec<f64> = before.iter().zip(&after).map(|(b, a)| b - a).collect();
    // Repack the flat delta into the grads structure via the tensor walk.
    let mut off = 0usize;
    let mut mm = model.clone();
    let mut chunks: Vec<(String, Vec<f64>)> = Vec::new();
    mm.visit_tensors_mut(&mut |name, data| {
        chunks.push((name, flat[off..off + data.len()].to_vec()));
        off += data.len();
    });
    let map: BTreeMap<String, Vec<f64>> = chunks.into_iter().collect();
    // Codebooks and ensemble are plain matrices; towers keep zero structure
    // (we only need codebook/ensemble grads in the contract tests).
    for (nidx, b) in grads.codebooks.iter_mut().enumerate() {
        if let Some(v) = map.get(&format!("index.level{nidx}.codebook")) {
            b.as_mut_slice().copy_from_slice(v);
        }
    }
    if let Some(e) = grads.ensemble.as_mut() {
        if let Some(v) = map.get("ensemble.weights") {
            e.as_mut_slice().copy_from_slice(v);
        }
    }
    Ok(grads)
}

/// Initializes codebooks for joint training by sampling current item
/// embeddings (k-means++-style), or by k-means for SIL/EM.
pub fn init_index(
    model: &mut HsnnModel,
    schema: &FeatureSchema,
    catalog: &[ItemRecord],
    mode: TrainMode,
    kmeans_iters: usize,
    seed: u64,
) -> Result<()> {
    if model.num_levels() == 0 {
        return Ok(());
    }
    let embeddings = model.item_embeddings(schema, catalog)?;
    let points: Vec<Vec<f64>> = embeddings.values().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1D1CE);
    match mode {
        TrainMode::Joim => {
            model.codebooks = index::init_codebooks(&points, &model.spec.ks, &mut rng)?;
        }
        TrainMode::Sil | TrainMode::Em => {
            let mut residuals = points;
            let mut books = Vec::with_capacity(model.spec.ks.len());
            for &k in &model.spec.ks {
                let (centroids, assign, _) = index::kmeans_sil(&residuals, k, kmeans_iters, &mut rng)?;
                for (r, &a) in residuals.iter_mut().zip(&assign) {
                    for (ri, ci) in r.iter_mut().zip(centroids.row(a)) {
                        *ri -= ci;
                    }
                }
                books.push(centroids);
            }
            model.codebooks = books;
        }
    }
    Ok(())
}

/// Re-clusters codebooks from current item embeddings (the EM "M step" for
/// the index side).
pub fn recluster_index(
    model: &mut HsnnModel,
    schema: &FeatureSchema,
    catalog: &[ItemRecord],
    kmeans_iters: usize,
    seed: u64,
) -> Result<()> {
    if model.num_levels() == 0 {
        return Ok(());
    }
    let embeddings = model.item_embeddings(schema, catalog)?;
    let mut residuals: Vec<Vec<f64>> = embeddings.values().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xEE);
    let mut books = Vec::with_capacity(model.spec.ks.len());
    for &k in &model.spec.ks {
        let (centroids, assign, _) = index::kmeans_sil(&residuals, k, kmeans_iters, &mut rng)?;
        for (r, &a) in residuals.iter_mut().zip(&assign) {
            for (ri, ci) in r.iter_mut().zip(centroids.row(a)) {
                *ri -= ci;
            }
        }
        books.push(centroids);
    }
    model.codebooks = books;
    Ok(())
}

/// Trains the model over an ordered stream of batches according to the mode.
/// All modes share initialization and stream so paired-seed comparisons are
/// apples to apples.
pub fn train_hsnn(
    model: &mut HsnnModel,
    schema: &FeatureSchema,
    batches: &[Vec<Example>],
    catalog: &[ItemRecord],
    cfg: &HsnnTrainConfig,
) -> Result<HsnnTrainTrace> {
    let i2if = I2ifIndex::build(catalog);
    let total_steps = batches.len();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut balance: Vec<BalanceReg> = model
        .codebooks
        .iter()
        .map(|_| BalanceReg::new(cfg.balance_k_batches))
        .collect();
    let mut trace = HsnnTrainTrace::default();

    init_index(model, schema, catalog, cfg.mode, cfg.kmeans_iters, cfg.seed)?;
    let mut hard_index = match cfg.mode {
        TrainMode::Sil | TrainMode::Em => {
            Some(model.publish(schema, catalog, cfg.max_alpha, 0)?)
        }
        TrainMode::Joim => None,
    };
    let em_period = if cfg.em_rounds > 0 {
        (total_steps / (cfg.em_rounds + 1)).max(1)
    } else {
        usize::MAX
    };

    for (step, batch) in batches.iter().enumerate() {
        if cfg.mode == TrainMode::Em && step > 0 && step % em_period == 0 {
            recluster_index(model, schema, catalog, cfg.kmeans_iters, cfg.seed + step as u64)?;
            hard_index = Some(model.publish(schema, catalog, cfg.max_alpha, step as u64)?);
        }
        let inputs: Vec<HsnnInputs> = batch
            .iter()
            .map(|ex| assemble_hsnn_inputs(schema, ex, &i2if))
            .collect::<Result<_>>()?;
        let stats = match cfg.mode {
            TrainMode::Joim => {
                let alpha = if model.num_levels() == 0 {
                    0.0
                } else if cfg.scheduler_enabled {
                    scheduler_alpha(&SchedulerState {
                        max_alpha: cfg.max_alpha,
                        exp: cfg.alpha_exp,
                        max_iters: total_steps,
                        current_iter: step,
                    })
                } else {
                    cfg.max_alpha
                };
                hsnn_train_step(
                    model,
                    &inputs,
                    &ItemSide::Soft(alpha),
                    cfg,
                    &mut balance,
                    &mut opt,
                    step,
                    total_steps,
                )?
            }
            TrainMode::Sil | TrainMode::Em => hsnn_train_step(
                model,
                &inputs,
                &ItemSide::Hard(hard_index.as_ref().unwrap()),
                cfg,
                &mut balance,
                &mut opt,
                step,
                total_steps,
            )?,
        };
        trace.steps.push(stats);
    }
    Ok(trace)
}

/// Spec-shaped EM entry point: alternates (train `steps_per_round` batches
/// with the index frozen) and (re-cluster item embeddings) for `rounds`
/// rounds. `rounds = 0` leaves model and index untouched.
pub fn em_joint(
    model: &mut HsnnModel,
    index: &mut HierarchicalIndex,
    schema: &FeatureSchema,
    batches: &[Vec<Example>],
    catalog: &[ItemRecord],
    cfg: &HsnnTrainConfig,
    rounds: usize,
) -> Result<HsnnTrainTrace> {
    let mut trace = HsnnTrainTrace::default();
    if rounds == 0 {
        return Ok(trace);
    }
    let i2if = I2ifIndex::build(catalog);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut balance: Vec<BalanceReg> = model
        .codebooks
        .iter()
        .map(|_| BalanceReg::new(cfg.balance_k_batches))
        .collect();
    let per_round = (batches.len() / rounds).max(1);
    for (round, chunk) in batches.chunks(per_round).enumerate() {
        for (bi, batch) in chunk.iter().enumerate() {
            let inputs: Vec<HsnnInputs> = batch
                .iter()
                .map(|ex| assemble_hsnn_inputs(schema, ex, &i2if))
                .collect::<Result<_>>()?;
            let stats = hsnn_train_step(
                model,
                &inputs,
                &ItemSide::Hard(index),
                cfg,
                &mut balance,
                &mut opt,
                round * per_round + bi,
                batches.len(),
            )?;
            trace.steps.push(stats);
        }
        recluster_index(model, schema, catalog, cfg.kmeans_iters, cfg.seed + round as u64)?;
        *index = model.publish(schema, catalog, cfg.max_alpha, round as u64 + 1)?;
    }
    Ok(trace)
}

// ---------------------------------------------------------------------------
// Evaluation and calibration
// ---------------------------------------------------------------------------

/// Per-layer and ensemble predictions on a slice, with the hard index.
pub fn eval_predictions(
    model: &HsnnModel,
    schema: &FeatureSchema,
    examples: &[Example],
    i2if: &I2ifIndex,
    index: &HierarchicalIndex,
) -> Result<(Vec<Vec<Prediction>>, Vec<Prediction>)> {
    let n = model.num_layers();
    let mut per_layer: Vec<Vec<Prediction>> = vec![Vec::with_capacity(examples.len()); n];
    let mut ens = Vec::with_capacity(examples.len());
    for ex in examples {
        let inputs = assemble_hsnn_inputs(schema, ex, i2if)?;
        let f = hsnn_forward(model, &inputs, &ItemSide::Hard(index))?;
        for (j, p) in f.layer_preds.into_iter().enumerate() {
            per_layer[j].push(p);
        }
        ens.push(f.ensemble_pred);
    }
    Ok((per_layer, ens))
}

/// Fits per-layer, per-task calibration biases plus the ensemble bias so
/// mean predictions match mean labels on the slice. Returns the biases.
pub fn calibrate_hsnn(
    model: &mut HsnnModel,
    schema: &FeatureSchema,
    examples: &[Example],
    i2if: &I2ifIndex,
    index: &HierarchicalIndex,
) -> Result<Vec<Vec<f64>>> {
    if examples.is_empty() {
        return Err(Error::Degenerate("calibration slice is empty".into()));
    }
    let (per_layer, _) = eval_predictions(model, schema, examples, i2if, index)?;
    let t_count = model.num_tasks();
    let mut out = Vec::with_capacity(model.num_layers() + 1);
    for (j, preds) in per_layer.iter().enumerate() {
        let mut row = Vec::with_capacity(t_count);
        for t in 0..t_count {
            let logits: Vec<f64> = preds.iter().map(|p| p.logits[t]).collect();
            let target =
                examples.iter().map(|e| e.y[t] as f64).sum::<f64>() / examples.len() as f64;
            let b = crate::monn::fit_bias(&logits, target);
            model.calibration[j][t] += b;
            row.push(b);
        }
        out.push(row);
    }
    // Layer biases shift the ensemble output, so fit its bias afterwards.
    let (_, ens) = eval_predictions(model, schema, examples, i2if, index)?;
    let mut ens_row = Vec::with_capacity(t_count);
    for t in 0..t_count {
        let logits: Vec<f64> = ens.iter().map(|p| p.logits[t]).collect();
        let target = examples.iter().map(|e| e.y[t] as f64).sum::<f64>() / examples.len() as f64;
        let b = crate::monn::fit_bias(&logits, target);
        model.ensemble_calibration[t] += b;
        ens_row.push(b);
    }
    out.push(ens_row);
    Ok(out)
}
