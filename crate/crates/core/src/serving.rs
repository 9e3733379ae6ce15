//! Serving: split snapshots, the inverted index over per-level cluster ids,
//! layer-wise beam retrieval, budgeted cluster-queue retrieval, and MAC-cost
//! accounting.
//!
//! A snapshot and an inverted index form a publish pair; their versions must
//! match or serving refuses. Both are immutable after load; churn produces a
//! fresh index swapped in by the caller.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::datagen::ItemRecord;
use crate::features::{FeatureBundle, FeatureSchema, I2ifIndex};
use crate::hsnn::HsnnModel;
use crate::monn::schema_hash;
use crate::numerics::Matrix;
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Snapshot
// ---------------------------------------------------------------------------

pub const SERVING_FORMAT_VERSION: u64 = 1;

/// Frozen servable model. On disk it is split into five parts (user tower,
/// item tower, interaction towers, cluster model, over-arch + ensemble), one
/// directory each; in memory the parts reassemble into the layered model.
#[derive(Debug, Clone, PartialEq)]
pub struct ServingSnapshot {
    pub model: HsnnModel,
    pub schema: FeatureSchema,
    /// Publish version; must equal the inverted index version at serve time.
    pub version: u64,
    pub step: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnapshotManifest {
    pub format_version: u64,
    pub version: u64,
    pub step: usize,
    pub spec: crate::hsnn::HsnnSpec,
    pub task_weights: Vec<f64>,
    pub calibration: Vec<Vec<f64>>,
    pub ensemble_calibration: Vec<f64>,
    pub schema_hash: String,
    pub schema: FeatureSchema,
    pub tensors: BTreeMap<String, Vec<usize>>,
}

/// Routes a tensor name to its serving part directory.
fn part_dir(name: &str) -> &'static str {
    if name.starts_with("user.") {
        "user_tower"
    } else if name.starts_with("item.") {
        "item_tower"
    } else if name.contains(".inter") || name.contains(".user") && name.starts_with("layer") {
        "interaction"
    } else if name.starts_with("index.") {
        "cluster_model"
    } else {
        // Layer heads, over-arch networks, ensemble weights.
        "overarch"
    }
}

/// Freezes a trained model into a serving snapshot.
pub fn split_model(
    model: &HsnnModel,
    schema: &FeatureSchema,
    version: u64,
    step: usize,
) -> ServingSnapshot {
    ServingSnapshot {
        model: model.clone(),
        schema: schema.clone(),
        version,
        step,
    }
}

pub fn save_snapshot(snapshot: &ServingSnapshot, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for part in [
        "user_tower",
        "item_tower",
        "interaction",
        "cluster_model",
        "overarch",
    ] {
        std::fs::create_dir_all(dir.join(part))?;
    }
    let mut tensors = BTreeMap::new();
    let mut err = None;
    snapshot.model.visit_tensors(&mut |name, data, dims| {
        if err.is_some() {
            return;
        }
        let path = dir.join(part_dir(&name)).join(artifact::tensor_file_name(&name));
        if let Err(e) = artifact::write_tensor(&path, &dims, data) {
            err = Some(e);
        }
        tensors.insert(name, dims);
    });
    if let Some(e) = err {
        return Err(e);
    }
    let manifest = SnapshotManifest {
        format_version: SERVING_FORMAT_VERSION,
        version: snapshot.version,
        step: snapshot.step,
        spec: snapshot.model.spec.clone(),
        task_weights: snapshot.model.task_weights.clone(),
        calibration: snapshot.model.calibration.clone(),
        ensemble_calibration: snapshot.model.ensemble_calibration.clone(),
        schema_hash: schema_hash(&snapshot.schema),
        schema: snapshot.schema.clone(),
        tensors,
    };
    artifact::write_manifest(&dir.join("manifest.json"), &manifest)
}

pub fn load_snapshot(dir: &Path) -> Result<ServingSnapshot> {
    use rand::SeedableRng;
    let manifest: SnapshotManifest = artifact::read_manifest(&dir.join("manifest.json"))?;
    if manifest.format_version != SERVING_FORMAT_VERSION {
        return Err(Error::Artifact(format!(
            "unsupported snapshot format version {}",
            manifest.format_version
        )));
    }
    if manifest.schema_hash != schema_hash(&manifest.schema) {
        return Err(Error::Artifact("snapshot schema hash mismatch".into()));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut model = HsnnModel::new(
        &manifest.schema,
        &manifest.spec,
        manifest.task_weights.len(),
        &mut rng,
    )?;
    model.task_weights = manifest.task_weights.clone();
    model.calibration = manifest.calibration.clone();
    model.ensemble_calibration = manifest.ensemble_calibration.clone();
    let mut err = None;
    model.visit_tensors_mut(&mut |name, data| {
        if err.is_some() {
            return;
        }
        let path = dir.join(part_dir(&name)).join(artifact::tensor_file_name(&name));
        match artifact::read_tensor(&path) {
            Ok((_, loaded)) if loaded.len() == data.len() => data.copy_from_slice(&loaded),
            Ok((_, loaded)) => {
                err = Some(Error::dim(format!("tensor {name}"), data.len(), loaded.len()))
            }
            Err(e) => err = Some(e),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    Ok(ServingSnapshot {
        model,
        schema: manifest.schema,
        version: manifest.version,
        step: manifest.step,
    })
}

// ---------------------------------------------------------------------------
// Inverted index
// ---------------------------------------------------------------------------

/// Per-item serving payload: cached embedding, hard index path, raw features
/// (for representative-item substitution and I2IF).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemServingRecord {
    pub embedding: Vec<f64>,
    pub path: Vec<usize>,
    pub dense: Vec<f64>,
    pub sparse: BTreeMap<String, Vec<u64>>,
}

impl ItemServingRecord {
    pub fn feature_bundle(&self) -> FeatureBundle {
        FeatureBundle {
            dense: self.dense.clone(),
            sparse: self.sparse.clone(),
        }
    }
}

/// One inverted level: node id -> ascending posting list, plus per-node
/// payload (cluster embedding + representative item).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertedLevel {
    pub postings: Vec<Vec<u64>>,
    pub node_embeddings: Matrix,
    pub representatives: Vec<u64>,
}

/// Inverted index over per-level cluster ids, plus item payloads and the
/// I2IF category index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertedIndex {
    pub levels: Vec<InvertedLevel>,
    pub items: BTreeMap<u64, ItemServingRecord>,
    pub i2if: I2ifIndex,
    pub version: u64,
}

impl InvertedIndex {
    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    /// Max/mean occupancy ratio of a level's posting lists.
    pub fn occupancy_ratio(&self, level: usize) -> f64 {
        let sizes: Vec<usize> = self.levels[level].postings.iter().map(|p| p.len()).collect();
        let max = sizes.iter().copied().max().unwrap_or(0) as f64;
        let mean = sizes.iter().sum::<usize>() as f64 / sizes.len().max(1) as f64;
        if mean == 0.0 {
            0.0
        } else {
            max / mean
        }
    }
}

/// Builds the inverted index from the snapshot's item tower and cluster
/// model: the item tower yields embedding and cluster assignment for every
/// live item, so fresh items are indexed the moment they appear.
pub fn build_inverted_index(
    snapshot: &ServingSnapshot,
    catalog: &[ItemRecord],
) -> Result<InvertedIndex> {
    let model = &snapshot.model;
    let schema = &snapshot.schema;
    let nlev = model.num_levels();
    let mut items = BTreeMap::new();
    let mut postings: Vec<BTreeMap<usize, Vec<u64>>> = vec![BTreeMap::new(); nlev];
    for it in catalog {
        let bundle = FeatureBundle::from_item_record(it);
        let input = schema.item_input(&bundle)?;
        let embedding = model.item_tower.forward(&input)?;
        let path = crate::index::hard_path(&embedding, &model.codebooks);
        for (lvl, &node) in path.iter().enumerate() {
            postings[lvl].entry(node).or_insert_with(Vec::new).push(it.item_id);
        }
        items.insert(
            it.item_id,
            ItemServingRecord {
                embedding,
                path,
                dense: bundle.dense,
                sparse: bundle.sparse,
            },
        );
    }
    let mut levels = Vec::with_capacity(nlev);
    for (lvl, book) in model.codebooks.iter().enumerate() {
        let mut lists = vec![Vec::new(); book.rows()];
        for (node, ids) in &postings[lvl] {
            let mut ids = ids.clone();
            ids.sort_unstable();
            lists[*node] = ids;
        }
        // Representatives: globally closest item at this level's residual.
        let residual_items: Vec<(u64, Vec<f64>)> = items
            .iter()
            .map(|(&id, rec)| {
                let mut r = rec.embedding.clone();
                for (l, &node) in rec.path.iter().enumerate().take(lvl) {
                    for (ri, ci) in r.iter_mut().zip(model.codebooks[l].row(node)) {
                        *ri -= ci;
                    }
                }
                (id, r)
            })
            .collect();
        let representatives = crate::index::select_representatives(book, &residual_items)?;
        levels.push(InvertedLevel {
            postings: lists,
            node_embeddings: book.clone(),
            representatives,
        });
    }
    let i2if = I2ifIndex::build(catalog);
    Ok(InvertedIndex {
        levels,
        items,
        i2if,
        version: snapshot.version,
    })
}

// ---------------------------------------------------------------------------
// Cost accounting
// ---------------------------------------------------------------------------

/// Multiply-accumulate counters for one request. Counters are monotone
/// within a request; embedding-table pooling is lookup work and not counted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostCounter {
    pub user_tower_macs: u64,
    /// Per model layer: (evaluations, MACs).
    pub layer_evals: Vec<u64>,
    pub layer_macs: Vec<u64>,
}

impl CostCounter {
    pub fn new(num_layers: usize) -> Self {
        CostCounter {
            user_tower_macs: 0,
            layer_evals: vec![0; num_layers],
            layer_macs: vec![0; num_layers],
        }
    }

    pub fn total_macs(&self) -> u64 {
        self.user_tower_macs + self.layer_macs.iter().sum::<u64>()
    }

    pub fn items_scored(&self) -> u64 {
        *self.layer_evals.last().unwrap_or(&0)
    }
}

/// Measured-vs-formula comparison in the style of the theoretical cost model
/// `sum_j M_j * evals_j`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub counter: CostCounter,
    pub per_layer_unit_macs: Vec<u64>,
    /// `sum_j M_j * evals_j`, the theoretical per-candidate cost.
    pub formula_macs: u64,
    /// Measured per-candidate scoring MACs (user tower excluded; it is a
    /// per-request constant outside the formula).
    pub measured_scoring_macs: u64,
    pub user_tower_macs: u64,
    pub relative_gap: f64,
}

/// Evaluates the theoretical formula against the measured counters.
pub fn account_cost(model: &HsnnModel, counter: &CostCounter) -> CostReport {
    let per_layer_unit_macs: Vec<u64> =
        (0..model.num_layers()).map(|j| model.layer_serve_macs(j)).collect();
    let formula: u64 = per_layer_unit_macs
        .iter()
        .zip(&counter.layer_evals)
        .map(|(m, e)| m * e)
        .sum();
    let measured = counter.layer_macs.iter().sum::<u64>();
    let gap = if formula == 0 {
        if measured == 0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (measured as f64 - formula as f64).abs() / formula as f64
    };
    CostReport {
        counter: counter.clone(),
        per_layer_unit_macs,
        formula_macs: formula,
        measured_scoring_macs: measured,
        user_tower_macs: counter.user_tower_macs,
        relative_gap: gap,
    }
}

// ---------------------------------------------------------------------------
// Retrieval
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalBudget {
    /// Surviving nodes per level (coarse to fine); missing entries mean
    /// exhaustive.
    pub beams: Vec<usize>,
    /// Items returned.
    pub top_k: usize,
    /// Max items scored by the finest layer (time-budget proxy).
    pub max_items_scored: usize,
}

impl RetrievalBudget {
    pub fn exhaustive(top_k: usize) -> Self {
        RetrievalBudget {
            beams: vec![],
            top_k,
            max_items_scored: usize::MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub item_id: u64,
    pub score: f64,
}

/// Serving-side per-request state: the user embedding computed once, plus
/// the interaction query features.
struct RequestCtx<'a> {
    user_emb: Vec<f64>,
    user_bundle: &'a FeatureBundle,
    inter_query: &'a FeatureBundle,
}

fn check_versions(snapshot: &ServingSnapshot, inverted: &InvertedIndex) -> Result<()> {
    if snapshot.version != inverted.version {
        return Err(Error::VersionSkew {
            snapshot: snapshot.version,
            index: inverted.version,
        });
    }
    Ok(())
}

fn prepare_request<'a>(
    snapshot: &ServingSnapshot,
    user_bundle: &'a FeatureBundle,
    inter_query: &'a FeatureBundle,
    counter: &mut CostCounter,
) -> Result<RequestCtx<'a>> {
    let input = snapshot.schema.user_input(user_bundle)?;
    let user_emb = snapshot.model.user_tower.forward(&input)?;
    counter.user_tower_macs += snapshot.model.user_tower.mac_cost();
    Ok(RequestCtx {
        user_emb,
        user_bundle,
        inter_query,
    })
}

/// Scores model layer `j` for a coarse node prefix (item side = cumulative
/// hard quantized embedding; interaction features from the representative
/// item of the level's node).
fn score_coarse_layer(
    snapshot: &ServingSnapshot,
    inverted: &InvertedIndex,
    ctx: &RequestCtx,
    level: usize,
    node: usize,
    q: &[f64],
    counter: &mut CostCounter,
) -> Result<Vec<f64>> {
    let model = &snapshot.model;
    let rep_id = inverted.levels[level].representatives[node];
    let rep = inverted
        .items
        .get(&rep_id)
        .ok_or(Error::UnknownItem(rep_id))?;
    let inter_input = if model.layers[level].inter.is_some() {
        Some(
            snapshot
                .schema
                .combined_user_item_input(ctx.user_bundle, &rep.feature_bundle())?,
        )
    } else {
        None
    };
    let (logits, _) =
        model.layer_logits_cached(level, &ctx.user_emb, q, inter_input.as_ref())?;
    counter.layer_evals[level] += 1;
    counter.layer_macs[level] += model.layer_serve_macs(level);
    Ok(logits)
}

/// Scores the finest layer for one item.
fn score_item_layer(
    snapshot: &ServingSnapshot,
    inverted: &InvertedIndex,
    ctx: &RequestCtx,
    item_id: u64,
    counter: &mut CostCounter,
) -> Result<Vec<f64>> {
    let model = &snapshot.model;
    let j = model.num_layers() - 1;
    let rec = inverted.items.get(&item_id).ok_or(Error::UnknownItem(item_id))?;
    let inter_input = if model.layers[j].inter.is_some() {
        Some(
            snapshot
                .schema
                .interaction_input(ctx.inter_query, item_id, &inverted.i2if)?,
        )
    } else {
        None
    };
    let (logits, _) =
        model.layer_logits_cached(j, &ctx.user_emb, &rec.embedding, inter_input.as_ref())?;
    counter.layer_evals[j] += 1;
    counter.layer_macs[j] += model.layer_serve_macs(j);
    Ok(logits)
}

/// Ranking key: score descending, then id ascending.
fn sort_scored(scored: &mut [(f64, u64)]) {
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
}

/// Layer-wise beam retrieval. Each level scores the surviving code prefixes,
/// ensembles them with coarser outputs, and keeps the per-level beam; the
/// finest layer scores only items in surviving prefixes. Returns the top-k
/// items with ensemble scores (rank task), descending, ties by item id.
pub fn retrieve_layerwise(
    snapshot: &ServingSnapshot,
    inverted: &InvertedIndex,
    user_bundle: &FeatureBundle,
    inter_query: &FeatureBundle,
    budget: &RetrievalBudget,
    rank_task: usize,
    counter: &mut CostCounter,
) -> Result<Vec<ScoredItem>> {
    check_versions(snapshot, inverted)?;
    let model = &snapshot.model;
    let nlev = model.num_levels();
    let ctx = prepare_request(snapshot, user_bundle, inter_query, counter)?;

    // A prefix = code path so far + its per-layer logits + its item set.
    struct Prefix {
        q: Vec<f64>,
        logits: Vec<Vec<f64>>,
        items: Vec<u64>,
        key: Vec<usize>,
    }
    let all_items: Vec<u64> = inverted.items.keys().copied().collect();
    let mut frontier = vec![Prefix {
        q: vec![0.0; model.item_tower.output_dim()],
        logits: vec![],
        items: all_items,
        key: vec![],
    }];

    for level in 0..nlev {
        let beam = budget.beams.get(level).copied().unwrap_or(usize::MAX);
        let mut candidates: Vec<(f64, Prefix)> = Vec::new();
        for prefix in &frontier {
            // Group the prefix's items by their node at this level.
            let mut by_node: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
            for &id in &prefix.items {
                let node = inverted.items[&id].path[level];
                by_node.entry(node).or_default().push(id);
            }
            for (node, ids) in by_node {
                let mut q = prefix.q.clone();
                for (qi, ci) in q
                    .iter_mut()
                    .zip(inverted.levels[level].node_embeddings.row(node))
                {
                    *qi += ci;
                }
                let logits =
                    score_coarse_layer(snapshot, inverted, &ctx, level, node, &q, counter)?;
                let mut all_logits = prefix.logits.clone();
                all_logits.push(logits);
                let rank = model.partial_ensemble_logits(&all_logits)[rank_task];
                let mut key = prefix.key.clone();
                key.push(node);
                candidates.push((
                    rank,
                    Prefix {
                        q,
                        logits: all_logits,
                        items: ids,
                        key,
                    },
                ));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0).unwrap().then(a.1.key.cmp(&b.1.key))
        });
        candidates.truncate(beam);
        frontier = candidates.into_iter().map(|(_, p)| p).collect();
    }

    // Final layer: items of surviving prefixes, deterministic budget order
    // (prefix rank order, then ascending item id).
    let mut scored: Vec<(f64, u64)> = Vec::new();
    let mut budget_left = budget.max_items_scored;
    'outer: for prefix in &frontier {
        for &item_id in &prefix.items {
            if budget_left == 0 {
                break 'outer;
            }
            budget_left -= 1;
            let logits = score_item_layer(snapshot, inverted, &ctx, item_id, counter)?;
            let mut all_logits = prefix.logits.clone();
            all_logits.push(logits);
            let final_logits = model.ensemble_logits(&all_logits);
            scored.push((final_logits[rank_task], item_id));
        }
    }
    sort_scored(&mut scored);
    scored.truncate(budget.top_k);
    Ok(scored
        .into_iter()
        .map(|(score, item_id)| ScoredItem { item_id, score })
        .collect())
}

/// Exhaustive reference: walks every item's own code path and computes its
/// full ensemble score, no pruning or shared-prefix caching. This is the
/// oracle that layer-wise retrieval must match under exhaustive beams.
pub fn retrieve_brute_force(
    snapshot: &ServingSnapshot,
    inverted: &InvertedIndex,
    user_bundle: &FeatureBundle,
    inter_query: &FeatureBundle,
    top_k: usize,
    rank_task: usize,
    counter: &mut CostCounter,
) -> Result<Vec<ScoredItem>> {
    check_versions(snapshot, inverted)?;
    let model = &snapshot.model;
    let nlev = model.num_levels();
    let ctx = prepare_request(snapshot, user_bundle, inter_query, counter)?;
    let mut scored: Vec<(f64, u64)> = Vec::with_capacity(inverted.items.len());
    for (&item_id, rec) in &inverted.items {
        let mut logits = Vec::with_capacity(model.num_layers());
        let mut q = vec![0.0; model.item_tower.output_dim()];
        for level in 0..nlev {
            let node = rec.path[level];
            for (qi, ci) in q
                .iter_mut()
                .zip(inverted.levels[level].node_embeddings.row(node))
            {
                *qi += ci;
            }
            logits.push(score_coarse_layer(
                snapshot, inverted, &ctx, level, node, &q, counter,
            )?);
        }
        logits.push(score_item_layer(snapshot, inverted, &ctx, item_id, counter)?);
        let final_logits = model.ensemble_logits(&logits);
        scored.push((final_logits[rank_task], item_id));
    }
    sort_scored(&mut scored);
    scored.truncate(top_k);
    Ok(scored
        .into_iter()
        .map(|(score, item_id)| ScoredItem { item_id, score })
        .collect())
}

/// Budgeted cluster-queue retrieval: scores all level-0 clusters in batch,
/// sorts them descending, then emits posting lists cluster by cluster until
/// the item budget runs out. Emitted items are not item-scored here; they
/// feed the next ranking stage.
pub fn retrieve_budgeted_queue(
    snapshot: &ServingSnapshot,
    inverted: &InvertedIndex,
    user_bundle: &FeatureBundle,
    inter_query: &FeatureBundle,
    max_items: usize,
    rank_task: usize,
    counter: &mut CostCounter,
) -> Result<Vec<u64>> {
    check_versions(snapshot, inverted)?;
    let model = &snapshot.model;
    if model.num_levels() == 0 {
        // Degenerate single-layer model: one implicit cluster.
        let mut out: Vec<u64> = inverted.items.keys().copied().collect();
        out.truncate(max_items);
        return Ok(out);
    }
    let ctx = prepare_request(snapshot, user_bundle, inter_query, counter)?;
    let level = &inverted.levels[0];
    let mut cluster_scores: Vec<(f64, usize)> = Vec::with_capacity(level.postings.len());
    for node in 0..level.postings.len() {
        let q = level.node_embeddings.row(node).to_vec();
        let logits = score_coarse_layer(snapshot, inverted, &ctx, 0, node, &q, counter)?;
        let rank = model.partial_ensemble_logits(std::slice::from_ref(&logits))[rank_task];
        cluster_scores.push((rank, node));
    }
    cluster_scores.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut out = Vec::new();
    for (_, node) in cluster_scores {
        for &id in &level.postings[node] {
            if out.len() == max_items {
                return Ok(out);
            }
            out.push(id);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_world, SyntheticWorldConfig, World};
    use crate::features::FeatureBundle;
    use crate::hsnn::{init_index, train_hsnn, HsnnLayerSpec, HsnnSpec, HsnnTrainConfig, TrainMode};
    use crate::index::{argmin_node, lti_distance};
    use crate::monn::{OverArchKind, TowerSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_world(v: usize) -> (World, FeatureSchema) {
        let cfg = SyntheticWorldConfig {
            num_users: 12,
            num_items: v,
            coarse_clusters: 2,
            fine_per_coarse: 3,
            ..Default::default()
        };
        let world = generate_world(&cfg).unwrap();
        let schema = FeatureSchema::default_for_world(cfg.latent_dim);
        (world, schema)
    }

    fn tiny_model(schema: &FeatureSchema, world: &World, ks: Vec<usize>, seed: u64) -> HsnnModel {
        let tower = TowerSpec {
            num_embed: 1,
            dim: 6,
            hidden: vec![8],
            sparse_embed_dim: 3,
        };
        let inter = TowerSpec {
            num_embed: 1,
            dim: 4,
            hidden: vec![6],
            sparse_embed_dim: 3,
        };
        let n = ks.len() + 1;
        let spec = HsnnSpec {
            user: tower.clone(),
            item: tower,
            layers: (0..n)
                .map(|_| HsnnLayerSpec {
                    inter: Some(inter.clone()),
                    overarch_hidden: vec![8],
                    overarch: OverArchKind::Mlp,
                    own_user_tower: false,
                })
                .collect(),
            ks,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = HsnnModel::new(schema, &spec, 2, &mut rng).unwrap();
        init_index(&mut model, schema, &world.items, TrainMode::Joim, 5, seed).unwrap();
        // A little training so scores are not arbitrary.
        let mut r = ChaCha8Rng::seed_from_u64(seed + 1);
        let batches: Vec<Vec<crate::datagen::Example>> = (0..20)
            .map(|b| world.sample_impressions(8, (b * 8) as u64, &mut r))
            .collect();
        let cfg = HsnnTrainConfig {
            warmup_steps: 5,
            ..Default::default()
        };
        train_hsnn(&mut model, schema, &batches, &world.items, &cfg).unwrap();
        model
    }

    fn request_bundles(world: &World, uid: usize) -> (FeatureBundle, FeatureBundle) {
        let u = &world.users[uid];
        (
            FeatureBundle::from_user_record(u),
            FeatureBundle::interaction_from_user_record(u),
        )
    }

    #[test]
    fn snapshot_round_trips_bitwise_and_serves_identically() {
        let (world, schema) = tiny_world(60);
        let model = tiny_model(&schema, &world, vec![4], 3);
        let snap = split_model(&model, &schema, 9, 20);
        let dir = tempfile::tempdir().unwrap();
        save_snapshot(&snap, dir.path()).unwrap();
        // The five parts exist on disk.
        for part in [
            "user_tower",
            "item_tower",
            "interaction",
            "cluster_model",
            "overarch",
        ] {
            let entries = std::fs::read_dir(dir.path().join(part)).unwrap().count();
            assert!(entries > 0, "part {part} is empty");
        }
        let loaded = load_snapshot(dir.path()).unwrap();
        assert_eq!(loaded.model.flat_params(), model.flat_params());

        let inverted = build_inverted_index(&snap, &world.items).unwrap();
        let (ub, iq) = request_bundles(&world, 0);
        let mut c1 = CostCounter::new(2);
        let mut c2 = CostCounter::new(2);
        let a = retrieve_brute_force(&snap, &inverted, &ub, &iq, 100, 0, &mut c1).unwrap();
        let b = retrieve_brute_force(&loaded, &inverted, &ub, &iq, 100, 0, &mut c2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tampered_snapshot_version_is_rejected() {
        let (world, schema) = tiny_world(40);
        let model = tiny_model(&schema, &world, vec![3], 5);
        let snap = split_model(&model, &schema, 1, 0);
        let dir = tempfile::tempdir().unwrap();
        save_snapshot(&snap, dir.path()).unwrap();
        let mpath = dir.path().join("manifest.json");
        let mut m: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&mpath).unwrap()).unwrap();
        m["format_version"] = serde_json::json!(42);
        std::fs::write(&mpath, serde_json::to_string(&m).unwrap()).unwrap();
        assert!(load_snapshot(dir.path()).is_err());
    }

    #[test]
    fn new_item_assignment_matches_exhaustive_distance_oracle() {
        let (mut world, schema) = tiny_world(50);
        let model = tiny_model(&schema, &world, vec![4, 3], 7);
        let snap = split_model(&model, &schema, 2, 0);
        world.churn(100);
        let inverted = build_inverted_index(&snap, &world.items).unwrap();
        for (id, rec) in &inverted.items {
            // Oracle: explicit per-level argmin over node embeddings.
            let mut r = rec.embedding.clone();
            for (lvl, level) in inverted.levels.iter().enumerate() {
                let d = lti_distance(&r, &level.node_embeddings);
                let m = argmin_node(&d);
                assert_eq!(rec.path[lvl], m, "item {id} level {lvl}");
                for (ri, ci) in r.iter_mut().zip(level.node_embeddings.row(m)) {
                    *ri -= ci;
                }
            }
        }
    }

    #[test]
    fn posting_lists_partition_the_corpus_per_level() {
        let (world, schema) = tiny_world(64);
        let model = tiny_model(&schema, &world, vec![4, 3], 11);
        let snap = split_model(&model, &schema, 3, 0);
        let inverted = build_inverted_index(&snap, &world.items).unwrap();
        for level in &inverted.levels {
            let mut seen = std::collections::BTreeSet::new();
            let mut total = 0usize;
            for list in &level.postings {
                assert!(list.windows(2).all(|w| w[0] < w[1]), "unsorted postings");
                total += list.len();
                for id in list {
                    assert!(seen.insert(*id), "duplicate posting {id}");
                }
            }
            assert_eq!(total, world.items.len());
        }
    }

    #[test]
    fn single_level_single_node_holds_whole_corpus() {
        let (world, schema) = tiny_world(30);
        let model = tiny_model(&schema, &world, vec![1], 13);
        let snap = split_model(&model, &schema, 4, 0);
        let inverted = build_inverted_index(&snap, &world.items).unwrap();
        assert_eq!(inverted.levels[0].postings.len(), 1);
        assert_eq!(inverted.levels[0].postings[0].len(), 30);
    }

    #[test]
    fn churn_rebuild_swaps_postings_and_keeps_partition() {
        let (mut world, schema) = tiny_world(50);
        let model = tiny_model(&schema, &world, vec![4], 17);
        let snap = split_model(&model, &schema, 5, 0);
        let before = build_inverted_index(&snap, &world.items).unwrap();
        let event = world.churn(7);
        let after = build_inverted_index(&snap, &world.items).unwrap();
        for removed in &event.removed {
            assert!(before.items.contains_key(removed));
            assert!(!after.items.contains_key(removed));
        }
        for added in &event.added {
            assert!(after.items.contains_key(&added.item_id));
        }
        let total: usize = after.levels[0].postings.iter().map(|p| p.len()).sum();
        assert_eq!(total, world.items.len());
    }

    #[test]
    fn exhaustive_beams_match_brute_force_exactly() {
        let (world, schema) = tiny_world(80);
        let model = tiny_model(&schema, &world, vec![4, 3], 19);
        let snap = split_model(&model, &schema, 6, 0);
        let inverted = build_inverted_index(&snap, &world.items).unwrap();
        for uid in 0..world.users.len() {
            let (ub, iq) = request_bundles(&world, uid);
            let mut c1 = CostCounter::new(3);
            let mut c2 = CostCounter::new(3);
            let oracle =
                retrieve_brute_force(&snap, &inverted, &ub, &iq, 80, 0, &mut c1).unwrap();
            let got = retrieve_layerwise(
                &snap,
                &inverted,
                &ub,
                &iq,
                &RetrievalBudget::exhaustive(80),
                0,
                &mut c2,
            )
            .unwrap();
            assert_eq!(got, oracle, "user {uid}");
        }
    }

    #[test]
    fn one_item_per_node_matches_oracle_for_any_beam_at_least_k() {
        let (world, schema) = tiny_world(12);
        // V == K: every node holds at most one item.
        let model = tiny_model(&schema, &world, vec![12], 23);
        let snap = split_model(&model, &schema, 7, 0);
        let inverted = build_inverted_index(&snap, &world.items).unwrap();
        let (ub, iq) = request_bundles(&world, 1);
        let mut c = CostCounter::new(2);
        let oracle = retrieve_brute_force(&snap, &inverted, &ub, &iq, 5, 0, &mut c).unwrap();
        for beam in [12usize, 14, 30] {
            let mut c2 = CostCounter::new(2);
            let got = retrieve_layerwise(
                &snap,
                &inverted,
                &ub,
                &iq,
                &RetrievalBudget {
                    beams: vec![beam],
                    top_k: 5,
                    max_items_scored: usize::MAX,
                },
                0,
                &mut c2,
            )
            .unwrap();
            // Every occupied node survives any beam >= occupied nodes.
            assert_eq!(got, oracle, "beam {beam}");
        }
    }

    #[test]
    fn version_skew_refuses_to_serve() {
        let (world, schema) = tiny_world(30);
        let model = tiny_model(&schema, &world, vec![3], 29);
        let snap = split_model(&model, &schema, 1, 0);
        let mut inverted = build_inverted_index(&snap, &world.items).unwrap();
        inverted.version = 2;
        let (ub, iq) = request_bundles(&world, 0);
        let mut c = CostCounter::new(2);
        let err = retrieve_layerwise(
            &snap,
            &inverted,
            &ub,
            &iq,
            &RetrievalBudget::exhaustive(5),
            0,
            &mut c,
        )
        .unwrap_err();
        assert!(matches!(err, Error::VersionSkew { snapshot: 1, index: 2 }));
    }

    #[test]
    fn retrieval_is_deterministic() {
        let (world, schema) = tiny_world(60);
        let model = tiny_model(&schema, &world, vec![4], 31);
        let snap = split_model(&model, &schema, 8, 0);
        let inverted = build_inverted_index(&snap, &world.items).unwrap();
        let (ub, iq) = request_bundles(&world, 2);
        let budget = RetrievalBudget {
            beams: vec![2],
            top_k: 10,
            max_items_scored: usize::MAX,
        };
        let mut c1 = CostCounter::new(2);
        let mut c2 = CostCounter::new(2);
        let a = retrieve_layerwise(&snap, &inverted, &ub, &iq, &budget, 0, &mut c1).unwrap();
        let b = retrieve_layerwise(&snap, &inverted, &ub, &iq, &budget, 0, &mut c2).unwrap();
        assert_eq!(a, b);
        assert_eq!(c1, c2);
    }

    #[test]
    fn budgeted_queue_respects_budgets() {
        let (world, schema) = tiny_world(60);
        let model = tiny_model(&schema, &world, vec![5], 37);
        let snap = split_model(&model, &schema, 9, 0);
        let inverted = build_inverted_index(&snap, &world.items).unwrap();
        let (ub, iq) = request_bundles(&world, 3);

        // Budget >= V emits every item exactly once.
        let mut c = CostCounter::new(2);
        let all = retrieve_budgeted_queue(&snap, &inverted, &ub, &iq, 1000, 0, &mut c).unwrap();
        assert_eq!(all.len(), 60);
        let uniq: std::collections::BTreeSet<u64> = all.iter().copied().collect();
        assert_eq!(uniq.len(), 60);

        // Budget 0 emits nothing.
        let mut c0 = CostCounter::new(2);
        let none = retrieve_budgeted_queue(&snap, &inverted, &ub, &iq, 0, 0, &mut c0).unwrap();
        assert!(none.is_empty());

        // Budget = best cluster size emits exactly that cluster.
        let best_first = all[0];
        let best_node = inverted.items[&best_first].path[0];
        let best_size = inverted.levels[0].postings[best_node].len();
        let mut cb = CostCounter::new(2);
        let head =
            retrieve_budgeted_queue(&snap, &inverted, &ub, &iq, best_size, 0, &mut cb).unwrap();
        assert_eq!(head, inverted.levels[0].postings[best_node]);
    }

    #[test]
    fn cost_accounting_matches_formula_exactly() {
        let (world, schema) = tiny_world(80);
        let model = tiny_model(&schema, &world, vec![4], 41);
        let snap = split_model(&model, &schema, 10, 0);
        let inverted = build_inverted_index(&snap, &world.items).unwrap();
        let (ub, iq) = request_bundles(&world, 4);
        let mut counter = CostCounter::new(2);
        retrieve_layerwise(
            &snap,
            &inverted,
            &ub,
            &iq,
            &RetrievalBudget {
                beams: vec![2],
                top_k: 10,
                max_items_scored: usize::MAX,
            },
            0,
            &mut counter,
        )
        .unwrap();
        let report = account_cost(&model, &counter);
        // Scoring MACs are counted as unit-cost * evals at every call site,
        // so the measured scoring total equals the formula exactly.
        assert_eq!(report.measured_scoring_macs, report.formula_macs);
        assert!(report.relative_gap < 0.01, "gap {}", report.relative_gap);
        // Beam-limited runs score fewer items than the corpus.
        assert!(counter.items_scored() < 80);
    }

    #[test]
    fn degenerate_full_sharing_costs_at_least_brute_force() {
        // I_1 = V (one item per node): layer-wise cost >= single-layer brute
        // force, since sharing is the only saving.
        let (world, schema) = tiny_world(12);
        let model = tiny_model(&schema, &world, vec![12], 43);
        let snap = split_model(&model, &schema, 11, 0);
        let inverted = build_inverted_index(&snap, &world.items).unwrap();
        let (ub, iq) = request_bundles(&world, 5);
        let mut counter = CostCounter::new(2);
        retrieve_layerwise(
            &snap,
            &inverted,
            &ub,
            &iq,
            &RetrievalBudget::exhaustive(5),
            0,
            &mut counter,
        )
        .unwrap();
        let fine_only = model.layer_serve_macs(1) * world.items.len() as u64;
        assert!(counter.total_macs() >= fine_only);
    }
}
