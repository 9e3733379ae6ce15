//! Metrics (normalized entropy, recall@k, balance, cost) and the experiment
//! harness behind the ablation grid and the CLI.

use serde::{Deserialize, Serialize};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::datagen::{generate_world, Example, World};
use crate::features::{FeatureBundle, FeatureSchema, I2ifIndex};
use crate::hsnn::{
    calibrate_hsnn, eval_predictions, train_hsnn, HsnnModel, HsnnSpec, TrainMode,
};
use crate::monn::Prediction;
use crate::serving::{
    build_inverted_index, split_model, CostCounter, RetrievalBudget, ServingSnapshot,
};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Normalized entropy: average log loss divided by the log loss of the
/// constant predictor at the empirical base rate. Natural log on both sides
/// (the ratio is base-invariant). Lower is better; 1.0 matches the constant
/// predictor.
pub fn normalized_entropy(probs: &[f64], labels: &[u8]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::dim("normalized_entropy", labels.len(), probs.len()));
    }
    let n = labels.len() as f64;
    let positives = labels.iter().filter(|&&y| y == 1).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::Degenerate(
            "normalized entropy needs both label classes".into(),
        ));
    }
    let clamp = |p: f64| p.clamp(1e-12, 1.0 - 1e-12);
    let avg_ll = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = clamp(p);
            -((y as f64) * p.ln() + (1.0 - y as f64) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n;
    let base = positives as f64 / n;
    let base_ll = -(base * base.ln() + (1.0 - base) * (1.0 - base).ln());
    Ok(avg_ll / base_ll)
}

/// Fraction of the relevant set present in the retrieved list.
pub fn recall_at_k(retrieved: &[u64], relevant: &[u64]) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let set: std::collections::BTreeSet<u64> = retrieved.iter().copied().collect();
    let hit = relevant.iter().filter(|id| set.contains(id)).count();
    hit as f64 / relevant.len() as f64
}

/// Adjusted Rand index between two cluster labelings of the same items.
pub fn adjusted_rand(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::dim("adjusted_rand", a.len(), b.len()));
    }
    use std::collections::BTreeMap;
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let c2 = |n: u64| (n * n.saturating_sub(1)) as f64 / 2.0;
    let sum_cells: f64 = table.values().map(|&n| c2(n)).sum();
    let sum_rows: f64 = rows.values().map(|&n| c2(n)).sum();
    let sum_cols: f64 = cols.values().map(|&n| c2(n)).sum();
    let total = c2(a.len() as u64);
    let expected = sum_rows * sum_cols / total;
    let max_index = 0.5 * (sum_rows + sum_cols);
    if (max_index - expected).abs() < 1e-15 {
        return Ok(1.0);
    }
    Ok((sum_cells - expected) / (max_index - expected))
}

/// Max/mean ratio of a node occupancy histogram.
pub fn occupancy_ratio(histogram: &[usize]) -> f64 {
    if histogram.is_empty() {
        return 0.0;
    }
    let max = *histogram.iter().max().unwrap() as f64;
    let mean = histogram.iter().sum::<usize>() as f64 / histogram.len() as f64;
    if mean == 0.0 {
        0.0
    } else {
        max / mean
    }
}

// ---------------------------------------------------------------------------
// Experiment harness
// ---------------------------------------------------------------------------

/// Metrics of one full run; reproducible bitwise from (config, seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: TrainMode,
    pub seed: u64,
    pub config_hash: String,
    /// Ensemble NE per task on the held-out slice.
    pub ne_tasks: Vec<f64>,
    /// Per-layer NE per task.
    pub ne_per_layer: Vec<Vec<f64>>,
    pub recall_at_k: f64,
    pub recall_k: usize,
    /// Level-0 node occupancy histogram.
    pub occupancy: Vec<usize>,
    pub occupancy_ratio: f64,
    pub macs_total: u64,
    pub items_scored: u64,
}

impl MetricsReport {
    pub fn report_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let bytes = serde_json::to_vec(self).expect("report serializes");
        let out = Sha256::digest(&bytes);
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Outcome of [`run_experiment`]: the report plus the trained artifacts, so
/// callers (CLI, acceptance tests) can reuse them.
pub struct ExperimentOutput {
    pub report: MetricsReport,
    pub model: HsnnModel,
    pub world: World,
    pub schema: FeatureSchema,
    pub snapshot: ServingSnapshot,
    pub inverted: crate::serving::InvertedIndex,
}

/// Deterministic sub-seeds for the independent random streams of a run.
fn stream_seed(seed: u64) -> u64 {
    seed ^ 0x5EED_0001
}

fn eval_seed(seed: u64) -> u64 {
    seed ^ 0x5EED_0002
}

fn calib_seed(seed: u64) -> u64 {
    seed ^ 0x5EED_0003
}

pub fn make_train_batches(world: &World, cfg: &RunConfig) -> Vec<Vec<Example>> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed));
    (0..cfg.pipeline.train_batches)
        .map(|b| {
            world.sample_impressions(
                cfg.train.batch_size,
                (b * cfg.train.batch_size) as u64,
                &mut rng,
            )
        })
        .collect()
}

/// Runs the full pipeline: generate, train (per mode), calibrate, publish,
/// retrieve, measure.
pub fn run_experiment(cfg: &RunConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let world = generate_world(&cfg.world)?;
    let schema = cfg.effective_schema();
    let spec = HsnnSpec::from_presets(&cfg.model.presets, &cfg.model.ks)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = HsnnModel::new(&schema, &spec, cfg.world.num_tasks(), &mut rng)?;

    let batches = make_train_batches(&world, cfg);
    train_hsnn(&mut model, &schema, &batches, &world.items, &cfg.train)?;

    // Publish the hard index, then calibrate against it.
    let index = model.publish(&schema, &world.items, cfg.train.max_alpha, 1)?;
    let i2if = I2ifIndex::build(&world.items);
    let calib = {
        let mut r = ChaCha8Rng::seed_from_u64(calib_seed(cfg.seed));
        world.sample_impressions(cfg.pipeline.calib_examples, 0, &mut r)
    };
    calibrate_hsnn(&mut model, &schema, &calib, &i2if, &index)?;

    // Held-out NE.
    let eval_slice = {
        let mut r = ChaCha8Rng::seed_from_u64(eval_seed(cfg.seed));
        world.sample_impressions(cfg.pipeline.eval_examples, 0, &mut r)
    };
    let (per_layer, ens) = eval_predictions(&model, &schema, &eval_slice, &i2if, &index)?;
    let t_count = model.num_tasks();
    let ne_of = |preds: &[Prediction], t: usize| -> Result<f64> {
        let probs: Vec<f64> = preds.iter().map(|p| p.probs[t]).collect();
        let labels: Vec<u8> = eval_slice.iter().map(|e| e.y[t]).collect();
        normalized_entropy(&probs, &labels)
    };
    let mut ne_tasks = Vec::with_capacity(t_count);
    for t in 0..t_count {
        ne_tasks.push(ne_of(&ens, t)?);
    }
    let mut ne_per_layer = Vec::with_capacity(model.num_layers());
    for preds in &per_layer {
        let mut row = Vec::with_capacity(t_count);
        for t in 0..t_count {
            row.push(ne_of(preds, t)?);
        }
        ne_per_layer.push(row);
    }

    // Serving pair and retrieval metrics.
    let snapshot = split_model(&model, &schema, 1, cfg.pipeline.train_batches);
    let inverted = build_inverted_index(&snapshot, &world.items)?;
    let budget = RetrievalBudget {
        beams: cfg.pipeline.beams.clone(),
        top_k: cfg.pipeline.recall_k,
        max_items_scored: cfg.pipeline.max_items_scored,
    };
    let mut counter = CostCounter::new(model.num_layers());
    let mut recall_sum = 0.0;
    let users = cfg.pipeline.recall_users.min(world.users.len());
    for uid in 0..users {
        let user = &world.users[uid];
        let ub = FeatureBundle::from_user_record(user);
        let iq = FeatureBundle::interaction_from_user_record(user);
        let got = crate::serving::retrieve_layerwise(
            &snapshot,
            &inverted,
            &ub,
            &iq,
            &budget,
            cfg.pipeline.rank_task,
            &mut counter,
        )?;
        let ids: Vec<u64> = got.iter().map(|s| s.item_id).collect();
        let relevant = world.relevant_items(user, cfg.pipeline.recall_k);
        recall_sum += recall_at_k(&ids, &relevant);
    }
    let recall = if users > 0 { recall_sum / users as f64 } else { 0.0 };

    let occupancy = if !index.layers.is_empty() {
        index.layers[0].occupancy()
    } else {
        vec![]
    };
    let report = MetricsReport {
        mode: cfg.train.mode,
        seed: cfg.seed,
        config_hash: cfg.config_hash(),
        ne_tasks,
        ne_per_layer,
        recall_at_k: recall,
        recall_k: cfg.pipeline.recall_k,
        occupancy_ratio: occupancy_ratio(&occupancy),
        occupancy,
        macs_total: counter.total_macs(),
        items_scored: counter.items_scored(),
    };
    Ok(ExperimentOutput {
        report,
        model,
        world,
        schema,
        snapshot,
        inverted,
    })
}

// ---------------------------------------------------------------------------
// Ablation grid
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationToggle {
    SchedulerOff,
    WarmupOff,
    BalanceOff,
}

impl AblationToggle {
    pub fn apply(self, cfg: &mut RunConfig) {
        match self {
            AblationToggle::SchedulerOff => cfg.train.scheduler_enabled = false,
            AblationToggle::WarmupOff => cfg.train.warmup_enabled = false,
            AblationToggle::BalanceOff => cfg.train.balance_enabled = false,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AblationToggle::SchedulerOff => "scheduler_off",
            AblationToggle::WarmupOff => "warmup_off",
            AblationToggle::BalanceOff => "balance_off",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridRow {
    pub run_id: String,
    pub mode: TrainMode,
    pub toggles: String,
    pub seed: u64,
    pub report: MetricsReport,
}

/// Runs the full cartesian product of toggle subsets for every seed; runs
/// execute as independent jobs in parallel, aggregation is ordered.
pub fn run_ablation_grid(
    base: &RunConfig,
    toggles: &[AblationToggle],
    seeds: &[u64],
) -> Result<Vec<GridRow>> {
    let mut jobs: Vec<(usize, u64, RunConfig, String)> = Vec::new();
    for mask in 0..(1usize << toggles.len()) {
        for &seed in seeds {
            let mut cfg = base.seeded(seed);
            let mut names = Vec::new();
            for (i, t) in toggles.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    t.apply(&mut cfg);
                    names.push(t.label());
                }
            }
            let label = if names.is_empty() {
                "baseline".to_string()
            } else {
                names.join("+")
            };
            jobs.push((mask, seed, cfg, label));
        }
    }

    let results: Vec<Result<GridRow>> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|(mask, seed, cfg, label)| {
                scope.spawn(move || {
                    let out = run_experiment(cfg)?;
                    Ok(GridRow {
                        run_id: format!("{label}-s{seed}-m{mask}"),
                        mode: cfg.train.mode,
                        toggles: label.clone(),
                        seed: *seed,
                        report: out.report,
                    })
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("grid job panicked")).collect()
    });
    results.into_iter().collect()
}

/// CSV rendering of grid rows: one line per run, fixed column order.
pub fn grid_to_csv(rows: &[GridRow]) -> String {
    let mut out = String::new();
    let t_count = rows.first().map_or(0, |r| r.report.ne_tasks.len());
    out.push_str("run_id,mode,toggles,seed");
    for t in 0..t_count {
        out.push_str(&format!(",ne_task_{t}"));
    }
    if let Some(r) = rows.first() {
        out.push_str(&format!(",recall_at_{}", r.report.recall_k));
    } else {
        out.push_str(",recall");
    }
    out.push_str(",occupancy_ratio,macs_total\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}",
            r.run_id,
            match r.mode {
                TrainMode::Joim => "joim",
                TrainMode::Sil => "sil",
                TrainMode::Em => "em",
            },
            r.toggles,
            r.seed
        ));
        for ne in &r.report.ne_tasks {
            out.push_str(&format!(",{ne:.6}"));
        }
        out.push_str(&format!(
            ",{:.6},{:.4},{}\n",
            r.report.recall_at_k, r.report.occupancy_ratio, r.report.macs_total
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_base_rate_predictor_has_ne_one() {
        let labels: Vec<u8> = (0..100).map(|i| u8::from(i % 4 == 0)).collect();
        let base = labels.iter().filter(|&&y| y == 1).count() as f64 / labels.len() as f64;
        let probs = vec![base; labels.len()];
        let ne = normalized_entropy(&probs, &labels).unwrap();
        assert!((ne - 1.0).abs() < 1e-12);
    }

    #[test]
    fn near_perfect_predictions_drive_ne_to_zero() {
        let labels: Vec<u8> = (0..50).map(|i| u8::from(i % 2 == 0)).collect();
        let probs: Vec<f64> = labels.iter().map(|&y| if y == 1 { 0.999999 } else { 1e-6 }).collect();
        let ne = normalized_entropy(&probs, &labels).unwrap();
        assert!(ne < 1e-4, "ne {ne}");
    }

    #[test]
    fn hand_case_matches_independent_scalar_computation() {
        // labels [1,0], probs [0.8,0.2]. Oracle computed with explicit
        // scalar arithmetic; the natural-log ratio equals the base-2 ratio.
        let ne = normalized_entropy(&[0.8, 0.2], &[1, 0]).unwrap();
        let num = -(0.8f64.ln() + 0.8f64.ln()) / 2.0;
        let den = -(0.5f64.ln());
        let expected = num / den;
        assert!((ne - expected).abs() < 1e-12);
        assert!((expected - 0.321928).abs() < 1e-6);
    }

    #[test]
    fn degenerate_labels_are_an_error() {
        assert!(normalized_entropy(&[0.5, 0.5], &[1, 1]).is_err());
        assert!(normalized_entropy(&[0.5, 0.5], &[0, 0]).is_err());
    }

    #[test]
    fn recall_cases() {
        assert_eq!(recall_at_k(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(recall_at_k(&[4, 5], &[1, 2]), 0.0);
        let retrieved: Vec<u64> = (0..7).collect();
        let relevant: Vec<u64> = (0..10).collect();
        assert!((recall_at_k(&retrieved, &relevant) - 0.7).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn recall_is_monotone_in_k(
            retrieved in proptest::collection::vec(0u64..50, 1..30),
            relevant in proptest::collection::btree_set(0u64..50, 1..20),
        ) {
            let relevant: Vec<u64> = relevant.into_iter().collect();
            let mut prev = 0.0;
            for k in 1..=retrieved.len() {
                let r = recall_at_k(&retrieved[..k], &relevant);
                prop_assert!(r >= prev - 1e-15);
                prev = r;
            }
        }
    }

    #[test]
    fn adjusted_rand_perfect_and_permuted() {
        let a = vec![0, 0, 1, 1, 2, 2];
        assert_eq!(adjusted_rand(&a, &a).unwrap(), 1.0);
        // Relabeling preserves the partition.
        let b = vec![5, 5, 9, 9, 1, 1];
        assert_eq!(adjusted_rand(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn adjusted_rand_detects_disagreement() {
        let a = vec![0, 0, 0, 1, 1, 1];
        let b = vec![0, 1, 0, 1, 0, 1];
        let ari = adjusted_rand(&a, &b).unwrap();
        assert!(ari < 0.5, "ari {ari}");
    }

    #[test]
    fn occupancy_ratio_flags_imbalance() {
        assert!((occupancy_ratio(&[5, 5, 5, 5]) - 1.0).abs() < 1e-12);
        assert!(occupancy_ratio(&[17, 1, 1, 1]) > 3.0);
    }

    fn tiny_run_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.world.num_items = 300;
        cfg.world.num_users = 30;
        cfg.model.ks = vec![6];
        cfg.pipeline.train_batches = 30;
        cfg.pipeline.calib_examples = 200;
        cfg.pipeline.eval_examples = 300;
        cfg.pipeline.recall_users = 5;
        cfg.pipeline.recall_k = 20;
        cfg.train.warmup_steps = 10;
        cfg.train.batch_size = 16;
        cfg
    }

    #[test]
    fn experiment_reports_are_bitwise_reproducible() {
        let cfg = tiny_run_config().seeded(3);
        let a = run_experiment(&cfg).unwrap().report;
        let b = run_experiment(&cfg).unwrap().report;
        assert_eq!(a.report_hash(), b.report_hash());
    }

    #[test]
    fn empty_toggle_grid_is_a_single_baseline_row_per_seed() {
        let cfg = tiny_run_config();
        let rows = run_ablation_grid(&cfg, &[], &[1, 2]).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.toggles == "baseline"));
    }

    #[test]
    fn two_toggle_grid_yields_four_distinct_configs() {
        let cfg = tiny_run_config();
        let rows = run_ablation_grid(
            &cfg,
            &[AblationToggle::SchedulerOff, AblationToggle::BalanceOff],
            &[5],
        )
        .unwrap();
        assert_eq!(rows.len(), 4);
        let hashes: std::collections::BTreeSet<String> =
            rows.iter().map(|r| r.report.config_hash.clone()).collect();
        assert_eq!(hashes.len(), 4);
        let csv = grid_to_csv(&rows);
        assert!(csv.starts_with("run_id,mode,toggles,seed,ne_task_0,ne_task_1,recall_at_20"));
        assert_eq!(csv.lines().count(), 5);
    }
}
