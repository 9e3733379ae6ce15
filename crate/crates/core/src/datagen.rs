//! Synthetic users, items, and logged impressions with planted hierarchical
//! cluster structure, plus the newline-delimited dataset format and an
//! impression stream with item churn.
//!
//! Everything here is a pure function of (config, seed): generation uses a
//! dedicated ChaCha stream and no ambient randomness.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{dot, sigmoid};
use crate::{Error, Result};

/// Spread of planted coarse centroids around the origin.
const COARSE_SPREAD: f64 = 2.0;
/// Spread of fine centroids around their coarse parent.
const FINE_SPREAD: f64 = 0.7;
/// Spread of user latents around their preferred coarse centroid.
const USER_SPREAD: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorldConfig {
    pub num_users: usize,
    pub num_items: usize,
    /// Planted coarse clusters (G1).
    pub coarse_clusters: usize,
    /// Planted fine clusters per coarse cluster (G2).
    pub fine_per_coarse: usize,
    pub latent_dim: usize,
    /// Per-task base engagement rates, e.g. click and conversion.
    pub base_rates: Vec<f64>,
    /// Item latent noise around the fine centroid.
    pub noise_scale: f64,
    /// Fraction of items replaced per churn event.
    pub churn_rate: f64,
    /// Scales the user-item latent dot inside the label sigmoid.
    pub score_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        SyntheticWorldConfig {
            num_users: 200,
            num_items: 2000,
            coarse_clusters: 4,
            fine_per_coarse: 5,
            latent_dim: 8,
            base_rates: vec![0.1, 0.02],
            noise_scale: 0.25,
            churn_rate: 0.1,
            score_scale: 1.0 / 32.0,
            seed: 17,
        }
    }
}

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_users == 0 || self.num_items == 0 {
            return Err(Error::Config("world needs users and items".into()));
        }
        let planted = self.coarse_clusters * self.fine_per_coarse;
        if planted == 0 || planted > self.num_items {
            return Err(Error::Config(format!(
                "planted clusters ({planted}) must be in 1..=num_items ({})",
                self.num_items
            )));
        }
        if self.base_rates.is_empty() || self.base_rates.iter().any(|&r| !(0.0..=1.0).contains(&r)) {
            return Err(Error::Config("base rates must lie in [0,1]".into()));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.churn_rate) {
            return Err(Error::Config("churn_rate must lie in [0,1]".into()));
        }
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.base_rates.len()
    }

    pub fn planted_clusters(&self) -> usize {
        self.coarse_clusters * self.fine_per_coarse
    }
}

/// One logged impression. Field names in the serialized form are fixed by the
/// dataset format: `ud`/`us` user dense/sparse, `id_`/`is` item dense/sparse,
/// `xs` interaction sparse, `y` per-task labels, `ts` timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub user_id: u64,
    pub item_id: u64,
    #[serde(rename = "ud")]
    pub user_dense: Vec<f64>,
    #[serde(rename = "us")]
    pub user_sparse: BTreeMap<String, Vec<u64>>,
    #[serde(rename = "id_")]
    pub item_dense: Vec<f64>,
    #[serde(rename = "is")]
    pub item_sparse: BTreeMap<String, Vec<u64>>,
    #[serde(rename = "xs")]
    pub inter_sparse: BTreeMap<String, Vec<u64>>,
    pub y: Vec<u8>,
    pub ts: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: u64,
    /// True latent; also exposed as the item's dense feature.
    pub latent: Vec<f64>,
    /// Category ids: the planted fine cluster and an offset coarse id.
    pub cats: Vec<u64>,
    pub fine_cluster: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: u64,
    pub latent: Vec<f64>,
    /// Fine-cluster ids this user engages with; the I2IF query.
    pub engaged_cats: Vec<u64>,
}

/// Generated world: catalogs plus the planted centroid structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub cfg: SyntheticWorldConfig,
    pub items: Vec<ItemRecord>,
    pub users: Vec<UserRecord>,
    pub fine_centroids: Vec<Vec<f64>>,
    next_item_id: u64,
    churn_epoch: u64,
}

/// One churn event: expired item ids and their replacements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChurnEvent {
    pub removed: Vec<u64>,
    pub added: Vec<ItemRecord>,
    pub ts: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StreamEvent {
    Batch(Vec<Example>),
    Churn(ChurnEvent),
}

/// Ordered event stream; timestamps are nondecreasing and every example
/// references an item live at its timestamp.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ImpressionStream {
    pub events: Vec<StreamEvent>,
}

fn gauss<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // Box-Muller; one value per call keeps the stream layout simple.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn gauss_vec<R: Rng + ?Sized>(rng: &mut R, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| scale * gauss(rng)).collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-9, 1.0 - 1e-9);
    (p / (1.0 - p)).ln()
}

fn make_item<R: Rng + ?Sized>(
    cfg: &SyntheticWorldConfig,
    fine_centroids: &[Vec<f64>],
    item_id: u64,
    fine: usize,
    rng: &mut R,
) -> ItemRecord {
    let noise = gauss_vec(rng, cfg.latent_dim, cfg.noise_scale);
    let coarse = fine / cfg.fine_per_coarse;
    ItemRecord {
        item_id,
        latent: add(&fine_centroids[fine], &noise),
        cats: vec![fine as u64, (cfg.planted_clusters() + coarse) as u64],
        fine_cluster: fine,
    }
}

/// Generates the item and user catalogs. Items are assigned to planted fine
/// clusters round-robin, so cluster sizes differ by at most one.
pub fn generate_world(cfg: &SyntheticWorldConfig) -> Result<World> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let g1 = cfg.coarse_clusters;
    let g2 = cfg.fine_per_coarse;
    let planted = g1 * g2;

    let coarse_centroids: Vec<Vec<f64>> = (0..g1)
        .map(|_| gauss_vec(&mut rng, cfg.latent_dim, COARSE_SPREAD))
        .collect();
    let fine_centroids: Vec<Vec<f64>> = (0..planted)
        .map(|f| {
            let offset = gauss_vec(&mut rng, cfg.latent_dim, FINE_SPREAD);
            add(&coarse_centroids[f / g2], &offset)
        })
        .collect();

    let items: Vec<ItemRecord> = (0..cfg.num_items)
        .map(|i| make_item(cfg, &fine_centroids, i as u64, i % planted, &mut rng))
        .collect();

    let users: Vec<UserRecord> = (0..cfg.num_users)
        .map(|u| {
            let pref_coarse = u % g1;
            let latent = add(
                &coarse_centroids[pref_coarse],
                &gauss_vec(&mut rng, cfg.latent_dim, USER_SPREAD),
            );
            // Engaged categories: the two fine centroids nearest the user,
            // plus the preferred coarse id. Drives the I2IF overlap signal.
            let mut by_dist: Vec<(f64, usize)> = fine_centroids
                .iter()
                .enumerate()
                .map(|(f, c)| (crate::numerics::sq_dist(&latent, c), f))
                .collect();
            by_dist.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let mut engaged: Vec<u64> = by_dist.iter().take(2).map(|&(_, f)| f as u64).collect();
            engaged.push((planted + pref_coarse) as u64);
            engaged.sort_unstable();
            UserRecord {
                user_id: u as u64,
                latent,
                engaged_cats: engaged,
            }
        })
        .collect();

    Ok(World {
        cfg: cfg.clone(),
        items,
        users,
        fine_centroids,
        next_item_id: cfg.num_items as u64,
        churn_epoch: 0,
    })
}

impl World {
    /// True per-task engagement probability of (user, item).
    pub fn true_probs(&self, user: &UserRecord, item: &ItemRecord) -> Vec<f64> {
        let s = self.cfg.score_scale * dot(&user.latent, &item.latent);
        self.cfg
            .base_rates
            .iter()
            .map(|&r| sigmoid(s + logit(r)))
            .collect()
    }

    /// Top-k live items for a user under the generator's true task-0 score,
    /// ties broken by ascending item id. This is the ground-truth relevant
    /// set for recall evaluation.
    pub fn relevant_items(&self, user: &UserRecord, k: usize) -> Vec<u64> {
        let mut scored: Vec<(f64, u64)> = self
            .items
            .iter()
            .map(|it| (self.cfg.score_scale * dot(&user.latent, &it.latent), it.item_id))
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        scored.into_iter().take(k).map(|(_, id)| id).collect()
    }

    pub fn find_user(&self, user_id: u64) -> Option<&UserRecord> {
        self.users.iter().find(|u| u.user_id == user_id)
    }

    pub fn find_item(&self, item_id: u64) -> Option<&ItemRecord> {
        self.items.iter().find(|i| i.item_id == item_id)
    }

    /// Builds the logged impression for a (user, item) pair with given labels.
    pub fn example_from(&self, user: &UserRecord, item: &ItemRecord, y: Vec<u8>, ts: u64) -> Example {
        let mut user_sparse = BTreeMap::new();
        user_sparse.insert("user_id".to_string(), vec![user.user_id]);
        user_sparse.insert("engaged_cats".to_string(), user.engaged_cats.clone());
        let mut item_sparse = BTreeMap::new();
        item_sparse.insert("item_id".to_string(), vec![item.item_id]);
        item_sparse.insert("cats".to_string(), item.cats.clone());
        let mut inter_sparse = BTreeMap::new();
        inter_sparse.insert("engaged_cats".to_string(), user.engaged_cats.clone());
        Example {
            user_id: user.user_id,
            item_id: item.item_id,
            user_dense: user.latent.clone(),
            user_sparse,
            item_dense: item.latent.clone(),
            item_sparse,
            inter_sparse,
            y,
            ts,
        }
    }

    /// Samples `n` impressions. Labels are Bernoulli draws from the true
    /// sigmoid scores; timestamps increase from `ts_start`.
    pub fn sample_impressions<R: Rng + ?Sized>(&self, n: usize, ts_start: u64, rng: &mut R) -> Vec<Example> {
        (0..n)
            .map(|i| {
                let user = &self.users[rng.gen_range(0..self.users.len())];
                let item = &self.items[rng.gen_range(0..self.items.len())];
                let probs = self.true_probs(user, item);
                let y = probs
                    .iter()
                    .map(|&p| u8::from(rng.gen_range(0.0..1.0) < p))
                    .collect();
                self.example_from(user, item, y, ts_start + i as u64)
            })
            .collect()
    }

    /// Replaces a churn-rate fraction of items with fresh ones. Removed items
    /// are a seeded random sample; replacements keep the planted structure.
    pub fn churn(&mut self, ts: u64) -> ChurnEvent {
        self.churn_epoch += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ (0xC0FFEE + self.churn_epoch));
        let n_replace = ((self.items.len() as f64) * self.cfg.churn_rate).round() as usize;
        let n_replace = n_replace.min(self.items.len());

        let mut idx: Vec<usize> = (0..self.items.len()).collect();
        for i in 0..n_replace {
            let j = rng.gen_range(i..idx.len());
            idx.swap(i, j);
        }
        let mut doomed: Vec<usize> = idx[..n_replace].to_vec();
        doomed.sort_unstable();

        let mut removed = Vec::with_capacity(n_replace);
        let mut added = Vec::with_capacity(n_replace);
        for &slot in &doomed {
            let old = &self.items[slot];
            removed.push(old.item_id);
            let fine = (self.next_item_id as usize) % self.cfg.planted_clusters();
            let item = make_item(&self.cfg, &self.fine_centroids, self.next_item_id, fine, &mut rng);
            self.next_item_id += 1;
            added.push(item.clone());
            self.items[slot] = item;
        }
        ChurnEvent { removed, added, ts }
    }

    /// Builds an ordered training stream of `batches` minibatches with a
    /// churn event inserted every `churn_every` batches (0 disables churn).
    pub fn make_stream(&mut self, batches: usize, batch_size: usize, churn_every: usize, seed: u64) -> ImpressionStream {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut events = Vec::new();
        let mut ts = 0u64;
        for b in 0..batches {
            if churn_every > 0 && b > 0 && b % churn_every == 0 {
                events.push(StreamEvent::Churn(self.churn(ts)));
            }
            let batch = self.sample_impressions(batch_size, ts, &mut rng);
            ts += batch_size as u64;
            events.push(StreamEvent::Batch(batch));
        }
        ImpressionStream { events }
    }
}

/// Writes one JSON object per line.
pub fn write_dataset(path: &Path, examples: &[Example]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for ex in examples {
        let line = serde_json::to_string(ex).map_err(|e| Error::Artifact(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset written by [`write_dataset`]. Malformed lines report their
/// 1-based line number.
pub fn read_dataset(path: &Path) -> Result<Vec<Example>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(ex);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use sha2::{Digest, Sha256};

    fn small_cfg() -> SyntheticWorldConfig {
        SyntheticWorldConfig {
            num_users: 50,
            num_items: 1000,
            coarse_clusters: 4,
            fine_per_coarse: 5,
            ..Default::default()
        }
    }

    #[test]
    fn zero_noise_puts_items_on_fine_centroids() {
        let cfg = SyntheticWorldConfig {
            noise_scale: 0.0,
            ..small_cfg()
        };
        let w = generate_world(&cfg).unwrap();
        for it in &w.items {
            assert_eq!(it.latent, w.fine_centroids[it.fine_cluster]);
        }
    }

    #[test]
    fn same_seed_gives_byte_identical_catalogs() {
        let cfg = small_cfg();
        let a = serde_json::to_vec(&generate_world(&cfg).unwrap()).unwrap();
        let b = serde_json::to_vec(&generate_world(&cfg).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn round_robin_assignment_balances_clusters_exactly() {
        // G1=4, G2=5, V=1000 -> every fine cluster holds exactly 50 items.
        let w = generate_world(&small_cfg()).unwrap();
        let mut counts = vec![0usize; 20];
        for it in &w.items {
            counts[it.fine_cluster] += 1;
        }
        assert!(counts.iter().all(|&c| c == 50), "{counts:?}");
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = SyntheticWorldConfig {
            coarse_clusters: 100,
            fine_per_coarse: 100,
            num_items: 10,
            ..Default::default()
        };
        assert!(generate_world(&cfg).is_err());
    }

    #[test]
    fn degenerate_base_rates_force_labels() {
        for (rate, expect) in [(0.0, 0u8), (1.0, 1u8)] {
            let cfg = SyntheticWorldConfig {
                base_rates: vec![rate],
                ..small_cfg()
            };
            let w = generate_world(&cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let exs = w.sample_impressions(500, 0, &mut rng);
            assert!(exs.iter().all(|e| e.y == vec![expect]));
        }
    }

    #[test]
    fn empirical_click_rate_matches_monte_carlo_expectation() {
        let w = generate_world(&small_cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let exs = w.sample_impressions(n, 0, &mut rng);
        let empirical = exs.iter().filter(|e| e.y[0] == 1).count() as f64 / n as f64;
        // Oracle: integrate the generator's own sigmoid over the sampled pairs.
        let expected: f64 = exs
            .iter()
            .map(|e| {
                let u = w.find_user(e.user_id).unwrap();
                let it = w.find_item(e.item_id).unwrap();
                w.true_probs(u, it)[0]
            })
            .sum::<f64>()
            / n as f64;
        let rel = (empirical - expected).abs() / expected;
        assert!(rel < 0.10, "empirical {empirical} vs expected {expected}");
    }

    #[test]
    fn stream_has_nondecreasing_timestamps_and_live_items() {
        let mut w = generate_world(&small_cfg()).unwrap();
        let stream = w.make_stream(10, 16, 3, 7);
        let mut live: std::collections::BTreeSet<u64> = (0..1000u64).collect();
        let mut last_ts = 0u64;
        for ev in &stream.events {
            match ev {
                StreamEvent::Churn(c) => {
                    for r in &c.removed {
                        assert!(live.remove(r));
                    }
                    for a in &c.added {
                        assert!(live.insert(a.item_id));
                    }
                }
                StreamEvent::Batch(batch) => {
                    for ex in batch {
                        assert!(ex.ts >= last_ts);
                        last_ts = ex.ts;
                        assert!(live.contains(&ex.item_id), "stale item referenced");
                    }
                }
            }
        }
    }

    #[test]
    fn empty_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        write_dataset(&path, &[]).unwrap();
        assert!(read_dataset(&path).unwrap().is_empty());
    }

    #[test]
    fn single_example_round_trips_exactly() {
        let w = generate_world(&small_cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let exs = w.sample_impressions(1, 0, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.jsonl");
        write_dataset(&path, &exs).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), exs);
    }

    #[test]
    fn large_dataset_round_trip_hash_equality() {
        let w = generate_world(&small_cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let exs = w.sample_impressions(10_000, 0, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        write_dataset(&path, &exs).unwrap();
        let back = read_dataset(&path).unwrap();

        let h = |xs: &[Example]| {
            let mut hasher = Sha256::new();
            for x in xs {
                hasher.update(serde_json::to_vec(x).unwrap());
            }
            hasher.finalize()
        };
        assert_eq!(h(&exs), h(&back));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"user_id\": 1}\n").unwrap();
        match read_dataset(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn serialized_field_names_match_the_format() {
        let w = generate_world(&small_cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ex = &w.sample_impressions(1, 0, &mut rng)[0];
        let v: serde_json::Value = serde_json::to_value(ex).unwrap();
        for key in ["user_id", "item_id", "ud", "us", "id_", "is", "xs", "y", "ts"] {
            assert!(v.get(key).is_some(), "missing field {key}");
        }
    }
}
