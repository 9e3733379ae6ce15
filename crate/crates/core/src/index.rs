//! Hierarchical item index learning.
//!
//! The gradient-descent route ("learning to index") soft-assigns items to
//! nodes through an L2-distance softmax, quantizes residuals level by level,
//! and trains codebooks jointly with whatever loss the caller backpropagates
//! through [`chain_backward`]. K-means (with k-means++ seeding) provides the
//! separate-index-learning baseline, and a small standalone trainer learns a
//! residual index from reconstruction loss alone.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::numerics::{dot, sigmoid, sq_dist, Matrix, Optimizer, OptimizerKind};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Soft assignment primitives
// ---------------------------------------------------------------------------

/// Squared L2 distance from `v` to every codebook row.
pub fn lti_distance(v: &[f64], codebook: &Matrix) -> Vec<f64> {
    (0..codebook.rows()).map(|k| sq_dist(v, codebook.row(k))).collect()
}

/// Softmax over `-alpha * d`, computed with max-subtraction. `alpha = 0`
/// yields the uniform distribution; ties at the minimum split mass equally
/// as `alpha` grows.
pub fn lti_soft_assign(dists: &[f64], alpha: f64) -> Vec<f64> {
    let m = dists.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut a: Vec<f64> = dists.iter().map(|&d| (-alpha * (d - m)).exp()).collect();
    let z: f64 = a.iter().sum();
    for v in &mut a {
        *v /= z;
    }
    a
}

/// Convex combination of codebook rows: `cbar = sum_k a_k c_k`.
pub fn lti_index_embedding(affinities: &[f64], codebook: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; codebook.cols()];
    for (k, &a) in affinities.iter().enumerate() {
        crate::numerics::axpy(a, codebook.row(k), &mut out);
    }
    out
}

/// Index of the smallest distance; ties broken by the lowest node id.
pub fn argmin_node(dists: &[f64]) -> usize {
    let mut best = 0;
    for (k, &d) in dists.iter().enumerate() {
        if d < dists[best] {
            best = k;
        }
    }
    best
}

/// Binary cross-entropy of `sigmoid(<u, cbar>)` against `y`, with gradients
/// for both sides of the dot. The gradient is zero in the probability clamp
/// region, consistent with the loss actually computed.
pub fn lti_index_loss(u: &[f64], cbar: &[f64], y: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let s = dot(u, cbar);
    let p = sigmoid(s);
    let pc = p.clamp(crate::monn::PROB_CLAMP, 1.0 - crate::monn::PROB_CLAMP);
    let loss = -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
    let g = if p <= crate::monn::PROB_CLAMP || p >= 1.0 - crate::monn::PROB_CLAMP {
        0.0
    } else {
        p - y
    };
    let du = cbar.iter().map(|&c| g * c).collect();
    let dcbar = u.iter().map(|&x| g * x).collect();
    (loss, du, dcbar)
}

// ---------------------------------------------------------------------------
// Temperature schedule and warmup
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerState {
    pub max_alpha: f64,
    pub exp: f64,
    pub max_iters: usize,
    pub current_iter: usize,
}

/// Polynomial temperature ramp: `alpha = max_alpha * (iter/max_iters)^exp`,
/// held at `max_alpha` once the schedule completes.
pub fn scheduler_alpha(state: &SchedulerState) -> f64 {
    if state.max_iters == 0 || state.current_iter >= state.max_iters {
        return state.max_alpha;
    }
    let frac = state.current_iter as f64 / state.max_iters as f64;
    state.max_alpha * frac.powf(state.exp)
}

/// Linear ramp from 0 to `target` over `warmup_steps`, constant after.
pub fn warmup_weight(step: usize, warmup_steps: usize, target: f64) -> f64 {
    if warmup_steps == 0 || step >= warmup_steps {
        target
    } else {
        target * step as f64 / warmup_steps as f64
    }
}

// ---------------------------------------------------------------------------
// Balance (FLOPs) regularizer
// ---------------------------------------------------------------------------

/// Ring buffer of recent soft-assignment matrices. The penalty is the sum of
/// squared column means over the pooled matrix (previous batches detached,
/// gradients flow into the current batch only).
#[derive(Debug, Clone)]
pub struct BalanceReg {
    k_batches: usize,
    buffer: VecDeque<Matrix>,
}

impl BalanceReg {
    pub fn new(k_batches: usize) -> Self {
        BalanceReg {
            k_batches: k_batches.max(1),
            buffer: VecDeque::new(),
        }
    }

    pub fn buffered_batches(&self) -> usize {
        self.buffer.len()
    }

    /// Penalty over pooled rows (buffer + `current`) and its gradient with
    /// respect to the current batch entries.
    pub fn penalty(&self, current: &Matrix) -> Result<(f64, Matrix)> {
        let k = current.cols();
        if k == 0 || current.rows() == 0 {
            return Err(Error::Degenerate("balance penalty needs a nonempty matrix".into()));
        }
        let mut rows = current.rows();
        let mut col_sum = vec![0.0; k];
        for r in 0..current.rows() {
            for (s, v) in col_sum.iter_mut().zip(current.row(r)) {
                *s += v;
            }
        }
        for past in &self.buffer {
            if past.cols() != k {
                return Err(Error::dim("balance buffer width", k, past.cols()));
            }
            rows += past.rows();
            for r in 0..past.rows() {
                for (s, v) in col_sum.iter_mut().zip(past.row(r)) {
                    *s += v;
                }
            }
        }
        let p = rows as f64;
        let means: Vec<f64> = col_sum.iter().map(|&s| s / p).collect();
        let penalty: f64 = means.iter().map(|&m| m * m).sum();
        let mut grad = Matrix::zeros(current.rows(), k);
        for r in 0..current.rows() {
            let row = grad.row_mut(r);
            for (g, &m) in row.iter_mut().zip(&means) {
                *g = 2.0 * m / p;
            }
        }
        Ok((penalty, grad))
    }

    /// Retires the oldest batch once the window is full and records `batch`.
    pub fn push(&mut self, batch: Matrix) {
        if self.buffer.len() == self.k_batches {
            self.buffer.pop_front();
        }
        self.buffer.push_back(batch);
    }
}

// ---------------------------------------------------------------------------
// Residual chain
// ---------------------------------------------------------------------------

/// Forward state of the residual soft-assignment chain for one item.
#[derive(Debug, Clone)]
pub struct ChainCache {
    /// Input residual of each level; `residuals[0] = v`.
    pub residuals: Vec<Vec<f64>>,
    pub dists: Vec<Vec<f64>>,
    pub affinities: Vec<Vec<f64>>,
    pub cbars: Vec<Vec<f64>>,
    /// Cumulative quantized embedding after each level: `q_n = sum_{t<=n} cbar_t`.
    pub qs: Vec<Vec<f64>>,
}

impl ChainCache {
    pub fn reconstruction_loss(&self, v: &[f64]) -> f64 {
        match self.qs.last() {
            Some(q) => sq_dist(q, v),
            None => 0.0,
        }
    }
}

/// Runs the soft residual chain `r_1 = v; r_{n+1} = r_n - cbar_n` through all
/// codebooks at temperature `alpha`.
pub fn chain_forward(v: &[f64], codebooks: &[Matrix], alpha: f64) -> ChainCache {
    let n = codebooks.len();
    let mut cache = ChainCache {
        residuals: Vec::with_capacity(n),
        dists: Vec::with_capacity(n),
        affinities: Vec::with_capacity(n),
        cbars: Vec::with_capacity(n),
        qs: Vec::with_capacity(n),
    };
    let mut r = v.to_vec();
    let mut q = vec![0.0; v.len()];
    for book in codebooks {
        let d = lti_distance(&r, book);
        let a = lti_soft_assign(&d, alpha);
        let cbar = lti_index_embedding(&a, book);
        for (qi, ci) in q.iter_mut().zip(&cbar) {
            *qi += ci;
        }
        cache.residuals.push(r.clone());
        for (ri, ci) in r.iter_mut().zip(&cbar) {
            *ri -= ci;
        }
        cache.dists.push(d);
        cache.affinities.push(a);
        cache.cbars.push(cbar);
        cache.qs.push(q.clone());
    }
    cache
}

/// Upstream gradients entering the chain: per-level `dL/dq_n` and optional
/// per-level `dL/da_n` (from the balance regularizer).
#[derive(Debug, Clone, Default)]
pub struct ChainGradInput {
    pub grad_q: Vec<Vec<f64>>,
    pub grad_affinity: Vec<Option<Vec<f64>>>,
}

impl ChainGradInput {
    pub fn zeros(codebooks: &[Matrix], dim: usize) -> Self {
        ChainGradInput {
            grad_q: codebooks.iter().map(|_| vec![0.0; dim]).collect(),
            grad_affinity: codebooks.iter().map(|_| None).collect(),
        }
    }
}

/// Backpropagates through the residual chain, returning `dL/dv` and per-level
/// codebook gradients. Handles the full coupling: `q` paths, the residual
/// recursion, and the softmax dependence of affinities on distances.
pub fn chain_backward(
    codebooks: &[Matrix],
    alpha: f64,
    cache: &ChainCache,
    gin: &ChainGradInput,
) -> (Vec<f64>, Vec<Matrix>) {
    let nlev = codebooks.len();
    let dim = cache.residuals.first().map_or(0, |r| r.len());
    let mut grad_books: Vec<Matrix> = codebooks
        .iter()
        .map(|b| Matrix::zeros(b.rows(), b.cols()))
        .collect();
    // dL/dr_{n+1} flowing down from finer levels.
    let mut g_r = vec![0.0; dim];
    // Suffix sum of q gradients: dL/dcbar_n includes every dL/dq_m with m >= n.
    let mut suffix_gq = vec![0.0; dim];
    for n in (0..nlev).rev() {
        for (s, g) in suffix_gq.iter_mut().zip(&gin.grad_q[n]) {
            *s += g;
        }
        // cbar_n feeds q (all m >= n) and subtracts from r_{n+1}.
        let gcbar: Vec<f64> = suffix_gq.iter().zip(&g_r).map(|(a, b)| a - b).collect();

        let book = &codebooks[n];
        let a = &cache.affinities[n];
        let r = &cache.residuals[n];
        // Direct path: cbar = sum a_k c_k.
        let mut ga: Vec<f64> = (0..book.rows()).map(|k| dot(&gcbar, book.row(k))).collect();
        for k in 0..book.rows() {
            add_scaled_row(&mut grad_books[n], k, a[k], &gcbar);
        }
        if let Some(extra) = &gin.grad_affinity[n] {
            for (g, e) in ga.iter_mut().zip(extra) {
                *g += e;
            }
        }
        // Softmax backward: t_k = -alpha d_k.
        let inner: f64 = a.iter().zip(&ga).map(|(x, y)| x * y).sum();
        let gd: Vec<f64> = a
            .iter()
            .zip(&ga)
            .map(|(&ak, &gk)| -alpha * ak * (gk - inner))
            .collect();
        // Distance backward: d_k = ||r - c_k||^2.
        let mut g_r_local = vec![0.0; dim];
        for k in 0..book.rows() {
            let gk2 = 2.0 * gd[k];
            let ck = book.row(k);
            let gb_row = grad_books[n].row_mut(k);
            for i in 0..dim {
                let diff = r[i] - ck[i];
                g_r_local[i] += gk2 * diff;
                gb_row[i] -= gk2 * diff;
            }
        }
        // Identity path r_{n+1} = r_n - cbar_n.
        for (l, g) in g_r_local.iter_mut().zip(&g_r) {
            *l += g;
        }
        g_r = g_r_local;
    }
    (g_r, grad_books)
}

fn add_scaled_row(m: &mut Matrix, k: usize, alpha: f64, v: &[f64]) {
    for (w, x) in m.row_mut(k).iter_mut().zip(v) {
        *w += alpha * x;
    }
}

// ---------------------------------------------------------------------------
// Published index structures
// ---------------------------------------------------------------------------

/// One level of the published index: codebook, hard item mapping, and one
/// representative item per node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexLayer {
    pub codebook: Matrix,
    pub mapping: BTreeMap<u64, usize>,
    pub representatives: Vec<u64>,
    pub alpha: f64,
}

impl IndexLayer {
    pub fn num_nodes(&self) -> usize {
        self.codebook.rows()
    }

    /// Node occupancy histogram.
    pub fn occupancy(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_nodes()];
        for &node in self.mapping.values() {
            counts[node] += 1;
        }
        counts
    }
}

/// Ordered coarse-to-fine index levels published together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalIndex {
    pub layers: Vec<IndexLayer>,
    pub version: u64,
}

impl HierarchicalIndex {
    pub fn num_levels(&self) -> usize {
        self.layers.len()
    }

    /// Hard code path of an embedding through the chain (greedy residual
    /// quantization with argmin ties to the lowest node id).
    pub fn assign_path(&self, v: &[f64]) -> Vec<usize> {
        let books = self.codebooks();
        hard_path(v, &books)
    }

    pub fn codebooks(&self) -> Vec<Matrix> {
        self.layers.iter().map(|l| l.codebook.clone()).collect()
    }

    /// Hard quantized embedding prefix sums along a path.
    pub fn hard_q(&self, path: &[usize]) -> Vec<Vec<f64>> {
        let mut q = vec![0.0; self.layers[0].codebook.cols()];
        let mut out = Vec::with_capacity(path.len());
        for (layer, &node) in self.layers.iter().zip(path) {
            for (qi, ci) in q.iter_mut().zip(layer.codebook.row(node)) {
                *qi += ci;
            }
            out.push(q.clone());
        }
        out
    }

    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let bytes = serde_json::to_vec(self).expect("index serializes");
        let out = Sha256::digest(&bytes);
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Greedy hard residual path through raw codebooks.
pub fn hard_path(v: &[f64], codebooks: &[Matrix]) -> Vec<usize> {
    let mut r = v.to_vec();
    let mut path = Vec::with_capacity(codebooks.len());
    for book in codebooks {
        let d = lti_distance(&r, book);
        let m = argmin_node(&d);
        for (ri, ci) in r.iter_mut().zip(book.row(m)) {
            *ri -= ci;
        }
        path.push(m);
    }
    path
}

/// Representative selection for one level: for every node, the globally
/// closest item under that level's input vectors (items mapped elsewhere
/// included). Ties go to the lowest item id via strict improvement over an
/// ascending-id scan.
pub fn select_representatives(codebook: &Matrix, items: &[(u64, Vec<f64>)]) -> Result<Vec<u64>> {
    if items.is_empty() {
        return Err(Error::Degenerate("representative selection over empty catalog".into()));
    }
    let k = codebook.rows();
    let mut best = vec![(f64::INFINITY, 0u64); k];
    for (id, v) in items {
        for node in 0..k {
            let d = sq_dist(v, codebook.row(node));
            if d < best[node].0 {
                best[node] = (d, *id);
            }
        }
    }
    Ok(best.into_iter().map(|(_, id)| id).collect())
}

/// Publishes a hard index from codebooks: per-level mapping via greedy
/// residual quantization, representatives from per-level residual inputs.
pub fn publish_index(
    embeddings: &BTreeMap<u64, Vec<f64>>,
    codebooks: &[Matrix],
    alpha: f64,
    version: u64,
) -> Result<HierarchicalIndex> {
    if embeddings.is_empty() {
        return Err(Error::Degenerate("publish over empty catalog".into()));
    }
    let nlev = codebooks.len();
    let mut residuals: Vec<(u64, Vec<f64>)> =
        embeddings.iter().map(|(&id, v)| (id, v.clone())).collect();
    let mut layers = Vec::with_capacity(nlev);
    for book in codebooks {
        let mut mapping = BTreeMap::new();
        let reps = select_representatives(book, &residuals)?;
        for (id, r) in &mut residuals {
            let d = lti_distance(r, book);
            let m = argmin_node(&d);
            mapping.insert(*id, m);
            for (ri, ci) in r.iter_mut().zip(book.row(m)) {
                *ri -= ci;
            }
        }
        layers.push(IndexLayer {
            codebook: book.clone(),
            mapping,
            representatives: reps,
            alpha,
        });
    }
    Ok(HierarchicalIndex { layers, version })
}

// ---------------------------------------------------------------------------
// K-means (separate index learning baseline)
// ---------------------------------------------------------------------------

/// Lloyd's algorithm with k-means++ seeding. Returns centroids, assignments,
/// and the final objective (sum of squared distances).
pub fn kmeans_sil<R: Rng + ?Sized>(
    points: &[Vec<f64>],
    k: usize,
    iters: usize,
    rng: &mut R,
) -> Result<(Matrix, Vec<usize>, f64)> {
    if points.is_empty() || k == 0 || k > points.len() {
        return Err(Error::Config(format!(
            "kmeans needs 0 < k <= points ({} vs {k})",
            points.len()
        )));
    }
    let dim = points[0].len();
    // k-means++ seeding.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..points.len())].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // All remaining weight is zero; any distinct point works.
            match points.iter().position(|p| centroids.iter().all(|c| c != p)) {
                Some(i) => i,
                None => rng.gen_range(0..points.len()),
            }
        } else {
            let mut target = rng.gen_range(0.0..total);
            let mut pick = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        };
        centroids.push(points[next].clone());
        let newest = centroids.last().unwrap();
        for (di, p) in d2.iter_mut().zip(points) {
            let d = sq_dist(p, newest);
            if d < *di {
                *di = d;
            }
        }
    }

    let mut assign = vec![0usize; points.len()];
    let mut objective = f64::INFINITY;
    for _ in 0..iters.max(1) {
        // Assignment step.
        let mut new_obj = 0.0;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = sq_dist(p, &centroids[0]);
            for (c, cent) in centroids.iter().enumerate().skip(1) {
                let d = sq_dist(p, cent);
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            assign[i] = best;
            new_obj += best_d;
        }
        // Update step.
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (cent, s) in centroids[c].iter_mut().zip(&sums[c]) {
                    *cent = s / counts[c] as f64;
                }
            } else {
                // Re-seed an empty cluster at the point farthest from its centroid.
                let far = points
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (i, sq_dist(p, &centroids[assign[i]])))
                    .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i)
                    .unwrap();
                centroids[c] = points[far].clone();
            }
        }
        let converged =
            objective.is_finite() && (objective - new_obj).abs() <= 1e-12 * objective.max(1.0);
        objective = new_obj;
        if converged {
            break;
        }
    }
    let _ = objective;
    // Final assignment against the last centroid update.
    let mut final_obj = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut best = 0;
        let mut best_d = sq_dist(p, &centroids[0]);
        for (c, cent) in centroids.iter().enumerate().skip(1) {
            let d = sq_dist(p, cent);
            if d < best_d {
                best = c;
                best_d = d;
            }
        }
        assign[i] = best;
        final_obj += best_d;
    }
    let centroid_mat = Matrix::from_rows(&centroids)?;
    Ok((centroid_mat, assign, final_obj))
}

/// Builds a hierarchical index by running k-means per level on residuals.
pub fn build_kmeans_index(
    embeddings: &BTreeMap<u64, Vec<f64>>,
    ks: &[usize],
    iters: usize,
    seed: u64,
    alpha: f64,
    version: u64,
) -> Result<HierarchicalIndex> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut codebooks = Vec::with_capacity(ks.len());
    let mut residuals: Vec<Vec<f64>> = embeddings.values().cloned().collect();
    for &k in ks {
        let (centroids, assign, _) = kmeans_sil(&residuals, k, iters, &mut rng)?;
        for (r, &a) in residuals.iter_mut().zip(&assign) {
            for (ri, ci) in r.iter_mut().zip(centroids.row(a)) {
                *ri -= ci;
            }
        }
        codebooks.push(centroids);
    }
    publish_index(embeddings, &codebooks, alpha, version)
}

// ---------------------------------------------------------------------------
// Standalone residual index trainer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualTrainConfig {
    /// Nodes per level, coarse to fine.
    pub ks: Vec<usize>,
    pub iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub max_alpha: f64,
    pub exp: f64,
    /// Fixed alpha = max_alpha from step 0 when disabled.
    pub scheduler_enabled: bool,
    pub balance_weight: f64,
    pub balance_k_batches: usize,
    pub seed: u64,
}

impl Default for ResidualTrainConfig {
    fn default() -> Self {
        ResidualTrainConfig {
            ks: vec![16],
            iters: 400,
            batch_size: 32,
            lr: 0.05,
            optimizer: OptimizerKind::Adagrad,
            max_alpha: 50.0,
            exp: 2.0,
            scheduler_enabled: true,
            balance_weight: 0.1,
            balance_k_batches: 8,
            seed: 0,
        }
    }
}

/// Initializes codebooks by sampling item vectors (then residuals) without
/// replacement: avoids starting collapsed.
pub fn init_codebooks<R: Rng + ?Sized>(
    embeddings: &[Vec<f64>],
    ks: &[usize],
    rng: &mut R,
) -> Result<Vec<Matrix>> {
    if embeddings.is_empty() {
        return Err(Error::Degenerate("codebook init over empty catalog".into()));
    }
    let mut books = Vec::with_capacity(ks.len());
    let mut residuals: Vec<Vec<f64>> = embeddings.to_vec();
    for &k in ks {
        if k == 0 || k > residuals.len() {
            return Err(Error::Config(format!("level k={k} out of range")));
        }
        let mut idx: Vec<usize> = (0..residuals.len()).collect();
        for i in 0..k {
            let j = rng.gen_range(i..idx.len());
            idx.swap(i, j);
        }
        let rows: Vec<Vec<f64>> = idx[..k].iter().map(|&i| residuals[i].clone()).collect();
        let book = Matrix::from_rows(&rows)?;
        for r in &mut residuals {
            let d = lti_distance(r, &book);
            let m = argmin_node(&d);
            for (ri, ci) in r.iter_mut().zip(book.row(m)) {
                *ri -= ci;
            }
        }
        books.push(book);
    }
    Ok(books)
}

#[derive(Debug, Clone, Default)]
pub struct ResidualTrainTrace {
    pub recon_losses: Vec<f64>,
    pub penalties: Vec<f64>,
}

/// Trains residual codebooks by gradient descent on reconstruction loss plus
/// the balance regularizer, under the temperature schedule.
pub fn train_residual_index(
    embeddings: &[Vec<f64>],
    cfg: &ResidualTrainConfig,
) -> Result<(Vec<Matrix>, ResidualTrainTrace)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut books = init_codebooks(embeddings, &cfg.ks, &mut rng)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut balance: Vec<BalanceReg> = cfg
        .ks
        .iter()
        .map(|_| BalanceReg::new(cfg.balance_k_batches))
        .collect();
    let mut trace = ResidualTrainTrace::default();
    let dim = embeddings[0].len();

    for step in 0..cfg.iters {
        let alpha = if cfg.scheduler_enabled {
            scheduler_alpha(&SchedulerState {
                max_alpha: cfg.max_alpha,
                exp: cfg.exp,
                max_iters: cfg.iters,
                current_iter: step,
            })
        } else {
            cfg.max_alpha
        };
        let batch: Vec<&Vec<f64>> = (0..cfg.batch_size)
            .map(|_| &embeddings[rng.gen_range(0..embeddings.len())])
            .collect();
        let s = batch.len() as f64;

        let mut grad_books: Vec<Matrix> =
            books.iter().map(|b| Matrix::zeros(b.rows(), b.cols())).collect();
        let mut recon_total = 0.0;
        let mut assign_mats: Vec<Matrix> =
            cfg.ks.iter().map(|&k| Matrix::zeros(batch.len(), k)).collect();
        let mut caches = Vec::with_capacity(batch.len());
        for (bi, v) in batch.iter().enumerate() {
            let cache = chain_forward(v, &books, alpha);
            recon_total += cache.reconstruction_loss(v);
            for (lvl, a) in cache.affinities.iter().enumerate() {
                assign_mats[lvl].row_mut(bi).copy_from_slice(a);
            }
            caches.push(cache);
        }
        let recon = recon_total / s;

        // Balance penalties and their per-example affinity gradients.
        let mut penalty_total = 0.0;
        let mut aff_grads: Vec<Matrix> = Vec::with_capacity(books.len());
        for (lvl, reg) in balance.iter().enumerate() {
            let (p, g) = reg.penalty(&assign_mats[lvl])?;
            penalty_total += p;
            aff_grads.push(g);
        }

        for (bi, (v, cache)) in batch.iter().zip(&caches).enumerate() {
            let mut gin = ChainGradInput::zeros(&books, dim);
            // d/dq_N of mean ||q_N - v||^2.
            let last = gin.grad_q.len() - 1;
            for (g, (qi, vi)) in gin.grad_q[last]
                .iter_mut()
                .zip(cache.qs[last].iter().zip(v.iter()))
            {
                *g = 2.0 * (qi - vi) / s;
            }
            for lvl in 0..books.len() {
                let row = aff_grads[lvl].row(bi);
                gin.grad_affinity[lvl] =
                    Some(row.iter().map(|&x| cfg.balance_weight * x).collect());
            }
            let (_, gb) = chain_backward(&books, alpha, cache, &gin);
            for (acc, g) in grad_books.iter_mut().zip(&gb) {
                for (a, b) in acc.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *a += b;
                }
            }
        }

        let loss = recon + cfg.balance_weight * penalty_total;
        if !loss.is_finite() {
            return Err(Error::NonFinite("residual index loss".into()));
        }
        opt.begin_step();
        for (book, g) in books.iter_mut().zip(&grad_books) {
            opt.update(book.as_mut_slice(), g.as_slice())?;
        }
        for (reg, mat) in balance.iter_mut().zip(assign_mats) {
            reg.push(mat);
        }
        trace.recon_losses.push(recon);
        trace.penalties.push(penalty_total);
    }
    Ok((books, trace))
}

// ---------------------------------------------------------------------------
// Index artifact format
// ---------------------------------------------------------------------------

pub const INDEX_FORMAT_VERSION: u64 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexManifest {
    pub format_version: u64,
    pub version: u64,
    pub levels: Vec<IndexLevelMeta>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexLevelMeta {
    pub nodes: usize,
    pub dim: usize,
    pub alpha: f64,
}

pub fn save_index(index: &HierarchicalIndex, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = IndexManifest {
        format_version: INDEX_FORMAT_VERSION,
        version: index.version,
        levels: index
            .layers
            .iter()
            .map(|l| IndexLevelMeta {
                nodes: l.num_nodes(),
                dim: l.codebook.cols(),
                alpha: l.alpha,
            })
            .collect(),
    };
    artifact::write_manifest(&dir.join("manifest.json"), &manifest)?;
    for (i, layer) in index.layers.iter().enumerate() {
        artifact::write_tensor(
            &dir.join(format!("layer{i}.codebook.bin")),
            &[layer.num_nodes(), layer.codebook.cols()],
            layer.codebook.as_slice(),
        )?;
        let mapping: Vec<(u64, usize)> = layer.mapping.iter().map(|(&k, &v)| (k, v)).collect();
        artifact::write_manifest(&dir.join(format!("layer{i}.mapping.json")), &mapping)?;
        artifact::write_manifest(&dir.join(format!("layer{i}.reps.json")), &layer.representatives)?;
    }
    Ok(())
}

pub fn load_index(dir: &Path) -> Result<HierarchicalIndex> {
    let manifest: IndexManifest = artifact::read_manifest(&dir.join("manifest.json"))?;
    if manifest.format_version != INDEX_FORMAT_VERSION {
        return Err(Error::Artifact(format!(
            "unsupported index format version {}",
            manifest.format_version
        )));
    }
    let mut layers = Vec::with_capacity(manifest.levels.len());
    for (i, meta) in manifest.levels.iter().enumerate() {
        let (dims, data) = artifact::read_tensor(&dir.join(format!("layer{i}.codebook.bin")))?;
        if dims != vec![meta.nodes, meta.dim] {
            return Err(Error::Artifact(format!("layer {i} codebook shape mismatch")));
        }
        let codebook = Matrix::from_vec(meta.nodes, meta.dim, data)?;
        let mapping: Vec<(u64, usize)> =
            artifact::read_manifest(&dir.join(format!("layer{i}.mapping.json")))?;
        let representatives: Vec<u64> =
            artifact::read_manifest(&dir.join(format!("layer{i}.reps.json")))?;
        layers.push(IndexLayer {
            codebook,
            mapping: mapping.into_iter().collect(),
            representatives,
            alpha: meta.alpha,
        });
    }
    Ok(HierarchicalIndex {
        layers,
        version: manifest.version,
    })
}
