//! Budgeted data sanitization: embeddings, outlier filters, and poison-removal
//! scoring.
//!
//! A defense first maps every training sample into an embedding space
//! ([`embed`]), then runs a removal filter under a budget that caps how many
//! samples it may discard. [`l2_centroid_filter`] ranks samples by distance to
//! their own class centroid; [`detector_filter`] wraps three unsupervised
//! outlier detectors (one-class SVM, isolation forest, local outlier factor).
//! [`success_rate`] scores a filter by the fraction of injected poisons it
//! removed.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array1, Array2, ArrayD, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::models::Classifier;

pub const TSNE_PERPLEXITY: f64 = 30.0;
pub const TSNE_STEPS: usize = 1000;
pub const ISOLATION_TREES: usize = 100;
pub const ISOLATION_SUBSAMPLE: usize = 256;
pub const LOF_NEIGHBORS: usize = 20;

/// How training samples are mapped into the space the filter operates on.
pub enum EmbeddingSpec<'a> {
    /// Identity embedding: samples are flattened and used as-is.
    Raw,
    /// Penultimate-layer activations of a classifier trained on the first
    /// (clean) task.
    DeepFeature { model: &'a Classifier<f32> },
    /// Exact t-SNE down to two dimensions.
    Tsne {
        perplexity: f64,
        steps: usize,
        seed: u64,
    },
}

impl EmbeddingSpec<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            EmbeddingSpec::Raw => "raw",
            EmbeddingSpec::DeepFeature { .. } => "deep-feature",
            EmbeddingSpec::Tsne { .. } => "tsne",
        }
    }

    pub fn tsne(seed: u64) -> Self {
        EmbeddingSpec::Tsne {
            perplexity: TSNE_PERPLEXITY,
            steps: TSNE_STEPS,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetectorKind {
    OneClassSvm,
    IsolationForest,
    LocalOutlierFactor,
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DetectorKind::OneClassSvm => "one-class-svm",
            DetectorKind::IsolationForest => "isolation-forest",
            DetectorKind::LocalOutlierFactor => "local-outlier-factor",
        };
        f.write_str(s)
    }
}

/// Configuration for the unsupervised detectors behind [`detector_filter`].
///
/// The removal budget doubles as the detector's contamination assumption:
/// the one-class SVM uses nu = budget and the other two flag the top
/// budget-fraction of anomaly scores.
#[derive(Debug, Clone)]
pub struct DetectorSpec {
    pub kind: DetectorKind,
    /// Fraction of the dataset the filter may remove, in (0, 0.05].
    pub budget: f64,
    /// RBF kernel width; defaults to the median pairwise squared distance
    /// heuristic when unset.
    pub svm_gamma: Option<f64>,
    pub trees: usize,
    pub lof_neighbors: usize,
    pub seed: u64,
}

impl DetectorSpec {
    pub fn new(kind: DetectorKind, budget: f64, seed: u64) -> Self {
        DetectorSpec {
            kind,
            budget,
            svm_gamma: None,
            trees: ISOLATION_TREES,
            lof_neighbors: LOF_NEIGHBORS,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_budget(self.budget)?;
        if self.trees == 0 {
            return Err(Error::Config("isolation forest needs at least one tree".into()));
        }
        if self.lof_neighbors == 0 {
            return Err(Error::Config("local outlier factor needs k >= 1".into()));
        }
        if let Some(g) = self.svm_gamma {
            if !(g > 0.0) {
                return Err(Error::Config(format!("svm kernel width must be positive, got {g}")));
            }
        }
        Ok(())
    }
}

/// Outcome of one sanitization pass over a training set.
#[derive(Debug, Clone)]
pub struct SanitizationReport {
    pub removed_indices: Vec<usize>,
    pub removed_count: usize,
    /// Fraction of poisoned samples the filter removed.
    pub success_rate: f64,
    pub per_class_removed: BTreeMap<usize, usize>,
}

impl SanitizationReport {
    pub fn new(removed: Vec<usize>, labels: &[usize], poison_mask: &[bool]) -> Result<Self> {
        let success = success_rate(&removed, poison_mask)?;
        let mut per_class = BTreeMap::new();
        for &i in &removed {
            *per_class.entry(labels[i]).or_insert(0) += 1;
        }
        Ok(SanitizationReport {
            removed_count: removed.len(),
            removed_indices: removed,
            success_rate: success,
            per_class_removed: per_class,
        })
    }
}

fn check_budget(budget: f64) -> Result<()> {
    if !(budget > 0.0 && budget <= 0.05) {
        return Err(Error::Config(format!(
            "removal budget must lie in (0, 0.05], got {budget}"
        )));
    }
    Ok(())
}

fn removal_cap(budget: f64, n: usize) -> usize {
    (budget * n as f64).ceil() as usize
}

/// Map a batch of inputs into the embedding space a filter operates on.
pub fn embed(inputs: &ArrayD<f32>, spec: &EmbeddingSpec) -> Result<Array2<f64>> {
    let n = inputs.shape()[0];
    match spec {
        EmbeddingSpec::Raw => {
            let flat = inputs
                .to_shape((n, inputs.len() / n.max(1)))
                .map_err(|e| Error::Shape(e.to_string()))?;
            Ok(flat.mapv(|v| v as f64))
        }
        EmbeddingSpec::DeepFeature { model } => {
            let feats = model.features(inputs)?;
            Ok(feats.mapv(|v| v as f64))
        }
        EmbeddingSpec::Tsne {
            perplexity,
            steps,
            seed,
        } => {
            let flat = embed(inputs, &EmbeddingSpec::Raw)?;
            tsne(&flat, *perplexity, *steps, *seed)
        }
    }
}

/// Mean embedding of all samples carrying label `class`.
pub fn class_centroid(embedded: &Array2<f64>, labels: &[usize], class: usize) -> Result<Array1<f64>> {
    if embedded.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} embedded rows but {} labels",
            embedded.nrows(),
            labels.len()
        )));
    }
    let mut sum = Array1::<f64>::zeros(embedded.ncols());
    let mut count = 0usize;
    for (row, &y) in embedded.rows().into_iter().zip(labels) {
        if y == class {
            sum += &row;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Data(format!("no samples labeled {class}")));
    }
    Ok(sum / count as f64)
}

/// Remove the global top `ceil(budget * N)` samples ranked by Euclidean
/// distance to their own class centroid. Ties break toward lower indices.
pub fn l2_centroid_filter(
    embedded: &Array2<f64>,
    labels: &[usize],
    budget: f64,
) -> Result<Vec<usize>> {
    check_budget(budget)?;
    if embedded.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} embedded rows but {} labels",
            embedded.nrows(),
            labels.len()
        )));
    }
    let mut centroids: BTreeMap<usize, Array1<f64>> = BTreeMap::new();
    for &y in labels {
        if !centroids.contains_key(&y) {
            centroids.insert(y, class_centroid(embedded, labels, y)?);
        }
    }
    let scores: Vec<f64> = embedded
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, y)| {
            let c = &centroids[y];
            row.iter().zip(c.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        })
        .collect();
    Ok(top_scores(&scores, removal_cap(budget, labels.len()), None))
}

/// Fit an unsupervised outlier detector on the embedded set and return the
/// flagged indices, truncated to the removal budget.
pub fn detector_filter(embedded: &Array2<f64>, spec: &DetectorSpec) -> Result<Vec<usize>> {
    spec.validate()?;
    let n = embedded.nrows();
    if n == 0 {
        return Err(Error::Data("cannot sanitize an empty dataset".into()));
    }
    if all_rows_identical(embedded) {
        eprintln!("warning: all embedded samples are identical, no outliers to remove");
        return Ok(Vec::new());
    }
    let cap = removal_cap(spec.budget, n);
    match spec.kind {
        DetectorKind::OneClassSvm => {
            let scores = one_class_svm_scores(embedded, spec.budget, spec.svm_gamma)?;
            Ok(top_scores(&scores, cap, None))
        }
        DetectorKind::IsolationForest => {
            let scores = isolation_forest_scores(embedded, spec.trees, spec.seed);
            Ok(top_scores(&scores, cap, None))
        }
        DetectorKind::LocalOutlierFactor => {
            let k = spec.lof_neighbors;
            if k >= n {
                return Err(Error::Config(format!(
                    "local outlier factor needs k < N, got k={k} with N={n}"
                )));
            }
            let scores = lof_scores(embedded, k);
            Ok(top_scores(&scores, cap, None))
        }
    }
}

/// Fraction of poisoned samples that appear in the removal set.
pub fn success_rate(removed: &[usize], poison_mask: &[bool]) -> Result<f64> {
    let total = poison_mask.iter().filter(|&&p| p).count();
    if total == 0 {
        return Err(Error::Data("poison mask marks no samples".into()));
    }
    let caught = removed.iter().filter(|&&i| poison_mask[i]).count();
    Ok(caught as f64 / total as f64)
}

/// Run one full sanitization pass: centroid filters need the labels, detector
/// filters ignore them.
pub fn sanitize_centroid(
    embedded: &Array2<f64>,
    labels: &[usize],
    poison_mask: &[bool],
    budget: f64,
) -> Result<SanitizationReport> {
    let removed = l2_centroid_filter(embedded, labels, budget)?;
    SanitizationReport::new(removed, labels, poison_mask)
}

pub fn sanitize_detector(
    embedded: &Array2<f64>,
    labels: &[usize],
    poison_mask: &[bool],
    spec: &DetectorSpec,
) -> Result<SanitizationReport> {
    let removed = detector_filter(embedded, spec)?;
    SanitizationReport::new(removed, labels, poison_mask)
}

/// Indices of the `cap` largest scores, optionally requiring scores above a
/// floor. Ties break toward lower indices; the result is sorted ascending.
fn top_scores(scores: &[f64], cap: usize, floor: Option<f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len())
        .filter(|&i| floor.map_or(true, |f| scores[i] > f))
        .collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(cap);
    order.sort_unstable();
    order
}

fn all_rows_identical(x: &Array2<f64>) -> bool {
    if x.nrows() < 2 {
        return true;
    }
    let first = x.row(0);
    x.rows().into_iter().all(|r| r == first)
}

/// Squared Euclidean distances between all row pairs, via the Gram matrix.
fn pairwise_sq_dists(x: &Array2<f64>) -> Array2<f64> {
    let gram = x.dot(&x.t());
    let sq: Vec<f64> = gram.diag().to_vec();
    let n = x.nrows();
    let mut d = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            d[(i, j)] = (sq[i] + sq[j] - 2.0 * gram[(i, j)]).max(0.0);
        }
    }
    d
}

// ---------------------------------------------------------------------------
// One-class SVM (nu-formulation, SMO over the box-constrained dual)
// ---------------------------------------------------------------------------

/// Anomaly scores from a one-class SVM with RBF kernel: rho - f(x_i), so
/// positive means outside the learned boundary.
fn one_class_svm_scores(x: &Array2<f64>, nu: f64, gamma: Option<f64>) -> Result<Vec<f64>> {
    let n = x.nrows();
    let d2 = pairwise_sq_dists(x);
    let gamma = match gamma {
        Some(g) => g,
        None => {
            let mut offdiag: Vec<f64> = Vec::with_capacity(n * (n - 1) / 2);
            for i in 0..n {
                for j in (i + 1)..n {
                    offdiag.push(d2[(i, j)]);
                }
            }
            offdiag.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = offdiag[offdiag.len() / 2];
            if median <= 0.0 {
                return Err(Error::Data(
                    "median pairwise distance is zero, kernel width undefined".into(),
                ));
            }
            1.0 / median
        }
    };
    let kernel = d2.mapv(|v| (-gamma * v).exp());

    // Dual: minimize (1/2) a^T K a subject to 0 <= a_i <= 1/(nu n), sum a = 1.
    let c = 1.0 / (nu * n as f64);
    let mut alpha = vec![0.0f64; n];
    let mut remaining = 1.0f64;
    for a in alpha.iter_mut() {
        *a = remaining.min(c);
        remaining -= *a;
        if remaining <= 0.0 {
            break;
        }
    }
    // f_i = (K alpha)_i, kept up to date incrementally.
    let mut f: Vec<f64> = (0..n)
        .map(|i| (0..n).map(|j| kernel[(i, j)] * alpha[j]).sum())
        .collect();
    let tol = 1e-6;
    for _ in 0..100_000 {
        let mut up: Option<usize> = None;
        let mut low: Option<usize> = None;
        for i in 0..n {
            if alpha[i] < c - 1e-15 && up.map_or(true, |u| f[i] < f[u]) {
                up = Some(i);
            }
            if alpha[i] > 1e-15 && low.map_or(true, |l| f[i] > f[l]) {
                low = Some(i);
            }
        }
        let (i, j) = match (low, up) {
            (Some(i), Some(j)) if i != j && f[i] - f[j] > tol => (i, j),
            _ => break,
        };
        let denom = kernel[(i, i)] + kernel[(j, j)] - 2.0 * kernel[(i, j)];
        let step = if denom > 1e-12 {
            (f[i] - f[j]) / denom
        } else {
            f64::INFINITY
        };
        let step = step.min(alpha[i]).min(c - alpha[j]);
        if step <= 0.0 {
            break;
        }
        alpha[i] -= step;
        alpha[j] += step;
        for t in 0..n {
            f[t] += step * (kernel[(t, j)] - kernel[(t, i)]);
        }
    }
    // rho is f at the margin; average over unbounded support vectors, falling
    // back to the midpoint of the active bounds.
    let margin: Vec<f64> = (0..n)
        .filter(|&i| alpha[i] > 1e-10 && alpha[i] < c - 1e-10)
        .map(|i| f[i])
        .collect();
    let rho = if margin.is_empty() {
        let hi = (0..n)
            .filter(|&i| alpha[i] > 1e-10)
            .map(|i| f[i])
            .fold(f64::NEG_INFINITY, f64::max);
        let lo = (0..n)
            .filter(|&i| alpha[i] < c - 1e-10)
            .map(|i| f[i])
            .fold(f64::INFINITY, f64::min);
        0.5 * (hi + lo)
    } else {
        margin.iter().sum::<f64>() / margin.len() as f64
    };
    Ok(f.iter().map(|&fi| rho - fi).collect())
}

// ---------------------------------------------------------------------------
// Isolation forest
// ---------------------------------------------------------------------------

enum IsoNode {
    Leaf { size: usize },
    Split {
        feature: usize,
        threshold: f64,
        left: Box<IsoNode>,
        right: Box<IsoNode>,
    },
}

/// Average path length of an unsuccessful BST search over `n` points.
fn avg_path(n: usize) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    let nf = n as f64;
    // harmonic number approximation H(n-1) ~ ln(n-1) + Euler-Mascheroni
    2.0 * ((nf - 1.0).ln() + 0.577_215_664_901_532_9) - 2.0 * (nf - 1.0) / nf
}

fn build_iso_tree(
    x: &Array2<f64>,
    idx: &mut [usize],
    depth: usize,
    limit: usize,
    rng: &mut ChaCha8Rng,
) -> IsoNode {
    if depth >= limit || idx.len() <= 1 {
        return IsoNode::Leaf { size: idx.len() };
    }
    // pick a feature with spread; give up after a few tries
    for _ in 0..8 {
        let feature = rng.gen_range(0..x.ncols());
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &i in idx.iter() {
            lo = lo.min(x[(i, feature)]);
            hi = hi.max(x[(i, feature)]);
        }
        if hi <= lo {
            continue;
        }
        let threshold = rng.gen_range(lo..hi);
        let split = itertools_partition(idx, |&i| x[(i, feature)] < threshold);
        let (left_idx, right_idx) = idx.split_at_mut(split);
        let left = build_iso_tree(x, left_idx, depth + 1, limit, rng);
        let right = build_iso_tree(x, right_idx, depth + 1, limit, rng);
        return IsoNode::Split {
            feature,
            threshold,
            left: Box::new(left),
            right: Box::new(right),
        };
    }
    IsoNode::Leaf { size: idx.len() }
}

/// In-place stable-enough partition; returns the count satisfying the
/// predicate (order inside each half does not matter for tree building).
fn itertools_partition(idx: &mut [usize], pred: impl Fn(&usize) -> bool) -> usize {
    let mut split = 0;
    for i in 0..idx.len() {
        if pred(&idx[i]) {
            idx.swap(split, i);
            split += 1;
        }
    }
    split
}

fn iso_path_length(node: &IsoNode, x: &Array2<f64>, row: usize, depth: f64) -> f64 {
    match node {
        IsoNode::Leaf { size } => depth + avg_path(*size),
        IsoNode::Split {
            feature,
            threshold,
            left,
            right,
        } => {
            if x[(row, *feature)] < *threshold {
                iso_path_length(left, x, row, depth + 1.0)
            } else {
                iso_path_length(right, x, row, depth + 1.0)
            }
        }
    }
}

fn isolation_forest_scores(x: &Array2<f64>, trees: usize, seed: u64) -> Vec<f64> {
    let n = x.nrows();
    let psi = ISOLATION_SUBSAMPLE.min(n);
    let limit = (psi as f64).log2().ceil().max(1.0) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total_path = vec![0.0f64; n];
    for _ in 0..trees {
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..psi {
            let j = rng.gen_range(i..n);
            pool.swap(i, j);
        }
        let mut sample = pool[..psi].to_vec();
        let tree = build_iso_tree(x, &mut sample, 0, limit, &mut rng);
        for (row, acc) in total_path.iter_mut().enumerate() {
            *acc += iso_path_length(&tree, x, row, 0.0);
        }
    }
    let norm = avg_path(psi);
    total_path
        .iter()
        .map(|&p| {
            let mean = p / trees as f64;
            2f64.powf(-mean / norm)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Local outlier factor
// ---------------------------------------------------------------------------

fn lof_scores(x: &Array2<f64>, k: usize) -> Vec<f64> {
    let n = x.nrows();
    let d2 = pairwise_sq_dists(x);
    let dist = d2.mapv(f64::sqrt);
    // k nearest neighbours of each point (excluding itself), plus k-distance
    let mut neighbors: Vec<Vec<usize>> = Vec::with_capacity(n);
    let mut kdist = vec![0.0f64; n];
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| {
            dist[(i, a)]
                .partial_cmp(&dist[(i, b)])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        order.truncate(k);
        kdist[i] = dist[(i, *order.last().unwrap())];
        neighbors.push(order);
    }
    let lrd: Vec<f64> = (0..n)
        .map(|i| {
            let reach: f64 = neighbors[i]
                .iter()
                .map(|&j| dist[(i, j)].max(kdist[j]))
                .sum();
            if reach <= 0.0 {
                f64::INFINITY
            } else {
                k as f64 / reach
            }
        })
        .collect();
    (0..n)
        .map(|i| {
            if lrd[i].is_infinite() {
                // duplicated points: maximally dense, never an outlier
                return 1.0;
            }
            let ratio: f64 = neighbors[i]
                .iter()
                .map(|&j| if lrd[j].is_infinite() { lrd[i] * 10.0 } else { lrd[j] })
                .sum::<f64>()
                / k as f64;
            ratio / lrd[i]
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Exact t-SNE
// ---------------------------------------------------------------------------

/// Exact (quadratic-time) t-SNE to two dimensions, deterministic per seed.
fn tsne(x: &Array2<f64>, perplexity: f64, steps: usize, seed: u64) -> Result<Array2<f64>> {
    let n = x.nrows();
    if n < 4 {
        return Err(Error::Data(format!("t-SNE needs at least 4 samples, got {n}")));
    }
    if !(perplexity > 0.0) {
        return Err(Error::Config(format!("perplexity must be positive, got {perplexity}")));
    }
    let d2 = pairwise_sq_dists(x);
    let target_entropy = perplexity.min((n - 1) as f64).ln();

    // Per-point precision search so each conditional distribution hits the
    // requested perplexity.
    let mut p = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let (mut beta, mut lo, mut hi) = (1.0f64, 0.0f64, f64::INFINITY);
        for _ in 0..50 {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let w = (-beta * d2[(i, j)]).exp();
                sum += w;
                weighted += w * d2[(i, j)];
            }
            if sum <= 0.0 {
                beta *= 0.5;
                hi = hi.min(beta * 2.0);
                continue;
            }
            let entropy = sum.ln() + beta * weighted / sum;
            if (entropy - target_entropy).abs() < 1e-5 {
                break;
            }
            if entropy > target_entropy {
                lo = beta;
                beta = if hi.is_finite() { 0.5 * (beta + hi) } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = 0.5 * (beta + lo);
            }
        }
        let mut sum = 0.0;
        for j in 0..n {
            if j != i {
                let w = (-beta * d2[(i, j)]).exp();
                p[(i, j)] = w;
                sum += w;
            }
        }
        if sum > 0.0 {
            for j in 0..n {
                p[(i, j)] /= sum;
            }
        }
    }
    // symmetrize and normalize over all pairs
    let p = {
        let pt = p.t().to_owned();
        let mut s = &p + &pt;
        s /= 2.0 * n as f64;
        s.mapv_into(|v| v.max(1e-12))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = Array2::<f64>::zeros((n, 2));
    for v in y.iter_mut() {
        // Box-Muller, small initial spread
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen::<f64>();
        *v = 1e-4 * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    }
    let mut vel = Array2::<f64>::zeros((n, 2));
    let lr = 200.0;
    let exaggeration_until = steps.min(100);
    for step in 0..steps {
        let exaggeration = if step < exaggeration_until { 4.0 } else { 1.0 };
        let momentum = if step < 250 { 0.5 } else { 0.8 };
        // student-t affinities in the embedding
        let mut num = Array2::<f64>::zeros((n, n));
        let mut zsum = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let dy0 = y[(i, 0)] - y[(j, 0)];
                let dy1 = y[(i, 1)] - y[(j, 1)];
                let w = 1.0 / (1.0 + dy0 * dy0 + dy1 * dy1);
                num[(i, j)] = w;
                num[(j, i)] = w;
                zsum += 2.0 * w;
            }
        }
        let zsum = zsum.max(1e-12);
        let mut grad = Array2::<f64>::zeros((n, 2));
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = (num[(i, j)] / zsum).max(1e-12);
                let coeff = 4.0 * (exaggeration * p[(i, j)] - q) * num[(i, j)];
                grad[(i, 0)] += coeff * (y[(i, 0)] - y[(j, 0)]);
                grad[(i, 1)] += coeff * (y[(i, 1)] - y[(j, 1)]);
            }
        }
        vel.zip_mut_with(&grad, |v, g| *v = momentum * *v - lr * g);
        y += &vel;
        // recenter to keep the embedding from drifting
        let mean = y.mean_axis(Axis(0)).unwrap();
        y -= &mean;
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "t-SNE embedding".into(),
            detail: "coordinates diverged".into(),
        });
    }
    Ok(y)
}
