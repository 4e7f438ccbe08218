//! Non-negative matrix factorization and automatic rank selection.
//!
//! [`nmf_multiplicative`] minimizes the Frobenius error `‖X − WH‖_F` with
//! multiplicative updates. [`nmfk_select`] chooses the number of topics by
//! factorizing bootstrap-perturbed copies of `X` at each candidate rank and
//! measuring how reproducible the recovered `W` columns are.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

/// Added to every multiplicative-update denominator.
pub const EPSILON: f64 = 1e-12;
pub const DEFAULT_NOISE_SCALE: f64 = 0.03;
pub const DEFAULT_STABILITY_THRESHOLD: f64 = 0.7;

#[derive(Debug, Error)]
pub enum FactorizationError {
    #[error("rank {k} out of range 1..={max}")]
    RankOutOfRange { k: usize, max: usize },
    #[error("input matrix is all zero")]
    ZeroMatrix,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmfOptions {
    pub max_iters: usize,
    /// Stop once the relative error improves by less than this between iterations.
    pub tol: f64,
    pub seed: u64,
    /// Multiplicative steps applied to each factor per iteration. The
    /// products `XHᵀ`, `HHᵀ`, `WᵀX` and `WᵀW` are shared by the repeated
    /// steps, so values above 1 buy a lot of progress per `O(mnk)` pass.
    pub inner_updates: usize,
}

impl Default for NmfOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            tol: 1e-6,
            seed: 0,
            inner_updates: 1,
        }
    }
}

/// `X ≈ WH` with `W` (m×k) holding token-to-topic weights and `H` (k×n)
/// holding document coordinates in topic space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "Checkpoint", try_from = "Checkpoint")]
pub struct Factorization {
    pub w: Array2<f64>,
    pub h: Array2<f64>,
    pub k: usize,
    pub relative_error: f64,
    pub seed: u64,
    pub iterations: usize,
}

/// Dense row-major JSON form of a [`Factorization`].
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    k: usize,
    seed: u64,
    relative_error: f64,
    iterations: usize,
    w: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
}

fn rows_of(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn from_rows(rows: Vec<Vec<f64>>, cols: usize) -> Result<Array2<f64>, String> {
    let r = rows.len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((r, cols), flat).map_err(|e| e.to_string())
}

impl From<Factorization> for Checkpoint {
    fn from(f: Factorization) -> Self {
        Self {
            k: f.k,
            seed: f.seed,
            relative_error: f.relative_error,
            iterations: f.iterations,
            w: rows_of(&f.w),
            h: rows_of(&f.h),
        }
    }
}

impl TryFrom<Checkpoint> for Factorization {
    type Error = String;

    fn try_from(c: Checkpoint) -> Result<Self, String> {
        let n = c.h.first().map_or(0, Vec::len);
        if c.w.iter().any(|r| r.len() != c.k) || c.h.len() != c.k || c.h.iter().any(|r| r.len() != n)
        {
            return Err(format!("W/H shapes inconsistent with k = {}", c.k));
        }
        let w = from_rows(c.w, c.k)?;
        let h = from_rows(c.h, n)?;
        if w.iter().chain(h.iter()).any(|&v| !(v >= 0.0)) {
            return Err("negative or non-finite factor entry".into());
        }
        Ok(Self {
            w,
            h,
            k: c.k,
            relative_error: c.relative_error,
            seed: c.seed,
            iterations: c.iterations,
        })
    }
}

impl Factorization {
    pub fn m(&self) -> usize {
        self.w.nrows()
    }

    pub fn n(&self) -> usize {
        self.h.ncols()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FactorizationError> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FactorizationError> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

fn frobenius(x: ArrayView2<f64>) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `‖X − WH‖_F / ‖X‖_F`.
pub fn relative_error(
    x: ArrayView2<f64>,
    w: ArrayView2<f64>,
    h: ArrayView2<f64>,
) -> Result<f64, FactorizationError> {
    if w.nrows() != x.nrows() || h.ncols() != x.ncols() || w.ncols() != h.nrows() {
        return Err(FactorizationError::DimensionMismatch(format!(
            "X is {:?}, W is {:?}, H is {:?}",
            x.dim(),
            w.dim(),
            h.dim()
        )));
    }
    let norm = frobenius(x);
    if norm == 0.0 {
        return Err(FactorizationError::ZeroMatrix);
    }
    Ok(residual_norm(x, w, h) / norm)
}

fn residual_norm(x: ArrayView2<f64>, w: ArrayView2<f64>, h: ArrayView2<f64>) -> f64 {
    let wh = w.dot(&h);
    x.iter()
        .zip(wh.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// `‖X − WH‖_F` from `‖X‖² − 2⟨WᵀX, H⟩ + ⟨WᵀW, HHᵀ⟩`, reusing the
/// products from the H update. Falls back to the direct residual when
/// cancellation would dominate.
fn updated_error(
    x: ArrayView2<f64>,
    x_sq: f64,
    w: &Array2<f64>,
    h: &Array2<f64>,
    wtx: &Array2<f64>,
    wtw: &Array2<f64>,
) -> f64 {
    let cross: f64 = wtx.iter().zip(h.iter()).map(|(a, b)| a * b).sum();
    let hht = h.dot(&h.t());
    let quad: f64 = wtw.iter().zip(hht.iter()).map(|(a, b)| a * b).sum();
    let sq = x_sq - 2.0 * cross + quad;
    if sq > 1e-6 * x_sq {
        sq.sqrt()
    } else {
        residual_norm(x, w.view(), h.view())
    }
}

/// Multiplicative-update NMF. Deterministic given `opts.seed`.
pub fn nmf_multiplicative(
    x: ArrayView2<f64>,
    k: usize,
    opts: NmfOptions,
) -> Result<Factorization, FactorizationError> {
    nmf_traced(x, k, opts).map(|(f, _)| f)
}

/// Like [`nmf_multiplicative`], also returning the relative error after
/// initialization and after every iteration.
pub fn nmf_traced(
    x: ArrayView2<f64>,
    k: usize,
    opts: NmfOptions,
) -> Result<(Factorization, Vec<f64>), FactorizationError> {
    let (m, n) = x.dim();
    let max_k = m.min(n);
    if k == 0 || k > max_k {
        return Err(FactorizationError::RankOutOfRange { k, max: max_k });
    }
    if opts.max_iters == 0 || opts.inner_updates == 0 {
        return Err(FactorizationError::InvalidParameter(
            "max_iters and inner_updates must be at least 1".into(),
        ));
    }
    if x.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
        return Err(FactorizationError::InvalidParameter(
            "input has negative or non-finite entries".into(),
        ));
    }
    let x_norm = frobenius(x);
    if x_norm == 0.0 {
        return Err(FactorizationError::ZeroMatrix);
    }

    let x_sq = x_norm * x_norm;
    let mut rng = seed::rng(opts.seed);
    let mut w = Array2::from_shape_simple_fn((m, k), || rng.random::<f64>());
    let mut h = Array2::from_shape_simple_fn((k, n), || rng.random::<f64>());

    let mut trace = Vec::with_capacity(opts.max_iters + 1);
    let mut err = residual_norm(x, w.view(), h.view()) / x_norm;
    trace.push(err);
    let mut iterations = 0;
    for _ in 0..opts.max_iters {
        // W ← W ⊙ (XHᵀ) ⊘ (WHHᵀ + ε)
        let xht = x.dot(&h.t());
        let hht = h.dot(&h.t());
        for _ in 0..opts.inner_updates {
            let whht = w.dot(&hht);
            ndarray::Zip::from(&mut w)
                .and(&xht)
                .and(&whht)
                .for_each(|w, &num, &den| *w *= num / (den + EPSILON));
        }

        // H ← H ⊙ (WᵀX) ⊘ (WᵀWH + ε)
        let wtx = w.t().dot(&x);
        let wtw = w.t().dot(&w);
        for _ in 0..opts.inner_updates {
            let wtwh = wtw.dot(&h);
            ndarray::Zip::from(&mut h)
                .and(&wtx)
                .and(&wtwh)
                .for_each(|h, &num, &den| *h *= num / (den + EPSILON));
        }

        debug_assert!(w.iter().chain(h.iter()).all(|&v| v >= 0.0));
        iterations += 1;
        let next = updated_error(x, x_sq, &w, &h, &wtx, &wtw) / x_norm;
        trace.push(next);
        let improvement = err - next;
        err = next;
        if improvement < opts.tol {
            break;
        }
    }

    Ok((
        Factorization {
            w,
            h,
            k,
            relative_error: err,
            seed: opts.seed,
            iterations,
        },
        trace,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmfkOptions {
    pub k_min: usize,
    pub k_max: usize,
    pub n_resamples: usize,
    /// Perturbed copies multiply each entry by uniform noise in `[1 − s, 1 + s]`.
    pub noise_scale: f64,
    pub stability_threshold: f64,
    pub statistic: StabilityStatistic,
    pub max_iters: usize,
    pub tol: f64,
    pub inner_updates: usize,
    pub seed: u64,
}

impl Default for NmfkOptions {
    fn default() -> Self {
        Self {
            k_min: 2,
            k_max: 10,
            n_resamples: 10,
            noise_scale: DEFAULT_NOISE_SCALE,
            stability_threshold: DEFAULT_STABILITY_THRESHOLD,
            statistic: StabilityStatistic::MinCluster,
            max_iters: 1000,
            tol: 1e-9,
            inner_updates: 10,
            seed: 0,
        }
    }
}

/// Which silhouette summary the selection rule thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StabilityStatistic {
    /// Mean silhouette over all pooled columns.
    Mean,
    /// Smallest per-cluster mean silhouette. A single irreproducible
    /// component sinks the rank, which the pooled mean hides once `k` is
    /// large.
    MinCluster,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub k: usize,
    /// Mean silhouette of pooled `W` columns under cosine distance.
    pub stability: f64,
    /// Smallest per-cluster mean silhouette.
    pub min_cluster_stability: f64,
    /// Mean relative error of the perturbed factorizations.
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSelectionReport {
    pub rows: Vec<RankRow>,
    pub chosen_k: usize,
    pub threshold: f64,
    pub statistic: StabilityStatistic,
    pub trace: Vec<String>,
}

impl RankSelectionReport {
    pub fn row(&self, k: usize) -> Option<&RankRow> {
        self.rows.iter().find(|r| r.k == k)
    }
}

/// Chooses the number of topics from factor stability under perturbation.
///
/// For each candidate `k`, `n_resamples` perturbed copies of `X` are
/// factorized with independent initializations. Every resample's `W` columns
/// are matched one-to-one to the first resample's columns by greedy cosine
/// matching, giving `k` clusters of `n_resamples` columns each. The mean
/// silhouette of those clusters (cosine distance) is the stability score.
///
/// The chosen rank is the largest `k` whose stability clears the threshold
/// and whose error is below that of `k_min`; when nothing qualifies, the
/// most stable `k` wins.
pub fn nmfk_select(
    x: ArrayView2<f64>,
    opts: NmfkOptions,
) -> Result<RankSelectionReport, FactorizationError> {
    let (m, n) = x.dim();
    let max_k = m.min(n);
    if opts.k_min < 1 || opts.k_min > opts.k_max || opts.k_max > max_k {
        return Err(FactorizationError::InvalidParameter(format!(
            "rank range [{}, {}] must satisfy 1 <= k_min <= k_max <= {max_k}",
            opts.k_min, opts.k_max
        )));
    }
    if opts.n_resamples < 2 {
        return Err(FactorizationError::InvalidParameter(
            "n_resamples must be at least 2".into(),
        ));
    }
    if !(0.0..1.0).contains(&opts.noise_scale) {
        return Err(FactorizationError::InvalidParameter(format!(
            "noise_scale must lie in [0, 1), got {}",
            opts.noise_scale
        )));
    }
    if frobenius(x) == 0.0 {
        return Err(FactorizationError::ZeroMatrix);
    }

    let jobs: Vec<(usize, usize)> = (opts.k_min..=opts.k_max)
        .flat_map(|k| (0..opts.n_resamples).map(move |r| (k, r)))
        .collect();
    // Collected in job order, so the report does not depend on scheduling.
    let runs: Vec<Factorization> = jobs
        .par_iter()
        .map(|&(k, r)| {
            let perturbed = perturb(x, opts.noise_scale, seed::derive_indexed(opts.seed, "nmfk-noise", &[k as u64, r as u64]));
            let nmf = NmfOptions {
                max_iters: opts.max_iters,
                tol: opts.tol,
                inner_updates: opts.inner_updates,
                seed: seed::derive_indexed(opts.seed, "nmfk-init", &[k as u64, r as u64]),
            };
            nmf_multiplicative(perturbed.view(), k, nmf)
        })
        .collect::<Result<_, _>>()?;

    let mut rows = Vec::new();
    for (k, group) in (opts.k_min..=opts.k_max).zip(runs.chunks(opts.n_resamples)) {
        let (stability, min_cluster_stability) = column_stability(group);
        let relative_error =
            group.iter().map(|f| f.relative_error).sum::<f64>() / group.len() as f64;
        rows.push(RankRow {
            k,
            stability,
            min_cluster_stability,
            relative_error,
        });
    }

    let (chosen_k, trace) = choose_rank(&rows, opts.stability_threshold, opts.statistic);
    Ok(RankSelectionReport {
        rows,
        chosen_k,
        threshold: opts.stability_threshold,
        statistic: opts.statistic,
        trace,
    })
}

fn choose_rank(
    rows: &[RankRow],
    threshold: f64,
    statistic: StabilityStatistic,
) -> (usize, Vec<String>) {
    let score = |r: &RankRow| match statistic {
        StabilityStatistic::Mean => r.stability,
        StabilityStatistic::MinCluster => r.min_cluster_stability,
    };
    let base = &rows[0];
    let mut trace = Vec::new();
    let mut chosen = None;
    for row in rows {
        let stable = score(row) >= threshold;
        let better = row.k == base.k || row.relative_error < base.relative_error;
        trace.push(format!(
            "k={}: {:?} stability {:.4} {} {:.2}, error {:.6} {} k_min error {:.6}",
            row.k,
            statistic,
            score(row),
            if stable { ">=" } else { "<" },
            threshold,
            row.relative_error,
            if better { "qualifies vs" } else { "not below" },
            base.relative_error
        ));
        if stable && better {
            chosen = Some(row.k);
        }
    }
    let k = match chosen {
        Some(k) => {
            trace.push(format!("chosen k={k}: largest qualifying rank"));
            k
        }
        None => {
            let best = rows
                .iter()
                .fold(base, |best, r| if score(r) > score(best) { r } else { best });
            trace.push(format!(
                "no rank qualified; chosen k={} with maximal stability",
                best.k
            ));
            best.k
        }
    };
    (k, trace)
}

fn perturb(x: ArrayView2<f64>, scale: f64, seed: u64) -> Array2<f64> {
    let mut rng = seed::rng(seed);
    x.mapv(|v| v * (1.0 + scale * (2.0 * rng.random::<f64>() - 1.0)))
}

fn unit_columns(w: &Array2<f64>) -> Vec<Vec<f64>> {
    w.axis_iter(Axis(1))
        .map(|c| {
            let norm = c.dot(&c).sqrt();
            if norm > 0.0 {
                c.iter().map(|v| v / norm).collect()
            } else {
                c.to_vec()
            }
        })
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Greedy one-to-one matching of `columns` onto `reference`: repeatedly take
/// the most similar unmatched pair. Returns the reference index per column.
pub fn greedy_match(reference: &[Vec<f64>], columns: &[Vec<f64>]) -> Vec<usize> {
    let k = reference.len();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(k * columns.len());
    for (c, col) in columns.iter().enumerate() {
        for (r, rc) in reference.iter().enumerate() {
            pairs.push((cosine(col, rc), c, r));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut assigned = vec![usize::MAX; columns.len()];
    let mut taken = vec![false; k];
    for (_, c, r) in pairs {
        if assigned[c] == usize::MAX && !taken[r] {
            assigned[c] = r;
            taken[r] = true;
        }
    }
    assigned
}

fn column_stability(group: &[Factorization]) -> (f64, f64) {
    let reference = unit_columns(&group[0].w);
    let k = reference.len();
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for f in group {
        let cols = unit_columns(&f.w);
        let matched = greedy_match(&reference, &cols);
        for (col, label) in cols.into_iter().zip(matched) {
            points.push(col);
            labels.push(label);
        }
    }
    let s = silhouette_cosine(&points, &labels, k);
    let mean = s.iter().sum::<f64>() / s.len() as f64;
    let min_cluster = (0..k)
        .map(|c| {
            let (sum, cnt) = s
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l == c)
                .fold((0.0, 0usize), |(a, n), (v, _)| (a + v, n + 1));
            if cnt == 0 { 0.0 } else { sum / cnt as f64 }
        })
        .fold(f64::INFINITY, f64::min);
    (mean, min_cluster)
}

/// Per-point silhouette values under cosine distance `1 − cos`.
///
/// With a single cluster there is no neighbouring cluster; the neighbour
/// distance is then taken as 1, the largest cosine distance between
/// non-negative vectors. Points in singleton clusters score 0.
pub fn silhouette_cosine(points: &[Vec<f64>], labels: &[usize], n_clusters: usize) -> Vec<f64> {
    let n = points.len();
    let dist: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| (1.0 - cosine(&points[i], &points[j])).max(0.0))
                .collect()
        })
        .collect();
    let sizes = (0..n_clusters)
        .map(|c| labels.iter().filter(|&&l| l == c).count())
        .collect::<Vec<_>>();
    (0..n)
        .map(|i| {
            let own = labels[i];
            if sizes[own] <= 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; n_clusters];
            for j in 0..n {
                if j != i {
                    sums[labels[j]] += dist[i][j];
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..n_clusters)
                .filter(|&c| c != own && sizes[c] > 0)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let b = if b.is_finite() { b } else { 1.0 };
            let denom = a.max(b);
            if denom == 0.0 {
                0.0
            } else {
                ((b - a) / denom).clamp(-1.0, 1.0)
            }
        })
        .collect()
}
