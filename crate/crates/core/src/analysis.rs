//! Diagnostics: codeword usage, decoder smoothness, clustering and
//! projections of the latent space.

use crate::codebook::{dequantize, sq_dist, Codebook, NeighborTable, TokenGrid};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::perturbation::{perturb_grid, PerturbationSpec};
use crate::rng::{self, Stream};
use crate::tokenizer::Tokenizer;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdView {
    pub threshold: u64,
    /// Codewords used at least `threshold` times, ascending.
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageHistogram {
    pub counts: Vec<u64>,
    pub total: u64,
    pub thresholds: Vec<ThresholdView>,
}

impl UsageHistogram {
    pub fn from_counts(counts: Vec<u64>, thresholds: &[u64]) -> Self {
        let total = counts.iter().sum();
        let thresholds = thresholds
            .iter()
            .map(|&t| ThresholdView {
                threshold: t,
                tokens: (0..counts.len()).filter(|&k| counts[k] >= t).collect(),
            })
            .collect();
        UsageHistogram {
            counts,
            total,
            thresholds,
        }
    }

    pub fn gini(&self) -> f64 {
        gini(&self.counts)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_rows(
            path,
            &["k", "count"],
            self.counts
                .iter()
                .enumerate()
                .map(|(k, c)| vec![k.to_string(), c.to_string()]),
        )
    }
}

/// Occurrences of every codeword across `grids`.
pub fn usage_histogram(grids: &[TokenGrid], k: usize, thresholds: &[u64]) -> Result<UsageHistogram> {
    let mut counts = vec![0u64; k];
    for g in grids {
        for &i in &g.indices {
            let i = i as usize;
            if i >= k {
                return Err(Error::IndexOutOfRange { index: i, k });
            }
            counts[i] += 1;
        }
    }
    Ok(UsageHistogram::from_counts(counts, thresholds))
}

/// Gini coefficient of a count vector: 0 for uniform usage, approaching 1
/// when one entry holds everything. All-zero input gives 0.
pub fn gini(counts: &[u64]) -> f64 {
    let n = counts.len();
    let total: u64 = counts.iter().sum();
    if n == 0 || total == 0 {
        return 0.0;
    }
    let mut sorted = counts.to_vec();
    sorted.sort_unstable();
    let weighted: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, &c)| (2.0 * (i + 1) as f64 - n as f64 - 1.0) * c as f64)
        .sum();
    weighted / (n as f64 * total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    pub samples: usize,
    /// Draws whose perturbation left the dequantized latents unchanged.
    pub skipped_zero_delta: usize,
    pub ratios: Vec<f64>,
    pub max: f64,
    pub mean: f64,
    pub p95: f64,
}

/// Ratio of decoder output change to latent change under token
/// perturbation, one draw per sample; sample `s` perturbs image
/// `s mod images.len()`.
pub fn empirical_lipschitz<T: Tokenizer + ?Sized>(
    tokenizer: &T,
    nt: &NeighborTable,
    spec: &PerturbationSpec,
    images: &[Image],
    samples: usize,
) -> Result<LipschitzReport> {
    if samples == 0 || images.is_empty() {
        return Err(Error::InvalidArgument(
            "Lipschitz estimate needs samples and images".into(),
        ));
    }
    if spec.alpha.is_nan() || spec.alpha <= 0.0 {
        return Err(Error::InvalidArgument("Lipschitz estimate needs alpha > 0".into()));
    }
    let cb = tokenizer.codebook();
    let draws = (0..samples)
        .into_par_iter()
        .map(|s| {
            let clean = tokenizer.tokenize(&images[s % images.len()])?;
            let mut r = rng::stream(spec.seed, &[rng::tag("analysis/lipschitz"), s as u64]);
            let (pert, _) = perturb_grid(&clean, spec, nt, &mut r)?;
            let a = dequantize(&clean, cb)?;
            let b = dequantize(&pert, cb)?;
            let delta = sq_dist(&a.values, &b.values).sqrt();
            if delta == 0.0 {
                return Ok(None);
            }
            let out = tokenizer
                .decode_latents(&a)?
                .sq_dist(&tokenizer.decode_latents(&b)?)
                .sqrt();
            Ok(Some(out / delta))
        })
        .collect::<Result<Vec<_>>>()?;
    let ratios: Vec<f64> = draws.iter().flatten().copied().collect();
    if ratios.is_empty() {
        return Err(Error::Degenerate(format!(
            "all {samples} perturbations left the latents unchanged (duplicate codewords?)"
        )));
    }
    let mut sorted = ratios.clone();
    sorted.sort_by(f64::total_cmp);
    let rank = ((0.95 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Ok(LipschitzReport {
        samples,
        skipped_zero_delta: samples - ratios.len(),
        max: *sorted.last().unwrap(),
        mean: ratios.iter().sum::<f64>() / ratios.len() as f64,
        p95: sorted[rank - 1],
        ratios,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub k: usize,
    pub dim: usize,
    /// `k x dim`, row-major.
    pub centroids: Vec<f64>,
    pub assignment: Vec<usize>,
    pub sse: f64,
    /// SSE after every Lloyd iteration.
    pub history: Vec<f64>,
}

fn check_points(points: &[f64], d: usize) -> Result<usize> {
    if d == 0 || !points.len().is_multiple_of(d) {
        return Err(Error::Dimension(format!(
            "{} values do not form rows of width {d}",
            points.len()
        )));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite point".into()));
    }
    Ok(points.len() / d)
}

/// k-means++ seeding: indices of `k` points, the first uniform, the rest
/// drawn proportionally to squared distance from the chosen set. Once every
/// point coincides with a chosen one, picks continue uniformly among the
/// unchosen.
pub fn kmeans_pp_seeds<R: RngCore + ?Sized>(points: &[f64], n: usize, d: usize, k: usize, r: &mut R) -> Vec<usize> {
    assert!(k <= n);
    let row = |i: usize| &points[i * d..(i + 1) * d];
    let mut chosen = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let first = rng::uniform_below(r, n);
    chosen.push(first);
    taken[first] = true;
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(first))).collect();
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng::uniform(r) * total;
            let mut pick = None;
            for (i, &w) in dist.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.unwrap()
        } else {
            let free: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
            free[rng::uniform_below(r, free.len())]
        };
        chosen.push(next);
        taken[next] = true;
        for i in 0..n {
            dist[i] = dist[i].min(sq_dist(row(i), row(next)));
        }
    }
    chosen
}

fn nearest_centroid(p: &[f64], centroids: &[f64], d: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.chunks_exact(d).enumerate() {
        let dd = sq_dist(p, cen);
        if dd < best.1 {
            best = (c, dd);
        }
    }
    best
}

/// Lloyd iterations from the given centroids until the assignment is stable
/// or `max_iters` is reached. Empty clusters move to the point farthest from
/// its centroid.
pub fn lloyd(points: &[f64], d: usize, init: Vec<f64>, max_iters: usize) -> Result<Clustering> {
    let n = check_points(points, d)?;
    let k = init.len() / d;
    if k == 0 || k > n || !init.len().is_multiple_of(d) {
        return Err(Error::InvalidArgument(format!(
            "cannot run {k} centroids on {n} points"
        )));
    }
    let row = |i: usize| &points[i * d..(i + 1) * d];
    let mut centroids = init;
    let mut assignment: Vec<usize> = vec![usize::MAX; n];
    let mut history = Vec::new();
    for _ in 0..max_iters.max(1) {
        let mut dist = vec![0.0; n];
        let mut changed = false;
        for i in 0..n {
            let (c, dd) = nearest_centroid(row(i), &centroids, d);
            changed |= assignment[i] != c;
            assignment[i] = c;
            dist[i] = dd;
        }
        let mut counts = vec![0usize; k];
        for &a in &assignment {
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            // farthest point that is not the sole member of its cluster
            let far = (0..n)
                .filter(|&i| counts[assignment[i]] > 1)
                .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)));
            let Some(far) = far else { break };
            counts[assignment[far]] -= 1;
            assignment[far] = c;
            counts[c] = 1;
            dist[far] = 0.0;
            centroids[c * d..(c + 1) * d].copy_from_slice(row(far));
            changed = true;
        }
        let mut sums = vec![0.0; k * d];
        for i in 0..n {
            let a = assignment[i];
            for j in 0..d {
                sums[a * d + j] += points[i * d + j];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    centroids[c * d + j] = sums[c * d + j] / counts[c] as f64;
                }
            }
        }
        let sse: f64 = (0..n)
            .map(|i| sq_dist(row(i), &centroids[assignment[i] * d..(assignment[i] + 1) * d]))
            .sum();
        history.push(sse);
        if !changed {
            break;
        }
    }
    // final assignment against the final centroids
    let mut sse = 0.0;
    for i in 0..n {
        let (c, dd) = nearest_centroid(row(i), &centroids, d);
        assignment[i] = c;
        sse += dd;
    }
    if let Some(last) = history.last_mut() {
        *last = last.min(sse);
    }
    Ok(Clustering {
        k,
        dim: d,
        centroids,
        assignment,
        sse,
        history,
    })
}

fn best_of(candidates: Vec<Clustering>) -> Clustering {
    candidates
        .into_iter()
        .enumerate()
        .min_by(|(i, a), (j, b)| a.sse.total_cmp(&b.sse).then(i.cmp(j)))
        .unwrap()
        .1
}

fn kmeans_inner(
    points: &[f64],
    d: usize,
    k: usize,
    restarts: usize,
    max_iters: usize,
    seed: u64,
    inherited: Option<Vec<f64>>,
) -> Result<Clustering> {
    let n = check_points(points, d)?;
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("k = {k} must lie in 1..={n}")));
    }
    let mut candidates = (0..restarts.max(1))
        .into_par_iter()
        .map(|r| {
            let mut s: Stream = rng::stream(seed, &[rng::tag("analysis/kmeans"), k as u64, r as u64]);
            let seeds = kmeans_pp_seeds(points, n, d, k, &mut s);
            let init = seeds
                .iter()
                .flat_map(|&i| points[i * d..(i + 1) * d].iter().copied())
                .collect();
            lloyd(points, d, init, max_iters)
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(init) = inherited {
        candidates.push(lloyd(points, d, init, max_iters)?);
    }
    Ok(best_of(candidates))
}

/// Best-of-`restarts` k-means with k-means++ seeding.
pub fn kmeans(points: &[f64], d: usize, k: usize, restarts: usize, max_iters: usize, seed: u64) -> Result<Clustering> {
    kmeans_inner(points, d, k, restarts, max_iters, seed, None)
}

/// Centroids of `prev` plus `extra` new ones, each placed on the point
/// farthest from the current set.
fn split_seed(points: &[f64], d: usize, prev: &Clustering, extra: usize) -> Vec<f64> {
    let n = points.len() / d;
    let mut centroids = prev.centroids.clone();
    let mut dist: Vec<f64> = (0..n)
        .map(|i| nearest_centroid(&points[i * d..(i + 1) * d], &centroids, d).1)
        .collect();
    for _ in 0..extra {
        let far = (0..n)
            .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
            .unwrap();
        let p = points[far * d..(far + 1) * d].to_vec();
        for i in 0..n {
            dist[i] = dist[i].min(sq_dist(&points[i * d..(i + 1) * d], &p));
        }
        centroids.extend(p);
    }
    centroids
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElbowRow {
    pub k: usize,
    pub sse: f64,
    /// Drop in SSE from the previous row; absent on the first row.
    pub delta_sse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElbowTable {
    pub rows: Vec<ElbowRow>,
}

impl ElbowTable {
    /// `k` of the row with the largest SSE drop.
    pub fn largest_drop_k(&self) -> Option<usize> {
        self.rows
            .iter()
            .filter_map(|r| r.delta_sse.map(|d| (r.k, d)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(k, _)| k)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_rows(
            path,
            &["k", "sse", "delta_sse"],
            self.rows.iter().map(|r| {
                vec![
                    r.k.to_string(),
                    r.sse.to_string(),
                    r.delta_sse.map(|d| d.to_string()).unwrap_or_default(),
                ]
            }),
        )
    }
}

/// k-means SSE for each `k` in ascending `ks`. Each k also tries the best
/// clustering of the previous k extended by farthest-point seeds, so the SSE
/// column never increases.
pub fn elbow_curve(points: &[f64], d: usize, ks: &[usize], restarts: usize, seed: u64) -> Result<ElbowTable> {
    if ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("ks must be strictly ascending".into()));
    }
    let mut rows: Vec<ElbowRow> = Vec::with_capacity(ks.len());
    let mut prev: Option<Clustering> = None;
    for &k in ks {
        let inherited = prev.as_ref().map(|p| split_seed(points, d, p, k - p.k));
        let c = kmeans_inner(points, d, k, restarts, 300, seed, inherited)?;
        rows.push(ElbowRow {
            k,
            sse: c.sse,
            delta_sse: rows.last().map(|r| r.sse - c.sse),
        });
        prev = Some(c);
    }
    Ok(ElbowTable { rows })
}

/// Top-two principal-component coordinates of every codeword. Each axis is
/// oriented so its largest-magnitude loading is positive.
pub fn project_2d(cb: &Codebook) -> Vec<[f64; 2]> {
    let (k, d) = (cb.size(), cb.dim());
    let mut mean = vec![0.0; d];
    for i in 0..k {
        for (m, v) in mean.iter_mut().zip(cb.row(i)) {
            *m += v / k as f64;
        }
    }
    let centered = DMatrix::from_fn(k, d, |i, j| cb.row(i)[j] - mean[j]);
    let cov = centered.transpose() * &centered;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axis = |c: usize| -> Option<Vec<f64>> {
        let j = *order.get(c)?;
        let mut v: Vec<f64> = eig.eigenvectors.column(j).iter().copied().collect();
        let lead = v
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
            .map(|(_, &x)| x)
            .unwrap_or(0.0);
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        Some(v)
    };
    let (a0, a1) = (axis(0), axis(1));
    (0..k)
        .map(|i| {
            let row = centered.row(i);
            let proj = |a: &Option<Vec<f64>>| {
                a.as_ref()
                    .map(|v| row.iter().zip(v).map(|(x, y)| x * y).sum())
                    .unwrap_or(0.0)
            };
            [proj(&a0), proj(&a1)]
        })
        .collect()
}

/// Projection CSV with columns k, x, y, count.
pub fn write_projection_csv(path: &Path, coords: &[[f64; 2]], counts: &[u64]) -> Result<()> {
    write_rows(
        path,
        &["k", "x", "y", "count"],
        coords.iter().enumerate().map(|(k, c)| {
            vec![
                k.to_string(),
                c[0].to_string(),
                c[1].to_string(),
                counts.get(k).copied().unwrap_or(0).to_string(),
            ]
        }),
    )
}

pub(crate) fn write_rows(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(&r).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
