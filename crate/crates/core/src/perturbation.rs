//! Latent perturbation: replacing a fraction of the tokens of a fraction of
//! the images with nearby codewords, plus the annealing schedule that decays
//! the perturbation over training.

use crate::codebook::{NeighborTable, TokenGrid};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// `floor(x + 0.5)` for non-negative `x`.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// Number of tokens replaced in a grid of `cells` tokens at rate `alpha`.
pub fn perturbed_count(alpha: f64, cells: usize) -> usize {
    round_half_up(alpha * cells as f64).min(cells)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplacementMode {
    /// Every candidate in the top-delta set is equally likely.
    #[default]
    Uniform,
    /// Candidates weighted by `exp(-d / mean d)` over the top-delta set.
    DistanceWeighted,
}

impl ReplacementMode {
    fn is_uniform(&self) -> bool {
        *self == ReplacementMode::Uniform
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    /// Fraction of the tokens of a perturbed image that are replaced.
    pub alpha: f64,
    /// Fraction of the images of a batch that are perturbed.
    pub beta: f64,
    /// Size of the nearest-neighbor candidate set.
    pub delta: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "ReplacementMode::is_uniform")]
    pub mode: ReplacementMode,
}

impl PerturbationSpec {
    pub fn new(alpha: f64, beta: f64, delta: usize, seed: u64) -> Self {
        PerturbationSpec {
            alpha,
            beta,
            delta,
            seed,
            mode: ReplacementMode::Uniform,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be in [0, 1], got {}",
                self.alpha
            )));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidArgument(format!(
                "beta must be in [0, 1], got {}",
                self.beta
            )));
        }
        if self.delta == 0 {
            return Err(Error::InvalidArgument("delta must be >= 1".into()));
        }
        Ok(())
    }

    fn check_table(&self, nt: &NeighborTable) -> Result<()> {
        self.validate()?;
        if self.delta > nt.delta_max() {
            return Err(Error::InvalidArgument(format!(
                "delta {} exceeds neighbor table depth {}",
                self.delta,
                nt.delta_max()
            )));
        }
        Ok(())
    }
}

/// One token replacement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Replacement {
    pub image: usize,
    pub h: usize,
    pub w: usize,
    pub old: u32,
    pub new: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PerturbationReport {
    pub images_perturbed: usize,
    pub tokens_replaced: usize,
    pub replacement_log: Option<Vec<Replacement>>,
}

impl PerturbationReport {
    pub fn replacements(&self) -> &[Replacement] {
        self.replacement_log.as_deref().unwrap_or(&[])
    }
}

fn draw_replacement<R: RngCore + ?Sized>(
    rng: &mut R,
    nt: &NeighborTable,
    k: usize,
    delta: usize,
    mode: ReplacementMode,
) -> u32 {
    let row = &nt.row(k)[..delta];
    match mode {
        ReplacementMode::Uniform => row[rng::uniform_below(rng, delta)],
        ReplacementMode::DistanceWeighted => {
            let dists = &nt.row_distances(k)[..delta];
            let scale = dists.iter().sum::<f64>() / delta as f64;
            if scale <= 0.0 {
                return row[rng::uniform_below(rng, delta)];
            }
            let weights: Vec<f64> = dists.iter().map(|d| (-d / scale).exp()).collect();
            let mut u = rng::uniform(rng) * weights.iter().sum::<f64>();
            for (j, w) in weights.iter().enumerate() {
                if u < *w {
                    return row[j];
                }
                u -= w;
            }
            row[delta - 1]
        }
    }
}

/// Replaces `round(alpha * H * W)` distinct, uniformly chosen positions of
/// `tokens` with draws from their top-`delta` neighbor sets.
pub fn perturb_grid<R: RngCore + ?Sized>(
    tokens: &TokenGrid,
    spec: &PerturbationSpec,
    nt: &NeighborTable,
    rng: &mut R,
) -> Result<(TokenGrid, PerturbationReport)> {
    spec.check_table(nt)?;
    if tokens.k != nt.size() {
        return Err(Error::Dimension(format!(
            "token grid indexes {} codewords, neighbor table covers {}",
            tokens.k,
            nt.size()
        )));
    }
    tokens.check()?;
    let p = perturbed_count(spec.alpha, tokens.cells());
    if p == 0 {
        return Ok((
            tokens.clone(),
            PerturbationReport {
                replacement_log: Some(Vec::new()),
                ..Default::default()
            },
        ));
    }
    let mut out = tokens.clone();
    let mut log = Vec::with_capacity(p);
    for pos in rng::sample_without_replacement(rng, tokens.cells(), p) {
        let old = tokens.indices[pos];
        let new = draw_replacement(rng, nt, old as usize, spec.delta, spec.mode);
        out.indices[pos] = new;
        log.push(Replacement {
            image: 0,
            h: pos / tokens.width,
            w: pos % tokens.width,
            old,
            new,
        });
    }
    Ok((
        out,
        PerturbationReport {
            images_perturbed: 1,
            tokens_replaced: p,
            replacement_log: Some(log),
        },
    ))
}

const SELECT: u64 = rng::tag("perturb/select");
const IMAGE: u64 = rng::tag("perturb/image");

/// Stream used for the image at `position` of batch `batch_counter`.
pub fn image_stream(seed: u64, batch_counter: u64, position: usize) -> Stream {
    rng::stream(seed, &[IMAGE, batch_counter, position as u64])
}

/// Indices of the batch positions selected for perturbation.
pub fn select_images(seed: u64, batch_counter: u64, beta: f64, batch_size: usize) -> Vec<usize> {
    let m = round_half_up(beta * batch_size as f64).min(batch_size);
    let mut sel = rng::sample_without_replacement(&mut rng::stream(seed, &[SELECT, batch_counter]), batch_size, m);
    sel.sort_unstable();
    sel
}

/// Perturbs `round(beta * batch_size)` uniformly chosen images of a batch.
///
/// Streams are addressed by `(spec.seed, batch_counter, position)`, so the
/// result does not depend on how the work is scheduled.
pub fn perturb_batch(
    batch: &[TokenGrid],
    spec: &PerturbationSpec,
    nt: &NeighborTable,
    batch_counter: u64,
) -> Result<(Vec<TokenGrid>, PerturbationReport)> {
    spec.check_table(nt)?;
    if batch.is_empty() {
        return Ok((Vec::new(), PerturbationReport::default()));
    }
    let k = batch[0].k;
    if batch.iter().any(|g| g.k != k) {
        return Err(Error::Dimension("batch grids index different codebooks".into()));
    }
    let selected = select_images(spec.seed, batch_counter, spec.beta, batch.len());
    let mut out = batch.to_vec();
    let mut report = PerturbationReport {
        images_perturbed: selected.len(),
        tokens_replaced: 0,
        replacement_log: Some(Vec::new()),
    };
    let log = report.replacement_log.as_mut().unwrap();
    for &pos in &selected {
        let mut stream = image_stream(spec.seed, batch_counter, pos);
        let (grid, r) = perturb_grid(&batch[pos], spec, nt, &mut stream)?;
        out[pos] = grid;
        report.tokens_replaced += r.tokens_replaced;
        log.extend(r.replacements().iter().map(|rep| Replacement { image: pos, ..*rep }));
    }
    Ok((out, report))
}

pub fn write_replacement_log(path: &Path, log: &[Replacement]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    for r in log {
        w.serialize(r).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnealShape {
    Linear,
    Cosine,
    Constant,
}

/// Decay of alpha and delta from `initial` towards `initial * final_scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AnnealScheduleRepr", into = "AnnealScheduleRepr")]
pub struct AnnealSchedule {
    pub initial: PerturbationSpec,
    pub final_scale: f64,
    /// Separate end scale for delta; `None` uses `final_scale`.
    pub delta_final_scale: Option<f64>,
    pub total_steps: u64,
    pub shape: AnnealShape,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnealScheduleRepr {
    alpha: f64,
    beta: f64,
    delta: usize,
    seed: u64,
    final_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    delta_final_scale: Option<f64>,
    total_steps: u64,
    shape: AnnealShape,
    #[serde(default, skip_serializing_if = "ReplacementMode::is_uniform")]
    mode: ReplacementMode,
}

impl TryFrom<AnnealScheduleRepr> for AnnealSchedule {
    type Error = Error;

    fn try_from(r: AnnealScheduleRepr) -> Result<Self> {
        let s = AnnealSchedule {
            initial: PerturbationSpec {
                alpha: r.alpha,
                beta: r.beta,
                delta: r.delta,
                seed: r.seed,
                mode: r.mode,
            },
            final_scale: r.final_scale,
            delta_final_scale: r.delta_final_scale,
            total_steps: r.total_steps,
            shape: r.shape,
        };
        s.validate()?;
        Ok(s)
    }
}

impl From<AnnealSchedule> for AnnealScheduleRepr {
    fn from(s: AnnealSchedule) -> Self {
        AnnealScheduleRepr {
            alpha: s.initial.alpha,
            beta: s.initial.beta,
            delta: s.initial.delta,
            seed: s.initial.seed,
            final_scale: s.final_scale,
            delta_final_scale: s.delta_final_scale,
            total_steps: s.total_steps,
            shape: s.shape,
            mode: s.initial.mode,
        }
    }
}

impl AnnealSchedule {
    /// A schedule that never changes `spec`.
    pub fn constant(spec: PerturbationSpec) -> Self {
        AnnealSchedule {
            initial: spec,
            final_scale: 1.0,
            delta_final_scale: None,
            total_steps: 1,
            shape: AnnealShape::Constant,
        }
    }

    /// No perturbation at all.
    pub fn disabled(seed: u64) -> Self {
        AnnealSchedule::constant(PerturbationSpec::new(0.0, 0.0, 1, seed))
    }

    pub fn validate(&self) -> Result<()> {
        self.initial.validate()?;
        for (name, v) in [
            ("final_scale", Some(self.final_scale)),
            ("delta_final_scale", self.delta_final_scale),
        ] {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidArgument(format!("{name} must be in [0, 1], got {v}")));
                }
            }
        }
        if self.total_steps == 0 {
            return Err(Error::InvalidArgument("total_steps must be positive".into()));
        }
        Ok(())
    }

    /// Largest delta the schedule ever produces.
    pub fn max_delta(&self) -> usize {
        self.initial.delta
    }
}

fn progress_factor(shape: AnnealShape, t: f64, final_scale: f64) -> f64 {
    let f = match shape {
        AnnealShape::Linear => t,
        AnnealShape::Cosine => (1.0 - (std::f64::consts::PI * t).cos()) / 2.0,
        AnnealShape::Constant => 0.0,
    };
    1.0 - (1.0 - final_scale) * f
}

/// The perturbation in force at `step`.
pub fn anneal_at(sched: &AnnealSchedule, step: u64) -> PerturbationSpec {
    let t = step.min(sched.total_steps) as f64 / sched.total_steps as f64;
    let a = progress_factor(sched.shape, t, sched.final_scale);
    let d = progress_factor(sched.shape, t, sched.delta_final_scale.unwrap_or(sched.final_scale));
    PerturbationSpec {
        alpha: (sched.initial.alpha * a).clamp(0.0, 1.0),
        delta: round_half_up(sched.initial.delta as f64 * d).max(1),
        ..sched.initial
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::{build_neighbor_table, sq_dist, Codebook};
    use proptest::prelude::*;

    fn random_book(k: usize, d: usize, seed: u64) -> Codebook {
        let mut r = rng::stream(seed, &[]);
        Codebook::new(k, d, (0..k * d).map(|_| rng::standard_normal(&mut r)).collect()).unwrap()
    }

    fn random_grid(h: usize, w: usize, k: usize, seed: u64) -> TokenGrid {
        let mut r = rng::stream(seed, &[1]);
        TokenGrid::new(
            h,
            w,
            k,
            (0..h * w).map(|_| rng::uniform_below(&mut r, k) as u32).collect(),
        )
        .unwrap()
    }

    /// Brute-force top-delta set of codeword `k`.
    fn oracle_neighbors(book: &Codebook, k: usize, delta: usize) -> Vec<u32> {
        let mut all: Vec<(f64, usize)> = (0..book.size())
            .filter(|&j| j != k)
            .map(|j| (sq_dist(book.row(k), book.row(j)), j))
            .collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        all[..delta].iter().map(|&(_, j)| j as u32).collect()
    }

    #[test]
    fn zero_alpha_is_identity() {
        let book = random_book(16, 3, 1);
        let nt = build_neighbor_table(&book, 4).unwrap();
        let g = random_grid(4, 4, 16, 2);
        let spec = PerturbationSpec::new(0.0, 1.0, 4, 9);
        let (out, rep) = perturb_grid(&g, &spec, &nt, &mut rng::stream(0, &[])).unwrap();
        assert_eq!(out, g);
        assert_eq!(rep.tokens_replaced, 0);
    }

    #[test]
    fn quarter_rate_replaces_four_valid_tokens() {
        let book = random_book(16, 4, 3);
        let nt = build_neighbor_table(&book, 5).unwrap();
        let g = random_grid(4, 4, 16, 4);
        let spec = PerturbationSpec::new(0.25, 1.0, 5, 9);
        for s in 0..50 {
            let (out, rep) = perturb_grid(&g, &spec, &nt, &mut rng::stream(s, &[])).unwrap();
            assert_eq!(rep.tokens_replaced, 4);
            let changed: Vec<usize> = (0..16).filter(|&i| out.indices[i] != g.indices[i]).collect();
            assert_eq!(changed.len(), 4);
            assert_eq!(rep.replacements().len(), 4);
            for r in rep.replacements() {
                assert_eq!(g.get(r.h, r.w) as u32, r.old);
                assert_eq!(out.get(r.h, r.w) as u32, r.new);
                assert!(oracle_neighbors(&book, r.old as usize, 5).contains(&r.new));
            }
        }
    }

    #[test]
    fn full_rate_training_setting() {
        let book = random_book(256, 4, 5);
        let nt = build_neighbor_table(&book, 100).unwrap();
        let g = random_grid(8, 8, 256, 6);
        let spec = PerturbationSpec::new(1.0, 1.0, 100, 1);
        let (out, rep) = perturb_grid(&g, &spec, &nt, &mut rng::stream(2, &[])).unwrap();
        assert_eq!(rep.tokens_replaced, 64);
        for i in 0..64 {
            let old = g.indices[i] as usize;
            assert_ne!(out.indices[i] as usize, old);
            assert!(oracle_neighbors(&book, old, 100).contains(&out.indices[i]));
        }
    }

    #[test]
    fn delta_beyond_table_is_rejected() {
        let book = random_book(8, 2, 1);
        let nt = build_neighbor_table(&book, 3).unwrap();
        let g = random_grid(2, 2, 8, 1);
        let spec = PerturbationSpec::new(0.5, 1.0, 4, 0);
        assert!(perturb_grid(&g, &spec, &nt, &mut rng::stream(0, &[])).is_err());
        assert!(perturb_batch(&[g], &spec, &nt, 0).is_err());
    }

    #[test]
    fn tiny_rate_rounding_to_zero_is_not_an_error() {
        let book = random_book(8, 2, 1);
        let nt = build_neighbor_table(&book, 3).unwrap();
        let g = random_grid(1, 1, 8, 1);
        let spec = PerturbationSpec::new(0.4, 1.0, 2, 0);
        let (out, rep) = perturb_grid(&g, &spec, &nt, &mut rng::stream(0, &[])).unwrap();
        assert_eq!(out, g);
        assert_eq!(rep.tokens_replaced, 0);
        assert_eq!(rep.images_perturbed, 0);
    }

    #[test]
    fn batch_identity_cases() {
        let book = random_book(16, 2, 1);
        let nt = build_neighbor_table(&book, 3).unwrap();
        let batch: Vec<TokenGrid> = (0..6).map(|i| random_grid(3, 3, 16, i)).collect();
        let (out, rep) = perturb_batch(&batch, &PerturbationSpec::new(0.7, 0.0, 3, 1), &nt, 0).unwrap();
        assert_eq!(out, batch);
        assert_eq!(rep.images_perturbed, 0);
        let (out, rep) = perturb_batch(&batch, &PerturbationSpec::new(0.0, 1.0, 3, 1), &nt, 0).unwrap();
        assert_eq!(out, batch);
        assert_eq!(rep.tokens_replaced, 0);
        let (out, rep) = perturb_batch(&[], &PerturbationSpec::new(0.5, 0.5, 3, 1), &nt, 0).unwrap();
        assert!(out.is_empty());
        assert_eq!(rep, PerturbationReport::default());
    }

    #[test]
    fn full_beta_perturbs_every_image() {
        let book = random_book(16, 2, 1);
        let nt = build_neighbor_table(&book, 3).unwrap();
        let batch: Vec<TokenGrid> = (0..5).map(|i| random_grid(4, 4, 16, i)).collect();
        let (out, rep) = perturb_batch(&batch, &PerturbationSpec::new(0.5, 1.0, 3, 7), &nt, 3).unwrap();
        assert_eq!(rep.images_perturbed, 5);
        assert_eq!(rep.tokens_replaced, 5 * 8);
        for (a, b) in out.iter().zip(&batch) {
            assert_eq!(a.indices.iter().zip(&b.indices).filter(|(x, y)| x != y).count(), 8);
        }
    }

    #[test]
    fn batch_selection_frequency_matches_beta() {
        let book = random_book(16, 2, 1);
        let nt = build_neighbor_table(&book, 2).unwrap();
        let batch: Vec<TokenGrid> = (0..10).map(|i| random_grid(2, 2, 16, i)).collect();
        let spec = PerturbationSpec::new(1.0, 0.1, 2, 42);
        let trials = 10_000u64;
        let mut hits = [0usize; 10];
        for counter in 0..trials {
            let (out, rep) = perturb_batch(&batch, &spec, &nt, counter).unwrap();
            assert_eq!(rep.images_perturbed, 1);
            for (i, (a, b)) in out.iter().zip(&batch).enumerate() {
                if a != b {
                    hits[i] += 1;
                }
            }
        }
        for h in hits {
            let f = h as f64 / trials as f64;
            assert!((f - 0.1).abs() <= 0.01, "frequency {f}");
        }
    }

    #[test]
    fn batch_is_deterministic() {
        let book = random_book(32, 3, 8);
        let nt = build_neighbor_table(&book, 6).unwrap();
        let batch: Vec<TokenGrid> = (0..8).map(|i| random_grid(4, 4, 32, i)).collect();
        let spec = PerturbationSpec::new(0.6, 0.5, 6, 11);
        let a = perturb_batch(&batch, &spec, &nt, 17).unwrap();
        let b = perturb_batch(&batch, &spec, &nt, 17).unwrap();
        assert_eq!(a, b);
        let c = perturb_batch(&batch, &spec, &nt, 18).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn distance_weighted_mode_stays_in_neighbor_set() {
        let book = random_book(32, 3, 8);
        let nt = build_neighbor_table(&book, 6).unwrap();
        let g = random_grid(4, 4, 32, 2);
        let spec = PerturbationSpec {
            mode: ReplacementMode::DistanceWeighted,
            ..PerturbationSpec::new(1.0, 1.0, 6, 1)
        };
        let (_, rep) = perturb_grid(&g, &spec, &nt, &mut rng::stream(3, &[])).unwrap();
        for r in rep.replacements() {
            assert!(nt.row(r.old as usize)[..6].contains(&r.new));
        }
    }

    fn sched(shape: AnnealShape) -> AnnealSchedule {
        AnnealSchedule {
            initial: PerturbationSpec::new(1.0, 0.1, 100, 0),
            final_scale: 0.5,
            delta_final_scale: None,
            total_steps: 1000,
            shape,
        }
    }

    #[test]
    fn linear_anneal_endpoints() {
        let s = sched(AnnealShape::Linear);
        let at = |step| {
            let p = anneal_at(&s, step);
            (p.alpha, p.delta, p.beta)
        };
        assert_eq!(at(0), (1.0, 100, 0.1));
        assert_eq!(at(500), (0.75, 75, 0.1));
        assert_eq!(at(1000), (0.5, 50, 0.1));
        assert_eq!(at(5000), (0.5, 50, 0.1));
    }

    #[test]
    fn anneal_to_zero_keeps_delta_positive() {
        let s = AnnealSchedule {
            final_scale: 0.0,
            ..sched(AnnealShape::Cosine)
        };
        let end = anneal_at(&s, 1000);
        assert_eq!(end.alpha, 0.0);
        assert_eq!(end.delta, 1);
        let c = anneal_at(&sched(AnnealShape::Constant), 700);
        assert_eq!((c.alpha, c.delta), (1.0, 100));
    }

    #[test]
    fn separate_delta_scale() {
        let s = AnnealSchedule {
            delta_final_scale: Some(1.0),
            ..sched(AnnealShape::Linear)
        };
        let end = anneal_at(&s, 1000);
        assert_eq!((end.alpha, end.delta), (0.5, 100));
    }

    #[test]
    fn schedule_json_keys() {
        let s = sched(AnnealShape::Cosine);
        let v = serde_json::to_value(s).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort_unstable();
        assert_eq!(
            keys,
            ["alpha", "beta", "delta", "final_scale", "seed", "shape", "total_steps"]
        );
        assert_eq!(serde_json::from_value::<AnnealSchedule>(v).unwrap(), s);
        let bad = r#"{"alpha":1,"beta":0.1,"delta":3,"seed":0,"final_scale":0.5,"total_steps":10,"shape":"linear","alpah":2}"#;
        assert!(serde_json::from_str::<AnnealSchedule>(bad).is_err());
        let out_of_range =
            r#"{"alpha":1.5,"beta":0.1,"delta":3,"seed":0,"final_scale":0.5,"total_steps":10,"shape":"linear"}"#;
        assert!(serde_json::from_str::<AnnealSchedule>(out_of_range).is_err());
    }

    #[test]
    fn replacement_log_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let log = [Replacement {
            image: 2,
            h: 1,
            w: 3,
            old: 7,
            new: 9,
        }];
        write_replacement_log(&path, &log).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "image,h,w,old,new\n2,1,3,7,9\n");
    }

    proptest! {
        #[test]
        fn annealed_alpha_is_monotone(
            final_scale in 0.0f64..1.0,
            alpha in 0.0f64..=1.0,
            delta in 1usize..500,
            total in 1u64..2000,
            cosine in any::<bool>(),
        ) {
            let s = AnnealSchedule {
                initial: PerturbationSpec::new(alpha, 0.3, delta, 0),
                final_scale,
                delta_final_scale: None,
                total_steps: total,
                shape: if cosine { AnnealShape::Cosine } else { AnnealShape::Linear },
            };
            let mut prev = anneal_at(&s, 0);
            prop_assert_eq!(prev.alpha, alpha);
            prop_assert_eq!(prev.delta, delta);
            for step in (1..=total + 5).step_by(1 + total as usize / 97) {
                let cur = anneal_at(&s, step);
                prop_assert!(cur.alpha <= prev.alpha);
                prop_assert!(cur.delta <= prev.delta && cur.delta >= 1);
                prop_assert!((0.0..=1.0).contains(&cur.alpha));
                prev = cur;
            }
        }

        #[test]
        fn replaced_count_is_exact(alpha in 0.0f64..=1.0, h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
            let book = random_book(12, 2, 4);
            let nt = build_neighbor_table(&book, 3).unwrap();
            let g = random_grid(h, w, 12, seed);
            let spec = PerturbationSpec::new(alpha, 1.0, 3, seed);
            let (out, rep) = perturb_grid(&g, &spec, &nt, &mut rng::stream(seed, &[])).unwrap();
            let expect = perturbed_count(alpha, h * w);
            prop_assert_eq!(rep.tokens_replaced, expect);
            // distinct codewords: every replacement changes the index
            let changed = out.indices.iter().zip(&g.indices).filter(|(a, b)| a != b).count();
            prop_assert_eq!(changed, expect);
        }
    }
}
