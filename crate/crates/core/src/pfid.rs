//! Reconstruction FID and perturbed FID.
//!
//! pFID averages the FID between perturbed reconstructions and the source
//! images over a fixed grid of perturbation rates and strengths. Every image
//! is perturbed (`beta = 1`) and the nominal strengths are rescaled linearly
//! from a reference codebook size to the tokenizer's codebook size.

use crate::codebook::NeighborTable;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{extract_features, fit_stats, frechet_distance, FeatureExtractorSpec, FeatureStats};
use crate::perturbation::{perturb_batch, round_half_up, PerturbationSpec};
use crate::tokenizer::Tokenizer;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const DEFAULT_ALPHAS: [f64; 5] = [0.9, 0.8, 0.7, 0.6, 0.5];
pub const DEFAULT_DELTAS: [usize; 3] = [200, 280, 360];
pub const DEFAULT_K_REF: usize = 16384;

fn default_alphas() -> Vec<f64> {
    DEFAULT_ALPHAS.to_vec()
}
fn default_deltas() -> Vec<usize> {
    DEFAULT_DELTAS.to_vec()
}
fn default_beta() -> f64 {
    1.0
}
fn default_k_ref() -> usize {
    DEFAULT_K_REF
}
fn default_sample_count() -> usize {
    512
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PfidConfig {
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default = "default_deltas")]
    pub deltas: Vec<usize>,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_k_ref")]
    pub k_ref: usize,
    #[serde(default)]
    pub extractor: FeatureExtractorSpec,
    #[serde(default)]
    pub eval_seed: u64,
    #[serde(default = "default_sample_count")]
    pub sample_count: usize,
}

impl Default for PfidConfig {
    fn default() -> Self {
        PfidConfig {
            alphas: default_alphas(),
            deltas: default_deltas(),
            beta: 1.0,
            k_ref: DEFAULT_K_REF,
            extractor: FeatureExtractorSpec::default(),
            eval_seed: 0,
            sample_count: default_sample_count(),
        }
    }
}

impl PfidConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta != 1.0 {
            return Err(Error::InvalidArgument(format!(
                "pFID perturbs every image; beta must be 1.0, got {}",
                self.beta
            )));
        }
        if self.alphas.is_empty() || self.deltas.is_empty() {
            return Err(Error::InvalidArgument("pFID grid is empty".into()));
        }
        if let Some(a) = self.alphas.iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
            return Err(Error::InvalidArgument(format!("pFID alpha {a} outside (0, 1]")));
        }
        if self.deltas.contains(&0) {
            return Err(Error::InvalidArgument("pFID deltas must be positive".into()));
        }
        if self.k_ref < 2 {
            return Err(Error::InvalidArgument("k_ref must be >= 2".into()));
        }
        if self.sample_count < 2 {
            return Err(Error::InvalidArgument("pFID needs at least 2 samples".into()));
        }
        self.extractor.validate()
    }

    /// The (alpha, nominal delta) grid, alpha-major.
    pub fn settings(&self) -> Vec<(f64, usize)> {
        self.alphas
            .iter()
            .flat_map(|&a| self.deltas.iter().map(move |&d| (a, d)))
            .collect()
    }

    pub fn max_scaled_delta(&self, k: usize) -> usize {
        self.deltas
            .iter()
            .map(|&d| scale_delta(d, k, self.k_ref))
            .max()
            .unwrap_or(1)
    }
}

/// `clamp(round(delta * k / k_ref), 1, k - 1)`.
pub fn scale_delta(delta_nominal: usize, k: usize, k_ref: usize) -> usize {
    let scaled = round_half_up(delta_nominal as f64 * k as f64 / k_ref as f64);
    scaled.clamp(1, k.saturating_sub(1).max(1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PfidRow {
    pub alpha: f64,
    pub beta: f64,
    pub delta_nominal: usize,
    pub delta_scaled: usize,
    pub fid: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PfidReport {
    pub per_setting: Vec<PfidRow>,
    pub pfid: f64,
    pub rfid: f64,
    pub codebook_size: usize,
    pub config: PfidConfig,
}

impl PfidReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        for row in &self.per_setting {
            w.serialize(row).map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Vec<PfidRow>> {
        let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        let mut r = csv::Reader::from_path(path).map_err(io)?;
        r.deserialize().map(|row| row.map_err(io)).collect()
    }
}

/// Source images and their reference moments.
pub struct Reference<'a> {
    pub images: &'a [Image],
    pub stats: FeatureStats,
}

impl<'a> Reference<'a> {
    pub fn new(images: &'a [Image], extractor: &FeatureExtractorSpec) -> Result<Self> {
        if images.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "FID needs at least 2 images, got {}",
                images.len()
            )));
        }
        let stats = fit_stats(&extract_features(images, extractor)?)?;
        Ok(Reference { images, stats })
    }
}

fn fid_of(images: &[Image], reference: &Reference, extractor: &FeatureExtractorSpec) -> Result<f64> {
    let stats = fit_stats(&extract_features(images, extractor)?)?;
    frechet_distance(&stats, &reference.stats)
}

fn rfid_against<T: Tokenizer + ?Sized>(
    tokenizer: &T,
    reference: &Reference,
    extractor: &FeatureExtractorSpec,
) -> Result<f64> {
    let recon: Vec<Image> = reference
        .images
        .par_iter()
        .map(|im| tokenizer.reconstruct(im))
        .collect::<Result<_>>()?;
    fid_of(&recon, reference, extractor)
}

/// FID between clean reconstructions and the originals.
pub fn compute_rfid<T: Tokenizer + ?Sized>(
    tokenizer: &T,
    images: &[Image],
    extractor: &FeatureExtractorSpec,
) -> Result<f64> {
    let reference = Reference::new(images, extractor)?;
    rfid_against(tokenizer, &reference, extractor)
}

/// Runs the full perturbation grid and averages the per-setting FIDs.
///
/// Setting `s` (alpha-major order) draws its randomness from batch counter
/// `s` under `cfg.eval_seed`.
pub fn compute_pfid<T: Tokenizer + ?Sized>(
    tokenizer: &T,
    images: &[Image],
    cfg: &PfidConfig,
    nt: &NeighborTable,
) -> Result<PfidReport> {
    cfg.validate()?;
    let k = tokenizer.codebook().size();
    if nt.size() != k {
        return Err(Error::Dimension(format!(
            "neighbor table covers {} codewords, tokenizer has {k}",
            nt.size()
        )));
    }
    let need = cfg.max_scaled_delta(k);
    if nt.delta_max() < need {
        return Err(Error::InvalidArgument(format!(
            "neighbor table depth {} is below the largest scaled delta {need}",
            nt.delta_max()
        )));
    }
    if images.len() < cfg.sample_count {
        return Err(Error::InvalidArgument(format!(
            "pFID needs {} images, got {}",
            cfg.sample_count,
            images.len()
        )));
    }
    let images = &images[..cfg.sample_count];
    let reference = Reference::new(images, &cfg.extractor)?;
    let rfid = rfid_against(tokenizer, &reference, &cfg.extractor)?;

    let settings = cfg.settings();
    let per_setting = settings
        .par_iter()
        .enumerate()
        .map(|(s, &(alpha, delta_nominal))| {
            let delta_scaled = scale_delta(delta_nominal, k, cfg.k_ref);
            let spec = PerturbationSpec::new(alpha, cfg.beta, delta_scaled, cfg.eval_seed);
            let tokens = images
                .iter()
                .map(|im| tokenizer.tokenize(im))
                .collect::<Result<Vec<_>>>()?;
            let (perturbed, _) = perturb_batch(&tokens, &spec, nt, s as u64)?;
            let decoded = perturbed
                .iter()
                .map(|t| tokenizer.detokenize(t))
                .collect::<Result<Vec<_>>>()?;
            Ok(PfidRow {
                alpha,
                beta: cfg.beta,
                delta_nominal,
                delta_scaled,
                fid: fid_of(&decoded, &reference, &cfg.extractor)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let pfid = per_setting.iter().map(|r| r.fid).sum::<f64>() / per_setting.len() as f64;
    Ok(PfidReport {
        per_setting,
        pfid,
        rfid,
        codebook_size: k,
        config: cfg.clone(),
    })
}
