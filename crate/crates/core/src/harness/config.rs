//! The experiment config document and the seed registry derived from it.

use crate::dataset::SyntheticSpec;
use crate::error::{Error, Result};
use crate::metrics::FeatureExtractorSpec;
use crate::perturbation::{AnnealSchedule, AnnealShape, PerturbationSpec, ReplacementMode};
use crate::pfid::{scale_delta, PfidConfig, DEFAULT_ALPHAS, DEFAULT_DELTAS, DEFAULT_K_REF};
use crate::rng::{derive_seed, tag};
use crate::toytok::{Activation, Architecture, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    /// Root seed; every other seed is derived from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSection,
    pub tokenizer: TokenizerSection,
    pub train: TrainSection,
    #[serde(default)]
    pub pfid: PfidSection,
    #[serde(default)]
    pub ablation: AblationSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
}

fn d_side() -> usize {
    32
}
fn d_channels() -> usize {
    3
}
fn d_noise() -> f64 {
    0.04
}
fn d_scale() -> [f64; 2] {
    [0.25, 0.45]
}
fn d_hue_jitter() -> f64 {
    0.06
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    #[serde(default = "d_side")]
    pub side: usize,
    #[serde(default = "d_channels")]
    pub channels: usize,
    pub num_classes: usize,
    pub per_class: usize,
    #[serde(default = "d_noise")]
    pub noise: f64,
    #[serde(default = "d_scale")]
    pub scale: [f64; 2],
    #[serde(default = "d_hue_jitter")]
    pub hue_jitter: f64,
}

impl DatasetSection {
    pub fn spec(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            side: self.side,
            channels: self.channels,
            num_classes: self.num_classes,
            per_class: self.per_class,
            seed,
            noise: self.noise,
            scale: self.scale,
            hue_jitter: self.hue_jitter,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodebookInit {
    /// Small Gaussian codewords.
    #[default]
    Random,
    /// k-means++ seeds over encoder outputs of a corpus sample.
    Data,
}

fn d_init_sample() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerSection {
    pub patch: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub codebook_size: usize,
    #[serde(default)]
    pub context: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub codebook_init: CodebookInit,
    /// Images whose latents seed a data-initialized codebook.
    #[serde(default = "d_init_sample")]
    pub codebook_init_sample: usize,
}

fn d_one() -> f64 {
    1.0
}
fn d_commit() -> f64 {
    0.25
}
fn d_patience() -> u32 {
    500
}
fn d_eval_every() -> u64 {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "d_one")]
    pub lambda_rec: f64,
    #[serde(default = "d_one")]
    pub lambda_vq: f64,
    #[serde(default = "d_commit")]
    pub commitment_weight: f64,
    #[serde(default = "d_eval_every")]
    pub eval_every: u64,
    #[serde(default = "d_patience")]
    pub dead_code_patience: u32,
    #[serde(default)]
    pub perturbation: PerturbationSection,
}

fn d_shape() -> AnnealShape {
    AnnealShape::Constant
}

/// Training perturbation. `delta` is nominal and is rescaled from
/// `pfid.k_ref` to the codebook size like the evaluation strengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSection {
    pub alpha: f64,
    pub beta: f64,
    pub delta: usize,
    #[serde(default = "d_one")]
    pub final_scale: f64,
    #[serde(default = "d_shape")]
    pub shape: AnnealShape,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_final_scale: Option<f64>,
    #[serde(default)]
    pub mode: ReplacementMode,
}

impl Default for PerturbationSection {
    fn default() -> Self {
        PerturbationSection {
            alpha: 0.0,
            beta: 0.0,
            delta: 1,
            final_scale: 1.0,
            shape: AnnealShape::Constant,
            delta_final_scale: None,
            mode: ReplacementMode::Uniform,
        }
    }
}

fn d_alphas() -> Vec<f64> {
    DEFAULT_ALPHAS.to_vec()
}
fn d_deltas() -> Vec<usize> {
    DEFAULT_DELTAS.to_vec()
}
fn d_k_ref() -> usize {
    DEFAULT_K_REF
}
fn d_sample_count() -> usize {
    512
}
fn d_feature_dim() -> usize {
    64
}

/// pFID grid. Every image is perturbed; the eval and extractor seeds come
/// from the registry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PfidSection {
    #[serde(default = "d_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default = "d_deltas")]
    pub deltas: Vec<usize>,
    #[serde(default = "d_k_ref")]
    pub k_ref: usize,
    #[serde(default = "d_sample_count")]
    pub sample_count: usize,
    #[serde(default = "d_feature_dim")]
    pub feature_dim: usize,
}

impl Default for PfidSection {
    fn default() -> Self {
        PfidSection {
            alphas: d_alphas(),
            deltas: d_deltas(),
            k_ref: d_k_ref(),
            sample_count: d_sample_count(),
            feature_dim: d_feature_dim(),
        }
    }
}

/// One training variant of an ablation; unset fields keep the values of
/// `train.perturbation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    pub beta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
}

fn d_seeds() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    #[serde(default = "d_seeds")]
    pub seeds: usize,
    #[serde(default)]
    pub variants: Vec<Variant>,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            seeds: d_seeds(),
            variants: Vec::new(),
        }
    }
}

fn d_ks() -> Vec<usize> {
    vec![2, 4, 8, 16, 32]
}
fn d_restarts() -> usize {
    8
}
fn d_elbow_sample() -> usize {
    2048
}
fn d_lip_samples() -> usize {
    256
}
fn d_lip_alpha() -> f64 {
    0.5
}
fn d_lip_delta() -> usize {
    200
}
fn d_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    #[serde(default)]
    pub usage_thresholds: Vec<u64>,
    #[serde(default = "d_ks")]
    pub elbow_ks: Vec<usize>,
    #[serde(default = "d_restarts")]
    pub elbow_restarts: usize,
    /// Encoder latent cells clustered for the elbow table.
    #[serde(default = "d_elbow_sample")]
    pub elbow_sample: usize,
    #[serde(default = "d_lip_samples")]
    pub lipschitz_samples: usize,
    #[serde(default = "d_lip_alpha")]
    pub lipschitz_alpha: f64,
    /// Nominal, rescaled by `pfid.k_ref`.
    #[serde(default = "d_lip_delta")]
    pub lipschitz_delta: usize,
    #[serde(default = "d_true")]
    pub svg: bool,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            usage_thresholds: Vec::new(),
            elbow_ks: d_ks(),
            elbow_restarts: d_restarts(),
            elbow_sample: d_elbow_sample(),
            lipschitz_samples: d_lip_samples(),
            lipschitz_alpha: d_lip_alpha(),
            lipschitz_delta: d_lip_delta(),
            svg: true,
        }
    }
}

/// Every seed a command consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRegistry {
    pub root: u64,
    pub dataset: u64,
    pub model: u64,
    pub train: u64,
    pub perturbation: u64,
    pub eval: u64,
    pub extractor: u64,
    pub analysis: u64,
}

impl SeedRegistry {
    pub fn new(root: u64) -> Self {
        let d = |name: &str| derive_seed(root, &[tag(name)]);
        SeedRegistry {
            root,
            dataset: d("dataset"),
            model: d("model"),
            train: d("train"),
            perturbation: d("perturbation"),
            eval: d("eval"),
            extractor: d("extractor"),
            analysis: d("analysis"),
        }
    }

    /// Seeds of ablation replicate `index`. Replicate 0 is the plain
    /// training run; others re-derive the training seeds only, so every
    /// replicate shares the corpus and the evaluation protocol. All
    /// variants of one replicate share initialization and batch order.
    pub fn replicate(&self, index: usize) -> Self {
        if index == 0 {
            return *self;
        }
        let sub = SeedRegistry::new(derive_seed(self.root, &[tag("ablation/replicate"), index as u64]));
        SeedRegistry {
            model: sub.model,
            train: sub.train,
            perturbation: sub.perturbation,
            ..*self
        }
    }
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        ExperimentConfig::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn seeds(&self) -> SeedRegistry {
        SeedRegistry::new(self.seed)
    }

    pub fn dataset_spec(&self) -> SyntheticSpec {
        self.dataset.spec(self.seeds().dataset)
    }

    pub fn architecture(&self) -> Architecture {
        let t = &self.tokenizer;
        Architecture {
            side: self.dataset.side,
            channels: self.dataset.channels,
            patch: t.patch,
            latent_dim: t.latent_dim,
            hidden: t.hidden,
            codebook_size: t.codebook_size,
            context: t.context,
            activation: t.activation,
        }
    }

    /// Training perturbation with `variant` applied.
    pub fn perturbation_for(&self, variant: Option<&Variant>, seed: u64) -> AnnealSchedule {
        let p = &self.train.perturbation;
        let beta = variant.map_or(p.beta, |v| v.beta);
        let alpha = variant.and_then(|v| v.alpha).unwrap_or(p.alpha);
        let final_scale = variant.and_then(|v| v.final_scale).unwrap_or(p.final_scale);
        let delta = scale_delta(p.delta, self.tokenizer.codebook_size, self.pfid.k_ref);
        let mut initial = PerturbationSpec::new(alpha, beta, delta, seed);
        initial.mode = p.mode;
        AnnealSchedule {
            initial,
            final_scale,
            delta_final_scale: p.delta_final_scale,
            total_steps: self.train.steps.max(1),
            shape: p.shape,
        }
    }

    pub fn train_config(&self, variant: Option<&Variant>, seeds: &SeedRegistry) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: variant.and_then(|v| v.learning_rate).unwrap_or(t.learning_rate),
            lambda_rec: t.lambda_rec,
            lambda_vq: t.lambda_vq,
            commitment_weight: t.commitment_weight,
            perturbation: self.perturbation_for(variant, seeds.perturbation),
            seed: seeds.train,
            eval_every: t.eval_every,
            dead_code_patience: t.dead_code_patience,
        }
    }

    pub fn pfid_config(&self) -> PfidConfig {
        let s = self.seeds();
        PfidConfig {
            alphas: self.pfid.alphas.clone(),
            deltas: self.pfid.deltas.clone(),
            beta: 1.0,
            k_ref: self.pfid.k_ref,
            extractor: FeatureExtractorSpec::random_projection(self.pfid.feature_dim, s.extractor),
            eval_seed: s.eval,
            sample_count: self.pfid.sample_count,
        }
    }

    /// Rejects anything the commands would otherwise fail on midway.
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        let spec = self.dataset_spec();
        spec.validate().map_err(config_err)?;
        let arch = self.architecture();
        arch.validate().map_err(config_err)?;
        let seeds = self.seeds();
        let tc = self.train_config(None, &seeds);
        tc.validate().map_err(config_err)?;
        let k = arch.codebook_size;
        let pert = &self.train.perturbation;
        if pert.alpha > 0.0 && pert.beta > 0.0 && tc.perturbation.max_delta() >= k {
            return Err(Error::Config(format!(
                "training delta {} scales to {} which needs more than {k} codewords",
                pert.delta,
                tc.perturbation.max_delta()
            )));
        }
        if self.tokenizer.codebook_init == CodebookInit::Data {
            let cells = self.tokenizer.codebook_init_sample.min(spec.len()) * arch.tokens();
            if cells < k {
                return Err(Error::Config(format!(
                    "codebook_init_sample yields {cells} latent cells for {k} codewords"
                )));
            }
        }
        let pc = self.pfid_config();
        pc.validate().map_err(config_err)?;
        if pc.sample_count > spec.len() {
            return Err(Error::Config(format!(
                "pfid.sample_count {} exceeds the corpus size {}",
                pc.sample_count,
                spec.len()
            )));
        }

        let ab = &self.ablation;
        if ab.seeds == 0 {
            return Err(Error::Config("ablation.seeds must be positive".into()));
        }
        for (i, v) in ab.variants.iter().enumerate() {
            let ok_name = !v.name.is_empty() && v.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
            if !ok_name {
                return Err(Error::Config(format!(
                    "variant name {:?} must be non-empty [A-Za-z0-9._-]",
                    v.name
                )));
            }
            if ab.variants[..i].iter().any(|w| w.name == v.name) {
                return Err(Error::Config(format!("duplicate variant name {:?}", v.name)));
            }
            self.train_config(Some(v), &seeds)
                .validate()
                .map_err(|e| Error::Config(format!("variant {}: {e}", v.name)))?;
        }

        let an = &self.analysis;
        if an.elbow_ks.is_empty() || an.elbow_ks[0] == 0 || an.elbow_ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "analysis.elbow_ks must be positive and strictly ascending".into(),
            ));
        }
        if an.elbow_restarts == 0 || an.lipschitz_samples == 0 || an.lipschitz_delta == 0 {
            return Err(Error::Config(
                "elbow_restarts, lipschitz_samples and lipschitz_delta must be positive".into(),
            ));
        }
        if an.elbow_sample < *an.elbow_ks.last().unwrap() {
            return Err(Error::Config(
                "analysis.elbow_sample is smaller than the largest k".into(),
            ));
        }
        if !(an.lipschitz_alpha > 0.0 && an.lipschitz_alpha <= 1.0) {
            return Err(Error::Config(format!(
                "analysis.lipschitz_alpha {} outside (0, 1]",
                an.lipschitz_alpha
            )));
        }
        Ok(())
    }

    /// Canonical JSON of everything that determines results. The output
    /// directory is left out so relocated runs hash alike.
    pub fn canonical_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = v.as_object_mut() {
            map.remove("output_dir");
        }
        serde_json::to_string(&v).expect("value serializes")
    }
}
