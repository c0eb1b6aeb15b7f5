use super::config::{CodebookInit, ExperimentConfig, SeedRegistry, Variant};
use super::manifest::{self, hash_inputs, hash_outputs, sha256_hex, Mismatch, RunManifest, TIMING_FILE};
use crate::analysis::{self, elbow_curve, empirical_lipschitz, project_2d, usage_histogram, write_rows};
use crate::codebook::build_neighbor_table;
use crate::dataset::{self, corpus_files, generate, load_images, sample_indices, save_images, LabeledImages};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::perturbation::PerturbationSpec;
use crate::pfid::{compute_pfid, scale_delta, PfidReport};
use crate::svg::{self, Series};
use crate::tokenizer::Tokenizer;
use crate::toytok::{train_with, LossBreakdown, ToyTokenizer, TrainReport, TrainState};
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const CHECKPOINT_FILE: &str = "checkpoint.rtck";
pub const CODEBOOK_FILE: &str = "codebook.rtok";
pub const ERROR_FILE: &str = "error.json";

/// Per-invocation inputs besides the config.
#[derive(Debug, Clone, Default)]
pub struct Options {
    /// Checkpoint to resume (train) or evaluate (eval, analyze). Defaults to
    /// the train run of the same config.
    pub checkpoint: Option<PathBuf>,
    /// Corpus directory; defaults to the gen-data run of the config.
    pub corpus: Option<PathBuf>,
    /// Halt training at this step while keeping the schedule of
    /// `train.steps`, so the run can be resumed later.
    pub stop_at: Option<u64>,
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    sha256_hex(&cfg.canonical_json())
}

/// The corpus location depends only on the seeded dataset spec.
pub fn corpus_dir(cfg: &ExperimentConfig) -> PathBuf {
    let key = serde_json::json!({ "version": cfg.version, "dataset": cfg.dataset_spec() });
    cfg.output_dir
        .join(format!("corpus-{}", &sha256_hex(&key.to_string())[..12]))
}

fn run_id(command: &str, cfg: &ExperimentConfig, inputs: &BTreeMap<String, String>, extra: &str) -> String {
    let inputs = serde_json::to_string(inputs).expect("map serializes");
    sha256_hex(&format!("{command}\n{}\n{inputs}\n{extra}", cfg.canonical_json()))
}

fn run_dir_for(command: &str, cfg: &ExperimentConfig, inputs: &BTreeMap<String, String>, extra: &str) -> PathBuf {
    cfg.output_dir
        .join(format!("{command}-{}", &run_id(command, cfg, inputs, extra)[..12]))
}

/// A run directory being populated.
struct Run {
    dir: PathBuf,
    command: &'static str,
    config_hash: String,
    seeds: SeedRegistry,
    inputs: BTreeMap<String, String>,
    started: Instant,
}

impl Run {
    /// Replaces `dir` with an empty directory.
    fn begin(
        dir: PathBuf,
        command: &'static str,
        cfg: &ExperimentConfig,
        inputs: BTreeMap<String, String>,
    ) -> Result<Run> {
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        create_dir(&dir)?;
        Ok(Run {
            dir,
            command,
            config_hash: config_hash(cfg),
            seeds: cfg.seeds(),
            inputs,
            started: Instant::now(),
        })
    }

    fn finish(self) -> Result<PathBuf> {
        write_json(
            &self.dir.join(TIMING_FILE),
            &serde_json::json!({ "wall_clock_secs": self.started.elapsed().as_secs_f64() }),
        )?;
        let m = RunManifest {
            tool: env!("CARGO_PKG_NAME").into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: self.command.into(),
            config_hash: self.config_hash,
            root_seed: self.seeds.root,
            seeds: self.seeds,
            inputs: self.inputs,
            outputs: hash_outputs(&self.dir)?,
        };
        write_json(&self.dir.join(manifest::MANIFEST_FILE), &m)?;
        Ok(self.dir)
    }
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    kind: &'static str,
    exit_code: i32,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    last_completed_step: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    last_losses: Option<&'a LossBreakdown>,
}

fn write_error(dir: &Path, e: &Error, last: Option<(u64, &LossBreakdown)>) -> Result<()> {
    write_json(
        &dir.join(ERROR_FILE),
        &ErrorReport {
            kind: super::error_kind(e),
            exit_code: super::exit_code(e),
            message: e.to_string(),
            last_completed_step: last.map(|l| l.0),
            last_losses: last.map(|l| l.1),
        },
    )
}

struct Corpus {
    files: Vec<PathBuf>,
    set: LabeledImages,
}

fn load_corpus(cfg: &ExperimentConfig, opts: &Options) -> Result<Corpus> {
    let dir = opts.corpus.clone().unwrap_or_else(|| corpus_dir(cfg));
    if !dir.join(dataset::MANIFEST_FILE).is_file() {
        return Err(Error::io(
            dir.join(dataset::MANIFEST_FILE),
            std::io::Error::new(std::io::ErrorKind::NotFound, "corpus not found; run gen-data first"),
        ));
    }
    let (m, set) = load_images(&dir)?;
    let want = (cfg.dataset.side, cfg.dataset.side, cfg.dataset.channels);
    if let Some((i, im)) = set.images.iter().enumerate().find(|(_, im)| im.shape() != want) {
        return Err(Error::Dimension(format!(
            "{} is {:?}, the config expects {want:?}",
            m.items[i].file,
            im.shape()
        )));
    }
    Ok(Corpus {
        files: corpus_files(&dir, &m),
        set,
    })
}

fn load_checkpoint(cfg: &ExperimentConfig, path: &Path) -> Result<TrainState> {
    let state = TrainState::load(path)?;
    if state.model.arch != cfg.architecture() {
        return Err(Error::Config(format!(
            "checkpoint {} has architecture {:?}, the config describes {:?}",
            path.display(),
            state.model.arch,
            cfg.architecture()
        )));
    }
    Ok(state)
}

fn subset(images: &[Image], idx: &[usize]) -> Vec<Image> {
    idx.iter().map(|&i| images[i].clone()).collect()
}

/// Initial model of one training run.
pub fn init_model(cfg: &ExperimentConfig, seeds: &SeedRegistry, images: &[Image]) -> Result<ToyTokenizer> {
    let mut model = ToyTokenizer::init(cfg.architecture(), seeds.model)?;
    if cfg.tokenizer.codebook_init == CodebookInit::Data {
        let idx = sample_indices(images.len(), cfg.tokenizer.codebook_init_sample, seeds.model);
        model.init_codebook_from_data(&subset(images, &idx), seeds.model)?;
    }
    Ok(model)
}

pub fn gen_data(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let spec = cfg.dataset_spec();
    let set = generate(&spec)?;
    let run = Run::begin(corpus_dir(cfg), "gen-data", cfg, BTreeMap::new())?;
    save_images(&run.dir, &set, Some(&spec))?;
    run.finish()
}

fn write_loss_csv(path: &Path, report: &TrainReport) -> Result<()> {
    write_rows(
        path,
        &["step", "rec_loss", "vq_loss", "total"],
        report.curve.iter().map(|c| {
            vec![
                c.step.to_string(),
                c.rec_loss.to_string(),
                c.vq_loss.to_string(),
                c.total.to_string(),
            ]
        }),
    )
}

/// Trains one model into `dir`. On failure the error report is written to
/// `dir` before the error is returned.
fn train_into(
    dir: &Path,
    cfg: &ExperimentConfig,
    variant: Option<&Variant>,
    seeds: &SeedRegistry,
    state: TrainState,
    images: &[Image],
    stop_at: Option<u64>,
) -> Result<(TrainState, TrainReport)> {
    let mut tc = cfg.train_config(variant, seeds);
    if let Some(s) = stop_at {
        tc.steps = s.min(tc.steps);
    }
    let mut last = None;
    let (state, report) = match train_with(images, state, &tc, |m| last = Some((m.step, m.losses))) {
        Ok(r) => r,
        Err(e) => {
            write_error(dir, &e, last.as_ref().map(|(s, l)| (*s, l)))?;
            return Err(e);
        }
    };
    state.save(&dir.join(CHECKPOINT_FILE))?;
    state.model.codebook.save(&dir.join(CODEBOOK_FILE))?;
    write_json(&dir.join("report.json"), &report)?;
    write_loss_csv(&dir.join("loss.csv"), &report)?;
    Ok((state, report))
}

fn train_run_dir(cfg: &ExperimentConfig, inputs: &BTreeMap<String, String>, stop_at: Option<u64>) -> PathBuf {
    let extra = stop_at.map(|s| format!("stop_at={s}")).unwrap_or_default();
    run_dir_for("train", cfg, inputs, &extra)
}

pub fn train(cfg: &ExperimentConfig, opts: &Options) -> Result<PathBuf> {
    let corpus = load_corpus(cfg, opts)?;
    let seeds = cfg.seeds();
    let mut input_paths = corpus.files.clone();
    let state = match &opts.checkpoint {
        Some(p) => {
            input_paths.push(p.clone());
            load_checkpoint(cfg, p)?
        }
        None => TrainState::fresh(init_model(cfg, &seeds, &corpus.set.images)?),
    };
    let inputs = hash_inputs(&input_paths, &cfg.output_dir)?;
    let run = Run::begin(train_run_dir(cfg, &inputs, opts.stop_at), "train", cfg, inputs)?;
    let result = train_into(&run.dir, cfg, None, &seeds, state, &corpus.set.images, opts.stop_at);
    match result {
        Ok(_) => run.finish(),
        Err(e) => {
            run.finish()?;
            Err(e)
        }
    }
}

/// The checkpoint written by `train` for this config and corpus.
pub fn default_checkpoint(cfg: &ExperimentConfig, opts: &Options) -> Result<PathBuf> {
    let corpus = load_corpus(cfg, opts)?;
    default_checkpoint_for(cfg, &corpus)
}

fn default_checkpoint_for(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<PathBuf> {
    let inputs = hash_inputs(&corpus.files, &cfg.output_dir)?;
    Ok(train_run_dir(cfg, &inputs, None).join(CHECKPOINT_FILE))
}

fn checkpoint_path(cfg: &ExperimentConfig, opts: &Options, corpus: &Corpus) -> Result<PathBuf> {
    let p = match &opts.checkpoint {
        Some(p) => p.clone(),
        None => default_checkpoint_for(cfg, corpus)?,
    };
    if !p.is_file() {
        return Err(Error::io(
            &p,
            std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "checkpoint not found; run train or pass --checkpoint",
            ),
        ));
    }
    Ok(p)
}

fn evaluate(cfg: &ExperimentConfig, model: &ToyTokenizer, images: &[Image]) -> Result<PfidReport> {
    let pc = cfg.pfid_config();
    let idx = sample_indices(images.len(), pc.sample_count, pc.eval_seed);
    let nt = build_neighbor_table(&model.codebook, pc.max_scaled_delta(model.codebook.size()))?;
    compute_pfid(model, &subset(images, &idx), &pc, &nt)
}

fn write_pfid(dir: &Path, report: &PfidReport) -> Result<()> {
    write_json(&dir.join("pfid.json"), report)?;
    report.write_csv(&dir.join("pfid.csv"))
}

pub fn eval(cfg: &ExperimentConfig, opts: &Options) -> Result<PathBuf> {
    let corpus = load_corpus(cfg, opts)?;
    let ckpt = checkpoint_path(cfg, opts, &corpus)?;
    let state = load_checkpoint(cfg, &ckpt)?;
    let report = evaluate(cfg, &state.model, &corpus.set.images)?;
    let mut paths = corpus.files;
    paths.push(ckpt);
    let inputs = hash_inputs(&paths, &cfg.output_dir)?;
    let run = Run::begin(run_dir_for("eval", cfg, &inputs, ""), "eval", cfg, inputs)?;
    write_pfid(&run.dir, &report)?;
    run.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub variant: String,
    pub seed: usize,
    pub rfid: Option<f64>,
    pub pfid: Option<f64>,
    pub gini: Option<f64>,
    /// `ok`, or the error kind.
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantSummary {
    pub variant: String,
    pub beta: f64,
    pub alpha: f64,
    pub final_scale: f64,
    pub cells_ok: usize,
    pub mean_rfid: Option<f64>,
    pub mean_pfid: Option<f64>,
    pub mean_gini: Option<f64>,
}

fn mean(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let xs: Vec<f64> = v.flatten().collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// The configured variants, or the base training setup alone.
pub fn ablation_variants(cfg: &ExperimentConfig) -> Vec<Variant> {
    if !cfg.ablation.variants.is_empty() {
        return cfg.ablation.variants.clone();
    }
    vec![Variant {
        name: "base".into(),
        beta: cfg.train.perturbation.beta,
        alpha: None,
        final_scale: None,
        learning_rate: None,
    }]
}

fn run_cell(
    dir: &Path,
    cfg: &ExperimentConfig,
    variant: &Variant,
    seeds: &SeedRegistry,
    images: &[Image],
) -> Result<(f64, f64, f64)> {
    let model = init_model(cfg, seeds, images)?;
    let (state, report) = train_into(dir, cfg, Some(variant), seeds, TrainState::fresh(model), images, None)?;
    let pfid = evaluate(cfg, &state.model, images).inspect_err(|e| {
        let _ = write_error(dir, e, None);
    })?;
    write_pfid(dir, &pfid)?;
    Ok((pfid.rfid, pfid.pfid, analysis::gini(&report.usage_counts)))
}

/// Trains and evaluates every (variant, seed) cell. A failing cell is
/// recorded and the others continue; the command fails only if every cell
/// does.
pub fn ablate(cfg: &ExperimentConfig, opts: &Options) -> Result<PathBuf> {
    let corpus = load_corpus(cfg, opts)?;
    let inputs = hash_inputs(&corpus.files, &cfg.output_dir)?;
    let run = Run::begin(run_dir_for("ablate", cfg, &inputs, ""), "ablate", cfg, inputs)?;
    let variants = ablation_variants(cfg);
    let base = cfg.seeds();
    let cells: Vec<(&Variant, usize)> = variants
        .iter()
        .flat_map(|v| (0..cfg.ablation.seeds).map(move |s| (v, s)))
        .collect();
    let images = &corpus.set.images;
    let outcomes: Vec<(CellResult, Option<Error>)> = cells
        .par_iter()
        .map(|&(v, s)| {
            let dir = run.dir.join("cells").join(format!("{}-s{s}", v.name));
            let res = create_dir(&dir).and_then(|_| run_cell(&dir, cfg, v, &base.replicate(s), images));
            let (vals, status, err) = match res {
                Ok((r, p, g)) => ((Some(r), Some(p), Some(g)), "ok".to_string(), None),
                Err(e) => ((None, None, None), super::error_kind(&e).to_string(), Some(e)),
            };
            let row = CellResult {
                variant: v.name.clone(),
                seed: s,
                rfid: vals.0,
                pfid: vals.1,
                gini: vals.2,
                status,
            };
            (row, err)
        })
        .collect();

    let rows: Vec<&CellResult> = outcomes.iter().map(|o| &o.0).collect();
    write_rows(
        &run.dir.join("ablation.csv"),
        &["variant", "seed", "rfid", "pfid", "gini", "status"],
        rows.iter().map(|r| {
            vec![
                r.variant.clone(),
                r.seed.to_string(),
                fmt_opt(r.rfid),
                fmt_opt(r.pfid),
                fmt_opt(r.gini),
                r.status.clone(),
            ]
        }),
    )?;
    let summary: Vec<VariantSummary> = variants
        .iter()
        .map(|v| {
            let mine: Vec<&&CellResult> = rows.iter().filter(|r| r.variant == v.name).collect();
            let sched = cfg.perturbation_for(Some(v), 0);
            VariantSummary {
                variant: v.name.clone(),
                beta: sched.initial.beta,
                alpha: sched.initial.alpha,
                final_scale: sched.final_scale,
                cells_ok: mine.iter().filter(|r| r.status == "ok").count(),
                mean_rfid: mean(mine.iter().map(|r| r.rfid)),
                mean_pfid: mean(mine.iter().map(|r| r.pfid)),
                mean_gini: mean(mine.iter().map(|r| r.gini)),
            }
        })
        .collect();
    write_rows(
        &run.dir.join("summary.csv"),
        &[
            "variant",
            "beta",
            "alpha",
            "final_scale",
            "cells_ok",
            "mean_rfid",
            "mean_pfid",
            "mean_gini",
        ],
        summary.iter().map(|s| {
            vec![
                s.variant.clone(),
                s.beta.to_string(),
                s.alpha.to_string(),
                s.final_scale.to_string(),
                s.cells_ok.to_string(),
                fmt_opt(s.mean_rfid),
                fmt_opt(s.mean_pfid),
                fmt_opt(s.mean_gini),
            ]
        }),
    )?;
    write_json(
        &run.dir.join("summary.json"),
        &serde_json::json!({ "variants": summary, "cells": rows }),
    )?;
    let all_failed = outcomes.iter().all(|o| o.1.is_some());
    let dir = run.finish()?;
    if all_failed {
        if let Some(e) = outcomes.into_iter().find_map(|o| o.1) {
            return Err(e);
        }
    }
    Ok(dir)
}

#[derive(Serialize)]
struct AnalysisSummary<'a> {
    images: usize,
    codebook_size: usize,
    codes_used: usize,
    usage_gini: f64,
    thresholds: &'a [analysis::ThresholdView],
    elbow: &'a [analysis::ElbowRow],
    elbow_largest_drop_k: Option<usize>,
    lipschitz_delta_scaled: usize,
    lipschitz_max: f64,
    lipschitz_mean: f64,
    lipschitz_p95: f64,
}

/// Usage histogram, elbow table, codebook projection and decoder Lipschitz
/// estimate. Everything is computed before the run directory is touched, so
/// a failure leaves no partial output.
pub fn analyze(cfg: &ExperimentConfig, opts: &Options) -> Result<PathBuf> {
    let corpus = load_corpus(cfg, opts)?;
    let images = &corpus.set.images;
    if images.is_empty() {
        return Err(Error::InvalidArgument("corpus has no images to analyze".into()));
    }
    let ckpt = checkpoint_path(cfg, opts, &corpus)?;
    let state = load_checkpoint(cfg, &ckpt)?;
    let model = &state.model;
    let an = &cfg.analysis;
    let seeds = cfg.seeds();
    let (k, d) = (model.codebook.size(), model.codebook.dim());

    let grids = images
        .par_iter()
        .map(|im| model.tokenize(im))
        .collect::<Result<Vec<_>>>()?;
    let hist = usage_histogram(&grids, k, &an.usage_thresholds)?;

    let cells = model.encode_cells(images)?;
    let n_cells = cells.len() / d;
    let max_k = *an.elbow_ks.last().expect("validated non-empty");
    if n_cells < max_k {
        return Err(Error::InvalidArgument(format!(
            "{n_cells} latent cells cannot form {max_k} clusters"
        )));
    }
    let pick = sample_indices(n_cells, an.elbow_sample, seeds.analysis);
    let points: Vec<f64> = pick
        .iter()
        .flat_map(|&i| cells[i * d..(i + 1) * d].iter().copied())
        .collect();
    let elbow = elbow_curve(&points, d, &an.elbow_ks, an.elbow_restarts, seeds.analysis)?;
    let proj = project_2d(&model.codebook);

    let delta = scale_delta(an.lipschitz_delta, k, cfg.pfid.k_ref);
    let nt = build_neighbor_table(&model.codebook, delta)?;
    let spec = PerturbationSpec::new(an.lipschitz_alpha, 1.0, delta, seeds.analysis);
    let lip = empirical_lipschitz(model, &nt, &spec, images, an.lipschitz_samples)?;

    let mut paths = corpus.files.clone();
    paths.push(ckpt);
    let inputs = hash_inputs(&paths, &cfg.output_dir)?;
    let run = Run::begin(run_dir_for("analyze", cfg, &inputs, ""), "analyze", cfg, inputs)?;
    let dir = &run.dir;
    hist.write_csv(&dir.join("usage.csv"))?;
    elbow.write_csv(&dir.join("elbow.csv"))?;
    analysis::write_projection_csv(&dir.join("projection.csv"), &proj, &hist.counts)?;
    write_json(&dir.join("lipschitz.json"), &lip)?;
    write_json(
        &dir.join("analysis.json"),
        &AnalysisSummary {
            images: images.len(),
            codebook_size: k,
            codes_used: hist.counts.iter().filter(|&&c| c > 0).count(),
            usage_gini: hist.gini(),
            thresholds: &hist.thresholds,
            elbow: &elbow.rows,
            elbow_largest_drop_k: elbow.largest_drop_k(),
            lipschitz_delta_scaled: delta,
            lipschitz_max: lip.max,
            lipschitz_mean: lip.mean,
            lipschitz_p95: lip.p95,
        },
    )?;
    if an.svg {
        let mut sorted = hist.counts.clone();
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        let usage = Series {
            name: "usage".into(),
            points: sorted.iter().enumerate().map(|(i, &c)| (i as f64, c as f64)).collect(),
        };
        let sse = Series {
            name: "sse".into(),
            points: elbow.rows.iter().map(|r| (r.k as f64, r.sse)).collect(),
        };
        let write = |name: &str, s: String| {
            let p = dir.join(name);
            std::fs::write(&p, s).map_err(|e| Error::io(&p, e))
        };
        write(
            "usage.svg",
            svg::line_plot("codeword usage by rank", "rank", "count", &[usage]),
        )?;
        write("elbow.svg", svg::line_plot("k-means elbow", "k", "SSE", &[sse]))?;
        let pts: Vec<(f64, f64)> = proj.iter().map(|p| (p[0], p[1])).collect();
        let w: Vec<f64> = hist.counts.iter().map(|&c| c as f64).collect();
        write("projection.svg", svg::scatter_plot("codebook projection", &pts, &w))?;
    }
    run.finish()
}

/// Re-hashes a run directory against its manifest.
pub fn validate(run_dir: &Path) -> Result<Vec<Mismatch>> {
    manifest::verify(run_dir)
}
