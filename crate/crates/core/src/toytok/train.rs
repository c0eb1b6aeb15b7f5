//! Losses, hand-derived gradients and the SGD training loop.

use super::model::{gemm, to_f32_grid, Dense, ToyTokenizer, TrainState};
use crate::codebook::{build_neighbor_table, quantize, Codebook, LatentGrid, TokenGrid};
use crate::error::{Error, Result};
use crate::image::{mse, Image};
use crate::perturbation::{anneal_at, perturb_batch, AnnealSchedule};
use crate::rng;
use crate::tokenizer::Tokenizer;
use serde::{Deserialize, Serialize};
use std::time::Instant;

fn default_commitment() -> f64 {
    0.25
}
fn default_lambda() -> f64 {
    1.0
}
fn default_patience() -> u32 {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_lambda")]
    pub lambda_rec: f64,
    #[serde(default = "default_lambda")]
    pub lambda_vq: f64,
    #[serde(default = "default_commitment")]
    pub commitment_weight: f64,
    pub perturbation: AnnealSchedule,
    pub seed: u64,
    pub eval_every: u64,
    /// Idle steps after which a codeword is re-seeded; 0 disables re-seeding.
    #[serde(default = "default_patience")]
    pub dead_code_patience: u32,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::InvalidArgument(
                "batch_size and eval_every must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, v) in [
            ("lambda_rec", self.lambda_rec),
            ("lambda_vq", self.lambda_vq),
            ("commitment_weight", self.commitment_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be >= 0, got {v}")));
            }
        }
        self.perturbation.validate()
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_rec: self.lambda_rec,
            lambda_vq: self.lambda_vq,
            commitment_weight: self.commitment_weight,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_vq: f64,
    pub commitment_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_rec: 1.0,
            lambda_vq: 1.0,
            commitment_weight: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Mean squared pixel error of the reconstruction.
    pub rec: f64,
    pub codebook: f64,
    pub commitment: f64,
    /// `codebook + commitment_weight * commitment`.
    pub vq: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn is_finite(&self) -> bool {
        [self.rec, self.codebook, self.commitment, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Codebook and commitment losses of a latent grid with its assignment.
///
/// Both are the mean squared distance from each cell to its nearest
/// codeword; they differ only in which side receives the gradient.
pub fn vq_losses(latent: &LatentGrid, cb: &Codebook) -> Result<(f64, f64, TokenGrid)> {
    if latent.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite latent".into()));
    }
    let tokens = quantize(latent, cb)?;
    let cells = latent.cells();
    let s: f64 = (0..cells).map(|i| cb.nearest(latent.cell(i)).1).sum::<f64>() / cells as f64;
    Ok((s, s, tokens))
}

/// Analytic gradients of one batch plus the intermediate values around the
/// quantizer, exposed so the straight-through wiring can be checked.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub losses: LossBreakdown,
    /// Gradient in [`ToyTokenizer::params_flat`] order.
    pub params: Vec<f64>,
    /// Encoder outputs, one row per cell.
    pub latent: Vec<f64>,
    /// Clean nearest-codeword assignment per cell.
    pub assignment: Vec<u32>,
    /// Decoder input per cell: the (possibly perturbed) codeword.
    pub decoder_input: Vec<f64>,
    pub decoder_input_grad: Vec<f64>,
    pub latent_grad: Vec<f64>,
}

struct EncoderPass {
    patches: Vec<f64>,
    hidden: Vec<f64>,
    latent: Vec<f64>,
    rows: usize,
}

fn encoder_pass(model: &ToyTokenizer, batch: &[Image]) -> Result<EncoderPass> {
    let patches = model.patchify(batch)?;
    let rows = batch.len() * model.arch.tokens();
    let (hidden, latent) = model.encoder_pass(&patches, rows);
    Ok(EncoderPass {
        patches,
        hidden,
        latent,
        rows,
    })
}

fn assign(cb: &Codebook, latent: &[f64]) -> Vec<u32> {
    latent.chunks_exact(cb.dim()).map(|z| cb.nearest(z).0 as u32).collect()
}

/// Accumulates `dW += dY^T X` and `db += colsum(dY)` into `grad` (weight
/// then bias) and returns `dX = dY W`.
fn dense_backward(layer: &Dense, x: &[f64], dy: &[f64], rows: usize, grad: &mut [f64]) -> Vec<f64> {
    let (i, o) = (layer.inputs, layer.outputs);
    let (gw, gb) = grad.split_at_mut(i * o);
    gemm(o, rows, i, dy, (1, o), x, (i, 1), gw, 1.0);
    for r in dy.chunks_exact(o) {
        for (b, v) in gb.iter_mut().zip(r) {
            *b += v;
        }
    }
    let mut dx = vec![0.0; rows * i];
    gemm(rows, o, i, dy, (o, 1), &layer.weight, (i, 1), &mut dx, 0.0);
    dx
}

fn backprop_activation(model: &ToyTokenizer, dh: &mut [f64], h: &[f64]) {
    let act = model.arch.activation;
    for (d, &v) in dh.iter_mut().zip(h) {
        *d *= act.grad_from_output(v);
    }
}

fn gradients_from_pass(
    model: &ToyTokenizer,
    pass: &EncoderPass,
    weights: &LossWeights,
    assignment: Vec<u32>,
    used: &[u32],
) -> BatchGradients {
    let a = &model.arch;
    let (d, rows) = (a.latent_dim, pass.rows);
    let cb = &model.codebook;

    // straight-through: the decoder sees the chosen codeword itself
    let mut e_in = Vec::with_capacity(rows * d);
    for &k in used {
        e_in.extend_from_slice(cb.row(k as usize));
    }
    let ctx = model.gather_context(&e_in);
    let (dh, recon) = model.decoder_pass(&ctx, rows);

    let npix = (rows * a.patch_dim()) as f64;
    let mut rec = 0.0;
    let mut dy = Vec::with_capacity(recon.len());
    for (y, x) in recon.iter().zip(&pass.patches) {
        let r = y - x;
        rec += r * r;
        dy.push(weights.lambda_rec * 2.0 * r / npix);
    }
    rec /= npix;

    let mut vq_sum = 0.0;
    for (z, &k) in pass.latent.chunks_exact(d).zip(&assignment) {
        vq_sum += crate::codebook::sq_dist(z, cb.row(k as usize));
    }
    let vq_term = vq_sum / rows as f64;

    let sizes: Vec<usize> = [&model.enc1, &model.enc2, &model.dec1, &model.dec2]
        .iter()
        .map(|l| l.weight.len() + l.bias.len())
        .collect();
    let mut grad = vec![0.0; a.param_count()];
    let (g_enc1, rest) = grad.split_at_mut(sizes[0]);
    let (g_enc2, rest) = rest.split_at_mut(sizes[1]);
    let (g_dec1, rest) = rest.split_at_mut(sizes[2]);
    let (g_dec2, g_cb) = rest.split_at_mut(sizes[3]);

    let mut d_dh = dense_backward(&model.dec2, &dh, &dy, rows, g_dec2);
    backprop_activation(model, &mut d_dh, &dh);
    let d_ein = model.scatter_context(dense_backward(&model.dec1, &ctx, &d_dh, rows, g_dec1));

    // codebook term pulls e toward z, commitment term pulls z toward e
    let mut dz = d_ein.clone();
    let cells = rows as f64;
    let wc = weights.lambda_vq * weights.commitment_weight * 2.0 / cells;
    let wb = weights.lambda_vq * 2.0 / cells;
    for (r, (z, &k)) in pass.latent.chunks_exact(d).zip(&assignment).enumerate() {
        let e = cb.row(k as usize);
        let k = k as usize;
        for j in 0..d {
            let diff = z[j] - e[j];
            dz[r * d + j] += wc * diff;
            g_cb[k * d + j] -= wb * diff;
        }
    }

    let mut d_eh = dense_backward(&model.enc2, &pass.hidden, &dz, rows, g_enc2);
    backprop_activation(model, &mut d_eh, &pass.hidden);
    dense_backward(&model.enc1, &pass.patches, &d_eh, rows, g_enc1);

    let vq = vq_term + weights.commitment_weight * vq_term;
    BatchGradients {
        losses: LossBreakdown {
            rec,
            codebook: vq_term,
            commitment: vq_term,
            vq,
            total: weights.lambda_rec * rec + weights.lambda_vq * vq,
        },
        params: grad,
        latent: pass.latent.clone(),
        assignment,
        decoder_input: e_in,
        decoder_input_grad: d_ein,
        latent_grad: dz,
    }
}

/// Loss and gradient for `batch`. `decoder_tokens` overrides the tokens fed
/// to the decoder (one grid per image, e.g. a perturbed copy of the clean
/// assignment); `None` decodes the clean assignment.
pub fn batch_gradients(
    model: &ToyTokenizer,
    batch: &[Image],
    weights: &LossWeights,
    decoder_tokens: Option<&[TokenGrid]>,
) -> Result<BatchGradients> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let pass = encoder_pass(model, batch)?;
    let assignment = assign(&model.codebook, &pass.latent);
    let used = match decoder_tokens {
        None => assignment.clone(),
        Some(grids) => {
            if grids.len() != batch.len() {
                return Err(Error::Dimension(format!(
                    "{} token grids for {} images",
                    grids.len(),
                    batch.len()
                )));
            }
            let mut used = Vec::with_capacity(pass.rows);
            for g in grids {
                g.check()?;
                if g.cells() != model.arch.tokens() || g.k != model.codebook.size() {
                    return Err(Error::Dimension("token grid does not match the model".into()));
                }
                used.extend_from_slice(&g.indices);
            }
            used
        }
    };
    Ok(gradients_from_pass(model, &pass, weights, assignment, &used))
}

/// Metrics of one optimisation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub losses: LossBreakdown,
    pub images_perturbed: usize,
    pub tokens_replaced: usize,
    pub codes_used: usize,
    pub reseeded: usize,
}

fn grids_from(assignment: &[u32], model: &ToyTokenizer, images: usize) -> Result<Vec<TokenGrid>> {
    let (g, t, k) = (model.arch.grid(), model.arch.tokens(), model.codebook.size());
    (0..images)
        .map(|i| TokenGrid::new(g, g, k, assignment[i * t..(i + 1) * t].to_vec()))
        .collect()
}

/// One SGD step at `state.step`; advances the step counter on success and
/// leaves the state untouched on a numerical failure.
pub fn train_step(state: &mut TrainState, batch: &[Image], config: &TrainConfig) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let step = state.step;
    let model = &state.model;
    let k = model.codebook.size();
    let pass = encoder_pass(model, batch)?;
    if pass.latent.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite encoder output at step {step}")));
    }
    let assignment = assign(&model.codebook, &pass.latent);

    let live = anneal_at(&config.perturbation, step);
    let (used, images_perturbed, tokens_replaced) = if live.alpha > 0.0 && live.beta > 0.0 {
        if live.delta >= k {
            return Err(Error::InvalidArgument(format!(
                "perturbation delta {} needs more than {k} codewords",
                live.delta
            )));
        }
        let nt = build_neighbor_table(&model.codebook, live.delta)?;
        let clean = grids_from(&assignment, model, batch.len())?;
        let (perturbed, report) = perturb_batch(&clean, &live, &nt, step)?;
        let used: Vec<u32> = perturbed.into_iter().flat_map(|g| g.indices).collect();
        (used, report.images_perturbed, report.tokens_replaced)
    } else {
        (assignment.clone(), 0, 0)
    };

    let g = gradients_from_pass(model, &pass, &config.weights(), assignment, &used);
    if !g.losses.is_finite() || g.params.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite loss at step {step}: rec={} vq={} total={} (learning rate {} may be too high)",
            g.losses.rec, g.losses.vq, g.losses.total, config.learning_rate
        )));
    }

    let lr = config.learning_rate;
    let updated: Vec<f64> = state
        .model
        .params_flat()
        .iter()
        .zip(&g.params)
        .map(|(p, d)| to_f32_grid(p - lr * d))
        .collect();
    if updated.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("parameter overflow at step {step}")));
    }
    state.model.set_params_flat(&updated)?;

    let mut seen = vec![false; k];
    for &a in &g.assignment {
        seen[a as usize] = true;
    }
    let mut reseeded = 0;
    let d = state.model.arch.latent_dim;
    for c in 0..k {
        if seen[c] {
            state.idle[c] = 0;
            continue;
        }
        state.idle[c] = state.idle[c].saturating_add(1);
        if config.dead_code_patience > 0 && state.idle[c] >= config.dead_code_patience {
            let mut s = rng::stream(config.seed, &[rng::tag("toytok/reseed"), step, c as u64]);
            let cell = rng::uniform_below(&mut s, pass.rows);
            let src: Vec<f64> = g.latent[cell * d..(cell + 1) * d]
                .iter()
                .map(|&v| to_f32_grid(v))
                .collect();
            state.model.codebook.vectors_mut()[c * d..(c + 1) * d].copy_from_slice(&src);
            state.idle[c] = 0;
            reseeded += 1;
        }
    }
    state.reseeded += reseeded as u64;
    state.step += 1;

    Ok(StepMetrics {
        step,
        losses: g.losses,
        images_perturbed,
        tokens_replaced,
        codes_used: seen.iter().filter(|&&s| s).count(),
        reseeded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Last step of the logged interval.
    pub step: u64,
    pub rec_loss: f64,
    pub vq_loss: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Interval means of the step losses, one point every `eval_every` steps.
    pub curve: Vec<CurvePoint>,
    pub steps_run: u64,
    /// Clean codeword usage over the whole dataset after training.
    pub usage_counts: Vec<u64>,
    pub images_perturbed: u64,
    pub tokens_replaced: u64,
    /// Replaced tokens per epoch, indexed by the epoch of each batch's first sample.
    pub tokens_replaced_per_epoch: Vec<u64>,
    pub codes_reseeded: u64,
    /// Mean total loss over the first / last (up to) 100 steps of this run.
    pub initial_trailing_loss: Option<f64>,
    pub final_trailing_loss: Option<f64>,
    pub initial_mse: f64,
    pub final_mse: f64,
    pub final_rfid: Option<f64>,
    pub final_pfid: Option<f64>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// Dataset order for every step: epoch `e` uses a fresh seeded permutation.
pub struct BatchSchedule {
    n: usize,
    batch: usize,
    seed: u64,
    cached_epoch: Option<(u64, Vec<usize>)>,
}

impl BatchSchedule {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        BatchSchedule {
            n,
            batch,
            seed,
            cached_epoch: None,
        }
    }

    fn order(&mut self, epoch: u64) -> &[usize] {
        if self.cached_epoch.as_ref().map(|c| c.0) != Some(epoch) {
            let mut s = rng::stream(self.seed, &[rng::tag("toytok/shuffle"), epoch]);
            self.cached_epoch = Some((epoch, rng::permutation(&mut s, self.n)));
        }
        &self.cached_epoch.as_ref().unwrap().1
    }

    pub fn epoch_of(&self, step: u64) -> u64 {
        step * self.batch as u64 / self.n as u64
    }

    /// Dataset indices of the batch at `step`.
    pub fn indices(&mut self, step: u64) -> Vec<usize> {
        let n = self.n as u64;
        let start = step * self.batch as u64;
        (start..start + self.batch as u64)
            .map(|pos| {
                let (epoch, off) = (pos / n, (pos % n) as usize);
                self.order(epoch)[off]
            })
            .collect()
    }
}

/// Clean codeword usage counts over `images`.
pub fn usage_counts(model: &ToyTokenizer, images: &[Image]) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; model.codebook.size()];
    for chunk in images.chunks(64) {
        let z = model.encode_cells(chunk)?;
        for a in assign(&model.codebook, &z) {
            counts[a as usize] += 1;
        }
    }
    Ok(counts)
}

/// Clean reconstruction MSE over `images`.
pub fn reconstruction_mse(model: &ToyTokenizer, images: &[Image]) -> Result<f64> {
    let recon = images
        .iter()
        .map(|im| model.reconstruct(im))
        .collect::<Result<Vec<_>>>()?;
    Ok(mse(&recon, images))
}

fn trailing_mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Runs `config.steps - state.step` further steps; resuming a saved state
/// continues the exact same trajectory.
pub fn train(dataset: &[Image], state: TrainState, config: &TrainConfig) -> Result<(TrainState, TrainReport)> {
    train_with(dataset, state, config, |_| {})
}

/// [`train`] with a callback after each completed step.
pub fn train_with(
    dataset: &[Image],
    mut state: TrainState,
    config: &TrainConfig,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<(TrainState, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    config.validate()?;
    if config.perturbation.max_delta() >= state.model.codebook.size()
        && config.perturbation.initial.alpha > 0.0
        && config.perturbation.initial.beta > 0.0
    {
        return Err(Error::InvalidArgument(format!(
            "perturbation delta {} needs more than {} codewords",
            config.perturbation.max_delta(),
            state.model.codebook.size()
        )));
    }
    let started = Instant::now();
    let initial_mse = reconstruction_mse(&state.model, dataset)?;
    let mut schedule = BatchSchedule::new(dataset.len(), config.batch_size, config.seed);

    let mut curve = Vec::new();
    let mut totals = Vec::new();
    let mut interval = (0.0, 0.0, 0.0, 0u64);
    let (mut images_perturbed, mut tokens_replaced) = (0u64, 0u64);
    let mut per_epoch: Vec<u64> = Vec::new();
    let mut batch = Vec::with_capacity(config.batch_size);

    while state.step < config.steps {
        let step = state.step;
        batch.clear();
        batch.extend(schedule.indices(step).into_iter().map(|i| dataset[i].clone()));
        let m = train_step(&mut state, &batch, config)?;
        on_step(&m);

        images_perturbed += m.images_perturbed as u64;
        tokens_replaced += m.tokens_replaced as u64;
        let epoch = schedule.epoch_of(step) as usize;
        if per_epoch.len() <= epoch {
            per_epoch.resize(epoch + 1, 0);
        }
        per_epoch[epoch] += m.tokens_replaced as u64;
        totals.push(m.losses.total);

        interval.0 += m.losses.rec;
        interval.1 += m.losses.vq;
        interval.2 += m.losses.total;
        interval.3 += 1;
        if (step + 1).is_multiple_of(config.eval_every) || step + 1 == config.steps {
            let c = interval.3 as f64;
            curve.push(CurvePoint {
                step,
                rec_loss: interval.0 / c,
                vq_loss: interval.1 / c,
                total: interval.2 / c,
            });
            interval = (0.0, 0.0, 0.0, 0);
        }
    }

    let head = &totals[..totals.len().min(100)];
    let tail = &totals[totals.len().saturating_sub(100)..];
    let report = TrainReport {
        curve,
        steps_run: totals.len() as u64,
        usage_counts: usage_counts(&state.model, dataset)?,
        images_perturbed,
        tokens_replaced,
        tokens_replaced_per_epoch: per_epoch,
        codes_reseeded: state.reseeded,
        initial_trailing_loss: trailing_mean(head),
        final_trailing_loss: trailing_mean(tail),
        initial_mse,
        final_mse: reconstruction_mse(&state.model, dataset)?,
        final_rfid: None,
        final_pfid: None,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((state, report))
}
