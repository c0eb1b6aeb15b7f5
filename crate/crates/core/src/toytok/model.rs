//! Per-patch MLP encoder/decoder around a learnable codebook.

use crate::binfmt::{read_file, write_file, Reader, Writer};
use crate::codebook::{Codebook, LatentGrid};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;
use crate::tokenizer::Tokenizer;
use serde::{Deserialize, Serialize};
use std::path::Path;

const CHECKPOINT_MAGIC: &[u8; 4] = b"RTCK";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    /// Makes both MLPs affine; used to check the network against closed forms.
    Identity,
}

impl Activation {
    fn code(self) -> u32 {
        match self {
            Activation::Tanh => 0,
            Activation::Identity => 1,
        }
    }

    fn from_code(c: u32) -> Result<Self> {
        match c {
            0 => Ok(Activation::Tanh),
            1 => Ok(Activation::Identity),
            _ => Err(Error::format("checkpoint", format!("unknown activation code {c}"))),
        }
    }

    #[inline]
    pub(crate) fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    pub(crate) fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

fn default_channels() -> usize {
    3
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    /// Image side length in pixels.
    pub side: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// Patch side length; one token per patch.
    pub patch: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub codebook_size: usize,
    /// Decoder context radius: each cell is decoded from the codewords of
    /// its `(2r+1) x (2r+1)` neighbourhood (edges clamped). 0 decodes every
    /// patch from its own codeword alone.
    #[serde(default)]
    pub context: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.side == 0 || !self.side.is_multiple_of(self.patch) {
            return Err(Error::InvalidArgument(format!(
                "image side {} is not divisible by patch size {}",
                self.side, self.patch
            )));
        }
        if self.channels == 0 || self.latent_dim == 0 || self.hidden == 0 {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        if self.context >= self.grid().max(1) && self.context > 0 {
            return Err(Error::InvalidArgument(format!(
                "decoder context radius {} must be smaller than the token grid side {}",
                self.context,
                self.grid()
            )));
        }
        if self.codebook_size < 2 {
            return Err(Error::InvalidArgument("codebook needs at least 2 codewords".into()));
        }
        Ok(())
    }

    /// Tokens per side.
    pub fn grid(&self) -> usize {
        self.side / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// Cells in the decoder's context window.
    pub fn window(&self) -> usize {
        (2 * self.context + 1) * (2 * self.context + 1)
    }

    pub fn param_count(&self) -> usize {
        let (p, h, d) = (self.patch_dim(), self.hidden, self.latent_dim);
        (p * h + h) + (h * d + d) + (self.window() * d * h + h) + (h * p + p) + self.codebook_size * d
    }
}

/// Affine map `y = W x + b` with `W` stored row-major as `outputs x inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn xavier(inputs: usize, outputs: usize, stream: &mut rng::Stream) -> Self {
        let s = (6.0 / (inputs + outputs) as f64).sqrt();
        Dense {
            inputs,
            outputs,
            weight: (0..inputs * outputs)
                .map(|_| to_f32_grid(rng::uniform_range(stream, -s, s)))
                .collect(),
            bias: vec![0.0; outputs],
        }
    }

    /// `rows x outputs` result of applying the layer to `rows x inputs` input.
    pub(crate) fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let mut y: Vec<f64> = std::iter::repeat_n(&self.bias, rows).flatten().copied().collect();
        // y += x * W^T
        gemm(
            rows,
            self.inputs,
            self.outputs,
            x,
            (self.inputs, 1),
            &self.weight,
            (1, self.inputs),
            &mut y,
            1.0,
        );
        y
    }
}

/// `c = beta * c + a * b` for row-major `c` of shape `m x n`; `a` is `m x k`
/// and `b` is `k x n`, each given with (row, column) strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
pub(crate) fn to_f32_grid(v: f64) -> f64 {
    v as f32 as f64
}

/// The toy VQ autoencoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTokenizer {
    pub arch: Architecture,
    pub enc1: Dense,
    pub enc2: Dense,
    pub dec1: Dense,
    pub dec2: Dense,
    pub codebook: Codebook,
}

impl ToyTokenizer {
    /// Xavier-uniform weights, zero biases, small Gaussian codewords. All
    /// values are representable in `f32`.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut s = rng::stream(seed, &[rng::tag("toytok/init")]);
        let (p, h, d, k) = (arch.patch_dim(), arch.hidden, arch.latent_dim, arch.codebook_size);
        let enc1 = Dense::xavier(p, h, &mut s);
        let enc2 = Dense::xavier(h, d, &mut s);
        let dec1 = Dense::xavier(arch.window() * d, h, &mut s);
        let dec2 = Dense::xavier(h, p, &mut s);
        let codebook = Codebook::new(
            k,
            d,
            (0..k * d)
                .map(|_| to_f32_grid(0.1 * rng::standard_normal(&mut s)))
                .collect(),
        )?;
        Ok(ToyTokenizer {
            arch,
            enc1,
            enc2,
            dec1,
            dec2,
            codebook,
        })
    }

    /// Replaces the codebook with k-means++ seeds drawn from encoder outputs
    /// of `images`.
    pub fn init_codebook_from_data(&mut self, images: &[Image], seed: u64) -> Result<()> {
        if images.is_empty() {
            return Err(Error::InvalidArgument("no images to seed the codebook".into()));
        }
        let cells = self.encode_cells(images)?;
        let d = self.arch.latent_dim;
        let n = cells.len() / d;
        let k = self.arch.codebook_size;
        if n < k {
            return Err(Error::InvalidArgument(format!(
                "{n} latent cells cannot seed {k} codewords"
            )));
        }
        let mut s = rng::stream(seed, &[rng::tag("toytok/codebook-init")]);
        let centers = crate::analysis::kmeans_pp_seeds(&cells, n, d, k, &mut s);
        let mut values = Vec::with_capacity(k * d);
        for c in centers {
            values.extend(cells[c * d..(c + 1) * d].iter().map(|&v| to_f32_grid(v)));
        }
        self.codebook = Codebook::new(k, d, values)?;
        Ok(())
    }

    fn layers(&self) -> [&Dense; 4] {
        [&self.enc1, &self.enc2, &self.dec1, &self.dec2]
    }

    /// All trainable values in declaration order: encoder layer 1 (weight,
    /// bias), encoder layer 2, decoder layer 1, decoder layer 2, codebook.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.arch.param_count());
        for l in self.layers() {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out.extend_from_slice(self.codebook.vectors());
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.arch.param_count() {
            return Err(Error::Dimension(format!(
                "expected {} parameters, got {}",
                self.arch.param_count(),
                flat.len()
            )));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite parameter".into()));
        }
        let mut rest = flat;
        for l in [&mut self.enc1, &mut self.enc2, &mut self.dec1, &mut self.dec2] {
            let (w, r) = rest.split_at(l.weight.len());
            l.weight.copy_from_slice(w);
            let (b, r) = r.split_at(l.bias.len());
            l.bias.copy_from_slice(b);
            rest = r;
        }
        self.codebook.vectors_mut().copy_from_slice(rest);
        Ok(())
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        let a = &self.arch;
        if image.shape() != (a.side, a.side, a.channels) {
            return Err(Error::Dimension(format!(
                "image shape {:?} does not match tokenizer input {:?}",
                image.shape(),
                (a.side, a.side, a.channels)
            )));
        }
        Ok(())
    }

    /// Patch rows of `images`, `tokens * images.len()` rows of `patch_dim`.
    pub(crate) fn patchify(&self, images: &[Image]) -> Result<Vec<f64>> {
        let a = &self.arch;
        let (g, p, c) = (a.grid(), a.patch, a.channels);
        let mut out = Vec::with_capacity(images.len() * a.tokens() * a.patch_dim());
        for im in images {
            self.check_image(im)?;
            for gy in 0..g {
                for gx in 0..g {
                    for py in 0..p {
                        let y = gy * p + py;
                        let start = (y * a.side + gx * p) * c;
                        out.extend_from_slice(&im.pixels[start..start + p * c]);
                    }
                }
            }
        }
        Ok(out)
    }

    pub(crate) fn unpatchify(&self, rows: &[f64]) -> Vec<Image> {
        let a = &self.arch;
        let (g, p, c) = (a.grid(), a.patch, a.channels);
        let per_image = a.tokens() * a.patch_dim();
        rows.chunks_exact(per_image)
            .map(|chunk| {
                let mut im = Image::filled(a.side, a.side, c, 0.0);
                for (t, patch) in chunk.chunks_exact(a.patch_dim()).enumerate() {
                    let (gy, gx) = (t / g, t % g);
                    for py in 0..p {
                        let y = gy * p + py;
                        let start = (y * a.side + gx * p) * c;
                        im.pixels[start..start + p * c].copy_from_slice(&patch[py * p * c..(py + 1) * p * c]);
                    }
                }
                im
            })
            .collect()
    }

    /// Encoder hidden activations and latents for patch rows.
    pub(crate) fn encoder_pass(&self, patches: &[f64], rows: usize) -> (Vec<f64>, Vec<f64>) {
        let act = self.arch.activation;
        let mut h = self.enc1.forward(patches, rows);
        h.iter_mut().for_each(|v| *v = act.apply(*v));
        let z = self.enc2.forward(&h, rows);
        (h, z)
    }

    /// Decoder input rows: each cell's codeword followed by those of its
    /// context window in row-major order, clamped at the grid edges.
    pub(crate) fn gather_context<'a>(&self, latents: &'a [f64]) -> std::borrow::Cow<'a, [f64]> {
        let a = &self.arch;
        if a.context == 0 {
            return std::borrow::Cow::Borrowed(latents);
        }
        let (g, d, r) = (a.grid() as isize, a.latent_dim, a.context as isize);
        let per_image = a.tokens() * d;
        let mut out = Vec::with_capacity(latents.len() * a.window());
        for block in latents.chunks_exact(per_image) {
            for gy in 0..g {
                for gx in 0..g {
                    for oy in -r..=r {
                        for ox in -r..=r {
                            let ny = (gy + oy).clamp(0, g - 1) as usize;
                            let nx = (gx + ox).clamp(0, g - 1) as usize;
                            let at = (ny * g as usize + nx) * d;
                            out.extend_from_slice(&block[at..at + d]);
                        }
                    }
                }
            }
        }
        std::borrow::Cow::Owned(out)
    }

    /// Adjoint of [`Self::gather_context`]: sums window gradients back onto cells.
    pub(crate) fn scatter_context(&self, grad: Vec<f64>) -> Vec<f64> {
        let a = &self.arch;
        if a.context == 0 {
            return grad;
        }
        let (g, d, r) = (a.grid() as isize, a.latent_dim, a.context as isize);
        let w = a.window();
        let per_image = a.tokens() * d;
        let images = grad.len() / (per_image * w);
        let mut out = vec![0.0; images * per_image];
        let mut src = grad.chunks_exact(d);
        for b in 0..images {
            let block = &mut out[b * per_image..(b + 1) * per_image];
            for gy in 0..g {
                for gx in 0..g {
                    for oy in -r..=r {
                        for ox in -r..=r {
                            let ny = (gy + oy).clamp(0, g - 1) as usize;
                            let nx = (gx + ox).clamp(0, g - 1) as usize;
                            let at = (ny * g as usize + nx) * d;
                            for (o, v) in block[at..at + d].iter_mut().zip(src.next().unwrap()) {
                                *o += v;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Decoder hidden activations and output patches for gathered input rows.
    pub(crate) fn decoder_pass(&self, inputs: &[f64], rows: usize) -> (Vec<f64>, Vec<f64>) {
        let act = self.arch.activation;
        let mut h = self.dec1.forward(inputs, rows);
        h.iter_mut().for_each(|v| *v = act.apply(*v));
        let y = self.dec2.forward(&h, rows);
        (h, y)
    }

    /// Latent rows for every patch of every image.
    pub fn encode_cells(&self, images: &[Image]) -> Result<Vec<f64>> {
        let x = self.patchify(images)?;
        Ok(self.encoder_pass(&x, images.len() * self.arch.tokens()).1)
    }

    pub fn decode_cells(&self, latents: &[f64]) -> Vec<Image> {
        let rows = latents.len() / self.arch.latent_dim;
        self.unpatchify(&self.decoder_pass(&self.gather_context(latents), rows).1)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        TrainState::fresh(self.clone()).to_bytes()
    }
}

impl Tokenizer for ToyTokenizer {
    fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    fn encode(&self, image: &Image) -> Result<LatentGrid> {
        let z = self.encode_cells(std::slice::from_ref(image))?;
        let g = self.arch.grid();
        LatentGrid::new(g, g, self.arch.latent_dim, z)
    }

    fn decode_latents(&self, latents: &LatentGrid) -> Result<Image> {
        let g = self.arch.grid();
        if (latents.height, latents.width, latents.dim) != (g, g, self.arch.latent_dim) {
            return Err(Error::Dimension(format!(
                "latent grid {}x{}x{} does not match decoder input {g}x{g}x{}",
                latents.height, latents.width, latents.dim, self.arch.latent_dim
            )));
        }
        Ok(self.decode_cells(&latents.values).pop().unwrap())
    }
}

/// Model plus the bookkeeping needed to resume training exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: ToyTokenizer,
    /// Steps completed.
    pub step: u64,
    /// Consecutive steps each codeword went unassigned.
    pub idle: Vec<u32>,
    pub reseeded: u64,
}

impl TrainState {
    pub fn fresh(model: ToyTokenizer) -> Self {
        let k = model.arch.codebook_size;
        TrainState {
            model,
            step: 0,
            idle: vec![0; k],
            reseeded: 0,
        }
    }

    /// Checkpoint layout: `RTCK`, version, side, channels, patch,
    /// latent_dim, hidden, codebook_size, context, activation code (u32 each), step
    /// (u64), every parameter in [`ToyTokenizer::params_flat`] order as f32,
    /// the K idle counters (u32) and the reseed count (u64).
    pub fn to_bytes(&self) -> Vec<u8> {
        let a = &self.model.arch;
        let mut w = Writer::new(CHECKPOINT_MAGIC);
        for v in [
            a.side,
            a.channels,
            a.patch,
            a.latent_dim,
            a.hidden,
            a.codebook_size,
            a.context,
        ] {
            w.u32(v as u32);
        }
        w.u32(a.activation.code());
        w.u64(self.step);
        w.f64s_as_f32(&self.model.params_flat());
        for &i in &self.idle {
            w.u32(i);
        }
        w.u64(self.reseeded);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open("checkpoint", bytes, CHECKPOINT_MAGIC)?;
        let mut dims = [0usize; 7];
        for d in dims.iter_mut() {
            *d = r.u32()? as usize;
        }
        let arch = Architecture {
            side: dims[0],
            channels: dims[1],
            patch: dims[2],
            latent_dim: dims[3],
            hidden: dims[4],
            codebook_size: dims[5],
            context: dims[6],
            activation: Activation::from_code(r.u32()?)?,
        };
        arch.validate()?;
        let step = r.u64()?;
        let params = r.f32s_as_f64(arch.param_count())?;
        let idle = r.u32s(arch.codebook_size)?;
        let reseeded = r.u64()?;
        r.finish()?;
        let mut model = ToyTokenizer::init(arch, 0)?;
        model.set_params_flat(&params)?;
        Ok(TrainState {
            model,
            step,
            idle,
            reseeded,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        TrainState::from_bytes(&read_file(path)?)
    }
}
