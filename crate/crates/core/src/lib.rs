//! Tools for measuring and improving the robustness of discrete image
//! tokenizers: nearest-codeword quantization, top-δ token perturbation,
//! FID and perturbed FID, a toy VQ autoencoder trained with latent
//! perturbation, and the diagnostics and experiment harness around them.

pub mod analysis;
mod binfmt;
pub mod codebook;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod image;
pub mod metrics;
pub mod perturbation;
pub mod pfid;
pub mod rng;
pub mod svg;
pub mod tokenizer;
pub mod toytok;

pub use codebook::{build_neighbor_table, dequantize, quantize, Codebook, LatentGrid, NeighborTable, TokenGrid};
pub use error::{Error, Result};
pub use image::Image;
pub use perturbation::{anneal_at, perturb_batch, perturb_grid, AnnealSchedule, PerturbationSpec};
pub use tokenizer::Tokenizer;
