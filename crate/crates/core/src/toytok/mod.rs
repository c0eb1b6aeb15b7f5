//! Desk-scale VQ autoencoder trained with optional latent perturbation.
//!
//! Each `patch x patch` block of the image is encoded independently by a
//! two-layer MLP into a `latent_dim` vector, snapped to its nearest codeword,
//! and decoded back by a mirror MLP. Training uses the straight-through
//! estimator: the decoder receives the chosen codeword (perturbed or not) and
//! its input gradient is handed to the encoder output unchanged.

mod model;
mod train;

pub use model::{Activation, Architecture, Dense, ToyTokenizer, TrainState};
pub use train::{
    batch_gradients, reconstruction_mse, train, train_step, train_with, usage_counts, vq_losses, BatchGradients,
    BatchSchedule, CurvePoint, LossBreakdown, LossWeights, StepMetrics, TrainConfig, TrainReport,
};
