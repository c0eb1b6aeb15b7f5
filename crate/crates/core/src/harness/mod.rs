//! Config-driven experiment commands: corpus generation, training,
//! evaluation, ablation grids and analysis exports.
//!
//! Every command writes into a fresh directory under `output_dir` named by
//! a hash of the config and the input files, and finishes by writing
//! `run.json` with content hashes of everything it read and wrote.

mod commands;
mod config;
mod manifest;

pub use commands::{
    ablate, ablation_variants, analyze, config_hash, corpus_dir, default_checkpoint, eval, gen_data, init_model, train,
    validate, CellResult, Options, VariantSummary, CHECKPOINT_FILE, CODEBOOK_FILE, ERROR_FILE,
};
pub use config::{
    AblationSection, AnalysisSection, CodebookInit, DatasetSection, ExperimentConfig, PerturbationSection, PfidSection,
    SeedRegistry, TokenizerSection, TrainSection, Variant, CONFIG_VERSION,
};
pub use manifest::{
    blob_hash, file_hash, hash_outputs, list_files, verify, Mismatch, RunManifest, MANIFEST_FILE, TIMING_FILE,
};

use crate::error::Error;

/// Process exit status for an error: 2 config, 3 input, 4 numerical.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Numerical(_) | Error::Degenerate(_) => 4,
        Error::Io { .. }
        | Error::Format { .. }
        | Error::Dimension(_)
        | Error::InvalidArgument(_)
        | Error::IndexOutOfRange { .. } => 3,
    }
}

pub fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "config",
        Error::Numerical(_) => "numerical",
        Error::Degenerate(_) => "degenerate",
        Error::Io { .. } => "io",
        Error::Format { .. } => "format",
        Error::Dimension(_) => "dimension",
        Error::InvalidArgument(_) => "invalid_argument",
        Error::IndexOutOfRange { .. } => "index_out_of_range",
    }
}
