//! Acoustic features, dataset manifests and the synthetic corpus generator.

pub mod features;
pub mod manifest;
pub mod synth;

use thiserror::Error;

pub use features::{compute_logmel, FeatureMatrix, LogMel, LogMelConfig};
pub use manifest::{load_manifest, save_manifest, subset_hours, AudioSource, Utterance};

#[derive(Debug, Error)]
pub enum FrontendError {
    #[error("input has {samples} samples, shorter than the {window}-sample window")]
    TooShort { samples: usize, window: usize },
    #[error("bad frontend config: {0}")]
    BadConfig(String),
    #[error("manifest line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("duplicate utterance id {0:?}")]
    DuplicateId(String),
    #[error("utterance {0:?} has no readable audio or features")]
    MissingAudio(String),
    #[error("requested {requested_s:.1} s but only {available_s:.1} s available")]
    InsufficientData { available_s: f64, requested_s: f64 },
    #[error("bad feature file: {0}")]
    BadFeatureFile(String),
    #[error("audio: {0}")]
    Audio(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
