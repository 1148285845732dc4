use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ModelError;

/// Positional scheme used by encoder self-attention; part of the fingerprint.
pub const ENCODER_POSITIONS: &str = "relative-bias";

/// Encoder/decoder dimensions. [`ArchConfig::paper`] mirrors the full-size
/// recipe; [`ArchConfig::desk`] is the small profile used for tests and
/// synthetic experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub feat_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub conv_kernel: usize,
    pub subsample_cnn_layers: usize,
    pub subsample_stride: usize,
    pub subsample_kernel: usize,
    /// Relative offsets beyond ±window share one bias.
    pub rel_pos_window: usize,
    pub max_dec_len: usize,
    pub dropout_p: f64,
    pub vocab_size_out: usize,
    pub vocab_size_ctc: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ArchConfig {
    pub fn paper() -> Self {
        Self {
            feat_dim: 80,
            enc_layers: 18,
            dec_layers: 2,
            heads: 4,
            d_model: 768,
            d_ff: 2048,
            conv_kernel: 31,
            subsample_cnn_layers: 2,
            subsample_stride: 2,
            subsample_kernel: 3,
            rel_pos_window: 64,
            max_dec_len: 512,
            dropout_p: 0.1,
            vocab_size_out: 0,
            vocab_size_ctc: 0,
        }
    }

    pub fn desk() -> Self {
        Self {
            enc_layers: 2,
            d_model: 64,
            d_ff: 128,
            heads: 2,
            conv_kernel: 7,
            rel_pos_window: 16,
            max_dec_len: 256,
            dropout_p: 0.0,
            ..Self::paper()
        }
    }

    pub fn with_vocab(mut self, size: usize) -> Self {
        self.vocab_size_out = size;
        self.vocab_size_ctc = size;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::BadConfig(m));
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.conv_kernel % 2 == 0 {
            return bad(format!("conv_kernel {} must be odd", self.conv_kernel));
        }
        if self.subsample_kernel == 0 || self.subsample_stride == 0 {
            return bad("subsampling kernel and stride must be positive".into());
        }
        if self.feat_dim == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.vocab_size_out < 4 || self.vocab_size_ctc < 4 {
            return bad("vocabularies must at least hold the 4 special tokens".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout_p));
        }
        if self.max_dec_len == 0 {
            return bad("max_dec_len must be positive".into());
        }
        Ok(())
    }

    pub fn subsample_pad(&self) -> usize {
        self.subsample_kernel / 2
    }

    /// Encoder output length for `frames` input frames.
    pub fn subsampled_len(&self, frames: usize) -> usize {
        let (k, s, p) = (self.subsample_kernel, self.subsample_stride, self.subsample_pad());
        (0..self.subsample_cnn_layers).fold(frames, |t, _| if t + 2 * p < k { 0 } else { (t + 2 * p - k) / s + 1 })
    }

    /// Stable hash of every architecture field plus the positional scheme.
    pub fn fingerprint(&self) -> String {
        let canon = format!(
            "feat={};enc={};dec={};heads={};d={};ff={};conv={};sub={}x{}k{};relw={};maxdec={};vout={};vctc={};pos={}",
            self.feat_dim,
            self.enc_layers,
            self.dec_layers,
            self.heads,
            self.d_model,
            self.d_ff,
            self.conv_kernel,
            self.subsample_cnn_layers,
            self.subsample_stride,
            self.subsample_kernel,
            self.rel_pos_window,
            self.max_dec_len,
            self.vocab_size_out,
            self.vocab_size_ctc,
            ENCODER_POSITIONS,
        );
        Sha256::digest(canon.as_bytes()).iter().take(12).map(|b| format!("{b:02x}")).collect()
    }
}
