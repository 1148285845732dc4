//! Conformer encoder, Transformer decoder and the two output heads.
//!
//! Parameters live in a [`ModelParams`] map keyed by stable dotted paths.
//! Forward passes run on a [`Session`], which binds parameters lazily onto
//! a fresh [`Tape`](crate::Tape) so the same code serves training (with
//! gradients) and inference.

mod config;
mod session;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tensor};
use crate::scalar::Scalar;
use crate::seed::derive_seed;

pub use config::{ArchConfig, ENCODER_POSITIONS};
pub use session::{ctc_head, decode_step, encode, DecoderCache, Session};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bad model config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("prefix length {len} exceeds max {max}")]
    PrefixTooLong { len: usize, max: usize },
    #[error("decoder prefix must start with <sos/eos>")]
    BadPrefix,
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("utterance has {frames} frames; subsampling leaves nothing")]
    TooShort { frames: usize },
    #[error("token id {id} outside vocabulary of {size}")]
    TokenOutOfRange { id: usize, size: usize },
}

/// How a tensor is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / (rows + cols))`.
    Glorot,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn push_linear(out: &mut Vec<ParamSpec>, name: &str, rows: usize, cols: usize) {
    out.push(ParamSpec { name: format!("{name}.weight"), shape: vec![rows, cols], init: Init::Glorot });
    out.push(ParamSpec { name: format!("{name}.bias"), shape: vec![cols], init: Init::Zeros });
}

fn push_norm(out: &mut Vec<ParamSpec>, name: &str, d: usize) {
    out.push(ParamSpec { name: format!("{name}.gain"), shape: vec![d], init: Init::Ones });
    out.push(ParamSpec { name: format!("{name}.bias"), shape: vec![d], init: Init::Zeros });
}

fn push_ffn(out: &mut Vec<ParamSpec>, name: &str, d: usize, ff: usize) {
    push_norm(out, &format!("{name}.norm"), d);
    push_linear(out, &format!("{name}.w1"), d, ff);
    push_linear(out, &format!("{name}.w2"), ff, d);
}

fn push_attention(out: &mut Vec<ParamSpec>, name: &str, d: usize) {
    push_norm(out, &format!("{name}.norm"), d);
    for proj in ["q", "k", "v", "o"] {
        push_linear(out, &format!("{name}.{proj}"), d, d);
    }
}

/// Every parameter of the architecture, in a fixed order.
pub fn param_specs(cfg: &ArchConfig) -> Vec<ParamSpec> {
    let (d, ff, k) = (cfg.d_model, cfg.d_ff, cfg.subsample_kernel);
    let mut out = Vec::new();
    for i in 0..cfg.subsample_cnn_layers {
        let cin = if i == 0 { cfg.feat_dim } else { d };
        push_linear(&mut out, &format!("encoder.subsample.conv{i}"), k * cin, d);
    }
    for b in 0..cfg.enc_layers {
        let p = format!("encoder.block{b}");
        push_ffn(&mut out, &format!("{p}.ffn1"), d, ff);
        push_attention(&mut out, &format!("{p}.mhsa"), d);
        out.push(ParamSpec { name: format!("{p}.mhsa.rel_bias"), shape: vec![cfg.heads, 2 * cfg.rel_pos_window + 1], init: Init::Zeros });
        push_norm(&mut out, &format!("{p}.conv.norm"), d);
        push_linear(&mut out, &format!("{p}.conv.pw1"), d, 2 * d);
        push_linear(&mut out, &format!("{p}.conv.dw"), cfg.conv_kernel, d);
        push_norm(&mut out, &format!("{p}.conv.dw_norm"), d);
        push_linear(&mut out, &format!("{p}.conv.pw2"), d, d);
        push_ffn(&mut out, &format!("{p}.ffn2"), d, ff);
        push_norm(&mut out, &format!("{p}.final_norm"), d);
    }
    out.push(ParamSpec { name: "decoder.embed.weight".into(), shape: vec![cfg.vocab_size_out, d], init: Init::Glorot });
    for b in 0..cfg.dec_layers {
        let p = format!("decoder.block{b}");
        push_attention(&mut out, &format!("{p}.self_attn"), d);
        push_attention(&mut out, &format!("{p}.src_attn"), d);
        push_ffn(&mut out, &format!("{p}.ffn"), d, ff);
    }
    push_norm(&mut out, "decoder.final_norm", d);
    push_linear(&mut out, "decoder.out", d, cfg.vocab_size_out);
    push_linear(&mut out, "ctc", d, cfg.vocab_size_ctc);
    out
}

/// Whether a parameter belongs to the transferable encoder.
pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("encoder.")
}

/// Named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Option<Tensor<T>> {
        self.tensors.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub(crate) fn get_key_value(&self, name: &str) -> Option<(&String, &Tensor<T>)> {
        self.tensors.get_key_value(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Checks that names and shapes match `cfg` exactly.
    pub fn check_against(&self, cfg: &ArchConfig) -> Result<(), ModelError> {
        let specs = param_specs(cfg);
        if specs.len() != self.len() {
            return Err(ModelError::BadConfig(format!("expected {} tensors, found {}", specs.len(), self.len())));
        }
        for s in specs {
            let t = self.get(&s.name).ok_or_else(|| ModelError::MissingParam(s.name.clone()))?;
            if t.shape() != s.shape.as_slice() {
                return Err(ModelError::BadConfig(format!("{} has shape {:?}, expected {:?}", s.name, t.shape(), s.shape)));
            }
        }
        Ok(())
    }
}

pub(crate) fn init_tensor<T: Scalar>(spec: &ParamSpec, seed: u64) -> Tensor<T> {
    match spec.init {
        Init::Zeros => Tensor::zeros(&spec.shape),
        Init::Ones => Tensor::full(&spec.shape, T::one()),
        Init::Glorot => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[&spec.name]));
            let limit = (6.0 / (spec.shape[0] + spec.shape[1]) as f64).sqrt();
            Tensor::from_fn(&spec.shape, |_| T::of(rng.gen_range(-limit..limit)))
        }
    }
}

/// Deterministic initialization; each tensor draws from its own stream
/// derived from `seed` and its name.
pub fn init_params<T: Scalar>(cfg: &ArchConfig, seed: u64) -> Result<ModelParams<T>, ModelError> {
    cfg.validate()?;
    let mut p = ModelParams::new();
    for spec in param_specs(cfg) {
        let t = init_tensor(&spec, seed);
        p.insert(spec.name, t);
    }
    Ok(p)
}

/// Re-draws every tensor selected by `filter` from `seed`.
pub fn reinit_where<T: Scalar>(params: &mut ModelParams<T>, cfg: &ArchConfig, seed: u64, filter: impl Fn(&str) -> bool) {
    for spec in param_specs(cfg) {
        if filter(&spec.name) {
            let t = init_tensor(&spec, seed);
            params.insert(spec.name, t);
        }
    }
}

#[cfg(test)]
mod tests;
