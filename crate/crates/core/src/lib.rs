//! Language-universal phonetic transfer for low-resource speech recognition.
//!
//! A multilingual model is trained on IPA transcripts pooled across
//! languages, optionally adapted to one target language at a small learning
//! rate, and then finetuned on the target language's BPE-tokenized
//! orthography with the encoder kept and the decoder reinitialized.

pub mod autodiff;
pub mod bpe;
pub mod checkpoint;
pub mod eval;
pub mod frontend;
pub mod g2p;
pub mod model;
pub mod phoneset;
pub mod scalar;
pub mod seed;
pub mod text;
pub mod training;
pub mod transfer;
pub mod viz;

pub use autodiff::{Tape, Tensor, Var};
pub use scalar::Scalar;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
