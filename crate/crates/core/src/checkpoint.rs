//! Model checkpoints and their binary file format.
//!
//! Layout (all integers little-endian, strings as `u32` length + UTF-8):
//!
//! ```text
//! "IPAT" | u32 version | fingerprint | vocab hash | u32 n, n × provenance
//! | metadata JSON | u32 tensor count | per tensor: name, u32 rank,
//! rank × u64 dims, f32 data
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::model::{ArchConfig, ModelParams};
use crate::phoneset::{VocabKind, Vocabulary};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"IPAT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("architecture fingerprint {found} does not match expected {expected}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Trained parameters together with everything needed to interpret them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T = f32> {
    pub params: ModelParams<T>,
    pub arch: ArchConfig,
    pub vocab: Vocabulary,
    /// Stages applied so far, oldest first, e.g. `pretrain_ipa:de+en`.
    pub provenance: Vec<String>,
    pub frontend_hash: String,
    pub seeds: BTreeMap<String, u64>,
    /// Epochs whose parameters were averaged into `params`.
    pub averaged_epochs: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    arch: ArchConfig,
    vocab_kind: String,
    vocab: Vec<String>,
    frontend_hash: String,
    seeds: BTreeMap<String, u64>,
    averaged_epochs: Vec<usize>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn fingerprint(&self) -> String {
        self.arch.fingerprint()
    }

    /// Head widths agree with the vocabulary and tensors match the architecture.
    pub fn validate(&self) -> Result<(), CheckpointError> {
        let n = self.vocab.len();
        if self.arch.vocab_size_out != n || self.arch.vocab_size_ctc != n {
            return Err(CheckpointError::Corrupt(format!(
                "vocabulary has {n} entries but heads are {}/{}",
                self.arch.vocab_size_out, self.arch.vocab_size_ctc
            )));
        }
        self.params.check_against(&self.arch).map_err(|e| CheckpointError::Corrupt(e.to_string()))
    }

    pub fn cast<U: Scalar>(&self) -> Checkpoint<U> {
        Checkpoint {
            params: self.params.cast(),
            arch: self.arch.clone(),
            vocab: self.vocab.clone(),
            provenance: self.provenance.clone(),
            frontend_hash: self.frontend_hash.clone(),
            seeds: self.seeds.clone(),
            averaged_epochs: self.averaged_epochs.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, &self.fingerprint());
        put_str(&mut out, &self.vocab.content_hash());
        out.extend_from_slice(&(self.provenance.len() as u32).to_le_bytes());
        for p in &self.provenance {
            put_str(&mut out, p);
        }
        let meta = Meta {
            arch: self.arch.clone(),
            vocab_kind: self.vocab.kind().as_str().to_string(),
            vocab: self.vocab.non_special().to_vec(),
            frontend_hash: self.frontend_hash.clone(),
            seeds: self.seeds.clone(),
            averaged_epochs: self.averaged_epochs.clone(),
        };
        put_str(&mut out, &serde_json::to_string(&meta).expect("metadata serializes"));
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&(x.to_f64c() as f32).to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint. With `expected` set, the stored fingerprint
    /// must match it.
    pub fn from_bytes(bytes: &[u8], expected: Option<&ArchConfig>) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let fingerprint = r.string()?;
        if let Some(arch) = expected {
            if arch.fingerprint() != fingerprint {
                return Err(CheckpointError::FingerprintMismatch { expected: arch.fingerprint(), found: fingerprint });
            }
        }
        let vocab_hash = r.string()?;
        let n_prov = r.u32()? as usize;
        let provenance = (0..n_prov).map(|_| r.string()).collect::<Result<Vec<_>, _>>()?;
        let meta: Meta = serde_json::from_str(&r.string()?).map_err(|e| CheckpointError::Corrupt(format!("metadata: {e}")))?;
        if meta.arch.fingerprint() != fingerprint {
            return Err(CheckpointError::Corrupt("header fingerprint disagrees with metadata".into()));
        }
        let kind = VocabKind::parse(&meta.vocab_kind).ok_or_else(|| CheckpointError::Corrupt(format!("vocab kind {:?}", meta.vocab_kind)))?;
        let vocab = Vocabulary::from_tokens(kind, meta.vocab);
        if vocab.content_hash() != vocab_hash {
            return Err(CheckpointError::Corrupt("vocabulary hash mismatch".into()));
        }
        let n = r.u32()? as usize;
        let mut params = ModelParams::new();
        for _ in 0..n {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let len: usize = shape.iter().product();
            let raw = r.take(len.checked_mul(4).ok_or_else(|| CheckpointError::Corrupt("tensor too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)).collect();
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            if params.insert(name.clone(), t).is_some() {
                return Err(CheckpointError::Corrupt(format!("duplicate tensor {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let ckpt = Checkpoint {
            params,
            arch: meta.arch,
            vocab,
            provenance,
            frontend_hash: meta.frontend_hash,
            seeds: meta.seeds,
            averaged_epochs: meta.averaged_epochs,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// Writes via a temporary file and rename so readers never see a
    /// partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("bin.tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path, expected: Option<&ArchConfig>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?, expected)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CheckpointError::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Corrupt("invalid UTF-8 string".into()))
    }
}
