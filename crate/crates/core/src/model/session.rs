use std::collections::BTreeMap;

use super::{ArchConfig, ModelError, ModelParams};
use crate::autodiff::{AttentionMask, Tape, Tensor, Var};
use crate::phoneset::SOS_EOS;
use crate::scalar::Scalar;
use crate::seed::mix;

const NORM_EPS: f64 = 1e-5;

/// One forward pass: a tape plus the parameters bound onto it so far.
///
/// With `trainable` set, parameters become gradient-carrying leaves and
/// [`Session::gradients`] collects their gradients after `backward`.
pub struct Session<'a, T: Scalar> {
    pub tape: Tape<T>,
    params: &'a ModelParams<T>,
    cfg: &'a ArchConfig,
    bound: BTreeMap<&'a str, Var>,
    trainable: bool,
    dropout_seed: Option<u64>,
    dropout_calls: u64,
}

/// Per-layer key/value state for incremental decoding.
///
/// The handles refer to the session tape that produced them, so a cache
/// must only be used with that session. Cloning is cheap and lets beam
/// hypotheses branch.
#[derive(Debug, Clone)]
pub struct DecoderCache {
    self_kv: Vec<Option<(Var, Var)>>,
    src_kv: Vec<(Var, Var)>,
    fed: Vec<usize>,
}

impl DecoderCache {
    /// Tokens already consumed.
    pub fn len(&self) -> usize {
        self.fed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fed.is_empty()
    }

    pub fn tokens(&self) -> &[usize] {
        &self.fed
    }
}

fn sinusoid<T: Scalar>(positions: std::ops::Range<usize>, d: usize) -> Tensor<T> {
    let n = positions.len();
    let start = positions.start;
    Tensor::from_fn(&[n, d], |idx| {
        let (pos, i) = ((start + idx / d) as f64, idx % d);
        let angle = pos / 10000f64.powf((i - i % 2) as f64 / d as f64);
        T::of(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

impl<'a, T: Scalar> Session<'a, T> {
    /// Inference session: parameters are constants and dropout is off.
    pub fn inference(params: &'a ModelParams<T>, cfg: &'a ArchConfig) -> Self {
        Self { tape: Tape::new(), params, cfg, bound: BTreeMap::new(), trainable: false, dropout_seed: None, dropout_calls: 0 }
    }

    /// Training session; `dropout_seed` makes dropout masks reproducible.
    pub fn training(params: &'a ModelParams<T>, cfg: &'a ArchConfig, dropout_seed: Option<u64>) -> Self {
        Self { trainable: true, dropout_seed, ..Self::inference(params, cfg) }
    }

    pub fn config(&self) -> &ArchConfig {
        self.cfg
    }

    pub fn p(&mut self, name: &str) -> Result<Var, ModelError> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let (key, t) = self.params.get_key_value(name).ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
        let v = self.tape.leaf(t.clone(), self.trainable);
        self.bound.insert(key.as_str(), v);
        Ok(v)
    }

    /// Drains gradients of every bound parameter after `backward`.
    pub fn gradients(&mut self) -> BTreeMap<String, Vec<T>> {
        let mut out = BTreeMap::new();
        for (&name, &v) in &self.bound {
            if let Some(g) = self.tape.take_grad(v) {
                out.insert(name.to_string(), g);
            }
        }
        out
    }

    fn dropout(&mut self, x: Var) -> Result<Var, ModelError> {
        match self.dropout_seed {
            Some(seed) if self.cfg.dropout_p > 0.0 => {
                self.dropout_calls += 1;
                Ok(self.tape.dropout(x, self.cfg.dropout_p, mix(seed, self.dropout_calls))?)
            }
            _ => Ok(x),
        }
    }

    fn linear(&mut self, x: Var, name: &str) -> Result<Var, ModelError> {
        let w = self.p(&format!("{name}.weight"))?;
        let b = self.p(&format!("{name}.bias"))?;
        Ok(self.tape.linear(x, w, Some(b))?)
    }

    fn norm(&mut self, x: Var, name: &str) -> Result<Var, ModelError> {
        let g = self.p(&format!("{name}.gain"))?;
        let b = self.p(&format!("{name}.bias"))?;
        Ok(self.tape.layer_norm(x, g, b, T::of(NORM_EPS))?)
    }

    /// Pre-norm position-wise feed-forward; swish in the encoder, ReLU in the decoder.
    fn ffn(&mut self, x: Var, name: &str, swish: bool) -> Result<Var, ModelError> {
        let h = self.norm(x, &format!("{name}.norm"))?;
        let h = self.linear(h, &format!("{name}.w1"))?;
        let h = if swish { self.tape.swish(h)? } else { self.tape.relu(h)? };
        let h = self.dropout(h)?;
        let h = self.linear(h, &format!("{name}.w2"))?;
        self.dropout(h)
    }

    fn residual(&mut self, x: Var, h: Var, weight: f64) -> Result<Var, ModelError> {
        let h = if weight == 1.0 { h } else { self.tape.scale(h, T::of(weight))? };
        Ok(self.tape.add(x, h)?)
    }

    fn conv_module(&mut self, x: Var, name: &str) -> Result<Var, ModelError> {
        let d = self.cfg.d_model;
        let h = self.norm(x, &format!("{name}.norm"))?;
        let h = self.linear(h, &format!("{name}.pw1"))?;
        let a = self.tape.slice(h, 1, 0, d)?;
        let g = self.tape.slice(h, 1, d, 2 * d)?;
        let g = self.tape.sigmoid(g)?;
        let h = self.tape.mul(a, g)?;
        let w = self.p(&format!("{name}.dw.weight"))?;
        let b = self.p(&format!("{name}.dw.bias"))?;
        let h = self.tape.conv1d_depthwise(h, w)?;
        let h = self.tape.add(h, b)?;
        let h = self.norm(h, &format!("{name}.dw_norm"))?;
        let h = self.tape.swish(h)?;
        let h = self.linear(h, &format!("{name}.pw2"))?;
        self.dropout(h)
    }

    fn self_attention(&mut self, x: Var, name: &str) -> Result<Var, ModelError> {
        let h = self.norm(x, &format!("{name}.norm"))?;
        let q = self.linear(h, &format!("{name}.q"))?;
        let k = self.linear(h, &format!("{name}.k"))?;
        let v = self.linear(h, &format!("{name}.v"))?;
        let bias = self.p(&format!("{name}.rel_bias"))?;
        let o = self.tape.scaled_dot_attention(q, k, v, self.cfg.heads, &AttentionMask::None, Some((bias, self.cfg.rel_pos_window)), 0)?;
        let o = self.linear(o, &format!("{name}.o"))?;
        self.dropout(o)
    }

    /// Encodes the first `len` frames of a `T×feat_dim` matrix into
    /// `T'×d_model`. Frames beyond `len` are never read, so padding cannot
    /// influence the result.
    pub fn encode(&mut self, feats: &Tensor<T>, len: usize) -> Result<Var, ModelError> {
        let (frames, dim) = feats.dims2()?;
        if dim != self.cfg.feat_dim || len > frames {
            return Err(ModelError::Autodiff(crate::autodiff::AutodiffError::ShapeMismatch(format!(
                "features {frames}x{dim}, length {len}, model expects dim {}",
                self.cfg.feat_dim
            ))));
        }
        if self.cfg.subsampled_len(len) == 0 {
            return Err(ModelError::TooShort { frames: len });
        }
        let x = Tensor::new(vec![len, dim], feats.data()[..len * dim].to_vec())?;
        let mut x = self.tape.constant(x);
        for i in 0..self.cfg.subsample_cnn_layers {
            let w = self.p(&format!("encoder.subsample.conv{i}.weight"))?;
            let b = self.p(&format!("encoder.subsample.conv{i}.bias"))?;
            let h = self.tape.conv1d(x, w, self.cfg.subsample_kernel, self.cfg.subsample_stride, self.cfg.subsample_pad())?;
            let h = self.tape.add(h, b)?;
            x = self.tape.relu(h)?;
        }
        for blk in 0..self.cfg.enc_layers {
            let p = format!("encoder.block{blk}");
            let h = self.ffn(x, &format!("{p}.ffn1"), true)?;
            x = self.residual(x, h, 0.5)?;
            let h = self.self_attention(x, &format!("{p}.mhsa"))?;
            x = self.residual(x, h, 1.0)?;
            let h = self.conv_module(x, &format!("{p}.conv"))?;
            x = self.residual(x, h, 1.0)?;
            let h = self.ffn(x, &format!("{p}.ffn2"), true)?;
            x = self.residual(x, h, 0.5)?;
            x = self.norm(x, &format!("{p}.final_norm"))?;
        }
        Ok(x)
    }

    /// `T'×vocab_size_ctc` log-probabilities.
    pub fn ctc_head(&mut self, enc: Var) -> Result<Var, ModelError> {
        let z = self.linear(enc, "ctc")?;
        Ok(self.tape.log_softmax(z, 1)?)
    }

    fn embed(&mut self, ids: &[usize], start: usize) -> Result<Var, ModelError> {
        let v = self.cfg.vocab_size_out;
        if let Some(&id) = ids.iter().find(|&&id| id >= v) {
            return Err(ModelError::TokenOutOfRange { id, size: v });
        }
        let table = self.p("decoder.embed.weight")?;
        let e = self.tape.embedding_lookup(table, ids)?;
        let e = self.tape.scale(e, T::of((self.cfg.d_model as f64).sqrt()))?;
        let pe = self.tape.constant(sinusoid(start..start + ids.len(), self.cfg.d_model));
        let x = self.tape.add(e, pe)?;
        self.dropout(x)
    }

    fn project_kv(&mut self, x: Var, name: &str) -> Result<(Var, Var), ModelError> {
        Ok((self.linear(x, &format!("{name}.k"))?, self.linear(x, &format!("{name}.v"))?))
    }

    fn check_prefix(&self, prefix: &[usize]) -> Result<(), ModelError> {
        if prefix.len() > self.cfg.max_dec_len {
            return Err(ModelError::PrefixTooLong { len: prefix.len(), max: self.cfg.max_dec_len });
        }
        if prefix.first() != Some(&SOS_EOS) {
            return Err(ModelError::BadPrefix);
        }
        Ok(())
    }

    /// Teacher-forced decoder over a whole prefix: `L×vocab_size_out` logits,
    /// row `i` predicting the token after `prefix[i]`.
    pub fn decoder_forward(&mut self, enc: Var, prefix: &[usize]) -> Result<Var, ModelError> {
        self.check_prefix(prefix)?;
        let heads = self.cfg.heads;
        let mut x = self.embed(prefix, 0)?;
        for blk in 0..self.cfg.dec_layers {
            let p = format!("decoder.block{blk}");
            let h = self.norm(x, &format!("{p}.self_attn.norm"))?;
            let q = self.linear(h, &format!("{p}.self_attn.q"))?;
            let (k, v) = self.project_kv(h, &format!("{p}.self_attn"))?;
            let o = self.tape.scaled_dot_attention(q, k, v, heads, &AttentionMask::Causal, None, 0)?;
            let o = self.linear(o, &format!("{p}.self_attn.o"))?;
            let o = self.dropout(o)?;
            x = self.residual(x, o, 1.0)?;

            let h = self.norm(x, &format!("{p}.src_attn.norm"))?;
            let q = self.linear(h, &format!("{p}.src_attn.q"))?;
            let (k, v) = self.project_kv(enc, &format!("{p}.src_attn"))?;
            let o = self.tape.scaled_dot_attention(q, k, v, heads, &AttentionMask::None, None, 0)?;
            let o = self.linear(o, &format!("{p}.src_attn.o"))?;
            let o = self.dropout(o)?;
            x = self.residual(x, o, 1.0)?;

            let h = self.ffn(x, &format!("{p}.ffn"), false)?;
            x = self.residual(x, h, 1.0)?;
        }
        let x = self.norm(x, "decoder.final_norm")?;
        self.linear(x, "decoder.out")
    }

    /// Empty cache bound to `enc`; source keys and values are projected once.
    pub fn new_cache(&mut self, enc: Var) -> Result<DecoderCache, ModelError> {
        let mut src_kv = Vec::with_capacity(self.cfg.dec_layers);
        for blk in 0..self.cfg.dec_layers {
            src_kv.push(self.project_kv(enc, &format!("decoder.block{blk}.src_attn"))?);
        }
        Ok(DecoderCache { self_kv: vec![None; self.cfg.dec_layers], src_kv, fed: Vec::new() })
    }

    /// Logits for the token following `prefix`, feeding only the tokens the
    /// cache has not yet seen. `prefix` must extend the cached tokens.
    pub fn decode_step(&mut self, prefix: &[usize], cache: &mut DecoderCache) -> Result<Vec<T>, ModelError> {
        self.check_prefix(prefix)?;
        if prefix.len() <= cache.fed.len() || prefix[..cache.fed.len()] != cache.fed[..] {
            return Err(ModelError::BadPrefix);
        }
        let heads = self.cfg.heads;
        let mut last = None;
        for pos in cache.fed.len()..prefix.len() {
            let mut x = self.embed(&prefix[pos..=pos], pos)?;
            for blk in 0..self.cfg.dec_layers {
                let p = format!("decoder.block{blk}");
                let h = self.norm(x, &format!("{p}.self_attn.norm"))?;
                let q = self.linear(h, &format!("{p}.self_attn.q"))?;
                let (k, v) = self.project_kv(h, &format!("{p}.self_attn"))?;
                let (k, v) = match cache.self_kv[blk] {
                    Some((ck, cv)) => (self.tape.concat(&[ck, k], 0)?, self.tape.concat(&[cv, v], 0)?),
                    None => (k, v),
                };
                cache.self_kv[blk] = Some((k, v));
                let o = self.tape.scaled_dot_attention(q, k, v, heads, &AttentionMask::None, None, pos)?;
                let o = self.linear(o, &format!("{p}.self_attn.o"))?;
                x = self.residual(x, o, 1.0)?;

                let h = self.norm(x, &format!("{p}.src_attn.norm"))?;
                let q = self.linear(h, &format!("{p}.src_attn.q"))?;
                let (sk, sv) = cache.src_kv[blk];
                let o = self.tape.scaled_dot_attention(q, sk, sv, heads, &AttentionMask::None, None, 0)?;
                let o = self.linear(o, &format!("{p}.src_attn.o"))?;
                x = self.residual(x, o, 1.0)?;

                let h = self.ffn(x, &format!("{p}.ffn"), false)?;
                x = self.residual(x, h, 1.0)?;
            }
            cache.fed.push(prefix[pos]);
            last = Some(x);
        }
        let x = self.norm(last.expect("at least one token fed"), "decoder.final_norm")?;
        let logits = self.linear(x, "decoder.out")?;
        Ok(self.tape.value(logits).data().to_vec())
    }
}

/// Encodes each utterance independently: `features[i]` may be padded past
/// `lengths[i]`. Returns `T'_i×d_model` outputs.
pub fn encode<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ArchConfig,
    features: &[Tensor<T>],
    lengths: &[usize],
) -> Result<Vec<Tensor<T>>, ModelError> {
    if features.len() != lengths.len() {
        return Err(ModelError::BadConfig(format!("{} feature matrices for {} lengths", features.len(), lengths.len())));
    }
    features
        .iter()
        .zip(lengths)
        .map(|(f, &n)| {
            let mut s = Session::inference(params, cfg);
            let e = s.encode(f, n)?;
            Ok(s.tape.value(e).clone())
        })
        .collect()
}

/// Log-probabilities of the CTC head over an encoder output.
pub fn ctc_head<T: Scalar>(params: &ModelParams<T>, cfg: &ArchConfig, enc_out: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
    let mut s = Session::inference(params, cfg);
    let e = s.tape.constant(enc_out.clone());
    let lp = s.ctc_head(e)?;
    Ok(s.tape.value(lp).clone())
}

/// Next-token logits after `prefix`, recomputed from scratch.
pub fn decode_step<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ArchConfig,
    enc_out: &Tensor<T>,
    prefix: &[usize],
) -> Result<Vec<T>, ModelError> {
    let mut s = Session::inference(params, cfg);
    let e = s.tape.constant(enc_out.clone());
    let logits = s.decoder_forward(e, prefix)?;
    let (l, v) = s.tape.value(logits).dims2()?;
    Ok(s.tape.value(logits).data()[(l - 1) * v..].to_vec())
}
