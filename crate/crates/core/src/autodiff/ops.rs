//! Forward definitions of the tape primitives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AutodiffError, Op, Tape, Tensor, Var};
use crate::scalar::Scalar;

fn mismatch<T>(msg: String) -> Result<T, AutodiffError> {
    Err(AutodiffError::ShapeMismatch(msg))
}

/// Which key positions a query may attend to.
#[derive(Debug, Clone, PartialEq)]
pub enum AttentionMask {
    None,
    /// Query `i` (at absolute position `i + q_offset`) sees keys `j <= i + q_offset`.
    Causal,
    /// Row-major `Tq×Tk`, `true` = visible.
    Explicit(Vec<bool>),
}

impl AttentionMask {
    fn visible(&self, i: usize, j: usize, q_offset: usize, tk: usize) -> bool {
        match self {
            AttentionMask::None => true,
            AttentionMask::Causal => j <= i + q_offset,
            AttentionMask::Explicit(m) => m[i * tk + j],
        }
    }
}

/// Clamped relative offset `j - i` mapped into `0..=2w`.
pub(crate) fn rel_index(i: usize, j: usize, window: usize) -> usize {
    let d = (j as isize - i as isize).clamp(-(window as isize), window as isize);
    (d + window as isize) as usize
}

/// Splits a shape into (outer, n, inner) around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    fn broadcast_kind(&self, a: Var, b: Var, what: &str) -> Result<bool, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(false);
        }
        let last = sa.last().copied().unwrap_or(1);
        if self.value(b).len() == last && !sa.is_empty() {
            return Ok(true);
        }
        mismatch(format!("{what}: {sa:?} vs {sb:?}"))
    }

    fn binary(&mut self, a: Var, b: Var, mul: bool) -> Result<Var, AutodiffError> {
        let bcast = self.broadcast_kind(a, b, if mul { "mul" } else { "add" })?;
        let va = self.value(a);
        let vb = self.value(b).data();
        let n = vb.len();
        let data: Vec<T> = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = if bcast { vb[i % n] } else { vb[i] };
                if mul {
                    x * y
                } else {
                    x + y
                }
            })
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        if mul {
            self.push(out, Op::Mul { a, b, bcast }, &[a, b], "mul")
        } else {
            self.push(out, Op::Add { a, b, bcast }, &[a, b], "add")
        }
    }

    /// Elementwise sum; `b` may be a row vector broadcast over the last axis.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(a, b, false)
    }

    /// Elementwise product with the same broadcasting as [`add`](Self::add).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(a, b, true)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var, AutodiffError> {
        let va = self.value(a);
        let out = Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| x * c).collect())?;
        self.push(out, Op::Scale { a, c }, &[a], "scale")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return mismatch(format!("matmul: {m}x{k} by {k2}x{n}"));
        }
        let mut c = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), k, 1, self.value(b).data(), n, 1, T::zero(), &mut c, n);
        self.push(Tensor::new(vec![m, n], c)?, Op::MatMul { a, b }, &[a, b], "matmul")
    }

    /// `x·w + b` with `w` shaped `in×out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, AutodiffError> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.value(a).dims2()?;
        let d = self.value(a).data();
        let data = (0..r * c).map(|i| d[(i % r) * c + i / r]).collect();
        self.push(Tensor::new(vec![c, r], data)?, Op::Transpose { a }, &[a], "transpose")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        if parts.is_empty() || axis > 1 {
            return mismatch("concat needs parts and axis 0 or 1".into());
        }
        let dims: Vec<(usize, usize)> = parts.iter().map(|&p| self.value(p).dims2()).collect::<Result<_, _>>()?;
        let (rows, cols) = if axis == 0 {
            let c = dims[0].1;
            if dims.iter().any(|d| d.1 != c) {
                return mismatch(format!("concat rows: {dims:?}"));
            }
            (dims.iter().map(|d| d.0).sum(), c)
        } else {
            let r = dims[0].0;
            if dims.iter().any(|d| d.0 != r) {
                return mismatch(format!("concat cols: {dims:?}"));
            }
            (r, dims.iter().map(|d| d.1).sum())
        };
        let mut data = Vec::with_capacity(rows * cols);
        if axis == 0 {
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
        } else {
            for r in 0..rows {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(r));
                }
            }
        }
        self.push(Tensor::new(vec![rows, cols], data)?, Op::Concat { parts: parts.to_vec(), axis }, parts, "concat")
    }

    /// Rows (`axis == 0`) or columns (`axis == 1`) `start..end`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let (r, c) = self.value(a).dims2()?;
        let bound = if axis == 0 { r } else { c };
        if axis > 1 || start > end || end > bound {
            return mismatch(format!("slice {start}..{end} on axis {axis} of {r}x{c}"));
        }
        let d = self.value(a).data();
        let (shape, data) = if axis == 0 {
            (vec![end - start, c], d[start * c..end * c].to_vec())
        } else {
            let w = end - start;
            let mut out = Vec::with_capacity(r * w);
            for i in 0..r {
                out.extend_from_slice(&d[i * c + start..i * c + end]);
            }
            (vec![r, w], out)
        };
        self.push(Tensor::new(shape, data)?, Op::Slice { a, axis, start }, &[a], "slice")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let out = self.value(a).clone().reshaped(shape)?;
        self.push(out, Op::Reshape { a }, &[a], "reshape")
    }

    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var, AutodiffError> {
        let (v, d) = self.value(table).dims2()?;
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(AutodiffError::IndexOutOfRange { index: id, bound: v });
            }
            data.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        self.push(Tensor::new(vec![ids.len(), d], data)?, Op::Embedding { table, ids: ids.to_vec() }, &[table], "embedding")
    }

    /// Strided 1-D convolution over time (zero padding `pad` on both ends).
    /// Weight rows are ordered `(tap, in_channel)`.
    pub fn conv1d(&mut self, x: Var, w: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var, AutodiffError> {
        let (t, cin) = self.value(x).dims2()?;
        let (wk, cout) = self.value(w).dims2()?;
        if wk != kernel * cin || stride == 0 || kernel == 0 {
            return mismatch(format!("conv1d: input {t}x{cin}, weight {wk}x{cout}, kernel {kernel}"));
        }
        if t + 2 * pad < kernel {
            return mismatch(format!("conv1d: {t} frames shorter than kernel {kernel}"));
        }
        let t_out = (t + 2 * pad - kernel) / stride + 1;
        let xd = self.value(x).data();
        let mut cols = vec![T::zero(); t_out * wk];
        for o in 0..t_out {
            for k in 0..kernel {
                let src = (o * stride + k) as isize - pad as isize;
                if src >= 0 && (src as usize) < t {
                    let s = src as usize;
                    cols[o * wk + k * cin..o * wk + (k + 1) * cin].copy_from_slice(&xd[s * cin..(s + 1) * cin]);
                }
            }
        }
        let mut y = vec![T::zero(); t_out * cout];
        T::gemm(t_out, wk, cout, &cols, wk, 1, self.value(w).data(), cout, 1, T::zero(), &mut y, cout);
        self.push(Tensor::new(vec![t_out, cout], y)?, Op::Conv1d { x, w, cols, kernel, stride, pad }, &[x, w], "conv1d")
    }

    /// Per-channel convolution with odd kernel `K` and same-length output.
    pub fn conv1d_depthwise(&mut self, x: Var, w: Var) -> Result<Var, AutodiffError> {
        let (t, c) = self.value(x).dims2()?;
        let (k, wc) = self.value(w).dims2()?;
        if wc != c || k % 2 == 0 {
            return mismatch(format!("depthwise conv: input {t}x{c}, weight {k}x{wc}"));
        }
        let pad = (k - 1) / 2;
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let mut y = vec![T::zero(); t * c];
        for ti in 0..t {
            for kk in 0..k {
                let src = ti as isize + kk as isize - pad as isize;
                if src < 0 || src as usize >= t {
                    continue;
                }
                let s = src as usize;
                let (yr, xr, wr) = (&mut y[ti * c..(ti + 1) * c], &xd[s * c..(s + 1) * c], &wd[kk * c..(kk + 1) * c]);
                for ch in 0..c {
                    yr[ch] += wr[ch] * xr[ch];
                }
            }
        }
        self.push(Tensor::new(vec![t, c], y)?, Op::DepthwiseConv { x, w }, &[x, w], "conv1d_depthwise")
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>, name: &'static str) -> Result<Var, AutodiffError> {
        let va = self.value(a);
        let out = Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect())?;
        self.push(out, op, &[a], name)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary(a, |x| x.max(T::zero()), Op::Relu { a }, "relu")
    }

    /// `x·σ(x)`.
    pub fn swish(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary(a, |x| x * sigmoid(x), Op::Swish { a }, "swish")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary(a, sigmoid, Op::Sigmoid { a }, "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary(a, |x| x.tanh(), Op::Tanh { a }, "tanh")
    }

    fn softmax_impl(&mut self, a: Var, axis: usize, log: bool) -> Result<Var, AutodiffError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return mismatch(format!("softmax axis {axis} on {shape:?}"));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let x = self.value(a).data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let m = (0..n).map(|j| x[idx(j)]).fold(T::neg_infinity(), T::max);
                let z: T = (0..n).map(|j| (x[idx(j)] - m).exp()).sum();
                let lz = z.ln();
                for j in 0..n {
                    y[idx(j)] = if log { x[idx(j)] - m - lz } else { (x[idx(j)] - m).exp() / z };
                }
            }
        }
        let out = Tensor::new(shape, y)?;
        if log {
            self.push(out, Op::LogSoftmax { a, axis }, &[a], "log_softmax")
        } else {
            self.push(out, Op::Softmax { a, axis }, &[a], "softmax")
        }
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        self.softmax_impl(a, axis, false)
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        self.softmax_impl(a, axis, true)
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var, AutodiffError> {
        let (r, d) = self.value(x).dims2()?;
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return mismatch(format!("layer_norm: width {d} vs gain {:?}", self.shape(gain)));
        }
        let (xd, g, b) = (self.value(x).data(), self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![T::zero(); r * d];
        let mut rstd = vec![T::zero(); r];
        let mut y = vec![T::zero(); r * d];
        let nd = T::of(d as f64);
        for i in 0..r {
            let row = &xd[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<T>() / nd;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nd;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[i * d + j] = h;
                y[i * d + j] = h * g[j] + b[j];
            }
        }
        self.push(Tensor::new(vec![r, d], y)?, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias], "layer_norm")
    }

    /// Inverted dropout with a mask drawn from `seed`. `p == 0` is the identity.
    pub fn dropout(&mut self, a: Var, p: f64, seed: u64) -> Result<Var, AutodiffError> {
        if p <= 0.0 {
            return Ok(a);
        }
        if p >= 1.0 {
            return mismatch(format!("dropout probability {p} must be < 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = T::of(1.0 / (1.0 - p));
        let n = self.value(a).len();
        let mask: Vec<T> = (0..n).map(|_| if rng.gen::<f64>() >= p { keep } else { T::zero() }).collect();
        let va = self.value(a);
        let out = Tensor::new(va.shape().to_vec(), va.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect())?;
        self.push(out, Op::Dropout { a, mask }, &[a], "dropout")
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `Tq×D`, `k` and `v` are `Tk×D`; heads split `D` evenly.
    /// `rel_bias` adds a learned per-head bias indexed by the clamped offset
    /// `j - (i + q_offset)` within `±window`. Fully masked query rows
    /// produce zeros.
    pub fn scaled_dot_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: &AttentionMask,
        rel_bias: Option<(Var, usize)>,
        q_offset: usize,
    ) -> Result<Var, AutodiffError> {
        let (tq, d) = self.value(q).dims2()?;
        let (tk, dk_) = self.value(k).dims2()?;
        let (tv, dv_) = self.value(v).dims2()?;
        if heads == 0 || d % heads != 0 || dk_ != d || dv_ != d || tv != tk {
            return mismatch(format!("attention: q {tq}x{d}, k {tk}x{dk_}, v {tv}x{dv_}, heads {heads}"));
        }
        if let AttentionMask::Explicit(m) = mask {
            if m.len() != tq * tk {
                return mismatch(format!("attention mask has {} entries for {tq}x{tk}", m.len()));
            }
        }
        if let Some((b, w)) = rel_bias {
            if self.shape(b) != [heads, 2 * w + 1] {
                return mismatch(format!("relative bias {:?} for {heads} heads, window {w}", self.shape(b)));
            }
        }
        let hd = d / heads;
        let scale = T::one() / T::of(hd as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let bias = rel_bias.map(|(b, w)| (self.value(b).data(), w));
        let mut probs = vec![T::zero(); heads * tq * tk];
        let mut out = vec![T::zero(); tq * d];
        for h in 0..heads {
            let p = &mut probs[h * tq * tk..(h + 1) * tq * tk];
            T::gemm(tq, hd, tk, &qd[h * hd..], d, 1, &kd[h * hd..], 1, d, T::zero(), p, tk);
            for i in 0..tq {
                let row = &mut p[i * tk..(i + 1) * tk];
                let mut m = T::neg_infinity();
                for (j, s) in row.iter_mut().enumerate() {
                    if mask.visible(i, j, q_offset, tk) {
                        *s *= scale;
                        if let Some((bd, w)) = bias {
                            *s += bd[h * (2 * w + 1) + rel_index(i + q_offset, j, w)];
                        }
                        m = m.max(*s);
                    } else {
                        *s = T::neg_infinity();
                    }
                }
                if m == T::neg_infinity() {
                    row.iter_mut().for_each(|s| *s = T::zero());
                    continue;
                }
                let mut z = T::zero();
                for s in row.iter_mut() {
                    *s = (*s - m).exp();
                    z += *s;
                }
                row.iter_mut().for_each(|s| *s /= z);
            }
            T::gemm(tq, tk, hd, p, tk, 1, &vd[h * hd..], d, 1, T::zero(), &mut out[h * hd..], d);
        }
        self.push(
            Tensor::new(vec![tq, d], out)?,
            Op::Attention { q, k, v, heads, probs, rel: rel_bias, q_offset },
            &[q, k, v].into_iter().chain(rel_bias.map(|r| r.0)).collect::<Vec<_>>(),
            "attention",
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { a }, &[a], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let n = self.value(a).len().max(1);
        let s = self.sum(a)?;
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Scalar node whose value and local gradient w.r.t. `a` were computed
    /// outside the tape (used for the CTC loss).
    pub fn custom_scalar(&mut self, a: Var, value: T, grad: Vec<T>) -> Result<Var, AutodiffError> {
        if grad.len() != self.value(a).len() {
            return mismatch(format!("custom gradient has {} entries for {:?}", grad.len(), self.shape(a)));
        }
        self.push(Tensor::scalar(value), Op::Custom { a, grad }, &[a], "custom")
    }
}
