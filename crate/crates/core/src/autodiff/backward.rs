//! Reverse sweep over the tape.

use super::ops::{axis_split, rel_index, sigmoid};
use super::{AutodiffError, Op, Tape, Var};
use crate::scalar::Scalar;

struct Grads<T> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    fn slot(&mut self, v: Var, len: usize) -> &mut Vec<T> {
        self.slots[v.0].get_or_insert_with(|| vec![T::zero(); len])
    }

    fn add(&mut self, v: Var, g: &[T]) {
        let s = self.slot(v, g.len());
        for (a, b) in s.iter_mut().zip(g) {
            *a += *b;
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Propagates d(loss)/d(node) to every `requires_grad` leaf and adds the
    /// result to the leaf's stored gradient.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut g = Grads { slots: vec![None; loss.0 + 1] };
        g.slots[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(gout) = g.slots[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let rg = |v: Var| self.nodes[v.0].requires_grad;
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    if self.grads.len() < self.nodes.len() {
                        self.grads.resize(self.nodes.len(), None);
                    }
                    let acc = self.grads[idx].get_or_insert_with(|| vec![T::zero(); gout.len()]);
                    for (a, b) in acc.iter_mut().zip(&gout) {
                        *a += *b;
                    }
                }
                Op::Add { a, b, bcast } => {
                    if rg(*a) {
                        g.add(*a, &gout);
                    }
                    if rg(*b) {
                        if *bcast {
                            let n = val(*b).len();
                            let s = g.slot(*b, n);
                            for (i, &x) in gout.iter().enumerate() {
                                s[i % n] += x;
                            }
                        } else {
                            g.add(*b, &gout);
                        }
                    }
                }
                Op::Mul { a, b, bcast } => {
                    let (va, vb) = (val(*a).data(), val(*b).data());
                    let n = vb.len();
                    if rg(*a) {
                        let ga: Vec<T> = gout.iter().enumerate().map(|(i, &x)| x * vb[if *bcast { i % n } else { i }]).collect();
                        g.add(*a, &ga);
                    }
                    if rg(*b) {
                        let s = g.slot(*b, n);
                        for (i, &x) in gout.iter().enumerate() {
                            s[if *bcast { i % n } else { i }] += x * va[i];
                        }
                    }
                }
                Op::Scale { a, c } => {
                    let ga: Vec<T> = gout.iter().map(|&x| x * *c).collect();
                    g.add(*a, &ga);
                }
                Op::MatMul { a, b } => {
                    let (m, k) = val(*a).dims2()?;
                    let n = val(*b).shape()[1];
                    if rg(*a) {
                        // dA = dC·Bᵀ
                        let s = g.slot(*a, m * k);
                        T::gemm(m, n, k, &gout, n, 1, val(*b).data(), 1, n, T::one(), s, k);
                    }
                    if rg(*b) {
                        // dB = Aᵀ·dC
                        let s = g.slot(*b, k * n);
                        T::gemm(k, m, n, val(*a).data(), 1, k, &gout, n, 1, T::one(), s, n);
                    }
                }
                Op::Transpose { a } => {
                    let (r, c) = val(*a).dims2()?;
                    // gout is c×r
                    let ga: Vec<T> = (0..r * c).map(|i| gout[(i % c) * r + i / c]).collect();
                    g.add(*a, &ga);
                }
                Op::Concat { parts, axis } => {
                    let cols = node.value.shape()[1];
                    let mut offset = 0;
                    for &p in parts {
                        let (pr, pc) = val(p).dims2()?;
                        if rg(p) {
                            let gp: Vec<T> = if *axis == 0 {
                                gout[offset * cols..(offset + pr) * cols].to_vec()
                            } else {
                                (0..pr).flat_map(|r| gout[r * cols + offset..r * cols + offset + pc].iter().copied()).collect()
                            };
                            g.add(p, &gp);
                        }
                        offset += if *axis == 0 { pr } else { pc };
                    }
                }
                Op::Slice { a, axis, start } => {
                    let (r, c) = val(*a).dims2()?;
                    let (or, oc) = node.value.dims2()?;
                    let s = g.slot(*a, r * c);
                    if *axis == 0 {
                        for (d, x) in s[start * c..(start + or) * c].iter_mut().zip(&gout) {
                            *d += *x;
                        }
                    } else {
                        for i in 0..r {
                            for j in 0..oc {
                                s[i * c + start + j] += gout[i * oc + j];
                            }
                        }
                    }
                }
                Op::Reshape { a } => g.add(*a, &gout),
                Op::Embedding { table, ids } => {
                    let (v, d) = val(*table).dims2()?;
                    let s = g.slot(*table, v * d);
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            s[id * d + j] += gout[row * d + j];
                        }
                    }
                }
                Op::Conv1d { x, w, cols, kernel, stride, pad } => {
                    let (t, cin) = val(*x).dims2()?;
                    let (wk, cout) = val(*w).dims2()?;
                    let t_out = node.value.shape()[0];
                    if rg(*w) {
                        let s = g.slot(*w, wk * cout);
                        T::gemm(wk, t_out, cout, cols, 1, wk, &gout, cout, 1, T::one(), s, cout);
                    }
                    if rg(*x) {
                        let mut dcols = vec![T::zero(); t_out * wk];
                        T::gemm(t_out, cout, wk, &gout, cout, 1, val(*w).data(), 1, cout, T::zero(), &mut dcols, wk);
                        let s = g.slot(*x, t * cin);
                        for o in 0..t_out {
                            for k in 0..*kernel {
                                let src = (o * stride + k) as isize - *pad as isize;
                                if src >= 0 && (src as usize) < t {
                                    let sidx = src as usize;
                                    for c in 0..cin {
                                        s[sidx * cin + c] += dcols[o * wk + k * cin + c];
                                    }
                                }
                            }
                        }
                    }
                }
                Op::DepthwiseConv { x, w } => {
                    let (t, c) = val(*x).dims2()?;
                    let k = val(*w).shape()[0];
                    let pad = (k - 1) / 2;
                    let (xd, wd) = (val(*x).data(), val(*w).data());
                    let mut gx = vec![T::zero(); t * c];
                    let mut gw = vec![T::zero(); k * c];
                    for ti in 0..t {
                        for kk in 0..k {
                            let src = ti as isize + kk as isize - pad as isize;
                            if src < 0 || src as usize >= t {
                                continue;
                            }
                            let sidx = src as usize;
                            for ch in 0..c {
                                let go = gout[ti * c + ch];
                                gx[sidx * c + ch] += wd[kk * c + ch] * go;
                                gw[kk * c + ch] += xd[sidx * c + ch] * go;
                            }
                        }
                    }
                    if rg(*x) {
                        g.add(*x, &gx);
                    }
                    if rg(*w) {
                        g.add(*w, &gw);
                    }
                }
                Op::Relu { a } => {
                    let xa = val(*a).data();
                    let ga: Vec<T> = gout.iter().zip(xa).map(|(&go, &x)| if x > T::zero() { go } else { T::zero() }).collect();
                    g.add(*a, &ga);
                }
                Op::Swish { a } => {
                    let xa = val(*a).data();
                    let ga: Vec<T> = gout
                        .iter()
                        .zip(xa)
                        .map(|(&go, &x)| {
                            let s = sigmoid(x);
                            go * (s + x * s * (T::one() - s))
                        })
                        .collect();
                    g.add(*a, &ga);
                }
                Op::Sigmoid { a } => {
                    let y = node.value.data();
                    let ga: Vec<T> = gout.iter().zip(y).map(|(&go, &s)| go * s * (T::one() - s)).collect();
                    g.add(*a, &ga);
                }
                Op::Tanh { a } => {
                    let y = node.value.data();
                    let ga: Vec<T> = gout.iter().zip(y).map(|(&go, &t)| go * (T::one() - t * t)).collect();
                    g.add(*a, &ga);
                }
                Op::Softmax { a, axis } | Op::LogSoftmax { a, axis } => {
                    let log = matches!(node.op, Op::LogSoftmax { .. });
                    let y = node.value.data();
                    let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                    let mut ga = vec![T::zero(); y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + i;
                            if log {
                                let s: T = (0..n).map(|j| gout[idx(j)]).sum();
                                for j in 0..n {
                                    ga[idx(j)] = gout[idx(j)] - y[idx(j)].exp() * s;
                                }
                            } else {
                                let s: T = (0..n).map(|j| gout[idx(j)] * y[idx(j)]).sum();
                                for j in 0..n {
                                    ga[idx(j)] = y[idx(j)] * (gout[idx(j)] - s);
                                }
                            }
                        }
                    }
                    g.add(*a, &ga);
                }
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    let (r, d) = node.value.dims2()?;
                    let gd = val(*gain).data();
                    if rg(*gain) {
                        let s = g.slot(*gain, d);
                        for i in 0..r {
                            for j in 0..d {
                                s[j] += gout[i * d + j] * xhat[i * d + j];
                            }
                        }
                    }
                    if rg(*bias) {
                        let s = g.slot(*bias, d);
                        for i in 0..r {
                            for j in 0..d {
                                s[j] += gout[i * d + j];
                            }
                        }
                    }
                    if rg(*x) {
                        let nd = T::of(d as f64);
                        let mut gx = vec![T::zero(); r * d];
                        for i in 0..r {
                            let mut sum_dh = T::zero();
                            let mut sum_dh_h = T::zero();
                            for j in 0..d {
                                let dh = gout[i * d + j] * gd[j];
                                sum_dh += dh;
                                sum_dh_h += dh * xhat[i * d + j];
                            }
                            for j in 0..d {
                                let dh = gout[i * d + j] * gd[j];
                                gx[i * d + j] = rstd[i] * (dh - sum_dh / nd - xhat[i * d + j] * sum_dh_h / nd);
                            }
                        }
                        g.add(*x, &gx);
                    }
                }
                Op::Dropout { a, mask } => {
                    let ga: Vec<T> = gout.iter().zip(mask).map(|(&go, &m)| go * m).collect();
                    g.add(*a, &ga);
                }
                Op::Attention { q, k, v, heads, probs, rel, q_offset } => {
                    let (tq, d) = val(*q).dims2()?;
                    let tk = val(*k).shape()[0];
                    let hd = d / heads;
                    let scale = T::one() / T::of(hd as f64).sqrt();
                    let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                    let mut gq = vec![T::zero(); tq * d];
                    let mut gk = vec![T::zero(); tk * d];
                    let mut gv = vec![T::zero(); tk * d];
                    let mut gb = rel.map(|(_, w)| vec![T::zero(); heads * (2 * w + 1)]);
                    let mut dp = vec![T::zero(); tq * tk];
                    for h in 0..*heads {
                        let p = &probs[h * tq * tk..(h + 1) * tq * tk];
                        let go = &gout[h * hd..];
                        // dV = Pᵀ·dO
                        T::gemm(tk, tq, hd, p, 1, tk, go, d, 1, T::one(), &mut gv[h * hd..], d);
                        // dP = dO·Vᵀ
                        T::gemm(tq, hd, tk, go, d, 1, &vd[h * hd..], 1, d, T::zero(), &mut dp, tk);
                        for i in 0..tq {
                            let pr = &p[i * tk..(i + 1) * tk];
                            let dr = &mut dp[i * tk..(i + 1) * tk];
                            let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                            for (j, dpj) in dr.iter_mut().enumerate() {
                                let ds = pr[j] * (*dpj - dot);
                                if let (Some(gb), Some((_, w))) = (gb.as_mut(), rel) {
                                    gb[h * (2 * w + 1) + rel_index(i + q_offset, j, *w)] += ds;
                                }
                                *dpj = ds * scale;
                            }
                        }
                        // dQ = dS·K, dK = dSᵀ·Q
                        T::gemm(tq, tk, hd, &dp, tk, 1, &kd[h * hd..], d, 1, T::one(), &mut gq[h * hd..], d);
                        T::gemm(tk, tq, hd, &dp, 1, tk, &qd[h * hd..], d, 1, T::one(), &mut gk[h * hd..], d);
                    }
                    if rg(*q) {
                        g.add(*q, &gq);
                    }
                    if rg(*k) {
                        g.add(*k, &gk);
                    }
                    if rg(*v) {
                        g.add(*v, &gv);
                    }
                    if let (Some((b, _)), Some(gb)) = (rel, gb) {
                        if rg(*b) {
                            g.add(*b, &gb);
                        }
                    }
                }
                Op::Sum { a } => {
                    let n = val(*a).len();
                    let s = g.slot(*a, n);
                    for x in s.iter_mut() {
                        *x += gout[0];
                    }
                }
                Op::Custom { a, grad } => {
                    let ga: Vec<T> = grad.iter().map(|&x| x * gout[0]).collect();
                    g.add(*a, &ga);
                }
            }
        }
        Ok(())
    }
}
