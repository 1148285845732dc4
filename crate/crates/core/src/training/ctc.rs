use super::TrainingError;
use crate::autodiff::Tensor;
use crate::scalar::Scalar;

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Frames needed to emit `targets`: one per label plus a blank between
/// each pair of equal neighbours.
pub fn ctc_min_frames(targets: &[usize]) -> usize {
    targets.len() + targets.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Negative log-likelihood of `targets` under a `T×V` matrix of per-frame
/// log-probabilities, summed over all blank-augmented alignments, and its
/// gradient with respect to every entry of `log_probs`.
///
/// Computed in log space with the forward-backward recursions over the
/// extended label sequence `blank, l1, blank, l2, ..., blank`.
pub fn ctc_loss<T: Scalar>(log_probs: &Tensor<T>, targets: &[usize], blank: usize) -> Result<(T, Tensor<T>), TrainingError> {
    let (frames, vocab) = log_probs.dims2().map_err(|e| TrainingError::ShapeMismatch(e.to_string()))?;
    if let Some(&bad) = targets.iter().find(|&&k| k == blank || k >= vocab) {
        return Err(TrainingError::BadLabel { label: bad, vocab });
    }
    let needed = ctc_min_frames(targets);
    if needed > frames {
        return Err(TrainingError::TargetTooLong { needed, frames });
    }
    if frames == 0 {
        return Ok((T::zero(), Tensor::zeros(&[0, vocab])));
    }
    let lp: Vec<f64> = log_probs.data().iter().map(|x| x.to_f64c()).collect();
    let at = |t: usize, k: usize| lp[t * vocab + k];
    let ext: Vec<usize> = std::iter::once(blank).chain(targets.iter().flat_map(|&k| [k, blank])).collect();
    let s_len = ext.len();
    let skip_ok = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let neg = f64::NEG_INFINITY;
    let mut alpha = vec![neg; frames * s_len];
    alpha[0] = at(0, ext[0]);
    if s_len > 1 {
        alpha[1] = at(0, ext[1]);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = lse2(a, prev[s - 1]);
            }
            if skip_ok(s) {
                a = lse2(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == neg { neg } else { a + at(t, ext[s]) };
        }
    }
    let last = (frames - 1) * s_len;
    let log_p = if s_len > 1 { lse2(alpha[last + s_len - 1], alpha[last + s_len - 2]) } else { alpha[last] };

    let mut beta = vec![neg; frames * s_len];
    beta[last + s_len - 1] = at(frames - 1, ext[s_len - 1]);
    if s_len > 1 {
        beta[last + s_len - 2] = at(frames - 1, ext[s_len - 2]);
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut b = next[s];
            if s + 1 < s_len {
                b = lse2(b, next[s + 1]);
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                b = lse2(b, next[s + 2]);
            }
            beta[t * s_len + s] = if b == neg { neg } else { b + at(t, ext[s]) };
        }
    }

    let mut grad = vec![0.0f64; frames * vocab];
    for t in 0..frames {
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if ab > neg {
                let k = ext[s];
                grad[t * vocab + k] -= (ab - at(t, k) - log_p).exp();
            }
        }
    }
    let g = Tensor::new(vec![frames, vocab], grad.into_iter().map(T::of).collect())
        .map_err(|e| TrainingError::ShapeMismatch(e.to_string()))?;
    Ok((T::of(-log_p), g))
}
