//! Encoder frame embeddings, exact t-SNE and scatter-plot output.

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::model::{encode, ArchConfig, ModelError, ModelParams};
use crate::scalar::Scalar;
use crate::seed::derive_seed;

#[derive(Debug, Error)]
pub enum VizError {
    #[error("language {language:?} has {available} encoder frames, {requested} requested")]
    InsufficientFrames { language: String, available: usize, requested: usize },
    #[error("t-SNE needs more than {needed} points for this perplexity, got {got}")]
    TooFewPoints { got: usize, needed: usize },
    #[error("perplexity must be positive and finite, got {0}")]
    BadPerplexity(f64),
    #[error("input contains non-finite values")]
    NonFinite,
    #[error("{points} points but {labels} labels")]
    Misaligned { points: usize, labels: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Where a row of an [`EmbeddingSet`] came from.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FrameRef {
    pub utt: String,
    /// Index at encoder-output resolution.
    pub frame: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    /// `n × d_model`.
    pub matrix: Tensor<f32>,
    pub labels: Vec<String>,
    pub frames: Vec<FrameRef>,
    pub seed: u64,
}

/// Utterances of one language: `(id, features)`.
pub struct LanguageFrames<'a, T> {
    pub language: &'a str,
    pub utterances: &'a [(String, Tensor<T>)],
}

/// Picks `n` encoder-resolution frames per language. The choice depends only
/// on `seed`, the utterance lengths and the subsampling, so every model of
/// one architecture family sees the same frames.
pub fn select_frames<T: Scalar>(
    arch: &ArchConfig,
    lang: &LanguageFrames<'_, T>,
    n: usize,
    seed: u64,
) -> Result<Vec<(usize, usize)>, VizError> {
    let all: Vec<(usize, usize)> = lang
        .utterances
        .iter()
        .enumerate()
        .flat_map(|(u, (_, f))| (0..arch.subsampled_len(f.shape()[0])).map(move |t| (u, t)))
        .collect();
    if all.len() < n {
        return Err(VizError::InsufficientFrames { language: lang.language.to_string(), available: all.len(), requested: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["frames", lang.language]));
    let mut chosen: Vec<(usize, usize)> = sample(&mut rng, all.len(), n).into_iter().map(|i| all[i]).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Encoder outputs at `n_per_lang` fixed frames per language.
pub fn extract_frame_embeddings<T: Scalar>(
    params: &ModelParams<T>,
    arch: &ArchConfig,
    langs: &[LanguageFrames<'_, T>],
    n_per_lang: usize,
    seed: u64,
) -> Result<EmbeddingSet, VizError> {
    let d = arch.d_model;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut frames = Vec::new();
    for lang in langs {
        let chosen = select_frames(arch, lang, n_per_lang, seed)?;
        let mut i = 0;
        while i < chosen.len() {
            let u = chosen[i].0;
            let (id, feats) = &lang.utterances[u];
            let enc = encode(params, arch, std::slice::from_ref(feats), &[feats.shape()[0]])?.remove(0);
            while i < chosen.len() && chosen[i].0 == u {
                let t = chosen[i].1;
                data.extend(enc.row(t).iter().map(|x| x.to_f64c() as f32));
                labels.push(lang.language.to_string());
                frames.push(FrameRef { utt: id.clone(), frame: t });
                i += 1;
            }
        }
    }
    let matrix = Tensor::new(vec![labels.len(), d], data).map_err(ModelError::from)?;
    Ok(EmbeddingSet { matrix, labels, frames, seed })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    /// `None` uses `max(n / exaggeration / 4, 50)`.
    pub learning_rate: Option<f64>,
    pub seed: u64,
    /// KL is recorded every this many iterations.
    pub log_every: usize,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self { perplexity: 30.0, iterations: 1000, early_exaggeration: 12.0, exaggeration_iters: 250, learning_rate: None, seed: 0, log_every: 50 }
    }
}

impl TsneConfig {
    pub fn describe(&self) -> String {
        format!(
            "perplexity={} iterations={} early_exaggeration={} exaggeration_iters={} seed={}",
            self.perplexity, self.iterations, self.early_exaggeration, self.exaggeration_iters, self.seed
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsneOutput {
    pub points: Vec<[f64; 2]>,
    /// `(iteration, KL(P‖Q))` without exaggeration.
    pub kl_trace: Vec<(usize, f64)>,
    /// KL when exaggeration was switched off.
    pub kl_after_exaggeration: f64,
}

/// Row-conditional affinities with the bandwidth found by bisection so each
/// row's entropy equals `ln(perplexity)`, then symmetrized.
fn joint_probabilities(d2: &[f64], n: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    let mut row = vec![0.0; n];
    for i in 0..n {
        let (mut beta, mut lo, mut hi) = (1.0f64, 0.0f64, f64::INFINITY);
        let di = &d2[i * n..(i + 1) * n];
        for _ in 0..100 {
            let dmin = di.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &v)| v).fold(f64::INFINITY, f64::min);
            let mut sum = 0.0;
            for j in 0..n {
                row[j] = if j == i { 0.0 } else { (-(di[j] - dmin) * beta).exp() };
                sum += row[j];
            }
            let mean_d: f64 = (0..n).map(|j| row[j] * (di[j] - dmin)).sum::<f64>() / sum;
            let entropy = sum.ln() + beta * mean_d;
            row.iter_mut().for_each(|v| *v /= sum);
            let diff = entropy - target;
            if diff.abs() < 1e-6 {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        p[i * n..(i + 1) * n].copy_from_slice(&row);
    }
    let mut joint = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            joint[i * n + j] = ((p[i * n + j] + p[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
        joint[i * n + i] = 0.0;
    }
    joint
}

/// First two principal-component scores, scaled so the first has standard
/// deviation 1e-4.
fn pca_init(x: &[f64], n: usize, d: usize, seed: u64) -> Vec<[f64; 2]> {
    let mean: Vec<f64> = (0..d).map(|k| (0..n).map(|i| x[i * d + k]).sum::<f64>() / n as f64).collect();
    let xc: Vec<f64> = (0..n * d).map(|i| x[i] - mean[i % d]).collect();
    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        let r = &xc[i * d..(i + 1) * d];
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += r[a] * r[b];
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["pca"]));
    let mut comps: Vec<Vec<f64>> = Vec::new();
    for _ in 0..2 {
        let mut v: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() - 0.5).collect();
        for _ in 0..300 {
            let mut w: Vec<f64> = (0..d).map(|a| (0..d).map(|b| cov[a * d + b] * v[b]).sum()).collect();
            for c in &comps {
                let dot: f64 = w.iter().zip(c).map(|(a, b)| a * b).sum();
                w.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = w.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm < 1e-300 {
                break;
            }
            v = w.into_iter().map(|a| a / norm).collect();
        }
        comps.push(v);
    }
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|i| {
            let r = &xc[i * d..(i + 1) * d];
            let s = |c: &Vec<f64>| r.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            [s(&comps[0]), s(&comps[1])]
        })
        .collect();
    let sd = (y.iter().map(|p| p[0] * p[0]).sum::<f64>() / n as f64).sqrt();
    let scale = if sd > 0.0 { 1e-4 / sd } else { 1.0 };
    for (i, p) in y.iter_mut().enumerate() {
        if sd > 0.0 {
            p[0] *= scale;
            p[1] *= scale;
        } else {
            p[0] = 1e-4 * (rng.gen::<f64>() - 0.5) + 1e-12 * i as f64;
            p[1] = 1e-4 * (rng.gen::<f64>() - 0.5);
        }
    }
    y
}

fn kl_and_grad(p: &[f64], y: &[[f64; 2]], exaggeration: f64, grad: &mut [[f64; 2]], num: &mut [f64]) -> f64 {
    let n = y.len();
    let mut z = 0.0;
    for i in 0..n {
        for j in 0..n {
            let v = if i == j {
                0.0
            } else {
                let (dx, dy) = (y[i][0] - y[j][0], y[i][1] - y[j][1]);
                1.0 / (1.0 + dx * dx + dy * dy)
            };
            num[i * n + j] = v;
            z += v;
        }
    }
    let mut kl = 0.0;
    for i in 0..n {
        let mut g = [0.0; 2];
        for j in 0..n {
            if i == j {
                continue;
            }
            let pij = p[i * n + j];
            let qij = (num[i * n + j] / z).max(1e-300);
            kl += pij * (pij / qij).ln();
            let m = (exaggeration * pij - qij) * num[i * n + j];
            g[0] += 4.0 * m * (y[i][0] - y[j][0]);
            g[1] += 4.0 * m * (y[i][1] - y[j][1]);
        }
        grad[i] = g;
    }
    kl
}

/// Exact t-SNE of the rows of an `n × d` matrix into two dimensions.
///
/// Gradient descent with momentum (0.5, then 0.8) and adaptive gains,
/// starting from scaled PCA scores; the first `exaggeration_iters`
/// iterations multiply P by `early_exaggeration`.
pub fn tsne(x: &Tensor<f64>, cfg: &TsneConfig) -> Result<TsneOutput, VizError> {
    if !(cfg.perplexity.is_finite() && cfg.perplexity > 0.0) {
        return Err(VizError::BadPerplexity(cfg.perplexity));
    }
    let (n, d) = x.dims2().map_err(ModelError::from)?;
    let needed = (3.0 * cfg.perplexity).floor() as usize;
    if n <= needed {
        return Err(VizError::TooFewPoints { got: n, needed });
    }
    if !x.all_finite() {
        return Err(VizError::NonFinite);
    }
    let xd = x.data();
    let mut d2 = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let s: f64 = (0..d).map(|k| (xd[i * d + k] - xd[j * d + k]).powi(2)).sum();
            d2[i * n + j] = s;
            d2[j * n + i] = s;
        }
    }
    let p = joint_probabilities(&d2, n, cfg.perplexity);
    let mut y = pca_init(xd, n, d, cfg.seed);
    let lr = cfg.learning_rate.unwrap_or_else(|| (n as f64 / cfg.early_exaggeration / 4.0).max(50.0));
    let mut update = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut grad = vec![[0.0; 2]; n];
    let mut num = vec![0.0; n * n];
    let mut kl_trace = Vec::new();
    let mut kl_after_exaggeration = f64::NAN;
    for it in 0..cfg.iterations {
        let early = it < cfg.exaggeration_iters;
        let ex = if early { cfg.early_exaggeration } else { 1.0 };
        kl_and_grad(&p, &y, ex, &mut grad, &mut num);
        let momentum = if early { 0.5 } else { 0.8 };
        for i in 0..n {
            for k in 0..2 {
                let same_sign = (grad[i][k] > 0.0) == (update[i][k] > 0.0);
                gains[i][k] = if same_sign { (gains[i][k] * 0.8).max(0.01) } else { gains[i][k] + 0.2 };
                update[i][k] = momentum * update[i][k] - lr * gains[i][k] * grad[i][k];
                y[i][k] += update[i][k];
            }
        }
        for k in 0..2 {
            let m = y.iter().map(|p| p[k]).sum::<f64>() / n as f64;
            y.iter_mut().for_each(|p| p[k] -= m);
        }
        let last = it + 1 == cfg.iterations;
        if it + 1 == cfg.exaggeration_iters || (it + 1) % cfg.log_every.max(1) == 0 || last {
            let kl = kl_and_grad(&p, &y, 1.0, &mut grad, &mut num);
            if it + 1 == cfg.exaggeration_iters {
                kl_after_exaggeration = kl;
            }
            kl_trace.push((it + 1, kl));
        }
    }
    if kl_after_exaggeration.is_nan() {
        kl_after_exaggeration = kl_and_grad(&p, &pca_init(xd, n, d, cfg.seed), 1.0, &mut grad, &mut num);
    }
    Ok(TsneOutput { points: y, kl_trace, kl_after_exaggeration })
}

/// Fraction of points whose `k` nearest neighbours (excluding themselves)
/// mostly share their label, averaged as neighbour agreement.
pub fn knn_purity(points: &[[f64; 2]], labels: &[String], k: usize) -> f64 {
    let n = points.len();
    if n == 0 || k == 0 {
        return 1.0;
    }
    let mut agree = 0usize;
    let mut total = 0usize;
    for i in 0..n {
        let mut dist: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| ((points[i][0] - points[j][0]).powi(2) + (points[i][1] - points[j][1]).powi(2), j))
            .collect();
        dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in dist.iter().take(k) {
            agree += usize::from(labels[j] == labels[i]);
            total += 1;
        }
    }
    agree as f64 / total.max(1) as f64
}

pub const PALETTE: [&str; 10] =
    ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"];

fn legend_order(labels: &[String]) -> Vec<&str> {
    let mut seen: Vec<&str> = Vec::new();
    for l in labels {
        if !seen.contains(&l.as_str()) {
            seen.push(l);
        }
    }
    seen
}

/// Writes a CSV (`x,y,lang,utt,frame` after a `#` comment line) and a
/// self-contained SVG scatter plot with one legend entry per language.
pub fn emit_scatter(
    points: &[[f64; 2]],
    labels: &[String],
    frames: &[FrameRef],
    comment: &str,
    csv_path: &Path,
    svg_path: &Path,
) -> Result<(), VizError> {
    if points.len() != labels.len() || points.len() != frames.len() {
        return Err(VizError::Misaligned { points: points.len(), labels: labels.len().min(frames.len()) });
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(csv_path)?);
    writeln!(f, "# {}", comment.replace('\n', " "))?;
    {
        let mut w = csv::Writer::from_writer(&mut f);
        w.write_record(["x", "y", "lang", "utt", "frame"])?;
        for ((p, l), fr) in points.iter().zip(labels).zip(frames) {
            w.write_record([p[0].to_string(), p[1].to_string(), l.clone(), fr.utt.clone(), fr.frame.to_string()])?;
        }
        w.flush()?;
    }
    f.flush()?;
    std::fs::write(svg_path, render_svg(points, labels))?;
    Ok(())
}

fn render_svg(points: &[[f64; 2]], labels: &[String]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 480.0;
    const M: f64 = 20.0;
    const LEGEND_W: f64 = 120.0;
    let langs = legend_order(labels);
    let color = |l: &str| PALETTE[langs.iter().position(|x| *x == l).unwrap_or(0) % PALETTE.len()];
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    let sx = (W - LEGEND_W - 2.0 * M) / (x1 - x0).max(1e-12);
    let sy = (H - 2.0 * M) / (y1 - y0).max(1e-12);
    let mut s = String::new();
    s.push_str(&format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"));
    s.push_str(&format!("<rect x=\"0\" y=\"0\" width=\"{W}\" height=\"{H}\" style=\"fill:#ffffff\"/>\n"));
    s.push_str("<g id=\"points\">\n");
    for (p, l) in points.iter().zip(labels) {
        let cx = M + (p[0] - x0) * sx;
        let cy = H - M - (p[1] - y0) * sy;
        s.push_str(&format!("<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"2\" style=\"fill:{};fill-opacity:0.7\"/>\n", color(l)));
    }
    s.push_str("</g>\n<g id=\"legend\">\n");
    for (i, l) in langs.iter().enumerate() {
        let y = M + 18.0 * i as f64;
        let x = W - LEGEND_W + 10.0;
        s.push_str(&format!("<circle cx=\"{x}\" cy=\"{y}\" r=\"5\" style=\"fill:{}\"/>\n", color(l)));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" style=\"font-family:sans-serif;font-size:12px\">{}</text>\n",
            x + 10.0,
            y + 4.0,
            xml_escape(l)
        ));
    }
    s.push_str("</g>\n</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
