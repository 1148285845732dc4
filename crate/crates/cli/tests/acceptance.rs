//! Acceptance suite: one test per criterion, each printing a single
//! `ACCnn PASS|FAIL ...` line with the measured values.
//!
//! Run with `cargo test -p ipa-transfer-cli --test acceptance -- --nocapture`.

mod common;

use std::collections::BTreeSet;
use std::path::Path;
use std::time::{Duration, Instant};

use ipa_transfer::autodiff::AttentionMask;
use ipa_transfer::bpe::train_bpe;
use ipa_transfer::checkpoint::Checkpoint;
use ipa_transfer::eval::{decode_utterance, score_corpus, ScoreUnit};
use ipa_transfer::frontend::synth::{generate, SynthConfig};
use ipa_transfer::frontend::{load_manifest, LogMelConfig};
use ipa_transfer::g2p::{Converter, Lexicon, OovPolicy, RuleSet};
use ipa_transfer::model::{init_params, is_encoder_param, ArchConfig, ModelParams, Session};
use ipa_transfer::phoneset::{parse_ipa, union_vocabulary, IpaToken, PhoneInventory, SymbolTable, TokenKind, SPECIALS};
use ipa_transfer::text::Normalizer;
use ipa_transfer::training::{ctc_loss, ctc_min_frames, joint_loss, lr_at, smoothed_ce_sum, TrainConfig};
use ipa_transfer::transfer::*;
use ipa_transfer::viz::{extract_frame_embeddings, knn_purity, tsne, LanguageFrames, TsneConfig};
use ipa_transfer::{Tape64, Tensor64, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unicode_normalization::UnicodeNormalization;

use common::*;

fn report(id: u32, pass: bool, detail: impl AsRef<str>) {
    println!("ACC{id:02} {} {}", if pass { "PASS" } else { "FAIL" }, detail.as_ref());
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

const FD_EPS: f64 = 1e-5;

fn central_diff(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + FD_EPS;
            let up = f(&p);
            p[i] = x[i] - FD_EPS;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * FD_EPS)
        })
        .collect()
}

fn log_softmax_rows(logits: &[f64], v: usize) -> Vec<f64> {
    logits
        .chunks(v)
        .flat_map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z = row.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
            row.iter().map(move |x| x - z).collect::<Vec<_>>()
        })
        .collect()
}

/// Sum over all frame-level paths that collapse to `target`.
fn ctc_by_enumeration(lp: &[f64], t: usize, v: usize, target: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut path = vec![0usize; t];
    loop {
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &s in &path {
            if Some(s) != prev && s != 0 {
                collapsed.push(s);
            }
            prev = Some(s);
        }
        if collapsed == target {
            total += path.iter().enumerate().map(|(i, &s)| lp[i * v + s]).sum::<f64>().exp();
        }
        let mut i = 0;
        loop {
            if i == t {
                return -total.ln();
            }
            path[i] += 1;
            if path[i] < v {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

fn all_targets(len: usize, v: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        out = out.into_iter().flat_map(|p| (1..v).map(move |s| [p.clone(), vec![s]].concat())).collect();
    }
    out
}

#[test]
fn acc01_ctc_matches_enumeration_and_finite_differences() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut cases, mut worst_loss, mut worst_grad) = (0, 0.0f64, 0.0f64);
    for t in 1..=5 {
        for v in 2..=4 {
            for len in 0..=3 {
                for target in all_targets(len, v) {
                    if ctc_min_frames(&target) > t {
                        continue;
                    }
                    let logits: Vec<f64> = (0..t * v).map(|_| rng.gen_range(-2.0..2.0)).collect();
                    let lp = log_softmax_rows(&logits, v);
                    let x = Tensor64::new(vec![t, v], lp.clone()).unwrap();
                    let (loss, grad) = ctc_loss(&x, &target, 0).unwrap();
                    worst_loss = worst_loss.max((loss - ctc_by_enumeration(&lp, t, v, &target)).abs());
                    let fd = central_diff(&lp, |p| ctc_loss(&Tensor64::new(vec![t, v], p.to_vec()).unwrap(), &target, 0).unwrap().0);
                    worst_grad = worst_grad.max(rel_err(grad.data(), &fd));
                    cases += 1;
                }
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = worst_loss <= 1e-10 && worst_grad <= 1e-4 && elapsed < Duration::from_secs(10);
    report(1, pass, format!("{cases} cases, max |loss-enum| {worst_loss:.2e}, max grad rel-err {worst_grad:.2e}, {elapsed:.2?}"));
    assert!(pass);
}

type Build = dyn Fn(&mut Tape64, &[Var]) -> Var;

/// Gradient of `sum(build(inputs) ⊙ R)` for a fixed random `R`, analytic
/// versus central differences over every input coordinate.
fn gradcheck(inputs: &[Tensor64], build: &Build, seed: u64) -> f64 {
    let forward = |xs: &[Tensor64]| -> (Tape64, Vec<Var>, Var) {
        let mut tape = Tape64::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = build(&mut tape, &vars);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = Tensor64::from_fn(tape.shape(out), |_| rng.gen_range(-1.0..1.0));
        let r = tape.constant(r);
        let prod = tape.mul(out, r).unwrap();
        let loss = tape.sum(prod).unwrap();
        (tape, vars, loss)
    };
    let (mut tape, vars, loss) = forward(inputs);
    tape.backward(loss).unwrap();
    let mut analytic = Vec::new();
    for (v, x) in vars.iter().zip(inputs) {
        analytic.extend(tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]));
    }
    let mut numeric = Vec::new();
    for i in 0..inputs.len() {
        numeric.extend(central_diff(inputs[i].data(), |p| {
            let mut xs = inputs.to_vec();
            xs[i] = Tensor64::new(inputs[i].shape().to_vec(), p.to_vec()).unwrap();
            let (tape, _, loss) = forward(&xs);
            tape.value(loss).item()
        }));
    }
    rel_err(&analytic, &numeric)
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor64 {
    Tensor64::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values bounded away from zero, for ops with a kink there.
fn rand_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor64 {
    Tensor64::from_fn(shape, |_| {
        let m: f64 = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor64>, Box<Build>)> {
    let r = rng.gen_range(1..5);
    let c = rng.gen_range(1..6);
    let k = rng.gen_range(1..5);
    let t = rng.gen_range(4..9);
    let cin = rng.gen_range(1..4);
    let cout = rng.gen_range(1..4);
    let kernel = rng.gen_range(1..4);
    let stride = rng.gen_range(1..3);
    let pad = rng.gen_range(0..2);
    let dk = [1, 3, 5][rng.gen_range(0..3)];
    let heads = rng.gen_range(1..3);
    let d = heads * rng.gen_range(1..4);
    let (tq, tk) = (rng.gen_range(1..5), rng.gen_range(1..5));
    let window = rng.gen_range(0..3);
    let split = rng.gen_range(0..=r);
    let ids: Vec<usize> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..r)).collect();
    let drop_seed = rng.gen();
    let mut cases: Vec<(&'static str, Vec<Tensor64>, Box<Build>)> = vec![
        ("add", vec![rand_t(rng, &[r, c]), rand_t(rng, &[r, c])], Box::new(|t, v| t.add(v[0], v[1]).unwrap())),
        ("add_row", vec![rand_t(rng, &[r, c]), rand_t(rng, &[c])], Box::new(|t, v| t.add(v[0], v[1]).unwrap())),
        ("mul", vec![rand_t(rng, &[r, c]), rand_t(rng, &[r, c])], Box::new(|t, v| t.mul(v[0], v[1]).unwrap())),
        ("mul_row", vec![rand_t(rng, &[r, c]), rand_t(rng, &[c])], Box::new(|t, v| t.mul(v[0], v[1]).unwrap())),
        ("scale", vec![rand_t(rng, &[r, c])], Box::new(|t, v| t.scale(v[0], -1.7).unwrap())),
        ("matmul", vec![rand_t(rng, &[r, k]), rand_t(rng, &[k, c])], Box::new(|t, v| t.matmul(v[0], v[1]).unwrap())),
        (
            "linear",
            vec![rand_t(rng, &[r, k]), rand_t(rng, &[k, c]), rand_t(rng, &[c])],
            Box::new(|t, v| t.linear(v[0], v[1], Some(v[2])).unwrap()),
        ),
        ("transpose", vec![rand_t(rng, &[r, c])], Box::new(|t, v| t.transpose(v[0]).unwrap())),
        ("concat0", vec![rand_t(rng, &[r, c]), rand_t(rng, &[k, c])], Box::new(|t, v| t.concat(&[v[0], v[1]], 0).unwrap())),
        ("concat1", vec![rand_t(rng, &[r, c]), rand_t(rng, &[r, k])], Box::new(|t, v| t.concat(&[v[0], v[1]], 1).unwrap())),
        ("slice", vec![rand_t(rng, &[r, c])], Box::new(move |t, v| t.slice(v[0], 0, split, r).unwrap())),
        ("reshape", vec![rand_t(rng, &[r, c])], Box::new(move |t, v| t.reshape(v[0], &[c, r]).unwrap())),
        ("embedding", vec![rand_t(rng, &[r, c])], Box::new(move |t, v| t.embedding_lookup(v[0], &ids).unwrap())),
        (
            "conv1d",
            vec![rand_t(rng, &[t, cin]), rand_t(rng, &[kernel * cin, cout])],
            Box::new(move |tp, v| tp.conv1d(v[0], v[1], kernel, stride, pad).unwrap()),
        ),
        ("conv1d_depthwise", vec![rand_t(rng, &[t, cin]), rand_t(rng, &[dk, cin])], Box::new(|t, v| t.conv1d_depthwise(v[0], v[1]).unwrap())),
        ("relu", vec![rand_off_zero(rng, &[r, c])], Box::new(|t, v| t.relu(v[0]).unwrap())),
        ("swish", vec![rand_t(rng, &[r, c])], Box::new(|t, v| t.swish(v[0]).unwrap())),
        ("sigmoid", vec![rand_t(rng, &[r, c])], Box::new(|t, v| t.sigmoid(v[0]).unwrap())),
        ("tanh", vec![rand_t(rng, &[r, c])], Box::new(|t, v| t.tanh(v[0]).unwrap())),
        ("softmax", vec![rand_t(rng, &[r, c])], Box::new(|t, v| t.softmax(v[0], 1).unwrap())),
        ("softmax_axis0", vec![rand_t(rng, &[r, c])], Box::new(|t, v| t.softmax(v[0], 0).unwrap())),
        ("log_softmax", vec![rand_t(rng, &[r, c])], Box::new(|t, v| t.log_softmax(v[0], 1).unwrap())),
        (
            "layer_norm",
            vec![rand_t(rng, &[r, c + 1]), rand_t(rng, &[c + 1]), rand_t(rng, &[c + 1])],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()),
        ),
        ("dropout", vec![rand_t(rng, &[r, c])], Box::new(move |t, v| t.dropout(v[0], 0.3, drop_seed).unwrap())),
        ("sum", vec![rand_t(rng, &[r, c])], Box::new(|t, v| t.sum(v[0]).unwrap())),
        ("mean", vec![rand_t(rng, &[r, c])], Box::new(|t, v| t.mean(v[0]).unwrap())),
        (
            "custom_scalar",
            vec![rand_t(rng, &[r, c])],
            Box::new(|t, v| {
                let x = t.value(v[0]).data().to_vec();
                let value = x.iter().map(|a| a * a * a).sum();
                t.custom_scalar(v[0], value, x.iter().map(|a| 3.0 * a * a).collect()).unwrap()
            }),
        ),
    ];
    for (name, mask) in [("attention", AttentionMask::None), ("attention_causal", AttentionMask::Causal)] {
        cases.push((
            name,
            vec![rand_t(rng, &[tq, d]), rand_t(rng, &[tk, d]), rand_t(rng, &[tk, d]), rand_t(rng, &[heads, 2 * window + 1])],
            Box::new(move |t, v| t.scaled_dot_attention(v[0], v[1], v[2], heads, &mask, Some((v[3], window)), 0).unwrap()),
        ));
    }
    cases
}

fn tiny_arch(rng: &mut ChaCha8Rng, vocab: usize) -> ArchConfig {
    let heads = rng.gen_range(1..3);
    ArchConfig {
        feat_dim: rng.gen_range(3..6),
        enc_layers: 1,
        dec_layers: 1,
        heads,
        d_model: heads * rng.gen_range(2..4),
        d_ff: rng.gen_range(3..8),
        conv_kernel: [1, 3][rng.gen_range(0..2)],
        rel_pos_window: rng.gen_range(1..4),
        max_dec_len: 16,
        dropout_p: 0.0,
        ..ArchConfig::desk()
    }
    .with_vocab(vocab)
}

type Composite = dyn Fn(&mut Session<'_, f64>, &Tensor64, &[usize]) -> Var;

/// Parameter gradient of a model composite against central differences
/// over every parameter that takes part in it.
fn gradcheck_model(arch: &ArchConfig, params: &ModelParams<f64>, feats: &Tensor64, targets: &[usize], f: &Composite) -> f64 {
    let value = |p: &ModelParams<f64>| {
        let mut s = Session::inference(p, arch);
        let out = f(&mut s, feats, targets);
        s.tape.value(out).item()
    };
    let mut s = Session::training(params, arch, None);
    let out = f(&mut s, feats, targets);
    s.tape.backward(out).unwrap();
    let grads = s.gradients();
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for (name, g) in &grads {
        let base = params.get(name).unwrap().clone();
        analytic.extend_from_slice(g);
        numeric.extend(central_diff(base.data(), |x| {
            let mut p = params.clone();
            *p.get_mut(name).unwrap() = Tensor64::new(base.shape().to_vec(), x.to_vec()).unwrap();
            value(&p)
        }));
    }
    rel_err(&analytic, &numeric)
}

fn weighted_sum(s: &mut Session<'_, f64>, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor64::from_fn(s.tape.shape(x), |_| rng.gen_range(-1.0..1.0));
    let r = s.tape.constant(r);
    let prod = s.tape.mul(x, r).unwrap();
    s.tape.sum(prod).unwrap()
}

fn conformer_block(s: &mut Session<'_, f64>, feats: &Tensor64, _: &[usize]) -> Var {
    let enc = s.encode(feats, feats.shape()[0]).unwrap();
    weighted_sum(s, enc, 11)
}

fn decoder_block(s: &mut Session<'_, f64>, feats: &Tensor64, targets: &[usize]) -> Var {
    let enc = s.encode(feats, feats.shape()[0]).unwrap();
    let mut prefix = vec![ipa_transfer::phoneset::SOS_EOS];
    prefix.extend_from_slice(targets);
    let logits = s.decoder_forward(enc, &prefix).unwrap();
    weighted_sum(s, logits, 12)
}

fn full_joint_loss(s: &mut Session<'_, f64>, feats: &Tensor64, targets: &[usize]) -> Var {
    let enc = s.encode(feats, feats.shape()[0]).unwrap();
    let lp = s.ctc_head(enc).unwrap();
    let (nll, g) = ctc_loss(s.tape.value(lp), targets, 0).unwrap();
    let ctc = s.tape.custom_scalar(lp, nll, g.into_data()).unwrap();
    let mut prefix = vec![ipa_transfer::phoneset::SOS_EOS];
    prefix.extend_from_slice(targets);
    let logits = s.decoder_forward(enc, &prefix).unwrap();
    let alp = s.tape.log_softmax(logits, 1).unwrap();
    let mut out = targets.to_vec();
    out.push(ipa_transfer::phoneset::SOS_EOS);
    let (sum, tokens, grad) = smoothed_ce_sum(s.tape.value(alp), &out, 0.1).unwrap();
    let att = s.tape.custom_scalar(alp, sum, grad).unwrap();
    let att = s.tape.scale(att, 1.0 / tokens as f64).unwrap();
    let lambda = 0.3;
    let a = s.tape.scale(ctc, lambda).unwrap();
    let b = s.tape.scale(att, 1.0 - lambda).unwrap();
    let total = s.tape.add(a, b).unwrap();
    let expected = joint_loss(nll, sum / tokens as f64, lambda);
    assert!((s.tape.value(total).item() - expected).abs() < 1e-12);
    total
}

#[test]
fn acc02_autodiff_gradient_checks() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: std::collections::BTreeMap<&str, (usize, f64)> = Default::default();
    for trial in 0..5u64 {
        for (name, inputs, build) in primitive_cases(&mut rng) {
            let e = gradcheck(&inputs, build.as_ref(), 100 + trial);
            let w = worst.entry(name).or_insert((0, 0.0));
            *w = (w.0 + 1, w.1.max(e));
        }
        let vocab = 7;
        let arch = tiny_arch(&mut rng, vocab);
        let params = init_params::<f64>(&arch, trial).unwrap();
        let frames = rng.gen_range(12..24);
        let feats = rand_t(&mut rng, &[frames, arch.feat_dim]);
        let targets: Vec<usize> = (0..rng.gen_range(1..3)).map(|_| rng.gen_range(4..vocab)).collect();
        let composites: [(&str, &Composite); 3] =
            [("conformer_block", &conformer_block), ("decoder_block", &decoder_block), ("joint_loss", &full_joint_loss)];
        for (name, f) in composites {
            let e = gradcheck_model(&arch, &params, &feats, &targets, f);
            let w = worst.entry(name).or_insert((0, 0.0));
            *w = (w.0 + 1, w.1.max(e));
        }
    }
    let elapsed = start.elapsed();
    let max = worst.values().map(|w| w.1).fold(0.0, f64::max);
    let failing: Vec<String> = worst.iter().filter(|(_, w)| w.1 > 1e-4).map(|(n, w)| format!("{n}={:.1e}", w.1)).collect();
    let pass = failing.is_empty() && worst.values().all(|w| w.0 >= 5) && elapsed < Duration::from_secs(60);
    report(2, pass, format!("{} ops x 5 shapes, max rel-err {max:.2e}, {elapsed:.2?} {failing:?}", worst.len()));
    assert!(pass);
}

/// (input, tie_bar_joins, expected tokens with `+` marking modifiers)
const IPA_FIXTURES: &[(&str, bool, &str)] = &[
    ("aː", true, "a +ː"),
    ("", true, ""),
    ("t͡ʃa", true, "t͡ʃ a"),
    ("t͡ʃa", false, "t ʃ a"),
    ("ba", true, "b a"),
    ("ˈkato", true, "+ˈ k a t o"),
    ("ˌa", true, "+ˌ a"),
    ("pʰa", true, "p +ʰ a"),
    ("kʷe", true, "k +ʷ e"),
    ("tʲu", true, "t +ʲ u"),
    ("\u{e3}", true, "a +\u{303}"),
    ("\u{e9}", true, "e +\u{301}"),
    ("\u{f1}", true, "n +\u{303}"),
    ("a b", true, "a b"),
    ("  a\tb\n", true, "a b"),
    ("d͡ʒ", true, "d͡ʒ"),
    ("d͡ʒ", false, "d ʒ"),
    ("t͡s", true, "t͡s"),
    ("maː˥", true, "m a +ː +˥"),
    ("ma˧˥", true, "m a +˧ +˥"),
    ("n\u{329}", true, "n +\u{329}"),
    ("ə˞", true, "ə +˞"),
    ("ŋ", true, "ŋ"),
    ("ʃ", true, "ʃ"),
    ("ɲa", true, "ɲ a"),
    ("kʼ", true, "k +ʼ"),
    ("aːː", true, "a +ː +ː"),
    ("iˑ", true, "i +ˑ"),
    ("o\u{31e}", true, "o +\u{31e}"),
    ("e\u{32f}", true, "e +\u{32f}"),
    ("ɾa", true, "ɾ a"),
    ("ʔa", true, "ʔ a"),
    ("pf", true, "p f"),
    ("t͡ʃʰ", true, "t͡ʃ +ʰ"),
    ("t͡ʃʰ", false, "t ʃ +ʰ"),
    ("ɛ\u{303}ː", true, "ɛ +\u{303} +ː"),
    ("sˤ", true, "s +ˤ"),
    ("dʱ", true, "d +ʱ"),
    ("ˈt͡ʃaː", true, "+ˈ t͡ʃ a +ː"),
    ("a ˈb", true, "a +ˈ b"),
    ("ŋ\u{30a}", true, "ŋ +\u{30a}"),
    ("ɑ", true, "ɑ"),
    ("ʊ", true, "ʊ"),
    ("ɪ", true, "ɪ"),
    ("œ", true, "œ"),
    ("ø", true, "ø"),
    ("ɣaβ", true, "ɣ a β"),
    ("xʲ", true, "x +ʲ"),
    ("mː", true, "m +ː"),
    ("\u{fc}", true, "u +\u{308}"),
];

fn render(tokens: &[IpaToken]) -> String {
    tokens
        .iter()
        .map(|t| match t.kind {
            TokenKind::Base => t.text.clone(),
            TokenKind::Modifier => format!("+{}", t.text),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn random_ipa(rng: &mut ChaCha8Rng, bases: &[char], modifiers: &[char]) -> String {
    let mut s = String::new();
    for _ in 0..rng.gen_range(0..8) {
        match rng.gen_range(0..10) {
            0 => s.push(*[' ', '\t', '\n'].choose(rng).unwrap()),
            1 => s.push(*modifiers.choose(rng).unwrap()),
            _ => {
                s.push(*bases.choose(rng).unwrap());
                if rng.gen_bool(0.15) {
                    s.push(ipa_transfer::phoneset::TIE_BAR);
                    s.push(*bases.choose(rng).unwrap());
                }
                for _ in 0..rng.gen_range(0..3) {
                    if rng.gen_bool(0.4) {
                        s.push(*modifiers.choose(rng).unwrap());
                    }
                }
            }
        }
    }
    s
}

#[test]
fn acc03_ipa_parsing() {
    let table = SymbolTable::default();
    let paper = parse_ipa("aː", &table, true).unwrap();
    let mut pass = paper
        == [IpaToken { text: "a".into(), kind: TokenKind::Base }, IpaToken { text: "ː".into(), kind: TokenKind::Modifier }];
    let mut mismatches = Vec::new();
    for &(input, joins, expected) in IPA_FIXTURES {
        let got = parse_ipa(input, &table, joins).map(|t| render(&t));
        if got.as_deref().ok() != Some(expected) {
            mismatches.push(format!("{input:?}: {got:?}"));
        }
    }
    let mut bases: Vec<char> = table.bases().collect();
    let mut modifiers: Vec<char> = table.modifiers().collect();
    bases.sort();
    modifiers.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut roundtrip_failures = 0;
    for _ in 0..1000 {
        let s = random_ipa(&mut rng, &bases, &modifiers);
        let nfd: String = s.nfd().filter(|c| !c.is_whitespace()).collect();
        let joined = parse_ipa(&s, &table, true).map(|t| t.iter().map(|x| x.text.as_str()).collect::<String>());
        let split = parse_ipa(&s, &table, false).map(|t| t.iter().map(|x| x.text.as_str()).collect::<String>());
        let no_ties: String = nfd.chars().filter(|&c| c != ipa_transfer::phoneset::TIE_BAR).collect();
        if joined.ok().as_ref() != Some(&nfd) || split.ok().as_ref() != Some(&no_ties) {
            roundtrip_failures += 1;
        }
    }
    pass &= mismatches.is_empty() && roundtrip_failures == 0;
    report(
        3,
        pass,
        format!("{} fixtures, {} mismatches {mismatches:?}, round-trip failures {roundtrip_failures}/1000", IPA_FIXTURES.len() + 1, mismatches.len()),
    );
    assert!(pass);
}

fn random_inventory(rng: &mut ChaCha8Rng, pool: &[IpaToken], lang: usize) -> PhoneInventory {
    let n = rng.gen_range(0..=pool.len().min(12));
    PhoneInventory::from_tokens(format!("l{lang}"), pool.choose_multiple(rng, n).cloned())
}

#[test]
fn acc04_vocabulary_union_properties() {
    let table = SymbolTable::default();
    let pool: Vec<IpaToken> = ["a", "b", "ː", "t͡ʃ", "ʃ", "ŋ", "ə", "ˈ", "ʰ", "e", "i", "\u{303}", "k", "x", "β", "ɣ", "o", "u", "˥", "m"]
        .iter()
        .map(|s| parse_ipa(s, &table, true).unwrap().remove(0))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut failures = Vec::new();
    for trial in 0..1000 {
        let invs: Vec<PhoneInventory> = (0..rng.gen_range(1..5)).map(|l| random_inventory(&mut rng, &pool, l)).collect();
        let v = union_vocabulary(&invs).unwrap();
        let expected: BTreeSet<String> = invs.iter().flat_map(|i| i.texts().map(str::to_string)).collect();
        let mut shuffled = invs.clone();
        shuffled.shuffle(&mut rng);
        let extra = random_inventory(&mut rng, &pool, 9);
        let mut grown = invs.clone();
        grown.push(extra);
        let g = union_vocabulary(&grown).unwrap();
        let sorted = v.non_special().windows(2).all(|w| w[0] < w[1]);
        let checks = [
            ("specials", v.entries()[..4] == SPECIALS.map(String::from)),
            ("size", v.non_special_len() == expected.len() && sorted),
            ("order", union_vocabulary(&shuffled).unwrap() == v),
            ("idempotent", union_vocabulary(&[invs[0].clone(), invs[0].clone()]).unwrap() == union_vocabulary(&invs[..1]).unwrap()),
            ("monotone", g.len() >= v.len() && v.non_special().iter().all(|t| g.id(t).is_some())),
        ];
        for (name, ok) in checks {
            if !ok {
                failures.push(format!("trial {trial}: {name}"));
            }
        }
    }
    let pass = failures.is_empty();
    report(4, pass, format!("1000 trials, {} failures {:?}", failures.len(), &failures[..failures.len().min(5)]));
    assert!(pass);
}

#[test]
fn acc05_bpe() {
    let norm = Normalizer::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let alphabet: Vec<char> = "abcdefgh".chars().collect();
    let word = |rng: &mut ChaCha8Rng| (0..rng.gen_range(1..7)).map(|_| *alphabet.choose(rng).unwrap()).collect::<String>();
    let lines: Vec<String> = (0..300).map(|_| (0..rng.gen_range(1..6)).map(|_| word(&mut rng)).collect::<Vec<_>>().join(" ")).collect();
    let model = train_bpe(&lines, 60, &norm).unwrap();
    let mut shuffled = lines.clone();
    shuffled.shuffle(&mut rng);
    let bytes = |m: &ipa_transfer::bpe::BpeModel| {
        let mut b = Vec::new();
        m.write_merges(&mut b).unwrap();
        b
    };
    let deterministic = bytes(&model) == bytes(&train_bpe(&lines, 60, &norm).unwrap())
        && bytes(&model) == bytes(&train_bpe(&shuffled, 60, &norm).unwrap());

    let mut roundtrip_failures = 0;
    for _ in 0..1000 {
        let text: String = (0..rng.gen_range(0..6))
            .map(|_| {
                let w = word(&mut rng);
                if rng.gen_bool(0.3) {
                    w.to_uppercase()
                } else {
                    w
                }
            })
            .collect::<Vec<_>>()
            .join(if rng.gen_bool(0.5) { " " } else { "  " });
        let ids = model.encode(&text);
        if ids.contains(&ipa_transfer::phoneset::UNK) || model.decode(&ids).unwrap() != norm.normalize(&text) {
            roundtrip_failures += 1;
        }
    }

    // ▁aaab ×2: (a,a)=4 → aa; then (▁,aa) (aa,a) (a,b) tie at 2 and "aaa" is
    // the smallest merged string; then (aaa,b) beats (▁,aaa); then (▁,aaab).
    let traced = train_bpe(["aaab", "aaab"], 12, &norm).unwrap();
    let merges: Vec<(&str, &str)> = traced.merges().iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
    let one = train_bpe(["aaab", "aaab"], 8, &norm).unwrap();
    let hand = merges == [("a", "a"), ("aa", "a"), ("aaa", "b"), ("▁", "aaab")]
        && one.merges() == [("a".to_string(), "a".to_string())]
        && one.segment_word("aaab") == ["▁", "aa", "a", "b"];

    let pass = deterministic && roundtrip_failures == 0 && hand;
    report(5, pass, format!("deterministic {deterministic}, round-trip failures {roundtrip_failures}/1000, hand trace {merges:?}"));
    assert!(pass);
}

/// A synthetic corpus with features and IPA loaded; returns the three
/// languages in order xa, xb, xc and their test sets.
fn load_corpus(dir: &Path, seed: u64, high: usize, low: usize) -> (Vec<LanguageData<f32>>, Vec<Vec<Transcribed<f32>>>) {
    let outs = generate(&SynthConfig::three_language(seed, high, low), dir).unwrap();
    let table = SymbolTable::default();
    let fe = LogMelConfig::default();
    let mut langs = Vec::new();
    let mut tests = Vec::new();
    for o in &outs {
        let lex = Lexicon::load(&o.lexicon, &o.code, &table).unwrap();
        let rules = RuleSet::load(&o.rules, &table).unwrap();
        let conv = Converter { lexicon: &lex, rules: &rules, policy: OovPolicy::Rules, normalizer: Normalizer::default() };
        let load = |p: &Path| load_transcribed::<f32>(&load_manifest(p).unwrap(), &fe, Some(&conv)).unwrap();
        langs.push(LanguageData { language: o.code.clone(), train: load(&o.train), dev: load(&o.dev) });
        tests.push(load(&o.test));
    }
    (langs, tests)
}

#[test]
fn acc06_transfer_contract() {
    let dir = tempfile::tempdir().unwrap();
    let (langs, _) = load_corpus(dir.path(), 6, 12, 6);
    let arch = ArchConfig { d_model: 16, d_ff: 32, enc_layers: 1, dec_layers: 1, ..ArchConfig::desk() };
    let cfg = TrainConfig { epochs: 1, average_last: 1, warmup_steps: 10, batch_frames: 1000, ..TrainConfig::default() };
    let parent = pretrain_ipa(&langs, &arch, &cfg, "fe").unwrap().checkpoint;
    let target = &langs[2];
    let bpe = train_bpe(target.train.iter().map(|u| u.text.as_str()), 40, &Normalizer::default()).unwrap();
    let step0 = TrainConfig { epochs: 0, average_last: 0, seed: 9, ..cfg.clone() };
    let ft = finetune_target(&parent, target, &bpe, &step0).unwrap().checkpoint;

    let fresh = init_params::<f32>(&ft.arch, decoder_seed(9, "xc")).unwrap();
    let mut problems = Vec::new();
    let (mut enc, mut dec) = (0, 0);
    for (name, t) in ft.params.iter() {
        if is_encoder_param(name) {
            enc += 1;
            if parent.params.get(name) != Some(t) {
                problems.push(format!("{name} changed"));
            }
        } else {
            dec += 1;
            if fresh.get(name) != Some(t) {
                problems.push(format!("{name} is not the fresh draw"));
            }
            if parent.params.get(name) == Some(t) {
                problems.push(format!("{name} copied from parent"));
            }
        }
    }
    let v = bpe.vocab().len();
    let heads_ok = ft.arch.vocab_size_out == v
        && ft.arch.vocab_size_ctc == v
        && ft.params.get("decoder.out.bias").map(|t| t.len()) == Some(v)
        && ft.params.get("ctc.bias").map(|t| t.len()) == Some(v)
        && ft.vocab == *bpe.vocab();
    let same_names = ft.params.names().filter(|n| is_encoder_param(n)).count() == parent.params.names().filter(|n| is_encoder_param(n)).count();
    let pass = problems.is_empty() && heads_ok && same_names && enc > 0 && dec > 0;
    report(6, pass, format!("{enc} encoder tensors kept, {dec} decoder/head tensors fresh, heads sized {v}; {problems:?}"));
    assert!(pass);
}

#[test]
fn acc07_recipe_constants_from_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = corpus(dir.path(), 6, 4, |t| {
        for section in ["pretrain", "finetune", "adapt"] {
            t.remove(section);
        }
        set(t, "arch", "d_model", 16);
        set(t, "arch", "d_ff", 16);
        set(t, "arch", "enc_layers", 1);
        set(t, "arch", "dec_layers", 1);
        set(t, "bpe", "target_size", 40);
    });
    let c = cfg.to_str().unwrap();
    for args in [
        vec!["g2p", "--config", c],
        vec!["train-ipa", "--config", c],
        vec!["adapt", "--config", c, "--lang", "xc"],
        vec!["bpe-train", "--config", c, "--lang", "xc"],
        vec!["finetune", "--config", c, "--lang", "xc", "--parent", "adapt-xc"],
    ] {
        ok(&args);
    }
    let run = dir.path().join("runs/synth");
    let train_of = |stage: &str| -> toml::Table {
        let snap: toml::Table = std::fs::read_to_string(run.join(stage).join("config.snapshot")).unwrap().parse().unwrap();
        snap["train"].as_table().unwrap().clone()
    };
    let f = |t: &toml::Table, k: &str| t[k].as_float().unwrap();
    let i = |t: &toml::Table, k: &str| t[k].as_integer().unwrap();
    let mut problems = Vec::new();
    let mut check = |what: &str, ok: bool| {
        if !ok {
            problems.push(what.to_string());
        }
    };
    for stage in ["train-ipa", "finetune-xc-adapt-xc"] {
        let t = train_of(stage);
        check(&format!("{stage} λ"), f(&t, "ctc_weight") == 0.1);
        check(&format!("{stage} peak lr"), f(&t, "peak_lr") == 1e-3);
        check(&format!("{stage} warmup"), i(&t, "warmup_steps") == 2000);
        check(&format!("{stage} epochs"), i(&t, "epochs") == 60 && i(&t, "average_last") == 10);
        let m = metrics(&run.join(stage).join("metrics.jsonl"));
        let epochs = m.iter().filter(|r| r["kind"] == "epoch").count();
        check(&format!("{stage} ran 60 epochs"), epochs == 60);
        let sched = m
            .iter()
            .filter(|r| r["kind"] == "step")
            .all(|r| close(r["lr"].as_f64().unwrap(), lr_at(r["step"].as_u64().unwrap(), 1e-3, 2000).unwrap()));
        check(&format!("{stage} warmup schedule"), sched);
        let ck = Checkpoint::<f32>::load(&run.join(stage).join("checkpoint.bin"), None).unwrap();
        check(&format!("{stage} averaged 51..=60"), ck.averaged_epochs == (51..=60).collect::<Vec<_>>());
    }
    let t = train_of("adapt-xc");
    check("adapt lr", f(&t, "peak_lr") == ADAPT_LR && ADAPT_LR == 5e-5);
    check("adapt epochs", i(&t, "epochs") == 2 && ADAPT_EPOCHS == 2 && t["constant_lr"].as_bool() == Some(true));
    let m = metrics(&run.join("adapt-xc/metrics.jsonl"));
    check("adapt ran 2 epochs", m.iter().filter(|r| r["kind"] == "epoch").count() == 2);
    check("adapt lr constant", m.iter().filter(|r| r["kind"] == "step").all(|r| close(r["lr"].as_f64().unwrap(), 5e-5)));
    let pass = problems.is_empty();
    report(7, pass, format!("λ=0.1 lr=1e-3 warmup=2000 avg last 10 of 60, adapt 5e-5 x2; problems {problems:?}"));
    assert!(pass);
}

/// Equality up to the last digit lost in a JSON text round trip.
fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-15 * b.abs()
}

fn wer(ck: &Checkpoint<f32>, test: &[Transcribed<f32>], beam: usize, phones: bool) -> f64 {
    let mut refs = Vec::new();
    let mut hyps = Vec::new();
    for u in test {
        let h = decode_utterance(&ck.params, &ck.arch, &ck.vocab, &u.features, beam, 1.0).unwrap();
        refs.push((u.id.clone(), if phones { u.ipa.clone() } else { u.text.clone() }));
        hyps.push((u.id.clone(), h.text));
    }
    let unit = if phones { ScoreUnit::Phone } else { ScoreUnit::Word };
    score_corpus(&refs, &hyps, unit, &Normalizer::default()).unwrap().error_rate
}

#[test]
fn acc08_directional_synthetic_replication() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let recipe = DeskRecipe::synthetic();
    let (langs, tests) = load_corpus(dir.path(), 1, 2000, 100);
    let pre = pretrain_ipa(&langs, &recipe.arch, &recipe.pretrain, "synthetic").unwrap().checkpoint;
    let (target, test) = (&langs[2], &tests[2]);
    let bpe = train_bpe(target.train.iter().map(|u| u.text.as_str()), recipe.bpe_size, &Normalizer::default()).unwrap();
    let unadapted_per = wer(&pre, test, recipe.beam, true);
    let (mut ft_wins, mut adapt_ok, mut per_ok) = (0, 0, 0);
    for seed in 0..5 {
        let cfg = TrainConfig { seed, ..recipe.finetune.clone() };
        let ft = finetune_target(&pre, target, &bpe, &cfg).unwrap().checkpoint;
        let bl = train_monolingual_baseline(&recipe.arch, target, &bpe, &cfg, "synthetic").unwrap().checkpoint;
        let adapted = adapt_ipa_model(&pre, target, &recipe.adapt_config(seed), ADAPT_LR, ADAPT_EPOCHS).unwrap().checkpoint;
        let adft = finetune_target(&adapted, target, &bpe, &cfg).unwrap().checkpoint;
        let (w_ft, w_bl, w_adft) = (wer(&ft, test, recipe.beam, false), wer(&bl, test, recipe.beam, false), wer(&adft, test, recipe.beam, false));
        let per = wer(&adapted, test, recipe.beam, true);
        ft_wins += usize::from(w_ft <= w_bl);
        adapt_ok += usize::from(w_adft <= w_ft);
        per_ok += usize::from(per <= unadapted_per);
        println!("seed {seed}: WER finetuned {w_ft:.3} baseline {w_bl:.3} adapted+finetuned {w_adft:.3}; PER unadapted {unadapted_per:.3} adapted {per:.3}");
    }
    let elapsed = start.elapsed();
    let pass = ft_wins >= 4 && adapt_ok >= 3 && elapsed < Duration::from_secs(30 * 60);
    report(
        8,
        pass,
        format!("finetuned<=baseline {ft_wins}/5, adapted<=unadapted WER {adapt_ok}/5, adapted PER<=unadapted {per_ok}/5, {elapsed:.0?}"),
    );
    assert!(pass);
}

#[test]
fn acc09_tsne_purity_and_fixed_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let centers = [[0.0, 0.0, 0.0, 0.0, 0.0], [10.0, 0.0, 5.0, 0.0, 0.0], [0.0, 10.0, 0.0, -5.0, 3.0]];
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..100 {
            data.extend(center.iter().map(|m| m + rng.gen_range(-0.5..0.5)));
            labels.push(format!("c{c}"));
        }
    }
    let out = tsne(&Tensor64::new(vec![300, 5], data).unwrap(), &TsneConfig::default()).unwrap();
    let purity = knn_purity(&out.points, &labels, 10);

    let dir = tempfile::tempdir().unwrap();
    let (langs, _) = load_corpus(dir.path(), 2, 10, 10);
    let arch = ArchConfig { d_model: 16, d_ff: 32, enc_layers: 1, dec_layers: 1, ..ArchConfig::desk() }.with_vocab(10);
    let utts: Vec<Vec<(String, Tensor64)>> =
        langs.iter().map(|l| l.train.iter().map(|u| (u.id.clone(), u.features.cast::<f64>())).collect()).collect();
    let frames: Vec<LanguageFrames<'_, f64>> =
        langs.iter().zip(&utts).map(|(l, u)| LanguageFrames { language: &l.language, utterances: u }).collect();
    let a = extract_frame_embeddings(&init_params::<f64>(&arch, 1).unwrap(), &arch, &frames, 50, 7).unwrap();
    let b = extract_frame_embeddings(&init_params::<f64>(&arch, 2).unwrap(), &arch, &frames, 50, 7).unwrap();
    let fixed = a.frames == b.frames && a.labels == b.labels && a.matrix != b.matrix && a.frames.len() == 150;
    let pass = purity >= 0.9 && fixed;
    report(9, pass, format!("3-cluster kNN(10) purity {purity:.3}, same {} frames across two checkpoints: {fixed}", a.frames.len()));
    assert!(pass);
}

#[test]
fn acc10_end_to_end_determinism() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let cfg = corpus(d.path(), 60, 30, shrink);
        let c = cfg.to_str().unwrap();
        pipeline(&cfg);
        ok(&["finetune", "--config", c, "--lang", "xc", "--parent", "adapt-xc"]);
        ok(&["baseline", "--config", c, "--lang", "xc"]);
        let run = d.path().join("runs/synth");
        for stage in ["finetune-xc-adapt-xc", "baseline-xc"] {
            ok(&["decode", "--config", c, "--stage", stage]);
            score_stage(&run, stage);
        }
        score_stage(&run, "finetune-xc");
    }
    let mut differing = Vec::new();
    let mut compared = 0;
    for stage in ["train-ipa", "adapt-xc", "finetune-xc", "finetune-xc-adapt-xc", "baseline-xc"] {
        let mut files = vec!["checkpoint.bin", "metrics.jsonl", "vocab.txt"];
        if stage.starts_with("finetune") || stage.starts_with("baseline") {
            files.extend(["hyps-xc-test.jsonl", "report.json"]);
        }
        for f in files {
            let rel = Path::new(stage).join(f);
            let x = std::fs::read(a.path().join("runs/synth").join(&rel)).unwrap();
            let y = std::fs::read(b.path().join("runs/synth").join(&rel)).unwrap();
            compared += 1;
            if x != y {
                differing.push(rel.display().to_string());
            }
        }
    }
    for f in ["bpe-xc/merges.txt", "bpe-xc/vocab.txt"] {
        compared += 1;
        if std::fs::read(a.path().join("runs/synth").join(f)).unwrap() != std::fs::read(b.path().join("runs/synth").join(f)).unwrap() {
            differing.push(f.to_string());
        }
    }
    let pass = differing.is_empty();
    report(10, pass, format!("{compared} artifacts compared across two runs, differing {differing:?}"));
    assert!(pass);
}
