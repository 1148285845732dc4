//! Decoding (attention beam search, CTC greedy) and WER/PER scoring.

use std::cmp::Ordering;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tensor, Var};
use crate::bpe::WORD_BOUNDARY;
use crate::model::{ArchConfig, DecoderCache, ModelError, ModelParams, Session};
use crate::phoneset::{parse_ipa, PhonesetError, SymbolTable, VocabKind, Vocabulary, BLANK, PAD, SOS_EOS, UNK};
use crate::scalar::Scalar;
use crate::text::Normalizer;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("encoder output is empty")]
    EmptyEncoding,
    #[error("beam size must be at least 1")]
    BadBeam,
    #[error("reference is empty")]
    EmptyReference,
    #[error("entry {index}: reference id {reference:?} vs hypothesis id {hypothesis:?}")]
    IdMismatch { index: usize, reference: String, hypothesis: String },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Phoneset(#[from] PhonesetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A finished decoder output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Emitted ids, ending with `<sos/eos>`.
    pub tokens: Vec<usize>,
    pub text: String,
    pub score: f64,
    pub token_scores: Vec<f64>,
}

/// Supplies next-token log-probabilities for beam search. `State` carries
/// whatever incremental computation the scorer keeps per hypothesis.
pub trait StepScorer {
    type State: Clone;

    fn initial_state(&mut self) -> Result<Self::State, EvalError>;

    /// Log-probabilities for the token after `prefix` (which starts with
    /// `<sos/eos>`), advancing `state` to cover `prefix`.
    fn next_log_probs(&mut self, state: &mut Self::State, prefix: &[usize]) -> Result<Vec<f64>, EvalError>;
}

/// The attention decoder over one encoded utterance.
pub struct ModelScorer<'a, T: Scalar> {
    session: Session<'a, T>,
    enc: Var,
}

impl<'a, T: Scalar> ModelScorer<'a, T> {
    pub fn new(params: &'a ModelParams<T>, arch: &'a ArchConfig, enc_out: &Tensor<T>) -> Self {
        let mut session = Session::inference(params, arch);
        let enc = session.tape.constant(enc_out.clone());
        Self { session, enc }
    }
}

fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - z).collect()
}

impl<T: Scalar> StepScorer for ModelScorer<'_, T> {
    type State = DecoderCache;

    fn initial_state(&mut self) -> Result<DecoderCache, EvalError> {
        Ok(self.session.new_cache(self.enc)?)
    }

    fn next_log_probs(&mut self, state: &mut DecoderCache, prefix: &[usize]) -> Result<Vec<f64>, EvalError> {
        let logits = self.session.decode_step(prefix, state)?;
        Ok(log_softmax(&logits.iter().map(|x| x.to_f64c()).collect::<Vec<_>>()))
    }
}

struct Beam<S> {
    prefix: Vec<usize>,
    score: f64,
    token_scores: Vec<f64>,
    state: S,
}

fn by_score_then_tokens(a: (f64, &[usize]), b: (f64, &[usize])) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Length-bounded beam search without any external language model.
///
/// At most `floor(max_len_ratio · enc_frames)` tokens (at least one) are
/// emitted before `<sos/eos>` is forced. Scores are summed log-probabilities
/// with no length normalization; ties prefer the lexicographically smaller
/// token sequence. `beam_size == 1` is greedy decoding.
pub fn beam_search<S: StepScorer>(
    scorer: &mut S,
    enc_frames: usize,
    beam_size: usize,
    max_len_ratio: f64,
    max_prefix: usize,
) -> Result<Hypothesis, EvalError> {
    if enc_frames == 0 {
        return Err(EvalError::EmptyEncoding);
    }
    if beam_size == 0 {
        return Err(EvalError::BadBeam);
    }
    let max_tokens = ((max_len_ratio * enc_frames as f64).floor() as usize).max(1).min(max_prefix.saturating_sub(1).max(1));
    let mut beams = vec![Beam { prefix: vec![SOS_EOS], score: 0.0, token_scores: Vec::new(), state: scorer.initial_state()? }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 0..=max_tokens {
        let mut cands: Vec<(f64, Vec<usize>, usize, f64)> = Vec::new();
        for (bi, b) in beams.iter_mut().enumerate() {
            let lp = scorer.next_log_probs(&mut b.state, &b.prefix)?;
            if step == max_tokens {
                cands.push((b.score + lp[SOS_EOS], b.prefix.clone(), bi, lp[SOS_EOS]));
                continue;
            }
            let mut order: Vec<usize> = (0..lp.len()).filter(|&k| k != BLANK && k != PAD).collect();
            order.sort_by(|&x, &y| lp[y].total_cmp(&lp[x]).then(x.cmp(&y)));
            for &k in order.iter().take(beam_size) {
                let mut p = b.prefix.clone();
                p.push(k);
                cands.push((b.score + lp[k], p, bi, lp[k]));
            }
        }
        if step == max_tokens {
            for (score, prefix, bi, lp) in cands {
                let mut tokens = prefix[1..].to_vec();
                tokens.push(SOS_EOS);
                let mut ts = beams[bi].token_scores.clone();
                ts.push(lp);
                finished.push(Hypothesis { tokens, text: String::new(), score, token_scores: ts });
            }
            break;
        }
        cands.sort_by(|a, b| by_score_then_tokens((a.0, &a.1), (b.0, &b.1)));
        cands.truncate(beam_size);
        let mut next = Vec::new();
        for (score, prefix, bi, lp) in cands {
            let mut ts = beams[bi].token_scores.clone();
            ts.push(lp);
            if *prefix.last().expect("non-empty") == SOS_EOS {
                finished.push(Hypothesis { tokens: prefix[1..].to_vec(), text: String::new(), score, token_scores: ts });
            } else {
                next.push(Beam { prefix, score, token_scores: ts, state: beams[bi].state.clone() });
            }
        }
        beams = next;
        let best_done = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        let best_open = beams.iter().map(|b| b.score).fold(f64::NEG_INFINITY, f64::max);
        // Log-probabilities are non-positive, so open beams can only get worse.
        if beams.is_empty() || (finished.len() >= beam_size && best_done >= best_open) {
            break;
        }
    }
    finished
        .into_iter()
        .min_by(|a, b| by_score_then_tokens((a.score, &a.tokens), (b.score, &b.tokens)))
        .ok_or(EvalError::EmptyEncoding)
}

/// Ids to text: BPE pieces are concatenated with `▁` as word breaks, IPA
/// tokens are space-separated. Blank, `<sos/eos>` and padding are dropped.
pub fn detokenize(vocab: &Vocabulary, ids: &[usize]) -> String {
    let toks: Vec<&str> = ids
        .iter()
        .filter(|&&i| i != BLANK && i != SOS_EOS && i != PAD)
        .map(|&i| vocab.token(i).unwrap_or(crate::phoneset::SPECIALS[UNK]))
        .collect();
    match vocab.kind() {
        VocabKind::Ipa => toks.join(" "),
        VocabKind::Bpe => toks.concat().replace(WORD_BOUNDARY, " ").split_whitespace().collect::<Vec<_>>().join(" "),
    }
}

/// Encodes one utterance and beam-decodes it.
pub fn decode_utterance<T: Scalar>(
    params: &ModelParams<T>,
    arch: &ArchConfig,
    vocab: &Vocabulary,
    features: &Tensor<T>,
    beam_size: usize,
    max_len_ratio: f64,
) -> Result<Hypothesis, EvalError> {
    let mut s = Session::inference(params, arch);
    let frames = features.shape()[0];
    let enc = s.encode(features, frames)?;
    let enc_out = s.tape.value(enc).clone();
    let mut scorer = ModelScorer::new(params, arch, &enc_out);
    let mut hyp = beam_search(&mut scorer, enc_out.shape()[0], beam_size, max_len_ratio, arch.max_dec_len)?;
    hyp.text = detokenize(vocab, &hyp.tokens);
    Ok(hyp)
}

/// Framewise argmax, repeats collapsed, blanks removed.
pub fn ctc_greedy<T: Scalar>(log_probs: &Tensor<T>) -> Vec<usize> {
    let v = log_probs.shape().get(1).copied().unwrap_or(0);
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..log_probs.shape()[0] {
        let row = log_probs.row(t);
        let best = (0..v).fold(0, |b, k| if row[k] > row[b] { k } else { b });
        if Some(best) != prev && best != BLANK {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum AlignOp {
    Match { r: String, h: String },
    Sub { r: String, h: String },
    Del { r: String },
    Ins { h: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ops: Vec<AlignOp>,
}

impl Alignment {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

fn edit_table<S: PartialEq>(r: &[S], h: &[S]) -> Vec<Vec<usize>> {
    let mut d = vec![vec![0usize; h.len() + 1]; r.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=h.len() {
        d[0][j] = j;
    }
    for i in 1..=r.len() {
        for j in 1..=h.len() {
            let sub = d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d
}

/// Unit-cost Levenshtein distance.
pub fn edit_distance<S: PartialEq>(a: &[S], b: &[S]) -> usize {
    edit_table(a, b)[a.len()][b.len()]
}

/// Minimum-cost alignment. When several back-pointers are optimal the
/// trace prefers substitution (or match), then deletion, then insertion.
pub fn edit_distance_align<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> Result<Alignment, EvalError> {
    if reference.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    let r: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    let h: Vec<&str> = hypothesis.iter().map(AsRef::as_ref).collect();
    let d = edit_table(&r, &h);
    let (mut i, mut j) = (r.len(), h.len());
    let mut ops = Vec::new();
    let (mut s, mut ins, mut del) = (0, 0, 0);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]) {
            if r[i - 1] == h[j - 1] {
                ops.push(AlignOp::Match { r: r[i - 1].into(), h: h[j - 1].into() });
            } else {
                s += 1;
                ops.push(AlignOp::Sub { r: r[i - 1].into(), h: h[j - 1].into() });
            }
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            del += 1;
            ops.push(AlignOp::Del { r: r[i - 1].into() });
            i -= 1;
        } else {
            ins += 1;
            ops.push(AlignOp::Ins { h: h[j - 1].into() });
            j -= 1;
        }
    }
    ops.reverse();
    Ok(Alignment { substitutions: s, insertions: ins, deletions: del, ops })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreUnit {
    Word,
    Phone,
}

impl std::str::FromStr for ScoreUnit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "word" => Ok(ScoreUnit::Word),
            "phone" => Ok(ScoreUnit::Phone),
            _ => Err(format!("unknown unit {s:?} (word|phone)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub id: String,
    pub reference: Vec<String>,
    pub hypothesis: Vec<String>,
    pub alignment: Alignment,
}

/// Pooled error counts over a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub unit: ScoreUnit,
    pub normalization: String,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_tokens: usize,
    /// `(S + I + D) / reference_tokens`; WER for words, PER for phones.
    pub error_rate: f64,
    pub utterances: Vec<UtteranceScore>,
}

fn units(text: &str, unit: ScoreUnit, normalizer: &Normalizer, table: &SymbolTable) -> Result<Vec<String>, EvalError> {
    match unit {
        ScoreUnit::Word => Ok(normalizer.words(text)),
        ScoreUnit::Phone => Ok(parse_ipa(text, table, true)?.into_iter().map(|t| t.text).collect()),
    }
}

/// Scores `(id, text)` hypotheses against references in the same order.
/// Words are normalized like g2p input; phones are parsed IPA tokens.
pub fn score_corpus(
    references: &[(String, String)],
    hypotheses: &[(String, String)],
    unit: ScoreUnit,
    normalizer: &Normalizer,
) -> Result<ScoreReport, EvalError> {
    if references.len() != hypotheses.len() {
        let i = references.len().min(hypotheses.len());
        return Err(EvalError::IdMismatch {
            index: i,
            reference: references.get(i).map(|r| r.0.clone()).unwrap_or_default(),
            hypothesis: hypotheses.get(i).map(|h| h.0.clone()).unwrap_or_default(),
        });
    }
    let table = SymbolTable::default();
    let mut utterances = Vec::with_capacity(references.len());
    let (mut s, mut i, mut d, mut n) = (0, 0, 0, 0);
    for (index, ((rid, rtext), (hid, htext))) in references.iter().zip(hypotheses).enumerate() {
        if rid != hid {
            return Err(EvalError::IdMismatch { index, reference: rid.clone(), hypothesis: hid.clone() });
        }
        let r = units(rtext, unit, normalizer, &table)?;
        let h = units(htext, unit, normalizer, &table)?;
        let a = edit_distance_align(&r, &h)?;
        s += a.substitutions;
        i += a.insertions;
        d += a.deletions;
        n += r.len();
        utterances.push(UtteranceScore { id: rid.clone(), reference: r, hypothesis: h, alignment: a });
    }
    if n == 0 {
        return Err(EvalError::EmptyReference);
    }
    let normalization = match unit {
        ScoreUnit::Word => normalizer.describe(),
        ScoreUnit::Phone => "ipa tokens (NFD, modifiers separate)".to_string(),
    };
    Ok(ScoreReport {
        unit,
        normalization,
        substitutions: s,
        insertions: i,
        deletions: d,
        reference_tokens: n,
        error_rate: (s + i + d) as f64 / n as f64,
        utterances,
    })
}

#[derive(Serialize, Deserialize)]
struct HypRecord {
    id: String,
    text: String,
    score: f64,
}

/// JSON-lines `{id, text, score}`.
pub fn write_hypotheses<W: Write>(mut w: W, hyps: &[(String, Hypothesis)]) -> Result<(), EvalError> {
    for (id, h) in hyps {
        let rec = HypRecord { id: id.clone(), text: h.text.clone(), score: h.score };
        serde_json::to_writer(&mut w, &rec).map_err(|e| EvalError::Parse { line: 0, msg: e.to_string() })?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads `(id, text)` pairs from a hypothesis file.
pub fn read_hypotheses<R: BufRead>(r: R) -> Result<Vec<(String, String)>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: HypRecord = serde_json::from_str(&line).map_err(|e| EvalError::Parse { line: i + 1, msg: e.to_string() })?;
        out.push((rec.id, rec.text));
    }
    Ok(out)
}

pub fn save_report(path: &Path, report: &ScoreReport) -> Result<(), EvalError> {
    let json = serde_json::to_string_pretty(report).map_err(|e| EvalError::Parse { line: 0, msg: e.to_string() })?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}
