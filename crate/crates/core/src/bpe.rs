//! Byte-pair-encoding subword tokenizer for target-language transcripts.
//!
//! Each word is split into characters behind a word-boundary marker unit
//! (`▁`), so `"ab cd"` starts as `▁ a b ▁ c d`. Training greedily merges the
//! most frequent adjacent pair; ties go to the lexicographically smallest
//! merged string, then to the smallest `(left, right)` pair.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use thiserror::Error;

use crate::phoneset::{PhonesetError, VocabKind, Vocabulary, BLANK, PAD, SOS_EOS, SPECIALS, UNK};
use crate::text::Normalizer;

pub const WORD_BOUNDARY: char = '▁';
pub const DEFAULT_TARGET_SIZE: usize = 5000;

#[derive(Debug, Error)]
pub enum BpeError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("target size {target} must exceed alphabet ({alphabet}) plus {} specials", SPECIALS.len())]
    TargetTooSmall { target: usize, alphabet: usize },
    #[error("token id {0} out of range")]
    IdOutOfRange(usize),
    #[error("merges line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Vocab(#[from] PhonesetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    vocab: Vocabulary,
    normalizer: Normalizer,
}

impl PartialEq for BpeModel {
    fn eq(&self, other: &Self) -> bool {
        self.merges == other.merges && self.vocab == other.vocab
    }
}

fn initial_units(word: &str) -> Vec<String> {
    std::iter::once(WORD_BOUNDARY.to_string()).chain(word.chars().map(|c| c.to_string())).collect()
}

fn merge_pair(units: &[String], left: &str, right: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(units.len());
    let mut i = 0;
    while i < units.len() {
        if i + 1 < units.len() && units[i] == left && units[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(units[i].clone());
            i += 1;
        }
    }
    out
}

fn corpus_words(corpus: impl IntoIterator<Item = impl AsRef<str>>, normalizer: &Normalizer) -> BTreeMap<String, u64> {
    let mut freq = BTreeMap::new();
    for line in corpus {
        let line = line.as_ref().replace(WORD_BOUNDARY, " ");
        for w in normalizer.words(&line) {
            *freq.entry(w).or_insert(0u64) += 1;
        }
    }
    freq
}

/// Trains merges until the vocabulary (specials included) reaches
/// `target_size` or no pair occurs at least twice.
pub fn train_bpe(
    corpus: impl IntoIterator<Item = impl AsRef<str>>,
    target_size: usize,
    normalizer: &Normalizer,
) -> Result<BpeModel, BpeError> {
    let freq = corpus_words(corpus, normalizer);
    if freq.is_empty() {
        return Err(BpeError::EmptyCorpus);
    }
    let mut words: Vec<(Vec<String>, u64)> = freq.iter().map(|(w, &n)| (initial_units(w), n)).collect();
    let mut alphabet: Vec<String> = words.iter().flat_map(|(u, _)| u.iter().cloned()).collect();
    alphabet.sort();
    alphabet.dedup();
    if target_size <= alphabet.len() + SPECIALS.len() {
        return Err(BpeError::TargetTooSmall { target: target_size, alphabet: alphabet.len() });
    }

    let mut tokens = alphabet;
    let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
    let mut merges = Vec::new();
    while tokens.len() + SPECIALS.len() < target_size {
        let mut counts: HashMap<(&str, &str), u64> = HashMap::new();
        for (units, n) in &words {
            for pair in units.windows(2) {
                *counts.entry((pair[0].as_str(), pair[1].as_str())).or_insert(0) += n;
            }
        }
        let best = counts
            .into_iter()
            .filter(|&(_, c)| c >= 2)
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb)
                    .then_with(|| {
                        let ma = format!("{}{}", pa.0, pa.1);
                        let mb = format!("{}{}", pb.0, pb.1);
                        mb.cmp(&ma)
                    })
                    .then_with(|| pb.cmp(pa))
            })
            .map(|((l, r), _)| (l.to_string(), r.to_string()));
        let Some((left, right)) = best else { break };
        for (units, _) in &mut words {
            if units.len() > 1 {
                *units = merge_pair(units, &left, &right);
            }
        }
        let merged = format!("{left}{right}");
        if seen.insert(merged.clone()) {
            tokens.push(merged);
        }
        merges.push((left, right));
    }
    log::debug!("bpe: {} merges, vocab {}", merges.len(), tokens.len() + SPECIALS.len());
    Ok(BpeModel::from_parts(merges, Vocabulary::from_tokens(VocabKind::Bpe, tokens), normalizer.clone()))
}

impl BpeModel {
    pub fn from_parts(merges: Vec<(String, String)>, vocab: Vocabulary, normalizer: Normalizer) -> Self {
        let ranks = merges.iter().cloned().enumerate().map(|(i, p)| (p, i)).collect();
        Self { merges, ranks, vocab, normalizer }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    /// Segments one normalized word by applying merges in training order.
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let mut units = initial_units(word);
        loop {
            let best = units
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0].clone(), p[1].clone())).map(|&r| (r, p)))
                .min_by_key(|(r, _)| *r)
                .map(|(_, p)| (p[0].clone(), p[1].clone()));
            match best {
                Some((l, r)) => units = merge_pair(&units, &l, &r),
                None => return units,
            }
        }
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        let text = text.replace(WORD_BOUNDARY, " ");
        self.normalizer
            .words(&text)
            .iter()
            .flat_map(|w| self.segment_word(w))
            .map(|u| self.vocab.id_or_unk(&u))
            .collect()
    }

    /// Inverse of [`encode`](Self::encode). `<unk>` renders literally;
    /// blank, `<sos/eos>` and padding are dropped.
    pub fn decode(&self, ids: &[usize]) -> Result<String, BpeError> {
        let mut s = String::new();
        for &id in ids {
            let tok = self.vocab.token(id).ok_or(BpeError::IdOutOfRange(id))?;
            match id {
                BLANK | SOS_EOS | PAD => {}
                UNK => s.push_str(tok),
                _ => s.push_str(tok),
            }
        }
        let spaced = s.replace(WORD_BOUNDARY, " ");
        Ok(spaced.split_whitespace().collect::<Vec<_>>().join(" "))
    }

    pub fn write_merges<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (l, r) in &self.merges {
            writeln!(w, "{l} {r}")?;
        }
        Ok(())
    }

    pub fn save(&self, merges_path: &Path, vocab_path: &Path) -> Result<(), BpeError> {
        let mut buf = Vec::new();
        self.write_merges(&mut buf)?;
        std::fs::write(merges_path, buf)?;
        let norm = self.normalizer.punctuation.clone();
        self.vocab.save(vocab_path, &[("merges", &self.merges.len().to_string()), ("strip", &norm)])?;
        Ok(())
    }

    pub fn read_merges<R: BufRead>(r: R) -> Result<Vec<(String, String)>, BpeError> {
        let mut out = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (l, rr) = line
                .split_once(' ')
                .ok_or_else(|| BpeError::Parse { line: i + 1, msg: "expected 'left right'".into() })?;
            out.push((l.to_string(), rr.to_string()));
        }
        Ok(out)
    }

    pub fn load(merges_path: &Path, vocab_path: &Path, normalizer: Normalizer) -> Result<Self, BpeError> {
        let f = std::fs::File::open(merges_path)?;
        let merges = Self::read_merges(std::io::BufReader::new(f))?;
        let vocab = Vocabulary::load(vocab_path)?;
        Ok(Self::from_parts(merges, vocab, normalizer))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn train(corpus: &[&str], target: usize) -> BpeModel {
        train_bpe(corpus.iter().copied(), target, &Normalizer::default()).unwrap()
    }

    #[test]
    fn most_frequent_pair_merges_first() {
        // ▁aaab twice: (a,a)=4, (▁,a)=2, (a,b)=2
        let m = train(&["aaab", "aaab"], 8);
        assert_eq!(m.merges()[0], ("a".to_string(), "a".to_string()));
        assert!(m.vocab().len() <= 8);
    }

    #[test]
    fn hand_traced_merges() {
        // words: ▁ab ×3, ▁abc ×2, ▁bc ×1
        // round 1: (a,b)=5, (▁,a)=5, (b,c)=3 → tie at 5, "ab" < "▁a"
        // round 2: (▁,ab)=5, (ab,c)=2, (▁,b)=1, (b,c)=1 → ▁ab
        // round 3: (▁ab,c)=2 → ▁abc
        let m = train(&["ab ab abc", "ab abc bc"], 100);
        let merges: Vec<(&str, &str)> = m.merges().iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        assert_eq!(merges, [("a", "b"), ("▁", "ab"), ("▁ab", "c")]);
        assert_eq!(m.segment_word("bc"), ["▁", "b", "c"]);
    }

    #[test]
    fn single_character_word_has_no_merges() {
        let m = train(&["a"], 10);
        assert!(m.merges().is_empty());
        assert_eq!(m.vocab().non_special(), ["a", "▁"]);
    }

    #[test]
    fn errors() {
        assert!(matches!(train_bpe(Vec::<&str>::new(), 10, &Normalizer::default()), Err(BpeError::EmptyCorpus)));
        assert!(matches!(train_bpe([" ,. "], 10, &Normalizer::default()), Err(BpeError::EmptyCorpus)));
        assert!(matches!(
            train_bpe(["abc"], 7, &Normalizer::default()),
            Err(BpeError::TargetTooSmall { .. })
        ));
    }

    #[test]
    fn encode_decode() {
        let m = train(&["aaab", "aaab", "ba ab"], 20);
        assert!(m.encode("").is_empty());
        assert_eq!(m.decode(&[]).unwrap(), "");
        assert_eq!(m.decode(&m.encode("aaab")).unwrap(), "aaab");
        assert_eq!(m.decode(&m.encode("  Ba,  AB ")).unwrap(), "ba ab");
        let with_unk = m.encode("abz");
        assert!(with_unk.contains(&UNK));
        assert_eq!(m.decode(&with_unk).unwrap(), "ab<unk>");
        assert!(matches!(m.decode(&[999]), Err(BpeError::IdOutOfRange(999))));
    }

    #[test]
    fn corpus_order_does_not_matter() {
        let a = train(&["the cat", "a cat sat", "the mat"], 30);
        let b = train(&["the mat", "the cat", "a cat sat"], 30);
        assert_eq!(a, b);
    }

    #[test]
    fn merges_and_vocab_files_roundtrip() {
        let m = train(&["aaab", "aaab", "ba ab"], 20);
        let dir = tempfile::tempdir().unwrap();
        let (mp, vp) = (dir.path().join("merges.txt"), dir.path().join("vocab.txt"));
        m.save(&mp, &vp).unwrap();
        let back = BpeModel::load(&mp, &vp, Normalizer::default()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.encode("aaab ba"), m.encode("aaab ba"));
    }
}
