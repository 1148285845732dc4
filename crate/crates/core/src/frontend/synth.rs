//! Synthetic multilingual corpus with a shared phone-to-acoustics mapping.
//!
//! Every phone has one spectral template used by all languages, so phones
//! shared between inventories sound alike everywhere. Each language has
//! its own inventory, syllable shape, lexicon and spelling, which gives the
//! decoder something language-specific to learn. Long vowels are written
//! as a base vowel plus `ː` and last longer.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::features::FeatureMatrix;
use super::manifest::{save_manifest, AudioSource, Utterance};
use super::FrontendError;
use crate::g2p::RuleSet;
use crate::seed::derive_seed;

/// Phones available to synthetic languages, with a default spelling.
pub const PHONES: &[(&str, &str)] = &[
    ("p", "p"),
    ("t", "t"),
    ("k", "k"),
    ("b", "b"),
    ("d", "d"),
    ("g", "g"),
    ("m", "m"),
    ("n", "n"),
    ("ŋ", "ng"),
    ("f", "f"),
    ("s", "s"),
    ("ʃ", "sh"),
    ("z", "z"),
    ("l", "l"),
    ("r", "r"),
    ("j", "y"),
    ("w", "w"),
    ("t͡ʃ", "ch"),
    ("a", "a"),
    ("e", "e"),
    ("i", "i"),
    ("o", "o"),
    ("u", "u"),
    ("ə", "e"),
    ("β", "v"),
    ("ɣ", "h"),
];

const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ə"];
const LENGTH_MARK: &str = "ː";

/// One synthetic language.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthLanguage {
    pub code: String,
    pub consonants: Vec<String>,
    pub vowels: Vec<String>,
    /// Vowels that also occur long.
    pub long_vowels: Vec<String>,
    /// Spelling overrides, `phone → graphemes`; long vowels use `phoneː`.
    pub spelling: Vec<(String, String)>,
    /// Allow a closing consonant in syllables.
    pub closed_syllables: bool,
    pub lexicon_size: usize,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub languages: Vec<SynthLanguage>,
    pub feat_dim: usize,
    pub seed: u64,
    pub min_frames_per_phone: usize,
    pub max_frames_per_phone: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub noise_std: f64,
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

fn spell(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
    pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
}

impl SynthConfig {
    /// Two high-resource languages and one low-resource language whose
    /// inventory is almost covered by the other two.
    pub fn three_language(seed: u64, high: usize, low: usize) -> Self {
        Self {
            languages: vec![
                SynthLanguage {
                    code: "xa".into(),
                    consonants: strings(&["p", "t", "k", "m", "n", "s", "ʃ", "l", "f", "j"]),
                    vowels: strings(&["a", "e", "i", "o", "u"]),
                    long_vowels: strings(&["a", "i"]),
                    spelling: spell(&[("k", "c"), ("i", "y"), ("j", "j"), ("aː", "aa"), ("iː", "yy")]),
                    closed_syllables: false,
                    lexicon_size: 150,
                    n_train: high,
                    n_dev: 40,
                    n_test: 40,
                },
                SynthLanguage {
                    code: "xb".into(),
                    consonants: strings(&["b", "d", "g", "m", "n", "ŋ", "s", "z", "r", "w", "t͡ʃ", "t"]),
                    vowels: strings(&["a", "e", "i", "o", "u", "ə"]),
                    long_vowels: strings(&["u", "o"]),
                    spelling: spell(&[("ə", "q"), ("ŋ", "x"), ("t͡ʃ", "c"), ("uː", "uh"), ("oː", "oh")]),
                    closed_syllables: true,
                    lexicon_size: 150,
                    n_train: high,
                    n_dev: 40,
                    n_test: 40,
                },
                SynthLanguage {
                    code: "xc".into(),
                    consonants: strings(&["p", "t", "k", "m", "n", "s", "r", "l", "t͡ʃ", "ʃ", "β", "ɣ"]),
                    vowels: strings(&["a", "i", "u", "ə", "o"]),
                    long_vowels: strings(&["u", "a"]),
                    spelling: spell(&[("ʃ", "x"), ("u", "ou"), ("ə", "e"), ("uː", "oo"), ("aː", "ah")]),
                    closed_syllables: true,
                    lexicon_size: 80,
                    n_train: low,
                    n_dev: 40,
                    n_test: 100,
                },
            ],
            feat_dim: 80,
            seed,
            min_frames_per_phone: 4,
            max_frames_per_phone: 6,
            min_words: 2,
            max_words: 4,
            noise_std: 0.7,
        }
    }

    pub fn validate(&self) -> Result<(), FrontendError> {
        let bad = |m: String| Err(FrontendError::BadConfig(m));
        if self.feat_dim < 8 {
            return bad("feat_dim must be at least 8".into());
        }
        if self.min_frames_per_phone == 0 || self.min_frames_per_phone > self.max_frames_per_phone {
            return bad("frames per phone range is empty".into());
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return bad("words per utterance range is empty".into());
        }
        let known: BTreeSet<&str> = PHONES.iter().map(|p| p.0).collect();
        for l in &self.languages {
            if l.consonants.is_empty() || l.vowels.is_empty() || l.lexicon_size == 0 {
                return bad(format!("language {} needs consonants, vowels and words", l.code));
            }
            if let Some(p) = l.consonants.iter().chain(&l.vowels).find(|p| !known.contains(p.as_str())) {
                return bad(format!("language {}: unknown phone {p}", l.code));
            }
            if let Some(v) = l.long_vowels.iter().find(|v| !l.vowels.contains(v)) {
                return bad(format!("language {}: long vowel {v} not in inventory", l.code));
            }
        }
        Ok(())
    }
}

/// A phone occurrence: base phone and whether it is lengthened.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Unit {
    phone: String,
    long: bool,
}

impl SynthLanguage {
    fn spelling_of(&self, u: &Unit) -> String {
        let key = if u.long { format!("{}{LENGTH_MARK}", u.phone) } else { u.phone.clone() };
        if let Some((_, g)) = self.spelling.iter().find(|(p, _)| *p == key) {
            return g.clone();
        }
        let base = PHONES.iter().find(|(p, _)| *p == u.phone).map(|(_, g)| *g).unwrap_or("?");
        if u.long {
            base.repeat(2)
        } else {
            base.to_string()
        }
    }

    fn ipa_of(units: &[Unit]) -> String {
        let mut toks = Vec::new();
        for u in units {
            toks.push(u.phone.clone());
            if u.long {
                toks.push(LENGTH_MARK.to_string());
            }
        }
        toks.join(" ")
    }

    fn make_word(&self, rng: &mut ChaCha8Rng) -> Vec<Unit> {
        let syllables = rng.gen_range(1..=3);
        let mut units = Vec::new();
        for _ in 0..syllables {
            units.push(Unit { phone: self.consonants.choose(rng).expect("non-empty").clone(), long: false });
            let v = self.vowels.choose(rng).expect("non-empty").clone();
            let long = self.long_vowels.contains(&v) && rng.gen_bool(0.25);
            units.push(Unit { phone: v, long });
            if self.closed_syllables && rng.gen_bool(0.3) {
                units.push(Unit { phone: self.consonants.choose(rng).expect("non-empty").clone(), long: false });
            }
        }
        units
    }

    /// Distinct words, each with a unique spelling that the language's own
    /// rules convert back to its pronunciation.
    fn lexicon(&self, seed: u64) -> Vec<(String, Vec<Unit>)> {
        let rules = RuleSet::new(self.rules()).expect("generated rules are non-empty");
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["lexicon", &self.code]));
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        let mut attempts = 0;
        while out.len() < self.lexicon_size && attempts < self.lexicon_size * 200 {
            attempts += 1;
            let units = self.make_word(&mut rng);
            let word: String = units.iter().map(|u| self.spelling_of(u)).collect();
            if rules.apply(&word).ok().as_deref() != Some(Self::ipa_of(&units).as_str()) {
                continue;
            }
            if seen.insert(word.clone()) {
                out.push((word, units));
            }
        }
        out
    }

    /// Grapheme rules covering every spelling of this language.
    fn rules(&self) -> Vec<(String, String)> {
        let mut rules = BTreeSet::new();
        for p in self.consonants.iter().chain(&self.vowels) {
            let u = Unit { phone: p.clone(), long: false };
            rules.insert((self.spelling_of(&u), Self::ipa_of(std::slice::from_ref(&u))));
        }
        for v in &self.long_vowels {
            let u = Unit { phone: v.clone(), long: true };
            rules.insert((self.spelling_of(&u), Self::ipa_of(std::slice::from_ref(&u))));
        }
        rules.into_iter().collect()
    }
}

/// Spectral template shared by every language for one phone (or the length mark).
fn template(phone: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["template", phone]));
    let mut t = vec![0.0; dim];
    let bumps = if VOWELS.contains(&phone) { 4 } else { 3 };
    for _ in 0..bumps {
        let center = rng.gen_range(0.0..dim as f64);
        let width = rng.gen_range(1.5..4.0);
        let amp = rng.gen_range(2.0..4.0);
        for (b, v) in t.iter_mut().enumerate() {
            let z = (b as f64 - center) / width;
            *v += amp * (-0.5 * z * z).exp();
        }
    }
    t
}

/// Paths written for one language.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub code: String,
    pub lexicon: PathBuf,
    pub rules: PathBuf,
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
}

struct Renderer<'a> {
    cfg: &'a SynthConfig,
    templates: std::collections::BTreeMap<String, Vec<f64>>,
    silence: Vec<f64>,
    noise: Normal<f64>,
}

impl Renderer<'_> {
    fn frames(&self, words: &[&Vec<Unit>], rng: &mut ChaCha8Rng) -> FeatureMatrix {
        let dim = self.cfg.feat_dim;
        let gain = rng.gen_range(0.8..1.2);
        let tilt = rng.gen_range(-0.5..0.5);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let push = |rows: &mut Vec<Vec<f64>>, tpl: &[f64], n: usize| {
            for _ in 0..n {
                rows.push(tpl.to_vec());
            }
        };
        push(&mut rows, &self.silence, rng.gen_range(2..=4));
        for (wi, word) in words.iter().enumerate() {
            if wi > 0 {
                push(&mut rows, &self.silence, rng.gen_range(1..=3));
            }
            for u in word.iter() {
                let n = rng.gen_range(self.cfg.min_frames_per_phone..=self.cfg.max_frames_per_phone);
                push(&mut rows, &self.templates[&u.phone], n);
                if u.long {
                    let mark = &self.templates[LENGTH_MARK];
                    let mixed: Vec<f64> = self.templates[&u.phone].iter().zip(mark).map(|(a, b)| a + 0.7 * b).collect();
                    push(&mut rows, &mixed, rng.gen_range(self.cfg.min_frames_per_phone..=self.cfg.max_frames_per_phone));
                }
            }
        }
        push(&mut rows, &self.silence, rng.gen_range(2..=4));
        let frames = rows.len();
        let mut data = Vec::with_capacity(frames * dim);
        for (t, row) in rows.iter().enumerate() {
            // Blend with neighbours to imitate coarticulation at boundaries.
            let prev = &rows[t.saturating_sub(1)];
            let next = &rows[(t + 1).min(frames - 1)];
            for b in 0..dim {
                let v = 0.6 * row[b] + 0.2 * prev[b] + 0.2 * next[b];
                let shaped = gain * v + tilt * (b as f64 / dim as f64 - 0.5);
                data.push((shaped + self.noise.sample(rng)) as f32);
            }
        }
        FeatureMatrix::new(frames, dim, data)
    }
}

/// Writes the corpus under `out_dir/<code>/`: `lexicon.tsv`, `rules.tsv`,
/// `{train,dev,test}.jsonl` and feature files in `feats/`. Manifests carry
/// orthographic text only; IPA comes from running g2p.
pub fn generate(cfg: &SynthConfig, out_dir: &Path) -> Result<Vec<SynthOutput>, FrontendError> {
    cfg.validate()?;
    let mut phones: BTreeSet<&str> = PHONES.iter().map(|p| p.0).collect();
    phones.insert(LENGTH_MARK);
    let templates = phones.iter().map(|p| (p.to_string(), template(p, cfg.feat_dim, cfg.seed))).collect();
    let renderer = Renderer {
        cfg,
        templates,
        silence: vec![0.0; cfg.feat_dim],
        noise: Normal::new(0.0, cfg.noise_std).map_err(|e| FrontendError::BadConfig(e.to_string()))?,
    };
    let mut outputs = Vec::new();
    for lang in &cfg.languages {
        let dir = out_dir.join(&lang.code);
        let feat_dir = dir.join("feats");
        std::fs::create_dir_all(&feat_dir)?;
        let lexicon = lang.lexicon(cfg.seed);
        let mut lex_text = String::new();
        for (word, units) in &lexicon {
            lex_text.push_str(&format!("{word}\t{}\n", SynthLanguage::ipa_of(units)));
        }
        std::fs::write(dir.join("lexicon.tsv"), lex_text)?;
        let rules_text: String = lang.rules().iter().map(|(g, p)| format!("{g}\t{p}\n")).collect();
        std::fs::write(dir.join("rules.tsv"), rules_text)?;

        let mut paths = Vec::new();
        for (split, n) in [("train", lang.n_train), ("dev", lang.n_dev), ("test", lang.n_test)] {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &["utterances", &lang.code, split]));
            let mut utts = Vec::with_capacity(n);
            for i in 0..n {
                let k = rng.gen_range(cfg.min_words..=cfg.max_words);
                let words: Vec<&(String, Vec<Unit>)> = (0..k).map(|_| lexicon.choose(&mut rng).expect("non-empty lexicon")).collect();
                let text = words.iter().map(|w| w.0.as_str()).collect::<Vec<_>>().join(" ");
                let feats = renderer.frames(&words.iter().map(|w| &w.1).collect::<Vec<_>>(), &mut rng);
                let id = format!("{}-{split}-{i:05}", lang.code);
                let path = feat_dir.join(format!("{id}.feat"));
                feats.save(&path)?;
                utts.push(Utterance {
                    id,
                    language: lang.code.clone(),
                    source: AudioSource::Features(path),
                    duration_s: feats.frames as f64 * feats.frame_shift_ms / 1000.0,
                    text,
                    ipa: None,
                });
            }
            let manifest = dir.join(format!("{split}.jsonl"));
            save_manifest(&manifest, &utts)?;
            paths.push(manifest);
        }
        let [train, dev, test]: [PathBuf; 3] = paths.try_into().expect("three splits");
        outputs.push(SynthOutput { code: lang.code.clone(), lexicon: dir.join("lexicon.tsv"), rules: dir.join("rules.tsv"), train, dev, test });
    }
    Ok(outputs)
}
