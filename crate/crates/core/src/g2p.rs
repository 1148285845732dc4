//! Orthography to IPA conversion: lexicon lookup with greedy rule fallback.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use thiserror::Error;

use crate::phoneset::{parse_ipa, PhonesetError, SymbolTable};
use crate::text::Normalizer;

#[derive(Debug, Error)]
pub enum G2pError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: {source}")]
    UnknownSymbol {
        line: usize,
        #[source]
        source: PhonesetError,
    },
    #[error("out-of-vocabulary word {0:?}")]
    OovWord(String),
    #[error("no rule matches {word:?} at grapheme {position}")]
    RuleGap { word: String, position: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OovPolicy {
    Rules,
    Error,
    Skip,
}

impl std::str::FromStr for OovPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "rules" => Ok(OovPolicy::Rules),
            "error" => Ok(OovPolicy::Error),
            "skip" => Ok(OovPolicy::Skip),
            other => Err(format!("unknown OOV policy {other:?}")),
        }
    }
}

/// Word → pronunciations. Pronunciations are space-separated IPA tokens.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Lexicon {
    pub language: String,
    entries: HashMap<String, Vec<String>>,
}

impl Lexicon {
    pub fn new(language: impl Into<String>) -> Self {
        Self { language: language.into(), entries: HashMap::new() }
    }

    pub fn insert(&mut self, word: &str, pronunciation: &str) {
        let pron = pronunciation.split_whitespace().collect::<Vec<_>>().join(" ");
        self.entries.entry(word.to_lowercase()).or_default().push(pron);
    }

    pub fn get(&self, word: &str) -> Option<&[String]> {
        self.entries.get(word).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Reads `word<TAB>ipa tokens` lines. Repeated headwords accumulate
    /// pronunciations in file order.
    pub fn read_from<R: BufRead>(r: R, language: &str, table: &SymbolTable) -> Result<Self, G2pError> {
        let mut lex = Lexicon::new(language);
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let (word, pron) = line
                .split_once('\t')
                .ok_or_else(|| G2pError::Parse { line: lineno, msg: "expected word<TAB>pronunciation".into() })?;
            let word = word.trim();
            if word.is_empty() || pron.trim().is_empty() {
                return Err(G2pError::Parse { line: lineno, msg: "empty word or pronunciation".into() });
            }
            parse_ipa(pron, table, true).map_err(|source| G2pError::UnknownSymbol { line: lineno, source })?;
            lex.insert(word, pron);
        }
        Ok(lex)
    }

    pub fn load(path: &Path, language: &str, table: &SymbolTable) -> Result<Self, G2pError> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f), language, table)
    }

    pub fn write_to<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut words: Vec<_> = self.entries.keys().collect();
        words.sort();
        for word in words {
            for p in &self.entries[word] {
                writeln!(w, "{word}\t{p}")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rule {
    pub pattern: String,
    pub ipa: String,
}

/// Greedy rewrite rules: longest pattern first, ties in file order.
#[derive(Debug, Clone, Default)]
pub struct RuleSet {
    // sorted by descending pattern length, stable w.r.t. insertion order
    rules: Vec<Rule>,
}

impl RuleSet {
    pub fn new(rules: impl IntoIterator<Item = (String, String)>) -> Result<Self, G2pError> {
        let mut out = Vec::new();
        for (i, (pattern, ipa)) in rules.into_iter().enumerate() {
            if pattern.is_empty() {
                return Err(G2pError::Parse { line: i + 1, msg: "empty rule pattern".into() });
            }
            out.push(Rule { pattern: pattern.to_lowercase(), ipa: ipa.split_whitespace().collect::<Vec<_>>().join(" ") });
        }
        out.sort_by_key(|r| std::cmp::Reverse(r.pattern.chars().count()));
        Ok(Self { rules: out })
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn read_from<R: BufRead>(r: R, table: &SymbolTable) -> Result<Self, G2pError> {
        let mut pairs = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (g, ipa) = line
                .split_once('\t')
                .ok_or_else(|| G2pError::Parse { line: i + 1, msg: "expected grapheme<TAB>ipa".into() })?;
            parse_ipa(ipa, table, true).map_err(|source| G2pError::UnknownSymbol { line: i + 1, source })?;
            pairs.push((g.to_string(), ipa.to_string()));
        }
        Self::new(pairs)
    }

    pub fn load(path: &Path, table: &SymbolTable) -> Result<Self, G2pError> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f), table)
    }

    /// Rewrites one word. Each step consumes at least one grapheme.
    pub fn apply(&self, word: &str) -> Result<String, G2pError> {
        let chars: Vec<char> = word.chars().collect();
        let mut pos = 0;
        let mut out: Vec<&str> = Vec::new();
        'outer: while pos < chars.len() {
            for rule in &self.rules {
                let n = rule.pattern.chars().count();
                if pos + n <= chars.len() && rule.pattern.chars().eq(chars[pos..pos + n].iter().copied()) {
                    if !rule.ipa.is_empty() {
                        out.push(&rule.ipa);
                    }
                    pos += n;
                    continue 'outer;
                }
            }
            return Err(G2pError::RuleGap { word: word.to_string(), position: pos });
        }
        Ok(out.join(" "))
    }
}

/// Full converter: normalization, lexicon, rules and OOV policy.
#[derive(Debug, Clone)]
pub struct Converter<'a> {
    pub lexicon: &'a Lexicon,
    pub rules: &'a RuleSet,
    pub policy: OovPolicy,
    pub normalizer: Normalizer,
}

impl Converter<'_> {
    pub fn convert(&self, text: &str) -> Result<String, G2pError> {
        convert_with(text, self.lexicon, self.rules, self.policy, &self.normalizer)
    }
}

/// Converts orthographic `text` to a space-separated IPA token string.
pub fn convert(text: &str, lexicon: &Lexicon, rules: &RuleSet, policy: OovPolicy) -> Result<String, G2pError> {
    convert_with(text, lexicon, rules, policy, &Normalizer::default())
}

pub fn convert_with(
    text: &str,
    lexicon: &Lexicon,
    rules: &RuleSet,
    policy: OovPolicy,
    normalizer: &Normalizer,
) -> Result<String, G2pError> {
    let mut parts = Vec::new();
    for word in normalizer.words(text) {
        match lexicon.get(&word) {
            Some(prons) => parts.push(prons[0].clone()),
            None => match policy {
                OovPolicy::Rules => {
                    let p = rules.apply(&word)?;
                    if !p.is_empty() {
                        parts.push(p);
                    }
                }
                OovPolicy::Error => return Err(G2pError::OovWord(word)),
                OovPolicy::Skip => log::debug!("skipping OOV word {word:?}"),
            },
        }
    }
    Ok(parts.join(" "))
}
