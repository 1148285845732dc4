//! IPA tokenization, per-language phone inventories and merged vocabularies.
//!
//! Transcripts are NFD-normalized first so that precomposed letters such as
//! `ã` surface their combining diacritic, which then becomes a separate
//! [`TokenKind::Modifier`] token. Length marks, stress marks and tone
//! letters are handled the same way, so `aː` yields the two tokens `a`, `ː`.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

pub const TIE_BAR: char = '\u{0361}';

pub const BLANK: usize = 0;
pub const UNK: usize = 1;
pub const SOS_EOS: usize = 2;
pub const PAD: usize = 3;
pub const SPECIALS: [&str; 4] = ["<blank>", "<unk>", "<sos/eos>", "<pad>"];

const BASE_TABLE: &str = include_str!("../data/ipa_bases.txt");
const MODIFIER_TABLE: &str = include_str!("../data/ipa_modifiers.txt");

#[derive(Debug, Error)]
pub enum PhonesetError {
    #[error("unknown symbol U+{:04X} at position {position}", *codepoint as u32)]
    UnknownSymbol { position: usize, codepoint: char },
    #[error("tie bar at position {position} is not flanked by base symbols")]
    MisplacedTieBar { position: usize },
    #[error("transcript line {line}: {source}")]
    Transcript {
        line: usize,
        #[source]
        source: Box<PhonesetError>,
    },
    #[error("no inventories to merge")]
    EmptyInput,
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TokenKind {
    Base,
    Modifier,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct IpaToken {
    pub text: String,
    pub kind: TokenKind,
}

impl IpaToken {
    fn base(text: String) -> Self {
        Self { text, kind: TokenKind::Base }
    }
}

impl fmt::Display for IpaToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

/// Known base and modifier codepoints.
#[derive(Debug, Clone)]
pub struct SymbolTable {
    bases: HashSet<char>,
    modifiers: HashSet<char>,
}

impl Default for SymbolTable {
    fn default() -> Self {
        Self {
            bases: parse_codepoint_list(BASE_TABLE).expect("shipped base table"),
            modifiers: parse_codepoint_list(MODIFIER_TABLE).expect("shipped modifier table"),
        }
    }
}

impl SymbolTable {
    pub fn new(bases: HashSet<char>, modifiers: HashSet<char>) -> Self {
        Self { bases, modifiers }
    }

    /// Replaces the modifier set with one read from a codepoint file.
    pub fn with_modifier_file(mut self, path: &Path) -> Result<Self, PhonesetError> {
        self.modifiers = parse_codepoint_list(&std::fs::read_to_string(path)?)?;
        Ok(self)
    }

    pub fn is_base(&self, c: char) -> bool {
        self.bases.contains(&c)
    }

    pub fn is_modifier(&self, c: char) -> bool {
        self.modifiers.contains(&c)
    }

    pub fn bases(&self) -> impl Iterator<Item = char> + '_ {
        self.bases.iter().copied()
    }

    pub fn modifiers(&self) -> impl Iterator<Item = char> + '_ {
        self.modifiers.iter().copied()
    }
}

/// Parses "hex codepoint per line" text. `#` starts a comment.
pub fn parse_codepoint_list(text: &str) -> Result<HashSet<char>, PhonesetError> {
    let mut out = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let cp = u32::from_str_radix(line.trim_start_matches("U+"), 16).map_err(|e| {
            PhonesetError::Format { line: i + 1, msg: format!("bad codepoint {line:?}: {e}") }
        })?;
        let c = char::from_u32(cp).ok_or_else(|| PhonesetError::Format {
            line: i + 1,
            msg: format!("invalid scalar value {cp:#x}"),
        })?;
        out.insert(c);
    }
    Ok(out)
}

/// Splits an IPA string into base and modifier tokens.
///
/// With `tie_bar_joins`, `t͡ʃ` becomes a single base token; otherwise the
/// tie bar is dropped and both halves are separate bases.
pub fn parse_ipa(
    s: &str,
    table: &SymbolTable,
    tie_bar_joins: bool,
) -> Result<Vec<IpaToken>, PhonesetError> {
    let chars: Vec<char> = s.nfd().collect();
    let mut out: Vec<IpaToken> = Vec::new();
    // set when the previous codepoint was a tie bar waiting for its right half
    let mut pending_tie: Option<usize> = None;
    // whether the last emitted token ends in a base codepoint (joinable)
    let mut last_is_base = false;

    for (pos, &c) in chars.iter().enumerate() {
        if c.is_whitespace() {
            if let Some(p) = pending_tie {
                return Err(PhonesetError::MisplacedTieBar { position: p });
            }
            last_is_base = false;
            continue;
        }
        if c == TIE_BAR {
            if !last_is_base || pending_tie.is_some() {
                return Err(PhonesetError::MisplacedTieBar { position: pos });
            }
            pending_tie = Some(pos);
            continue;
        }
        if table.is_modifier(c) {
            if let Some(p) = pending_tie {
                return Err(PhonesetError::MisplacedTieBar { position: p });
            }
            out.push(IpaToken { text: c.to_string(), kind: TokenKind::Modifier });
            last_is_base = false;
            continue;
        }
        if table.is_base(c) {
            match pending_tie.take() {
                Some(_) if tie_bar_joins => {
                    let prev = out.last_mut().expect("tie bar follows a base token");
                    prev.text.push(TIE_BAR);
                    prev.text.push(c);
                }
                _ => out.push(IpaToken::base(c.to_string())),
            }
            last_is_base = true;
            continue;
        }
        return Err(PhonesetError::UnknownSymbol { position: pos, codepoint: c });
    }
    if let Some(p) = pending_tie {
        return Err(PhonesetError::MisplacedTieBar { position: p });
    }
    Ok(out)
}

/// The set of IPA tokens attested in one language.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhoneInventory {
    pub language: String,
    tokens: BTreeSet<IpaToken>,
}

impl PhoneInventory {
    pub fn new(language: impl Into<String>) -> Self {
        Self { language: language.into(), tokens: BTreeSet::new() }
    }

    pub fn from_tokens(language: impl Into<String>, tokens: impl IntoIterator<Item = IpaToken>) -> Self {
        Self { language: language.into(), tokens: tokens.into_iter().collect() }
    }

    pub fn insert(&mut self, token: IpaToken) {
        self.tokens.insert(token);
    }

    pub fn tokens(&self) -> impl Iterator<Item = &IpaToken> {
        self.tokens.iter()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(|t| t.text.as_str())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn contains(&self, text: &str) -> bool {
        self.tokens.iter().any(|t| t.text == text)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), PhonesetError> {
        writeln!(w, "# kind=inventory")?;
        writeln!(w, "# language={}", self.language)?;
        writeln!(w, "# size={}", self.len())?;
        for t in &self.tokens {
            writeln!(w, "{}", t.text)?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R, table: &SymbolTable) -> Result<Self, PhonesetError> {
        let (meta, lines) = read_token_file(r)?;
        let language = meta.get("language").cloned().unwrap_or_default();
        let mut inv = PhoneInventory::new(language);
        for (i, line) in lines.iter().enumerate() {
            let kind = if line.chars().count() == 1 && table.is_modifier(line.chars().next().unwrap()) {
                TokenKind::Modifier
            } else {
                TokenKind::Base
            };
            if !inv.tokens.insert(IpaToken { text: line.clone(), kind }) {
                return Err(PhonesetError::Format { line: i + 1, msg: format!("duplicate token {line:?}") });
            }
        }
        Ok(inv)
    }
}

/// Collects every token observed across `transcripts` (one per line).
pub fn build_inventory<'a, I>(
    language: &str,
    transcripts: I,
    table: &SymbolTable,
    tie_bar_joins: bool,
) -> Result<PhoneInventory, PhonesetError>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut inv = PhoneInventory::new(language);
    for (i, line) in transcripts.into_iter().enumerate() {
        let tokens = parse_ipa(line, table, tie_bar_joins)
            .map_err(|e| PhonesetError::Transcript { line: i + 1, source: Box::new(e) })?;
        inv.tokens.extend(tokens);
    }
    log::debug!("inventory {language}: {} symbols", inv.len());
    Ok(inv)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VocabKind {
    Ipa,
    Bpe,
}

impl VocabKind {
    pub fn as_str(self) -> &'static str {
        match self {
            VocabKind::Ipa => "ipa",
            VocabKind::Bpe => "bpe",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ipa" => Some(VocabKind::Ipa),
            "bpe" => Some(VocabKind::Bpe),
            _ => None,
        }
    }
}

/// Token list with the four reserved ids at the front.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    entries: Vec<String>,
    kind: VocabKind,
    index: HashMap<String, usize>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind && self.entries == other.entries
    }
}

impl Eq for Vocabulary {}

impl Vocabulary {
    /// Builds a vocabulary from non-special tokens, kept in the given order.
    /// Duplicates and accidental specials are dropped.
    pub fn from_tokens<I, S>(kind: VocabKind, tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut entries: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> =
            entries.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        for t in tokens {
            let t = t.into();
            if !index.contains_key(&t) {
                index.insert(t.clone(), entries.len());
                entries.push(t);
            }
        }
        Self { entries, kind, index }
    }

    /// Union of inventories, sorted by codepoint sequence.
    pub fn ipa_union(inventories: &[PhoneInventory]) -> Result<Self, PhonesetError> {
        if inventories.is_empty() {
            return Err(PhonesetError::EmptyInput);
        }
        let union: BTreeSet<&str> = inventories.iter().flat_map(|inv| inv.texts()).collect();
        Ok(Self::from_tokens(VocabKind::Ipa, union))
    }

    pub fn kind(&self) -> VocabKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.len() == SPECIALS.len()
    }

    pub fn non_special_len(&self) -> usize {
        self.entries.len() - SPECIALS.len()
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn non_special(&self) -> &[String] {
        &self.entries[SPECIALS.len()..]
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.entries.get(id).map(String::as_str)
    }

    /// Maps parsed IPA tokens to ids; unknown tokens are returned as errors
    /// so callers can report missing symbols.
    pub fn ids_for<'a>(&self, tokens: impl IntoIterator<Item = &'a str>) -> Result<Vec<usize>, String> {
        tokens.into_iter().map(|t| self.id(t).ok_or_else(|| t.to_string())).collect()
    }

    /// Hex SHA-256 over kind and entries; identifies the vocabulary in checkpoints.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.kind.as_str().as_bytes());
        for e in &self.entries {
            h.update([0u8]);
            h.update(e.as_bytes());
        }
        hex_digest(h)
    }

    pub fn write_to<W: Write>(&self, mut w: W, provenance: &[(&str, &str)]) -> Result<(), PhonesetError> {
        writeln!(w, "# kind={}", self.kind.as_str())?;
        for (k, v) in provenance {
            writeln!(w, "# {k}={v}")?;
        }
        for e in &self.entries {
            writeln!(w, "{e}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, provenance: &[(&str, &str)]) -> Result<(), PhonesetError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf, provenance)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self, PhonesetError> {
        let (meta, lines) = read_token_file(r)?;
        let kind = meta
            .get("kind")
            .and_then(|k| VocabKind::parse(k))
            .ok_or(PhonesetError::Format { line: 1, msg: "missing or bad '# kind=' header".into() })?;
        if lines.len() < SPECIALS.len() || lines[..SPECIALS.len()] != SPECIALS {
            return Err(PhonesetError::Format { line: 1, msg: "specials must occupy ids 0..4".into() });
        }
        let vocab = Self::from_tokens(kind, lines[SPECIALS.len()..].iter().cloned());
        if vocab.len() != lines.len() {
            return Err(PhonesetError::Format { line: 1, msg: "duplicate vocabulary entries".into() });
        }
        Ok(vocab)
    }

    pub fn load(path: &Path) -> Result<Self, PhonesetError> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

/// Merges inventories into a model vocabulary.
pub fn union_vocabulary(inventories: &[PhoneInventory]) -> Result<Vocabulary, PhonesetError> {
    Vocabulary::ipa_union(inventories)
}

pub(crate) fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Reads a leading `# key=value` block followed by one token per line.
fn read_token_file<R: BufRead>(r: R) -> Result<(HashMap<String, String>, Vec<String>), PhonesetError> {
    let mut meta = HashMap::new();
    let mut lines = Vec::new();
    let mut in_header = true;
    for line in r.lines() {
        let line = line?;
        if in_header {
            if let Some(rest) = line.strip_prefix("# ") {
                if let Some((k, v)) = rest.split_once('=') {
                    meta.insert(k.trim().to_string(), v.trim().to_string());
                }
                continue;
            }
            in_header = false;
        }
        if line.is_empty() {
            continue;
        }
        lines.push(line);
    }
    Ok((meta, lines))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(tokens: &[IpaToken]) -> Vec<&str> {
        tokens.iter().map(|t| t.text.as_str()).collect()
    }

    #[test]
    fn long_vowel_splits_into_base_and_modifier() {
        let t = SymbolTable::default();
        let toks = parse_ipa("aː", &t, true).unwrap();
        assert_eq!(
            toks,
            vec![
                IpaToken { text: "a".into(), kind: TokenKind::Base },
                IpaToken { text: "ː".into(), kind: TokenKind::Modifier },
            ]
        );
        assert!(parse_ipa("", &t, true).unwrap().is_empty());
    }

    #[test]
    fn tie_bar_joining_is_configurable() {
        let t = SymbolTable::default();
        let joined = parse_ipa("t͡ʃa", &t, true).unwrap();
        assert_eq!(texts(&joined), ["t͡ʃ", "a"]);
        assert!(joined.iter().all(|x| x.kind == TokenKind::Base));
        let split = parse_ipa("t͡ʃa", &t, false).unwrap();
        assert_eq!(texts(&split), ["t", "ʃ", "a"]);
    }

    #[test]
    fn precomposed_letters_decompose() {
        let t = SymbolTable::default();
        let toks = parse_ipa("ã", &t, true).unwrap();
        assert_eq!(texts(&toks), ["a", "\u{0303}"]);
        assert_eq!(toks[1].kind, TokenKind::Modifier);
    }

    #[test]
    fn unknown_symbol_reports_position() {
        let t = SymbolTable::default();
        match parse_ipa("a 9", &t, true) {
            Err(PhonesetError::UnknownSymbol { position, codepoint }) => {
                assert_eq!(position, 2);
                assert_eq!(codepoint, '9');
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dangling_tie_bar_rejected() {
        let t = SymbolTable::default();
        assert!(matches!(parse_ipa("t\u{0361}", &t, true), Err(PhonesetError::MisplacedTieBar { .. })));
        assert!(matches!(parse_ipa("\u{0361}a", &t, true), Err(PhonesetError::MisplacedTieBar { .. })));
        assert!(matches!(parse_ipa("t\u{0361} a", &t, true), Err(PhonesetError::MisplacedTieBar { .. })));
    }

    #[test]
    fn inventory_from_transcripts() {
        let t = SymbolTable::default();
        let inv = build_inventory("xx", ["aː", "ba"], &t, true).unwrap();
        assert_eq!(inv.texts().collect::<Vec<_>>(), ["a", "b", "ː"]);
        assert_eq!(inv.len(), 3);
        let empty = build_inventory("xx", std::iter::empty(), &t, true).unwrap();
        assert!(empty.is_empty());
        let dup = build_inventory("xx", ["aː", "ba", "ba", "aː"], &t, true).unwrap();
        assert_eq!(dup, inv);
    }

    #[test]
    fn inventory_error_carries_line() {
        let t = SymbolTable::default();
        match build_inventory("xx", ["a", "b", "a1"], &t, true) {
            Err(PhonesetError::Transcript { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn union_examples() {
        let t = SymbolTable::default();
        let a = build_inventory("a", ["aː b"], &t, true).unwrap();
        let c = build_inventory("c", ["a c"], &t, true).unwrap();
        let v = union_vocabulary(&[a.clone(), c]).unwrap();
        assert_eq!(v.kind(), VocabKind::Ipa);
        assert_eq!(v.non_special(), ["a", "b", "c", "ː"]);
        assert_eq!(&v.entries()[..4], SPECIALS);
        let single = union_vocabulary(std::slice::from_ref(&a)).unwrap();
        assert_eq!(single.non_special(), a.texts().collect::<Vec<_>>().as_slice());
        assert!(matches!(union_vocabulary(&[]), Err(PhonesetError::EmptyInput)));

        let d1 = PhoneInventory::from_tokens("d1", ["p", "t", "k"].map(|s| IpaToken::base(s.into())));
        let d2 = PhoneInventory::from_tokens("d2", ["a", "e", "i", "o"].map(|s| IpaToken::base(s.into())));
        assert_eq!(union_vocabulary(&[d1, d2]).unwrap().non_special_len(), 7);
    }

    #[test]
    fn vocabulary_file_roundtrip() {
        let v = Vocabulary::from_tokens(VocabKind::Bpe, ["▁a", "#", "b"]);
        let mut buf = Vec::new();
        v.write_to(&mut buf, &[("source", "test")]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# kind=bpe\n# source=test\n<blank>\n"));
        let back = Vocabulary::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id("#"), Some(5));
        assert_eq!(back.content_hash(), v.content_hash());
    }

    #[test]
    fn inventory_file_roundtrip() {
        let t = SymbolTable::default();
        let inv = build_inventory("pl", ["aː ʃ t͡ʃ"], &t, true).unwrap();
        let mut buf = Vec::new();
        inv.write_to(&mut buf).unwrap();
        let back = PhoneInventory::read_from(buf.as_slice(), &t).unwrap();
        assert_eq!(back, inv);
    }
}
