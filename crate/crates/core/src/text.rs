//! Orthographic text normalization shared by G2P, BPE and scoring.

use serde::{Deserialize, Serialize};

pub const DEFAULT_PUNCTUATION: &str = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~¡¿«»‘’‚“”„…–—";

/// Lowercases, deletes punctuation characters and collapses whitespace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Normalizer {
    pub punctuation: String,
}

impl Default for Normalizer {
    fn default() -> Self {
        Self { punctuation: DEFAULT_PUNCTUATION.to_string() }
    }
}

impl Normalizer {
    pub fn normalize(&self, text: &str) -> String {
        let lowered: String = text
            .chars()
            .flat_map(char::to_lowercase)
            .filter(|c| !self.punctuation.contains(*c))
            .collect();
        lowered.split_whitespace().collect::<Vec<_>>().join(" ")
    }

    pub fn words(&self, text: &str) -> Vec<String> {
        self.normalize(text).split(' ').filter(|w| !w.is_empty()).map(str::to_string).collect()
    }

    /// Recorded in run metadata so scoring and tokenization are auditable.
    pub fn describe(&self) -> String {
        format!("lowercase+strip:{}", self.punctuation)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strips_and_lowercases() {
        let n = Normalizer::default();
        assert_eq!(n.normalize("  Hello, World!  "), "hello world");
        assert_eq!(n.normalize("Ça  va?"), "ça va");
        assert_eq!(n.normalize(""), "");
        assert_eq!(n.words("A b,  C"), ["a", "b", "c"]);
    }

    #[test]
    fn custom_punctuation() {
        let n = Normalizer { punctuation: "x".into() };
        assert_eq!(n.normalize("Axb, c"), "ab, c");
    }
}
