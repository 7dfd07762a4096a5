use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Word-level vocabulary. Ids 0..4 are reserved; the rest follow the
/// lexicographic order of the corpus words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn split_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

impl Vocab {
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = corpus.into_iter().flat_map(split_words).collect();
        Self::from_words(words)
    }

    fn from_words(words: impl IntoIterator<Item = String>) -> Self {
        let tokens: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Word ids without the trailing EOS.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        split_words(text)
            .iter()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    /// Word ids followed by EOS.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut ids = self.encode(text);
        ids.push(EOS);
        ids
    }

    /// Joins non-reserved tokens with spaces, stopping at EOS.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i >= RESERVED.len())
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One non-reserved token per line; line `i` holds id `i + 4`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for t in &self.tokens[RESERVED.len()..] {
            text.push_str(t);
            text.push('\n');
        }
        fs::write(path, text).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        let words: Vec<String> = text.lines().map(str::to_string).collect();
        let unique: BTreeSet<&String> = words.iter().collect();
        if unique.len() != words.len() || words.iter().any(|w| w.is_empty()) {
            return Err(Error::Invalid(format!("{}: duplicate or empty tokens", path.display())));
        }
        Ok(Self::from_words(words))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::build(["this is a red sphere", "what is this?", "a 3d model of a cube"])
    }

    #[test]
    fn empty_text_is_just_eos() {
        assert_eq!(vocab().tokenize(""), vec![EOS]);
    }

    #[test]
    fn punctuation_and_case_are_dropped() {
        let v = vocab();
        let ids = v.tokenize("Red Sphere.");
        assert_eq!(ids, vec![v.id("red").unwrap(), v.id("sphere").unwrap(), EOS]);
        // sorted: 3d a cube is model of red sphere this what
        assert_eq!(v.id("3d"), Some(4));
        assert_eq!(v.id("what"), Some(13));
    }

    #[test]
    fn round_trip_keeps_known_words() {
        let v = vocab();
        let ids = v.tokenize("this is a purple sphere");
        assert_eq!(ids[3], UNK);
        assert_eq!(v.detokenize(&ids), "this is a sphere");
    }

    #[test]
    fn file_round_trip() {
        let v = vocab();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), v);
        let first = std::fs::read_to_string(&p).unwrap();
        assert_eq!(first.lines().next(), Some("3d"));
    }
}
