//! Vocabulary construction and whitespace tokenization.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
const RESERVED: [&str; 3] = [UNK, BOS, EOS];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    id_of: HashMap<String, usize>,
    token_of: Vec<String>,
}

impl Vocabulary {
    fn with_reserved() -> Self {
        let mut v = Self {
            id_of: HashMap::new(),
            token_of: Vec::new(),
        };
        for t in RESERVED {
            v.push(t.to_string());
        }
        v
    }

    fn push(&mut self, tok: String) {
        self.id_of.insert(tok.clone(), self.token_of.len());
        self.token_of.push(tok);
    }

    /// Keeps the `max_size - 3` most frequent words (ties in lexicographic
    /// order) after the reserved `<unk>`, `<bos>`, `<eos>`.
    pub fn build<'a>(lines: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Self> {
        if max_size <= RESERVED.len() {
            return Err(Error::Config(format!(
                "vocabulary cap {max_size} leaves no room beyond reserved tokens"
            )));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for line in lines {
            for w in line.split_whitespace() {
                if !RESERVED.contains(&w) {
                    *counts.entry(w).or_default() += 1;
                }
            }
        }
        if counts.is_empty() {
            return Err(Error::Data("no words to build a vocabulary from".into()));
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut v = Self::with_reserved();
        for (w, _) in ranked.into_iter().take(max_size - RESERVED.len()) {
            v.push(w.to_string());
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.token_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_of.is_empty()
    }

    /// Id of `word`, or [`UNK_ID`] when it is out of vocabulary.
    pub fn id(&self, word: &str) -> usize {
        self.id_of.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.id_of.contains_key(word)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.token_of.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.token_of
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.token_of {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    /// One token per line, line number = id. The first three lines must be
    /// the reserved tokens.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut v = Self {
            id_of: HashMap::new(),
            token_of: Vec::new(),
        };
        for (i, line) in text.lines().enumerate() {
            let tok = line.trim_end_matches('\r');
            let err = |msg: String| Error::Format { line: i + 1, msg };
            if tok.is_empty() || tok.contains(char::is_whitespace) {
                return Err(err(format!("invalid token {tok:?}")));
            }
            if i < RESERVED.len() && tok != RESERVED[i] {
                return Err(err(format!("expected reserved token {}", RESERVED[i])));
            }
            if v.id_of.contains_key(tok) {
                return Err(err(format!("duplicate token {tok:?}")));
            }
            v.push(tok.to_string());
        }
        if v.len() < RESERVED.len() {
            return Err(Error::Format {
                line: v.len() + 1,
                msg: "vocabulary must start with <unk>, <bos>, <eos>".into(),
            });
        }
        Ok(v)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub ids: Vec<usize>,
    /// Hex SHA-256 of the source text.
    pub source_digest: String,
    /// Number of words that mapped to `<unk>` without being `<unk>` already.
    pub oov: usize,
    pub words: usize,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn oov_rate(&self) -> f64 {
        if self.words == 0 {
            0.0
        } else {
            self.oov as f64 / self.words as f64
        }
    }
}

/// Maps each line's words to ids and concatenates lines into one stream,
/// appending `<eos>` after every line when `add_eos_per_line` is set.
pub fn tokenize(text: &str, vocab: &Vocabulary, add_eos_per_line: bool) -> Corpus {
    let mut ids = Vec::new();
    let (mut oov, mut words) = (0, 0);
    for line in text.lines() {
        for w in line.split_whitespace() {
            let id = vocab.id(w);
            if id == UNK_ID && w != UNK {
                oov += 1;
            }
            words += 1;
            ids.push(id);
        }
        if add_eos_per_line {
            ids.push(EOS_ID);
        }
    }
    Corpus {
        ids,
        source_digest: hex::encode(Sha256::digest(text.as_bytes())),
        oov,
        words,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_orders_by_frequency() {
        let v = Vocabulary::build(["a a b"], 5).unwrap();
        assert_eq!(v.tokens(), &["<unk>", "<bos>", "<eos>", "a", "b"]);
    }

    #[test]
    fn cap_drops_rare_words() {
        let v = Vocabulary::build(["a a b"], 4).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v.id("b"), UNK_ID);
    }

    #[test]
    fn ties_are_lexicographic() {
        let v = Vocabulary::build(["y x y x"], 10).unwrap();
        assert_eq!(&v.tokens()[3..], &["x", "y"]);
    }

    #[test]
    fn reserved_words_in_text_map_to_reserved_ids() {
        let v = Vocabulary::build(["<unk> a <unk>"], 10).unwrap();
        assert_eq!(v.len(), 4);
        let c = tokenize("<unk> a", &v, false);
        assert_eq!(c.ids, vec![UNK_ID, 3]);
        assert_eq!(c.oov, 0);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(Vocabulary::build(["", "  "], 10), Err(Error::Data(_))));
        assert!(Vocabulary::build(["a"], 3).is_err());
    }

    #[test]
    fn tokenize_appends_eos() {
        let v = Vocabulary::build(["a b"], 10).unwrap();
        let c = tokenize("a b\n", &v, true);
        assert_eq!(c.ids, vec![v.id("a"), v.id("b"), EOS_ID]);
        let c = tokenize("a zzz", &v, false);
        assert_eq!(c.ids, vec![v.id("a"), UNK_ID]);
        assert_eq!(c.oov, 1);
    }

    #[test]
    fn text_round_trip() {
        let v = Vocabulary::build(["the cat sat on the mat"], 100).unwrap();
        assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
    }

    #[test]
    fn hand_written_file() {
        let v = Vocabulary::from_text("<unk>\n<bos>\n<eos>\nhello\nworld\n").unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("world"), 4);
    }

    #[test]
    fn duplicate_on_load() {
        let err = Vocabulary::from_text("<unk>\n<bos>\n<eos>\nx\nx\n").unwrap_err();
        assert!(matches!(err, Error::Format { line: 5, .. }));
        assert!(Vocabulary::from_text("a\n<bos>\n<eos>\n").is_err());
    }
}
