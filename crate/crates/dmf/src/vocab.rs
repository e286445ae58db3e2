//! Token vocabulary with four reserved ids.
//!
//! Ids 0..=3 are PAD, UNK, BOS, EOS; real tokens start at 4, ranked by
//! corpus frequency with ties broken by first occurrence. The on-disk
//! format is UTF-8, one token per line, line number = id - 4; the
//! reserved entries are implicit.
//!
//! `max_size` caps the number of stored (non-reserved) tokens, so a cap
//! of 34,100 keeps exactly the 34,100 most common words.

use crate::error::{Error, Result};
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;

/// Number of reserved ids below the first real token.
pub const RESERVED: usize = 4;

/// Default cap on stored tokens.
pub const DEFAULT_MAX_SIZE: usize = 34_100;

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds from an iterator of whitespace-tokenized lines, keeping the
    /// `max_size` most frequent tokens (ties: first seen wins).
    pub fn build<S: AsRef<str>>(
        stream: impl IntoIterator<Item = S>,
        max_size: usize,
    ) -> Result<Self> {
        let mut counts: HashMap<String, (usize, usize)> = HashMap::new(); // token -> (count, first position)
        let mut pos = 0usize;
        let mut saw_any = false;
        for line in stream {
            saw_any = true;
            for tok in line.as_ref().split_whitespace() {
                let entry = counts.entry(tok.to_string()).or_insert((0, pos));
                entry.0 += 1;
                pos += 1;
            }
        }
        if !saw_any || counts.is_empty() {
            return Err(Error::EmptyInput("vocabulary stream"));
        }
        let mut ranked: Vec<(String, (usize, usize))> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));
        ranked.truncate(max_size);
        Ok(Self::from_tokens(ranked.into_iter().map(|(t, _)| t)))
    }

    /// Builds from an explicit ordered token list (first token gets id 4).
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let tokens: Vec<String> = tokens.into_iter().collect();
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), RESERVED + i))
            .collect();
        Vocabulary { tokens, ids }
    }

    /// Total id count including the four reserved entries.
    pub fn size(&self) -> usize {
        RESERVED + self.tokens.len()
    }

    /// Id for one token; unknown tokens map to UNK.
    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    /// Encodes whitespace-separated text (no BOS/EOS added).
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Token string for an id; reserved ids render as angle-bracket names.
    pub fn token(&self, id: usize) -> Result<&str> {
        match id {
            PAD => Ok("<pad>"),
            UNK => Ok("<unk>"),
            BOS => Ok("<bos>"),
            EOS => Ok("<eos>"),
            _ => self
                .tokens
                .get(id - RESERVED)
                .map(String::as_str)
                .ok_or(Error::TokenOutOfRange {
                    id,
                    vocab: self.size(),
                }),
        }
    }

    /// Decodes a token id sequence into a spaced string.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let words: Result<Vec<&str>> = ids.iter().map(|&i| self.token(i)).collect();
        Ok(words?.join(" "))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for t in &self.tokens {
            writeln!(out, "{t}").expect("vec write");
        }
        std::fs::write(path, out).map_err(|source| Error::FileWrite {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::FileRead {
            path: path.to_path_buf(),
            source,
        })?;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    detail: "blank vocabulary line".into(),
                });
            }
        }
        Ok(Self::from_tokens(text.lines().map(str::to_string)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_order_after_specials() {
        let v = Vocabulary::build(["a a b"], 10).unwrap();
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), 5);
        assert_eq!(v.size(), 6);
    }

    #[test]
    fn beyond_cap_encodes_as_unk() {
        // "rare" is seen once and the cap keeps only two tokens.
        let v = Vocabulary::build(["x x x y y rare"], 2).unwrap();
        assert_eq!(v.id("x"), 4);
        assert_eq!(v.id("y"), 5);
        assert_eq!(v.id("rare"), UNK);
        assert_eq!(v.encode("x rare y"), vec![4, 1, 5]);
    }

    #[test]
    fn ties_break_by_first_occurrence() {
        let v = Vocabulary::build(["beta alpha beta alpha"], 10).unwrap();
        assert_eq!(v.id("beta"), 4);
        assert_eq!(v.id("alpha"), 5);
    }

    #[test]
    fn empty_stream_is_an_error() {
        let lines: [&str; 0] = [];
        assert!(Vocabulary::build(lines, 10).is_err());
        assert!(Vocabulary::build(["   "], 10).is_err());
    }

    #[test]
    fn rebuilds_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("v1.txt"), dir.path().join("v2.txt"));
        let stream = ["look blue now", "look red", "blue blue"];
        Vocabulary::build(stream, 100).unwrap().save(&p1).unwrap();
        Vocabulary::build(stream, 100).unwrap().save(&p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        assert_eq!(b1, std::fs::read(&p2).unwrap());
        assert!(!b1.is_empty());
    }

    #[test]
    fn file_roundtrip_preserves_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocabulary::build(["one two two three three three"], 50).unwrap();
        v.save(&path).unwrap();
        let w = Vocabulary::load(&path).unwrap();
        assert_eq!(v, w);
        assert_eq!(w.id("three"), 4);
        assert_eq!(w.token(4).unwrap(), "three");
    }

    #[test]
    fn reserved_ids_decode_to_named_markers() {
        let v = Vocabulary::build(["w"], 5).unwrap();
        assert_eq!(v.decode(&[BOS, 4, EOS]).unwrap(), "<bos> w <eos>");
        assert!(v.token(99).is_err());
    }
}
