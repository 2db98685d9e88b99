use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const MASK: &str = "[MASK]";

pub const SPECIALS: [&str; 4] = [PAD, UNK, CLS, MASK];

/// Token list where line number is the id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    pad: u32,
    unk: u32,
    mask: u32,
}

impl Vocab {
    /// Builds a vocabulary; `[PAD]`, `[UNK]` and `[MASK]` must be present.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::input(format!("duplicate vocabulary token {t:?}")));
            }
        }
        let find = |s: &str| {
            index
                .get(s)
                .copied()
                .ok_or_else(|| Error::input(format!("vocabulary lacks special token {s}")))
        };
        let (pad, unk, mask) = (find(PAD)?, find(UNK)?, find(MASK)?);
        Ok(Self {
            tokens,
            index,
            pad,
            unk,
            mask,
        })
    }

    /// Specials at ids 0..4 followed by `words`.
    pub fn with_specials<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().map(Into::into));
        Self::new(tokens)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::new(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        fs::write(path, s)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn pad_id(&self) -> u32 {
        self.pad
    }

    pub fn unk_id(&self) -> u32 {
        self.unk
    }

    pub fn mask_id(&self) -> u32 {
        self.mask
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(&self, token: &str) -> bool {
        token.starts_with('[') && token.ends_with(']') && self.index.contains_key(token)
    }

    /// Non-special tokens, in id order.
    pub fn words(&self) -> Vec<&str> {
        self.tokens
            .iter()
            .map(String::as_str)
            .filter(|t| !self.is_special(t))
            .collect()
    }

    /// Ids for `tokens`, truncated to `max_len` and padded with `[PAD]`.
    pub fn encode(&self, tokens: &[String], max_len: usize) -> Vec<u32> {
        let mut ids: Vec<u32> = tokens
            .iter()
            .take(max_len)
            .map(|t| self.id(t).unwrap_or(self.unk))
            .collect();
        ids.resize(max_len, self.pad);
        ids
    }

    /// 64-bit FNV-1a over every token's UTF-8 bytes, each followed by `\n`.
    pub fn hash(&self) -> u64 {
        vocab_hash(self.tokens.iter().map(String::as_str))
    }
}

pub fn vocab_hash<'a>(tokens: impl IntoIterator<Item = &'a str>) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for t in tokens {
        for &b in t.as_bytes().iter().chain(std::iter::once(&b'\n')) {
            h ^= b as u64;
            h = h.wrapping_mul(PRIME);
        }
    }
    h
}

/// Whitespace tokenizer.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_truncates_pads_and_maps_unknowns() {
        let v = Vocab::with_specials(["good", "movie"]).unwrap();
        let ids = v.encode(&tokenize("good bad movie"), 5);
        assert_eq!(ids, vec![4, 1, 5, 0, 0]);
        assert_eq!(v.encode(&tokenize("good good good"), 2), vec![4, 4]);
    }

    #[test]
    fn hash_is_fnv1a_of_newline_terminated_tokens() {
        // FNV-1a("a\n") computed by hand from the published constants.
        let mut h: u64 = 0xcbf29ce484222325;
        for b in *b"a\n" {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        assert_eq!(vocab_hash(["a"]), h);
        assert_ne!(vocab_hash(["a", "b"]), vocab_hash(["ab"]));
    }

    #[test]
    fn requires_specials_and_unique_tokens() {
        assert!(Vocab::new(vec!["x".into()]).is_err());
        assert!(Vocab::with_specials(["x", "x"]).is_err());
    }
}
