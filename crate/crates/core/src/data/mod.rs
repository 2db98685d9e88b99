//! Text samples, TSV loading, training-set augmentation and a synthetic
//! two-class task.

mod vocab;

pub use vocab::{tokenize, vocab_hash, Vocab, CLS, MASK, PAD, SPECIALS, UNK};

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Once;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Max length used by [`synth_dataset`].
pub const SYNTH_MAX_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub tokens: Vec<String>,
    /// Padded to the encoding length; empty until [`Sample::encode`] runs.
    pub token_ids: Vec<u32>,
    pub label: Option<u32>,
}

impl Sample {
    pub fn new(tokens: Vec<String>, label: Option<u32>) -> Self {
        Self {
            tokens,
            token_ids: Vec::new(),
            label,
        }
    }

    pub fn encode(&mut self, vocab: &Vocab, max_len: usize) {
        self.token_ids = vocab.encode(&self.tokens, max_len);
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

pub fn encode_all(samples: &mut [Sample], vocab: &Vocab, max_len: usize) {
    samples.iter_mut().for_each(|s| s.encode(vocab, max_len));
}

/// Parse `text<TAB>label` lines. Blank lines are skipped.
pub fn load_tsv(path: &Path) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(path)?;
    parse_tsv(&text, path)
}

pub fn parse_tsv(text: &str, path: &Path) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let (body, label) = line
            .rsplit_once('\t')
            .ok_or_else(|| err("expected text<TAB>label".into()))?;
        let label: u32 = label
            .trim()
            .parse()
            .map_err(|_| err(format!("label {label:?} is not a class index")))?;
        out.push(Sample::new(tokenize(body), Some(label)));
    }
    Ok(out)
}

pub fn write_tsv(samples: &[Sample], path: &Path) -> Result<()> {
    let mut s = String::new();
    for sample in samples {
        s.push_str(&sample.text());
        s.push('\t');
        if let Some(l) = sample.label {
            s.push_str(&l.to_string());
        }
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

/// Word to part-of-speech tag lookup.
#[derive(Debug, Clone, Default)]
pub struct PosLexicon {
    tag_of: BTreeMap<String, String>,
    words_by_tag: BTreeMap<String, Vec<String>>,
}

impl PosLexicon {
    pub fn from_pairs<I, S>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (S, S)>,
        S: Into<String>,
    {
        let mut lex = Self::default();
        for (w, t) in pairs {
            let (w, t) = (w.into(), t.into());
            if lex.tag_of.insert(w.clone(), t.clone()).is_none() {
                lex.words_by_tag.entry(t).or_default().push(w);
            }
        }
        lex
    }

    /// `word<TAB>tag` per line.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (w, t) = line.split_once('\t').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "expected word<TAB>tag".into(),
            })?;
            pairs.push((w.to_string(), t.trim().to_string()));
        }
        Ok(Self::from_pairs(pairs))
    }

    pub fn tag(&self, word: &str) -> Option<&str> {
        self.tag_of.get(word).map(String::as_str)
    }

    pub fn words_with_tag(&self, tag: &str) -> &[String] {
        self.words_by_tag.get(tag).map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub p_mask: f64,
    pub p_pos: f64,
    pub p_ng: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_mask: 0.1,
            p_pos: 0.1,
            p_ng: 0.25,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_mask", self.p_mask), ("p_pos", self.p_pos), ("p_ng", self.p_ng)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        Ok(())
    }
}

static NO_LEXICON: Once = Once::new();

/// One augmented copy of `sample`. `stream` selects an independent random
/// stream under `cfg.seed`, so copies can be produced in any order.
///
/// The n-gram crop (probability `p_ng`, `n` uniform in 1..=5) is decided
/// first. Each remaining word is then masked with probability `p_mask`, or
/// otherwise swapped for a same-tag word with probability `p_pos`. Words
/// without a usable tag fall back to a uniformly drawn vocabulary word.
pub fn augment(
    sample: &Sample,
    cfg: &AugmentConfig,
    lexicon: Option<&PosLexicon>,
    vocab: &Vocab,
    stream: u64,
    max_len: usize,
) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    if lexicon.is_none() && cfg.p_pos > 0.0 {
        NO_LEXICON.call_once(|| {
            log::warn!("no POS lexicon given; same-tag replacement uses uniform vocabulary words")
        });
    }

    let mut tokens = sample.tokens.clone();
    if rng.gen::<f64>() < cfg.p_ng && !tokens.is_empty() {
        let n = rng.gen_range(1..=5usize).min(tokens.len());
        let start = rng.gen_range(0..=tokens.len() - n);
        tokens = tokens[start..start + n].to_vec();
    }

    let words = vocab.words();
    for tok in tokens.iter_mut() {
        let (r_mask, r_pos): (f64, f64) = (rng.gen(), rng.gen());
        if r_mask < cfg.p_mask {
            *tok = MASK.to_string();
        } else if r_pos < cfg.p_pos {
            let same_tag: Vec<&String> = lexicon
                .and_then(|lex| lex.tag(tok).map(|t| lex.words_with_tag(t)))
                .unwrap_or(&[])
                .iter()
                .filter(|w| *w != tok)
                .collect();
            if let Some(w) = same_tag.choose(&mut rng) {
                *tok = (*w).clone();
            } else if let Some(w) = words.choose(&mut rng) {
                *tok = (*w).to_string();
            }
        }
    }

    let mut out = Sample::new(tokens, sample.label);
    out.encode(vocab, max_len);
    out
}

/// Specials followed by `w0 .. w{vocab_size-1}`.
pub fn synth_vocab(vocab_size: usize) -> Result<Vocab> {
    if vocab_size < 4 {
        return Err(Error::input(format!("synthetic vocabulary needs >= 4 words, got {vocab_size}")));
    }
    Vocab::with_specials((0..vocab_size).map(|i| format!("w{i}")))
}

/// Word groups of the synthetic task: `(positive, negative)`.
pub fn synth_groups(vocab_size: usize) -> (Vec<String>, Vec<String>) {
    let q = (vocab_size / 4).max(1);
    (
        (0..q).map(|i| format!("w{i}")).collect(),
        (q..2 * q).map(|i| format!("w{i}")).collect(),
    )
}

/// Balanced two-class sequences. The label is 1 when words from the
/// positive group outnumber words from the negative group, else 0; the
/// margin is always at least one word, so a bag-of-words sign test
/// separates the classes exactly. Samples are encoded with
/// [`synth_vocab`] to [`SYNTH_MAX_LEN`].
pub fn synth_dataset(n_samples: usize, vocab_size: usize, seed: u64) -> Result<Vec<Sample>> {
    let vocab = synth_vocab(vocab_size)?;
    let (pos, neg) = synth_groups(vocab_size);
    let neutral: Vec<String> = (2 * pos.len()..vocab_size).map(|i| format!("w{i}")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<u32> = (0..n_samples).map(|i| (i % 2) as u32).collect();
    labels.shuffle(&mut rng);

    let mut out = Vec::with_capacity(n_samples);
    for label in labels {
        let minor = rng.gen_range(0..=2usize);
        let major = minor + rng.gen_range(1..=3usize);
        let n_neutral = if neutral.is_empty() { 0 } else { rng.gen_range(2..=6usize) };
        let (maj, min) = if label == 1 { (&pos, &neg) } else { (&neg, &pos) };
        let mut tokens = Vec::with_capacity(major + minor + n_neutral);
        tokens.extend((0..major).map(|_| maj.choose(&mut rng).unwrap().clone()));
        tokens.extend((0..minor).map(|_| min.choose(&mut rng).unwrap().clone()));
        tokens.extend((0..n_neutral).map(|_| neutral.choose(&mut rng).unwrap().clone()));
        tokens.shuffle(&mut rng);
        let mut s = Sample::new(tokens, Some(label));
        s.encode(&vocab, SYNTH_MAX_LEN);
        out.push(s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocab {
        synth_vocab(40).unwrap()
    }

    #[test]
    fn tsv_parsing() {
        let p = Path::new("t.tsv");
        let s = parse_tsv("good movie\t1\n", p).unwrap();
        assert_eq!(s[0].tokens, vec!["good", "movie"]);
        assert_eq!(s[0].label, Some(1));
        assert!(parse_tsv("", p).unwrap().is_empty());
        match parse_tsv("a\t0\nno tab here\n", p).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
        assert!(parse_tsv("x\tpositive\n", p).is_err());
    }

    #[test]
    fn full_mask_probability_masks_everything() {
        let v = vocab();
        let s = Sample::new(tokenize("w1 w2 w3 w9"), Some(1));
        let cfg = AugmentConfig {
            p_mask: 1.0,
            p_pos: 0.0,
            p_ng: 0.0,
            seed: 3,
        };
        let a = augment(&s, &cfg, None, &v, 0, 8);
        assert!(a.tokens.iter().all(|t| t == MASK));
        assert_eq!(a.token_ids[..4], [v.mask_id(); 4]);
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let v = vocab();
        let s = Sample::new(tokenize("w1 w2 w3 w9"), Some(0));
        let cfg = AugmentConfig {
            p_mask: 0.0,
            p_pos: 0.0,
            p_ng: 0.0,
            seed: 9,
        };
        for stream in 0..20 {
            assert_eq!(augment(&s, &cfg, None, &v, stream, 8).tokens, s.tokens);
        }
    }

    #[test]
    fn pos_replacement_prefers_same_tag() {
        let v = Vocab::with_specials(["run", "walk", "cat", "dog"]).unwrap();
        let lex = PosLexicon::from_pairs([("run", "VB"), ("walk", "VB"), ("cat", "NN"), ("dog", "NN")]);
        let s = Sample::new(tokenize("run cat"), Some(0));
        let cfg = AugmentConfig {
            p_mask: 0.0,
            p_pos: 1.0,
            p_ng: 0.0,
            seed: 1,
        };
        let a = augment(&s, &cfg, Some(&lex), &v, 0, 4);
        assert_eq!(a.tokens, vec!["walk", "dog"]);
    }

    #[test]
    fn augmentation_is_deterministic_per_stream() {
        let v = vocab();
        let s = Sample::new(tokenize("w1 w2 w3 w4 w5 w6 w7"), Some(1));
        let cfg = AugmentConfig {
            seed: 5,
            ..AugmentConfig::default()
        };
        assert_eq!(augment(&s, &cfg, None, &v, 4, 8), augment(&s, &cfg, None, &v, 4, 8));
    }

    #[test]
    fn synth_is_balanced_seeded_and_separable() {
        let d = synth_dataset(100, 40, 1).unwrap();
        assert_eq!(d.iter().filter(|s| s.label == Some(1)).count(), 50);
        assert_eq!(d, synth_dataset(100, 40, 1).unwrap());
        assert_ne!(d, synth_dataset(100, 40, 2).unwrap());

        let (pos, neg) = synth_groups(40);
        for s in &d {
            let score: i64 = s
                .tokens
                .iter()
                .map(|t| (pos.contains(t) as i64) - (neg.contains(t) as i64))
                .sum();
            assert_eq!((score > 0) as u32, s.label.unwrap());
            assert!(s.tokens.len() <= SYNTH_MAX_LEN);
        }
        assert!(synth_dataset(10, 3, 0).is_err());
        assert!(synth_dataset(10, 4, 0).is_ok());
    }

    proptest! {
        #[test]
        fn augment_keeps_label_and_never_grows(
            words in proptest::collection::vec(0usize..40, 0..14),
            p_mask in 0.0f64..=1.0, p_pos in 0.0f64..=1.0, p_ng in 0.0f64..=1.0,
            seed in any::<u64>(), stream in any::<u64>(), label in 0u32..3,
        ) {
            let v = vocab();
            let s = Sample::new(words.iter().map(|i| format!("w{i}")).collect(), Some(label));
            let cfg = AugmentConfig { p_mask, p_pos, p_ng, seed };
            let a = augment(&s, &cfg, None, &v, stream, 16);
            prop_assert_eq!(a.label, Some(label));
            prop_assert!(a.tokens.len() <= s.tokens.len());
            prop_assert_eq!(a.token_ids.len(), 16);
        }
    }
}
