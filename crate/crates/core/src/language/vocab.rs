use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::checkpoint::write_atomic;

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<start>", "<end>", "<unk>"];

const HEADER_PREFIX: &str = "# retina-vocab v1";

/// Token ↔ index map with four fixed reserved entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    min_frequency: usize,
}

impl Vocabulary {
    /// Tokens with count ≥ `min_frequency`, ordered by count descending then
    /// token ascending. Reserved spellings in the corpus are ignored.
    pub fn build<S: AsRef<str>>(corpus: &[Vec<S>], min_frequency: usize) -> Result<Self> {
        if min_frequency == 0 {
            return Err(Error::invalid("build_vocabulary", "min_frequency must be at least 1"));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for tok in corpus.iter().flatten() {
            let t = tok.as_ref();
            if !RESERVED.contains(&t) {
                *counts.entry(t).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_frequency).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Ok(Self::from_tokens(kept.into_iter().map(|(t, _)| t.to_string()), min_frequency))
    }

    fn from_tokens(extra: impl IntoIterator<Item = String>, min_frequency: usize) -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).chain(extra).collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index, min_frequency }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn min_frequency(&self) -> usize {
        self.min_frequency
    }

    pub fn index_of(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    /// Non-reserved tokens in index order.
    pub fn words(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    /// `START tokens… END`.
    pub fn encode_caption<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        std::iter::once(START)
            .chain(tokens.iter().map(|t| self.index_of(t.as_ref())))
            .chain(std::iter::once(END))
            .collect()
    }

    /// Word strings for generated indices, dropping reserved markers other
    /// than `<unk>`.
    pub fn decode_caption(&self, indices: &[usize]) -> Vec<String> {
        indices
            .iter()
            .filter(|&&i| i != PAD && i != START && i != END)
            .filter_map(|&i| self.token(i).map(str::to_string))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{HEADER_PREFIX} min_frequency={}\n", self.min_frequency);
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Data(format!("vocabulary file: {m}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file"))?;
        let min_frequency = header
            .strip_prefix(HEADER_PREFIX)
            .and_then(|rest| rest.trim().strip_prefix("min_frequency="))
            .and_then(|v| v.parse::<usize>().ok())
            .ok_or_else(|| bad("missing or unsupported version header"))?;
        let all: Vec<&str> = lines.collect();
        if all.len() < RESERVED.len() || all[..RESERVED.len()] != RESERVED {
            return Err(bad("reserved tokens missing or out of order"));
        }
        let extra: Vec<String> = all[RESERVED.len()..].iter().map(|s| s.to_string()).collect();
        let vocab = Self::from_tokens(extra, min_frequency);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(bad("duplicate token"));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

pub fn build_vocabulary<S: AsRef<str>>(corpus: &[Vec<S>], min_frequency: usize) -> Result<Vocabulary> {
    Vocabulary::build(corpus, min_frequency)
}
