use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;

/// Reserved tokens, occupying indices 0..4 in this order.
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Token/index bijection with the four reserved entries first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds from ordinary tokens (reserved entries are prepended).
    /// Duplicates and tokens that collide with reserved names are rejected.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED.iter().map(|s| s.to_string()).chain(tokens.into_iter().map(Into::into)) {
            if vocab.index.contains_key(&t) {
                return Err(Error::InvalidInput(format!("duplicate vocabulary token `{t}`")));
            }
            vocab.index.insert(t.clone(), vocab.tokens.len());
            vocab.tokens.push(t);
        }
        Ok(vocab)
    }

    /// Keeps the most frequent tokens so that the total size, reserved
    /// entries included, is at most `max_size`. Ties break alphabetically.
    pub fn build<'a, I>(tokens: I, max_size: usize) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in tokens {
            if !RESERVED.contains(&t) {
                *counts.entry(t).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        ranked.truncate(max_size.saturating_sub(RESERVED.len()));
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t)).expect("unique by construction")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == RESERVED.len()
    }

    /// Index of `token`, or [`UNK`] when out of vocabulary.
    pub fn index(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.index(t.as_ref())).collect()
    }

    pub fn decode(&self, indices: &[usize]) -> Vec<String> {
        indices
            .iter()
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]).to_string())
            .collect()
    }

    /// Ordinary tokens, i.e. everything after the reserved block.
    pub fn ordinary_tokens(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    /// One token per line; line `k` holds index `k + 4`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.ordinary_tokens().join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().filter(|l| !l.is_empty()))
    }
}
