//! Token vocabularies and sequences.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// A state of the search: an ordered list of content-token ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(Vec<TokenId>);

impl TokenSequence {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        Self(tokens)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0; len])
    }

    /// Builds a sequence and checks every id against the content vocabulary.
    pub fn checked(tokens: Vec<TokenId>, content_size: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::contract("token sequence must be non-empty"));
        }
        if let Some(pos) = tokens.iter().position(|&t| t as usize >= content_size) {
            return Err(Error::contract(format!(
                "token {} at position {pos} outside content vocabulary of size {content_size}",
                tokens[pos]
            )));
        }
        Ok(Self(tokens))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.0
    }

    pub fn tokens_mut(&mut self) -> &mut [TokenId] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<TokenId> {
        self.0
    }
}

impl From<Vec<TokenId>> for TokenSequence {
    fn from(v: Vec<TokenId>) -> Self {
        Self(v)
    }
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.0 {
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

/// Number of positions where `a` and `b` differ.
pub fn hamming(a: &TokenSequence, b: &TokenSequence) -> Result<usize> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "hamming distance needs equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.0.iter().zip(&b.0).filter(|(x, y)| x != y).count())
}

/// Content labels followed by the control labels used to serialize episodes.
///
/// Layout of ids: content tokens `[0, V)`, separators `<seq0>..<seq{K}>`,
/// then `<stop>`, then score bins `<s0>..<s{B-1}>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocabulary {
    symbols: Vec<String>,
    content_size: usize,
    separators: usize,
    bins: usize,
    index: HashMap<String, TokenId>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    content: Vec<String>,
    separators: usize,
    bins: usize,
}

impl TryFrom<VocabRepr> for Vocabulary {
    type Error = Error;

    fn try_from(r: VocabRepr) -> Result<Self> {
        Vocabulary::new(r.content, r.separators, r.bins)
    }
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        VocabRepr {
            content: v.symbols[..v.content_size].to_vec(),
            separators: v.separators,
            bins: v.bins,
        }
    }
}

/// What a token id stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Content(TokenId),
    Separator(usize),
    Stop,
    ScoreBin(usize),
}

impl Vocabulary {
    pub fn new(content: Vec<String>, separators: usize, bins: usize) -> Result<Self> {
        if content.len() < 2 {
            return Err(Error::contract("vocabulary needs at least two content tokens"));
        }
        if separators == 0 {
            return Err(Error::contract("vocabulary needs at least one separator"));
        }
        let content_size = content.len();
        let mut symbols = content;
        symbols.extend((0..separators).map(|i| format!("<seq{i}>")));
        symbols.push("<stop>".to_string());
        symbols.extend((0..bins).map(|i| format!("<s{i}>")));
        let mut index = HashMap::with_capacity(symbols.len());
        for (id, s) in symbols.iter().enumerate() {
            if index.insert(s.clone(), id as TokenId).is_some() {
                return Err(Error::contract(format!("duplicate vocabulary label `{s}`")));
            }
        }
        Ok(Self {
            symbols,
            content_size,
            separators,
            bins,
            index,
        })
    }

    /// Content labels `"0".."{size-1}"`.
    pub fn numeric(content_size: usize, separators: usize, bins: usize) -> Result<Self> {
        Self::new(
            (0..content_size).map(|i| i.to_string()).collect(),
            separators,
            bins,
        )
    }

    pub fn content_size(&self) -> usize {
        self.content_size
    }

    pub fn separators(&self) -> usize {
        self.separators
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn label(&self, id: TokenId) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, label: &str) -> Option<TokenId> {
        self.index.get(label).copied()
    }

    pub fn separator(&self, i: usize) -> Option<TokenId> {
        (i < self.separators).then(|| (self.content_size + i) as TokenId)
    }

    pub fn stop(&self) -> TokenId {
        (self.content_size + self.separators) as TokenId
    }

    pub fn score_bin(&self, b: usize) -> Option<TokenId> {
        (b < self.bins).then(|| (self.content_size + self.separators + 1 + b) as TokenId)
    }

    pub fn kind(&self, id: TokenId) -> Option<TokenKind> {
        let id = id as usize;
        let sep_start = self.content_size;
        let stop = sep_start + self.separators;
        if id < sep_start {
            Some(TokenKind::Content(id as TokenId))
        } else if id < stop {
            Some(TokenKind::Separator(id - sep_start))
        } else if id == stop {
            Some(TokenKind::Stop)
        } else if id < self.symbols.len() {
            Some(TokenKind::ScoreBin(id - stop - 1))
        } else {
            None
        }
    }

    pub fn is_content(&self, id: TokenId) -> bool {
        (id as usize) < self.content_size
    }
}
