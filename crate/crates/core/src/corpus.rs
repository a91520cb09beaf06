//! Tokenization, vocabulary construction and batching for the toy corpus.
//!
//! The corpus is line oriented: every nonempty line of the input file becomes
//! one training sequence, padded or truncated to the configured length.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{derive_seed, rng_from, write_atomic};

/// Reserved padding token. Always id 0.
pub const PAD: &str = "<pad>";
pub const PAD_ID: u32 = 0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenizerMode {
    #[default]
    #[serde(rename = "char")]
    Char,
    #[serde(rename = "whitespace-word")]
    Word,
}

impl TokenizerMode {
    fn split<'a>(&self, text: &'a str) -> Vec<&'a str> {
        match self {
            TokenizerMode::Char => text
                .char_indices()
                .filter(|(_, c)| *c != '\n' && *c != '\r')
                .map(|(i, c)| &text[i..i + c.len_utf8()])
                .collect(),
            TokenizerMode::Word => text.split_whitespace().collect(),
        }
    }
}

/// Dense token vocabulary. `PAD` sits at id 0; remaining ids are ordered by
/// descending corpus frequency with a lexicographic tiebreak.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    mode: TokenizerMode,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>, mode: TokenizerMode) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(PAD) {
            return Err(Error::invalid("vocabulary must start with the PAD token"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::invalid(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Self { tokens, index, mode })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn mode(&self) -> TokenizerMode {
        self.mode
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line, line number = id.
    pub fn save(&self, path: &Path) -> Result<()> {
        if self.mode == TokenizerMode::Char
            && self.tokens.iter().any(|t| t.contains('\n'))
        {
            return Err(Error::invalid("token contains a line break"));
        }
        let mut text = self.tokens.join("\n");
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path, mode: TokenizerMode) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        let tokens: Vec<String> = text
            .strip_suffix('\n')
            .unwrap_or(&text)
            .split('\n')
            .map(str::to_owned)
            .collect();
        Self::from_tokens(tokens, mode)
    }

    pub fn decode(&self, seq: &TokenSeq) -> String {
        let parts = seq
            .ids()
            .iter()
            .filter(|&&id| id != PAD_ID)
            .filter_map(|&id| self.token(id));
        match self.mode {
            TokenizerMode::Char => parts.collect(),
            TokenizerMode::Word => parts.collect::<Vec<_>>().join(" "),
        }
    }
}

/// Builds a vocabulary of at most `max_size` entries (PAD included).
pub fn build_vocabulary(text: &str, mode: TokenizerMode, max_size: usize) -> Result<Vocabulary> {
    if max_size == 0 {
        return Err(Error::invalid("max_size must be positive"));
    }
    let pieces = mode.split(text);
    if pieces.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for p in pieces {
        if p != PAD {
            *counts.entry(p).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let tokens = std::iter::once(PAD.to_owned())
        .chain(ranked.into_iter().take(max_size - 1).map(|(t, _)| t.to_owned()))
        .collect();
    Vocabulary::from_tokens(tokens, mode)
}

/// A sequence of token ids, all valid for the vocabulary it was built with.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(Vec<u32>);

impl TokenSeq {
    pub fn new(ids: Vec<u32>) -> Self {
        Self(ids)
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<u32> {
        self.0
    }

    pub fn check(&self, vocab_size: usize) -> Result<()> {
        match self.0.iter().find(|&&id| id as usize >= vocab_size) {
            Some(&id) => Err(Error::TokenOutOfRange { id, size: vocab_size }),
            None => Ok(()),
        }
    }
}

impl From<Vec<u32>> for TokenSeq {
    fn from(ids: Vec<u32>) -> Self {
        Self(ids)
    }
}

/// Encodes `text` to exactly `seq_len` ids. Unknown tokens become PAD;
/// short inputs are right-padded and long ones right-truncated.
pub fn encode(text: &str, vocab: &Vocabulary, seq_len: usize) -> TokenSeq {
    let mut ids: Vec<u32> = vocab
        .mode
        .split(text)
        .into_iter()
        .take(seq_len)
        .map(|p| vocab.id_of(p).unwrap_or(PAD_ID))
        .collect();
    ids.resize(seq_len, PAD_ID);
    TokenSeq(ids)
}

/// Encoded training corpus; one sequence per nonempty input line.
#[derive(Clone, Debug)]
pub struct Corpus {
    sequences: Vec<TokenSeq>,
    seq_len: usize,
}

impl Corpus {
    pub fn from_text(text: &str, vocab: &Vocabulary, seq_len: usize) -> Result<Self> {
        let sequences: Vec<TokenSeq> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| encode(l, vocab, seq_len))
            .collect();
        Self::new(sequences, seq_len)
    }

    pub fn new(sequences: Vec<TokenSeq>, seq_len: usize) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if let Some(s) = sequences.iter().find(|s| s.len() != seq_len) {
            return Err(Error::LengthMismatch(s.len(), seq_len));
        }
        Ok(Self { sequences, seq_len })
    }

    pub fn sequences(&self) -> &[TokenSeq] {
        &self.sequences
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusBatch {
    pub sequences: Vec<TokenSeq>,
}

impl CorpusBatch {
    pub fn batch_size(&self) -> usize {
        self.sequences.len()
    }
}

/// One epoch of shuffled batches. The last batch holds the remainder.
pub struct Batches<'a> {
    corpus: &'a Corpus,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl Iterator for Batches<'_> {
    type Item = CorpusBatch;

    fn next(&mut self) -> Option<CorpusBatch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let sequences = self.order[self.cursor..end]
            .iter()
            .map(|&i| self.corpus.sequences[i].clone())
            .collect();
        self.cursor = end;
        Some(CorpusBatch { sequences })
    }
}

fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from(derive_seed(seed, &[epoch])));
    order
}

/// First epoch of batches for `seed`.
pub fn batches(corpus: &Corpus, batch_size: usize, seed: u64) -> Batches<'_> {
    epoch_batches(corpus, batch_size, seed, 0)
}

pub fn epoch_batches(corpus: &Corpus, batch_size: usize, seed: u64, epoch: u64) -> Batches<'_> {
    Batches {
        corpus,
        order: epoch_order(corpus.len(), seed, epoch),
        batch_size: batch_size.max(1),
        cursor: 0,
    }
}

/// The batch consumed at global training step `step`, so that a resumed run
/// sees exactly the batches an uninterrupted run would.
pub fn batch_for_step(corpus: &Corpus, batch_size: usize, seed: u64, step: u64) -> CorpusBatch {
    let batch_size = batch_size.max(1);
    let per_epoch = corpus.len().div_ceil(batch_size) as u64;
    let epoch = step / per_epoch;
    let within = (step % per_epoch) as usize;
    epoch_batches(corpus, batch_size, seed, epoch)
        .nth(within)
        .expect("batch index within epoch")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab_of(tokens: &[&str]) -> Vocabulary {
        Vocabulary::from_tokens(tokens.iter().map(|s| s.to_string()).collect(), TokenizerMode::Char)
            .unwrap()
    }

    #[test]
    fn char_vocab_tiny() {
        let v = build_vocabulary("aab", TokenizerMode::Char, 10).unwrap();
        assert_eq!(v.tokens(), &[PAD, "a", "b"]);
        assert_eq!(v.size(), 3);
    }

    #[test]
    fn word_vocab_tiny() {
        let v = build_vocabulary("x y x", TokenizerMode::Word, 10).unwrap();
        assert_eq!(v.tokens(), &[PAD, "x", "y"]);
    }

    #[test]
    fn vocab_truncates_by_frequency_then_lexicographic() {
        // counts: e=4, d=3, b=2, c=2, a=1
        let v = build_vocabulary("eeeedddbbcca", TokenizerMode::Char, 4).unwrap();
        assert_eq!(v.tokens(), &[PAD, "e", "d", "b"]);
        // tie between b and c resolved lexicographically
        let v = build_vocabulary("ccbb", TokenizerMode::Char, 2).unwrap();
        assert_eq!(v.tokens(), &[PAD, "b"]);
    }

    #[test]
    fn empty_text_is_an_error() {
        assert!(matches!(
            build_vocabulary("", TokenizerMode::Char, 10),
            Err(Error::EmptyCorpus)
        ));
        assert!(matches!(
            build_vocabulary("  \n ", TokenizerMode::Word, 10),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn encode_pads_maps_unknown_and_truncates() {
        let v = vocab_of(&[PAD, "a", "b"]);
        assert_eq!(encode("ab", &v, 4).ids(), &[1, 2, 0, 0]);
        assert_eq!(encode("abz", &v, 3).ids(), &[1, 2, 0]);
        assert_eq!(encode("abab", &v, 2).ids(), &[1, 2]);
    }

    #[test]
    fn decode_round_trip() {
        let text = "the quick brown fox";
        let v = build_vocabulary(text, TokenizerMode::Char, 64).unwrap();
        assert_eq!(v.decode(&encode(text, &v, 32)), text);
        let v = build_vocabulary(text, TokenizerMode::Word, 64).unwrap();
        assert_eq!(v.decode(&encode(text, &v, 8)), text);
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = build_vocabulary("hello, world", TokenizerMode::Char, 64).unwrap();
        v.save(&path).unwrap();
        assert_eq!(Vocabulary::load(&path, TokenizerMode::Char).unwrap(), v);
    }

    fn toy_corpus(n: usize) -> Corpus {
        Corpus::new((0..n as u32).map(|i| TokenSeq::new(vec![i, i])).collect(), 2).unwrap()
    }

    #[test]
    fn batches_cover_epoch() {
        let c = toy_corpus(4);
        let got: Vec<_> = batches(&c, 2, 7).collect();
        assert_eq!(got.len(), 2);
        let mut seen: Vec<u32> = got.iter().flat_map(|b| b.sequences.iter().map(|s| s.ids()[0])).collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3]);
    }

    #[test]
    fn batches_deterministic() {
        let c = toy_corpus(9);
        let a: Vec<_> = batches(&c, 2, 11).collect();
        let b: Vec<_> = batches(&c, 2, 11).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn batches_remainder() {
        let c = toy_corpus(3);
        let sizes: Vec<_> = batches(&c, 2, 0).map(|b| b.batch_size()).collect();
        assert_eq!(sizes, vec![2, 1]);
    }

    #[test]
    fn step_batches_follow_epochs() {
        let c = toy_corpus(5);
        let epoch1: Vec<_> = epoch_batches(&c, 2, 3, 1).collect();
        assert_eq!(batch_for_step(&c, 2, 3, 3), epoch1[0]);
        assert_eq!(batch_for_step(&c, 2, 3, 5), epoch1[2]);
    }
}
