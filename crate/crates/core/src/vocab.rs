//! Vocabulary, the learnable token embedding table, and rounding of
//! continuous vectors back to tokens.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;

const RESERVED: [&str; 3] = ["<pad>", "<eos>", "<unk>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from content words; reserved markers are
    /// prepended automatically and duplicates are dropped (first wins).
    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for w in words {
            let w = w.as_ref();
            if !tokens.iter().any(|t| t == w) {
                tokens.push(w.to_string());
            }
        }
        Self::from_tokens(tokens)
    }

    /// Builds a vocabulary from the full token list, reserved markers included.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 4 {
            return Err(Error::BadVocab(format!(
                "need at least 4 tokens, got {}",
                tokens.len()
            )));
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens[i] != *r {
                return Err(Error::BadVocab(format!(
                    "line {i} must be {r:?}, found {:?}",
                    tokens[i]
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::BadVocab(format!("invalid token {t:?} at id {i}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::BadVocab(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Non-reserved words, in id order.
    pub fn content_words(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_tokens(
            text.lines()
                .map(|l| l.trim_end_matches('\r').to_string())
                .collect(),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Hex SHA-256 of the vocabulary file contents.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Lowercases, strips punctuation, and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| !c.is_ascii_punctuation())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Fixed-length id sequence: content ids, one EOS, then PAD.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence(Vec<usize>);

impl TokenSequence {
    /// Validates the padding invariant against a vocabulary size.
    pub fn new(ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab_size) {
            return Err(Error::BadToken {
                id,
                size: vocab_size,
            });
        }
        if let Some(first_pad) = ids.iter().position(|&id| id == PAD) {
            if ids[first_pad..].iter().any(|&id| id != PAD) {
                return Err(Error::BadVocab("non-PAD token after PAD".into()));
            }
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn encode(text: &str, vocab: &Vocabulary, k: usize) -> Result<TokenSequence> {
    if k < 2 {
        return Err(Error::BadConfig(format!(
            "sequence length k={k} must be >= 2"
        )));
    }
    let words = tokenize(text);
    if words.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut ids: Vec<usize> = words
        .iter()
        .take(k - 1)
        .map(|w| vocab.id(w).unwrap_or(UNK))
        .collect();
    ids.push(EOS);
    ids.resize(k, PAD);
    Ok(TokenSequence(ids))
}

pub fn detokenize(seq: &TokenSequence, vocab: &Vocabulary) -> String {
    let mut words = Vec::new();
    for &id in seq.ids() {
        match id {
            // padding only ever trails, so it renders as nothing
            EOS | PAD => break,
            id => words.push(vocab.token(id).unwrap_or(RESERVED[UNK])),
        }
    }
    words.join(" ")
}

/// Learnable `|V| × d1` token embedding matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    matrix: Array2<f64>,
}

impl EmbeddingTable {
    pub fn new(matrix: Array2<f64>) -> Result<Self> {
        if matrix.ncols() < 2 {
            return Err(Error::BadConfig(format!(
                "embedding width {} must be >= 2",
                matrix.ncols()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding table"));
        }
        Ok(Self { matrix })
    }

    /// Zero-mean Gaussian initialization with std 0.02.
    pub fn random(vocab_size: usize, dim: usize, rng: &mut impl Rng) -> Self {
        Self::random_with_std(vocab_size, dim, 0.02, rng)
    }

    pub fn random_with_std(vocab_size: usize, dim: usize, std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("valid std");
        let matrix = Array2::from_shape_fn((vocab_size, dim), |_| normal.sample(rng));
        Self { matrix }
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn matrix_mut(&mut self) -> &mut Array2<f64> {
        &mut self.matrix
    }

    pub fn vocab_size(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    /// Index of the nearest row by Euclidean distance; lowest id wins ties.
    pub fn nearest(&self, v: ndarray::ArrayView1<f64>) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, row) in self.matrix.rows().into_iter().enumerate() {
            let d: f64 = row
                .iter()
                .zip(v.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    /// Smallest Euclidean distance between any two distinct rows.
    pub fn min_pairwise_distance(&self) -> f64 {
        let n = self.matrix.nrows();
        let mut min = f64::INFINITY;
        for i in 0..n {
            for j in i + 1..n {
                let d = (&self.matrix.row(i) - &self.matrix.row(j))
                    .mapv(|x| x * x)
                    .sum()
                    .sqrt();
                min = min.min(d);
            }
        }
        min
    }
}

pub fn embed(seq: &TokenSequence, table: &EmbeddingTable) -> Result<Array2<f64>> {
    let size = table.vocab_size();
    if let Some(&id) = seq.ids().iter().find(|&&id| id >= size) {
        return Err(Error::BadToken { id, size });
    }
    Ok(table.matrix.select(ndarray::Axis(0), seq.ids()))
}

/// Maps every row to its nearest embedding, then forces everything after
/// the first EOS to PAD. A PAD decoded before any EOS also terminates the
/// content so the result satisfies the sequence invariant.
pub fn round_to_tokens(x0: ArrayView2<f64>, table: &EmbeddingTable) -> Result<TokenSequence> {
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("rounding input"));
    }
    if x0.ncols() != table.dim() {
        return Err(Error::DimMismatch {
            expected: table.dim(),
            got: x0.ncols(),
        });
    }
    let mut ids: Vec<usize> = x0.rows().into_iter().map(|r| table.nearest(r)).collect();
    if let Some(end) = ids.iter().position(|&id| id == EOS || id == PAD) {
        for id in &mut ids[end + 1..] {
            *id = PAD;
        }
    }
    Ok(TokenSequence(ids))
}
