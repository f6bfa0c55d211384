//! Vocabulary construction and the word embedding table.
//!
//! The vocabulary is frozen from the training split alone. Three synthetic
//! tokens are always present: `_FOL_` and `_EOL_` wrap every sentence, and
//! `_UNK_` stands in for anything preprocessing could not map to a known
//! word. Pretrained vectors seed the table where available; the rest start
//! from small Gaussian noise and train freely. The unknown vector is the
//! mean of all loaded pretrained rows and stays frozen so it cannot drift
//! toward whichever rare words happened to fall back on it.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const FOL: &str = "_FOL_";
pub const EOL: &str = "_EOL_";
pub const UNK: &str = "_UNK_";

/// Token table with frequency counts from the corpus that built it.
///
/// Ids are assigned in first-seen order with the three markers up front,
/// so a vocabulary rebuilt from the same corpus is identical.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    counts: Vec<u64>,
}

impl Vocabulary {
    fn with_markers() -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
            counts: Vec::new(),
        };
        for marker in [FOL, EOL, UNK] {
            v.insert(marker);
        }
        v
    }

    fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            self.counts[id] += 1;
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        self.counts.push(1);
        id
    }

    /// Builds the table from tokenized sentences. Marker counts reflect
    /// their per-sentence occurrences, everything else its corpus count.
    pub fn build(sentences: impl IntoIterator<Item = impl IntoIterator<Item = impl AsRef<str>>>) -> Self {
        let mut v = Vocabulary::with_markers();
        for sentence in sentences {
            for token in sentence {
                v.insert(token.as_ref());
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        // Markers are always present, so never truly empty; kept for len()'s sake.
        self.tokens.is_empty()
    }

    pub fn unk_id(&self) -> usize {
        self.index[UNK]
    }

    pub fn fol_id(&self) -> usize {
        self.index[FOL]
    }

    pub fn eol_id(&self) -> usize {
        self.index[EOL]
    }

    /// Exact lookup; no fallback logic here.
    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn count(&self, token: &str) -> u64 {
        self.id(token).map_or(0, |id| self.counts[id])
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// All tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Writes one token per line in id order. The checkpoint format stores
    /// tensors only, so the vocabulary travels in this sidecar file.
    pub fn save(&self, w: &mut impl Write) -> Result<()> {
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    /// Reads a sidecar produced by [`Vocabulary::save`]. Counts are not
    /// stored there; restored entries get count 0 except the markers.
    pub fn load(r: &mut impl Read) -> Result<Self> {
        let reader = BufReader::new(r);
        let mut tokens = Vec::new();
        let mut index = HashMap::new();
        for (i, line) in reader.lines().enumerate() {
            let token = line?;
            if token.is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    detail: "empty token in vocabulary file".into(),
                });
            }
            if index.insert(token.clone(), i).is_some() {
                return Err(Error::Parse {
                    line: i + 1,
                    detail: format!("duplicate token {token:?} in vocabulary file"),
                });
            }
            tokens.push(token);
        }
        for marker in [FOL, EOL, UNK] {
            if !index.contains_key(marker) {
                return Err(Error::Format(format!(
                    "vocabulary file is missing the {marker} marker"
                )));
            }
        }
        let counts = vec![0; tokens.len()];
        Ok(Vocabulary { tokens, index, counts })
    }
}

/// Summary of how well a pretrained vector file covered the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageStats {
    pub vocab_size: usize,
    pub covered: usize,
    /// Rows in the file that matched nothing and were skipped.
    pub unused_vectors: usize,
}

impl CoverageStats {
    pub fn fraction(&self) -> f64 {
        if self.vocab_size == 0 {
            return 1.0;
        }
        self.covered as f64 / self.vocab_size as f64
    }
}

/// The embedding matrix plus which rows must never receive updates.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    /// Row per vocabulary id, `[vocab, r]`, trainable.
    pub table: Tensor<f32>,
    /// Ids whose rows stay fixed after initialization (the unknown vector).
    pub frozen_rows: Vec<usize>,
}

impl EmbeddingTable {
    /// Random initialization only, no pretrained file. The unknown row is
    /// frozen here too, keeping the rule "the unknown vector never trains"
    /// uniform across both construction paths.
    pub fn random<R: Rng>(vocab: &Vocabulary, dim: usize, rng: &mut R) -> Result<Self> {
        let normal = Normal::new(0.0f64, 0.01).expect("fixed std");
        let data: Vec<f32> = (0..vocab.len() * dim)
            .map(|_| normal.sample(rng) as f32)
            .collect();
        let table = Tensor::new(data, &[vocab.len(), dim])?.trainable();
        Ok(EmbeddingTable { table, frozen_rows: vec![vocab.unk_id()] })
    }

    /// Seeds the table from a whitespace-separated `token v1 .. vr` file.
    ///
    /// Covered rows copy the file's vector; the unknown marker becomes the
    /// mean of every loaded vector and is frozen; all remaining rows draw
    /// from N(0, 0.01^2) and train. Returns the table and coverage stats so
    /// callers can warn when coverage is poor.
    pub fn load_pretrained<R: Rng>(
        vocab: &Vocabulary,
        dim: usize,
        file: &mut impl Read,
        rng: &mut R,
    ) -> Result<(Self, CoverageStats)> {
        let normal = Normal::new(0.0f64, 0.01).expect("fixed std");
        let mut data: Vec<f32> = (0..vocab.len() * dim)
            .map(|_| normal.sample(rng) as f32)
            .collect();
        let mut covered_mask = vec![false; vocab.len()];
        let mut mean = vec![0.0f64; dim];
        let mut loaded = 0usize;
        let mut unused = 0usize;

        let reader = BufReader::new(file);
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let token = parts.next().ok_or(Error::Parse {
                line: i + 1,
                detail: "missing token".into(),
            })?;
            let values: Vec<f32> = parts
                .map(|p| {
                    p.parse::<f32>().map_err(|_| Error::Parse {
                        line: i + 1,
                        detail: format!("bad vector component {p:?}"),
                    })
                })
                .collect::<Result<_>>()?;
            if values.len() != dim {
                return Err(Error::Parse {
                    line: i + 1,
                    detail: format!(
                        "vector for {token:?} has {} components, expected {dim}",
                        values.len()
                    ),
                });
            }
            loaded += 1;
            for (m, v) in mean.iter_mut().zip(&values) {
                *m += *v as f64;
            }
            match vocab.id(token) {
                Some(id) => {
                    // First mapping wins so duplicated file rows cannot
                    // silently flip a vector.
                    if !covered_mask[id] {
                        covered_mask[id] = true;
                        data[id * dim..(id + 1) * dim].copy_from_slice(&values);
                    }
                }
                None => unused += 1,
            }
        }

        let unk = vocab.unk_id();
        if loaded > 0 {
            for (j, m) in mean.iter().enumerate() {
                data[unk * dim + j] = (*m / loaded as f64) as f32;
            }
        }
        covered_mask[unk] = false; // the mean vector is synthetic, not coverage

        let covered = covered_mask.iter().filter(|&&c| c).count();
        let table = Tensor::new(data, &[vocab.len(), dim])?.trainable();
        Ok((
            EmbeddingTable { table, frozen_rows: vec![unk] },
            CoverageStats { vocab_size: vocab.len(), covered, unused_vectors: unused },
        ))
    }

    /// Looks up rows for a token id sequence on the tape: `[T, r]`.
    /// Gradients scatter back into the table, so embeddings train with
    /// everything else.
    pub fn embed<T: Scalar>(table: Var, ids: &[usize], tape: &mut Tape<T>) -> Result<Var> {
        tape.gather_rows(table, ids)
    }
}
