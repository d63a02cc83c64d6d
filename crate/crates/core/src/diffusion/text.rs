//! Toy text conditioning: a closed whitespace vocabulary and a learned
//! per-token embedding table.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::nn::{Param, ParamModel};
use crate::num::Real;

pub const UNK_TOKEN: &str = "<unk>";

/// Closed word list; id 0 is always the unknown token.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
}

impl Vocab {
    pub fn new<S: AsRef<str>>(words: &[S]) -> Self {
        let mut all = vec![UNK_TOKEN.to_string()];
        for w in words {
            let w = w.as_ref().to_lowercase();
            if !all.contains(&w) {
                all.push(w);
            }
        }
        Self { words: all }
    }

    /// Rebuilds a vocabulary from a stored word list (checkpoints).
    pub fn from_stored(words: Vec<String>) -> Self {
        assert_eq!(words.first().map(String::as_str), Some(UNK_TOKEN));
        Self { words }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Lowercased whitespace tokenization; unknown words map to id 0.
    /// An empty caption yields a single unknown token so L >= 1 holds.
    pub fn tokenize(&self, caption: &str) -> Vec<usize> {
        let ids: Vec<usize> = caption
            .split_whitespace()
            .map(|w| {
                let w = w.to_lowercase();
                self.words.iter().position(|v| *v == w).unwrap_or(0)
            })
            .collect();
        if ids.is_empty() {
            vec![0]
        } else {
            ids
        }
    }
}

/// Learned token embedding table, `vocab` rows by `d_text` columns.
#[derive(Debug, Clone)]
pub struct TextTable<T> {
    pub table: Param<T>,
}

impl<T: Real> TextTable<T> {
    pub fn new(vocab: usize, d_text: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            table: Param::randn(&[vocab, d_text], 0.5, rng),
        }
    }

    pub fn d_text(&self) -> usize {
        self.table.value.shape()[1]
    }

    pub fn vocab_size(&self) -> usize {
        self.table.value.shape()[0]
    }

    /// Looks up token ids into an `[L, d_text]` condition matrix.
    pub fn embed(&self, ids: &[usize]) -> Array2<T> {
        assert!(!ids.is_empty(), "token list must be non-empty");
        let d = self.d_text();
        let mut out = Array2::zeros((ids.len(), d));
        for (row, &id) in ids.iter().enumerate() {
            assert!(id < self.vocab_size(), "token id {id} out of range");
            for col in 0..d {
                out[(row, col)] = self.table.value[[id, col]];
            }
        }
        out
    }

    /// Scatters caption gradients back into the table rows.
    pub fn backward(&mut self, ids: &[usize], g_tau: &Array2<T>) {
        for (row, &id) in ids.iter().enumerate() {
            for col in 0..self.d_text() {
                self.table.grad[[id, col]] += g_tau[(row, col)];
            }
        }
    }
}

impl<T: Real> ParamModel<T> for TextTable<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f("text.table", &mut self.table);
    }
    fn visit_params_ref(&self, f: &mut dyn FnMut(&str, &Param<T>)) {
        f("text.table", &self.table);
    }
    fn model_name(&self) -> &'static str {
        "text_table"
    }
}
