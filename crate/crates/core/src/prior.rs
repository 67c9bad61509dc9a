//! Add-k smoothed n-gram prior (n = 1..3) used to score candidate
//! sequences by log-perplexity.
//!
//! For n ≥ 2 each training sequence is wrapped with n−1 begin markers and
//! one end marker, and the end marker is part of the prediction space. A
//! unigram model uses neither.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const NONE: u32 = u32::MAX;

type Key = [u32; 3];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NgramModel {
    n: usize,
    k: f64,
    vocab_size: usize,
    #[serde(with = "pairs")]
    grams: HashMap<Key, u32>,
    #[serde(with = "pairs")]
    contexts: HashMap<Key, u32>,
}

mod pairs {
    use std::collections::HashMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(map: &HashMap<[u32; 3], u32>, s: S) -> Result<S::Ok, S::Error> {
        let mut v: Vec<_> = map.iter().map(|(k, c)| (*k, *c)).collect();
        v.sort_unstable();
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<HashMap<[u32; 3], u32>, D::Error> {
        Ok(Vec::<([u32; 3], u32)>::deserialize(d)?.into_iter().collect())
    }
}

impl NgramModel {
    /// Counts n-grams over `corpus`. Token ids must be below `vocab_size`.
    pub fn train(corpus: &[Vec<u32>], vocab_size: usize, n: usize, k: f64) -> Result<Self> {
        if !(1..=3).contains(&n) {
            return Err(Error::InvalidArgument(format!("n-gram order {n} outside 1..=3")));
        }
        if !(k > 0.0 && k.is_finite()) {
            return Err(Error::InvalidArgument(format!("smoothing k must be positive, got {k}")));
        }
        if vocab_size == 0 {
            return Err(Error::InvalidArgument("empty vocabulary".into()));
        }
        if corpus.iter().all(Vec::is_empty) {
            return Err(Error::Empty("prior corpus"));
        }
        let mut model = NgramModel { n, k, vocab_size, grams: HashMap::new(), contexts: HashMap::new() };
        for seq in corpus.iter().filter(|s| !s.is_empty()) {
            model.check_ids(seq)?;
            for (ctx, w) in model.events(seq) {
                *model.grams.entry(model.key(&ctx, w)).or_default() += 1;
                *model.contexts.entry(model.key(&ctx, NONE)).or_default() += 1;
            }
        }
        Ok(model)
    }

    pub fn order(&self) -> usize {
        self.n
    }

    pub fn smoothing(&self) -> f64 {
        self.k
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn bos(&self) -> u32 {
        self.vocab_size as u32
    }

    /// Id of the end marker (only meaningful for n ≥ 2).
    pub fn eos(&self) -> u32 {
        self.vocab_size as u32 + 1
    }

    /// Size of the prediction space.
    pub fn outcomes(&self) -> usize {
        if self.n == 1 {
            self.vocab_size
        } else {
            self.vocab_size + 1
        }
    }

    fn check_ids(&self, seq: &[u32]) -> Result<()> {
        match seq.iter().find(|&&t| t as usize >= self.vocab_size) {
            Some(&id) => Err(Error::TokenOutOfVocab { id, vocab: self.vocab_size }),
            None => Ok(()),
        }
    }

    fn key(&self, ctx: &[u32], w: u32) -> Key {
        let mut key = [NONE; 3];
        key[..ctx.len()].copy_from_slice(ctx);
        key[ctx.len()] = w;
        key
    }

    /// (context, predicted token) pairs for one sequence.
    fn events(&self, seq: &[u32]) -> Vec<(Vec<u32>, u32)> {
        let h = self.n - 1;
        let mut padded = vec![self.bos(); h];
        padded.extend_from_slice(seq);
        if self.n > 1 {
            padded.push(self.eos());
        }
        (h..padded.len()).map(|i| (padded[i - h..i].to_vec(), padded[i])).collect()
    }

    /// P(w | ctx) with add-k smoothing; `ctx` holds the n−1 preceding ids
    /// (begin markers included).
    pub fn prob(&self, ctx: &[u32], w: u32) -> f64 {
        debug_assert_eq!(ctx.len(), self.n - 1);
        let c = self.grams.get(&self.key(ctx, w)).copied().unwrap_or(0) as f64;
        let total = self.contexts.get(&self.key(ctx, NONE)).copied().unwrap_or(0) as f64;
        (c + self.k) / (total + self.k * self.outcomes() as f64)
    }

    /// The full conditional distribution over the prediction space.
    pub fn distribution(&self, ctx: &[u32]) -> Vec<f64> {
        (0..self.outcomes() as u32)
            .map(|w| if w as usize == self.vocab_size { self.eos() } else { w })
            .map(|w| self.prob(ctx, w))
            .collect()
    }

    /// Every context seen during training.
    pub fn observed_contexts(&self) -> Vec<Vec<u32>> {
        let mut out: Vec<Vec<u32>> = self.contexts.keys().map(|k| k[..self.n - 1].to_vec()).collect();
        out.sort();
        out
    }

    /// Mean negative log-probability per prediction (tokens, plus the end
    /// marker for n ≥ 2).
    pub fn log_perplexity(&self, seq: &[u32]) -> Result<f64> {
        if seq.is_empty() {
            return Err(Error::Empty("sequence"));
        }
        self.check_ids(seq)?;
        let events = self.events(seq);
        let nll: f64 = events.iter().map(|(ctx, w)| -self.prob(ctx, *w).ln()).sum();
        Ok(nll / events.len() as f64)
    }
}

pub fn train(corpus: &[Vec<u32>], vocab_size: usize, n: usize, k: f64) -> Result<NgramModel> {
    NgramModel::train(corpus, vocab_size, n, k)
}

pub fn log_perplexity(model: &NgramModel, seq: &[u32]) -> Result<f64> {
    model.log_perplexity(seq)
}
