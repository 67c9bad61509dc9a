//! ROUGE F-scores over token sequences and feature-cosine reports.
//!
//! Scores are computed at the token level with clipped n-gram counts (no
//! stemming, no stopword removal). Padding must be stripped beforehand.

use std::collections::HashMap;
use std::hash::Hash;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::recon::{optimal_assignment, RecoveredFeatures};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RougeVariant {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "L")]
    L,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RougeScores {
    pub r1: f64,
    pub r2: f64,
    #[serde(rename = "rl")]
    pub r_l: f64,
}

impl RougeScores {
    pub fn compute<T: Eq + Hash>(reference: &[T], hypothesis: &[T]) -> Self {
        RougeScores {
            r1: rouge(reference, hypothesis, RougeVariant::One),
            r2: rouge(reference, hypothesis, RougeVariant::Two),
            r_l: rouge(reference, hypothesis, RougeVariant::L),
        }
    }

    /// Component-wise mean; zeros for an empty slice.
    pub fn mean(scores: &[RougeScores]) -> Self {
        if scores.is_empty() {
            return RougeScores::default();
        }
        let n = scores.len() as f64;
        RougeScores {
            r1: scores.iter().map(|s| s.r1).sum::<f64>() / n,
            r2: scores.iter().map(|s| s.r2).sum::<f64>() / n,
            r_l: scores.iter().map(|s| s.r_l).sum::<f64>() / n,
        }
    }
}

/// Harmonic mean of precision and recall, written as one division so
/// rational scores round once.
fn f1(overlap: f64, n_ref: usize, n_hyp: usize) -> f64 {
    if overlap == 0.0 {
        return 0.0;
    }
    2.0 * overlap / (n_ref + n_hyp) as f64
}

fn ngram_counts<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn rouge_n<T: Eq + Hash>(reference: &[T], hypothesis: &[T], n: usize) -> f64 {
    let r = ngram_counts(reference, n);
    let h = ngram_counts(hypothesis, n);
    let n_ref: usize = r.values().sum();
    let n_hyp: usize = h.values().sum();
    if n_ref == 0 || n_hyp == 0 {
        // too short to hold an n-gram: only an exact match scores
        return (n_ref == n_hyp && reference == hypothesis) as u8 as f64;
    }
    let overlap: usize = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
    f1(overlap as f64, n_ref, n_hyp)
}

fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE F-score. Empty vs empty scores 1, empty vs non-empty 0.
pub fn rouge<T: Eq + Hash>(reference: &[T], hypothesis: &[T], variant: RougeVariant) -> f64 {
    if reference.is_empty() || hypothesis.is_empty() {
        return (reference.is_empty() && hypothesis.is_empty()) as u8 as f64;
    }
    match variant {
        RougeVariant::One => rouge_n(reference, hypothesis, 1),
        RougeVariant::Two => rouge_n(reference, hypothesis, 2),
        RougeVariant::L => f1(lcs_len(reference, hypothesis) as f64, reference.len(), hypothesis.len()),
    }
}

/// Per-slot |cos| between recovered directions and the reference rows under
/// the best one-to-one pairing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureQuality {
    /// Indexed by reference row.
    pub per_feature: Vec<f64>,
    pub mean: f64,
}

pub fn abs_cosine(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let n = a.norm() * b.norm();
    if n == 0.0 {
        0.0
    } else {
        (a.dot(b) / n).abs().min(1.0)
    }
}

pub fn feature_quality_report(rec: &RecoveredFeatures, reference: &DMatrix<f64>) -> Result<FeatureQuality> {
    let dirs = &rec.directions;
    if dirs.shape() != reference.shape() {
        return Err(Error::DimensionMismatch(format!(
            "recovered {:?} vs reference {:?}",
            dirs.shape(),
            reference.shape()
        )));
    }
    let b = dirs.nrows();
    let cos = DMatrix::from_fn(b, b, |k, s| abs_cosine(&dirs.row(k).transpose(), &reference.row(s).transpose()));
    let slot_of = optimal_assignment(&cos);
    let mut per_feature = vec![0.0; b];
    for (k, &s) in slot_of.iter().enumerate() {
        per_feature[s] = cos[(k, s)];
    }
    let mean = per_feature.iter().sum::<f64>() / b.max(1) as f64;
    Ok(FeatureQuality { per_feature, mean })
}

/// Cosine between the summed token embeddings of two sequences. A cheap
/// semantic-overlap proxy; its values are not comparable to sentence-encoder
/// similarities.
pub fn bag_of_embedding_cosine(embed: &DMatrix<f64>, reference: &[u32], hypothesis: &[u32]) -> Result<f64> {
    let sum = |ids: &[u32]| -> Result<DVector<f64>> {
        let mut v = DVector::zeros(embed.ncols());
        for &id in ids {
            if id as usize >= embed.nrows() {
                return Err(Error::TokenOutOfVocab { id, vocab: embed.nrows() });
            }
            v += embed.row(id as usize).transpose();
        }
        Ok(v)
    };
    let (a, b) = (sum(reference)?, sum(hypothesis)?);
    let n = a.norm() * b.norm();
    Ok(if n == 0.0 { (reference.is_empty() && hypothesis.is_empty()) as u8 as f64 } else { a.dot(&b) / n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use RougeVariant::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn hand_computed_triple() {
        let (r, h) = (toks("a b c"), toks("a c b"));
        assert_eq!(rouge(&r, &h, One), 1.0);
        assert_eq!(rouge(&r, &h, Two), 0.0);
        assert_eq!(rouge(&r, &h, L), 2.0 / 3.0);
    }

    #[test]
    fn identical_and_disjoint() {
        for s in ["a", "a b", "the cat sat on the mat"] {
            let t = toks(s);
            for v in [One, Two, L] {
                assert_eq!(rouge(&t, &t, v), 1.0);
            }
        }
        let (r, h) = (toks("a b c"), toks("d e"));
        for v in [One, Two, L] {
            assert_eq!(rouge(&r, &h, v), 0.0);
        }
        assert_eq!(rouge(&toks("a"), &toks("b"), Two), 0.0);
    }

    #[test]
    fn empty_conventions() {
        let e: Vec<&str> = vec![];
        for v in [One, Two, L] {
            assert_eq!(rouge(&e, &e, v), 1.0);
            assert_eq!(rouge(&e, &toks("a"), v), 0.0);
            assert_eq!(rouge(&toks("a"), &e, v), 0.0);
        }
    }

    #[test]
    fn clipping() {
        // hyp repeats "a" more often than the reference holds it
        let (r, h) = (toks("a b"), toks("a a a"));
        let want = f1(1.0, 2, 3);
        assert_eq!(rouge(&r, &h, One), want);
    }

    #[test]
    fn bag_cosine_of_identical_is_one() {
        let e = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert!((bag_of_embedding_cosine(&e, &[1, 2], &[2, 1]).unwrap() - 1.0).abs() < 1e-15);
        assert!(bag_of_embedding_cosine(&e, &[7], &[1]).is_err());
    }
}
