use approx::assert_relative_eq;
use poolerleak::prior::{log_perplexity, train};
use poolerleak::NgramModel;
use proptest::prelude::*;

#[test]
fn add_one_unigram_arithmetic() {
    let m = train(&[vec![0]], 2, 1, 1.0).unwrap();
    assert_relative_eq!(m.prob(&[], 0), 2.0 / 3.0, epsilon = 1e-15);
    assert_relative_eq!(m.prob(&[], 1), 1.0 / 3.0, epsilon = 1e-15);
}

#[test]
fn vanishing_smoothing_concentrates_on_the_only_token() {
    let corpus = vec![vec![0]; 5];
    let mut last = 0.0;
    for k in [1.0, 1e-2, 1e-4, 1e-8] {
        let p = train(&corpus, 3, 1, k).unwrap().prob(&[], 0);
        assert!(p > last);
        last = p;
    }
    assert!(1.0 - last < 1e-8);
}

#[test]
fn uniform_unigram_has_log_perplexity_ln_v() {
    // every token seen once: add-k keeps the model uniform
    let m = train(&[vec![0, 1, 2, 3]], 4, 1, 0.5).unwrap();
    for seq in [vec![0], vec![3, 3, 1], vec![2, 0, 1, 3, 2]] {
        assert_relative_eq!(log_perplexity(&m, &seq).unwrap(), 4f64.ln(), epsilon = 1e-12);
    }
}

#[test]
fn single_token_unigram_score_is_negative_log_probability() {
    let m = train(&[vec![0, 0, 1], vec![2]], 3, 1, 0.1).unwrap();
    assert_relative_eq!(m.log_perplexity(&[1]).unwrap(), -m.prob(&[], 1).ln(), epsilon = 1e-15);
}

#[test]
fn seen_bigram_order_beats_reversal() {
    let corpus = vec![vec![2, 3, 4, 5], vec![2, 3, 4], vec![6, 2, 3]];
    let m = train(&corpus, 8, 2, 1e-3).unwrap();
    let fwd = m.log_perplexity(&[2, 3, 4, 5]).unwrap();
    let rev = m.log_perplexity(&[5, 4, 3, 2]).unwrap();
    assert!(fwd < rev, "{fwd} vs {rev}");
}

#[test]
fn errors() {
    assert!(train(&[], 4, 2, 0.1).is_err());
    assert!(train(&[vec![1]], 4, 2, 0.0).is_err());
    assert!(train(&[vec![1]], 4, 4, 0.1).is_err());
    let m = train(&[vec![1]], 4, 2, 0.1).unwrap();
    assert!(m.log_perplexity(&[]).is_err());
    assert!(m.log_perplexity(&[9]).is_err());
}

#[test]
fn serde_round_trip_preserves_scores() {
    let m = train(&[vec![0, 1, 2], vec![2, 1]], 3, 3, 0.2).unwrap();
    let back: NgramModel = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
    assert_eq!(back.log_perplexity(&[2, 1, 0]).unwrap(), m.log_perplexity(&[2, 1, 0]).unwrap());
}

fn corpus_strategy() -> impl Strategy<Value = Vec<Vec<u32>>> {
    prop::collection::vec(prop::collection::vec(0u32..6, 1..7), 1..8)
}

proptest! {
    #[test]
    fn observed_contexts_are_normalized(corpus in corpus_strategy(), n in 1usize..4, k in 0.01f64..2.0) {
        let m = train(&corpus, 6, n, k).unwrap();
        for ctx in m.observed_contexts() {
            let total: f64 = m.distribution(&ctx).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn unigram_ignores_order_bigram_notices_it(corpus in corpus_strategy(), seq in prop::collection::vec(0u32..6, 2..7)) {
        let uni = train(&corpus, 6, 1, 0.1).unwrap();
        let mut rev = seq.clone();
        rev.reverse();
        prop_assert!((uni.log_perplexity(&seq).unwrap() - uni.log_perplexity(&rev).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn larger_k_moves_toward_uniform(corpus in corpus_strategy(), n in 1usize..4, k in 0.01f64..1.0) {
        let lo = train(&corpus, 6, n, k).unwrap();
        let hi = train(&corpus, 6, n, k * 3.0).unwrap();
        let uniform = 1.0 / lo.outcomes() as f64;
        for ctx in lo.observed_contexts() {
            for (a, b) in lo.distribution(&ctx).iter().zip(hi.distribution(&ctx)) {
                prop_assert!((b - uniform).abs() <= (a - uniform).abs() + 1e-12);
            }
        }
    }
}

#[test]
fn bigram_is_order_sensitive_on_an_asymmetric_corpus() {
    let m = train(&[vec![0, 1, 2], vec![0, 1, 2], vec![3]], 4, 2, 0.05).unwrap();
    let a = m.log_perplexity(&[0, 1, 2]).unwrap();
    let b = m.log_perplexity(&[2, 1, 0]).unwrap();
    assert!(a < b);
}
