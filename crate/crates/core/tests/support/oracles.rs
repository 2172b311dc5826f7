//! Brute-force references for span decoding and scoring.

use adaptlab_core::eval::SpanEntity;
use adaptlab_core::rng::RngStream;
use adaptlab_core::tagging::{Tag, N_LABELS};

/// Enumerates every `(start, end)` pair and keeps those that form a maximal
/// lenient-BIO run: the start either carries `B-X`, or carries `I-X` without
/// an `X` tag right before it; every inner position carries `I-X`; and the
/// run cannot be extended by another `I-X`.
pub fn decode_reference(tags: &[Tag]) -> Vec<SpanEntity> {
    let n = tags.len();
    let mut out = Vec::new();
    for start in 0..n {
        let Some(ty) = tags[start].entity() else { continue };
        let opens = match tags[start] {
            Tag::B(_) => true,
            Tag::I(_) => start == 0 || tags[start - 1].entity() != Some(ty),
            Tag::O => false,
        };
        if !opens {
            continue;
        }
        for end in start + 1..=n {
            let inner_ok = (start + 1..end).all(|i| tags[i] == Tag::I(ty));
            let maximal = end == n || tags[end] != Tag::I(ty);
            if inner_ok && maximal {
                out.push(SpanEntity::new(ty, start, end));
            }
        }
    }
    out
}

/// `(gold, predicted, correct)` by pairwise comparison.
pub fn count_reference(gold: &[Vec<SpanEntity>], pred: &[Vec<SpanEntity>]) -> (usize, usize, usize) {
    let mut correct = 0;
    for (g, p) in gold.iter().zip(pred) {
        for ps in p {
            if g.iter().any(|gs| gs == ps) {
                correct += 1;
            }
        }
    }
    let gold_n = gold.iter().map(Vec::len).sum();
    let pred_n = pred.iter().map(Vec::len).sum();
    (gold_n, pred_n, correct)
}

pub fn f1_reference(gold: &[Vec<SpanEntity>], pred: &[Vec<SpanEntity>]) -> f64 {
    let (g, p, c) = count_reference(gold, pred);
    let precision = if p == 0 { 0.0 } else { c as f64 / p as f64 };
    let recall = if g == 0 { 0.0 } else { c as f64 / g as f64 };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn random_tags(rng: &mut RngStream, max_len: usize) -> Vec<Tag> {
    let n = rng.below(max_len + 1);
    (0..n).map(|_| Tag::from_id(rng.below(N_LABELS)).unwrap()).collect()
}
