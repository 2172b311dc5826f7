//! Masked-language-model corruption.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskConfig {
    /// Probability that a non-special token is selected for prediction.
    pub mask_prob: f64,
    /// Among selected tokens: replaced by the mask id.
    pub mask_token: f64,
    /// Among selected tokens: replaced by a random non-special id.
    pub random: f64,
    /// Among selected tokens: left unchanged.
    pub keep: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            mask_prob: 0.15,
            mask_token: 0.8,
            random: 0.1,
            keep: 0.1,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.mask_prob, self.mask_token, self.random, self.keep];
        if all.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(format!("mask probabilities out of [0, 1]: {all:?}")));
        }
        let split = self.mask_token + self.random + self.keep;
        if (split - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mask split sums to {split}, expected 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSequence {
    pub input: Vec<u32>,
    /// Original id at selected positions, 0 elsewhere.
    pub targets: Vec<u32>,
    pub loss_mask: Vec<bool>,
}

impl MaskedSequence {
    pub fn selected(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

/// Corrupts one sequence for MLM training.
///
/// Draws, in position order, one uniform per non-special token to decide
/// selection and, for selected tokens, one uniform for the replacement kind
/// plus one id draw when the replacement is random. When nothing is
/// selected a single non-special position is forced. `special_ids` must be
/// sorted and lie inside `0..vocab_size`.
pub fn mlm_mask(
    ids: &[u32],
    special: &[bool],
    config: &MaskConfig,
    mask_id: u32,
    vocab_size: usize,
    special_ids: &[u32],
    rng: &mut RngStream,
) -> Result<MaskedSequence> {
    if ids.len() != special.len() {
        return Err(Error::Shape {
            op: "mlm_mask",
            left: vec![ids.len()],
            right: vec![special.len()],
        });
    }
    let candidates: Vec<usize> = (0..ids.len()).filter(|&i| !special[i]).collect();
    if candidates.is_empty() {
        return Err(Error::Unmaskable);
    }
    let regular = vocab_size.saturating_sub(special_ids.len());
    if regular == 0 {
        return Err(Error::Config("vocabulary has no non-special ids".into()));
    }
    let mut out = MaskedSequence {
        input: ids.to_vec(),
        targets: vec![0; ids.len()],
        loss_mask: vec![false; ids.len()],
    };
    let corrupt = |i: usize, rng: &mut RngStream, out: &mut MaskedSequence| {
        out.targets[i] = ids[i];
        out.loss_mask[i] = true;
        let u = rng.uniform();
        if u < config.mask_token {
            out.input[i] = mask_id;
        } else if u < config.mask_token + config.random {
            out.input[i] = nth_regular_id(rng.below(regular) as u32, special_ids);
        }
    };
    for &i in &candidates {
        if rng.uniform() < config.mask_prob {
            corrupt(i, rng, &mut out);
        }
    }
    if out.selected() == 0 {
        let i = candidates[rng.below(candidates.len())];
        corrupt(i, rng, &mut out);
    }
    Ok(out)
}

/// The `n`-th id, counting from 0, that is not in the sorted `special_ids`.
fn nth_regular_id(mut n: u32, special_ids: &[u32]) -> u32 {
    for &s in special_ids {
        if n >= s {
            n += 1;
        } else {
            break;
        }
    }
    n
}
