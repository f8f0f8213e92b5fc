use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::IGNORE_INDEX;
use crate::vocab::{VocabSpec, BOS_ID, EOS_ID, MASK_ID};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskPolicy {
    pub mask_fraction: f64,
    pub replace_with_mask: f64,
    pub replace_with_random: f64,
    pub keep: f64,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self {
            mask_fraction: 0.15,
            replace_with_mask: 0.8,
            replace_with_random: 0.1,
            keep: 0.1,
        }
    }
}

impl MaskPolicy {
    /// Every selected position becomes the mask token. Held-out losses use
    /// this so that no target is visible in the input.
    pub fn mask_only() -> Self {
        Self {
            replace_with_mask: 1.0,
            replace_with_random: 0.0,
            keep: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.replace_with_mask, self.replace_with_random, self.keep];
        if !(self.mask_fraction > 0.0 && self.mask_fraction <= 1.0) {
            return Err(Error::invalid("mask_fraction must lie in (0, 1]"));
        }
        if parts.iter().any(|&p| p < 0.0) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("mask/random/keep split must be nonnegative and sum to 1"));
        }
        Ok(())
    }

    /// Positions selected in a record of `len` content tokens.
    pub fn selected_count(&self, len: usize) -> usize {
        ((self.mask_fraction * len as f64).round() as usize).clamp(1, len)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskAction {
    Mask,
    Random,
    Keep,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedExample {
    /// `<s> tokens </s>` after corruption.
    pub input: Vec<u32>,
    /// Original id at selected positions, [`IGNORE_INDEX`] elsewhere.
    pub targets: Vec<u32>,
    pub loss_mask: Vec<bool>,
    /// Action taken at each selected position, in position order.
    pub actions: Vec<MaskAction>,
}

/// Corrupts one record for masked-LM training.
///
/// Returns `Ok(None)` for an empty record, which callers skip.
pub fn mask_tokens<R: Rng + ?Sized>(
    record: &[u32],
    policy: &MaskPolicy,
    vocab: &VocabSpec,
    rng: &mut R,
) -> Result<Option<MaskedExample>> {
    if record.is_empty() {
        return Ok(None);
    }
    if let Some(&bad) = record.iter().find(|&&t| !vocab.is_content(t)) {
        return Err(Error::invalid(format!("record contains non-content id {bad}")));
    }
    let n = record.len();
    let mut picked = index::sample(rng, n, policy.selected_count(n)).into_vec();
    picked.sort_unstable();

    let mut input = Vec::with_capacity(n + 2);
    input.push(BOS_ID);
    input.extend_from_slice(record);
    input.push(EOS_ID);
    let mut targets = vec![IGNORE_INDEX; n + 2];
    let mut loss_mask = vec![false; n + 2];
    let mut actions = Vec::with_capacity(picked.len());
    let content = vocab.content_ids();
    for &i in &picked {
        let pos = i + 1;
        targets[pos] = record[i];
        loss_mask[pos] = true;
        let u: f64 = rng.random();
        let action = if u < policy.replace_with_mask {
            MaskAction::Mask
        } else if u < policy.replace_with_mask + policy.replace_with_random {
            MaskAction::Random
        } else {
            MaskAction::Keep
        };
        match action {
            MaskAction::Mask => input[pos] = MASK_ID,
            MaskAction::Random => input[pos] = rng.random_range(content.clone()),
            MaskAction::Keep => {}
        }
        actions.push(action);
    }
    Ok(Some(MaskedExample {
        input,
        targets,
        loss_mask,
        actions,
    }))
}
