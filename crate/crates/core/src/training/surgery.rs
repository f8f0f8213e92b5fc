use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::model::ModelCheckpoint;
use crate::vocab::NUM_SPECIAL;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SurgeryRule {
    /// Unused ids in ascending order take used ids in ascending order, wrapping.
    #[default]
    Cyclic,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SurgerySpec {
    pub used_ids: BTreeSet<u32>,
    pub rule: SurgeryRule,
}

impl SurgerySpec {
    pub fn new(used_ids: impl IntoIterator<Item = u32>) -> Self {
        Self {
            used_ids: used_ids.into_iter().collect(),
            rule: SurgeryRule::Cyclic,
        }
    }
}

/// `(unused, source)` pairs over the content ids of a `vocab_total` table.
pub fn surgery_mapping(spec: &SurgerySpec, vocab_total: usize) -> Result<Vec<(u32, u32)>> {
    if spec.used_ids.is_empty() {
        return Err(Error::invalid("surgery needs at least one used id"));
    }
    let content = NUM_SPECIAL as u32..vocab_total as u32;
    if let Some(bad) = spec.used_ids.iter().find(|id| !content.contains(id)) {
        return Err(Error::invalid(format!("used id {bad} is not a content id")));
    }
    let used: Vec<u32> = spec.used_ids.iter().copied().collect();
    Ok(content
        .filter(|id| !spec.used_ids.contains(id))
        .enumerate()
        .map(|(i, id)| (id, used[i % used.len()]))
        .collect())
}

/// Overwrites every unused content embedding row with a used row. The LM
/// head shares the table, so it changes identically; nothing else is touched.
pub fn substitute_unused_embeddings(ckpt: &ModelCheckpoint, spec: &SurgerySpec) -> Result<ModelCheckpoint> {
    let mapping = surgery_mapping(spec, ckpt.config.vocab_total)?;
    let d = ckpt.config.hidden_dim;
    let mut out = ckpt.clone();
    let table = out.tensor_mut("embeddings.token").expect("layout has token embeddings");
    for (dst, src) in mapping {
        let (dst, src) = (dst as usize * d, src as usize * d);
        table.copy_within(src..src + d, dst);
    }
    Ok(out)
}
