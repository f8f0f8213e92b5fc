//! Synthetic nesting probe: well-nested sequences against minimally
//! corrupted copies of themselves.

use std::str::FromStr;

use rand::Rng;

use super::metrics::MetricKind;
use super::task::{Example, LabelSpace, TaskDataset, TaskKind};
use crate::corpusgen::{generate_record, GrammarConfig, Mark};
use crate::corpusstats::is_well_nested;
use crate::error::{Error, Result};
use crate::rng::{self, derive_seed};

pub const MAX_CORRUPTION_ATTEMPTS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Corruption {
    /// Exchange two adjacent, distinct tokens.
    SwapAdjacent,
    /// Replace the token of one pop with a different token.
    RelabelPop,
}

impl Corruption {
    pub fn as_str(self) -> &'static str {
        match self {
            Corruption::SwapAdjacent => "swap_adjacent",
            Corruption::RelabelPop => "relabel_pop",
        }
    }
}

impl FromStr for Corruption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "swap_adjacent" => Ok(Corruption::SwapAdjacent),
            "relabel_pop" => Ok(Corruption::RelabelPop),
            _ => Err(Error::invalid(format!("unknown corruption {s:?}"))),
        }
    }
}

/// Swaps positions `i` and `i + 1`.
pub fn swap_adjacent(tokens: &[u32], i: usize) -> Vec<u32> {
    let mut out = tokens.to_vec();
    out.swap(i, i + 1);
    out
}

/// One random corruption that leaves the sequence outside the nest language,
/// or `None` when no attempt succeeds.
pub fn corrupt<R: Rng + ?Sized>(
    tokens: &[u32],
    labels: &[Mark],
    corruption: Corruption,
    gc: &GrammarConfig,
    rng: &mut R,
) -> Option<Vec<u32>> {
    let candidates: Vec<usize> = match corruption {
        Corruption::SwapAdjacent => (0..tokens.len().saturating_sub(1))
            .filter(|&i| tokens[i] != tokens[i + 1])
            .collect(),
        Corruption::RelabelPop => (0..tokens.len()).filter(|&i| labels[i] == Mark::Pop).collect(),
    };
    if candidates.is_empty() {
        return None;
    }
    for _ in 0..MAX_CORRUPTION_ATTEMPTS {
        let i = candidates[rng.random_range(0..candidates.len())];
        let out = match corruption {
            Corruption::SwapAdjacent => swap_adjacent(tokens, i),
            Corruption::RelabelPop => {
                let t = gc.dist.sample(rng);
                if t == tokens[i] {
                    continue;
                }
                let mut out = tokens.to_vec();
                out[i] = t;
                out
            }
        };
        if !is_well_nested(&out) {
            return Some(out);
        }
    }
    None
}

fn split<R: Rng + ?Sized>(gc: &GrammarConfig, n: usize, corruption: Corruption, rng: &mut R) -> Result<Vec<Example>> {
    let mut out = Vec::with_capacity(2 * n);
    let mut failures = 0;
    while out.len() < 2 * n {
        let rec = generate_record(gc, rng).record;
        let labels = rec.labels.as_deref().expect("grammar records are labeled");
        match corrupt(&rec.tokens, labels, corruption, gc, rng) {
            Some(bad) => {
                out.push(Example {
                    text_a: rec.tokens,
                    text_b: None,
                    label: 1.0,
                });
                out.push(Example {
                    text_a: bad,
                    text_b: None,
                    label: 0.0,
                });
            }
            None => {
                failures += 1;
                if failures >= MAX_CORRUPTION_ATTEMPTS {
                    return Err(Error::Generation(format!(
                        "{} could not break nesting in {MAX_CORRUPTION_ATTEMPTS} records",
                        corruption.as_str()
                    )));
                }
            }
        }
    }
    Ok(out)
}

/// Balanced binary task: label 1 for a grammar record, label 0 for the same
/// record after one corruption. Train and dev use separate streams.
pub fn make_probe_task(gc: &GrammarConfig, n_per_class: usize, corruption: Corruption, seed: u64) -> Result<TaskDataset> {
    gc.validate()?;
    if !gc.flush_at_end {
        return Err(Error::invalid("probe records must be closed (flush_at_end)"));
    }
    if n_per_class == 0 {
        return Err(Error::invalid("n_per_class must be at least 1"));
    }
    let train = split(gc, n_per_class, corruption, &mut rng::seeded(derive_seed(seed, "probe_train")))?;
    let dev = split(gc, n_per_class, corruption, &mut rng::seeded(derive_seed(seed, "probe_dev")))?;
    Ok(TaskDataset {
        name: "probe".into(),
        kind: TaskKind::Single,
        labels: LabelSpace::classes(2),
        metric: MetricKind::Accuracy,
        train,
        dev,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crossed_pair() {
        let (a, b) = (5, 6);
        assert_eq!(swap_adjacent(&[a, b, b, a], 2), vec![a, b, a, b]);
        assert!(!is_well_nested(&[a, b, a, b]));
    }
}
