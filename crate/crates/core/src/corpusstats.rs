//! Measurable signatures of a corpus: nesting validity, the push rate of the
//! stack grammar, the Zipf exponent of the unigram spectrum, and distance to
//! a target token law.

use std::fmt::Write as _;

use crate::corpusgen::{AnnotatedCorpus, Mark, SequenceRecord};
use crate::error::{Error, Result};
use crate::vocab::TokenDistribution;

/// Counts below this are left out of the rank-frequency fit (unless fewer
/// than two tokens would remain).
pub const ZIPF_FIT_MIN_COUNT: u64 = 5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Nesting {
    Ok,
    /// `expected` is the stack top at a pop (`None` for an empty stack).
    Violation {
        position: usize,
        expected: Option<u32>,
        found: u32,
    },
    /// The record claims to be closed but the stack still holds `depth` tokens.
    Unclosed { depth: usize },
}

impl Nesting {
    pub fn is_ok(&self) -> bool {
        matches!(self, Nesting::Ok)
    }
}

/// Replays the stack described by the labels.
pub fn verify_nesting(record: &SequenceRecord, expect_closed: bool) -> Result<Nesting> {
    let labels = record.labels.as_ref().ok_or(Error::MissingLabels)?;
    let mut stack = Vec::new();
    for (position, (&tok, mark)) in record.tokens.iter().zip(labels).enumerate() {
        match mark {
            Mark::Push => stack.push(tok),
            Mark::Pop => match stack.pop() {
                Some(top) if top == tok => {}
                expected => {
                    return Ok(Nesting::Violation {
                        position,
                        expected,
                        found: tok,
                    })
                }
            },
        }
    }
    if expect_closed && !stack.is_empty() {
        return Ok(Nesting::Unclosed { depth: stack.len() });
    }
    Ok(Nesting::Ok)
}

/// Label-free membership test: can the sequence be read as a closed nest in
/// which each closer repeats its opener?
///
/// Cancelling adjacent equal tokens is confluent, so the greedy stack
/// reduction decides membership.
pub fn is_well_nested(tokens: &[u32]) -> bool {
    let mut stack = Vec::with_capacity(tokens.len());
    for &t in tokens {
        if stack.last() == Some(&t) {
            stack.pop();
        } else {
            stack.push(t);
        }
    }
    stack.is_empty()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PushEstimate {
    /// Bernoulli push rate with forced pushes and flush pops removed.
    pub p_hat: f64,
    pub raw_push_fraction: f64,
    pub push_steps: u64,
    pub total_steps: u64,
    pub forced_pushes: u64,
    pub flush_pops: u64,
}

/// Estimates the grammar's push probability.
///
/// Forced pushes are Bernoulli draws that came out as pops; flush pops are
/// not draws at all. Both counts come from provenance.
pub fn estimate_push_probability(corpus: &AnnotatedCorpus) -> Result<PushEstimate> {
    let mut pushes = 0u64;
    let mut total = 0u64;
    for r in &corpus.records {
        let labels = r.labels.as_ref().ok_or(Error::MissingLabels)?;
        pushes += labels.iter().filter(|m| **m == Mark::Push).count() as u64;
        total += labels.len() as u64;
    }
    if total == 0 {
        return Err(Error::MissingLabels);
    }
    let p = &corpus.provenance;
    let draws = total.saturating_sub(p.flush_pops);
    let drawn_pushes = pushes.saturating_sub(p.forced_pushes);
    Ok(PushEstimate {
        p_hat: if draws == 0 { 0.0 } else { drawn_pushes as f64 / draws as f64 },
        raw_push_fraction: pushes as f64 / total as f64,
        push_steps: pushes,
        total_steps: total,
        forced_pushes: p.forced_pushes,
        flush_pops: p.flush_pops,
    })
}

pub fn unigram_counts(corpus: &AnnotatedCorpus) -> Vec<u64> {
    let mut counts = vec![0u64; corpus.vocab.total_size()];
    for t in corpus.records.iter().flat_map(|r| &r.tokens) {
        counts[*t as usize] += 1;
    }
    counts
}

/// Negated least-squares slope of log frequency against log rank.
pub fn fit_zipf_exponent(corpus: &AnnotatedCorpus) -> Result<f64> {
    fit_zipf_counts(&unigram_counts(corpus))
}

/// Rank-frequency fit over raw counts (any order; zeros ignored).
pub fn fit_zipf_counts(counts: &[u64]) -> Result<f64> {
    let observed = counts.iter().filter(|&&c| c > 0).count();
    if observed < 2 {
        return Err(Error::invalid("need at least two distinct observed tokens"));
    }
    let mut kept: Vec<u64> = counts.iter().copied().filter(|&c| c >= ZIPF_FIT_MIN_COUNT).collect();
    if kept.len() < 2 {
        // Too sparse to trim the tail: fit every observed token instead.
        kept = counts.iter().copied().filter(|&c| c > 0).collect();
    }
    kept.sort_unstable_by(|a, b| b.cmp(a));

    // Log of count relative to the top count: a common scale factor cancels
    // inside the correctly rounded division, which makes the fit exactly
    // scale invariant.
    let top = kept[0] as f64;
    let pts: Vec<(f64, f64)> = kept
        .iter()
        .enumerate()
        .map(|(i, &c)| (((i + 1) as f64).ln(), (c as f64 / top).ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    Ok(-sxy / sxx)
}

/// Total-variation distance between the corpus unigram law and `dist`.
pub fn distribution_distance(corpus: &AnnotatedCorpus, dist: &TokenDistribution) -> Result<f64> {
    if corpus.vocab != *dist.vocab() {
        return Err(Error::invalid(format!(
            "corpus vocabulary ({}) differs from distribution vocabulary ({})",
            corpus.vocab.total_size(),
            dist.vocab().total_size()
        )));
    }
    let counts = unigram_counts(corpus);
    let n: u64 = counts.iter().sum();
    if n == 0 {
        return Err(Error::invalid("empty corpus has no empirical distribution"));
    }
    let n = n as f64;
    Ok(0.5
        * counts
            .iter()
            .zip(dist.weights())
            .map(|(&c, &w)| (c as f64 / n - w).abs())
            .sum::<f64>())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusReport {
    pub token_count: u64,
    pub record_count: u64,
    pub min_length: usize,
    pub max_length: usize,
    pub mean_length: f64,
    /// Length at the 10th, 20th, ..., 90th percentile (nearest rank).
    pub deciles: [usize; 9],
    pub unigram_counts: Vec<u64>,
}

pub fn length_stats(corpus: &AnnotatedCorpus) -> CorpusReport {
    let mut lengths: Vec<usize> = corpus.records.iter().map(SequenceRecord::len).collect();
    lengths.sort_unstable();
    let token_count: u64 = lengths.iter().map(|&l| l as u64).sum();
    let n = lengths.len();
    let mut deciles = [0; 9];
    if n > 0 {
        for (k, d) in deciles.iter_mut().enumerate() {
            let rank = ((k + 1) * n).div_ceil(10).max(1);
            *d = lengths[rank - 1];
        }
    }
    CorpusReport {
        token_count,
        record_count: n as u64,
        min_length: lengths.first().copied().unwrap_or(0),
        max_length: lengths.last().copied().unwrap_or(0),
        mean_length: if n == 0 { 0.0 } else { token_count as f64 / n as f64 },
        deciles,
        unigram_counts: unigram_counts(corpus),
    }
}

impl CorpusReport {
    fn fields(&self) -> Vec<(&'static str, String)> {
        let distinct = self.unigram_counts.iter().filter(|&&c| c > 0).count();
        let deciles: Vec<String> = self.deciles.iter().map(usize::to_string).collect();
        vec![
            ("token_count", self.token_count.to_string()),
            ("record_count", self.record_count.to_string()),
            ("min_length", self.min_length.to_string()),
            ("max_length", self.max_length.to_string()),
            ("mean_length", format!("{:.4}", self.mean_length)),
            ("length_deciles", deciles.join(";")),
            ("distinct_tokens", distinct.to_string()),
        ]
    }

    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.fields() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn csv_header(&self) -> String {
        self.fields().iter().map(|(k, _)| *k).collect::<Vec<_>>().join(",")
    }

    pub fn to_csv_row(&self) -> String {
        self.fields().into_iter().map(|(_, v)| v).collect::<Vec<_>>().join(",")
    }
}
