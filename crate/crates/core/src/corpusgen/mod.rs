//! Synthetic pre-training corpora.
//!
//! Two families: i.i.d. baselines (uniform or Zipf tokens, no structure) and
//! the stack grammar, where each step either pushes a fresh token (emitting
//! it) or pops the stack top (emitting the popped token). The grammar output
//! is a well-nested sequence in which every closing token repeats its opener.
//!
//! Record `i` is generated from its own stream `(seed, i)`, so output does not
//! depend on thread count.

mod format;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::vocab::{TokenDistribution, VocabSpec};

pub use format::{corpus_to_string, parse_corpus, read_corpus, read_corpus_any, serialize_corpus};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mark {
    Push,
    Pop,
}

impl Mark {
    pub fn as_char(self) -> char {
        match self {
            Mark::Push => 'P',
            Mark::Pop => 'O',
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceRecord {
    pub tokens: Vec<u32>,
    pub labels: Option<Vec<Mark>>,
}

impl SequenceRecord {
    pub fn unlabeled(tokens: Vec<u32>) -> Self {
        Self { tokens, labels: None }
    }

    pub fn labeled(tokens: Vec<u32>, labels: Vec<Mark>) -> Self {
        debug_assert_eq!(tokens.len(), labels.len());
        Self {
            tokens,
            labels: Some(labels),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EmptyStackRule {
    /// A pop drawn on an empty stack is treated as a push.
    #[default]
    ForcedPush,
}

#[derive(Clone, Debug)]
pub struct GrammarConfig {
    /// Probability that a step pushes.
    pub push_probability: f64,
    pub dist: TokenDistribution,
    pub length_min: usize,
    pub length_max: usize,
    /// Pop everything left on the stack once the length target is reached.
    pub flush_at_end: bool,
    pub empty_stack_rule: EmptyStackRule,
}

impl GrammarConfig {
    pub fn new(push_probability: f64, dist: TokenDistribution, length_min: usize, length_max: usize) -> Self {
        Self {
            push_probability,
            dist,
            length_min,
            length_max,
            flush_at_end: true,
            empty_stack_rule: EmptyStackRule::ForcedPush,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.push_probability > 0.0 && self.push_probability <= 1.0) {
            return Err(Error::invalid(format!(
                "push probability must lie in (0, 1], got {}",
                self.push_probability
            )));
        }
        validate_lengths(self.length_min, self.length_max)
    }

    fn digest(&self) -> String {
        let text = format!(
            "artificial;p={};dist={};len={}..={};flush={};rule={:?};vocab={}",
            self.push_probability,
            self.dist.spec(),
            self.length_min,
            self.length_max,
            self.flush_at_end,
            self.empty_stack_rule,
            self.dist.vocab().total_size()
        );
        rng::sha256_hex(text.as_bytes())[..16].to_string()
    }
}

/// Where a corpus came from and the generator-side counts that cannot be
/// recovered from tokens and labels alone.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Provenance {
    pub generator: String,
    pub config_digest: String,
    pub seed: u64,
    pub target_tokens: u64,
    /// Steps whose Bernoulli draw was a pop on an empty stack.
    pub forced_pushes: u64,
    /// Pops emitted by the end-of-sequence flush (not Bernoulli steps).
    pub flush_pops: u64,
    pub flushed: bool,
    /// Per-record flush depth (labeled corpora only).
    pub flush_depths: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnnotatedCorpus {
    pub records: Vec<SequenceRecord>,
    pub vocab: VocabSpec,
    pub provenance: Provenance,
}

impl AnnotatedCorpus {
    pub fn new(vocab: VocabSpec, provenance: Provenance) -> Self {
        Self {
            records: Vec::new(),
            vocab,
            provenance,
        }
    }

    pub fn token_count(&self) -> usize {
        self.records.iter().map(SequenceRecord::len).sum()
    }

    pub fn is_labeled(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.labels.is_some())
    }

    /// Checks record invariants against the vocabulary.
    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if let Some(&bad) = r.tokens.iter().find(|&&t| !self.vocab.is_content(t)) {
                return Err(Error::Data(format!("record {i} contains non-content id {bad}")));
            }
            if let Some(l) = &r.labels {
                if l.len() != r.tokens.len() {
                    return Err(Error::Data(format!("record {i} label length mismatch")));
                }
            }
        }
        Ok(())
    }

    /// Sorted content ids that occur anywhere in the corpus.
    pub fn used_ids(&self) -> Vec<u32> {
        let mut seen = vec![false; self.vocab.total_size()];
        for t in self.records.iter().flat_map(|r| &r.tokens) {
            seen[*t as usize] = true;
        }
        seen.iter()
            .enumerate()
            .filter_map(|(i, &s)| s.then_some(i as u32))
            .collect()
    }

    /// Splits off the last `fraction` of records, e.g. as an evaluation set.
    pub fn split_tail(mut self, fraction: f64) -> (AnnotatedCorpus, AnnotatedCorpus) {
        let n = self.records.len();
        let tail_len = ((n as f64) * fraction).round() as usize;
        let tail_len = tail_len.min(n.saturating_sub(1));
        let tail = self.records.split_off(n - tail_len);
        let mut prov = self.provenance.clone();
        if prov.flush_depths.len() == n {
            let depths = prov.flush_depths.split_off(n - tail_len);
            self.provenance.flush_depths.truncate(n - tail_len);
            prov.flush_depths = depths;
        }
        let eval = AnnotatedCorpus {
            records: tail,
            vocab: self.vocab.clone(),
            provenance: prov,
        };
        (self, eval)
    }
}

fn validate_lengths(min: usize, max: usize) -> Result<()> {
    if min == 0 || min > max {
        return Err(Error::invalid(format!("sequence length range [{min}, {max}] is invalid")));
    }
    Ok(())
}

#[cfg(feature = "parallel")]
fn map_indices<T: Send>(range: std::ops::Range<u64>, f: impl Fn(u64) -> T + Sync + Send) -> Vec<T> {
    use rayon::prelude::*;
    range.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_indices<T: Send>(range: std::ops::Range<u64>, f: impl Fn(u64) -> T + Sync + Send) -> Vec<T> {
    range.map(f).collect()
}

fn baseline_digest(dist: &TokenDistribution, min: usize, max: usize) -> String {
    let text = format!(
        "baseline;dist={};len={}..={};vocab={}",
        dist.spec(),
        min,
        max,
        dist.vocab().total_size()
    );
    rng::sha256_hex(text.as_bytes())[..16].to_string()
}

/// I.i.d. token sequences with lengths uniform in `[length_min, length_max]`.
///
/// Generation stops at the first record boundary where the running token
/// count reaches `target_tokens`.
pub fn generate_baseline(
    dist: &TokenDistribution,
    length_min: usize,
    length_max: usize,
    target_tokens: u64,
    seed: u64,
) -> Result<AnnotatedCorpus> {
    validate_lengths(length_min, length_max)?;
    if target_tokens < length_min as u64 {
        return Err(Error::invalid(format!(
            "target of {target_tokens} tokens is below the minimum sequence length {length_min}"
        )));
    }

    // Lengths first (cheap, sequential) so the record count is known.
    let mut lengths = Vec::new();
    let mut total = 0u64;
    while total < target_tokens {
        let mut r = rng::stream(seed, lengths.len() as u64);
        let len = r.random_range(length_min..=length_max);
        total += len as u64;
        lengths.push(len);
    }

    let records = map_indices(0..lengths.len() as u64, |i| {
        let mut r = rng::stream(seed, i);
        let len = r.random_range(length_min..=length_max);
        let tokens = (0..len).map(|_| dist.sample(&mut r)).collect();
        SequenceRecord::unlabeled(tokens)
    });

    Ok(AnnotatedCorpus {
        records,
        vocab: dist.vocab().clone(),
        provenance: Provenance {
            generator: "baseline".into(),
            config_digest: baseline_digest(dist, length_min, length_max),
            seed,
            target_tokens,
            ..Provenance::default()
        },
    })
}

/// One stack-grammar record plus the counts the estimator needs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratedRecord {
    pub record: SequenceRecord,
    pub forced_pushes: u32,
    pub flush_depth: u32,
}

/// Runs the stack grammar for one record on the given stream.
pub fn generate_record<R: Rng + ?Sized>(gc: &GrammarConfig, rng: &mut R) -> GeneratedRecord {
    let target = rng.random_range(gc.length_min..=gc.length_max);
    let mut tokens = Vec::with_capacity(target + 8);
    let mut labels = Vec::with_capacity(target + 8);
    let mut stack: Vec<u32> = Vec::new();
    let mut forced = 0;

    while tokens.len() < target {
        let push = rng.random::<f64>() < gc.push_probability;
        if !push {
            if let Some(top) = stack.pop() {
                tokens.push(top);
                labels.push(Mark::Pop);
                continue;
            }
            match gc.empty_stack_rule {
                EmptyStackRule::ForcedPush => forced += 1,
            }
        }
        let t = gc.dist.sample(rng);
        stack.push(t);
        tokens.push(t);
        labels.push(Mark::Push);
    }

    let mut flush_depth = 0;
    if gc.flush_at_end {
        while let Some(top) = stack.pop() {
            tokens.push(top);
            labels.push(Mark::Pop);
            flush_depth += 1;
        }
    }

    GeneratedRecord {
        record: SequenceRecord::labeled(tokens, labels),
        forced_pushes: forced,
        flush_depth,
    }
}

/// Stack-grammar corpus with push/pop labels on every position.
pub fn generate_artificial(gc: &GrammarConfig, target_tokens: u64, seed: u64) -> Result<AnnotatedCorpus> {
    gc.validate()?;
    if target_tokens == 0 {
        return Err(Error::invalid("target token count must be positive"));
    }

    const CHUNK: u64 = 256;
    let mut generated: Vec<GeneratedRecord> = Vec::new();
    let mut total = 0u64;
    'outer: loop {
        let start = generated.len() as u64;
        let chunk = map_indices(start..start + CHUNK, |i| {
            let mut r = rng::stream(seed, i);
            generate_record(gc, &mut r)
        });
        for g in chunk {
            total += g.record.len() as u64;
            generated.push(g);
            if total >= target_tokens {
                break 'outer;
            }
        }
    }

    let mut prov = Provenance {
        generator: "artificial".into(),
        config_digest: gc.digest(),
        seed,
        target_tokens,
        flushed: gc.flush_at_end,
        ..Provenance::default()
    };
    let mut records = Vec::with_capacity(generated.len());
    for g in generated {
        prov.forced_pushes += g.forced_pushes as u64;
        prov.flush_pops += g.flush_depth as u64;
        prov.flush_depths.push(g.flush_depth);
        records.push(g.record);
    }

    Ok(AnnotatedCorpus {
        records,
        vocab: gc.dist.vocab().clone(),
        provenance: prov,
    })
}

/// Plain-text ingestion: one record per non-empty line, whitespace tokens.
///
/// Atomic tokens are assigned content ids by descending frequency (ties by
/// first occurrence); tokens beyond the vocabulary's content size are dropped.
pub fn ingest_text(text: &str, vocab: &VocabSpec) -> Result<AnnotatedCorpus> {
    use std::collections::HashMap;

    let mut counts: HashMap<&str, (u64, usize)> = HashMap::new();
    for (pos, w) in text.split_whitespace().enumerate() {
        counts.entry(w).or_insert((0, pos)).0 += 1;
    }
    let mut ranked: Vec<(&str, u64, usize)> = counts.into_iter().map(|(w, (c, p))| (w, c, p)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    let ids: HashMap<&str, u32> = ranked
        .iter()
        .take(vocab.content_size())
        .enumerate()
        .map(|(i, (w, _, _))| (*w, vocab.content_ids().start + i as u32))
        .collect();

    let records: Vec<SequenceRecord> = text
        .lines()
        .map(|line| line.split_whitespace().filter_map(|w| ids.get(w).copied()).collect::<Vec<_>>())
        .filter(|t| !t.is_empty())
        .map(SequenceRecord::unlabeled)
        .collect();
    if records.is_empty() {
        return Err(Error::Data("ingested text contains no tokens".into()));
    }
    let total = records.iter().map(|r| r.len() as u64).sum();
    Ok(AnnotatedCorpus {
        records,
        vocab: vocab.clone(),
        provenance: Provenance {
            generator: "ingest".into(),
            config_digest: rng::sha256_hex(text.as_bytes())[..16].to_string(),
            target_tokens: total,
            ..Provenance::default()
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{build_vocab, make_distribution, DistributionSpec};

    fn dist(content: usize, spec: DistributionSpec) -> TokenDistribution {
        make_distribution(spec, &build_vocab(content).unwrap()).unwrap()
    }

    #[test]
    fn single_support_baseline() {
        let d = dist(1, DistributionSpec::Uniform);
        let c = generate_baseline(&d, 3, 3, 6, 9).unwrap();
        assert_eq!(c.records.len(), 2);
        for r in &c.records {
            assert_eq!(r.tokens, vec![5, 5, 5]);
            assert!(r.labels.is_none());
        }
    }

    #[test]
    fn baseline_lengths_in_range() {
        let d = dist(100, DistributionSpec::Uniform);
        let c = generate_baseline(&d, 90, 120, 50_000, 1).unwrap();
        assert!(c.records.iter().all(|r| (90..=120).contains(&r.len())));
        let total = c.token_count() as u64;
        let last = c.records.last().unwrap().len() as u64;
        assert!(total >= 50_000 && total - last < 50_000);
        c.validate().unwrap();
    }

    #[test]
    fn baseline_rejects_bad_ranges() {
        let d = dist(10, DistributionSpec::Uniform);
        assert!(generate_baseline(&d, 0, 3, 10, 0).is_err());
        assert!(generate_baseline(&d, 5, 3, 10, 0).is_err());
        assert!(generate_baseline(&d, 5, 8, 4, 0).is_err());
    }

    #[test]
    fn all_push_then_flush_is_a_palindrome() {
        let d = dist(50, DistributionSpec::Uniform);
        let gc = GrammarConfig::new(1.0, d, 4, 4);
        let g = generate_record(&gc, &mut rng::seeded(3));
        let t = &g.record.tokens;
        assert_eq!(t.len(), 8);
        let (head, tail) = t.split_at(4);
        assert_eq!(head.iter().rev().copied().collect::<Vec<_>>(), tail);
        use Mark::*;
        assert_eq!(g.record.labels.as_deref().unwrap(), &[Push, Push, Push, Push, Pop, Pop, Pop, Pop]);
        assert_eq!(g.flush_depth, 4);
        assert_eq!(g.forced_pushes, 0);
    }

    #[test]
    fn unflushed_records_stop_at_target() {
        let d = dist(50, DistributionSpec::Uniform);
        let mut gc = GrammarConfig::new(0.4, d, 10, 10);
        gc.flush_at_end = false;
        let c = generate_artificial(&gc, 1000, 4).unwrap();
        assert!(c.records.iter().all(|r| r.len() == 10));
        assert_eq!(c.provenance.flush_pops, 0);
    }

    #[test]
    fn artificial_prefixes_never_overdraw() {
        let d = dist(20, DistributionSpec::zipf(1.0));
        let gc = GrammarConfig::new(0.4, d, 90, 120);
        let c = generate_artificial(&gc, 20_000, 8).unwrap();
        assert!(c.is_labeled());
        assert_eq!(c.provenance.flush_depths.len(), c.records.len());
        for r in &c.records {
            let mut depth = 0i64;
            for m in r.labels.as_ref().unwrap() {
                depth += if *m == Mark::Push { 1 } else { -1 };
                assert!(depth >= 0);
            }
            assert_eq!(depth, 0);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let d = dist(30, DistributionSpec::zipf(1.0));
        let gc = GrammarConfig::new(0.4, d, 20, 30);
        let a = generate_artificial(&gc, 5000, 77).unwrap();
        let b = generate_artificial(&gc, 5000, 77).unwrap();
        assert_eq!(corpus_to_string(&a), corpus_to_string(&b));
        let c = generate_artificial(&gc, 5000, 78).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn grammar_validation() {
        let d = dist(3, DistributionSpec::Uniform);
        assert!(GrammarConfig::new(0.0, d.clone(), 1, 2).validate().is_err());
        assert!(GrammarConfig::new(1.1, d.clone(), 1, 2).validate().is_err());
        assert!(GrammarConfig::new(0.5, d.clone(), 3, 2).validate().is_err());
        assert!(GrammarConfig::new(0.5, d, 1, 2).validate().is_ok());
    }

    #[test]
    fn ingest_ranks_by_frequency() {
        let v = build_vocab(2).unwrap();
        let c = ingest_text("b a b\n\nc b a\n", &v).unwrap();
        // b -> 5, a -> 6, c dropped (vocab holds two content tokens).
        assert_eq!(c.records.len(), 2);
        assert_eq!(c.records[0].tokens, vec![5, 6, 5]);
        assert_eq!(c.records[1].tokens, vec![5, 6]);
    }

    #[test]
    fn split_tail_keeps_depths_aligned() {
        let d = dist(10, DistributionSpec::Uniform);
        let gc = GrammarConfig::new(0.4, d, 5, 8);
        let c = generate_artificial(&gc, 1000, 2).unwrap();
        let n = c.records.len();
        let (train, eval) = c.split_tail(0.1);
        assert_eq!(train.records.len() + eval.records.len(), n);
        assert_eq!(train.provenance.flush_depths.len(), train.records.len());
        assert_eq!(eval.provenance.flush_depths.len(), eval.records.len());
    }
}
