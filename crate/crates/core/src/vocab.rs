//! Vocabularies and the token-sampling laws every generator draws from.
//!
//! Ids `0..5` are reserved for the special tokens; content tokens follow.
//! Distributions only ever put mass on content ids, so generated text never
//! contains a special token (masking inserts them later).

use std::fmt;
use std::ops::Range;

use rand::Rng;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const MASK_ID: u32 = 2;
pub const BOS_ID: u32 = 3;
pub const EOS_ID: u32 = 4;
pub const NUM_SPECIAL: usize = 5;

pub const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["<pad>", "<unk>", "<mask>", "<s>", "</s>"];

/// Content size of the random and Zipf baselines (30000 total).
pub const BASELINE_CONTENT_SIZE: usize = 29995;
/// Content size of the stack-grammar corpus as described in the main text.
pub const ARTIFICIAL_CONTENT_SIZE: usize = 28996;
/// The appendix data table lists 29991 total ids for the same corpus.
pub const ARTIFICIAL_TABLE_CONTENT_SIZE: usize = 29991 - NUM_SPECIAL;
/// Desk-scale vocabulary: 512 ids in total.
pub const DESK_CONTENT_SIZE: usize = 507;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct VocabSpec {
    content_size: usize,
}

impl VocabSpec {
    pub fn new(content_size: usize) -> Result<Self> {
        if content_size == 0 {
            return Err(Error::invalid("vocabulary needs at least one content token"));
        }
        Ok(Self { content_size })
    }

    /// Builds a vocabulary from the total id count (specials included).
    pub fn with_total_size(total_size: usize) -> Result<Self> {
        if total_size <= NUM_SPECIAL {
            return Err(Error::invalid(format!(
                "total vocabulary size {total_size} leaves no content tokens"
            )));
        }
        Self::new(total_size - NUM_SPECIAL)
    }

    pub fn content_size(&self) -> usize {
        self.content_size
    }

    pub fn total_size(&self) -> usize {
        self.content_size + NUM_SPECIAL
    }

    pub fn special_tokens(&self) -> &'static [&'static str] {
        &SPECIAL_TOKENS
    }

    pub fn content_ids(&self) -> Range<u32> {
        NUM_SPECIAL as u32..self.total_size() as u32
    }

    pub fn is_content(&self, id: u32) -> bool {
        self.content_ids().contains(&id)
    }

    pub fn contains(&self, id: u32) -> bool {
        (id as usize) < self.total_size()
    }

    pub fn token(&self, id: u32) -> Option<String> {
        match id as usize {
            i if i < NUM_SPECIAL => Some(SPECIAL_TOKENS[i].to_string()),
            i if i < self.total_size() => Some(format!("t{i}")),
            _ => None,
        }
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        if let Some(i) = SPECIAL_TOKENS.iter().position(|s| *s == token) {
            return Some(i as u32);
        }
        let id: u32 = token.strip_prefix('t')?.parse().ok()?;
        // Reject non-canonical spellings such as "t05".
        (self.is_content(id) && token[1..] == id.to_string()).then_some(id)
    }

    /// Whitespace tokenization with `<unk>` fallback.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| self.id(w).unwrap_or(UNK_ID))
            .collect()
    }
}

pub fn build_vocab(content_size: usize) -> Result<VocabSpec> {
    VocabSpec::new(content_size)
}

/// How a [`TokenDistribution`] assigns mass to content ranks.
///
/// Rank 1 is always the first content id (id 5).
#[derive(Clone, Debug, PartialEq)]
pub enum DistributionSpec {
    Uniform,
    Zipf { exponent: f64 },
    /// Counts in rank order; entry `i` is the weight of content rank `i + 1`.
    Empirical { counts: Vec<u64> },
    Binned { base: Box<DistributionSpec>, bin_size: usize },
}

impl DistributionSpec {
    pub fn zipf(exponent: f64) -> Self {
        DistributionSpec::Zipf { exponent }
    }

    pub fn binned(base: DistributionSpec, bin_size: usize) -> Self {
        DistributionSpec::Binned {
            base: Box::new(base),
            bin_size,
        }
    }

    /// Builds an empirical law from `(token, count)` rows: rows are ranked by
    /// descending count (ties keep file order) and mapped onto content ranks.
    pub fn empirical_from_table(rows: &[(String, u64)]) -> Self {
        let mut counts: Vec<u64> = rows.iter().map(|(_, c)| *c).collect();
        counts.sort_by(|a, b| b.cmp(a));
        DistributionSpec::Empirical { counts }
    }
}

impl fmt::Display for DistributionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DistributionSpec::Uniform => write!(f, "uniform"),
            DistributionSpec::Zipf { exponent } => write!(f, "zipf({exponent})"),
            DistributionSpec::Empirical { counts } => write!(f, "empirical({} ranks)", counts.len()),
            DistributionSpec::Binned { base, bin_size } => write!(f, "binned({base}, {bin_size})"),
        }
    }
}

/// A normalized sampling law over a vocabulary's content ids.
#[derive(Clone, Debug)]
pub struct TokenDistribution {
    spec: DistributionSpec,
    vocab: VocabSpec,
    /// One weight per id, specials included (always 0).
    weights: Vec<f64>,
    /// Cumulative mass over content ids; last positive entry is exactly 1.
    cdf: Vec<f64>,
}

impl TokenDistribution {
    pub fn new(spec: DistributionSpec, vocab: &VocabSpec) -> Result<Self> {
        let content = content_weights(&spec, vocab.content_size())?;
        let total: f64 = content.iter().sum();
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::invalid(format!("distribution {spec} cannot be normalized")));
        }

        let mut weights = vec![0.0; vocab.total_size()];
        for (w, c) in weights[NUM_SPECIAL..].iter_mut().zip(&content) {
            *w = c / total;
        }

        let mut cdf = Vec::with_capacity(content.len());
        let mut acc = 0.0;
        for w in &weights[NUM_SPECIAL..] {
            acc += w;
            cdf.push(acc);
        }
        let last = weights[NUM_SPECIAL..]
            .iter()
            .rposition(|&w| w > 0.0)
            .expect("normalized law has positive mass");
        for c in &mut cdf[last..] {
            *c = 1.0;
        }

        Ok(Self {
            spec,
            vocab: vocab.clone(),
            weights,
            cdf,
        })
    }

    pub fn spec(&self) -> &DistributionSpec {
        &self.spec
    }

    pub fn vocab(&self) -> &VocabSpec {
        &self.vocab
    }

    /// Probability of every id, indexed by id.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, id: u32) -> f64 {
        self.weights.get(id as usize).copied().unwrap_or(0.0)
    }

    /// Number of content ids with positive mass.
    pub fn support_size(&self) -> usize {
        self.weights.iter().filter(|&&w| w > 0.0).count()
    }

    /// Inverse-CDF draw; always a content id with positive weight.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        let u: f64 = rng.random();
        let idx = self.cdf.partition_point(|&c| c <= u);
        // u < 1 always lands on an entry; zero-weight ids repeat the previous
        // cdf value so partition_point skips them.
        let idx = idx.min(self.cdf.len() - 1);
        (NUM_SPECIAL + idx) as u32
    }
}

pub fn make_distribution(spec: DistributionSpec, vocab: &VocabSpec) -> Result<TokenDistribution> {
    TokenDistribution::new(spec, vocab)
}

pub fn sample_token<R: Rng + ?Sized>(dist: &TokenDistribution, rng: &mut R) -> u32 {
    dist.sample(rng)
}

fn content_weights(spec: &DistributionSpec, content_size: usize) -> Result<Vec<f64>> {
    match spec {
        DistributionSpec::Uniform => Ok(vec![1.0; content_size]),
        DistributionSpec::Zipf { exponent } => {
            if !(exponent.is_finite() && *exponent > 0.0) {
                return Err(Error::invalid(format!("zipf exponent must be > 0, got {exponent}")));
            }
            Ok((1..=content_size)
                .map(|rank| (rank as f64).powf(-exponent))
                .collect())
        }
        DistributionSpec::Empirical { counts } => {
            if counts.iter().all(|&c| c == 0) {
                return Err(Error::invalid("empirical table has no positive counts"));
            }
            let mut w: Vec<f64> = counts.iter().take(content_size).map(|&c| c as f64).collect();
            w.resize(content_size, 0.0);
            Ok(w)
        }
        DistributionSpec::Binned { base, bin_size } => {
            if *bin_size == 0 || *bin_size > content_size {
                return Err(Error::invalid(format!(
                    "bin size {bin_size} outside 1..={content_size}"
                )));
            }
            if matches!(**base, DistributionSpec::Binned { .. }) {
                return Err(Error::invalid("nested binned distributions are not supported"));
            }
            let mut w = content_weights(base, content_size)?;
            for x in &mut w[*bin_size..] {
                *x = 0.0;
            }
            Ok(w)
        }
    }
}

/// Parses a `token<TAB>count` table; `#` starts a comment.
pub fn parse_frequency_table(text: &str) -> Result<Vec<(String, u64)>> {
    let mut rows = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim_end();
        if line.trim().is_empty() {
            continue;
        }
        let (token, count) = line.split_once('\t').ok_or_else(|| {
            Error::config(i + 1, "expected `token<TAB>count`")
        })?;
        let count: u64 = count
            .trim()
            .parse()
            .map_err(|_| Error::config(i + 1, format!("bad count {count:?}")))?;
        rows.push((token.trim().to_string(), count));
    }
    if rows.is_empty() {
        return Err(Error::invalid("frequency table is empty"));
    }
    Ok(rows)
}
