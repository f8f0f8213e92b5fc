//! Browser bindings for three small experiments: sampling a token law and
//! fitting its exponent, generating and checking nested records, and a
//! masked-LM loss curve on a tiny model.

use wasm_bindgen::prelude::*;

use pretrain_lab::corpusgen::{generate_artificial, generate_baseline, generate_record, GrammarConfig};
use pretrain_lab::corpusstats::{fit_zipf_counts, is_well_nested, verify_nesting};
use pretrain_lab::model::{init_model, ModelConfig};
use pretrain_lab::rng;
use pretrain_lab::training::{pretrain, MaskPolicy, TrainConfig};
use pretrain_lab::vocab::{DistributionSpec, TokenDistribution, VocabSpec, NUM_SPECIAL};
use pretrain_lab::Result;

const TOP_RANKS: usize = 50;

#[wasm_bindgen]
pub struct ZipfSample {
    expected: Vec<f64>,
    observed: Vec<f64>,
    fitted: f64,
    tv: f64,
}

#[wasm_bindgen]
impl ZipfSample {
    /// Target probability of the top ranks.
    #[wasm_bindgen(getter)]
    pub fn expected(&self) -> Vec<f64> {
        self.expected.clone()
    }

    /// Observed frequency of the top ranks, sorted by count.
    #[wasm_bindgen(getter)]
    pub fn observed(&self) -> Vec<f64> {
        self.observed.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn fitted(&self) -> f64 {
        self.fitted
    }

    #[wasm_bindgen(getter)]
    pub fn tv(&self) -> f64 {
        self.tv
    }
}

pub fn sample_zipf(exponent: f64, content_size: usize, samples: usize, seed: u64) -> Result<ZipfSample> {
    let vocab = VocabSpec::new(content_size)?;
    let dist = TokenDistribution::new(DistributionSpec::zipf(exponent), &vocab)?;
    let mut r = rng::seeded(seed);
    let mut counts = vec![0u64; vocab.total_size()];
    for _ in 0..samples {
        counts[dist.sample(&mut r) as usize] += 1;
    }
    let n = samples.max(1) as f64;
    let tv = 0.5 * counts.iter().zip(dist.weights()).map(|(&c, &w)| (c as f64 / n - w).abs()).sum::<f64>();
    let mut sorted: Vec<u64> = counts[NUM_SPECIAL..].to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    let top = TOP_RANKS.min(content_size);
    Ok(ZipfSample {
        expected: dist.weights()[NUM_SPECIAL..NUM_SPECIAL + top].to_vec(),
        observed: sorted[..top].iter().map(|&c| c as f64 / n).collect(),
        fitted: fit_zipf_counts(&counts).unwrap_or(f64::NAN),
        tv,
    })
}

#[wasm_bindgen(js_name = sampleZipf)]
pub fn sample_zipf_js(exponent: f64, content_size: usize, samples: usize, seed: u64) -> Result<ZipfSample, JsError> {
    sample_zipf(exponent, content_size, samples, seed).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub struct NestedRecord {
    tokens: Vec<u32>,
    marks: String,
}

#[wasm_bindgen]
impl NestedRecord {
    #[wasm_bindgen(getter)]
    pub fn tokens(&self) -> Vec<u32> {
        self.tokens.clone()
    }

    /// One `P` (push) or `O` (pop) per token.
    #[wasm_bindgen(getter)]
    pub fn marks(&self) -> String {
        self.marks.clone()
    }
}

pub fn nested_record(push_probability: f64, length: usize, seed: u64) -> Result<NestedRecord> {
    let vocab = VocabSpec::new(20)?;
    let dist = TokenDistribution::new(DistributionSpec::Uniform, &vocab)?;
    let gc = GrammarConfig::new(push_probability, dist, length, length);
    gc.validate()?;
    let rec = generate_record(&gc, &mut rng::seeded(seed)).record;
    debug_assert!(verify_nesting(&rec, true).map(|n| n.is_ok()).unwrap_or(false));
    let marks = rec.labels.as_deref().unwrap_or_default().iter().map(|m| m.as_char()).collect();
    Ok(NestedRecord { tokens: rec.tokens, marks })
}

#[wasm_bindgen(js_name = nestedRecord)]
pub fn nested_record_js(push_probability: f64, length: usize, seed: u64) -> Result<NestedRecord, JsError> {
    nested_record(push_probability, length, seed).map_err(|e| JsError::new(&e.to_string()))
}

/// Whether space-separated ids form a closed nest; unparsable input is not.
#[wasm_bindgen(js_name = isWellNested)]
pub fn is_well_nested_text(text: &str) -> bool {
    let ids: Option<Vec<u32>> = text.split_whitespace().map(|t| t.parse().ok()).collect();
    ids.is_some_and(|ids| is_well_nested(&ids))
}

/// Train losses every 10 steps of a one-layer model on a small corpus of the
/// given kind: `artificial`, `zipf`, or `uniform`.
pub fn mlm_curve(kind: &str, steps: u64, seed: u64) -> Result<Vec<f64>> {
    let vocab = VocabSpec::new(59)?;
    let zipf = TokenDistribution::new(DistributionSpec::zipf(1.0), &vocab)?;
    let corpus = match kind {
        "artificial" => generate_artificial(&GrammarConfig::new(0.4, zipf, 12, 16), 20_000, seed)?,
        "zipf" => generate_baseline(&zipf, 12, 16, 20_000, seed)?,
        "uniform" => {
            let uni = TokenDistribution::new(DistributionSpec::Uniform, &vocab)?;
            generate_baseline(&uni, 12, 16, 20_000, seed)?
        }
        other => return Err(pretrain_lab::Error::invalid(format!("unknown corpus kind {other:?}"))),
    };
    let model = ModelConfig {
        n_layers: 1,
        hidden_dim: 32,
        n_heads: 2,
        ff_dim: 64,
        vocab_total: vocab.total_size(),
        max_positions: 32,
        dropout_rate: 0.0,
    };
    let cfg = TrainConfig {
        batch_size: 16,
        learning_rate: 3e-3,
        total_steps: steps,
        warmup_steps: steps / 10,
        max_seq_len: 32,
        seed,
        log_every: 10,
        ..TrainConfig::desk()
    };
    let start = init_model(&model, seed)?;
    let (_, log) = pretrain(&corpus, None, &start, &cfg, &MaskPolicy::default())?;
    Ok(log.points.iter().map(|p| p.train_loss).collect())
}

#[wasm_bindgen(js_name = mlmCurve)]
pub fn mlm_curve_js(kind: &str, steps: u64, seed: u64) -> Result<Vec<f64>, JsError> {
    mlm_curve(kind, steps, seed).map_err(|e| JsError::new(&e.to_string()))
}
