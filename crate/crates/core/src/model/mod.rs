//! A pre-norm transformer encoder with a tied masked-LM head.
//!
//! All trainable tensors live in one flat buffer described by a
//! [`ParamLayout`]; gradients and optimizer moments use the same layout.

mod checkpoint;
mod encoder;
mod gradcheck;
pub mod linalg;

use std::fmt;
use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;

pub use checkpoint::{checkpoint_from_bytes, checkpoint_to_bytes, read_checkpoint, write_checkpoint, NamedTensor};
pub use encoder::{
    forward_mlm, gradient, mlm_loss, mlm_loss_and_grad, mlm_loss_and_grad_with_dropout, mlm_loss_value, Batch, Encoder, ForwardCache, LayerCache, Logits, IGNORE_INDEX,
};
pub use gradcheck::{finite_difference_check, GradCheck};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub vocab_total: usize,
    pub max_positions: usize,
    /// Dropout on both residual branches while training.
    pub dropout_rate: f64,
}

impl ModelConfig {
    /// 4 layers, 128 wide, 4 heads, 512 ids.
    pub fn desk() -> Self {
        Self {
            n_layers: 4,
            hidden_dim: 128,
            n_heads: 4,
            ff_dim: 512,
            vocab_total: 512,
            max_positions: 128,
            dropout_rate: 0.0,
        }
    }

    /// Two layers, 64 wide: the configuration the training experiments use.
    pub fn desk_small() -> Self {
        Self {
            n_layers: 2,
            hidden_dim: 64,
            n_heads: 4,
            ff_dim: 256,
            vocab_total: 512,
            max_positions: 128,
            dropout_rate: 0.0,
        }
    }

    /// The RoBERTa-base shape at a 30000-id vocabulary.
    pub fn paper() -> Self {
        Self {
            n_layers: 12,
            hidden_dim: 768,
            n_heads: 12,
            ff_dim: 3072,
            vocab_total: 30000,
            max_positions: 128,
            dropout_rate: 0.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("hidden_dim", self.hidden_dim),
            ("n_heads", self.n_heads),
            ("ff_dim", self.ff_dim),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if self.hidden_dim % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "hidden_dim {} is not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if self.vocab_total <= crate::vocab::NUM_SPECIAL {
            return Err(Error::invalid("vocab_total must exceed the special tokens"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid("dropout_rate must lie in [0, 1)"));
        }
        if self.max_positions < 3 {
            return Err(Error::invalid("max_positions must leave room for bos/eos"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        ParamLayout::new(self).total()
    }

    pub fn to_key_values(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n_layers", self.n_layers.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("ff_dim", self.ff_dim.to_string()),
            ("vocab_total", self.vocab_total.to_string()),
            ("max_positions", self.max_positions.to_string()),
            ("dropout_rate", self.dropout_rate.to_string()),
        ]
    }

    /// Sets one field by key; used by checkpoint headers and config files.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let int = |v: &str| -> Result<usize> {
            v.parse().map_err(|_| Error::invalid(format!("{key}: expected an integer, got {v:?}")))
        };
        match key {
            "n_layers" => self.n_layers = int(value)?,
            "hidden_dim" => self.hidden_dim = int(value)?,
            "n_heads" => self.n_heads = int(value)?,
            "ff_dim" => self.ff_dim = int(value)?,
            "vocab_total" => self.vocab_total = int(value)?,
            "max_positions" => self.max_positions = int(value)?,
            "dropout_rate" => {
                self.dropout_rate = value
                    .parse()
                    .map_err(|_| Error::invalid(format!("{key}: expected a number, got {value:?}")))?
            }
            _ => return Err(Error::invalid(format!("unknown model key {key:?}"))),
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub range: Range<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSlots {
    pub ln1_gain: Range<usize>,
    pub ln1_bias: Range<usize>,
    pub qkv_weight: Range<usize>,
    pub qkv_bias: Range<usize>,
    pub out_weight: Range<usize>,
    pub out_bias: Range<usize>,
    pub ln2_gain: Range<usize>,
    pub ln2_bias: Range<usize>,
    pub ff_in_weight: Range<usize>,
    pub ff_in_bias: Range<usize>,
    pub ff_out_weight: Range<usize>,
    pub ff_out_bias: Range<usize>,
}

/// Offsets of every tensor in the flat parameter buffer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    pub token_embeddings: Range<usize>,
    pub position_embeddings: Range<usize>,
    pub layers: Vec<LayerSlots>,
    pub final_ln_gain: Range<usize>,
    pub final_ln_bias: Range<usize>,
    pub lm_head_bias: Range<usize>,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut entries = Vec::new();
        let mut add = |name: String, shape: Vec<usize>| -> Range<usize> {
            let start = entries.last().map_or(0, |e: &ParamEntry| e.range.end);
            let range = start..start + shape.iter().product::<usize>();
            entries.push(ParamEntry {
                name,
                shape,
                range: range.clone(),
            });
            range
        };
        let (d, f, v) = (cfg.hidden_dim, cfg.ff_dim, cfg.vocab_total);

        let token_embeddings = add("embeddings.token".into(), vec![v, d]);
        let position_embeddings = add("embeddings.position".into(), vec![cfg.max_positions, d]);
        let layers = (0..cfg.n_layers)
            .map(|l| LayerSlots {
                ln1_gain: add(format!("layer.{l}.ln1.gain"), vec![d]),
                ln1_bias: add(format!("layer.{l}.ln1.bias"), vec![d]),
                qkv_weight: add(format!("layer.{l}.attn.qkv.weight"), vec![d, 3 * d]),
                qkv_bias: add(format!("layer.{l}.attn.qkv.bias"), vec![3 * d]),
                out_weight: add(format!("layer.{l}.attn.out.weight"), vec![d, d]),
                out_bias: add(format!("layer.{l}.attn.out.bias"), vec![d]),
                ln2_gain: add(format!("layer.{l}.ln2.gain"), vec![d]),
                ln2_bias: add(format!("layer.{l}.ln2.bias"), vec![d]),
                ff_in_weight: add(format!("layer.{l}.ff.in.weight"), vec![d, f]),
                ff_in_bias: add(format!("layer.{l}.ff.in.bias"), vec![f]),
                ff_out_weight: add(format!("layer.{l}.ff.out.weight"), vec![f, d]),
                ff_out_bias: add(format!("layer.{l}.ff.out.bias"), vec![d]),
            })
            .collect();
        let final_ln_gain = add("final_ln.gain".into(), vec![d]);
        let final_ln_bias = add("final_ln.bias".into(), vec![d]);
        let lm_head_bias = add("lm_head.bias".into(), vec![v]);

        Self {
            entries,
            token_embeddings,
            position_embeddings,
            layers,
            final_ln_gain,
            final_ln_bias,
            lm_head_bias,
        }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.entries.last().map_or(0, |e| e.range.end)
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Whether a tensor is excluded from weight decay (biases and norms).
pub fn is_no_decay(name: &str) -> bool {
    name.ends_with(".bias") || name.ends_with(".gain")
}

/// Whether a tensor belongs to a transformer layer (frozen during alignment).
pub fn is_layer_tensor(name: &str) -> bool {
    name.starts_with("layer.")
}

/// All trainable encoder tensors plus configuration and seed provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub params: Vec<f32>,
    /// Free-form description of the seeds that produced these weights.
    pub rng_provenance: String,
    /// Task heads attached after pre-training (e.g. `classifier.weight`).
    pub extra: Vec<NamedTensor>,
}

impl ModelCheckpoint {
    pub fn tensor(&self, name: &str) -> Option<&[f32]> {
        self.layout.get(name).map(|e| &self.params[e.range.clone()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f32]> {
        let range = self.layout.get(name)?.range.clone();
        Some(&mut self.params[range])
    }

    pub fn encoder(&self) -> Encoder<'_, f32> {
        Encoder::new(&self.config, &self.layout, &self.params)
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite()) && self.extra.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}L/{}d/{}h/ff{}/V{}/P{}",
            self.n_layers, self.hidden_dim, self.n_heads, self.ff_dim, self.vocab_total, self.max_positions
        )
    }
}

/// Normal(0, std) truncated to ±2 std by rejection.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    let normal = Normal::new(0.0, std).expect("positive std");
    loop {
        let x: f64 = normal.sample(rng);
        if x.abs() <= 2.0 * std {
            return x;
        }
    }
}

/// Fresh weights: truncated normal (std 0.02) for matrices and embeddings,
/// unit gains, zero biases.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelCheckpoint> {
    config.validate()?;
    let layout = ParamLayout::new(config);
    let mut params = vec![0.0f32; layout.total()];
    let mut r = rng::seeded(seed);
    for e in layout.entries() {
        let slot = &mut params[e.range.clone()];
        if e.name.ends_with(".gain") {
            slot.fill(1.0);
        } else if !e.name.ends_with(".bias") {
            for p in slot {
                *p = truncated_normal(&mut r, INIT_STD) as f32;
            }
        }
    }
    Ok(ModelCheckpoint {
        config: config.clone(),
        layout,
        params,
        rng_provenance: format!("init_seed={seed}"),
        extra: Vec::new(),
    })
}
