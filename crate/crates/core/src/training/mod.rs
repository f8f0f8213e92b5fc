//! Masking, the optimizer, and the three training regimes: masked-LM
//! pre-training, embedding alignment with frozen layers, and fine-tuning.

mod finetune;
mod masking;
mod mlm;
mod surgery;

use std::ops::Range;

use crate::error::{Error, Result};
use crate::model::linalg::Scalar;
use crate::model::{is_no_decay, ParamLayout};

pub use finetune::{finetune, FinetuneOutcome, HeadSpec, CLASSIFIER_DROPOUT};
pub use masking::{mask_tokens, MaskAction, MaskPolicy, MaskedExample};
pub use mlm::{align_embeddings, eval_mlm_loss, pretrain, LossPoint, TrainLog};
pub use surgery::{substitute_unused_embeddings, surgery_mapping, SurgeryRule, SurgerySpec};

/// Which tensors an optimizer step may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    All,
    /// Token embeddings and the LM-head bias; the tied head weight is the
    /// embedding table itself.
    EmbeddingsAndHead,
}

impl Trainable {
    pub fn includes(self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::EmbeddingsAndHead => name == "embeddings.token" || name == "lm_head.bias",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Trainable::All => "all",
            Trainable::EmbeddingsAndHead => "embeddings+lm_head",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Trainable::All),
            "embeddings+lm_head" => Ok(Trainable::EmbeddingsAndHead),
            _ => Err(Error::invalid(format!("unknown trainable filter {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub total_steps: u64,
    pub warmup_steps: u64,
    /// Longest input including bos/eos; longer records lose their tail.
    pub max_seq_len: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub trainable: Trainable,
    /// Loss-curve granularity in steps.
    pub log_every: u64,
    /// Held-out evaluation every this many steps; 0 evaluates only at the end.
    pub eval_every: u64,
}

impl TrainConfig {
    /// Appendix Table 3 pre-training values.
    pub fn table3() -> Self {
        Self {
            batch_size: 150,
            learning_rate: 5e-5,
            total_steps: 200_000,
            warmup_steps: 10_000,
            max_seq_len: 128,
            ..Self::desk()
        }
    }

    /// Short desk-scale runs.
    pub fn desk() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-3,
            total_steps: 2000,
            warmup_steps: 100,
            max_seq_len: 64,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            seed: 0,
            trainable: Trainable::All,
            log_every: 50,
            eval_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::invalid("warmup_steps exceeds total_steps"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if self.max_seq_len < 3 {
            return Err(Error::invalid("max_seq_len must leave room for bos/eos and one token"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return Err(Error::invalid("Adam hyperparameters out of range"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::invalid("weight_decay must be nonnegative"));
        }
        Ok(())
    }

    /// Linear warmup to the peak, then linear decay to zero. `step` counts
    /// updates from 1.
    pub fn lr_at(&self, step: u64) -> f64 {
        let peak = self.learning_rate;
        if step <= self.warmup_steps {
            if self.warmup_steps == 0 {
                return peak;
            }
            return peak * step as f64 / self.warmup_steps as f64;
        }
        if self.total_steps <= self.warmup_steps {
            return 0.0;
        }
        let left = self.total_steps.saturating_sub(step);
        peak * left as f64 / (self.total_steps - self.warmup_steps) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamGroup {
    pub range: Range<usize>,
    pub trainable: bool,
    pub decay: bool,
}

/// Per-tensor optimizer flags over a flat parameter buffer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamGroups(pub Vec<ParamGroup>);

impl ParamGroups {
    pub fn for_layout(layout: &ParamLayout, trainable: Trainable) -> Self {
        ParamGroups(
            layout
                .entries()
                .iter()
                .map(|e| ParamGroup {
                    range: e.range.clone(),
                    trainable: trainable.includes(&e.name),
                    decay: !is_no_decay(&e.name),
                })
                .collect(),
        )
    }

    /// A single tensor, trained and decayed.
    pub fn whole(len: usize) -> Self {
        ParamGroups(vec![ParamGroup {
            range: 0..len,
            trainable: true,
            decay: true,
        }])
    }

    pub fn len(&self) -> usize {
        self.0.last().map_or(0, |g| g.range.end)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    /// Updates applied so far.
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam step with decoupled weight decay at the
/// scheduled learning rate. Frozen groups are not touched at all.
pub fn adam_update<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    groups: &ParamGroups,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != groups.len() {
        return Err(Error::invalid(format!(
            "shape mismatch: {} params, {} grads, {} moments, {} grouped",
            params.len(),
            grads.len(),
            state.m.len(),
            groups.len()
        )));
    }
    state.step += 1;
    let t = state.step;
    let lr = T::of(cfg.lr_at(t));
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::one() - T::of(cfg.beta1.powi(t.min(i32::MAX as u64) as i32));
    let c2 = T::one() - T::of(cfg.beta2.powi(t.min(i32::MAX as u64) as i32));
    let eps = T::of(cfg.adam_eps);
    let wd = T::of(cfg.weight_decay);
    for g in groups.0.iter().filter(|g| g.trainable) {
        for i in g.range.clone() {
            let grad = grads[i];
            let m = b1 * state.m[i] + (T::one() - b1) * grad;
            let v = b2 * state.v[i] + (T::one() - b2) * grad * grad;
            state.m[i] = m;
            state.v[i] = v;
            let mut delta = (m / c1) / ((v / c2).sqrt() + eps);
            if g.decay {
                delta += wd * params[i];
            }
            params[i] -= lr * delta;
        }
    }
    Ok(())
}
