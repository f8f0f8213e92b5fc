use std::fmt::Write as _;

use rand::seq::SliceRandom;

use super::masking::{mask_tokens, MaskPolicy, MaskedExample};
use super::{adam_update, AdamState, ParamGroups, TrainConfig, Trainable};
use crate::corpusgen::{AnnotatedCorpus, SequenceRecord};
use crate::error::{Error, Result};
use crate::model::{mlm_loss_and_grad_with_dropout, mlm_loss_value, Batch, ModelCheckpoint, IGNORE_INDEX};
use crate::rng::{self, derive_seed};
use crate::vocab::VocabSpec;

#[derive(Clone, Debug, PartialEq)]
pub struct LossPoint {
    pub step: u64,
    pub lr: f64,
    /// Mean training loss since the previous point.
    pub train_loss: f64,
    pub eval_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub points: Vec<LossPoint>,
    pub initial_eval_loss: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub final_eval_loss: Option<f64>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,train_loss,eval_loss\n");
        for p in &self.points {
            let eval = p.eval_loss.map(|e| format!("{e:.6}")).unwrap_or_default();
            let _ = writeln!(out, "{},{:e},{:.6},{}", p.step, p.lr, p.train_loss, eval);
        }
        out
    }

    /// Two-column summary in the layout of a "Training Loss / Eval. Loss" table.
    pub fn summary(&self, arm: &str) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"));
        format!(
            "{:<24} {:>13} {:>10}\n{:<24} {:>13} {:>10}\n",
            "arm",
            "Training Loss",
            "Eval. Loss",
            arm,
            f(self.final_train_loss),
            f(self.final_eval_loss)
        )
    }
}

fn truncated(records: &[SequenceRecord], max_seq_len: usize) -> Vec<&[u32]> {
    let keep = max_seq_len - 2;
    records
        .iter()
        .filter(|r| !r.tokens.is_empty())
        .map(|r| &r.tokens[..r.tokens.len().min(keep)])
        .collect()
}

fn collate(examples: &[MaskedExample]) -> Result<(Batch, Vec<u32>, Vec<bool>)> {
    let inputs: Vec<Vec<u32>> = examples.iter().map(|e| e.input.clone()).collect();
    let batch = Batch::from_sequences(&inputs)?;
    let s = batch.seq_len;
    let mut targets = vec![IGNORE_INDEX; batch.rows()];
    let mut mask = vec![false; batch.rows()];
    for (i, e) in examples.iter().enumerate() {
        targets[i * s..i * s + e.targets.len()].copy_from_slice(&e.targets);
        mask[i * s..i * s + e.loss_mask.len()].copy_from_slice(&e.loss_mask);
    }
    Ok((batch, targets, mask))
}

/// Mean held-out masked-LM loss per masked position.
///
/// Selected positions are always replaced by the mask token, and record `i`
/// is masked from stream `i` of `seed`, so repeated calls are comparable.
pub fn eval_mlm_loss(
    ckpt: &ModelCheckpoint,
    records: &[SequenceRecord],
    vocab: &VocabSpec,
    max_seq_len: usize,
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    let policy = MaskPolicy::mask_only();
    let recs = truncated(records, max_seq_len);
    if recs.is_empty() {
        return Err(Error::Data("evaluation corpus has no tokens".into()));
    }
    let enc = ckpt.encoder();
    let (mut total, mut count) = (0.0f64, 0usize);
    for (chunk_no, chunk) in recs.chunks(batch_size.max(1)).enumerate() {
        let mut examples = Vec::with_capacity(chunk.len());
        for (j, rec) in chunk.iter().enumerate() {
            let idx = (chunk_no * batch_size.max(1) + j) as u64;
            if let Some(ex) = mask_tokens(rec, &policy, vocab, &mut rng::stream(seed, idx))? {
                examples.push(ex);
            }
        }
        let (batch, targets, mask) = collate(&examples)?;
        let n = mask.iter().filter(|&&m| m).count();
        total += mlm_loss_value(&enc, &batch, &targets, &mask)? * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

fn first_non_finite(ckpt: &ModelCheckpoint, values: &[f32]) -> Option<String> {
    ckpt.layout
        .entries()
        .iter()
        .find(|e| values[e.range.clone()].iter().any(|v| !v.is_finite()))
        .map(|e| e.name.clone())
}

fn run_mlm(
    stage: &str,
    train: &AnnotatedCorpus,
    eval: Option<&AnnotatedCorpus>,
    ckpt: &ModelCheckpoint,
    cfg: &TrainConfig,
    policy: &MaskPolicy,
) -> Result<(ModelCheckpoint, TrainLog)> {
    cfg.validate()?;
    policy.validate()?;
    let vocab = &train.vocab;
    if vocab.total_size() > ckpt.config.vocab_total {
        return Err(Error::invalid(format!(
            "corpus vocabulary of {} exceeds the model's {}",
            vocab.total_size(),
            ckpt.config.vocab_total
        )));
    }
    if cfg.max_seq_len > ckpt.config.max_positions {
        return Err(Error::invalid("max_seq_len exceeds the model's max_positions"));
    }
    let records = truncated(&train.records, cfg.max_seq_len);
    if records.is_empty() {
        return Err(Error::Data("training corpus has no tokens".into()));
    }
    let eval_seed = derive_seed(cfg.seed, "eval_mask");
    let evaluate = |c: &ModelCheckpoint| -> Result<Option<f64>> {
        eval.map(|e| eval_mlm_loss(c, &e.records, &e.vocab, cfg.max_seq_len, cfg.batch_size, eval_seed))
            .transpose()
    };

    let mut out = ckpt.clone();
    let mut log = TrainLog {
        initial_eval_loss: evaluate(&out)?,
        ..TrainLog::default()
    };
    if cfg.total_steps == 0 {
        log.final_eval_loss = log.initial_eval_loss;
        return Ok((out, log));
    }

    let groups = ParamGroups::for_layout(&out.layout, cfg.trainable);
    let frozen: Vec<(std::ops::Range<usize>, Vec<f32>)> = groups
        .0
        .iter()
        .filter(|g| !g.trainable)
        .map(|g| (g.range.clone(), out.params[g.range.clone()].to_vec()))
        .collect();
    let mut state = AdamState::<f32>::new(out.params.len());
    let mut shuffle_rng = rng::seeded(derive_seed(cfg.seed, "shuffle"));
    let mask_seed = derive_seed(cfg.seed, "mask");
    let dropout_seed = derive_seed(cfg.seed, "dropout");
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut shuffle_rng);
    let mut cursor = 0;
    let (mut window_loss, mut window_steps) = (0.0f64, 0u64);

    for step in 1..=cfg.total_steps {
        let mut mask_rng = rng::stream(mask_seed, step);
        let mut examples = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut shuffle_rng);
                cursor = 0;
            }
            let rec = records[order[cursor]];
            cursor += 1;
            if let Some(ex) = mask_tokens(rec, policy, vocab, &mut mask_rng)? {
                examples.push(ex);
            }
        }
        let (batch, targets, mask) = collate(&examples)?;
        let enc = out.encoder();
        let mut dropout_rng = rng::stream(dropout_seed, step);
        let dropout = (out.config.dropout_rate > 0.0).then_some(&mut dropout_rng);
        let (loss, grads) = mlm_loss_and_grad_with_dropout(&enc, &batch, &targets, &mask, dropout)?;
        let lr = cfg.lr_at(step);
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("{stage} step {step}: loss is {loss} (lr {lr:e})")));
        }
        if let Some(name) = first_non_finite(&out, &grads) {
            return Err(Error::Numerical(format!("{stage} step {step}: non-finite gradient in {name} (loss {loss})")));
        }
        adam_update(&mut out.params, &grads, &mut state, &groups, cfg)?;
        if let Some(name) = first_non_finite(&out, &out.params) {
            return Err(Error::Numerical(format!("{stage} step {step}: {name} became non-finite (lr {lr:e})")));
        }

        window_loss += loss;
        window_steps += 1;
        let last = step == cfg.total_steps;
        if step % cfg.log_every.max(1) == 0 || last {
            if let Some((range, _)) = frozen.iter().find(|(r, v)| out.params[r.clone()] != v[..]) {
                return Err(Error::Numerical(format!(
                    "{stage} step {step}: frozen parameters {range:?} changed"
                )));
            }
            let due = last || (cfg.eval_every > 0 && step % cfg.eval_every == 0);
            let eval_loss = if due { evaluate(&out)? } else { None };
            let train_loss = window_loss / window_steps as f64;
            log.points.push(LossPoint {
                step,
                lr,
                train_loss,
                eval_loss,
            });
            if last {
                log.final_train_loss = Some(train_loss);
                log.final_eval_loss = eval_loss;
            }
            window_loss = 0.0;
            window_steps = 0;
        }
    }
    out.rng_provenance = format!("{}; {stage}_seed={}", out.rng_provenance, cfg.seed);
    Ok((out, log))
}

/// Masked-LM training of the whole model on `train`.
///
/// `eval`, when given, is scored before training, every `eval_every` steps,
/// and after the last step.
pub fn pretrain(
    train: &AnnotatedCorpus,
    eval: Option<&AnnotatedCorpus>,
    ckpt: &ModelCheckpoint,
    cfg: &TrainConfig,
    policy: &MaskPolicy,
) -> Result<(ModelCheckpoint, TrainLog)> {
    run_mlm("pretrain", train, eval, ckpt, cfg, policy)
}

/// Masked-LM training of the token embeddings and LM head only; every other
/// tensor is left bit-identical.
pub fn align_embeddings(
    target: &AnnotatedCorpus,
    eval: Option<&AnnotatedCorpus>,
    ckpt: &ModelCheckpoint,
    cfg: &TrainConfig,
    policy: &MaskPolicy,
) -> Result<(ModelCheckpoint, TrainLog)> {
    let cfg = TrainConfig {
        trainable: Trainable::EmbeddingsAndHead,
        ..cfg.clone()
    };
    run_mlm("align", target, eval, ckpt, &cfg, policy)
}
