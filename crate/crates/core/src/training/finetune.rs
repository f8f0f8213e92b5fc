use rand::seq::SliceRandom;
use rand::Rng;

use super::mlm::{LossPoint, TrainLog};
use super::{adam_update, AdamState, ParamGroup, ParamGroups, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{compute_metric, Example, LabelSpace, MetricKind, TaskDataset};
use crate::model::linalg::{gemm, softmax_in_place, View};
use crate::model::{truncated_normal, Batch, Encoder, ModelCheckpoint, NamedTensor, INIT_STD};
use crate::rng::{self, derive_seed, LabRng};
use crate::vocab::{BOS_ID, EOS_ID};

/// Dropout on the pooled representation before the classifier.
pub const CLASSIFIER_DROPOUT: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadSpec {
    Classification { n_classes: usize },
    Regression,
}

impl HeadSpec {
    pub fn for_task(task: &TaskDataset) -> Self {
        match task.labels {
            LabelSpace::Classes { n, .. } => HeadSpec::Classification { n_classes: n },
            LabelSpace::Real => HeadSpec::Regression,
        }
    }

    pub fn outputs(self) -> usize {
        match self {
            HeadSpec::Classification { n_classes } => n_classes,
            HeadSpec::Regression => 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    /// Encoder weights after fine-tuning with `classifier.*` in `extra`.
    pub model: ModelCheckpoint,
    pub metric: MetricKind,
    pub score: f64,
    pub predictions: Vec<f64>,
    pub log: TrainLog,
}

/// `<s> a </s>` or `<s> a </s> b </s>`, cut from the tail to `max_len`
/// while keeping the closing `</s>`.
fn encode_example(ex: &Example, max_len: usize) -> Vec<u32> {
    let mut ids = vec![BOS_ID];
    ids.extend_from_slice(&ex.text_a);
    ids.push(EOS_ID);
    if let Some(b) = &ex.text_b {
        ids.extend_from_slice(b);
        ids.push(EOS_ID);
    }
    if ids.len() > max_len {
        ids.truncate(max_len - 1);
        ids.push(EOS_ID);
    }
    ids
}

struct Head {
    weight: Vec<f32>,
    bias: Vec<f32>,
    k: usize,
}

impl Head {
    /// `x [rows × d] · W + b`.
    fn logits(&self, x: &[f32], rows: usize, d: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(rows * self.k);
        for _ in 0..rows {
            out.extend_from_slice(&self.bias);
        }
        gemm(1.0, x, View::dense(rows, d), &self.weight, View::dense(d, self.k), 1.0, &mut out, View::dense(rows, self.k));
        out
    }
}

/// Pooled (first-position) hidden vectors of every sequence.
fn pooled(hidden: &[f32], batch: &Batch, d: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(batch.batch_size() * d);
    for b in 0..batch.batch_size() {
        let r = b * batch.seq_len;
        out.extend_from_slice(&hidden[r * d..(r + 1) * d]);
    }
    out
}

fn predict(enc: &Encoder<'_, f32>, head: &Head, examples: &[Example], spec: HeadSpec, max_len: usize, bs: usize) -> Result<Vec<f64>> {
    let d = enc.config().hidden_dim;
    let mut preds = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(bs.max(1)) {
        let seqs: Vec<Vec<u32>> = chunk.iter().map(|e| encode_example(e, max_len)).collect();
        let batch = Batch::from_sequences(&seqs)?;
        let cache = enc.forward::<LabRng>(&batch, None)?;
        let x = pooled(&cache.hidden, &batch, d);
        let z = head.logits(&x, chunk.len(), d);
        for row in z.chunks_exact(head.k) {
            preds.push(match spec {
                HeadSpec::Regression => row[0] as f64,
                HeadSpec::Classification { .. } => {
                    let mut best = 0;
                    for (i, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = i;
                        }
                    }
                    best as f64
                }
            });
        }
    }
    Ok(preds)
}

/// Attaches a fresh head on the `<s>` position and trains every parameter on
/// the task's train split, then scores the dev split.
pub fn finetune(ckpt: &ModelCheckpoint, task: &TaskDataset, head_spec: HeadSpec, cfg: &TrainConfig) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    task.validate()?;
    if HeadSpec::for_task(task) != head_spec {
        return Err(Error::Data(format!("{}: label space does not match the head", task.name)));
    }
    if cfg.max_seq_len > ckpt.config.max_positions {
        return Err(Error::invalid("max_seq_len exceeds the model's max_positions"));
    }
    let vocab_total = ckpt.config.vocab_total as u32;
    if task
        .train
        .iter()
        .chain(&task.dev)
        .flat_map(|e| e.text_a.iter().chain(e.text_b.iter().flatten()))
        .any(|&t| t >= vocab_total)
    {
        return Err(Error::Data(format!("{}: token id outside the model vocabulary", task.name)));
    }

    let d = ckpt.config.hidden_dim;
    let k = head_spec.outputs();
    let mut init_rng = rng::seeded(derive_seed(cfg.seed, "classifier"));
    let mut head = Head {
        weight: (0..d * k).map(|_| truncated_normal(&mut init_rng, INIT_STD) as f32).collect(),
        bias: vec![0.0; k],
        k,
    };
    let mut model = ckpt.clone();
    model.extra.retain(|t| !t.name.starts_with("classifier."));

    let groups = ParamGroups::for_layout(&model.layout, super::Trainable::All);
    let head_groups = ParamGroups(vec![
        ParamGroup {
            range: 0..d * k,
            trainable: true,
            decay: true,
        },
        ParamGroup {
            range: d * k..d * k + k,
            trainable: true,
            decay: false,
        },
    ]);
    let mut enc_state = AdamState::<f32>::new(model.params.len());
    let mut head_state = AdamState::<f32>::new(d * k + k);

    let mut shuffle_rng = rng::seeded(derive_seed(cfg.seed, "finetune_shuffle"));
    let dropout_seed = derive_seed(cfg.seed, "finetune_dropout");
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    order.shuffle(&mut shuffle_rng);
    let mut cursor = 0;
    let mut log = TrainLog::default();
    let (mut window_loss, mut window_steps) = (0.0f64, 0u64);

    for step in 1..=cfg.total_steps {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut shuffle_rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let seqs: Vec<Vec<u32>> = idx.iter().map(|&i| encode_example(&task.train[i], cfg.max_seq_len)).collect();
        let batch = Batch::from_sequences(&seqs)?;
        let bsz = idx.len();
        let mut drop_rng = rng::stream(dropout_seed, step);

        let enc = model.encoder();
        let cache = if model.config.dropout_rate > 0.0 {
            enc.forward(&batch, Some(&mut drop_rng))?
        } else {
            enc.forward::<LabRng>(&batch, None)?
        };
        let mut x = pooled(&cache.hidden, &batch, d);
        let keep = 1.0 / (1.0 - CLASSIFIER_DROPOUT) as f32;
        let drop_mask: Vec<f32> = (0..x.len())
            .map(|_| if drop_rng.random::<f64>() < CLASSIFIER_DROPOUT { 0.0 } else { keep })
            .collect();
        x.iter_mut().zip(&drop_mask).for_each(|(v, m)| *v *= m);
        let mut dz = head.logits(&x, bsz, d);

        let inv_b = 1.0 / bsz as f32;
        let mut loss = 0.0f64;
        for (row, &i) in dz.chunks_exact_mut(k).zip(&idx) {
            let y = task.train[i].label;
            match head_spec {
                HeadSpec::Classification { .. } => {
                    let c = y as usize;
                    let picked = row[c];
                    let lse = softmax_in_place(row);
                    loss += (lse - picked) as f64;
                    row[c] -= 1.0;
                }
                HeadSpec::Regression => {
                    let err = row[0] - y as f32;
                    loss += (err * err) as f64;
                    row[0] = 2.0 * err;
                }
            }
            row.iter_mut().for_each(|g| *g *= inv_b);
        }
        let loss = loss / bsz as f64;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("finetune step {step}: loss is {loss}")));
        }

        let mut head_grads = vec![0.0f32; d * k + k];
        let (dw, db) = head_grads.split_at_mut(d * k);
        gemm(1.0, &x, View::dense(bsz, d).t(), &dz, View::dense(bsz, k), 0.0, dw, View::dense(d, k));
        for row in dz.chunks_exact(k) {
            db.iter_mut().zip(row).for_each(|(a, b)| *a += *b);
        }
        let mut dx = vec![0.0f32; bsz * d];
        gemm(1.0, &dz, View::dense(bsz, k), &head.weight, View::dense(d, k).t(), 0.0, &mut dx, View::dense(bsz, d));
        dx.iter_mut().zip(&drop_mask).for_each(|(g, m)| *g *= m);
        let mut d_hidden = vec![0.0f32; batch.rows() * d];
        for b in 0..bsz {
            let r = b * batch.seq_len;
            d_hidden[r * d..(r + 1) * d].copy_from_slice(&dx[b * d..(b + 1) * d]);
        }
        let mut grads = vec![0.0f32; model.params.len()];
        enc.backward(&batch, &cache, &d_hidden, &mut grads);
        if grads.iter().chain(&head_grads).any(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!("finetune step {step}: non-finite gradient (loss {loss})")));
        }

        adam_update(&mut model.params, &grads, &mut enc_state, &groups, cfg)?;
        let mut flat: Vec<f32> = head.weight.iter().chain(&head.bias).copied().collect();
        adam_update(&mut flat, &head_grads, &mut head_state, &head_groups, cfg)?;
        head.bias.copy_from_slice(&flat[d * k..]);
        flat.truncate(d * k);
        head.weight = flat;

        window_loss += loss;
        window_steps += 1;
        if step % cfg.log_every.max(1) == 0 || step == cfg.total_steps {
            let train_loss = window_loss / window_steps as f64;
            log.points.push(LossPoint {
                step,
                lr: cfg.lr_at(step),
                train_loss,
                eval_loss: None,
            });
            log.final_train_loss = Some(train_loss);
            window_loss = 0.0;
            window_steps = 0;
        }
    }

    if !model.is_finite() || head.weight.iter().chain(&head.bias).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("finetune produced non-finite weights".into()));
    }
    let predictions = predict(&model.encoder(), &head, &task.dev, head_spec, cfg.max_seq_len, cfg.batch_size)?;
    let score = compute_metric(task.metric, &predictions, &task.golds())?;
    model.extra.push(NamedTensor::new("classifier.weight", vec![d, k], head.weight));
    model.extra.push(NamedTensor::new("classifier.bias", vec![k], head.bias));
    model.rng_provenance = format!("{}; finetune_seed={}", model.rng_provenance, cfg.seed);
    Ok(FinetuneOutcome {
        model,
        metric: task.metric,
        score,
        predictions,
        log,
    })
}
