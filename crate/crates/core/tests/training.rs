use std::collections::HashSet;

use pretrain_lab::corpusgen::{generate_artificial, generate_baseline, AnnotatedCorpus, GrammarConfig};
use pretrain_lab::eval::{Example, LabelSpace, MetricKind, TaskDataset, TaskKind};
use pretrain_lab::model::{checkpoint_from_bytes, checkpoint_to_bytes, init_model, is_layer_tensor, ModelCheckpoint, ModelConfig};
use pretrain_lab::training::{
    align_embeddings, eval_mlm_loss, finetune, pretrain, substitute_unused_embeddings, surgery_mapping, HeadSpec, MaskPolicy,
    SurgerySpec, TrainConfig,
};
use pretrain_lab::vocab::{DistributionSpec, TokenDistribution, VocabSpec};

fn tiny_model() -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        hidden_dim: 32,
        n_heads: 2,
        ff_dim: 64,
        vocab_total: 45,
        max_positions: 32,
        dropout_rate: 0.0,
    }
}

fn tiny_corpus(seed: u64) -> AnnotatedCorpus {
    let vocab = VocabSpec::new(40).unwrap();
    let dist = TokenDistribution::new(DistributionSpec::zipf(1.0), &vocab).unwrap();
    generate_artificial(&GrammarConfig::new(0.4, dist, 10, 14), 6_000, seed).unwrap()
}

fn short(steps: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        learning_rate: 3e-3,
        total_steps: steps,
        warmup_steps: steps / 10,
        max_seq_len: 32,
        log_every: 10,
        seed: 5,
        ..TrainConfig::desk()
    }
}

#[test]
fn zero_steps_returns_identical_model() {
    let ckpt = init_model(&tiny_model(), 1).unwrap();
    let (out, log) = pretrain(&tiny_corpus(1), None, &ckpt, &short(0), &MaskPolicy::default()).unwrap();
    assert_eq!(out.params, ckpt.params);
    assert!(log.points.is_empty());
}

#[test]
fn pretraining_lowers_held_out_loss() {
    let (train, eval) = tiny_corpus(2).split_tail(0.1);
    let ckpt = init_model(&tiny_model(), 1).unwrap();
    let (out, log) = pretrain(&train, Some(&eval), &ckpt, &short(150), &MaskPolicy::default()).unwrap();
    let before = log.initial_eval_loss.unwrap();
    let after = log.final_eval_loss.unwrap();
    assert!((before - 45f64.ln()).abs() < 0.3, "initial {before}");
    assert!(after < before - 0.5, "{before} -> {after}");
    let direct = eval_mlm_loss(&out, &eval.records, &eval.vocab, 32, 16, 0).unwrap();
    assert!(direct.is_finite());
    assert_eq!(log.to_csv().lines().next(), Some("step,lr,train_loss,eval_loss"));
}

#[test]
fn training_is_deterministic() {
    let ckpt = init_model(&tiny_model(), 3).unwrap();
    let corpus = tiny_corpus(3);
    let a = pretrain(&corpus, None, &ckpt, &short(20), &MaskPolicy::default()).unwrap().0;
    let b = pretrain(&corpus, None, &ckpt, &short(20), &MaskPolicy::default()).unwrap().0;
    assert_eq!(checkpoint_to_bytes(&a).unwrap(), checkpoint_to_bytes(&b).unwrap());
}

#[test]
fn align_touches_only_embeddings_and_head_bias() {
    let ckpt = init_model(&tiny_model(), 4).unwrap();
    let (out, _) = align_embeddings(&tiny_corpus(4), None, &ckpt, &short(30), &MaskPolicy::default()).unwrap();
    for e in ckpt.layout.entries() {
        let (a, b) = (ckpt.tensor(&e.name).unwrap(), out.tensor(&e.name).unwrap());
        let same = a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        let trainable = e.name == "embeddings.token" || e.name == "lm_head.bias";
        assert_eq!(same, !trainable, "{}", e.name);
        if is_layer_tensor(&e.name) {
            assert!(same);
        }
    }
}

fn distinct_rows(ckpt: &ModelCheckpoint, ids: std::ops::Range<usize>) -> usize {
    let d = ckpt.config.hidden_dim;
    let emb = ckpt.tensor("embeddings.token").unwrap();
    ids.map(|i| emb[i * d..(i + 1) * d].iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect::<HashSet<_>>()
        .len()
}

#[test]
fn surgery_is_idempotent_and_local() {
    let ckpt = init_model(&tiny_model(), 5).unwrap();
    let spec = SurgerySpec::new([5, 9, 17]);
    let once = substitute_unused_embeddings(&ckpt, &spec).unwrap();
    let twice = substitute_unused_embeddings(&once, &spec).unwrap();
    assert_eq!(once.params, twice.params);
    assert_eq!(distinct_rows(&once, 5..45), 3);

    let d = ckpt.config.hidden_dim;
    let (a, b) = (ckpt.tensor("embeddings.token").unwrap(), once.tensor("embeddings.token").unwrap());
    for id in [0usize, 1, 2, 3, 4, 5, 9, 17] {
        assert_eq!(a[id * d..(id + 1) * d], b[id * d..(id + 1) * d], "row {id}");
    }
    for (unused, src) in surgery_mapping(&spec, 45).unwrap() {
        let (u, s) = (unused as usize, src as usize);
        assert_eq!(b[u * d..(u + 1) * d], a[s * d..(s + 1) * d]);
    }
    for e in ckpt.layout.entries().iter().filter(|e| e.name != "embeddings.token") {
        assert_eq!(ckpt.tensor(&e.name), once.tensor(&e.name), "{}", e.name);
    }
    assert!(substitute_unused_embeddings(&ckpt, &SurgerySpec::new([2])).is_err());
}

/// Label is whether the sequence contains id 5; everything else is noise.
fn marker_task(n: usize, seed: u64) -> TaskDataset {
    let vocab = VocabSpec::new(40).unwrap();
    let dist = TokenDistribution::new(DistributionSpec::Uniform, &vocab).unwrap();
    let noise = generate_baseline(&dist, 6, 10, (n * 20) as u64, seed).unwrap();
    let mut examples: Vec<Example> = noise
        .records
        .into_iter()
        .take(n)
        .enumerate()
        .map(|(i, r)| {
            let mut toks: Vec<u32> = r.tokens.into_iter().filter(|&t| t != 5).collect();
            let label = (i % 2) as f64;
            if label == 1.0 {
                let at = i % toks.len();
                toks[at] = 5;
            }
            Example {
                text_a: toks,
                text_b: None,
                label,
            }
        })
        .collect();
    let dev = examples.split_off(n * 3 / 4);
    TaskDataset {
        name: "marker".into(),
        kind: TaskKind::Single,
        labels: LabelSpace::classes(2),
        metric: MetricKind::Accuracy,
        train: examples,
        dev,
    }
}

/// Bag-of-words perceptron; separability witness for the toy task.
fn perceptron_accuracy(task: &TaskDataset, vocab_total: usize) -> f64 {
    let feats = |e: &Example| {
        let mut f = vec![0.0f64; vocab_total];
        e.text_a.iter().for_each(|&t| f[t as usize] = 1.0);
        f
    };
    let mut w = vec![0.0f64; vocab_total];
    let mut b = 0.0;
    for _ in 0..50 {
        for e in &task.train {
            let f = feats(e);
            let y = if e.label == 1.0 { 1.0 } else { -1.0 };
            let s: f64 = w.iter().zip(&f).map(|(a, x)| a * x).sum::<f64>() + b;
            if y * s <= 0.0 {
                w.iter_mut().zip(&f).for_each(|(a, x)| *a += y * x);
                b += y;
            }
        }
    }
    let hits = task
        .dev
        .iter()
        .filter(|e| {
            let s: f64 = w.iter().zip(feats(e)).map(|(a, x)| a * x).sum::<f64>() + b;
            (s > 0.0) == (e.label == 1.0)
        })
        .count();
    hits as f64 / task.dev.len() as f64
}

#[test]
fn finetune_solves_a_separable_toy() {
    let task = marker_task(240, 6);
    assert_eq!(perceptron_accuracy(&task, 45), 1.0);
    let ckpt = init_model(&tiny_model(), 6).unwrap();
    let cfg = TrainConfig {
        learning_rate: 2e-3,
        ..short(250)
    };
    let out = finetune(&ckpt, &task, HeadSpec::Classification { n_classes: 2 }, &cfg).unwrap();
    assert_eq!(out.metric, MetricKind::Accuracy);
    assert!(out.score >= 0.95, "dev accuracy {}", out.score);
    assert_eq!(out.predictions.len(), task.dev.len());

    let w = out.model.extra.iter().find(|t| t.name == "classifier.weight").unwrap();
    assert_eq!(w.shape, vec![32, 2]);
    let back = checkpoint_from_bytes(&checkpoint_to_bytes(&out.model).unwrap()).unwrap();
    assert_eq!(back.extra, out.model.extra);
}

#[test]
fn finetune_rejects_mismatched_head_and_leaves_input_alone() {
    let task = marker_task(40, 7);
    let ckpt = init_model(&tiny_model(), 7).unwrap();
    let before = ckpt.params.clone();
    assert!(finetune(&ckpt, &task, HeadSpec::Regression, &short(5)).is_err());
    let out = finetune(&ckpt, &task, HeadSpec::Classification { n_classes: 2 }, &short(5)).unwrap();
    assert_eq!(ckpt.params, before);
    assert_ne!(out.model.params, before);
}

#[test]
fn regression_head_tracks_a_count() {
    let mut task = marker_task(200, 8);
    task.labels = LabelSpace::Real;
    task.kind = TaskKind::Regression;
    task.metric = MetricKind::Spearman;
    for e in task.train.iter_mut().chain(task.dev.iter_mut()) {
        e.label = e.text_a.len() as f64 / 10.0;
    }
    let ckpt = init_model(&tiny_model(), 8).unwrap();
    let out = finetune(&ckpt, &task, HeadSpec::Regression, &short(200)).unwrap();
    assert!(out.predictions.iter().all(|p| p.is_finite()));
    assert!(out.score > 0.5, "spearman {}", out.score);
}
