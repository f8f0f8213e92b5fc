//! Acceptance checks, one line per criterion. Runs without the libtest
//! harness so the lines always reach the console.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use pretrain_lab::artifact::file_digest;
use pretrain_lab::cli::ini::Ini;
use pretrain_lab::cli::{parse_config, run_experiments, seed_dir, ArmOutcome, ExperimentConfig, RunOptions};
use pretrain_lab::corpusgen::{generate_artificial, generate_baseline, GrammarConfig};
use pretrain_lab::corpusstats::{distribution_distance, estimate_push_probability, fit_zipf_exponent, is_well_nested, verify_nesting};
use pretrain_lab::eval::{build_report, compute_metric, make_probe_task, swap_adjacent, Corruption, MetricKind, RunResult};
use pretrain_lab::model::{finite_difference_check, init_model, is_layer_tensor, Batch, ModelCheckpoint, ModelConfig, IGNORE_INDEX};
use pretrain_lab::rng;
use pretrain_lab::training::{
    align_embeddings, finetune, mask_tokens, substitute_unused_embeddings, HeadSpec, MaskPolicy, SurgerySpec, TrainConfig,
};
use pretrain_lab::vocab::{
    DistributionSpec, TokenDistribution, VocabSpec, ARTIFICIAL_CONTENT_SIZE, BASELINE_CONTENT_SIZE, NUM_SPECIAL,
};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(n: usize, title: &str, started: Instant, result: Result<Outcome, String>) -> bool {
    let secs = started.elapsed().as_secs_f64();
    let (pass, detail) = match result {
        Ok(o) => (o.pass, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    println!("criterion {n:>2} {} {title}: {detail} [{secs:.1}s]", if pass { "PASS" } else { "FAIL" });
    pass
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn generator_fidelity() -> Result<Outcome, String> {
    let t = Instant::now();
    let big = VocabSpec::new(BASELINE_CONTENT_SIZE).map_err(e2s)?;
    let zipf_big = TokenDistribution::new(DistributionSpec::zipf(1.0), &big).map_err(e2s)?;
    let c = generate_baseline(&zipf_big, 90, 120, 1_000_000, 1).map_err(e2s)?;
    let s = fit_zipf_exponent(&c).map_err(e2s)?;

    // Total variation is measured on a 100-token vocabulary: at 10^6 draws the
    // sampling noise over tens of thousands of ids alone exceeds 0.005.
    let small = VocabSpec::new(100).map_err(e2s)?;
    let zipf = TokenDistribution::new(DistributionSpec::zipf(1.0), &small).map_err(e2s)?;
    let uni = TokenDistribution::new(DistributionSpec::Uniform, &small).map_err(e2s)?;
    let tv_zipf = distribution_distance(&generate_baseline(&zipf, 90, 120, 1_000_000, 2).map_err(e2s)?, &zipf).map_err(e2s)?;
    let tv_uni = distribution_distance(&generate_baseline(&uni, 90, 120, 1_000_000, 3).map_err(e2s)?, &uni).map_err(e2s)?;
    let elapsed = t.elapsed();
    Ok(Outcome {
        pass: (s - 1.0).abs() <= 0.05 && tv_zipf < 0.005 && tv_uni < 0.005 && elapsed < Duration::from_secs(60),
        detail: format!("fitted s = {s:.4}, TV zipf = {tv_zipf:.5}, TV uniform = {tv_uni:.5}"),
    })
}

fn grammar_soundness() -> Result<Outcome, String> {
    let vocab = VocabSpec::new(ARTIFICIAL_CONTENT_SIZE).map_err(e2s)?;
    let dist = TokenDistribution::new(DistributionSpec::zipf(1.0), &vocab).map_err(e2s)?;
    let gc = GrammarConfig::new(0.4, dist, 90, 120);
    // The generator stops on a token budget, so grow it until there are at
    // least 10^4 records and check the whole corpus.
    let mut target = 10_000 * 100;
    let c = loop {
        let c = generate_artificial(&gc, target, 4).map_err(e2s)?;
        if c.records.len() >= 10_000 {
            break c;
        }
        target += 50_000;
    };
    let nested = c.records.iter().filter(|r| verify_nesting(r, true).map(|n| n.is_ok()).unwrap_or(false)).count();
    let p = estimate_push_probability(&c).map_err(e2s)?.p_hat;

    let mut r = rng::seeded(5);
    let mut rejected = 0;
    let mut mutated = 0;
    for rec in &c.records {
        let candidates: Vec<usize> = (0..rec.len() - 1).filter(|&i| rec.tokens[i] != rec.tokens[i + 1]).collect();
        if candidates.is_empty() {
            continue;
        }
        let i = candidates[r.random_range(0..candidates.len())];
        mutated += 1;
        if !is_well_nested(&swap_adjacent(&rec.tokens, i)) {
            rejected += 1;
        }
    }
    let frac = rejected as f64 / mutated as f64;
    Ok(Outcome {
        pass: nested == c.records.len() && (p - 0.4).abs() <= 0.005 && frac >= 0.99,
        detail: format!("{nested}/{} nested, p_hat = {p:.5}, swap rejected {frac:.4} of {mutated}", c.records.len()),
    })
}

fn gradient_exactness() -> Result<Outcome, String> {
    let t = Instant::now();
    let cfg = ModelConfig::desk();
    let ckpt = init_model(&cfg, 21).map_err(e2s)?;
    let vocab = VocabSpec::new(cfg.vocab_total - NUM_SPECIAL).map_err(e2s)?;
    let dist = TokenDistribution::new(DistributionSpec::zipf(1.0), &vocab).map_err(e2s)?;
    let corpus = generate_artificial(&GrammarConfig::new(0.4, dist, 24, 32), 120, 22).map_err(e2s)?;
    let mut r = rng::seeded(23);
    let masked: Vec<_> = corpus
        .records
        .iter()
        .filter_map(|rec| mask_tokens(&rec.tokens, &MaskPolicy::default(), &vocab, &mut r).transpose())
        .collect::<Result<_, _>>()
        .map_err(e2s)?;
    let batch = Batch::from_sequences(&masked.iter().map(|m| m.input.clone()).collect::<Vec<_>>()).map_err(e2s)?;
    let mut targets = vec![IGNORE_INDEX; batch.rows()];
    let mut mask = vec![false; batch.rows()];
    for (b, m) in masked.iter().enumerate() {
        let row = b * batch.seq_len;
        targets[row..row + m.targets.len()].copy_from_slice(&m.targets);
        mask[row..row + m.loss_mask.len()].copy_from_slice(&m.loss_mask);
    }
    let check = finite_difference_check(&ckpt, &batch, &targets, &mask, 1e-4, 300, 24).map_err(e2s)?;
    let elapsed = t.elapsed();
    Ok(Outcome {
        pass: check.max_rel_error < 1e-4 && elapsed < Duration::from_secs(120),
        detail: format!(
            "max relative error {:.3e} over {} parameters ({} params, batch {}x{})",
            check.max_rel_error,
            check.samples.len(),
            ckpt.param_count(),
            batch.batch_size(),
            batch.seq_len
        ),
    })
}

fn final_eval_loss(outcome: &ArmOutcome, seed: u64) -> Result<f64, String> {
    let path = seed_dir(&outcome.dir, seed).join("pretrain.manifest.ini");
    let text = std::fs::read_to_string(&path).map_err(e2s)?;
    let ini = Ini::parse(&text).map_err(e2s)?;
    let v = ini.section("manifest").and_then(|s| s.get("final_eval_loss")).ok_or("no eval loss recorded")?;
    v.value.parse().map_err(e2s)
}

fn mlm_ordering(arms: &[ArmOutcome]) -> Result<Outcome, String> {
    let by = |name: &str| arms.iter().find(|a| a.arm == name).ok_or(format!("arm {name} missing"));
    let art = final_eval_loss(by("artificial")?, 0)?;
    let zipf = final_eval_loss(by("zipf")?, 0)?;
    let random = final_eval_loss(by("random")?, 0)?;
    let ln_v = (ModelConfig::desk_small().vocab_total as f64).ln();
    Ok(Outcome {
        pass: art < zipf && zipf < random && (random - ln_v).abs() < 0.2,
        detail: format!("eval loss artificial {art:.3} < zipf {zipf:.3} < random {random:.3}; ln V = {ln_v:.3}"),
    })
}

fn transfer_direction(arms: &[ArmOutcome], elapsed: Duration) -> Result<Outcome, String> {
    let acc = |name: &str| -> Result<f64, String> {
        let arm = arms.iter().find(|a| a.arm == name).ok_or(format!("arm {name} missing"))?;
        arm.results.iter().find(|r| r.task == "probe").map(|r| r.score).ok_or(format!("{name}: no probe score"))
    };
    let (art, random, scratch) = (acc("artificial")?, acc("random")?, acc("scratch")?);
    let per_seed: Vec<String> = arms
        .iter()
        .map(|a| {
            let s: Vec<String> = a.seeds.iter().map(|s| format!("{:.3}", s.results[0].score)).collect();
            format!("{} [{}]", a.arm, s.join(" "))
        })
        .collect();
    Ok(Outcome {
        pass: art >= random && random >= scratch && art - scratch >= 0.05 && elapsed < Duration::from_secs(30 * 60),
        detail: format!(
            "mean dev accuracy artificial {art:.4} >= random {random:.4} >= scratch {scratch:.4}; per seed {}",
            per_seed.join(", ")
        ),
    })
}

fn distinct_content_rows(ckpt: &ModelCheckpoint) -> usize {
    let d = ckpt.config.hidden_dim;
    let emb = ckpt.tensor("embeddings.token").expect("token embeddings");
    (NUM_SPECIAL..ckpt.config.vocab_total)
        .map(|i| emb[i * d..(i + 1) * d].iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect::<HashSet<_>>()
        .len()
}

fn surgery_correctness() -> Result<Outcome, String> {
    let cfg = ModelConfig {
        n_layers: 1,
        hidden_dim: 16,
        n_heads: 2,
        ff_dim: 32,
        vocab_total: 30_000,
        max_positions: 64,
        dropout_rate: 0.0,
    };
    let ckpt = init_model(&cfg, 31).map_err(e2s)?;
    // A 50-token pre-training language on the large vocabulary.
    let small = VocabSpec::new(50).map_err(e2s)?;
    let corpus = generate_baseline(
        &TokenDistribution::new(DistributionSpec::Uniform, &small).map_err(e2s)?,
        20,
        30,
        20_000,
        32,
    )
    .map_err(e2s)?;
    let used = corpus.used_ids();
    let spec = SurgerySpec::new(used.iter().copied());
    let once = substitute_unused_embeddings(&ckpt, &spec).map_err(e2s)?;
    let twice = substitute_unused_embeddings(&once, &spec).map_err(e2s)?;
    let distinct = distinct_content_rows(&once);
    let idempotent = once.params.iter().zip(&twice.params).all(|(a, b)| a.to_bits() == b.to_bits());

    let d = cfg.hidden_dim;
    let (before, after) = (ckpt.tensor("embeddings.token").unwrap(), once.tensor("embeddings.token").unwrap());
    let keep: Vec<usize> = (0..NUM_SPECIAL).chain(used.iter().map(|&u| u as usize)).collect();
    let rows_kept = keep.iter().all(|&i| before[i * d..(i + 1) * d] == after[i * d..(i + 1) * d]);
    let others_kept = ckpt
        .layout
        .entries()
        .iter()
        .filter(|e| e.name != "embeddings.token")
        .all(|e| ckpt.tensor(&e.name) == once.tensor(&e.name));

    let big = VocabSpec::new(cfg.vocab_total - NUM_SPECIAL).map_err(e2s)?;
    let gc = GrammarConfig::new(0.4, TokenDistribution::new(DistributionSpec::zipf(1.0), &big).map_err(e2s)?, 10, 14);
    let task = make_probe_task(&gc, 16, Corruption::SwapAdjacent, 33).map_err(e2s)?;
    let ft = TrainConfig {
        batch_size: 8,
        total_steps: 3,
        warmup_steps: 1,
        max_seq_len: 64,
        ..TrainConfig::desk()
    };
    let tuned = finetune(&once, &task, HeadSpec::Classification { n_classes: 2 }, &ft);
    Ok(Outcome {
        pass: used.len() == 50 && distinct <= 50 && idempotent && rows_kept && others_kept && tuned.is_ok(),
        detail: format!(
            "{} used ids, {distinct} distinct content rows of {}; idempotent {idempotent}, local {}, fine-tune {}",
            used.len(),
            cfg.vocab_total - NUM_SPECIAL,
            rows_kept && others_kept,
            if tuned.is_ok() { "ran" } else { "failed" }
        ),
    })
}

fn freeze_correctness() -> Result<Outcome, String> {
    let cfg = ModelConfig::desk();
    let ckpt = init_model(&cfg, 41).map_err(e2s)?;
    let vocab = VocabSpec::new(cfg.vocab_total - NUM_SPECIAL).map_err(e2s)?;
    let dist = TokenDistribution::new(DistributionSpec::zipf(1.0), &vocab).map_err(e2s)?;
    let target = generate_baseline(&dist, 24, 32, 40_000, 42).map_err(e2s)?;
    let train = TrainConfig {
        total_steps: 200,
        warmup_steps: 20,
        seed: 43,
        ..TrainConfig::desk()
    };
    let (out, _) = align_embeddings(&target, None, &ckpt, &train, &MaskPolicy::default()).map_err(e2s)?;
    let mut layer_tensors = 0;
    let mut frozen_ok = true;
    for e in ckpt.layout.entries() {
        let same = ckpt.tensor(&e.name).unwrap().iter().zip(out.tensor(&e.name).unwrap()).all(|(a, b)| a.to_bits() == b.to_bits());
        if is_layer_tensor(&e.name) {
            layer_tensors += 1;
            frozen_ok &= same;
        }
    }
    let d = cfg.hidden_dim;
    let (a, b) = (ckpt.tensor("embeddings.token").unwrap(), out.tensor("embeddings.token").unwrap());
    let changed_rows = (0..cfg.vocab_total).filter(|&i| a[i * d..(i + 1) * d] != b[i * d..(i + 1) * d]).count();
    Ok(Outcome {
        pass: frozen_ok && changed_rows > 0,
        detail: format!("{layer_tensors} layer tensors bit-identical: {frozen_ok}; {changed_rows} embedding rows changed"),
    })
}

fn brute_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let below = x.iter().filter(|&&w| w < v).count() as f64;
            let ties = x.iter().filter(|&&w| w == v).count() as f64;
            below + (ties + 1.0) / 2.0
        })
        .collect()
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

fn oracle(kind: MetricKind, p: &[f64], g: &[f64]) -> f64 {
    let count = |pv: f64, gv: f64| p.iter().zip(g).filter(|(a, b)| **a == pv && **b == gv).count() as f64;
    let (tp, fp, fnn, tn) = (count(1.0, 1.0), count(1.0, 0.0), count(0.0, 1.0), count(0.0, 0.0));
    match kind {
        MetricKind::Accuracy => p.iter().zip(g).filter(|(a, b)| a == b).count() as f64 / p.len() as f64,
        MetricKind::F1Binary => {
            if tp == 0.0 {
                0.0
            } else {
                let (prec, rec) = (tp / (tp + fp), tp / (tp + fnn));
                2.0 * prec * rec / (prec + rec)
            }
        }
        MetricKind::Matthews => {
            let den = ((tp + fp) * (tp + fnn) * (tn + fp) * (tn + fnn)).sqrt();
            if den == 0.0 {
                0.0
            } else {
                (tp * tn - fp * fnn) / den
            }
        }
        MetricKind::Spearman => pearson(&brute_ranks(p), &brute_ranks(g)),
    }
}

fn metric_oracles() -> Result<Outcome, String> {
    let mut r = rng::seeded(51);
    let mut worst: f64 = 0.0;
    let kinds = [MetricKind::Accuracy, MetricKind::F1Binary, MetricKind::Spearman, MetricKind::Matthews];
    for case in 0..1000 {
        let kind = kinds[case % 4];
        let n = r.random_range(1..12);
        let (p, g): (Vec<f64>, Vec<f64>) = match kind {
            MetricKind::Spearman => (0..n)
                .map(|_| (r.random_range(0..5) as f64 * 0.5, r.random_range(0..5) as f64 * 0.5))
                .unzip(),
            _ => (0..n).map(|_| (r.random_range(0..2) as f64, r.random_range(0..2) as f64)).unzip(),
        };
        let got = compute_metric(kind, &p, &g).map_err(e2s)?;
        worst = worst.max((got - oracle(kind, &p, &g)).abs());
    }
    let f1 = compute_metric(MetricKind::F1Binary, &[1.0, 1.0, 0.0], &[1.0, 0.0, 0.0]).map_err(e2s)?;
    Ok(Outcome {
        pass: worst <= 1e-10 && f1 == 2.0 / 3.0,
        detail: format!("max deviation from brute force {worst:.2e} over 1000 cases; worked F1 = {f1}"),
    })
}

fn reproducibility(dir: &Path) -> Result<Outcome, String> {
    let text = "[experiment]\narm = repro\nseed = 61\n\
        [model]\npreset = desk_small\nn_layers = 1\n\
        [generate]\nkind = artificial\ntarget_tokens = 8000\n\
        [pretrain]\ntotal_steps = 30\nwarmup_steps = 3\n\
        [align]\nkind = baseline\ndistribution = uniform\ntarget_tokens = 4000\ntotal_steps = 10\nwarmup_steps = 1\n\
        [surgery]\n\
        [finetune.probe]\nn_per_class = 40\ntotal_steps = 20\nwarmup_steps = 2\n";
    let cfg_path = dir.join("repro.ini");
    std::fs::write(&cfg_path, text).map_err(e2s)?;
    let cfg = parse_config(&cfg_path).map_err(e2s)?;
    let files = ["corpus.txt", "align_corpus.txt", "pretrain.ckpt", "align.ckpt", "surgery.ckpt", "finetune_probe.ckpt"];
    let mut digests: Vec<Vec<String>> = Vec::new();
    for run in ["a", "b"] {
        let out = dir.join(run);
        run_experiments(&[(cfg.clone(), out.clone())], &out, &RunOptions::default(), 1).map_err(e2s)?;
        digests.push(files.iter().map(|f| file_digest(&seed_dir(&out, 61).join(f))).collect::<Result<_, _>>().map_err(e2s)?);
    }
    let same = digests[0] == digests[1];
    Ok(Outcome {
        pass: same,
        detail: format!("{} artifacts compared across two runs, identical: {same}", files.len()),
    })
}

fn report_shape() -> Result<Outcome, String> {
    let mut runs = vec![
        RunResult::new("synthetic", "MNLI-m", MetricKind::Accuracy, 0.70),
        RunResult::new("synthetic", "MNLI-mm", MetricKind::Accuracy, 0.80),
    ];
    let others = [
        ("STS-B", MetricKind::Spearman, 0.5),
        ("QNLI", MetricKind::Accuracy, 0.6),
        ("QQP", MetricKind::F1Binary, 0.7),
        ("CoLA", MetricKind::Matthews, 0.1),
        ("SST-2", MetricKind::Accuracy, 0.8),
        ("MRPC", MetricKind::F1Binary, 0.8),
        ("RTE", MetricKind::Accuracy, 0.55),
    ];
    for (task, metric, score) in others {
        runs.push(RunResult::new("synthetic", task, metric, score));
    }
    let table = build_report(&runs).map_err(e2s)?;
    let header = table.header().join(" ");
    let row = &table.rows[0];
    let mnli = row.cells[5].map(|c| c.value).unwrap_or(f64::NAN);
    let expected_avg = (0.5 + 0.6 + 0.7 + 0.1 + 0.8 + 0.75 + 0.8 + 0.55) / 8.0;
    let avg = row.average.unwrap_or(f64::NAN);
    Ok(Outcome {
        pass: header == "arm STS-B QNLI QQP CoLA SST-2 MNLI MRPC RTE Avg"
            && (mnli - 0.75).abs() < 1e-12
            && (avg - expected_avg).abs() < 1e-12,
        detail: format!("header \"{header}\", MNLI = {mnli:.4}, Avg = {avg:.4}"),
    })
}

#[cfg(feature = "parallel")]
fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("thread pool").install(f)
}

#[cfg(not(feature = "parallel"))]
fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    f()
}

fn desk_scenario(dir: &Path) -> Result<(Vec<ArmOutcome>, Duration), String> {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk");
    let t = Instant::now();
    let arms: Vec<(ExperimentConfig, PathBuf)> = ["artificial", "zipf", "random", "scratch"]
        .iter()
        .map(|name| {
            let cfg = parse_config(&root.join(format!("{name}.ini"))).map_err(e2s)?;
            let out = dir.join(name);
            Ok((cfg, out))
        })
        .collect::<Result<_, String>>()?;
    let (outcomes, table) = run_experiments(&arms, dir, &RunOptions::default(), 1).map_err(e2s)?;
    if let Some(table) = table {
        print!("{}", table.to_text());
    }
    Ok((outcomes, t.elapsed()))
}

fn main() {
    // `cargo test -- <filter>` style arguments are accepted and ignored.
    let tmp = tempfile::tempdir().expect("temporary directory");
    let mut all = true;

    let t = Instant::now();
    all &= report(1, "generator fidelity", t, generator_fidelity());
    let t = Instant::now();
    all &= report(2, "grammar soundness", t, grammar_soundness());
    let t = Instant::now();
    all &= report(3, "gradient exactness", t, gradient_exactness());

    let t = Instant::now();
    let scenario = desk_scenario(tmp.path());
    let (r4, r5) = match &scenario {
        Ok((arms, elapsed)) => (mlm_ordering(arms), transfer_direction(arms, *elapsed)),
        Err(e) => (Err(e.clone()), Err(e.clone())),
    };
    all &= report(4, "MLM learnability ordering", t, r4);
    all &= report(5, "transfer direction", t, r5);

    let t = Instant::now();
    all &= report(6, "surgery correctness", t, surgery_correctness());
    let t = Instant::now();
    all &= report(7, "freeze correctness", t, freeze_correctness());
    let t = Instant::now();
    all &= report(8, "metric oracles", t, metric_oracles());
    let t = Instant::now();
    all &= report(9, "reproducibility", t, single_threaded(|| reproducibility(tmp.path())));
    let t = Instant::now();
    all &= report(10, "report shape", t, report_shape());

    if !all {
        std::process::exit(1);
    }
}
