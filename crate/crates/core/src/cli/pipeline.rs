//! Stage execution with per-stage manifests.
//!
//! Every stage writes `<stage>.manifest.ini`: the resolved inputs that
//! determine its outputs (seeds, hyperparameters, input digests) followed by
//! a `[manifest]` section listing output digests. A stage whose manifest
//! still matches its inputs and outputs is reused instead of rerun.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::config::{CorpusKind, ExperimentConfig, FinetuneSpec, TaskSource, UsedIds};
use super::ini::{Ini, IniWriter};
use crate::artifact::{file_digest, write_atomic};
use crate::corpusgen::{corpus_to_string, read_corpus_any, AnnotatedCorpus};
use crate::corpusstats::{distribution_distance, estimate_push_probability, fit_zipf_exponent, length_stats};
use crate::error::{Error, Result};
use crate::eval::{build_report, MetricKind, ReportTable, RunResult};
use crate::model::{init_model, read_checkpoint, write_checkpoint};
use crate::rng::derive_seed;
use crate::training::{
    align_embeddings, finetune, pretrain, substitute_unused_embeddings, HeadSpec, SurgerySpec, TrainConfig,
};
use crate::vocab::TokenDistribution;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Generate,
    Pretrain,
    Align,
    Surgery,
    Finetune,
    Report,
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    /// Last stage to execute.
    pub stop_after: Stage,
    /// Ignore existing manifests and recompute everything.
    pub fresh: bool,
    pub verbose: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            stop_after: Stage::Report,
            fresh: false,
            verbose: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub dir: PathBuf,
    pub results: Vec<RunResult>,
}

#[derive(Clone, Debug)]
pub struct ArmOutcome {
    pub arm: String,
    pub dir: PathBuf,
    pub seeds: Vec<SeedOutcome>,
    /// Per-task means over seeds.
    pub results: Vec<RunResult>,
}

pub fn seed_dir(arm_dir: &Path, seed: u64) -> PathBuf {
    arm_dir.join(format!("seed_{seed}"))
}

fn manifest_path(dir: &Path, stage: &str) -> PathBuf {
    dir.join(format!("{stage}.manifest.ini"))
}

/// Identity text that opens every manifest.
fn header(cfg: &ExperimentConfig, seed: u64) -> IniWriter {
    let mut w = IniWriter::default();
    w.section("experiment").kv("arm", &cfg.arm).kv("seed", seed);
    w
}

fn write_train(w: &mut IniWriter, t: &TrainConfig) {
    w.kv("batch_size", t.batch_size)
        .kv("learning_rate", t.learning_rate)
        .kv("total_steps", t.total_steps)
        .kv("warmup_steps", t.warmup_steps)
        .kv("max_seq_len", t.max_seq_len)
        .kv("beta1", t.beta1)
        .kv("beta2", t.beta2)
        .kv("adam_eps", t.adam_eps)
        .kv("weight_decay", t.weight_decay)
        .kv("log_every", t.log_every)
        .kv("eval_every", t.eval_every)
        .kv("seed", t.seed);
}

fn input_comment(path: &Path) -> Result<String> {
    let name = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
    Ok(format!("# input {name} sha256 = {}\n", file_digest(path)?))
}

/// Recorded `[manifest]` values when the stage is up to date.
fn current(dir: &Path, stage: &str, identity: &str, fresh: bool) -> Result<Option<BTreeMap<String, String>>> {
    let path = manifest_path(dir, stage);
    if fresh || !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let Some(rest) = text.strip_prefix(identity) else {
        return Ok(None);
    };
    let Ok(ini) = Ini::parse(rest) else {
        return Ok(None);
    };
    let Some(m) = ini.section("manifest") else {
        return Ok(None);
    };
    let mut values = BTreeMap::new();
    for e in &m.entries {
        if let Some(file) = e.key.strip_prefix("output.") {
            let out = dir.join(file);
            if !out.exists() || file_digest(&out)? != e.value {
                return Ok(None);
            }
        }
        values.insert(e.key.clone(), e.value.clone());
    }
    Ok(Some(values))
}

fn write_manifest(dir: &Path, stage: &str, identity: &str, extra: &[(&str, String)], outputs: &[&str]) -> Result<()> {
    let mut w = IniWriter::default();
    w.section("manifest").kv("stage", stage).kv("version", VERSION);
    for (k, v) in extra {
        w.kv(k, v);
    }
    for name in outputs {
        w.kv(&format!("output.{name}"), file_digest(&dir.join(name))?);
    }
    let text = format!("{identity}\n{}", w.finish());
    write_atomic(&manifest_path(dir, stage), text.as_bytes())
}

/// Key-value report of a corpus; `target` adds the distance to the law it
/// was drawn from.
pub fn corpus_report_text(corpus: &AnnotatedCorpus, target: Option<&TokenDistribution>) -> Result<String> {
    let mut out = length_stats(corpus).to_key_value();
    if let Ok(s) = fit_zipf_exponent(corpus) {
        let _ = writeln!(out, "zipf_exponent={s:.4}");
    }
    if let Some(d) = target {
        let _ = writeln!(out, "tv_distance={:.6}", distribution_distance(corpus, d)?);
    }
    if corpus.is_labeled() {
        let p = estimate_push_probability(corpus)?;
        let _ = writeln!(out, "push_probability={:.6}", p.p_hat);
        let _ = writeln!(out, "raw_push_fraction={:.6}", p.raw_push_fraction);
        let _ = writeln!(out, "forced_pushes={}", p.forced_pushes);
        let _ = writeln!(out, "flush_pops={}", p.flush_pops);
    }
    Ok(out)
}

fn split(corpus: AnnotatedCorpus, fraction: f64) -> (AnnotatedCorpus, Option<AnnotatedCorpus>) {
    if fraction > 0.0 {
        let (train, eval) = corpus.split_tail(fraction);
        (train, Some(eval))
    } else {
        (corpus, None)
    }
}

struct SeedRun<'a> {
    cfg: &'a ExperimentConfig,
    seed: u64,
    dir: PathBuf,
    opts: &'a RunOptions,
}

impl SeedRun<'_> {
    fn note(&self, msg: impl AsRef<str>) {
        if self.opts.verbose {
            eprintln!("[{} seed {}] {}", self.cfg.arm, self.seed, msg.as_ref());
        }
    }

    fn stage_seed(&self, explicit: bool, configured: u64, tag: &str) -> u64 {
        if explicit {
            configured
        } else {
            derive_seed(self.seed, tag)
        }
    }

    fn generate(&self) -> Result<()> {
        let cfg = self.cfg;
        if cfg.generate.is_none() && cfg.align.is_none() {
            return Ok(());
        }
        let mut w = header(cfg, self.seed);
        w.section("model");
        for (k, v) in cfg.model.to_key_values() {
            w.kv(k, v);
        }
        let main_seed = cfg.generate.as_ref().map(|g| g.seed.unwrap_or_else(|| derive_seed(self.seed, "generate")));
        if let (Some(g), Some(s)) = (&cfg.generate, main_seed) {
            w.section("generate");
            g.write(&mut w, Some(s));
        }
        if let Some(a) = &cfg.align {
            w.section("align");
            a.corpus.write(&mut w, None);
        }
        let mut identity = w.finish();
        for spec in cfg.generate.iter().chain(cfg.align.as_ref().map(|a| &a.corpus)) {
            if let (CorpusKind::Ingest, Some(p)) = (spec.kind, &spec.path) {
                identity.push_str(&input_comment(p)?);
            }
        }
        if current(&self.dir, "generate", &identity, self.opts.fresh)?.is_some() {
            self.note("generate: up to date");
            return Ok(());
        }
        self.note("generate");
        let mut outputs = Vec::new();
        if let (Some(g), Some(s)) = (&cfg.generate, main_seed) {
            let corpus = g.build(s)?;
            let target = match g.kind {
                CorpusKind::Ingest => None,
                _ => Some(g.token_distribution()?),
            };
            write_atomic(&self.dir.join("corpus.txt"), corpus_to_string(&corpus).as_bytes())?;
            let report = corpus_report_text(&corpus, target.as_ref())?;
            write_atomic(&self.dir.join("corpus_report.txt"), report.as_bytes())?;
            outputs.extend(["corpus.txt", "corpus_report.txt"]);
        }
        if let Some(a) = &cfg.align {
            let corpus = a.corpus.build(derive_seed(self.seed, "align_corpus"))?;
            write_atomic(&self.dir.join("align_corpus.txt"), corpus_to_string(&corpus).as_bytes())?;
            outputs.push("align_corpus.txt");
        }
        write_manifest(&self.dir, "generate", &identity, &[], &outputs)
    }

    fn init(&self) -> Result<PathBuf> {
        let cfg = self.cfg;
        let init_seed = cfg.init_seed.unwrap_or_else(|| derive_seed(self.seed, "init"));
        let mut w = header(cfg, self.seed);
        w.section("model");
        for (k, v) in cfg.model.to_key_values() {
            w.kv(k, v);
        }
        w.kv("seed", init_seed);
        let identity = w.finish();
        let path = self.dir.join("init.ckpt");
        if current(&self.dir, "init", &identity, self.opts.fresh)?.is_none() {
            self.note("init");
            write_checkpoint(&init_model(&cfg.model, init_seed)?, &path)?;
            write_manifest(&self.dir, "init", &identity, &[], &["init.ckpt"])?;
        }
        Ok(path)
    }

    /// Runs one masked-LM stage (`pretrain` or `align`) and returns the
    /// checkpoint path.
    fn mlm_stage(&self, stage: &'static str, corpus_file: &str, fraction: f64, base: &Path) -> Result<PathBuf> {
        let cfg = self.cfg;
        let st = match stage {
            "pretrain" => cfg.pretrain.as_ref().expect("checked by caller"),
            _ => &cfg.align.as_ref().expect("checked by caller").stage,
        };
        let mut train = st.train.clone();
        train.seed = self.stage_seed(st.explicit_seed, train.seed, stage);
        let corpus_path = self.dir.join(corpus_file);
        let mut w = header(cfg, self.seed);
        w.section(stage);
        write_train(&mut w, &train);
        if stage == "pretrain" {
            w.kv("mask_fraction", cfg.mask.mask_fraction);
        } else {
            w.kv("eval_fraction", fraction);
        }
        let identity = format!("{}{}{}", w.finish(), input_comment(&corpus_path)?, input_comment(base)?);
        let ckpt_name = format!("{stage}.ckpt");
        let out = self.dir.join(&ckpt_name);
        if current(&self.dir, stage, &identity, self.opts.fresh)?.is_some() {
            self.note(format!("{stage}: up to date"));
            return Ok(out);
        }
        self.note(format!("{stage}: {} steps", train.total_steps));
        let corpus = read_corpus_any(&corpus_path)?;
        let (train_set, eval_set) = split(corpus, fraction);
        let start = read_checkpoint(base)?;
        let (model, log) = match stage {
            "pretrain" => pretrain(&train_set, eval_set.as_ref(), &start, &train, &cfg.mask)?,
            _ => align_embeddings(&train_set, eval_set.as_ref(), &start, &train, &cfg.mask)?,
        };
        write_checkpoint(&model, &out)?;
        let loss = format!("{stage}_loss.csv");
        let summary = format!("{stage}_summary.txt");
        write_atomic(&self.dir.join(&loss), log.to_csv().as_bytes())?;
        write_atomic(&self.dir.join(&summary), log.summary(&cfg.arm).as_bytes())?;
        let mut extra = Vec::new();
        if let Some(v) = log.final_train_loss {
            extra.push(("final_train_loss", v.to_string()));
        }
        if let Some(v) = log.final_eval_loss {
            extra.push(("final_eval_loss", v.to_string()));
        }
        write_manifest(&self.dir, stage, &identity, &extra, &[&ckpt_name, &loss, &summary])?;
        Ok(out)
    }

    fn surgery(&self, base: &Path) -> Result<PathBuf> {
        let cfg = self.cfg;
        let sc = cfg.surgery.as_ref().expect("checked by caller");
        let mut w = header(cfg, self.seed);
        w.section("surgery");
        let used_text = match &sc.used {
            UsedIds::FromCorpus => "corpus".to_string(),
            UsedIds::Explicit(ids) => ids.iter().map(u32::to_string).collect::<Vec<_>>().join(","),
        };
        w.kv("used_ids", &used_text).kv("rule", "cyclic");
        let mut identity = w.finish();
        if sc.used == UsedIds::FromCorpus {
            identity.push_str(&input_comment(&self.dir.join("corpus.txt"))?);
        }
        identity.push_str(&input_comment(base)?);
        let out = self.dir.join("surgery.ckpt");
        if current(&self.dir, "surgery", &identity, self.opts.fresh)?.is_some() {
            self.note("surgery: up to date");
            return Ok(out);
        }
        self.note("surgery");
        let used = match &sc.used {
            UsedIds::FromCorpus => read_corpus_any(&self.dir.join("corpus.txt"))?.used_ids(),
            UsedIds::Explicit(ids) => ids.clone(),
        };
        let spec = SurgerySpec {
            used_ids: used.iter().copied().collect(),
            rule: sc.rule,
        };
        let model = substitute_unused_embeddings(&read_checkpoint(base)?, &spec)?;
        write_checkpoint(&model, &out)?;
        write_manifest(&self.dir, "surgery", &identity, &[("used_count", spec.used_ids.len().to_string())], &["surgery.ckpt"])?;
        Ok(out)
    }

    fn finetune_task(&self, ft: &FinetuneSpec, base: &Path) -> Result<RunResult> {
        let cfg = self.cfg;
        let stage = format!("finetune.{}", ft.task);
        let mut train = ft.stage.train.clone();
        train.seed = self.stage_seed(ft.stage.explicit_seed, train.seed, &format!("finetune:{}", ft.task));
        let task_seed = derive_seed(self.seed, &format!("task:{}", ft.task));
        let mut w = header(cfg, self.seed);
        w.section(&stage);
        let mut inputs = String::new();
        match &ft.source {
            TaskSource::Probe {
                grammar,
                n_per_class,
                corruption,
            } => {
                grammar.write(&mut w, None);
                w.kv("n_per_class", n_per_class).kv("corruption", corruption.as_str());
                inputs.push_str(&format!("# task seed = {task_seed}\n"));
            }
            TaskSource::Tsv { schema, train, dev } => {
                w.kv("train", train.display()).kv("dev", dev.display()).kv("metric", schema.metric.as_str());
                inputs.push_str(&input_comment(train)?);
                inputs.push_str(&input_comment(dev)?);
            }
        }
        write_train(&mut w, &train);
        inputs.push_str(&input_comment(base)?);
        let identity = format!("{}{inputs}", w.finish());
        if let Some(m) = current(&self.dir, &stage, &identity, self.opts.fresh)? {
            let metric = m.get("metric").and_then(|v| v.parse::<MetricKind>().ok());
            let score = m.get("score").and_then(|v| v.parse::<f64>().ok());
            if let (Some(metric), Some(score)) = (metric, score) {
                self.note(format!("{stage}: up to date"));
                return Ok(RunResult::new(&cfg.arm, &ft.task, metric, score));
            }
        }
        self.note(format!("{stage}: {} steps", train.total_steps));
        let content = cfg.model.vocab_total - crate::vocab::NUM_SPECIAL;
        let task = ft.dataset(content, task_seed)?;
        let outcome = finetune(&read_checkpoint(base)?, &task, HeadSpec::for_task(&task), &train)?;
        let ckpt = format!("finetune_{}.ckpt", ft.task);
        let loss = format!("finetune_{}_loss.csv", ft.task);
        let preds = format!("finetune_{}_predictions.txt", ft.task);
        write_checkpoint(&outcome.model, &self.dir.join(&ckpt))?;
        write_atomic(&self.dir.join(&loss), outcome.log.to_csv().as_bytes())?;
        let pred_text: String = outcome.predictions.iter().map(|p| format!("{p}\n")).collect();
        write_atomic(&self.dir.join(&preds), pred_text.as_bytes())?;
        write_manifest(
            &self.dir,
            &stage,
            &identity,
            &[("metric", outcome.metric.as_str().to_string()), ("score", outcome.score.to_string())],
            &[&ckpt, &loss, &preds],
        )?;
        Ok(RunResult::new(&cfg.arm, &ft.task, outcome.metric, outcome.score))
    }

    fn run(&self) -> Result<Vec<RunResult>> {
        let cfg = self.cfg;
        let stop = self.opts.stop_after;
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        self.generate().map_err(|e| e.in_stage("generate"))?;
        if stop == Stage::Generate {
            return Ok(Vec::new());
        }
        let mut ckpt = self.init().map_err(|e| e.in_stage("init"))?;
        if let Some(g) = &cfg.generate {
            if cfg.pretrain.is_some() {
                ckpt = self
                    .mlm_stage("pretrain", "corpus.txt", g.eval_fraction, &ckpt)
                    .map_err(|e| e.in_stage("pretrain"))?;
            }
        }
        if stop == Stage::Pretrain {
            return Ok(Vec::new());
        }
        if let Some(a) = &cfg.align {
            ckpt = self
                .mlm_stage("align", "align_corpus.txt", a.corpus.eval_fraction, &ckpt)
                .map_err(|e| e.in_stage("align"))?;
        }
        if stop == Stage::Align {
            return Ok(Vec::new());
        }
        if cfg.surgery.is_some() {
            ckpt = self.surgery(&ckpt).map_err(|e| e.in_stage("surgery"))?;
        }
        if stop == Stage::Surgery {
            return Ok(Vec::new());
        }
        let mut results = Vec::new();
        for ft in &cfg.finetune {
            results.push(self.finetune_task(ft, &ckpt).map_err(|e| e.in_stage("finetune"))?);
        }
        write_atomic(&self.dir.join("metrics.csv"), metrics_csv(&results, Some(self.seed)).as_bytes())?;
        Ok(results)
    }
}

fn metrics_csv(results: &[RunResult], seed: Option<u64>) -> String {
    let mut out = String::from("arm,seed,task,metric,score\n");
    for r in results {
        let seed = seed.map_or_else(|| "mean".to_string(), |s| s.to_string());
        let _ = writeln!(out, "{},{seed},{},{},{}", r.arm, r.task, r.metric.as_str(), r.score);
    }
    out
}

/// Per-task means, in first-seen task order.
pub fn mean_over_seeds(results: &[RunResult]) -> Result<Vec<RunResult>> {
    let mut groups: Vec<(RunResult, usize)> = Vec::new();
    for r in results {
        match groups.iter_mut().find(|(g, _)| g.arm == r.arm && g.task == r.task) {
            Some((g, n)) => {
                if g.metric != r.metric {
                    return Err(Error::Data(format!("{}/{}: metric changes between seeds", r.arm, r.task)));
                }
                g.score += r.score;
                *n += 1;
            }
            None => groups.push((r.clone(), 1)),
        }
    }
    Ok(groups
        .into_iter()
        .map(|(mut g, n)| {
            g.score /= n as f64;
            g
        })
        .collect())
}

/// Runs every seed of one arm under `arm_dir`.
pub fn run_arm(cfg: &ExperimentConfig, arm_dir: &Path, opts: &RunOptions) -> Result<ArmOutcome> {
    let mut seeds = Vec::new();
    let mut all = Vec::new();
    for &seed in &cfg.seeds {
        let run = SeedRun {
            cfg,
            seed,
            dir: seed_dir(arm_dir, seed),
            opts,
        };
        let results = run.run()?;
        all.extend(results.iter().cloned());
        seeds.push(SeedOutcome {
            seed,
            dir: run.dir,
            results,
        });
    }
    let results = mean_over_seeds(&all)?;
    if opts.stop_after >= Stage::Finetune {
        let mut text = metrics_csv(&[], None);
        for s in &seeds {
            text.push_str(metrics_csv(&s.results, Some(s.seed)).split_once('\n').map_or("", |(_, rows)| rows));
        }
        write_atomic(&arm_dir.join("metrics.csv"), text.as_bytes())?;
    }
    Ok(ArmOutcome {
        arm: cfg.arm.clone(),
        dir: arm_dir.to_path_buf(),
        seeds,
        results,
    })
}

/// Reads an arm's `metrics.csv` back into seed means.
pub fn read_metrics(path: &Path) -> Result<Vec<RunResult>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Data(format!("{}:{}: malformed metrics row", path.display(), i + 1));
        if f.len() != 5 {
            return Err(bad());
        }
        let metric = f[3].parse::<MetricKind>().map_err(|_| bad())?;
        let score = f[4].parse::<f64>().map_err(|_| bad())?;
        rows.push(RunResult::new(f[0], f[2], metric, score));
    }
    mean_over_seeds(&rows)
}

pub fn write_report(table: &ReportTable, dir: &Path) -> Result<()> {
    write_atomic(&dir.join("report.csv"), table.to_csv().as_bytes())?;
    write_atomic(&dir.join("report.txt"), table.to_text().as_bytes())
}

/// Runs all arms (up to `parallel` at once) and, when the options reach the
/// report stage, writes the combined table to `report_dir`.
pub fn run_experiments(
    arms: &[(ExperimentConfig, PathBuf)],
    report_dir: &Path,
    opts: &RunOptions,
    parallel: usize,
) -> Result<(Vec<ArmOutcome>, Option<ReportTable>)> {
    for (i, (a, _)) in arms.iter().enumerate() {
        if arms[..i].iter().any(|(b, _)| b.arm == a.arm) {
            return Err(Error::config(0, format!("arm {:?} appears twice", a.arm)));
        }
    }
    let workers = parallel.clamp(1, arms.len().max(1));
    let outcomes: Vec<Result<ArmOutcome>> = if workers == 1 {
        arms.iter().map(|(cfg, dir)| run_arm(cfg, dir, opts)).collect()
    } else {
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<Result<ArmOutcome>>>> = Mutex::new((0..arms.len()).map(|_| None).collect());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some((cfg, dir)) = arms.get(i) else { break };
                    let r = run_arm(cfg, dir, opts);
                    slots.lock().expect("no worker panics while holding the lock")[i] = Some(r);
                });
            }
        });
        slots
            .into_inner()
            .expect("workers finished")
            .into_iter()
            .map(|r| r.expect("every arm ran"))
            .collect()
    };
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    if opts.stop_after < Stage::Report {
        return Ok((outcomes, None));
    }
    let results: Vec<RunResult> = outcomes.iter().flat_map(|o| o.results.iter().cloned()).collect();
    let table = build_report(&results).map_err(|e| e.in_stage("report"))?;
    write_report(&table, report_dir)?;
    Ok((outcomes, Some(table)))
}
