//! Experiment configuration: parsing, presets, and validation.

use std::path::{Path, PathBuf};

use super::ini::{Entry, Ini, IniWriter, Section};
use crate::corpusgen::{generate_artificial, generate_baseline, ingest_text, AnnotatedCorpus, GrammarConfig};
use crate::error::{Error, Result};
use crate::eval::{make_probe_task, Corruption, MetricKind, TaskDataset, TaskSchema};
use crate::model::ModelConfig;
use crate::training::{MaskPolicy, SurgeryRule, TrainConfig, Trainable};
use crate::vocab::{make_distribution, parse_frequency_table, DistributionSpec, TokenDistribution, VocabSpec, NUM_SPECIAL};

pub const PRETRAIN_PRESETS: &str = include_str!("../../presets/pretrain.ini");
pub const FINETUNE_TABLE: &str = include_str!("../../presets/finetune_table5.tsv");

fn parse_value<T: std::str::FromStr>(e: &Entry) -> Result<T> {
    e.value
        .parse()
        .map_err(|_| Error::config(e.line, format!("{}: cannot parse {:?}", e.key, e.value)))
}

fn opt<T: std::str::FromStr>(s: &Section, key: &str) -> Result<Option<T>> {
    s.get(key).map(parse_value).transpose()
}

fn resolve(base: &Path, e: &Entry) -> Result<PathBuf> {
    let p = base.join(&e.value);
    if !p.exists() {
        return Err(Error::config(e.line, format!("{}: path {} does not exist", e.key, p.display())));
    }
    Ok(p)
}

/// Token law as written in a config, e.g. `zipf:1.0` or `binned:50:zipf:1`.
#[derive(Clone, Debug, PartialEq)]
pub enum DistText {
    Uniform,
    Zipf(f64),
    Binned(usize, Box<DistText>),
    Empirical(PathBuf),
}

impl DistText {
    pub fn parse(s: &str, base: &Path) -> std::result::Result<Self, String> {
        let (head, rest) = s.split_once(':').map_or((s, None), |(h, r)| (h, Some(r)));
        match (head.trim(), rest) {
            ("uniform", None) => Ok(DistText::Uniform),
            ("zipf", None) => Ok(DistText::Zipf(1.0)),
            ("zipf", Some(x)) => x.trim().parse().map(DistText::Zipf).map_err(|_| format!("bad exponent {x:?}")),
            ("binned", Some(r)) => {
                let (n, inner) = r.split_once(':').ok_or("binned needs <bin_size>:<base>")?;
                let n = n.trim().parse().map_err(|_| format!("bad bin size {n:?}"))?;
                Ok(DistText::Binned(n, Box::new(DistText::parse(inner, base)?)))
            }
            ("empirical", Some(p)) => Ok(DistText::Empirical(base.join(p.trim()))),
            _ => Err(format!("unknown distribution {s:?}")),
        }
    }

    pub fn to_spec(&self) -> Result<DistributionSpec> {
        Ok(match self {
            DistText::Uniform => DistributionSpec::Uniform,
            DistText::Zipf(s) => DistributionSpec::zipf(*s),
            DistText::Binned(n, b) => DistributionSpec::binned(b.to_spec()?, *n),
            DistText::Empirical(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                DistributionSpec::empirical_from_table(&parse_frequency_table(&text)?)
            }
        })
    }
}

impl std::fmt::Display for DistText {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DistText::Uniform => write!(f, "uniform"),
            DistText::Zipf(s) => write!(f, "zipf:{s}"),
            DistText::Binned(n, b) => write!(f, "binned:{n}:{b}"),
            DistText::Empirical(p) => write!(f, "empirical:{}", p.display()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusKind {
    Artificial,
    Baseline,
    Ingest,
}

/// How to obtain a corpus: a generator or a text file to ingest.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub kind: CorpusKind,
    pub distribution: DistText,
    pub push_probability: f64,
    pub content_size: usize,
    pub length_min: usize,
    pub length_max: usize,
    pub target_tokens: u64,
    pub eval_fraction: f64,
    pub path: Option<PathBuf>,
    pub seed: Option<u64>,
}

pub const CORPUS_KEYS: &[&str] = &[
    "kind",
    "distribution",
    "push_probability",
    "content_size",
    "length_min",
    "length_max",
    "target_tokens",
    "eval_fraction",
    "path",
    "seed",
];

impl CorpusSpec {
    pub fn from_section(s: &Section, base: &Path, default_content: usize) -> Result<Self> {
        let kind_entry = s
            .get("kind")
            .ok_or_else(|| Error::config(s.line, format!("[{}] needs kind = artificial | baseline | ingest", s.name)))?;
        let kind = match kind_entry.value.as_str() {
            "artificial" => CorpusKind::Artificial,
            "baseline" => CorpusKind::Baseline,
            "ingest" => CorpusKind::Ingest,
            other => return Err(Error::config(kind_entry.line, format!("unknown corpus kind {other:?}"))),
        };
        let distribution = match s.get("distribution") {
            Some(e) => DistText::parse(&e.value, base).map_err(|m| Error::config(e.line, m))?,
            None => DistText::Zipf(1.0),
        };
        if let DistText::Empirical(p) = &distribution {
            if !p.exists() {
                let line = s.get("distribution").map_or(s.line, |e| e.line);
                return Err(Error::config(line, format!("frequency table {} does not exist", p.display())));
            }
        }
        let path = s.get("path").map(|e| resolve(base, e)).transpose()?;
        if kind == CorpusKind::Ingest && path.is_none() {
            return Err(Error::config(s.line, "kind = ingest needs path"));
        }
        let spec = Self {
            kind,
            distribution,
            push_probability: opt(s, "push_probability")?.unwrap_or(0.4),
            content_size: opt(s, "content_size")?.unwrap_or(default_content),
            length_min: opt(s, "length_min")?.unwrap_or(24),
            length_max: opt(s, "length_max")?.unwrap_or(32),
            target_tokens: opt(s, "target_tokens")?.unwrap_or(100_000),
            eval_fraction: opt(s, "eval_fraction")?.unwrap_or(0.1),
            path,
            seed: opt(s, "seed")?,
        };
        if !(0.0..1.0).contains(&spec.eval_fraction) {
            return Err(Error::config(s.line, "eval_fraction must lie in [0, 1)"));
        }
        Ok(spec)
    }

    pub fn vocab(&self) -> Result<VocabSpec> {
        VocabSpec::new(self.content_size)
    }

    pub fn token_distribution(&self) -> Result<TokenDistribution> {
        make_distribution(self.distribution.to_spec()?, &self.vocab()?)
    }

    pub fn grammar(&self) -> Result<GrammarConfig> {
        let gc = GrammarConfig::new(self.push_probability, self.token_distribution()?, self.length_min, self.length_max);
        gc.validate()?;
        Ok(gc)
    }

    pub fn build(&self, seed: u64) -> Result<AnnotatedCorpus> {
        match self.kind {
            CorpusKind::Artificial => generate_artificial(&self.grammar()?, self.target_tokens, seed),
            CorpusKind::Baseline => generate_baseline(
                &self.token_distribution()?,
                self.length_min,
                self.length_max,
                self.target_tokens,
                seed,
            ),
            CorpusKind::Ingest => {
                let p = self.path.as_ref().expect("validated");
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                ingest_text(&text, &self.vocab()?)
            }
        }
    }

    /// Writes the keys that regenerate this corpus, pinning `seed` if given.
    pub fn write(&self, w: &mut IniWriter, seed: Option<u64>) {
        let kind = match self.kind {
            CorpusKind::Artificial => "artificial",
            CorpusKind::Baseline => "baseline",
            CorpusKind::Ingest => "ingest",
        };
        w.kv("kind", kind)
            .kv("distribution", &self.distribution)
            .kv("push_probability", self.push_probability)
            .kv("content_size", self.content_size)
            .kv("length_min", self.length_min)
            .kv("length_max", self.length_max)
            .kv("target_tokens", self.target_tokens)
            .kv("eval_fraction", self.eval_fraction);
        if let Some(p) = &self.path {
            w.kv("path", p.display());
        }
        if let Some(seed) = seed {
            w.kv("seed", seed);
        }
    }
}

const TRAIN_KEYS: &[&str] = &[
    "preset",
    "batch_size",
    "learning_rate",
    "total_steps",
    "warmup_steps",
    "max_seq_len",
    "beta1",
    "beta2",
    "adam_eps",
    "weight_decay",
    "log_every",
    "eval_every",
    "seed",
    "mask_fraction",
];

/// Named pre-training preset from the shipped table.
pub fn pretrain_preset(name: &str) -> Result<TrainConfig> {
    let ini = Ini::parse(PRETRAIN_PRESETS)?;
    let s = ini
        .section(name)
        .ok_or_else(|| Error::invalid(format!("unknown pretrain preset {name:?}")))?;
    let mut cfg = TrainConfig::desk();
    apply_train_keys(&mut cfg, s)?;
    Ok(cfg)
}

/// One row of the fine-tuning table.
#[derive(Clone, Debug, PartialEq)]
pub struct FinetunePreset {
    pub task: String,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub encoder_dropout: f64,
    pub classifier_dropout: f64,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub max_seq_len: usize,
}

pub fn finetune_presets() -> Result<Vec<FinetunePreset>> {
    let mut out = Vec::new();
    for (i, line) in FINETUNE_TABLE.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::config(i + 1, format!("malformed preset row {line:?}"));
        if f.len() != 8 {
            return Err(bad());
        }
        out.push(FinetunePreset {
            task: f[0].to_string(),
            learning_rate: f[1].parse().map_err(|_| bad())?,
            batch_size: f[2].parse().map_err(|_| bad())?,
            encoder_dropout: f[3].parse().map_err(|_| bad())?,
            classifier_dropout: f[4].parse().map_err(|_| bad())?,
            total_steps: f[5].parse().map_err(|_| bad())?,
            warmup_steps: f[6].parse().map_err(|_| bad())?,
            max_seq_len: f[7].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

/// Fine-tuning defaults for the desk probe task.
pub fn desk_finetune() -> TrainConfig {
    TrainConfig {
        batch_size: 32,
        learning_rate: 3e-4,
        total_steps: 300,
        warmup_steps: 30,
        max_seq_len: 64,
        ..TrainConfig::desk()
    }
}

pub fn finetune_preset(name: &str) -> Result<TrainConfig> {
    if name == "desk" {
        return Ok(desk_finetune());
    }
    let row = finetune_presets()?
        .into_iter()
        .find(|p| p.task == name)
        .ok_or_else(|| Error::invalid(format!("unknown fine-tune preset {name:?}")))?;
    Ok(TrainConfig {
        batch_size: row.batch_size,
        learning_rate: row.learning_rate,
        total_steps: row.total_steps,
        warmup_steps: row.warmup_steps,
        max_seq_len: row.max_seq_len,
        ..TrainConfig::desk()
    })
}

fn apply_train_keys(cfg: &mut TrainConfig, s: &Section) -> Result<()> {
    for e in &s.entries {
        match e.key.as_str() {
            "batch_size" => cfg.batch_size = parse_value(e)?,
            "learning_rate" => cfg.learning_rate = parse_value(e)?,
            "total_steps" => cfg.total_steps = parse_value(e)?,
            "warmup_steps" => cfg.warmup_steps = parse_value(e)?,
            "max_seq_len" => cfg.max_seq_len = parse_value(e)?,
            "beta1" => cfg.beta1 = parse_value(e)?,
            "beta2" => cfg.beta2 = parse_value(e)?,
            "adam_eps" => cfg.adam_eps = parse_value(e)?,
            "weight_decay" => cfg.weight_decay = parse_value(e)?,
            "log_every" => cfg.log_every = parse_value(e)?,
            "eval_every" => cfg.eval_every = parse_value(e)?,
            "seed" => cfg.seed = parse_value(e)?,
            _ => {}
        }
    }
    Ok(())
}

/// Training section: preset first, then explicit keys. Returns whether the
/// section set its own seed.
fn train_section(s: &Section, default_preset: &str, presets: fn(&str) -> Result<TrainConfig>) -> Result<(TrainConfig, bool)> {
    let mut cfg = match s.get("preset") {
        Some(e) => presets(&e.value).map_err(|err| Error::config(e.line, err.to_string()))?,
        None => presets(default_preset)?,
    };
    apply_train_keys(&mut cfg, s)?;
    cfg.validate().map_err(|e| Error::config(s.line, e.to_string()))?;
    Ok((cfg, s.get("seed").is_some()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageTrain {
    pub train: TrainConfig,
    /// Whether `train.seed` was fixed in the file instead of derived.
    pub explicit_seed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignSpec {
    pub corpus: CorpusSpec,
    pub stage: StageTrain,
}

#[derive(Clone, Debug, PartialEq)]
pub enum UsedIds {
    /// Content ids seen in the pre-training corpus.
    FromCorpus,
    Explicit(Vec<u32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurgeryConfig {
    pub used: UsedIds,
    pub rule: SurgeryRule,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TaskSource {
    Probe {
        grammar: CorpusSpec,
        n_per_class: usize,
        corruption: Corruption,
    },
    Tsv {
        schema: TaskSchema,
        train: PathBuf,
        dev: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneSpec {
    pub task: String,
    pub source: TaskSource,
    pub stage: StageTrain,
}

impl FinetuneSpec {
    pub fn dataset(&self, vocab_content: usize, seed: u64) -> Result<TaskDataset> {
        match &self.source {
            TaskSource::Probe {
                grammar,
                n_per_class,
                corruption,
            } => {
                let mut t = make_probe_task(&grammar.grammar()?, *n_per_class, *corruption, seed)?;
                t.name = self.task.clone();
                Ok(t)
            }
            TaskSource::Tsv { schema, train, dev } => {
                crate::eval::load_task(train, dev, schema, &VocabSpec::new(vocab_content)?)
            }
        }
    }
}

/// A fully validated experiment arm.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub arm: String,
    /// Master seeds; the whole arm runs once per seed and scores are averaged.
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub init_seed: Option<u64>,
    pub generate: Option<CorpusSpec>,
    pub pretrain: Option<StageTrain>,
    pub mask: MaskPolicy,
    pub align: Option<AlignSpec>,
    pub surgery: Option<SurgeryConfig>,
    pub finetune: Vec<FinetuneSpec>,
    /// Raw file contents, kept for manifests.
    pub source_text: String,
}

fn stage_rank(name: &str) -> Option<u8> {
    match name {
        "generate" => Some(1),
        "pretrain" => Some(2),
        "align" => Some(3),
        "surgery" => Some(4),
        n if n == "finetune" || n.starts_with("finetune.") => Some(5),
        "report" => Some(6),
        _ => None,
    }
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let base = std::fs::canonicalize(parent).map_err(|e| Error::io(parent, e))?;
    parse_config_str(&text, &base)
}

pub fn parse_config_str(text: &str, base: &Path) -> Result<ExperimentConfig> {
    let ini = Ini::parse(text)?;

    let mut last: Option<(&str, u8)> = None;
    for s in &ini.sections {
        match (s.name.as_str(), stage_rank(&s.name)) {
            ("experiment" | "model" | "manifest", _) => {}
            (_, Some(rank)) => {
                if let Some((prev, prev_rank)) = last {
                    if rank < prev_rank {
                        return Err(Error::config(
                            s.line,
                            format!("stage [{}] must come before [{prev}]", s.name),
                        ));
                    }
                }
                last = Some((&s.name, rank));
            }
            (name, None) => return Err(Error::config(s.line, format!("unknown section [{name}]"))),
        }
    }

    let exp = ini
        .section("experiment")
        .ok_or_else(|| Error::config(1, "missing [experiment] section"))?;
    exp.check_keys(&["arm", "seed", "seeds", "out"])?;
    let arm = exp
        .get("arm")
        .ok_or_else(|| Error::config(exp.line, "[experiment] needs arm"))?
        .value
        .clone();
    if arm.is_empty() || arm.contains(['/', '\\', ',']) {
        return Err(Error::config(exp.get("arm").map_or(exp.line, |e| e.line), "arm names must be plain words"));
    }
    let seeds = match (exp.get("seeds"), exp.get("seed")) {
        (Some(_), Some(e)) => return Err(Error::config(e.line, "give seed or seeds, not both")),
        (Some(e), None) => e
            .value
            .split(',')
            .map(|v| v.trim().parse().map_err(|_| Error::config(e.line, format!("bad seed {v:?}"))))
            .collect::<Result<Vec<u64>>>()?,
        (None, Some(e)) => vec![parse_value(e)?],
        (None, None) => vec![0],
    };
    let out_dir = exp.get("out").map_or_else(|| base.join("runs").join(&arm), |e| base.join(&e.value));

    let mut model = ModelConfig::desk();
    let mut init_seed = None;
    if let Some(s) = ini.section("model") {
        s.check_keys(&[
            "preset",
            "n_layers",
            "hidden_dim",
            "n_heads",
            "ff_dim",
            "vocab_total",
            "max_positions",
            "dropout_rate",
            "seed",
        ])?;
        if let Some(e) = s.get("preset") {
            model = match e.value.as_str() {
                "desk" => ModelConfig::desk(),
                "desk_small" => ModelConfig::desk_small(),
                "paper" => ModelConfig::paper(),
                other => return Err(Error::config(e.line, format!("unknown model preset {other:?}"))),
            };
        }
        for e in s.entries.iter().filter(|e| e.key != "preset" && e.key != "seed") {
            model.set(&e.key, &e.value).map_err(|err| Error::config(e.line, err.to_string()))?;
        }
        init_seed = opt(s, "seed")?;
        model.validate().map_err(|e| Error::config(s.line, e.to_string()))?;
    }
    let default_content = model.vocab_total - NUM_SPECIAL;

    let generate = match ini.section("generate") {
        Some(s) => {
            s.check_keys(CORPUS_KEYS)?;
            let spec = CorpusSpec::from_section(s, base, default_content)?;
            if spec.content_size + NUM_SPECIAL > model.vocab_total {
                return Err(Error::config(s.line, "corpus vocabulary exceeds the model's vocab_total"));
            }
            Some(spec)
        }
        None => None,
    };

    let mut mask = MaskPolicy::default();
    let pretrain = match ini.section("pretrain") {
        Some(s) => {
            s.check_keys(TRAIN_KEYS)?;
            if generate.is_none() {
                return Err(Error::config(s.line, "[pretrain] needs a [generate] section"));
            }
            if let Some(f) = opt::<f64>(s, "mask_fraction")? {
                mask.mask_fraction = f;
                mask.validate().map_err(|e| Error::config(s.line, e.to_string()))?;
            }
            let (train, explicit_seed) = train_section(s, "desk", pretrain_preset)?;
            check_seq_len(&train, &model, s)?;
            Some(StageTrain { train, explicit_seed })
        }
        None => None,
    };

    let align = match ini.section("align") {
        Some(s) => {
            let mut keys: Vec<&str> = CORPUS_KEYS.to_vec();
            keys.extend(TRAIN_KEYS.iter().copied().filter(|k| *k != "mask_fraction"));
            s.check_keys(&keys)?;
            // Here `seed` belongs to the optimizer; the corpus seed is derived.
            let mut corpus = CorpusSpec::from_section(s, base, default_content)?;
            corpus.seed = None;
            let (mut train, explicit_seed) = train_section(s, "desk", pretrain_preset)?;
            train.trainable = Trainable::EmbeddingsAndHead;
            check_seq_len(&train, &model, s)?;
            Some(AlignSpec {
                corpus,
                stage: StageTrain { train, explicit_seed },
            })
        }
        None => None,
    };

    let surgery = match ini.section("surgery") {
        Some(s) => {
            s.check_keys(&["used_ids", "rule"])?;
            let used = match s.get("used_ids") {
                None => UsedIds::FromCorpus,
                Some(e) if e.value == "corpus" => UsedIds::FromCorpus,
                Some(e) => UsedIds::Explicit(
                    e.value
                        .split(',')
                        .map(|v| v.trim().parse().map_err(|_| Error::config(e.line, format!("bad id {v:?}"))))
                        .collect::<Result<Vec<u32>>>()?,
                ),
            };
            if used == UsedIds::FromCorpus && generate.is_none() {
                return Err(Error::config(s.line, "used_ids = corpus needs a [generate] section"));
            }
            if let Some(e) = s.get("rule") {
                if e.value != "cyclic" {
                    return Err(Error::config(e.line, format!("unknown surgery rule {:?}", e.value)));
                }
            }
            Some(SurgeryConfig {
                used,
                rule: SurgeryRule::Cyclic,
            })
        }
        None => None,
    };

    let mut finetune = Vec::new();
    for s in ini.sections.iter().filter(|s| s.name == "finetune" || s.name.starts_with("finetune.")) {
        let task = s.name.strip_prefix("finetune.").unwrap_or("probe").to_string();
        finetune.push(finetune_section(s, &task, base, &model, default_content)?);
    }
    if let Some(s) = ini.section("report") {
        s.check_keys(&[])?;
    }

    Ok(ExperimentConfig {
        arm,
        seeds,
        out_dir,
        model,
        init_seed,
        generate,
        pretrain,
        mask,
        align,
        surgery,
        finetune,
        source_text: text.to_string(),
    })
}

fn check_seq_len(train: &TrainConfig, model: &ModelConfig, s: &Section) -> Result<()> {
    if train.max_seq_len > model.max_positions {
        return Err(Error::config(
            s.line,
            format!(
                "max_seq_len {} exceeds the model's max_positions {}",
                train.max_seq_len, model.max_positions
            ),
        ));
    }
    Ok(())
}

fn finetune_section(s: &Section, task: &str, base: &Path, model: &ModelConfig, default_content: usize) -> Result<FinetuneSpec> {
    let probe = task == "probe" || task.starts_with("probe");
    let source = if probe {
        let mut keys: Vec<&str> = CORPUS_KEYS.iter().copied().filter(|k| *k != "seed").collect();
        keys.extend(TRAIN_KEYS.iter().copied().filter(|k| *k != "mask_fraction"));
        keys.extend(["n_per_class", "corruption"]);
        s.check_keys(&keys)?;
        let mut grammar = if s.get("kind").is_some() {
            CorpusSpec::from_section(s, base, default_content)?
        } else {
            let mut synth = s.clone();
            synth.entries.push(Entry {
                key: "kind".into(),
                value: "artificial".into(),
                line: s.line,
            });
            CorpusSpec::from_section(&synth, base, default_content)?
        };
        if grammar.kind != CorpusKind::Artificial {
            return Err(Error::config(s.line, "probe tasks use kind = artificial"));
        }
        grammar.seed = None;
        let corruption = match s.get("corruption") {
            Some(e) => e.value.parse().map_err(|err: Error| Error::config(e.line, err.to_string()))?,
            None => Corruption::SwapAdjacent,
        };
        TaskSource::Probe {
            grammar,
            n_per_class: opt(s, "n_per_class")?.unwrap_or(250),
            corruption,
        }
    } else {
        let mut keys = vec!["train", "dev", "metric"];
        keys.extend(TRAIN_KEYS.iter().copied().filter(|k| *k != "mask_fraction"));
        s.check_keys(&keys)?;
        let mut schema = TaskSchema::glue(task)
            .ok_or_else(|| Error::config(s.line, format!("unknown task {task:?}; name a GLUE task or probe")))?;
        if let Some(e) = s.get("metric") {
            schema.metric = e
                .value
                .parse::<MetricKind>()
                .map_err(|err| Error::config(e.line, err.to_string()))?;
        }
        let need = |k: &str| {
            s.get(k)
                .ok_or_else(|| Error::config(s.line, format!("[{}] needs {k}", s.name)))
                .and_then(|e| resolve(base, e))
        };
        TaskSource::Tsv {
            schema,
            train: need("train")?,
            dev: need("dev")?,
        }
    };
    let default_preset = if probe {
        "desk".to_string()
    } else {
        task.trim_end_matches("-mm").trim_end_matches("-m").to_string()
    };
    let (train, explicit_seed) = train_section(s, &default_preset, finetune_preset)?;
    check_seq_len(&train, model, s)?;
    Ok(FinetuneSpec {
        task: task.to_string(),
        source,
        stage: StageTrain { train, explicit_seed },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        parse_config_str(text, Path::new("."))
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = parse("[experiment]\narm = art\n[generate]\nkind = artificial\n[pretrain]\n[finetune.probe]\n").unwrap();
        assert_eq!(cfg.model, ModelConfig::desk());
        let gen = cfg.generate.unwrap();
        assert_eq!(gen.push_probability, 0.4);
        assert_eq!(gen.content_size, 507);
        assert_eq!(cfg.pretrain.unwrap().train, TrainConfig::desk());
        assert_eq!(cfg.finetune.len(), 1);
    }

    #[test]
    fn stage_order_and_unknown_keys() {
        let err = parse("[experiment]\narm = a\n[generate]\nkind = baseline\n[surgery]\n[pretrain]\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 6, .. }), "{err}");
        let err = parse("[experiment]\narm = a\nbogus = 1\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 3, .. }));
        let err = parse("[experiment]\narm = a\n[pretrain]\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 3, .. }));
    }

    #[test]
    fn table3_preset() {
        let t = pretrain_preset("table3").unwrap();
        assert_eq!(t.learning_rate, 5e-5);
        assert_eq!(t.batch_size, 150);
        assert_eq!(t.total_steps, 200_000);
        assert_eq!(t.warmup_steps, 10_000);
        assert_eq!(t.max_seq_len, 128);
    }

    #[test]
    fn table5_rte_row() {
        let rte = finetune_presets().unwrap().into_iter().find(|p| p.task == "RTE").unwrap();
        assert_eq!(rte.learning_rate, 3e-5);
        assert_eq!(rte.batch_size, 32);
        assert_eq!((rte.total_steps, rte.warmup_steps, rte.max_seq_len), (800, 200, 128));
        assert_eq!(rte.classifier_dropout, 0.1);
        assert_eq!(rte.encoder_dropout, 0.0);
    }

    #[test]
    fn distribution_syntax() {
        let b = Path::new("/x");
        assert_eq!(DistText::parse("zipf:1.5", b).unwrap(), DistText::Zipf(1.5));
        let d = DistText::parse("binned:50:zipf:1", b).unwrap();
        assert_eq!(d.to_string(), "binned:50:zipf:1");
        assert!(DistText::parse("pareto", b).is_err());
    }
}
