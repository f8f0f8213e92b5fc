//! Config-driven orchestration: INI experiment files, stage execution with
//! manifests, and the combined report.

pub mod config;
pub mod ini;
pub mod pipeline;

pub use config::{
    finetune_preset, finetune_presets, parse_config, parse_config_str, pretrain_preset, CorpusKind, CorpusSpec, DistText,
    ExperimentConfig, FinetunePreset, FinetuneSpec, TaskSource, UsedIds,
};
pub use pipeline::{
    corpus_report_text, mean_over_seeds, read_metrics, run_arm, run_experiments, seed_dir, write_report, ArmOutcome,
    RunOptions, SeedOutcome, Stage,
};
