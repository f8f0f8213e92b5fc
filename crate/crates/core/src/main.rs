use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pretrain_lab::cli::{
    corpus_report_text, parse_config, read_metrics, run_experiments, seed_dir, write_report, ExperimentConfig, RunOptions,
    Stage,
};
use pretrain_lab::corpusgen::read_corpus_any;
use pretrain_lab::error::{Error, Result};
use pretrain_lab::eval::build_report;

#[derive(Parser)]
#[command(name = "pretrain-lab", version, about = "Synthetic pre-training corpora and transfer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment file; repeat to run several arms.
    #[arg(long = "config")]
    configs: Vec<PathBuf>,
    /// Overrides the master seed(s) in every config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory. With several configs each arm goes to a subdirectory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Recompute stages even when their manifests are current.
    #[arg(long)]
    fresh: bool,
    /// Suppress stage progress on stderr.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or ingest) the corpora of each arm.
    Gen(Common),
    /// Print corpus statistics for a corpus file or a config's corpora.
    Stats {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Run through masked-LM pre-training.
    Pretrain(Common),
    /// Run through the embedding alignment stage.
    Align(Common),
    /// Run through embedding surgery.
    Surgery(Common),
    /// Run through fine-tuning and write per-arm metrics.
    Finetune(Common),
    /// Build the report table from existing per-arm metrics.
    Report(Common),
    /// Full pipeline for every arm plus the combined report.
    Run {
        #[command(flatten)]
        common: Common,
        /// Number of arms allowed to run at once.
        #[arg(long, default_value_t = 1)]
        parallel_arms: usize,
    },
}

struct Plan {
    arms: Vec<(ExperimentConfig, PathBuf)>,
    report_dir: PathBuf,
}

fn plan(common: &Common) -> Result<Plan> {
    if common.configs.is_empty() {
        return Err(Error::config(0, "no --config given"));
    }
    let mut arms = Vec::new();
    for path in &common.configs {
        let mut cfg = parse_config(path)?;
        if let Some(s) = common.seed {
            cfg.seeds = vec![s];
        }
        let dir = match (&common.out, common.configs.len()) {
            (Some(out), 1) => out.clone(),
            (Some(out), _) => out.join(&cfg.arm),
            (None, _) => cfg.out_dir.clone(),
        };
        arms.push((cfg, dir));
    }
    let report_dir = match &common.out {
        Some(out) => out.clone(),
        None if arms.len() == 1 => arms[0].1.clone(),
        None => arms[0].1.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf),
    };
    Ok(Plan { arms, report_dir })
}

fn run_until(common: &Common, stop_after: Stage, parallel: usize) -> Result<()> {
    let plan = plan(common)?;
    let opts = RunOptions {
        stop_after,
        fresh: common.fresh,
        verbose: !common.quiet,
    };
    let (outcomes, table) = run_experiments(&plan.arms, &plan.report_dir, &opts, parallel)?;
    for o in &outcomes {
        for r in &o.results {
            println!("{}\t{}\t{}\t{:.4}", o.arm, r.task, r.metric.as_str(), r.score);
        }
    }
    if let Some(t) = table {
        print!("{}", t.to_text());
    }
    Ok(())
}

fn stats(common: &Common, corpus: Option<&Path>) -> Result<()> {
    if let Some(path) = corpus {
        let c = read_corpus_any(path)?;
        let text = corpus_report_text(&c, None)?;
        if let Some(out) = &common.out {
            pretrain_lab::artifact::write_atomic(&out.join("corpus_report.txt"), text.as_bytes())?;
        }
        print!("{text}");
        return Ok(());
    }
    run_until(common, Stage::Generate, 1)?;
    for (cfg, dir) in plan(common)?.arms {
        for seed in &cfg.seeds {
            let path = seed_dir(&dir, *seed).join("corpus_report.txt");
            if path.exists() {
                println!("# {} seed {}", cfg.arm, seed);
                print!("{}", std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?);
            }
        }
    }
    Ok(())
}

fn report(common: &Common) -> Result<()> {
    let plan = plan(common)?;
    let mut results = Vec::new();
    for (_, dir) in &plan.arms {
        results.extend(read_metrics(&dir.join("metrics.csv"))?);
    }
    let table = build_report(&results)?;
    write_report(&table, &plan.report_dir)?;
    print!("{}", table.to_text());
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("PRETRAIN_LAB_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::config(0, format!("PRETRAIN_LAB_THREADS must be a positive integer, got {v:?}")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::invalid(e.to_string()))?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::Gen(c) => run_until(c, Stage::Generate, 1),
        Command::Stats { common, corpus } => stats(common, corpus.as_deref()),
        Command::Pretrain(c) => run_until(c, Stage::Pretrain, 1),
        Command::Align(c) => run_until(c, Stage::Align, 1),
        Command::Surgery(c) => run_until(c, Stage::Surgery, 1),
        Command::Finetune(c) => run_until(c, Stage::Finetune, 1),
        Command::Report(c) => report(c),
        Command::Run { common, parallel_arms } => run_until(common, Stage::Report, *parallel_arms),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
