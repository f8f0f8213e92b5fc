use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use pretrain_lab::artifact::file_digest;
use pretrain_lab::cli::{parse_config, run_experiments, seed_dir, RunOptions};
use pretrain_lab::model::ModelConfig;
use pretrain_lab::training::TrainConfig;
use pretrain_lab::Error;

const BIN: &str = env!("CARGO_BIN_EXE_pretrain-lab");

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

const TINY_MODEL: &str = "[model]\npreset = desk_small\nn_layers = 1\nhidden_dim = 32\nff_dim = 64\nmax_positions = 64\n";

fn artificial_arm(dir: &Path) -> PathBuf {
    let text = format!(
        "[experiment]\narm = artificial\nseed = 3\n{TINY_MODEL}\
         [generate]\nkind = artificial\ndistribution = zipf:1\ntarget_tokens = 3000\n\
         [pretrain]\ntotal_steps = 8\nwarmup_steps = 1\nbatch_size = 8\n\
         [finetune.probe]\nn_per_class = 12\ntotal_steps = 4\nwarmup_steps = 1\nbatch_size = 8\n"
    );
    write(dir, "artificial.ini", &text)
}

fn scratch_arm(dir: &Path) -> PathBuf {
    let text = format!(
        "[experiment]\narm = scratch\nseed = 3\n{TINY_MODEL}\
         [finetune.probe]\nn_per_class = 12\ntotal_steps = 4\nwarmup_steps = 1\nbatch_size = 8\n"
    );
    write(dir, "scratch.ini", &text)
}

fn quiet() -> RunOptions {
    RunOptions::default()
}

#[test]
fn minimal_config_gets_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "a.ini", "[experiment]\narm = art\n[generate]\nkind = artificial\n[pretrain]\n[finetune.probe]\n");
    let cfg = parse_config(&p).unwrap();
    assert_eq!(cfg.model, ModelConfig::desk());
    assert_eq!(cfg.seeds, vec![0]);
    assert_eq!(cfg.finetune[0].task, "probe");
    assert!(cfg.out_dir.ends_with("runs/art"));
}

#[test]
fn table3_preset_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "a.ini", "[experiment]\narm = a\n[generate]\nkind = baseline\n[pretrain]\npreset = table3\n");
    let t = parse_config(&p).unwrap().pretrain.unwrap().train;
    assert_eq!(
        (t.learning_rate, t.batch_size, t.total_steps, t.warmup_steps, t.max_seq_len),
        (5e-5, 150, 200_000, 10_000, 128)
    );
    assert_eq!(t.beta1, TrainConfig::desk().beta1);
}

#[test]
fn config_errors_point_at_lines() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("[experiment]\narm = a\n[generate]\nkind = baseline\n[surgery]\n[pretrain]\n", 6),
        ("[experiment]\narm = a\n\n[generate]\nkind = baseline\ncolour = red\n", 6),
        ("[experiment]\narm = a\n[finetune.RTE]\ntrain = missing.tsv\ndev = missing.tsv\n", 4),
        ("[experiment]\narm = a\n[generate]\nkind = artificial\ndistribution = pareto\n", 5),
        ("[experiment]\narm = a\n[model]\npreset = huge\n", 4),
        ("[experiment]\narm = a\n[bogus]\n", 3),
    ];
    for (text, line) in cases {
        let p = write(dir.path(), "bad.ini", text);
        match parse_config(&p) {
            Err(Error::Config { line: l, .. }) => assert_eq!(l, line, "{text}"),
            other => panic!("expected a config error for {text:?}, got {other:?}"),
        }
    }
}

#[test]
fn glue_task_uses_its_table5_row() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "train.tsv", "text_a\ttext_b\tlabel\nt5 t6\tt7\tentailment\n");
    write(dir.path(), "dev.tsv", "text_a\ttext_b\tlabel\nt5\tt6\tnot_entailment\n");
    let p = write(
        dir.path(),
        "g.ini",
        "[experiment]\narm = a\n[finetune.RTE]\ntrain = train.tsv\ndev = dev.tsv\n",
    );
    let cfg = parse_config(&p).unwrap();
    let t = &cfg.finetune[0].stage.train;
    assert_eq!((t.learning_rate, t.batch_size, t.total_steps, t.warmup_steps), (3e-5, 32, 800, 200));
}

#[test]
fn two_arms_give_two_rows_and_reruns_reuse_stages() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let arms: Vec<_> = [artificial_arm(dir.path()), scratch_arm(dir.path())]
        .iter()
        .map(|p| {
            let cfg = parse_config(p).unwrap();
            let d = out.join(&cfg.arm);
            (cfg, d)
        })
        .collect();
    let (outcomes, table) = run_experiments(&arms, &out, &quiet(), 2).unwrap();
    let table = table.unwrap();
    assert_eq!(table.rows.len(), 2);
    assert_eq!(table.header(), vec!["arm", "probe", "Avg"]);
    assert!(out.join("report.csv").exists() && out.join("report.txt").exists());
    let art = seed_dir(&outcomes[0].dir, 3);
    for f in ["corpus.txt", "corpus_report.txt", "pretrain.ckpt", "pretrain_loss.csv", "finetune_probe.ckpt", "metrics.csv"] {
        assert!(art.join(f).exists(), "{f}");
    }
    assert!(!seed_dir(&outcomes[1].dir, 3).join("corpus.txt").exists());

    let stamp = fs::metadata(art.join("pretrain.ckpt")).unwrap().modified().unwrap();
    let (again, _) = run_experiments(&arms, &out, &quiet(), 1).unwrap();
    assert_eq!(fs::metadata(art.join("pretrain.ckpt")).unwrap().modified().unwrap(), stamp);
    assert_eq!(again[0].results, outcomes[0].results);
}

#[test]
fn rerun_reproduces_corpora_and_checkpoints_bytewise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config(&artificial_arm(dir.path())).unwrap();
    let runs: Vec<PathBuf> = ["one", "two"].iter().map(|n| dir.path().join(n)).collect();
    for r in &runs {
        run_experiments(&[(cfg.clone(), r.clone())], r, &quiet(), 1).unwrap();
    }
    for f in ["corpus.txt", "init.ckpt", "pretrain.ckpt", "finetune_probe.ckpt", "metrics.csv"] {
        let a = file_digest(&seed_dir(&runs[0], 3).join(f)).unwrap();
        let b = file_digest(&seed_dir(&runs[1], 3).join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn manifest_alone_regenerates_the_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = artificial_arm(dir.path());
    let out = dir.path().join("first");
    let status = Command::new(BIN)
        .args(["gen", "-q", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let seed = seed_dir(&out, 3);
    let digest = file_digest(&seed.join("corpus.txt")).unwrap();

    let keep = dir.path().join("kept");
    fs::create_dir(&keep).unwrap();
    fs::copy(seed.join("generate.manifest.ini"), keep.join("generate.manifest.ini")).unwrap();
    fs::remove_dir_all(&out).unwrap();
    fs::remove_file(&cfg_path).unwrap();

    let regen = dir.path().join("regen");
    let status = Command::new(BIN)
        .args(["gen", "-q", "--config"])
        .arg(keep.join("generate.manifest.ini"))
        .arg("--out")
        .arg(&regen)
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(file_digest(&seed_dir(&regen, 3).join("corpus.txt")).unwrap(), digest);
}

#[test]
fn exit_codes_and_stage_isolation() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.ini", "[experiment]\narm = a\nnope = 1\n");
    let out = Command::new(BIN).args(["run", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));

    write(dir.path(), "train.tsv", "text_a\tlabel\nt5 t6\t1\nt7\t0\n");
    write(dir.path(), "dev.tsv", "text_a\tlabel\nt5\t7\n");
    let text = format!(
        "[experiment]\narm = glue\nseed = 1\n{TINY_MODEL}\
         [generate]\nkind = baseline\ntarget_tokens = 2000\n\
         [pretrain]\ntotal_steps = 3\nwarmup_steps = 1\nbatch_size = 4\n\
         [finetune.SST-2]\ntrain = train.tsv\ndev = dev.tsv\ntotal_steps = 2\nwarmup_steps = 0\nmax_seq_len = 64\n"
    );
    let cfg = write(dir.path(), "glue.ini", &text);
    let run_dir = dir.path().join("run");
    let out = Command::new(BIN).args(["run", "-q", "--config"]).arg(&cfg).arg("--out").arg(&run_dir).output().unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("finetune"));
    let ckpt = seed_dir(&run_dir, 1).join("pretrain.ckpt");
    pretrain_lab::model::read_checkpoint(&ckpt).unwrap();
    assert!(!seed_dir(&run_dir, 1).join("finetune_SST-2.ckpt").exists());

    let ok = Command::new(BIN).args(["pretrain", "-q", "--config"]).arg(&cfg).arg("--out").arg(&run_dir).output().unwrap();
    assert_eq!(ok.status.code(), Some(0));
}

#[test]
fn report_subcommand_reads_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let a = scratch_arm(dir.path());
    let out = dir.path().join("r");
    let st = Command::new(BIN).args(["finetune", "-q", "--config"]).arg(&a).arg("--out").arg(&out).output().unwrap().status;
    assert!(st.success());
    assert!(!out.join("report.csv").exists());
    let rep = Command::new(BIN).args(["report", "--config"]).arg(&a).arg("--out").arg(&out).output().unwrap();
    assert!(rep.status.success());
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.starts_with("arm,probe,Avg\nscratch,"), "{csv}");
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for group in ["desk", "paper"] {
        for entry in fs::read_dir(root.join(group)).unwrap() {
            let p = entry.unwrap().path();
            let cfg = parse_config(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            assert!(!cfg.finetune.is_empty(), "{}", p.display());
            seen += 1;
        }
    }
    assert_eq!(seen, 5);
}
