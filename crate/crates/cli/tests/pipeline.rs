use std::path::{Path, PathBuf};
use std::process::Command;

use mhl_cli::manifest::hash_file;
use mhl_cli::{
    cmd_decode, cmd_evaluate, cmd_prepare, cmd_report, cmd_tokenize, cmd_train, resolve_config, RunConfig,
    RunDir, RunManifest, FINAL_CHECKPOINT, MANIFEST_FILE,
};
use mhl_core::curriculum::{Phase, Strategy};

const TOY: &str = r#"
preset = "desk"

[data.synth]
n_users = 120
n_items = 60
n_intents = 4
path_len_range = [6, 24]
seed = 1

[tokenizer]
positions = 3
codebook_size = 8
pca_dim = 6
kmeans_iters = 10
graph_edges = 10

[model]
hidden_size = 16
n_layers = 1
n_heads = 2
ffn_dim = 32
max_seq_len = 24

[train]
lr = 0.005
warmup_steps = 5
batch_size = 32
max_epochs = 2
warmup_epochs = 1
plateau_patience = 1
finetune_patience = 1

[eval]
ks = [5, 10]
truncation_min_len = 12
truncation_drop_last = 6
"#;

fn toy(overrides: &[&str]) -> RunConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    RunConfig::from_toml_str(TOY, &o).unwrap()
}

fn prepared(root: &Path, id: &str, cfg: &RunConfig) -> RunDir {
    let run = RunDir::new(root, id).unwrap();
    cmd_prepare(cfg, &run).unwrap();
    cmd_tokenize(cfg, &run).unwrap();
    run
}

#[test]
fn synthetic_prepare_is_deterministic() {
    let root = tempfile::tempdir().unwrap();
    let cfg = toy(&[]);
    let a = RunDir::new(root.path(), "a").unwrap();
    let b = RunDir::new(root.path(), "b").unwrap();
    let ha = cmd_prepare(&cfg, &a).unwrap();
    assert_eq!(cmd_prepare(&cfg, &b).unwrap(), ha);
    assert_eq!(cmd_prepare(&cfg, &a).unwrap(), ha);
    assert_eq!(cmd_tokenize(&cfg, &a).unwrap(), cmd_tokenize(&cfg, &b).unwrap());
    let m = RunManifest::load(&a.file(MANIFEST_FILE)).unwrap();
    let stages: Vec<&str> = m.stages.iter().map(|s| s.stage.as_str()).collect();
    assert_eq!(stages, ["prepare", "prepare", "tokenize"]);
    assert_eq!(m.stages[0].outputs, m.stages[1].outputs);
}

#[test]
fn missing_data_path_names_the_field() {
    let root = tempfile::tempdir().unwrap();
    let cfg = toy(&[
        "data.source=\"file\"",
        "data.path=\"/nonexistent/ratings.csv\"",
        "data.features=\"/nonexistent/f.bin\"",
        "data.feature_ids=\"/nonexistent/ids.txt\"",
    ]);
    let run = RunDir::new(root.path(), "x").unwrap();
    let err = cmd_prepare(&cfg, &run).unwrap_err();
    assert!(format!("{err:#}").contains("data.path"), "{err:#}");
    assert_eq!(mhl_cli::classify(&err), mhl_cli::ExitKind::Usage);

    let bad = RunConfig::from_toml_str(TOY, &["train.gamma0=1.5".to_string()]).unwrap_err();
    assert_eq!(bad.field, "train.gamma0");
}

#[test]
fn config_round_trips_through_toml() {
    let mut full_size = RunConfig::preset("paper-appendixC").unwrap();
    full_size.data.path = Some("ratings.csv".into());
    full_size.data.features = Some("features.bin".into());
    full_size.data.feature_ids = Some("ids.txt".into());
    for cfg in [toy(&[]), RunConfig::preset("desk").unwrap(), full_size] {
        let again = RunConfig::from_toml_str(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(again, cfg);
    }
    let root = tempfile::tempdir().unwrap();
    let run = RunDir::new(root.path(), "echo").unwrap();
    let cfg = toy(&["train.seed=9"]);
    cmd_prepare(&cfg, &run).unwrap();
    assert_eq!(resolve_config(&run, None, None, &[]).unwrap(), cfg);
}

#[test]
fn train_resume_and_evaluate_are_reproducible() {
    let root = tempfile::tempdir().unwrap();
    let cfg = toy(&[]);
    let full = prepared(root.path(), "full", &cfg);
    let s = cmd_train(&cfg, &full, false, None).unwrap();
    assert_eq!(s.epochs, 2);

    // Interrupted after one epoch, then resumed to the same budget.
    let part = prepared(root.path(), "part", &cfg);
    let paused = cmd_train(&cfg, &part, false, Some(1)).unwrap();
    assert!(!paused.finished);
    assert_eq!(paused.epochs, 1);
    let s2 = cmd_train(&cfg, &part, true, None).unwrap();
    assert_eq!(s2.checkpoint_hash, s.checkpoint_hash);
    let mf = RunManifest::load(&full.file(MANIFEST_FILE)).unwrap();
    let mp = RunManifest::load(&part.file(MANIFEST_FILE)).unwrap();
    assert_eq!(mf.schedule_trace, mp.schedule_trace);

    let e1 = cmd_evaluate(&cfg, &full, None, true).unwrap();
    let e2 = cmd_evaluate(&cfg, &full, None, true).unwrap();
    assert_eq!(e1, e2);
    assert_eq!(e1.report.seed, Some(cfg.train.seed));
    let m = RunManifest::load(&full.file(MANIFEST_FILE)).unwrap();
    assert_eq!(m.metrics.iter().filter(|e| e.name == "test").count(), 2);
    assert_eq!(m.pilot_relative_ndcg10.len(), 2);

    let out = cmd_decode(&cfg, &full, None, None, 5, Some(3)).unwrap();
    let lines = std::fs::read_to_string(out).unwrap();
    assert_eq!(lines.lines().count(), 3);
    for l in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert_eq!(v["item_ids"].as_array().unwrap().len(), 5);
    }

    // Checkpoint from a different codebook layout is refused.
    let other = prepared(root.path(), "other", &toy(&["tokenizer.codebook_size=4"]));
    let err = cmd_evaluate(&toy(&["tokenizer.codebook_size=4"]), &other, Some(&full.file(FINAL_CHECKPOINT)), false)
        .unwrap_err();
    assert!(format!("{err:#}").contains("codebooks"));
}

#[test]
fn gamma_zero_trains_autoregressive_only() {
    let root = tempfile::tempdir().unwrap();
    let cfg = toy(&["train.gamma0=0"]);
    assert_eq!(cfg.strategy(), Strategy::NoMask);
    let run = prepared(root.path(), "ar", &cfg);
    cmd_train(&cfg, &run, false, None).unwrap();
    let m = RunManifest::load(&run.file(MANIFEST_FILE)).unwrap();
    for r in &m.schedule_trace {
        assert_eq!(r.phase, Phase::Finetune);
        assert_eq!(r.gamma, 0.0);
        assert_eq!(r.mask_loss, 0.0);
        assert_eq!(r.recon_evals, 0);
    }
}

#[test]
fn ablation_grid_and_report() {
    let root = tempfile::tempdir().unwrap();
    let base = toy(&["train.max_epochs=3"]);
    let data = prepared(root.path(), "base", &base);
    let mut dirs: Vec<PathBuf> = Vec::new();
    for s in Strategy::ALL {
        let name = serde_json::to_value(s).unwrap();
        let id = format!("grid-{}", name.as_str().unwrap());
        let cfg = toy(&["train.max_epochs=3", &format!("train.strategy={name}")]);
        let run = RunDir::new(root.path(), &id).unwrap();
        std::fs::create_dir_all(run.file("data")).unwrap();
        std::fs::create_dir_all(run.file("tokenizer")).unwrap();
        for f in ["data/split.jsonl", "tokenizer/catalog.jsonl", "tokenizer/catalog_meta.json", "tokenizer/graph.json"] {
            std::fs::copy(data.file(f), run.file(f)).unwrap();
        }
        cmd_train(&cfg, &run, false, None).unwrap();
        cmd_evaluate(&cfg, &run, None, false).unwrap();
        let m = RunManifest::load(&run.file(MANIFEST_FILE)).unwrap();
        for r in &m.schedule_trace {
            if r.phase == Phase::Finetune {
                assert_eq!(r.recon_evals, 0, "{id} epoch {}", r.epoch);
                assert_eq!(r.entropy_maps, 0);
            }
        }
        dirs.push(run.path.clone());
    }
    let out = root.path().join("report");
    let table = cmd_report(&dirs, &out).unwrap();
    assert_eq!(table.rows.len(), 6);
    let labels: Vec<&str> = table.rows.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(labels, ["Inf", "R", "E", "R->Inf", "E->Inf", "R->E->Inf"]);
    assert_eq!(table.delta_keys, ["train.strategy"]);
    assert!(out.join("table.md").exists());
    assert!(out.join("plots/grid-random_val_ndcg10.csv").exists());

    // Three manifests, passed as files.
    let three: Vec<PathBuf> = dirs[..3].iter().map(|d| d.join(MANIFEST_FILE)).collect();
    assert_eq!(cmd_report(&three, &root.path().join("r3")).unwrap().rows.len(), 3);
}

#[test]
fn binary_exit_codes() {
    let root = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_mhl");
    let status = |args: &[&str]| {
        Command::new(bin)
            .args(args)
            .env("MHL_RUN_ROOT", root.path())
            .env("RUST_LOG", "error")
            .output()
            .unwrap()
            .status
            .code()
    };
    assert_eq!(status(&["frobnicate"]), Some(1));
    assert_eq!(status(&["prepare", "--run-id", "r", "--preset", "nope"]), Some(1));
    assert_eq!(
        status(&["prepare", "--run-id", "r", "--preset", "desk", "--set", "data.source=\"file\""]),
        Some(1)
    );
    // Training before the data exists is a data error.
    assert_eq!(status(&["train", "--run-id", "empty", "--preset", "desk"]), Some(2));

    let cfg = root.path().join("toy.toml");
    std::fs::write(&cfg, TOY).unwrap();
    let cfg = cfg.to_str().unwrap();
    assert_eq!(status(&["prepare", "--run-id", "ok", "--config", cfg]), Some(0));
    assert!(root.path().join("ok").join(MANIFEST_FILE).exists());
    let h = hash_file(&root.path().join("ok/data/split.jsonl")).unwrap();
    assert_eq!(status(&["prepare", "--run-id", "ok"]), Some(0));
    assert_eq!(hash_file(&root.path().join("ok/data/split.jsonl")).unwrap(), h);
}
