//! Pipeline commands behind the `mhl` binary. Every command works inside a
//! run directory `<run root>/<run id>/` and appends to its manifest.

pub mod config;
pub mod manifest;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use log::info;
use mhl_core::corpus::{
    core_filter, load_interactions, read_split_manifest, split_leave_one_out, synth_generate,
    write_interactions_tsv, write_split_manifest, SplitCorpus,
};
use mhl_core::decode::{DecodeContext, DecodeRecord, NextLogProbs, write_decode_jsonl};
use mhl_core::eval::{eval_cases, evaluate, pilot_truncation, write_plot_csv, Protocol, Target};
use mhl_core::model::{load_checkpoint, save_checkpoint, Checkpoint, ModelState};
use mhl_core::tokenizer::{
    build_token_graph, fit_tokenizer, ingest_external_tokens, read_feature_matrix, write_feature_matrix,
    ItemGraph,
};
use mhl_core::train::{TrainData, Trainer, BEST_CHECKPOINT, LAST_CHECKPOINT};
use mhl_core::{Catalog, SemanticId};
use serde::Deserialize;

pub use config::{ConfigError, RunConfig};
pub use manifest::{RunManifest, MANIFEST_FILE};

use manifest::{combine_hashes, hash_file, hash_outputs, outputs_hash, MetricsEntry, StageRecord};

pub const RUN_ROOT_ENV: &str = "MHL_RUN_ROOT";
pub const CONFIG_FILE: &str = "config.toml";
pub const FINAL_CHECKPOINT: &str = "checkpoints/final.ckpt";

const INTERACTIONS: &str = "data/interactions.tsv";
const SPLIT: &str = "data/split.jsonl";
const FEATURES: &str = "data/features.bin";
const FEATURE_IDS: &str = "data/feature_ids.txt";
const CATALOG: &str = "tokenizer/catalog.jsonl";
const CATALOG_META: &str = "tokenizer/catalog_meta.json";
const CODEBOOKS: &str = "tokenizer/codebooks.json";
const GRAPH: &str = "tokenizer/graph.json";

/// Exit status classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Ok = 0,
    Usage = 1,
    Data = 2,
    Numeric = 3,
}

/// Maps an error chain to its exit class.
pub fn classify(err: &anyhow::Error) -> ExitKind {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return ExitKind::Usage;
        }
        if let Some(e) = cause.downcast_ref::<mhl_core::Error>() {
            if e.is_numeric_failure() {
                return ExitKind::Numeric;
            }
            if e.is_data_error() {
                return ExitKind::Data;
            }
            return match e {
                mhl_core::Error::InvalidArgument { field, .. }
                    if matches!(*field, "catalog" | "corpus" | "split" | "context") =>
                {
                    ExitKind::Data
                }
                mhl_core::Error::InvalidArgument { .. } => ExitKind::Usage,
                _ => ExitKind::Data,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return ExitKind::Data;
        }
    }
    ExitKind::Data
}

/// Marks an error as a usage/config problem.
fn usage(field: &str, message: impl Into<String>) -> anyhow::Error {
    ConfigError {
        field: field.into(),
        message: message.into(),
    }
    .into()
}

#[derive(Debug, Clone)]
pub struct RunDir {
    pub id: String,
    pub path: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path, id: &str) -> Result<Self> {
        if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
            return Err(usage("--run-id", format!("`{id}` is not a valid directory name")));
        }
        Ok(RunDir {
            id: id.to_string(),
            path: root.join(id),
        })
    }

    pub fn file(&self, rel: &str) -> PathBuf {
        self.path.join(rel)
    }

    fn ensure(&self, rel_dir: &str) -> Result<()> {
        let p = self.path.join(rel_dir);
        fs::create_dir_all(&p).with_context(|| format!("creating {}", p.display()))
    }

    fn require(&self, rel: &str, stage: &str) -> Result<PathBuf> {
        let p = self.file(rel);
        if !p.exists() {
            return Err(anyhow!(mhl_core::Error::Io {
                path: p.clone(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, format!("missing; run `mhl {stage}` first")),
            }));
        }
        Ok(p)
    }

    fn manifest(&self, cfg: &RunConfig) -> Result<RunManifest> {
        RunManifest::open(&self.path, &self.id, serde_json::to_value(cfg)?)
    }

    fn write_config(&self, cfg: &RunConfig) -> Result<()> {
        fs::create_dir_all(&self.path)?;
        fs::write(self.file(CONFIG_FILE), cfg.to_toml()).context("writing config echo")
    }
}

/// Resolves the configuration for a command: explicit file or preset if
/// given, else the run's own config echo; overrides are applied last.
pub fn resolve_config(
    run: &RunDir,
    config: Option<&Path>,
    preset: Option<&str>,
    overrides: &[String],
) -> Result<RunConfig> {
    let cfg = match (config, preset) {
        (Some(p), _) => RunConfig::load(p, overrides)?,
        (None, Some(name)) => RunConfig::from_toml_str(&format!("preset = \"{name}\""), overrides)?,
        (None, None) => {
            let echo = run.file(CONFIG_FILE);
            if !echo.exists() {
                return Err(usage("--config", "no config given and the run has no config.toml"));
            }
            RunConfig::load(&echo, overrides)?
        }
    };
    Ok(cfg)
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let t0 = Instant::now();
    let out = f()?;
    Ok((out, t0.elapsed().as_secs_f64()))
}

/// Corpus ingestion, optional core filtering and the leave-one-out split.
/// Returns the combined hash of the produced files.
pub fn cmd_prepare(cfg: &RunConfig, run: &RunDir) -> Result<String> {
    run.write_config(cfg)?;
    run.ensure("data")?;
    let ((input_hash, outputs), seconds) = timed(|| {
        let d = &cfg.data;
        let (corpus, input_hash, mut files) = match d.source {
            config::DataSource::Synth => {
                let synth = synth_generate(&d.synth)?;
                write_feature_matrix(&synth.item_features, &run.file(FEATURES))?;
                fs::write(run.file(FEATURE_IDS), synth.item_ids.join("\n") + "\n")?;
                let h = combine_hashes([("synth", serde_json::to_string(&d.synth)?.as_str())]);
                (synth.corpus, h, vec![FEATURES, FEATURE_IDS])
            }
            config::DataSource::File => {
                let path = d.path.as_ref().ok_or_else(|| usage("data.path", "missing"))?;
                if !path.exists() {
                    return Err(usage("data.path", format!("{} does not exist", path.display())));
                }
                let h = hash_file(path)?;
                (load_interactions(path, d.format)?, h, Vec::new())
            }
        };
        let corpus = if d.min_count > 0 {
            core_filter(&corpus, d.min_count)?
        } else {
            corpus
        };
        let split = split_leave_one_out(&corpus)?;
        info!(
            "{} users ({} evaluable, {} short), {} items, {} events",
            corpus.users.len(),
            split.n_eval_users(),
            split.n_short_users,
            corpus.n_items(),
            corpus.n_events()
        );
        write_interactions_tsv(&corpus, &run.file(INTERACTIONS))?;
        write_split_manifest(&split, &run.file(SPLIT))?;
        files.extend([INTERACTIONS, SPLIT]);
        Ok((input_hash, hash_outputs(&run.path, &files)?))
    })?;
    let hash = outputs_hash(&outputs);
    let mut m = run.manifest(cfg)?;
    m.stages.push(StageRecord {
        stage: "prepare".into(),
        input_hash,
        outputs,
        seconds,
    });
    m.save(&run.path)?;
    Ok(hash)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = File::open(path).map_err(|e| mhl_core::Error::Io {
        path: path.into(),
        source: e,
    })?;
    BufReader::new(f)
        .lines()
        .map(|l| l.map(|s| s.trim().to_string()).map_err(Into::into))
        .filter(|l| !matches!(l, Ok(s) if s.is_empty()))
        .collect()
}

/// Semantic IDs for every item plus the token-overlap graph.
pub fn cmd_tokenize(cfg: &RunConfig, run: &RunDir) -> Result<String> {
    run.write_config(cfg)?;
    let split_path = run.require(SPLIT, "prepare")?;
    run.ensure("tokenizer")?;
    let ((input_hash, outputs), seconds) = timed(|| {
        let t = &cfg.tokenizer;
        let (catalog, mut inputs, mut files) = if let Some(tokens) = &cfg.data.item_tokens {
            let ext = ingest_external_tokens(tokens, t.positions)?;
            if ext.n_padded + ext.n_truncated > 0 {
                info!("external tokens: {} padded, {} truncated", ext.n_padded, ext.n_truncated);
            }
            (ext.catalog, vec![("item_tokens".to_string(), hash_file(tokens)?)], vec![CATALOG, CATALOG_META])
        } else {
            let (features, ids) = match cfg.data.source {
                config::DataSource::Synth => (run.file(FEATURES), run.file(FEATURE_IDS)),
                config::DataSource::File => (
                    cfg.data.features.clone().ok_or_else(|| usage("data.features", "missing"))?,
                    cfg.data.feature_ids.clone().ok_or_else(|| usage("data.feature_ids", "missing"))?,
                ),
            };
            let x = read_feature_matrix(&features)?;
            let item_ids = read_lines(&ids)?;
            if item_ids.len() != x.rows {
                return Err(anyhow!(mhl_core::Error::Shape(format!(
                    "{} feature rows but {} item ids",
                    x.rows,
                    item_ids.len()
                ))));
            }
            let (cb, codes) = fit_tokenizer(&x, t.pca_dim, &cfg.pq_config())?;
            cb.save(&run.file(CODEBOOKS))?;
            let catalog = Catalog::new(item_ids, codes, vec![t.codebook_size; t.positions], false)?;
            (
                catalog,
                vec![
                    ("features".to_string(), hash_file(&features)?),
                    ("feature_ids".to_string(), hash_file(&ids)?),
                ],
                vec![CATALOG, CATALOG_META, CODEBOOKS],
            )
        };
        let split = read_split_manifest(&split_path)?;
        if let Some(missing) = split
            .users
            .iter()
            .flat_map(|u| u.full_sequence())
            .find(|i| catalog.index_of(i).is_none())
        {
            return Err(anyhow!(mhl_core::Error::InvalidArgument {
                field: "catalog",
                message: format!("interaction item {missing} has no semantic ID"),
            }));
        }
        let distinct: HashSet<&SemanticId> = catalog.codes.iter().collect();
        info!("{} items, {} distinct semantic IDs", catalog.len(), distinct.len());
        catalog.save(&run.file(CATALOG), &run.file(CATALOG_META))?;
        let graph = build_token_graph(&catalog.codes, t.graph_edges)?;
        fs::write(run.file(GRAPH), serde_json::to_vec(&graph)?)?;
        files.push(GRAPH);
        inputs.push(("split".to_string(), hash_file(&split_path)?));
        let input_hash = combine_hashes(inputs.iter().map(|(a, b)| (a.as_str(), b.as_str())));
        Ok((input_hash, hash_outputs(&run.path, &files)?))
    })?;
    let hash = outputs_hash(&outputs);
    let mut m = run.manifest(cfg)?;
    m.stages.push(StageRecord {
        stage: "tokenize".into(),
        input_hash,
        outputs,
        seconds,
    });
    m.save(&run.path)?;
    Ok(hash)
}

fn load_catalog(run: &RunDir) -> Result<Catalog> {
    let jsonl = run.require(CATALOG, "tokenize")?;
    let meta = run.require(CATALOG_META, "tokenize")?;
    Ok(Catalog::load(&jsonl, &meta)?)
}

fn load_split(run: &RunDir) -> Result<SplitCorpus> {
    Ok(read_split_manifest(&run.require(SPLIT, "prepare")?)?)
}

fn load_graph(run: &RunDir) -> Result<ItemGraph> {
    let p = run.require(GRAPH, "tokenize")?;
    let bytes = fs::read(&p).with_context(|| format!("reading {}", p.display()))?;
    Ok(serde_json::from_slice(&bytes).map_err(mhl_core::Error::from)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub epochs: usize,
    /// False when `epoch_limit` interrupted training; no final checkpoint then.
    pub finished: bool,
    pub final_checkpoint: Option<PathBuf>,
    pub checkpoint_hash: Option<String>,
    pub best_val_ndcg10: Option<f64>,
}

/// Runs the curriculum to completion (or resumes an interrupted run) and
/// writes `checkpoints/final.ckpt` with the selected model. `epoch_limit`
/// caps the epochs run by this call.
pub fn cmd_train(cfg: &RunConfig, run: &RunDir, resume: bool, epoch_limit: Option<usize>) -> Result<TrainSummary> {
    run.write_config(cfg)?;
    let split = load_split(run)?;
    let catalog = load_catalog(run)?;
    let model_cfg = cfg.model_config(catalog.codebook_sizes.clone(), catalog.has_pad);
    let data = TrainData::from_split(&split, &catalog, model_cfg.max_seq_len)?;
    run.ensure("checkpoints")?;
    let ck_dir = run.file("checkpoints");
    let t0 = Instant::now();
    let mut trainer = if resume && ck_dir.join(LAST_CHECKPOINT).exists() {
        let t = Trainer::resume(&ck_dir, data)?;
        if t.config != cfg.train_config() || t.state.config != model_cfg {
            return Err(usage("--resume", "checkpoint was written with a different configuration"));
        }
        info!("resuming after epoch {}", t.progress.epochs_done);
        t
    } else {
        Trainer::new(model_cfg, cfg.train_config(), data)?.with_checkpoint_dir(&ck_dir)
    };
    let mut m = run.manifest(cfg)?;
    let mut ran = 0;
    while !trainer.finished() && epoch_limit.is_none_or(|l| ran < l) {
        trainer.run_epoch()?;
        ran += 1;
        m.schedule_trace = trainer.progress.trace.clone();
        m.save(&run.path)?;
    }
    if !trainer.finished() {
        trainer.save_last()?;
        return Ok(TrainSummary {
            epochs: trainer.progress.epochs_done,
            finished: false,
            final_checkpoint: None,
            checkpoint_hash: None,
            best_val_ndcg10: trainer.best().map(|b| b.val_ndcg10),
        });
    }
    let final_state = ModelState {
        config: trainer.state.config.clone(),
        params: trainer.final_params().clone(),
        optimizer: trainer.state.optimizer.clone(),
    };
    let final_path = run.file(FINAL_CHECKPOINT);
    save_checkpoint(
        &Checkpoint {
            state: final_state,
            extra: serde_json::json!({ "best": trainer.best(), "epochs": trainer.progress.epochs_done }),
        },
        &final_path,
    )?;
    let series: Vec<(usize, f64)> = trainer.progress.trace.iter().map(|r| (r.epoch, r.val_ndcg10)).collect();
    run.ensure("plots")?;
    write_plot_csv(&run.file("plots/val_ndcg10.csv"), "val_ndcg10", &series)?;

    let mut files = vec![FINAL_CHECKPOINT, "checkpoints/last.ckpt"];
    if run.file(&format!("checkpoints/{BEST_CHECKPOINT}")).exists() {
        files.push("checkpoints/best.ckpt");
    }
    let outputs = hash_outputs(&run.path, &files)?;
    let checkpoint_hash = outputs[FINAL_CHECKPOINT].clone();
    let input_hash = combine_hashes([
        ("split", hash_file(&run.file(SPLIT))?.as_str()),
        ("catalog", hash_file(&run.file(CATALOG))?.as_str()),
        ("config", cfg.to_toml().as_str()),
    ]);
    m.schedule_trace = trainer.progress.trace.clone();
    for f in &files {
        if !m.checkpoints.iter().any(|c| c == f) {
            m.checkpoints.push(f.to_string());
        }
    }
    m.stages.push(StageRecord {
        stage: "train".into(),
        input_hash,
        outputs,
        seconds: t0.elapsed().as_secs_f64(),
    });
    m.save(&run.path)?;
    Ok(TrainSummary {
        epochs: trainer.progress.epochs_done,
        finished: true,
        final_checkpoint: Some(final_path),
        checkpoint_hash: Some(checkpoint_hash),
        best_val_ndcg10: trainer.best().map(|b| b.val_ndcg10),
    })
}

fn load_model(run: &RunDir, checkpoint: Option<&Path>, catalog: &Catalog) -> Result<(ModelState, String)> {
    let path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => run.require(FINAL_CHECKPOINT, "train")?,
    };
    let ck = load_checkpoint(&path)?;
    if ck.state.config.codebook_sizes != catalog.codebook_sizes || ck.state.config.pad != catalog.has_pad {
        return Err(usage(
            "checkpoint",
            format!(
                "checkpoint codebooks {:?} (pad {}) do not match the catalog {:?} (pad {})",
                ck.state.config.codebook_sizes, ck.state.config.pad, catalog.codebook_sizes, catalog.has_pad
            ),
        ));
    }
    let id = hash_file(&path)?[..16].to_string();
    Ok((ck.state, id))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub report: mhl_core::eval::MetricsReport,
    pub pilot: Option<mhl_core::eval::PilotResult>,
}

pub fn cmd_evaluate(cfg: &RunConfig, run: &RunDir, checkpoint: Option<&Path>, pilot: bool) -> Result<EvalSummary> {
    let split = load_split(run)?;
    let catalog = load_catalog(run)?;
    let (state, ck_id) = load_model(run, checkpoint, &catalog)?;
    let graph = match cfg.decoder() {
        mhl_core::decode::Decoder::Beam(_) => Some(load_graph(run)?),
        mhl_core::decode::Decoder::Exact => None,
    };
    let dctx = DecodeContext::new(&catalog, graph.as_ref(), cfg.decoder())?;
    let t0 = Instant::now();
    let cases = eval_cases(&split, &catalog, Target::Test)?;
    let mut report = evaluate(&state.params, &state.config, &cases, &dctx, &cfg.eval.ks, Protocol::Full)?;
    report.seed = Some(cfg.train.seed);
    report.checkpoint = Some(ck_id.clone());
    run.ensure("eval")?;
    report.save(&run.file("eval/metrics.json"))?;
    let pilot = if pilot {
        let mut p = pilot_truncation(&state.params, &state.config, &split, &dctx, cfg.truncation())?;
        p.full.seed = Some(cfg.train.seed);
        p.truncated.seed = Some(cfg.train.seed);
        fs::write(run.file("eval/pilot.json"), serde_json::to_vec_pretty(&p)?)?;
        Some(p)
    } else {
        None
    };
    let mut m = run.manifest(cfg)?;
    m.metrics.push(MetricsEntry {
        name: "test".into(),
        checkpoint: ck_id.clone(),
        report: report.clone(),
    });
    if let Some(p) = &pilot {
        m.metrics.push(MetricsEntry {
            name: "pilot_full".into(),
            checkpoint: ck_id.clone(),
            report: p.full.clone(),
        });
        m.metrics.push(MetricsEntry {
            name: "pilot_truncated".into(),
            checkpoint: ck_id.clone(),
            report: p.truncated.clone(),
        });
        m.pilot_relative_ndcg10.push(p.relative_ndcg10_change);
    }
    let mut files = vec!["eval/metrics.json"];
    if pilot.is_some() {
        files.push("eval/pilot.json");
    }
    m.stages.push(StageRecord {
        stage: "evaluate".into(),
        input_hash: ck_id,
        outputs: hash_outputs(&run.path, &files)?,
        seconds: t0.elapsed().as_secs_f64(),
    });
    m.save(&run.path)?;
    Ok(EvalSummary { report, pilot })
}

#[derive(Deserialize)]
struct ContextLine {
    user_id: String,
    item_ids: Vec<String>,
}

/// Ranks the catalog for each context and writes `decode/rankings.jsonl`.
pub fn cmd_decode(
    cfg: &RunConfig,
    run: &RunDir,
    checkpoint: Option<&Path>,
    contexts: Option<&Path>,
    topk: usize,
    limit: Option<usize>,
) -> Result<PathBuf> {
    if topk == 0 {
        return Err(usage("--topk", "must be >= 1"));
    }
    let catalog = load_catalog(run)?;
    let (state, _) = load_model(run, checkpoint, &catalog)?;
    let inputs: Vec<(String, Vec<String>)> = match contexts {
        Some(p) => read_lines(p)?
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let c: ContextLine = serde_json::from_str(l).map_err(|e| mhl_core::Error::Parse {
                    path: p.into(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
                Ok((c.user_id, c.item_ids))
            })
            .collect::<Result<_>>()?,
        None => load_split(run)?
            .users
            .iter()
            .filter_map(|u| u.test_context().map(|(ctx, _)| (u.user_id.clone(), ctx)))
            .collect(),
    };
    let inputs = &inputs[..limit.unwrap_or(inputs.len()).min(inputs.len())];
    let graph = match cfg.decoder() {
        mhl_core::decode::Decoder::Beam(_) => Some(load_graph(run)?),
        mhl_core::decode::Decoder::Exact => None,
    };
    let dctx = DecodeContext::new(&catalog, graph.as_ref(), cfg.decoder())?;
    let mut records = Vec::with_capacity(inputs.len());
    for (user, items) in inputs {
        let codes = items
            .iter()
            .map(|i| {
                catalog.index_of(i).map(|x| catalog.codes[x].clone()).ok_or_else(|| {
                    anyhow!(mhl_core::Error::InvalidArgument {
                        field: "context",
                        message: format!("item {i} of {user} is not in the catalog"),
                    })
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let lp = NextLogProbs::compute(&state.params, &state.config, &codes)?;
        let ranked = dctx.rank(&lp, topk)?;
        records.push(DecodeRecord {
            user_id: user.clone(),
            item_ids: ranked.iter().map(|s| catalog.item_ids[s.index].clone()).collect(),
            scores: ranked.iter().map(|s| s.score).collect(),
        });
    }
    run.ensure("decode")?;
    let out = run.file("decode/rankings.jsonl");
    write_decode_jsonl(&out, &records)?;
    Ok(out)
}

fn flatten(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, String>) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, x) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    /// Config keys whose values differ between the joined runs.
    pub delta_keys: Vec<String>,
}

impl ReportTable {
    pub fn to_markdown(&self) -> String {
        let mut s = format!("| {} |\n", self.header.join(" | "));
        s += &format!("|{}\n", "---|".repeat(self.header.len()));
        for r in &self.rows {
            s += &format!("| {} |\n", r.join(" | "));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let esc = |c: &String| {
            if c.contains([',', '"']) {
                format!("\"{}\"", c.replace('"', "\"\""))
            } else {
                c.clone()
            }
        };
        let mut s = self.header.iter().map(esc).collect::<Vec<_>>().join(",") + "\n";
        for r in &self.rows {
            s += &(r.iter().map(esc).collect::<Vec<_>>().join(",") + "\n");
        }
        s
    }
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4}"))
}

/// Joins run manifests into one comparison table. Config values that
/// differ between runs are listed per row (marked with `*` in the header).
pub fn cmd_report(inputs: &[PathBuf], out_dir: &Path) -> Result<ReportTable> {
    if inputs.is_empty() {
        return Err(usage("report", "need one or more manifests or run directories"));
    }
    let manifests = inputs
        .iter()
        .map(|p| {
            let path = if p.is_dir() { p.join(MANIFEST_FILE) } else { p.clone() };
            RunManifest::load(&path)
        })
        .collect::<Result<Vec<_>>>()?;
    let flat: Vec<BTreeMap<String, String>> = manifests
        .iter()
        .map(|m| {
            let mut f = BTreeMap::new();
            flatten("", &m.config, &mut f);
            f
        })
        .collect();
    let all_keys: BTreeSet<&String> = flat.iter().flat_map(|f| f.keys()).collect();
    let delta_keys: Vec<String> = all_keys
        .into_iter()
        .filter(|k| flat.iter().map(|f| f.get(*k)).collect::<HashSet<_>>().len() > 1)
        .cloned()
        .collect();

    let header: Vec<String> = [
        "run", "strategy", "epochs", "best val N@10", "R@5", "N@5", "R@10", "N@10", "pilot dN@10 %", "config deltas *",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let mut rows = Vec::new();
    fs::create_dir_all(out_dir.join("plots"))?;
    for (m, f) in manifests.iter().zip(&flat) {
        let test = m.metrics.iter().rev().find(|e| e.name == "test").map(|e| &e.report);
        let best = m
            .schedule_trace
            .iter()
            .map(|r| r.val_ndcg10)
            .fold(None, |a: Option<f64>, v| Some(a.map_or(v, |a| a.max(v))));
        let strategy = match f.get("train.gamma0").map(String::as_str) {
            Some("0.0") | Some("0") => "Inf".to_string(),
            _ => f
                .get("train.strategy")
                .and_then(|s| serde_json::from_str::<mhl_core::curriculum::Strategy>(s).ok())
                .map_or("-".into(), |s| s.label().to_string()),
        };
        let deltas = delta_keys
            .iter()
            .map(|k| format!("{k}={}", f.get(k).map_or("-", String::as_str).trim_matches('"')))
            .collect::<Vec<_>>()
            .join("; ");
        rows.push(vec![
            m.run_id.clone(),
            strategy,
            m.schedule_trace.len().to_string(),
            fmt_metric(best),
            fmt_metric(test.and_then(|r| r.recall(5))),
            fmt_metric(test.and_then(|r| r.ndcg(5))),
            fmt_metric(test.and_then(|r| r.recall(10))),
            fmt_metric(test.and_then(|r| r.ndcg(10))),
            m.pilot_relative_ndcg10
                .last()
                .map_or("-".into(), |p| p.map_or("undefined".into(), |x| format!("{x:+.1}"))),
            deltas,
        ]);
        let series: Vec<(usize, f64)> = m.schedule_trace.iter().map(|r| (r.epoch, r.val_ndcg10)).collect();
        write_plot_csv(
            &out_dir.join(format!("plots/{}_val_ndcg10.csv", m.run_id)),
            "val_ndcg10",
            &series,
        )?;
        let gamma: Vec<(usize, f64)> = m.schedule_trace.iter().map(|r| (r.epoch, r.gamma)).collect();
        write_plot_csv(&out_dir.join(format!("plots/{}_gamma.csv", m.run_id)), "gamma", &gamma)?;
    }
    let table = ReportTable {
        header,
        rows,
        delta_keys,
    };
    let mut f = File::create(out_dir.join("table.md"))?;
    f.write_all(table.to_markdown().as_bytes())?;
    fs::write(out_dir.join("table.csv"), table.to_csv())?;
    Ok(table)
}

/// Default run root: `$MHL_RUN_ROOT`, else `./runs`.
pub fn default_run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

pub fn ensure_no_stray_args(extra: &[String]) -> Result<()> {
    if let Some(a) = extra.first() {
        bail!(usage("args", format!("unexpected argument {a}")));
    }
    Ok(())
}
