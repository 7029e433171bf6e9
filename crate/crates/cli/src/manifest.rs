//! Per-run manifest: config echo, content hashes of every stage's inputs
//! and outputs, the schedule trace, metrics, checkpoints and timings.
//! Commands only ever append to it.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use anyhow::{Context, Result};
use mhl_core::eval::MetricsReport;
use mhl_core::train::EpochRecord;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    /// Combined hash of the files the stage read.
    pub input_hash: String,
    /// Output file (relative to the run directory) to content hash.
    pub outputs: BTreeMap<String, String>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsEntry {
    pub name: String,
    pub checkpoint: String,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub tool_version: String,
    pub config: serde_json::Value,
    pub stages: Vec<StageRecord>,
    pub schedule_trace: Vec<EpochRecord>,
    pub metrics: Vec<MetricsEntry>,
    #[serde(default)]
    pub pilot_relative_ndcg10: Vec<Option<f64>>,
    pub checkpoints: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl RunManifest {
    pub fn new(run_id: &str, config: serde_json::Value) -> Self {
        RunManifest {
            run_id: run_id.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            stages: Vec::new(),
            schedule_trace: Vec::new(),
            metrics: Vec::new(),
            pilot_relative_ndcg10: Vec::new(),
            checkpoints: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).with_context(|| format!("opening manifest {}", path.display()))?;
        serde_json::from_reader(BufReader::new(f)).with_context(|| format!("parsing manifest {}", path.display()))
    }

    /// Loads `run_dir/manifest.json`, or starts a new one.
    pub fn open(run_dir: &Path, run_id: &str, config: serde_json::Value) -> Result<Self> {
        let path = run_dir.join(MANIFEST_FILE);
        if path.exists() {
            let mut m = Self::load(&path)?;
            m.config = config;
            Ok(m)
        } else {
            Ok(Self::new(run_id, config))
        }
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let path = run_dir.join(MANIFEST_FILE);
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(self)?)
            .with_context(|| format!("writing {}", tmp.display()))?;
        std::fs::rename(&tmp, &path).with_context(|| format!("writing {}", path.display()))
    }

    pub fn last_stage(&self, stage: &str) -> Option<&StageRecord> {
        self.stages.iter().rev().find(|s| s.stage == stage)
    }
}

pub fn hash_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).with_context(|| format!("hashing {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Hash over `(name, content hash)` pairs in order.
pub fn combine_hashes<'a>(parts: impl IntoIterator<Item = (&'a str, &'a str)>) -> String {
    let mut h = Sha256::new();
    for (name, digest) in parts {
        h.update(name.as_bytes());
        h.update([0]);
        h.update(digest.as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())
}

/// Hashes the given run-relative files.
pub fn hash_outputs(run_dir: &Path, files: &[&str]) -> Result<BTreeMap<String, String>> {
    files
        .iter()
        .map(|f| Ok((f.to_string(), hash_file(&run_dir.join(f))?)))
        .collect()
}

pub fn outputs_hash(outputs: &BTreeMap<String, String>) -> String {
    combine_hashes(outputs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
}
