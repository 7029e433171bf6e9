//! Run configuration: one TOML file layered over a named preset, plus
//! `section.key=value` overrides from the command line.

use std::fmt;
use std::path::{Path, PathBuf};

use mhl_core::corpus::{InteractionFormat, SynthConfig};
use mhl_core::curriculum::{CurriculumConfig, Strategy};
use mhl_core::decode::{BeamConfig, Decoder};
use mhl_core::eval::TruncationConfig;
use mhl_core::masking::{Granularity, Smoothing};
use mhl_core::model::{LossWeights, ModelConfig};
use mhl_core::tokenizer::PqConfig;
use mhl_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// A configuration problem, always naming the offending field.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config field `{}`: {}", self.field, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn bad(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        field: field.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synth,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    /// Interaction log (file source).
    pub path: Option<PathBuf>,
    pub format: InteractionFormat,
    /// Item feature matrix (file source without external tokens).
    pub features: Option<PathBuf>,
    /// Item id list matching the feature matrix rows, one per line.
    pub feature_ids: Option<PathBuf>,
    /// Precomputed semantic IDs, JSON lines of `{item_id, tokens}`.
    pub item_tokens: Option<PathBuf>,
    /// Core-k filter threshold; 0 disables filtering.
    pub min_count: usize,
    pub synth: SynthConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerSection {
    pub positions: usize,
    pub codebook_size: usize,
    pub pca_dim: usize,
    pub kmeans_iters: usize,
    pub opq: bool,
    pub opq_rounds: usize,
    pub graph_edges: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub temperature: f64,
    pub init_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lambda_next: f64,
    pub lambda_mask: f64,
    pub strategy: Strategy,
    pub granularity: Granularity,
    /// Initial mask ratio; 0 trains without masking.
    pub gamma0: f64,
    pub warmup_epochs: usize,
    pub plateau_patience: usize,
    pub finetune_patience: usize,
    pub decay_fraction: f64,
    pub smoothing: bool,
    pub smoothing_window: usize,
    pub smoothing_decay: f64,
    pub smoothing_mix: f64,
    pub lr: f64,
    pub min_lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub warmup_steps: u64,
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMethod {
    Exact,
    Beam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeSection {
    pub method: DecodeMethod,
    pub beam_size: usize,
    pub steps: usize,
    pub seeds_per_position: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub ks: Vec<usize>,
    pub truncation_min_len: usize,
    pub truncation_drop_last: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub data: DataSection,
    pub tokenizer: TokenizerSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub decode: DecodeSection,
    pub eval: EvalSection,
}

pub const PRESETS: [&str; 2] = ["desk", "paper-appendixC"];

impl RunConfig {
    /// Small synthetic setup that trains on a laptop CPU.
    pub fn desk() -> Self {
        RunConfig {
            preset: "desk".into(),
            data: DataSection {
                source: DataSource::Synth,
                path: None,
                format: InteractionFormat::Tsv,
                features: None,
                feature_ids: None,
                item_tokens: None,
                min_count: 0,
                synth: SynthConfig::default(),
            },
            tokenizer: TokenizerSection {
                positions: 8,
                codebook_size: 64,
                pca_dim: 32,
                kmeans_iters: 25,
                opq: false,
                opq_rounds: 8,
                graph_edges: 50,
                seed: 0,
            },
            model: ModelSection {
                hidden_size: 64,
                n_layers: 2,
                n_heads: 4,
                ffn_dim: 128,
                max_seq_len: 50,
                dropout: 0.1,
                temperature: 1.0,
                init_std: 0.02,
            },
            train: TrainSection {
                lambda_next: 1.0,
                lambda_mask: 1.0,
                strategy: Strategy::RandomEntropyInf,
                granularity: Granularity::Token,
                gamma0: 0.15,
                warmup_epochs: 2,
                plateau_patience: 1,
                finetune_patience: 3,
                decay_fraction: 0.25,
                smoothing: true,
                smoothing_window: 3,
                smoothing_decay: 2.0,
                smoothing_mix: 0.2,
                lr: 2e-3,
                min_lr: 0.0,
                batch_size: 64,
                max_epochs: 80,
                seed: 0,
                weight_decay: 0.0,
                grad_clip: 1.0,
                warmup_steps: 50,
                checkpoint_every: 1,
            },
            decode: DecodeSection {
                method: DecodeMethod::Exact,
                beam_size: 50,
                steps: 3,
                seeds_per_position: 4,
            },
            eval: EvalSection {
                ks: vec![5, 10],
                truncation_min_len: 20,
                truncation_drop_last: 15,
            },
        }
    }

    /// Full-size values: 32 codebooks of 256, hidden 448, FFN 1024,
    /// dropout 0.3, lr 5e-4, batch 64, 10k warm-up steps, graph beam search.
    pub fn paper_appendix_c() -> Self {
        let mut c = Self::desk();
        c.preset = "paper-appendixC".into();
        c.data.source = DataSource::File;
        c.data.min_count = 5;
        c.tokenizer.positions = 32;
        c.tokenizer.codebook_size = 256;
        c.tokenizer.pca_dim = 256;
        c.tokenizer.opq = true;
        c.model = ModelSection {
            hidden_size: 448,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 1024,
            max_seq_len: 50,
            dropout: 0.3,
            temperature: 1.0,
            init_std: 0.02,
        };
        c.train.lr = 5e-4;
        c.train.warmup_steps = 10_000;
        c.train.max_epochs = 200;
        c.train.warmup_epochs = 5;
        c.train.plateau_patience = 5;
        c.train.finetune_patience = 20;
        c.train.decay_fraction = 0.1;
        c.decode.method = DecodeMethod::Beam;
        c
    }

    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper-appendixC" => Ok(Self::paper_appendix_c()),
            other => Err(bad(
                "preset",
                format!("unknown preset `{other}` (known: {})", PRESETS.join(", ")),
            )),
        }
    }

    /// Parses TOML text layered over its `preset` (default `desk`), applies
    /// `overrides` (`section.key=value`, value parsed as TOML) and validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| bad("<file>", e.to_string()))?;
        let preset_name = user
            .get("preset")
            .map(|v| v.as_str().map(str::to_string).ok_or_else(|| bad("preset", "must be a string")))
            .transpose()?
            .unwrap_or_else(|| "desk".to_string());
        let base = Self::preset(&preset_name)?;
        let mut merged = toml::Table::try_from(&base).map_err(|e| bad("<preset>", e.to_string()))?;
        merge(&mut merged, user);
        for o in overrides {
            apply_override(&mut merged, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| bad(&field_of(&e), e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| bad("--config", format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = &self.data;
        if d.source == DataSource::File {
            if d.path.is_none() {
                return Err(bad("data.path", "required when data.source = \"file\""));
            }
            if d.features.is_none() && d.item_tokens.is_none() {
                return Err(bad("data.features", "file data needs `features` or `item_tokens`"));
            }
            if d.features.is_some() && d.feature_ids.is_none() {
                return Err(bad("data.feature_ids", "required together with data.features"));
            }
        } else {
            d.synth.validate().map_err(|e| bad("data.synth", e.to_string()))?;
        }

        let t = &self.tokenizer;
        if t.positions == 0 {
            return Err(bad("tokenizer.positions", "must be >= 1"));
        }
        if t.codebook_size == 0 {
            return Err(bad("tokenizer.codebook_size", "must be >= 1"));
        }
        if t.pca_dim == 0 || t.pca_dim % t.positions != 0 {
            return Err(bad(
                "tokenizer.pca_dim",
                format!("must be a positive multiple of positions ({})", t.positions),
            ));
        }
        if t.kmeans_iters == 0 {
            return Err(bad("tokenizer.kmeans_iters", "must be >= 1"));
        }
        if t.graph_edges == 0 {
            return Err(bad("tokenizer.graph_edges", "must be >= 1"));
        }

        self.model_config(vec![t.codebook_size; t.positions], false)
            .validate()
            .map_err(|e| bad("model", e.to_string()))?;

        let tr = &self.train;
        if !(0.0..=1.0).contains(&tr.gamma0) {
            return Err(bad("train.gamma0", "must be in [0, 1]"));
        }
        if tr.lambda_next < 0.0 || !tr.lambda_next.is_finite() {
            return Err(bad("train.lambda_next", "must be a finite value >= 0"));
        }
        if tr.lambda_mask < 0.0 || !tr.lambda_mask.is_finite() {
            return Err(bad("train.lambda_mask", "must be a finite value >= 0"));
        }
        if !(tr.lr > 0.0 && tr.lr.is_finite()) {
            return Err(bad("train.lr", "must be > 0"));
        }
        if tr.min_lr < 0.0 || tr.min_lr > tr.lr {
            return Err(bad("train.min_lr", "must be in [0, lr]"));
        }
        if tr.batch_size == 0 {
            return Err(bad("train.batch_size", "must be >= 1"));
        }
        if tr.max_epochs == 0 {
            return Err(bad("train.max_epochs", "must be >= 1"));
        }
        if tr.grad_clip < 0.0 {
            return Err(bad("train.grad_clip", "must be >= 0"));
        }
        if tr.weight_decay < 0.0 {
            return Err(bad("train.weight_decay", "must be >= 0"));
        }
        if tr.plateau_patience == 0 {
            return Err(bad("train.plateau_patience", "must be >= 1"));
        }
        if tr.finetune_patience == 0 {
            return Err(bad("train.finetune_patience", "must be >= 1"));
        }
        if !(tr.decay_fraction > 0.0 && tr.decay_fraction <= 1.0) {
            return Err(bad("train.decay_fraction", "must be in (0, 1]"));
        }
        if tr.smoothing {
            if tr.smoothing_window == 0 {
                return Err(bad("train.smoothing_window", "must be >= 1"));
            }
            if tr.smoothing_decay < 1.0 {
                return Err(bad("train.smoothing_decay", "must be >= 1"));
            }
            if !(0.0..=1.0).contains(&tr.smoothing_mix) {
                return Err(bad("train.smoothing_mix", "must be in [0, 1]"));
            }
        }
        if tr.gamma0 == 0.0 && !matches!(tr.strategy, Strategy::NoMask | Strategy::RandomEntropyInf) {
            return Err(bad("train.gamma0", "0 disables masking; set strategy = \"no_mask\""));
        }

        let dc = &self.decode;
        if dc.beam_size == 0 {
            return Err(bad("decode.beam_size", "must be >= 1"));
        }
        if dc.seeds_per_position == 0 {
            return Err(bad("decode.seeds_per_position", "must be >= 1"));
        }

        let e = &self.eval;
        if e.ks.is_empty() || e.ks.contains(&0) {
            return Err(bad("eval.ks", "need one or more cutoffs, each >= 1"));
        }
        if e.truncation_drop_last >= e.truncation_min_len {
            return Err(bad("eval.truncation_drop_last", "must be < truncation_min_len"));
        }
        Ok(())
    }

    pub fn model_config(&self, codebook_sizes: Vec<usize>, pad: bool) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            codebook_sizes,
            pad,
            hidden_size: m.hidden_size,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            ffn_dim: m.ffn_dim,
            max_seq_len: m.max_seq_len,
            dropout: m.dropout,
            temperature: m.temperature,
            init_std: m.init_std,
        }
    }

    /// Effective masking strategy: a zero initial ratio means no masking.
    pub fn strategy(&self) -> Strategy {
        if self.train.gamma0 == 0.0 {
            Strategy::NoMask
        } else {
            self.train.strategy
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            weights: LossWeights {
                next: t.lambda_next,
                mask: t.lambda_mask,
            },
            curriculum: CurriculumConfig {
                strategy: self.strategy(),
                gamma0: t.gamma0,
                granularity: t.granularity,
                warmup_epochs: t.warmup_epochs,
                plateau_patience: t.plateau_patience,
                finetune_patience: t.finetune_patience,
                decay_fraction: t.decay_fraction,
                min_improvement: 1e-6,
            },
            smoothing: t.smoothing.then_some(Smoothing {
                window: t.smoothing_window,
                decay: t.smoothing_decay,
                mix: t.smoothing_mix,
            }),
            lr: t.lr,
            min_lr: t.min_lr,
            warmup_steps: t.warmup_steps,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            weight_decay: t.weight_decay,
            grad_clip: (t.grad_clip > 0.0).then_some(t.grad_clip),
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
        }
    }

    pub fn pq_config(&self) -> PqConfig {
        let t = &self.tokenizer;
        PqConfig {
            positions: t.positions,
            codebook_size: t.codebook_size,
            iters: t.kmeans_iters,
            seed: t.seed,
            use_rotation: t.opq,
            rotation_rounds: t.opq_rounds,
        }
    }

    pub fn decoder(&self) -> Decoder {
        match self.decode.method {
            DecodeMethod::Exact => Decoder::Exact,
            DecodeMethod::Beam => Decoder::Beam(BeamConfig {
                beam_size: self.decode.beam_size,
                steps: self.decode.steps,
                seeds_per_position: self.decode.seeds_per_position,
                seed: self.train.seed,
            }),
        }
    }

    pub fn truncation(&self) -> TruncationConfig {
        TruncationConfig {
            min_len: self.eval.truncation_min_len,
            drop_last: self.eval.truncation_drop_last,
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| bad("--set", format!("`{assignment}` is not key=value")))?;
    let value: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        cur = match cur.get_mut(*p) {
            Some(toml::Value::Table(t)) => t,
            _ => return Err(bad(key, "unknown section")),
        };
    }
    let last = parts[parts.len() - 1];
    if !cur.contains_key(last) && !matches!(last, "path" | "features" | "feature_ids" | "item_tokens") {
        return Err(bad(key, "unknown field"));
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Best-effort field path from a TOML deserialization error.
fn field_of(e: &toml::de::Error) -> String {
    let msg = e.message();
    for marker in ["unknown field `", "missing field `"] {
        if let Some(rest) = msg.split(marker).nth(1) {
            return rest.split('`').next().unwrap_or("<config>").to_string();
        }
    }
    "<config>".to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        RunConfig::desk().validate().unwrap();
        let p = RunConfig::paper_appendix_c();
        // The full preset needs real data paths.
        assert_eq!(p.validate().unwrap_err().field, "data.path");
        assert_eq!(p.train.lr, 5e-4);
        assert_eq!(p.train.batch_size, 64);
        assert_eq!(p.train.warmup_steps, 10_000);
        assert_eq!(p.train.gamma0, 0.15);
        assert_eq!((p.decode.beam_size, p.tokenizer.graph_edges, p.decode.steps), (50, 50, 3));
    }

    #[test]
    fn overrides_and_zero_gamma() {
        let c = RunConfig::from_toml_str("", &["train.gamma0=0".into(), "train.lr=0.01".into()]).unwrap();
        assert_eq!(c.strategy(), Strategy::NoMask);
        assert_eq!(c.train.lr, 0.01);
        let e = RunConfig::from_toml_str("", &["train.nope=1".into()]).unwrap_err();
        assert_eq!(e.field, "train.nope");
    }
}
