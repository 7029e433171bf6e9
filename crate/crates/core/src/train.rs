//! Curriculum-driven training loop with per-epoch validation, best-model
//! tracking and resumable checkpoints.
//!
//! All randomness (shuffling, masks, dropout) is derived from
//! `(seed, epoch, sequence, purpose)`, so a run resumed from an epoch
//! boundary continues exactly as an uninterrupted one.

use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::SplitCorpus;
use crate::curriculum::{current_policy, init_schedule, CurriculumConfig, Phase, PolicyKind, ScheduleState};
use crate::decode::{rank_with, NextLogProbs};
use crate::error::{Error, Result};
use crate::eval::{eval_cases, evaluate_with, EvalCase, Protocol, Target};
use crate::masking::{apply_mask, compute_entropy, plan_entropy, plan_random, smooth_entropy, Smoothing};
use crate::model::{
    batch_gradients, load_checkpoint, save_checkpoint, AdamW, Checkpoint, LossWeights, LrSchedule,
    ModelConfig, ModelState, Params, TrainSequence,
};
use crate::tokenizer::{Catalog, SemanticId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub curriculum: CurriculumConfig,
    /// Causal entropy smoothing for entropy-guided plans; `None` uses raw
    /// entropies.
    pub smoothing: Option<Smoothing>,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Write the resumable checkpoint every this many epochs (0: only at
    /// the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: LossWeights::default(),
            curriculum: CurriculumConfig::default(),
            smoothing: None,
            lr: 5e-4,
            min_lr: 0.0,
            warmup_steps: 10_000,
            batch_size: 64,
            max_epochs: 200,
            weight_decay: 0.0,
            grad_clip: Some(1.0),
            seed: 0,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("train.lr", "must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("train.batch_size", "must be >= 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::invalid("train.max_epochs", "must be >= 1"));
        }
        if self.weights.next < 0.0 || self.weights.mask < 0.0 {
            return Err(Error::invalid("train.lambda", "loss weights must be >= 0"));
        }
        if self.grad_clip.is_some_and(|c| c <= 0.0) {
            return Err(Error::invalid("train.grad_clip", "must be > 0"));
        }
        init_schedule(self.curriculum.clone()).map(|_| ())
    }
}

/// Mixes a list of words into one seed (splitmix64 finalizer per word).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243f_6a88_85a3_08d3;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

const PURPOSE_SHUFFLE: u64 = 1;
const PURPOSE_MASK: u64 = 2;
const PURPOSE_DROPOUT: u64 = 3;
const PURPOSE_INIT: u64 = 4;

/// Catalog-indexed training sequences plus validation cases.
#[derive(Debug, Clone)]
pub struct TrainData<'a> {
    pub catalog: &'a Catalog,
    pub sequences: Vec<Vec<usize>>,
    pub validation: Vec<EvalCase>,
}

impl<'a> TrainData<'a> {
    /// Training prefixes (whole sequence for users without held-out items),
    /// each cut to its last `max_len` items. Sequences shorter than two
    /// items carry no next-item signal and are dropped.
    pub fn from_split(split: &SplitCorpus, catalog: &'a Catalog, max_len: usize) -> Result<Self> {
        let mut sequences = Vec::new();
        for u in &split.users {
            if u.train.len() < 2 {
                continue;
            }
            let start = u.train.len().saturating_sub(max_len);
            let seq = u.train[start..]
                .iter()
                .map(|i| {
                    catalog.index_of(i).ok_or_else(|| {
                        Error::invalid("catalog", format!("item {i} of user {} is missing", u.user_id))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            sequences.push(seq);
        }
        if sequences.is_empty() {
            return Err(Error::invalid("split", "no training sequence has two or more items"));
        }
        Ok(TrainData {
            catalog,
            sequences,
            validation: eval_cases(split, catalog, Target::Validation)?,
        })
    }

    fn codes(&self, seq: &[usize]) -> Vec<SemanticId> {
        seq.iter().map(|&i| self.catalog.codes[i].clone()).collect()
    }
}

/// One row of the schedule trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub policy: PolicyKind,
    pub gamma: f64,
    pub train_loss: f64,
    pub next_loss: f64,
    pub mask_loss: f64,
    pub val_ndcg10: f64,
    pub plateau_counter: usize,
    pub finetune_counter: usize,
    /// Reconstruction-loss terms evaluated this epoch.
    pub recon_evals: usize,
    /// Entropy maps computed this epoch.
    pub entropy_maps: usize,
    pub steps: u64,
    pub stop: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestInfo {
    pub epoch: usize,
    pub phase: Phase,
    pub val_ndcg10: f64,
}

/// Everything besides the parameters needed to resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainProgress {
    pub config: TrainConfig,
    pub schedule: ScheduleState,
    pub epochs_done: usize,
    pub trace: Vec<EpochRecord>,
    pub best: Option<BestInfo>,
    pub stopped: bool,
}

pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub data: TrainData<'a>,
    pub state: ModelState,
    pub progress: TrainProgress,
    best_params: Option<Params>,
    optimizer: AdamW,
    schedule: LrSchedule,
    checkpoint_dir: Option<PathBuf>,
}

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

fn validate_ndcg10(params: &Params, cfg: &ModelConfig, data: &TrainData<'_>) -> Result<f64> {
    if data.validation.is_empty() {
        return Err(Error::invalid("split", "no validation users"));
    }
    let report = evaluate_with(&data.validation, &[10], Protocol::Full, |c, topk| {
        let lp = NextLogProbs::compute(params, cfg, &data.codes(&c.context))?;
        Ok(rank_with(&lp, data.catalog, topk).into_iter().map(|s| s.index).collect())
    })?;
    Ok(report.ndcg(10).unwrap())
}

impl<'a> Trainer<'a> {
    pub fn new(model: ModelConfig, config: TrainConfig, data: TrainData<'a>) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        if model.codebook_sizes != data.catalog.codebook_sizes || model.pad != data.catalog.has_pad {
            return Err(Error::invalid(
                "model.codebook_sizes",
                "model codebooks do not match the catalog",
            ));
        }
        let state = ModelState::new(model, derive_seed(&[config.seed, PURPOSE_INIT]))?;
        let progress = TrainProgress {
            schedule: init_schedule(config.curriculum.clone())?,
            config: config.clone(),
            epochs_done: 0,
            trace: Vec::new(),
            best: None,
            stopped: false,
        };
        Ok(Self::assemble(config, data, state, progress, None))
    }

    fn assemble(
        config: TrainConfig,
        data: TrainData<'a>,
        state: ModelState,
        progress: TrainProgress,
        best_params: Option<Params>,
    ) -> Self {
        let steps_per_epoch = data.sequences.len().div_ceil(config.batch_size) as u64;
        let schedule = LrSchedule {
            peak: config.lr,
            warmup_steps: config.warmup_steps,
            total_steps: steps_per_epoch * config.max_epochs as u64,
            min_lr: config.min_lr,
        };
        let optimizer = AdamW {
            weight_decay: config.weight_decay,
            grad_clip: config.grad_clip,
            ..AdamW::default()
        };
        Trainer {
            config,
            data,
            state,
            progress,
            best_params,
            optimizer,
            schedule,
            checkpoint_dir: None,
        }
    }

    /// Writes `last.ckpt` / `best.ckpt` into `dir` as training proceeds.
    pub fn with_checkpoint_dir(mut self, dir: &Path) -> Self {
        self.checkpoint_dir = Some(dir.to_path_buf());
        self
    }

    /// Restores a trainer from the checkpoints in `dir`.
    pub fn resume(dir: &Path, data: TrainData<'a>) -> Result<Self> {
        let last = load_checkpoint(&dir.join(LAST_CHECKPOINT))?;
        let progress: TrainProgress = serde_json::from_value(last.extra)
            .map_err(|e| Error::Checkpoint(format!("training progress: {e}")))?;
        let best_params = if progress.best.is_some() {
            Some(load_checkpoint(&dir.join(BEST_CHECKPOINT))?.state.params)
        } else {
            None
        };
        let config = progress.config.clone();
        Ok(Self::assemble(config, data, last.state, progress, best_params).with_checkpoint_dir(dir))
    }

    pub fn finished(&self) -> bool {
        self.progress.stopped || self.progress.epochs_done >= self.config.max_epochs
    }

    /// The run's final model: best phase-III parameters, else the best
    /// parameters of any phase, else the current ones.
    pub fn final_params(&self) -> &Params {
        self.best_params.as_ref().unwrap_or(&self.state.params)
    }

    pub fn best(&self) -> Option<&BestInfo> {
        self.progress.best.as_ref()
    }

    fn build_sequence(&self, idx: usize, epoch: usize, policy: crate::curriculum::MaskPolicy) -> Result<(TrainSequence, bool)> {
        let cfg = &self.state.config;
        let codes = self.data.codes(&self.data.sequences[idx]);
        let seed = self.config.seed;
        let dropout_seed =
            (cfg.dropout > 0.0).then(|| derive_seed(&[seed, epoch as u64, idx as u64, PURPOSE_DROPOUT]));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, epoch as u64, idx as u64, PURPOSE_MASK]));
        let (plan, used_entropy) = match policy.policy {
            PolicyKind::None => {
                return Ok((
                    TrainSequence {
                        codes,
                        masked: None,
                        recon_targets: Vec::new(),
                        dropout_seed,
                    },
                    false,
                ))
            }
            PolicyKind::Random => (
                plan_random(codes.len(), cfg.positions(), policy.gamma, policy.granularity, &mut rng)?,
                false,
            ),
            PolicyKind::Entropy => {
                let mut map = compute_entropy(&self.state.params, cfg, &codes, cfg.temperature)?;
                if let Some(s) = self.config.smoothing {
                    map = smooth_entropy(&map, s)?;
                }
                (plan_entropy(&map, policy.gamma, policy.granularity, &mut rng)?, true)
            }
        };
        let m = apply_mask(cfg, &codes, &plan)?;
        Ok((
            TrainSequence {
                codes: m.codes,
                masked: Some(m.masked),
                recon_targets: m.targets,
                dropout_seed,
            },
            used_entropy,
        ))
    }

    /// Trains one epoch, validates and advances the schedule.
    pub fn run_epoch(&mut self) -> Result<&EpochRecord> {
        if self.finished() {
            return Err(Error::invalid("train", "run already finished"));
        }
        let epoch = self.progress.epochs_done;
        let policy = current_policy(&self.progress.schedule);
        let mut order: Vec<usize> = (0..self.data.sequences.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[
            self.config.seed,
            epoch as u64,
            PURPOSE_SHUFFLE,
        ])));

        let (mut loss_sum, mut next_sum, mut mask_sum) = (0.0, 0.0, 0.0);
        let (mut recon_evals, mut entropy_maps, mut steps) = (0usize, 0usize, 0u64);
        for chunk in order.chunks(self.config.batch_size) {
            let built: Vec<Result<(TrainSequence, bool)>> = chunk
                .par_iter()
                .map(|&i| self.build_sequence(i, epoch, policy))
                .collect();
            let mut batch = Vec::with_capacity(chunk.len());
            for b in built {
                let (seq, e) = b?;
                entropy_maps += usize::from(e);
                batch.push(seq);
            }
            let mut out = batch_gradients(&self.state.params, &self.state.config, &batch, self.config.weights)?;
            if !out.loss.is_finite() {
                return Err(self.numeric_failure(epoch, "loss"));
            }
            self.optimizer
                .step(&mut self.state.params, &mut out.grads, &mut self.state.optimizer, &self.schedule)
                .map_err(|e| match e {
                    Error::NonFinite(what) => self.numeric_failure(epoch, &what),
                    other => other,
                })?;
            loss_sum += out.loss;
            next_sum += out.next_loss;
            mask_sum += out.mask_loss;
            recon_evals += out.recon_evals;
            steps += 1;
        }
        let val = validate_ndcg10(&self.state.params, &self.state.config, &self.data)?;
        let phase = self.progress.schedule.phase;
        self.update_best(epoch, phase, val);
        let (next_schedule, stop) = self.progress.schedule.advance(val)?;
        let n = steps.max(1) as f64;
        let record = EpochRecord {
            epoch,
            phase,
            policy: policy.policy,
            gamma: policy.gamma,
            train_loss: loss_sum / n,
            next_loss: next_sum / n,
            mask_loss: mask_sum / n,
            val_ndcg10: val,
            plateau_counter: next_schedule.plateau_counter,
            finetune_counter: next_schedule.finetune_counter,
            recon_evals,
            entropy_maps,
            steps,
            stop,
        };
        info!(
            "epoch {epoch} phase {phase:?} gamma {:.4} loss {:.4} val ndcg@10 {val:.4}",
            policy.gamma, record.train_loss
        );
        self.progress.schedule = next_schedule;
        self.progress.epochs_done += 1;
        self.progress.stopped = stop;
        self.progress.trace.push(record);
        self.write_checkpoints()?;
        Ok(self.progress.trace.last().unwrap())
    }

    fn numeric_failure(&self, epoch: usize, what: &str) -> Error {
        let last_good = self
            .checkpoint_dir
            .as_ref()
            .map(|d| d.join(LAST_CHECKPOINT).display().to_string())
            .unwrap_or_else(|| "none".into());
        Error::NonFinite(format!("{what} in epoch {epoch}; last good checkpoint: {last_good}"))
    }

    fn update_best(&mut self, epoch: usize, phase: Phase, val: f64) {
        let replace = match &self.progress.best {
            None => true,
            Some(b) if phase == Phase::Finetune && b.phase != Phase::Finetune => true,
            Some(b) => (phase == Phase::Finetune) == (b.phase == Phase::Finetune) && val > b.val_ndcg10,
        };
        if replace {
            self.progress.best = Some(BestInfo {
                epoch,
                phase,
                val_ndcg10: val,
            });
            self.best_params = Some(self.state.params.clone());
            if let Some(dir) = &self.checkpoint_dir {
                let ck = Checkpoint {
                    state: self.state.clone(),
                    extra: serde_json::json!({ "best": self.progress.best }),
                };
                if let Err(e) = save_checkpoint(&ck, &dir.join(BEST_CHECKPOINT)) {
                    log::error!("could not write best checkpoint: {e}");
                }
            }
        }
    }

    fn write_checkpoints(&self) -> Result<()> {
        let Some(dir) = &self.checkpoint_dir else {
            return Ok(());
        };
        let every = self.config.checkpoint_every;
        let due = (every > 0 && self.progress.epochs_done % every == 0) || self.finished();
        if due {
            save_checkpoint(&self.resume_checkpoint()?, &dir.join(LAST_CHECKPOINT))?;
        }
        Ok(())
    }

    /// Writes `last.ckpt` now, regardless of `checkpoint_every`.
    pub fn save_last(&self) -> Result<()> {
        match &self.checkpoint_dir {
            Some(dir) => save_checkpoint(&self.resume_checkpoint()?, &dir.join(LAST_CHECKPOINT)),
            None => Ok(()),
        }
    }

    pub fn resume_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            state: self.state.clone(),
            extra: serde_json::to_value(&self.progress)?,
        })
    }

    /// Trains until the curriculum stops or `max_epochs` is reached.
    pub fn run(&mut self) -> Result<()> {
        while !self.finished() {
            self.run_epoch()?;
        }
        Ok(())
    }
}
