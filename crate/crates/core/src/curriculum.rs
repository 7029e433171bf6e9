//! Three-phase masking curriculum: random-mask warm-up, masked training
//! with a ratio that decays on validation plateaus, and mask-free
//! fine-tuning with early stopping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::Granularity;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "I")]
    Warmup,
    #[serde(rename = "II")]
    Masked,
    #[serde(rename = "III")]
    Finetune,
}

/// Masking strategy of a run; the six rows of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// No masking at all (plain next-item training).
    NoMask,
    /// Random masking at a fixed ratio for the whole run.
    Random,
    /// Entropy-guided masking at a fixed ratio for the whole run.
    Entropy,
    /// Random masking, ratio decays to zero, then fine-tuning.
    RandomToInf,
    /// Entropy-guided masking, ratio decays to zero, then fine-tuning.
    EntropyToInf,
    /// Random warm-up, entropy-guided masking with decay, fine-tuning.
    RandomEntropyInf,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::NoMask,
        Strategy::Random,
        Strategy::Entropy,
        Strategy::RandomToInf,
        Strategy::EntropyToInf,
        Strategy::RandomEntropyInf,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Strategy::NoMask => "Inf",
            Strategy::Random => "R",
            Strategy::Entropy => "E",
            Strategy::RandomToInf => "R->Inf",
            Strategy::EntropyToInf => "E->Inf",
            Strategy::RandomEntropyInf => "R->E->Inf",
        }
    }

    fn main_policy(self) -> PolicyKind {
        match self {
            Strategy::NoMask => PolicyKind::None,
            Strategy::Random | Strategy::RandomToInf => PolicyKind::Random,
            Strategy::Entropy | Strategy::EntropyToInf | Strategy::RandomEntropyInf => {
                PolicyKind::Entropy
            }
        }
    }

    fn decays(self) -> bool {
        matches!(
            self,
            Strategy::RandomToInf | Strategy::EntropyToInf | Strategy::RandomEntropyInf
        )
    }

    fn has_warmup(self) -> bool {
        self == Strategy::RandomEntropyInf
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumConfig {
    pub strategy: Strategy,
    pub gamma0: f64,
    pub granularity: Granularity,
    pub warmup_epochs: usize,
    /// Stale evaluations before the ratio decays.
    pub plateau_patience: usize,
    /// Stale fine-tuning evaluations before stopping.
    pub finetune_patience: usize,
    /// Ratio decrement per plateau, as a fraction of `gamma0`.
    pub decay_fraction: f64,
    /// An evaluation improves only if it beats the best by more than this.
    pub min_improvement: f64,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig {
            strategy: Strategy::RandomEntropyInf,
            gamma0: 0.15,
            granularity: Granularity::Token,
            warmup_epochs: 5,
            plateau_patience: 5,
            finetune_patience: 20,
            decay_fraction: 0.1,
            min_improvement: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Random,
    Entropy,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskPolicy {
    pub policy: PolicyKind,
    pub gamma: f64,
    pub granularity: Granularity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub config: CurriculumConfig,
    pub phase: Phase,
    pub gamma: f64,
    pub n_decays: usize,
    pub warmup_remaining: usize,
    pub plateau_counter: usize,
    pub best_val: Option<f64>,
    pub finetune_counter: usize,
    /// Number of completed `advance` calls.
    pub epoch: usize,
}

/// Starts a schedule. `NoMask` (or `gamma0 == 0` with that strategy) starts
/// directly in fine-tuning; every other strategy needs `gamma0 ∈ (0, 1]`.
pub fn init_schedule(config: CurriculumConfig) -> Result<ScheduleState> {
    if config.strategy == Strategy::NoMask {
        return Ok(ScheduleState {
            phase: Phase::Finetune,
            gamma: 0.0,
            n_decays: 0,
            warmup_remaining: 0,
            plateau_counter: 0,
            best_val: None,
            finetune_counter: 0,
            epoch: 0,
            config,
        });
    }
    if !(config.gamma0 > 0.0 && config.gamma0 <= 1.0) {
        return Err(Error::invalid(
            "gamma0",
            format!("{} not in (0, 1]", config.gamma0),
        ));
    }
    if config.decay_fraction <= 0.0 || config.decay_fraction > 1.0 {
        return Err(Error::invalid("decay_fraction", "must be in (0, 1]"));
    }
    if config.plateau_patience == 0 || config.finetune_patience == 0 {
        return Err(Error::invalid("patience", "must be >= 1"));
    }
    let phase = if config.strategy.has_warmup() {
        Phase::Warmup
    } else {
        Phase::Masked
    };
    Ok(ScheduleState {
        phase,
        gamma: config.gamma0,
        n_decays: 0,
        warmup_remaining: if phase == Phase::Warmup { config.warmup_epochs } else { 0 },
        plateau_counter: 0,
        best_val: None,
        finetune_counter: 0,
        epoch: 0,
        config,
    })
}

pub fn current_policy(state: &ScheduleState) -> MaskPolicy {
    let granularity = state.config.granularity;
    match state.phase {
        Phase::Warmup => MaskPolicy {
            policy: PolicyKind::Random,
            gamma: state.config.gamma0,
            granularity,
        },
        Phase::Masked => MaskPolicy {
            policy: state.config.strategy.main_policy(),
            gamma: state.gamma,
            granularity,
        },
        Phase::Finetune => MaskPolicy {
            policy: PolicyKind::None,
            gamma: 0.0,
            granularity,
        },
    }
}

/// Decays needed for the ratio to reach zero.
fn decays_to_zero(fraction: f64) -> usize {
    (1.0 / fraction - 1e-9).ceil() as usize
}

impl ScheduleState {
    fn improves(&self, metric: f64) -> bool {
        match self.best_val {
            None => true,
            Some(best) => metric > best + self.config.min_improvement,
        }
    }

    /// Consumes one validation result. Returns the next state and whether
    /// training should stop.
    pub fn advance(&self, val_metric: f64) -> Result<(ScheduleState, bool)> {
        if !val_metric.is_finite() {
            return Err(Error::NonFinite("validation metric".into()));
        }
        let mut s = self.clone();
        s.epoch += 1;
        let mut stop = false;
        match s.phase {
            Phase::Warmup => {
                s.warmup_remaining = s.warmup_remaining.saturating_sub(1);
                if s.warmup_remaining == 0 {
                    s.phase = Phase::Masked;
                }
            }
            Phase::Masked => {
                if s.improves(val_metric) {
                    s.best_val = Some(val_metric);
                    s.plateau_counter = 0;
                } else {
                    s.plateau_counter += 1;
                    if s.plateau_counter >= s.config.plateau_patience && s.config.strategy.decays() {
                        s.plateau_counter = 0;
                        s.n_decays += 1;
                        if s.n_decays >= decays_to_zero(s.config.decay_fraction) {
                            s.gamma = 0.0;
                            s.phase = Phase::Finetune;
                            s.finetune_counter = 0;
                            s.best_val = None;
                        } else {
                            let step = s.config.decay_fraction * s.config.gamma0;
                            s.gamma = (s.config.gamma0 - step * s.n_decays as f64).max(0.0);
                        }
                    } else if s.plateau_counter >= s.config.plateau_patience {
                        // Fixed-ratio strategies never decay.
                        s.plateau_counter = 0;
                    }
                }
            }
            Phase::Finetune => {
                if s.improves(val_metric) {
                    s.best_val = Some(val_metric);
                    s.finetune_counter = 0;
                } else {
                    s.finetune_counter += 1;
                    if s.finetune_counter >= s.config.finetune_patience {
                        stop = true;
                    }
                }
            }
        }
        Ok((s, stop))
    }
}
