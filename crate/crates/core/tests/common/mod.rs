//! Shared fixtures and independent oracles for the integration suites.
#![allow(dead_code)]

use mhl_core::masking::{apply_mask, plan_random, Granularity};
use mhl_core::model::{batch_gradients, LossWeights, ModelConfig, Params, TrainSequence};
use mhl_core::SemanticId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn toy_config(hidden: usize, positions: usize, codebook: usize) -> ModelConfig {
    ModelConfig {
        codebook_sizes: vec![codebook; positions],
        pad: false,
        hidden_size: hidden,
        n_layers: 2,
        n_heads: 4,
        ffn_dim: 2 * hidden,
        max_seq_len: 16,
        dropout: 0.1,
        temperature: 1.0,
        // Larger than the training default so that attention and layer
        // norms operate away from their near-uniform regime.
        init_std: 0.3,
    }
}

pub fn random_codes(rng: &mut ChaCha8Rng, t: usize, cfg: &ModelConfig) -> Vec<SemanticId> {
    (0..t)
        .map(|_| {
            SemanticId(
                cfg.codebook_sizes
                    .iter()
                    .map(|&w| rng.random_range(0..w as u32))
                    .collect(),
            )
        })
        .collect()
}

/// Three sequences with token, item and mixed random masks and dropout on.
pub fn toy_batch(cfg: &ModelConfig, seed: u64) -> Vec<TrainSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    [(6, Granularity::Token), (5, Granularity::Item), (7, Granularity::Mixed)]
        .into_iter()
        .enumerate()
        .map(|(i, (t, g))| {
            let codes = random_codes(&mut rng, t, cfg);
            let plan = plan_random(t, cfg.positions(), 0.4, g, &mut rng).unwrap();
            let m = apply_mask(cfg, &codes, &plan).unwrap();
            TrainSequence {
                codes: m.codes,
                masked: Some(m.masked),
                recon_targets: m.targets,
                dropout_seed: Some(1000 + i as u64),
            }
        })
        .collect()
}

pub fn batch_loss(params: &Params, cfg: &ModelConfig, batch: &[TrainSequence], w: LossWeights) -> f64 {
    batch_gradients(params, cfg, batch, w).unwrap().loss
}

pub const GRAD_FLOOR: f64 = 1e-5;

pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst: String,
}

/// Central finite differences on `n_samples` parameter entries. Half the
/// samples come from entries with a non-zero analytic gradient so that
/// unused embedding rows do not dominate.
pub fn finite_difference_check(
    cfg: &ModelConfig,
    params: &Params,
    batch: &[TrainSequence],
    w: LossWeights,
    n_samples: usize,
    eps: f64,
    seed: u64,
) -> GradCheck {
    let analytic = batch_gradients(params, cfg, batch, w).unwrap().grads;
    let grads = analytic.tensors();
    let mut candidates: Vec<(usize, usize)> = Vec::new();
    let mut nonzero: Vec<(usize, usize)> = Vec::new();
    for (ti, t) in grads.iter().enumerate() {
        for (i, g) in t.data.iter().enumerate() {
            candidates.push((ti, i));
            if *g != 0.0 {
                nonzero.push((ti, i));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<(usize, usize)> = Vec::with_capacity(n_samples);
    // Every tensor that receives gradient gets at least one sample.
    for ti in 0..grads.len() {
        let in_tensor: Vec<_> = nonzero.iter().filter(|(t, _)| *t == ti).copied().collect();
        if !in_tensor.is_empty() {
            picks.push(in_tensor[rng.random_range(0..in_tensor.len())]);
        }
    }
    while picks.len() < n_samples {
        let pool = if picks.len() % 2 == 0 { &nonzero } else { &candidates };
        picks.push(pool[rng.random_range(0..pool.len())]);
    }

    let mut worst = (0.0f64, String::new());
    for &(ti, i) in &picks {
        let name = grads[ti].name.clone();
        let a = grads[ti].data[i];
        let mut plus = params.clone();
        plus.tensors_mut()[ti].data[i] += eps;
        let mut minus = params.clone();
        minus.tensors_mut()[ti].data[i] -= eps;
        let numeric = (batch_loss(&plus, cfg, batch, w) - batch_loss(&minus, cfg, batch, w)) / (2.0 * eps);
        // Central differences on an O(1) loss resolve gradients only down
        // to ~1e-10 (f64 roundoff / eps); the floor keeps exactly-zero
        // gradients such as the key bias from dividing noise by noise.
        let denom = a.abs().max(numeric.abs()).max(GRAD_FLOOR);
        let rel = (a - numeric).abs() / denom;
        if rel > worst.0 {
            worst = (rel, format!("{name}[{i}]: analytic {a:e} numeric {numeric:e}"));
        }
    }
    GradCheck {
        max_rel_error: worst.0,
        checked: picks.len(),
        worst: worst.1,
    }
}

/// Synthetic corpus tokenized into a catalog and split leave-one-out.
pub struct SynthSetup {
    pub catalog: mhl_core::Catalog,
    pub split: mhl_core::corpus::SplitCorpus,
}

pub fn synth_setup(users: usize, items: usize, positions: usize, codebook: usize, seed: u64) -> SynthSetup {
    use mhl_core::corpus::{split_leave_one_out, synth_generate, SynthConfig};
    use mhl_core::tokenizer::{fit_tokenizer, PqConfig};
    let data = synth_generate(&SynthConfig {
        n_users: users,
        n_items: items,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    let pq = PqConfig {
        positions,
        codebook_size: codebook,
        seed,
        ..PqConfig::default()
    };
    let (_, ids) = fit_tokenizer(&data.item_features, 4 * positions, &pq).unwrap();
    let catalog = mhl_core::Catalog::new(data.item_ids.clone(), ids, vec![codebook; positions], false).unwrap();
    SynthSetup {
        catalog,
        split: split_leave_one_out(&data.corpus).unwrap(),
    }
}
