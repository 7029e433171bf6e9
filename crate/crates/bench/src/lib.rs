//! Fixtures for the criterion benchmarks.

use mhl_core::masking::{apply_mask, plan_random, Granularity};
use mhl_core::model::{ModelConfig, TrainSequence};
use mhl_core::tensor::Mat;
use mhl_core::{Catalog, SemanticId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_ids(n: usize, positions: usize, codebook: usize, seed: u64) -> Vec<SemanticId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| SemanticId((0..positions).map(|_| rng.random_range(0..codebook as u32)).collect()))
        .collect()
}

pub fn random_catalog(n: usize, positions: usize, codebook: usize, seed: u64) -> Catalog {
    let ids = (0..n).map(|i| format!("i{i}")).collect();
    Catalog::new(ids, random_ids(n, positions, codebook, seed), vec![codebook; positions], false)
        .expect("valid catalog")
}

/// `n` sequences of length `len`, token-masked at ratio `gamma`.
pub fn masked_batch(cfg: &ModelConfig, n: usize, len: usize, gamma: f64, seed: u64) -> Vec<TrainSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let codes = random_ids(len, cfg.positions(), cfg.codebook_sizes[0], seed ^ i as u64);
            let plan = plan_random(len, cfg.positions(), gamma, Granularity::Token, &mut rng).expect("plan");
            let m = apply_mask(cfg, &codes, &plan).expect("mask");
            TrainSequence {
                codes: m.codes,
                masked: Some(m.masked),
                recon_targets: m.targets,
                dropout_seed: Some(i as u64),
            }
        })
        .collect()
}

pub fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Mat::zeros(rows, cols);
    for r in 0..rows {
        for v in m.row_mut(r) {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    m
}
