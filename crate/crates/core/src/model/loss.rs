use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forward::{forward, head_logits, ForwardCache, HeadSet, ModelInput};
use super::params::{Head, Params};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{axpy, log_softmax, Mat};
use crate::tokenizer::SemanticId;

/// Sequences per gradient chunk. Chunks are summed in index order, so the
/// result does not depend on the thread count.
const CHUNK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub next: f64,
    pub mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            next: 1.0,
            mask: 1.0,
        }
    }
}

/// Supervision target: the head for position `k` at decoder state `t`
/// should put its mass on `target`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TargetPair {
    pub t: usize,
    pub k: usize,
    pub target: u32,
}

/// Next-item targets: state `t` predicts codeword `k` of item `t + 1`.
/// Codewords that are masked in the input (or PAD) are not supervised.
pub fn next_item_pairs(
    cfg: &ModelConfig,
    codes: &[SemanticId],
    masked: Option<&[Vec<bool>]>,
) -> Vec<TargetPair> {
    let mut out = Vec::new();
    for t in 0..codes.len().saturating_sub(1) {
        for (k, &c) in codes[t + 1].0.iter().enumerate() {
            let pad = cfg.pad && c as usize == cfg.codebook_sizes[k];
            let hidden = masked.is_some_and(|m| m[t + 1][k]);
            if !pad && !hidden {
                out.push(TargetPair { t, k, target: c });
            }
        }
    }
    out
}

/// Sum of cross-entropies over `pairs`; when `grad` is given, adds
/// `scale · ∂CE/∂(·)` into the head gradients and into `d_states`.
fn head_cross_entropy(
    params: &Params,
    cfg: &ModelConfig,
    cache: &ForwardCache,
    set: HeadSet,
    pairs: &[TargetPair],
    mut grad: Option<(f64, &mut Params, &mut Mat)>,
) -> f64 {
    let tau = cfg.temperature;
    let mut total = 0.0;
    for p in pairs {
        let d = cache.state(p.t);
        let logits = head_logits(params, d, p.k, set);
        let logp = log_softmax(&logits, tau);
        total -= logp[p.target as usize];
        if let Some((scale, g, d_states)) = grad.as_mut() {
            // ∂CE/∂z = (softmax(z/τ) − onehot) / τ
            let mut dz: Vec<f64> = logp.iter().map(|lp| lp.exp()).collect();
            dz[p.target as usize] -= 1.0;
            dz.iter_mut().for_each(|v| *v *= *scale / tau);
            let (head, ghead): (&Head, &mut Head) = match set {
                HeadSet::Predict => (&params.predict_heads[p.k], &mut g.predict_heads[p.k]),
                HeadSet::Reconstruct => (&params.reconstruct_heads[p.k], &mut g.reconstruct_heads[p.k]),
            };
            axpy(1.0, &dz, &mut ghead.b);
            let dd = d_states.row_mut(p.t);
            for (i, &di) in d.iter().enumerate() {
                axpy(di, &dz, ghead.w.row_mut(i));
                dd[i] += crate::tensor::dot(head.w.row(i), &dz);
            }
        }
    }
    total
}

/// Mean digit-wise cross-entropy of the prediction heads over `pairs`.
pub fn loss_next(
    params: &Params,
    cfg: &ModelConfig,
    cache: &ForwardCache,
    pairs: &[TargetPair],
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptySupervision);
    }
    Ok(head_cross_entropy(params, cfg, cache, HeadSet::Predict, pairs, None) / pairs.len() as f64)
}

/// Mean cross-entropy of the reconstruction heads at masked codewords;
/// state `t` reconstructs item `t`'s own original codewords. Zero when
/// nothing is masked.
pub fn loss_mask(
    params: &Params,
    cfg: &ModelConfig,
    cache: &ForwardCache,
    masked_targets: &[TargetPair],
) -> f64 {
    if masked_targets.is_empty() {
        return 0.0;
    }
    head_cross_entropy(params, cfg, cache, HeadSet::Reconstruct, masked_targets, None)
        / masked_targets.len() as f64
}

pub fn loss_total(next: f64, mask: f64, w: LossWeights) -> f64 {
    w.next * next + w.mask * mask
}

/// One training sequence after masking.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSequence {
    pub codes: Vec<SemanticId>,
    pub masked: Option<Vec<Vec<bool>>>,
    /// Original codewords at masked positions.
    pub recon_targets: Vec<TargetPair>,
    /// Dropout seed; `None` disables dropout.
    pub dropout_seed: Option<u64>,
}

impl TrainSequence {
    pub fn input(&self) -> ModelInput<'_> {
        ModelInput {
            codes: &self.codes,
            masked: self.masked.as_deref(),
        }
    }

    pub fn next_pairs(&self, cfg: &ModelConfig) -> Vec<TargetPair> {
        next_item_pairs(cfg, &self.codes, self.masked.as_deref())
    }
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    /// λ1·L_next + λ2·L_mask, each term token-averaged over the batch.
    pub loss: f64,
    pub next_loss: f64,
    pub mask_loss: f64,
    pub n_next: usize,
    pub n_mask: usize,
    /// Reconstruction-head evaluations performed.
    pub recon_evals: usize,
    pub grads: Params,
}

/// Loss and analytic gradients over a batch. L_next averages over all
/// supervised (sequence, t, k) triples, L_mask over all masked codewords.
pub fn batch_gradients(
    params: &Params,
    cfg: &ModelConfig,
    batch: &[TrainSequence],
    weights: LossWeights,
) -> Result<BatchOutput> {
    let pairs: Vec<Vec<TargetPair>> = batch.iter().map(|s| s.next_pairs(cfg)).collect();
    let n_next: usize = pairs.iter().map(Vec::len).sum();
    let n_mask: usize = batch.iter().map(|s| s.recon_targets.len()).sum();
    let next_scale = if n_next > 0 { weights.next / n_next as f64 } else { 0.0 };
    let mask_scale = if n_mask > 0 { weights.mask / n_mask as f64 } else { 0.0 };

    let indices: Vec<usize> = (0..batch.len()).collect();
    let partials: Vec<Result<(f64, f64, Params)>> = indices
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = Params::zeros(cfg);
            let (mut next_sum, mut mask_sum) = (0.0, 0.0);
            for &i in chunk {
                let seq = &batch[i];
                let recon = if weights.mask != 0.0 { &seq.recon_targets[..] } else { &[] };
                if pairs[i].is_empty() && recon.is_empty() {
                    continue;
                }
                let cache = forward(params, cfg, seq.input(), seq.dropout_seed)?;
                let mut d_states = Mat::zeros(cache.len(), cfg.hidden_size);
                next_sum += head_cross_entropy(
                    params,
                    cfg,
                    &cache,
                    HeadSet::Predict,
                    &pairs[i],
                    Some((next_scale, &mut g, &mut d_states)),
                );
                mask_sum += head_cross_entropy(
                    params,
                    cfg,
                    &cache,
                    HeadSet::Reconstruct,
                    recon,
                    Some((mask_scale, &mut g, &mut d_states)),
                );
                cache.backward(params, cfg, seq.input(), &d_states, &mut g);
            }
            Ok((next_sum, mask_sum, g))
        })
        .collect();

    let mut grads = Params::zeros(cfg);
    let (mut next_sum, mut mask_sum) = (0.0, 0.0);
    for p in partials {
        let (n, m, g) = p?;
        next_sum += n;
        mask_sum += m;
        grads.add_scaled(1.0, &g);
    }
    let next_loss = if n_next > 0 { next_sum / n_next as f64 } else { 0.0 };
    let mask_loss = if n_mask > 0 && weights.mask != 0.0 {
        mask_sum / n_mask as f64
    } else {
        0.0
    };
    let recon_evals = if weights.mask != 0.0 { n_mask } else { 0 };
    Ok(BatchOutput {
        loss: loss_total(next_loss, mask_loss, weights),
        next_loss,
        mask_loss,
        n_next,
        n_mask,
        recon_evals,
        grads,
    })
}
