//! Mask plans (random or entropy-guided, at item, token or mixed
//! granularity), entropy maps from the reconstruction heads, and their
//! causal smoothing.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, head_logits, HeadSet, ModelConfig, ModelInput, Params, TargetPair};
use crate::tensor::entropy_of_logits;
use crate::tokenizer::SemanticId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Item,
    Token,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanPolicy {
    Random,
    Entropy,
}

/// Masked (item position, codeword position) pairs plus the ratio and draw
/// that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub granularity: Granularity,
    pub masked: BTreeSet<(usize, usize)>,
    pub gamma: f64,
    pub n_drawn: usize,
    pub policy: PlanPolicy,
}

impl MaskPlan {
    pub fn empty(granularity: Granularity, gamma: f64, policy: PlanPolicy) -> Self {
        MaskPlan {
            granularity,
            masked: BTreeSet::new(),
            gamma,
            n_drawn: 0,
            policy,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn items_touched(&self) -> usize {
        self.masked
            .iter()
            .map(|&(t, _)| t)
            .collect::<BTreeSet<_>>()
            .len()
    }
}

/// Upper bound of the N draw: ⌊γ·K·T⌋ for token-level, ⌊γ·T⌋ otherwise.
pub fn max_draw(t_len: usize, positions: usize, gamma: f64, granularity: Granularity) -> usize {
    let units = match granularity {
        Granularity::Token => t_len * positions,
        Granularity::Item | Granularity::Mixed => t_len,
    };
    // The epsilon keeps products like 0.15·320 from flooring to 47.
    (gamma * units as f64 + 1e-9).floor() as usize
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::invalid("gamma", format!("{gamma} not in (0, 1]")));
    }
    Ok(())
}

fn draw_n<R: Rng + ?Sized>(upper: usize, rng: &mut R) -> usize {
    if upper == 0 {
        0
    } else {
        rng.random_range(1..=upper)
    }
}

pub fn plan_random<R: Rng + ?Sized>(
    t_len: usize,
    positions: usize,
    gamma: f64,
    granularity: Granularity,
    rng: &mut R,
) -> Result<MaskPlan> {
    check_gamma(gamma)?;
    if t_len == 0 || positions == 0 {
        return Err(Error::invalid("sequence", "T and K must be >= 1"));
    }
    let upper = max_draw(t_len, positions, gamma, granularity);
    let n = draw_n(upper, rng);
    let mut plan = MaskPlan::empty(granularity, gamma, PlanPolicy::Random);
    plan.n_drawn = n;
    if n == 0 {
        return Ok(plan);
    }
    match granularity {
        Granularity::Token => {
            for idx in sample(rng, t_len * positions, n).into_iter() {
                plan.masked.insert((idx / positions, idx % positions));
            }
        }
        Granularity::Item => {
            for t in sample(rng, t_len, n).into_iter() {
                plan.masked.extend((0..positions).map(|k| (t, k)));
            }
        }
        Granularity::Mixed => {
            for t in sample(rng, t_len, n).into_vec() {
                if rng.random_bool(0.5) {
                    plan.masked.extend((0..positions).map(|k| (t, k)));
                } else {
                    plan.masked.insert((t, rng.random_range(0..positions)));
                }
            }
        }
    }
    Ok(plan)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Smoothing {
    pub window: usize,
    pub decay: f64,
    pub mix: f64,
}

impl Default for Smoothing {
    fn default() -> Self {
        Smoothing {
            window: 3,
            decay: 2.0,
            mix: 0.2,
        }
    }
}

/// Per-position codeword entropies (nats) and their per-item means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyMap {
    pub token_entropy: Vec<Vec<f64>>,
    pub item_entropy: Vec<f64>,
    /// Set once [`smooth_entropy`] has replaced the raw values with
    /// effective ones.
    pub smoothing: Option<Smoothing>,
}

impl EntropyMap {
    pub fn len(&self) -> usize {
        self.item_entropy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_entropy.is_empty()
    }

    /// Builds a map from token entropies, item entropy being their mean.
    pub fn from_tokens(token_entropy: Vec<Vec<f64>>) -> Self {
        let item_entropy = token_entropy
            .iter()
            .map(|row| row.iter().sum::<f64>() / row.len().max(1) as f64)
            .collect();
        EntropyMap {
            token_entropy,
            item_entropy,
            smoothing: None,
        }
    }
}

/// Entropy of every reconstruction head at every position of the unmasked
/// sequence, eval mode, temperature `tau`. Parameters are only read.
pub fn compute_entropy(
    params: &Params,
    cfg: &ModelConfig,
    codes: &[SemanticId],
    tau: f64,
) -> Result<EntropyMap> {
    if !(tau > 0.0) {
        return Err(Error::invalid("temperature", "must be > 0"));
    }
    let cache = forward(params, cfg, ModelInput::unmasked(codes), None)?;
    let k_total = cfg.positions();
    let mut token_entropy = Vec::with_capacity(codes.len());
    let mut item_entropy = Vec::with_capacity(codes.len());
    for (t, id) in codes.iter().enumerate() {
        let d = cache.state(t);
        let mut row = vec![0.0; k_total];
        let mut n = 0usize;
        let mut sum = 0.0;
        for k in 0..k_total {
            if cfg.pad && id.0[k] as usize == cfg.codebook_sizes[k] {
                continue;
            }
            let h = entropy_of_logits(&head_logits(params, d, k, HeadSet::Reconstruct), tau);
            row[k] = h;
            sum += h;
            n += 1;
        }
        item_entropy.push(if n > 0 { sum / n as f64 } else { 0.0 });
        token_entropy.push(row);
    }
    Ok(EntropyMap {
        token_entropy,
        item_entropy,
        smoothing: None,
    })
}

/// Causal windowed smoothing:
/// `H'_t = Σ_{d<min(W, t+1)} H_{t−d}·β^{−d} / Σ β^{−d}`, effective token
/// entropy `(1−ρ)·H_{t,k} + ρ·H'_t`, effective item entropy `H'_t`.
pub fn smooth_entropy(map: &EntropyMap, s: Smoothing) -> Result<EntropyMap> {
    if s.window == 0 {
        return Err(Error::invalid("smoothing.window", "must be >= 1"));
    }
    if !(s.decay >= 1.0) {
        return Err(Error::invalid("smoothing.decay", "must be >= 1"));
    }
    if !(0.0..=1.0).contains(&s.mix) {
        return Err(Error::invalid("smoothing.mix", "must be in [0, 1]"));
    }
    // Both averages are written as offsets from the current value, so equal
    // inputs come back bit-identical.
    let propagated: Vec<f64> = (0..map.len())
        .map(|t| {
            let here = map.item_entropy[t];
            let (mut num, mut den) = (0.0, 0.0);
            for d in 0..s.window.min(t + 1) {
                let w = s.decay.powi(-(d as i32));
                num += (map.item_entropy[t - d] - here) * w;
                den += w;
            }
            here + num / den
        })
        .collect();
    let token_entropy = map
        .token_entropy
        .iter()
        .zip(&propagated)
        .map(|(row, &hp)| row.iter().map(|&h| h + s.mix * (hp - h)).collect())
        .collect();
    Ok(EntropyMap {
        token_entropy,
        item_entropy: propagated,
        smoothing: Some(s),
    })
}

fn by_entropy_desc(a: (f64, usize, usize), b: (f64, usize, usize)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
}

/// Selects the N highest effective entropies, N drawn as in
/// [`plan_random`]. Ties go to the earlier item, then the lower position.
pub fn plan_entropy<R: Rng + ?Sized>(
    map: &EntropyMap,
    gamma: f64,
    granularity: Granularity,
    rng: &mut R,
) -> Result<MaskPlan> {
    check_gamma(gamma)?;
    let t_len = map.len();
    if t_len == 0 {
        return Err(Error::invalid("entropy map", "empty"));
    }
    let positions = map.token_entropy[0].len();
    let upper = max_draw(t_len, positions, gamma, granularity);
    let n = draw_n(upper, rng);
    Ok(select_top_entropy(map, gamma, granularity, n, rng))
}

/// [`plan_entropy`] with an explicit N. `rng` is only used for the mixed
/// granularity coin flips.
pub fn select_top_entropy<R: Rng + ?Sized>(
    map: &EntropyMap,
    gamma: f64,
    granularity: Granularity,
    n: usize,
    rng: &mut R,
) -> MaskPlan {
    let t_len = map.len();
    let positions = map.token_entropy.first().map_or(0, Vec::len);
    let mut plan = MaskPlan::empty(granularity, gamma, PlanPolicy::Entropy);
    plan.n_drawn = n;
    if n == 0 {
        return plan;
    }
    let ranked_items = || {
        let mut items: Vec<(f64, usize, usize)> = map
            .item_entropy
            .iter()
            .enumerate()
            .map(|(t, &h)| (h, t, 0))
            .collect();
        items.sort_by(|a, b| by_entropy_desc(*a, *b));
        items.into_iter().take(n).map(|(_, t, _)| t).collect::<Vec<_>>()
    };
    match granularity {
        Granularity::Token => {
            let mut pairs: Vec<(f64, usize, usize)> = (0..t_len)
                .flat_map(|t| (0..positions).map(move |k| (t, k)))
                .map(|(t, k)| (map.token_entropy[t][k], t, k))
                .collect();
            pairs.sort_by(|a, b| by_entropy_desc(*a, *b));
            plan.masked
                .extend(pairs.into_iter().take(n).map(|(_, t, k)| (t, k)));
        }
        Granularity::Item => {
            for t in ranked_items() {
                plan.masked.extend((0..positions).map(|k| (t, k)));
            }
        }
        Granularity::Mixed => {
            for t in ranked_items() {
                if rng.random_bool(0.5) {
                    plan.masked.extend((0..positions).map(|k| (t, k)));
                } else {
                    let k = (0..positions)
                        .map(|k| (map.token_entropy[t][k], t, k))
                        .min_by(|a, b| by_entropy_desc(*a, *b))
                        .map(|(_, _, k)| k)
                        .unwrap_or(0);
                    plan.masked.insert((t, k));
                }
            }
        }
    }
    plan
}

/// A sequence with MASK flags applied and the hidden codewords kept as
/// reconstruction targets.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSequence {
    pub codes: Vec<SemanticId>,
    pub masked: Vec<Vec<bool>>,
    pub targets: Vec<TargetPair>,
}

/// Flags every planned pair. Pairs that land on a PAD codeword are dropped;
/// pairs beyond the sequence are an error.
pub fn apply_mask(cfg: &ModelConfig, codes: &[SemanticId], plan: &MaskPlan) -> Result<MaskedSequence> {
    let k_total = cfg.positions();
    let mut masked = vec![vec![false; k_total]; codes.len()];
    let mut targets = Vec::with_capacity(plan.masked.len());
    for &(t, k) in &plan.masked {
        if t >= codes.len() || k >= k_total {
            return Err(Error::MaskOnPadding { t, k });
        }
        let code = codes[t].0[k];
        if cfg.pad && code as usize == cfg.codebook_sizes[k] {
            continue;
        }
        masked[t][k] = true;
        targets.push(TargetPair { t, k, target: code });
    }
    Ok(MaskedSequence {
        codes: codes.to_vec(),
        masked,
        targets,
    })
}

#[derive(Serialize)]
struct DumpLine<'a> {
    user: &'a str,
    t: usize,
    k: usize,
    entropy: f64,
    masked: bool,
}

/// Writes one JSON line per (user, t, k): entropy and whether it was masked.
pub fn write_entropy_dump<'a>(
    path: &Path,
    rows: impl IntoIterator<Item = (&'a str, &'a EntropyMap, &'a MaskPlan)>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for (user, map, plan) in rows {
        for (t, row) in map.token_entropy.iter().enumerate() {
            for (k, &entropy) in row.iter().enumerate() {
                serde_json::to_writer(
                    &mut w,
                    &DumpLine {
                        user,
                        t,
                        k,
                        entropy,
                        masked: plan.masked.contains(&(t, k)),
                    },
                )?;
                w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn table_two_setting_bounds() {
        assert_eq!(max_draw(10, 32, 0.15, Granularity::Token), 48);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..500 {
            let p = plan_random(10, 32, 0.15, Granularity::Token, &mut rng).unwrap();
            assert!((1..=48).contains(&p.n_drawn));
            assert_eq!(p.masked.len(), p.n_drawn);
        }
    }

    #[test]
    fn floor_to_zero_gives_empty_plan() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = plan_random(10, 4, 0.05, Granularity::Item, &mut rng).unwrap();
        assert!(p.is_empty());
        assert_eq!(p.n_drawn, 0);
    }

    #[test]
    fn argmax_item() {
        let map = EntropyMap::from_tokens(vec![vec![0.1], vec![2.0], vec![0.5]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = select_top_entropy(&map, 1.0, Granularity::Item, 1, &mut rng);
        assert_eq!(plan.masked.into_iter().collect::<Vec<_>>(), vec![(1, 0)]);
    }

    #[test]
    fn saturated_token_plan_masks_everything() {
        let map = EntropyMap::from_tokens(vec![vec![1.0, 0.5], vec![0.2, 0.3], vec![0.0, 0.9]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = select_top_entropy(&map, 1.0, Granularity::Token, 6, &mut rng);
        assert_eq!(plan.masked.len(), 6);
    }

    #[test]
    fn ties_prefer_earlier_then_lower_position() {
        let map = EntropyMap::from_tokens(vec![vec![1.0, 1.0], vec![1.0, 1.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = select_top_entropy(&map, 1.0, Granularity::Token, 3, &mut rng);
        assert_eq!(
            plan.masked.into_iter().collect::<Vec<_>>(),
            vec![(0, 0), (0, 1), (1, 0)]
        );
    }

    #[test]
    fn smoothing_degenerate_parameters() {
        let map = EntropyMap::from_tokens(vec![vec![1.0, 3.0], vec![0.5, 0.5], vec![2.0, 0.0]]);
        let w1 = smooth_entropy(
            &map,
            Smoothing {
                window: 1,
                decay: 2.0,
                mix: 0.2,
            },
        )
        .unwrap();
        assert_eq!(w1.item_entropy, map.item_entropy);
        let rho0 = smooth_entropy(
            &map,
            Smoothing {
                window: 3,
                decay: 2.0,
                mix: 0.0,
            },
        )
        .unwrap();
        assert_eq!(rho0.token_entropy, map.token_entropy);
    }

    #[test]
    fn apply_mask_item_level_sets_all_flags() {
        let cfg = ModelConfig::desk(3, 8);
        let codes = vec![SemanticId(vec![1, 2, 3]), SemanticId(vec![4, 5, 6])];
        let mut plan = MaskPlan::empty(Granularity::Item, 0.5, PlanPolicy::Random);
        plan.masked.extend((0..3).map(|k| (1, k)));
        let m = apply_mask(&cfg, &codes, &plan).unwrap();
        assert_eq!(m.masked[1], vec![true; 3]);
        assert_eq!(m.masked[0], vec![false; 3]);
        assert_eq!(m.codes, codes);
        let empty = apply_mask(&cfg, &codes, &MaskPlan::empty(Granularity::Item, 0.5, PlanPolicy::Random)).unwrap();
        assert!(empty.targets.is_empty());
        assert!(empty.masked.iter().flatten().all(|f| !f));

        plan.masked.insert((2, 0));
        assert!(matches!(
            apply_mask(&cfg, &codes, &plan),
            Err(Error::MaskOnPadding { t: 2, k: 0 })
        ));
    }

    #[test]
    fn apply_mask_skips_pad_codewords() {
        let mut cfg = ModelConfig::desk(2, 4);
        cfg.pad = true;
        let codes = vec![SemanticId(vec![1, 4])];
        let mut plan = MaskPlan::empty(Granularity::Item, 1.0, PlanPolicy::Random);
        plan.masked.extend([(0, 0), (0, 1)]);
        let m = apply_mask(&cfg, &codes, &plan).unwrap();
        assert_eq!(m.masked[0], vec![true, false]);
        assert_eq!(m.targets.len(), 1);
    }
}
