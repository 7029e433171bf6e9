//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! `cargo test -p mhl-core --test acceptance` runs everything. Passing
//! criterion numbers (`-- 3 5`) restricts the run.

mod common;

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use mhl_core::curriculum::{init_schedule, CurriculumConfig, Phase, ScheduleState, Strategy};
use mhl_core::decode::{beam_search_graph, rank_exact, BeamConfig, CodewordIndex};
use mhl_core::eval::{
    eval_cases, evaluate, evaluate_with, ndcg_at_k, pilot_truncation, EvalCase, MetricSums, Protocol, Target,
    TruncationConfig,
};
use mhl_core::masking::{
    compute_entropy, max_draw, plan_entropy, plan_random, select_top_entropy, smooth_entropy, EntropyMap,
    Granularity, MaskPlan, PlanPolicy, Smoothing,
};
use mhl_core::model::{
    batch_gradients, forward, loss_next, save_checkpoint, Checkpoint, LossWeights, ModelConfig, ModelInput,
    Params, TrainSequence,
};
use mhl_core::tensor::entropy_of_logits;
use mhl_core::tokenizer::{build_token_graph, ItemGraph};
use mhl_core::train::{TrainConfig, TrainData, Trainer};
use mhl_core::Catalog;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Tolerances and sizes, as fixed by the acceptance contract.
const GRAD_MAX_REL_ERROR: f64 = 1e-4;
const GRAD_MIN_SAMPLES: usize = 200;
const GRAD_RUNTIME: Duration = Duration::from_secs(120);
const UNIFORM_LOSS_TOL: f64 = 1e-9;
const ENTROPY_SAMPLES: usize = 10_000;
const MEAN_IDENTITY_TOL: f64 = 1e-12;
const PLAN_CONFIGS: usize = 1_000;
const CURRICULUM_RUNTIME: Duration = Duration::from_secs(1);
const BEAM_MIN_OVERLAP: f64 = 0.9;
const BEAM_CONTEXTS: usize = 50;
const METRIC_FIXTURE_TOL: f64 = 1e-12;
const SEEDS: u64 = 5;
const MIN_SEED_WINS: usize = 4;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

// ---------------------------------------------------------------- 1

fn gradient_correctness() -> Check {
    let t0 = Instant::now();
    let cfg = common::toy_config(64, 4, 64);
    let params = Params::init(&cfg, 11);
    let batch = common::toy_batch(&cfg, 5);
    let check = common::finite_difference_check(&cfg, &params, &batch, LossWeights::default(), 200, 1e-5, 3);
    let took = t0.elapsed();
    ensure(cfg.hidden_size == 64 && cfg.n_layers == 2, "toy model shape")?;
    ensure(check.checked >= GRAD_MIN_SAMPLES, format!("only {} samples", check.checked))?;
    ensure(
        check.max_rel_error < GRAD_MAX_REL_ERROR,
        format!("max rel error {:e} at {}", check.max_rel_error, check.worst),
    )?;
    ensure(took < GRAD_RUNTIME, format!("took {took:?}"))?;
    Ok(format!(
        "{} entries, max rel error {:.2e}, {:.1}s",
        check.checked,
        check.max_rel_error,
        took.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- 2

fn loss_degeneracy() -> Check {
    let cfg = {
        let mut c = common::toy_config(32, 4, 64);
        c.dropout = 0.0;
        c
    };
    let params = Params::init(&cfg, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w = LossWeights { next: 0.7, mask: 1.3 };
    for trial in 0..20 {
        let codes = common::random_codes(&mut rng, 3 + trial % 9, &cfg);
        let plan = MaskPlan::empty(Granularity::Token, 0.15, PlanPolicy::Random);
        let m = mhl_core::masking::apply_mask(&cfg, &codes, &plan).map_err(|e| e.to_string())?;
        let seq = TrainSequence {
            codes: m.codes,
            masked: Some(m.masked),
            recon_targets: m.targets,
            dropout_seed: None,
        };
        let out = batch_gradients(&params, &cfg, std::slice::from_ref(&seq), w).map_err(|e| e.to_string())?;
        let cache = forward(&params, &cfg, ModelInput::unmasked(&codes), None).map_err(|e| e.to_string())?;
        let next = loss_next(&params, &cfg, &cache, &seq.next_pairs(&cfg)).map_err(|e| e.to_string())?;
        ensure(out.mask_loss == 0.0 && out.n_mask == 0, "empty plan produced reconstruction loss")?;
        ensure(
            out.loss == w.next * next,
            format!("trial {trial}: {} != {} * {}", out.loss, w.next, next),
        )?;
    }

    let mut uniform = params.clone();
    for h in &mut uniform.predict_heads {
        h.w.fill(0.0);
        h.b.iter_mut().for_each(|b| *b = 0.0);
    }
    let batch: Vec<TrainSequence> = (0..6)
        .map(|i| TrainSequence {
            codes: common::random_codes(&mut rng, 4 + i, &cfg),
            masked: None,
            recon_targets: Vec::new(),
            dropout_seed: None,
        })
        .collect();
    let out = batch_gradients(&uniform, &cfg, &batch, LossWeights::default()).map_err(|e| e.to_string())?;
    let want = 64f64.ln();
    ensure(
        (out.next_loss - want).abs() < UNIFORM_LOSS_TOL,
        format!("uniform L_next {} vs ln 64 = {want}", out.next_loss),
    )?;
    Ok(format!("bit-exact on 20 sequences; uniform L_next - ln 64 = {:.1e}", out.next_loss - want))
}

// ---------------------------------------------------------------- 3

fn entropy_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst_excess = 0.0f64;
    for i in 0..ENTROPY_SAMPLES {
        let w = 2 + i % 255;
        let spread = [0.1, 1.0, 10.0, 100.0][i % 4];
        let logits: Vec<f64> = (0..w).map(|_| rng.random_range(-spread..spread)).collect();
        let h = entropy_of_logits(&logits, 1.0);
        ensure(h >= 0.0, format!("negative entropy {h}"))?;
        let cap = (w as f64).ln();
        ensure(h <= cap + 1e-12, format!("entropy {h} above ln {w}"))?;
        worst_excess = worst_excess.max(h - cap);
    }

    let cfg = {
        let mut c = common::toy_config(16, 4, 32);
        c.dropout = 0.0;
        c
    };
    let params = Params::init(&cfg, 3);
    let codes = common::random_codes(&mut rng, 12, &cfg);
    let map = compute_entropy(&params, &cfg, &codes, 1.0).map_err(|e| e.to_string())?;
    for (row, &item) in map.token_entropy.iter().zip(&map.item_entropy) {
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        ensure((mean - item).abs() < MEAN_IDENTITY_TOL, format!("item entropy {item} vs mean {mean}"))?;
    }

    let smoothing = Smoothing {
        window: 3,
        decay: 2.0,
        mix: 0.2,
    };
    let c = 1.7;
    let constant = EntropyMap::from_tokens(vec![vec![c; 4]; 9]);
    let s = smooth_entropy(&constant, smoothing).map_err(|e| e.to_string())?;
    ensure(
        s.item_entropy.iter().chain(s.token_entropy.iter().flatten()).all(|&v| v == c),
        "constant map changed by smoothing",
    )?;
    let w1 = smooth_entropy(&map, Smoothing { window: 1, ..smoothing }).map_err(|e| e.to_string())?;
    ensure(w1.item_entropy == map.item_entropy, "W=1 changed item entropies")?;
    let rho0 = smooth_entropy(&map, Smoothing { mix: 0.0, ..smoothing }).map_err(|e| e.to_string())?;
    ensure(rho0.token_entropy == map.token_entropy, "rho=0 changed token entropies")?;

    for trial in 0..200u64 {
        let t = 2 + (trial as usize % 15);
        let tokens: Vec<Vec<f64>> = (0..t).map(|_| (0..4).map(|_| rng.random_range(0.0..3.0)).collect()).collect();
        let base = EntropyMap::from_tokens(tokens.clone());
        let scale = rng.random_range(0.01..100.0);
        let scaled = EntropyMap::from_tokens(tokens.iter().map(|r| r.iter().map(|v| v * scale).collect()).collect());
        for g in [Granularity::Token, Granularity::Item, Granularity::Mixed] {
            let upper = max_draw(t, 4, 0.5, g).max(1);
            let n = 1 + trial as usize % upper;
            let a = select_top_entropy(&base, 0.5, g, n, &mut ChaCha8Rng::seed_from_u64(trial));
            let b = select_top_entropy(&scaled, 0.5, g, n, &mut ChaCha8Rng::seed_from_u64(trial));
            ensure(a.masked == b.masked, format!("selection changed under scaling by {scale}"))?;
        }
    }
    Ok(format!(
        "{ENTROPY_SAMPLES} distributions in bounds (max H - ln|W| = {worst_excess:.1e}); identities exact"
    ))
}

// ---------------------------------------------------------------- 4

fn mask_plan_contracts() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let grans = [Granularity::Token, Granularity::Item, Granularity::Mixed];
    for i in 0..PLAN_CONFIGS {
        let t = rng.random_range(1..=50usize);
        let k = rng.random_range(1..=32usize);
        let gamma = rng.random_range(1e-3..=1.0);
        let g = grans[i % 3];
        let units = match g {
            Granularity::Token => k * t,
            _ => t,
        } as f64;
        let bound = (gamma * units).floor() as usize;
        // Products a hair below an integer (0.15 * 320) count as that integer.
        let bound = if (gamma * units).ceil() - gamma * units < 1e-9 { (gamma * units).ceil() as usize } else { bound };
        ensure(max_draw(t, k, gamma, g) == bound, format!("upper bound {} vs {bound}", max_draw(t, k, gamma, g)))?;
        let plans = [
            plan_random(t, k, gamma, g, &mut rng).map_err(|e| e.to_string())?,
            {
                let tokens = (0..t).map(|_| (0..k).map(|_| rng.random_range(0.0..4.0)).collect()).collect();
                plan_entropy(&EntropyMap::from_tokens(tokens), gamma, g, &mut rng).map_err(|e| e.to_string())?
            },
        ];
        for p in &plans {
            ensure(
                p.n_drawn <= bound,
                format!("N {} above bound {bound} (T {t}, K {k}, gamma {gamma}, {g:?})", p.n_drawn),
            )?;
            ensure((p.n_drawn == 0) == (bound == 0), "N = 0 only when the bound is 0")?;
            ensure(p.masked.iter().all(|&(a, b)| a < t && b < k), "masked pair out of range")?;
            match g {
                Granularity::Token => ensure(p.masked.len() == p.n_drawn, "token plan size != N")?,
                Granularity::Item => ensure(
                    p.items_touched() == p.n_drawn && p.masked.len() == p.n_drawn * k,
                    "item plan must mask N whole items",
                )?,
                Granularity::Mixed => ensure(p.items_touched() == p.n_drawn, "mixed plan must touch N items")?,
            }
        }
    }
    let table2 = max_draw(10, 32, 0.15, Granularity::Token);
    ensure(table2 == 48, format!("gamma 0.15, K 32, T 10 gives upper bound {table2}"))?;
    let mut seen = HashSet::new();
    for s in 0..2000 {
        let p = plan_random(10, 32, 0.15, Granularity::Token, &mut ChaCha8Rng::seed_from_u64(s))
            .map_err(|e| e.to_string())?;
        ensure((1..=48).contains(&p.n_drawn), format!("N = {}", p.n_drawn))?;
        seen.insert(p.n_drawn);
    }
    ensure(seen.contains(&1) && seen.contains(&48), "N range endpoints never drawn")?;
    Ok(format!("{PLAN_CONFIGS} configs x 2 policies; gamma 0.15, K 32, T 10 draws N in [1, 48]"))
}

// ---------------------------------------------------------------- 5

fn schedule(strategy: Strategy, warmup: usize) -> ScheduleState {
    init_schedule(CurriculumConfig {
        strategy,
        gamma0: 0.15,
        warmup_epochs: warmup,
        ..CurriculumConfig::default()
    })
    .unwrap()
}

fn curriculum_state_machine() -> Check {
    let t0 = Instant::now();
    let gamma0 = 0.15;
    let mut traces: Vec<Vec<f64>> = vec![vec![0.3; 400], (0..300).map(|i| 0.1 + 1e-3 * i as f64).collect()];
    for stale in 1..=8 {
        let mut v = Vec::new();
        let mut level = 0.1;
        for _ in 0..60 {
            level += 0.01;
            v.push(level);
            v.extend(std::iter::repeat_n(level, stale));
        }
        traces.push(v);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        traces.push((0..400).map(|_| rng.random_range(0.0..1.0)).collect());
    }
    let mut decays_seen = 0;
    let mut full_runs = 0;
    for trace in &traces {
        for warmup in [0, 1, 5] {
            let mut s = schedule(Strategy::RandomEntropyInf, warmup);
            let mut best = f64::NEG_INFINITY;
            let mut stale_masked = 0usize;
            let mut stale_finetune = 0usize;
            let mut decays = 0usize;
            let mut stopped = false;
            for (i, &m) in trace.iter().enumerate() {
                let prev = s.clone();
                let (next, stop) = s.advance(m).map_err(|e| e.to_string())?;
                ensure(next.phase >= prev.phase, format!("phase went back at {i}"))?;
                match prev.phase {
                    Phase::Warmup => {
                        ensure(next.gamma == gamma0 && !stop, "warm-up changed gamma or stopped")?;
                        if prev.warmup_remaining <= 1 {
                            ensure(next.phase == Phase::Masked, "warm-up did not end on time")?;
                        }
                    }
                    Phase::Masked => {
                        if m > best + 1e-6 {
                            best = m;
                            stale_masked = 0;
                        } else {
                            stale_masked += 1;
                        }
                        if stale_masked == 5 {
                            stale_masked = 0;
                            decays += 1;
                            let want = gamma0 - decays as f64 * 0.1 * gamma0;
                            ensure(
                                (next.gamma - want.max(0.0)).abs() < 1e-12,
                                format!("gamma {} after {decays} decays", next.gamma),
                            )?;
                            ensure(
                                (next.phase == Phase::Finetune) == (decays == 10),
                                format!("phase {:?} after {decays} decays", next.phase),
                            )?;
                            if decays == 10 {
                                ensure(next.gamma == 0.0, "gamma not zero after 10 decays")?;
                                decays_seen += 1;
                                best = f64::NEG_INFINITY;
                            }
                        } else {
                            ensure(next.gamma == prev.gamma, format!("gamma changed without a plateau at {i}"))?;
                        }
                        ensure(!stop, "stopped outside fine-tuning")?;
                    }
                    Phase::Finetune => {
                        if m > best + 1e-6 {
                            best = m;
                            stale_finetune = 0;
                        } else {
                            stale_finetune += 1;
                        }
                        ensure(stop == (stale_finetune == 20), format!("stop {stop} at {stale_finetune} stale"))?;
                    }
                }
                s = next;
                if stop {
                    stopped = true;
                    break;
                }
            }
            if stopped {
                full_runs += 1;
            }
        }
    }
    // Fixed-ratio strategies never decay.
    for st in [Strategy::Random, Strategy::Entropy] {
        let mut s = schedule(st, 0);
        for _ in 0..200 {
            s = s.advance(0.5).map_err(|e| e.to_string())?.0;
            ensure(s.gamma == 0.15 && s.phase != Phase::Finetune, format!("{st:?} decayed"))?;
        }
    }
    let took = t0.elapsed();
    ensure(decays_seen > 0 && full_runs > 0, "no trace reached phase III and stopped")?;
    ensure(took < CURRICULUM_RUNTIME, format!("took {took:?}"))?;
    Ok(format!(
        "{} traces x 3 warm-ups, {full_runs} ran to stop, {:.0} ms",
        traces.len(),
        took.as_secs_f64() * 1e3
    ))
}

// ---------------------------------------------------------------- 6

fn beam_decode_equivalence() -> Check {
    let s = common::synth_setup(2000, 500, 8, 64, 0);
    let model = ModelConfig::desk(8, 64);
    let data = TrainData::from_split(&s.split, &s.catalog, model.max_seq_len).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        curriculum: CurriculumConfig {
            strategy: Strategy::NoMask,
            gamma0: 0.0,
            ..CurriculumConfig::default()
        },
        lr: 2e-3,
        warmup_steps: 50,
        max_epochs: 4,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model.clone(), cfg, data).map_err(|e| e.to_string())?;
    trainer.run().map_err(|e| e.to_string())?;
    let params = trainer.final_params().clone();

    let cases = eval_cases(&s.split, &s.catalog, Target::Test).map_err(|e| e.to_string())?;
    let contexts: Vec<Vec<_>> = cases
        .iter()
        .take(BEAM_CONTEXTS)
        .map(|c| c.context.iter().map(|&i| s.catalog.codes[i].clone()).collect())
        .collect();

    let small = Catalog::new(
        s.catalog.item_ids[..200].to_vec(),
        s.catalog.codes[..200].to_vec(),
        s.catalog.codebook_sizes.clone(),
        false,
    )
    .map_err(|e| e.to_string())?;
    let complete = ItemGraph::fully_connected(small.len());
    let small_index = CodewordIndex::new(&small);
    let exhaustive = BeamConfig {
        beam_size: small.len(),
        steps: 1,
        seeds_per_position: 1,
        seed: 0,
    };
    for (i, ctx) in contexts.iter().enumerate() {
        let exact = rank_exact(&params, &model, ctx, &small, small.len()).map_err(|e| e.to_string())?;
        let beam = beam_search_graph(&params, &model, ctx, &small, &small_index, &complete, &exhaustive, small.len())
            .map_err(|e| e.to_string())?;
        ensure(beam.items == exact, format!("context {i}: complete-graph beam differs from exact ranking"))?;
    }

    let graph = build_token_graph(&s.catalog.codes, 50).map_err(|e| e.to_string())?;
    let index = CodewordIndex::new(&s.catalog);
    let beam = BeamConfig {
        beam_size: 50,
        steps: 3,
        ..BeamConfig::default()
    };
    let mut total = 0.0;
    for ctx in &contexts {
        let exact: HashSet<usize> = rank_exact(&params, &model, ctx, &s.catalog, 10)
            .map_err(|e| e.to_string())?
            .iter()
            .map(|x| x.index)
            .collect();
        let out = beam_search_graph(&params, &model, ctx, &s.catalog, &index, &graph, &beam, 10)
            .map_err(|e| e.to_string())?;
        total += out.items.iter().filter(|x| exact.contains(&x.index)).count() as f64 / 10.0;
    }
    let overlap = total / contexts.len() as f64;
    ensure(overlap >= BEAM_MIN_OVERLAP, format!("mean top-10 overlap {overlap:.3}"))?;
    Ok(format!(
        "complete graph exact on {} contexts; B50/E50/3 steps top-10 overlap {overlap:.3}",
        contexts.len()
    ))
}

// ---------------------------------------------------------------- 7

fn metric_fixtures() -> Check {
    let ranked: Vec<usize> = (0..20).collect();
    let n = ndcg_at_k(&ranked, 2, 10).map_err(|e| e.to_string())?;
    ensure(n == 0.5, format!("rank-3 NDCG@10 = {n}"))?;

    let ranks = [Some(1), Some(3), None, Some(5), Some(2), None, Some(10), Some(4), Some(6), Some(1)];
    let mut sums = MetricSums::new(&[5, 10]).map_err(|e| e.to_string())?;
    let (mut r5, mut r10, mut n5, mut n10) = (0.0, 0.0, 0.0, 0.0);
    for r in ranks {
        let list: Vec<usize> = (100..110).collect();
        let target = r.map_or(999, |r| 100 + r - 1);
        sums.add_user(&list, target).map_err(|e| e.to_string())?;
        if let Some(r) = r {
            let g = 1.0 / ((r + 1) as f64).log2();
            if r <= 5 {
                r5 += 1.0;
                n5 += g;
            }
            r10 += 1.0;
            n10 += g;
        }
    }
    let rep = sums.report(Protocol::Full);
    for (got, want) in [
        (rep.recall(5), r5 / 10.0),
        (rep.recall(10), r10 / 10.0),
        (rep.ndcg(5), n5 / 10.0),
        (rep.ndcg(10), n10 / 10.0),
    ] {
        let got = got.ok_or("missing cutoff")?;
        ensure((got - want).abs() < METRIC_FIXTURE_TOL, format!("{got} vs {want}"))?;
    }

    let n_items = 100;
    let cases: Vec<EvalCase> = (0..2000)
        .map(|u| EvalCase {
            user_id: format!("u{u}"),
            context: vec![0],
            target: (u * 37) % n_items,
        })
        .collect();
    let random = evaluate_with(&cases, &[10], Protocol::Full, |c, topk| {
        let mut rng = ChaCha8Rng::seed_from_u64(c.user_id[1..].parse::<u64>().unwrap());
        let mut all: Vec<usize> = (0..n_items).collect();
        all.shuffle(&mut rng);
        all.truncate(topk);
        Ok(all)
    })
    .map_err(|e| e.to_string())?;
    let p = 10.0 / n_items as f64;
    let sigma = (p * (1.0 - p) / cases.len() as f64).sqrt();
    let r = random.recall(10).ok_or("missing cutoff")?;
    ensure((r - p).abs() < 3.0 * sigma, format!("random recall {r} vs {p} +- {}", 3.0 * sigma))?;
    Ok(format!("rank-3 NDCG = 0.5; fixture exact; random R@10 {r:.4} vs {p:.2} (3 sigma {:.4})", 3.0 * sigma))
}

// ---------------------------------------------------------------- 8, 9

struct ArmResult {
    test_ndcg10: f64,
    pilot: Option<f64>,
    epochs: usize,
    seconds: f64,
}

struct SeedResult {
    seed: u64,
    ar: ArmResult,
    mhl: ArmResult,
}

fn desk_train_config(strategy: Strategy, seed: u64) -> TrainConfig {
    let gamma0 = if strategy == Strategy::NoMask { 0.0 } else { 0.15 };
    TrainConfig {
        curriculum: CurriculumConfig {
            strategy,
            gamma0,
            granularity: Granularity::Token,
            warmup_epochs: 2,
            plateau_patience: 1,
            finetune_patience: 3,
            decay_fraction: 0.25,
            ..CurriculumConfig::default()
        },
        smoothing: Some(Smoothing {
            window: 3,
            decay: 2.0,
            mix: 0.2,
        }),
        lr: 2e-3,
        warmup_steps: 50,
        max_epochs: 80,
        seed,
        ..TrainConfig::default()
    }
}

fn train_arm(s: &common::SynthSetup, strategy: Strategy, seed: u64) -> Result<ArmResult, String> {
    let t0 = Instant::now();
    let model = ModelConfig::desk(8, 64);
    let data = TrainData::from_split(&s.split, &s.catalog, model.max_seq_len).map_err(|e| e.to_string())?;
    let mut trainer =
        Trainer::new(model.clone(), desk_train_config(strategy, seed), data).map_err(|e| e.to_string())?;
    trainer.run().map_err(|e| e.to_string())?;
    let dctx = mhl_core::decode::DecodeContext::new(&s.catalog, None, mhl_core::decode::Decoder::Exact)
        .map_err(|e| e.to_string())?;
    let cases = eval_cases(&s.split, &s.catalog, Target::Test).map_err(|e| e.to_string())?;
    let params = trainer.final_params();
    let report = evaluate(params, &model, &cases, &dctx, &[10], Protocol::Full).map_err(|e| e.to_string())?;
    let pilot = pilot_truncation(params, &model, &s.split, &dctx, TruncationConfig::default())
        .map_err(|e| e.to_string())?;
    Ok(ArmResult {
        test_ndcg10: report.ndcg(10).ok_or("missing cutoff")?,
        pilot: pilot.relative_ndcg10_change,
        epochs: trainer.progress.epochs_done,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

fn run_experiment() -> Result<Vec<SeedResult>, String> {
    (0..SEEDS)
        .map(|seed| {
            let s = common::synth_setup(2000, 500, 8, 64, seed);
            let ar = train_arm(&s, Strategy::NoMask, seed)?;
            let mhl = train_arm(&s, Strategy::RandomEntropyInf, seed)?;
            println!(
                "    seed {seed}: AR N@10 {:.4} ({} ep, {:.0}s, pilot {}) | MHL N@10 {:.4} ({} ep, {:.0}s, pilot {})",
                ar.test_ndcg10,
                ar.epochs,
                ar.seconds,
                fmt_pct(ar.pilot),
                mhl.test_ndcg10,
                mhl.epochs,
                mhl.seconds,
                fmt_pct(mhl.pilot)
            );
            Ok(SeedResult { seed, ar, mhl })
        })
        .collect()
}

fn fmt_pct(p: Option<f64>) -> String {
    p.map_or("undefined".into(), |v| format!("{v:+.1}%"))
}

fn directional_experiment(results: &[SeedResult]) -> Check {
    let wins = results.iter().filter(|r| r.mhl.test_ndcg10 > r.ar.test_ndcg10).count();
    let n = results.len() as f64;
    let mean_ar = results.iter().map(|r| r.ar.test_ndcg10).sum::<f64>() / n;
    let mean_mhl = results.iter().map(|r| r.mhl.test_ndcg10).sum::<f64>() / n;
    let slowest = results
        .iter()
        .map(|r| r.ar.seconds.max(r.mhl.seconds))
        .fold(0.0, f64::max);
    let detail = format!(
        "MHL better in {wins}/{} seeds; mean N@10 AR {mean_ar:.4} vs MHL {mean_mhl:.4}; slowest run {slowest:.0}s",
        results.len()
    );
    ensure(mean_mhl > mean_ar && wins >= MIN_SEED_WINS, detail.clone())?;
    Ok(detail)
}

fn truncation_pilot(results: &[SeedResult]) -> Check {
    let per_seed: Vec<String> = results
        .iter()
        .map(|r| format!("s{} AR {} MHL {}", r.seed, fmt_pct(r.ar.pilot), fmt_pct(r.mhl.pilot)))
        .collect();
    let wins = results
        .iter()
        .filter(|r| matches!((r.mhl.pilot, r.ar.pilot), (Some(m), Some(a)) if m > a))
        .count();
    let detail = format!("MHL gain larger in {wins}/{} seeds ({})", results.len(), per_seed.join("; "));
    ensure(wins >= MIN_SEED_WINS, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 10

fn reproducibility() -> Check {
    let s = common::synth_setup(300, 120, 4, 16, 7);
    let mut model = ModelConfig::desk(4, 16);
    model.hidden_size = 32;
    model.ffn_dim = 64;
    let cfg = TrainConfig {
        curriculum: CurriculumConfig {
            strategy: Strategy::RandomEntropyInf,
            warmup_epochs: 1,
            plateau_patience: 1,
            finetune_patience: 2,
            decay_fraction: 0.5,
            ..CurriculumConfig::default()
        },
        smoothing: Some(Smoothing {
            window: 3,
            decay: 2.0,
            mix: 0.2,
        }),
        lr: 3e-3,
        warmup_steps: 10,
        max_epochs: 8,
        batch_size: 32,
        seed: 21,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut traces = Vec::new();
    let mut files = Vec::new();
    for run in 0..2 {
        let data = TrainData::from_split(&s.split, &s.catalog, model.max_seq_len).map_err(|e| e.to_string())?;
        let ck_dir = dir.path().join(format!("run{run}"));
        std::fs::create_dir_all(&ck_dir).map_err(|e| e.to_string())?;
        let mut t = Trainer::new(model.clone(), cfg.clone(), data)
            .map_err(|e| e.to_string())?
            .with_checkpoint_dir(&ck_dir);
        t.run().map_err(|e| e.to_string())?;
        let mut state = t.state.clone();
        state.params = t.final_params().clone();
        let path = ck_dir.join("final.ckpt");
        save_checkpoint(&Checkpoint { state, extra: serde_json::Value::Null }, &path).map_err(|e| e.to_string())?;
        files.push(std::fs::read(&path).map_err(|e| e.to_string())?);
        files.push(std::fs::read(ck_dir.join("last.ckpt")).map_err(|e| e.to_string())?);
        traces.push(t.progress.trace.clone());
    }
    ensure(files[0] == files[2], "final checkpoints differ")?;
    ensure(files[1] == files[3], "last checkpoints differ")?;
    ensure(traces[0] == traces[1], "metric traces differ")?;
    let phases: HashSet<Phase> = traces[0].iter().map(|r| r.phase).collect();
    Ok(format!(
        "{} epochs through {} phases, checkpoints of {} bytes identical",
        traces[0].len(),
        phases.len(),
        files[0].len()
    ))
}

// ---------------------------------------------------------------- driver

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let selected = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let mut results: Vec<(u32, &str, Check)> = Vec::new();
    let mut run = |n: u32, name: &'static str, f: &mut dyn FnMut() -> Check| {
        if !selected(n) {
            return;
        }
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let status = if outcome.is_ok() { "PASS" } else { "FAIL" };
        let detail = match &outcome {
            Ok(d) | Err(d) => d.clone(),
        };
        println!("criterion {n:>2} {status}  {name}: {detail} [{:.1}s]", t0.elapsed().as_secs_f64());
        results.push((n, name, outcome));
    };

    run(1, "gradient correctness", &mut gradient_correctness);
    run(2, "loss degeneracy identities", &mut loss_degeneracy);
    run(3, "entropy suite", &mut entropy_suite);
    run(4, "mask plan contracts", &mut mask_plan_contracts);
    run(5, "curriculum state machine", &mut curriculum_state_machine);
    run(6, "decode oracle equivalence", &mut beam_decode_equivalence);
    run(7, "metric fixtures", &mut metric_fixtures);
    if selected(8) || selected(9) {
        println!("    training AR-only and R->E->Inf on {SEEDS} seeds (desk scale)...");
        let t0 = Instant::now();
        let exp = run_experiment();
        let took = t0.elapsed().as_secs_f64();
        let mut c8 = || {
            exp.as_ref()
                .map_err(Clone::clone)
                .and_then(|r| directional_experiment(r))
                .map(|d| format!("{d}; experiment {took:.0}s"))
        };
        run(8, "AR vs MHL directional experiment", &mut c8);
        let mut c9 = || exp.as_ref().map_err(Clone::clone).and_then(|r| truncation_pilot(r));
        run(9, "truncation pilot direction", &mut c9);
    }
    run(10, "reproducibility", &mut reproducibility);

    let failed: Vec<u32> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!(" ({failed:?})")
        }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
