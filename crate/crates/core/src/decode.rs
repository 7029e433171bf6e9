//! Catalog ranking from the final decoder state: an exhaustive scorer and a
//! graph-constrained beam search that only scores a reachable subset.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, head_logits, HeadSet, ModelConfig, ModelInput, Params};
use crate::tensor::log_softmax;
use crate::tokenizer::{Catalog, ItemGraph, SemanticId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub index: usize,
    /// Sum over positions of the log-probability of the item's codeword.
    pub score: f64,
}

/// Score descending, then catalog index ascending.
pub fn rank_order(a: &ScoredItem, b: &ScoredItem) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then(a.index.cmp(&b.index))
}

/// Per-position log-probabilities of the prediction heads at the last
/// context position. Only the last `max_seq_len` context items are used.
#[derive(Debug, Clone, PartialEq)]
pub struct NextLogProbs {
    pub per_position: Vec<Vec<f64>>,
    pad: Option<Vec<usize>>,
}

impl NextLogProbs {
    pub fn compute(params: &Params, cfg: &ModelConfig, context: &[SemanticId]) -> Result<Self> {
        if context.is_empty() {
            return Err(Error::invalid("context", "cannot decode from an empty context"));
        }
        let start = context.len().saturating_sub(cfg.max_seq_len);
        let ctx = &context[start..];
        let cache = forward(params, cfg, ModelInput::unmasked(ctx), None)?;
        let d = cache.state(ctx.len() - 1);
        let per_position = (0..cfg.positions())
            .map(|k| log_softmax(&head_logits(params, d, k, HeadSet::Predict), cfg.temperature))
            .collect();
        Ok(NextLogProbs {
            per_position,
            pad: cfg.pad.then(|| cfg.codebook_sizes.clone()),
        })
    }

    /// Builds from raw per-position log-probabilities (no PAD codewords).
    pub fn from_log_probs(per_position: Vec<Vec<f64>>) -> Self {
        NextLogProbs {
            per_position,
            pad: None,
        }
    }

    /// Σ_k log P^k(codeword_k). PAD positions contribute nothing.
    pub fn score(&self, id: &SemanticId) -> f64 {
        let mut s = 0.0;
        for (k, &c) in id.0.iter().enumerate() {
            if self.pad.as_ref().is_some_and(|p| p[k] == c as usize) {
                continue;
            }
            s += self.per_position[k][c as usize];
        }
        s
    }

    /// The `m` most probable codewords at position `k` (ties: lower index).
    pub fn top_codewords(&self, k: usize, m: usize) -> Vec<u32> {
        let lp = &self.per_position[k];
        let mut idx: Vec<u32> = (0..lp.len() as u32).collect();
        idx.sort_by(|&a, &b| lp[b as usize].total_cmp(&lp[a as usize]).then(a.cmp(&b)));
        idx.truncate(m);
        idx
    }
}

pub fn score_exact(
    params: &Params,
    cfg: &ModelConfig,
    context: &[SemanticId],
    item: &SemanticId,
) -> Result<f64> {
    Ok(NextLogProbs::compute(params, cfg, context)?.score(item))
}

/// Scores every catalog item and returns the best `topk`.
pub fn rank_with(lp: &NextLogProbs, catalog: &Catalog, topk: usize) -> Vec<ScoredItem> {
    let mut all: Vec<ScoredItem> = catalog
        .codes
        .iter()
        .enumerate()
        .map(|(index, id)| ScoredItem {
            index,
            score: lp.score(id),
        })
        .collect();
    all.sort_by(rank_order);
    all.truncate(topk);
    all
}

pub fn rank_exact(
    params: &Params,
    cfg: &ModelConfig,
    context: &[SemanticId],
    catalog: &Catalog,
    topk: usize,
) -> Result<Vec<ScoredItem>> {
    if topk > catalog.len() {
        return Err(Error::invalid(
            "topk",
            format!("{topk} exceeds catalog size {}", catalog.len()),
        ));
    }
    let lp = NextLogProbs::compute(params, cfg, context)?;
    Ok(rank_with(&lp, catalog, topk))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub steps: usize,
    pub seeds_per_position: usize,
    /// Seed for the random fallback when seeding finds nothing.
    pub seed: u64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_size: 50,
            steps: 3,
            seeds_per_position: 4,
            seed: 0,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::invalid("decode.beam_size", "must be >= 1"));
        }
        if self.seeds_per_position == 0 {
            return Err(Error::invalid("decode.seeds_per_position", "must be >= 1"));
        }
        Ok(())
    }
}

/// Postings list per (position, codeword).
#[derive(Debug, Clone)]
pub struct CodewordIndex {
    postings: Vec<Vec<Vec<u32>>>,
}

impl CodewordIndex {
    pub fn new(catalog: &Catalog) -> Self {
        let mut postings: Vec<Vec<Vec<u32>>> = catalog
            .codebook_sizes
            .iter()
            .map(|&w| vec![Vec::new(); w + usize::from(catalog.has_pad)])
            .collect();
        for (i, id) in catalog.codes.iter().enumerate() {
            for (k, &c) in id.0.iter().enumerate() {
                postings[k][c as usize].push(i as u32);
            }
        }
        CodewordIndex { postings }
    }

    pub fn items(&self, k: usize, codeword: u32) -> &[u32] {
        self.postings[k]
            .get(codeword as usize)
            .map_or(&[], Vec::as_slice)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamState {
    pub beam: Vec<ScoredItem>,
    pub visited: HashSet<usize>,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamOutput {
    pub items: Vec<ScoredItem>,
    pub n_scored: usize,
    pub used_fallback: bool,
}

fn merge_into_beam(state: &mut BeamState, fresh: Vec<ScoredItem>, beam_size: usize) {
    state.beam.extend(fresh);
    state.beam.sort_by(rank_order);
    state.beam.truncate(beam_size);
}

/// Seed-then-propagate beam search over `graph` with precomputed heads.
pub fn beam_search_with(
    lp: &NextLogProbs,
    catalog: &Catalog,
    index: &CodewordIndex,
    graph: &ItemGraph,
    cfg: &BeamConfig,
    topk: usize,
) -> Result<BeamOutput> {
    cfg.validate()?;
    if graph.n_items() != catalog.len() {
        return Err(Error::Shape(format!(
            "graph has {} items, catalog {}",
            graph.n_items(),
            catalog.len()
        )));
    }
    let score = |i: usize| ScoredItem {
        index: i,
        score: lp.score(&catalog.codes[i]),
    };

    let mut seeds: Vec<usize> = Vec::new();
    for k in 0..catalog.positions() {
        for c in lp.top_codewords(k, cfg.seeds_per_position) {
            seeds.extend(index.items(k, c).iter().map(|&i| i as usize));
        }
    }
    seeds.sort_unstable();
    seeds.dedup();

    let mut used_fallback = false;
    if seeds.is_empty() && !catalog.is_empty() {
        let want = cfg.seeds_per_position * catalog.positions();
        warn!("beam seeding matched no catalog item; scoring {want} random items");
        let mut all: Vec<usize> = (0..catalog.len()).collect();
        all.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
        all.truncate(want);
        all.sort_unstable();
        seeds = all;
        used_fallback = true;
    }

    let mut state = BeamState {
        beam: Vec::new(),
        visited: seeds.iter().copied().collect(),
        step: 0,
    };
    let mut n_scored = seeds.len();
    merge_into_beam(&mut state, seeds.into_iter().map(score).collect(), cfg.beam_size);

    while state.step < cfg.steps {
        let mut frontier: Vec<usize> = state
            .beam
            .iter()
            .flat_map(|s| graph.neighbors[s.index].iter().map(|&(j, _)| j as usize))
            .filter(|j| !state.visited.contains(j))
            .collect();
        frontier.sort_unstable();
        frontier.dedup();
        state.step += 1;
        if frontier.is_empty() {
            break;
        }
        state.visited.extend(frontier.iter().copied());
        n_scored += frontier.len();
        merge_into_beam(&mut state, frontier.into_iter().map(score).collect(), cfg.beam_size);
    }

    let mut items = state.beam;
    items.truncate(topk);
    Ok(BeamOutput {
        items,
        n_scored,
        used_fallback,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn beam_search_graph(
    params: &Params,
    model_cfg: &ModelConfig,
    context: &[SemanticId],
    catalog: &Catalog,
    index: &CodewordIndex,
    graph: &ItemGraph,
    cfg: &BeamConfig,
    topk: usize,
) -> Result<BeamOutput> {
    let lp = NextLogProbs::compute(params, model_cfg, context)?;
    beam_search_with(&lp, catalog, index, graph, cfg, topk)
}

/// How `evaluate` and `decode` rank the catalog.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum Decoder {
    Exact,
    Beam(BeamConfig),
}

/// Graph and index needed by the beam decoder, built once per catalog.
pub struct DecodeContext<'a> {
    pub catalog: &'a Catalog,
    pub index: CodewordIndex,
    pub graph: Option<&'a ItemGraph>,
    pub decoder: Decoder,
}

impl<'a> DecodeContext<'a> {
    pub fn new(catalog: &'a Catalog, graph: Option<&'a ItemGraph>, decoder: Decoder) -> Result<Self> {
        if matches!(decoder, Decoder::Beam(_)) && graph.is_none() {
            return Err(Error::invalid("decode", "beam decoding needs an item graph"));
        }
        Ok(DecodeContext {
            catalog,
            index: CodewordIndex::new(catalog),
            graph,
            decoder,
        })
    }

    pub fn rank(&self, lp: &NextLogProbs, topk: usize) -> Result<Vec<ScoredItem>> {
        let topk = topk.min(self.catalog.len());
        match (&self.decoder, self.graph) {
            (Decoder::Beam(b), Some(g)) => {
                Ok(beam_search_with(lp, self.catalog, &self.index, g, b, topk)?.items)
            }
            _ => Ok(rank_with(lp, self.catalog, topk)),
        }
    }
}

/// One line of decode output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub user_id: String,
    pub item_ids: Vec<String>,
    pub scores: Vec<f64>,
}

pub fn write_decode_jsonl(path: &Path, records: &[DecodeRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
