//! Leave-one-out ranking metrics, full-catalog evaluation and the
//! truncated-history pilot.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::SplitCorpus;
use crate::decode::{DecodeContext, NextLogProbs};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Params};
use crate::tokenizer::{Catalog, SemanticId};

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid("K", "cutoff must be >= 1"));
    }
    Ok(())
}

/// 1-based rank of `target` in `ranked`.
pub fn rank_of(ranked: &[usize], target: usize) -> Option<usize> {
    ranked.iter().position(|&i| i == target).map(|p| p + 1)
}

pub fn recall_at_k(ranked: &[usize], target: usize, k: usize) -> Result<f64> {
    check_k(k)?;
    Ok(match rank_of(ranked, target) {
        Some(r) if r <= k => 1.0,
        _ => 0.0,
    })
}

/// Single-target NDCG: `1 / log2(rank + 1)` inside the cutoff, else 0.
pub fn ndcg_at_k(ranked: &[usize], target: usize, k: usize) -> Result<f64> {
    check_k(k)?;
    Ok(match rank_of(ranked, target) {
        Some(r) if r <= k => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Full,
    Truncated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutoffMetrics {
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metrics: Vec<CutoffMetrics>,
    pub n_users: usize,
    pub protocol: Protocol,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub checkpoint: Option<String>,
}

impl MetricsReport {
    pub fn at(&self, k: usize) -> Option<&CutoffMetrics> {
        self.metrics.iter().find(|m| m.k == k)
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.at(k).map(|m| m.ndcg)
    }

    pub fn recall(&self, k: usize) -> Option<f64> {
        self.at(k).map(|m| m.recall)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
    }
}

/// Running sums of per-user metrics; merging is associative.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSums {
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub n: usize,
}

impl MetricSums {
    pub fn new(ks: &[usize]) -> Result<Self> {
        if ks.is_empty() {
            return Err(Error::invalid("eval.ks", "need at least one cutoff"));
        }
        for &k in ks {
            check_k(k)?;
        }
        Ok(MetricSums {
            ks: ks.to_vec(),
            recall: vec![0.0; ks.len()],
            ndcg: vec![0.0; ks.len()],
            n: 0,
        })
    }

    pub fn add_user(&mut self, ranked: &[usize], target: usize) -> Result<()> {
        for (i, &k) in self.ks.iter().enumerate() {
            self.recall[i] += recall_at_k(ranked, target, k)?;
            self.ndcg[i] += ndcg_at_k(ranked, target, k)?;
        }
        self.n += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &MetricSums) {
        for i in 0..self.ks.len() {
            self.recall[i] += other.recall[i];
            self.ndcg[i] += other.ndcg[i];
        }
        self.n += other.n;
    }

    pub fn report(&self, protocol: Protocol) -> MetricsReport {
        let n = self.n.max(1) as f64;
        MetricsReport {
            metrics: self
                .ks
                .iter()
                .enumerate()
                .map(|(i, &k)| CutoffMetrics {
                    k,
                    recall: self.recall[i] / n,
                    ndcg: self.ndcg[i] / n,
                })
                .collect(),
            n_users: self.n,
            protocol,
            seed: None,
            checkpoint: None,
        }
    }
}

/// One evaluation case: catalog-indexed context and target.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCase {
    pub user_id: String,
    pub context: Vec<usize>,
    pub target: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Validation,
    Test,
}

fn lookup(catalog: &Catalog, item: &str, user: &str) -> Result<usize> {
    catalog.index_of(item).ok_or_else(|| {
        Error::invalid(
            "catalog",
            format!("item {item} of user {user} is missing from the catalog"),
        )
    })
}

/// Maps every held-out user of `split` to catalog indices.
pub fn eval_cases(split: &SplitCorpus, catalog: &Catalog, which: Target) -> Result<Vec<EvalCase>> {
    let mut out = Vec::new();
    for u in &split.users {
        let (ctx, target): (Vec<String>, &str) = match which {
            Target::Validation => match u.val_context() {
                Some((c, t)) => (c.to_vec(), t),
                None => continue,
            },
            Target::Test => match u.test_context() {
                Some((c, t)) => (c, t),
                None => continue,
            },
        };
        if ctx.is_empty() {
            continue;
        }
        let context = ctx
            .iter()
            .map(|i| lookup(catalog, i, &u.user_id))
            .collect::<Result<Vec<_>>>()?;
        out.push(EvalCase {
            user_id: u.user_id.clone(),
            context,
            target: lookup(catalog, target, &u.user_id)?,
        });
    }
    Ok(out)
}

/// Evaluates an arbitrary ranking function. Cases are processed in
/// parallel and reduced in input order.
pub fn evaluate_with<F>(cases: &[EvalCase], ks: &[usize], protocol: Protocol, rank: F) -> Result<MetricsReport>
where
    F: Fn(&EvalCase, usize) -> Result<Vec<usize>> + Sync,
{
    let mut total = MetricSums::new(ks)?;
    let max_k = *ks.iter().max().unwrap_or(&1);
    let per_user: Vec<Result<MetricSums>> = cases
        .par_iter()
        .map(|c| {
            let ranked = rank(c, max_k)?;
            let mut s = MetricSums::new(ks)?;
            s.add_user(&ranked, c.target)?;
            Ok(s)
        })
        .collect();
    for s in per_user {
        total.merge(&s?);
    }
    Ok(total.report(protocol))
}

pub fn context_codes(catalog: &Catalog, context: &[usize]) -> Vec<SemanticId> {
    context.iter().map(|&i| catalog.codes[i].clone()).collect()
}

/// Ranks the full catalog for every case with the model and decoder.
pub fn evaluate(
    params: &Params,
    cfg: &ModelConfig,
    cases: &[EvalCase],
    dctx: &DecodeContext<'_>,
    ks: &[usize],
    protocol: Protocol,
) -> Result<MetricsReport> {
    if cases.is_empty() {
        return Err(Error::invalid("split", "no users to evaluate"));
    }
    evaluate_with(cases, ks, protocol, |c, topk| {
        let codes = context_codes(dctx.catalog, &c.context);
        let lp = NextLogProbs::compute(params, cfg, &codes)?;
        Ok(dctx.rank(&lp, topk)?.into_iter().map(|s| s.index).collect())
    })
}

/// `(truncated − full) / full` in percent; undefined when `full == 0`.
pub fn relative_change(full: f64, truncated: f64) -> Option<f64> {
    (full != 0.0).then(|| (truncated - full) / full * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncationConfig {
    pub min_len: usize,
    pub drop_last: usize,
}

impl Default for TruncationConfig {
    fn default() -> Self {
        TruncationConfig {
            min_len: 20,
            drop_last: 15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotResult {
    pub full: MetricsReport,
    pub truncated: MetricsReport,
    /// Relative NDCG@10 change in percent; `None` when full NDCG@10 is 0.
    pub relative_ndcg10_change: Option<f64>,
}

/// Evaluates the full and truncated histories of the same long-history
/// users.
pub fn pilot_truncation(
    params: &Params,
    cfg: &ModelConfig,
    split: &SplitCorpus,
    dctx: &DecodeContext<'_>,
    trunc: TruncationConfig,
) -> Result<PilotResult> {
    let truncated_split = crate::corpus::truncate_long(split, trunc.min_len, trunc.drop_last)?;
    if truncated_split.is_empty() {
        return Err(Error::invalid(
            "eval.truncation",
            format!("no test sequence longer than {}", trunc.min_len),
        ));
    }
    let keep: HashSet<&str> = truncated_split.users.iter().map(|u| u.user_id.as_str()).collect();
    let full_split = split.restrict_to(&keep);
    let ks = [5, 10];
    let full = evaluate(
        params,
        cfg,
        &eval_cases(&full_split, dctx.catalog, Target::Test)?,
        dctx,
        &ks,
        Protocol::Full,
    )?;
    let truncated = evaluate(
        params,
        cfg,
        &eval_cases(&truncated_split, dctx.catalog, Target::Test)?,
        dctx,
        &ks,
        Protocol::Truncated,
    )?;
    let relative_ndcg10_change = relative_change(full.ndcg(10).unwrap(), truncated.ndcg(10).unwrap());
    Ok(PilotResult {
        full,
        truncated,
        relative_ndcg10_change,
    })
}

/// Writes `epoch,<name>` CSV rows.
pub fn write_plot_csv(path: &Path, name: &str, series: &[(usize, f64)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    let io = |e| Error::io(path, e);
    writeln!(w, "epoch,{name}").map_err(io)?;
    for (epoch, v) in series {
        writeln!(w, "{epoch},{v}").map_err(io)?;
    }
    w.flush().map_err(io)
}
