//! Interaction ingestion, core-N filtering, leave-one-out splitting, the
//! synthetic latent-intent generator and the truncated-history split.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub item_id: String,
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserEvents {
    pub user_id: String,
    pub events: Vec<Event>,
}

/// Per-user interaction histories, each sorted by timestamp.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawCorpus {
    pub users: Vec<UserEvents>,
}

impl RawCorpus {
    pub fn n_events(&self) -> usize {
        self.users.iter().map(|u| u.events.len()).sum()
    }

    pub fn n_items(&self) -> usize {
        self.users
            .iter()
            .flat_map(|u| u.events.iter().map(|e| e.item_id.as_str()))
            .collect::<HashSet<_>>()
            .len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    /// Distinct item ids in order of first appearance.
    pub fn item_ids(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for e in self.users.iter().flat_map(|u| &u.events) {
            if seen.insert(e.item_id.as_str()) {
                out.push(e.item_id.clone());
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InteractionFormat {
    Tsv,
    Jsonl,
}

#[derive(Deserialize)]
struct JsonInteraction {
    user_id: serde_json::Value,
    item_id: serde_json::Value,
    timestamp: i64,
}

fn opaque_id(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// Reads `user, item, timestamp` triples. Users keep first-appearance order;
/// events are stably sorted by timestamp, so ties keep file order.
pub fn load_interactions(path: &Path, format: InteractionFormat) -> Result<RawCorpus> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut users: Vec<UserEvents> = Vec::new();

    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message,
        };
        let (user, item, ts) = match format {
            InteractionFormat::Tsv => {
                let fields: Vec<&str> = trimmed.split('\t').collect();
                if fields.len() != 3 {
                    return Err(parse_err(format!(
                        "expected 3 tab-separated fields, found {}",
                        fields.len()
                    )));
                }
                let ts = fields[2]
                    .trim()
                    .parse::<i64>()
                    .map_err(|e| parse_err(format!("bad timestamp {:?}: {e}", fields[2])))?;
                if fields[0].is_empty() || fields[1].is_empty() {
                    return Err(parse_err("empty user or item id".into()));
                }
                (fields[0].to_string(), fields[1].to_string(), ts)
            }
            InteractionFormat::Jsonl => {
                let rec: JsonInteraction =
                    serde_json::from_str(trimmed).map_err(|e| parse_err(e.to_string()))?;
                let user = opaque_id(&rec.user_id)
                    .ok_or_else(|| parse_err("user_id must be a string or number".into()))?;
                let item = opaque_id(&rec.item_id)
                    .ok_or_else(|| parse_err("item_id must be a string or number".into()))?;
                (user, item, rec.timestamp)
            }
        };
        let slot = *index.entry(user.clone()).or_insert_with(|| {
            users.push(UserEvents {
                user_id: user,
                events: Vec::new(),
            });
            users.len() - 1
        });
        users[slot].events.push(Event {
            item_id: item,
            timestamp: ts,
        });
    }

    for u in &mut users {
        u.events.sort_by_key(|e| e.timestamp);
    }
    Ok(RawCorpus { users })
}

pub fn write_interactions_tsv(corpus: &RawCorpus, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for u in &corpus.users {
        for e in &u.events {
            writeln!(w, "{}\t{}\t{}", u.user_id, e.item_id, e.timestamp)
                .map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Iteratively drops users and items with fewer than `min_count`
/// interactions until nothing changes.
pub fn core_filter(corpus: &RawCorpus, min_count: usize) -> Result<RawCorpus> {
    if min_count == 0 {
        return Err(Error::invalid("min_count", "must be >= 1"));
    }
    let mut current = corpus.clone();
    loop {
        let mut item_counts: HashMap<&str, usize> = HashMap::new();
        for e in current.users.iter().flat_map(|u| &u.events) {
            *item_counts.entry(e.item_id.as_str()).or_default() += 1;
        }
        let mut changed = false;
        let next: Vec<UserEvents> = current
            .users
            .iter()
            .filter_map(|u| {
                let kept: Vec<Event> = u
                    .events
                    .iter()
                    .filter(|e| item_counts[e.item_id.as_str()] >= min_count)
                    .cloned()
                    .collect();
                if kept.len() != u.events.len() {
                    changed = true;
                }
                if kept.len() < min_count {
                    changed = true;
                    None
                } else {
                    Some(UserEvents {
                        user_id: u.user_id.clone(),
                        events: kept,
                    })
                }
            })
            .collect();
        current = RawCorpus { users: next };
        if !changed {
            return Ok(current);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSplit {
    pub user_id: String,
    /// Training prefix. For users with a held-out pair this excludes the
    /// last two events.
    pub train: Vec<String>,
    pub val: Option<String>,
    pub test: Option<String>,
}

impl UserSplit {
    /// Context for predicting the validation target.
    pub fn val_context(&self) -> Option<(&[String], &str)> {
        self.val.as_deref().map(|v| (self.train.as_slice(), v))
    }

    /// Context for predicting the test target (train prefix followed by the
    /// validation item).
    pub fn test_context(&self) -> Option<(Vec<String>, &str)> {
        let test = self.test.as_deref()?;
        let mut ctx = self.train.clone();
        ctx.extend(self.val.iter().cloned());
        Some((ctx, test))
    }

    /// Full event sequence this split was cut from.
    pub fn full_sequence(&self) -> Vec<String> {
        let mut seq = self.train.clone();
        seq.extend(self.val.iter().cloned());
        seq.extend(self.test.iter().cloned());
        seq
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCorpus {
    pub users: Vec<UserSplit>,
    /// Users with fewer than three events; present in training only.
    pub n_short_users: usize,
}

impl SplitCorpus {
    pub fn n_eval_users(&self) -> usize {
        self.users.iter().filter(|u| u.test.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    /// Keeps only users whose ids are in `keep`.
    pub fn restrict_to(&self, keep: &HashSet<&str>) -> SplitCorpus {
        SplitCorpus {
            users: self
                .users
                .iter()
                .filter(|u| keep.contains(u.user_id.as_str()))
                .cloned()
                .collect(),
            n_short_users: 0,
        }
    }
}

pub fn split_leave_one_out(corpus: &RawCorpus) -> Result<SplitCorpus> {
    if corpus.is_empty() {
        return Err(Error::invalid("corpus", "cannot split an empty corpus"));
    }
    let mut n_short_users = 0;
    let users = corpus
        .users
        .iter()
        .map(|u| {
            let items: Vec<String> = u.events.iter().map(|e| e.item_id.clone()).collect();
            let n = items.len();
            if n < 3 {
                n_short_users += 1;
                UserSplit {
                    user_id: u.user_id.clone(),
                    train: items,
                    val: None,
                    test: None,
                }
            } else {
                UserSplit {
                    user_id: u.user_id.clone(),
                    train: items[..n - 2].to_vec(),
                    val: Some(items[n - 2].clone()),
                    test: Some(items[n - 1].clone()),
                }
            }
        })
        .collect();
    Ok(SplitCorpus {
        users,
        n_short_users,
    })
}

/// Truncated-history evaluation set: test sequences strictly longer than
/// `min_len` lose their final `drop_last` items, and the last remaining
/// item becomes the new test target.
///
/// The result reuses [`UserSplit`] so that its test context is exactly the
/// truncated history: `train` holds all but the last context item, `val`
/// holds the last context item.
pub fn truncate_long(split: &SplitCorpus, min_len: usize, drop_last: usize) -> Result<SplitCorpus> {
    if drop_last >= min_len {
        return Err(Error::invalid(
            "drop_last",
            format!("must be < min_len ({drop_last} >= {min_len})"),
        ));
    }
    let users: Vec<UserSplit> = split
        .users
        .iter()
        .filter(|u| u.test.is_some())
        .filter_map(|u| {
            let full = u.full_sequence();
            if full.len() <= min_len {
                return None;
            }
            let kept = &full[..full.len() - drop_last];
            let target = kept[kept.len() - 1].clone();
            let ctx = &kept[..kept.len() - 1];
            Some(UserSplit {
                user_id: u.user_id.clone(),
                train: ctx[..ctx.len() - 1].to_vec(),
                val: Some(ctx[ctx.len() - 1].clone()),
                test: Some(target),
            })
        })
        .collect();
    if users.is_empty() {
        log::warn!("truncate_long: no test sequence longer than {min_len}");
    }
    Ok(SplitCorpus {
        users,
        n_short_users: 0,
    })
}

pub fn write_split_manifest(split: &SplitCorpus, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for u in &split.users {
        serde_json::to_writer(&mut w, u)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_split_manifest(path: &Path) -> Result<SplitCorpus> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut users = Vec::new();
    let mut n_short_users = 0;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let u: UserSplit = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if u.test.is_none() {
            n_short_users += 1;
        }
        users.push(u);
    }
    Ok(SplitCorpus {
        users,
        n_short_users,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_intents: usize,
    /// Inclusive range of path lengths.
    pub path_len_range: (usize, usize),
    pub intent_switch_prob: f64,
    pub noise_prob: f64,
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 2000,
            n_items: 500,
            n_intents: 20,
            path_len_range: (6, 30),
            intent_switch_prob: 0.1,
            noise_prob: 0.1,
            feature_dim: 48,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_items == 0 || self.n_intents == 0 || self.feature_dim == 0 {
            return Err(Error::invalid("synth", "all counts must be positive"));
        }
        let (lo, hi) = self.path_len_range;
        if lo == 0 || lo > hi {
            return Err(Error::invalid(
                "synth.path_len_range",
                format!("need 1 <= lo <= hi, got ({lo}, {hi})"),
            ));
        }
        for (name, p) in [
            ("synth.intent_switch_prob", self.intent_switch_prob),
            ("synth.noise_prob", self.noise_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(name, format!("{p} not in [0, 1]")));
            }
        }
        if self.n_items < self.n_intents {
            return Err(Error::invalid(
                "synth.n_items",
                format!("{} items cannot cover {} intents", self.n_items, self.n_intents),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub corpus: RawCorpus,
    /// Item ids in row order of `item_features`.
    pub item_ids: Vec<String>,
    pub item_features: Mat,
    pub item_intent: Vec<usize>,
    /// Latent intent of each user at each step.
    pub intent_labels: Vec<Vec<usize>>,
    /// Whether each emitted event was an off-intent noise item.
    pub noise_flags: Vec<Vec<bool>>,
}

/// Generates a latent-intent corpus. Items are split into `n_intents`
/// contiguous groups laid out on a ring inside each group; a user walks
/// forward along the ring of the current intent, switches intent with
/// `intent_switch_prob` and emits a random off-intent item with
/// `noise_prob`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Contiguous, near-equal intent blocks.
    let item_intent: Vec<usize> = (0..cfg.n_items)
        .map(|i| i * cfg.n_intents / cfg.n_items)
        .collect();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_intents];
    for (i, &c) in item_intent.iter().enumerate() {
        members[c].push(i);
    }

    let item_dist = Normal::new(0.0, 0.25).unwrap();
    let centers = Mat::randn(cfg.n_intents, cfg.feature_dim, 1.0, &mut rng);
    let mut item_features = Mat::zeros(cfg.n_items, cfg.feature_dim);
    for i in 0..cfg.n_items {
        let c = centers.row(item_intent[i]);
        for (dst, &cv) in item_features.row_mut(i).iter_mut().zip(c) {
            *dst = cv + item_dist.sample(&mut rng);
        }
    }

    let item_ids: Vec<String> = (0..cfg.n_items).map(|i| format!("i{i:05}")).collect();
    let mut users = Vec::with_capacity(cfg.n_users);
    let mut intent_labels = Vec::with_capacity(cfg.n_users);
    let mut noise_flags = Vec::with_capacity(cfg.n_users);
    let (lo, hi) = cfg.path_len_range;

    for u in 0..cfg.n_users {
        let len = rng.random_range(lo..=hi);
        let mut intent = rng.random_range(0..cfg.n_intents);
        let mut cursor = rng.random_range(0..members[intent].len());
        let mut events = Vec::with_capacity(len);
        let mut labels = Vec::with_capacity(len);
        let mut noise = Vec::with_capacity(len);
        for step in 0..len {
            if step > 0 && cfg.n_intents > 1 && rng.random_bool(cfg.intent_switch_prob) {
                let shift = rng.random_range(1..cfg.n_intents);
                intent = (intent + shift) % cfg.n_intents;
                cursor = rng.random_range(0..members[intent].len());
            } else if step > 0 {
                let ring = members[intent].len();
                cursor = (cursor + rng.random_range(1..=2)) % ring;
            }
            let is_noise = cfg.n_intents > 1 && rng.random_bool(cfg.noise_prob);
            let item = if is_noise {
                let other = (intent + rng.random_range(1..cfg.n_intents)) % cfg.n_intents;
                members[other][rng.random_range(0..members[other].len())]
            } else {
                members[intent][cursor]
            };
            events.push(Event {
                item_id: item_ids[item].clone(),
                timestamp: (u as i64) * 1_000_000 + step as i64 * 3600,
            });
            labels.push(intent);
            noise.push(is_noise);
        }
        users.push(UserEvents {
            user_id: format!("u{u:06}"),
            events,
        });
        intent_labels.push(labels);
        noise_flags.push(noise);
    }

    Ok(SynthData {
        corpus: RawCorpus { users },
        item_ids,
        item_features,
        item_intent,
        intent_labels,
        noise_flags,
    })
}
