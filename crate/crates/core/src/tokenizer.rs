//! Semantic-ID tokenization: PCA reduction, product quantization with an
//! optional learned rotation, nearest-centroid encoding, the token-overlap
//! item graph and ingestion of externally produced token sequences.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const CODEBOOK_VERSION: &str = "mhl-codebooks/1";

/// K codewords identifying an item, one per codebook position.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SemanticId(pub Vec<u32>);

impl SemanticId {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn codewords(&self) -> &[u32] {
        &self.0
    }
}

/// Result of [`reduce_embeddings`].
#[derive(Debug, Clone)]
pub struct Reduction {
    pub projected: Mat,
    /// input_dim × d, columns ordered by decreasing variance.
    pub basis: Mat,
    pub mean: Vec<f64>,
    /// Covariance eigenvalues (1/n normalization), descending, all of them.
    pub eigenvalues: Vec<f64>,
}

/// Centers `x` and projects it on its top-`d` principal directions.
pub fn reduce_embeddings(x: &Mat, d: usize) -> Result<Reduction> {
    let (n, dim) = (x.rows, x.cols);
    if n == 0 || dim == 0 {
        return Err(Error::invalid("features", "empty feature matrix"));
    }
    if x.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("feature matrix".into()));
    }
    if d == 0 || d > n.min(dim) {
        return Err(Error::invalid(
            "pca_dim",
            format!("{d} not in [1, min(n={n}, dim={dim})]"),
        ));
    }
    let mut mean = vec![0.0; dim];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, dim, |r, c| x.get(r, c) - mean[c]);
    let cov = (centered.transpose() * &centered) / n as f64;
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let tol = 1e-10 * eigenvalues[0].max(1e-300);
    let rank = eigenvalues.iter().filter(|&&l| l > tol).count();
    if d > rank {
        return Err(Error::RankExceeded { requested: d, rank });
    }

    let mut basis = Mat::zeros(dim, d);
    for (j, &src) in order.iter().take(d).enumerate() {
        let col = eig.eigenvectors.column(src);
        // Sign convention: largest-magnitude component positive.
        let pivot = col
            .iter()
            .enumerate()
            .fold((0usize, 0.0f64), |best, (i, &v)| {
                if v.abs() > best.1.abs() + 1e-12 {
                    (i, v)
                } else {
                    best
                }
            })
            .1;
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for i in 0..dim {
            basis.data[i * d + j] = sign * col[i];
        }
    }

    let projected = project(x, &mean, &basis);
    Ok(Reduction {
        projected,
        basis,
        mean,
        eigenvalues,
    })
}

fn project(x: &Mat, mean: &[f64], basis: &Mat) -> Mat {
    let mut out = Mat::zeros(x.rows, basis.cols);
    let mut centered = vec![0.0; x.cols];
    for r in 0..x.rows {
        for ((c, v), m) in centered.iter_mut().zip(x.row(r)).zip(mean) {
            *c = v - m;
        }
        project_row(&centered, basis, out.row_mut(r));
    }
    out
}

fn project_row(centered: &[f64], basis: &Mat, out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (i, &c) in centered.iter().enumerate() {
        for (o, b) in out.iter_mut().zip(basis.row(i)) {
            *o += c * b;
        }
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid (squared Euclidean, lowest index on ties)
/// and its distance.
pub fn nearest_centroid(x: &[f64], centroids: &Mat) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for c in 0..centroids.rows {
        let d = sq_dist(x, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub centroids: Mat,
    pub assignments: Vec<usize>,
    /// Mean squared error after each assignment step.
    pub error_trace: Vec<f64>,
}

fn kmeans_plus_plus<R: Rng>(data: &Mat, k: usize, rng: &mut R) -> Mat {
    let n = data.rows;
    let mut centroids = Mat::zeros(k, data.cols);
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(data.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(data.row(i), data.row(first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            // Guard against falling off the end onto a zero-weight point.
            if d2[chosen] == 0.0 {
                chosen = d2
                    .iter()
                    .enumerate()
                    .rev()
                    .find(|(_, &w)| w > 0.0)
                    .map(|(i, _)| i)
                    .unwrap_or(chosen);
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(data.row(pick));
        for (i, slot) in d2.iter_mut().enumerate() {
            *slot = slot.min(sq_dist(data.row(i), data.row(pick)));
        }
    }
    centroids
}

/// Lloyd's k-means. Empty clusters are re-seeded from the point farthest
/// from its assigned centroid (lowest index on ties).
pub fn kmeans<R: Rng>(
    data: &Mat,
    k: usize,
    iters: usize,
    init: Option<Mat>,
    rng: &mut R,
) -> Result<KMeansResult> {
    if k == 0 {
        return Err(Error::invalid("codebook_size", "must be >= 1"));
    }
    if data.rows < k {
        return Err(Error::invalid(
            "codebook_size",
            format!("{k} centroids need at least {k} points, got {}", data.rows),
        ));
    }
    let mut centroids = match init {
        Some(c) => c,
        None => kmeans_plus_plus(data, k, rng),
    };
    let n = data.rows;
    let mut assignments = vec![0usize; n];
    let mut dists = vec![0.0; n];
    let mut error_trace = Vec::with_capacity(iters + 1);

    for iter in 0..=iters {
        for i in 0..n {
            let (c, d) = nearest_centroid(data.row(i), &centroids);
            assignments[i] = c;
            dists[i] = d;
        }
        // Re-seed empty clusters from the farthest points.
        let mut counts = vec![0usize; k];
        assignments.iter().for_each(|&a| counts[a] += 1);
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| counts[assignments[i]] > 1)
                .fold(None::<usize>, |best, i| match best {
                    Some(b) if dists[b] >= dists[i] => Some(b),
                    _ => Some(i),
                });
            if let Some(i) = far {
                counts[assignments[i]] -= 1;
                assignments[i] = c;
                counts[c] = 1;
                dists[i] = 0.0;
                centroids.row_mut(c).copy_from_slice(data.row(i));
            }
        }
        error_trace.push(dists.iter().sum::<f64>() / n as f64);
        if iter == iters {
            break;
        }
        let mut sums = Mat::zeros(k, data.cols);
        for i in 0..n {
            let row = data.row(i);
            for (s, v) in sums.row_mut(assignments[i]).iter_mut().zip(row) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let inv = 1.0 / counts[c] as f64;
            for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                *dst = s * inv;
            }
        }
    }
    Ok(KMeansResult {
        centroids,
        assignments,
        error_trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookSet {
    pub version: String,
    pub positions: usize,
    pub codebook_size: usize,
    pub sub_dim: usize,
    /// One `codebook_size × sub_dim` matrix per position.
    pub codebooks: Vec<Mat>,
    /// Orthonormal d×d rotation applied as `y · R` before splitting.
    pub rotation: Option<Mat>,
    pub pca_basis: Mat,
    pub pca_mean: Vec<f64>,
}

impl CodebookSet {
    pub fn reduced_dim(&self) -> usize {
        self.positions * self.sub_dim
    }

    pub fn input_dim(&self) -> usize {
        self.pca_basis.rows
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let cb: CodebookSet = serde_json::from_reader(BufReader::new(file))?;
        if cb.version != CODEBOOK_VERSION {
            return Err(Error::Checkpoint(format!(
                "codebook version {:?}, expected {CODEBOOK_VERSION:?}",
                cb.version
            )));
        }
        Ok(cb)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PqConfig {
    pub positions: usize,
    pub codebook_size: usize,
    pub iters: usize,
    pub seed: u64,
    pub use_rotation: bool,
    /// Outer assign/Procrustes rounds when `use_rotation` is set.
    pub rotation_rounds: usize,
}

impl Default for PqConfig {
    fn default() -> Self {
        PqConfig {
            positions: 8,
            codebook_size: 64,
            iters: 25,
            seed: 0,
            use_rotation: false,
            rotation_rounds: 8,
        }
    }
}

fn slice_columns(y: &Mat, start: usize, width: usize) -> Mat {
    let mut out = Mat::zeros(y.rows, width);
    for r in 0..y.rows {
        out.row_mut(r)
            .copy_from_slice(&y.row(r)[start..start + width]);
    }
    out
}

fn rotate(y: &Mat, r: &Mat) -> Mat {
    let mut out = Mat::zeros(y.rows, r.cols);
    for i in 0..y.rows {
        project_row(y.row(i), r, out.row_mut(i));
    }
    out
}

fn to_dmatrix(m: &Mat) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows, m.cols, &m.data)
}

fn from_dmatrix(m: &DMatrix<f64>) -> Mat {
    Mat::from_vec(m.nrows(), m.ncols(), m.transpose().as_slice().to_vec())
}

/// Trains per-position codebooks on the reduced vectors `y`.
///
/// `pca_basis`/`pca_mean` are carried into the returned set so that it can
/// encode raw feature vectors.
pub fn train_pq(y: &Mat, cfg: &PqConfig, pca_basis: Mat, pca_mean: Vec<f64>) -> Result<CodebookSet> {
    let d = y.cols;
    if cfg.positions == 0 || d % cfg.positions != 0 {
        return Err(Error::invalid(
            "positions",
            format!("reduced dim {d} is not divisible by K={}", cfg.positions),
        ));
    }
    if cfg.codebook_size == 0 {
        return Err(Error::invalid("codebook_size", "must be >= 1"));
    }
    if y.rows < cfg.codebook_size {
        return Err(Error::invalid(
            "codebook_size",
            format!("{} exceeds number of training vectors {}", cfg.codebook_size, y.rows),
        ));
    }
    let sub_dim = d / cfg.positions;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let fit = |data: &Mat, init: Option<Vec<Mat>>, rng: &mut ChaCha8Rng| -> Result<Vec<Mat>> {
        (0..cfg.positions)
            .map(|k| {
                let slice = slice_columns(data, k * sub_dim, sub_dim);
                let start = init.as_ref().map(|c| c[k].clone());
                Ok(kmeans(&slice, cfg.codebook_size, cfg.iters, start, rng)?.centroids)
            })
            .collect()
    };

    let mut codebooks = fit(y, None, &mut rng)?;
    let mut rotation = None;
    if cfg.use_rotation {
        let mut r = Mat::zeros(d, d);
        (0..d).for_each(|i| r.data[i * d + i] = 1.0);
        let y_d = to_dmatrix(y);
        for _ in 0..cfg.rotation_rounds {
            let rotated = rotate(y, &r);
            codebooks = fit(&rotated, Some(codebooks), &mut rng)?;
            let recon = reconstruct_all(&rotated, &codebooks, sub_dim);
            // Orthogonal Procrustes: argmin_R ||Y R - Z|| = U Vᵀ with Yᵀ Z = U Σ Vᵀ.
            let m = y_d.transpose() * to_dmatrix(&recon);
            let svd = m.svd(true, true);
            let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
            r = from_dmatrix(&(u * vt));
        }
        let rotated = rotate(y, &r);
        codebooks = fit(&rotated, Some(codebooks), &mut rng)?;
        rotation = Some(r);
    }

    Ok(CodebookSet {
        version: CODEBOOK_VERSION.to_string(),
        positions: cfg.positions,
        codebook_size: cfg.codebook_size,
        sub_dim,
        codebooks,
        rotation,
        pca_basis,
        pca_mean,
    })
}

/// PCA to `pca_dim`, then PQ; returns the codebooks and every row's ID.
pub fn fit_tokenizer(x: &Mat, pca_dim: usize, cfg: &PqConfig) -> Result<(CodebookSet, Vec<SemanticId>)> {
    let red = reduce_embeddings(x, pca_dim)?;
    let cb = train_pq(&red.projected, cfg, red.basis, red.mean)?;
    let ids = (0..red.projected.rows)
        .map(|r| encode_reduced(red.projected.row(r), &cb))
        .collect();
    Ok((cb, ids))
}

fn reconstruct_all(data: &Mat, codebooks: &[Mat], sub_dim: usize) -> Mat {
    let mut out = Mat::zeros(data.rows, data.cols);
    for r in 0..data.rows {
        for (k, cb) in codebooks.iter().enumerate() {
            let span = k * sub_dim..(k + 1) * sub_dim;
            let (c, _) = nearest_centroid(&data.row(r)[span.clone()], cb);
            out.row_mut(r)[span].copy_from_slice(cb.row(c));
        }
    }
    out
}

/// Mean squared quantization error of reduced vectors `y` under `cb`
/// (rotation applied when present).
pub fn quantization_error(y: &Mat, cb: &CodebookSet) -> f64 {
    let data = match &cb.rotation {
        Some(r) => rotate(y, r),
        None => y.clone(),
    };
    let recon = reconstruct_all(&data, &cb.codebooks, cb.sub_dim);
    data.data
        .iter()
        .zip(&recon.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / y.rows as f64
}

/// Encodes an already-reduced vector.
pub fn encode_reduced(y: &[f64], cb: &CodebookSet) -> SemanticId {
    let rotated;
    let v = match &cb.rotation {
        Some(r) => {
            let mut out = vec![0.0; r.cols];
            project_row(y, r, &mut out);
            rotated = out;
            &rotated[..]
        }
        None => y,
    };
    SemanticId(
        cb.codebooks
            .iter()
            .enumerate()
            .map(|(k, book)| nearest_centroid(&v[k * cb.sub_dim..(k + 1) * cb.sub_dim], book).0 as u32)
            .collect(),
    )
}

/// Projects a raw feature vector through PCA (and the rotation, if any) and
/// picks the nearest centroid per position.
pub fn encode_item(x: &[f64], cb: &CodebookSet) -> Result<SemanticId> {
    if x.len() != cb.input_dim() {
        return Err(Error::Shape(format!(
            "feature vector has dim {}, codebooks expect {}",
            x.len(),
            cb.input_dim()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("feature vector".into()));
    }
    let centered: Vec<f64> = x.iter().zip(&cb.pca_mean).map(|(a, m)| a - m).collect();
    let mut y = vec![0.0; cb.reduced_dim()];
    project_row(&centered, &cb.pca_basis, &mut y);
    Ok(encode_reduced(&y, cb))
}

/// Token-overlap graph over a catalog.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemGraph {
    /// Per item: (neighbor index, matching-position count), sorted by
    /// weight desc then index asc.
    pub neighbors: Vec<Vec<(u32, u32)>>,
    pub max_edges: usize,
}

impl ItemGraph {
    pub fn n_items(&self) -> usize {
        self.neighbors.len()
    }

    /// Complete graph with unit weights; every item neighbors every other.
    pub fn fully_connected(n: usize) -> Self {
        ItemGraph {
            neighbors: (0..n)
                .map(|i| (0..n).filter(|&j| j != i).map(|j| (j as u32, 1)).collect())
                .collect(),
            max_edges: n.saturating_sub(1),
        }
    }
}

/// Number of positions at which two IDs agree.
pub fn overlap(a: &SemanticId, b: &SemanticId) -> u32 {
    a.0.iter().zip(&b.0).filter(|(x, y)| x == y).count() as u32
}

/// Keeps the `max_edges` strongest neighbors of every item, weight being the
/// number of matching codeword positions. Zero-weight pairs never appear.
pub fn build_token_graph(ids: &[SemanticId], max_edges: usize) -> Result<ItemGraph> {
    if ids.is_empty() {
        return Err(Error::invalid("catalog", "cannot build a graph over an empty catalog"));
    }
    let n = ids.len();
    let k = ids[0].len();
    let mut postings: HashMap<(usize, u32), Vec<u32>> = HashMap::new();
    for (i, id) in ids.iter().enumerate() {
        for (pos, &c) in id.0.iter().enumerate() {
            postings.entry((pos, c)).or_default().push(i as u32);
        }
    }
    let neighbors = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut counts: HashMap<u32, u32> = HashMap::new();
            for (pos, &c) in ids[i].0.iter().enumerate().take(k) {
                for &j in &postings[&(pos, c)] {
                    if j as usize != i {
                        *counts.entry(j).or_default() += 1;
                    }
                }
            }
            let mut list: Vec<(u32, u32)> = counts.into_iter().collect();
            list.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            list.truncate(max_edges);
            list
        })
        .collect();
    Ok(ItemGraph {
        neighbors,
        max_edges,
    })
}

/// Item catalog: ids, semantic IDs and per-position vocabulary sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    pub item_ids: Vec<String>,
    pub codes: Vec<SemanticId>,
    /// Real codewords per position; PAD, when used, is `codebook_sizes[k]`.
    pub codebook_sizes: Vec<usize>,
    pub has_pad: bool,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct CatalogLine {
    item_id: String,
    codewords: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct CatalogMeta {
    codebook_sizes: Vec<usize>,
    has_pad: bool,
}

impl Catalog {
    pub fn new(
        item_ids: Vec<String>,
        codes: Vec<SemanticId>,
        codebook_sizes: Vec<usize>,
        has_pad: bool,
    ) -> Result<Self> {
        if item_ids.len() != codes.len() {
            return Err(Error::Shape(format!(
                "{} item ids vs {} semantic ids",
                item_ids.len(),
                codes.len()
            )));
        }
        let k = codebook_sizes.len();
        for (i, id) in codes.iter().enumerate() {
            if id.len() != k {
                return Err(Error::Shape(format!(
                    "item {} has {} codewords, expected {k}",
                    item_ids[i],
                    id.len()
                )));
            }
            for (pos, &c) in id.0.iter().enumerate() {
                let limit = codebook_sizes[pos] + usize::from(has_pad);
                if c as usize >= limit {
                    return Err(Error::Shape(format!(
                        "item {} codeword {c} at position {pos} out of range {limit}",
                        item_ids[i]
                    )));
                }
            }
        }
        let mut index = HashMap::with_capacity(item_ids.len());
        for (i, id) in item_ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::invalid("catalog", format!("duplicate item id {id}")));
            }
        }
        Ok(Catalog {
            item_ids,
            codes,
            codebook_sizes,
            has_pad,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn positions(&self) -> usize {
        self.codebook_sizes.len()
    }

    pub fn index_of(&self, item_id: &str) -> Option<usize> {
        self.index.get(item_id).copied()
    }

    pub fn save(&self, jsonl: &Path, meta: &Path) -> Result<()> {
        let file = File::create(jsonl).map_err(|e| Error::io(jsonl, e))?;
        let mut w = BufWriter::new(file);
        for (id, code) in self.item_ids.iter().zip(&self.codes) {
            serde_json::to_writer(
                &mut w,
                &CatalogLine {
                    item_id: id.clone(),
                    codewords: code.0.clone(),
                },
            )?;
            w.write_all(b"\n").map_err(|e| Error::io(jsonl, e))?;
        }
        w.flush().map_err(|e| Error::io(jsonl, e))?;
        let m = File::create(meta).map_err(|e| Error::io(meta, e))?;
        serde_json::to_writer_pretty(
            m,
            &CatalogMeta {
                codebook_sizes: self.codebook_sizes.clone(),
                has_pad: self.has_pad,
            },
        )?;
        Ok(())
    }

    pub fn load(jsonl: &Path, meta: &Path) -> Result<Self> {
        let m: CatalogMeta = serde_json::from_reader(BufReader::new(
            File::open(meta).map_err(|e| Error::io(meta, e))?,
        ))?;
        let file = File::open(jsonl).map_err(|e| Error::io(jsonl, e))?;
        let (mut ids, mut codes) = (Vec::new(), Vec::new());
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(jsonl, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: CatalogLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: jsonl.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            ids.push(rec.item_id);
            codes.push(SemanticId(rec.codewords));
        }
        Catalog::new(ids, codes, m.codebook_sizes, m.has_pad)
    }
}

/// Result of [`ingest_external_tokens`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalTokens {
    pub catalog: Catalog,
    /// Number of lines shorter than K that received PAD codewords.
    pub n_padded: usize,
    pub n_truncated: usize,
}

/// Reads `item_id tok tok ...` lines, truncating to the first `positions`
/// tokens and padding shorter lines with the reserved PAD codeword
/// (`vocab[k]`). Vocabulary sizes are inferred as max token + 1.
pub fn ingest_external_tokens(path: &Path, positions: usize) -> Result<ExternalTokens> {
    if positions == 0 {
        return Err(Error::invalid("positions", "must be >= 1"));
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<(String, Vec<u32>)> = Vec::new();
    let (mut n_padded, mut n_truncated) = (0, 0);
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut fields = line.split_whitespace();
        let Some(item) = fields.next() else { continue };
        let mut toks = Vec::new();
        for f in fields {
            let v: i64 = f.parse().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("bad token {f:?}: {e}"),
            })?;
            if v < 0 || v >= u32::MAX as i64 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("token {v} out of range"),
                });
            }
            toks.push(v as u32);
        }
        if toks.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "item has no tokens".into(),
            });
        }
        if toks.len() > positions {
            n_truncated += 1;
            toks.truncate(positions);
        }
        rows.push((item.to_string(), toks));
    }
    let mut vocab = vec![1usize; positions];
    for (_, toks) in &rows {
        for (k, &t) in toks.iter().enumerate() {
            vocab[k] = vocab[k].max(t as usize + 1);
        }
    }
    let mut ids = Vec::with_capacity(rows.len());
    let mut codes = Vec::with_capacity(rows.len());
    for (item, mut toks) in rows {
        if toks.len() < positions {
            n_padded += 1;
            for k in toks.len()..positions {
                toks.push(vocab[k] as u32);
            }
        }
        ids.push(item);
        codes.push(SemanticId(toks));
    }
    let has_pad = n_padded > 0;
    Ok(ExternalTokens {
        catalog: Catalog::new(ids, codes, vocab, has_pad)?,
        n_padded,
        n_truncated,
    })
}

/// Writes a dense matrix as `u32 n, u32 dim` (little-endian) followed by
/// `n·dim` little-endian f32 values.
pub fn write_feature_matrix(m: &Mat, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(&(m.rows as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(m.cols as u32).to_le_bytes()).map_err(io)?;
    for &v in &m.data {
        w.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_feature_matrix(path: &Path) -> Result<Mat> {
    let mut file = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut buf = Vec::new();
    file.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    if buf.len() < 8 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: "feature file shorter than its header".into(),
        });
    }
    let n = u32::from_le_bytes(buf[0..4].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let expected = 8 + n * dim * 4;
    if buf.len() != expected {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: format!("header says {n}x{dim} ({expected} bytes), file has {}", buf.len()),
        });
    }
    let data = buf[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Mat::from_vec(n, dim, data))
}
