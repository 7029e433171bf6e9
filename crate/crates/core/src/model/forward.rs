use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{Head, LayerNorm, Params};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{affine, affine_backward, affine_row, axpy, dot, Mat};
use crate::tokenizer::SemanticId;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// A (possibly masked) item sequence fed to the decoder.
#[derive(Debug, Clone, Copy)]
pub struct ModelInput<'a> {
    pub codes: &'a [SemanticId],
    /// Per item, per position MASK flags. `None` means nothing is masked.
    pub masked: Option<&'a [Vec<bool>]>,
}

impl<'a> ModelInput<'a> {
    pub fn unmasked(codes: &'a [SemanticId]) -> Self {
        ModelInput {
            codes,
            masked: None,
        }
    }

    fn is_masked(&self, t: usize, k: usize) -> bool {
        self.masked.is_some_and(|m| m[t][k])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadSet {
    Predict,
    Reconstruct,
}

fn is_pad(cfg: &ModelConfig, k: usize, code: u32) -> bool {
    cfg.pad && code as usize == cfg.codebook_sizes[k]
}

/// Mean of the per-position embeddings of one item: the MASK embedding where
/// flagged, the codeword embedding otherwise. PAD positions are skipped.
pub fn embed_item(
    params: &Params,
    cfg: &ModelConfig,
    id: &SemanticId,
    masked: Option<&[bool]>,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; cfg.hidden_size];
    let n = accumulate_item(params, cfg, id, masked, &mut out)?;
    if n == 0 {
        return Err(Error::AllPad(0));
    }
    out.iter_mut().for_each(|v| *v /= n as f64);
    Ok(out)
}

fn accumulate_item(
    params: &Params,
    cfg: &ModelConfig,
    id: &SemanticId,
    masked: Option<&[bool]>,
    out: &mut [f64],
) -> Result<usize> {
    let k_total = cfg.positions();
    if id.len() != k_total || masked.is_some_and(|m| m.len() != k_total) {
        return Err(Error::Shape(format!(
            "item has {} codewords, model expects {k_total}",
            id.len()
        )));
    }
    let mut n = 0;
    for (k, &code) in id.0.iter().enumerate() {
        if is_pad(cfg, k, code) {
            continue;
        }
        let limit = cfg.codebook_sizes[k];
        if code as usize >= limit {
            return Err(Error::Shape(format!(
                "codeword {code} at position {k} outside codebook of size {limit}"
            )));
        }
        let row = if masked.is_some_and(|m| m[k]) {
            params.mask_emb.row(k)
        } else {
            params.codeword_emb[k].row(code as usize)
        };
        axpy(1.0, row, out);
        n += 1;
    }
    Ok(n)
}

pub fn head_logits(params: &Params, d: &[f64], k: usize, set: HeadSet) -> Vec<f64> {
    let head: &Head = match set {
        HeadSet::Predict => &params.predict_heads[k],
        HeadSet::Reconstruct => &params.reconstruct_heads[k],
    };
    let mut out = vec![0.0; head.b.len()];
    affine_row(d, &head.w, &head.b, &mut out);
    out
}

#[derive(Debug, Clone)]
struct LnCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    ln1: LnCache,
    a: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    /// heads × T × T, row-major, upper triangle zero.
    probs: Vec<f64>,
    o: Mat,
    attn_drop: Option<Vec<f64>>,
    ln2: LnCache,
    b: Mat,
    f1: Mat,
    g: Mat,
    ffn_drop: Option<Vec<f64>>,
}

/// Activations kept for the backward pass. `states` holds the decoder
/// outputs, one row per sequence position.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub states: Mat,
    counts: Vec<usize>,
    emb_drop: Option<Vec<f64>>,
    layers: Vec<LayerCache>,
    final_ln: LnCache,
}

fn layer_norm(x: &Mat, ln: &LayerNorm) -> (Mat, LnCache) {
    let (t, h) = (x.rows, x.cols);
    let mut y = Mat::zeros(t, h);
    let mut xhat = Mat::zeros(t, h);
    let mut inv_std = vec![0.0; t];
    for r in 0..t {
        let row = x.row(r);
        let mu = row.iter().sum::<f64>() / h as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / h as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = is;
        let xh = xhat.row_mut(r);
        for i in 0..h {
            xh[i] = (row[i] - mu) * is;
        }
        let yr = y.row_mut(r);
        for i in 0..h {
            yr[i] = ln.gamma[i] * xhat.data[r * h + i] + ln.beta[i];
        }
    }
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(dy: &Mat, cache: &LnCache, ln: &LayerNorm, grad: &mut LayerNorm) -> Mat {
    let (t, h) = (dy.rows, dy.cols);
    let mut dx = Mat::zeros(t, h);
    let mut dxhat = vec![0.0; h];
    for r in 0..t {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        for i in 0..h {
            grad.gamma[i] += dyr[i] * xh[i];
            grad.beta[i] += dyr[i];
            dxhat[i] = dyr[i] * ln.gamma[i];
        }
        let mean_d = dxhat.iter().sum::<f64>() / h as f64;
        let mean_dx = dot(&dxhat, xh) / h as f64;
        let is = cache.inv_std[r];
        let dxr = dx.row_mut(r);
        for i in 0..h {
            dxr[i] = is * (dxhat[i] - mean_d - xh[i] * mean_dx);
        }
    }
    dx
}

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn dropout_mask(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect()
}

fn apply_mask(x: &mut Mat, mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        x.data.iter_mut().zip(m).for_each(|(v, s)| *v *= s);
    }
}

/// Runs the decoder. `dropout_seed = Some(seed)` enables dropout (train
/// mode) with masks drawn deterministically from `seed`; `None` is eval mode.
pub fn forward(
    params: &Params,
    cfg: &ModelConfig,
    input: ModelInput<'_>,
    dropout_seed: Option<u64>,
) -> Result<ForwardCache> {
    let t_len = input.codes.len();
    if t_len > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: t_len,
            max: cfg.max_seq_len,
        });
    }
    if let Some(m) = input.masked {
        if m.len() != t_len {
            return Err(Error::Shape(format!(
                "{} mask rows for {t_len} items",
                m.len()
            )));
        }
    }
    let h = cfg.hidden_size;
    let mut rng = dropout_seed
        .filter(|_| cfg.dropout > 0.0)
        .map(ChaCha8Rng::seed_from_u64);

    let mut x = Mat::zeros(t_len, h);
    let mut counts = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let flags = input.masked.map(|m| m[t].as_slice());
        let row = x.row_mut(t);
        let n = accumulate_item(params, cfg, &input.codes[t], flags, row)?;
        if n == 0 {
            return Err(Error::AllPad(t));
        }
        let inv = 1.0 / n as f64;
        row.iter_mut().for_each(|v| *v *= inv);
        axpy(1.0, params.pos_emb.row(t), row);
        counts.push(n);
    }
    let emb_drop = rng
        .as_mut()
        .map(|r| dropout_mask(r, t_len * h, cfg.dropout));
    apply_mask(&mut x, &emb_drop);

    let n_heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut layers = Vec::with_capacity(params.layers.len());
    for lp in &params.layers {
        let (a, ln1) = layer_norm(&x, &lp.ln1);
        let q = affine(&a, &lp.wq, &lp.bq);
        let k = affine(&a, &lp.wk, &lp.bk);
        let v = affine(&a, &lp.wv, &lp.bv);
        let mut probs = vec![0.0; n_heads * t_len * t_len];
        let mut o = Mat::zeros(t_len, h);
        for hd in 0..n_heads {
            let span = hd * dh..(hd + 1) * dh;
            for i in 0..t_len {
                let base = (hd * t_len + i) * t_len;
                let qi = &q.row(i)[span.clone()];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let s = dot(qi, &k.row(j)[span.clone()]) * scale;
                    probs[base + j] = s;
                    max = max.max(s);
                }
                let mut sum = 0.0;
                for j in 0..=i {
                    let e = (probs[base + j] - max).exp();
                    probs[base + j] = e;
                    sum += e;
                }
                let oi = &mut o.row_mut(i)[span.clone()];
                for j in 0..=i {
                    let p = probs[base + j] / sum;
                    probs[base + j] = p;
                    axpy(p, &v.row(j)[span.clone()], oi);
                }
            }
        }
        let mut attn = affine(&o, &lp.wo, &lp.bo);
        let attn_drop = rng
            .as_mut()
            .map(|r| dropout_mask(r, t_len * h, cfg.dropout));
        apply_mask(&mut attn, &attn_drop);
        let mut h1 = x.clone();
        axpy(1.0, &attn.data, &mut h1.data);

        let (b, ln2) = layer_norm(&h1, &lp.ln2);
        let f1 = affine(&b, &lp.w1, &lp.b1);
        let mut g = f1.clone();
        g.data.iter_mut().for_each(|v| *v = gelu(*v));
        let mut f2 = affine(&g, &lp.w2, &lp.b2);
        let ffn_drop = rng
            .as_mut()
            .map(|r| dropout_mask(r, t_len * h, cfg.dropout));
        apply_mask(&mut f2, &ffn_drop);
        let mut h2 = h1.clone();
        axpy(1.0, &f2.data, &mut h2.data);

        x = h2;
        layers.push(LayerCache {
            ln1,
            a,
            q,
            k,
            v,
            probs,
            o,
            attn_drop,
            ln2,
            b,
            f1,
            g,
            ffn_drop,
        });
    }
    let (states, final_ln) = layer_norm(&x, &params.final_ln);
    Ok(ForwardCache {
        states,
        counts,
        emb_drop,
        layers,
        final_ln,
    })
}

impl ForwardCache {
    pub fn len(&self) -> usize {
        self.states.rows
    }

    pub fn is_empty(&self) -> bool {
        self.states.rows == 0
    }

    pub fn state(&self, t: usize) -> &[f64] {
        self.states.row(t)
    }

    /// Back-propagates `d_states` (gradient w.r.t. the decoder outputs)
    /// through the stack and the embeddings, accumulating into `grad`.
    pub fn backward(
        &self,
        params: &Params,
        cfg: &ModelConfig,
        input: ModelInput<'_>,
        d_states: &Mat,
        grad: &mut Params,
    ) {
        let t_len = self.states.rows;
        let h = cfg.hidden_size;
        let n_heads = cfg.n_heads;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let mut dx = layer_norm_backward(d_states, &self.final_ln, &params.final_ln, &mut grad.final_ln);

        for (l, lc) in self.layers.iter().enumerate().rev() {
            let lp = &params.layers[l];
            let lg = &mut grad.layers[l];

            // h2 = h1 + drop(ffn(ln2(h1)))
            let mut df2 = dx.clone();
            apply_mask(&mut df2, &lc.ffn_drop);
            let mut dg = affine_backward(&lc.g, &lp.w2, &df2, &mut lg.w2, &mut lg.b2);
            for (d, &pre) in dg.data.iter_mut().zip(&lc.f1.data) {
                *d *= gelu_grad(pre);
            }
            let db = affine_backward(&lc.b, &lp.w1, &dg, &mut lg.w1, &mut lg.b1);
            let dh1_ln = layer_norm_backward(&db, &lc.ln2, &lp.ln2, &mut lg.ln2);
            let mut dh1 = dx;
            axpy(1.0, &dh1_ln.data, &mut dh1.data);

            // h1 = x + drop(attn(ln1(x)))
            let mut dattn = dh1.clone();
            apply_mask(&mut dattn, &lc.attn_drop);
            let d_o = affine_backward(&lc.o, &lp.wo, &dattn, &mut lg.wo, &mut lg.bo);
            let mut dq = Mat::zeros(t_len, h);
            let mut dk = Mat::zeros(t_len, h);
            let mut dv = Mat::zeros(t_len, h);
            let mut dp = vec![0.0; t_len];
            for hd in 0..n_heads {
                let span = hd * dh..(hd + 1) * dh;
                for i in 0..t_len {
                    let base = (hd * t_len + i) * t_len;
                    let doi = &d_o.row(i)[span.clone()];
                    let mut weighted = 0.0;
                    for j in 0..=i {
                        let p = lc.probs[base + j];
                        dp[j] = dot(doi, &lc.v.row(j)[span.clone()]);
                        weighted += p * dp[j];
                        axpy(p, doi, &mut dv.row_mut(j)[span.clone()]);
                    }
                    for j in 0..=i {
                        let ds = lc.probs[base + j] * (dp[j] - weighted) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        axpy(ds, &lc.k.row(j)[span.clone()], &mut dq.row_mut(i)[span.clone()]);
                        axpy(ds, &lc.q.row(i)[span.clone()], &mut dk.row_mut(j)[span.clone()]);
                    }
                }
            }
            let mut da = affine_backward(&lc.a, &lp.wq, &dq, &mut lg.wq, &mut lg.bq);
            let da_k = affine_backward(&lc.a, &lp.wk, &dk, &mut lg.wk, &mut lg.bk);
            let da_v = affine_backward(&lc.a, &lp.wv, &dv, &mut lg.wv, &mut lg.bv);
            axpy(1.0, &da_k.data, &mut da.data);
            axpy(1.0, &da_v.data, &mut da.data);
            let dx_ln = layer_norm_backward(&da, &lc.ln1, &lp.ln1, &mut lg.ln1);
            dx = dh1;
            axpy(1.0, &dx_ln.data, &mut dx.data);
        }

        apply_mask(&mut dx, &self.emb_drop);
        for t in 0..t_len {
            let row = dx.row(t);
            axpy(1.0, row, grad.pos_emb.row_mut(t));
            let inv = 1.0 / self.counts[t] as f64;
            for (k, &code) in input.codes[t].0.iter().enumerate() {
                if is_pad(cfg, k, code) {
                    continue;
                }
                let dst = if input.is_masked(t, k) {
                    grad.mask_emb.row_mut(k)
                } else {
                    grad.codeword_emb[k].row_mut(code as usize)
                };
                axpy(inv, row, dst);
            }
        }
    }
}
