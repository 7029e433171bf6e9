use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::tensor::Mat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNorm {
    fn new(h: usize) -> Self {
        LayerNorm {
            gamma: vec![1.0; h],
            beta: vec![0.0; h],
        }
    }

    fn zeros(h: usize) -> Self {
        LayerNorm {
            gamma: vec![0.0; h],
            beta: vec![0.0; h],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub ln1: LayerNorm,
    pub wq: Mat,
    pub bq: Vec<f64>,
    pub wk: Mat,
    pub bk: Vec<f64>,
    pub wv: Mat,
    pub bv: Vec<f64>,
    pub wo: Mat,
    pub bo: Vec<f64>,
    pub ln2: LayerNorm,
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
}

/// Affine map from a decoder state to logits over one codebook.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    /// hidden × vocab
    pub w: Mat,
    pub b: Vec<f64>,
}

/// All trainable parameters. The same struct doubles as a gradient buffer
/// and as optimizer moment storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    /// Per position: (codebook size [+1 PAD row]) × hidden.
    pub codeword_emb: Vec<Mat>,
    /// One MASK embedding per position: K × hidden.
    pub mask_emb: Mat,
    pub pos_emb: Mat,
    pub layers: Vec<Layer>,
    pub final_ln: LayerNorm,
    pub predict_heads: Vec<Head>,
    pub reconstruct_heads: Vec<Head>,
}

/// Borrowed view of one named parameter tensor.
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: String,
    pub data: &'a mut [f64],
}

impl Params {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = cfg.hidden_size;
        let std = cfg.init_std;
        let mut randn = |r: usize, c: usize| Mat::randn(r, c, std, &mut rng);
        let codeword_emb = cfg
            .codebook_sizes
            .iter()
            .map(|&w| randn(w + usize::from(cfg.pad), h))
            .collect();
        let mask_emb = randn(cfg.positions(), h);
        let pos_emb = randn(cfg.max_seq_len, h);
        let layers = (0..cfg.n_layers)
            .map(|_| Layer {
                ln1: LayerNorm::new(h),
                wq: randn(h, h),
                bq: vec![0.0; h],
                wk: randn(h, h),
                bk: vec![0.0; h],
                wv: randn(h, h),
                bv: vec![0.0; h],
                wo: randn(h, h),
                bo: vec![0.0; h],
                ln2: LayerNorm::new(h),
                w1: randn(h, cfg.ffn_dim),
                b1: vec![0.0; cfg.ffn_dim],
                w2: randn(cfg.ffn_dim, h),
                b2: vec![0.0; h],
            })
            .collect();
        let mut heads = || {
            cfg.codebook_sizes
                .iter()
                .map(|&w| Head {
                    w: randn(h, w),
                    b: vec![0.0; w],
                })
                .collect::<Vec<_>>()
        };
        let predict_heads = heads();
        let reconstruct_heads = heads();
        Params {
            codeword_emb,
            mask_emb,
            pos_emb,
            layers,
            final_ln: LayerNorm::new(h),
            predict_heads,
            reconstruct_heads,
        }
    }

    /// Same shapes as `cfg` describes, every entry zero.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let h = cfg.hidden_size;
        let z = Mat::zeros;
        Params {
            codeword_emb: cfg
                .codebook_sizes
                .iter()
                .map(|&w| z(w + usize::from(cfg.pad), h))
                .collect(),
            mask_emb: z(cfg.positions(), h),
            pos_emb: z(cfg.max_seq_len, h),
            layers: (0..cfg.n_layers)
                .map(|_| Layer {
                    ln1: LayerNorm::zeros(h),
                    wq: z(h, h),
                    bq: vec![0.0; h],
                    wk: z(h, h),
                    bk: vec![0.0; h],
                    wv: z(h, h),
                    bv: vec![0.0; h],
                    wo: z(h, h),
                    bo: vec![0.0; h],
                    ln2: LayerNorm::zeros(h),
                    w1: z(h, cfg.ffn_dim),
                    b1: vec![0.0; cfg.ffn_dim],
                    w2: z(cfg.ffn_dim, h),
                    b2: vec![0.0; h],
                })
                .collect(),
            final_ln: LayerNorm::zeros(h),
            predict_heads: cfg
                .codebook_sizes
                .iter()
                .map(|&w| Head {
                    w: z(h, w),
                    b: vec![0.0; w],
                })
                .collect(),
            reconstruct_heads: cfg
                .codebook_sizes
                .iter()
                .map(|&w| Head {
                    w: z(h, w),
                    b: vec![0.0; w],
                })
                .collect(),
        }
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        fn mat<'a>(out: &mut Vec<TensorRef<'a>>, name: String, m: &'a Mat) {
            out.push(TensorRef {
                name,
                shape: vec![m.rows, m.cols],
                data: &m.data,
            });
        }
        fn vec1<'a>(out: &mut Vec<TensorRef<'a>>, name: String, v: &'a [f64]) {
            out.push(TensorRef {
                name,
                shape: vec![v.len()],
                data: v,
            });
        }
        let mut out = Vec::new();
        for (k, m) in self.codeword_emb.iter().enumerate() {
            mat(&mut out, format!("codeword_emb.{k}"), m);
        }
        mat(&mut out, "mask_emb".into(), &self.mask_emb);
        mat(&mut out, "pos_emb".into(), &self.pos_emb);
        for (l, layer) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("layers.{l}.{s}");
            vec1(&mut out, p("ln1.gamma"), &layer.ln1.gamma);
            vec1(&mut out, p("ln1.beta"), &layer.ln1.beta);
            mat(&mut out, p("wq"), &layer.wq);
            vec1(&mut out, p("bq"), &layer.bq);
            mat(&mut out, p("wk"), &layer.wk);
            vec1(&mut out, p("bk"), &layer.bk);
            mat(&mut out, p("wv"), &layer.wv);
            vec1(&mut out, p("bv"), &layer.bv);
            mat(&mut out, p("wo"), &layer.wo);
            vec1(&mut out, p("bo"), &layer.bo);
            vec1(&mut out, p("ln2.gamma"), &layer.ln2.gamma);
            vec1(&mut out, p("ln2.beta"), &layer.ln2.beta);
            mat(&mut out, p("w1"), &layer.w1);
            vec1(&mut out, p("b1"), &layer.b1);
            mat(&mut out, p("w2"), &layer.w2);
            vec1(&mut out, p("b2"), &layer.b2);
        }
        vec1(&mut out, "final_ln.gamma".into(), &self.final_ln.gamma);
        vec1(&mut out, "final_ln.beta".into(), &self.final_ln.beta);
        for (k, h) in self.predict_heads.iter().enumerate() {
            mat(&mut out, format!("predict_heads.{k}.w"), &h.w);
            vec1(&mut out, format!("predict_heads.{k}.b"), &h.b);
        }
        for (k, h) in self.reconstruct_heads.iter().enumerate() {
            mat(&mut out, format!("reconstruct_heads.{k}.w"), &h.w);
            vec1(&mut out, format!("reconstruct_heads.{k}.b"), &h.b);
        }
        out
    }

    /// Mutable counterpart of [`Params::tensors`], same order and names.
    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        for (k, m) in self.codeword_emb.iter_mut().enumerate() {
            out.push(TensorMut {
                name: format!("codeword_emb.{k}"),
                data: &mut m.data,
            });
        }
        out.push(TensorMut {
            name: "mask_emb".into(),
            data: &mut self.mask_emb.data,
        });
        out.push(TensorMut {
            name: "pos_emb".into(),
            data: &mut self.pos_emb.data,
        });
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let Layer {
                ln1,
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ln2,
                w1,
                b1,
                w2,
                b2,
            } = layer;
            let items: Vec<(&str, &mut [f64])> = vec![
                ("ln1.gamma", &mut ln1.gamma),
                ("ln1.beta", &mut ln1.beta),
                ("wq", &mut wq.data),
                ("bq", bq),
                ("wk", &mut wk.data),
                ("bk", bk),
                ("wv", &mut wv.data),
                ("bv", bv),
                ("wo", &mut wo.data),
                ("bo", bo),
                ("ln2.gamma", &mut ln2.gamma),
                ("ln2.beta", &mut ln2.beta),
                ("w1", &mut w1.data),
                ("b1", b1),
                ("w2", &mut w2.data),
                ("b2", b2),
            ];
            for (n, d) in items {
                out.push(TensorMut {
                    name: format!("layers.{l}.{n}"),
                    data: d,
                });
            }
        }
        out.push(TensorMut {
            name: "final_ln.gamma".into(),
            data: &mut self.final_ln.gamma,
        });
        out.push(TensorMut {
            name: "final_ln.beta".into(),
            data: &mut self.final_ln.beta,
        });
        for (set, heads) in [
            ("predict_heads", &mut self.predict_heads),
            ("reconstruct_heads", &mut self.reconstruct_heads),
        ] {
            for (k, h) in heads.iter_mut().enumerate() {
                out.push(TensorMut {
                    name: format!("{set}.{k}.w"),
                    data: &mut h.w.data,
                });
                out.push(TensorMut {
                    name: format!("{set}.{k}.b"),
                    data: &mut h.b,
                });
            }
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// `self += alpha * other`, element-wise over matching tensors.
    pub fn add_scaled(&mut self, alpha: f64, other: &Params) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d += alpha * s;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= alpha);
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|v| v * v)
            .sum()
    }

    /// Name of the first tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|t| t.data.iter().any(|v| !v.is_finite()))
            .map(|t| t.name)
    }

    /// Order-sensitive checksum over the exact bit patterns of every value.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.tensors() {
            for v in t.data {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}
