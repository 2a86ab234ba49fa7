//! Decoder-only autoregressive transformer over the expanded vocabulary.
//!
//! Pre-norm blocks (LayerNorm, multi-head causal attention, SiLU
//! feed-forward), learned absolute positions, and an output head weight-tied
//! to the embedding. LoRA adapters target the query and value projections.
//! Forward and backward are hand-written; both are deterministic for a fixed
//! input regardless of thread count.

pub mod checkpoint;
pub mod loss;
pub mod ops;
pub mod sampling;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::EmbeddingMatrix;
use ops::{
    add_into, ln_backward, ln_forward, mm, mm_abt, mm_abt_acc, mm_acc, mm_atb_acc, silu,
    silu_prime, Mat, Real,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            model_dim: 128,
            heads: 4,
            ffn_dim: 512,
            max_len: 1024,
            vocab_size: 364,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0
            || self.model_dim == 0
            || self.heads == 0
            || self.ffn_dim == 0
            || self.max_len == 0
            || self.vocab_size == 0
        {
            return Err(Error::Config("model config fields must be positive".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_g: Mat<T>,
    pub ln1_b: Mat<T>,
    pub wq: Mat<T>,
    pub wk: Mat<T>,
    pub wv: Mat<T>,
    pub wo: Mat<T>,
    pub ln2_g: Mat<T>,
    pub ln2_b: Mat<T>,
    pub w1: Mat<T>,
    pub w2: Mat<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    /// Token embedding, also the output head (weight-tied).
    pub tok_emb: Mat<T>,
    pub pos_emb: Mat<T>,
    pub layers: Vec<LayerParams<T>>,
    pub lnf_g: Mat<T>,
    pub lnf_b: Mat<T>,
}

pub const INIT_SCALE: f32 = 0.02;

impl<T: Real> Model<T> {
    /// Fresh model with the given (already expanded) embedding matrix and
    /// seeded Gaussian init for everything else.
    pub fn with_embedding(cfg: ModelConfig, emb: &EmbeddingMatrix, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if emb.rows != cfg.vocab_size || emb.dim != cfg.model_dim {
            return Err(Error::Config(format!(
                "embedding shape {}x{} does not match vocab {} x dim {}",
                emb.rows, emb.dim, cfg.vocab_size, cfg.model_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0f64, INIT_SCALE as f64).unwrap();
        let mut gauss = |rows: usize, cols: usize| -> Mat<T> {
            let data = (0..rows * cols)
                .map(|_| T::from_f64(normal.sample(&mut rng)))
                .collect();
            Mat::from_vec(rows, cols, data)
        };
        let d = cfg.model_dim;
        let tok_emb = Mat::from_vec(
            emb.rows,
            emb.dim,
            emb.values.iter().map(|&v| T::from_f32(v)).collect(),
        );
        let pos_emb = gauss(cfg.max_len, d);
        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            layers.push(LayerParams {
                ln1_g: Mat::from_vec(1, d, vec![T::one(); d]),
                ln1_b: Mat::zeros(1, d),
                wq: gauss(d, d),
                wk: gauss(d, d),
                wv: gauss(d, d),
                wo: gauss(d, d),
                ln2_g: Mat::from_vec(1, d, vec![T::one(); d]),
                ln2_b: Mat::zeros(1, d),
                w1: gauss(d, cfg.ffn_dim),
                w2: gauss(cfg.ffn_dim, d),
            });
        }
        Ok(Model {
            cfg: cfg.clone(),
            tok_emb,
            pos_emb,
            layers,
            lnf_g: Mat::from_vec(1, d, vec![T::one(); d]),
            lnf_b: Mat::zeros(1, d),
        })
    }

    pub fn zeros_like(&self) -> Model<T> {
        let z = |m: &Mat<T>| Mat::zeros(m.rows, m.cols);
        Model {
            cfg: self.cfg.clone(),
            tok_emb: z(&self.tok_emb),
            pos_emb: z(&self.pos_emb),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_g: z(&l.ln1_g),
                    ln1_b: z(&l.ln1_b),
                    wq: z(&l.wq),
                    wk: z(&l.wk),
                    wv: z(&l.wv),
                    wo: z(&l.wo),
                    ln2_g: z(&l.ln2_g),
                    ln2_b: z(&l.ln2_b),
                    w1: z(&l.w1),
                    w2: z(&l.w2),
                })
                .collect(),
            lnf_g: z(&self.lnf_g),
            lnf_b: z(&self.lnf_b),
        }
    }

    /// Named parameter tensors in a fixed order.
    pub fn params(&self) -> Vec<(String, &Mat<T>)> {
        let mut v: Vec<(String, &Mat<T>)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            v.push((format!("layers.{i}.ln1_g"), &l.ln1_g));
            v.push((format!("layers.{i}.ln1_b"), &l.ln1_b));
            v.push((format!("layers.{i}.wq"), &l.wq));
            v.push((format!("layers.{i}.wk"), &l.wk));
            v.push((format!("layers.{i}.wv"), &l.wv));
            v.push((format!("layers.{i}.wo"), &l.wo));
            v.push((format!("layers.{i}.ln2_g"), &l.ln2_g));
            v.push((format!("layers.{i}.ln2_b"), &l.ln2_b));
            v.push((format!("layers.{i}.w1"), &l.w1));
            v.push((format!("layers.{i}.w2"), &l.w2));
        }
        v.push(("lnf_g".into(), &self.lnf_g));
        v.push(("lnf_b".into(), &self.lnf_b));
        v
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Mat<T>)> {
        let mut v: Vec<(String, &mut Mat<T>)> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("pos_emb".into(), &mut self.pos_emb),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            v.push((format!("layers.{i}.ln1_g"), &mut l.ln1_g));
            v.push((format!("layers.{i}.ln1_b"), &mut l.ln1_b));
            v.push((format!("layers.{i}.wq"), &mut l.wq));
            v.push((format!("layers.{i}.wk"), &mut l.wk));
            v.push((format!("layers.{i}.wv"), &mut l.wv));
            v.push((format!("layers.{i}.wo"), &mut l.wo));
            v.push((format!("layers.{i}.ln2_g"), &mut l.ln2_g));
            v.push((format!("layers.{i}.ln2_b"), &mut l.ln2_b));
            v.push((format!("layers.{i}.w1"), &mut l.w1));
            v.push((format!("layers.{i}.w2"), &mut l.w2));
        }
        v.push(("lnf_g".into(), &mut self.lnf_g));
        v.push(("lnf_b".into(), &mut self.lnf_b));
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|(_, m)| m.data.len()).sum()
    }

    pub fn accumulate(&mut self, other: &Model<T>) {
        add_into(&mut self.tok_emb, &other.tok_emb);
        add_into(&mut self.pos_emb, &other.pos_emb);
        for (a, b) in self.layers.iter_mut().zip(other.layers.iter()) {
            add_into(&mut a.ln1_g, &b.ln1_g);
            add_into(&mut a.ln1_b, &b.ln1_b);
            add_into(&mut a.wq, &b.wq);
            add_into(&mut a.wk, &b.wk);
            add_into(&mut a.wv, &b.wv);
            add_into(&mut a.wo, &b.wo);
            add_into(&mut a.ln2_g, &b.ln2_g);
            add_into(&mut a.ln2_b, &b.ln2_b);
            add_into(&mut a.w1, &b.w1);
            add_into(&mut a.w2, &b.w2);
        }
        add_into(&mut self.lnf_g, &other.lnf_g);
        add_into(&mut self.lnf_b, &other.lnf_b);
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_g: l.ln1_g.cast(),
                    ln1_b: l.ln1_b.cast(),
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    ln2_g: l.ln2_g.cast(),
                    ln2_b: l.ln2_b.cast(),
                    w1: l.w1.cast(),
                    w2: l.w2.cast(),
                })
                .collect(),
            lnf_g: self.lnf_g.cast(),
            lnf_b: self.lnf_b.cast(),
        }
    }
}

// ---------------------------------------------------------------------------
// LoRA
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f32,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 8,
            alpha: 16.0,
        }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f32 {
        self.alpha / self.rank as f32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer<T> {
    pub q_a: Mat<T>, // rank x d
    pub q_b: Mat<T>, // d x rank
    pub v_a: Mat<T>,
    pub v_b: Mat<T>,
}

/// Low-rank adapters on the query and value projections:
/// W is replaced by W + (alpha/rank) * B * A. B starts at zero, so fresh
/// adapters leave every logit unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapters<T> {
    pub cfg: LoraConfig,
    pub model_dim: usize,
    pub layers: Vec<LoraLayer<T>>,
}

impl<T: Real> LoraAdapters<T> {
    pub fn new_seeded(model_cfg: &ModelConfig, cfg: LoraConfig, seed: u64) -> Result<Self> {
        if cfg.rank < 1 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0f64, INIT_SCALE as f64).unwrap();
        let d = model_cfg.model_dim;
        let r = cfg.rank;
        let mut gauss = |rows: usize, cols: usize| -> Mat<T> {
            let data = (0..rows * cols)
                .map(|_| T::from_f64(normal.sample(&mut rng)))
                .collect();
            Mat::from_vec(rows, cols, data)
        };
        let layers = (0..model_cfg.layers)
            .map(|_| LoraLayer {
                q_a: gauss(r, d),
                q_b: Mat::zeros(d, r),
                v_a: gauss(r, d),
                v_b: Mat::zeros(d, r),
            })
            .collect();
        Ok(LoraAdapters {
            cfg,
            model_dim: d,
            layers,
        })
    }

    pub fn zeros_like(&self) -> LoraAdapters<T> {
        let z = |m: &Mat<T>| Mat::zeros(m.rows, m.cols);
        LoraAdapters {
            cfg: self.cfg,
            model_dim: self.model_dim,
            layers: self
                .layers
                .iter()
                .map(|l| LoraLayer {
                    q_a: z(&l.q_a),
                    q_b: z(&l.q_b),
                    v_a: z(&l.v_a),
                    v_b: z(&l.v_b),
                })
                .collect(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Mat<T>)> {
        let mut v = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            v.push((format!("layers.{i}.q_a"), &mut l.q_a));
            v.push((format!("layers.{i}.q_b"), &mut l.q_b));
            v.push((format!("layers.{i}.v_a"), &mut l.v_a));
            v.push((format!("layers.{i}.v_b"), &mut l.v_b));
        }
        v
    }

    pub fn params(&self) -> Vec<(String, &Mat<T>)> {
        let mut v = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            v.push((format!("layers.{i}.q_a"), &l.q_a));
            v.push((format!("layers.{i}.q_b"), &l.q_b));
            v.push((format!("layers.{i}.v_a"), &l.v_a));
            v.push((format!("layers.{i}.v_b"), &l.v_b));
        }
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|(_, m)| m.data.len()).sum()
    }

    pub fn accumulate(&mut self, other: &LoraAdapters<T>) {
        for (a, b) in self.layers.iter_mut().zip(other.layers.iter()) {
            add_into(&mut a.q_a, &b.q_a);
            add_into(&mut a.q_b, &b.q_b);
            add_into(&mut a.v_a, &b.v_a);
            add_into(&mut a.v_b, &b.v_b);
        }
    }
}

/// Which parameters a training stage updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSelection {
    /// Stages 1 and 2: every model parameter.
    FullModel,
    /// Stage 3: only adapter A/B matrices; the base model is frozen.
    LoraOnly,
}

pub fn trainable_parameters(stage: u8) -> Result<ParamSelection> {
    match stage {
        1 | 2 => Ok(ParamSelection::FullModel),
        3 => Ok(ParamSelection::LoraOnly),
        other => Err(Error::BadStage(other)),
    }
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

struct LayerCache<T> {
    xhat1: Mat<T>,
    rstd1: Vec<T>,
    h1: Mat<T>,
    q: Mat<T>,
    k: Mat<T>,
    v: Mat<T>,
    u_q: Option<Mat<T>>,
    u_v: Option<Mat<T>>,
    probs: Mat<T>, // heads stacked: (heads*len) x len
    att: Mat<T>,
    xhat2: Mat<T>,
    rstd2: Vec<T>,
    h2: Mat<T>,
    f1: Mat<T>,
    act: Mat<T>,
}

pub struct ForwardCache<T> {
    layers: Vec<LayerCache<T>>,
    xhatf: Mat<T>,
    rstdf: Vec<T>,
    hf: Mat<T>,
}

impl<T: Real> Model<T> {
    fn validate_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if ids.len() > self.cfg.max_len {
            return Err(Error::OverlongInput {
                len: ids.len(),
                max_len: self.cfg.max_len,
            });
        }
        for &id in ids {
            if id as usize >= self.cfg.vocab_size {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab: self.cfg.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Logits (len x vocab_size) for a token sequence.
    pub fn forward(&self, ids: &[u32], adapters: Option<&LoraAdapters<T>>) -> Result<Mat<T>> {
        Ok(self.forward_with_cache(ids, adapters)?.0)
    }

    pub fn forward_with_cache(
        &self,
        ids: &[u32],
        adapters: Option<&LoraAdapters<T>>,
    ) -> Result<(Mat<T>, ForwardCache<T>)> {
        self.validate_ids(ids)?;
        let len = ids.len();
        let d = self.cfg.model_dim;
        let heads = self.cfg.heads;
        let hd = self.cfg.head_dim();
        let scale = T::from_f64(1.0 / (hd as f64).sqrt());

        let mut x = Mat::zeros(len, d);
        for (i, &id) in ids.iter().enumerate() {
            let e = self.tok_emb.row(id as usize);
            let p = self.pos_emb.row(i);
            let row = x.row_mut(i);
            for j in 0..d {
                row[j] = e[j] + p[j];
            }
        }

        let mut caches = Vec::with_capacity(self.cfg.layers);
        for (li, layer) in self.layers.iter().enumerate() {
            let (h1, xhat1, rstd1) = ln_forward(&x, &layer.ln1_g.data, &layer.ln1_b.data);

            let mut q = mm(&h1, &layer.wq);
            let k = mm(&h1, &layer.wk);
            let mut v = mm(&h1, &layer.wv);
            let mut u_q = None;
            let mut u_v = None;
            if let Some(ad) = adapters {
                let s = T::from_f32(ad.cfg.scaling());
                let la = &ad.layers[li];
                let uq = mm_abt(&h1, &la.q_a); // len x r
                mm_abt_acc(&mut q, &uq, &la.q_b, s);
                let uv = mm_abt(&h1, &la.v_a);
                mm_abt_acc(&mut v, &uv, &la.v_b, s);
                u_q = Some(uq);
                u_v = Some(uv);
            }

            // causal attention per head; probs rows above the diagonal stay 0
            let mut probs = Mat::zeros(heads * len, len);
            let mut att = Mat::zeros(len, d);
            for h in 0..heads {
                let off = h * hd;
                for i in 0..len {
                    let qi = &q.row(i)[off..off + hd];
                    let prow = probs.row_mut(h * len + i);
                    let mut maxv = T::neg_infinity();
                    for j in 0..=i {
                        let kj = &k.row(j)[off..off + hd];
                        let mut s = T::zero();
                        for t in 0..hd {
                            s = s + qi[t] * kj[t];
                        }
                        let s = s * scale;
                        prow[j] = s;
                        if s > maxv {
                            maxv = s;
                        }
                    }
                    let mut denom = T::zero();
                    for j in 0..=i {
                        let e = (prow[j] - maxv).exp();
                        prow[j] = e;
                        denom = denom + e;
                    }
                    let inv = denom.recip();
                    for j in 0..=i {
                        prow[j] = prow[j] * inv;
                    }
                    let arow = att.row_mut(i);
                    for j in 0..=i {
                        let p = probs.row(h * len + i)[j];
                        if p == T::zero() {
                            continue;
                        }
                        let vj = &v.row(j)[off..off + hd];
                        for t in 0..hd {
                            arow[off + t] = arow[off + t] + p * vj[t];
                        }
                    }
                }
            }

            mm_acc(&mut x, &att, &layer.wo, T::one()); // residual add

            let (h2, xhat2, rstd2) = ln_forward(&x, &layer.ln2_g.data, &layer.ln2_b.data);
            let f1 = mm(&h2, &layer.w1);
            let mut act = Mat::zeros(len, self.cfg.ffn_dim);
            for (a, &f) in act.data.iter_mut().zip(f1.data.iter()) {
                *a = silu(f);
            }
            mm_acc(&mut x, &act, &layer.w2, T::one()); // residual add

            caches.push(LayerCache {
                xhat1,
                rstd1,
                h1,
                q,
                k,
                v,
                u_q,
                u_v,
                probs,
                att,
                xhat2,
                rstd2,
                h2,
                f1,
                act,
            });
        }

        let (hf, xhatf, rstdf) = ln_forward(&x, &self.lnf_g.data, &self.lnf_b.data);
        let logits = mm_abt(&hf, &self.tok_emb);
        Ok((
            logits,
            ForwardCache {
                layers: caches,
                xhatf,
                rstdf,
                hf,
            },
        ))
    }

    /// Accumulates parameter gradients for d(loss)/d(logits). When adapter
    /// gradients are requested the adapter forward path must have been active.
    pub fn backward(
        &self,
        ids: &[u32],
        adapters: Option<&LoraAdapters<T>>,
        cache: &ForwardCache<T>,
        dlogits: &Mat<T>,
        grads: &mut Model<T>,
        mut lora_grads: Option<&mut LoraAdapters<T>>,
    ) {
        let len = ids.len();
        let d = self.cfg.model_dim;
        let heads = self.cfg.heads;
        let hd = self.cfg.head_dim();
        let scale = T::from_f64(1.0 / (hd as f64).sqrt());

        // head: logits = hf * tok_emb^T
        let dhf = mm(dlogits, &self.tok_emb);
        mm_atb_acc(&mut grads.tok_emb, dlogits, &cache.hf, T::one());

        let mut dx = ln_backward(
            &dhf,
            &cache.xhatf,
            &cache.rstdf,
            &self.lnf_g.data,
            &mut grads.lnf_g.data,
            &mut grads.lnf_b.data,
        );

        for li in (0..self.cfg.layers).rev() {
            let layer = &self.layers[li];
            let lc = &cache.layers[li];
            let g = &mut grads.layers[li];

            // FFN: x = x_mid + act * w2
            let do2 = &dx; // gradient on the ffn output (residual keeps dx)
            mm_atb_acc(&mut g.w2, &lc.act, do2, T::one());
            let da = mm_abt(do2, &layer.w2);
            let mut df1 = da;
            for (v, &f) in df1.data.iter_mut().zip(lc.f1.data.iter()) {
                *v = *v * silu_prime(f);
            }
            mm_atb_acc(&mut g.w1, &lc.h2, &df1, T::one());
            let dh2 = mm_abt(&df1, &layer.w1);
            let dx_ln2 = ln_backward(
                &dh2,
                &lc.xhat2,
                &lc.rstd2,
                &layer.ln2_g.data,
                &mut g.ln2_g.data,
                &mut g.ln2_b.data,
            );
            add_into(&mut dx, &dx_ln2); // dx now holds d(x_mid)

            // attention: x_mid = x_in + att * wo
            mm_atb_acc(&mut g.wo, &lc.att, &dx, T::one());
            let datt = mm_abt(&dx, &layer.wo);

            let mut dq = Mat::zeros(len, d);
            let mut dk = Mat::zeros(len, d);
            let mut dv = Mat::zeros(len, d);
            for h in 0..heads {
                let off = h * hd;
                for i in 0..len {
                    let prow = lc.probs.row(h * len + i);
                    let datt_i = &datt.row(i)[off..off + hd];
                    // dprobs and softmax backward fused per row
                    let mut dprobs = vec![T::zero(); i + 1];
                    let mut dot = T::zero();
                    for j in 0..=i {
                        let vj = &lc.v.row(j)[off..off + hd];
                        let mut acc = T::zero();
                        for t in 0..hd {
                            acc = acc + datt_i[t] * vj[t];
                        }
                        dprobs[j] = acc;
                        dot = dot + acc * prow[j];
                    }
                    for j in 0..=i {
                        let p = prow[j];
                        if p == T::zero() {
                            continue;
                        }
                        let ds = p * (dprobs[j] - dot) * scale;
                        // dv through att = probs * v
                        {
                            let dvj = &mut dv.row_mut(j)[off..off + hd];
                            for t in 0..hd {
                                dvj[t] = dvj[t] + p * datt_i[t];
                            }
                        }
                        if ds == T::zero() {
                            continue;
                        }
                        let kj = &lc.k.row(j)[off..off + hd];
                        let qi = &lc.q.row(i)[off..off + hd];
                        let dqi = &mut dq.row_mut(i)[off..off + hd];
                        for t in 0..hd {
                            dqi[t] = dqi[t] + ds * kj[t];
                        }
                        let dkj = &mut dk.row_mut(j)[off..off + hd];
                        for t in 0..hd {
                            dkj[t] = dkj[t] + ds * qi[t];
                        }
                    }
                }
            }

            mm_atb_acc(&mut g.wq, &lc.h1, &dq, T::one());
            mm_atb_acc(&mut g.wk, &lc.h1, &dk, T::one());
            mm_atb_acc(&mut g.wv, &lc.h1, &dv, T::one());
            let mut dh1 = mm_abt(&dq, &layer.wq);
            mm_abt_acc(&mut dh1, &dk, &layer.wk, T::one());
            mm_abt_acc(&mut dh1, &dv, &layer.wv, T::one());

            if let Some(ad) = adapters {
                let s = T::from_f32(ad.cfg.scaling());
                let la = &ad.layers[li];
                let uq = lc.u_q.as_ref().expect("adapter cache");
                let uv = lc.u_v.as_ref().expect("adapter cache");
                // q path: q += s * u_q * B^T with u_q = h1 * A^T
                let duq = {
                    let mut m = mm(&dq, &la.q_b);
                    for v in m.data.iter_mut() {
                        *v = *v * s;
                    }
                    m
                };
                let duv = {
                    let mut m = mm(&dv, &la.v_b);
                    for v in m.data.iter_mut() {
                        *v = *v * s;
                    }
                    m
                };
                if let Some(lg) = lora_grads.as_deref_mut() {
                    let lgl = &mut lg.layers[li];
                    mm_atb_acc(&mut lgl.q_b, &dq, uq, s);
                    mm_atb_acc(&mut lgl.q_a, &duq, &lc.h1, T::one());
                    mm_atb_acc(&mut lgl.v_b, &dv, uv, s);
                    mm_atb_acc(&mut lgl.v_a, &duv, &lc.h1, T::one());
                }
                mm_acc(&mut dh1, &duq, &la.q_a, T::one());
                mm_acc(&mut dh1, &duv, &la.v_a, T::one());
            }

            let dx_ln1 = ln_backward(
                &dh1,
                &lc.xhat1,
                &lc.rstd1,
                &layer.ln1_g.data,
                &mut g.ln1_g.data,
                &mut g.ln1_b.data,
            );
            add_into(&mut dx, &dx_ln1); // dx now holds d(x_in)
        }

        for (i, &id) in ids.iter().enumerate() {
            let src = dx.row(i);
            let te = grads.tok_emb.row_mut(id as usize);
            for j in 0..d {
                te[j] = te[j] + src[j];
            }
            let pe = grads.pos_emb.row_mut(i);
            for j in 0..d {
                pe[j] = pe[j] + src[j];
            }
        }
    }
}

#[cfg(test)]
mod tests;
