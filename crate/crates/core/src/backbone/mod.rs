//! Causal pre-layer-norm transformer stack with optional LoRA adapters on
//! the query and key projections.
//!
//! Every routine here works on one sequence (`T x D`). Channels and batch
//! entries are independent samples, so callers loop over them and accumulate
//! into one [`Grads`] buffer.

mod checkpoint;
mod freeze;
mod lora;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Grads, ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;

pub use checkpoint::{
    inspect_checkpoint, load_checkpoint, read_manifest, save_checkpoint, Manifest, TensorEntry, FORMAT_VERSION,
};
pub use freeze::FreezePolicy;
pub(crate) use lora::attach as lora_attach;
pub use lora::LoraConfig;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub dropout: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl BackboneConfig {
    /// Two blocks of width 16; small enough for finite-difference checks.
    pub fn toy() -> Self {
        Self {
            layers: 2,
            d_model: 16,
            heads: 2,
            ffn_dim: 64,
            max_positions: 256,
            dropout: 0.0,
        }
    }

    /// First six blocks of a GPT-2 base sized stack.
    pub fn gpt2_first6() -> Self {
        Self {
            layers: 6,
            d_model: 768,
            heads: 12,
            ffn_dim: 3072,
            max_positions: 1024,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.ffn_dim == 0 || self.max_positions == 0 {
            return Err(Error::Config("ffn_dim and max_positions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LnIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoraIds {
    /// `r x D`
    pub a: ParamId,
    /// `D x r`
    pub b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockIds {
    pub ln1: LnIds,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub ln2: LnIds,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub lora_q: Option<LoraIds>,
    pub lora_k: Option<LoraIds>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneIds {
    pub blocks: Vec<BlockIds>,
    pub ln_f: LnIds,
    /// `alpha / r` when adapters are attached.
    pub lora_scaling: Option<f64>,
}

pub(crate) fn block_prefix(i: usize) -> String {
    format!("blocks.{i}")
}

fn push_ln<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Result<LnIds> {
    Ok(LnIds {
        gamma: store.push(format!("{prefix}.gamma"), ParamGroup::LayerNorm, Array1::<T>::ones(d))?,
        beta: store.push(format!("{prefix}.beta"), ParamGroup::LayerNorm, Array1::<T>::zeros(d))?,
    })
}

fn resolve_ln<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Result<LnIds> {
    Ok(LnIds {
        gamma: store.require(&format!("{prefix}.gamma"))?,
        beta: store.require(&format!("{prefix}.beta"))?,
    })
}

fn gaussian<T: Scalar, R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<T> {
    let normal = Normal::new(0.0, 1.0 / (cols as f64).sqrt()).expect("valid std");
    Array2::from_shape_simple_fn((rows, cols), || T::of(normal.sample(rng)))
}

impl BackboneIds {
    /// Random stand-in for pre-trained weights: `N(0, 1/fan_in)` projections,
    /// zero biases, unit layer-norm gains.
    pub fn init<T: Scalar, R: Rng>(store: &mut ParamStore<T>, config: &BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, f) = (config.d_model, config.ffn_dim);
        let mut blocks = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let p = block_prefix(i);
            let ln1 = push_ln(store, &format!("{p}.ln1"), d)?;
            let w_q = store.push(
                format!("{p}.attn.w_q"),
                ParamGroup::Attention,
                gaussian::<T, _>(d, d, rng),
            )?;
            let w_k = store.push(
                format!("{p}.attn.w_k"),
                ParamGroup::Attention,
                gaussian::<T, _>(d, d, rng),
            )?;
            let w_v = store.push(
                format!("{p}.attn.w_v"),
                ParamGroup::Attention,
                gaussian::<T, _>(d, d, rng),
            )?;
            let w_o = store.push(
                format!("{p}.attn.w_o"),
                ParamGroup::Attention,
                gaussian::<T, _>(d, d, rng),
            )?;
            let ln2 = push_ln(store, &format!("{p}.ln2"), d)?;
            let w1 = store.push(
                format!("{p}.ffn.w1"),
                ParamGroup::FeedForward,
                gaussian::<T, _>(f, d, rng),
            )?;
            let b1 = store.push(format!("{p}.ffn.b1"), ParamGroup::FeedForward, Array1::<T>::zeros(f))?;
            let w2 = store.push(
                format!("{p}.ffn.w2"),
                ParamGroup::FeedForward,
                gaussian::<T, _>(d, f, rng),
            )?;
            let b2 = store.push(format!("{p}.ffn.b2"), ParamGroup::FeedForward, Array1::<T>::zeros(d))?;
            blocks.push(BlockIds {
                ln1,
                w_q,
                w_k,
                w_v,
                w_o,
                ln2,
                w1,
                b1,
                w2,
                b2,
                lora_q: None,
                lora_k: None,
            });
        }
        let ln_f = push_ln(store, "ln_f", d)?;
        Ok(Self {
            blocks,
            ln_f,
            lora_scaling: None,
        })
    }

    pub fn resolve<T: Scalar>(store: &ParamStore<T>, layers: usize, lora: Option<&LoraConfig>) -> Result<Self> {
        let mut blocks = Vec::with_capacity(layers);
        for i in 0..layers {
            let p = block_prefix(i);
            let adapter = |target: &str| -> Result<Option<LoraIds>> {
                lora.map(|_| {
                    Ok(LoraIds {
                        a: store.require(&format!("{p}.lora_{target}.a"))?,
                        b: store.require(&format!("{p}.lora_{target}.b"))?,
                    })
                })
                .transpose()
            };
            blocks.push(BlockIds {
                ln1: resolve_ln(store, &format!("{p}.ln1"))?,
                w_q: store.require(&format!("{p}.attn.w_q"))?,
                w_k: store.require(&format!("{p}.attn.w_k"))?,
                w_v: store.require(&format!("{p}.attn.w_v"))?,
                w_o: store.require(&format!("{p}.attn.w_o"))?,
                ln2: resolve_ln(store, &format!("{p}.ln2"))?,
                w1: store.require(&format!("{p}.ffn.w1"))?,
                b1: store.require(&format!("{p}.ffn.b1"))?,
                w2: store.require(&format!("{p}.ffn.w2"))?,
                b2: store.require(&format!("{p}.ffn.b2"))?,
                lora_q: adapter("q")?,
                lora_k: adapter("k")?,
            });
        }
        Ok(Self {
            blocks,
            ln_f: resolve_ln(store, "ln_f")?,
            lora_scaling: lora.map(LoraConfig::scaling),
        })
    }
}

#[derive(Debug, Clone)]
struct LnCache<T> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
}

fn layer_norm<T: Scalar>(
    x: ArrayView2<'_, T>,
    gamma: ArrayView1<'_, T>,
    beta: ArrayView1<'_, T>,
) -> (Array2<T>, LnCache<T>) {
    let d = T::of(x.ncols() as f64);
    let mean = x.sum_axis(Axis(1)) / d;
    let centered = &x - &mean.view().insert_axis(Axis(1));
    let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
    let inv_std = var.mapv(|v| T::one() / (v + T::of(LN_EPS)).sqrt());
    let xhat = centered * inv_std.view().insert_axis(Axis(1));
    let y = &xhat * &gamma + beta;
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward<T: Scalar>(
    cache: &LnCache<T>,
    ids: LnIds,
    gamma: ArrayView1<'_, T>,
    dy: ArrayView2<'_, T>,
    grads: &mut Grads<T>,
) -> Array2<T> {
    if grads.wants(ids.gamma) {
        grads.add(ids.gamma, (&dy * &cache.xhat).sum_axis(Axis(0)).view());
    }
    grads.add(ids.beta, dy.sum_axis(Axis(0)).view());
    let d = T::of(dy.ncols() as f64);
    let dxhat = &dy * &gamma;
    let mean_dxhat = dxhat.sum_axis(Axis(1)) / d;
    let mean_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(1)) / d;
    let mut dx = dxhat - &mean_dxhat.insert_axis(Axis(1));
    dx -= &(&cache.xhat * &mean_dxhat_xhat.insert_axis(Axis(1)));
    dx * cache.inv_std.view().insert_axis(Axis(1))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// Tanh approximation of GELU, as in GPT-2.
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (T::of(GELU_C) * (x + T::of(GELU_K) * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let t = (T::of(GELU_C) * (x + T::of(GELU_K) * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_K) * x * x)
}

/// Row-wise softmax over the causal prefix; entries above the diagonal are 0.
fn causal_softmax<T: Scalar>(scores: &mut Array2<T>) {
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        let max = row.iter().take(i + 1).fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for (j, v) in row.iter_mut().enumerate() {
            if j <= i {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = T::zero();
            }
        }
        row.iter_mut().take(i + 1).for_each(|v| *v /= sum);
    }
}

fn dropout_mask<T: Scalar, R: Rng>(shape: (usize, usize), rate: f64, rng: &mut R) -> Array2<T> {
    let keep = Bernoulli::new(1.0 - rate).expect("rate in [0, 1)");
    let scale = T::of(1.0 / (1.0 - rate));
    Array2::from_shape_simple_fn(shape, || if keep.sample(rng) { scale } else { T::zero() })
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    ln1: LnCache<T>,
    h1: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    lora_q_u: Option<Array2<T>>,
    lora_k_u: Option<Array2<T>>,
    att: Vec<Array2<T>>,
    ctx: Array2<T>,
    attn_mask: Option<Array2<T>>,
    ln2: LnCache<T>,
    h2: Array2<T>,
    pre_act: Array2<T>,
    act: Array2<T>,
    ffn_mask: Option<Array2<T>>,
}

/// Intermediate values of one forward pass, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct BackboneCache<T> {
    blocks: Vec<BlockCache<T>>,
    ln_f: LnCache<T>,
}

impl<T> BackboneCache<T> {
    /// Attention probabilities (`T x T`) of one head in one block.
    pub fn attention(&self, block: usize, head: usize) -> &Array2<T> {
        &self.blocks[block].att[head]
    }
}

// q = h W^T (+ s * (h A^T) B^T)
fn project<T: Scalar>(
    store: &ParamStore<T>,
    h: &Array2<T>,
    w: ParamId,
    lora: Option<LoraIds>,
    scaling: T,
) -> (Array2<T>, Option<Array2<T>>) {
    let mut out = h.dot(&store.mat(w).t());
    let u = lora.map(|l| {
        let u = h.dot(&store.mat(l.a).t());
        out.scaled_add(scaling, &u.dot(&store.mat(l.b).t()));
        u
    });
    (out, u)
}

fn check_input<T: Scalar>(config: &BackboneConfig, x: ArrayView2<'_, T>) -> Result<()> {
    if x.ncols() != config.d_model {
        return Err(Error::shape("backbone input width", config.d_model, x.ncols()));
    }
    if x.nrows() > config.max_positions {
        return Err(Error::OutOfRange {
            context: "backbone positions",
            index: x.nrows(),
            size: config.max_positions,
        });
    }
    Ok(())
}

/// Inference forward pass, `T x D -> T x D`.
pub fn forward<T: Scalar>(
    store: &ParamStore<T>,
    ids: &BackboneIds,
    config: &BackboneConfig,
    x: ArrayView2<'_, T>,
) -> Result<Array2<T>> {
    forward_train(store, ids, config, x, None::<&mut rand_chacha::ChaCha8Rng>).map(|(z, _)| z)
}

/// Forward pass that records what [`backward`] needs. Dropout is applied to
/// both residual branches when `rng` is given and the rate is nonzero.
pub fn forward_train<T: Scalar, R: Rng>(
    store: &ParamStore<T>,
    ids: &BackboneIds,
    config: &BackboneConfig,
    x: ArrayView2<'_, T>,
    mut rng: Option<&mut R>,
) -> Result<(Array2<T>, BackboneCache<T>)> {
    check_input(config, x)?;
    let (len, d) = x.dim();
    let dh = config.head_dim();
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let lora_scaling = T::of(ids.lora_scaling.unwrap_or(0.0));
    let mut h = x.to_owned();
    let mut caches = Vec::with_capacity(ids.blocks.len());

    for b in &ids.blocks {
        let (h1, ln1) = layer_norm(h.view(), store.vec(b.ln1.gamma), store.vec(b.ln1.beta));
        let (q, lora_q_u) = project(store, &h1, b.w_q, b.lora_q, lora_scaling);
        let (k, lora_k_u) = project(store, &h1, b.w_k, b.lora_k, lora_scaling);
        let v = h1.dot(&store.mat(b.w_v).t());

        let mut ctx = Array2::zeros((len, d));
        let mut att = Vec::with_capacity(config.heads);
        for head in 0..config.heads {
            let cols = s![.., head * dh..(head + 1) * dh];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            causal_softmax(&mut scores);
            ctx.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            att.push(scores);
        }
        let mut attn_out = ctx.dot(&store.mat(b.w_o).t());
        let attn_mask = match rng.as_deref_mut() {
            Some(r) if config.dropout > 0.0 => {
                let m = dropout_mask(attn_out.dim(), config.dropout, r);
                attn_out *= &m;
                Some(m)
            }
            _ => None,
        };
        h += &attn_out;

        let (h2, ln2) = layer_norm(h.view(), store.vec(b.ln2.gamma), store.vec(b.ln2.beta));
        let pre_act = h2.dot(&store.mat(b.w1).t()) + store.vec(b.b1);
        let act = pre_act.mapv(gelu);
        let mut ffn_out = act.dot(&store.mat(b.w2).t()) + store.vec(b.b2);
        let ffn_mask = match rng.as_deref_mut() {
            Some(r) if config.dropout > 0.0 => {
                let m = dropout_mask(ffn_out.dim(), config.dropout, r);
                ffn_out *= &m;
                Some(m)
            }
            _ => None,
        };
        h += &ffn_out;

        caches.push(BlockCache {
            ln1,
            h1,
            q,
            k,
            v,
            lora_q_u,
            lora_k_u,
            att,
            ctx,
            attn_mask,
            ln2,
            h2,
            pre_act,
            act,
            ffn_mask,
        });
    }
    let (z, ln_f) = layer_norm(h.view(), store.vec(ids.ln_f.gamma), store.vec(ids.ln_f.beta));
    Ok((z, BackboneCache { blocks: caches, ln_f }))
}

// Gradient of q = h W^T + s (h A^T) B^T with respect to W, A, B and h.
#[allow(clippy::too_many_arguments)]
fn project_backward<T: Scalar>(
    store: &ParamStore<T>,
    h: &Array2<T>,
    w: ParamId,
    lora: Option<LoraIds>,
    u: Option<&Array2<T>>,
    scaling: T,
    dq: ArrayView2<'_, T>,
    grads: &mut Grads<T>,
) -> Array2<T> {
    if grads.wants(w) {
        grads.add(w, dq.t().dot(h).view());
    }
    let mut dh = dq.dot(&store.mat(w));
    if let (Some(l), Some(u)) = (lora, u) {
        if grads.wants(l.b) {
            grads.add(l.b, (dq.t().dot(u) * scaling).view());
        }
        let du = dq.dot(&store.mat(l.b)) * scaling;
        if grads.wants(l.a) {
            grads.add(l.a, du.t().dot(h).view());
        }
        dh += &du.dot(&store.mat(l.a));
    }
    dh
}

/// Backpropagates `dz` through the stack, accumulating parameter gradients
/// and returning the gradient with respect to the input embeddings.
pub fn backward<T: Scalar>(
    store: &ParamStore<T>,
    ids: &BackboneIds,
    config: &BackboneConfig,
    cache: &BackboneCache<T>,
    dz: ArrayView2<'_, T>,
    grads: &mut Grads<T>,
) -> Array2<T> {
    let dh_size = config.head_dim();
    let scale = T::of(1.0 / (dh_size as f64).sqrt());
    let lora_scaling = T::of(ids.lora_scaling.unwrap_or(0.0));
    let mut dx = layer_norm_backward(&cache.ln_f, ids.ln_f, store.vec(ids.ln_f.gamma), dz, grads);

    for (b, c) in ids.blocks.iter().zip(&cache.blocks).rev() {
        // feed-forward branch
        let mut d_ffn = dx.clone();
        if let Some(m) = &c.ffn_mask {
            d_ffn *= m;
        }
        if grads.wants(b.w2) {
            grads.add(b.w2, d_ffn.t().dot(&c.act).view());
        }
        grads.add(b.b2, d_ffn.sum_axis(Axis(0)).view());
        let mut d_pre = d_ffn.dot(&store.mat(b.w2));
        Zip::from(&mut d_pre)
            .and(&c.pre_act)
            .for_each(|g, &x| *g *= gelu_grad(x));
        if grads.wants(b.w1) {
            grads.add(b.w1, d_pre.t().dot(&c.h2).view());
        }
        grads.add(b.b1, d_pre.sum_axis(Axis(0)).view());
        let dh2 = d_pre.dot(&store.mat(b.w1));
        dx += &layer_norm_backward(&c.ln2, b.ln2, store.vec(b.ln2.gamma), dh2.view(), grads);

        // attention branch
        let mut d_attn = dx.clone();
        if let Some(m) = &c.attn_mask {
            d_attn *= m;
        }
        if grads.wants(b.w_o) {
            grads.add(b.w_o, d_attn.t().dot(&c.ctx).view());
        }
        let d_ctx = d_attn.dot(&store.mat(b.w_o));
        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dk = Array2::zeros(c.k.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        for (head, att) in c.att.iter().enumerate() {
            let cols = s![.., head * dh_size..(head + 1) * dh_size];
            let d_ctx_h = d_ctx.slice(cols);
            let d_att = d_ctx_h.dot(&c.v.slice(cols).t());
            dv.slice_mut(cols).assign(&att.t().dot(&d_ctx_h));
            let row_dot = (&d_att * att).sum_axis(Axis(1));
            let d_scores = (d_att - &row_dot.insert_axis(Axis(1))) * att * scale;
            dq.slice_mut(cols).assign(&d_scores.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&d_scores.t().dot(&c.q.slice(cols)));
        }
        let mut dh1 = project_backward(
            store,
            &c.h1,
            b.w_q,
            b.lora_q,
            c.lora_q_u.as_ref(),
            lora_scaling,
            dq.view(),
            grads,
        );
        dh1 += &project_backward(
            store,
            &c.h1,
            b.w_k,
            b.lora_k,
            c.lora_k_u.as_ref(),
            lora_scaling,
            dk.view(),
            grads,
        );
        dh1 += &project_backward(store, &c.h1, b.w_v, None, None, lora_scaling, dv.view(), grads);
        dx += &layer_norm_backward(&c.ln1, b.ln1, store.vec(b.ln1.gamma), dh1.view(), grads);
    }
    dx
}

#[cfg(test)]
mod tests;
