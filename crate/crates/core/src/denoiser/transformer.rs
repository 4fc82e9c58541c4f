//! Bidirectional transformer denoiser with hand-written backpropagation.
//!
//! Input row `k` is the softmaxed state row times a `V × D` embedding matrix
//! plus a learned absolute position embedding, so a one-hot row reduces to an
//! ordinary token embedding. Blocks are pre-norm (attention, then a GELU MLP)
//! with unmasked attention. Time enters through one of three strategies:
//!
//! * `layer_norm_modulation`: a two-layer MLP on the sinusoidal embedding of
//!   `t` produces per-block `(shift, scale)` pairs applied after each norm,
//!   `y * (1 + scale) + shift`. The per-block projections start at zero, so
//!   a fresh model ignores `t`.
//! * `time_token`: the MLP output is prepended as an extra sequence position
//!   and its output row is dropped.
//! * `additive`: the MLP output is added to every input row.
//!
//! The output head is zero-initialised, so a fresh model predicts uniform
//! marginals. All parameters live in one flat buffer described by a
//! [`ParamLayout`]; gradients use the same layout.
//!
//! Batches are processed as one `(B·L) × D` matrix so the dense layers run as
//! a single GEMM; attention is computed per sequence and head.

use std::str::FromStr;
use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Denoiser, DenoiserOutput, Scalar};
use crate::rng;
use crate::simplex::SequenceState;
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TimeConditioning {
    #[default]
    LayerNormModulation,
    TimeToken,
    Additive,
}

impl FromStr for TimeConditioning {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer_norm_modulation" => Ok(Self::LayerNormModulation),
            "time_token" => Ok(Self::TimeToken),
            "additive" => Ok(Self::Additive),
            other => Err(Error::config("time_conditioning", format!("unknown strategy `{other}`"))),
        }
    }
}

impl TimeConditioning {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::LayerNormModulation => "layer_norm_modulation",
            Self::TimeToken => "time_token",
            Self::Additive => "additive",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub time_conditioning: TimeConditioning,
}

impl TransformerConfig {
    /// 4 layers, 4 heads, width 128.
    pub fn desk_scale(vocab_size: usize, max_seq_len: usize) -> Self {
        Self {
            layers: 4,
            heads: 4,
            embed_dim: 128,
            vocab_size,
            max_seq_len,
            time_conditioning: TimeConditioning::LayerNormModulation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("layers", self.layers),
            ("heads", self.heads),
            ("embed_dim", self.embed_dim),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be at least 1"));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::config("vocab_size", "must be at least 2"));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::config(
                "embed_dim",
                format!("{} is not divisible by heads={}", self.embed_dim, self.heads),
            ));
        }
        Ok(())
    }

    fn modulated(&self) -> bool {
        self.time_conditioning == TimeConditioning::LayerNormModulation
    }
}

/// Location of one tensor inside the flat parameter buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub vector: bool,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> Vec<usize> {
        if self.vector {
            vec![self.cols]
        } else {
            vec![self.rows, self.cols]
        }
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone)]
struct BlockSlots {
    ln1_w: Slot,
    ln1_b: Slot,
    qkv_w: Slot,
    qkv_b: Slot,
    attn_proj_w: Slot,
    attn_proj_b: Slot,
    ln2_w: Slot,
    ln2_b: Slot,
    fc_w: Slot,
    fc_b: Slot,
    mlp_proj_w: Slot,
    mlp_proj_b: Slot,
    modulation: Option<(Slot, Slot)>,
}

/// Named tensor inventory for a [`TransformerConfig`].
#[derive(Debug, Clone)]
pub struct ParamLayout {
    entries: Vec<(String, Slot)>,
    token_embed: Slot,
    pos_embed: Slot,
    time_fc1: (Slot, Slot),
    time_fc2: (Slot, Slot),
    blocks: Vec<BlockSlots>,
    final_ln: (Slot, Slot),
    final_modulation: Option<(Slot, Slot)>,
    head: (Slot, Slot),
    total: usize,
}

struct LayoutBuilder {
    entries: Vec<(String, Slot)>,
    offset: usize,
}

impl LayoutBuilder {
    fn matrix(&mut self, name: String, rows: usize, cols: usize) -> Slot {
        self.push(name, rows, cols, false)
    }

    fn vector(&mut self, name: String, len: usize) -> Slot {
        self.push(name, 1, len, true)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> (Slot, Slot) {
        (
            self.matrix(format!("{name}.weight"), fan_in, fan_out),
            self.vector(format!("{name}.bias"), fan_out),
        )
    }

    fn push(&mut self, name: String, rows: usize, cols: usize, vector: bool) -> Slot {
        let slot = Slot {
            offset: self.offset,
            rows,
            cols,
            vector,
        };
        self.offset += slot.len();
        self.entries.push((name, slot));
        slot
    }
}

impl ParamLayout {
    pub fn for_config(cfg: &TransformerConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let mut b = LayoutBuilder {
            entries: Vec::new(),
            offset: 0,
        };
        let token_embed = b.matrix("embed.token".into(), cfg.vocab_size, d);
        let pos_embed = b.matrix("embed.position".into(), cfg.max_seq_len, d);
        let time_fc1 = b.linear("time.fc1", d, d);
        let time_fc2 = b.linear("time.fc2", d, d);
        let blocks = (0..cfg.layers)
            .map(|l| {
                let p = format!("blocks.{l}");
                let (ln1_w, ln1_b) = (b.vector(format!("{p}.ln1.weight"), d), b.vector(format!("{p}.ln1.bias"), d));
                let (qkv_w, qkv_b) = b.linear(&format!("{p}.attn.qkv"), d, 3 * d);
                let (attn_proj_w, attn_proj_b) = b.linear(&format!("{p}.attn.proj"), d, d);
                let (ln2_w, ln2_b) = (b.vector(format!("{p}.ln2.weight"), d), b.vector(format!("{p}.ln2.bias"), d));
                let (fc_w, fc_b) = b.linear(&format!("{p}.mlp.fc"), d, 4 * d);
                let (mlp_proj_w, mlp_proj_b) = b.linear(&format!("{p}.mlp.proj"), 4 * d, d);
                let modulation = cfg.modulated().then(|| b.linear(&format!("{p}.modulation"), d, 4 * d));
                BlockSlots {
                    ln1_w,
                    ln1_b,
                    qkv_w,
                    qkv_b,
                    attn_proj_w,
                    attn_proj_b,
                    ln2_w,
                    ln2_b,
                    fc_w,
                    fc_b,
                    mlp_proj_w,
                    mlp_proj_b,
                    modulation,
                }
            })
            .collect();
        let final_ln = (b.vector("final_norm.weight".into(), d), b.vector("final_norm.bias".into(), d));
        let final_modulation = cfg.modulated().then(|| b.linear("final_modulation", d, 2 * d));
        let head = b.linear("head", d, cfg.vocab_size);
        Ok(Self {
            total: b.offset,
            entries: b.entries,
            token_embed,
            pos_embed,
            time_fc1,
            time_fc2,
            blocks,
            final_ln,
            final_modulation,
            head,
        })
    }

    /// `(name, slot)` for every tensor, in buffer order.
    pub fn entries(&self) -> &[(String, Slot)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<Slot> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, s)| *s)
    }

    pub fn total(&self) -> usize {
        self.total
    }
}

/// Flat parameter buffer plus the layout that names its tensors.
#[derive(Debug, Clone)]
pub struct Params<T> {
    cfg: TransformerConfig,
    layout: Arc<ParamLayout>,
    data: Vec<T>,
}

impl<T: Scalar> Params<T> {
    /// Training initialisation: N(0, 0.02) weights, unit norm gains, zero
    /// biases; the time MLP uses 1/sqrt(fan_in); modulation projections and
    /// the output head start at zero.
    pub fn init(cfg: &TransformerConfig, seed: u64) -> Result<Self> {
        let layout = Arc::new(ParamLayout::for_config(cfg)?);
        let mut rng = rng::seeded(seed);
        let mut data = vec![T::zero(); layout.total];
        let d = cfg.embed_dim as f64;
        let proj_std = INIT_STD / (2.0 * cfg.layers as f64).sqrt();
        for (name, slot) in layout.entries() {
            let std = if name.ends_with(".bias") || name.starts_with("head") || name.contains("modulation") {
                0.0
            } else if name.ends_with("ln1.weight") || name.ends_with("ln2.weight") || name == "final_norm.weight" {
                data[slot.range()].fill(T::one());
                continue;
            } else if name.starts_with("time.") {
                1.0 / d.sqrt()
            } else if name.ends_with("proj.weight") {
                proj_std
            } else {
                INIT_STD
            };
            if std > 0.0 {
                let normal = Normal::new(0.0, std).expect("valid std");
                for v in &mut data[slot.range()] {
                    *v = T::of(normal.sample(&mut rng));
                }
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            layout,
            data,
        })
    }

    /// Every tensor drawn from N(0, std), norm gains from N(1, std). Nothing
    /// is zero, so every parameter receives gradient; used by tests.
    pub fn random(cfg: &TransformerConfig, seed: u64, std: f64) -> Result<Self> {
        let layout = Arc::new(ParamLayout::for_config(cfg)?);
        let mut rng = rng::seeded(seed);
        let normal = Normal::new(0.0, std).map_err(|e| Error::input(e.to_string()))?;
        let mut data = vec![T::zero(); layout.total];
        for (name, slot) in layout.entries() {
            let base = if name.contains("ln") && name.ends_with(".weight") || name == "final_norm.weight" {
                1.0
            } else {
                0.0
            };
            for v in &mut data[slot.range()] {
                *v = T::of(base + normal.sample(&mut rng));
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            layout,
            data,
        })
    }

    pub fn from_data(cfg: &TransformerConfig, data: Vec<T>) -> Result<Self> {
        let layout = Arc::new(ParamLayout::for_config(cfg)?);
        if data.len() != layout.total {
            return Err(Error::input(format!(
                "parameter buffer has {} values, layout needs {}",
                data.len(),
                layout.total
            )));
        }
        Ok(Self {
            cfg: cfg.clone(),
            layout,
            data,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.layout.get(name).map(|s| &self.data[s.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let slot = self.layout.get(name)?;
        Some(&mut self.data[slot.range()])
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            cfg: self.cfg.clone(),
            layout: Arc::clone(&self.layout),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    fn m(&self, s: Slot) -> ArrayView2<'_, T> {
        ArrayView2::from_shape((s.rows, s.cols), &self.data[s.range()]).expect("slot shape")
    }

    fn v(&self, s: Slot) -> ArrayView1<'_, T> {
        ArrayView1::from(&self.data[s.range()])
    }
}

fn grad_m<T>(g: &mut [T], s: Slot) -> ArrayViewMut2<'_, T> {
    ArrayViewMut2::from_shape((s.rows, s.cols), &mut g[s.range()]).expect("slot shape")
}

fn grad_v<T>(g: &mut [T], s: Slot) -> ArrayViewMut1<'_, T> {
    ArrayViewMut1::from(&mut g[s.range()])
}

/// Sinusoidal embedding of `t ∈ [0,1]` (scaled by 1000), cosines then sines,
/// zero-padded to `dim`.
pub fn timestep_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = 1000.0 * t * freq;
        out[i] = arg.cos();
        out[half + i] = arg.sin();
    }
    out
}

/// Embedding of one state: `softmax(rows) · E + position`, `S × D`.
pub fn input_embed<T: Scalar>(params: &Params<T>, state: &SequenceState) -> Result<Array2<T>> {
    let dims = Dims::check(params.config(), std::slice::from_ref(state))?;
    Ok(content_embed(params, std::slice::from_ref(state), &dims).1)
}

#[derive(Debug, Clone, Copy)]
struct Dims {
    batch: usize,
    seq: usize,
    /// Rows per sequence including the time token.
    rows: usize,
    /// Row index of the first content position within a sequence.
    first: usize,
    width: usize,
    heads: usize,
    head_dim: usize,
    vocab: usize,
}

impl Dims {
    fn check(cfg: &TransformerConfig, states: &[SequenceState]) -> Result<Self> {
        let first = states.first().ok_or_else(|| Error::input("empty batch"))?;
        let seq = first.seq_len();
        for st in states {
            if st.vocab_size() != cfg.vocab_size {
                return Err(Error::input(format!(
                    "state vocabulary {} does not match model vocabulary {}",
                    st.vocab_size(),
                    cfg.vocab_size
                )));
            }
            if st.seq_len() != seq {
                return Err(Error::input("states in one batch must share a sequence length"));
            }
        }
        if seq > cfg.max_seq_len {
            return Err(Error::input(format!("sequence length {seq} exceeds max_seq_len {}", cfg.max_seq_len)));
        }
        let first = usize::from(cfg.time_conditioning == TimeConditioning::TimeToken);
        Ok(Self {
            batch: states.len(),
            seq,
            rows: seq + first,
            first,
            width: cfg.embed_dim,
            heads: cfg.heads,
            head_dim: cfg.embed_dim / cfg.heads,
            vocab: cfg.vocab_size,
        })
    }

    fn total_rows(&self) -> usize {
        self.batch * self.rows
    }

    fn content_row(&self, b: usize, k: usize) -> usize {
        b * self.rows + self.first + k
    }
}

struct LayerNormOut<T> {
    y: Array2<T>,
    xhat: Array2<T>,
    rstd: Array1<T>,
}

struct BlockCache<T> {
    ln1: LayerNormOut<T>,
    u1: Array2<T>,
    qkv: Array2<T>,
    attn: Vec<Array2<T>>,
    o: Array2<T>,
    ln2: LayerNormOut<T>,
    u2: Array2<T>,
    pre_gelu: Array2<T>,
    post_gelu: Array2<T>,
    modulation: Option<Array2<T>>,
}

struct Cache<T> {
    probs: Array2<T>,
    temb: Array2<T>,
    time_hidden: Array2<T>,
    time_out: Array2<T>,
    blocks: Vec<BlockCache<T>>,
    final_ln: LayerNormOut<T>,
    final_mod: Option<Array2<T>>,
    uf: Array2<T>,
}

fn linear<T: Scalar>(x: &ArrayView2<'_, T>, w: ArrayView2<'_, T>, b: ArrayView1<'_, T>) -> Array2<T> {
    let mut y = x.dot(&w);
    y += &b;
    y
}

/// Accumulates `dW += xᵀ dy`, `db += Σ dy` and returns `dx = dy Wᵀ`.
fn linear_backward<T: Scalar>(
    x: &ArrayView2<'_, T>,
    w: ArrayView2<'_, T>,
    dy: &ArrayView2<'_, T>,
    grad: &mut [T],
    slots: (Slot, Slot),
) -> Array2<T> {
    general_mat_mul(T::one(), &x.t(), dy, T::one(), &mut grad_m(grad, slots.0));
    grad_v(grad, slots.1).scaled_add(T::one(), &dy.sum_axis(Axis(0)));
    dy.dot(&w.t())
}

fn layer_norm<T: Scalar>(x: &Array2<T>, gain: ArrayView1<'_, T>, bias: ArrayView1<'_, T>) -> LayerNormOut<T> {
    let n = T::of(x.ncols() as f64);
    let eps = T::of(LN_EPS);
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<T>() / n;
        *r = T::one() / (var + eps).sqrt();
        let rs = *r;
        row.mapv_inplace(|v| v * rs);
    }
    let mut y = &xhat * &gain;
    y += &bias;
    LayerNormOut { y, xhat, rstd }
}

fn layer_norm_backward<T: Scalar>(
    cache: &LayerNormOut<T>,
    gain: ArrayView1<'_, T>,
    dy: &Array2<T>,
    grad: &mut [T],
    slots: (Slot, Slot),
) -> Array2<T> {
    grad_v(grad, slots.0).scaled_add(T::one(), &(dy * &cache.xhat).sum_axis(Axis(0)));
    grad_v(grad, slots.1).scaled_add(T::one(), &dy.sum_axis(Axis(0)));
    let n = T::of(dy.ncols() as f64);
    let mut dx = dy * &gain;
    for ((mut row, xhat), &rstd) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(&cache.rstd) {
        let mean = row.sum() / n;
        let mean_x = row.iter().zip(xhat.iter()).map(|(&a, &b)| a * b).sum::<T>() / n;
        Zip::from(&mut row).and(&xhat).for_each(|g, &xh| *g = rstd * (*g - mean - xh * mean_x));
    }
    dx
}

/// `y * (1 + scale) + shift` with `(shift, scale)` taken per sequence from
/// columns `[at, at+D)` and `[at+D, at+2D)` of `modulation`.
fn modulate<T: Scalar>(y: &Array2<T>, modulation: &Array2<T>, at: usize, dims: &Dims) -> Array2<T> {
    let d = dims.width;
    let mut u = y.clone();
    for b in 0..dims.batch {
        let shift = modulation.slice(s![b, at..at + d]);
        let scale = modulation.slice(s![b, at + d..at + 2 * d]).mapv(|v| v + T::one());
        let mut rows = u.slice_mut(s![b * dims.rows..(b + 1) * dims.rows, ..]);
        rows *= &scale;
        rows += &shift;
    }
    u
}

/// Returns `dy` and accumulates `dmodulation` for [`modulate`].
fn modulate_backward<T: Scalar>(
    du: &Array2<T>,
    y: &Array2<T>,
    modulation: &Array2<T>,
    dmod: &mut Array2<T>,
    at: usize,
    dims: &Dims,
) -> Array2<T> {
    let d = dims.width;
    let mut dy = du.clone();
    for b in 0..dims.batch {
        let range = b * dims.rows..(b + 1) * dims.rows;
        let du_b = du.slice(s![range.clone(), ..]);
        let y_b = y.slice(s![range.clone(), ..]);
        let dshift = du_b.sum_axis(Axis(0));
        let dscale = (&du_b * &y_b).sum_axis(Axis(0));
        dmod.slice_mut(s![b, at..at + d]).scaled_add(T::one(), &dshift);
        dmod.slice_mut(s![b, at + d..at + 2 * d]).scaled_add(T::one(), &dscale);
        let scale = modulation.slice(s![b, at + d..at + 2 * d]).mapv(|v| v + T::one());
        let mut rows = dy.slice_mut(s![range, ..]);
        rows *= &scale;
    }
    dy
}

fn softmax_rows<T: Scalar>(m: &mut Array2<T>) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

fn attention<T: Scalar>(qkv: &Array2<T>, dims: &Dims) -> (Array2<T>, Vec<Array2<T>>) {
    let (d, hd) = (dims.width, dims.head_dim);
    let scale = T::one() / T::of(hd as f64).sqrt();
    let mut o = Array2::zeros((dims.total_rows(), d));
    let mut probs = Vec::with_capacity(dims.batch * dims.heads);
    for b in 0..dims.batch {
        let rows = b * dims.rows..(b + 1) * dims.rows;
        for h in 0..dims.heads {
            let q = qkv.slice(s![rows.clone(), h * hd..(h + 1) * hd]);
            let k = qkv.slice(s![rows.clone(), d + h * hd..d + (h + 1) * hd]);
            let v = qkv.slice(s![rows.clone(), 2 * d + h * hd..2 * d + (h + 1) * hd]);
            let mut a = q.dot(&k.t());
            a *= scale;
            softmax_rows(&mut a);
            o.slice_mut(s![rows.clone(), h * hd..(h + 1) * hd]).assign(&a.dot(&v));
            probs.push(a);
        }
    }
    (o, probs)
}

fn attention_backward<T: Scalar>(qkv: &Array2<T>, probs: &[Array2<T>], d_o: &Array2<T>, dims: &Dims) -> Array2<T> {
    let (d, hd) = (dims.width, dims.head_dim);
    let scale = T::one() / T::of(hd as f64).sqrt();
    let mut dqkv = Array2::zeros(qkv.raw_dim());
    for b in 0..dims.batch {
        let rows = b * dims.rows..(b + 1) * dims.rows;
        for h in 0..dims.heads {
            let a = &probs[b * dims.heads + h];
            let (qc, kc, vc) = (h * hd..(h + 1) * hd, d + h * hd..d + (h + 1) * hd, 2 * d + h * hd..2 * d + (h + 1) * hd);
            let q = qkv.slice(s![rows.clone(), qc.clone()]);
            let k = qkv.slice(s![rows.clone(), kc.clone()]);
            let v = qkv.slice(s![rows.clone(), vc.clone()]);
            let d_oh = d_o.slice(s![rows.clone(), qc.clone()]);
            let da = d_oh.dot(&v.t());
            dqkv.slice_mut(s![rows.clone(), vc]).assign(&a.t().dot(&d_oh));
            let mut ds = &da * a;
            for (mut row, arow) in ds.rows_mut().into_iter().zip(a.rows()) {
                let dot = row.sum();
                Zip::from(&mut row).and(&arow).for_each(|g, &p| *g = *g - p * dot);
            }
            ds *= scale;
            dqkv.slice_mut(s![rows.clone(), qc]).assign(&ds.dot(&k));
            dqkv.slice_mut(s![rows.clone(), kc]).assign(&ds.t().dot(&q));
        }
    }
    dqkv
}

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + T::of(0.044715) * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let th = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::of(3.0) * a * x * x)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

fn ensure_finite<T: Scalar>(m: &Array2<T>, layer: usize, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericLayer {
            layer,
            what: format!("non-finite {what}"),
        })
    }
}

/// `(probs, content)`: softmaxed rows `(B·S) × V` and their embedding
/// `(B·S) × D` including positions.
fn content_embed<T: Scalar>(p: &Params<T>, states: &[SequenceState], dims: &Dims) -> (Array2<T>, Array2<T>) {
    let lay = p.layout();
    let mut probs = Array2::zeros((dims.batch * dims.seq, dims.vocab));
    for (b, st) in states.iter().enumerate() {
        let pr = st.probs();
        probs
            .slice_mut(s![b * dims.seq..(b + 1) * dims.seq, ..])
            .assign(&pr.mapv(T::of));
    }
    let mut content = probs.dot(&p.m(lay.token_embed));
    let pos = p.m(lay.pos_embed);
    for b in 0..dims.batch {
        let mut rows = content.slice_mut(s![b * dims.seq..(b + 1) * dims.seq, ..]);
        rows += &pos.slice(s![..dims.seq, ..]);
    }
    (probs, content)
}

fn run<T: Scalar>(p: &Params<T>, states: &[SequenceState], keep: bool) -> Result<(Array2<T>, Option<Cache<T>>, Dims)> {
    let cfg = p.config();
    let lay = p.layout();
    let dims = Dims::check(cfg, states)?;
    let d = dims.width;

    let (probs, content) = content_embed(p, states, &dims);

    let mut temb = Array2::zeros((dims.batch, d));
    for (b, st) in states.iter().enumerate() {
        let e = timestep_embedding(st.t(), d);
        temb.row_mut(b).assign(&Array1::from_iter(e.into_iter().map(T::of)));
    }
    let time_hidden = linear(&temb.view(), p.m(lay.time_fc1.0), p.v(lay.time_fc1.1));
    let time_act = time_hidden.mapv(silu);
    let time_out = linear(&time_act.view(), p.m(lay.time_fc2.0), p.v(lay.time_fc2.1));
    let time_cond = time_out.mapv(silu);

    let mut x = Array2::zeros((dims.total_rows(), d));
    for b in 0..dims.batch {
        x.slice_mut(s![b * dims.rows + dims.first..(b + 1) * dims.rows, ..])
            .assign(&content.slice(s![b * dims.seq..(b + 1) * dims.seq, ..]));
        match cfg.time_conditioning {
            TimeConditioning::TimeToken => x.row_mut(b * dims.rows).assign(&time_out.row(b)),
            TimeConditioning::Additive => {
                let mut rows = x.slice_mut(s![b * dims.rows..(b + 1) * dims.rows, ..]);
                rows += &time_out.row(b);
            }
            TimeConditioning::LayerNormModulation => {}
        }
    }
    drop(content);

    let mut blocks = Vec::with_capacity(if keep { cfg.layers } else { 0 });
    for (l, bs) in lay.blocks.iter().enumerate() {
        let modulation = bs
            .modulation
            .map(|(w, b)| linear(&time_cond.view(), p.m(w), p.v(b)));

        let ln1 = layer_norm(&x, p.v(bs.ln1_w), p.v(bs.ln1_b));
        let u1 = match &modulation {
            Some(m) => modulate(&ln1.y, m, 0, &dims),
            None => ln1.y.clone(),
        };
        let qkv = linear(&u1.view(), p.m(bs.qkv_w), p.v(bs.qkv_b));
        let (o, attn) = attention(&qkv, &dims);
        x += &linear(&o.view(), p.m(bs.attn_proj_w), p.v(bs.attn_proj_b));

        let ln2 = layer_norm(&x, p.v(bs.ln2_w), p.v(bs.ln2_b));
        let u2 = match &modulation {
            Some(m) => modulate(&ln2.y, m, 2 * d, &dims),
            None => ln2.y.clone(),
        };
        let pre_gelu = linear(&u2.view(), p.m(bs.fc_w), p.v(bs.fc_b));
        let post_gelu = pre_gelu.mapv(gelu);
        x += &linear(&post_gelu.view(), p.m(bs.mlp_proj_w), p.v(bs.mlp_proj_b));
        ensure_finite(&x, l, "activation")?;

        if keep {
            blocks.push(BlockCache {
                ln1,
                u1,
                qkv,
                attn,
                o,
                ln2,
                u2,
                pre_gelu,
                post_gelu,
                modulation,
            });
        }
    }

    let final_ln = layer_norm(&x, p.v(lay.final_ln.0), p.v(lay.final_ln.1));
    let final_mod = lay
        .final_modulation
        .map(|(w, b)| linear(&time_cond.view(), p.m(w), p.v(b)));
    let uf = match &final_mod {
        Some(m) => modulate(&final_ln.y, m, 0, &dims),
        None => final_ln.y.clone(),
    };
    let logits = linear(&uf.view(), p.m(lay.head.0), p.v(lay.head.1));
    ensure_finite(&logits, cfg.layers, "output logits")?;

    let cache = keep.then(|| Cache {
        probs,
        temb,
        time_hidden,
        time_out,
        blocks,
        final_ln,
        final_mod,
        uf,
    });
    Ok((logits, cache, dims))
}

fn backward<T: Scalar>(p: &Params<T>, cache: &Cache<T>, dims: &Dims, dlogits: &Array2<T>, grad: &mut [T]) {
    let cfg = p.config();
    let lay = p.layout();
    let d = dims.width;

    let mut dtime_cond = Array2::<T>::zeros((dims.batch, d));
    let mut dtime_out = Array2::<T>::zeros((dims.batch, d));

    let duf = linear_backward(&cache.uf.view(), p.m(lay.head.0), &dlogits.view(), grad, lay.head);
    let dyf = match (&cache.final_mod, lay.final_modulation) {
        (Some(m), Some(slots)) => {
            let mut dmod = Array2::zeros(m.raw_dim());
            let dy = modulate_backward(&duf, &cache.final_ln.y, m, &mut dmod, 0, dims);
            let time_cond = cache.time_out.mapv(silu);
            dtime_cond += &linear_backward(&time_cond.view(), p.m(slots.0), &dmod.view(), grad, slots);
            dy
        }
        _ => duf,
    };
    let mut dx = layer_norm_backward(&cache.final_ln, p.v(lay.final_ln.0), &dyf, grad, lay.final_ln);

    for (bs, bc) in lay.blocks.iter().zip(&cache.blocks).rev() {
        let mut dmod = bc.modulation.as_ref().map(|m| Array2::zeros(m.raw_dim()));

        // MLP branch.
        let dpost = linear_backward(
            &bc.post_gelu.view(),
            p.m(bs.mlp_proj_w),
            &dx.view(),
            grad,
            (bs.mlp_proj_w, bs.mlp_proj_b),
        );
        let mut dpre = dpost;
        Zip::from(&mut dpre).and(&bc.pre_gelu).for_each(|g, &x| *g = *g * gelu_grad(x));
        let du2 = linear_backward(&bc.u2.view(), p.m(bs.fc_w), &dpre.view(), grad, (bs.fc_w, bs.fc_b));
        let dy2 = match (&bc.modulation, dmod.as_mut()) {
            (Some(m), Some(dm)) => modulate_backward(&du2, &bc.ln2.y, m, dm, 2 * d, dims),
            _ => du2,
        };
        dx += &layer_norm_backward(&bc.ln2, p.v(bs.ln2_w), &dy2, grad, (bs.ln2_w, bs.ln2_b));

        // Attention branch.
        let d_o = linear_backward(&bc.o.view(), p.m(bs.attn_proj_w), &dx.view(), grad, (bs.attn_proj_w, bs.attn_proj_b));
        let dqkv = attention_backward(&bc.qkv, &bc.attn, &d_o, dims);
        let du1 = linear_backward(&bc.u1.view(), p.m(bs.qkv_w), &dqkv.view(), grad, (bs.qkv_w, bs.qkv_b));
        let dy1 = match (&bc.modulation, dmod.as_mut()) {
            (Some(m), Some(dm)) => modulate_backward(&du1, &bc.ln1.y, m, dm, 0, dims),
            _ => du1,
        };
        dx += &layer_norm_backward(&bc.ln1, p.v(bs.ln1_w), &dy1, grad, (bs.ln1_w, bs.ln1_b));

        if let (Some(dm), Some(slots)) = (dmod, bs.modulation) {
            let time_cond = cache.time_out.mapv(silu);
            dtime_cond += &linear_backward(&time_cond.view(), p.m(slots.0), &dm.view(), grad, slots);
        }
    }

    // Input rows: content embedding plus time conditioning.
    let mut dcontent = Array2::<T>::zeros((dims.batch * dims.seq, d));
    for b in 0..dims.batch {
        let start = dims.content_row(b, 0);
        dcontent
            .slice_mut(s![b * dims.seq..(b + 1) * dims.seq, ..])
            .assign(&dx.slice(s![start..start + dims.seq, ..]));
        match cfg.time_conditioning {
            TimeConditioning::TimeToken => dtime_out.row_mut(b).scaled_add(T::one(), &dx.row(b * dims.rows)),
            TimeConditioning::Additive => dtime_out
                .row_mut(b)
                .scaled_add(T::one(), &dx.slice(s![b * dims.rows..(b + 1) * dims.rows, ..]).sum_axis(Axis(0))),
            TimeConditioning::LayerNormModulation => {}
        }
    }
    general_mat_mul(
        T::one(),
        &cache.probs.t(),
        &dcontent,
        T::one(),
        &mut grad_m(grad, lay.token_embed),
    );
    {
        let mut dpos = grad_m(grad, lay.pos_embed);
        for b in 0..dims.batch {
            dpos.slice_mut(s![..dims.seq, ..])
                .scaled_add(T::one(), &dcontent.slice(s![b * dims.seq..(b + 1) * dims.seq, ..]));
        }
    }

    // Time MLP: time_cond = silu(time_out).
    Zip::from(&mut dtime_cond)
        .and(&cache.time_out)
        .for_each(|g, &x| *g = *g * silu_grad(x));
    dtime_out += &dtime_cond;
    let time_act = cache.time_hidden.mapv(silu);
    let mut dhidden = linear_backward(&time_act.view(), p.m(lay.time_fc2.0), &dtime_out.view(), grad, lay.time_fc2);
    Zip::from(&mut dhidden)
        .and(&cache.time_hidden)
        .for_each(|g, &x| *g = *g * silu_grad(x));
    linear_backward(&cache.temb.view(), p.m(lay.time_fc1.0), &dhidden.view(), grad, lay.time_fc1);
}

fn split_outputs<T: Scalar>(logits: &Array2<T>, dims: &Dims) -> Result<Vec<DenoiserOutput>> {
    (0..dims.batch)
        .map(|b| {
            let start = dims.content_row(b, 0);
            DenoiserOutput::new(logits.slice(s![start..start + dims.seq, ..]).mapv(|v| v.f64()))
        })
        .collect()
}

/// Forward pass for a batch of states sharing one sequence length.
pub fn forward<T: Scalar>(params: &Params<T>, states: &[SequenceState]) -> Result<Vec<DenoiserOutput>> {
    let (logits, _, dims) = run(params, states, false)?;
    split_outputs(&logits, &dims)
}

/// One training example: a noisy state, its clean tokens, and a loss weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub state: SequenceState,
    pub targets: Vec<usize>,
    pub weight: f64,
}

/// Summed (unnormalised) loss, counted tokens, and summed gradient for one
/// chunk of examples.
fn chunk_loss_grad<T: Scalar>(p: &Params<T>, examples: &[Example], ignore: Option<usize>) -> Result<(f64, usize, Vec<T>)> {
    let states: Vec<SequenceState> = examples.iter().map(|e| e.state.clone()).collect();
    let (logits, cache, dims) = run(p, &states, true)?;
    let cache = cache.expect("cache kept");
    let mut dlogits = Array2::<T>::zeros(logits.raw_dim());
    let mut loss = 0.0;
    let mut count = 0;
    for (b, ex) in examples.iter().enumerate() {
        if ex.targets.len() != dims.seq {
            return Err(Error::input(format!("{} targets for {} positions", ex.targets.len(), dims.seq)));
        }
        for (k, &target) in ex.targets.iter().enumerate() {
            if target >= dims.vocab {
                return Err(Error::input(format!("target {target} out of range for V={}", dims.vocab)));
            }
            if Some(target) == ignore {
                continue;
            }
            let r = dims.content_row(b, k);
            let row: Vec<f64> = logits.row(r).iter().map(|v| v.f64()).collect();
            let probs = crate::simplex::softmax(&row);
            let lse = crate::simplex::logsumexp(&row);
            loss += ex.weight * (lse - row[target]);
            count += 1;
            for (j, pj) in probs.into_iter().enumerate() {
                let g = pj - if j == target { 1.0 } else { 0.0 };
                dlogits[[r, j]] = T::of(ex.weight * g);
            }
        }
    }
    let mut grad = vec![T::zero(); p.len()];
    backward(p, &cache, &dims, &dlogits, &mut grad);
    Ok((loss, count, grad))
}

/// Mean weighted cross-entropy over all counted tokens and its gradient.
///
/// Examples are split into fixed chunks of `chunk` sequences that may run on
/// different threads; chunk results are summed in chunk order, so the result
/// does not depend on the thread count.
pub fn loss_and_grad<T: Scalar>(
    params: &Params<T>,
    examples: &[Example],
    ignore: Option<usize>,
    chunk: usize,
) -> Result<(f64, Vec<T>)> {
    if examples.is_empty() {
        return Err(Error::input("empty batch"));
    }
    let parts: Vec<Result<(f64, usize, Vec<T>)>> = examples
        .par_chunks(chunk.max(1))
        .map(|c| chunk_loss_grad(params, c, ignore))
        .collect();
    let mut loss = 0.0;
    let mut count = 0;
    let mut grad = vec![T::zero(); params.len()];
    for part in parts {
        let (l, c, g) = part?;
        loss += l;
        count += c;
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    let scale = 1.0 / count.max(1) as f64;
    let s = T::of(scale);
    grad.iter_mut().for_each(|g| *g *= s);
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok((loss * scale, grad))
}

/// Gradient of the denoising loss of a single example.
pub fn loss_gradient<T: Scalar>(params: &Params<T>, state: &SequenceState, targets: &[usize]) -> Result<(f64, Vec<T>)> {
    let ex = Example {
        state: state.clone(),
        targets: targets.to_vec(),
        weight: 1.0,
    };
    loss_and_grad(params, std::slice::from_ref(&ex), None, 1)
}

/// A transformer usable wherever a [`Denoiser`] is expected.
#[derive(Debug, Clone)]
pub struct TransformerDenoiser<T> {
    pub params: Params<T>,
    /// Sequences per forward call.
    pub chunk: usize,
}

impl<T: Scalar> TransformerDenoiser<T> {
    pub fn new(params: Params<T>) -> Self {
        Self { params, chunk: 64 }
    }
}

impl<T: Scalar> Denoiser for TransformerDenoiser<T> {
    fn vocab_size(&self) -> usize {
        self.params.config().vocab_size
    }

    fn denoise_batch(&self, states: &[SequenceState]) -> Result<Vec<DenoiserOutput>> {
        let parts: Vec<Result<Vec<DenoiserOutput>>> = states
            .par_chunks(self.chunk.max(1))
            .map(|c| forward(&self.params, c))
            .collect();
        let mut out = Vec::with_capacity(states.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::denoising_loss;
    use crate::simplex::{sample_dirichlet_logits, LogitVector};
    use rand::Rng as _;

    fn cfg(strategy: TimeConditioning) -> TransformerConfig {
        TransformerConfig {
            layers: 2,
            heads: 2,
            embed_dim: 8,
            vocab_size: 5,
            max_seq_len: 6,
            time_conditioning: strategy,
        }
    }

    fn random_state(s: usize, v: usize, t: f64, seed: u64) -> SequenceState {
        let mut r = rng::seeded(seed);
        let rows: Vec<LogitVector> = (0..s).map(|_| sample_dirichlet_logits(v, &mut r).unwrap()).collect();
        SequenceState::from_rows(&rows, t).unwrap()
    }

    const STRATEGIES: [TimeConditioning; 3] = [
        TimeConditioning::LayerNormModulation,
        TimeConditioning::TimeToken,
        TimeConditioning::Additive,
    ];

    #[test]
    fn config_validation() {
        let mut c = cfg(TimeConditioning::Additive);
        c.heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config { .. })));
        assert!(matches!("sideways".parse::<TimeConditioning>(), Err(Error::Config { .. })));
        assert_eq!("time_token".parse::<TimeConditioning>().unwrap(), TimeConditioning::TimeToken);
    }

    #[test]
    fn layout_names_are_unique_and_tile_the_buffer() {
        for st in STRATEGIES {
            let lay = ParamLayout::for_config(&cfg(st)).unwrap();
            let mut next = 0;
            for (i, (name, slot)) in lay.entries().iter().enumerate() {
                assert_eq!(slot.offset, next, "{name}");
                next += slot.len();
                assert!(lay.entries()[..i].iter().all(|(n, _)| n != name));
            }
            assert_eq!(next, lay.total());
            assert_eq!(lay.get("blocks.1.modulation.weight").is_some(), st == TimeConditioning::LayerNormModulation);
        }
    }

    #[test]
    fn forward_is_deterministic_and_shaped() {
        for st in STRATEGIES {
            let p = Params::<f64>::random(&cfg(st), 3, 0.3).unwrap();
            let state = random_state(4, 5, 0.4, 9);
            let a = forward(&p, std::slice::from_ref(&state)).unwrap();
            let b = forward(&p, std::slice::from_ref(&state)).unwrap();
            assert_eq!(a, b);
            assert_eq!(a[0].logits1.dim(), (4, 5));
        }
    }

    #[test]
    fn batched_forward_matches_single() {
        let p = Params::<f64>::random(&cfg(TimeConditioning::LayerNormModulation), 5, 0.3).unwrap();
        let states: Vec<_> = (0..3).map(|i| random_state(4, 5, 0.2 * i as f64, 20 + i)).collect();
        let batched = forward(&p, &states).unwrap();
        for (st, out) in states.iter().zip(&batched) {
            let single = forward(&p, std::slice::from_ref(st)).unwrap();
            let diff = (&single[0].logits1 - &out.logits1).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
            assert!(diff < 1e-12);
        }
    }

    #[test]
    fn rejects_shape_mismatch() {
        let p = Params::<f64>::init(&cfg(TimeConditioning::Additive), 1).unwrap();
        assert!(matches!(forward(&p, &[random_state(7, 5, 0.5, 1)]), Err(Error::Input(_))));
        assert!(matches!(forward(&p, &[random_state(3, 4, 0.5, 1)]), Err(Error::Input(_))));
    }

    #[test]
    fn non_finite_activation_names_layer() {
        let mut p = Params::<f64>::random(&cfg(TimeConditioning::Additive), 1, 0.3).unwrap();
        p.tensor_mut("blocks.1.mlp.proj.bias").unwrap()[0] = f64::NAN;
        match forward(&p, &[random_state(3, 5, 0.5, 1)]) {
            Err(Error::NumericLayer { layer, .. }) => assert_eq!(layer, 1),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn input_embed_examples() {
        let c = cfg(TimeConditioning::Additive);
        let p = Params::<f64>::random(&c, 2, 0.5).unwrap();
        let e = p.m(p.layout().token_embed).to_owned();
        let pos = p.m(p.layout().pos_embed).to_owned();
        // One-hot rows (up to f64 underflow) pick out embedding rows.
        let mut logits = Array2::from_elem((2, 5), -1000.0);
        logits[[0, 3]] = 0.0;
        logits[[1, 1]] = 0.0;
        let out = input_embed(&p, &SequenceState::new(logits, 0.5).unwrap()).unwrap();
        let expect0 = &e.row(3) + &pos.row(0);
        let expect1 = &e.row(1) + &pos.row(1);
        assert!((&out.row(0) - &expect0).iter().all(|v| v.abs() < 1e-12));
        assert!((&out.row(1) - &expect1).iter().all(|v| v.abs() < 1e-12));
        // Uniform row gives the mean embedding; a half/half mixture gives the midpoint.
        let mut logits = Array2::zeros((2, 5));
        logits.row_mut(1).fill(-1000.0);
        logits[[1, 0]] = 0.0;
        logits[[1, 4]] = 0.0;
        let out = input_embed(&p, &SequenceState::new(logits, 0.5).unwrap()).unwrap();
        let mean = e.mean_axis(Axis(0)).unwrap() + pos.row(0);
        let mid = (&e.row(0) + &e.row(4)) * 0.5 + pos.row(1);
        assert!((&out.row(0) - &mean).iter().all(|v| v.abs() < 1e-12));
        assert!((&out.row(1) - &mid).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn zero_modulation_ignores_time() {
        let c = cfg(TimeConditioning::LayerNormModulation);
        let mut p = Params::<f64>::random(&c, 4, 0.3).unwrap();
        let names: Vec<String> = p.layout().entries().iter().map(|(n, _)| n.clone()).collect();
        for n in names.iter().filter(|n| n.contains("modulation")) {
            p.tensor_mut(n).unwrap().fill(0.0);
        }
        let s = random_state(4, 5, 0.0, 3);
        let base = forward(&p, &[SequenceState::new(s.logits().clone(), 0.0).unwrap()]).unwrap();
        for t in [0.1, 0.5, 0.99, 1.0] {
            let st = SequenceState::new(s.logits().clone(), t).unwrap();
            assert_eq!(forward(&p, &[st]).unwrap(), base);
        }
    }

    #[test]
    fn time_changes_output_when_weights_nonzero() {
        for st in STRATEGIES {
            let p = Params::<f64>::random(&cfg(st), 4, 0.3).unwrap();
            let s = random_state(4, 5, 0.0, 3);
            let a = forward(&p, &[s.clone()]).unwrap();
            let b = forward(&p, &[SequenceState::new(s.logits().clone(), 1.0).unwrap()]).unwrap();
            let diff: f64 = (&a[0].logits1 - &b[0].logits1).mapv(|v| v * v).sum();
            assert!(diff > 0.0, "{st:?}");
        }
    }

    #[test]
    fn permutation_equivariance_without_positions() {
        let c = cfg(TimeConditioning::TimeToken);
        let mut p = Params::<f64>::random(&c, 8, 0.3).unwrap();
        p.tensor_mut("embed.position").unwrap().fill(0.0);
        let s = random_state(4, 5, 0.3, 12);
        let mut swapped = s.logits().clone();
        let (r1, r3) = (s.logits().row(1).to_owned(), s.logits().row(3).to_owned());
        swapped.row_mut(1).assign(&r3);
        swapped.row_mut(3).assign(&r1);
        let a = forward(&p, &[s.clone()]).unwrap().remove(0).logits1;
        let b = forward(&p, &[SequenceState::new(swapped, 0.3).unwrap()]).unwrap().remove(0).logits1;
        for (i, j) in [(0, 0), (1, 3), (2, 2), (3, 1)] {
            assert!((&a.row(i) - &b.row(j)).iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn bidirectional_dependence() {
        let p = Params::<f64>::random(&cfg(TimeConditioning::LayerNormModulation), 8, 0.3).unwrap();
        let s = random_state(4, 5, 0.3, 12);
        let mut changed = s.logits().clone();
        changed[[3, 0]] += 2.0;
        let a = forward(&p, &[s]).unwrap().remove(0).logits1;
        let b = forward(&p, &[SequenceState::new(changed, 0.3).unwrap()]).unwrap().remove(0).logits1;
        assert!((&a.row(0) - &b.row(0)).iter().any(|v| v.abs() > 1e-9));
    }

    #[test]
    fn fresh_model_predicts_uniform() {
        let c = cfg(TimeConditioning::LayerNormModulation);
        let p = Params::<f32>::init(&c, 0).unwrap();
        let s = random_state(4, 5, 0.3, 1);
        let out = forward(&p, &[s]).unwrap().remove(0);
        let loss = denoising_loss(&out, &[0, 1, 2, 3], None).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn gradients_match_finite_differences_for_every_tensor() {
        for st in STRATEGIES {
            let c = cfg(st);
            let p = Params::<f64>::random(&c, 17, 0.3).unwrap();
            let examples: Vec<Example> = (0..2)
                .map(|i| Example {
                    state: random_state(3, 5, 0.3 + 0.4 * i as f64, 40 + i),
                    targets: vec![1, 4, i as usize],
                    weight: 1.0 + i as f64,
                })
                .collect();
            let (_, grad) = loss_and_grad(&p, &examples, None, 8).unwrap();
            let mut r = rng::seeded(99);
            for (name, slot) in p.layout().entries() {
                for _ in 0..2 {
                    let i = slot.offset + r.random_range(0..slot.len());
                    let h = 1e-5;
                    let mut plus = p.clone();
                    plus.data_mut()[i] += h;
                    let mut minus = p.clone();
                    minus.data_mut()[i] -= h;
                    let lp = loss_and_grad(&plus, &examples, None, 8).unwrap().0;
                    let lm = loss_and_grad(&minus, &examples, None, 8).unwrap().0;
                    let fd = (lp - lm) / (2.0 * h);
                    let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
                    // Key biases have an exactly zero gradient; allow an absolute floor there.
                    assert!(rel < 1e-4 || (fd - grad[i]).abs() < 1e-9, "{st:?} {name}[{i}]: analytic {} vs fd {fd}", grad[i]);
                }
            }
        }
    }

    #[test]
    fn chunking_does_not_change_gradient_beyond_rounding() {
        let c = cfg(TimeConditioning::LayerNormModulation);
        let p = Params::<f64>::random(&c, 1, 0.3).unwrap();
        let examples: Vec<Example> = (0..5)
            .map(|i| Example {
                state: random_state(4, 5, 0.1 * i as f64, i),
                targets: vec![0, 1, 2, 3],
                weight: 1.0,
            })
            .collect();
        let (la, ga) = loss_and_grad(&p, &examples, None, 1).unwrap();
        let (lb, gb) = loss_and_grad(&p, &examples, None, 5).unwrap();
        assert!((la - lb).abs() < 1e-12);
        assert!(ga.iter().zip(&gb).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}
