//! Layers with hand-derived reverse-mode gradients.
//!
//! Each layer exposes `forward`, which returns its output plus whatever the
//! backward pass needs, and `backward`, which accumulates parameter gradients
//! into a gradient store and returns the gradient with respect to its input.
//! Activations are row-major `frames x channels` matrices.


use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Affine map `y = x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, in_dim: usize, out_dim: usize, std: f64) -> Self {
        let w = store.add(format!("{name}.weight"), &[in_dim, out_dim], Init::Normal(std), rng);
        let b = store.add(format!("{name}.bias"), &[out_dim], Init::Zeros, rng);
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, p: &ParamStore, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut y = x.dot(&p.mat(self.w));
        y += &p.vec(self.b);
        y
    }

    pub fn backward(&self, p: &ParamStore, g: &mut ParamStore, x: ArrayView2<'_, f64>, dy: ArrayView2<'_, f64>) -> Array2<f64> {
        self.accumulate(g, x, dy);
        dy.dot(&p.mat(self.w).t())
    }

    /// Parameter gradients only, for layers whose input is data.
    pub fn accumulate(&self, g: &mut ParamStore, x: ArrayView2<'_, f64>, dy: ArrayView2<'_, f64>) {
        general_mat_mul(1.0, &x.t(), &dy, 1.0, &mut g.mat_mut(self.w));
        let mut gb = g.vec_mut(self.b);
        gb += &dy.sum_axis(Axis(0));
    }
}

/// Row-wise layer normalization with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), &[dim], Init::Ones, rng),
            beta: store.add(format!("{name}.beta"), &[dim], Init::Zeros, rng),
        }
    }

    pub fn forward(&self, p: &ParamStore, x: ArrayView2<'_, f64>) -> (Array2<f64>, LayerNormCache) {
        let dim = x.ncols() as f64;
        let mut xhat = x.to_owned();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / dim;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / dim;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row *= inv;
            inv_std.push(inv);
        }
        let mut y = &xhat * &p.vec(self.gamma);
        y += &p.vec(self.beta);
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, p: &ParamStore, g: &mut ParamStore, cache: &LayerNormCache, dy: ArrayView2<'_, f64>) -> Array2<f64> {
        {
            let mut gg = g.vec_mut(self.gamma);
            gg += &(&dy * &cache.xhat).sum_axis(Axis(0));
        }
        {
            let mut gb = g.vec_mut(self.beta);
            gb += &dy.sum_axis(Axis(0));
        }
        let gamma = p.vec(self.gamma);
        let dim = dy.ncols() as f64;
        let mut dx = &dy * &gamma;
        for ((mut row, xhat), &inv) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(&cache.inv_std) {
            let sum = row.sum();
            let dot = row.dot(&xhat);
            Zip::from(&mut row).and(&xhat).for_each(|d, &xh| {
                *d = inv * (*d - sum / dim - xh * dot / dim);
            });
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// Gaussian-error linear unit, tanh form.
///
/// Evaluated as `x * sigmoid(2u)`, which equals `0.5 x (1 + tanh(u))` and
/// needs one `exp` instead of a `tanh`.
pub fn gelu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v * gelu_gate(v))
}

fn gelu_gate(v: f64) -> f64 {
    1.0 / (1.0 + (-2.0 * GELU_C * (v + GELU_K * v * v * v)).exp())
}

pub fn gelu_backward(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(x).for_each(|d, &v| {
        let s = gelu_gate(v);
        let deriv = s + 2.0 * v * s * (1.0 - s) * GELU_C * (1.0 + 3.0 * GELU_K * v * v);
        *d *= deriv;
    });
    dx
}

/// In-place numerically stable softmax over each row.
pub fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Which keys each query may attend to.
#[derive(Debug, Clone, Copy)]
pub enum AttnLayout<'a> {
    /// One sequence; keys flagged `false` are excluded.
    Masked(&'a [bool]),
    /// Independent groups of consecutive rows, fully connected inside each.
    Grouped(usize),
}

/// Attention for a single block and head: `softmax(q k^T * scale) v`.
/// Returns the output and the probability matrix. No keys gives zeros.
fn attend(q: ArrayView2<'_, f64>, k: ArrayView2<'_, f64>, v: ArrayView2<'_, f64>, scale: f64) -> (Array2<f64>, Array2<f64>) {
    if k.nrows() == 0 {
        return (Array2::zeros((q.nrows(), v.ncols())), Array2::zeros((q.nrows(), 0)));
    }
    let mut probs = q.dot(&k.t());
    probs *= scale;
    softmax_rows(&mut probs);
    (probs.dot(&v), probs)
}

/// Single-head scaled dot-product attention restricted to keys whose mask
/// flag is set. Rows whose keys are all masked output zeros.
pub fn masked_attention(
    queries: ArrayView2<'_, f64>,
    keys: ArrayView2<'_, f64>,
    values: ArrayView2<'_, f64>,
    key_mask: &[bool],
) -> Result<Array2<f64>> {
    let n = keys.nrows();
    if values.nrows() != n || key_mask.len() != n || queries.ncols() != keys.ncols() {
        return Err(Error::Contract(format!(
            "attention shapes: q {:?}, k {:?}, v {:?}, mask {}",
            queries.dim(),
            keys.dim(),
            values.dim(),
            key_mask.len()
        )));
    }
    let idx: Vec<usize> = (0..n).filter(|&i| key_mask[i]).collect();
    let k = keys.select(Axis(0), &idx);
    let v = values.select(Axis(0), &idx);
    let scale = 1.0 / (queries.ncols() as f64).sqrt();
    Ok(attend(queries, k.view(), v.view(), scale).0)
}

/// Multi-head self-attention with an output projection.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

#[derive(Debug, Clone)]
enum Probs {
    /// Present key indices and one probability matrix per head.
    Masked { keys: Vec<usize>, per_head: Vec<Array2<f64>> },
    /// Row-major `size x size` probabilities per group, then per head.
    Grouped { size: usize, data: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    merged: Array2<f64>,
    probs: Probs,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, heads: usize, std: f64) -> Self {
        Self {
            query: Linear::new(store, rng, &format!("{name}.query"), dim, dim, std),
            key: Linear::new(store, rng, &format!("{name}.key"), dim, dim, std),
            value: Linear::new(store, rng, &format!("{name}.value"), dim, dim, std),
            out: Linear::new(store, rng, &format!("{name}.out"), dim, dim, std),
            heads,
        }
    }

    fn head_dim(&self) -> usize {
        self.query.out_dim / self.heads
    }

    pub fn forward(&self, p: &ParamStore, x: ArrayView2<'_, f64>, layout: AttnLayout<'_>) -> Result<(Array2<f64>, AttentionCache)> {
        let n = x.nrows();
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.query.forward(p, x);
        let k = self.key.forward(p, x);
        let v = self.value.forward(p, x);
        let mut merged = Array2::zeros((n, self.query.out_dim));
        let probs = match layout {
            AttnLayout::Masked(mask) => {
                if mask.len() != n {
                    return Err(Error::Contract(format!("mask has {} flags for {n} rows", mask.len())));
                }
                let keys: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
                let kb = k.select(Axis(0), &keys);
                let vb = v.select(Axis(0), &keys);
                let mut per_head = Vec::with_capacity(self.heads);
                for h in 0..self.heads {
                    let cols = h * dh..(h + 1) * dh;
                    let (o, pr) = attend(
                        q.slice(s![.., cols.clone()]),
                        kb.slice(s![.., cols.clone()]),
                        vb.slice(s![.., cols.clone()]),
                        scale,
                    );
                    merged.slice_mut(s![.., cols]).assign(&o);
                    per_head.push(pr);
                }
                Probs::Masked { keys, per_head }
            }
            AttnLayout::Grouped(size) => {
                if size == 0 || !n.is_multiple_of(size) {
                    return Err(Error::Contract(format!("{n} rows do not split into groups of {size}")));
                }
                let data = grouped_forward(&q, &k, &v, &mut merged, size, self.heads, scale);
                Probs::Grouped { size, data }
            }
        };
        let y = self.out.forward(p, merged.view());
        Ok((y, AttentionCache { q, k, v, merged, probs }))
    }

    pub fn backward(&self, p: &ParamStore, g: &mut ParamStore, x: ArrayView2<'_, f64>, cache: &AttentionCache, dy: ArrayView2<'_, f64>) -> Array2<f64> {
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let dmerged = self.out.backward(p, g, cache.merged.view(), dy);
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        match &cache.probs {
            Probs::Masked { keys, per_head } if !keys.is_empty() => {
                let kb = cache.k.select(Axis(0), keys);
                let vb = cache.v.select(Axis(0), keys);
                let mut dkb = Array2::<f64>::zeros(kb.raw_dim());
                let mut dvb = Array2::<f64>::zeros(vb.raw_dim());
                for (h, probs) in per_head.iter().enumerate() {
                    let cols = h * dh..(h + 1) * dh;
                    let d_out = dmerged.slice(s![.., cols.clone()]);
                    let qh = cache.q.slice(s![.., cols.clone()]);
                    let mut dp = d_out.dot(&vb.slice(s![.., cols.clone()]).t());
                    dvb.slice_mut(s![.., cols.clone()]).assign(&probs.t().dot(&d_out));
                    // softmax backward: dS = P * (dP - rowsum(P * dP))
                    for (mut drow, prow) in dp.rows_mut().into_iter().zip(probs.rows()) {
                        let dot = drow.dot(&prow);
                        Zip::from(&mut drow).and(&prow).for_each(|d, &pv| *d = pv * (*d - dot) * scale);
                    }
                    general_mat_mul(1.0, &dp, &kb.slice(s![.., cols.clone()]), 1.0, &mut dq.slice_mut(s![.., cols.clone()]));
                    dkb.slice_mut(s![.., cols]).assign(&dp.t().dot(&qh));
                }
                for (row, &key) in keys.iter().enumerate() {
                    let mut r = dk.row_mut(key);
                    r += &dkb.row(row);
                    let mut r = dv.row_mut(key);
                    r += &dvb.row(row);
                }
            }
            Probs::Masked { .. } => {}
            Probs::Grouped { size, data } => {
                grouped_backward(cache, &dmerged, &mut dq, &mut dk, &mut dv, *size, self.heads, scale, data);
            }
        }
        let mut dx = self.query.backward(p, g, x, dq.view());
        dx += &self.key.backward(p, g, x, dk.view());
        dx += &self.value.backward(p, g, x, dv.view());
        dx
    }
}

/// Attention inside independent groups of `size` consecutive rows. Groups
/// are small (keypoints of one frame), so plain loops beat per-group matrix
/// calls.
fn grouped_forward(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    merged: &mut Array2<f64>,
    size: usize,
    heads: usize,
    scale: f64,
) -> Vec<f64> {
    let dim = q.ncols();
    let dh = dim / heads;
    let (qs, ks, vs) = (q.as_slice().unwrap(), k.as_slice().unwrap(), v.as_slice().unwrap());
    let out = merged.as_slice_mut().unwrap();
    let groups = q.nrows() / size;
    let mut probs = vec![0.0; groups * heads * size * size];
    for g in 0..groups {
        for h in 0..heads {
            let block = &mut probs[(g * heads + h) * size * size..][..size * size];
            for i in 0..size {
                let qi = &qs[(g * size + i) * dim + h * dh..][..dh];
                let row = &mut block[i * size..(i + 1) * size];
                for (j, r) in row.iter_mut().enumerate() {
                    let kj = &ks[(g * size + j) * dim + h * dh..][..dh];
                    *r = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for r in row.iter_mut() {
                    *r = (*r - max).exp();
                    sum += *r;
                }
                row.iter_mut().for_each(|r| *r /= sum);
                let oi = &mut out[(g * size + i) * dim + h * dh..][..dh];
                for (j, &pij) in row.iter().enumerate() {
                    let vj = &vs[(g * size + j) * dim + h * dh..][..dh];
                    oi.iter_mut().zip(vj).for_each(|(o, v)| *o += pij * v);
                }
            }
        }
    }
    probs
}

#[allow(clippy::too_many_arguments)]
fn grouped_backward(
    cache: &AttentionCache,
    dmerged: &Array2<f64>,
    dq: &mut Array2<f64>,
    dk: &mut Array2<f64>,
    dv: &mut Array2<f64>,
    size: usize,
    heads: usize,
    scale: f64,
    probs: &[f64],
) {
    let dim = cache.q.ncols();
    let dh = dim / heads;
    let (qs, ks, vs) = (cache.q.as_slice().unwrap(), cache.k.as_slice().unwrap(), cache.v.as_slice().unwrap());
    let dos = dmerged.as_slice().unwrap();
    let (dqs, dks, dvs) = (dq.as_slice_mut().unwrap(), dk.as_slice_mut().unwrap(), dv.as_slice_mut().unwrap());
    let groups = cache.q.nrows() / size;
    let mut dp = vec![0.0; size];
    for g in 0..groups {
        for h in 0..heads {
            let block = &probs[(g * heads + h) * size * size..][..size * size];
            let off = |row: usize| (g * size + row) * dim + h * dh;
            for i in 0..size {
                let pi = &block[i * size..(i + 1) * size];
                let doi = &dos[off(i)..][..dh];
                let mut dot = 0.0;
                for j in 0..size {
                    let vj = &vs[off(j)..][..dh];
                    dp[j] = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    dot += pi[j] * dp[j];
                    let dvj = &mut dvs[off(j)..][..dh];
                    dvj.iter_mut().zip(doi).for_each(|(d, o)| *d += pi[j] * o);
                }
                for j in 0..size {
                    let ds = pi[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in 0..dh {
                        dqs[off(i) + c] += ds * ks[off(j) + c];
                        dks[off(j) + c] += ds * qs[off(i) + c];
                    }
                }
            }
        }
    }
}

/// Inverted dropout applied to residual branches in training.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn mask(&mut self, rows: usize, cols: usize) -> Option<Array2<f64>> {
        if self.rate <= 0.0 {
            return None;
        }
        let keep = 1.0 - self.rate;
        let scale = 1.0 / keep;
        Some(Array2::from_shape_simple_fn((rows, cols), || {
            if self.rng.random::<f64>() < keep {
                scale
            } else {
                0.0
            }
        }))
    }
}

fn apply_mask(x: &mut Array2<f64>, mask: &Option<Array2<f64>>) {
    if let Some(m) = mask {
        *x *= m;
    }
}

/// Pre-normalization transformer encoder layer:
/// `h = x + drop(attn(ln1(x)))`, `y = h + drop(ff(ln2(h)))`.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff_up: Linear,
    pub ff_down: Linear,
}

#[derive(Debug, Clone)]
pub struct EncoderLayerCache {
    ln1: LayerNormCache,
    attn_in: Array2<f64>,
    attn: AttentionCache,
    drop1: Option<Array2<f64>>,
    ln2: LayerNormCache,
    ff_in: Array2<f64>,
    ff_pre: Array2<f64>,
    ff_act: Array2<f64>,
    drop2: Option<Array2<f64>>,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, heads: usize, ff_dim: usize, std: f64) -> Self {
        Self {
            ln1: LayerNorm::new(store, rng, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, heads, std),
            ln2: LayerNorm::new(store, rng, &format!("{name}.ln2"), dim),
            ff_up: Linear::new(store, rng, &format!("{name}.ff_up"), dim, ff_dim, std),
            ff_down: Linear::new(store, rng, &format!("{name}.ff_down"), ff_dim, dim, std),
        }
    }

    pub fn forward(
        &self,
        p: &ParamStore,
        x: Array2<f64>,
        layout: AttnLayout<'_>,
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> Result<(Array2<f64>, EncoderLayerCache)> {
        let (n, d) = x.dim();
        let (attn_in, ln1) = self.ln1.forward(p, x.view());
        let (mut attn_out, attn) = self.attn.forward(p, attn_in.view(), layout)?;
        let drop1 = dropout.as_mut().and_then(|dr| dr.mask(n, d));
        apply_mask(&mut attn_out, &drop1);
        let h = x + &attn_out;
        let (ff_in, ln2) = self.ln2.forward(p, h.view());
        let ff_pre = self.ff_up.forward(p, ff_in.view());
        let ff_act = gelu(&ff_pre);
        let mut ff_out = self.ff_down.forward(p, ff_act.view());
        let drop2 = dropout.as_mut().and_then(|dr| dr.mask(n, d));
        apply_mask(&mut ff_out, &drop2);
        let y = h + &ff_out;
        Ok((
            y,
            EncoderLayerCache { ln1, attn_in, attn, drop1, ln2, ff_in, ff_pre, ff_act, drop2 },
        ))
    }

    pub fn backward(&self, p: &ParamStore, g: &mut ParamStore, cache: &EncoderLayerCache, dy: Array2<f64>) -> Array2<f64> {
        let mut d_ff = dy.clone();
        apply_mask(&mut d_ff, &cache.drop2);
        let d_act = self.ff_down.backward(p, g, cache.ff_act.view(), d_ff.view());
        let d_pre = gelu_backward(&cache.ff_pre, &d_act);
        let d_ff_in = self.ff_up.backward(p, g, cache.ff_in.view(), d_pre.view());
        let dh = dy + &self.ln2.backward(p, g, &cache.ln2, d_ff_in.view());
        let mut d_attn = dh.clone();
        apply_mask(&mut d_attn, &cache.drop1);
        let d_attn_in = self.attn.backward(p, g, cache.attn_in.view(), &cache.attn, d_attn.view());
        dh + &self.ln1.backward(p, g, &cache.ln1, d_attn_in.view())
    }
}

/// A stack of encoder layers followed by a final layer norm.
#[derive(Debug, Clone)]
pub struct TransformerStack {
    pub layers: Vec<EncoderLayer>,
    pub final_norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct StackCache {
    layers: Vec<EncoderLayerCache>,
    final_norm: LayerNormCache,
}

impl TransformerStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, depth: usize, dim: usize, heads: usize, ff_dim: usize, std: f64) -> Self {
        let layers = (0..depth)
            .map(|i| EncoderLayer::new(store, rng, &format!("{name}.layer{i}"), dim, heads, ff_dim, std))
            .collect();
        Self {
            layers,
            final_norm: LayerNorm::new(store, rng, &format!("{name}.final_norm"), dim),
        }
    }

    pub fn forward(
        &self,
        p: &ParamStore,
        x: Array2<f64>,
        layout: AttnLayout<'_>,
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> Result<(Array2<f64>, StackCache)> {
        let mut h = x;
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, cache) = layer.forward(p, h, layout, dropout.as_deref_mut())?;
            h = next;
            caches.push(cache);
        }
        let (y, final_norm) = self.final_norm.forward(p, h.view());
        Ok((y, StackCache { layers: caches, final_norm }))
    }

    pub fn backward(&self, p: &ParamStore, g: &mut ParamStore, cache: &StackCache, dy: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut d = self.final_norm.backward(p, g, &cache.final_norm, dy);
        for (layer, c) in self.layers.iter().zip(&cache.layers).rev() {
            d = layer.backward(p, g, c, d);
        }
        d
    }
}
