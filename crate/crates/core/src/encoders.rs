//! Per-modality encoders mapping raw frames to the shared model width.
//!
//! * projection: batch norm over raw channels, then a linear map;
//! * landmark set: batch norm, per-token linear map, learned keypoint-index
//!   embedding (plus a hand-side embedding for hands), a small transformer
//!   over the keypoints of each frame, then the mean over keypoints;
//! * state: a learned table with one row per state.
//!
//! Absent frames are never encoded: their output rows are exact zeros and
//! they do not contribute to batch statistics.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::datamodel::{EncoderKind, HandSide};
use crate::error::{Error, Result};
use crate::nn::{AttnLayout, Dropout, Linear, StackCache, TransformerStack};
use crate::params::{Init, ParamId, ParamStore};

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Shape hyper-parameters shared by every encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub token_layers: usize,
    pub token_heads: usize,
    pub ff_mult: usize,
    pub init_std: f64,
}

/// Per-channel statistics of the present frames of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    /// Biased variance, used to normalize.
    pub var: Vec<f64>,
    /// Unbiased variance, folded into the running estimate.
    pub unbiased_var: Vec<f64>,
    pub count: usize,
}

impl NormStats {
    /// Statistics over the present rows of several frame matrices.
    pub fn from_frames<'a>(parts: impl IntoIterator<Item = (ArrayView2<'a, f64>, &'a [bool])>, channels: usize) -> Result<Self> {
        let mut sum = vec![0.0; channels];
        let mut count = 0usize;
        let parts: Vec<_> = parts.into_iter().collect();
        for (frames, presence) in &parts {
            for (row, _) in frames.rows().into_iter().zip(presence.iter()).filter(|(_, &p)| p) {
                for (s, v) in sum.iter_mut().zip(row) {
                    *s += v;
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::DegenerateStatistics("no present frame to compute batch statistics".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; channels];
        for (frames, presence) in &parts {
            for (row, _) in frames.rows().into_iter().zip(presence.iter()).filter(|(_, &p)| p) {
                for ((s, v), m) in sq.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let var = sq.iter().map(|s| s / count as f64).collect();
        let unbiased_var = if count > 1 {
            sq.iter().map(|s| s / (count - 1) as f64).collect()
        } else {
            vec![0.0; channels]
        };
        Ok(Self { mean, var, unbiased_var, count })
    }
}

/// Where normalization statistics come from.
#[derive(Debug, Clone, Copy)]
pub enum NormSource<'a> {
    Batch(&'a NormStats),
    Running,
}

/// 1-D batch normalization over raw channels.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    /// Ids into the buffer store, not the parameter store.
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, buffers: &mut ParamStore, rng: &mut R, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), &[channels], Init::Ones, rng),
            beta: store.add(format!("{name}.beta"), &[channels], Init::Zeros, rng),
            running_mean: buffers.add(format!("{name}.running_mean"), &[channels], Init::Zeros, rng),
            running_var: buffers.add(format!("{name}.running_var"), &[channels], Init::Ones, rng),
            channels,
        }
    }

    /// Standardized values `(x - mean) / sqrt(var + eps)` for the given rows.
    pub fn standardize(&self, buffers: &ParamStore, x: ArrayView2<'_, f64>, source: NormSource<'_>) -> Array2<f64> {
        let (mean, var): (Vec<f64>, Vec<f64>) = match source {
            NormSource::Batch(stats) => (stats.mean.clone(), stats.var.clone()),
            NormSource::Running => (
                buffers.vec(self.running_mean).to_vec(),
                buffers.vec(self.running_var).to_vec(),
            ),
        };
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&mean).zip(&var) {
                *v = (*v - m) / (s + BATCH_NORM_EPS).sqrt();
            }
        }
        out
    }

    pub fn affine(&self, p: &ParamStore, xhat: &Array2<f64>) -> Array2<f64> {
        let mut y = xhat * &p.vec(self.gamma);
        y += &p.vec(self.beta);
        y
    }

    pub fn backward(&self, g: &mut ParamStore, xhat: &Array2<f64>, dy: ArrayView2<'_, f64>) {
        {
            let mut gg = g.vec_mut(self.gamma);
            gg += &(&dy * xhat).sum_axis(Axis(0));
        }
        let mut gb = g.vec_mut(self.beta);
        gb += &dy.sum_axis(Axis(0));
    }

    /// Exponential moving average update of the running estimates.
    pub fn update_running(&self, buffers: &mut ParamStore, stats: &NormStats, momentum: f64) {
        for (r, m) in buffers.vec_mut(self.running_mean).iter_mut().zip(&stats.mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        for (r, v) in buffers.vec_mut(self.running_var).iter_mut().zip(&stats.unbiased_var) {
            *r = (1.0 - momentum) * *r + momentum * v;
        }
    }
}

/// Batch normalization of one frame matrix, before the learned affine map
/// is applied. Absent rows stay zero.
///
/// In train mode the statistics come from the present rows of `frames`
/// and are returned so the caller can fold them into the running estimate.
pub fn normalize<'a>(
    norm: &BatchNorm,
    p: &ParamStore,
    buffers: &ParamStore,
    frames: ArrayView2<'a, f64>,
    presence: &'a [bool],
    mode: Mode,
) -> Result<(Array2<f64>, Option<NormStats>)> {
    if frames.ncols() != norm.channels || frames.nrows() != presence.len() {
        return Err(Error::Schema(format!(
            "normalize: frames {:?} for {} channels and {} flags",
            frames.dim(),
            norm.channels,
            presence.len()
        )));
    }
    let stats = match mode {
        Mode::Train => Some(NormStats::from_frames([(frames, presence)], norm.channels)?),
        Mode::Infer => None,
    };
    let source = stats.as_ref().map_or(NormSource::Running, NormSource::Batch);
    let mut out = norm.affine(p, &norm.standardize(buffers, frames, source));
    for (mut row, &present) in out.rows_mut().into_iter().zip(presence) {
        if !present {
            row.fill(0.0);
        }
    }
    Ok((out, stats))
}

/// Encoder outputs for one modality slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub values: Array2<f64>,
    pub presence: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct LandmarkEncoder {
    pub norm: BatchNorm,
    pub proj: Linear,
    pub token_embed: ParamId,
    pub side_embed: Option<ParamId>,
    pub stack: TransformerStack,
    pub token_count: usize,
    pub token_dim: usize,
}

#[derive(Debug, Clone)]
pub enum Encoder {
    Projection { norm: BatchNorm, proj: Linear },
    LandmarkSet(LandmarkEncoder),
    State { table: ParamId, state_count: usize },
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    rows: usize,
    present: Vec<usize>,
    inner: CacheInner,
}

#[derive(Debug, Clone)]
enum CacheInner {
    Empty,
    Projection { xhat: Array2<f64>, normed: Array2<f64> },
    Landmark { xhat: Array2<f64>, tokens_in: Array2<f64>, stack: StackCache, side: Option<HandSide> },
    State { states: Vec<usize> },
}

impl Encoder {
    /// Builds an encoder; `with_sides` adds the left/right hand table.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        buffers: &mut ParamStore,
        rng: &mut R,
        name: &str,
        kind: EncoderKind,
        raw_dim: usize,
        with_sides: bool,
        cfg: &EncoderConfig,
    ) -> Result<Self> {
        let d = cfg.d_model;
        if with_sides && !matches!(kind, EncoderKind::LandmarkSet { .. }) {
            return Err(Error::Config(format!("{name}: side embeddings need a landmark encoder")));
        }
        Ok(match kind {
            EncoderKind::Projection => Encoder::Projection {
                norm: BatchNorm::new(store, buffers, rng, &format!("{name}.norm"), raw_dim),
                proj: Linear::new(store, rng, &format!("{name}.proj"), raw_dim, d, cfg.init_std),
            },
            EncoderKind::LandmarkSet { token_count, token_dim } => {
                if token_count * token_dim != raw_dim {
                    return Err(Error::Schema(format!(
                        "{name}: raw_dim {raw_dim} is not {token_count} x {token_dim}"
                    )));
                }
                if cfg.token_heads == 0 || !d.is_multiple_of(cfg.token_heads) {
                    return Err(Error::Config(format!("{} token heads do not divide width {d}", cfg.token_heads)));
                }
                LandmarkSet(LandmarkEncoder {
                    norm: BatchNorm::new(store, buffers, rng, &format!("{name}.norm"), raw_dim),
                    proj: Linear::new(store, rng, &format!("{name}.proj"), token_dim, d, cfg.init_std),
                    token_embed: store.add(format!("{name}.token_embed"), &[token_count, d], Init::Normal(cfg.init_std), rng),
                    side_embed: with_sides
                        .then(|| store.add(format!("{name}.side_embed"), &[2, d], Init::Normal(cfg.init_std), rng)),
                    stack: TransformerStack::new(
                        store,
                        rng,
                        &format!("{name}.tokens"),
                        cfg.token_layers,
                        d,
                        cfg.token_heads,
                        cfg.ff_mult * d,
                        cfg.init_std,
                    ),
                    token_count,
                    token_dim,
                })
            }
            EncoderKind::State { state_count } => Encoder::State {
                table: store.add(format!("{name}.table"), &[state_count, d], Init::Normal(cfg.init_std), rng),
                state_count,
            },
        })
    }

    pub fn raw_dim(&self) -> usize {
        match self {
            Encoder::Projection { proj, .. } => proj.in_dim,
            LandmarkSet(l) => l.token_count * l.token_dim,
            Encoder::State { .. } => 1,
        }
    }

    pub fn norm(&self) -> Option<&BatchNorm> {
        match self {
            Encoder::Projection { norm, .. } => Some(norm),
            LandmarkSet(l) => Some(&l.norm),
            Encoder::State { .. } => None,
        }
    }

    /// Encodes one slice. `norm` is ignored by state encoders.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        p: &ParamStore,
        buffers: &ParamStore,
        frames: ArrayView2<'_, f64>,
        presence: &[bool],
        side: Option<HandSide>,
        norm: NormSource<'_>,
        dropout: Option<&mut Dropout<'_>>,
    ) -> Result<(Embeddings, EncoderCache)> {
        let rows = frames.nrows();
        if presence.len() != rows {
            return Err(Error::Schema(format!("{rows} frames but {} presence flags", presence.len())));
        }
        if frames.ncols() != self.raw_dim() {
            return Err(Error::Schema(format!(
                "encoder expects {} raw channels, got {}",
                self.raw_dim(),
                frames.ncols()
            )));
        }
        if side.is_some() && !matches!(self, LandmarkSet(LandmarkEncoder { side_embed: Some(_), .. })) {
            return Err(Error::Config("a hand side was given to an encoder without side embeddings".into()));
        }
        let d = self.width(p);
        let present: Vec<usize> = (0..rows).filter(|&t| presence[t]).collect();
        let mut values = Array2::zeros((rows, d));
        if present.is_empty() {
            let cache = EncoderCache { rows, present, inner: CacheInner::Empty };
            return Ok((Embeddings { values, presence: presence.to_vec() }, cache));
        }
        let x = frames.select(Axis(0), &present);
        let (out, inner) = match self {
            Encoder::Projection { norm: bn, proj } => {
                let xhat = bn.standardize(buffers, x.view(), norm);
                let normed = bn.affine(p, &xhat);
                let out = proj.forward(p, normed.view());
                (out, CacheInner::Projection { xhat, normed })
            }
            LandmarkSet(l) => {
                let xhat = l.norm.standardize(buffers, x.view(), norm);
                let normed = l.norm.affine(p, &xhat);
                let k = l.token_count;
                let tokens = normed
                    .into_shape_with_order((present.len() * k, l.token_dim))
                    .expect("row-major token layout");
                let mut h = l.proj.forward(p, tokens.view());
                let embed = p.mat(l.token_embed);
                for mut frame in h.axis_chunks_iter_mut(Axis(0), k) {
                    frame += &embed;
                }
                if let (Some(side), Some(table)) = (side, l.side_embed) {
                    h += &p.mat(table).row(side.index());
                }
                let (y, stack) = l.stack.forward(p, h, AttnLayout::Grouped(k), dropout)?;
                let pooled = y
                    .into_shape_with_order((present.len(), k, d))
                    .expect("token layout")
                    .mean_axis(Axis(1))
                    .expect("non-empty token set");
                (pooled, CacheInner::Landmark { xhat, tokens_in: tokens, stack, side })
            }
            Encoder::State { table, state_count } => {
                let mut states = Vec::with_capacity(present.len());
                for (i, &t) in present.iter().enumerate() {
                    let v = x[[i, 0]];
                    if !(v >= 0.0 && v.fract() == 0.0 && (v as usize) < *state_count) {
                        return Err(Error::Data(format!("frame {t}: state {v} outside 0..{state_count}")));
                    }
                    states.push(v as usize);
                }
                let table = p.mat(*table);
                let out = table.select(Axis(0), &states);
                (out, CacheInner::State { states })
            }
        };
        for (i, &t) in present.iter().enumerate() {
            values.row_mut(t).assign(&out.row(i));
        }
        Ok((
            Embeddings { values, presence: presence.to_vec() },
            EncoderCache { rows, present, inner },
        ))
    }

    /// Accumulates parameter gradients given the gradient of the output rows.
    pub fn backward(&self, p: &ParamStore, g: &mut ParamStore, cache: &EncoderCache, d_values: ArrayView2<'_, f64>) {
        debug_assert_eq!(d_values.nrows(), cache.rows);
        if cache.present.is_empty() {
            return;
        }
        let dy = d_values.select(Axis(0), &cache.present);
        match (self, &cache.inner) {
            (Encoder::Projection { norm, proj }, CacheInner::Projection { xhat, normed }) => {
                let d_normed = proj.backward(p, g, normed.view(), dy.view());
                norm.backward(g, xhat, d_normed.view());
            }
            (LandmarkSet(l), CacheInner::Landmark { xhat, tokens_in, stack, side }) => {
                let k = l.token_count;
                let d = dy.ncols();
                let frames = cache.present.len();
                let mut d_tokens = Array2::zeros((frames * k, d));
                for (f, row) in dy.rows().into_iter().enumerate() {
                    let mut block = d_tokens.slice_mut(s![f * k..(f + 1) * k, ..]);
                    block += &(&row / k as f64);
                }
                let d_h = l.stack.backward(p, g, stack, d_tokens.view());
                {
                    let mut ge = g.mat_mut(l.token_embed);
                    for frame in d_h.axis_chunks_iter(Axis(0), k) {
                        ge += &frame;
                    }
                }
                if let (Some(table), Some(side)) = (l.side_embed, side) {
                    let mut gs = g.mat_mut(table);
                    let mut row = gs.row_mut(side.index());
                    row += &d_h.sum_axis(Axis(0));
                }
                let d_tokens_in = l.proj.backward(p, g, tokens_in.view(), d_h.view());
                let d_normed = d_tokens_in
                    .into_shape_with_order((frames, k * l.token_dim))
                    .expect("token layout");
                l.norm.backward(g, xhat, d_normed.view());
            }
            (Encoder::State { table, .. }, CacheInner::State { states }) => {
                let mut gt = g.mat_mut(*table);
                for (row, &s) in dy.rows().into_iter().zip(states) {
                    let mut target = gt.row_mut(s);
                    target += &row;
                }
            }
            _ => unreachable!("cache does not match encoder"),
        }
    }

    fn width(&self, p: &ParamStore) -> usize {
        match self {
            Encoder::Projection { proj, .. } => proj.out_dim,
            LandmarkSet(l) => l.proj.out_dim,
            Encoder::State { table, .. } => p.tensor(*table).shape[1],
        }
    }
}

use Encoder::LandmarkSet;
