//! The full classifier: modality encoders, condition table, fractional
//! positions and the fusion transformer, with a hand-written backward pass.

use std::fmt::Write as _;
use std::sync::{Arc, Mutex};

use ndarray::{s, Axis};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::datamodel::{validate_config, ModalityDescriptor};
use crate::encoders::{Encoder, EncoderCache, EncoderConfig, NormSource, NormStats, BATCH_NORM_MOMENTUM};
use crate::error::{Error, Result};
use crate::fusion::{
    classification_loss, concat_modalities, loss_gradient, AugmentedBlock, FusionCache, FusionParams, Prediction,
};
use crate::nn::Dropout;
use crate::params::{Init, ParamId, ParamStore};
use crate::positioning::{apply_conditions, build_sinusoidal_table, PositionTable};
use crate::rng::derived_rng;

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub dropout: f64,
    pub token_layers: usize,
    pub token_heads: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            layers: 8,
            heads: 8,
            ff_mult: 4,
            dropout: 0.1,
            token_layers: 2,
            token_heads: 8,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % 2 == 1 {
            return Err(Error::Config(format!("d_model must be even and positive, got {}", self.d_model)));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("{} heads do not divide d_model {}", self.heads, self.d_model)));
        }
        if self.token_heads == 0 || !self.d_model.is_multiple_of(self.token_heads) {
            return Err(Error::Config(format!(
                "{} token heads do not divide d_model {}",
                self.token_heads, self.d_model
            )));
        }
        if self.ff_mult == 0 {
            return Err(Error::Config("ff_mult must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config(format!("init_std {} must be positive", self.init_std)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            d_model: self.d_model,
            token_layers: self.token_layers,
            token_heads: self.token_heads,
            ff_mult: self.ff_mult,
            init_std: self.init_std,
        }
    }
}

/// Options for one gradient computation.
#[derive(Debug, Clone, Default)]
pub struct GradientOptions {
    /// Loss weight per class; `None` weighs every window equally.
    pub class_weights: Option<[f64; 2]>,
    /// One dropout seed per window; `None` disables dropout.
    pub dropout_seeds: Option<Vec<u64>>,
}

#[derive(Debug, Clone)]
pub struct BatchGradients {
    /// Gradient of the mean loss.
    pub grads: ParamStore,
    pub loss: f64,
    /// Normalization statistics of the batch, one slot per encoder.
    pub stats: Vec<Option<NormStats>>,
    pub predictions: Vec<Prediction>,
}

#[derive(Debug, Clone)]
pub struct WindowCache {
    encoders: Vec<EncoderCache>,
    lengths: Vec<usize>,
    order: Vec<usize>,
    fusion: FusionCache,
}

#[derive(Debug, Default)]
struct PositionCache(Mutex<Option<Arc<PositionTable>>>);

impl Clone for PositionCache {
    fn clone(&self) -> Self {
        Self::default()
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub modalities: Vec<ModalityDescriptor>,
    pub params: ParamStore,
    /// Running normalization statistics; not trained by gradient.
    pub buffers: ParamStore,
    encoders: Vec<Encoder>,
    encoder_names: Vec<String>,
    encoder_of: Vec<usize>,
    conditions: ParamId,
    fusion: FusionParams,
    positions: PositionCache,
}

/// Name of the encoder shared by both hands.
pub const HAND_ENCODER: &str = "hands";

impl Model {
    pub fn new(modalities: Vec<ModalityDescriptor>, config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        validate_config(&modalities)?;
        let mut rng = derived_rng(seed, &["init".into()]);
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let enc_cfg = config.encoder_config();
        let mut encoders = Vec::new();
        let mut encoder_names: Vec<String> = Vec::new();
        let mut encoder_of = Vec::with_capacity(modalities.len());
        for desc in &modalities {
            let name = if desc.side.is_some() { HAND_ENCODER } else { desc.name.as_str() };
            if let Some(i) = encoder_names.iter().position(|n| n == name) {
                encoder_of.push(i);
                continue;
            }
            let enc = Encoder::new(
                &mut params,
                &mut buffers,
                &mut rng,
                &format!("encoder.{name}"),
                desc.kind,
                desc.raw_dim,
                desc.side.is_some(),
                &enc_cfg,
            )?;
            encoder_of.push(encoders.len());
            encoders.push(enc);
            encoder_names.push(name.to_string());
        }
        let conditions = params.add("conditions", &[modalities.len(), config.d_model], Init::Normal(config.init_std), &mut rng);
        let fusion = FusionParams::new(
            &mut params,
            &mut rng,
            "fusion",
            config.d_model,
            config.layers,
            config.heads,
            config.ff_mult * config.d_model,
            config.init_std,
        )?;
        params.round_to_f32();
        Ok(Self {
            config,
            modalities,
            params,
            buffers,
            encoders,
            encoder_names,
            encoder_of,
            conditions,
            fusion,
            positions: PositionCache::default(),
        })
    }

    pub fn encoder_names(&self) -> &[String] {
        &self.encoder_names
    }

    pub fn conditions(&self) -> ParamId {
        self.conditions
    }

    pub fn fusion(&self) -> &FusionParams {
        &self.fusion
    }

    /// SHA-256 over the architecture and the modality configuration.
    pub fn fingerprint(&self) -> [u8; 32] {
        config_fingerprint(&self.config, &self.modalities)
    }

    /// Replaces parameters and running statistics, checking their layout.
    pub fn load_state(&mut self, params: ParamStore, buffers: ParamStore) -> Result<()> {
        self.params.check_layout(&params, "parameters")?;
        self.buffers.check_layout(&buffers, "buffers")?;
        self.params = params;
        self.buffers = buffers;
        Ok(())
    }

    fn position_table(&self, max_len: usize) -> Result<Arc<PositionTable>> {
        let mut slot = self.positions.0.lock().expect("position cache poisoned");
        if let Some(table) = slot.as_ref().filter(|t| t.max_len() == max_len) {
            return Ok(Arc::clone(table));
        }
        let table = Arc::new(build_sinusoidal_table(max_len, self.config.d_model)?);
        *slot = Some(Arc::clone(&table));
        Ok(table)
    }

    /// Inference-mode prediction for one window.
    pub fn predict_window(&self, window: &crate::windowing::Window) -> Result<Prediction> {
        Ok(self.forward(window, None, None, None)?.0)
    }

    /// Inference-mode prediction with modality blocks concatenated in `order`.
    pub fn predict_with_order(&self, window: &crate::windowing::Window, order: &[usize]) -> Result<Prediction> {
        Ok(self.forward(window, None, None, Some(order))?.0)
    }

    /// Forward pass. `stats` selects batch statistics (training) instead of
    /// running statistics; `dropout` enables dropout with the given stream.
    pub fn forward(
        &self,
        window: &crate::windowing::Window,
        stats: Option<&[Option<NormStats>]>,
        dropout: Option<&mut ChaCha8Rng>,
        order: Option<&[usize]>,
    ) -> Result<(Prediction, WindowCache)> {
        let d = self.config.d_model;
        let slices = self
            .modalities
            .iter()
            .map(|m| {
                window
                    .slice(&m.name)
                    .ok_or_else(|| Error::Schema(format!("window of {} lacks modality {}", window.record_id, m.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        let max_len = slices.iter().map(|s| s.len()).max().unwrap_or(0);
        if max_len == 0 {
            return Err(Error::EmptyWindow);
        }
        let positions = self.position_table(max_len)?;
        let mut dropout = match dropout {
            Some(rng) if self.config.dropout > 0.0 => Some(Dropout { rate: self.config.dropout, rng }),
            _ => None,
        };
        let conditions = self.params.mat(self.conditions);
        let mut blocks = Vec::with_capacity(slices.len());
        let mut caches = Vec::with_capacity(slices.len());
        for (j, (desc, slice)) in self.modalities.iter().zip(&slices).enumerate() {
            let e = self.encoder_of[j];
            let source = match stats.and_then(|s| s[e].as_ref()) {
                Some(st) => NormSource::Batch(st),
                None => NormSource::Running,
            };
            let (emb, cache) = self.encoders[e].forward(
                &self.params,
                &self.buffers,
                slice.frames.view(),
                &slice.presence,
                desc.side,
                source,
                dropout.as_mut(),
            )?;
            let mut values = emb.values;
            let indices = apply_conditions(&mut values.view_mut(), conditions.row(j), &positions)?;
            blocks.push(AugmentedBlock { values, presence: emb.presence, positions: indices });
            caches.push(cache);
        }
        let natural: Vec<usize> = (0..blocks.len()).collect();
        let order = order.unwrap_or(&natural).to_vec();
        let fused = concat_modalities(&blocks, &order)?;
        debug_assert_eq!(fused.values.ncols(), d);
        let (pred, fusion) = self.fusion.forward(&self.params, &fused, window.start_seconds, dropout.as_mut())?;
        let lengths = blocks.iter().map(|b| b.values.nrows()).collect();
        Ok((pred, WindowCache { encoders: caches, lengths, order, fusion }))
    }

    /// Accumulates the gradient of a loss whose logit gradient is `d_logits`.
    pub fn backward(&self, g: &mut ParamStore, cache: &WindowCache, d_logits: [f64; 2]) {
        let d_fused = self.fusion.backward(&self.params, g, &cache.fusion, d_logits);
        let mut offset = 0;
        for &j in &cache.order {
            let n = cache.lengths[j];
            let block = d_fused.slice(s![offset..offset + n, ..]);
            offset += n;
            {
                let mut gc = g.mat_mut(self.conditions);
                let mut row = gc.row_mut(j);
                row += &block.sum_axis(Axis(0));
            }
            self.encoders[self.encoder_of[j]].backward(&self.params, g, &cache.encoders[j], block);
        }
    }

    /// Per-encoder statistics over the present frames of every window.
    pub fn batch_statistics(&self, windows: &[&crate::windowing::Window]) -> Result<Vec<Option<NormStats>>> {
        let mut out = Vec::with_capacity(self.encoders.len());
        for (e, enc) in self.encoders.iter().enumerate() {
            let Some(norm) = enc.norm() else {
                out.push(None);
                continue;
            };
            let mut parts = Vec::new();
            for (j, desc) in self.modalities.iter().enumerate() {
                if self.encoder_of[j] != e {
                    continue;
                }
                for w in windows {
                    let slice = w
                        .slice(&desc.name)
                        .ok_or_else(|| Error::Schema(format!("window of {} lacks modality {}", w.record_id, desc.name)))?;
                    parts.push((slice.frames.view(), slice.presence.as_slice()));
                }
            }
            let any = parts.iter().any(|(_, p)| p.iter().any(|&x| x));
            out.push(if any { Some(NormStats::from_frames(parts, norm.channels)?) } else { None });
        }
        Ok(out)
    }

    /// Folds batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[Option<NormStats>]) {
        for (enc, st) in self.encoders.iter().zip(stats) {
            if let (Some(norm), Some(st)) = (enc.norm(), st) {
                norm.update_running(&mut self.buffers, st, BATCH_NORM_MOMENTUM);
            }
        }
        self.buffers.round_to_f32();
    }

    fn window_weight(&self, label: u8, opts: &GradientOptions) -> f64 {
        opts.class_weights.map_or(1.0, |w| w[label as usize])
    }

    /// Mean (optionally class-weighted) loss of a batch in training mode,
    /// without gradients.
    pub fn batch_loss(&self, windows: &[&crate::windowing::Window], opts: &GradientOptions) -> Result<f64> {
        let stats = self.batch_statistics(windows)?;
        let mut total = 0.0;
        for (i, w) in windows.iter().enumerate() {
            let mut rng = opts.dropout_seeds.as_ref().map(|s| derived_rng(s[i], &[]));
            let (pred, _) = self.forward(w, Some(&stats), rng.as_mut(), None)?;
            total += self.window_weight(w.label, opts) * classification_loss(pred.logits, w.label)?;
        }
        Ok(total / windows.len() as f64)
    }

    /// Gradient of the mean batch loss. Windows are processed in parallel;
    /// their gradients are summed in batch order.
    pub fn compute_gradients(&self, windows: &[&crate::windowing::Window], opts: &GradientOptions) -> Result<BatchGradients> {
        if windows.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        if let Some(seeds) = &opts.dropout_seeds {
            if seeds.len() != windows.len() {
                return Err(Error::Contract("one dropout seed per window required".into()));
            }
        }
        let stats = self.batch_statistics(windows)?;
        let n = windows.len() as f64;
        let per_window = windows
            .par_iter()
            .enumerate()
            .map(|(i, w)| {
                let mut rng = opts.dropout_seeds.as_ref().map(|s| derived_rng(s[i], &[]));
                let (pred, cache) = self.forward(w, Some(&stats), rng.as_mut(), None)?;
                let loss = classification_loss(pred.logits, w.label)
                    .map_err(|e| Error::Numeric(format!("record {}: {e}", w.record_id)))?;
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!("record {}: non-finite loss", w.record_id)));
                }
                let weight = self.window_weight(w.label, opts) / n;
                let mut d_logits = loss_gradient(&pred, w.label);
                d_logits.iter_mut().for_each(|v| *v *= weight);
                let mut g = self.params.zeros_like();
                self.backward(&mut g, &cache, d_logits);
                Ok((g, weight * loss, pred))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut grads = self.params.zeros_like();
        let mut loss = 0.0;
        let mut predictions = Vec::with_capacity(windows.len());
        for (g, l, pred) in per_window {
            grads.add_scaled(&g, 1.0);
            loss += l;
            predictions.push(pred);
        }
        Ok(BatchGradients { grads, loss, stats, predictions })
    }
}

/// Canonical text of everything that determines parameter layout.
pub fn canonical_config(config: &ModelConfig, modalities: &[ModalityDescriptor]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "model d={} layers={} heads={} ff_mult={} token_layers={} token_heads={}",
        config.d_model, config.layers, config.heads, config.ff_mult, config.token_layers, config.token_heads
    );
    for m in modalities {
        let _ = writeln!(
            out,
            "modality {} rate={} raw_dim={} kind={:?} side={:?} variable_rate={}",
            m.name, m.rate, m.raw_dim, m.kind, m.side, m.variable_rate
        );
    }
    out
}

pub fn config_fingerprint(config: &ModelConfig, modalities: &[ModalityDescriptor]) -> [u8; 32] {
    Sha256::digest(canonical_config(config, modalities).as_bytes()).into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

