//! Finite-difference check of the analytic gradients on a toy model.

use ndarray::Array2;
use rand::Rng;

use crate::datamodel::{HandSide, ModalityDescriptor, ModalityStream, Split, VideoRecord};
use crate::error::Result;
use crate::model::{GradientOptions, Model, ModelConfig};
use crate::rng::derived_rng;
use crate::windowing::{cut_window, Window};

/// Seconds covered by each toy window.
pub const TOY_WINDOW_SECONDS: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    /// Minimum number of sampled scalars; every tensor gets at least one.
    pub samples: usize,
    pub epsilon: f64,
    pub tolerance: f64,
    /// Gradients smaller than this are compared in absolute terms.
    pub floor: f64,
    pub seed: u64,
    /// Negates one tensor's analytic gradient, to show the check can fail.
    pub corrupt: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { samples: 256, epsilon: 1e-3, tolerance: 1e-4, floor: 1e-3, seed: 0, corrupt: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: String,
    /// Number of position-table entries among the learnable leaves (always
    /// zero: the table is rebuilt from its closed form on every pass).
    pub position_leaves: usize,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn summary(&self) -> String {
        format!(
            "{} parameters in {} tensors, max relative error {:.3e} at {} ({})",
            self.checked,
            self.groups.len(),
            self.max_rel_error,
            self.worst,
            if self.passed { "pass" } else { "FAIL" }
        )
    }
}

/// Toy modalities: audio-like projection, two hands sharing one landmark
/// encoder and a blink state stream.
pub fn toy_modalities() -> Vec<ModalityDescriptor> {
    vec![
        ModalityDescriptor::projection("audio", 6.0, 3),
        ModalityDescriptor::landmark_set("hand_left", 3.0, 3, 2).with_side(HandSide::Left),
        ModalityDescriptor::landmark_set("hand_right", 3.0, 3, 2).with_side(HandSide::Right),
        ModalityDescriptor::state("blink", 3.0, 2),
    ]
}

pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        layers: 2,
        heads: 2,
        ff_mult: 2,
        dropout: 0.0,
        token_layers: 1,
        token_heads: 2,
        init_std: 0.3,
    }
}

fn toy_record<R: Rng>(rng: &mut R, id: &str, label: u8) -> Result<VideoRecord> {
    let mut streams = Vec::new();
    for desc in toy_modalities() {
        let n = (desc.rate * TOY_WINDOW_SECONDS) as usize;
        let presence: Vec<bool> = (0..n).map(|t| t == 0 || rng.random::<f64>() > 0.25).collect();
        let frames = Array2::from_shape_fn((n, desc.raw_dim), |(t, _)| {
            if !presence[t] {
                0.0
            } else if desc.name == "blink" {
                f32::from(rng.random::<bool>())
            } else {
                rng.random::<f32>() * 2.0 - 1.0
            }
        });
        streams.push(ModalityStream::new(desc, frames, presence)?);
    }
    VideoRecord::new(id, label, Split::Train, streams)
}

/// Two toy windows with labels 0 and 1 (30 fused rows each).
pub fn toy_batch(seed: u64) -> Result<Vec<Window>> {
    let mut rng = derived_rng(seed, &["toy-batch".into()]);
    (0..2u8)
        .map(|label| {
            let record = toy_record(&mut rng, &format!("toy{label}"), label)?;
            cut_window(&record, 0.0, TOY_WINDOW_SECONDS)
        })
        .collect()
}

/// Compares analytic gradients of the mean batch loss with central
/// differences `(L(p + e) - L(p - e)) / 2e` over sampled scalars.
///
/// The error of one scalar is `|a - n| / max(|a|, |n|, floor)`.
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut model = Model::new(toy_modalities(), toy_model_config(), cfg.seed)?;
    let windows = toy_batch(cfg.seed)?;
    let refs: Vec<&Window> = windows.iter().collect();
    let opts = GradientOptions::default();
    let mut grads = model.compute_gradients(&refs, &opts)?.grads;
    if cfg.corrupt {
        let id = grads
            .find("fusion.encoder.layer0.ff_up.weight")
            .expect("toy model has a fusion feed-forward layer");
        grads.tensor_mut(id).data.iter_mut().for_each(|g| *g = -*g);
    }

    let mut rng = derived_rng(cfg.seed, &["grad-check".into()]);
    let tensors = model.params.len();
    let mut picks: Vec<(usize, usize)> = (0..tensors)
        .map(|t| (t, rng.random_range(0..model.params.tensors()[t].numel())))
        .collect();
    let total = model.params.numel();
    while picks.len() < cfg.samples.max(tensors) {
        let mut flat = rng.random_range(0..total);
        let mut t = 0;
        while flat >= model.params.tensors()[t].numel() {
            flat -= model.params.tensors()[t].numel();
            t += 1;
        }
        picks.push((t, flat));
    }

    let mut groups: Vec<GroupReport> = model
        .params
        .tensors()
        .iter()
        .map(|t| GroupReport { name: t.name.clone(), checked: 0, max_rel_error: 0.0 })
        .collect();
    let (mut max_rel, mut worst) = (0.0f64, String::new());
    for &(t, i) in &picks {
        let orig = model.params.tensors()[t].data[i];
        model.params.tensors_mut()[t].data[i] = orig + cfg.epsilon;
        let plus = model.batch_loss(&refs, &opts)?;
        model.params.tensors_mut()[t].data[i] = orig - cfg.epsilon;
        let minus = model.batch_loss(&refs, &opts)?;
        model.params.tensors_mut()[t].data[i] = orig;
        let numeric = (plus - minus) / (2.0 * cfg.epsilon);
        let analytic = grads.tensors()[t].data[i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(cfg.floor);
        let group = &mut groups[t];
        group.checked += 1;
        group.max_rel_error = group.max_rel_error.max(rel);
        if rel > max_rel || worst.is_empty() {
            max_rel = rel.max(max_rel);
            worst = format!("{}[{i}]", group.name);
        }
    }
    let position_leaves = model
        .params
        .tensors()
        .iter()
        .filter(|t| t.name.contains("position"))
        .count();
    Ok(GradCheckReport {
        groups,
        checked: picks.len(),
        max_rel_error: max_rel,
        worst,
        position_leaves,
        passed: max_rel <= cfg.tolerance,
    })
}
