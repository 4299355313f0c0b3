//! Fixed-duration windows across all modalities of a record.
//!
//! A window covering `[start, start + duration)` takes, for each modality at
//! rate `r`, the rows `floor(start * r) .. floor(start * r) + floor(r * duration)`.
//! Training windows are drawn at random (optionally gated on one modality's
//! presence); evaluation windows tile the record from time zero.

use ndarray::{s, Array2};
use rand::Rng;

use crate::datamodel::VideoRecord;
use crate::error::{Error, Result};

/// Draws tried before a training sample settles for the best gate ratio seen.
pub const TRAINING_RETRY_BUDGET: usize = 20;

/// `floor(x)`, except that values within rounding noise of an integer snap to
/// it, so `100 * 0.29` counts as 29 frames and not 28.
pub(crate) fn snap_floor(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.abs().max(1.0) {
        r
    } else {
        x.floor()
    }
}

/// Number of frames a modality at `rate` contributes to a window.
pub fn frames_in_window(rate: f64, duration: f64) -> Result<usize> {
    if !(rate > 0.0 && rate.is_finite() && duration > 0.0 && duration.is_finite()) {
        return Err(Error::Contract(format!(
            "rate ({rate}) and duration ({duration}) must be positive"
        )));
    }
    let n = snap_floor(rate * duration) as usize;
    if n == 0 {
        return Err(Error::DegenerateWindow(format!(
            "a {duration}s window holds no frame at {rate} fps"
        )));
    }
    Ok(n)
}

/// One modality's share of a window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSlice {
    pub modality: String,
    pub rate: f64,
    pub frames: Array2<f64>,
    pub presence: Vec<bool>,
}

impl WindowSlice {
    pub fn len(&self) -> usize {
        self.presence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.presence.is_empty()
    }

    pub fn presence_ratio(&self) -> f64 {
        if self.presence.is_empty() {
            return 0.0;
        }
        self.presence.iter().filter(|&&p| p).count() as f64 / self.presence.len() as f64
    }
}

/// A fixed-duration slice of one record across every modality, in the
/// record's modality order.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub record_id: String,
    pub label: u8,
    pub start_seconds: f64,
    pub duration_seconds: f64,
    pub slices: Vec<WindowSlice>,
}

impl Window {
    /// Total frame count over all modalities.
    pub fn fused_len(&self) -> usize {
        self.slices.iter().map(WindowSlice::len).sum()
    }

    pub fn slice(&self, modality: &str) -> Option<&WindowSlice> {
        self.slices.iter().find(|s| s.modality == modality)
    }

    pub fn present_frames(&self) -> usize {
        self.slices
            .iter()
            .map(|s| s.presence.iter().filter(|&&p| p).count())
            .sum()
    }
}

/// Cuts the window `[start, start + duration)` out of `record`.
///
/// Modalities too slow to hold a single frame in `duration` get an empty
/// slice; callers that need at least one frame per modality check that with
/// [`frames_in_window`].
pub fn cut_window(record: &VideoRecord, start: f64, duration: f64) -> Result<Window> {
    if !(start >= 0.0 && duration > 0.0) {
        return Err(Error::Contract(format!("bad window [{start}, {start}+{duration})")));
    }
    let mut slices = Vec::with_capacity(record.streams.len());
    for stream in &record.streams {
        let rate = stream.rate();
        let count = snap_floor(rate * duration) as usize;
        let mut first = snap_floor(start * rate) as usize;
        let total = stream.len();
        if first + count > total {
            // Float slack at the very end of a record; anything larger is a
            // caller error.
            if first + count > total + 1 || count > total {
                return Err(Error::Contract(format!(
                    "window [{start}, {}) exceeds stream {} of record {} ({} frames)",
                    start + duration,
                    stream.descriptor.name,
                    record.id,
                    total
                )));
            }
            first = total - count;
        }
        let frames = stream
            .frames()
            .slice(s![first..first + count, ..])
            .mapv(|v| v as f64);
        slices.push(WindowSlice {
            modality: stream.descriptor.name.clone(),
            rate,
            frames,
            presence: stream.presence()[first..first + count].to_vec(),
        });
    }
    Ok(Window {
        record_id: record.id.clone(),
        label: record.label,
        start_seconds: start,
        duration_seconds: duration,
        slices,
    })
}

pub(crate) fn check_fits(record: &VideoRecord, duration: f64) -> Result<f64> {
    let span = record.span_seconds();
    if span + 1e-9 * span.max(1.0) < duration {
        return Err(Error::TooShort {
            record: record.id.clone(),
            span_seconds: span,
            window_seconds: duration,
        });
    }
    for stream in &record.streams {
        frames_in_window(stream.rate(), duration)?;
    }
    Ok(span)
}

/// Fraction of present frames of `modality` in `window`.
pub fn window_presence_ratio(window: &Window, modality: &str) -> Result<f64> {
    window
        .slice(modality)
        .map(WindowSlice::presence_ratio)
        .ok_or_else(|| Error::Schema(format!("window has no modality {modality:?}")))
}

/// A randomly drawn training window with its gate bookkeeping.
#[derive(Debug, Clone)]
pub struct SampledWindow {
    pub window: Window,
    /// Presence ratio of the gate modality, when gating is enabled.
    pub gate_ratio: Option<f64>,
    /// Set when the retry budget ran out and the best draw is still below the
    /// threshold.
    pub below_threshold: bool,
    pub draws: usize,
}

/// Draws a window with a uniformly distributed start time.
///
/// With a gate modality, draws are retried until the gate's presence ratio
/// reaches `threshold`, up to [`TRAINING_RETRY_BUDGET`] draws.
pub fn sample_training_window<R: Rng + ?Sized>(
    record: &VideoRecord,
    duration: f64,
    threshold: f64,
    gate_modality: Option<&str>,
    rng: &mut R,
) -> Result<SampledWindow> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("presence threshold {threshold} outside [0, 1]")));
    }
    if let Some(gate) = gate_modality {
        if record.stream(gate).is_none() {
            return Err(Error::Schema(format!("gate modality {gate:?} not in record {}", record.id)));
        }
    }
    let span = check_fits(record, duration)?;
    let room = (span - duration).max(0.0);
    let mut best: Option<(Window, f64)> = None;
    for draw in 1..=TRAINING_RETRY_BUDGET {
        let start = rng.random::<f64>() * room;
        let window = cut_window(record, start, duration)?;
        let Some(gate) = gate_modality else {
            return Ok(SampledWindow {
                window,
                gate_ratio: None,
                below_threshold: false,
                draws: draw,
            });
        };
        let ratio = window_presence_ratio(&window, gate)?;
        if ratio >= threshold {
            return Ok(SampledWindow {
                window,
                gate_ratio: Some(ratio),
                below_threshold: false,
                draws: draw,
            });
        }
        if best.as_ref().is_none_or(|(_, r)| ratio > *r) {
            best = Some((window, ratio));
        }
    }
    let (window, ratio) = best.expect("retry budget is positive");
    Ok(SampledWindow {
        window,
        gate_ratio: Some(ratio),
        below_threshold: true,
        draws: TRAINING_RETRY_BUDGET,
    })
}

/// Start times of the sequential non-overlapping windows of a span.
pub fn eval_window_starts(span: f64, duration: f64) -> Vec<f64> {
    let n = snap_floor(span / duration) as usize;
    (0..n).map(|k| k as f64 * duration).collect()
}

/// Non-overlapping windows at starts `0, d, 2d, ...` in temporal order; the
/// trailing remainder shorter than `duration` is dropped.
pub fn enumerate_eval_windows(record: &VideoRecord, duration: f64) -> Result<Vec<Window>> {
    let span = check_fits(record, duration)?;
    eval_window_starts(span, duration)
        .into_iter()
        .map(|start| cut_window(record, start, duration))
        .collect()
}
