//! Synthetic multi-rate datasets with a planted class cue.
//!
//! Every record carries Gaussian background noise on projection channels,
//! jittered keypoint grids on landmark streams and rare blink states. For
//! class-1 records a constant shift is added to the first `channels`
//! channels of a seeded random fraction of the present frames of the cue
//! modality. Presence dropout comes in bursts.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::datamodel::{
    synth_modalities, write_stream_file, DatasetManifest, EncoderKind, ModalityDescriptor, ModalityStream, RecordEntry,
    Split,
};
use crate::error::{Error, Result};
use crate::rng::derived_rng;

/// Name of the manifest written next to the generated records.
pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Debug, Clone, PartialEq)]
pub struct CueSpec {
    pub modality: String,
    /// Shift added to each cue channel; 0 gives a no-signal dataset.
    pub magnitude: f64,
    /// Fraction of present frames that carry the shift.
    pub fraction: f64,
    /// Number of leading channels that are shifted.
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PresenceDropout {
    /// Long-run fraction of absent frames.
    pub rate: f64,
    /// Length of each absent burst.
    pub burst_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub min_seconds: f64,
    pub max_seconds: f64,
    pub modalities: Vec<ModalityDescriptor>,
    pub cue: CueSpec,
    /// Dropout per modality name; modalities not listed are always present.
    pub dropout: Vec<(String, PresenceDropout)>,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let burst = |rate| PresenceDropout { rate, burst_seconds: 1.5 };
        Self {
            n_train: 24,
            n_val: 4,
            n_test: 24,
            min_seconds: 30.0,
            max_seconds: 60.0,
            modalities: synth_modalities(),
            cue: CueSpec { modality: "face".into(), magnitude: 1.5, fraction: 0.5, channels: 8 },
            dropout: vec![
                ("audio".into(), burst(0.05)),
                ("face".into(), burst(0.15)),
                ("face_landmarks".into(), burst(0.15)),
                ("blink".into(), burst(0.15)),
            ],
            noise: 1.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        crate::datamodel::validate_config(&self.modalities)?;
        if !(self.min_seconds > 0.0 && self.min_seconds <= self.max_seconds && self.max_seconds.is_finite()) {
            return Err(Error::Config(format!(
                "duration range {}..{} is invalid",
                self.min_seconds, self.max_seconds
            )));
        }
        let Some(target) = self.modalities.iter().find(|m| m.name == self.cue.modality) else {
            return Err(Error::Config(format!("cue modality {:?} is not configured", self.cue.modality)));
        };
        if target.kind != EncoderKind::Projection {
            return Err(Error::Config(format!("cue modality {:?} must be a projection stream", target.name)));
        }
        if self.cue.channels == 0 || self.cue.channels > target.raw_dim {
            return Err(Error::Config(format!(
                "cue channels {} outside 1..={}",
                self.cue.channels, target.raw_dim
            )));
        }
        if !(self.cue.magnitude >= 0.0 && self.cue.magnitude.is_finite()) {
            return Err(Error::Config(format!("cue magnitude {} must be non-negative", self.cue.magnitude)));
        }
        if !(0.0..=1.0).contains(&self.cue.fraction) {
            return Err(Error::Config(format!("cue fraction {} outside [0, 1]", self.cue.fraction)));
        }
        for (name, d) in &self.dropout {
            if !self.modalities.iter().any(|m| &m.name == name) {
                return Err(Error::Config(format!("dropout for unknown modality {name:?}")));
            }
            if !(0.0..1.0).contains(&d.rate) || d.burst_seconds.is_nan() || d.burst_seconds <= 0.0 {
                return Err(Error::Config(format!("dropout for {name:?} needs rate in [0, 1) and a positive burst")));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise scale {} must be non-negative", self.noise)));
        }
        Ok(())
    }

    pub fn dropout_for(&self, modality: &str) -> Option<&PresenceDropout> {
        self.dropout.iter().find(|(n, _)| n == modality).map(|(_, d)| d)
    }
}

/// Bursty presence flags: absent runs of `burst` frames start so that the
/// long-run absent fraction is `rate`.
pub fn bursty_presence<R: Rng + ?Sized>(frames: usize, rate: f64, burst_frames: usize, rng: &mut R) -> Vec<bool> {
    if rate <= 0.0 {
        return vec![true; frames];
    }
    let burst = burst_frames.max(1);
    let start = (rate / (burst as f64 * (1.0 - rate))).min(1.0);
    let mut out = Vec::with_capacity(frames);
    let mut remaining = 0usize;
    for _ in 0..frames {
        if remaining == 0 && rng.random::<f64>() < start {
            remaining = burst;
        }
        if remaining > 0 {
            remaining -= 1;
            out.push(false);
        } else {
            out.push(true);
        }
    }
    out
}

/// Adds the cue shift to a random `fraction` of the present frames of a
/// class-1 stream. Class-0 streams are returned unchanged.
pub fn plant_cue<R: Rng + ?Sized>(stream: ModalityStream, label: u8, cue: &CueSpec, rng: &mut R) -> Result<ModalityStream> {
    if label == 0 || cue.magnitude == 0.0 {
        return Ok(stream);
    }
    let (descriptor, rate, mut frames, presence) = stream.into_parts();
    let channels = cue.channels.min(frames.ncols());
    for (mut row, &present) in frames.rows_mut().into_iter().zip(&presence) {
        if present && rng.random::<f64>() < cue.fraction {
            row.iter_mut().take(channels).for_each(|v| *v += cue.magnitude as f32);
        }
    }
    ModalityStream::with_rate(descriptor, rate, frames, presence)
}

fn background<R: Rng + ?Sized>(desc: &ModalityDescriptor, frames: usize, presence: &[bool], noise: f64, rng: &mut R) -> Array2<f32> {
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("finite noise");
    let mut out = Array2::<f32>::zeros((frames, desc.raw_dim));
    for (mut row, &present) in out.rows_mut().into_iter().zip(presence) {
        if !present {
            continue;
        }
        match desc.kind {
            EncoderKind::Projection => {
                row.iter_mut().for_each(|v| *v = if noise > 0.0 { normal.sample(rng) as f32 } else { 0.0 });
            }
            EncoderKind::LandmarkSet { token_count, token_dim } => {
                // Keypoints on a grid inside the unit box with small jitter.
                let side = (token_count as f64).sqrt().ceil() as usize;
                for k in 0..token_count {
                    for c in 0..token_dim {
                        let base = match c {
                            0 => (k % side) as f64 + 0.5,
                            1 => (k / side) as f64 + 0.5,
                            _ => 0.5 * side as f64,
                        } / side as f64;
                        let jitter = 0.02 * (rng.random::<f64>() - 0.5);
                        row[k * token_dim + c] = (base + jitter) as f32;
                    }
                }
            }
            EncoderKind::State { .. } => {
                row[0] = f32::from(rng.random::<f64>() < 0.1);
            }
        }
    }
    out
}

fn record_rng(spec: &SynthSpec, split: Split, index: usize, purpose: &str) -> ChaCha8Rng {
    derived_rng(spec.seed, &["synth".into(), split.to_string().as_str().into(), index.into(), purpose.into()])
}

/// Streams of one synthetic record, in configuration order.
pub fn generate_record(spec: &SynthSpec, split: Split, index: usize, label: u8) -> Result<Vec<ModalityStream>> {
    let mut rng = record_rng(spec, split, index, "duration");
    let seconds = spec.min_seconds + rng.random::<f64>() * (spec.max_seconds - spec.min_seconds);
    spec.modalities
        .iter()
        .map(|desc| {
            let frames = (seconds * desc.rate).floor() as usize;
            let mut rng = record_rng(spec, split, index, &desc.name);
            let presence = match spec.dropout_for(&desc.name) {
                Some(d) => bursty_presence(frames, d.rate, (d.burst_seconds * desc.rate).round() as usize, &mut rng),
                None => vec![true; frames],
            };
            let values = background(desc, frames, &presence, spec.noise, &mut rng);
            let stream = ModalityStream::new(desc.clone(), values, presence)?;
            if desc.name == spec.cue.modality {
                plant_cue(stream, label, &spec.cue, &mut rng)
            } else {
                Ok(stream)
            }
        })
        .collect()
}

pub fn record_id(split: Split, index: usize) -> String {
    format!("{split}_{index:04}")
}

/// Writes every record and `manifest.tsv` under `output_dir`.
pub fn generate_dataset(spec: &SynthSpec, output_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    spec.validate()?;
    let output_dir = output_dir.as_ref();
    std::fs::create_dir_all(output_dir).map_err(|e| Error::io(output_dir, e))?;
    let plan: Vec<(Split, usize)> = [(Split::Train, spec.n_train), (Split::Val, spec.n_val), (Split::Test, spec.n_test)]
        .into_iter()
        .flat_map(|(split, n)| (0..n).map(move |i| (split, i)))
        .collect();
    let records = plan
        .par_iter()
        .map(|&(split, index)| {
            let id = record_id(split, index);
            let label = (index % 2) as u8;
            let streams = generate_record(spec, split, index, label)?;
            let dir = output_dir.join(&id);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let mut paths = Vec::with_capacity(streams.len());
            for stream in &streams {
                let rel = PathBuf::from(&id).join(format!("{}.mmds", stream.descriptor.name));
                write_stream_file(stream, output_dir.join(&rel))?;
                paths.push(rel);
            }
            Ok(RecordEntry { id, label, split, paths })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        records,
        modality_config: spec.modalities.clone(),
        root: output_dir.to_path_buf(),
    };
    manifest.write(output_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn face_stream(frames: usize, presence: Vec<bool>) -> ModalityStream {
        let desc = ModalityDescriptor::projection("face", 25.0, 4);
        let values = Array2::from_shape_fn((frames, 4), |(t, c)| if presence[t] { (t + c) as f32 * 0.01 } else { 0.0 });
        ModalityStream::new(desc, values, presence).unwrap()
    }

    #[test]
    fn label_zero_is_untouched() {
        let s = face_stream(10, vec![true; 10]);
        let cue = CueSpec { modality: "face".into(), magnitude: 2.0, fraction: 1.0, channels: 2 };
        let out = plant_cue(s.clone(), 0, &cue, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn full_fraction_shifts_every_present_row() {
        let presence: Vec<bool> = (0..20).map(|t| t % 4 != 0).collect();
        let s = face_stream(20, presence.clone());
        let cue = CueSpec { modality: "face".into(), magnitude: 0.75, fraction: 1.0, channels: 2 };
        let out = plant_cue(s.clone(), 1, &cue, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for (t, &present) in presence.iter().enumerate() {
            for c in 0..4 {
                let diff = out.frames()[[t, c]] - s.frames()[[t, c]];
                let want = if present && c < 2 { 0.75 } else { 0.0 };
                assert!((diff - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn class_mean_difference_matches_fraction() {
        let desc = ModalityDescriptor::projection("face", 25.0, 1);
        let cue = CueSpec { modality: "face".into(), magnitude: 1.0, fraction: 0.3, channels: 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let n = 1000;
        let mut mean = [0.0f64; 2];
        for label in 0..2u8 {
            let values = Array2::from_shape_simple_fn((n, 1), || normal.sample(&mut rng) as f32);
            let s = ModalityStream::new(desc.clone(), values, vec![true; n]).unwrap();
            let out = plant_cue(s, label, &cue, &mut rng).unwrap();
            mean[label as usize] = out.frames().iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        }
        // Per-frame variance: 1 for class 0, 1 + f(1 - f) for class 1.
        let se = ((1.0 + (1.0 + 0.3 * 0.7)) / n as f64).sqrt();
        assert!((mean[1] - mean[0] - 0.3).abs() < 3.0 * se, "{mean:?}");
    }

    #[test]
    fn zero_dropout_keeps_everything_present() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(bursty_presence(500, 0.0, 10, &mut rng).iter().all(|&p| p));
    }

    #[test]
    fn bursty_dropout_hits_target_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = bursty_presence(200_000, 0.2, 25, &mut rng);
        let absent = p.iter().filter(|&&x| !x).count() as f64 / p.len() as f64;
        assert!((absent - 0.2).abs() < 0.02, "{absent}");
    }

    #[test]
    fn records_are_valid_and_aligned() {
        let spec = SynthSpec::default();
        for index in 0..3 {
            let streams = generate_record(&spec, Split::Train, index, 1).unwrap();
            let rec = crate::datamodel::VideoRecord::new("r", 1, Split::Train, streams).unwrap();
            let longest = rec.streams.iter().map(|s| s.duration_seconds()).fold(0.0, f64::max);
            for s in &rec.streams {
                s.validate().unwrap();
                assert!(longest - s.duration_seconds() <= 1.0 / 25.0 + 1e-9);
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = SynthSpec::default();
        spec.cue.modality = "blink".into();
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
        let mut spec = SynthSpec::default();
        spec.dropout[0].1.rate = 1.0;
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }
}
