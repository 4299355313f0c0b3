//! Modality inventories for the supported dataset layouts.

use std::collections::BTreeMap;

use super::descriptor::{HandSide, ModalityDescriptor};
use crate::error::{Error, Result};

/// Audio features are produced at 100 frames per second.
pub const AUDIO_RATE: f64 = 100.0;
/// Nominal video rate for variable-framerate vlogs; actual files carry their own.
pub const VLOG_NOMINAL_RATE: f64 = 25.0;
/// Rate of the interview-corpus video features.
pub const INTERVIEW_VIDEO_RATE: f64 = 30.0;

/// Dimensions a preset cannot know on its own, keyed by modality name.
pub type PresetDims = BTreeMap<String, usize>;

pub const PRESET_NAMES: [&str; 4] = ["dvlog", "daicwoz", "edaic", "synth"];

/// Per-preset defaults for windowing.
#[derive(Debug, Clone, PartialEq)]
pub struct PresetDefaults {
    pub window_seconds: f64,
    /// Modality whose presence gates windows; `None` keeps every window.
    pub gate_modality: Option<String>,
}

pub fn preset_defaults(name: &str) -> Result<PresetDefaults> {
    match name {
        "dvlog" => Ok(PresetDefaults {
            window_seconds: 9.0,
            gate_modality: Some("face_landmarks".into()),
        }),
        "daicwoz" | "edaic" => Ok(PresetDefaults {
            window_seconds: 6.0,
            gate_modality: None,
        }),
        "synth" => Ok(PresetDefaults {
            window_seconds: 9.0,
            gate_modality: Some("face".into()),
        }),
        other => Err(unknown(other)),
    }
}

fn unknown(name: &str) -> Error {
    Error::Config(format!(
        "unknown preset {name:?} (expected one of {})",
        PRESET_NAMES.join(", ")
    ))
}

fn required(dims: &PresetDims, preset: &str, modality: &str) -> Result<usize> {
    match dims.get(modality) {
        Some(&d) if d > 0 => Ok(d),
        Some(_) => Err(Error::Config(format!("{preset}: dimension for {modality} must be positive"))),
        None => Err(Error::Config(format!(
            "{preset}: the dimension of {modality} must be supplied (dataset.dims.{modality})"
        ))),
    }
}

/// Modality descriptors for a named preset.
///
/// `dims` supplies the dimensions that the interview corpora leave
/// unspecified; it is ignored for presets that need none. Unknown keys are
/// rejected so typos do not pass silently.
pub fn preset_config(name: &str, dims: &PresetDims) -> Result<Vec<ModalityDescriptor>> {
    let needed: &[&str] = match name {
        "dvlog" | "synth" => &[],
        "daicwoz" => &["covarep", "action_units", "gaze", "head_pose"],
        "edaic" => &["face_resnet", "gaze", "head_pose", "action_units"],
        other => return Err(unknown(other)),
    };
    if let Some(extra) = dims.keys().find(|k| !needed.contains(&k.as_str())) {
        return Err(Error::Config(format!("{name}: preset has no configurable dimension {extra:?}")));
    }
    let v = INTERVIEW_VIDEO_RATE;
    let modalities = match name {
        "dvlog" => {
            let r = VLOG_NOMINAL_RATE;
            vec![
                ModalityDescriptor::projection("audio_embedding", AUDIO_RATE, 256),
                ModalityDescriptor::projection("face_embedding", r, 256).with_variable_rate(),
                // x, y and the detector confidence per landmark.
                ModalityDescriptor::landmark_set("face_landmarks", r, 68, 3).with_variable_rate(),
                ModalityDescriptor::landmark_set("body_landmarks", r, 33, 3).with_variable_rate(),
                ModalityDescriptor::landmark_set("hand_left", r, 21, 3)
                    .with_side(HandSide::Left)
                    .with_variable_rate(),
                ModalityDescriptor::landmark_set("hand_right", r, 21, 3)
                    .with_side(HandSide::Right)
                    .with_variable_rate(),
                ModalityDescriptor::projection("gaze", r, 3).with_variable_rate(),
                ModalityDescriptor::state("blink", r, 2).with_variable_rate(),
            ]
        }
        "daicwoz" => vec![
            ModalityDescriptor::projection("covarep", AUDIO_RATE, required(dims, name, "covarep")?),
            ModalityDescriptor::projection("formants", AUDIO_RATE, 5),
            ModalityDescriptor::landmark_set("face_landmarks", v, 68, 3),
            ModalityDescriptor::projection("action_units", v, required(dims, name, "action_units")?),
            ModalityDescriptor::projection("gaze", v, required(dims, name, "gaze")?),
            ModalityDescriptor::projection("head_pose", v, required(dims, name, "head_pose")?),
        ],
        "edaic" => vec![
            // 13 coefficients plus first and second derivatives.
            ModalityDescriptor::projection("mfcc", AUDIO_RATE, 39),
            ModalityDescriptor::projection("egemaps", AUDIO_RATE, 88),
            ModalityDescriptor::projection("face_resnet", v, required(dims, name, "face_resnet")?),
            ModalityDescriptor::projection("gaze", v, required(dims, name, "gaze")?),
            ModalityDescriptor::projection("head_pose", v, required(dims, name, "head_pose")?),
            ModalityDescriptor::projection("action_units", v, required(dims, name, "action_units")?),
        ],
        "synth" => synth_modalities(),
        _ => unreachable!(),
    };
    Ok(modalities)
}

/// Miniature vlog-like layout used by the synthetic generator.
pub fn synth_modalities() -> Vec<ModalityDescriptor> {
    vec![
        ModalityDescriptor::projection("audio", AUDIO_RATE, 16),
        ModalityDescriptor::projection("face", 25.0, 16),
        ModalityDescriptor::landmark_set("face_landmarks", 25.0, 10, 2),
        ModalityDescriptor::state("blink", 30.0, 2),
    ]
}
