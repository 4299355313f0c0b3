//! Multi-modal temporal fusion for binary classification of long recordings.
//!
//! A recording is a bundle of modality streams (voice embeddings, face
//! landmarks, gaze, blink states, ...) sampled at different rates, each with a
//! per-frame presence mask. The pipeline:
//!
//! 1. [`windowing`] cuts fixed-duration windows across all streams.
//! 2. [`encoders`] map each modality's frames to a shared width `d`.
//! 3. [`positioning`] adds a learned per-modality condition vector and a
//!    sinusoidal position row indexed fractionally so that frames from
//!    different rates at the same instant share a position.
//! 4. [`fusion`] concatenates everything into one sequence and runs a
//!    presence-masked transformer encoder with mean pooling and a 2-way head.
//! 5. [`evaluation`] votes over sequential non-overlapping windows.
//!
//! [`training`] provides AdamW with cosine decay, checkpoints and a
//! finite-difference gradient checker; [`synthgen`] produces planted-cue
//! synthetic datasets for end-to-end checks.

pub mod datamodel;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod model;
pub mod nn;
pub mod params;
pub mod positioning;
pub mod rng;
pub mod synthgen;
pub mod training;
pub mod windowing;

pub use datamodel::{
    load_manifest, preset_config, read_stream_file, write_stream_file, DatasetManifest,
    EncoderKind, HandSide, ModalityDescriptor, ModalityStream, PresetDims, RecordEntry, Split,
    VideoRecord,
};
pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
