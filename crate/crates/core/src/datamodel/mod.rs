//! Dataset schema: modality descriptors, streams with presence masks, the
//! on-disk feature container, manifests and preset layouts.

mod descriptor;
mod manifest;
mod presets;
mod record;
mod stream;

pub use descriptor::{validate_config, EncoderKind, HandSide, ModalityDescriptor};
pub use manifest::{load_manifest, parse_manifest, DatasetManifest, RecordEntry};
pub use presets::{
    preset_config, preset_defaults, synth_modalities, PresetDefaults, PresetDims, AUDIO_RATE,
    PRESET_NAMES,
};
pub use record::{Split, VideoRecord};
pub use stream::{
    read_header, read_stream_file, read_stream_header, write_stream_file, ModalityStream,
    StreamHeader, STREAM_HEADER_LEN, STREAM_MAGIC, STREAM_VERSION,
};
