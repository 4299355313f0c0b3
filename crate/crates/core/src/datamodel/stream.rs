//! One modality's frames plus presence mask, and the binary container that
//! stores it on disk.
//!
//! Layout (little-endian):
//!
//! | field    | type            |
//! |----------|-----------------|
//! | magic    | `b"MMDS"`       |
//! | version  | u32 = 1         |
//! | rate     | f32             |
//! | frames T | u64             |
//! | dim D    | u32             |
//! | payload  | T*D f32, row-major |
//! | presence | T bytes, 0 or 1 |

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use super::descriptor::{EncoderKind, ModalityDescriptor};
use crate::error::{Error, Result};

pub const STREAM_MAGIC: &[u8; 4] = b"MMDS";
pub const STREAM_VERSION: u32 = 1;
pub const STREAM_HEADER_LEN: usize = 4 + 4 + 4 + 8 + 4;

/// Frames of a single modality for a whole recording.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityStream {
    pub descriptor: ModalityDescriptor,
    rate: f32,
    frames: Array2<f32>,
    presence: Vec<bool>,
}

impl ModalityStream {
    /// Builds a stream at the descriptor's nominal rate.
    pub fn new(
        descriptor: ModalityDescriptor,
        frames: Array2<f32>,
        presence: Vec<bool>,
    ) -> Result<Self> {
        let rate = descriptor.rate as f32;
        Self::with_rate(descriptor, rate, frames, presence)
    }

    /// Builds a stream at an explicit rate. Only variable-rate modalities may
    /// deviate from the nominal rate.
    pub fn with_rate(
        descriptor: ModalityDescriptor,
        rate: f32,
        frames: Array2<f32>,
        presence: Vec<bool>,
    ) -> Result<Self> {
        let stream = Self {
            descriptor,
            rate,
            frames: frames.as_standard_layout().into_owned(),
            presence,
        };
        stream.validate()?;
        Ok(stream)
    }

    /// A stream with every frame absent.
    pub fn absent(descriptor: ModalityDescriptor, total_frames: usize) -> Self {
        let dim = descriptor.raw_dim;
        Self {
            rate: descriptor.rate as f32,
            descriptor,
            frames: Array2::zeros((total_frames, dim)),
            presence: vec![false; total_frames],
        }
    }

    pub fn rate(&self) -> f64 {
        self.rate as f64
    }

    pub fn frames(&self) -> &Array2<f32> {
        &self.frames
    }

    pub fn presence(&self) -> &[bool] {
        &self.presence
    }

    pub fn len(&self) -> usize {
        self.presence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.presence.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.len() as f64 / self.rate()
    }

    pub fn presence_ratio(&self) -> f64 {
        if self.presence.is_empty() {
            return 0.0;
        }
        self.presence.iter().filter(|&&p| p).count() as f64 / self.presence.len() as f64
    }

    pub fn into_parts(self) -> (ModalityDescriptor, f32, Array2<f32>, Vec<bool>) {
        (self.descriptor, self.rate, self.frames, self.presence)
    }

    pub fn validate(&self) -> Result<()> {
        let name = &self.descriptor.name;
        if !(self.rate.is_finite() && self.rate > 0.0) {
            return Err(Error::Validation(format!("{name}: rate {} is not positive", self.rate)));
        }
        if !self.descriptor.variable_rate && self.rate != self.descriptor.rate as f32 {
            return Err(Error::Schema(format!(
                "{name}: rate {} does not match configured rate {}",
                self.rate, self.descriptor.rate
            )));
        }
        if self.frames.ncols() != self.descriptor.raw_dim {
            return Err(Error::Schema(format!(
                "{name}: frames have {} columns, descriptor says {}",
                self.frames.ncols(),
                self.descriptor.raw_dim
            )));
        }
        if self.frames.nrows() != self.presence.len() {
            return Err(Error::Validation(format!(
                "{name}: {} frames but {} presence flags",
                self.frames.nrows(),
                self.presence.len()
            )));
        }
        let state_count = match self.descriptor.kind {
            EncoderKind::State { state_count } => Some(state_count),
            _ => None,
        };
        for (t, (row, &present)) in self.frames.rows().into_iter().zip(&self.presence).enumerate() {
            if present {
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Validation(format!(
                        "{name}: non-finite value in present frame {t}"
                    )));
                }
                if let Some(states) = state_count {
                    let v = row[0];
                    if v < 0.0 || v.fract() != 0.0 || v as usize >= states {
                        return Err(Error::Data(format!(
                            "{name}: frame {t} holds state {v}, expected 0..{states}"
                        )));
                    }
                }
            } else if row.iter().any(|&v| v != 0.0) {
                return Err(Error::Validation(format!(
                    "{name}: absent frame {t} is not all-zero"
                )));
            }
        }
        Ok(())
    }

    /// Serializes into the container layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let t = self.len();
        let d = self.descriptor.raw_dim;
        let mut out = Vec::with_capacity(STREAM_HEADER_LEN + t * d * 4 + t);
        out.extend_from_slice(STREAM_MAGIC);
        out.extend_from_slice(&STREAM_VERSION.to_le_bytes());
        out.extend_from_slice(&self.rate.to_le_bytes());
        out.extend_from_slice(&(t as u64).to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        for v in self.frames.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend(self.presence.iter().map(|&p| p as u8));
        out
    }

    /// Parses a container, checking it against `descriptor`.
    pub fn from_bytes(bytes: &[u8], descriptor: &ModalityDescriptor) -> Result<Self> {
        let header = read_header(bytes)?;
        if header.dim != descriptor.raw_dim {
            return Err(Error::Schema(format!(
                "{}: file has dimension {}, configuration expects {}",
                descriptor.name, header.dim, descriptor.raw_dim
            )));
        }
        if !descriptor.variable_rate && header.rate != descriptor.rate as f32 {
            return Err(Error::Schema(format!(
                "{}: file rate {} differs from configured rate {}",
                descriptor.name, header.rate, descriptor.rate
            )));
        }
        let t = header.frames;
        let expected = t
            .checked_mul(header.dim)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(t))
            .and_then(|n| n.checked_add(STREAM_HEADER_LEN))
            .ok_or_else(|| Error::Corruption("header sizes overflow".into()))?;
        if bytes.len() != expected {
            return Err(Error::Corruption(format!(
                "{}: payload is {} bytes, header implies {}",
                descriptor.name,
                bytes.len(),
                expected
            )));
        }
        let payload = &bytes[STREAM_HEADER_LEN..STREAM_HEADER_LEN + t * header.dim * 4];
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut presence = Vec::with_capacity(t);
        for &b in &bytes[STREAM_HEADER_LEN + t * header.dim * 4..] {
            match b {
                0 => presence.push(false),
                1 => presence.push(true),
                other => {
                    return Err(Error::Corruption(format!(
                        "{}: presence byte {other} is not 0 or 1",
                        descriptor.name
                    )))
                }
            }
        }
        let frames = Array2::from_shape_vec((t, header.dim), values)
            .map_err(|e| Error::Corruption(e.to_string()))?;
        Self::with_rate(descriptor.clone(), header.rate, frames, presence)
    }
}

/// Parsed container header.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamHeader {
    pub rate: f32,
    pub frames: usize,
    pub dim: usize,
}

pub fn read_header(bytes: &[u8]) -> Result<StreamHeader> {
    // A file cut inside the magic is truncated, not foreign.
    if !STREAM_MAGIC.starts_with(&bytes[..bytes.len().min(4)]) {
        return Err(Error::Format("missing MMDS magic".into()));
    }
    if bytes.len() < STREAM_HEADER_LEN {
        return Err(Error::Corruption(format!(
            "header truncated at {} bytes",
            bytes.len()
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != STREAM_VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let rate = f32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let frames = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let dim = u32::from_le_bytes(bytes[20..24].try_into().unwrap());
    let frames = usize::try_from(frames)
        .map_err(|_| Error::Corruption(format!("frame count {frames} does not fit in memory")))?;
    Ok(StreamHeader {
        rate,
        frames,
        dim: dim as usize,
    })
}

/// Reads just the header of a container file.
pub fn read_stream_header(path: impl AsRef<Path>) -> Result<StreamHeader> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_header(&bytes)
}

/// Reads a stream file and checks it against `descriptor`.
pub fn read_stream_file(path: impl AsRef<Path>, descriptor: &ModalityDescriptor) -> Result<ModalityStream> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ModalityStream::from_bytes(&bytes, descriptor)
}

/// Validates `stream` and writes it. Nothing is written if validation fails.
pub fn write_stream_file(stream: &ModalityStream, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    stream.validate()?;
    let bytes = stream.to_bytes();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn desc(dim: usize) -> ModalityDescriptor {
        ModalityDescriptor::projection("audio", 100.0, dim)
    }

    #[test]
    fn header_round_trip() {
        let frames = Array2::from_shape_fn((600, 256), |(t, c)| (t * 256 + c) as f32 * 1e-3);
        let stream = ModalityStream::new(desc(256), frames, vec![true; 600]).unwrap();
        let bytes = stream.to_bytes();
        let header = read_header(&bytes).unwrap();
        assert_eq!(header, StreamHeader { rate: 100.0, frames: 600, dim: 256 });
        let back = ModalityStream::from_bytes(&bytes, &desc(256)).unwrap();
        assert_eq!(back.frames().dim(), (600, 256));
        assert_eq!(back.presence().len(), 600);
    }

    #[test]
    fn dimension_mismatch_is_schema_error() {
        let stream = ModalityStream::absent(desc(256), 10);
        let err = ModalityStream::from_bytes(&stream.to_bytes(), &desc(39)).unwrap_err();
        assert!(matches!(err, Error::Schema(_)), "{err}");
    }

    #[test]
    fn file_sizes() {
        let empty = ModalityStream::absent(desc(256), 0);
        assert_eq!(empty.to_bytes().len(), STREAM_HEADER_LEN);
        let full = ModalityStream::absent(desc(256), 600);
        assert_eq!(full.to_bytes().len(), STREAM_HEADER_LEN + 600 * 256 * 4 + 600);
    }

    #[test]
    fn nan_in_present_row_is_rejected_without_writing() {
        let mut frames = Array2::zeros((3, 2));
        frames[[1, 0]] = f32::NAN;
        let stream = ModalityStream {
            descriptor: desc(2),
            rate: 100.0,
            frames,
            presence: vec![true; 3],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.mmds");
        let err = write_stream_file(&stream, &path).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(!path.exists());
    }

    #[test]
    fn nan_in_absent_row_is_not_zero() {
        let mut frames = Array2::zeros((2, 2));
        frames[[0, 1]] = 1.0;
        let err = ModalityStream::new(desc(2), frames, vec![false, true]).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn bad_magic_version_and_truncation() {
        let stream = ModalityStream::new(
            desc(2),
            Array2::from_elem((4, 2), 0.5),
            vec![true; 4],
        )
        .unwrap();
        let bytes = stream.to_bytes();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ModalityStream::from_bytes(&bad, &desc(2)), Err(Error::Format(_))));

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(ModalityStream::from_bytes(&bad, &desc(2)), Err(Error::Format(_))));

        for cut in [10, STREAM_HEADER_LEN, bytes.len() - 1] {
            assert!(matches!(
                ModalityStream::from_bytes(&bytes[..cut], &desc(2)),
                Err(Error::Corruption(_))
            ));
        }

        let mut bad = bytes.clone();
        *bad.last_mut().unwrap() = 7;
        assert!(matches!(ModalityStream::from_bytes(&bad, &desc(2)), Err(Error::Corruption(_))));
    }

    #[test]
    fn rate_mismatch_unless_variable() {
        let d = ModalityDescriptor::projection("face", 25.0, 2);
        let s = ModalityStream::with_rate(d.clone().with_variable_rate(), 30.0, Array2::zeros((3, 2)), vec![false; 3]).unwrap();
        let bytes = s.to_bytes();
        assert!(matches!(ModalityStream::from_bytes(&bytes, &d), Err(Error::Schema(_))));
        let back = ModalityStream::from_bytes(&bytes, &d.with_variable_rate()).unwrap();
        assert_eq!(back.rate(), 30.0);
    }

    #[test]
    fn state_values_checked() {
        let d = ModalityDescriptor::state("blink", 25.0, 2);
        let frames = Array2::from_shape_vec((3, 1), vec![0.0, 1.0, 2.0]).unwrap();
        assert!(matches!(ModalityStream::new(d, frames, vec![true; 3]), Err(Error::Data(_))));
    }

    #[test]
    fn all_absent_stream_validates() {
        let s = ModalityStream::absent(desc(3), 50);
        s.validate().unwrap();
        assert_eq!(s.presence_ratio(), 0.0);
    }

    fn arb_stream() -> impl Strategy<Value = ModalityStream> {
        (0usize..40, 1usize..6).prop_flat_map(|(t, d)| {
            (
                proptest::collection::vec(proptest::num::f32::NORMAL | proptest::num::f32::SUBNORMAL | proptest::num::f32::ZERO, t * d),
                proptest::collection::vec(any::<bool>(), t),
                Just((t, d)),
            )
                .prop_map(|(mut values, presence, (t, d))| {
                    for (row, &p) in presence.iter().enumerate() {
                        if !p {
                            values[row * d..(row + 1) * d].iter_mut().for_each(|v| *v = 0.0);
                        }
                    }
                    let frames = Array2::from_shape_vec((t, d), values).unwrap();
                    ModalityStream::new(desc(d), frames, presence).unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn container_round_trip_is_bit_exact(stream in arb_stream()) {
            let bytes = stream.to_bytes();
            let back = ModalityStream::from_bytes(&bytes, &stream.descriptor).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            let same_bits = back.frames().iter().zip(stream.frames().iter()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same_bits);
            prop_assert_eq!(back.presence(), stream.presence());
        }
    }
}
