use std::fmt;

use crate::error::{Error, Result};

/// How a modality's raw frames are turned into `d`-wide embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    /// Batch-normalized linear projection of a flat feature vector.
    Projection,
    /// A set of keypoints, each `token_dim` wide, encoded by a small
    /// transformer over the keypoint axis and mean-pooled.
    LandmarkSet { token_count: usize, token_dim: usize },
    /// One integer state per frame, looked up in a learned table.
    State { state_count: usize },
}

impl EncoderKind {
    pub fn label(&self) -> &'static str {
        match self {
            EncoderKind::Projection => "projection",
            EncoderKind::LandmarkSet { .. } => "landmark_set",
            EncoderKind::State { .. } => "state",
        }
    }
}

/// Which hand a landmark modality belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum HandSide {
    Left,
    Right,
}

impl HandSide {
    pub fn index(self) -> usize {
        match self {
            HandSide::Left => 0,
            HandSide::Right => 1,
        }
    }
}

impl fmt::Display for HandSide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HandSide::Left => f.write_str("left"),
            HandSide::Right => f.write_str("right"),
        }
    }
}

/// Static schema of one modality stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityDescriptor {
    pub name: String,
    /// Nominal frames per second.
    pub rate: f64,
    pub raw_dim: usize,
    pub kind: EncoderKind,
    /// Set for hand landmark modalities. All modalities with a side share one
    /// landmark encoder and are told apart by a learned side embedding.
    pub side: Option<HandSide>,
    /// When set, each file may carry its own rate (e.g. videos recorded at
    /// different framerates) and the header rate is not checked against
    /// [`ModalityDescriptor::rate`].
    pub variable_rate: bool,
}

impl ModalityDescriptor {
    pub fn projection(name: impl Into<String>, rate: f64, raw_dim: usize) -> Self {
        Self {
            name: name.into(),
            rate,
            raw_dim,
            kind: EncoderKind::Projection,
            side: None,
            variable_rate: false,
        }
    }

    pub fn landmark_set(
        name: impl Into<String>,
        rate: f64,
        token_count: usize,
        token_dim: usize,
    ) -> Self {
        Self {
            name: name.into(),
            rate,
            raw_dim: token_count * token_dim,
            kind: EncoderKind::LandmarkSet {
                token_count,
                token_dim,
            },
            side: None,
            variable_rate: false,
        }
    }

    pub fn state(name: impl Into<String>, rate: f64, state_count: usize) -> Self {
        Self {
            name: name.into(),
            rate,
            raw_dim: 1,
            kind: EncoderKind::State { state_count },
            side: None,
            variable_rate: false,
        }
    }

    pub fn with_side(mut self, side: HandSide) -> Self {
        self.side = Some(side);
        self
    }

    pub fn with_variable_rate(mut self) -> Self {
        self.variable_rate = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['=', '\t', '\n', '/']) {
            return Err(Error::Schema(format!(
                "invalid modality name {:?}",
                self.name
            )));
        }
        if !(self.rate.is_finite() && self.rate > 0.0) {
            return Err(Error::Schema(format!(
                "modality {}: rate must be positive, got {}",
                self.name, self.rate
            )));
        }
        if self.raw_dim == 0 {
            return Err(Error::Schema(format!(
                "modality {}: raw_dim must be at least 1",
                self.name
            )));
        }
        match self.kind {
            EncoderKind::Projection => {}
            EncoderKind::LandmarkSet {
                token_count,
                token_dim,
            } => {
                if token_count == 0 || token_dim == 0 || token_count * token_dim != self.raw_dim {
                    return Err(Error::Schema(format!(
                        "modality {}: raw_dim {} does not factor as {} tokens x {}",
                        self.name, self.raw_dim, token_count, token_dim
                    )));
                }
            }
            EncoderKind::State { state_count } => {
                if self.raw_dim != 1 || state_count == 0 {
                    return Err(Error::Schema(format!(
                        "modality {}: state modalities need raw_dim 1 and at least one state",
                        self.name
                    )));
                }
            }
        }
        if self.side.is_some() && !matches!(self.kind, EncoderKind::LandmarkSet { .. }) {
            return Err(Error::Config(format!(
                "modality {}: a hand side only applies to landmark sets",
                self.name
            )));
        }
        Ok(())
    }
}

/// Checks a whole modality configuration: each descriptor, unique names, and
/// identical geometry for the hand modalities that share an encoder.
pub fn validate_config(modalities: &[ModalityDescriptor]) -> Result<()> {
    if modalities.is_empty() {
        return Err(Error::Config("no modalities configured".into()));
    }
    let mut hand_kind = None;
    for (i, m) in modalities.iter().enumerate() {
        m.validate()?;
        if modalities[..i].iter().any(|o| o.name == m.name) {
            return Err(Error::Config(format!("duplicate modality {}", m.name)));
        }
        if m.side.is_some() {
            match hand_kind {
                None => hand_kind = Some(m.kind),
                Some(k) if k != m.kind => {
                    return Err(Error::Config(format!(
                        "hand modality {} has a different landmark geometry than the other hand",
                        m.name
                    )))
                }
                _ => {}
            }
        }
    }
    Ok(())
}
