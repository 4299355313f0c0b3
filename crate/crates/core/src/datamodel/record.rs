use std::fmt;
use std::str::FromStr;

use super::stream::ModalityStream;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train|val|test)")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// A labeled recording: one stream per configured modality, in configuration
/// order.
#[derive(Debug, Clone)]
pub struct VideoRecord {
    pub id: String,
    /// 0 = control, 1 = positive.
    pub label: u8,
    pub split: Split,
    pub streams: Vec<ModalityStream>,
}

impl VideoRecord {
    pub fn new(id: impl Into<String>, label: u8, split: Split, streams: Vec<ModalityStream>) -> Result<Self> {
        let record = Self {
            id: id.into(),
            label,
            split,
            streams,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn validate(&self) -> Result<()> {
        if self.label > 1 {
            return Err(Error::Data(format!("record {}: label {} is not binary", self.id, self.label)));
        }
        if self.streams.is_empty() {
            return Err(Error::Data(format!("record {} has no streams", self.id)));
        }
        let longest = self
            .streams
            .iter()
            .map(ModalityStream::duration_seconds)
            .fold(0.0, f64::max);
        for s in &self.streams {
            let slack = 1.0 / s.rate() + 1e-9;
            if (s.duration_seconds() - longest).abs() > slack {
                return Err(Error::Data(format!(
                    "record {}: stream {} lasts {:.4}s but the longest stream lasts {:.4}s",
                    self.id,
                    s.descriptor.name,
                    s.duration_seconds(),
                    longest
                )));
            }
        }
        Ok(())
    }

    /// Usable wall-clock span: the shortest stream's duration.
    pub fn span_seconds(&self) -> f64 {
        self.streams
            .iter()
            .map(ModalityStream::duration_seconds)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn stream(&self, name: &str) -> Option<&ModalityStream> {
        self.streams.iter().find(|s| s.descriptor.name == name)
    }

    pub fn stream_index(&self, name: &str) -> Option<usize> {
        self.streams.iter().position(|s| s.descriptor.name == name)
    }
}
