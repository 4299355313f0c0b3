//! Binary checkpoints: parameters, running statistics, optimizer moments,
//! step counter and a fingerprint of the architecture.
//!
//! Layout (little-endian): magic `MMCK`, version `u32`, 32-byte fingerprint,
//! step `u64`, section count `u32`; each section is a tensor count `u32`
//! followed by tensors (name length `u32`, UTF-8 name, rank `u32`, dims
//! `u64` each, `f32` payload). Sections are parameters, buffers, first and
//! second moments, in that order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{hex, Model};
use crate::params::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MMCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const SECTIONS: u32 = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: [u8; 32],
    pub step: u64,
    pub params: ParamStore,
    pub buffers: ParamStore,
    pub m: ParamStore,
    pub v: ParamStore,
}

fn put_store(out: &mut Vec<u8>, store: &ParamStore) {
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for t in store.tensors() {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in &t.data {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Corruption(format!("checkpoint truncated while reading {what} at byte {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn store(&mut self) -> Result<ParamStore> {
        let count = self.u32("tensor count")?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = self.u32("name length")? as usize;
            let name = std::str::from_utf8(self.take(len, "tensor name")?)
                .map_err(|_| Error::Corruption("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = self.u32("rank")? as usize;
            if rank > 8 {
                return Err(Error::Corruption(format!("tensor {name} has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.u64("dimension")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Corruption(format!("tensor {name} is too large")))?;
            let payload = self.take(
                numel.checked_mul(4).ok_or_else(|| Error::Corruption("payload size overflows".into()))?,
                "payload",
            )?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            store
                .insert(Tensor { name, shape, data })
                .map_err(|e| Error::Corruption(e.to_string()))?;
        }
        Ok(store)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&SECTIONS.to_le_bytes());
        for store in [&self.params, &self.buffers, &self.m, &self.v] {
            put_store(&mut out, store);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if !CHECKPOINT_MAGIC.starts_with(&bytes[..bytes.len().min(4)]) {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        if bytes.len() < 8 {
            return Err(Error::Corruption(format!("checkpoint of {} bytes is truncated", bytes.len())));
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let fingerprint: [u8; 32] = r.take(32, "fingerprint")?.try_into().expect("32 bytes");
        let step = r.u64("step")?;
        let sections = r.u32("section count")?;
        if sections != SECTIONS {
            return Err(Error::Format(format!("expected {SECTIONS} sections, found {sections}")));
        }
        let params = r.store()?;
        let buffers = r.store()?;
        let m = r.store()?;
        let v = r.store()?;
        if r.pos != bytes.len() {
            return Err(Error::Corruption(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
        }
        if !params.same_layout(&m) || !params.same_layout(&v) {
            return Err(Error::Corruption("optimizer moments do not match parameters".into()));
        }
        Ok(Self { fingerprint, step, params, buffers, m, v })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Fresh optimizer state for `model`.
    pub fn from_model(model: &Model, step: u64, m: ParamStore, v: ParamStore) -> Self {
        Self {
            fingerprint: model.fingerprint(),
            step,
            params: model.params.clone(),
            buffers: model.buffers.clone(),
            m,
            v,
        }
    }

    /// Loads parameters and running statistics into a model built from the
    /// same configuration.
    pub fn restore_into(&self, model: &mut Model) -> Result<()> {
        let expected = model.fingerprint();
        if self.fingerprint != expected {
            return Err(Error::Config(format!(
                "checkpoint fingerprint {} does not match configuration {}",
                &hex(&self.fingerprint)[..16],
                &hex(&expected)[..16]
            )));
        }
        model.load_state(self.params.clone(), self.buffers.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamStore::new();
        p.add("a.weight", &[3, 2], Init::Normal(1.0), &mut rng);
        p.add("a.bias", &[2], Init::Normal(1.0), &mut rng);
        let mut b = ParamStore::new();
        b.add("n.running_var", &[4], Init::Ones, &mut rng);
        let mut m = p.clone();
        m.scale(0.5);
        let mut v = p.clone();
        v.scale(0.25);
        Checkpoint { fingerprint: [7; 32], step: 42, params: p, buffers: b, m, v }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn every_truncation_is_corruption() {
        let bytes = sample().to_bytes();
        for cut in 8..bytes.len() {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Corruption(_))), "cut at {cut}");
        }
    }

    #[test]
    fn bad_magic_or_version_is_format_error() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
        let mut bytes = sample().to_bytes();
        bytes[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
    }
}
