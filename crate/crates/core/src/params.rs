//! Named parameter tensors.
//!
//! Every learnable leaf lives in a [`ParamStore`] and is addressed by a
//! [`ParamId`]. Gradients and optimizer moments are stores with the same
//! layout, which keeps the optimizer, the checkpoint format and the gradient
//! checker generic over the model structure.
//!
//! Values are computed in `f64`. Persistent state (parameters, running
//! statistics, moments) is kept exactly representable in `f32` so that
//! checkpoints, which store `f32`, round-trip bit-exactly.

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<R: Rng + ?Sized>(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut R) -> ParamId {
        let numel = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Ones => vec![1.0; numel],
            Init::Normal(std) => {
                let normal = Normal::new(0.0, std).expect("finite std");
                (0..numel).map(|_| to_f32_grid(normal.sample(rng))).collect()
            }
        };
        let name = name.into();
        debug_assert!(self.tensors.iter().all(|t| t.name != name), "duplicate parameter {name}");
        self.tensors.push(Tensor {
            name,
            shape: shape.to_vec(),
            data,
        });
        ParamId(self.tensors.len() - 1)
    }

    /// Appends an existing tensor, rejecting duplicate names and bad shapes.
    pub fn insert(&mut self, tensor: Tensor) -> Result<ParamId> {
        if tensor.shape.iter().product::<usize>() != tensor.data.len() {
            return Err(Error::Contract(format!("tensor {} has shape {:?} but {} values", tensor.name, tensor.shape, tensor.data.len())));
        }
        if self.find(&tensor.name).is_some() {
            return Err(Error::Contract(format!("duplicate tensor {}", tensor.name)));
        }
        self.tensors.push(tensor);
        Ok(ParamId(self.tensors.len() - 1))
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: vec![0.0; t.data.len()],
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.tensors.iter().position(|t| t.name == name).map(ParamId)
    }

    pub fn mat(&self, id: ParamId) -> ArrayView2<'_, f64> {
        let t = &self.tensors[id.0];
        ArrayView2::from_shape((t.shape[0], t.shape[1]), &t.data).expect("matrix parameter")
    }

    pub fn mat_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, f64> {
        let t = &mut self.tensors[id.0];
        ArrayViewMut2::from_shape((t.shape[0], t.shape[1]), &mut t.data).expect("matrix parameter")
    }

    pub fn vec(&self, id: ParamId) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.tensors[id.0].data[..])
    }

    pub fn vec_mut(&mut self, id: ParamId) -> ArrayViewMut1<'_, f64> {
        ArrayViewMut1::from(&mut self.tensors[id.0].data[..])
    }

    /// Adds `other * scale` elementwise. Layouts must match.
    pub fn add_scaled(&mut self, other: &ParamStore, scale: f64) {
        debug_assert!(self.same_layout(other));
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub fn check_layout(&self, other: &ParamStore, what: &str) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::Contract(format!("{what}: parameter layouts differ")))
        }
    }

    /// Rounds every value to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|x| *x = to_f32_grid(*x));
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data.iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }
}

pub(crate) fn to_f32_grid(x: f64) -> f64 {
    x as f32 as f64
}
