//! Named parameter storage and per-step gradients.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use skilledit_core::Real;

use crate::checkpoint::Checkpoint;
use crate::error::{NnError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Parameters in creation order, addressable by name.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    index: BTreeMap<String, usize>,
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: BTreeMap::new() }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(id)
    }

    /// Normal(0, std) initialized parameter.
    pub fn add_normal<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut R) -> ParamId {
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let t = Tensor::from_fn(shape, |_| S::of(dist.sample(rng)));
        self.add(name, t)
    }

    pub fn add_filled(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        self.add(name, Tensor::filled(shape, S::of(value)))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<S>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Appends every parameter to `ckpt` as an f32 record.
    pub fn write_into(&self, ckpt: &mut Checkpoint) {
        for (_, name, t) in self.iter() {
            ckpt.put(
                name,
                t.shape().to_vec(),
                t.data().iter().map(|x| x.to_f64_lossless() as f32).collect(),
            );
        }
    }

    /// Overwrites every parameter from the record of the same name.
    pub fn read_from(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let rec = ckpt
                .get(name)
                .ok_or_else(|| NnError::State(format!("checkpoint lacks parameter {name}")))?;
            if rec.dims != self.tensors[i].shape() {
                return Err(NnError::Shape(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    rec.dims,
                    self.tensors[i].shape()
                )));
            }
            for (dst, src) in self.tensors[i].data_mut().iter_mut().zip(&rec.data) {
                *dst = S::of(*src as f64);
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            index: self.index.clone(),
        }
    }
}

/// Gradients indexed by [`ParamId`]; parameters not reached by the loss have none.
#[derive(Debug, Clone)]
pub struct Grads<S> {
    pub(crate) grads: Vec<Option<Vec<S>>>,
}

impl<S: Real> Grads<S> {
    pub fn get(&self, id: ParamId) -> Option<&[S]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|x| {
                let v = x.to_f64_lossless();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: S) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x = *x * factor);
        }
    }
}
