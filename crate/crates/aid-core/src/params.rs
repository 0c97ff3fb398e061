//! Named, ordered parameter storage shared by the model, the optimizer,
//! gradient checking, and checkpoints. Order is part of the contract: it
//! fixes optimizer-moment alignment and checkpoint layout.

use crate::error::{Error, Result};
use crate::hash::fnv1a64;
use crate::scalar::Scalar;
use crate::tensor::{Tape, TensorId};

#[derive(Debug, Clone)]
pub struct Param<S> {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<S>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet<S> {
    params: Vec<Param<S>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: [usize; 2], data: Vec<S>) {
        let name = name.into();
        debug_assert_eq!(shape[0] * shape[1], data.len(), "param {name}");
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate param {name}"
        );
        self.params.push(Param { name, shape, data });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter()
    }

    pub fn get(&self, index: usize) -> &Param<S> {
        &self.params[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Param<S> {
        &mut self.params[index]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<S>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Record every parameter as a tape leaf, in declaration order.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> Result<Vec<TensorId>> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.data.clone(), p.shape, trainable))
            .collect()
    }

    /// Gather gradients for the ids returned by `bind`, zeros where a
    /// parameter stayed untouched by the backward pass.
    pub fn gather_grads(&self, tape: &Tape<S>, ids: &[TensorId]) -> Vec<Vec<S>> {
        ids.iter()
            .zip(self.params.iter())
            .map(|(&id, p)| {
                tape.grad(id)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![S::ZERO; p.data.len()])
            })
            .collect()
    }

    /// Convert precision (f32 -> f64 is exact).
    pub fn convert<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape,
                    data: p.data.iter().map(|&x| T::from_f64(x.to_f64())).collect(),
                })
                .collect(),
        }
    }

    /// Little-endian f32 serialization of all parameters, in order.
    pub fn to_f32_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.total_elements() * 4);
        for p in &self.params {
            for &x in &p.data {
                out.extend_from_slice(&(x.to_f64() as f32).to_le_bytes());
            }
        }
        out
    }

    /// Byte-level content hash over the f32 representation.
    pub fn content_hash(&self) -> u64 {
        fnv1a64(&self.to_f32_bytes())
    }

    pub fn checked_merge(mut self, other: ParamSet<S>) -> Result<ParamSet<S>> {
        for p in other.params {
            if self.params.iter().any(|q| q.name == p.name) {
                return Err(Error::Contract(format!("duplicate parameter {}", p.name)));
            }
            self.params.push(p);
        }
        Ok(self)
    }
}
