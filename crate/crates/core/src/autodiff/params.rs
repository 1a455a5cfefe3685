//! Named parameter storage, bound onto a tape as leaves for each forward.

use std::collections::BTreeMap;
use std::io::Write;

use super::{Gradients, Tape, Tensor, Var};
use crate::container::ContainerWriter;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in insertion order.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Ordered set of named tensors. Trainable entries are updated by the
/// optimizer; the rest (batchnorm running statistics) are buffers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<Entry>,
}

/// Leaf variables of one [`ParamSet`] on one tape.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.entries.push(Entry {
            name,
            value,
            trainable,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Number of trainable scalars.
    pub fn trainable_len(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    /// Places every entry on `tape`; trainable entries require gradients.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|e| tape.leaf(e.value.clone(), e.trainable))
                .collect(),
        }
    }

    /// Per-entry gradients, zero-filled for trainable entries the loss did
    /// not reach and `None` for buffers.
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients) -> Vec<Option<Vec<f64>>> {
        self.entries
            .iter()
            .zip(&bound.vars)
            .map(|(e, v)| {
                e.trainable.then(|| {
                    grads
                        .get(*v)
                        .map_or_else(|| vec![0.0; e.value.len()], <[f64]>::to_vec)
                })
            })
            .collect()
    }

    pub fn write_tensors<W: Write>(&self, w: &mut ContainerWriter<W>, prefix: &str) -> Result<()> {
        for e in &self.entries {
            w.tensor(&format!("{prefix}{}", e.name), e.value.shape(), e.value.data())?;
        }
        Ok(())
    }

    /// Overwrites every entry from `tensors[prefix + name]`, requiring
    /// matching shapes.
    pub fn load_tensors(&mut self, tensors: &BTreeMap<String, Tensor>, prefix: &str) -> Result<()> {
        for e in &mut self.entries {
            let key = format!("{prefix}{}", e.name);
            let t = tensors
                .get(&key)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {key}")))?;
            if t.shape() != e.value.shape() {
                return Err(Error::Format(format!(
                    "tensor {key} has shape {:?}, model expects {:?}",
                    t.shape(),
                    e.value.shape()
                )));
            }
            e.value = t.clone();
        }
        Ok(())
    }
}
