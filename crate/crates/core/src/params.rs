//! Named parameter storage shared by the networks, the optimizer and the
//! checkpoint format.

use std::ops::Index;

use crate::error::CheckpointError;
use crate::numerics::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered list of named tensors. Insertion order is the checkpoint order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Graph handles for every entry of a [`ParamStore`], indexable by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter `{name}`");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Creates one leaf per entry; `tracked` leaves receive gradients.
    pub fn bind(&self, g: &Graph, tracked: bool) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.leaf(t.clone(), tracked)).collect(),
        }
    }

    /// Rebinds entries to caller-supplied handles, e.g. when a gradient
    /// check owns the leaves.
    pub fn bound_from(vars: Vec<Var>) -> Bound {
        Bound { vars }
    }

    /// Replaces every tensor from `entries`, whose names carry `prefix`.
    /// Names and shapes must match this store exactly.
    pub fn load_from(&mut self, entries: &[(String, Tensor)], prefix: &str) -> Result<(), CheckpointError> {
        let scoped: Vec<(&str, &Tensor)> = entries
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|n| (n, t)))
            .collect();
        for (name, _) in &scoped {
            if !self.names.iter().any(|n| n == name) {
                return Err(CheckpointError::UnexpectedTensor(format!("{prefix}{name}")));
            }
        }
        let mut staged = Vec::with_capacity(self.len());
        for (name, current) in self.iter() {
            let Some((_, found)) = scoped.iter().find(|(n, _)| *n == name) else {
                return Err(CheckpointError::MissingTensor(format!("{prefix}{name}")));
            };
            if found.shape() != current.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: format!("{prefix}{name}"),
                    expected: current.shape().to_vec(),
                    found: found.shape().to_vec(),
                });
            }
            staged.push((*found).clone());
        }
        self.tensors = staged;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}
