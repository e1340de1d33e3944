use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::Contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar parameter count.
    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Puts parameter `id` on `tape` (once per tape, without copying).
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, id: ParamId) -> Var {
        tape.param(id.0, &self.tensors[id.0])
    }

    /// Gradients of every parameter bound on `tape`, detached from the tape's lifetime.
    pub fn collect_grads(tape: &Tape<'_>, grads: &Gradients) -> Vec<(ParamId, Vec<f64>)> {
        tape.bound_params()
            .into_iter()
            .filter_map(|(key, var)| grads.get(var).map(|g| (ParamId(key), g.to_vec())))
            .collect()
    }

    /// Adds collected gradients to each parameter's `grad`.
    pub fn accumulate_grads(&mut self, grads: &[(ParamId, Vec<f64>)]) -> Result<()> {
        for (id, g) in grads {
            self.tensors[id.0].accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Global L2 norm of the stored gradients.
    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(Tensor::grad)
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn entries(&self) -> Vec<(String, Tensor)> {
        self.iter()
            .map(|(_, n, t)| {
                let clean = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor");
                (n.to_string(), clean)
            })
            .collect()
    }

    /// Overwrites values from `entries`; every parameter must be present with its shape.
    pub fn load_entries(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        let by_name: HashMap<&str, &Tensor> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = by_name
                .get(name.as_str())
                .ok_or_else(|| TensorError::Checkpoint(format!("missing parameter {name}")))?;
            if src.shape() != t.shape() {
                return Err(TensorError::Shape {
                    op: "load_entries",
                    lhs: t.shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            t.data_mut().copy_from_slice(src.data());
            t.zero_grad();
        }
        Ok(())
    }
}
