use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named tensor that is either trainable or frozen.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
    pub grad: Option<Tensor>,
}

/// Owns every parameter of a model, addressed by [`ParamId`] or by unique name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            trainable,
            grad: None,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        let p = &mut self.params[id.0];
        p.trainable = trainable;
        if !trainable {
            p.grad = None;
        }
    }

    /// Adds `grad` into the parameter's gradient buffer. Frozen parameters ignore it.
    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) {
        let p = &mut self.params[id.0];
        if !p.trainable {
            return;
        }
        match &mut p.grad {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(grad) {
                    *a += b;
                }
            }
            None => {
                p.grad = Some(Tensor::new(p.value.shape(), grad.to_vec()).expect("grad shape"));
            }
        }
    }

    pub fn num_trainable_values(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    /// SHA-256 over names, shapes and raw little-endian values of the selected parameters.
    pub fn hash_where(&self, mut keep: impl FnMut(&Parameter) -> bool) -> String {
        let mut hasher = Sha256::new();
        for p in self.params.iter().filter(|p| keep(p)) {
            hasher.update(p.name.as_bytes());
            hasher.update([0u8]);
            for d in p.value.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}
