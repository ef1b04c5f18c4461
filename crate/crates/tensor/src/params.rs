use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Parameter tensors keyed by a dotted path such as `block3.ssm.proj.w`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

/// Per-path gradients, one entry for every trainable parameter.
pub type GradMap = BTreeMap<String, Tensor>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor, trainable: bool) -> Result<()> {
        let path = path.into();
        if self.params.contains_key(&path) {
            return Err(TensorError::DuplicatePath(path));
        }
        self.params.insert(path, Param { value, trainable });
        Ok(())
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.params
            .get(path)
            .map(|p| &p.value)
            .ok_or_else(|| TensorError::UnknownPath(path.to_string()))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(path)
            .map(|p| &mut p.value)
            .ok_or_else(|| TensorError::UnknownPath(path.to_string()))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.params.contains_key(path)
    }

    pub fn is_trainable(&self, path: &str) -> bool {
        self.params.get(path).is_some_and(|p| p.trainable)
    }

    pub fn set_trainable(&mut self, path: &str, trainable: bool) -> Result<()> {
        self.params
            .get_mut(path)
            .map(|p| p.trainable = trainable)
            .ok_or_else(|| TensorError::UnknownPath(path.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Places every parameter on `tape`; trainable ones as differentiable leaves.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        let vars = self
            .params
            .iter()
            .map(|(k, p)| {
                let v = if p.trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                };
                (k.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    /// Collects gradients for every trainable parameter; untouched ones get zeros.
    pub fn gradients(&self, bound: &BoundParams<'_>, grads: &Gradients) -> GradMap {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, p)| {
                let g = bound
                    .vars
                    .get(k)
                    .and_then(|v| grads.get(*v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
                (k.clone(), g)
            })
            .collect()
    }
}

/// Tape handles for a [`ParamStore`].
pub struct BoundParams<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn var(&self, path: &str) -> Result<Var<'t>> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| TensorError::UnknownPath(path.to_string()))
    }
}
