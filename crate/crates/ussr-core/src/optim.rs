//! Parameter storage and plain SGD with global-norm gradient clipping.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::graph::Gradients;
use crate::tensor::Tensor;

/// Named parameter tensors. Iteration order is the sorted name order, which
/// keeps every loop over parameters deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        self.entries.insert(String::from(name), value);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }
}

/// Euclidean norm over every gradient entry, treated as one flat vector.
pub fn global_norm(grads: &Gradients) -> f64 {
    let mut sq = 0.0;
    for t in grads.params.values() {
        for &v in t.data() {
            sq += v * v;
        }
    }
    crate::fmath::sqrt(sq)
}

/// One SGD step: `p -= lr * g`, after scaling all gradients by
/// `clip / norm` when the global norm exceeds `clip`. With a clip of 1 and a
/// gradient norm of 10 the applied update uses one tenth of each gradient.
///
/// Only parameters named in `update` move; everything else keeps its exact
/// bit pattern. Pass `None` to update every parameter that has a gradient.
pub fn sgd_step(
    params: &mut ParamSet,
    grads: &Gradients,
    lr: f64,
    clip: f64,
    update: Option<&dyn Fn(&str) -> bool>,
) -> Result<()> {
    let norm = global_norm(grads);
    let scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
    let step = lr * scale;
    if !step.is_finite() {
        return Err(CoreError::invalid("non-finite SGD step size"));
    }
    let names: Vec<String> = grads
        .params
        .keys()
        .filter(|n| update.map(|f| f(n)).unwrap_or(true))
        .cloned()
        .collect();
    for name in names {
        let g = &grads.params[&name];
        let p = params
            .get_mut(&name)
            .ok_or(CoreError::Missing { kind: "param", name: name.clone() })?;
        if p.shape() != g.shape() {
            return Err(CoreError::invalid(alloc::format!(
                "gradient shape {:?} does not match param '{name}' {:?}",
                g.shape(),
                p.shape()
            )));
        }
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= step * gv;
        }
    }
    Ok(())
}
