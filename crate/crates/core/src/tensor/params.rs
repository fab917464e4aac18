use std::collections::HashMap;

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-parameter optimizer state.
#[derive(Debug, Clone, Default)]
pub struct Slots<F: Real> {
    pub momentum: Option<Tensor<F>>,
    pub adam_m: Option<Tensor<F>>,
    pub adam_v: Option<Tensor<F>>,
    pub steps: u64,
}

#[derive(Debug, Clone)]
pub struct Param<F: Real> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Option<Tensor<F>>,
    pub frozen: bool,
    pub slots: Slots<F>,
}

/// Ordered collection of named learnable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F: Real = f32> {
    params: Vec<Param<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Usage(format!("parameter `{name}` registered twice")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            grad: None,
            frozen: false,
            slots: Slots::default(),
        });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.params[id.0].grad.as_ref()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<F>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    /// Total scalar count of parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    /// Freeze or unfreeze every parameter whose name starts with `prefix`;
    /// returns how many tensors matched.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.frozen = frozen;
            n += 1;
        }
        n
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.frozen = true;
        }
    }

    /// Global L2 norm over the gradients of trainable parameters.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.data().iter().map(|v| v.f64() * v.f64()))
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale trainable gradients so their global norm is at most
    /// `max_norm`; returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = F::of(max_norm / norm);
            for p in self.params.iter_mut().filter(|p| !p.frozen) {
                if let Some(g) = &mut p.grad {
                    g.data_mut().iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        norm
    }

    /// Clears gradients; the next optimizer step requires a fresh backward.
    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor<F>) -> Result<()> {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(acc) => acc.add_assign(g),
            None => {
                if g.shape() != p.value.shape() {
                    return Err(Error::shape("accumulate_grad", p.value.shape(), g.shape()));
                }
                p.grad = Some(g.clone());
                Ok(())
            }
        }
    }

    /// Mark gradients as populated: participating parameters keep their
    /// accumulated gradient, the rest receive zeros.
    pub(crate) fn fill_missing_grads(&mut self) {
        for p in &mut self.params {
            if p.grad.is_none() {
                p.grad = Some(Tensor::zeros(p.value.shape().to_vec()));
            }
        }
    }

    /// Copy of the store converted to another scalar type; optimizer state
    /// is dropped.
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: None,
                    frozen: p.frozen,
                    slots: Slots::default(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}
