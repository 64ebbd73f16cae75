//! Named parameter storage shared by the model stack: values with paired
//! gradient buffers, optional EMA shadow copies (the momentum branch), and
//! helpers to bind parameters into a [`Graph`] as leaves and to pull leaf
//! gradients back out after `backward`.

use std::collections::HashMap;

use super::graph::{Graph, Tensor};
use super::real::Real;
use crate::error::{Error, Result};

/// Handle into a [`ParamStore`]; stable for the store's lifetime.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param<T: Real> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    /// Accumulated gradient; zeroed by `zero_grads`.
    pub grad: Vec<T>,
    /// EMA twin, present only on parameters the momentum branch mirrors.
    /// Never receives gradients.
    pub shadow: Option<Vec<T>>,
}

/// All learnable parameters of a model, in insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Real> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

/// Per-graph map from [`ParamId`] to the leaf tensor bound for it.
pub struct Binding {
    slots: Vec<Option<Tensor>>,
}

impl Binding {
    /// Bind pre-built tensors in parameter insertion order (finite-difference
    /// harnesses bind their probe leaves this way).
    pub fn from_slots(slots: Vec<Option<Tensor>>) -> Self {
        Binding { slots }
    }
}

impl Binding {
    /// The bound tensor for `id`; parameters outside the binding's scope
    /// (e.g. unshadowed params in a momentum binding) are a caller bug.
    pub fn tensor(&self, id: ParamId) -> Tensor {
        self.slots[id.0].expect("parameter not bound in this graph")
    }

    pub fn get(&self, id: ParamId) -> Option<Tensor> {
        self.slots[id.0]
    }

    /// Per-slot leaf gradients after a backward pass, in store order.
    /// Lets workers ship gradients out of a graph they own.
    pub fn grads<T: Real>(&self, g: &Graph<T>) -> Vec<Option<Vec<T>>> {
        self.slots
            .iter()
            .map(|s| s.and_then(|t| g.grad(t).map(<[T]>::to_vec)))
            .collect()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Insert a parameter; `with_shadow` also stores an EMA copy initialized
    /// to the same value (momentum = online at step 0).
    pub fn insert(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        value: Vec<T>,
        with_shadow: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter {name}")));
        }
        let numel: usize = shape.iter().product();
        if numel != value.len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::contract(format!(
                "parameter {name}: shape {shape:?} does not cover {} values",
                value.len()
            )));
        }
        let shadow = with_shadow.then(|| value.clone());
        let grad = vec![T::ZERO; value.len()];
        self.params.push(Param {
            name: name.clone(),
            shape: shape.to_vec(),
            value,
            grad,
            shadow,
        });
        self.by_name.insert(name, self.params.len() - 1);
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::ZERO);
        }
    }

    /// θ_shadow ← m·θ_shadow + (1−m)·θ_online, for every shadowed parameter.
    pub fn ema_update(&mut self, m: T) {
        for p in &mut self.params {
            if let Some(shadow) = &mut p.shadow {
                for (s, &v) in shadow.iter_mut().zip(&p.value) {
                    *s = m * *s + (T::ONE - m) * v;
                }
            }
        }
    }

    /// Bind every parameter's current value into `g` as a leaf.
    /// `trainable` controls whether the leaves receive gradients.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<Binding> {
        let mut slots = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let t = g.leaf(p.value.clone(), &p.shape, trainable)?;
            slots.push(Some(t));
        }
        Ok(Binding { slots })
    }

    /// Bind the EMA shadows (momentum branch) as gradient-free leaves.
    /// Unshadowed parameters stay unbound.
    pub fn bind_shadows(&self, g: &mut Graph<T>) -> Result<Binding> {
        let mut slots = Vec::with_capacity(self.params.len());
        for p in &self.params {
            match &p.shadow {
                Some(s) => slots.push(Some(g.leaf(s.clone(), &p.shape, false)?)),
                None => slots.push(None),
            }
        }
        Ok(Binding { slots })
    }

    /// Pull leaf gradients from `g` into the paired grad buffers, scaled.
    /// Unreached leaves contribute nothing.
    pub fn accumulate_grads(&mut self, g: &Graph<T>, binding: &Binding, scale: T) {
        for (i, p) in self.params.iter_mut().enumerate() {
            if let Some(t) = binding.slots[i] {
                if let Some(leaf_grad) = g.grad(t) {
                    for (acc, &gv) in p.grad.iter_mut().zip(leaf_grad) {
                        *acc += scale * gv;
                    }
                }
            }
        }
    }

    /// Add pre-extracted gradients (see [`Binding::grads`]), scaled.
    pub fn accumulate_grad_vecs(&mut self, grads: &[Option<Vec<T>>], scale: T) {
        for (p, gv) in self.params.iter_mut().zip(grads) {
            if let Some(gv) = gv {
                for (acc, &v) in p.grad.iter_mut().zip(gv) {
                    *acc += scale * v;
                }
            }
        }
    }

    /// Mutable iteration in insertion order (optimizer steps).
    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }
}
