//! Named parameters and the per-forward session that binds them to a tape.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the optimizer treats a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Decayed weights: conv kernels, projections, fusion scales.
    Weight,
    Bias,
    /// Normalization gains and biases.
    Norm,
    /// Non-trainable state such as running statistics.
    Buffer,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        self != ParamKind::Buffer
    }

    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<S = f32> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<S>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<S = f32> {
    params: Vec<Parameter<S>>,
    index: HashMap<String, ParamId>,
}

impl<S: Float> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor<S>, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::contract("param_store", format!("duplicate parameter name {name}")));
        }
        tensor.set_requires_grad(kind.trainable());
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter { name, kind, tensor });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<S> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<S>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter<S>> {
        self.id(name).map(|id| &mut self.params[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<S>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind.trainable())
            .map(|p| p.tensor.len())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub fn cast<T: Float>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    kind: p.kind,
                    tensor: p.tensor.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// One forward (and optionally backward) pass: a fresh tape plus lazily
/// bound parameter leaves.
pub struct Session<'a, S: Float> {
    pub tape: Tape<S>,
    store: &'a mut ParamStore<S>,
    bound: HashMap<ParamId, Var>,
    train: bool,
    rng: ChaCha8Rng,
}

impl<'a, S: Float> Session<'a, S> {
    pub fn new(store: &'a mut ParamStore<S>, train: bool, seed: u64) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: HashMap::new(),
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn train(&self) -> bool {
        self.train
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn store(&self) -> &ParamStore<S> {
        self.store
    }

    /// Tape leaf for a parameter; bound once per session so that gradients
    /// from every use accumulate in one place.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).tensor.clone());
        self.bound.insert(id, v);
        v
    }

    /// Inverted dropout in training mode, identity otherwise.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !self.train {
            return Ok(x);
        }
        self.tape.dropout(x, p, &mut self.rng)
    }

    pub fn buffer(&self, id: ParamId) -> &Tensor<S> {
        &self.store.get(id).tensor
    }

    pub fn buffer_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.store.get_mut(id).tensor
    }

    /// Backpropagates `loss` and adds the resulting gradients into the store.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss)?;
        let mut bound: Vec<_> = self.bound.iter().map(|(&id, &v)| (id, v)).collect();
        bound.sort_by_key(|(id, _)| *id);
        for (id, v) in bound {
            if let Some(g) = self.tape.grad(v) {
                self.store.get_mut(id).tensor.accumulate_grad(g);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("a.weight", Tensor::zeros(vec![2]), ParamKind::Weight).unwrap();
        assert!(s.add("a.weight", Tensor::zeros(vec![2]), ParamKind::Weight).is_err());
        s.add("a.running_mean", Tensor::zeros(vec![2]), ParamKind::Buffer).unwrap();
        assert_eq!(s.trainable_count(), 2);
    }

    #[test]
    fn shared_param_accumulates_both_uses() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap(), ParamKind::Weight).unwrap();
        let mut sess = Session::new(&mut s, true, 0);
        let a = sess.param(id);
        let b = sess.param(id);
        assert_eq!(a, b);
        let y = sess.tape.add(a, b).unwrap();
        let l = sess.tape.sum_all(y).unwrap();
        sess.backward(l).unwrap();
        assert_eq!(s.get(id).tensor.grad().unwrap(), &[2.0, 2.0]);
    }
}
