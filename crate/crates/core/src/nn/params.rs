use std::cell::RefCell;
use std::collections::HashMap;
use std::ops::Deref;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tape, Tensor, Var};

/// Index of a named tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S: Float> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    index: HashMap<String, ParamId>,
}

impl<S: Float> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        Ok(id)
    }

    /// Adds a tensor with entries drawn from `uniform(−1/√fan_in, 1/√fan_in)`.
    pub fn uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| S::from_f64(rng.random_range(-bound..bound)))
            .collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn constant(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        value: f64,
    ) -> Result<ParamId> {
        self.add(name, Tensor::full(shape.to_vec(), S::from_f64(value)))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<S>)> {
        self.ids()
            .map(move |id| (id, self.names[id.0].as_str(), &self.tensors[id.0]))
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces the value of `id`, keeping the shape.
    pub fn set(&mut self, id: ParamId, data: Vec<S>) -> Result<()> {
        let t = &mut self.tensors[id.0];
        if data.len() != t.numel() {
            return Err(Error::dim("param set", t.shape(), &[data.len()]));
        }
        t.data_mut().copy_from_slice(&data);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn accumulate(&mut self, grads: &ParamGrads<S>) -> Result<()> {
        for (i, g) in grads.grads.iter().enumerate() {
            if let Some(g) = g {
                self.tensors[i].accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn cast<T: Float>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Gradients of one loss with respect to the parameters it touched.
#[derive(Debug, Clone)]
pub struct ParamGrads<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Float> ParamGrads<S> {
    pub fn empty(len: usize) -> Self {
        Self {
            grads: vec![None; len],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[S]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Parameters that received a gradient.
    pub fn touched(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.grads
            .iter()
            .enumerate()
            .filter(|(_, g)| g.is_some())
            .map(|(i, _)| ParamId(i))
    }

    pub fn add_assign(&mut self, other: &ParamGrads<S>) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.iter_mut().zip(t).for_each(|(a, &b)| *a += b),
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, c: S) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= c);
        }
    }
}

/// A tape bound to a parameter store: parameters are recorded as leaves on
/// first use and gradients are reported per [`ParamId`].
pub struct Graph<'a, S: Float> {
    tape: Tape<S>,
    store: &'a ParamStore<S>,
    bound: RefCell<Vec<Option<Var>>>,
}

impl<'a, S: Float> Graph<'a, S> {
    pub fn new(store: &'a ParamStore<S>) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn store(&self) -> &'a ParamStore<S> {
        self.store
    }

    pub fn tape(&self) -> &Tape<S> {
        &self.tape
    }

    pub fn param(&self, id: ParamId) -> Var {
        let mut bound = self.bound.borrow_mut();
        *bound[id.0].get_or_insert_with(|| self.tape.leaf(self.store.get(id)))
    }

    /// Parameters recorded on this graph so far.
    pub fn used(&self) -> Vec<ParamId> {
        self.bound
            .borrow()
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_some())
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub fn backward(&self, loss: Var) -> Result<ParamGrads<S>> {
        let grads = self.tape.backward(loss)?;
        let bound = self.bound.borrow();
        Ok(ParamGrads {
            grads: bound
                .iter()
                .map(|v| v.and_then(|v| grads.get(v).map(<[S]>::to_vec)))
                .collect(),
        })
    }
}

impl<S: Float> Deref for Graph<'_, S> {
    type Target = Tape<S>;

    fn deref(&self) -> &Tape<S> {
        &self.tape
    }
}
