use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type ParamId = usize;

#[derive(Clone, Debug)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub value: Arc<Tensor<T>>,
    pub grad: Option<Tensor<T>>,
    pub trainable: bool,
}

/// Named parameter table. Names are unique; ids are insertion indices.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar> {
    items: Vec<Parameter<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { items: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name `{name}`")));
        }
        let id = self.items.len();
        self.index.insert(name.clone(), id);
        self.items.push(Parameter { name, value: Arc::new(value), grad: None, trainable: true });
        Ok(id)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::full(shape, T::one()))
    }

    /// Uniform fan-in initialization, bound `1/sqrt(fan_in)`.
    pub fn fan_in<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.add(name, Tensor::uniform(shape, bound, rng))
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.items[id]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.items[id].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.items.iter().enumerate()
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        self.items[id].value.expect_shape(value.shape())?;
        self.items[id].value = Arc::new(value);
        Ok(())
    }

    /// Mutable access to a parameter's storage (copy-on-write if a live graph
    /// still holds it).
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.items[id].value)
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.items[id].grad.as_ref()
    }

    pub fn grad_mut(&mut self, id: ParamId) -> Option<&mut Tensor<T>> {
        self.items[id].grad.as_mut()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.items[id].trainable = trainable;
    }

    /// Marks exactly the parameters whose names satisfy `pred` as trainable.
    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool) {
        for p in &mut self.items {
            p.trainable = pred(&p.name);
        }
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.items {
            p.grad = None;
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor<T>) -> Result<()> {
        let p = &mut self.items[id];
        match &mut p.grad {
            Some(acc) => acc.add_assign(g),
            None => {
                p.value.expect_shape(g.shape())?;
                p.grad = Some(g.clone());
                Ok(())
            }
        }
    }

    /// Graph leaf for a parameter. It records gradients only when `record`
    /// is set and the parameter is trainable.
    pub fn var(&self, id: ParamId, record: bool) -> Var<T> {
        let p = &self.items[id];
        Var::param(p.value.clone(), id, record && p.trainable)
    }

    pub fn total_elements(&self) -> usize {
        self.items.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            items: self
                .items
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: Arc::new(p.value.cast()),
                    grad: p.grad.as_ref().map(|g| g.cast()),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}
