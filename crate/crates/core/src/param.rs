//! Named parameter storage.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

/// Identity of a [`ParamStore`] instance. Only used to route gradients back to
/// the store that owns a parameter; never influences numeric results.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct StoreId(u64);

impl StoreId {
    fn fresh() -> Self {
        StoreId(NEXT_STORE.fetch_add(1, Ordering::Relaxed))
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<S: Scalar = f64> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
    pub trainable: bool,
    /// Set when a backward pass delivered a gradient since the last optimizer step.
    pub(crate) touched: bool,
}

impl<S: Scalar> Parameter<S> {
    pub fn has_grad(&self) -> bool {
        self.touched
    }
}

/// Ordered collection of named parameters. Insertion order is the canonical order.
#[derive(Debug)]
pub struct ParamStore<S: Scalar = f64> {
    id: StoreId,
    params: Vec<Parameter<S>>,
    index: HashMap<String, ParamId>,
}

impl<S: Scalar> Clone for ParamStore<S> {
    fn clone(&self) -> Self {
        Self {
            id: StoreId::fresh(),
            params: self.params.clone(),
            index: self.index.clone(),
        }
    }
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            id: StoreId::fresh(),
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn id(&self) -> StoreId {
        self.id
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape().to_vec());
        self.params.push(Parameter {
            name: name.clone(),
            value,
            grad,
            trainable,
            touched: false,
        });
        self.index.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<S> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<S>> {
        self.lookup(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Overwrite a parameter value, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<S>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::dim("set_value", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Add `grad` into the stored gradient and mark the parameter as touched.
    /// Frozen parameters ignore gradients.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor<S>) -> Result<()> {
        let p = &mut self.params[id.0];
        if !p.trainable {
            return Ok(());
        }
        p.grad.add_assign(grad)?;
        p.touched = true;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = S::zero());
            p.touched = false;
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}
