use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`] and inside the var slice
/// returned by [`ParamStore::bind`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

impl ParamId {
    pub fn of<'t>(self, bound: &[Var<'t>]) -> Var<'t> {
        bound[self.0]
    }
}

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(Arc::new(value));
        ParamId(id)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::full(shape, 1.0))
    }

    /// Normal(0, std²) truncated at ±2 std.
    pub fn trunc_normal<R: Rng + ?Sized>(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut R) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let z: f64 = StandardNormal.sample(rng);
                if z.abs() <= 2.0 {
                    break z * std;
                }
            })
            .collect();
        self.add(name, Tensor::new(shape, data).expect("shape"))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar learnables.
    pub fn count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, v)| v.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    /// Mutable access; copies the buffer only if a tape still shares it.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    /// Replaces the value of `name`, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?
            .0;
        if self.values[id].shape() != value.shape() {
            return Err(Error::dim("ParamStore::set", self.values[id].shape(), value.shape()));
        }
        self.values[id] = Arc::new(value);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().map(|v| &**v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Registers every parameter on `tape` as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.values.iter().map(|v| tape.shared(Arc::clone(v), true)).collect()
    }

    /// Registers every parameter as a constant (inference).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.values.iter().map(|v| tape.shared(Arc::clone(v), false)).collect()
    }

    /// Snapshot of the values in store order.
    pub fn tensors(&self) -> Vec<Tensor> {
        self.values.iter().map(|v| (**v).clone()).collect()
    }

    /// Store with the same names whose values come from `values` (store order).
    pub fn with_values(&self, values: Vec<Tensor>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::Config(format!("expected {} tensors, got {}", self.values.len(), values.len())));
        }
        let mut out = self.clone();
        for (i, v) in values.into_iter().enumerate() {
            if v.shape() != out.values[i].shape() {
                return Err(Error::dim("ParamStore::with_values", out.values[i].shape(), v.shape()));
            }
            out.values[i] = Arc::new(v);
        }
        Ok(out)
    }

    /// Sets every value to zero, keeping shapes.
    pub fn zero_all(&mut self) {
        for v in &mut self.values {
            Arc::make_mut(v).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }
}
