use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered parameter tensors. Names are dotted module paths such as
/// `eeg_encoder.layers.0.attn.q.weight`.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    shapes: Vec<Vec<usize>>,
    frozen: Vec<bool>,
    index: HashMap<String, usize>,
    shape_only: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// A store that records names and shapes without allocating values; used
    /// to validate transfers into configurations too large to materialize.
    pub fn shape_only() -> Self {
        Self {
            shape_only: true,
            ..Self::default()
        }
    }

    pub fn is_shape_only(&self) -> bool {
        self.shape_only
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let shape = value.shape().to_vec();
        let value = if self.shape_only { Tensor::scalar(0.0) } else { value };
        self.insert(name.into(), shape, value)
    }

    /// Registers `name` with `shape`; values come from `make` unless the store
    /// is shape-only.
    pub fn add_with(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        make: impl FnOnce() -> Tensor,
    ) -> ParamId {
        let value = if self.shape_only { Tensor::scalar(0.0) } else { make() };
        self.insert(name.into(), shape.to_vec(), value)
    }

    fn insert(&mut self, name: String, shape: Vec<usize>, value: Tensor) -> ParamId {
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        self.shapes.push(shape);
        self.frozen.push(false);
        ParamId(self.names.len() - 1)
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.shapes[id.0] {
            return Err(Error::Dimension {
                op: "param set",
                lhs: self.shapes[id.0].clone(),
                rhs: value.shape().to_vec(),
            });
        }
        if !self.shape_only {
            self.values[id.0] = value;
        }
        Ok(())
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.frozen[id.0] = frozen;
    }

    /// Freezes every parameter whose name starts with `prefix`; returns how many.
    pub fn freeze_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for (name, f) in self.names.iter().zip(self.frozen.iter_mut()) {
            if name.starts_with(prefix) {
                *f = true;
                n += 1;
            }
        }
        n
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn trainable_count(&self) -> usize {
        self.shapes
            .iter()
            .zip(&self.frozen)
            .filter(|(_, f)| !**f)
            .map(|(s, _)| s.iter().product::<usize>())
            .sum()
    }
}

/// Helper that registers parameters under a dotted prefix.
pub struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    pub fn xavier(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let rng = &mut *self.rng;
        self.store
            .add_with(name, &[rows, cols], || Tensor::xavier_uniform(rows, cols, rng))
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add_with(name, shape, || Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add_with(name, shape, || Tensor::ones(shape))
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let rng = &mut *self.rng;
        self.store
            .add_with(name, shape, || Tensor::randn(shape, std, rng))
    }
}

/// A tape together with the lazily bound parameters it reads. Frozen
/// parameters enter as constants and never receive gradients.
pub struct Graph<'a> {
    tape: Tape,
    params: &'a ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'a> Graph<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'a ParamStore {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.params.get(id).clone();
        let v = if self.params.is_frozen(id) {
            self.tape.constant(value)
        } else {
            self.tape.leaf(value)
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients of every bound trainable parameter.
    pub fn param_grads(&self) -> Vec<(ParamId, &Tensor)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.tape.grad(v).map(|g| (ParamId(i), g))
            })
            .collect()
    }

    pub fn param_grad(&self, id: ParamId) -> Option<&Tensor> {
        self.bound[id.0].and_then(|v| self.tape.grad(v))
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}
