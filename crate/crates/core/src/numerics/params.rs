//! Named parameter storage and binding onto a tape.

use std::collections::HashMap;
use std::ops::Index;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Param {
    name: String,
    value: Tensor,
    decay: bool,
}

/// Owns every learned tensor of a model, addressable by [`ParamId`] or name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. `decay` marks it for weight decay.
    ///
    /// Panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, decay });
        ParamId(self.params.len() - 1)
    }

    /// Weight initialized from `N(0, std^2)`.
    pub fn add_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut impl Rng) -> ParamId {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        self.add(name, Tensor::from_parts(shape.to_vec(), data), true)
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        self.add(name, Tensor::full(shape, value), false)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.params[id.0].decay
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.bind_where(tape, |_| true)
    }

    /// Records parameters; those rejected by `trainable` become constants.
    pub fn bind_where<'t>(&self, tape: &'t Tape, trainable: impl Fn(&str) -> bool) -> Bound<'t> {
        let vars = self.params.iter().map(|p| tape.leaf(p.value.clone(), trainable(&p.name))).collect();
        Bound { vars }
    }

    /// `(name, tensor)` pairs in registration order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }

    /// Overwrites values from `(name, tensor)` pairs; names and shapes must
    /// match exactly.
    pub fn load_named(&mut self, named: &[(String, Tensor)]) -> Result<(), String> {
        if named.len() != self.params.len() {
            return Err(format!("expected {} parameters, got {}", self.params.len(), named.len()));
        }
        for (name, t) in named {
            let id = self.id_of(name).ok_or_else(|| format!("unknown parameter {name}"))?;
            if self.get(id).shape() != t.shape() {
                return Err(format!("shape mismatch for {name}: {:?} vs {:?}", self.get(id).shape(), t.shape()));
            }
            *self.get_mut(id) = t.clone();
        }
        Ok(())
    }
}

/// Parameters recorded on one tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Index<ParamId> for Bound<'t> {
    type Output = Var<'t>;
    fn index(&self, id: ParamId) -> &Var<'t> {
        &self.vars[id.0]
    }
}

impl<'t> Bound<'t> {
    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Per-parameter gradients, `None` where exactly zero.
    pub fn grads(&self, g: &Gradients) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| g.get(v).cloned()).collect()
    }
}
