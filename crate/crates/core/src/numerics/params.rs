use std::collections::HashMap;

use super::real::Real;
use super::rng::Rng;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to one tensor of a [`ParameterSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// How a parameter is filled when a model is first built.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Uniform in `[-bound, bound)`.
    Uniform(f64),
}

/// Name, shape and initializer of one parameter, before allocation.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Collects parameter declarations and hands out ids in declaration order.
#[derive(Clone, Debug, Default)]
pub struct ParamRegistry {
    specs: Vec<ParamSpec>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn declare(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        let name = name.into();
        debug_assert!(self.specs.iter().all(|s| s.name != name), "duplicate parameter {name}");
        self.specs.push(ParamSpec { name, shape: shape.to_vec(), init });
        ParamId(self.specs.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn count(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    /// Allocates every declared tensor, drawing in declaration order.
    pub fn initialize<R: Real>(&self, rng: &mut Rng) -> ParameterSet<R> {
        let mut set = ParameterSet::default();
        for spec in &self.specs {
            let n = spec.numel();
            let data: Vec<R> = match spec.init {
                Init::Zeros => vec![R::zero(); n],
                Init::Constant(v) => vec![R::from_f64_lossy(v); n],
                Init::Uniform(b) => (0..n).map(|_| R::from_f64_lossy(rng.uniform_in(-b, b))).collect(),
            };
            let tensor = Tensor::new(spec.shape.clone(), data).expect("declared shape");
            set.push(spec.name.clone(), tensor).expect("unique names");
        }
        set
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet<R> {
    names: Vec<String>,
    tensors: Vec<Tensor<R>>,
    index: HashMap<String, usize>,
}

impl<R: Real> ParameterSet<R> {
    pub fn new() -> Self {
        ParameterSet { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<R>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Usage(format!("parameter `{name}` registered twice")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<R> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<R> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<R>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<R>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors(&self) -> &[Tensor<R>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<R>] {
        &mut self.tensors
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn norm_squared(&self) -> f64 {
        self.tensors.iter().map(Tensor::norm_squared).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Largest elementwise absolute difference to a set of the same layout.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    /// True when both sets hold the same names, shapes and bit patterns.
    pub fn bit_identical(&self, other: &Self) -> bool {
        self.names == other.names
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| {
                        x.to_f64_lossless().to_bits() == y.to_f64_lossless().to_bits()
                    })
            })
    }
}

/// Per-parameter gradients aligned with a [`ParameterSet`].
///
/// `None` marks a parameter the recorded computation never read.
#[derive(Clone, Debug)]
pub struct Gradients<R> {
    slots: Vec<Option<Tensor<R>>>,
}

impl<R: Real> Gradients<R> {
    pub fn empty(len: usize) -> Self {
        Gradients { slots: (0..len).map(|_| None).collect() }
    }

    pub fn from_slots(slots: Vec<Option<Tensor<R>>>) -> Self {
        Gradients { slots }
    }

    /// Zero-filled gradients shaped like `params`.
    pub fn zeros_like(params: &ParameterSet<R>) -> Self {
        Gradients { slots: params.tensors().iter().map(|t| Some(Tensor::zeros(t.shape()))).collect() }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<R>> {
        self.slots.get(id.0).and_then(Option::as_ref)
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Tensor<R>> {
        self.slots.get_mut(id.0).and_then(Option::as_mut)
    }

    pub fn set(&mut self, id: ParamId, g: Tensor<R>) {
        self.slots[id.0] = Some(g);
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<R>)> {
        self.slots.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor<R>)> {
        self.slots.iter_mut().enumerate().filter_map(|(i, g)| g.as_mut().map(|g| (ParamId(i), g)))
    }

    /// Global L2 norm over every present slot, accumulated in `f64`.
    pub fn global_norm(&self) -> f64 {
        self.iter().map(|(_, g)| g.norm_squared()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|(_, g)| g.is_finite())
    }

    pub fn scale(&mut self, s: R) {
        for (_, g) in self.iter_mut() {
            g.scale_assign(s);
        }
    }

    /// Elementwise sum; a slot present on either side is present in the result.
    pub fn add(&mut self, other: &Gradients<R>) {
        for (i, slot) in other.slots.iter().enumerate() {
            if let Some(g) = slot {
                match &mut self.slots[i] {
                    Some(mine) => mine.add_assign(g),
                    empty => *empty = Some(g.clone()),
                }
            }
        }
    }
}
