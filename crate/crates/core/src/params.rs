//! Named parameter storage and initialization.

use std::ops::Index;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a parameter within its [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub trainable: bool,
    /// Interval the optimizer projects this parameter back onto after a step.
    pub clamp: Option<(f64, f64)>,
}

/// All learnable state of a model, in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<S> {
    params: Vec<Param<S>>,
}

impl<S> Default for ParamSet<S> {
    fn default() -> Self {
        ParamSet { params: Vec::new() }
    }
}

/// Graph leaves for every parameter of a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// Wraps vars created elsewhere, one per parameter in set order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.params.push(Param { name, value, trainable: true, clamp: None });
        ParamId(self.params.len() - 1)
    }

    pub fn add_clamped(&mut self, name: impl Into<String>, value: Tensor<S>, lo: f64, hi: f64) -> ParamId {
        let id = self.add(name, value);
        self.params[id.0].clamp = Some((lo, hi));
        id
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<S>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Records every parameter as a graph leaf. Trainable parameters require
    /// gradients when `with_grad` is set; everything else is a constant.
    pub fn bind(&self, g: &mut Graph<S>, with_grad: bool) -> Bound {
        Bound(self.params.iter().map(|p| g.leaf(p.value.clone(), with_grad && p.trainable)).collect())
    }

    /// Projects clamped parameters back onto their intervals.
    pub fn apply_clamps(&mut self) {
        for p in &mut self.params {
            if let Some((lo, hi)) = p.clamp {
                let (lo, hi) = (S::lit(lo), S::lit(hi));
                for v in p.value.data_mut() {
                    *v = v.max(lo).min(hi);
                }
            }
        }
    }

    /// `name=norm` for every parameter, for divergence reports.
    pub fn norm_report(&self) -> String {
        self.params.iter().map(|p| format!("{}={:.4e}", p.name, p.value.norm().as_f64())).collect::<Vec<_>>().join(", ")
    }
}

/// Seeded parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn uniform<S: Scalar>(&mut self, shape: &[usize], bound: f64) -> Tensor<S> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape.to_vec(), |_| S::lit(rng.random_range(-bound..=bound)))
    }

    /// Fan-in scaled uniform init for layers followed by GELU.
    pub fn kaiming<S: Scalar>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<S> {
        self.uniform(shape, (6.0 / fan_in as f64).sqrt())
    }

    /// Unit-variance-preserving uniform init for linear maps.
    pub fn lecun<S: Scalar>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<S> {
        self.uniform(shape, (3.0 / fan_in as f64).sqrt())
    }
}
