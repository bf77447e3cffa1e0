//! Named parameter storage and its binding onto a tape.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Position of a tensor inside a [`WeightStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Insertion-ordered map of slash-delimited names to tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightStore<T: Scalar> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for WeightStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> WeightStore<T> {
    pub fn new() -> Self {
        Self { entries: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(FormatError::DuplicateName(name).into());
        }
        let (i, _) = self.entries.insert_full(name, value);
        Ok(ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total element count over all tensors.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).expect("param id out of range").0
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Copy values from `other`, which must hold the same names with the same shapes.
    pub fn assign_from(&mut self, other: &WeightStore<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Config(format!("weight count {} does not match network ({})", other.len(), self.len())));
        }
        for (name, dst) in self.entries.iter_mut() {
            let src = other.get(name).ok_or_else(|| Error::Config(format!("missing weight `{name}`")))?;
            if src.dims() != dst.dims() {
                return Err(Error::Config(format!(
                    "weight `{name}` has shape {:?}, network expects {:?}",
                    src.dims(),
                    dst.dims()
                )));
            }
            *dst = src.clone();
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> WeightStore<U> {
        WeightStore { entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Push every tensor onto `tape` as a leaf, in store order.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Bound {
        Bound { vars: self.entries.values().map(|t| tape.leaf(t.clone(), requires_grad)).collect() }
    }
}

/// Tape variables for every entry of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps variables already on a tape, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

pub const INIT_STD: f64 = 0.02;

/// Standard deviation rule for convolution weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Truncated normal with std 0.02.
    #[default]
    TruncNormal,
    /// Truncated normal with std `1/sqrt(fan_in)`.
    FanIn,
}

/// Registers freshly initialized tensors under a hierarchical prefix.
pub struct ParamBuilder<'a, T: Scalar> {
    store: &'a mut WeightStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    init: InitScheme,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut WeightStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng, prefix: String::new(), init: InitScheme::default() }
    }

    pub fn with_init(mut self, init: InitScheme) -> Self {
        self.init = init;
        self
    }

    /// Weight std for a convolution with the given fan-in.
    pub fn conv_std(&self, fan_in: usize) -> f64 {
        match self.init {
            InitScheme::TruncNormal => INIT_STD,
            InitScheme::FanIn => 1.0 / (fan_in.max(1) as f64).sqrt(),
        }
    }

    pub fn scope<'b>(&'b mut self, name: &str) -> ParamBuilder<'b, T> {
        let prefix = self.path(name);
        ParamBuilder { store: self.store, rng: self.rng, prefix, init: self.init }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}/{}", self.prefix, name)
        }
    }

    /// Normal(0, std) truncated to ±2·std by resampling.
    pub fn trunc_normal(&mut self, name: &str, dims: &[usize], std: f64) -> Result<ParamId> {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(dims, |_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break T::lit(z * std);
            }
        });
        self.store.insert(self.path(name), t)
    }

    pub fn uniform(&mut self, name: &str, dims: &[usize], bound: f64) -> Result<ParamId> {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(dims, |_| T::lit(rng.gen_range(-bound..=bound)));
        self.store.insert(self.path(name), t)
    }

    pub fn zeros(&mut self, name: &str, dims: &[usize]) -> Result<ParamId> {
        self.store.insert(self.path(name), Tensor::zeros(dims))
    }

    pub fn ones(&mut self, name: &str, dims: &[usize]) -> Result<ParamId> {
        self.store.insert(self.path(name), Tensor::ones(dims))
    }
}
