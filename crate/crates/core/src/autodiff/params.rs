use indexmap::IndexMap;
use rand::Rng;

use crate::error::{FdaError, Result};

use super::tape::{Tape, Var};
use super::tensor::{Real, Tensor5};

/// Named parameters in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    params: IndexMap<String, Tensor5<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor5<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(FdaError::Config(format!("duplicate parameter name `{name}`")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor5<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor5<T>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor5<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor5<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor5::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        ParamStore { params: self.params.iter().map(|(k, v)| (k.clone(), Tensor5::zeros(v.shape()))).collect() }
    }

    /// Puts every parameter on the tape. With `trainable` false they become
    /// constants and no pullbacks are recorded for them.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound {
            vars: self.params.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable))).collect(),
        }
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn from_pairs<S: Into<String>>(pairs: impl IntoIterator<Item = (S, Var)>) -> Self {
        Bound { vars: pairs.into_iter().map(|(k, v)| (k.into(), v)).collect() }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| FdaError::Config(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`. For a kernel
/// `(Cout, Cin, k, k, k)` the fans are `Cin k³` and `Cout k³`.
pub fn glorot_uniform<T: Real, R: Rng>(shape: [usize; 5], rng: &mut R) -> Tensor5<T> {
    let receptive: usize = shape[2..].iter().product();
    let fan_in = shape[1] * receptive;
    let fan_out = shape[0] * receptive;
    let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
    Tensor5::new(shape, data).expect("length matches shape")
}
