//! Named parameter collections and their binding onto a tape.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::diff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Ordered map from parameter name to tensor.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real> {
    names: Vec<String>,
    values: Vec<Arc<Tensor<T>>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.values[i] = Arc::new(value),
            None => {
                self.index.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.values.push(Arc::new(value));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &*self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let i = *self.index.get(name)?;
        Some(Arc::make_mut(&mut self.values[i]))
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::shape(format!("missing parameter {name}")))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter().map(|v| &**v))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (n, v) in self.iter() {
            out.insert(n, v.cast());
        }
        out
    }

    /// Registers every entry on `tape`, tracked when `track(name)` holds.
    pub fn bind(&self, tape: &Tape<T>, track: impl Fn(&str) -> bool) -> Bound<T> {
        self.bind_where(tape, |_| true, track)
    }

    /// Like [`bind`](Self::bind) but only for names accepted by `include`.
    pub fn bind_where(
        &self,
        tape: &Tape<T>,
        include: impl Fn(&str) -> bool,
        track: impl Fn(&str) -> bool,
    ) -> Bound<T> {
        let mut vars = HashMap::with_capacity(self.len());
        for (name, value) in self.names.iter().zip(&self.values) {
            if include(name) {
                vars.insert(name.clone(), tape.leaf(Arc::clone(value), track(name)));
            }
        }
        Bound { vars }
    }
}

/// Parameters registered on one tape.
pub struct Bound<T: Real> {
    vars: HashMap<String, Var<T>>,
}

impl<T: Real> Bound<T> {
    pub fn get(&self, name: &str) -> Result<&Var<T>> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::shape(format!("missing parameter {name}")))
    }

    /// Entries sorted by name.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<T>)> {
        let mut v: Vec<_> = self.vars.iter().collect();
        v.sort_by(|a, b| a.0.cmp(b.0));
        v.into_iter()
    }

    /// Merges another binding, prefixing its names.
    pub fn extend_prefixed(&mut self, prefix: &str, other: Bound<T>) {
        for (k, v) in other.vars {
            self.vars.insert(format!("{prefix}{k}"), v);
        }
    }

    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var<T>)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn empty() -> Self {
        Self {
            vars: HashMap::new(),
        }
    }
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn fan_in_uniform<T: Real, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| T::c(rng.random_range(-bound..bound)))
}
