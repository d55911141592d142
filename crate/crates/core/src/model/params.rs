use rand::Rng;
use rand_distr::StandardNormal;

use super::config::InitScheme;
use crate::autodiff::{Real, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named trainable tensors, held as graph leaves.
///
/// Updating a parameter swaps in a fresh leaf, so graphs recorded earlier keep
/// the values they saw.
#[derive(Clone)]
pub struct ParamSet<T: Real> {
    names: Vec<String>,
    vars: Vec<Var<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet {
            names: Vec::new(),
            vars: Vec::new(),
        }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.vars.push(Var::leaf(value));
        ParamId(self.vars.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn var(&self, id: ParamId) -> &Var<T> {
        &self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<T>] {
        &self.vars
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.vars.iter().map(Var::value))
    }

    pub fn set(&mut self, index: usize, value: Tensor<T>) {
        assert_eq!(value.shape(), self.vars[index].shape(), "parameter {} changed shape", self.names[index]);
        self.vars[index] = Var::leaf(value);
    }

    pub fn scalar_count(&self) -> usize {
        self.vars.iter().map(|v| v.value().numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            vars: self.vars.iter().map(|v| Var::leaf(v.value().cast())).collect(),
        }
    }

    /// Replaces every tensor from a name-keyed table with identical shapes.
    pub fn load<'a>(&mut self, table: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>) -> Result<()> {
        let mut seen = vec![false; self.len()];
        for (name, value) in table {
            let idx = self
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::VersionMismatch(format!("unexpected parameter {name}")))?;
            if value.shape() != self.vars[idx].shape() {
                return Err(Error::VersionMismatch(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    value.shape(),
                    self.vars[idx].shape()
                )));
            }
            self.vars[idx] = Var::leaf(value.clone());
            seen[idx] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::VersionMismatch(format!("missing parameter {}", self.names[missing])));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.vars.iter().all(|v| v.value().is_finite())
    }
}

pub(crate) fn init_kernel<T: Real>(shape: [usize; 4], scheme: InitScheme, rng: &mut impl Rng) -> Tensor<T> {
    let fan_in = shape[1] * shape[2] * shape[3];
    let std = match scheme {
        InitScheme::TruncatedNormal(std) => std,
        InitScheme::He => (2.0 / fan_in as f64).sqrt(),
    };
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = rng.sample(StandardNormal);
        if v.abs() <= 2.0 {
            break T::of(v * std);
        }
    })
}
