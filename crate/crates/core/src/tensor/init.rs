use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `[-sqrt(6 / fan_in), sqrt(6 / fan_in)]`.
    Kaiming { fan_in: usize },
    Zeros,
    Ones,
}

/// Declares one named parameter of a model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn kaiming(name: impl Into<String>, shape: &[usize], fan_in: usize) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init: Init::Kaiming { fan_in },
        }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init: Init::Zeros,
        }
    }

    pub fn ones(name: impl Into<String>, shape: &[usize]) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init: Init::Ones,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Kaiming-uniform (fan-in) initialization drawn from `rng`.
pub fn kaiming_init<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Rng64) -> Result<Tensor<T>> {
    if fan_in == 0 {
        return Err(Error::Config("kaiming_init: fan_in must be at least 1".into()));
    }
    let bound = kaiming_bound(fan_in);
    Ok(Tensor::from_fn(shape, |_| {
        T::from_f64((2.0 * rng.next_f64() - 1.0) * bound)
    }))
}
