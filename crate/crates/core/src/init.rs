use serde::{Deserialize, Serialize};

use crate::error::{PlabError, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Distribution a parameter tensor was drawn from. Stored with every layer so
/// a reset can resample from the original distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitSpec {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    UniformFanIn {
        fan_in: usize,
    },
    Constant {
        value: f64,
    },
}

impl InitSpec {
    pub fn bound(&self) -> Option<f64> {
        match self {
            InitSpec::UniformFanIn { fan_in } => Some(1.0 / (*fan_in as f64).sqrt()),
            InitSpec::Constant { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            InitSpec::UniformFanIn { fan_in: 0 } => {
                Err(PlabError::InvalidShape("fan_in must be positive".into()))
            }
            InitSpec::Constant { value } if !value.is_finite() => Err(PlabError::InvalidShape(
                "constant init must be finite".into(),
            )),
            _ => Ok(()),
        }
    }

    /// One draw.
    pub fn draw(&self, rng: &mut RngState) -> f64 {
        match *self {
            InitSpec::UniformFanIn { fan_in } => {
                let b = 1.0 / (fan_in as f64).sqrt();
                rng.uniform(-b, b)
            }
            InitSpec::Constant { value } => value,
        }
    }
}

/// Draws a tensor i.i.d. from `spec`.
pub fn sample_init(spec: &InitSpec, shape: &[usize], rng: &mut RngState) -> Result<Tensor> {
    spec.validate()?;
    let mut t = Tensor::zeros(shape)?;
    for x in t.data_mut() {
        *x = spec.draw(rng);
    }
    Ok(t)
}
