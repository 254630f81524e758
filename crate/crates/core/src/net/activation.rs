use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::PlabError;

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

/// Elementwise nonlinearity applied by an activation node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
#[derive(Default)]
pub enum ActivationKind {
    #[default]
    Relu,
    LeakyRelu {
        slope: f64,
    },
    Sigmoid,
    Tanh,
    Swish,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 5] = [
        ActivationKind::Relu,
        ActivationKind::LeakyRelu {
            slope: DEFAULT_LEAKY_SLOPE,
        },
        ActivationKind::Sigmoid,
        ActivationKind::Tanh,
        ActivationKind::Swish,
    ];

    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            ActivationKind::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            ActivationKind::LeakyRelu { slope } => {
                if z > 0.0 {
                    z
                } else {
                    slope * z
                }
            }
            ActivationKind::Sigmoid => sigmoid(z),
            ActivationKind::Tanh => z.tanh(),
            ActivationKind::Swish => z * sigmoid(z),
        }
    }

    /// Derivative with respect to the pre-activation. ReLU uses 0 at the kink.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            ActivationKind::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::LeakyRelu { slope } => {
                if z > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            ActivationKind::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            ActivationKind::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            ActivationKind::Swish => {
                let s = sigmoid(z);
                s + z * s * (1.0 - s)
            }
        }
    }

    pub fn is_relu(self) -> bool {
        matches!(self, ActivationKind::Relu)
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActivationKind::Relu => write!(f, "relu"),
            ActivationKind::LeakyRelu { slope } if *slope == DEFAULT_LEAKY_SLOPE => {
                write!(f, "leaky-relu")
            }
            ActivationKind::LeakyRelu { slope } => write!(f, "leaky-relu:{slope}"),
            ActivationKind::Sigmoid => write!(f, "sigmoid"),
            ActivationKind::Tanh => write!(f, "tanh"),
            ActivationKind::Swish => write!(f, "swish"),
        }
    }
}

impl FromStr for ActivationKind {
    type Err = PlabError;

    /// Accepts `relu`, `leaky-relu`, `leaky-relu:<slope>`, `sigmoid`, `tanh`, `swish`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || PlabError::config("activation", format!("unknown activation `{s}`"));
        let lower = s.trim().to_ascii_lowercase().replace('_', "-");
        match lower.as_str() {
            "relu" => Ok(ActivationKind::Relu),
            "leaky-relu" => Ok(ActivationKind::LeakyRelu {
                slope: DEFAULT_LEAKY_SLOPE,
            }),
            "sigmoid" => Ok(ActivationKind::Sigmoid),
            "tanh" => Ok(ActivationKind::Tanh),
            "swish" | "silu" => Ok(ActivationKind::Swish),
            other => {
                let slope = other
                    .strip_prefix("leaky-relu:")
                    .ok_or_else(bad)?
                    .parse::<f64>()
                    .map_err(|_| bad())?;
                if !(slope.is_finite() && slope >= 0.0) {
                    return Err(bad());
                }
                Ok(ActivationKind::LeakyRelu { slope })
            }
        }
    }
}

impl TryFrom<String> for ActivationKind {
    type Error = PlabError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<ActivationKind> for String {
    fn from(a: ActivationKind) -> String {
        a.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_roundtrip() {
        for a in ActivationKind::ALL {
            assert_eq!(a.to_string().parse::<ActivationKind>().unwrap(), a);
        }
        assert_eq!(
            "leaky-relu:0.2".parse::<ActivationKind>().unwrap(),
            ActivationKind::LeakyRelu { slope: 0.2 }
        );
        assert!("gelu".parse::<ActivationKind>().is_err());
    }

    #[test]
    fn derivatives_match_central_differences() {
        let eps = 1e-6;
        for a in ActivationKind::ALL {
            for &z in &[-2.3, -0.4, 0.3, 1.7] {
                let fd = (a.apply(z + eps) - a.apply(z - eps)) / (2.0 * eps);
                assert!((fd - a.derivative(z)).abs() < 1e-8, "{a} at {z}");
            }
        }
    }

    #[test]
    fn relu_kink_has_zero_derivative() {
        assert_eq!(ActivationKind::Relu.derivative(0.0), 0.0);
        assert_eq!(ActivationKind::Relu.apply(-3.0), 0.0);
    }
}
