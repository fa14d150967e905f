//! Heaviside step functions and their smooth approximations.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Smoothing width used with [`HeavisideKind::Tanh`] by default.
pub const DEFAULT_TANH_EPSILON: f64 = 1.0 / 20.0;
/// Smoothing width used with [`HeavisideKind::Arctan`] by default.
pub const DEFAULT_ARCTAN_EPSILON: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HeavisideKind {
    /// Unit step, `1` for `z >= 0`.
    Exact,
    /// `½(1 + (2/π)·atan(z/ε))`.
    Arctan { epsilon: f64 },
    /// `½(1 + tanh(z/ε))`.
    Tanh { epsilon: f64 },
}

impl Default for HeavisideKind {
    fn default() -> Self {
        HeavisideKind::Tanh {
            epsilon: DEFAULT_TANH_EPSILON,
        }
    }
}

impl HeavisideKind {
    pub fn tanh(epsilon: f64) -> Result<Self> {
        Self::Tanh { epsilon }.validated()
    }

    pub fn arctan(epsilon: f64) -> Result<Self> {
        Self::Arctan { epsilon }.validated()
    }

    pub fn validated(self) -> Result<Self> {
        match self {
            HeavisideKind::Exact => Ok(self),
            HeavisideKind::Arctan { epsilon } | HeavisideKind::Tanh { epsilon } => {
                if epsilon.is_finite() && epsilon > 0.0 {
                    Ok(self)
                } else {
                    Err(Error::InvalidParameter(format!(
                        "heaviside epsilon must be positive, got {epsilon}"
                    )))
                }
            }
        }
    }

    pub fn is_smooth(&self) -> bool {
        !matches!(self, HeavisideKind::Exact)
    }

    pub fn epsilon(&self) -> Option<f64> {
        match *self {
            HeavisideKind::Exact => None,
            HeavisideKind::Arctan { epsilon } | HeavisideKind::Tanh { epsilon } => Some(epsilon),
        }
    }

    /// Short name as used on the command line.
    pub fn name(&self) -> &'static str {
        match self {
            HeavisideKind::Exact => "hf",
            HeavisideKind::Arctan { .. } => "ahf",
            HeavisideKind::Tanh { .. } => "mahf",
        }
    }

    pub fn heaviside(&self, z: f64) -> f64 {
        match *self {
            HeavisideKind::Exact => {
                if z >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            HeavisideKind::Arctan { epsilon } => 0.5 * (1.0 + (2.0 / PI) * (z / epsilon).atan()),
            HeavisideKind::Tanh { epsilon } => 0.5 * (1.0 + (z / epsilon).tanh()),
        }
    }

    /// Derivative of [`heaviside`](Self::heaviside) in `z`.
    pub fn delta(&self, z: f64) -> Result<f64> {
        match *self {
            HeavisideKind::Exact => Err(Error::UnsupportedDerivative),
            HeavisideKind::Arctan { epsilon } => Ok(epsilon / (PI * (epsilon * epsilon + z * z))),
            HeavisideKind::Tanh { epsilon } => {
                let t = (z / epsilon).tanh();
                Ok((1.0 - t) * (1.0 + t) / (2.0 * epsilon))
            }
        }
    }
}

pub fn heaviside(kind: HeavisideKind, z: f64) -> f64 {
    kind.heaviside(z)
}

pub fn delta(kind: HeavisideKind, z: f64) -> Result<f64> {
    kind.delta(z)
}
