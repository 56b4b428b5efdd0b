//! Problem instances and their first-order oracles.

mod chain;
mod maxquad;
mod toy;

pub use chain::{chain_optimum, ChainMaxProblem};
pub use maxquad::{gen_maxquad, MaxQuadProblem, QuadPiece};
pub use toy::{ExpLinear, MaxSqLin, NormPlusAbs, ToyName};

use crate::oracle::FirstOrderOracle;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("unknown toy problem `{0}`")]
    UnknownToy(String),
    #[error("malformed instance: {0}")]
    Malformed(String),
}

/// Empirical Lipschitz smoothness constant between two points,
/// `2 [f(y) - f(x) - <f'(x), y - x>] / ||y - x||^2`.
///
/// Returns `None` for zero displacement rather than a NaN.
pub fn empirical_lipschitz(
    oracle: &dyn FirstOrderOracle,
    x_k: &DVector<f64>,
    x_next: &DVector<f64>,
) -> Option<f64> {
    let diff = x_next - x_k;
    let dist2 = diff.norm_squared();
    if dist2 == 0.0 {
        return None;
    }
    let at_x = oracle.eval(x_k);
    let at_next = oracle.eval(x_next);
    Some(2.0 * (at_next.f - at_x.f - at_x.g.dot(&diff)) / dist2)
}

/// On-disk description of a problem instance.
///
/// Generator-backed instances carry only their parameters and seed; literal
/// instances carry explicit dense piece data (row-major, 64-bit floats).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InstanceSpec {
    Maxquad {
        d: usize,
        k: usize,
        mu: f64,
        #[serde(rename = "L")]
        l: f64,
        seed: u64,
        #[serde(default)]
        shared_eigvecs: bool,
    },
    MaxquadExplicit {
        pieces: Vec<ExplicitPiece>,
    },
    Chain {
        k: usize,
        n: usize,
        mu: f64,
        #[serde(rename = "L")]
        l: f64,
    },
    Toy {
        name: String,
        #[serde(default)]
        i: Option<u32>,
        #[serde(rename = "M", default)]
        m: Option<f64>,
    },
}

/// Dense quadratic piece as stored in instance files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExplicitPiece {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub c: f64,
}

/// A loaded instance, ready to serve oracle queries.
pub enum Instance {
    MaxQuad(MaxQuadProblem),
    Chain(ChainMaxProblem),
    MaxSqLin(MaxSqLin),
    NormPlusAbs(NormPlusAbs),
    ExpLinear(ExpLinear),
}

impl Instance {
    pub fn oracle(&self) -> &dyn FirstOrderOracle {
        match self {
            Instance::MaxQuad(p) => p,
            Instance::Chain(p) => p,
            Instance::MaxSqLin(p) => p,
            Instance::NormPlusAbs(p) => p,
            Instance::ExpLinear(p) => p,
        }
    }

    pub fn dim(&self) -> usize {
        self.oracle().dim()
    }

    /// Smallest strong-convexity/quadratic-growth modulus known by
    /// construction, when the instance exposes one.
    pub fn mu_star(&self) -> Option<f64> {
        match self {
            Instance::MaxQuad(p) => Some(p.mu_gen()),
            Instance::Chain(p) => Some(p.mu()),
            _ => None,
        }
    }
}

impl InstanceSpec {
    pub fn build(&self) -> Result<Instance, ProblemError> {
        match self {
            InstanceSpec::Maxquad {
                d,
                k,
                mu,
                l,
                seed,
                shared_eigvecs,
            } => Ok(Instance::MaxQuad(gen_maxquad(
                *d,
                *k,
                *mu,
                *l,
                *seed,
                *shared_eigvecs,
            )?)),
            InstanceSpec::MaxquadExplicit { pieces } => {
                Ok(Instance::MaxQuad(MaxQuadProblem::from_explicit(pieces)?))
            }
            InstanceSpec::Chain { k, n, mu, l } => {
                Ok(Instance::Chain(ChainMaxProblem::new(*k, *n, *mu, *l)?))
            }
            InstanceSpec::Toy { name, i, m } => match name.as_str() {
                "max_sq_lin" => Ok(Instance::MaxSqLin(MaxSqLin)),
                "norm_plus_abs" => Ok(Instance::NormPlusAbs(NormPlusAbs)),
                "exp_linear" => {
                    let i = i.ok_or_else(|| {
                        ProblemError::InvalidParameter("exp_linear requires `i`".into())
                    })?;
                    let m = m.ok_or_else(|| {
                        ProblemError::InvalidParameter("exp_linear requires `M`".into())
                    })?;
                    Ok(Instance::ExpLinear(ExpLinear::new(i, m)?))
                }
                other => Err(ProblemError::UnknownToy(other.to_string())),
            },
        }
    }
}
