//! First-order oracle abstractions and cut (linearization) data.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};

/// One oracle answer: the function value and one subgradient at `x`.
#[derive(Debug, Clone)]
pub struct OracleSample {
    pub x: DVector<f64>,
    pub f: f64,
    pub g: DVector<f64>,
    /// Index of the attaining piece for max-structured objectives.
    pub active_index: Option<usize>,
}

impl OracleSample {
    /// The cut carried by this sample: `l(x) = f + <g, x - z>`.
    pub fn cut(&self) -> Cut {
        Cut::new(&self.x, self.f, &self.g)
    }
}

/// A linearization `l_f(x; z) = f(z) + <g, x - z>` stored as `(z, f(z), g)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Cut {
    pub z: Vec<f64>,
    pub fz: f64,
    pub g: Vec<f64>,
}

impl Cut {
    pub fn new(z: &DVector<f64>, fz: f64, g: &DVector<f64>) -> Self {
        Cut {
            z: z.as_slice().to_vec(),
            fz,
            g: g.as_slice().to_vec(),
        }
    }

    pub fn z_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.z)
    }

    pub fn g_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.g)
    }

    /// Evaluates the linearization at `x`.
    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        debug_assert_eq!(x.len(), self.z.len());
        let mut acc = self.fz;
        for i in 0..self.z.len() {
            acc += self.g[i] * (x[i] - self.z[i]);
        }
        acc
    }

    /// Right-hand side of the halfspace `l_f(x; z) <= level`, written as
    /// `<g, x> <= level - fz + <g, z>`.
    pub fn halfspace_rhs(&self, level: f64) -> f64 {
        let gz: f64 = self.g.iter().zip(&self.z).map(|(a, b)| a * b).sum();
        level - self.fz + gz
    }
}

/// A first-order oracle: evaluates `f(x)` and one subgradient `f'(x)`.
///
/// Implementations must be deterministic and stateless so instances can be
/// shared across threads.
pub trait FirstOrderOracle: Sync {
    fn dim(&self) -> usize;

    /// Evaluates the oracle at `x`. Panics on dimension mismatch.
    fn eval(&self, x: &DVector<f64>) -> OracleSample;
}

impl<T: FirstOrderOracle + ?Sized> FirstOrderOracle for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval(&self, x: &DVector<f64>) -> OracleSample {
        (**self).eval(x)
    }
}

/// Wraps an oracle with a shared call counter.
///
/// Every solver in this crate routes its evaluations through one of these, so
/// budgets and reported call counts agree across nested drivers.
pub struct CountingOracle<'a> {
    inner: &'a dyn FirstOrderOracle,
    calls: AtomicU64,
}

impl<'a> CountingOracle<'a> {
    pub fn new(inner: &'a dyn FirstOrderOracle) -> Self {
        CountingOracle {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl FirstOrderOracle for CountingOracle<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn eval(&self, x: &DVector<f64>) -> OracleSample {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.eval(x)
    }
}
