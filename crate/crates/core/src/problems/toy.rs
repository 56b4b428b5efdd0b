//! Small hand-checkable piecewise-smooth functions.

use super::ProblemError;
use crate::oracle::{FirstOrderOracle, OracleSample};
use nalgebra::DVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyName {
    MaxSqLin,
    NormPlusAbs,
    ExpLinear,
}

/// `f(x) = max{x^2, x}` on the real line.
#[derive(Debug, Clone, Copy)]
pub struct MaxSqLin;

impl FirstOrderOracle for MaxSqLin {
    fn dim(&self) -> usize {
        1
    }

    fn eval(&self, x: &DVector<f64>) -> OracleSample {
        assert_eq!(x.len(), 1, "oracle dimension mismatch");
        let v = x[0];
        let (f, g, idx) = if v * v >= v {
            (v * v, 2.0 * v, 0)
        } else {
            (v, 1.0, 1)
        };
        OracleSample {
            x: x.clone(),
            f,
            g: DVector::from_vec(vec![g]),
            active_index: Some(idx),
        }
    }
}

/// `f(x) = ||x||^2 + |x_1|` on the plane.
#[derive(Debug, Clone, Copy)]
pub struct NormPlusAbs;

impl FirstOrderOracle for NormPlusAbs {
    fn dim(&self) -> usize {
        2
    }

    fn eval(&self, x: &DVector<f64>) -> OracleSample {
        assert_eq!(x.len(), 2, "oracle dimension mismatch");
        let f = x.norm_squared() + x[0].abs();
        // |x_1| = max{x_1, -x_1}; index 0 wins the tie at zero.
        let (sign, idx) = if x[0] >= 0.0 { (1.0, 0) } else { (-1.0, 1) };
        let g = DVector::from_vec(vec![2.0 * x[0] + sign, 2.0 * x[1]]);
        OracleSample {
            x: x.clone(),
            f,
            g,
            active_index: Some(idx),
        }
    }
}

/// `f(x) = (ix + 1) 1{x >= 0} + e^x 1{x < 0}` on `[-M, inf)`.
///
/// The oracle itself enforces the domain: queries below `-M` are answered by
/// the linear extension through `(-M, e^{-M})` with the boundary subgradient,
/// so solvers can treat the domain as the whole line.
#[derive(Debug, Clone, Copy)]
pub struct ExpLinear {
    pub slope: u32,
    pub m_bound: f64,
}

impl ExpLinear {
    pub fn new(i: u32, m: f64) -> Result<Self, ProblemError> {
        if i < 1 {
            return Err(ProblemError::InvalidParameter(
                "exp_linear needs i >= 1".into(),
            ));
        }
        if !(m > 0.0) {
            return Err(ProblemError::InvalidParameter(
                "exp_linear needs M > 0".into(),
            ));
        }
        Ok(ExpLinear {
            slope: i,
            m_bound: m,
        })
    }

    /// Minimum over the domain, attained at the left boundary.
    pub fn f_star(&self) -> f64 {
        (-self.m_bound).exp()
    }
}

impl FirstOrderOracle for ExpLinear {
    fn dim(&self) -> usize {
        1
    }

    fn eval(&self, x: &DVector<f64>) -> OracleSample {
        assert_eq!(x.len(), 1, "oracle dimension mismatch");
        let v = x[0];
        let i = self.slope as f64;
        let (f, g, idx) = if v >= 0.0 {
            (i * v + 1.0, i, 0)
        } else if v >= -self.m_bound {
            (v.exp(), v.exp(), 1)
        } else {
            let boundary = (-self.m_bound).exp();
            (boundary * (1.0 + v + self.m_bound), boundary, 1)
        };
        OracleSample {
            x: x.clone(),
            f,
            g: DVector::from_vec(vec![g]),
            active_index: Some(idx),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(o: &dyn FirstOrderOracle, v: f64) -> OracleSample {
        o.eval(&DVector::from_vec(vec![v]))
    }

    #[test]
    fn max_sq_lin_linear_piece() {
        let s = at(&MaxSqLin, 0.5);
        assert!((s.f - 0.5).abs() < 1e-15);
        assert!((s.g[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn max_sq_lin_quadratic_piece() {
        let s = at(&MaxSqLin, 2.0);
        assert!((s.f - 4.0).abs() < 1e-15);
        assert!((s.g[0] - 4.0).abs() < 1e-15);
        assert_eq!(s.active_index, Some(0));
    }

    #[test]
    fn norm_plus_abs_figure_start() {
        let s = NormPlusAbs.eval(&DVector::from_vec(vec![0.01, 0.15]));
        let want = 0.01f64.powi(2) + 0.15f64.powi(2) + 0.01;
        assert!((s.f - want).abs() < 1e-15);
        assert!((s.g[0] - (0.02 + 1.0)).abs() < 1e-15);
        assert!((s.g[1] - 0.30).abs() < 1e-15);
    }

    #[test]
    fn exp_linear_direct_substitution() {
        let o = ExpLinear::new(5, 10.0).unwrap();
        let s = at(&o, 0.2);
        assert!((s.f - 2.0).abs() < 1e-15);
        assert!((s.g[0] - 5.0).abs() < 1e-15);
    }

    #[test]
    fn exp_linear_clamps_below_boundary() {
        let o = ExpLinear::new(2, 1.0).unwrap();
        let s = at(&o, -3.0);
        let boundary = (-1.0f64).exp();
        assert!((s.g[0] - boundary).abs() < 1e-15);
        assert!((s.f - boundary * (1.0 - 3.0 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn subgradient_inequality_holds() {
        use rand::{Rng, SeedableRng};
        let oracles: Vec<Box<dyn FirstOrderOracle>> = vec![
            Box::new(MaxSqLin),
            Box::new(ExpLinear::new(3, 2.0).unwrap()),
        ];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for o in &oracles {
            for _ in 0..200 {
                let a = rng.gen_range(-4.0..4.0);
                let b = rng.gen_range(-4.0..4.0);
                let sa = at(o.as_ref(), a);
                let sb = at(o.as_ref(), b);
                assert!(sb.f >= sa.f + sa.g[0] * (b - a) - 1e-9 * (1.0 + sa.f.abs()));
            }
        }
    }
}
