//! Chain-like hard instance: max over blocks of a tridiagonal quadratic.
//!
//! Each block evaluates
//! `phi(v) = mu/2 ||v||^2 + (L-mu)/8 v'Av - (L-mu)/4 e_1'v`
//! with `A = tridiag(-1, 2, -1)`. The tridiagonal structure means a
//! subgradient supported on the first `t` coordinates of a block extends
//! support by at most one coordinate, which is what makes the instance hard
//! for zero-respecting methods.

use super::ProblemError;
use crate::oracle::{FirstOrderOracle, OracleSample};
use nalgebra::DVector;

#[derive(Debug, Clone)]
pub struct ChainMaxProblem {
    k: usize,
    n: usize,
    mu: f64,
    l: f64,
}

impl ChainMaxProblem {
    pub fn new(k: usize, n: usize, mu: f64, l: f64) -> Result<Self, ProblemError> {
        if k < 1 || n < 1 {
            return Err(ProblemError::InvalidParameter(
                "chain needs k >= 1 and n >= 1".into(),
            ));
        }
        if !(mu > 0.0) || !(l >= mu) {
            return Err(ProblemError::InvalidParameter(
                "chain needs L >= mu > 0".into(),
            ));
        }
        Ok(ChainMaxProblem { k, n, mu, l })
    }

    pub fn blocks(&self) -> usize {
        self.k
    }

    pub fn block_dim(&self) -> usize {
        self.n
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn l(&self) -> f64 {
        self.l
    }

    /// `q = (sqrt(L/mu) - 1) / (sqrt(L/mu) + 1)`, the per-coordinate decay of
    /// the infinite-dimensional minimizer.
    pub fn q(&self) -> f64 {
        let r = (self.l / self.mu).sqrt();
        (r - 1.0) / (r + 1.0)
    }

    fn phi_value(&self, v: &[f64]) -> f64 {
        let n = v.len();
        let norm2: f64 = v.iter().map(|a| a * a).sum();
        // v'Av for tridiag(-1,2,-1).
        let mut vav = v[0] * v[0] + v[n - 1] * v[n - 1];
        for i in 0..n - 1 {
            let d = v[i] - v[i + 1];
            vav += d * d;
        }
        0.5 * self.mu * norm2 + (self.l - self.mu) / 8.0 * vav - (self.l - self.mu) / 4.0 * v[0]
    }

    fn phi_gradient(&self, v: &[f64], out: &mut [f64]) {
        let n = v.len();
        let w = (self.l - self.mu) / 4.0;
        for i in 0..n {
            let mut av = 2.0 * v[i];
            if i > 0 {
                av -= v[i - 1];
            }
            if i + 1 < n {
                av -= v[i + 1];
            }
            out[i] = self.mu * v[i] + w * av;
        }
        out[0] -= w;
    }
}

impl FirstOrderOracle for ChainMaxProblem {
    fn dim(&self) -> usize {
        self.k * self.n
    }

    fn eval(&self, x: &DVector<f64>) -> OracleSample {
        assert_eq!(x.len(), self.k * self.n, "oracle dimension mismatch");
        let xs = x.as_slice();
        let mut best = f64::NEG_INFINITY;
        let mut best_idx = 0usize;
        for j in 0..self.k {
            let v = &xs[j * self.n..(j + 1) * self.n];
            let f = self.phi_value(v);
            if f > best {
                best = f;
                best_idx = j;
            }
        }
        let mut g = DVector::zeros(self.k * self.n);
        {
            let block = &xs[best_idx * self.n..(best_idx + 1) * self.n];
            let gs = &mut g.as_mut_slice()[best_idx * self.n..(best_idx + 1) * self.n];
            self.phi_gradient(block, gs);
        }
        OracleSample {
            x: x.clone(),
            f: best,
            g,
            active_index: Some(best_idx),
        }
    }
}

/// Exact minimizer of the chain instance at finite block dimension.
///
/// Every block solves the same tridiagonal system
/// `(mu I + (L-mu)/4 A) v = (L-mu)/4 e_1`, done here with the Thomas
/// algorithm. The infinite-dimensional closed form `v_i = q^i` is recovered
/// as `n` grows.
pub fn chain_optimum(p: &ChainMaxProblem) -> DVector<f64> {
    let n = p.n;
    let w = (p.l - p.mu) / 4.0;
    let diag_val = p.mu + 2.0 * w;
    let off = -w;

    // Thomas forward sweep on the constant-coefficient system.
    let mut c_prime = vec![0.0; n];
    let mut d_prime = vec![0.0; n];
    if p.l == p.mu {
        // w = 0: the system is mu I v = 0.
        return DVector::zeros(p.k * n);
    }
    c_prime[0] = off / diag_val;
    d_prime[0] = w / diag_val;
    for i in 1..n {
        let denom = diag_val - off * c_prime[i - 1];
        c_prime[i] = off / denom;
        d_prime[i] = (0.0 - off * d_prime[i - 1]) / denom;
    }
    let mut v = vec![0.0; n];
    v[n - 1] = d_prime[n - 1];
    for i in (0..n - 1).rev() {
        v[i] = d_prime[i] - c_prime[i] * v[i + 1];
    }

    let mut x = DVector::zeros(p.k * n);
    for j in 0..p.k {
        x.as_mut_slice()[j * n..(j + 1) * n].copy_from_slice(&v);
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn dense_tridiag(n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |r, c| {
            if r == c {
                2.0
            } else if r.abs_diff(c) == 1 {
                -1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn gradient_at_zero_hits_first_coordinate() {
        let p = ChainMaxProblem::new(3, 4, 1.0, 5.0).unwrap();
        let s = p.eval(&DVector::zeros(12));
        assert_eq!(s.f, 0.0);
        assert_eq!(s.active_index, Some(0));
        assert!((s.g[0] + (5.0 - 1.0) / 4.0).abs() < 1e-15);
        for i in 1..12 {
            assert_eq!(s.g[i], 0.0);
        }
    }

    #[test]
    fn support_extends_by_one() {
        // x supported on the first t coords of a block gives a gradient
        // supported on the first t+1 coords of the attaining block.
        let p = ChainMaxProblem::new(2, 6, 1.0, 9.0).unwrap();
        let mut x = DVector::zeros(12);
        x[0] = 0.7;
        x[1] = -0.3;
        // Make block 1 attain by loading block 2 lightly (block 1 value grows).
        let s = p.eval(&x);
        let j = s.active_index.unwrap();
        let base = j * 6;
        for i in 0..12 {
            if i < base || i > base + 2 {
                assert_eq!(s.g[i], 0.0, "coordinate {i} should be untouched");
            }
        }
    }

    #[test]
    fn eval_matches_dense_construction() {
        use rand::{Rng, SeedableRng};
        let p = ChainMaxProblem::new(2, 3, 1.0, 4.0).unwrap();
        let a = dense_tridiag(3);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..25 {
            let x = DVector::from_fn(6, |_, _| rng.gen_range(-1.5..1.5));
            let s = p.eval(&x);
            let mut best = f64::NEG_INFINITY;
            for j in 0..2 {
                let v = x.rows(j * 3, 3).into_owned();
                let f = 0.5 * 1.0 * v.norm_squared() + (4.0 - 1.0) / 8.0 * v.dot(&(&a * &v))
                    - (4.0 - 1.0) / 4.0 * v[0];
                best = best.max(f);
            }
            assert!((s.f - best).abs() < 1e-12 * (1.0 + best.abs()));
        }
    }

    #[test]
    fn optimum_solves_the_tridiagonal_system() {
        let p = ChainMaxProblem::new(1, 5, 1.0, 9.0).unwrap();
        let x = chain_optimum(&p);
        let a = dense_tridiag(5);
        let w = (9.0 - 1.0) / 4.0;
        let m = DMatrix::identity(5, 5) * 1.0 + &a * w;
        let mut rhs = DVector::zeros(5);
        rhs[0] = w;
        let v = x.rows(0, 5).into_owned();
        let residual = (&m * &v - &rhs).norm();
        assert!(residual <= 1e-12 * 9.0, "residual {residual}");
        // Dense solve agreement.
        let dense = m.lu().solve(&rhs).unwrap();
        assert!((dense - v).norm() < 1e-12);
    }

    #[test]
    fn scalar_block_closed_form() {
        let (mu, l) = (2.0, 10.0);
        let p = ChainMaxProblem::new(1, 1, mu, l).unwrap();
        let x = chain_optimum(&p);
        let w = (l - mu) / 4.0;
        assert!((x[0] - w / (mu + 2.0 * w)).abs() < 1e-15);
    }

    #[test]
    fn first_coordinate_approaches_q() {
        let p = ChainMaxProblem::new(1, 200, 1.0, 10.0).unwrap();
        let x = chain_optimum(&p);
        let q = p.q();
        assert!((x[0] - q).abs() < 1e-6, "x0={} q={}", x[0], q);
    }

    #[test]
    fn initial_distance_matches_geometric_tail() {
        // ||0 - x*||^2 ~ k q^2/(1-q^2) within 1% once n >= 50/(1-q).
        let (mu, l) = (1.0, 100.0);
        let k = 3;
        let q = ((l / mu as f64).sqrt() - 1.0) / ((l / mu as f64).sqrt() + 1.0);
        let n = (50.0 / (1.0 - q)).ceil() as usize;
        let p = ChainMaxProblem::new(k, n, mu, l).unwrap();
        let x = chain_optimum(&p);
        let lhs = x.norm_squared();
        let rhs = k as f64 * q * q / (1.0 - q * q);
        assert!(
            (lhs - rhs).abs() <= 0.01 * rhs,
            "finite-n {lhs} vs asymptotic {rhs}"
        );
    }
}
