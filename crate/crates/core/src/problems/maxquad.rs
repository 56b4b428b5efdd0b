//! Random max-of-quadratics instances.
//!
//! Each piece is `q_i(x) = x'A_i x / 2 + b_i'x + c_i` with a positive
//! definite `A_i` whose eigenvalues form an arithmetic sequence from `mu`
//! to `L`, so the instance is `mu`-strongly convex and `L`-smooth piecewise.

use super::{ExplicitPiece, ProblemError};
use crate::oracle::{FirstOrderOracle, OracleSample};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// One quadratic piece `x'A x / 2 + b'x + c` with dense symmetric `A`.
#[derive(Debug, Clone)]
pub struct QuadPiece {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: f64,
}

impl QuadPiece {
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        let ax = &self.a * x;
        0.5 * x.dot(&ax) + self.b.dot(x) + self.c
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b
    }
}

enum Storage {
    /// One dense matrix per piece.
    Dense(Vec<QuadPiece>),
    /// One shared orthonormal basis; pieces differ only in their spectra
    /// (per-piece permutations of the arithmetic eigenvalue grid) and in
    /// `b_i`, `c_i`. Used by the memory-saving large-scale construction.
    SharedEig {
        q: DMatrix<f64>,
        eigs: Vec<DVector<f64>>,
        b: Vec<DVector<f64>>,
        c: Vec<f64>,
    },
}

pub struct MaxQuadProblem {
    dim: usize,
    k: usize,
    storage: Storage,
    mu_gen: f64,
    l_gen: f64,
    seed: u64,
    shared_eigvecs: bool,
}

impl MaxQuadProblem {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pieces(&self) -> usize {
        self.k
    }

    /// Smallest eigenvalue used during generation; a valid quadratic-growth
    /// modulus for the instance by construction.
    pub fn mu_gen(&self) -> f64 {
        self.mu_gen
    }

    pub fn l_gen(&self) -> f64 {
        self.l_gen
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn shared_eigvecs(&self) -> bool {
        self.shared_eigvecs
    }

    /// Dense piece data; only available for dense storage.
    pub fn dense_pieces(&self) -> Option<&[QuadPiece]> {
        match &self.storage {
            Storage::Dense(p) => Some(p),
            Storage::SharedEig { .. } => None,
        }
    }

    /// Builds an instance from explicit dense pieces (literal instance files
    /// and hand-written tests).
    pub fn from_explicit(pieces: &[ExplicitPiece]) -> Result<Self, ProblemError> {
        if pieces.is_empty() {
            return Err(ProblemError::Malformed("no pieces".into()));
        }
        let d = pieces[0].b.len();
        let mut dense = Vec::with_capacity(pieces.len());
        for p in pieces {
            if p.a.len() != d || p.a.iter().any(|row| row.len() != d) || p.b.len() != d {
                return Err(ProblemError::Malformed(
                    "inconsistent piece dimensions".into(),
                ));
            }
            let flat: Vec<f64> = p.a.iter().flatten().copied().collect();
            let a = DMatrix::from_row_slice(d, d, &flat);
            let sym_err = (&a - a.transpose()).abs().max();
            if sym_err > 1e-12 * (1.0 + a.abs().max()) {
                return Err(ProblemError::Malformed("piece matrix not symmetric".into()));
            }
            dense.push(QuadPiece {
                a,
                b: DVector::from_column_slice(&p.b),
                c: p.c,
            });
        }
        Ok(MaxQuadProblem {
            dim: d,
            k: pieces.len(),
            storage: Storage::Dense(dense),
            mu_gen: 0.0,
            l_gen: f64::INFINITY,
            seed: 0,
            shared_eigvecs: false,
        })
    }

    pub fn to_explicit(&self) -> Option<Vec<ExplicitPiece>> {
        let pieces = self.dense_pieces()?;
        Some(
            pieces
                .iter()
                .map(|p| ExplicitPiece {
                    a: (0..self.dim)
                        .map(|r| p.a.row(r).iter().copied().collect())
                        .collect(),
                    b: p.b.as_slice().to_vec(),
                    c: p.c,
                })
                .collect(),
        )
    }
}

/// Arithmetic eigenvalue grid from `mu` to `l` inclusive (constant `mu` when
/// `d == 1`).
fn eigen_grid(d: usize, mu: f64, l: f64) -> Vec<f64> {
    if d == 1 {
        vec![mu]
    } else {
        (0..d)
            .map(|j| mu + j as f64 * (l - mu) / (d as f64 - 1.0))
            .collect()
    }
}

fn standard_normal_matrix(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |_, _| rng.sample(StandardNormal))
}

/// Orthonormal factor of a seeded standard-normal matrix.
fn random_orthonormal(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let m = standard_normal_matrix(rng, d);
    let qr = m.qr();
    qr.q()
}

fn assemble_symmetric(q: &DMatrix<f64>, eigs: &[f64]) -> DMatrix<f64> {
    let d = q.nrows();
    let mut scaled = q.clone();
    for j in 0..d {
        let mut col = scaled.column_mut(j);
        col *= eigs[j];
    }
    let a = &scaled * q.transpose();
    // Symmetrize away the last bits of rounding.
    let mut sym = DMatrix::zeros(d, d);
    for r in 0..d {
        for c in 0..d {
            sym[(r, c)] = 0.5 * (a[(r, c)] + a[(c, r)]);
        }
    }
    sym
}

/// Generates a random max-of-quadratics instance.
///
/// Each `A_i = Q_i diag(lambda) Q_i'` with `lambda` the arithmetic grid from
/// `mu` to `l` and `Q_i` the orthonormalization of a seeded standard-normal
/// matrix; `b_i`, `c_i` are standard normal. With `shared_eigvecs` a single
/// basis is drawn and each piece uses a fresh uniform permutation of the
/// grid, which keeps the per-piece extreme eigenvalues at exactly `mu` and
/// `l` while storing only one `d x d` matrix.
pub fn gen_maxquad(
    d: usize,
    k: usize,
    mu: f64,
    l: f64,
    seed: u64,
    shared_eigvecs: bool,
) -> Result<MaxQuadProblem, ProblemError> {
    if d < 1 {
        return Err(ProblemError::InvalidParameter("d must be >= 1".into()));
    }
    if k < 1 {
        return Err(ProblemError::InvalidParameter("k must be >= 1".into()));
    }
    if !(mu > 0.0) {
        return Err(ProblemError::InvalidParameter("mu must be > 0".into()));
    }
    if !(l >= mu) {
        return Err(ProblemError::InvalidParameter("L must be >= mu".into()));
    }

    let grid = eigen_grid(d, mu, l);
    let stream_rng = |stream: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        rng
    };

    let storage = if shared_eigvecs {
        let q = random_orthonormal(&mut stream_rng(0), d);
        let mut eigs = Vec::with_capacity(k);
        let mut b = Vec::with_capacity(k);
        let mut c = Vec::with_capacity(k);
        for i in 0..k {
            let mut rng = stream_rng(1 + i as u64);
            let mut lambda = grid.clone();
            // Fisher-Yates with the per-piece stream.
            for j in (1..d).rev() {
                let swap = rng.gen_range(0..=j);
                lambda.swap(j, swap);
            }
            eigs.push(DVector::from_vec(lambda));
            b.push(DVector::from_fn(d, |_, _| rng.sample(StandardNormal)));
            c.push(rng.sample(StandardNormal));
        }
        Storage::SharedEig { q, eigs, b, c }
    } else {
        let mut pieces = Vec::with_capacity(k);
        for i in 0..k {
            let mut rng = stream_rng(1 + i as u64);
            let q = random_orthonormal(&mut rng, d);
            let a = assemble_symmetric(&q, &grid);
            let b = DVector::from_fn(d, |_, _| rng.sample(StandardNormal));
            let c = rng.sample(StandardNormal);
            pieces.push(QuadPiece { a, b, c });
        }
        Storage::Dense(pieces)
    };

    Ok(MaxQuadProblem {
        dim: d,
        k,
        storage,
        mu_gen: mu,
        l_gen: l,
        seed,
        shared_eigvecs,
    })
}

impl FirstOrderOracle for MaxQuadProblem {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &DVector<f64>) -> OracleSample {
        assert_eq!(x.len(), self.dim, "oracle dimension mismatch");
        match &self.storage {
            Storage::Dense(pieces) => {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                let mut best_ax: DVector<f64> = DVector::zeros(self.dim);
                let mut ax = DVector::zeros(self.dim);
                for (i, p) in pieces.iter().enumerate() {
                    p.a.mul_to(x, &mut ax);
                    let f = 0.5 * x.dot(&ax) + p.b.dot(x) + p.c;
                    // Smallest attaining index wins ties.
                    if f > best {
                        best = f;
                        best_idx = i;
                        best_ax.copy_from(&ax);
                    }
                }
                let g = &best_ax + &pieces[best_idx].b;
                OracleSample {
                    x: x.clone(),
                    f: best,
                    g,
                    active_index: Some(best_idx),
                }
            }
            Storage::SharedEig { q, eigs, b, c } => {
                let z = q.tr_mul(x);
                let zz = z.component_mul(&z);
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for i in 0..self.k {
                    let f = 0.5 * eigs[i].dot(&zz) + b[i].dot(x) + c[i];
                    if f > best {
                        best = f;
                        best_idx = i;
                    }
                }
                let scaled = eigs[best_idx].component_mul(&z);
                let g = q * scaled + &b[best_idx];
                OracleSample {
                    x: x.clone(),
                    f: best,
                    g,
                    active_index: Some(best_idx),
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_parameters() {
        assert!(gen_maxquad(0, 1, 1.0, 2.0, 0, false).is_err());
        assert!(gen_maxquad(3, 0, 1.0, 2.0, 0, false).is_err());
        assert!(gen_maxquad(3, 1, 0.0, 2.0, 0, false).is_err());
        assert!(gen_maxquad(3, 1, 2.0, 1.0, 0, false).is_err());
    }

    #[test]
    fn degenerate_arithmetic_sequence() {
        // d=1, k=1, mu=L=2: the single piece is A=[2].
        let p = gen_maxquad(1, 1, 2.0, 2.0, 0, false).unwrap();
        let pieces = p.dense_pieces().unwrap();
        assert_eq!(pieces.len(), 1);
        assert!((pieces[0].a[(0, 0)] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn eigenvalues_match_grid() {
        // d=4, mu=1, L=4: spectrum of each A_i must be exactly {1,2,3,4}.
        let p = gen_maxquad(4, 2, 1.0, 4.0, 7, false).unwrap();
        for piece in p.dense_pieces().unwrap() {
            let eig = piece.a.clone().symmetric_eigen();
            let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (v, want) in vals.iter().zip([1.0, 2.0, 3.0, 4.0]) {
                assert!((v - want).abs() < 1e-10, "eigenvalue {v} vs {want}");
            }
        }
    }

    #[test]
    fn spectrum_and_orthonormality_bounds() {
        for &(d, k, mu, l) in &[(6usize, 3usize, 1.0, 10.0), (9, 4, 0.5, 2.5)] {
            let p = gen_maxquad(d, k, mu, l, 11, false).unwrap();
            for piece in p.dense_pieces().unwrap() {
                let eig = piece.a.clone().symmetric_eigen();
                for v in eig.eigenvalues.iter() {
                    assert!(*v >= mu - 1e-8 && *v <= l + 1e-8);
                }
                let sym_err = (&piece.a - piece.a.transpose()).abs().max();
                assert!(sym_err <= 1e-12 * (1.0 + piece.a.abs().max()));
            }
        }
    }

    #[test]
    fn shared_eigvecs_keeps_extremes() {
        let p = gen_maxquad(16, 5, 1.0, 9.0, 3, true).unwrap();
        match &p.storage {
            Storage::SharedEig { q, eigs, .. } => {
                let qtq = q.tr_mul(q);
                let eye = DMatrix::identity(16, 16);
                assert!((qtq - eye).abs().max() < 1e-10);
                for lam in eigs {
                    let mut sorted: Vec<f64> = lam.iter().copied().collect();
                    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    assert!((sorted[0] - 1.0).abs() < 1e-14);
                    assert!((sorted[15] - 9.0).abs() < 1e-14);
                }
            }
            Storage::Dense(_) => panic!("expected shared storage"),
        }
    }

    #[test]
    fn eval_matches_per_piece_evaluation() {
        use rand::Rng;
        let p = gen_maxquad(3, 4, 1.0, 5.0, 13, false).unwrap();
        let pieces = p.dense_pieces().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let x = DVector::from_fn(3, |_, _| rng.gen_range(-2.0..2.0));
            let s = p.eval(&x);
            let direct = pieces
                .iter()
                .map(|q| q.value(&x))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((s.f - direct).abs() < 1e-12 * (1.0 + direct.abs()));
            let idx = s.active_index.unwrap();
            assert!((pieces[idx].value(&x) - s.f).abs() < 1e-12 * (1.0 + s.f.abs()));
            assert!((pieces[idx].gradient(&x) - &s.g).norm() < 1e-12);
        }
    }

    #[test]
    fn tie_break_picks_smallest_index() {
        // pieces {x^2, (x-1)^2} at x=0.5: both attain 0.25, index 0 wins, g=1.
        let pieces = vec![
            ExplicitPiece {
                a: vec![vec![2.0]],
                b: vec![0.0],
                c: 0.0,
            },
            ExplicitPiece {
                a: vec![vec![2.0]],
                b: vec![-2.0],
                c: 1.0,
            },
        ];
        let p = MaxQuadProblem::from_explicit(&pieces).unwrap();
        let s = p.eval(&DVector::from_vec(vec![0.5]));
        assert!((s.f - 0.25).abs() < 1e-15);
        assert_eq!(s.active_index, Some(0));
        assert!((s.g[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn quadratic_beats_linear_piece() {
        // pieces {x^2, x} at x=2: f=4, gradient 4 from the quadratic piece.
        let pieces = vec![
            ExplicitPiece {
                a: vec![vec![2.0]],
                b: vec![0.0],
                c: 0.0,
            },
            ExplicitPiece {
                a: vec![vec![0.0]],
                b: vec![1.0],
                c: 0.0,
            },
        ];
        let p = MaxQuadProblem::from_explicit(&pieces).unwrap();
        let s = p.eval(&DVector::from_vec(vec![2.0]));
        assert!((s.f - 4.0).abs() < 1e-15);
        assert_eq!(s.active_index, Some(0));
        assert!((s.g[0] - 4.0).abs() < 1e-15);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_maxquad(5, 3, 1.0, 4.0, 42, false).unwrap();
        let b = gen_maxquad(5, 3, 1.0, 4.0, 42, false).unwrap();
        let (pa, pb) = (a.dense_pieces().unwrap(), b.dense_pieces().unwrap());
        for (x, y) in pa.iter().zip(pb) {
            assert_eq!(x.a.as_slice(), y.a.as_slice());
            assert_eq!(x.b.as_slice(), y.b.as_slice());
            assert_eq!(x.c, y.c);
        }
    }
}
