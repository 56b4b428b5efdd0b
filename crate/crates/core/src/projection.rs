//! Exact solver for the level-set projection subproblem
//! `min ||x - y_bar||^2  s.t.  A x <= b`
//! via its dual nonnegative quadratic program.
//!
//! The dual is `min_{lambda >= 0} 1/2 lambda' (AA') lambda + lambda'(b - A y_bar)`;
//! when `b = A b_tilde` is consistent this is the nonnegative least squares
//! problem `min_{lambda >= 0} ||A' lambda - (y_bar - b_tilde)||^2`. Both are
//! solved by one Lawson-Hanson style active-set iteration on the
//! normal-equations (Gram) form, with a pivoted-Cholesky rank guard for
//! dependent rows and dual-ray detection for infeasible primals. The primal
//! solution is recovered as `x* = y_bar - A' lambda*`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Tolerances for the projection solver, relative to data scale.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionTols {
    /// Accepted primal constraint violation.
    pub feas: f64,
    /// Accepted KKT (complementary slackness / dual gradient) residual.
    pub kkt: f64,
    /// Accepted residual for the `A b_tilde = b` consistency solve.
    pub consistency: f64,
}

impl Default for ProjectionTols {
    fn default() -> Self {
        ProjectionTols {
            feas: 1e-9,
            kkt: 1e-10,
            consistency: 1e-10,
        }
    }
}

/// Provenance of a constraint row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowTag {
    Cut(usize),
    Anchor,
}

/// A stack of halfspaces `a_i' x <= b_i`.
#[derive(Debug, Clone)]
pub struct HalfspaceSystem {
    rows: Vec<DVector<f64>>,
    rhs: Vec<f64>,
    tags: Vec<RowTag>,
    dim: usize,
}

impl HalfspaceSystem {
    pub fn new(dim: usize) -> Self {
        HalfspaceSystem {
            rows: Vec::new(),
            rhs: Vec::new(),
            tags: Vec::new(),
            dim,
        }
    }

    pub fn from_matrix(a: &DMatrix<f64>, b: &DVector<f64>) -> Self {
        assert_eq!(a.nrows(), b.len());
        let mut sys = HalfspaceSystem::new(a.ncols());
        for i in 0..a.nrows() {
            sys.push(a.row(i).transpose(), b[i], RowTag::Cut(i));
        }
        sys
    }

    pub fn push(&mut self, normal: DVector<f64>, rhs: f64, tag: RowTag) {
        assert_eq!(normal.len(), self.dim);
        self.rows.push(normal);
        self.rhs.push(rhs);
        self.tags.push(tag);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &DVector<f64> {
        &self.rows[i]
    }

    pub fn rhs(&self, i: usize) -> f64 {
        self.rhs[i]
    }

    pub fn tag(&self, i: usize) -> RowTag {
        self.tags[i]
    }

    /// `A x` for the stacked rows.
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.rows.len(), |i, _| self.rows[i].dot(x))
    }

    /// `A' lambda`.
    fn apply_transpose(&self, lambda: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim);
        for (i, row) in self.rows.iter().enumerate() {
            if lambda[i] != 0.0 {
                out.axpy(lambda[i], row, 1.0);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjStatus {
    Optimal,
    Infeasible,
}

/// Solution of the level-set projection QP.
#[derive(Debug, Clone)]
pub struct ProjectionResult {
    pub x_star: DVector<f64>,
    pub lambda_star: DVector<f64>,
    /// `||(A x* - b)_+||_inf`.
    pub primal_violation: f64,
    /// Largest complementary-slackness / active-gradient residual.
    pub kkt_residual: f64,
    pub status: ProjStatus,
}

#[derive(Debug, Error)]
pub enum ProjectionError {
    #[error("active-set iteration stalled after {changes} changes")]
    Stalled {
        changes: usize,
        best: DVector<f64>,
    },
    #[error("dual objective is unbounded below")]
    Unbounded,
}

// ---------------------------------------------------------------------------
// Quadratic source: G = A A' either dense or through the row factor.
// ---------------------------------------------------------------------------

enum QuadSource<'a> {
    Gram(&'a DMatrix<f64>),
    RowFactor(&'a HalfspaceSystem),
}

impl QuadSource<'_> {
    fn size(&self) -> usize {
        match self {
            QuadSource::Gram(g) => g.nrows(),
            QuadSource::RowFactor(sys) => sys.len(),
        }
    }

    /// `G lambda` using only the support of `lambda`.
    fn mul(&self, lambda: &DVector<f64>) -> DVector<f64> {
        match self {
            QuadSource::Gram(g) => {
                let m = g.nrows();
                let mut out = DVector::zeros(m);
                for j in 0..m {
                    let lj = lambda[j];
                    if lj != 0.0 {
                        for i in 0..m {
                            out[i] += lj * g[(i, j)];
                        }
                    }
                }
                out
            }
            QuadSource::RowFactor(sys) => {
                let w = sys.apply_transpose(lambda);
                sys.apply(&w)
            }
        }
    }

    fn entry(&self, i: usize, j: usize) -> f64 {
        match self {
            QuadSource::Gram(g) => g[(i, j)],
            QuadSource::RowFactor(sys) => sys.row(i).dot(sys.row(j)),
        }
    }

    fn block(&self, idx: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(idx.len(), idx.len(), |r, c| self.entry(idx[r], idx[c]))
    }
}

// ---------------------------------------------------------------------------
// Pivoted Cholesky with rank guard.
// ---------------------------------------------------------------------------

struct PivotedChol {
    /// Lower factor in pivoted order; the leading `rank` columns are valid.
    l: DMatrix<f64>,
    perm: Vec<usize>,
    rank: usize,
}

const RANK_REL_TOL: f64 = 1e-13;

fn pivoted_cholesky(g: &DMatrix<f64>) -> PivotedChol {
    let p = g.nrows();
    let mut l = g.clone();
    let mut perm: Vec<usize> = (0..p).collect();
    let mut diag: Vec<f64> = (0..p).map(|i| g[(i, i)]).collect();
    let max_diag0 = diag.iter().cloned().fold(0.0_f64, f64::max).max(1e-300);
    let mut rank = 0;

    for step in 0..p {
        // Pick the largest remaining diagonal.
        let (rel, &dmax) = diag[step..]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        if dmax <= RANK_REL_TOL * max_diag0 {
            break;
        }
        let piv = step + rel;
        perm.swap(step, piv);
        l.swap_rows(step, piv);
        l.swap_columns(step, piv);
        diag.swap(step, piv);

        let root = diag[step].sqrt();
        l[(step, step)] = root;
        for r in step + 1..p {
            let mut v = l[(r, step)];
            for k in 0..step {
                v -= l[(r, k)] * l[(step, k)];
            }
            let v = v / root;
            l[(r, step)] = v;
            diag[r] -= v * v;
        }
        // Recompute l entries column by column: the loop above already uses
        // previous columns, so the stored strictly-lower part stays current.
        rank = step + 1;
    }
    PivotedChol { l, perm, rank }
}

impl PivotedChol {
    /// Solves `G z = rhs` on the pivoted rank subset, zero elsewhere.
    /// Returns (z, consistent) where `consistent` reports whether the
    /// trailing equations were satisfied.
    fn solve(&self, rhs: &DVector<f64>, tol: f64) -> (DVector<f64>, bool) {
        let p = rhs.len();
        let r = self.rank;
        // Forward: L11 y = rhs_perm[..r]
        let mut y = vec![0.0; r];
        for i in 0..r {
            let mut v = rhs[self.perm[i]];
            for k in 0..i {
                v -= self.l[(i, k)] * y[k];
            }
            y[i] = v / self.l[(i, i)];
        }
        // Consistency of the trailing block: rhs_perm[r..] == L21 y.
        let mut consistent = true;
        let scale = rhs.amax().max(1e-300);
        for i in r..p {
            let mut v = rhs[self.perm[i]];
            for k in 0..r {
                v -= self.l[(i, k)] * y[k];
            }
            if v.abs() > tol * scale {
                consistent = false;
            }
        }
        // Backward: L11' u = y
        let mut u = vec![0.0; r];
        for i in (0..r).rev() {
            let mut v = y[i];
            for k in i + 1..r {
                v -= self.l[(k, i)] * u[k];
            }
            u[i] = v / self.l[(i, i)];
        }
        let mut z = DVector::zeros(p);
        for i in 0..r {
            z[self.perm[i]] = u[i];
        }
        (z, consistent)
    }

    /// For a dependent (non-pivot) local column `dep`, the coefficients
    /// `beta` on the pivot columns with `col_dep = sum beta_i col_i`,
    /// i.e. a null direction `e_dep - beta` of `G`.
    fn dependence(&self, dep_local: usize) -> Option<Vec<f64>> {
        let r = self.rank;
        let pos = self.perm.iter().position(|&q| q == dep_local)?;
        if pos < r {
            return None; // not dependent
        }
        // Solve L11' beta_piv = L21[pos, ..r]'.
        let mut beta = vec![0.0; r];
        let row: Vec<f64> = (0..r).map(|k| self.l[(pos, k)]).collect();
        // L11' beta = row  (row expressed in the same pivot basis)
        let mut tmp = row;
        for i in (0..r).rev() {
            let mut v = tmp[i];
            for k in i + 1..r {
                v -= self.l[(k, i)] * tmp[k];
            }
            tmp[i] = v / self.l[(i, i)];
        }
        for (i, b) in tmp.iter().enumerate() {
            beta[i] = *b;
        }
        Some(beta)
    }
}

// ---------------------------------------------------------------------------
// Active-set core for  min_{lambda >= 0} 1/2 lambda' G lambda + c' lambda.
// ---------------------------------------------------------------------------

struct NqpCore<'a> {
    source: QuadSource<'a>,
    c: DVector<f64>,
    tol: f64,
}

const DROP_TOL: f64 = 1e-14;

enum NullStep {
    Moved,
    NoDescent,
}

impl NqpCore<'_> {
    /// Follows a null direction of the rank-deficient passive Gram along
    /// which the objective decreases. Returns `Unbounded` when the direction
    /// is a certified dual ray (componentwise nonnegative).
    fn null_descent_step(
        &self,
        chol: &PivotedChol,
        grad_full: &DVector<f64>,
        lambda: &mut DVector<f64>,
        passive: &mut Vec<usize>,
    ) -> Result<NullStep, ProjectionError> {
        let p = passive.len();
        let grad_scale = grad_full.amax().max(1e-300);
        for pos in chol.rank..p {
            let dep_local = chol.perm[pos];
            let Some(beta) = chol.dependence(dep_local) else {
                continue;
            };
            let mut d = vec![0.0; p];
            d[dep_local] = 1.0;
            for (piv_pos, b) in beta.iter().enumerate() {
                d[chol.perm[piv_pos]] -= *b;
            }
            let slope: f64 = passive
                .iter()
                .enumerate()
                .map(|(i, &q)| grad_full[q] * d[i])
                .sum();
            if slope.abs() <= 1e-12 * grad_scale {
                continue;
            }
            if slope > 0.0 {
                for v in d.iter_mut() {
                    *v = -*v;
                }
            }
            if d.iter().all(|&v| v >= -1e-12) {
                return Err(ProjectionError::Unbounded);
            }
            // Step until the first multiplier hits zero.
            let mut alpha = f64::INFINITY;
            let mut blocker = None;
            for (i, &q) in passive.iter().enumerate() {
                if d[i] < -1e-12 {
                    let step = lambda[q] / (-d[i]);
                    if step < alpha {
                        alpha = step;
                        blocker = Some(q);
                    }
                }
            }
            let blocker = blocker.expect("negative component exists");
            if alpha > 0.0 {
                for (i, &q) in passive.iter().enumerate() {
                    lambda[q] = (lambda[q] + alpha * d[i]).max(0.0);
                }
            }
            lambda[blocker] = 0.0;
            passive.retain(|&q| q != blocker);
            for q in 0..lambda.len() {
                if !passive.contains(&q) {
                    lambda[q] = 0.0;
                }
            }
            return Ok(NullStep::Moved);
        }
        Ok(NullStep::NoDescent)
    }

    fn scale(&self) -> f64 {
        let diag_max = (0..self.source.size())
            .map(|i| self.source.entry(i, i))
            .fold(0.0_f64, f64::max);
        (self.c.amax() + diag_max).max(1e-300)
    }

    fn solve(&self) -> Result<DVector<f64>, ProjectionError> {
        let m = self.source.size();
        let mut lambda = DVector::zeros(m);
        let mut passive: Vec<usize> = Vec::new();
        let scale = self.scale();
        let entry_tol = self.tol * scale;
        let max_changes = 10 * m.max(4);
        let mut changes = 0usize;

        'outer: loop {
            let grad = self.source.mul(&lambda) + &self.c;
            // Entering variable: most negative gradient outside the support.
            let mut best = -entry_tol;
            let mut enter = None;
            for i in 0..m {
                if !passive.contains(&i) && grad[i] < best {
                    best = grad[i];
                    enter = Some(i);
                }
            }
            let Some(j) = enter else {
                return Ok(lambda);
            };
            passive.push(j);
            changes += 1;
            if changes > max_changes {
                return Err(ProjectionError::Stalled {
                    changes,
                    best: lambda,
                });
            }

            // Inner loop: restore a nonnegative passive solution.
            loop {
                let gpp = self.source.block(&passive);
                let chol = pivoted_cholesky(&gpp);
                let rhs = DVector::from_fn(passive.len(), |r, _| -self.c[passive[r]]);
                let (z_local, consistent) = chol.solve(&rhs, 1e-10);

                if !consistent {
                    // No stationary point over the passive span: the
                    // objective decreases linearly along a null direction of
                    // the passive Gram. A direction that can be followed
                    // forever certifies an unbounded dual (infeasible
                    // primal); otherwise step to the nearest blocking
                    // multiplier and drop it.
                    let grad_full = self.source.mul(&lambda) + &self.c;
                    match self.null_descent_step(
                        &chol,
                        &grad_full,
                        &mut lambda,
                        &mut passive,
                    )? {
                        NullStep::Moved => {
                            changes += 1;
                            if changes > max_changes {
                                return Err(ProjectionError::Stalled {
                                    changes,
                                    best: lambda,
                                });
                            }
                            if passive.is_empty() {
                                continue 'outer;
                            }
                            continue;
                        }
                        NullStep::NoDescent => {
                            // All null directions are flat; the restricted
                            // solution below is safe to use.
                        }
                    }
                }

                let all_positive = z_local.iter().all(|&v| v > DROP_TOL);
                if all_positive {
                    for q in 0..m {
                        lambda[q] = 0.0;
                    }
                    for (pos, &q) in passive.iter().enumerate() {
                        lambda[q] = z_local[pos];
                    }
                    continue 'outer;
                }

                // Standard interpolation step toward z, dropping blockers.
                let mut alpha = 1.0_f64;
                for (pos, &q) in passive.iter().enumerate() {
                    if z_local[pos] <= DROP_TOL {
                        let denom = lambda[q] - z_local[pos];
                        if denom > 0.0 {
                            alpha = alpha.min(lambda[q] / denom);
                        } else {
                            alpha = 0.0;
                        }
                    }
                }
                for (pos, &q) in passive.iter().enumerate() {
                    lambda[q] += alpha * (z_local[pos] - lambda[q]);
                }
                let drop_below = DROP_TOL * lambda.amax().max(1.0);
                let lam = &lambda;
                passive.retain(|&q| lam[q] > drop_below);
                for q in 0..m {
                    if !passive.contains(&q) {
                        lambda[q] = 0.0;
                    }
                }
                changes += 1;
                if changes > max_changes {
                    return Err(ProjectionError::Stalled {
                        changes,
                        best: lambda,
                    });
                }
                if passive.is_empty() {
                    continue 'outer;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Public operations.
// ---------------------------------------------------------------------------

/// Nonnegative least squares: `min_{lambda >= 0} ||M lambda - v||^2`.
///
/// Active-set (Lawson-Hanson) iteration on the normal-equations form with a
/// pivoted rank guard. The returned `lambda` satisfies the KKT conditions
/// `lambda_i > 0 => |grad_i| <= tol * scale` and
/// `lambda_i = 0 => grad_i >= -tol * scale` for `grad = M'(M lambda - v)`.
pub fn nnls(
    m_mat: &DMatrix<f64>,
    v: &DVector<f64>,
    tol: f64,
) -> Result<DVector<f64>, ProjectionError> {
    assert!(m_mat.ncols() >= 1, "nnls needs at least one column");
    assert!(tol > 0.0);
    let gram = m_mat.tr_mul(m_mat);
    let c = -m_mat.tr_mul(v);
    let core = NqpCore {
        source: QuadSource::Gram(&gram),
        c,
        tol,
    };
    core.solve()
}

/// Nonnegative quadratic program: `min_{lambda >= 0} 1/2 lambda' Q lambda + c' lambda`
/// for symmetric positive semidefinite `Q`.
///
/// Returns `ProjectionError::Unbounded` when a ray `d >= 0`, `Qd = 0`,
/// `c'd < 0` exists.
pub fn nqp(
    q: &DMatrix<f64>,
    c: &DVector<f64>,
    tol: f64,
) -> Result<DVector<f64>, ProjectionError> {
    let sym_err = (q - q.transpose()).abs().max();
    assert!(
        sym_err <= 1e-10 * (1.0 + q.abs().max()),
        "nqp needs a symmetric matrix"
    );
    let core = NqpCore {
        source: QuadSource::Gram(q),
        c: c.clone(),
        tol,
    };
    core.solve()
}

/// Threshold above which the Gram matrix is not materialized.
const DENSE_GRAM_LIMIT: usize = 400;

/// Projects `y_bar` onto `{x : A x <= b}` through the dual program.
///
/// First attempts the consistency solve `A b_tilde = b`; on success the dual
/// reduces to nonnegative least squares, otherwise the general nonnegative
/// quadratic program is solved. Either way `x* = y_bar - A' lambda*`, and the
/// subproblem is declared infeasible when the dual is unbounded or the
/// recovered point violates the constraints beyond tolerance.
pub fn project(
    y_bar: &DVector<f64>,
    sys: &HalfspaceSystem,
    tols: ProjectionTols,
) -> Result<ProjectionResult, ProjectionError> {
    project_inner(y_bar, sys, None, tols, true)
}

/// Computes the Gram matrix `A A'` of a system's rows, for callers that
/// project repeatedly against the same normals with varying right-hand sides.
pub fn gram_of(sys: &HalfspaceSystem) -> DMatrix<f64> {
    let m = sys.len();
    let mut g = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..=i {
            let v = sys.row(i).dot(sys.row(j));
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    g
}

/// Like [`project`], but reuses a prebuilt Gram matrix and goes straight to
/// the general dual program (the consistency reduction solves the same dual
/// and is skipped here; right-hand sides vary between calls while the rows
/// stay fixed).
pub fn project_with_gram(
    y_bar: &DVector<f64>,
    sys: &HalfspaceSystem,
    gram: Option<&DMatrix<f64>>,
    tols: ProjectionTols,
) -> Result<ProjectionResult, ProjectionError> {
    project_inner(y_bar, sys, gram, tols, false)
}

fn project_inner(
    y_bar: &DVector<f64>,
    sys: &HalfspaceSystem,
    gram: Option<&DMatrix<f64>>,
    tols: ProjectionTols,
    try_consistency: bool,
) -> Result<ProjectionResult, ProjectionError> {
    assert_eq!(y_bar.len(), sys.dim(), "projection dimension mismatch");
    let m = sys.len();
    if m == 0 {
        return Ok(ProjectionResult {
            x_star: y_bar.clone(),
            lambda_star: DVector::zeros(0),
            primal_violation: 0.0,
            kkt_residual: 0.0,
            status: ProjStatus::Optimal,
        });
    }

    let b = DVector::from_fn(m, |i, _| sys.rhs(i));
    let b_scale = 1.0 + b.amax();

    // A vanishing row with negative right-hand side is an immediate witness.
    let row_scale = (0..m)
        .map(|i| sys.row(i).amax())
        .fold(0.0_f64, f64::max)
        .max(1e-300);
    for i in 0..m {
        if sys.row(i).amax() <= 1e-15 * row_scale && sys.rhs(i) < -tols.feas * b_scale {
            return Ok(ProjectionResult {
                x_star: y_bar.clone(),
                lambda_star: DVector::zeros(m),
                primal_violation: -sys.rhs(i),
                kkt_residual: 0.0,
                status: ProjStatus::Infeasible,
            });
        }
    }

    let a_y = sys.apply(y_bar);
    let local_gram;
    let source = if let Some(g) = gram {
        QuadSource::Gram(g)
    } else if m <= DENSE_GRAM_LIMIT {
        local_gram = gram_of(sys);
        QuadSource::Gram(&local_gram)
    } else {
        QuadSource::RowFactor(sys)
    };

    // Consistency solve for b_tilde with A b_tilde = b, in Gram space.
    let c = match (&source, try_consistency) {
        (QuadSource::Gram(g), true) => {
            let chol = pivoted_cholesky(g);
            let (w, _) = chol.solve(&b, tols.consistency);
            let residual = (*g * &w - &b).amax();
            if residual <= tols.consistency * b_scale {
                // NNLS reduction: c = -A(y_bar - b_tilde) = G w - A y_bar.
                *g * &w - &a_y
            } else {
                &b - &a_y
            }
        }
        _ => &b - &a_y,
    };

    let core = NqpCore {
        source,
        c,
        tol: tols.kkt,
    };
    let lambda = match core.solve() {
        Ok(l) => l,
        Err(ProjectionError::Unbounded) => {
            return Ok(ProjectionResult {
                x_star: y_bar.clone(),
                lambda_star: DVector::zeros(m),
                primal_violation: f64::INFINITY,
                kkt_residual: 0.0,
                status: ProjStatus::Infeasible,
            });
        }
        Err(e) => return Err(e),
    };

    let x_star = y_bar - sys.apply_transpose(&lambda);
    let slack = &b - sys.apply(&x_star);
    let mut primal_violation = 0.0_f64;
    let mut kkt_residual = 0.0_f64;
    for i in 0..m {
        primal_violation = primal_violation.max(-slack[i]);
        kkt_residual = kkt_residual.max((lambda[i] * slack[i]).abs());
    }
    primal_violation = primal_violation.max(0.0);

    let status = if primal_violation > tols.feas * b_scale {
        ProjStatus::Infeasible
    } else {
        ProjStatus::Optimal
    };
    Ok(ProjectionResult {
        x_star,
        lambda_star: lambda,
        primal_violation,
        kkt_residual,
        status,
    })
}
