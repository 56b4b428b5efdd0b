//! Ground-truth reference solver.
//!
//! A ball-constrained cutting-plane iteration: the lower bound is the exact
//! minimum of the max-affine model over a working ball (the same certified
//! ball minimization used for certificate verification), the upper bound is
//! the best oracle value seen, and the next query is the model minimizer.
//! The ball radius grows fourfold and the solve repeats whenever the
//! candidate optimum is not strictly interior, which keeps the lower bound
//! valid. Entirely deterministic, so repeated calls agree bit for bit.

use crate::certificate::{CertificateError, MaxAffineModel};
use crate::oracle::FirstOrderOracle;
use nalgebra::DVector;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RefsolveError {
    #[error("cut cap {cap} exceeded; best bracket [{lower}, {upper}]")]
    CutCap { cap: usize, lower: f64, upper: f64 },
    #[error(transparent)]
    Certificate(#[from] CertificateError),
}

/// Certified optimum estimate.
#[derive(Debug, Clone)]
pub struct FStarResult {
    pub f_star: f64,
    pub x_star: DVector<f64>,
    /// Width of the final two-sided bracket (upper - lower).
    pub gap: f64,
    pub lower_bound: f64,
    pub radius_used: f64,
    pub cuts_used: usize,
}

const CUT_CAP: usize = 10_000;

/// Solves `min f` to a certified gap of `tol`.
///
/// `mu_lb` is an optional strong-convexity (or quadratic-growth) lower bound
/// used to size the initial ball; without it the ball starts at
/// `10 (1 + ||x_init||)`.
pub fn kelley_fstar(
    oracle: &dyn FirstOrderOracle,
    x_init: &DVector<f64>,
    tol: f64,
    mu_lb: Option<f64>,
) -> Result<FStarResult, RefsolveError> {
    assert!(tol > 0.0);
    let dim = oracle.dim();
    assert_eq!(x_init.len(), dim);

    let center = x_init.clone();
    let first = oracle.eval(&center);
    let mut upper = first.f;
    let mut best_x = center.clone();
    let mut model = MaxAffineModel::new(dim);
    model.push_cut(&first.cut());

    // With a growth modulus, ||x0 - x*|| <= 2 ||g0|| / mu; otherwise a
    // generous default.
    let mut radius = match mu_lb {
        Some(mu) if mu > 0.0 => (2.0 * first.g.norm() / mu).max(1e-6 * (1.0 + center.norm())),
        _ => 10.0 * (1.0 + center.norm()),
    };

    let mut lower = f64::NEG_INFINITY;
    let mut lower_hint: Option<f64> = None;

    loop {
        if model.len() >= CUT_CAP {
            return Err(RefsolveError::CutCap {
                cap: CUT_CAP,
                lower,
                upper,
            });
        }
        // Solve the master loosely far from convergence, tightly near it.
        let gap_now = if lower.is_finite() {
            upper - lower
        } else {
            f64::INFINITY
        };
        let master_tol = if gap_now.is_finite() {
            (gap_now / 16.0).max(tol / 8.0)
        } else {
            (tol / 8.0).max(1e-6 * (1.0 + upper.abs()))
        };
        let bm = model.ball_min(&center, radius, master_tol, lower_hint)?;
        lower = bm.lower;
        lower_hint = Some(bm.lower);

        let sample = oracle.eval(&bm.witness);
        if sample.f < upper {
            upper = sample.f;
            best_x = bm.witness.clone();
        }
        model.push_cut(&sample.cut());

        if upper - lower <= tol {
            // The lower bound is only valid if the optimum is inside the
            // working ball; enforce strict interiority of the candidate.
            if (&best_x - &center).norm() <= 0.99 * radius {
                return Ok(FStarResult {
                    f_star: upper,
                    x_star: best_x,
                    gap: upper - lower,
                    lower_bound: lower,
                    radius_used: radius,
                    cuts_used: model.len(),
                });
            }
            radius *= 4.0;
            lower_hint = None; // a larger ball can only lower the minimum
            lower = f64::NEG_INFINITY;
        }
    }
}
