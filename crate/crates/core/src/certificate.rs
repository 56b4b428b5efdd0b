//! Normalized Wolfe certificates.
//!
//! A certificate claims that the max-of-linearizations model built from a
//! point set `P` (with the center first) cannot decrease by more than
//! `iota * nu` over the ball `B(y_bar, iota)`. The normalized gap
//!
//! `V(iota; y_bar) = (psi(y_bar) - min_{x in B} psi(x)) / iota`
//!
//! is evaluated exactly here: the inner minimum of the max-affine model over
//! the ball is bracketed by bisection on the level value, where each
//! membership test is one exact dual projection onto the corresponding
//! halfspace intersection. The bracket width certifies a two-sided error on
//! the returned gap.

use crate::oracle::Cut;
use crate::projection::{
    project_with_gram, HalfspaceSystem, ProjStatus, ProjectionError, ProjectionTols, RowTag,
};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CertificateError {
    #[error("certificate has an empty point set")]
    EmptyPointSet,
    #[error("ball radius must be positive, got {0}")]
    NonpositiveRadius(f64),
    #[error("level bracket stalled at [{lo}, {hi}] before reaching tolerance")]
    BracketStall { lo: f64, hi: f64 },
    #[error(transparent)]
    Projection(#[from] ProjectionError),
}

/// `(center, iota, nu, P)` claiming the center is `(iota, nu)`-Wolfe
/// stationary; the first point of `P` is the center itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WolfeCertificate {
    pub center: Vec<f64>,
    pub iota: f64,
    pub nu: f64,
    pub points: Vec<Cut>,
}

impl WolfeCertificate {
    pub fn center_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.center)
    }

    /// Function value at the center, carried by the leading cut.
    pub fn f_center(&self) -> f64 {
        self.points[0].fz
    }
}

/// `psi(x) = max_{z in P} l_f(x; z)`, the max-of-linearizations model.
pub fn psi(points: &[Cut], x: &DVector<f64>) -> f64 {
    assert!(!points.is_empty(), "psi needs a nonempty point set");
    points
        .iter()
        .map(|c| c.eval(x))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Max-affine model prepared for repeated ball minimizations.
///
/// Stores each cut as `g_i' x - r_i` with `r_i = g_i'z_i - f(z_i)` and keeps
/// the Gram matrix of the normals current as cuts are appended, so one model
/// can serve a whole sequence of level queries.
pub struct MaxAffineModel {
    dim: usize,
    normals: Vec<DVector<f64>>,
    offsets: Vec<f64>,
    norms: Vec<f64>,
    gram: Option<DMatrix<f64>>,
}

/// Beyond this many cuts the Gram matrix is no longer materialized and the
/// dual solver falls back to row-factor products.
const MODEL_GRAM_LIMIT: usize = 400;

/// Certified bracket for `min_{x in B} psi(x)`.
#[derive(Debug, Clone)]
pub struct BallMin {
    /// Certified lower end: no point of the ball has model value below this.
    pub lower: f64,
    /// Certified upper end: the witness attains at most this value.
    pub upper: f64,
    pub witness: DVector<f64>,
}

impl MaxAffineModel {
    pub fn new(dim: usize) -> Self {
        MaxAffineModel {
            dim,
            normals: Vec::new(),
            offsets: Vec::new(),
            norms: Vec::new(),
            gram: Some(DMatrix::zeros(0, 0)),
        }
    }

    pub fn from_cuts(dim: usize, cuts: &[Cut]) -> Self {
        let mut model = MaxAffineModel::new(dim);
        for c in cuts {
            model.push_cut(c);
        }
        model
    }

    pub fn len(&self) -> usize {
        self.normals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normals.is_empty()
    }

    pub fn push_cut(&mut self, cut: &Cut) {
        assert_eq!(cut.g.len(), self.dim);
        let g = cut.g_vec();
        let gz: f64 = cut.g.iter().zip(&cut.z).map(|(a, b)| a * b).sum();
        let r = gz - cut.fz;
        // Grow the Gram by one bordered row/column.
        if let Some(old) = self.gram.take() {
            let m = self.normals.len();
            if m + 1 > MODEL_GRAM_LIMIT {
                self.gram = None;
            } else {
                let mut grown = DMatrix::zeros(m + 1, m + 1);
                grown.view_mut((0, 0), (m, m)).copy_from(&old);
                for i in 0..m {
                    let v = self.normals[i].dot(&g);
                    grown[(i, m)] = v;
                    grown[(m, i)] = v;
                }
                grown[(m, m)] = g.dot(&g);
                self.gram = Some(grown);
            }
        }
        self.norms.push(g.norm());
        self.normals.push(g);
        self.offsets.push(r);
    }

    /// Model value `max_i (g_i'x - r_i)`.
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        self.normals
            .iter()
            .zip(&self.offsets)
            .map(|(g, r)| g.dot(x) - r)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    fn system_at_level(&self, level: f64) -> HalfspaceSystem {
        let mut sys = HalfspaceSystem::new(self.dim);
        for (i, (g, r)) in self.normals.iter().zip(&self.offsets).enumerate() {
            sys.push(g.clone(), level + r, RowTag::Cut(i));
        }
        sys
    }

    /// Certified bracket of width `tol` around `min_{x in B(center, radius)}`
    /// of the model, by bisection on the level value. Each trial level asks
    /// the dual projector for the distance from `center` to the level set;
    /// distances beyond `radius` certify the level is below the ball minimum.
    ///
    /// `lower_hint` may carry any known valid lower bound (for instance, the
    /// bracket of the same model before new cuts were appended).
    pub fn ball_min(
        &self,
        center: &DVector<f64>,
        radius: f64,
        tol: f64,
        lower_hint: Option<f64>,
    ) -> Result<BallMin, CertificateError> {
        if self.is_empty() {
            return Err(CertificateError::EmptyPointSet);
        }
        if !(radius > 0.0) {
            return Err(CertificateError::NonpositiveRadius(radius));
        }
        let mut hi = self.value(center);
        let mut witness = center.clone();
        // Every affine minorant bounds the model minimum from below.
        let mut lo = self
            .normals
            .iter()
            .zip(&self.offsets)
            .zip(&self.norms)
            .map(|((g, r), n)| g.dot(center) - r - radius * n)
            .fold(f64::NEG_INFINITY, f64::max);
        if let Some(h) = lower_hint {
            lo = lo.max(h);
        }
        lo = lo.min(hi);

        let tols = ProjectionTols::default();
        let mut iterations = 0usize;
        while hi - lo > tol {
            iterations += 1;
            if iterations > 200 {
                return Err(CertificateError::BracketStall { lo, hi });
            }
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                // f64 resolution reached.
                if hi - lo > tol {
                    return Err(CertificateError::BracketStall { lo, hi });
                }
                break;
            }
            let sys = self.system_at_level(mid);
            let prj = project_with_gram(center, &sys, self.gram.as_ref(), tols)?;
            let reachable = prj.status == ProjStatus::Optimal
                && (&prj.x_star - center).norm() <= radius * (1.0 + 1e-12) + 1e-14;
            if reachable {
                hi = mid;
                witness = prj.x_star;
            } else {
                lo = mid;
            }
        }
        Ok(BallMin {
            lower: lo,
            upper: hi,
            witness,
        })
    }
}

/// Result of an exact normalized-gap evaluation.
#[derive(Debug, Clone)]
pub struct WolfeGap {
    /// Midpoint estimate of the normalized gap.
    pub v: f64,
    /// Certified bounds: the true gap lies in `[v_lower, v_upper]`.
    pub v_lower: f64,
    pub v_upper: f64,
    /// Ball point approximately attaining the model minimum.
    pub witness: DVector<f64>,
    /// Half-width of the certified interval, at most `tol / iota`.
    pub error_bound: f64,
}

/// Exact normalized Wolfe gap
/// `V = (psi(y_bar) - min_{x in B(y_bar, iota)} psi(x)) / iota`
/// with a certified two-sided error of at most `tol / iota`.
pub fn wolfe_gap(
    points: &[Cut],
    y_bar: &DVector<f64>,
    iota: f64,
    tol: f64,
) -> Result<WolfeGap, CertificateError> {
    if points.is_empty() {
        return Err(CertificateError::EmptyPointSet);
    }
    if !(iota > 0.0) {
        return Err(CertificateError::NonpositiveRadius(iota));
    }
    let model = MaxAffineModel::from_cuts(y_bar.len(), points);
    let psi_center = model.value(y_bar);
    let bm = model.ball_min(y_bar, iota, tol, None)?;
    // The center itself lies in the ball, so the gap is nonnegative.
    let v_lower = ((psi_center - bm.upper) / iota).max(0.0);
    let v_upper = ((psi_center - bm.lower) / iota).max(0.0);
    debug_assert!(v_upper >= -1e-12);
    Ok(WolfeGap {
        v: 0.5 * (v_lower + v_upper),
        v_lower,
        v_upper,
        witness: bm.witness,
        error_bound: 0.5 * (v_upper - v_lower),
    })
}

/// Optimality-gap bound implied by an `(iota, nu)` certificate under
/// quadratic growth with modulus `mu`: `max{iota nu, 2 nu^2 / mu}`.
///
/// Callers use `f(y_bar) - gap_bound(..)` as a lower bound on the optimum.
pub fn gap_bound(iota: f64, nu: f64, mu: f64) -> f64 {
    assert!(iota > 0.0 && mu > 0.0);
    (iota * nu).max(2.0 * nu * nu / mu)
}

/// A certificate re-centered at a nearby point.
#[derive(Debug, Clone)]
pub struct TransferredCertificate {
    pub cert: WolfeCertificate,
    /// Alternate bound produced by the proof-side form of the transfer; kept
    /// for diagnostics, never used to steer any driver.
    pub nu_proof_form: f64,
}

/// Transfers a certificate for `y_bar` to a nearby point `y_tilde`.
///
/// With `c = ||y_bar - y_tilde|| / iota`, the extended point set
/// `{y_tilde} ∪ P` certifies `(iota~, nu~)` at `y_tilde`, where
/// `iota~ = (1+c) iota` and
/// `nu~ = (f(y_tilde) + c f(y_bar) - (1+2c) level) / iota~`.
/// The caller must ensure the model minimum over `B(y_bar, iota)` stays at or
/// above `level`. A negative `nu~` is reported raw; it simply makes the claim
/// vacuous since the measured gap is always nonnegative.
pub fn transfer(
    cert: &WolfeCertificate,
    y_tilde_cut: &Cut,
    level: f64,
) -> Result<TransferredCertificate, CertificateError> {
    if cert.points.is_empty() {
        return Err(CertificateError::EmptyPointSet);
    }
    if !(cert.iota > 0.0) {
        return Err(CertificateError::NonpositiveRadius(cert.iota));
    }
    let y_bar = cert.center_vec();
    let y_tilde = DVector::from_column_slice(&y_tilde_cut.z);
    let c = (&y_bar - &y_tilde).norm() / cert.iota;
    let iota_t = (1.0 + c) * cert.iota;
    let f_ybar = cert.f_center();
    let f_ytilde = y_tilde_cut.fz;
    let nu_t = (f_ytilde + c * f_ybar - (1.0 + 2.0 * c) * level) / iota_t;
    let nu_proof_form = (f_ytilde + (1.0 + 2.0 * c) * f_ybar - (2.0 + 2.0 * c) * level) / iota_t;
    let mut points = Vec::with_capacity(cert.points.len() + 1);
    points.push(y_tilde_cut.clone());
    points.extend(cert.points.iter().cloned());
    Ok(TransferredCertificate {
        cert: WolfeCertificate {
            center: y_tilde_cut.z.clone(),
            iota: iota_t,
            nu: nu_t,
            points,
        },
        nu_proof_form,
    })
}

/// Outcome of a soundness check on a claimed certificate.
#[derive(Debug, Clone)]
pub struct CertificateReport {
    pub valid: bool,
    pub v_measured: f64,
    /// Certified upper bound on the true gap (what validity is judged by).
    pub v_upper: f64,
    pub containment_ok: bool,
    pub max_point_distance: f64,
}

/// Independently verifies a certificate: point containment in the ball and
/// measured gap at most the claimed `nu` plus `tol`.
pub fn verify_certificate(
    cert: &WolfeCertificate,
    tol: f64,
) -> Result<CertificateReport, CertificateError> {
    if cert.points.is_empty() {
        return Err(CertificateError::EmptyPointSet);
    }
    let center = cert.center_vec();
    let mut max_dist = 0.0_f64;
    for p in &cert.points {
        let d = (DVector::from_column_slice(&p.z) - &center).norm();
        max_dist = max_dist.max(d);
    }
    let containment_ok = max_dist <= cert.iota + 1e-9;
    let inner_tol = (0.25 * tol * cert.iota).min(1e-9 * (1.0 + cert.f_center().abs()));
    let gap = wolfe_gap(&cert.points, &center, cert.iota, inner_tol)?;
    let valid = containment_ok && gap.v_upper <= cert.nu + tol;
    Ok(CertificateReport {
        valid,
        v_measured: gap.v,
        v_upper: gap.v_upper,
        containment_ok,
        max_point_distance: max_dist,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vecd(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn cut_at(z: &[f64], fz: f64, g: &[f64]) -> Cut {
        Cut {
            z: z.to_vec(),
            fz,
            g: g.to_vec(),
        }
    }

    #[test]
    fn psi_single_affine() {
        let p = vec![cut_at(&[0.0], 0.0, &[1.0])];
        assert!((psi(&p, &vecd(&[3.0])) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn psi_symmetric_pair() {
        // Cuts of |x| at +-1 evaluated at 0.
        let p = vec![cut_at(&[1.0], 1.0, &[1.0]), cut_at(&[-1.0], 1.0, &[-1.0])];
        assert!(psi(&p, &vecd(&[0.0])).abs() < 1e-15);
    }

    #[test]
    fn psi_matches_direct_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cuts: Vec<Cut> = (0..5)
            .map(|_| {
                cut_at(
                    &[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                    rng.gen_range(-1.0..1.0),
                    &[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                )
            })
            .collect();
        for _ in 0..10 {
            let x = vecd(&[rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]);
            let direct = cuts
                .iter()
                .map(|c| c.eval(&x))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((psi(&cuts, &x) - direct).abs() < 1e-14);
        }
    }

    #[test]
    fn gradient_norm_analogue() {
        // Single cut at the center: V equals the gradient norm.
        let g = [0.6, -0.8];
        let cuts = vec![cut_at(&[0.2, 0.4], 1.5, &g)];
        let gap = wolfe_gap(&cuts, &vecd(&[0.2, 0.4]), 0.7, 1e-11).unwrap();
        assert!((gap.v - 1.0).abs() < 1e-9, "v = {}", gap.v);
        assert!(gap.error_bound <= 1e-11 / 0.7 + 1e-15);
    }

    #[test]
    fn model_minimizer_inside_ball_gives_zero() {
        // Cuts of |x| at +-eps around 0: the model minimum 0 is attained at 0.
        let eps = 0.01;
        let cuts = vec![
            cut_at(&[eps], eps, &[1.0]),
            cut_at(&[-eps], eps, &[-1.0]),
        ];
        let gap = wolfe_gap(&cuts, &vecd(&[0.0]), 1.0, 1e-12).unwrap();
        assert!(gap.v.abs() < 1e-10, "v = {}", gap.v);
    }

    /// Grid + pattern-refinement search of the model minimum over a disk.
    fn brute_force_ball_min(cuts: &[Cut], center: &DVector<f64>, radius: f64) -> f64 {
        let value = |x: &DVector<f64>| {
            cuts.iter()
                .map(|c| c.eval(x))
                .fold(f64::NEG_INFINITY, f64::max)
        };
        let clamp = |x: DVector<f64>| {
            let d = &x - center;
            let dn = d.norm();
            if dn > radius {
                center + d * (radius / dn)
            } else {
                x
            }
        };
        let mut best = center.clone();
        let mut best_v = value(&best);
        let n = 120;
        for i in 0..=n {
            for j in 0..=n {
                let x = vecd(&[
                    center[0] - radius + 2.0 * radius * i as f64 / n as f64,
                    center[1] - radius + 2.0 * radius * j as f64 / n as f64,
                ]);
                if (&x - center).norm() > radius {
                    continue;
                }
                let v = value(&x);
                if v < best_v {
                    best_v = v;
                    best = x;
                }
            }
        }
        // Pattern refinement.
        let mut step = 2.0 * radius / n as f64;
        while step > 1e-10 {
            let mut improved = false;
            for dir in [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]] {
                let cand = clamp(&best + vecd(&dir) * step);
                let v = value(&cand);
                if v < best_v {
                    best_v = v;
                    best = cand;
                    improved = true;
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        best_v
    }

    #[test]
    fn matches_grid_search_in_two_dimensions() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..5 {
            let cuts: Vec<Cut> = (0..4)
                .map(|_| {
                    cut_at(
                        &[rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)],
                        rng.gen_range(-1.0..1.0),
                        &[rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)],
                    )
                })
                .collect();
            let center = vecd(&[0.0, 0.0]);
            let iota = 0.7;
            let gap = wolfe_gap(&cuts, &center, iota, 1e-9).unwrap();
            let psi_c = psi(&cuts, &center);
            let brute = brute_force_ball_min(&cuts, &center, iota);
            let v_brute = ((psi_c - brute) / iota).max(0.0);
            assert!(
                (gap.v - v_brute).abs() < 1e-6,
                "trial {trial}: exact {} vs brute {}",
                gap.v,
                v_brute
            );
        }
    }

    #[test]
    fn monotone_in_radius() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..25 {
            let d = rng.gen_range(1..=4);
            let cuts: Vec<Cut> = (0..rng.gen_range(1..=5))
                .map(|_| {
                    let z: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let g: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    cut_at(&z, rng.gen_range(-1.0..1.0), &g)
                })
                .collect();
            let center = DVector::from_fn(d, |_, _| rng.gen_range(-0.5..0.5));
            let i2: f64 = rng.gen_range(0.1..1.0);
            let i1: f64 = i2 + rng.gen_range(0.05..1.0);
            let tol = 1e-10;
            let g1 = wolfe_gap(&cuts, &center, i1, tol).unwrap();
            let g2 = wolfe_gap(&cuts, &center, i2, tol).unwrap();
            assert!(
                g1.v <= g2.v + 2e-9,
                "V({i1}) = {} > V({i2}) = {}",
                g1.v,
                g2.v
            );
        }
    }

    #[test]
    fn gap_bound_formula() {
        assert!((gap_bound(2.0, 3.0, 1.0) - 18.0).abs() < 1e-15);
        assert_eq!(gap_bound(1.0, 0.0, 5.0), 0.0);
        // Crossover at iota = 2 nu / mu.
        let (nu, mu): (f64, f64) = (1.5, 4.0);
        let iota = 2.0 * nu / mu;
        assert!((iota * nu - 2.0 * nu * nu / mu).abs() < 1e-15);
    }

    #[test]
    fn transfer_degenerate_and_direct() {
        let cert = WolfeCertificate {
            center: vec![1.0, 0.0],
            iota: 0.5,
            nu: 0.3,
            points: vec![cut_at(&[1.0, 0.0], 5.0, &[0.1, 0.0])],
        };
        // c = 0: same center.
        let same = transfer(&cert, &cut_at(&[1.0, 0.0], 5.0, &[0.1, 0.0]), 4.0).unwrap();
        assert!((same.cert.iota - 0.5).abs() < 1e-15);
        assert!((same.cert.nu - (5.0 - 4.0) / 0.5).abs() < 1e-12);

        // c = 1 with equal values 5 and level 4: nu~ = (5 + 5 - 12)/(2 iota).
        let far = transfer(&cert, &cut_at(&[1.5, 0.0], 5.0, &[0.1, 0.0]), 4.0).unwrap();
        assert!((far.cert.iota - 1.0).abs() < 1e-12);
        assert!((far.cert.nu - (-2.0 / 1.0)).abs() < 1e-12);
    }

    #[test]
    fn verify_accepts_flat_minimum_and_rejects_tampering() {
        let cert = WolfeCertificate {
            center: vec![0.0],
            iota: 1.0,
            nu: 0.0,
            points: vec![cut_at(&[0.0], 0.0, &[0.0])],
        };
        let report = verify_certificate(&cert, 1e-9).unwrap();
        assert!(report.valid);

        let mut bad = cert.clone();
        bad.points = vec![cut_at(&[0.0], 0.0, &[1.0])];
        // Claimed nu = 0 but the measured gap is 1.
        let report = verify_certificate(&bad, 1e-9).unwrap();
        assert!(!report.valid);
    }
}
