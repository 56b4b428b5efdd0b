//! Accelerated Wolfe-certificate generation.
//!
//! Runs the stage loop at the exploratory level `f(y_bar) - (1+beta) delta`.
//! The proximal distances from the reference grow monotonically; once they
//! escape the prescribed radius (or a subproblem turns infeasible, the
//! distance "reaching infinity"), the accumulated evaluation points certify
//! that the model cannot drop below the level anywhere inside the ball,
//! yielding an `(iota_max, (1+beta) delta / iota_max)` certificate. If
//! instead the growth predicted by the convergence bound fails to
//! materialize within budget, the gap guess `delta` was too small, which
//! refutes the quadratic-growth estimate that produced it.

use crate::apex::{RunTrace, Schedule, SolverError, StageLoop};
use crate::certificate::WolfeCertificate;
use crate::onestep::CutOption;
use crate::oracle::{Cut, FirstOrderOracle};
use nalgebra::DVector;

/// Outcome of a certificate-generation attempt.
pub struct AwgOutcome {
    /// True when a certificate was produced; false when the gap guess was
    /// refuted (the quadratic-growth estimate is too aggressive).
    pub success: bool,
    pub x_hat: DVector<f64>,
    pub f_hat: f64,
    pub cert: Option<WolfeCertificate>,
    pub oracle_calls: u64,
    pub trace: RunTrace,
}

/// Keeps the cuts whose evaluation points lie in the closed ball.
pub(crate) fn filter_ball(cuts: &[Cut], center: &DVector<f64>, radius: f64) -> Vec<Cut> {
    cuts.iter()
        .filter(|c| (DVector::from_column_slice(&c.z) - center).norm() <= radius)
        .cloned()
        .collect()
}

/// Certificate generation for a reference point, evaluating the oracle once
/// at `y_bar`.
pub fn awg(
    oracle: &dyn FirstOrderOracle,
    y_bar: &DVector<f64>,
    delta: f64,
    m: usize,
    iota_max: f64,
    beta: f64,
) -> Result<AwgOutcome, SolverError> {
    let sample = oracle.eval(y_bar);
    let mut outcome = awg_with_cut(
        oracle,
        &sample.cut(),
        delta,
        m,
        iota_max,
        beta,
        CutOption::OptionI,
        1_000_000,
    )?;
    outcome.oracle_calls += 1;
    Ok(outcome)
}

/// Same as [`awg`], reusing an already-evaluated reference cut.
#[allow(clippy::too_many_arguments)]
pub fn awg_with_cut(
    oracle: &dyn FirstOrderOracle,
    y_cut: &Cut,
    delta: f64,
    m: usize,
    iota_max: f64,
    beta: f64,
    option: CutOption,
    max_outer: usize,
) -> Result<AwgOutcome, SolverError> {
    assert!(delta > 0.0, "awg needs a positive gap estimate");
    assert!(iota_max > 0.0 && beta > 0.0);
    let f_y = y_cut.fz;
    let level = f_y - (1.0 + beta) * delta;
    let mut engine = StageLoop::with_known_reference(oracle, y_cut.clone(), level, m, option);
    let mut points: Vec<Cut> = vec![y_cut.clone()];

    loop {
        if engine.t() >= max_outer {
            return Err(SolverError::IterationCap(max_outer));
        }
        let outcome = engine.advance()?;
        let flag = outcome.flag;
        let dist = outcome.record.dist;
        let t = outcome.record.t;
        let lbar = outcome.record.lbar;
        points.extend(outcome.cuts);

        if flag || dist > iota_max {
            let cert = WolfeCertificate {
                center: y_cut.z.clone(),
                iota: iota_max,
                nu: (1.0 + beta) * delta / iota_max,
                points: filter_ball(&points, &engine.y_bar, iota_max),
            };
            let x_hat = engine.x_hat().clone();
            let f_hat = engine.f_hat();
            let calls = engine.oracle_calls();
            return Ok(AwgOutcome {
                success: true,
                x_hat,
                f_hat,
                cert: Some(cert),
                oracle_calls: calls,
                trace: engine.into_trace("", None),
            });
        }

        // Refutation tests: the convergence bound predicts faster escape than
        // observed, or the iteration budget is exhausted.
        let omega = Schedule::omega(t);
        let slack_test = lbar * dist * dist
            < omega * beta * delta - 3.0 * (1.0 + beta) * delta;
        let budget = ((2.0 * iota_max * iota_max * lbar + 6.0 * (1.0 + beta) * delta)
            / (beta * delta))
            .sqrt();
        if slack_test || t as f64 >= budget {
            let x_hat = engine.x_hat().clone();
            let f_hat = engine.f_hat();
            let calls = engine.oracle_calls();
            return Ok(AwgOutcome {
                success: false,
                x_hat,
                f_hat,
                cert: None,
                oracle_calls: calls,
                trace: engine.into_trace("", None),
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certificate::verify_certificate;
    use crate::oracle::OracleSample;

    struct HalfNormSq;
    impl FirstOrderOracle for HalfNormSq {
        fn dim(&self) -> usize {
            2
        }
        fn eval(&self, x: &DVector<f64>) -> OracleSample {
            OracleSample {
                x: x.clone(),
                f: 0.5 * x.norm_squared(),
                g: x.clone(),
                active_index: None,
            }
        }
    }

    #[test]
    fn certificate_generated_when_gap_estimate_is_valid() {
        // y at distance 1 from the minimizer: true gap 0.5; delta = 0.6.
        let y = DVector::from_vec(vec![1.0, 0.0]);
        let delta = 0.6;
        let beta = 1.0;
        let mu = 1.0_f64;
        let iota_max = (2.0 * (1.0 + beta) * delta / mu).sqrt();
        let out = awg(&HalfNormSq, &y, delta, 2, iota_max, beta).unwrap();
        assert!(out.success, "valid gap estimate must produce a certificate");
        let cert = out.cert.unwrap();
        assert!((cert.nu - (1.0 + beta) * delta / iota_max).abs() < 1e-12);
        let report = verify_certificate(&cert, 1e-7).unwrap();
        assert!(
            report.valid,
            "measured {} vs claimed {}",
            report.v_upper, cert.nu
        );
        assert_eq!(out.trace.monotone_violations, 0);
    }

    #[test]
    fn huge_radius_never_escapes_on_bounded_sublevels() {
        // With an effectively infinite radius the only exits are the
        // refutation branches or an infeasible subproblem.
        let y = DVector::from_vec(vec![1.0, 0.0]);
        let out = awg(&HalfNormSq, &y, 1e-3, 2, 1e30, 1.0).unwrap();
        assert!(!out.success);
        assert!(out.cert.is_none());
    }

    #[test]
    fn aggressive_gap_guess_is_refuted() {
        // A wildly overestimated growth modulus produces a tiny gap guess
        // with delta <= ||g||^2/(2 mu_hat): the iterates stall at the shallow
        // level set without escaping the radius, so the budget test fires.
        let y = DVector::from_vec(vec![4.0, 3.0]); // true gap 12.5, ||g|| = 5
        let mu_hat = 1e6_f64;
        let delta = 25.0 / (2.0 * mu_hat);
        let beta = 1.0;
        let iota_max = (2.0 * (1.0 + beta) * delta / mu_hat).sqrt();
        let out = awg(&HalfNormSq, &y, delta, 2, iota_max, beta).unwrap();
        assert!(!out.success);
        assert!(out.trace.records.len() <= 8, "refutation must be quick");
    }
}
