//! Fixed-level accelerated driver and its trace machinery.
//!
//! The driver repeats [`one_step`] from a fixed reference point with the
//! weight schedule `alpha_t = 4/(t+3)`, `omega_t = (t+2)(t+3)/2`, recording
//! per-iteration data sufficient to replay every convergence inequality.
//! The same stage loop is shared by the certificate generator and the
//! restarted drivers, which add their own branch logic on top.

use crate::onestep::{one_step, CarrySet, CutOption, LbarAccumulator, OneStepInput, OneStepOutput};
use crate::oracle::{CountingOracle, Cut, FirstOrderOracle};
use crate::projection::{ProjectionError, ProjectionTols};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error("outer-iteration safety cap {0} exceeded")]
    IterationCap(usize),
    #[error("stage safety cap {0} exceeded")]
    StageCap(usize),
}

/// The weight schedule; `omega_t (1 - alpha_t/2) = omega_{t-1}` exactly.
#[derive(Debug, Clone, Copy)]
pub struct Schedule;

impl Schedule {
    pub fn alpha(t: usize) -> f64 {
        4.0 / (t as f64 + 3.0)
    }

    pub fn omega(t: usize) -> f64 {
        (t as f64 + 2.0) * (t as f64 + 3.0) / 2.0
    }
}

/// One recorded outer iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub t: usize,
    pub f_hat: f64,
    pub level: f64,
    pub alpha: f64,
    pub omega: f64,
    pub l_t: Option<f64>,
    pub pair_dist: Option<f64>,
    pub event: bool,
    /// `||x^t - y_bar||` for the stage's final inner iterate.
    pub dist: f64,
    pub flag: bool,
    /// Oracle calls consumed so far by this run.
    pub oracle_calls: u64,
    /// Running event-weighted average of the pair ratios.
    pub lbar: f64,
}

/// Complete record of a fixed-level run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunTrace {
    pub instance: String,
    pub seed: Option<u64>,
    pub level: f64,
    pub m: usize,
    pub y_bar: Vec<f64>,
    pub f_hat0: f64,
    pub records: Vec<StageRecord>,
    /// Count of proximal-distance monotonicity violations beyond tolerance
    /// observed anywhere in the run (expected to stay zero).
    pub monotone_violations: usize,
}

impl RunTrace {
    /// Line-delimited JSON, one object per outer iteration.
    pub fn write_jsonl<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        for rec in &self.records {
            serde_json::to_writer(&mut w, rec)?;
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Data-driven stop condition for [`apex_run`].
#[derive(Debug, Clone)]
pub struct StopRule {
    pub max_outer: usize,
    /// Stop once `f(x_hat) - level <= gap`.
    pub target_gap: Option<f64>,
    pub oracle_budget: Option<u64>,
    pub wall_clock: Option<Duration>,
}

impl StopRule {
    pub fn max_outer(n: usize) -> Self {
        StopRule {
            max_outer: n,
            target_gap: None,
            oracle_budget: None,
            wall_clock: None,
        }
    }

    pub fn with_target_gap(mut self, gap: f64) -> Self {
        self.target_gap = Some(gap);
        self
    }

    pub fn with_oracle_budget(mut self, calls: u64) -> Self {
        self.oracle_budget = Some(calls);
        self
    }
}

/// Shared outer loop: schedule bookkeeping, trace recording, monotonicity
/// accounting and the running Lipschitz average. Drivers call [`advance`]
/// repeatedly and apply their own termination logic to the outcome.
///
/// [`advance`]: StageLoop::advance
pub struct StageLoop<'a> {
    oracle: CountingOracle<'a>,
    pub y_bar: DVector<f64>,
    /// Cut at the reference point (first entry of every certificate set).
    pub y_cut: Cut,
    pub level: f64,
    m: usize,
    option: CutOption,
    t: usize,
    x_hat: DVector<f64>,
    f_hat: f64,
    x_cur: DVector<f64>,
    carry: Option<CarrySet>,
    lbar: LbarAccumulator,
    records: Vec<StageRecord>,
    monotone_violations: usize,
    prev_dist: f64,
    tols: ProjectionTols,
}

/// What one outer iteration produced, as seen by driver logic.
pub struct StageOutcome<'r> {
    pub record: &'r StageRecord,
    /// Cuts generated this iteration.
    pub cuts: Vec<Cut>,
    pub flag: bool,
}

impl<'a> StageLoop<'a> {
    /// Evaluates the oracle once at `y_bar` and prepares the loop.
    pub fn new(
        oracle: &'a dyn FirstOrderOracle,
        y_bar: &DVector<f64>,
        level: f64,
        m: usize,
        option: CutOption,
    ) -> Self {
        let counting = CountingOracle::new(oracle);
        let sample = counting.eval(y_bar);
        let y_cut = sample.cut();
        StageLoop {
            oracle: counting,
            y_bar: y_bar.clone(),
            y_cut,
            level,
            m,
            option,
            t: 0,
            x_hat: y_bar.clone(),
            f_hat: sample.f,
            x_cur: y_bar.clone(),
            carry: None,
            lbar: LbarAccumulator::new(),
            records: Vec::new(),
            monotone_violations: 0,
            prev_dist: 0.0,
            tols: ProjectionTols::default(),
        }
    }

    /// Reuses an already-evaluated reference cut instead of spending a call.
    pub fn with_known_reference(
        oracle: &'a dyn FirstOrderOracle,
        y_cut: Cut,
        level: f64,
        m: usize,
        option: CutOption,
    ) -> Self {
        let y_bar = y_cut.z_vec();
        StageLoop {
            oracle: CountingOracle::new(oracle),
            y_bar: y_bar.clone(),
            f_hat: y_cut.fz,
            y_cut,
            level,
            m,
            option,
            t: 0,
            x_hat: y_bar.clone(),
            x_cur: y_bar,
            carry: None,
            lbar: LbarAccumulator::new(),
            records: Vec::new(),
            monotone_violations: 0,
            prev_dist: 0.0,
            tols: ProjectionTols::default(),
        }
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn f_hat(&self) -> f64 {
        self.f_hat
    }

    pub fn x_hat(&self) -> &DVector<f64> {
        &self.x_hat
    }

    pub fn x_cur(&self) -> &DVector<f64> {
        &self.x_cur
    }

    pub fn f_reference(&self) -> f64 {
        self.y_cut.fz
    }

    pub fn lbar(&self) -> f64 {
        self.lbar.value()
    }

    pub fn oracle_calls(&self) -> u64 {
        self.oracle.calls()
    }

    pub fn records(&self) -> &[StageRecord] {
        &self.records
    }

    /// Runs one outer iteration and records it.
    pub fn advance(&mut self) -> Result<StageOutcome<'_>, SolverError> {
        self.t += 1;
        let alpha = Schedule::alpha(self.t);
        let omega = Schedule::omega(self.t);
        let f_hat_prev = self.f_hat;

        let out: OneStepOutput = one_step(OneStepInput {
            oracle: &self.oracle,
            y_bar: &self.y_bar,
            x_hat_prev: &self.x_hat.clone(),
            f_hat_prev,
            x_t0: &self.x_cur.clone(),
            level: self.level,
            m: self.m,
            alpha_t: alpha,
            option: self.option,
            carry: self.carry.as_ref(),
            tols: self.tols,
        })?;

        // Proximal distances must be nondecreasing along (t, i), including
        // across the stage boundary where x^{t+1,0} = x^{t,m}.
        for &d in &out.inner_dists {
            if d < self.prev_dist - 1e-9 {
                self.monotone_violations += 1;
            }
            self.prev_dist = self.prev_dist.max(d);
        }

        let event = out.f_hat - self.level > (1.0 - alpha / 2.0) * (f_hat_prev - self.level);
        let lbar = self.lbar.update(alpha, omega, out.l_t, out.pair_dist, event);
        let dist = (&out.x_next0 - &self.y_bar).norm();

        if self.option == CutOption::OptionII && !out.flag {
            self.carry = Some(out.carry_set(&self.x_cur));
        }

        self.x_hat = out.x_hat;
        self.f_hat = out.f_hat;
        self.x_cur = out.x_next0;

        self.records.push(StageRecord {
            t: self.t,
            f_hat: self.f_hat,
            level: self.level,
            alpha,
            omega,
            l_t: out.l_t,
            pair_dist: out.pair_dist,
            event,
            dist,
            flag: out.flag,
            oracle_calls: self.oracle.calls(),
            lbar,
        });

        Ok(StageOutcome {
            record: self.records.last().unwrap(),
            cuts: out.cuts,
            flag: out.flag,
        })
    }

    pub fn into_trace(self, instance: &str, seed: Option<u64>) -> RunTrace {
        RunTrace {
            instance: instance.to_string(),
            seed,
            level: self.level,
            m: self.m,
            y_bar: self.y_bar.as_slice().to_vec(),
            f_hat0: self.y_cut.fz,
            records: self.records,
            monotone_violations: self.monotone_violations,
        }
    }

    pub fn monotone_violations(&self) -> usize {
        self.monotone_violations
    }
}

/// Result of a fixed-level run.
pub struct ApexRun {
    pub trace: RunTrace,
    pub x_hat: DVector<f64>,
    pub f_hat: f64,
    /// Final stage iterate `x^{N,m}`.
    pub x_last: DVector<f64>,
}

/// Runs the fixed-level driver from `y_bar` until a stop condition, an
/// infeasible subproblem, or the iteration bound.
pub fn apex_run(
    oracle: &dyn FirstOrderOracle,
    y_bar: &DVector<f64>,
    level: f64,
    m: usize,
    option: CutOption,
    stop: &StopRule,
) -> Result<ApexRun, SolverError> {
    let start = Instant::now();
    let mut engine = StageLoop::new(oracle, y_bar, level, m, option);
    while engine.t() < stop.max_outer {
        let outcome = engine.advance()?;
        let flag = outcome.flag;
        let gap = outcome.record.f_hat - level;
        if flag {
            break;
        }
        if stop.target_gap.is_some_and(|g| gap <= g) {
            break;
        }
        if stop.oracle_budget.is_some_and(|b| engine.oracle_calls() >= b) {
            break;
        }
        if stop.wall_clock.is_some_and(|w| start.elapsed() >= w) {
            break;
        }
    }
    let x_hat = engine.x_hat().clone();
    let f_hat = engine.f_hat();
    let x_last = engine.x_cur().clone();
    Ok(ApexRun {
        trace: engine.into_trace("", None),
        x_hat,
        f_hat,
        x_last,
    })
}

/// Report produced by [`verify_rate`].
#[derive(Debug, Clone)]
pub struct RateReport {
    /// `(t, lhs, rhs)` triples where the bound failed.
    pub violations: Vec<(usize, f64, f64)>,
    pub checked: usize,
}

impl RateReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Replays the optimal-level convergence bound on a recorded trace:
/// `f(x_hat^t) - f* <= [6 (f(x_hat^0) - f*) + 2 Lbar(t) ||x* - y_bar||^2] / ((t+2)(t+3))`.
///
/// The trace must have been produced with `level = f_star`.
pub fn verify_rate(trace: &RunTrace, f_star: f64, x_star: &DVector<f64>) -> RateReport {
    let y_bar = DVector::from_column_slice(&trace.y_bar);
    let dist2 = (x_star - &y_bar).norm_squared();
    let slack = 1e-8 * (1.0 + f_star.abs());
    let mut violations = Vec::new();
    for rec in &trace.records {
        let t = rec.t as f64;
        let lhs = rec.f_hat - f_star;
        let rhs = (6.0 * (trace.f_hat0 - f_star) + 2.0 * rec.lbar * dist2)
            / ((t + 2.0) * (t + 3.0));
        if lhs > rhs + slack {
            violations.push((rec.t, lhs, rhs));
        }
    }
    RateReport {
        violations,
        checked: trace.records.len(),
    }
}

/// Replays the raw weighted convergence inequality
/// `omega_t [f_hat^t - level] - 3 [f_hat^0 - level] <= Lbar(t) ||x^t - y_bar||^2`
/// on every record carrying a pair ratio.
pub fn verify_upper_bound_con(trace: &RunTrace) -> RateReport {
    let slack_base = 1e-8 * (1.0 + trace.f_hat0.abs());
    let mut violations = Vec::new();
    let mut checked = 0;
    for rec in &trace.records {
        if rec.l_t.is_none() {
            continue;
        }
        checked += 1;
        let lhs = rec.omega * (rec.f_hat - trace.level) - 3.0 * (trace.f_hat0 - trace.level);
        let rhs = rec.lbar * rec.dist * rec.dist;
        if lhs > rhs + slack_base * rec.omega {
            violations.push((rec.t, lhs, rhs));
        }
    }
    RateReport {
        violations,
        checked,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::OracleSample;

    #[test]
    fn schedule_identity() {
        // omega_t (1 - alpha_t / 2) = omega_{t-1}, sampled up to 1e6.
        let mut t = 1usize;
        while t <= 1_000_000 {
            let lhs = Schedule::omega(t) * (1.0 - Schedule::alpha(t) / 2.0);
            let rhs = Schedule::omega(t - 1);
            assert!(
                (lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0),
                "t = {t}: {lhs} vs {rhs}"
            );
            t = (t * 3 + 1) / 2;
        }
        assert_eq!(Schedule::alpha(1), 1.0);
        assert_eq!(Schedule::omega(1), 6.0);
        assert_eq!(Schedule::omega(1) * (1.0 - Schedule::alpha(1) / 2.0), 3.0);
    }

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
    fn level_at_reference_value_freezes_the_run() {
        let y = DVector::from_vec(vec![1.0, 0.0]);
        let run = apex_run(
            &HalfNormSq,
            &y,
            0.5,
            2,
            CutOption::OptionI,
            &StopRule::max_outer(5),
        )
        .unwrap();
        for rec in &run.trace.records {
            assert!((rec.f_hat - 0.5).abs() < 1e-12);
            assert!(rec.dist < 1e-12);
        }
    }

    #[test]
    fn quadratic_converges_and_rate_holds() {
        // f = ||x||^2 / 2, y_bar = e_1, level = f* = 0.
        let y = DVector::from_vec(vec![1.0, 0.0]);
        let run = apex_run(
            &HalfNormSq,
            &y,
            0.0,
            1,
            CutOption::OptionI,
            &StopRule::max_outer(60),
        )
        .unwrap();
        assert!(run.f_hat < 1e-3, "f_hat = {}", run.f_hat);
        assert_eq!(run.trace.monotone_violations, 0);
        let report = verify_rate(&run.trace, 0.0, &DVector::zeros(2));
        assert!(report.ok(), "violations: {:?}", report.violations);
        let con = verify_upper_bound_con(&run.trace);
        assert!(con.ok(), "violations: {:?}", con.violations);
    }

    #[test]
    fn corrupted_average_is_detected() {
        // A trace with the bound exactly tight at t = 1; halving the
        // recorded average must then register as a violation.
        let lbar = 1.0;
        let tight_f_hat = (6.0 * 1.0 + 2.0 * lbar * 1.0) / (3.0 * 4.0);
        let mut trace = RunTrace {
            instance: String::new(),
            seed: None,
            level: 0.0,
            m: 1,
            y_bar: vec![0.0],
            f_hat0: 1.0,
            records: vec![StageRecord {
                t: 1,
                f_hat: tight_f_hat,
                level: 0.0,
                alpha: 1.0,
                omega: 6.0,
                l_t: Some(lbar),
                pair_dist: Some(1.0),
                event: true,
                dist: 1.0,
                flag: false,
                oracle_calls: 3,
                lbar,
            }],
            monotone_violations: 0,
        };
        let x_star = DVector::from_vec(vec![1.0]);
        assert!(verify_rate(&trace, 0.0, &x_star).ok());
        trace.records[0].lbar *= 0.5;
        let report = verify_rate(&trace, 0.0, &x_star);
        assert!(!report.ok(), "halving the average must break the bound");
    }

    #[test]
    fn option_two_retains_previous_cuts() {
        let y = DVector::from_vec(vec![1.0, 0.0]);
        let run = apex_run(
            &HalfNormSq,
            &y,
            0.0,
            2,
            CutOption::OptionII,
            &StopRule::max_outer(30),
        )
        .unwrap();
        assert!(run.f_hat < 1e-2);
        assert_eq!(run.trace.monotone_violations, 0);
        let report = verify_rate(&run.trace, 0.0, &DVector::zeros(2));
        assert!(report.ok(), "violations: {:?}", report.violations);
    }

    #[test]
    fn oracle_calls_bounded_by_two_m() {
        let y = DVector::from_vec(vec![1.0, 0.0]);
        let run = apex_run(
            &HalfNormSq,
            &y,
            0.0,
            3,
            CutOption::OptionI,
            &StopRule::max_outer(10),
        )
        .unwrap();
        let mut prev = 1; // reference evaluation
        for rec in &run.trace.records {
            assert!(rec.oracle_calls - prev <= 2 * 3);
            prev = rec.oracle_calls;
        }
    }
}
