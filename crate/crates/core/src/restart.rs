//! Restarted drivers.
//!
//! All three drivers shrink a certified optimality gap geometrically by
//! restarting the stage loop between an upper bound (best value seen) and a
//! lower bound maintained through Wolfe certificates:
//!
//! * [`rapex_known`] uses the true quadratic-growth modulus directly;
//! * [`agr`] is a single gap-reduction attempt for a given modulus estimate,
//!   reporting which of the two bounds improved or that the estimate failed
//!   its budget;
//! * [`rapex_unknown`] wraps certificate generation and gap reduction in a
//!   guess-and-check loop that quarters the modulus estimate whenever either
//!   subroutine refutes it.

use crate::apex::{RunTrace, SolverError, StageLoop};
use crate::awg::{awg_with_cut, filter_ball};
use crate::certificate::WolfeCertificate;
use crate::onestep::CutOption;
use crate::oracle::{CountingOracle, Cut, FirstOrderOracle};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

/// Per-stage bookkeeping shared by the restarted drivers.
#[derive(Debug, Clone)]
pub struct GapState {
    pub s: usize,
    pub f_upper: f64,
    pub f_lower: f64,
    pub delta: f64,
    pub mu_hat: f64,
    pub mu_committed: f64,
    pub iota: Option<f64>,
    pub y_bar: Vec<f64>,
    pub grad_norm_at_y: f64,
}

/// Event stream of a driver run, one entry per decision point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageEvent {
    pub stage: usize,
    pub event: StageEventKind,
    pub mu_hat: f64,
    pub delta_tilde: f64,
    pub f_upper: f64,
    pub f_lower: f64,
    pub oracle_calls: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageEventKind {
    AwgFail,
    AwgOk,
    AgrBudget,
    AgrRadius,
    AgrObjective,
    Commit,
}

/// Tuning and budget knobs for the restarted drivers.
#[derive(Debug, Clone)]
pub struct DriverConfig {
    pub theta: f64,
    pub beta: f64,
    pub m: usize,
    pub option: CutOption,
    /// Target certified gap.
    pub eps: f64,
    pub stage_cap: usize,
    pub outer_cap_per_stage: usize,
    pub oracle_budget: Option<u64>,
    /// Keep emitted certificates (point sets can be large).
    pub collect_certificates: bool,
    /// Keep per-stage traces.
    pub collect_traces: bool,
}

impl DriverConfig {
    pub fn new(m: usize, eps: f64) -> Self {
        DriverConfig {
            theta: 0.75,
            beta: 1.0,
            m,
            option: CutOption::OptionI,
            eps,
            stage_cap: 100_000,
            outer_cap_per_stage: 1_000_000,
            oracle_budget: None,
            collect_certificates: false,
            collect_traces: false,
        }
    }

    pub fn with_theta(mut self, theta: f64) -> Self {
        assert!(theta > 0.5 && theta < 1.0, "theta must lie in (1/2, 1)");
        self.theta = theta;
        self
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        assert!(beta > 0.0, "beta must be positive");
        self.beta = beta;
        self
    }

    pub fn collecting(mut self) -> Self {
        self.collect_certificates = true;
        self.collect_traces = true;
        self
    }
}

/// Result of a restarted run.
pub struct RestartOutcome {
    pub solution: DVector<f64>,
    pub f_final: f64,
    /// Certified on termination: `f_final - f* <= final_gap` whenever every
    /// lower bound along the way was valid.
    pub final_gap: f64,
    pub f_lower_final: f64,
    pub history: Vec<GapState>,
    pub events: Vec<StageEvent>,
    pub certificates: Vec<WolfeCertificate>,
    pub traces: Vec<RunTrace>,
    pub oracle_calls: u64,
    pub grad_norm_y0: f64,
    /// False when the run stopped on its oracle budget instead of reaching
    /// the target gap.
    pub completed: bool,
    pub monotone_violations: usize,
}

// ---------------------------------------------------------------------------
// Known modulus.
// ---------------------------------------------------------------------------

/// Restarted driver for a known quadratic-growth modulus.
///
/// Each stage runs the loop at level `f_upper - theta * delta` until either
/// the objective closes on the lower bound (upper-bound improvement) or the
/// stage iterate escapes the radius `sqrt(2 theta delta / mu_star)` or hits
/// an infeasible subproblem, which certifies a tighter lower bound. Both
/// exits shrink the certified gap by `theta`.
pub fn rapex_known(
    oracle: &dyn FirstOrderOracle,
    y0: &DVector<f64>,
    mu_star: f64,
    config: &DriverConfig,
) -> Result<RestartOutcome, SolverError> {
    assert!(mu_star > 0.0);
    let theta = config.theta;
    let counting = CountingOracle::new(oracle);

    let sample0 = counting.eval(y0);
    let grad_norm_y0 = sample0.g.norm();
    let mut y_cut = sample0.cut();
    let mut f_upper = sample0.f;
    let mut delta = grad_norm_y0 * grad_norm_y0 / (2.0 * mu_star);
    let mut f_lower = f_upper - delta;

    let mut history = vec![GapState {
        s: 0,
        f_upper,
        f_lower,
        delta,
        mu_hat: mu_star,
        mu_committed: mu_star,
        iota: None,
        y_bar: y_cut.z.clone(),
        grad_norm_at_y: grad_norm_y0,
    }];
    let mut events = Vec::new();
    let mut certificates = Vec::new();
    let mut traces = Vec::new();
    let mut monotone_violations = 0usize;
    let mut completed = true;
    let mut s = 0usize;

    while delta > config.eps {
        s += 1;
        if s > config.stage_cap {
            return Err(SolverError::StageCap(config.stage_cap));
        }
        let level = f_upper - theta * delta;
        let radius_sq = 2.0 * theta * delta / mu_star;
        let mut engine = StageLoop::with_known_reference(
            &counting,
            y_cut.clone(),
            level,
            config.m,
            config.option,
        );
        let mut points = vec![y_cut.clone()];

        let (next_upper, lower_branch) = loop {
            if engine.t() >= config.outer_cap_per_stage {
                return Err(SolverError::IterationCap(config.outer_cap_per_stage));
            }
            let outcome = engine.advance()?;
            let flag = outcome.flag;
            let f_hat = outcome.record.f_hat;
            let dist = outcome.record.dist;
            points.extend(outcome.cuts);

            if f_hat - f_lower <= theta * delta {
                break (f_hat, false);
            }
            if dist * dist > radius_sq || flag {
                break (f_hat, true);
            }
            if config
                .oracle_budget
                .is_some_and(|b| counting.calls() >= b)
            {
                completed = false;
                break (f_hat, false);
            }
        };

        let radius = radius_sq.sqrt();
        if lower_branch {
            let cert = WolfeCertificate {
                center: y_cut.z.clone(),
                iota: radius,
                nu: (mu_star * theta * delta / 2.0).sqrt(),
                points: filter_ball(&points, &engine.y_bar, radius),
            };
            if config.collect_certificates {
                certificates.push(cert);
            }
            // The certificate pins the previous reference within theta*delta
            // of the optimum.
            f_lower = f_upper - theta * delta;
        }
        let x_hat = engine.x_hat().clone();
        monotone_violations += engine.monotone_violations();
        if config.collect_traces {
            traces.push(engine.into_trace("", None));
        }

        delta *= theta;
        f_upper = next_upper;
        let sample = counting.eval(&x_hat);
        debug_assert!((sample.f - next_upper).abs() <= 1e-12 * (1.0 + next_upper.abs()));
        y_cut = sample.cut();

        events.push(StageEvent {
            stage: s,
            event: if lower_branch {
                StageEventKind::AgrRadius
            } else {
                StageEventKind::AgrObjective
            },
            mu_hat: mu_star,
            delta_tilde: delta,
            f_upper,
            f_lower,
            oracle_calls: counting.calls(),
        });
        history.push(GapState {
            s,
            f_upper,
            f_lower,
            delta,
            mu_hat: mu_star,
            mu_committed: mu_star,
            iota: lower_branch.then_some(radius),
            y_bar: y_cut.z.clone(),
            grad_norm_at_y: sample.g.norm(),
        });

        if !completed {
            break;
        }
    }

    Ok(RestartOutcome {
        solution: y_cut.z_vec(),
        f_final: f_upper,
        final_gap: delta,
        f_lower_final: f_lower,
        history,
        events,
        certificates,
        traces,
        oracle_calls: counting.calls(),
        grad_norm_y0,
        completed,
        monotone_violations,
    })
}

// ---------------------------------------------------------------------------
// Accelerated gap reduction.
// ---------------------------------------------------------------------------

/// Outcome of one gap-reduction attempt.
pub struct AgrOutcome {
    /// False refutes the modulus estimate (the budget branch fired).
    pub half_flag: bool,
    pub x_hat: DVector<f64>,
    pub f_hat: f64,
    /// Set on success: false on the radius branch, true on the objective
    /// branch.
    pub lower_flag: Option<bool>,
    pub cert: Option<WolfeCertificate>,
    pub oracle_calls: u64,
    pub trace: RunTrace,
}

/// One gap-reduction attempt, evaluating the oracle once at `y_bar`.
pub fn agr(
    oracle: &dyn FirstOrderOracle,
    f_lower: f64,
    delta: f64,
    y_bar: &DVector<f64>,
    mu: f64,
    theta: f64,
    m: usize,
) -> Result<AgrOutcome, SolverError> {
    let sample = oracle.eval(y_bar);
    let mut out = agr_with_cut(
        oracle,
        f_lower,
        delta,
        &sample.cut(),
        mu,
        theta,
        m,
        CutOption::OptionI,
        1_000_000,
    )?;
    out.oracle_calls += 1;
    Ok(out)
}

/// Same as [`agr`], reusing an already-evaluated reference cut.
#[allow(clippy::too_many_arguments)]
pub fn agr_with_cut(
    oracle: &dyn FirstOrderOracle,
    f_lower: f64,
    delta: f64,
    y_cut: &Cut,
    mu: f64,
    theta: f64,
    m: usize,
    option: CutOption,
    max_outer: usize,
) -> Result<AgrOutcome, SolverError> {
    assert!(theta > 0.5 && theta < 1.0);
    assert!(delta > 0.0 && mu > 0.0);
    let level = y_cut.fz - theta * delta;
    let radius_sq = 2.0 * theta * delta / mu;
    let mut engine = StageLoop::with_known_reference(oracle, y_cut.clone(), level, m, option);
    let mut points = vec![y_cut.clone()];

    loop {
        if engine.t() >= max_outer {
            return Err(SolverError::IterationCap(max_outer));
        }
        let outcome = engine.advance()?;
        let flag = outcome.flag;
        let f_hat = outcome.record.f_hat;
        let dist = outcome.record.dist;
        let t = outcome.record.t;
        let lbar = outcome.record.lbar;
        points.extend(outcome.cuts);

        // An infeasible subproblem means the distance has grown without
        // bound, which is the radius branch.
        if dist * dist >= radius_sq || flag {
            let radius = radius_sq.sqrt();
            let cert = WolfeCertificate {
                center: y_cut.z.clone(),
                iota: radius,
                nu: (mu * theta * delta / 2.0).sqrt(),
                points: filter_ball(&points, &engine.y_bar, radius),
            };
            let x_hat = engine.x_hat().clone();
            let calls = engine.oracle_calls();
            return Ok(AgrOutcome {
                half_flag: true,
                x_hat,
                f_hat,
                lower_flag: Some(false),
                cert: Some(cert),
                oracle_calls: calls,
                trace: engine.into_trace("", None),
            });
        }
        if f_hat - f_lower <= theta * delta {
            let x_hat = engine.x_hat().clone();
            let calls = engine.oracle_calls();
            return Ok(AgrOutcome {
                half_flag: true,
                x_hat,
                f_hat,
                lower_flag: Some(true),
                cert: None,
                oracle_calls: calls,
                trace: engine.into_trace("", None),
            });
        }
        let budget = (6.0 * theta / (2.0 * theta - 1.0)
            + 4.0 * lbar * theta / (mu * (2.0 * theta - 1.0)))
            .sqrt()
            .ceil();
        if t as f64 >= budget {
            let x_hat = engine.x_hat().clone();
            let calls = engine.oracle_calls();
            return Ok(AgrOutcome {
                half_flag: false,
                x_hat,
                f_hat,
                lower_flag: None,
                cert: None,
                oracle_calls: calls,
                trace: engine.into_trace("", None),
            });
        }
    }
}

// ---------------------------------------------------------------------------
// Unknown modulus.
// ---------------------------------------------------------------------------

/// Guess-and-check driver for an unknown quadratic-growth modulus.
///
/// Maintains an estimate `mu_hat` and a candidate gap `delta_tilde`. Each
/// stage first asks certificate generation to validate the gap, then runs
/// gap reduction between the bounds; a refutation from either quarters
/// `mu_hat` and rebuilds the gap from the tightest available bound (the
/// carried-over committed certificate or the gradient bound at the current
/// reference). Terminates once the certified gap reaches `eps`.
pub fn rapex_unknown(
    oracle: &dyn FirstOrderOracle,
    y0: &DVector<f64>,
    mu_hat_1: f64,
    config: &DriverConfig,
) -> Result<RestartOutcome, SolverError> {
    assert!(mu_hat_1 > 0.0);
    let theta = config.theta;
    let beta = config.beta;
    let counting = CountingOracle::new(oracle);

    let sample0 = counting.eval(y0);
    let grad_norm_y0 = sample0.g.norm();
    let mut y_cut = sample0.cut();
    let mut grad_norm_y = grad_norm_y0;
    let mut f_upper = sample0.f;
    let mut mu_hat = mu_hat_1;
    let mut delta_tilde = 2.0 * grad_norm_y0 * grad_norm_y0 / mu_hat;
    let mut f_lower = f_upper - delta_tilde;

    // Most recently committed certificate parameters; the sentinel makes the
    // carried-over bound vacuous before the first commitment.
    let mut committed_mu = 1.0_f64;
    let mut committed_delta = f64::INFINITY;

    let mut history = vec![GapState {
        s: 0,
        f_upper,
        f_lower,
        delta: delta_tilde,
        mu_hat,
        mu_committed: committed_mu,
        iota: None,
        y_bar: y_cut.z.clone(),
        grad_norm_at_y: grad_norm_y0,
    }];
    let mut events: Vec<StageEvent> = Vec::new();
    let mut certificates = Vec::new();
    let mut traces = Vec::new();
    let mut monotone_violations = 0usize;
    let mut completed = true;

    let budget_hit = |calls: u64| config.oracle_budget.is_some_and(|b| calls >= b);

    enum StageExit {
        Committed { x_next: DVector<f64>, f_next: f64, iota: f64 },
        BudgetExhausted,
    }

    let mut s = 0usize;
    'stages: loop {
        s += 1;
        if s > config.stage_cap {
            return Err(SolverError::StageCap(config.stage_cap));
        }

        // The stage body restarts from certificate generation whenever a
        // refutation quarters the estimate; the stage index only advances on
        // a commit.
        let exit = 'stage_body: loop {
            // Certificate generation validating the current gap guess.
            let (mut mu_s, mut delta_s) = loop {
                let iota_max = (2.0 * (1.0 + beta) * delta_tilde / mu_hat).sqrt();
                let awg_out = awg_with_cut(
                    &counting,
                    &y_cut,
                    delta_tilde,
                    config.m,
                    iota_max,
                    beta,
                    config.option,
                    config.outer_cap_per_stage,
                )?;
                monotone_violations += awg_out.trace.monotone_violations;
                if config.collect_traces {
                    traces.push(awg_out.trace);
                }
                if awg_out.success {
                    events.push(StageEvent {
                        stage: s,
                        event: StageEventKind::AwgOk,
                        mu_hat,
                        delta_tilde,
                        f_upper,
                        f_lower,
                        oracle_calls: counting.calls(),
                    });
                    let delta_s = (1.0 + beta) * delta_tilde;
                    committed_mu = mu_hat;
                    committed_delta = delta_s;
                    if config.collect_certificates {
                        if let Some(cert) = awg_out.cert {
                            certificates.push(cert);
                        }
                    }
                    break (mu_hat, delta_s);
                }
                mu_hat /= 4.0;
                delta_tilde = (9.0 * committed_mu / (4.0 * mu_hat) * committed_delta)
                    .min(2.0 * grad_norm_y * grad_norm_y / mu_hat);
                f_lower = f_upper - delta_tilde;
                events.push(StageEvent {
                    stage: s,
                    event: StageEventKind::AwgFail,
                    mu_hat,
                    delta_tilde,
                    f_upper,
                    f_lower,
                    oracle_calls: counting.calls(),
                });
                if budget_hit(counting.calls()) {
                    break 'stage_body StageExit::BudgetExhausted;
                }
            };

            // Gap reduction between the bounds.
            loop {
                let agr_out = agr_with_cut(
                    &counting,
                    f_lower,
                    delta_tilde,
                    &y_cut,
                    mu_hat,
                    theta,
                    config.m,
                    config.option,
                    config.outer_cap_per_stage,
                )?;
                monotone_violations += agr_out.trace.monotone_violations;
                if config.collect_traces {
                    traces.push(agr_out.trace);
                }
                if !agr_out.half_flag {
                    // Budget branch: quarter and rebuild the gap from the
                    // tightest carried-over bound, then retry from
                    // certificate generation.
                    mu_hat /= 4.0;
                    delta_tilde = (4.0 * delta_s)
                        .min(2.0 * grad_norm_y * grad_norm_y / mu_hat)
                        .min(9.0 * committed_mu / (4.0 * mu_hat) * committed_delta);
                    f_lower = f_upper - delta_tilde;
                    events.push(StageEvent {
                        stage: s,
                        event: StageEventKind::AgrBudget,
                        mu_hat,
                        delta_tilde,
                        f_upper,
                        f_lower,
                        oracle_calls: counting.calls(),
                    });
                    if budget_hit(counting.calls()) {
                        break 'stage_body StageExit::BudgetExhausted;
                    }
                    continue 'stage_body;
                }
                if agr_out.lower_flag == Some(false) {
                    // Radius branch: tighter lower bound, rerun gap
                    // reduction with the shrunk gap.
                    delta_tilde *= theta;
                    f_lower = f_upper - delta_tilde;
                    delta_s = delta_tilde;
                    mu_s = mu_hat;
                    committed_mu = mu_s;
                    committed_delta = delta_s;
                    if config.collect_certificates {
                        if let Some(cert) = agr_out.cert {
                            certificates.push(cert);
                        }
                    }
                    events.push(StageEvent {
                        stage: s,
                        event: StageEventKind::AgrRadius,
                        mu_hat,
                        delta_tilde,
                        f_upper,
                        f_lower,
                        oracle_calls: counting.calls(),
                    });
                    if budget_hit(counting.calls()) {
                        break 'stage_body StageExit::BudgetExhausted;
                    }
                    continue;
                }
                events.push(StageEvent {
                    stage: s,
                    event: StageEventKind::AgrObjective,
                    mu_hat,
                    delta_tilde,
                    f_upper,
                    f_lower,
                    oracle_calls: counting.calls(),
                });
                break 'stage_body StageExit::Committed {
                    x_next: agr_out.x_hat,
                    f_next: agr_out.f_hat,
                    iota: (2.0 * delta_s / mu_s).sqrt(),
                };
            }
        };

        let (x_next, f_next, iota_s) = match exit {
            StageExit::Committed {
                x_next,
                f_next,
                iota,
            } => (x_next, f_next, iota),
            StageExit::BudgetExhausted => {
                completed = false;
                break 'stages;
            }
        };

        // Stage commit: new reference, fresh upper bound, next gap.
        let sample = counting.eval(&x_next);
        debug_assert!((sample.f - f_next).abs() <= 1e-12 * (1.0 + f_next.abs()));
        let _ = f_next;
        y_cut = sample.cut();
        grad_norm_y = sample.g.norm();
        f_upper = sample.f;
        delta_tilde = f_upper - f_lower;
        events.push(StageEvent {
            stage: s,
            event: StageEventKind::Commit,
            mu_hat,
            delta_tilde,
            f_upper,
            f_lower,
            oracle_calls: counting.calls(),
        });
        history.push(GapState {
            s,
            f_upper,
            f_lower,
            delta: delta_tilde,
            mu_hat,
            mu_committed: committed_mu,
            iota: Some(iota_s),
            y_bar: y_cut.z.clone(),
            grad_norm_at_y: grad_norm_y,
        });

        if delta_tilde <= config.eps {
            break;
        }
        if budget_hit(counting.calls()) {
            completed = false;
            break;
        }
    }

    Ok(RestartOutcome {
        solution: y_cut.z_vec(),
        f_final: f_upper,
        final_gap: f_upper - f_lower,
        f_lower_final: f_lower,
        history,
        events,
        certificates,
        traces,
        oracle_calls: counting.calls(),
        grad_norm_y0,
        completed,
        monotone_violations,
    })
}
