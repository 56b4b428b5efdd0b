//! Comparison methods: Polyak step size, the plain bundle-level iteration,
//! and the chain lower-bound experiment they are measured against.

use crate::oracle::{CountingOracle, Cut, FirstOrderOracle};
use crate::problems::{chain_optimum, ChainMaxProblem};
use crate::projection::{project, HalfspaceSystem, ProjStatus, ProjectionError, ProjectionTols, RowTag};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("zero subgradient at a point with f(x) > f_star (inconsistent oracle)")]
    ZeroGradient,
    #[error(transparent)]
    Projection(#[from] ProjectionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineStatus {
    Completed,
    /// A level-set projection became infeasible (level below the model
    /// minimum), ending the run.
    LevelInfeasible,
    /// Stopped early on a vanishing subgradient at the target level.
    Stationary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineRecord {
    pub t: usize,
    pub f: f64,
    pub step_len: f64,
    pub oracle_calls: u64,
    /// Coordinates kept for small dimensions only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x: Option<Vec<f64>>,
}

/// Iterates and values of a baseline run; record `t` holds `x^t`.
#[derive(Debug, Clone)]
pub struct BaselineTrace {
    pub iterates: Vec<DVector<f64>>,
    pub f_values: Vec<f64>,
    pub records: Vec<BaselineRecord>,
    pub status: BaselineStatus,
    pub oracle_calls: u64,
}

impl BaselineTrace {
    pub fn write_jsonl<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        for rec in &self.records {
            serde_json::to_writer(&mut w, rec)?;
            writeln!(w)?;
        }
        Ok(())
    }
}

const COORD_LOG_DIM: usize = 8;

fn record_of(t: usize, x: &DVector<f64>, f: f64, step_len: f64, calls: u64) -> BaselineRecord {
    BaselineRecord {
        t,
        f,
        step_len,
        oracle_calls: calls,
        x: (x.len() <= COORD_LOG_DIM).then(|| x.as_slice().to_vec()),
    }
}

/// Polyak subgradient steps toward a trusted level:
/// `x_{k+1} = x_k - (f(x_k) - f_star) / ||g_k||^2 * g_k`.
pub fn polyak(
    oracle: &dyn FirstOrderOracle,
    x0: &DVector<f64>,
    f_star: f64,
    iters: usize,
) -> Result<BaselineTrace, BaselineError> {
    let counting = CountingOracle::new(oracle);
    let mut x = x0.clone();
    let mut iterates = vec![x.clone()];
    let mut records = Vec::new();
    let mut f_values = Vec::new();
    let mut status = BaselineStatus::Completed;

    let s0 = counting.eval(&x);
    f_values.push(s0.f);
    records.push(record_of(0, &x, s0.f, 0.0, counting.calls()));
    let mut sample = s0;

    for t in 1..=iters {
        let gnorm2 = sample.g.norm_squared();
        if gnorm2 == 0.0 {
            if sample.f > f_star {
                return Err(BaselineError::ZeroGradient);
            }
            status = BaselineStatus::Stationary;
            break;
        }
        let step = (sample.f - f_star) / gnorm2;
        let next = &x - &sample.g * step;
        let step_len = (&next - &x).norm();
        x = next;
        sample = counting.eval(&x);
        iterates.push(x.clone());
        f_values.push(sample.f);
        records.push(record_of(t, &x, sample.f, step_len, counting.calls()));
    }

    Ok(BaselineTrace {
        iterates,
        f_values,
        records,
        status,
        oracle_calls: counting.calls(),
    })
}

/// Plain bundle-level iteration: project the current iterate (not a fixed
/// reference) onto the intersection of the last `m` cut halfspaces at the
/// given level. With `m = 1` and the level at the optimum this reproduces the
/// Polyak step exactly.
pub fn bl(
    oracle: &dyn FirstOrderOracle,
    x0: &DVector<f64>,
    level: f64,
    m: usize,
    iters: usize,
) -> Result<BaselineTrace, BaselineError> {
    assert!(m >= 1);
    let counting = CountingOracle::new(oracle);
    let mut x = x0.clone();
    let mut iterates = vec![x.clone()];
    let mut records = Vec::new();
    let mut f_values = Vec::new();
    let mut status = BaselineStatus::Completed;
    let mut bundle: VecDeque<Cut> = VecDeque::with_capacity(m);

    let s0 = counting.eval(&x);
    f_values.push(s0.f);
    records.push(record_of(0, &x, s0.f, 0.0, counting.calls()));
    let mut sample = s0;

    for t in 1..=iters {
        bundle.push_back(sample.cut());
        if bundle.len() > m {
            bundle.pop_front();
        }
        let mut sys = HalfspaceSystem::new(x.len());
        for (i, cut) in bundle.iter().enumerate() {
            sys.push(cut.g_vec(), cut.halfspace_rhs(level), RowTag::Cut(i));
        }
        let prj = project(&x, &sys, ProjectionTols::default())?;
        if prj.status == ProjStatus::Infeasible {
            status = BaselineStatus::LevelInfeasible;
            break;
        }
        let step_len = (&prj.x_star - &x).norm();
        x = prj.x_star;
        sample = counting.eval(&x);
        iterates.push(x.clone());
        f_values.push(sample.f);
        records.push(record_of(t, &x, sample.f, step_len, counting.calls()));
    }

    Ok(BaselineTrace {
        iterates,
        f_values,
        records,
        status,
        oracle_calls: counting.calls(),
    })
}

/// Methods admitted by the chain lower-bound experiment. All start at the
/// origin and are zero-respecting on the chain instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LowerBoundMethod {
    Gd,
    Polyak,
    Bl,
}

/// Outcome of the hard-instance experiment.
#[derive(Debug, Clone)]
pub struct LowerBoundReport {
    pub method: LowerBoundMethod,
    pub q: f64,
    /// `||x^0 - x*||^2` at the finite-n optimum.
    pub d0: f64,
    /// Finite-dimension slack in the geometric decay bound.
    pub delta_n: f64,
    /// `||x^t - x*||^2` per iteration, up to the numerical floor.
    pub dist_sq: Vec<f64>,
    /// Iterations whose distance fell below the geometric bound.
    pub bound_violations: Vec<usize>,
    /// Whether per-call support growth stayed within one coordinate in the
    /// attaining block.
    pub support_growth_ok: bool,
    /// First iteration at which the distance reached the floor, if any.
    pub floor_reached_at: Option<usize>,
    pub f_gap: Vec<f64>,
}

const DIST_FLOOR: f64 = 1e-12;

/// Runs a zero-respecting method on the chain instance from the origin and
/// checks the geometric decay floor
/// `||x^t - x*||^2 >= (1 - delta_n) q^{2t/k} ||x^0 - x*||^2`
/// down to the numerical floor, along with the one-coordinate-per-call
/// support growth implied by the tridiagonal structure.
pub fn lowerbound_experiment(
    method: LowerBoundMethod,
    problem: &ChainMaxProblem,
    iters: usize,
) -> Result<LowerBoundReport, BaselineError> {
    let k = problem.blocks();
    let n = problem.block_dim();
    let x_star = chain_optimum(problem);
    let f_star = problem.eval(&x_star).f;
    let q = problem.q();
    let d0 = x_star.norm_squared(); // x^0 = 0

    let x0 = DVector::zeros(problem.dim());
    let trace = match method {
        LowerBoundMethod::Gd => gd_on_chain(problem, &x0, iters),
        LowerBoundMethod::Polyak => polyak(problem, &x0, f_star, iters)?,
        LowerBoundMethod::Bl => bl(problem, &x0, f_star, 5, iters)?,
    };

    // Distances until the numerical floor; everything below is noise and
    // outside the regime the decay bound speaks about.
    let mut dist_sq = Vec::with_capacity(trace.iterates.len());
    let mut floor_reached_at = None;
    for (t, x) in trace.iterates.iter().enumerate() {
        let d2 = (x - &x_star).norm_squared();
        dist_sq.push(d2);
        if d2 <= DIST_FLOOR {
            floor_reached_at = Some(t);
            break;
        }
    }
    let checked_range = floor_reached_at.unwrap_or(dist_sq.len());

    // Support growth: each oracle call may extend the attaining block's
    // support by at most one coordinate.
    let mut support = vec![0usize; k];
    let mut support_growth_ok = true;
    let mut max_support = 0usize;
    for x in trace.iterates.iter().take(checked_range) {
        let xs = x.as_slice();
        for j in 0..k {
            let block = &xs[j * n..(j + 1) * n];
            let new_support = block.iter().rposition(|&v| v != 0.0).map_or(0, |p| p + 1);
            if new_support > support[j] + 1 {
                support_growth_ok = false;
            }
            support[j] = support[j].max(new_support);
            max_support = max_support.max(support[j]);
        }
    }

    // Finite-n slack: how far the exact tails fall short of the geometric
    // tails, over the support range the run actually explored.
    let v_star: Vec<f64> = x_star.as_slice()[0..n].to_vec();
    let block_total: f64 = v_star.iter().map(|v| v * v).sum();
    let tau_max = (max_support + 1).min(n - 1);
    let mut delta_n = 0.0_f64;
    let mut tail = block_total;
    for tau in 0..=tau_max {
        let geometric = q.powi(2 * tau as i32) * block_total;
        if geometric > 0.0 {
            delta_n = delta_n.max(1.0 - tail / geometric);
        }
        tail -= v_star[tau] * v_star[tau];
        tail = tail.max(0.0);
    }

    let mut bound_violations = Vec::new();
    for (t, &d2) in dist_sq.iter().take(checked_range).enumerate() {
        let bound = (1.0 - delta_n) * q.powf(2.0 * t as f64 / k as f64) * d0;
        if d2 < bound * (1.0 - 1e-12) - 1e-300 {
            bound_violations.push(t);
        }
    }

    let f_gap = trace.f_values.iter().map(|f| f - f_star).collect();
    Ok(LowerBoundReport {
        method,
        q,
        d0,
        delta_n,
        dist_sq,
        bound_violations,
        support_growth_ok,
        floor_reached_at,
        f_gap,
    })
}

/// Subgradient descent with the fixed step `1/L`; the subgradient of the
/// attaining block keeps it zero-respecting from the origin.
fn gd_on_chain(problem: &ChainMaxProblem, x0: &DVector<f64>, iters: usize) -> BaselineTrace {
    let counting = CountingOracle::new(problem);
    let step = 1.0 / problem.l();
    let mut x = x0.clone();
    let mut iterates = vec![x.clone()];
    let mut f_values = Vec::new();
    let mut records = Vec::new();

    let mut sample = counting.eval(&x);
    f_values.push(sample.f);
    records.push(record_of(0, &x, sample.f, 0.0, counting.calls()));
    for t in 1..=iters {
        x -= &sample.g * step;
        sample = counting.eval(&x);
        iterates.push(x.clone());
        f_values.push(sample.f);
        records.push(record_of(t, &x, sample.f, step * sample.g.norm(), counting.calls()));
    }
    BaselineTrace {
        iterates,
        f_values,
        records,
        status: BaselineStatus::Completed,
        oracle_calls: counting.calls(),
    }
}
