//! The m-inner-step bundle routine.
//!
//! Starting from the stage iterate `x^{t,0}`, each inner step evaluates the
//! oracle at the averaged point
//! `x_under^{t,i} = (1-alpha_t) x_hat^{t-1} + alpha_t x^{t,i-1}`,
//! appends the resulting cut to the level-set system, and projects the fixed
//! reference `y_bar` onto the intersection. The best averaged iterate is
//! tracked by value, an infeasible projection raises the stage flag, and the
//! `(r_t, l_t)` pair diagnostics feed the running average of empirical
//! Lipschitz constants that drives every budget test downstream.

use crate::oracle::{Cut, FirstOrderOracle};
use crate::projection::{project, HalfspaceSystem, ProjStatus, ProjectionError, ProjectionTols, RowTag};
use nalgebra::DVector;

/// Cut-retention scheme for the level-set system.
///
/// Option I keeps this stage's cuts plus the anchor halfspace at the stage
/// entry point. Option II instead carries the previous stage's cuts and its
/// anchor, trading cut freshness for continuity across stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CutOption {
    OptionI,
    OptionII,
}

/// Previous-stage material used by [`CutOption::OptionII`].
#[derive(Debug, Clone)]
pub struct CarrySet {
    pub cuts: Vec<Cut>,
    /// Entry iterate of the previous stage, defining its anchor halfspace.
    pub anchor_point: DVector<f64>,
}

pub struct OneStepInput<'a> {
    pub oracle: &'a dyn FirstOrderOracle,
    pub y_bar: &'a DVector<f64>,
    pub x_hat_prev: &'a DVector<f64>,
    /// `f(x_hat_prev)`, supplied to avoid re-evaluation.
    pub f_hat_prev: f64,
    pub x_t0: &'a DVector<f64>,
    pub level: f64,
    pub m: usize,
    pub alpha_t: f64,
    pub option: CutOption,
    pub carry: Option<&'a CarrySet>,
    pub tols: ProjectionTols,
}

#[derive(Debug, Clone)]
pub struct OneStepOutput {
    /// Best averaged iterate so far (never worse than the previous one).
    pub x_hat: DVector<f64>,
    pub f_hat: f64,
    /// `x^{t,m}`, or the last feasible inner iterate after an infeasibility.
    pub x_next0: DVector<f64>,
    /// True when some inner projection was infeasible.
    pub flag: bool,
    /// Cut data generated this stage (one per evaluated averaged point); the
    /// center cut is held by the caller.
    pub cuts: Vec<Cut>,
    /// Smallest pair ratio `L_t(r, l)`, absent when every pair distance
    /// vanished or no inner iterate was produced.
    pub l_t: Option<f64>,
    /// `||x^{t,r_t} - x^{t,l_t}||` at the minimizing pair.
    pub pair_dist: Option<f64>,
    /// `x^{t,0}, x^{t,1}, ...` (all produced inner iterates).
    pub inner_iterates: Vec<DVector<f64>>,
    /// Distances `||x^{t,i} - y_bar||` matching `inner_iterates`.
    pub inner_dists: Vec<f64>,
    /// Averaged iterates `x_bar^{t,i}` with their values, for diagnostics.
    pub bars: Vec<(DVector<f64>, f64)>,
}

impl OneStepOutput {
    /// Carry material for the next stage under Option II.
    pub fn carry_set(&self, x_t0: &DVector<f64>) -> CarrySet {
        CarrySet {
            cuts: self.cuts.clone(),
            anchor_point: x_t0.clone(),
        }
    }
}

fn push_anchor(sys: &mut HalfspaceSystem, y_bar: &DVector<f64>, point: &DVector<f64>) {
    // <x - p, p - y_bar> >= 0 rewritten as (y_bar - p)'x <= (y_bar - p)'p;
    // vacuous (and omitted) when the anchor point is the reference itself.
    let normal = y_bar - point;
    if normal.amax() == 0.0 {
        return;
    }
    let rhs = normal.dot(point);
    sys.push(normal, rhs, RowTag::Anchor);
}

/// One outer iteration of the bundle routine.
pub fn one_step(input: OneStepInput<'_>) -> Result<OneStepOutput, ProjectionError> {
    let OneStepInput {
        oracle,
        y_bar,
        x_hat_prev,
        f_hat_prev,
        x_t0,
        level,
        m,
        alpha_t,
        option,
        carry,
        tols,
    } = input;
    assert!(m >= 1, "one_step needs m >= 1");
    assert!(
        alpha_t > 0.0 && alpha_t <= 1.0,
        "alpha_t must lie in (0, 1]"
    );

    let mut x_cur = x_t0.clone();
    let mut inner_iterates = vec![x_cur.clone()];
    let mut cuts: Vec<Cut> = Vec::with_capacity(m);
    let mut bars = Vec::with_capacity(m);
    let mut x_hat = x_hat_prev.clone();
    let mut f_hat = f_hat_prev;
    let mut flag = false;

    for _ in 1..=m {
        let x_under = x_hat_prev * (1.0 - alpha_t) + &x_cur * alpha_t;
        let sample = oracle.eval(&x_under);
        cuts.push(sample.cut());

        let mut sys = HalfspaceSystem::new(y_bar.len());
        match option {
            CutOption::OptionI => push_anchor(&mut sys, y_bar, x_t0),
            CutOption::OptionII => {
                if let Some(carry) = carry {
                    push_anchor(&mut sys, y_bar, &carry.anchor_point);
                    for (idx, cut) in carry.cuts.iter().enumerate() {
                        sys.push(cut.g_vec(), cut.halfspace_rhs(level), RowTag::Cut(idx));
                    }
                } else {
                    push_anchor(&mut sys, y_bar, x_t0);
                }
            }
        }
        for (idx, cut) in cuts.iter().enumerate() {
            sys.push(cut.g_vec(), cut.halfspace_rhs(level), RowTag::Cut(idx));
        }

        let prj = project(y_bar, &sys, tols)?;
        if prj.status == ProjStatus::Infeasible {
            flag = true;
            break;
        }
        x_cur = prj.x_star;
        inner_iterates.push(x_cur.clone());

        let x_bar = x_hat_prev * (1.0 - alpha_t) + &x_cur * alpha_t;
        let f_bar = oracle.eval(&x_bar).f;
        if f_bar < f_hat {
            f_hat = f_bar;
            x_hat = x_bar.clone();
        }
        bars.push((x_bar, f_bar));
    }

    // Pair diagnostics over all produced iterates, including the entry point.
    let numerator = f_hat - level - (1.0 - 0.75 * alpha_t) * (f_hat_prev - level);
    let max_norm = inner_iterates
        .iter()
        .map(|x| x.amax())
        .fold(0.0_f64, f64::max);
    let dist_floor = 1e-14 * (1.0 + max_norm);
    let mut l_t: Option<f64> = None;
    let mut pair_dist: Option<f64> = None;
    for r in 1..inner_iterates.len() {
        for l in 0..r {
            let d = (&inner_iterates[r] - &inner_iterates[l]).norm();
            if d <= dist_floor {
                continue;
            }
            let ratio = numerator / (0.5 * alpha_t * alpha_t * d * d);
            if l_t.map_or(true, |cur| ratio < cur) {
                l_t = Some(ratio);
                pair_dist = Some(d);
            }
        }
    }

    let inner_dists = inner_iterates.iter().map(|x| (x - y_bar).norm()).collect();
    Ok(OneStepOutput {
        x_hat,
        f_hat,
        x_next0: x_cur,
        flag,
        cuts,
        l_t,
        pair_dist,
        inner_iterates,
        inner_dists,
        bars,
    })
}

// ---------------------------------------------------------------------------
// Running average of empirical Lipschitz constants.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default)]
struct KahanSum {
    sum: f64,
    carry: f64,
}

impl KahanSum {
    fn add(&mut self, value: f64) {
        let y = value - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }
}

/// Event-weighted running average
/// `Lbar(t) = sum omega alpha^2 L 1_E d^2 / 2  /  sum 1_E d^2`,
/// zero until the first event fires. Accumulation is compensated so long
/// runs at tight tolerances do not drift.
#[derive(Debug, Clone, Default)]
pub struct LbarAccumulator {
    numerator: KahanSum,
    denominator: KahanSum,
}

impl LbarAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Folds one stage into the average and returns the updated value. The
    /// caller supplies `event = [f_hat - level > (1 - alpha/2)(f_hat_prev - level)]`.
    pub fn update(
        &mut self,
        alpha: f64,
        omega: f64,
        l_t: Option<f64>,
        pair_dist: Option<f64>,
        event: bool,
    ) -> f64 {
        if event {
            if let (Some(l), Some(d)) = (l_t, pair_dist) {
                debug_assert!(l > 0.0, "an event implies a positive pair ratio");
                self.numerator.add(0.5 * omega * alpha * alpha * l * d * d);
                self.denominator.add(d * d);
            }
        }
        self.value()
    }

    pub fn value(&self) -> f64 {
        if self.denominator.sum == 0.0 {
            0.0
        } else {
            self.numerator.sum / self.denominator.sum
        }
    }
}

// ---------------------------------------------------------------------------
// Local-smoothness diagnostic.
// ---------------------------------------------------------------------------

/// Per-stage data consumed by [`ltilde_diagnostic`].
pub struct StageWindow<'a> {
    /// Cuts generated this stage (evaluation points `x_under^{t, l+1}`).
    pub cuts: &'a [Cut],
    /// Averaged iterates with values (`x_bar^{t, r}`, `f(x_bar^{t, r})`).
    pub bars: &'a [(DVector<f64>, f64)],
    pub alpha: f64,
    pub f_hat_prev: f64,
    pub level: f64,
}

/// Smallest constant making the relaxed smoothness inequality
/// `f(x_bar^{t,r}) <= l_f(x_bar^{t,r}; x_under^{t,l+1}) + Lt/2 d^2 + alpha/4 (f_hat_prev - level)`
/// hold for some pair `l < r`. Purely a diagnostic; never steers a solver.
pub fn ltilde_diagnostic(window: &StageWindow<'_>) -> Option<f64> {
    let mut best: Option<f64> = None;
    for r in 0..window.bars.len() {
        let (x_bar, f_bar) = &window.bars[r];
        for cut in window.cuts.iter().take(r + 1) {
            let z = cut.z_vec();
            let d2 = (x_bar - &z).norm_squared();
            if d2 <= 1e-28 {
                continue;
            }
            let slack = window.alpha / 4.0 * (window.f_hat_prev - window.level);
            let need = 2.0 * (f_bar - cut.eval(x_bar) - slack) / d2;
            if best.map_or(true, |cur| need < cur) {
                best = Some(need);
            }
        }
    }
    best
}

/// Harmonic-style upper bound on the running average implied by per-stage
/// local smoothness constants:
/// `3 sum 1_E omega alpha (f_hat_prev - level) / sum 1_E (f_hat_prev - level) / (alpha Lt)`.
#[derive(Debug, Clone, Default)]
pub struct LbarBoundAccumulator {
    numerator: KahanSum,
    denominator: KahanSum,
}

impl LbarBoundAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(
        &mut self,
        alpha: f64,
        omega: f64,
        gap_prev: f64,
        l_tilde: Option<f64>,
        event: bool,
    ) -> Option<f64> {
        if event {
            if let Some(lt) = l_tilde {
                if lt > 0.0 {
                    self.numerator.add(3.0 * omega * alpha * gap_prev);
                    self.denominator.add(gap_prev / (alpha * lt));
                }
            }
        }
        self.value()
    }

    pub fn value(&self) -> Option<f64> {
        if self.denominator.sum == 0.0 {
            None
        } else {
            Some(self.numerator.sum / self.denominator.sum)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::OracleSample;

    struct Linear1D;
    impl FirstOrderOracle for Linear1D {
        fn dim(&self) -> usize {
            1
        }
        fn eval(&self, x: &DVector<f64>) -> OracleSample {
            OracleSample {
                x: x.clone(),
                f: x[0],
                g: DVector::from_vec(vec![1.0]),
                active_index: None,
            }
        }
    }

    struct Abs1D;
    impl FirstOrderOracle for Abs1D {
        fn dim(&self) -> usize {
            1
        }
        fn eval(&self, x: &DVector<f64>) -> OracleSample {
            let v = x[0];
            let g = if v >= 0.0 { 1.0 } else { -1.0 };
            OracleSample {
                x: x.clone(),
                f: v.abs(),
                g: DVector::from_vec(vec![g]),
                active_index: None,
            }
        }
    }

    fn vec1(v: f64) -> DVector<f64> {
        DVector::from_vec(vec![v])
    }

    #[test]
    fn hand_evaluated_linear_stage() {
        // f(x) = x, y_bar = 0, level = -1, m = 1, alpha = 1.
        let y = vec1(0.0);
        let out = one_step(OneStepInput {
            oracle: &Linear1D,
            y_bar: &y,
            x_hat_prev: &y,
            f_hat_prev: 0.0,
            x_t0: &y,
            level: -1.0,
            m: 1,
            alpha_t: 1.0,
            option: CutOption::OptionI,
            carry: None,
            tols: ProjectionTols::default(),
        })
        .unwrap();
        assert!(!out.flag);
        assert!((out.x_next0[0] + 1.0).abs() < 1e-10);
        assert!((out.x_hat[0] + 1.0).abs() < 1e-10);
        assert!((out.f_hat + 1.0).abs() < 1e-10);
        // L_1(1,0) = [(-1) - (-1) - 1/4 (0 - (-1))] / (1/2 * 1) = -0.5.
        assert!((out.l_t.unwrap() + 0.5).abs() < 1e-9);
        assert!((out.pair_dist.unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn hand_evaluated_abs_stage() {
        // f(x) = |x|, y_bar = 1, level = 0, m = 2, alpha = 1.
        let y = vec1(1.0);
        let out = one_step(OneStepInput {
            oracle: &Abs1D,
            y_bar: &y,
            x_hat_prev: &y,
            f_hat_prev: 1.0,
            x_t0: &y,
            level: 0.0,
            m: 2,
            alpha_t: 1.0,
            option: CutOption::OptionI,
            carry: None,
            tols: ProjectionTols::default(),
        })
        .unwrap();
        assert!(!out.flag);
        assert!(out.x_next0[0].abs() < 1e-10);
        assert!(out.f_hat.abs() < 1e-10);
        assert_eq!(out.inner_iterates.len(), 3);
        assert!(out.inner_iterates[1][0].abs() < 1e-10);
        assert!(out.inner_iterates[2][0].abs() < 1e-10);
    }

    #[test]
    fn level_above_value_keeps_everything_at_reference() {
        let y = vec1(0.5);
        let out = one_step(OneStepInput {
            oracle: &Linear1D,
            y_bar: &y,
            x_hat_prev: &y,
            f_hat_prev: 0.5,
            x_t0: &y,
            level: 2.0,
            m: 3,
            alpha_t: 1.0,
            option: CutOption::OptionI,
            carry: None,
            tols: ProjectionTols::default(),
        })
        .unwrap();
        assert!(!out.flag);
        for x in &out.inner_iterates {
            assert!((x[0] - 0.5).abs() < 1e-12);
        }
        // All pair distances vanish, so no ratio is produced.
        assert!(out.l_t.is_none());
    }

    #[test]
    fn inner_distances_are_monotone() {
        let y = vec1(1.0);
        let out = one_step(OneStepInput {
            oracle: &Abs1D,
            y_bar: &y,
            x_hat_prev: &y,
            f_hat_prev: 1.0,
            x_t0: &y,
            level: -0.25,
            m: 2,
            alpha_t: 1.0,
            option: CutOption::OptionI,
            carry: None,
            tols: ProjectionTols::default(),
        })
        .unwrap();
        for w in out.inner_dists.windows(2) {
            assert!(w[1] >= w[0] - 1e-9);
        }
    }

    #[test]
    fn infeasible_level_raises_flag() {
        // |x| <= -0.25 is empty once two opposing cuts exist.
        let y = vec1(1.0);
        let out = one_step(OneStepInput {
            oracle: &Abs1D,
            y_bar: &y,
            x_hat_prev: &y,
            f_hat_prev: 1.0,
            x_t0: &y,
            level: -0.25,
            m: 4,
            alpha_t: 1.0,
            option: CutOption::OptionI,
            carry: None,
            tols: ProjectionTols::default(),
        })
        .unwrap();
        assert!(out.flag);
    }

    #[test]
    fn lbar_examples() {
        let mut acc = LbarAccumulator::new();
        assert_eq!(acc.value(), 0.0);
        let v = acc.update(1.0, 3.0, Some(4.0), Some(1.0), true);
        assert!((v - 6.0).abs() < 1e-12);
    }

    #[test]
    fn lbar_matches_direct_formula_on_history() {
        let history = [
            (0.9, 4.0, 2.0, 0.7, true),
            (0.6, 9.0, 5.0, 0.2, false),
            (0.4, 15.0, 3.0, 1.1, true),
        ];
        let mut acc = LbarAccumulator::new();
        let mut last = 0.0;
        for &(alpha, omega, l, d, ev) in &history {
            last = acc.update(alpha, omega, Some(l), Some(d), ev);
        }
        let num: f64 = history
            .iter()
            .filter(|h| h.4)
            .map(|&(a, w, l, d, _)| 0.5 * w * a * a * l * d * d)
            .sum();
        let den: f64 = history
            .iter()
            .filter(|h| h.4)
            .map(|&(_, _, _, d, _)| d * d)
            .sum();
        assert!((last - num / den).abs() < 1e-12);
    }

    #[test]
    fn ltilde_bounded_by_global_smoothness_on_quadratic() {
        // f(x) = x^2 is 2-smooth; the diagnostic must not exceed 2.
        struct Quad;
        impl FirstOrderOracle for Quad {
            fn dim(&self) -> usize {
                1
            }
            fn eval(&self, x: &DVector<f64>) -> OracleSample {
                OracleSample {
                    x: x.clone(),
                    f: x[0] * x[0],
                    g: DVector::from_vec(vec![2.0 * x[0]]),
                    active_index: None,
                }
            }
        }
        let y = vec1(1.0);
        let out = one_step(OneStepInput {
            oracle: &Quad,
            y_bar: &y,
            x_hat_prev: &y,
            f_hat_prev: 1.0,
            x_t0: &y,
            level: 0.0,
            m: 3,
            alpha_t: 1.0,
            option: CutOption::OptionI,
            carry: None,
            tols: ProjectionTols::default(),
        })
        .unwrap();
        let lt = ltilde_diagnostic(&StageWindow {
            cuts: &out.cuts,
            bars: &out.bars,
            alpha: 1.0,
            f_hat_prev: 1.0,
            level: 0.0,
        });
        if let Some(lt) = lt {
            assert!(lt <= 2.0 + 1e-8, "diagnostic {lt} exceeds smoothness");
        }
    }
}
