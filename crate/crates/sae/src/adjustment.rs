//! Adjustment factors for adjusted maximum-likelihood estimation of the
//! model variance A.
//!
//! An adjustment factor is a data-free function L(A) multiplying the residual
//! likelihood; maximizing L(A) * L_RE(A) instead of L_RE(A) alone keeps the
//! variance estimate away from the A = 0 boundary whenever L vanishes there.
//! Factors are handled on the log scale throughout. A factor may carry an
//! additional o(1) component (the "l_add" term) whose only job is to force
//! L(0) = 0; the base component is what determines the estimator's
//! second-order behaviour and is kept separately addressable.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::Dataset;

pub type LogFactorFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Whether a factor applies to the whole dataset or targets one area.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorScope {
    Global,
    PerArea(usize),
}

/// A log-scale adjustment factor log L(A), possibly composed with an
/// additional vanishing-at-zero component.
#[derive(Clone)]
pub struct AdjustmentFactor {
    label: String,
    scope: FactorScope,
    vanishes_at_zero: bool,
    base: LogFactorFn,
    additional: Option<LogFactorFn>,
}

impl fmt::Debug for AdjustmentFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AdjustmentFactor")
            .field("label", &self.label)
            .field("scope", &self.scope)
            .field("vanishes_at_zero", &self.vanishes_at_zero)
            .finish()
    }
}

impl AdjustmentFactor {
    /// Wrap a caller-supplied log factor.
    pub fn custom(
        label: impl Into<String>,
        scope: FactorScope,
        vanishes_at_zero: bool,
        log_h: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            label: label.into(),
            scope,
            vanishes_at_zero,
            base: Arc::new(log_h),
            additional: None,
        }
    }

    pub(crate) fn composed(
        label: impl Into<String>,
        scope: FactorScope,
        vanishes_at_zero: bool,
        base: LogFactorFn,
        additional: Option<LogFactorFn>,
    ) -> Self {
        Self {
            label: label.into(),
            scope,
            vanishes_at_zero,
            base,
            additional,
        }
    }

    /// Total log L(A), additional component included.
    pub fn log_h(&self, a: f64) -> f64 {
        let b = (self.base)(a);
        match &self.additional {
            Some(add) => b + add(a),
            None => b,
        }
    }

    /// Base component only (the part that fixes the estimator's second-order
    /// behaviour; any attached o(1) component is excluded).
    pub fn base_log_h(&self, a: f64) -> f64 {
        (self.base)(a)
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn scope(&self) -> FactorScope {
        self.scope
    }

    pub fn vanishes_at_zero(&self) -> bool {
        self.vanishes_at_zero
    }
}

/// log L(A) = log A. Vanishes at zero; global scope.
pub fn factor_ll() -> AdjustmentFactor {
    AdjustmentFactor::custom("ll", FactorScope::Global, true, |a: f64| a.ln())
}

/// log L(A) = (1/m) log( arctan( sum_i A/(A+D_i) ) ).
///
/// The arctan argument is tr(I - B*), the total amount of non-shrinkage; the
/// factor vanishes at A = 0 and is bounded above by (1/m) log(pi/2).
pub fn factor_yl(data: &Dataset) -> AdjustmentFactor {
    let d: Vec<f64> = data.areas().iter().map(|o| o.d).collect();
    let m = d.len() as f64;
    AdjustmentFactor::custom("yl", FactorScope::Global, true, move |a: f64| {
        let trace: f64 = d.iter().map(|&di| a / (a + di)).sum();
        (trace.atan()).ln() / m
    })
}

/// log L(A) = 2 log(A + D_i) + log L_add(A): the per-area factor whose
/// maximizer makes the plain plug-in MSE estimator g1 + g2 second-order
/// unbiased. The multiplicative constant is dropped (argmax-invariant).
///
/// `l_add` must be a valid vanishing additional factor (strictly increasing,
/// concave, bounded, L_add(0) = 0); `factor_yl` is the stock choice.
pub fn factor_nre(area_i: usize, data: &Dataset, l_add: &AdjustmentFactor) -> Result<AdjustmentFactor> {
    if area_i >= data.m() {
        return Err(Error::AreaIndexOutOfRange {
            index: area_i,
            m: data.m(),
        });
    }
    validate_additional(l_add)?;
    let d_i = data.area(area_i).d;
    let add = l_add.clone();
    Ok(AdjustmentFactor::composed(
        format!("nre[{}]", data.area(area_i).area_id),
        FactorScope::PerArea(area_i),
        true,
        Arc::new(move |a: f64| 2.0 * (a + d_i).ln()),
        Some(Arc::new(move |a: f64| add.log_h(a))),
    ))
}

/// Check that a factor qualifies as an additional (A2/A3-style) component:
/// increasing, concave, bounded, and vanishing at A = 0.
pub(crate) fn validate_additional(l_add: &AdjustmentFactor) -> Result<()> {
    let grid = default_grid();
    let report = validate_factor(l_add, &grid, ConditionClass::A3)?;
    if !report.pass() {
        return Err(Error::InvalidAdditionalFactor(report.failure_summary()));
    }
    Ok(())
}

/// Default evaluation grid for condition checks: 0 handled separately, then
/// 61 log-spaced points covering 1e-6 .. 1e6.
pub fn default_grid() -> Vec<f64> {
    let n = 61;
    (0..n)
        .map(|k| 10f64.powf(-6.0 + 12.0 * k as f64 / (n - 1) as f64))
        .collect()
}

/// Which family of conditions to verify.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionClass {
    /// Base factors: increasing and concave, finite on A > 0.
    A1,
    /// Additional factors, smallness part: bounded log with bounded slopes.
    A2,
    /// Additional factors, shape part: A1's shape plus boundedness plus
    /// L(0) = 0.
    A3,
}

/// One verified condition.
#[derive(Debug, Clone)]
pub struct ConditionCheck {
    pub pass: bool,
    /// Grid point at which the condition first failed, when it failed.
    pub violating_a: Option<f64>,
    pub detail: String,
}

impl ConditionCheck {
    fn pass(detail: impl Into<String>) -> Self {
        Self {
            pass: true,
            violating_a: None,
            detail: detail.into(),
        }
    }

    fn fail(a: f64, detail: impl Into<String>) -> Self {
        Self {
            pass: false,
            violating_a: Some(a),
            detail: detail.into(),
        }
    }
}

/// Grid-based verification report for an adjustment factor.
#[derive(Debug, Clone)]
pub struct FactorReport {
    pub label: String,
    pub class: ConditionClass,
    pub finite: ConditionCheck,
    pub monotone: Option<ConditionCheck>,
    pub concave: Option<ConditionCheck>,
    pub bounded: Option<ConditionCheck>,
    pub vanishes_at_zero: Option<ConditionCheck>,
    /// sup |log L| over the grid.
    pub max_abs_log_h: f64,
    /// sup of |difference quotient| between adjacent grid points.
    pub max_abs_derivative: f64,
}

impl FactorReport {
    pub fn pass(&self) -> bool {
        self.finite.pass
            && self.monotone.as_ref().is_none_or(|c| c.pass)
            && self.concave.as_ref().is_none_or(|c| c.pass)
            && self.bounded.as_ref().is_none_or(|c| c.pass)
            && self.vanishes_at_zero.as_ref().is_none_or(|c| c.pass)
    }

    pub fn failure_summary(&self) -> String {
        let mut parts = Vec::new();
        for (name, check) in [
            ("finite", Some(&self.finite)),
            ("monotone", self.monotone.as_ref()),
            ("concave", self.concave.as_ref()),
            ("bounded", self.bounded.as_ref()),
            ("vanishes-at-zero", self.vanishes_at_zero.as_ref()),
        ] {
            if let Some(c) = check {
                if !c.pass {
                    parts.push(format!("{name}: {}", c.detail));
                }
            }
        }
        if parts.is_empty() {
            "all conditions hold".into()
        } else {
            parts.join("; ")
        }
    }
}

/// Bound used for the A2/A3 boundedness check. Any genuinely o(1) additional
/// factor sits far below this; the report also carries the measured suprema
/// so callers can judge scaling in m themselves.
const BOUNDEDNESS_LIMIT: f64 = 10.0;

/// Numerically verify the shape conditions of an adjustment factor on a grid.
///
/// The grid must be strictly increasing, strictly positive, and contain at
/// least 10 points. Failures are report entries, not errors.
pub fn validate_factor(
    f: &AdjustmentFactor,
    grid: &[f64],
    class: ConditionClass,
) -> Result<FactorReport> {
    if grid.len() < 10 {
        return Err(Error::DomainError(format!(
            "condition grid needs at least 10 points, got {}",
            grid.len()
        )));
    }
    if grid[0] <= 0.0 {
        return Err(Error::DomainError("condition grid must be positive".into()));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::DomainError(
            "condition grid must be strictly increasing".into(),
        ));
    }

    let vals: Vec<f64> = grid.iter().map(|&a| f.log_h(a)).collect();

    let mut finite = ConditionCheck::pass("log L finite on the grid");
    for (&a, &v) in grid.iter().zip(&vals) {
        if !v.is_finite() {
            finite = ConditionCheck::fail(a, format!("log L({a}) = {v}"));
            break;
        }
    }

    let max_abs_log_h = vals.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let mut max_abs_derivative = 0.0_f64;
    for w in grid.windows(2).zip(vals.windows(2)) {
        let (g, v) = w;
        let slope = (v[1] - v[0]) / (g[1] - g[0]);
        if slope.is_finite() {
            max_abs_derivative = max_abs_derivative.max(slope.abs());
        }
    }

    // Strict increase: no pointwise decrease beyond rounding noise, and a
    // genuine overall increase (rules out constant factors).
    let scale = max_abs_log_h.max(1.0);
    let monotone = {
        let mut check = ConditionCheck::pass("log L strictly increasing");
        for (g, v) in grid.windows(2).zip(vals.windows(2)) {
            if v[1] <= v[0] - 1e-12 * scale {
                check = ConditionCheck::fail(
                    g[1],
                    format!("log L({}) = {} <= log L({}) = {}", g[1], v[1], g[0], v[0]),
                );
                break;
            }
        }
        if check.pass && vals[vals.len() - 1] <= vals[0] {
            check = ConditionCheck::fail(
                grid[grid.len() - 1],
                "log L does not increase over the grid".to_string(),
            );
        }
        check
    };

    // Concavity via second divided differences. The pass threshold tracks
    // the worst-case rounding noise of the divided differences so that weak
    // convexity is still caught while legitimate near-flat tails are not.
    let concave = {
        let mut check = ConditionCheck::pass("log L concave");
        for i in 1..grid.len() - 1 {
            let (a0, a1, a2) = (grid[i - 1], grid[i], grid[i + 1]);
            let (v0, v1, v2) = (vals[i - 1], vals[i], vals[i + 1]);
            let h1 = a1 - a0;
            let h2 = a2 - a1;
            let s1 = (v1 - v0) / h1;
            let s2 = (v2 - v1) / h2;
            let second = (s2 - s1) / (a2 - a0) * 2.0;
            let local = v0.abs().max(v1.abs()).max(v2.abs());
            let noise =
                4.0 * f64::EPSILON * local * (1.0 / h1 + 1.0 / h2) / (a2 - a0);
            if second > 32.0 * noise + 1e-15 {
                check = ConditionCheck::fail(a1, format!("second difference {second} > 0"));
                break;
            }
        }
        check
    };

    let bounded = {
        if max_abs_log_h <= BOUNDEDNESS_LIMIT && max_abs_derivative.is_finite() {
            ConditionCheck::pass(format!(
                "sup |log L| = {max_abs_log_h:.3e}, sup |dlog L/dA| = {max_abs_derivative:.3e}"
            ))
        } else {
            ConditionCheck::fail(
                grid[grid.len() - 1],
                format!("sup |log L| = {max_abs_log_h:.3e} exceeds bound {BOUNDEDNESS_LIMIT}"),
            )
        }
    };

    // L(0) = 0, i.e. log L(0) = -inf; checked at 0 and corroborated near 0.
    let vanishes = {
        let at_zero = f.log_h(0.0);
        let near = f.log_h(1e-12);
        if at_zero == f64::NEG_INFINITY && (near == f64::NEG_INFINITY || near < f.log_h(grid[0])) {
            ConditionCheck::pass("log L(0) = -inf")
        } else {
            ConditionCheck::fail(0.0, format!("log L(0) = {at_zero}, expected -inf"))
        }
    };

    let report = match class {
        ConditionClass::A1 => FactorReport {
            label: f.label().to_string(),
            class,
            finite,
            monotone: Some(monotone),
            concave: Some(concave),
            bounded: None,
            vanishes_at_zero: None,
            max_abs_log_h,
            max_abs_derivative,
        },
        ConditionClass::A2 => FactorReport {
            label: f.label().to_string(),
            class,
            finite,
            monotone: None,
            concave: None,
            bounded: Some(bounded),
            vanishes_at_zero: None,
            max_abs_log_h,
            max_abs_derivative,
        },
        ConditionClass::A3 => FactorReport {
            label: f.label().to_string(),
            class,
            finite,
            monotone: Some(monotone),
            concave: Some(concave),
            bounded: Some(bounded),
            vanishes_at_zero: Some(vanishes),
            max_abs_log_h,
            max_abs_derivative,
        },
    };
    Ok(report)
}
