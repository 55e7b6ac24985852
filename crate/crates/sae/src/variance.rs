//! Estimation of the model variance A: plain REML / profile ML and the
//! adjusted maximum-likelihood estimators (LL, YL, per-area NRE, custom
//! factors), all realized as one-dimensional maximization over [0, A_max].

use crate::adjustment::{factor_ll, factor_nre, factor_yl, AdjustmentFactor};
use crate::error::{Error, Result};
use crate::model::{log_likelihood, Dataset, LikelihoodKind};

/// Which estimator of A to compute.
#[derive(Debug, Clone)]
pub enum VarianceMethod {
    /// Residual maximum likelihood.
    Reml,
    /// Profile maximum likelihood.
    Pml,
    /// Adjusted REML with L(A) = A.
    AdjustedLL,
    /// Adjusted REML with the bounded arctan factor.
    AdjustedYL,
    /// Per-area adjusted REML with L_i(A) = (A+D_i)^2 times a vanishing
    /// additional factor; the estimator behind the strictly positive naive
    /// MSE estimator.
    Nre { area: usize },
    /// Any caller-supplied factor and likelihood kind. The factor is used
    /// as-is: build it via `factor_from_c` or check it with
    /// `validate_factor` when its shape is not known by construction.
    Custom {
        factor: AdjustmentFactor,
        kind: LikelihoodKind,
    },
}

impl VarianceMethod {
    /// Stable identifier used in outputs and compatibility checks.
    pub fn label(&self) -> String {
        match self {
            VarianceMethod::Reml => "reml".into(),
            VarianceMethod::Pml => "pml".into(),
            VarianceMethod::AdjustedLL => "ll".into(),
            VarianceMethod::AdjustedYL => "yl".into(),
            VarianceMethod::Nre { area } => format!("nre[{area}]"),
            VarianceMethod::Custom { factor, .. } => format!("custom[{}]", factor.label()),
        }
    }

    /// True when the total adjustment vanishes at A = 0, which forces the
    /// maximizer strictly inside (0, A_max].
    pub fn vanishes_at_zero(&self) -> bool {
        match self {
            VarianceMethod::Reml | VarianceMethod::Pml => false,
            VarianceMethod::AdjustedLL | VarianceMethod::AdjustedYL | VarianceMethod::Nre { .. } => {
                true
            }
            VarianceMethod::Custom { factor, .. } => factor.vanishes_at_zero(),
        }
    }
}

/// A fitted model variance with optimizer diagnostics.
#[derive(Debug, Clone)]
pub struct VarianceEstimate {
    pub a_hat: f64,
    pub method: VarianceMethod,
    pub at_lower_boundary: bool,
    pub at_upper_boundary: bool,
    /// Objective (log likelihood plus log adjustment) at the maximizer.
    pub objective_at_max: f64,
    /// Number of objective evaluations spent.
    pub evaluations: usize,
    /// Search interval upper end actually used.
    pub a_max: f64,
}

/// Options for `estimate_variance`.
#[derive(Debug, Clone, Default)]
pub struct EstimateOptions {
    /// Override the default search bound max(1e4, 100 (var(y) + max D_i)).
    pub a_max: Option<f64>,
    /// Relative bracket-width tolerance; default 1e-8.
    pub tol: Option<f64>,
    /// Demote the m > p + 4 requirement of the NRE estimator from an error
    /// to a caller-accepted risk (positivity is no longer guaranteed).
    pub allow_small_m: bool,
}

pub const DEFAULT_TOL: f64 = 1e-8;
const COARSE_POINTS: usize = 256;
const MAX_GOLDEN_ITERS: usize = 200;

/// Diagnostics from a raw maximization.
#[derive(Debug, Clone, Copy)]
pub struct MaximizeDiagnostics {
    pub evaluations: usize,
    pub at_lower_boundary: bool,
    pub at_upper_boundary: bool,
}

/// Maximize a scalar objective over [0, a_max].
///
/// Strategy: evaluate A = 0 plus `COARSE_POINTS` log-spaced points spanning
/// [1e-6 a_max, a_max], then refine inside the bracket around the best grid
/// point by golden-section search until the bracket's relative width falls
/// below `tol`. -inf objective values are legal (vanishing adjustment at 0);
/// NaN or +inf abort with `NonFiniteObjective`. Deterministic for fixed
/// inputs.
pub fn maximize_over_a(
    objective: impl Fn(f64) -> f64,
    a_max: f64,
    tol: f64,
) -> Result<(f64, f64, MaximizeDiagnostics)> {
    if !(a_max > 0.0) || !a_max.is_finite() {
        return Err(Error::DomainError(format!(
            "a_max must be positive and finite, got {a_max}"
        )));
    }
    if !(tol > 0.0) {
        return Err(Error::DomainError(format!("tol must be positive, got {tol}")));
    }

    let mut evals = 0usize;
    let mut eval = |a: f64| -> Result<f64> {
        evals += 1;
        let v = objective(a);
        if v.is_nan() || v == f64::INFINITY {
            return Err(Error::NonFiniteObjective { a });
        }
        Ok(v)
    };

    // Coarse scan: 0 plus a log grid.
    let lo = 1e-6 * a_max;
    let ratio = (a_max / lo).ln();
    let mut grid = Vec::with_capacity(COARSE_POINTS + 1);
    grid.push(0.0);
    for k in 0..COARSE_POINTS {
        let t = k as f64 / (COARSE_POINTS - 1) as f64;
        grid.push(lo * (ratio * t).exp());
    }
    // Pin the last point to a_max exactly.
    *grid.last_mut().unwrap() = a_max;

    let mut best_idx = 0usize;
    let mut best_val = f64::NEG_INFINITY;
    let mut values = Vec::with_capacity(grid.len());
    for (i, &a) in grid.iter().enumerate() {
        let v = eval(a)?;
        values.push(v);
        if v > best_val {
            best_val = v;
            best_idx = i;
        }
    }

    // Refine within the bracket around the best grid point.
    let left = grid[best_idx.saturating_sub(1)];
    let right = grid[(best_idx + 1).min(grid.len() - 1)];
    let (mut a_best, mut v_best) = (grid[best_idx], best_val);

    if right > left {
        const INV_PHI: f64 = 0.618_033_988_749_894_9;
        let mut a = left;
        let mut b = right;
        let mut x1 = b - INV_PHI * (b - a);
        let mut x2 = a + INV_PHI * (b - a);
        let mut f1 = eval(x1)?;
        let mut f2 = eval(x2)?;
        for _ in 0..MAX_GOLDEN_ITERS {
            let width_scale = a.abs().max(b.abs()).max(1e-300);
            if (b - a) <= tol * width_scale {
                break;
            }
            if f1 < f2 {
                a = x1;
                x1 = x2;
                f1 = f2;
                x2 = a + INV_PHI * (b - a);
                f2 = eval(x2)?;
            } else {
                b = x2;
                x2 = x1;
                f2 = f1;
                x1 = b - INV_PHI * (b - a);
                f1 = eval(x1)?;
            }
        }
        let (xr, fr) = if f1 >= f2 { (x1, f1) } else { (x2, f2) };
        if fr > v_best {
            a_best = xr;
            v_best = fr;
        }
    }

    let diag = MaximizeDiagnostics {
        evaluations: evals,
        at_lower_boundary: a_best == 0.0,
        at_upper_boundary: a_best >= a_max * (1.0 - 1e-9),
    };
    Ok((a_best, v_best, diag))
}

/// Default search bound: generous multiple of the total response dispersion,
/// floored at 1e4 so small datasets still search a wide interval.
pub fn default_a_max(data: &Dataset) -> f64 {
    let m = data.m() as f64;
    let mean = data.areas().iter().map(|o| o.y).sum::<f64>() / m;
    let var = data
        .areas()
        .iter()
        .map(|o| (o.y - mean).powi(2))
        .sum::<f64>()
        / (m - 1.0).max(1.0);
    let dmax = data
        .areas()
        .iter()
        .map(|o| o.d)
        .fold(f64::NEG_INFINITY, f64::max);
    (100.0 * (var + dmax)).max(1e4)
}

/// Estimate the model variance by the requested method.
///
/// The objective is the chosen log likelihood plus the method's log
/// adjustment (identically zero for REML / profile ML), maximized over
/// [0, A_max]. Methods whose adjustment vanishes at zero are guaranteed a
/// strictly positive estimate.
pub fn estimate_variance(
    data: &Dataset,
    method: VarianceMethod,
    opts: &EstimateOptions,
) -> Result<VarianceEstimate> {
    let a_max = opts.a_max.unwrap_or_else(|| default_a_max(data));
    let tol = opts.tol.unwrap_or(DEFAULT_TOL);

    let (kind, factor): (LikelihoodKind, Option<AdjustmentFactor>) = match &method {
        VarianceMethod::Reml => (LikelihoodKind::ResidualML, None),
        VarianceMethod::Pml => (LikelihoodKind::ProfileML, None),
        VarianceMethod::AdjustedLL => (LikelihoodKind::ResidualML, Some(factor_ll())),
        VarianceMethod::AdjustedYL => (LikelihoodKind::ResidualML, Some(factor_yl(data))),
        VarianceMethod::Nre { area } => {
            let required = data.p() + 4;
            if data.m() <= required && !opts.allow_small_m {
                return Err(Error::TooFewAreas {
                    m: data.m(),
                    required,
                });
            }
            let yl = factor_yl(data);
            (LikelihoodKind::ResidualML, Some(factor_nre(*area, data, &yl)?))
        }
        VarianceMethod::Custom { factor, kind } => (*kind, Some(factor.clone())),
    };

    let objective = |a: f64| {
        let ll = log_likelihood(kind, a, data).unwrap_or(f64::NAN);
        match &factor {
            Some(f) => ll + f.log_h(a),
            None => ll,
        }
    };

    let (a_hat, value, diag) = maximize_over_a(objective, a_max, tol)?;

    if method.vanishes_at_zero() && !(a_hat > 0.0) {
        return Err(Error::Internal(format!(
            "vanishing-adjustment method {} returned a_hat = {a_hat}",
            method.label()
        )));
    }

    Ok(VarianceEstimate {
        a_hat,
        method,
        at_lower_boundary: diag.at_lower_boundary,
        at_upper_boundary: diag.at_upper_boundary,
        objective_at_max: value,
        evaluations: diag.evaluations,
        a_max,
    })
}

/// NRE estimates for every area. Areas sharing the same D_i have identical
/// objectives, so the maximization is done once per distinct D_i.
pub fn estimate_nre_all(data: &Dataset, opts: &EstimateOptions) -> Result<Vec<VarianceEstimate>> {
    let mut by_d: Vec<(u64, VarianceEstimate)> = Vec::new();
    let mut out = Vec::with_capacity(data.m());
    for i in 0..data.m() {
        let key = data.area(i).d.to_bits();
        let found = by_d.iter().find(|(k, _)| *k == key).map(|(_, e)| e.clone());
        let mut est = match found {
            Some(e) => e,
            None => {
                let e = estimate_variance(data, VarianceMethod::Nre { area: i }, opts)?;
                by_d.push((key, e.clone()));
                e
            }
        };
        est.method = VarianceMethod::Nre { area: i };
        out.push(est);
    }
    Ok(out)
}

/// Existence bound for the adjusted estimator with constant weight c.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExistenceBound {
    /// Whether the supplied m satisfies the sharp bound.
    pub satisfied: bool,
    /// Smallest m for which a positive maximizer is guaranteed: the factor's
    /// tail grows like A^{2-c}, so m - p > 4 - 2c is required.
    pub m_min: usize,
    /// The conservative bound m > p + 4 that covers every c >= 0.
    pub conservative_m_min: usize,
}

/// Compute the existence bound for constant c in [0, 2].
pub fn existence_bound(m: usize, p: usize, c: f64) -> Result<ExistenceBound> {
    if !(0.0..=2.0).contains(&c) {
        return Err(Error::DomainError(format!("c must lie in [0, 2], got {c}")));
    }
    let m_min = p + (4.0 - 2.0 * c).floor() as usize + 1;
    Ok(ExistenceBound {
        satisfied: m >= m_min,
        m_min,
        conservative_m_min: p + 5,
    })
}
