//! The Fay-Herriot data model: per-area observations with known sampling
//! variances, the GLS coefficient estimator, and the residual / profile
//! log-likelihood in the model variance A.
//!
//! Model: y_i = theta_i + e_i,  theta_i = x_i' beta + u_i, with
//! u_i ~ N(0, A) and e_i ~ N(0, D_i), D_i known. The marginal covariance of
//! y is V = diag(A + D_i), so every quantity below reduces to weighted sums
//! over areas and p x p solves; no m x m matrix is ever formed.

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

/// Condition-number level above which GLS solves are flagged as ill-conditioned.
pub const CONDITION_WARN: f64 = 1e12;

/// One small area: direct estimate, known sampling variance, covariates.
#[derive(Debug, Clone)]
pub struct AreaObservation {
    /// Opaque identifier (carried through to outputs).
    pub area_id: String,
    /// Direct estimate on the response scale.
    pub y: f64,
    /// Sampling variance D_i, strictly positive.
    pub d: f64,
    /// Covariate vector of length p. An intercept column is the caller's
    /// choice; the design matrix is taken exactly as given.
    pub x: Vec<f64>,
}

impl AreaObservation {
    pub fn new(area_id: impl Into<String>, y: f64, d: f64, x: Vec<f64>) -> Self {
        Self {
            area_id: area_id.into(),
            y,
            d,
            x,
        }
    }
}

/// Which likelihood in A is being evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LikelihoodKind {
    /// Residual (restricted) likelihood L_RE.
    ResidualML,
    /// Profile likelihood (beta profiled out at its GLS value).
    ProfileML,
}

/// A validated dataset: areas plus cached design-matrix diagnostics.
///
/// Immutable after validation; all methods are pure, so a `Dataset` can be
/// shared freely across threads.
#[derive(Debug, Clone)]
pub struct Dataset {
    areas: Vec<AreaObservation>,
    p: usize,
    leverage: Vec<f64>,
    xtx_condition: f64,
}

impl Dataset {
    /// Validate raw observations and cache design diagnostics.
    ///
    /// Rejects empty data, covariate-length mismatches, NaN/inf entries,
    /// non-positive D_i, and rank-deficient X. Leverages h_ii are computed
    /// from a column-pivoted QR of X.
    pub fn validate(areas: Vec<AreaObservation>) -> Result<Self> {
        if areas.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let p = areas[0].x.len();
        if p == 0 {
            return Err(Error::RankDeficient("zero covariate columns".into()));
        }
        for a in &areas {
            if a.x.len() != p {
                return Err(Error::CovariateLengthMismatch {
                    area_id: a.area_id.clone(),
                    expected: p,
                    got: a.x.len(),
                });
            }
            if !a.y.is_finite() {
                return Err(Error::NonFinite {
                    field: "y",
                    area_id: a.area_id.clone(),
                });
            }
            if !a.d.is_finite() {
                return Err(Error::NonFinite {
                    field: "d",
                    area_id: a.area_id.clone(),
                });
            }
            if a.d <= 0.0 {
                return Err(Error::NonPositiveSamplingVariance {
                    area_id: a.area_id.clone(),
                });
            }
            if a.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    field: "x",
                    area_id: a.area_id.clone(),
                });
            }
        }
        let m = areas.len();
        if m < p {
            return Err(Error::RankDeficient(format!(
                "m = {m} areas cannot support p = {p} covariates"
            )));
        }
        let x = Matrix::from_rows(&areas.iter().map(|a| a.x.clone()).collect::<Vec<_>>());
        let f = linalg::qr(&x);
        if f.rank < p {
            return Err(Error::RankDeficient(format!(
                "rank(X) = {} < p = {p}",
                f.rank
            )));
        }
        // h_ii = || i-th row of thin Q ||^2 since H = Q Q'.
        let leverage: Vec<f64> = (0..m)
            .map(|i| (0..p).map(|k| f.q.get(i, k).powi(2)).sum())
            .collect();
        let rmax = f.r_diag.iter().cloned().fold(0.0_f64, f64::max);
        let rmin = f.r_diag.iter().cloned().fold(f64::INFINITY, f64::min);
        let xtx_condition = (rmax / rmin).powi(2);
        Ok(Self {
            areas,
            p,
            leverage,
            xtx_condition,
        })
    }

    pub fn m(&self) -> usize {
        self.areas.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn areas(&self) -> &[AreaObservation] {
        &self.areas
    }

    pub fn area(&self, i: usize) -> &AreaObservation {
        &self.areas[i]
    }

    /// Leverage values h_ii = x_i'(X'X)^{-1} x_i; they sum to p.
    pub fn leverage(&self) -> &[f64] {
        &self.leverage
    }

    /// Condition estimate of X'X from the QR diagonal.
    pub fn xtx_condition(&self) -> f64 {
        self.xtx_condition
    }

    /// Diagnostic only: flags areas whose leverage exceeds 4p/m. High
    /// leverage breaks the uniform-boundedness assumption behind the
    /// large-m approximations but is never a hard error.
    pub fn leverage_warning(&self) -> Option<String> {
        let m = self.m() as f64;
        let bound = 4.0 * self.p as f64 / m;
        let worst = self
            .leverage
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))?;
        if *worst.1 > bound {
            Some(format!(
                "area {} has leverage {:.4} > 4p/m = {:.4}; large-m approximations may degrade",
                self.areas[worst.0].area_id, worst.1, bound
            ))
        } else {
            None
        }
    }

    /// Replace the response vector, keeping design and variances. Used by the
    /// simulation engine; the design diagnostics are unaffected by y.
    pub fn with_responses(&self, y: &[f64]) -> Result<Self> {
        if y.len() != self.m() {
            return Err(Error::MethodDataMismatch(format!(
                "{} responses for {} areas",
                y.len(),
                self.m()
            )));
        }
        for (a, &yi) in self.areas.iter().zip(y) {
            if !yi.is_finite() {
                return Err(Error::NonFinite {
                    field: "y",
                    area_id: a.area_id.clone(),
                });
            }
        }
        let mut out = self.clone();
        for (a, &yi) in out.areas.iter_mut().zip(y) {
            a.y = yi;
        }
        Ok(out)
    }
}

/// Result of one GLS solve at a fixed A.
pub struct GlsSolve {
    pub beta: Vec<f64>,
    /// log det(X' V^{-1} X)
    pub log_det_xtvx: f64,
    /// max|pivot| / min|pivot| of the p x p factorization.
    pub condition_estimate: f64,
}

/// X' V^{-1} X with V = diag(a + D_i); p x p.
pub(crate) fn build_xtvx(a: f64, data: &Dataset) -> Matrix {
    let p = data.p();
    let mut xtvx = Matrix::zeros(p, p);
    for obs in data.areas() {
        let w = 1.0 / (a + obs.d);
        for j in 0..p {
            for k in 0..p {
                let v = xtvx.get(j, k) + w * obs.x[j] * obs.x[k];
                xtvx.set(j, k, v);
            }
        }
    }
    xtvx
}

/// Solve the GLS normal equations X'V^{-1}(y - X beta) = 0 with
/// V = diag(a + D_i), returning beta plus factorization diagnostics.
pub fn gls_solve(a: f64, data: &Dataset) -> Result<GlsSolve> {
    debug_assert!(a >= 0.0);
    let p = data.p();
    let xtvx = build_xtvx(a, data);
    let mut xtvy = vec![0.0; p];
    for obs in data.areas() {
        let w = 1.0 / (a + obs.d);
        for (t, &xj) in xtvy.iter_mut().zip(&obs.x) {
            *t += w * xj * obs.y;
        }
    }
    let f = linalg::lu(&xtvx).map_err(|e| {
        Error::Internal(format!("GLS normal equations unsolvable at A = {a}: {e}"))
    })?;
    let beta = f.solve(&xtvy);
    Ok(GlsSolve {
        beta,
        log_det_xtvx: f.determinant.abs().ln(),
        condition_estimate: f.condition_estimate,
    })
}

/// GLS coefficient estimate beta(A) = (X'V^{-1}X)^{-1} X'V^{-1} y.
pub fn gls_beta(a: f64, data: &Dataset) -> Result<Vec<f64>> {
    Ok(gls_solve(a, data)?.beta)
}

/// The residual quadratic form y'Py = sum_i (y_i - x_i' beta(A))^2 / (A + D_i),
/// with P = V^{-1} - V^{-1}X(X'V^{-1}X)^{-1}X'V^{-1}.
pub fn residual_quadratic(a: f64, data: &Dataset) -> Result<f64> {
    let beta = gls_beta(a, data)?;
    Ok(data
        .areas()
        .iter()
        .map(|obs| {
            let r = obs.y - linalg::dot(&obs.x, &beta);
            r * r / (a + obs.d)
        })
        .sum())
}

/// Log-likelihood in A with constants dropped.
///
/// ResidualML: -1/2 log|X'V^{-1}X| - 1/2 log|V| - 1/2 y'Py.
/// ProfileML:  -1/2 log|V| - 1/2 y'Py.
///
/// Only differences and the location of the maximizer are meaningful; the
/// (2 pi) powers and, for ResidualML, the |X'X| normalization are omitted.
pub fn log_likelihood(kind: LikelihoodKind, a: f64, data: &Dataset) -> Result<f64> {
    let solve = gls_solve(a, data)?;
    let mut log_det_v = 0.0;
    let mut quad = 0.0;
    for obs in data.areas() {
        let apd = a + obs.d;
        log_det_v += apd.ln();
        let r = obs.y - linalg::dot(&obs.x, &solve.beta);
        quad += r * r / apd;
    }
    let ll = match kind {
        LikelihoodKind::ResidualML => -0.5 * (solve.log_det_xtvx + log_det_v + quad),
        LikelihoodKind::ProfileML => -0.5 * (log_det_v + quad),
    };
    Ok(ll)
}
