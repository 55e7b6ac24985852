//! MSE estimation for EBLUP: the g1/g2/g3 terms, the plug-in ("naive"),
//! Datta-Lahiri, and strictly positive naive estimators, and the duality
//! between a weight c(A) on g3 and the adjustment factor whose maximizer
//! makes g1 + g2 + c g3 second-order unbiased.
//!
//! The dictionary: an estimator of A maximizing L(A) L_RE(A) pairs with the
//! weight c_i(A) = 2 - (A+D_i) d log L_i(A)/dA, and conversely
//! log L_i(A) = integral of (2 - c_i(t))/(t + D_i). c = 2 is plain REML with
//! the Datta-Lahiri correction; c = 0 is the (A+D_i)^2 factor whose plug-in
//! estimator needs no correction term at all.

use std::fmt;
use std::sync::Arc;

use crate::adjustment::{validate_additional, AdjustmentFactor, FactorScope};
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::model::{build_xtvx, Dataset};
use crate::prediction::VarianceFit;
use crate::variance::{VarianceEstimate, VarianceMethod};

/// The three closed-form components of the EBLUP MSE expansion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GTerms {
    /// Leading term A D_i / (A + D_i).
    pub g1: f64,
    /// Coefficient-estimation term D_i^2/(A+D_i)^2 x_i'(X'V^{-1}X)^{-1} x_i.
    pub g2: f64,
    /// Variance-estimation term 2 D_i^2 / [(A+D_i)^3 tr(V^{-2})].
    pub g3: f64,
}

impl GTerms {
    pub fn sum(&self) -> f64 {
        self.g1 + self.g2 + self.g3
    }
}

/// Evaluate g1, g2, g3 for area `i` at model variance `a`.
pub fn g_terms(a: f64, data: &Dataset, i: usize) -> Result<GTerms> {
    if i >= data.m() {
        return Err(Error::AreaIndexOutOfRange {
            index: i,
            m: data.m(),
        });
    }
    if !(a >= 0.0) {
        return Err(Error::DomainError(format!("g terms need a >= 0, got {a}")));
    }
    let obs = data.area(i);
    let apd = a + obs.d;
    let g1 = a * obs.d / apd;

    let xtvx = build_xtvx(a, data);
    let f = crate::linalg::lu(&xtvx)
        .map_err(|e| Error::Internal(format!("g2 solve failed at A = {a}: {e}")))?;
    let z = f.solve(&obs.x);
    let quad = dot(&obs.x, &z);
    let g2 = obs.d * obs.d / (apd * apd) * quad;

    let trace_vinv2: f64 = data.areas().iter().map(|o| (a + o.d).powi(-2)).sum();
    let g3 = 2.0 * obs.d * obs.d / (apd.powi(3) * trace_vinv2);
    Ok(GTerms { g1, g2, g3 })
}

/// Weight function c(A) on the g3 term.
#[derive(Clone)]
pub enum CWeight {
    Constant(f64),
    Function(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl CWeight {
    pub fn eval(&self, a: f64) -> f64 {
        match self {
            CWeight::Constant(v) => *v,
            CWeight::Function(f) => f(a),
        }
    }

    fn describe(&self) -> String {
        match self {
            CWeight::Constant(v) => format!("{v}"),
            CWeight::Function(_) => "fn".into(),
        }
    }
}

impl fmt::Debug for CWeight {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CWeight({})", self.describe())
    }
}

/// Which MSE estimator to evaluate.
#[derive(Debug, Clone)]
pub enum MseForm {
    /// g1 + g2 at the pooled REML estimate; biased low at order 1/m.
    NaivePlugin,
    /// g1 + g2 + 2 g3 at the pooled REML estimate; the classical
    /// second-order unbiased correction.
    DattaLahiri,
    /// g1 + g2 at the per-area strictly positive estimates; second-order
    /// unbiased with no additive correction.
    NaiveNre,
    /// g1 + g2 + c(A) g3 at estimates maximized with the paired factor.
    GeneralC { c: CWeight, factor: AdjustmentFactor },
}

impl MseForm {
    pub fn label(&self) -> String {
        match self {
            MseForm::NaivePlugin => "naive".into(),
            MseForm::DattaLahiri => "dl".into(),
            MseForm::NaiveNre => "naive-n".into(),
            MseForm::GeneralC { c, .. } => format!("general-c:{}", c.describe()),
        }
    }
}

/// Per-area MSE estimates.
#[derive(Debug, Clone)]
pub struct MseEstimate {
    pub area_ids: Vec<String>,
    pub values: Vec<f64>,
    pub form: String,
    pub a_used: Vec<f64>,
}

fn pooled_reml(fit: &VarianceFit, form: &MseForm) -> Result<f64> {
    match fit {
        VarianceFit::Pooled(e) => match e.method {
            VarianceMethod::Reml => Ok(e.a_hat),
            ref other => Err(Error::FormEstimatorMismatch(format!(
                "form `{}` needs a pooled REML estimate, got `{}`",
                form.label(),
                other.label()
            ))),
        },
        VarianceFit::PerArea(_) => Err(Error::FormEstimatorMismatch(format!(
            "form `{}` needs a pooled REML estimate, got per-area estimates",
            form.label()
        ))),
    }
}

/// Evaluate an MSE form per area.
///
/// The supplied variance fit must match the form: the plug-in and
/// Datta-Lahiri forms take the pooled REML estimate, the positive-naive form
/// takes per-area NRE estimates, and a general-c form takes estimates
/// maximized with its own paired factor.
pub fn mse_estimate(data: &Dataset, form: &MseForm, fit: &VarianceFit) -> Result<MseEstimate> {
    let m = data.m();
    let mut values = Vec::with_capacity(m);
    let mut a_used = Vec::with_capacity(m);

    match form {
        MseForm::NaivePlugin => {
            let a = pooled_reml(fit, form)?;
            for i in 0..m {
                let g = g_terms(a, data, i)?;
                values.push(g.g1 + g.g2);
                a_used.push(a);
            }
        }
        MseForm::DattaLahiri => {
            let a = pooled_reml(fit, form)?;
            for i in 0..m {
                let g = g_terms(a, data, i)?;
                values.push((g.g1 + g.g2) + 2.0 * g.g3);
                a_used.push(a);
            }
        }
        MseForm::NaiveNre => {
            let ests = match fit {
                VarianceFit::PerArea(v) => v,
                VarianceFit::Pooled(_) => {
                    return Err(Error::FormEstimatorMismatch(
                        "form `naive-n` needs per-area NRE estimates, got a pooled estimate"
                            .into(),
                    ))
                }
            };
            if ests.len() != m {
                return Err(Error::MethodDataMismatch(format!(
                    "{} estimates for {} areas",
                    ests.len(),
                    m
                )));
            }
            for (i, e) in ests.iter().enumerate() {
                match e.method {
                    VarianceMethod::Nre { area } if area == i => {}
                    ref other => {
                        return Err(Error::FormEstimatorMismatch(format!(
                            "form `naive-n` needs the NRE estimate of area {i}, got `{}`",
                            other.label()
                        )))
                    }
                }
                let g = g_terms(e.a_hat, data, i)?;
                values.push(g.g1 + g.g2);
                a_used.push(e.a_hat);
            }
        }
        MseForm::GeneralC { c, factor } => {
            let per_area: Vec<&VarianceEstimate> = match fit {
                VarianceFit::Pooled(e) => vec![e; m],
                VarianceFit::PerArea(v) => {
                    if v.len() != m {
                        return Err(Error::MethodDataMismatch(format!(
                            "{} estimates for {} areas",
                            v.len(),
                            m
                        )));
                    }
                    v.iter().collect()
                }
            };
            for (i, e) in per_area.iter().enumerate() {
                match &e.method {
                    VarianceMethod::Custom { factor: f, .. } if f.label() == factor.label() => {}
                    other => {
                        return Err(Error::FormEstimatorMismatch(format!(
                            "form `{}` needs estimates maximized with factor `{}`, got `{}`",
                            form.label(),
                            factor.label(),
                            other.label()
                        )))
                    }
                }
                let a = e.a_hat;
                let cv = c.eval(a);
                if !(-1e-9..=2.0 + 1e-9).contains(&cv) {
                    return Err(Error::HypothesisViolation {
                        a,
                        detail: format!("c({a}) = {cv} outside [0, 2]"),
                    });
                }
                let g = g_terms(a, data, i)?;
                values.push((g.g1 + g.g2) + cv * g.g3);
                a_used.push(a);
            }
        }
    }

    Ok(MseEstimate {
        area_ids: data.areas().iter().map(|o| o.area_id.clone()).collect(),
        values,
        form: form.label(),
        a_used,
    })
}

/// Grid on which the admissibility hypotheses of a weight function are verified.
fn hypothesis_grid() -> Vec<f64> {
    crate::adjustment::default_grid()
}

fn check_c_hypotheses(c: &CWeight, d_i: f64) -> Result<()> {
    let tol = 1e-9;
    for &a in hypothesis_grid().iter() {
        let cv = c.eval(a);
        if !cv.is_finite() {
            return Err(Error::HypothesisViolation {
                a,
                detail: format!("c({a}) = {cv}"),
            });
        }
        if cv > 2.0 + tol {
            return Err(Error::HypothesisViolation {
                a,
                detail: format!("c({a}) = {cv} > 2"),
            });
        }
        if cv < -tol {
            return Err(Error::HypothesisViolation {
                a,
                detail: format!("c({a}) = {cv} < 0"),
            });
        }
        // (dc/dA)(A + D_i) - c + 2 >= 0.
        let h = 1e-6 * a.max(1.0);
        let deriv = (c.eval(a + h) - c.eval((a - h).max(0.0))) / (a + h - (a - h).max(0.0));
        let lhs = deriv * (a + d_i) - cv + 2.0;
        if lhs < -1e-6 {
            return Err(Error::HypothesisViolation {
                a,
                detail: format!("(dc/dA)(A+D) - c + 2 = {lhs} < 0"),
            });
        }
    }
    Ok(())
}

/// Construct the adjustment factor paired with a weight function c for the
/// area with sampling variance `d_i`.
///
/// For constant c the solution is closed form, log L(A) = (2-c) log(A+D_i);
/// otherwise the defining derivative (2-c(t))/(t+D_i) is integrated from 0
/// by adaptive quadrature (the constant of integration is argmax-irrelevant
/// and dropped). Whenever the base factor does not vanish at A = 0
/// (constant c < 2 and every non-constant c), the supplied `l_add` is
/// validated and attached so the maximizer stays strictly positive; for
/// c identically 2 the factor is exactly constant and the estimator is plain
/// REML, so nothing is attached.
pub fn factor_from_c(c: &CWeight, d_i: f64, l_add: &AdjustmentFactor) -> Result<AdjustmentFactor> {
    if !(d_i > 0.0) {
        return Err(Error::DomainError(format!(
            "d_i must be positive, got {d_i}"
        )));
    }
    check_c_hypotheses(c, d_i)?;
    let label = format!("general-c:{}", c.describe());

    match c {
        CWeight::Constant(v) => {
            let v = *v;
            let base: crate::adjustment::LogFactorFn =
                Arc::new(move |a: f64| (2.0 - v) * (a + d_i).ln());
            if v < 2.0 {
                validate_additional(l_add)
                    .map_err(|e| Error::InvalidAdditionalFactor(e.to_string()))?;
                let add = l_add.clone();
                Ok(AdjustmentFactor::composed(
                    label,
                    FactorScope::Global,
                    true,
                    base,
                    Some(Arc::new(move |a: f64| add.log_h(a))),
                ))
            } else {
                Ok(AdjustmentFactor::composed(
                    label,
                    FactorScope::Global,
                    false,
                    base,
                    None,
                ))
            }
        }
        CWeight::Function(f) => {
            validate_additional(l_add)
                .map_err(|e| Error::InvalidAdditionalFactor(e.to_string()))?;
            let f = f.clone();
            let base: crate::adjustment::LogFactorFn = Arc::new(move |a: f64| {
                if a == 0.0 {
                    0.0
                } else {
                    adaptive_simpson(&|t: f64| (2.0 - f(t)) / (t + d_i), 0.0, a, 1e-10)
                }
            });
            let add = l_add.clone();
            Ok(AdjustmentFactor::composed(
                label,
                FactorScope::Global,
                true,
                base,
                Some(Arc::new(move |a: f64| add.log_h(a))),
            ))
        }
    }
}

/// Recover the weight function value c_i(a) paired with an adjustment
/// factor: c = 2 - (a + d_i) d log L_base(a)/dA, the derivative taken by a
/// central difference on the base component.
pub fn c_from_factor(f: &AdjustmentFactor, d_i: f64, a: f64) -> Result<f64> {
    if !(a > 0.0) {
        return Err(Error::DomainError(format!(
            "c_from_factor needs a > 0, got {a}"
        )));
    }
    let h = 1e-6_f64.max(1e-6 * a);
    let lo = a - h;
    let hi = a + h;
    let deriv = (f.base_log_h(hi) - f.base_log_h(lo)) / (hi - lo);
    if !deriv.is_finite() {
        return Err(Error::NonFiniteDerivative { a });
    }
    Ok(2.0 - (a + d_i) * deriv)
}

/// Adaptive Simpson quadrature with absolute tolerance `tol`.
fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &impl Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: usize,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                + recurse(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
    }
    if a == b {
        return 0.0;
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = simpson(fa, fm, fb, a, b);
    recurse(f, a, b, fa, fm, fb, whole, tol, 48)
}
