//! BLUP and EBLUP of the true small-area means.
//!
//! theta_hat_i = (1 - B_i) y_i + B_i x_i' beta(A) with shrinkage
//! B_i = D_i / (A + D_i); EBLUP plugs an estimated A into the same formula.

use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::model::{gls_beta, Dataset};
use crate::variance::VarianceEstimate;

/// A fitted model variance, pooled across areas or estimated per area.
#[derive(Debug, Clone)]
pub enum VarianceFit {
    Pooled(VarianceEstimate),
    PerArea(Vec<VarianceEstimate>),
}

impl VarianceFit {
    pub fn label(&self) -> String {
        match self {
            VarianceFit::Pooled(e) => e.method.label(),
            VarianceFit::PerArea(v) => v
                .first()
                .map(|e| e.method.label())
                .unwrap_or_else(|| "per-area".into()),
        }
    }
}

/// Per-area predictions with the quantities that produced them.
#[derive(Debug, Clone)]
pub struct EblupResult {
    pub area_ids: Vec<String>,
    /// Predicted small-area means.
    pub theta_hat: Vec<f64>,
    /// Shrinkage weights B_i = D_i / (a_used_i + D_i), each in (0, 1].
    pub b_hat: Vec<f64>,
    /// Coefficient vector used for each area's synthetic part. With a pooled
    /// variance estimate all rows are identical; with per-area estimates each
    /// area gets the GLS fit at its own a.
    pub beta_hat: Vec<Vec<f64>>,
    /// Variance value plugged in for each area.
    pub a_used: Vec<f64>,
    /// Label of the method that produced the variances ("known-a" for BLUP).
    pub method: String,
}

/// BLUP with a known model variance a >= 0.
pub fn blup(data: &Dataset, a: f64) -> Result<EblupResult> {
    if !(a >= 0.0) {
        return Err(Error::DomainError(format!(
            "BLUP needs a known variance a >= 0, got {a}"
        )));
    }
    predict_pooled(data, a, "known-a".into())
}

/// EBLUP with an estimated model variance. With per-area estimates each
/// area's prediction, shrinkage weight and coefficient fit all use that
/// area's own estimate.
pub fn eblup(data: &Dataset, fit: &VarianceFit) -> Result<EblupResult> {
    match fit {
        VarianceFit::Pooled(est) => predict_pooled(data, est.a_hat, est.method.label()),
        VarianceFit::PerArea(ests) => {
            if ests.len() != data.m() {
                return Err(Error::MethodDataMismatch(format!(
                    "{} per-area estimates for {} areas",
                    ests.len(),
                    data.m()
                )));
            }
            let m = data.m();
            let mut out = EblupResult {
                area_ids: Vec::with_capacity(m),
                theta_hat: Vec::with_capacity(m),
                b_hat: Vec::with_capacity(m),
                beta_hat: Vec::with_capacity(m),
                a_used: Vec::with_capacity(m),
                method: fit.label(),
            };
            // Areas with the same a share a beta; solve once per distinct a.
            let mut cache: Vec<(u64, Vec<f64>)> = Vec::new();
            for (i, est) in ests.iter().enumerate() {
                let a = est.a_hat;
                let key = a.to_bits();
                let beta = match cache.iter().find(|(k, _)| *k == key) {
                    Some((_, b)) => b.clone(),
                    None => {
                        let b = gls_beta(a, data)?;
                        cache.push((key, b.clone()));
                        b
                    }
                };
                push_area(&mut out, data, i, a, beta);
            }
            Ok(out)
        }
    }
}

fn predict_pooled(data: &Dataset, a: f64, method: String) -> Result<EblupResult> {
    let beta = gls_beta(a, data)?;
    let m = data.m();
    let mut out = EblupResult {
        area_ids: Vec::with_capacity(m),
        theta_hat: Vec::with_capacity(m),
        b_hat: Vec::with_capacity(m),
        beta_hat: Vec::with_capacity(m),
        a_used: Vec::with_capacity(m),
        method,
    };
    for i in 0..m {
        push_area(&mut out, data, i, a, beta.clone());
    }
    Ok(out)
}

fn push_area(out: &mut EblupResult, data: &Dataset, i: usize, a: f64, beta: Vec<f64>) {
    let obs = data.area(i);
    let b = obs.d / (a + obs.d);
    let synthetic = dot(&obs.x, &beta);
    out.area_ids.push(obs.area_id.clone());
    out.theta_hat.push((1.0 - b) * obs.y + b * synthetic);
    out.b_hat.push(b);
    out.beta_hat.push(beta);
    out.a_used.push(a);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AreaObservation;
    use crate::variance::{estimate_nre_all, estimate_variance, EstimateOptions, VarianceMethod};
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64) / (1u64 << 53) as f64
    }

    fn dataset(seed: u64, m: usize) -> Dataset {
        let mut s = seed;
        let areas = (0..m)
            .map(|i| {
                AreaObservation::new(
                    format!("a{i}"),
                    lcg(&mut s) * 8.0 - 4.0,
                    0.5 + 1.5 * lcg(&mut s),
                    vec![1.0, lcg(&mut s) * 2.0 - 1.0],
                )
            })
            .collect();
        Dataset::validate(areas).unwrap()
    }

    #[test]
    fn zero_variance_means_full_shrinkage() {
        let d = dataset(1, 10);
        let r = blup(&d, 0.0).unwrap();
        for i in 0..10 {
            assert_abs_diff_eq!(r.b_hat[i], 1.0, epsilon = 1e-15);
            let synthetic = dot(&d.area(i).x, &r.beta_hat[i]);
            assert_relative_eq!(r.theta_hat[i], synthetic, epsilon = 1e-12);
        }
    }

    #[test]
    fn huge_variance_means_no_shrinkage() {
        let d = dataset(2, 10);
        let r = blup(&d, 1e12).unwrap();
        for i in 0..10 {
            assert_relative_eq!(r.theta_hat[i], d.area(i).y, max_relative = 1e-6);
        }
    }

    #[test]
    fn a_equal_to_d_gives_midpoint() {
        let areas = vec![
            AreaObservation::new("1", 2.0, 1.0, vec![1.0]),
            AreaObservation::new("2", 0.0, 1.0, vec![1.0]),
        ];
        let d = Dataset::validate(areas).unwrap();
        let r = blup(&d, 1.0).unwrap();
        assert_abs_diff_eq!(r.b_hat[0], 0.5, epsilon = 1e-15);
        let synthetic = dot(&d.area(0).x, &r.beta_hat[0]);
        assert_relative_eq!(r.theta_hat[0], (d.area(0).y + synthetic) / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn eblup_matches_blup_at_closed_form_reml() {
        // Balanced, intercept-only.
        let mut s = 4u64;
        let areas: Vec<AreaObservation> = (0..15)
            .map(|i| AreaObservation::new(format!("a{i}"), lcg(&mut s) * 6.0, 1.0, vec![1.0]))
            .collect();
        let d = Dataset::validate(areas).unwrap();
        let m = 15.0;
        let mean = d.areas().iter().map(|o| o.y).sum::<f64>() / m;
        let sq: f64 = d.areas().iter().map(|o| (o.y - mean).powi(2)).sum();
        let closed = (sq / 14.0 - 1.0).max(0.0);

        let est = estimate_variance(&d, VarianceMethod::Reml, &EstimateOptions::default()).unwrap();
        let via_est = eblup(&d, &VarianceFit::Pooled(est)).unwrap();
        let via_closed = blup(&d, closed).unwrap();
        for i in 0..15 {
            assert_abs_diff_eq!(via_est.theta_hat[i], via_closed.theta_hat[i], epsilon = 1e-6);
        }
        assert_eq!(via_est.method, "reml");
    }

    #[test]
    fn per_area_fit_uses_each_areas_estimate() {
        let d = dataset(6, 12);
        let ests = estimate_nre_all(&d, &EstimateOptions::default()).unwrap();
        let r = eblup(&d, &VarianceFit::PerArea(ests.clone())).unwrap();
        for (i, est) in ests.iter().enumerate() {
            assert_eq!(r.a_used[i], est.a_hat);
            let single = blup(&d, est.a_hat).unwrap();
            assert_abs_diff_eq!(r.theta_hat[i], single.theta_hat[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn per_area_count_mismatch_is_an_error() {
        let d = dataset(7, 8);
        let ests = estimate_nre_all(&d, &EstimateOptions::default()).unwrap();
        let short = ests[..5].to_vec();
        assert!(matches!(
            eblup(&d, &VarianceFit::PerArea(short)),
            Err(Error::MethodDataMismatch(_))
        ));
    }

    #[test]
    fn prediction_is_convex_combination() {
        for seed in 0..30 {
            let d = dataset(seed, 9);
            for a in [0.0, 0.2, 1.0, 10.0, 1e6] {
                let r = blup(&d, a).unwrap();
                for i in 0..d.m() {
                    let y = d.area(i).y;
                    let synthetic = dot(&d.area(i).x, &r.beta_hat[i]);
                    let lo = y.min(synthetic) - 1e-12;
                    let hi = y.max(synthetic) + 1e-12;
                    assert!(r.theta_hat[i] >= lo && r.theta_hat[i] <= hi);
                    assert!(r.b_hat[i] > 0.0 && r.b_hat[i] <= 1.0);
                }
            }
        }
    }

    #[test]
    fn translation_shifts_predictions_exactly() {
        // Even-translation invariance of A-estimators: y -> y + Xb moves each
        // prediction by x_i'b.
        let d = dataset(11, 14);
        let b_shift = [1.7, -0.9];
        // Tight tolerance so the two optimizer runs agree beyond the 1e-8
        // level being asserted.
        let opts = EstimateOptions {
            tol: Some(1e-12),
            ..Default::default()
        };
        let est = estimate_variance(&d, VarianceMethod::AdjustedYL, &opts).unwrap();
        let r0 = eblup(&d, &VarianceFit::Pooled(est.clone())).unwrap();

        let shifted: Vec<f64> = d
            .areas()
            .iter()
            .map(|o| o.y + dot(&o.x, &b_shift))
            .collect();
        let d2 = d.with_responses(&shifted).unwrap();
        let est2 = estimate_variance(&d2, VarianceMethod::AdjustedYL, &opts).unwrap();
        assert_abs_diff_eq!(est.a_hat, est2.a_hat, epsilon = 1e-8);
        let r1 = eblup(&d2, &VarianceFit::Pooled(est2)).unwrap();
        for i in 0..d.m() {
            let shift = dot(&d.area(i).x, &b_shift);
            assert_abs_diff_eq!(r1.theta_hat[i], r0.theta_hat[i] + shift, epsilon = 1e-8);
        }
    }
}
