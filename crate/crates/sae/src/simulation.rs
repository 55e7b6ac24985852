//! Seeded Monte Carlo engine: generates data from the model, fits the
//! configured variance estimators, forms EBLUPs and MSE estimates, and
//! aggregates empirical MSE, percentage relative bias, estimator moments and
//! positivity counts.
//!
//! Determinism contract: every replicate draws from a stream keyed by
//! (seed, scenario, replicate) and aggregation runs in replicate order, so a
//! report is bit-identical for any worker count.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::adjustment::{factor_yl, AdjustmentFactor};
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::model::{AreaObservation, Dataset, LikelihoodKind};
use crate::mse::{g_terms, mse_estimate, CWeight, MseForm};
use crate::prediction::{eblup, VarianceFit};
use crate::rng::ReplicateRng;
use crate::variance::{
    estimate_nre_all, estimate_variance, EstimateOptions, VarianceEstimate, VarianceMethod,
};

/// Sampling-variance pattern: one shared value or one value per area.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DPattern {
    Balanced(f64),
    PerArea(Vec<f64>),
}

impl Default for DPattern {
    fn default() -> Self {
        DPattern::Balanced(1.0)
    }
}

fn default_replications() -> usize {
    10_000
}

fn default_floor() -> f64 {
    0.01
}

fn default_methods() -> Vec<String> {
    vec!["reml".into(), "nre".into()]
}

fn default_forms() -> Vec<String> {
    vec!["naive".into(), "dl".into(), "naive-n".into()]
}

/// Monte Carlo study configuration (JSON-serializable).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    /// Number of areas.
    pub m: usize,
    /// Optional explicit design matrix rows (m x p). Default: intercept only.
    #[serde(default)]
    pub x: Option<Vec<Vec<f64>>>,
    /// True coefficient vector. Default: zeros.
    #[serde(default)]
    pub beta_true: Option<Vec<f64>>,
    /// Sampling variances. Default: balanced D = 1.
    #[serde(default)]
    pub d: DPattern,
    /// Either a single true model variance ...
    #[serde(default)]
    pub a_true: Option<f64>,
    /// ... or a grid of shrinkage targets B, converted per scenario via
    /// A = D (1 - B) / B (balanced designs only).
    #[serde(default)]
    pub b_targets: Option<Vec<f64>>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    pub seed: u64,
    /// REML estimates of exactly zero are replaced by this value before any
    /// plug-in, mirroring the usual simulation protocol. Simulation-only; the
    /// library estimator itself never truncates.
    #[serde(default = "default_floor")]
    pub reml_zero_floor: f64,
    /// Variance methods to evaluate: reml | pml | ll | yl | nre.
    #[serde(default = "default_methods")]
    pub variance_methods: Vec<String>,
    /// MSE forms to evaluate: naive | dl | naive-n | general-c:<value>.
    #[serde(default = "default_forms")]
    pub mse_forms: Vec<String>,
}

/// One simulated setting.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ScenarioSpec {
    /// The shrinkage target when the scenario came from `b_targets`.
    pub b: Option<f64>,
    pub a_true: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MethodSpec {
    Reml,
    Pml,
    Ll,
    Yl,
    Nre,
}

impl MethodSpec {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "reml" => Ok(MethodSpec::Reml),
            "pml" => Ok(MethodSpec::Pml),
            "ll" => Ok(MethodSpec::Ll),
            "yl" => Ok(MethodSpec::Yl),
            "nre" => Ok(MethodSpec::Nre),
            other => Err(Error::InvalidConfig(format!(
                "unknown variance method `{other}` (expected reml|pml|ll|yl|nre)"
            ))),
        }
    }

    fn label(self) -> &'static str {
        match self {
            MethodSpec::Reml => "reml",
            MethodSpec::Pml => "pml",
            MethodSpec::Ll => "ll",
            MethodSpec::Yl => "yl",
            MethodSpec::Nre => "nre",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum FormSpec {
    Naive,
    Dl,
    NaiveN,
    GeneralC(f64),
}

impl FormSpec {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(FormSpec::Naive),
            "dl" => Ok(FormSpec::Dl),
            "naive-n" => Ok(FormSpec::NaiveN),
            other => {
                if let Some(v) = other.strip_prefix("general-c:") {
                    let c: f64 = v.parse().map_err(|_| {
                        Error::InvalidConfig(format!("bad general-c value `{v}`"))
                    })?;
                    if !(0.0..=2.0).contains(&c) {
                        return Err(Error::InvalidConfig(format!(
                            "general-c value must lie in [0, 2], got {c}"
                        )));
                    }
                    Ok(FormSpec::GeneralC(c))
                } else {
                    Err(Error::InvalidConfig(format!(
                        "unknown MSE form `{other}` (expected naive|dl|naive-n|general-c:<v>)"
                    )))
                }
            }
        }
    }

    fn label(&self) -> String {
        match self {
            FormSpec::Naive => "naive".into(),
            FormSpec::Dl => "dl".into(),
            FormSpec::NaiveN => "naive-n".into(),
            FormSpec::GeneralC(v) => format!("general-c:{v}"),
        }
    }
}

impl SimConfig {
    /// Balanced paper-style configuration: intercept-only design, beta = 0,
    /// D = 1 across `m` areas.
    pub fn balanced(m: usize, b_targets: Vec<f64>, replications: usize, seed: u64) -> Self {
        Self {
            m,
            x: None,
            beta_true: None,
            d: DPattern::Balanced(1.0),
            a_true: None,
            b_targets: Some(b_targets),
            replications,
            seed,
            reml_zero_floor: default_floor(),
            variance_methods: default_methods(),
            mse_forms: default_forms(),
        }
    }

    pub fn d_values(&self) -> Result<Vec<f64>> {
        match &self.d {
            DPattern::Balanced(v) => Ok(vec![*v; self.m]),
            DPattern::PerArea(v) => {
                if v.len() != self.m {
                    return Err(Error::InvalidConfig(format!(
                        "d has {} entries for m = {}",
                        v.len(),
                        self.m
                    )));
                }
                Ok(v.clone())
            }
        }
    }

    fn design(&self) -> Result<Vec<Vec<f64>>> {
        match &self.x {
            None => Ok(vec![vec![1.0]; self.m]),
            Some(rows) => {
                if rows.len() != self.m {
                    return Err(Error::InvalidConfig(format!(
                        "x has {} rows for m = {}",
                        rows.len(),
                        self.m
                    )));
                }
                Ok(rows.clone())
            }
        }
    }

    fn beta(&self, p: usize) -> Result<Vec<f64>> {
        match &self.beta_true {
            None => Ok(vec![0.0; p]),
            Some(b) => {
                if b.len() != p {
                    return Err(Error::InvalidConfig(format!(
                        "beta_true has {} entries for p = {p}",
                        b.len()
                    )));
                }
                Ok(b.clone())
            }
        }
    }

    /// The dataset skeleton shared by all replicates (responses zeroed).
    pub fn template(&self) -> Result<Dataset> {
        if self.m == 0 {
            return Err(Error::InvalidConfig("m must be positive".into()));
        }
        let d = self.d_values()?;
        if d.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidConfig("d entries must be positive".into()));
        }
        let x = self.design()?;
        let areas = (0..self.m)
            .map(|i| AreaObservation::new(format!("area{:03}", i + 1), 0.0, d[i], x[i].clone()))
            .collect();
        Dataset::validate(areas)
    }

    /// Expand `a_true` / `b_targets` into concrete scenarios.
    pub fn scenarios(&self) -> Result<Vec<ScenarioSpec>> {
        if self.replications == 0 {
            return Err(Error::InvalidConfig("replications must be >= 1".into()));
        }
        match (&self.a_true, &self.b_targets) {
            (Some(a), None) => {
                if !(*a >= 0.0) {
                    return Err(Error::InvalidConfig(format!(
                        "a_true must be >= 0, got {a}"
                    )));
                }
                Ok(vec![ScenarioSpec {
                    b: None,
                    a_true: *a,
                }])
            }
            (None, Some(bs)) => {
                let d = match &self.d {
                    DPattern::Balanced(v) => *v,
                    DPattern::PerArea(v) => {
                        let first = v[0];
                        if v.iter().any(|&x| x != first) {
                            return Err(Error::InvalidConfig(
                                "b_targets requires a balanced d pattern; unbalanced designs \
                                 must set a_true directly"
                                    .into(),
                            ));
                        }
                        first
                    }
                };
                if bs.is_empty() {
                    return Err(Error::InvalidConfig("b_targets is empty".into()));
                }
                bs.iter()
                    .map(|&b| {
                        if !(b > 0.0 && b < 1.0) {
                            return Err(Error::InvalidConfig(format!(
                                "B targets must lie in (0, 1), got {b}"
                            )));
                        }
                        Ok(ScenarioSpec {
                            b: Some(b),
                            a_true: d * (1.0 - b) / b,
                        })
                    })
                    .collect()
            }
            (Some(_), Some(_)) => Err(Error::InvalidConfig(
                "set either a_true or b_targets, not both".into(),
            )),
            (None, None) => Err(Error::InvalidConfig(
                "one of a_true or b_targets is required".into(),
            )),
        }
    }

    fn method_specs(&self) -> Result<Vec<MethodSpec>> {
        let specs: Vec<MethodSpec> = self
            .variance_methods
            .iter()
            .map(|s| MethodSpec::parse(s))
            .collect::<Result<_>>()?;
        Ok(specs)
    }

    fn form_specs(&self) -> Result<Vec<FormSpec>> {
        self.mse_forms.iter().map(|s| FormSpec::parse(s)).collect()
    }

    fn check_dependencies(&self, methods: &[MethodSpec], forms: &[FormSpec]) -> Result<()> {
        let has = |m: MethodSpec| methods.contains(&m);
        if !forms.is_empty() && !has(MethodSpec::Reml) {
            return Err(Error::InvalidConfig(
                "MSE forms need `reml` among the variance methods (PRB reference)".into(),
            ));
        }
        for f in forms {
            match f {
                FormSpec::Naive | FormSpec::Dl => {
                    if !has(MethodSpec::Reml) {
                        return Err(Error::InvalidConfig(format!(
                            "form `{}` needs method `reml`",
                            f.label()
                        )));
                    }
                }
                FormSpec::NaiveN => {
                    if !has(MethodSpec::Nre) {
                        return Err(Error::InvalidConfig(
                            "form `naive-n` needs method `nre`".into(),
                        ));
                    }
                }
                FormSpec::GeneralC(_) => {}
            }
        }
        Ok(())
    }
}

/// Draw one replicate: theta_i ~ N(x_i' beta, A), y_i ~ N(theta_i, D_i),
/// normals by inverse CDF in fixed area order. Returns the dataset and the
/// true means.
pub fn generate_replicate(
    config: &SimConfig,
    scenario_idx: usize,
    replicate: usize,
) -> Result<(Dataset, Vec<f64>)> {
    let template = config.template()?;
    let scenarios = config.scenarios()?;
    let spec = scenarios.get(scenario_idx).ok_or_else(|| {
        Error::InvalidConfig(format!(
            "scenario index {scenario_idx} out of range ({} scenarios)",
            scenarios.len()
        ))
    })?;
    let beta = config.beta(template.p())?;
    let mut rng = ReplicateRng::from_parts(config.seed, scenario_idx as u64, replicate as u64);
    let (y, theta) = draw_responses(&template, &beta, spec.a_true, &mut rng);
    Ok((template.with_responses(&y)?, theta))
}

fn draw_responses(
    template: &Dataset,
    beta: &[f64],
    a_true: f64,
    rng: &mut ReplicateRng,
) -> (Vec<f64>, Vec<f64>) {
    let m = template.m();
    let sd_a = a_true.sqrt();
    let mut y = Vec::with_capacity(m);
    let mut theta = Vec::with_capacity(m);
    for obs in template.areas() {
        let mean = dot(&obs.x, beta);
        let t = mean + sd_a * rng.next_normal();
        let yi = t + obs.d.sqrt() * rng.next_normal();
        theta.push(t);
        y.push(yi);
    }
    (y, theta)
}

/// Mean bias and mean squared deviation of an estimator of A.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MomentSummary {
    pub mean_bias: f64,
    pub mean_squared_deviation: f64,
}

/// How many replicates produced strictly positive values.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PositivityCount {
    pub positive: usize,
    pub total: usize,
}

/// Aggregates for one scenario.
#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    pub b: Option<f64>,
    pub a_true: f64,
    pub failed_replicates: usize,
    /// Empirical MSE of EBLUP per variance method, averaged over areas and
    /// replicates.
    pub eblup_empirical_mse: BTreeMap<String, f64>,
    /// The same values multiplied by 100 (table convention).
    pub eblup_empirical_mse_x100: BTreeMap<String, f64>,
    /// Area-averaged g1 + g2 + g3 at the true A: the second-order analytic
    /// approximation of the EBLUP MSE, reported for transparency.
    pub analytic_mse_reference: f64,
    /// Mean MSE estimate per form, averaged over areas and replicates.
    pub mean_mse_estimate: BTreeMap<String, f64>,
    /// Percentage relative bias of each MSE form against the empirical MSE
    /// of EBLUP under REML from the same replicates.
    pub prb: BTreeMap<String, f64>,
    /// Bias and squared deviation of each method's variance estimates
    /// against the true A (REML after zero-flooring, as used downstream).
    pub variance_moments: BTreeMap<String, MomentSummary>,
    /// Per method (raw, pre-floor estimates) and per MSE form: replicates in
    /// which every value was strictly positive.
    pub positivity: BTreeMap<String, PositivityCount>,
}

/// Full simulation output.
#[derive(Debug, Clone, Serialize)]
pub struct SimulationReport {
    pub seed: u64,
    pub replications: usize,
    pub scenarios: Vec<ScenarioReport>,
    /// Wall-clock time; excluded from the serialized payload so reports are
    /// byte-identical across runs and worker counts.
    #[serde(skip)]
    pub runtime: Duration,
}

struct MethodOut {
    sqerr: Vec<f64>,
    a_used: Vec<f64>,
    min_raw_a: f64,
}

struct ReplicateOut {
    methods: Vec<MethodOut>,
    forms: Vec<Vec<f64>>,
}

/// Per-scenario precomputed machinery for general-c forms.
struct GeneralCPlan {
    /// (d bit pattern, paired factor) per distinct D_i.
    factors: Vec<(u64, AdjustmentFactor)>,
    /// Factor index per area.
    area_factor: Vec<usize>,
    form: MseForm,
}

fn build_general_c_plan(template: &Dataset, c_value: f64) -> Result<GeneralCPlan> {
    let yl = factor_yl(template);
    let mut factors: Vec<(u64, AdjustmentFactor)> = Vec::new();
    let mut area_factor = Vec::with_capacity(template.m());
    for obs in template.areas() {
        let key = obs.d.to_bits();
        let idx = match factors.iter().position(|(k, _)| *k == key) {
            Some(i) => i,
            None => {
                let f = crate::mse::factor_from_c(&CWeight::Constant(c_value), obs.d, &yl)?;
                factors.push((key, f));
                factors.len() - 1
            }
        };
        area_factor.push(idx);
    }
    let form = MseForm::GeneralC {
        c: CWeight::Constant(c_value),
        factor: factors[0].1.clone(),
    };
    Ok(GeneralCPlan {
        factors,
        area_factor,
        form,
    })
}

/// Scenario-wide context shared by every replicate.
struct ScenarioContext<'a> {
    template: &'a Dataset,
    beta: &'a [f64],
    spec: ScenarioSpec,
    methods: &'a [MethodSpec],
    forms: &'a [FormSpec],
    plans: &'a [Option<GeneralCPlan>],
    floor: f64,
    opts: &'a EstimateOptions,
}

fn run_replicate(ctx: &ScenarioContext<'_>, rng: &mut ReplicateRng) -> Result<ReplicateOut> {
    let ScenarioContext {
        template,
        beta,
        spec,
        methods,
        forms,
        plans,
        floor,
        opts,
    } = *ctx;
    let (y, theta) = draw_responses(template, beta, spec.a_true, rng);
    let data = template.with_responses(&y)?;
    let m = data.m();

    let mut reml_floored: Option<VarianceEstimate> = None;
    let mut nre_ests: Option<Vec<VarianceEstimate>> = None;
    let mut method_outs = Vec::with_capacity(methods.len());

    for spec_m in methods {
        let (fit, min_raw) = match spec_m {
            MethodSpec::Reml => {
                let est = estimate_variance(&data, VarianceMethod::Reml, opts)?;
                let raw = est.a_hat;
                let mut floored = est;
                if floored.a_hat == 0.0 {
                    floored.a_hat = floor;
                }
                reml_floored = Some(floored.clone());
                (VarianceFit::Pooled(floored), raw)
            }
            MethodSpec::Pml => {
                let est = estimate_variance(&data, VarianceMethod::Pml, opts)?;
                let raw = est.a_hat;
                (VarianceFit::Pooled(est), raw)
            }
            MethodSpec::Ll => {
                let est = estimate_variance(&data, VarianceMethod::AdjustedLL, opts)?;
                let raw = est.a_hat;
                (VarianceFit::Pooled(est), raw)
            }
            MethodSpec::Yl => {
                let est = estimate_variance(&data, VarianceMethod::AdjustedYL, opts)?;
                let raw = est.a_hat;
                (VarianceFit::Pooled(est), raw)
            }
            MethodSpec::Nre => {
                let ests = estimate_nre_all(&data, opts)?;
                let min_raw = ests.iter().map(|e| e.a_hat).fold(f64::INFINITY, f64::min);
                nre_ests = Some(ests.clone());
                (VarianceFit::PerArea(ests), min_raw)
            }
        };
        let pred = eblup(&data, &fit)?;
        let sqerr: Vec<f64> = (0..m)
            .map(|i| (pred.theta_hat[i] - theta[i]).powi(2))
            .collect();
        method_outs.push(MethodOut {
            sqerr,
            a_used: pred.a_used,
            min_raw_a: min_raw,
        });
    }

    let mut form_outs = Vec::with_capacity(forms.len());
    for (fi, f) in forms.iter().enumerate() {
        let values = match f {
            FormSpec::Naive => {
                let est = reml_floored.clone().expect("validated: reml present");
                mse_estimate(&data, &MseForm::NaivePlugin, &VarianceFit::Pooled(est))?.values
            }
            FormSpec::Dl => {
                let est = reml_floored.clone().expect("validated: reml present");
                mse_estimate(&data, &MseForm::DattaLahiri, &VarianceFit::Pooled(est))?.values
            }
            FormSpec::NaiveN => {
                let ests = nre_ests.clone().expect("validated: nre present");
                mse_estimate(&data, &MseForm::NaiveNre, &VarianceFit::PerArea(ests))?.values
            }
            FormSpec::GeneralC(_) => {
                let plan = plans[fi].as_ref().expect("plan built for general-c");
                // One maximization per distinct factor, shared across areas.
                let mut by_factor: Vec<Option<VarianceEstimate>> =
                    vec![None; plan.factors.len()];
                let mut ests = Vec::with_capacity(m);
                for i in 0..m {
                    let idx = plan.area_factor[i];
                    if by_factor[idx].is_none() {
                        let est = estimate_variance(
                            &data,
                            VarianceMethod::Custom {
                                factor: plan.factors[idx].1.clone(),
                                kind: LikelihoodKind::ResidualML,
                            },
                            opts,
                        )?;
                        by_factor[idx] = Some(est);
                    }
                    ests.push(by_factor[idx].clone().unwrap());
                }
                mse_estimate(&data, &plan.form, &VarianceFit::PerArea(ests))?.values
            }
        };
        form_outs.push(values);
    }

    Ok(ReplicateOut {
        methods: method_outs,
        forms: form_outs,
    })
}

/// Run `n` jobs over `workers` threads in contiguous chunks, returning
/// results in job order.
fn run_chunked<T: Send>(n: usize, workers: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let w = workers.max(1).min(n.max(1));
    if w <= 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(w);
    let mut out: Vec<Vec<T>> = Vec::with_capacity(w);
    std::thread::scope(|s| {
        let f = &f;
        let handles: Vec<_> = (0..w)
            .map(|wi| {
                let start = wi * chunk;
                let end = ((wi + 1) * chunk).min(n);
                s.spawn(move || (start..end).map(f).collect::<Vec<T>>())
            })
            .collect();
        for h in handles {
            out.push(h.join().expect("simulation worker panicked"));
        }
    });
    out.into_iter().flatten().collect()
}

/// Percentage relative bias of a mean MSE estimate against a reference MSE.
pub fn prb(mean_mse_hat: f64, mse_reference: f64) -> Result<f64> {
    if !(mse_reference > 0.0) {
        return Err(Error::DomainError(format!(
            "PRB reference must be positive, got {mse_reference}"
        )));
    }
    Ok(100.0 * (mean_mse_hat - mse_reference) / mse_reference)
}

/// Run the full study.
///
/// `workers` threads are used for replicate evaluation; the report is
/// bit-identical for any worker count.
pub fn run_simulation(config: &SimConfig, workers: usize) -> Result<SimulationReport> {
    let start = Instant::now();
    let template = config.template()?;
    let scenarios = config.scenarios()?;
    let methods = config.method_specs()?;
    let forms = config.form_specs()?;
    config.check_dependencies(&methods, &forms)?;
    if !(config.reml_zero_floor >= 0.0) {
        return Err(Error::InvalidConfig("reml_zero_floor must be >= 0".into()));
    }
    if methods.contains(&MethodSpec::Nre) && template.m() <= template.p() + 4 {
        return Err(Error::TooFewAreas {
            m: template.m(),
            required: template.p() + 4,
        });
    }
    let beta = config.beta(template.p())?;
    let opts = EstimateOptions::default();

    let mut plans: Vec<Option<GeneralCPlan>> = Vec::with_capacity(forms.len());
    for f in &forms {
        plans.push(match f {
            FormSpec::GeneralC(v) => Some(build_general_c_plan(&template, *v)?),
            _ => None,
        });
    }

    let r = config.replications;
    let m = template.m();
    let mut scenario_reports = Vec::with_capacity(scenarios.len());

    for (si, spec) in scenarios.iter().enumerate() {
        let ctx = ScenarioContext {
            template: &template,
            beta: &beta,
            spec: *spec,
            methods: &methods,
            forms: &forms,
            plans: &plans,
            floor: config.reml_zero_floor,
            opts: &opts,
        };
        let results: Vec<Result<ReplicateOut>> = run_chunked(r, workers, |rep| {
            let mut rng = ReplicateRng::from_parts(config.seed, si as u64, rep as u64);
            run_replicate(&ctx, &mut rng)
        });

        let failed = results.iter().filter(|r| r.is_err()).count();
        if failed * 100 > r {
            let first = results
                .iter()
                .find_map(|x| x.as_ref().err())
                .map(|e| e.to_string())
                .unwrap_or_default();
            return Err(Error::ReplicateFailures {
                failed,
                total: r,
                first,
            });
        }
        let ok: Vec<&ReplicateOut> = results.iter().filter_map(|x| x.as_ref().ok()).collect();
        let n_ok = ok.len();
        let denom = (n_ok * m) as f64;

        let mut eblup_mse = BTreeMap::new();
        let mut eblup_mse_x100 = BTreeMap::new();
        let mut moments = BTreeMap::new();
        let mut positivity = BTreeMap::new();
        for (mi, ms) in methods.iter().enumerate() {
            let mut sum_sq = 0.0;
            let mut sum_bias = 0.0;
            let mut sum_msd = 0.0;
            let mut positive = 0usize;
            for rep in &ok {
                let mo = &rep.methods[mi];
                for i in 0..m {
                    sum_sq += mo.sqerr[i];
                    let dev = mo.a_used[i] - spec.a_true;
                    sum_bias += dev;
                    sum_msd += dev * dev;
                }
                if mo.min_raw_a > 0.0 {
                    positive += 1;
                }
            }
            let mse = sum_sq / denom;
            eblup_mse.insert(ms.label().to_string(), mse);
            eblup_mse_x100.insert(ms.label().to_string(), 100.0 * mse);
            moments.insert(
                ms.label().to_string(),
                MomentSummary {
                    mean_bias: sum_bias / denom,
                    mean_squared_deviation: sum_msd / denom,
                },
            );
            positivity.insert(
                ms.label().to_string(),
                PositivityCount {
                    positive,
                    total: n_ok,
                },
            );
        }

        // PRB reference: empirical MSE of EBLUP under REML from this run.
        let reml_ref = eblup_mse.get("reml").copied();
        let mut mean_mse = BTreeMap::new();
        let mut prbs = BTreeMap::new();
        for (fi, fs) in forms.iter().enumerate() {
            let mut sum = 0.0;
            let mut positive = 0usize;
            for rep in &ok {
                let vals = &rep.forms[fi];
                sum += vals.iter().sum::<f64>();
                if vals.iter().all(|&v| v > 0.0) {
                    positive += 1;
                }
            }
            let mean = sum / denom;
            mean_mse.insert(fs.label(), mean);
            if let Some(reference) = reml_ref {
                prbs.insert(fs.label(), prb(mean, reference)?);
            }
            positivity.insert(
                fs.label(),
                PositivityCount {
                    positive,
                    total: n_ok,
                },
            );
        }

        // Analytic reference at the true A, averaged over areas.
        let analytic = (0..m)
            .map(|i| g_terms(spec.a_true, &template, i).map(|g| g.sum()))
            .sum::<Result<f64>>()?
            / m as f64;

        scenario_reports.push(ScenarioReport {
            b: spec.b,
            a_true: spec.a_true,
            failed_replicates: failed,
            eblup_empirical_mse: eblup_mse,
            eblup_empirical_mse_x100: eblup_mse_x100,
            analytic_mse_reference: analytic,
            mean_mse_estimate: mean_mse,
            prb: prbs,
            variance_moments: moments,
            positivity,
        });
    }

    Ok(SimulationReport {
        seed: config.seed,
        replications: r,
        scenarios: scenario_reports,
        runtime: start.elapsed(),
    })
}

/// Monte Carlo check of the strictly-positive estimator's moment expansion
/// for one area: empirical bias and squared deviation against the predicted
/// 4/(tr[V^-2](A+D_i)) and 2/tr[V^-2], plus the fraction of strictly
/// positive estimates.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct NreMomentCheck {
    pub empirical_bias: f64,
    pub predicted_bias: f64,
    pub empirical_msd: f64,
    pub predicted_msd: f64,
    /// Monte Carlo standard error of `empirical_bias`.
    pub mc_se_bias: f64,
    /// Monte Carlo standard error of `empirical_msd`.
    pub mc_se_msd: f64,
    pub positivity_rate: f64,
    pub replications: usize,
}

pub fn nre_moment_check(
    config: &SimConfig,
    area_i: usize,
    workers: usize,
) -> Result<NreMomentCheck> {
    let template = config.template()?;
    let scenarios = config.scenarios()?;
    if scenarios.len() != 1 {
        return Err(Error::InvalidConfig(
            "nre_moment_check needs a single-scenario config (one a_true or one B)".into(),
        ));
    }
    if area_i >= template.m() {
        return Err(Error::AreaIndexOutOfRange {
            index: area_i,
            m: template.m(),
        });
    }
    if template.m() <= template.p() + 4 {
        return Err(Error::TooFewAreas {
            m: template.m(),
            required: template.p() + 4,
        });
    }
    let spec = scenarios[0];
    let beta = config.beta(template.p())?;
    let opts = EstimateOptions::default();

    let template_ref = &template;
    let beta_ref = &beta;
    let opts_ref = &opts;
    let results: Vec<Result<f64>> = run_chunked(config.replications, workers, move |rep| {
        let mut rng = ReplicateRng::from_parts(config.seed, 0, rep as u64);
        let (y, _theta) = draw_responses(template_ref, beta_ref, spec.a_true, &mut rng);
        let data = template_ref.with_responses(&y)?;
        let est = estimate_variance(&data, VarianceMethod::Nre { area: area_i }, opts_ref)?;
        Ok(est.a_hat)
    });

    let failed = results.iter().filter(|r| r.is_err()).count();
    if failed * 100 > config.replications {
        let first = results
            .iter()
            .find_map(|x| x.as_ref().err())
            .map(|e| e.to_string())
            .unwrap_or_default();
        return Err(Error::ReplicateFailures {
            failed,
            total: config.replications,
            first,
        });
    }

    let a = spec.a_true;
    let devs: Vec<f64> = results
        .iter()
        .filter_map(|x| x.as_ref().ok())
        .map(|r| r - a)
        .collect();
    let n = devs.len();
    let positive = devs.iter().filter(|&&dev| dev + a > 0.0).count();
    let nf = n as f64;
    let mean_dev = devs.iter().sum::<f64>() / nf;
    let mean_sq = devs.iter().map(|d| d * d).sum::<f64>() / nf;
    let var_dev = (mean_sq - mean_dev * mean_dev).max(0.0);
    let var_sq = (devs.iter().map(|d| d.powi(4)).sum::<f64>() / nf - mean_sq * mean_sq).max(0.0);
    let trace_vinv2: f64 = template.areas().iter().map(|o| (a + o.d).powi(-2)).sum();
    let d_i = template.area(area_i).d;
    Ok(NreMomentCheck {
        empirical_bias: mean_dev,
        predicted_bias: 4.0 / (trace_vinv2 * (a + d_i)),
        empirical_msd: mean_sq,
        predicted_msd: 2.0 / trace_vinv2,
        mc_se_bias: (var_dev / nf).sqrt(),
        mc_se_msd: (var_sq / nf).sqrt(),
        positivity_rate: positive as f64 / nf,
        replications: n,
    })
}

impl SimulationReport {
    /// CSV mirroring the EBLUP-MSE table: one row per method, one column per
    /// scenario, values are empirical MSE x100.
    pub fn table1_csv(&self) -> String {
        let mut out = String::from("method");
        for s in &self.scenarios {
            out.push(',');
            out.push_str(&scenario_label(s));
        }
        out.push('\n');
        let methods: Vec<&String> = self
            .scenarios
            .first()
            .map(|s| s.eblup_empirical_mse_x100.keys().collect())
            .unwrap_or_default();
        for mlabel in methods {
            out.push_str(mlabel);
            for s in &self.scenarios {
                out.push(',');
                if let Some(v) = s.eblup_empirical_mse_x100.get(mlabel) {
                    out.push_str(&format!("{v}"));
                }
            }
            out.push('\n');
        }
        out
    }

    /// CSV mirroring the PRB table: one row per scenario, one column per
    /// MSE form.
    pub fn table2_csv(&self) -> String {
        let forms: Vec<&String> = self
            .scenarios
            .first()
            .map(|s| s.prb.keys().collect())
            .unwrap_or_default();
        let mut out = String::from("scenario");
        for f in &forms {
            out.push(',');
            out.push_str(f);
        }
        out.push('\n');
        for s in &self.scenarios {
            out.push_str(&scenario_label(s));
            for f in &forms {
                out.push(',');
                if let Some(v) = s.prb.get(*f) {
                    out.push_str(&format!("{v}"));
                }
            }
            out.push('\n');
        }
        out
    }

    /// Human-readable run summary (not part of the canonical payload).
    pub fn summary(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "seed {} | {} replications | {:.2?}\n",
            self.seed, self.replications, self.runtime
        ));
        for s in &self.scenarios {
            out.push_str(&format!(
                "scenario {} (A = {:.6}):\n",
                scenario_label(s),
                s.a_true
            ));
            out.push_str(&format!(
                "  analytic g1+g2+g3 reference: {:.4} (x100: {:.2})\n",
                s.analytic_mse_reference,
                100.0 * s.analytic_mse_reference
            ));
            for (k, v) in &s.eblup_empirical_mse_x100 {
                out.push_str(&format!("  EBLUP MSE x100 [{k}]: {v:.2}\n"));
            }
            for (k, v) in &s.prb {
                out.push_str(&format!("  PRB [{k}]: {v:+.2}\n"));
            }
            if s.failed_replicates > 0 {
                out.push_str(&format!("  failed replicates: {}\n", s.failed_replicates));
            }
        }
        out
    }
}

fn scenario_label(s: &ScenarioReport) -> String {
    match s.b {
        Some(b) => format!("B={b}"),
        None => format!("A={}", s.a_true),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn tiny_config() -> SimConfig {
        SimConfig::balanced(15, vec![0.5], 40, 4242)
    }

    #[test]
    fn replicates_are_bit_reproducible() {
        let cfg = tiny_config();
        let (d1, t1) = generate_replicate(&cfg, 0, 7).unwrap();
        let (d2, t2) = generate_replicate(&cfg, 0, 7).unwrap();
        for i in 0..15 {
            assert_eq!(d1.area(i).y.to_bits(), d2.area(i).y.to_bits());
            assert_eq!(t1[i].to_bits(), t2[i].to_bits());
        }
        let (d3, _) = generate_replicate(&cfg, 0, 8).unwrap();
        assert_ne!(d1.area(0).y.to_bits(), d3.area(0).y.to_bits());
    }

    #[test]
    fn degenerate_level_two_yields_exact_means() {
        let cfg = SimConfig {
            a_true: Some(0.0),
            b_targets: None,
            ..tiny_config()
        };
        let (_data, theta) = generate_replicate(&cfg, 0, 0).unwrap();
        for t in theta {
            assert_eq!(t, 0.0);
        }
    }

    #[test]
    fn sample_moments_match_model() {
        // One area, many replicates: mean -> x'beta, variance -> A + D.
        let cfg = SimConfig {
            a_true: Some(2.0),
            b_targets: None,
            ..SimConfig::balanced(1, vec![], 1, 99)
        };
        let template = cfg.template().unwrap();
        let beta = [0.0];
        let n = 100_000usize;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for rep in 0..n {
            let mut rng = ReplicateRng::from_parts(cfg.seed, 0, rep as u64);
            let (y, _) = draw_responses(&template, &beta, 2.0, &mut rng);
            sum += y[0];
            sumsq += y[0] * y[0];
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let three_se = 3.0 * (3.0f64 / n as f64).sqrt();
        assert!(mean.abs() < three_se, "mean {mean} vs 3se {three_se}");
        assert_relative_eq!(var, 3.0, max_relative = 0.05);
    }

    #[test]
    fn prb_arithmetic() {
        assert_eq!(prb(0.60, 0.60).unwrap(), 0.0);
        assert_abs_diff_eq!(prb(0.59, 0.60).unwrap(), -5.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(prb(1.244, 0.60).unwrap(), 107.33333333333333, epsilon = 1e-10);
        assert!(prb(1.0, 0.0).is_err());
    }

    #[test]
    fn b_to_a_conversion() {
        let cfg = SimConfig::balanced(15, vec![0.1, 0.5, 0.9], 10, 1);
        let scenarios = cfg.scenarios().unwrap();
        assert_abs_diff_eq!(scenarios[0].a_true, 9.0, epsilon = 1e-12);
        assert_abs_diff_eq!(scenarios[1].a_true, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(scenarios[2].a_true, 1.0 / 9.0, epsilon = 1e-12);
    }

    #[test]
    fn config_validation_errors() {
        let mut cfg = tiny_config();
        cfg.b_targets = Some(vec![1.5]);
        assert!(cfg.scenarios().is_err());

        let mut cfg = tiny_config();
        cfg.a_true = Some(1.0); // both set
        assert!(cfg.scenarios().is_err());

        let mut cfg = tiny_config();
        cfg.mse_forms = vec!["bogus".into()];
        assert!(run_simulation(&cfg, 1).is_err());

        let mut cfg = tiny_config();
        cfg.variance_methods = vec!["reml".into()];
        cfg.mse_forms = vec!["naive-n".into()];
        assert!(matches!(
            run_simulation(&cfg, 1),
            Err(Error::InvalidConfig(_))
        ));

        // Unbalanced d with b_targets.
        let mut cfg = tiny_config();
        cfg.d = DPattern::PerArea((0..15).map(|i| 1.0 + i as f64 * 0.1).collect());
        assert!(cfg.scenarios().is_err());

        // NRE with too few areas.
        let cfg = SimConfig::balanced(5, vec![0.5], 5, 3);
        assert!(matches!(
            run_simulation(&cfg, 1),
            Err(Error::TooFewAreas { .. })
        ));
    }

    #[test]
    fn single_replicate_run_is_valid() {
        let cfg = SimConfig::balanced(15, vec![0.5], 1, 7);
        let report = run_simulation(&cfg, 1).unwrap();
        assert_eq!(report.replications, 1);
        let s = &report.scenarios[0];
        assert_eq!(s.positivity["nre"].total, 1);
        assert!(s.eblup_empirical_mse["reml"].is_finite());
    }

    #[test]
    fn worker_count_does_not_change_the_report() {
        let cfg = tiny_config();
        let r1 = run_simulation(&cfg, 1).unwrap();
        let r8 = run_simulation(&cfg, 8).unwrap();
        let j1 = serde_json::to_string_pretty(&r1).unwrap();
        let j8 = serde_json::to_string_pretty(&r8).unwrap();
        assert_eq!(j1, j8);
    }

    #[test]
    fn report_tables_have_expected_shape() {
        let cfg = SimConfig::balanced(15, vec![0.3, 0.7], 25, 11);
        let report = run_simulation(&cfg, 2).unwrap();
        let t1 = report.table1_csv();
        let mut lines1 = t1.lines();
        assert_eq!(lines1.next().unwrap(), "method,B=0.3,B=0.7");
        assert_eq!(t1.lines().count(), 3); // header + reml + nre
        let t2 = report.table2_csv();
        assert!(t2.starts_with("scenario,dl,naive,naive-n"));
        assert_eq!(t2.lines().count(), 3); // header + two scenarios
    }

    #[test]
    fn nre_moment_check_positivity_and_trend() {
        let cfg = SimConfig {
            a_true: Some(1.0),
            b_targets: None,
            ..SimConfig::balanced(15, vec![], 300, 515)
        };
        let t = nre_moment_check(&cfg, 0, 4).unwrap();
        assert_eq!(t.positivity_rate, 1.0);
        assert_abs_diff_eq!(t.predicted_bias, 8.0 / 15.0, epsilon = 1e-12);
        assert_abs_diff_eq!(t.predicted_msd, 8.0 / 15.0, epsilon = 1e-12);
        assert!(t.empirical_bias > 0.0);
    }

    #[test]
    fn eblup_mse_respects_blup_floor() {
        // The empirical MSE of EBLUP cannot fall below the known-variance
        // optimum g1 + g2 at the true A, up to Monte Carlo error.
        let cfg = SimConfig::balanced(15, vec![0.5], 500, 9090);
        let report = run_simulation(&cfg, 2).unwrap();
        let s = &report.scenarios[0];
        let template = cfg.template().unwrap();
        let floor: f64 = (0..15)
            .map(|i| {
                let g = g_terms(s.a_true, &template, i).unwrap();
                g.g1 + g.g2
            })
            .sum::<f64>()
            / 15.0;
        for (method, mse) in &s.eblup_empirical_mse {
            assert!(
                *mse > floor * 0.9,
                "{method}: empirical {mse} below BLUP floor {floor}"
            );
        }
    }

    #[test]
    fn general_c_form_runs_in_simulation() {
        let mut cfg = SimConfig::balanced(15, vec![0.5], 10, 21);
        cfg.mse_forms = vec!["dl".into(), "general-c:2".into()];
        cfg.variance_methods = vec!["reml".into()];
        let report = run_simulation(&cfg, 1).unwrap();
        let s = &report.scenarios[0];
        // c = 2 maximizes the same objective as REML but skips the zero
        // floor, so its mean can only differ through floored replicates.
        assert!(s.mean_mse_estimate.contains_key("general-c:2"));
        assert!(s.positivity["general-c:2"].positive >= s.positivity["dl"].positive.min(10));
    }
}
