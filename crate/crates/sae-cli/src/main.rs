//! `sae`: command-line front end for the small-area estimation toolkit.
//!
//! Subcommands:
//!   fit       fit one dataset: variance estimate, EBLUPs, MSE estimates
//!   simulate  run a seeded Monte Carlo study from a JSON config
//!   validate  check a dataset and the stock adjustment factors
//!
//! Exit codes: 0 success; 1 validation-check failures (`validate`); 2 input
//! or configuration errors; 3 estimator failures; 4 simulations whose
//! replicate failure rate exceeds 1%.

// Guards of the form `!(x > 0.0)` are intentional: they reject NaN along
// with the wrong sign.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sae::{
    blup, eblup, estimate_nre_all, estimate_variance, factor_from_c, factor_yl, mse_estimate,
    validate_factor, AdjustmentFactor, CWeight, ConditionClass, Dataset, EstimateOptions, Error,
    LikelihoodKind, MseForm, SimConfig, VarianceEstimate, VarianceFit, VarianceMethod,
};

#[derive(Parser)]
#[command(name = "sae", version, about = "Small-area estimation toolkit (Fay-Herriot model)")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit a dataset: estimate the model variance, form EBLUPs and MSE
    /// estimates, and write per-area results plus a metadata sidecar.
    Fit {
        /// Input dataset: CSV `area_id,y,d,x1,...,xp` or the JSON equivalent.
        #[arg(long)]
        input: PathBuf,
        /// Variance method: reml | pml | ll | yl | nre | general-c:<value>.
        #[arg(long)]
        method: String,
        /// MSE form: naive | dl | naive-n | general-c:<value>.
        /// naive/dl pair with reml, naive-n with nre, general-c with the
        /// matching general-c method.
        #[arg(long)]
        mse: String,
        /// Output CSV path (sidecar written next to it as <output>.meta.json).
        #[arg(long)]
        output: PathBuf,
        /// Optimizer relative tolerance override.
        #[arg(long)]
        tol: Option<f64>,
        /// Search-bound override for the variance maximization.
        #[arg(long)]
        a_max: Option<f64>,
    },
    /// Run a Monte Carlo study described by a JSON config file.
    Simulate {
        /// SimConfig JSON path.
        #[arg(long)]
        config: PathBuf,
        /// Directory for report.json, table1_mse.csv, table2_prb.csv.
        #[arg(long)]
        output_dir: PathBuf,
        /// Worker threads (default: available parallelism).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Validate a dataset and run the adjustment-factor condition checks.
    Validate {
        /// Input dataset path.
        #[arg(long)]
        input: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Fit {
            input,
            method,
            mse,
            output,
            tol,
            a_max,
        } => cmd_fit(&input, &method, &mse, &output, tol, a_max),
        Cmd::Simulate {
            config,
            output_dir,
            workers,
        } => cmd_simulate(&config, &output_dir, workers),
        Cmd::Validate { input } => cmd_validate(&input),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

/// Map library errors onto the documented exit codes.
fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Parse { .. }
        | Error::RankDeficient(_)
        | Error::NonPositiveSamplingVariance { .. }
        | Error::NonFinite { .. }
        | Error::CovariateLengthMismatch { .. }
        | Error::EmptyDataset
        | Error::InvalidConfig(_)
        | Error::FormEstimatorMismatch(_)
        | Error::MethodDataMismatch(_)
        | Error::DomainError(_) => 2,
        Error::ReplicateFailures { .. } => 4,
        Error::TooFewAreas { .. }
        | Error::NonFiniteObjective { .. }
        | Error::InvalidAdditionalFactor(_)
        | Error::HypothesisViolation { .. }
        | Error::NonFiniteDerivative { .. }
        | Error::AreaIndexOutOfRange { .. }
        | Error::Internal(_) => 3,
    }
}

fn read_to_string(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|e| Error::Parse {
        line: 0,
        msg: format!("cannot read {}: {e}", path.display()),
    })
}

/// FNV-1a 64-bit checksum of the input bytes, reported in the sidecar.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

/// Variance method requested on the command line.
enum CliMethod {
    Named(VarianceMethod),
    PerAreaNre,
    GeneralC(f64),
}

fn parse_method(s: &str) -> Result<CliMethod, Error> {
    match s {
        "reml" => Ok(CliMethod::Named(VarianceMethod::Reml)),
        "pml" => Ok(CliMethod::Named(VarianceMethod::Pml)),
        "ll" => Ok(CliMethod::Named(VarianceMethod::AdjustedLL)),
        "yl" => Ok(CliMethod::Named(VarianceMethod::AdjustedYL)),
        "nre" => Ok(CliMethod::PerAreaNre),
        other => {
            if let Some(v) = other.strip_prefix("general-c:") {
                let c: f64 = v
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("bad general-c value `{v}`")))?;
                Ok(CliMethod::GeneralC(c))
            } else {
                Err(Error::InvalidConfig(format!(
                    "unknown method `{other}` (expected reml|pml|ll|yl|nre|general-c:<v>)"
                )))
            }
        }
    }
}

enum CliForm {
    Naive,
    Dl,
    NaiveN,
    GeneralC(f64),
}

fn parse_form(s: &str) -> Result<CliForm, Error> {
    match s {
        "naive" => Ok(CliForm::Naive),
        "dl" => Ok(CliForm::Dl),
        "naive-n" => Ok(CliForm::NaiveN),
        other => {
            if let Some(v) = other.strip_prefix("general-c:") {
                let c: f64 = v
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("bad general-c value `{v}`")))?;
                Ok(CliForm::GeneralC(c))
            } else {
                Err(Error::InvalidConfig(format!(
                    "unknown MSE form `{other}` (expected naive|dl|naive-n|general-c:<v>)"
                )))
            }
        }
    }
}

fn check_compatibility(method: &str, form: &CliForm) -> Result<(), Error> {
    let needed = match form {
        CliForm::Naive | CliForm::Dl => "reml".to_string(),
        CliForm::NaiveN => "nre".to_string(),
        CliForm::GeneralC(v) => format!("general-c:{v}"),
    };
    if method == needed {
        Ok(())
    } else {
        Err(Error::FormEstimatorMismatch(format!(
            "--mse requires --method {needed}, got {method}"
        )))
    }
}

/// Per-area estimates for a general-c fit, one maximization per distinct D_i.
fn general_c_estimates(
    data: &Dataset,
    c: f64,
    opts: &EstimateOptions,
) -> Result<(Vec<VarianceEstimate>, AdjustmentFactor), Error> {
    let yl = factor_yl(data);
    let mut by_d: Vec<(u64, AdjustmentFactor, VarianceEstimate)> = Vec::new();
    let mut ests = Vec::with_capacity(data.m());
    for i in 0..data.m() {
        let key = data.area(i).d.to_bits();
        let est = match by_d.iter().find(|(k, _, _)| *k == key) {
            Some((_, _, e)) => e.clone(),
            None => {
                let factor = factor_from_c(&CWeight::Constant(c), data.area(i).d, &yl)?;
                let e = estimate_variance(
                    data,
                    VarianceMethod::Custom {
                        factor: factor.clone(),
                        kind: LikelihoodKind::ResidualML,
                    },
                    opts,
                )?;
                by_d.push((key, factor, e.clone()));
                e
            }
        };
        ests.push(est);
    }
    Ok((ests, by_d[0].1.clone()))
}

fn cmd_fit(
    input: &Path,
    method_str: &str,
    mse_str: &str,
    output: &Path,
    tol: Option<f64>,
    a_max: Option<f64>,
) -> Result<ExitCode, Error> {
    let method = parse_method(method_str)?;
    let form = parse_form(mse_str)?;
    check_compatibility(method_str, &form)?;
    if let Some(t) = tol {
        if !(t > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "--tol must be positive, got {t}"
            )));
        }
    }
    if let Some(a) = a_max {
        if !(a > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "--a-max must be positive, got {a}"
            )));
        }
    }

    let text = read_to_string(input)?;
    let checksum = fnv1a64(text.as_bytes());
    let data = sae::io::read_dataset(&input.to_string_lossy(), &text)?;
    let opts = EstimateOptions {
        a_max,
        tol,
        allow_small_m: false,
    };

    let (fit, mse_form): (VarianceFit, MseForm) = match (&method, &form) {
        (CliMethod::Named(m), CliForm::Naive) => (
            VarianceFit::Pooled(estimate_variance(&data, m.clone(), &opts)?),
            MseForm::NaivePlugin,
        ),
        (CliMethod::Named(m), CliForm::Dl) => (
            VarianceFit::Pooled(estimate_variance(&data, m.clone(), &opts)?),
            MseForm::DattaLahiri,
        ),
        (CliMethod::PerAreaNre, CliForm::NaiveN) => (
            VarianceFit::PerArea(estimate_nre_all(&data, &opts)?),
            MseForm::NaiveNre,
        ),
        (CliMethod::GeneralC(v), CliForm::GeneralC(_)) => {
            let (ests, factor) = general_c_estimates(&data, *v, &opts)?;
            (
                VarianceFit::PerArea(ests),
                MseForm::GeneralC {
                    c: CWeight::Constant(*v),
                    factor,
                },
            )
        }
        // check_compatibility makes these unreachable.
        _ => unreachable!("method/form compatibility already verified"),
    };

    let pred = eblup(&data, &fit)?;
    let mse = mse_estimate(&data, &mse_form, &fit)?;

    // Per-area CSV; floats use shortest round-trip formatting.
    let mut csv = String::from("area_id,y,theta_hat,b_hat,a_used,mse_hat\n");
    for i in 0..data.m() {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            pred.area_ids[i],
            data.area(i).y,
            pred.theta_hat[i],
            pred.b_hat[i],
            pred.a_used[i],
            mse.values[i]
        ));
    }
    write_file(output, &csv)?;

    // Metadata sidecar (the one place timestamps are allowed).
    let estimates_json: Vec<serde_json::Value> = match &fit {
        VarianceFit::Pooled(e) => vec![estimate_json(None, e)],
        VarianceFit::PerArea(v) => v
            .iter()
            .enumerate()
            .map(|(i, e)| estimate_json(Some(pred.area_ids[i].as_str()), e))
            .collect(),
    };
    let mut warnings = Vec::new();
    if let Some(w) = data.leverage_warning() {
        warnings.push(w);
    }
    if data.xtx_condition() > sae::model::CONDITION_WARN {
        warnings.push(format!(
            "design matrix condition estimate {:.3e} exceeds 1e12",
            data.xtx_condition()
        ));
    }
    let meta = serde_json::json!({
        "tool": "sae",
        "tool_version": sae::VERSION,
        "input": input.to_string_lossy(),
        "input_checksum_fnv1a64": format!("{checksum:016x}"),
        "method": method_str,
        "mse_form": mse_str,
        "tol": tol,
        "a_max": a_max,
        "m": data.m(),
        "p": data.p(),
        "estimates": estimates_json,
        "warnings": warnings,
        "unix_timestamp_seconds": std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    });
    write_file(&sidecar_path(output), &format!("{meta:#}\n"))?;

    println!(
        "fit: {} areas, method {method_str}, mse {mse_str} -> {}",
        data.m(),
        output.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn estimate_json(area_id: Option<&str>, e: &VarianceEstimate) -> serde_json::Value {
    serde_json::json!({
        "area_id": area_id,
        "method": e.method.label(),
        "a_hat": e.a_hat,
        "at_lower_boundary": e.at_lower_boundary,
        "at_upper_boundary": e.at_upper_boundary,
        "objective_at_max": e.objective_at_max,
        "evaluations": e.evaluations,
        "a_max": e.a_max,
    })
}

fn sidecar_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_os_string();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn write_file(path: &Path, contents: &str) -> Result<(), Error> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::Parse {
                line: 0,
                msg: format!("cannot create {}: {e}", parent.display()),
            })?;
        }
    }
    fs::write(path, contents).map_err(|e| Error::Parse {
        line: 0,
        msg: format!("cannot write {}: {e}", path.display()),
    })
}

fn cmd_simulate(
    config_path: &Path,
    output_dir: &Path,
    workers: Option<usize>,
) -> Result<ExitCode, Error> {
    let text = read_to_string(config_path)?;
    let mut config: SimConfig = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", config_path.display())))?;
    if let Ok(seed) = std::env::var("SAE_SEED") {
        let parsed: u64 = seed.parse().map_err(|_| {
            Error::InvalidConfig(format!("SAE_SEED must be an unsigned integer, got `{seed}`"))
        })?;
        config.seed = parsed;
    }
    let workers = workers.unwrap_or_else(|| {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    });

    let report = sae::run_simulation(&config, workers)?;

    let json =
        serde_json::to_string_pretty(&report).map_err(|e| Error::Internal(e.to_string()))?;
    write_file(&output_dir.join("report.json"), &format!("{json}\n"))?;
    write_file(&output_dir.join("table1_mse.csv"), &report.table1_csv())?;
    write_file(&output_dir.join("table2_prb.csv"), &report.table2_csv())?;

    print!("{}", report.summary());
    println!("wrote {}", output_dir.join("report.json").display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_validate(input: &Path) -> Result<ExitCode, Error> {
    let text = read_to_string(input)?;
    let data = sae::io::read_dataset(&input.to_string_lossy(), &text)?;
    println!(
        "dataset ok: m = {}, p = {}, X'X condition estimate {:.3e}",
        data.m(),
        data.p(),
        data.xtx_condition()
    );
    let mut all_pass = true;
    if let Some(w) = data.leverage_warning() {
        println!("warning: {w}");
    }

    let grid = sae::default_grid();
    let checks: Vec<(&str, AdjustmentFactor, ConditionClass)> = vec![
        ("ll (A1)", sae::factor_ll(), ConditionClass::A1),
        ("yl (A2)", factor_yl(&data), ConditionClass::A2),
        ("yl (A3)", factor_yl(&data), ConditionClass::A3),
        (
            "nre[first area] (A1)",
            sae::factor_nre(0, &data, &factor_yl(&data))?,
            ConditionClass::A1,
        ),
    ];
    for (name, factor, class) in checks {
        let report = validate_factor(&factor, &grid, class)?;
        if report.pass() {
            println!(
                "{name}: pass (sup |log L| = {:.3e}, sup |dlogL/dA| = {:.3e})",
                report.max_abs_log_h, report.max_abs_derivative
            );
        } else {
            all_pass = false;
            println!("{name}: FAIL ({})", report.failure_summary());
        }
    }

    // Exercise one prediction to surface numeric problems early.
    let _ = blup(&data, 1.0)?;

    if all_pass {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(1))
    }
}
