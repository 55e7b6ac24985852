//! End-to-end tests of the `sae` binary: exit codes, file outputs, and the
//! determinism contracts.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_sae")
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("sae-cli-{tag}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(bin());
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

/// 15 balanced areas, intercept-only, deterministic pseudo-random responses.
fn write_balanced_csv(path: &Path, m: usize) {
    let mut s = 0xfeedu64;
    let mut text = String::from("area_id,y,d,x1\n");
    for i in 0..m {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let y = ((s >> 11) as f64) / (1u64 << 53) as f64 * 6.0 - 3.0;
        text.push_str(&format!("area{i},{y},1,1\n"));
    }
    fs::write(path, text).unwrap();
}

#[test]
fn fit_reml_dl_end_to_end() {
    let dir = temp_dir("fit-reml");
    let input = dir.join("areas.csv");
    write_balanced_csv(&input, 15);
    let output = dir.join("fit.csv");

    let out = run(
        &[
            "fit",
            "--input",
            input.to_str().unwrap(),
            "--method",
            "reml",
            "--mse",
            "dl",
            "--output",
            output.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let text = fs::read_to_string(&output).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "area_id,y,theta_hat,b_hat,a_used,mse_hat");
    assert_eq!(lines.len(), 16);

    // Pooled method: a_used constant across areas, MSE strictly positive.
    let mut a_used = Vec::new();
    for line in &lines[1..] {
        let fields: Vec<&str> = line.split(',').collect();
        a_used.push(fields[4].to_string());
        let mse: f64 = fields[5].parse().unwrap();
        assert!(mse > 0.0);
        let b: f64 = fields[3].parse().unwrap();
        assert!(b > 0.0 && b <= 1.0);
    }
    assert!(a_used.iter().all(|a| a == &a_used[0]));

    // Sidecar metadata.
    let sidecar = fs::read_to_string(dir.join("fit.csv.meta.json")).unwrap();
    let meta: serde_json::Value = serde_json::from_str(&sidecar).unwrap();
    assert_eq!(meta["method"], "reml");
    assert_eq!(meta["mse_form"], "dl");
    assert_eq!(meta["m"], 15);
    assert_eq!(meta["estimates"].as_array().unwrap().len(), 1);

    // Re-running reproduces the main output byte for byte.
    let out2 = run(
        &[
            "fit",
            "--input",
            input.to_str().unwrap(),
            "--method",
            "reml",
            "--mse",
            "dl",
            "--output",
            output.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code(&out2), 0);
    assert_eq!(fs::read_to_string(&output).unwrap(), text);
}

#[test]
fn fit_nre_writes_per_area_estimates() {
    let dir = temp_dir("fit-nre");
    let input = dir.join("areas.csv");
    write_balanced_csv(&input, 15);
    let output = dir.join("fit.csv");
    let out = run(
        &[
            "fit",
            "--input",
            input.to_str().unwrap(),
            "--method",
            "nre",
            "--mse",
            "naive-n",
            "--output",
            output.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let sidecar = fs::read_to_string(dir.join("fit.csv.meta.json")).unwrap();
    let meta: serde_json::Value = serde_json::from_str(&sidecar).unwrap();
    assert_eq!(meta["estimates"].as_array().unwrap().len(), 15);
    for e in meta["estimates"].as_array().unwrap() {
        assert!(e["a_hat"].as_f64().unwrap() > 0.0);
    }
}

#[test]
fn fit_nre_too_few_areas_exits_3() {
    let dir = temp_dir("fit-nre-small");
    let input = dir.join("areas.csv");
    write_balanced_csv(&input, 5);
    let out = run(
        &[
            "fit",
            "--input",
            input.to_str().unwrap(),
            "--method",
            "nre",
            "--mse",
            "naive-n",
            "--output",
            dir.join("fit.csv").to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("more than 5 areas"));
}

#[test]
fn fit_incompatible_form_exits_2() {
    let dir = temp_dir("fit-mismatch");
    let input = dir.join("areas.csv");
    write_balanced_csv(&input, 15);
    for (method, mse) in [("nre", "dl"), ("reml", "naive-n"), ("general-c:1", "general-c:0.5")] {
        let out = run(
            &[
                "fit",
                "--input",
                input.to_str().unwrap(),
                "--method",
                method,
                "--mse",
                mse,
                "--output",
                dir.join("fit.csv").to_str().unwrap(),
            ],
            &[],
        );
        assert_eq!(code(&out), 2, "{method}/{mse}");
    }
}

#[test]
fn fit_general_c_end_to_end() {
    let dir = temp_dir("fit-generalc");
    let input = dir.join("areas.csv");
    write_balanced_csv(&input, 15);
    let output = dir.join("fit.csv");
    let out = run(
        &[
            "fit",
            "--input",
            input.to_str().unwrap(),
            "--method",
            "general-c:1",
            "--mse",
            "general-c:1",
            "--output",
            output.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&output).unwrap();
    assert_eq!(text.lines().count(), 16);
}

#[test]
fn fit_bad_input_exits_2_with_line_number() {
    let dir = temp_dir("fit-bad");
    let input = dir.join("areas.csv");
    fs::write(&input, "area_id,y,d,x1\na1,1.0,1.0,1\na2,zzz,1.0,1\n").unwrap();
    let out = run(
        &[
            "fit",
            "--input",
            input.to_str().unwrap(),
            "--method",
            "reml",
            "--mse",
            "dl",
            "--output",
            dir.join("fit.csv").to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

fn small_config(dir: &Path, seed: u64) -> PathBuf {
    let path = dir.join("config.json");
    let cfg = format!(
        r#"{{
  "m": 15,
  "b_targets": [0.5],
  "replications": 30,
  "seed": {seed}
}}"#
    );
    fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn simulate_is_worker_count_invariant() {
    let dir = temp_dir("sim");
    let config = small_config(&dir, 7);
    let out1 = dir.join("run1");
    let out2 = dir.join("run2");
    let r1 = run(
        &[
            "simulate",
            "--config",
            config.to_str().unwrap(),
            "--output-dir",
            out1.to_str().unwrap(),
            "--workers",
            "1",
        ],
        &[],
    );
    assert_eq!(code(&r1), 0, "stderr: {}", String::from_utf8_lossy(&r1.stderr));
    let r2 = run(
        &[
            "simulate",
            "--config",
            config.to_str().unwrap(),
            "--output-dir",
            out2.to_str().unwrap(),
            "--workers",
            "8",
        ],
        &[],
    );
    assert_eq!(code(&r2), 0);

    for name in ["report.json", "table1_mse.csv", "table2_prb.csv"] {
        let a = fs::read(out1.join(name)).unwrap();
        let b = fs::read(out2.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between worker counts");
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out1.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["replications"], 30);
    assert!(report["scenarios"][0]["prb"]["naive-n"].is_number());
}

#[test]
fn simulate_seed_env_override() {
    let dir = temp_dir("sim-seed");
    let config = small_config(&dir, 7);
    let out_default = dir.join("default");
    let out_env = dir.join("env");
    assert_eq!(
        code(&run(
            &[
                "simulate",
                "--config",
                config.to_str().unwrap(),
                "--output-dir",
                out_default.to_str().unwrap(),
            ],
            &[],
        )),
        0
    );
    assert_eq!(
        code(&run(
            &[
                "simulate",
                "--config",
                config.to_str().unwrap(),
                "--output-dir",
                out_env.to_str().unwrap(),
            ],
            &[("SAE_SEED", "99")],
        )),
        0
    );
    let a = fs::read_to_string(out_default.join("report.json")).unwrap();
    let b = fs::read_to_string(out_env.join("report.json")).unwrap();
    assert_ne!(a, b, "SAE_SEED must change the stream");
    let report: serde_json::Value = serde_json::from_str(&b).unwrap();
    assert_eq!(report["seed"], 99);
}

#[test]
fn simulate_bad_config_exits_2() {
    let dir = temp_dir("sim-bad");
    let config = dir.join("config.json");
    fs::write(&config, r#"{"m": 15, "seed": 1}"#).unwrap(); // no a_true/b_targets
    let out = run(
        &[
            "simulate",
            "--config",
            config.to_str().unwrap(),
            "--output-dir",
            dir.join("out").to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn validate_reports_conditions() {
    let dir = temp_dir("validate");
    let input = dir.join("areas.csv");
    write_balanced_csv(&input, 15);
    let out = run(&["validate", "--input", input.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("dataset ok: m = 15, p = 1"));
    assert!(stdout.contains("ll (A1): pass"));
    assert!(stdout.contains("yl (A3): pass"));

    // Collinear design: validation failure, exit 2.
    let bad = dir.join("bad.csv");
    fs::write(&bad, "area_id,y,d,x1,x2\na,1,1,1,2\nb,2,1,2,4\nc,3,1,3,6\n").unwrap();
    let out = run(&["validate", "--input", bad.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 2);
}
