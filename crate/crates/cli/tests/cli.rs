//! End-to-end tests of the `fme` binary: exit codes, file formats, and the
//! determinism contract of the Monte Carlo command.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fme_core::io::FitFile;

fn fme(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fme"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(path: &Path, contents: &str) {
    fs::write(path, contents).unwrap();
}

const RANK_ONE_PANEL: &str = "a,b\n1,1\n-1,-1\n";

#[test]
fn estimate_pc_on_rank_one_panel() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("panel.csv");
    let output = dir.path().join("fit.json");
    write(&input, RANK_ONE_PANEL);
    let out = fme(&[
        "estimate",
        "--input",
        input.to_str().unwrap(),
        "--r",
        "1",
        "--method",
        "pc",
        "--output",
        output.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let fit = FitFile::read_json(fs::File::open(&output).unwrap()).unwrap();
    assert_eq!(fit.method, "pc");
    assert!((fit.loadings[0][0] - 1.0).abs() < 1e-10);
    assert!((fit.loadings[1][0] - 1.0).abs() < 1e-10);
}

#[test]
fn missing_input_exits_2_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let output = dir.path().join("fit.json");
    let out = fme(&[
        "estimate",
        "--input",
        dir.path().join("nope.csv").to_str().unwrap(),
        "--r",
        "1",
        "--method",
        "pc",
        "--output",
        output.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!output.exists());
}

#[test]
fn degenerate_panel_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("panel.csv");
    write(&input, "a,b,c\n0,0,0\n0,0,0\n0,0,0\n");
    let out = fme(&[
        "estimate",
        "--input",
        input.to_str().unwrap(),
        "--r",
        "1",
        "--method",
        "pc",
        "--output",
        dir.path().join("fit.json").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn unparseable_panel_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("panel.csv");
    write(&input, "a,b\n1.0,huh\n2.0,3.0\n");
    let out = fme(&[
        "estimate",
        "--input",
        input.to_str().unwrap(),
        "--r",
        "1",
        "--method",
        "pc",
        "--output",
        dir.path().join("fit.json").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

/// A fixed 6-series panel with some texture, T = 12.
fn demo_panel() -> String {
    let mut s = String::from("s1,s2,s3,s4,s5,s6\n");
    for t in 0..12 {
        let f = (t as f64 * 0.7).sin() + 0.3 * (t as f64 * 0.23).cos();
        let row: Vec<String> = (0..6)
            .map(|i| {
                let load = 1.0 + 0.2 * i as f64;
                let noise = ((t * 6 + i) as f64 * 2.39996).sin() * 0.4;
                format!("{}", load * f + noise)
            })
            .collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

#[test]
fn estimate_qml_then_factors_and_se_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("panel.csv");
    let fit_path = dir.path().join("fit.json");
    write(&input, &demo_panel());
    let out = fme(&[
        "estimate",
        "--input",
        input.to_str().unwrap(),
        "--r",
        "1",
        "--method",
        "qml",
        "--em-max-iter",
        "20000",
        "--output",
        fit_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let fit = FitFile::read_json(fs::File::open(&fit_path).unwrap()).unwrap();
    assert_eq!(fit.method, "qml_em");
    assert!(fit.diagnostics.converged);

    let factors_out = dir.path().join("factors.csv");
    let out = fme(&[
        "factors",
        "--fit",
        fit_path.to_str().unwrap(),
        "--estimator",
        "lp",
        "--input",
        input.to_str().unwrap(),
        "--output",
        factors_out.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&factors_out).unwrap();
    assert_eq!(text.lines().count(), 13); // header + T rows

    let se_out = dir.path().join("se.csv");
    let out = fme(&[
        "se",
        "--fit",
        fit_path.to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--bandwidth",
        "0",
        "--level",
        "0.95",
        "--output",
        se_out.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&se_out).unwrap();
    assert_eq!(text.lines().count(), 7); // header + n rows (r = 1)
    assert!(text.starts_with("series,column,estimate,std_error,lower,upper"));
}

/// With unit idiosyncratic variances in the fit, GLS and OLS factor
/// recovery agree byte for byte.
#[test]
fn gls_equals_ols_for_unit_variance_fit() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("panel.csv");
    write(&input, &demo_panel());
    let fit_path = dir.path().join("fit.json");
    let fit_json = serde_json::json!({
        "r": 1,
        "method": "pc",
        "loadings": [[1.0], [1.2], [1.4], [1.6], [1.8], [2.0]],
        "idio_variances": [1.0, 1.0, 1.0, 1.0, 1.0, 1.0],
        "factors": [[0.0], [0.0], [0.0], [0.0], [0.0], [0.0],
                    [0.0], [0.0], [0.0], [0.0], [0.0], [0.0]],
        "diagnostics": {
            "loglik_trace": [], "iterations": 0, "converged": true,
            "foc_residual": null, "eigengap_warning": false,
            "rotation_applied": false, "near_tie_warning": false,
            "min_implied_idio_eigenvalue": null
        }
    });
    write(&fit_path, &fit_json.to_string());
    let mut outputs = Vec::new();
    for estimator in ["ols", "gls"] {
        let path = dir.path().join(format!("{estimator}.csv"));
        let out = fme(&[
            "factors",
            "--fit",
            fit_path.to_str().unwrap(),
            "--estimator",
            estimator,
            "--input",
            input.to_str().unwrap(),
            "--output",
            path.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        outputs.push(fs::read(&path).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn se_ci_matches_hand_formula_on_stored_fit() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("panel.csv");
    write(&input, &demo_panel());
    let fit_path = dir.path().join("fit.json");
    fme(&[
        "estimate",
        "--input",
        input.to_str().unwrap(),
        "--r",
        "1",
        "--method",
        "pc",
        "--output",
        fit_path.to_str().unwrap(),
    ]);
    let out = fme(&[
        "se",
        "--fit",
        fit_path.to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--bandwidth",
        "0",
        "--level",
        "0.95",
    ]);
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();

    // Oracle: recompute the k = 0 HAC term and the half-width for series 1.
    let (names, panel) = fme_core::io::read_panel_csv(demo_panel().as_bytes()).unwrap();
    let fit = FitFile::read_json(fs::File::open(&fit_path).unwrap())
        .unwrap()
        .into_fit(&panel)
        .unwrap();
    let t = panel.n_periods() as f64;
    let mut phi = 0.0;
    for trow in 0..panel.n_periods() {
        let f = fit.factors[(trow, 0)];
        let e = fit.residuals[(trow, 0)];
        phi += f * f * e * e;
    }
    phi /= t;
    let half = 1.959963985 * (phi / t).sqrt();
    let first_data_line = stdout.lines().nth(1).unwrap();
    let fields: Vec<&str> = first_data_line.split(',').collect();
    assert_eq!(fields[0], names[0]);
    let lower: f64 = fields[4].parse().unwrap();
    let upper: f64 = fields[5].parse().unwrap();
    assert!(((upper - lower) / 2.0 - half).abs() <= 1e-6 * half.max(1e-12));
}

#[test]
fn estimator_fit_mismatch_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("panel.csv");
    let other = dir.path().join("other.csv");
    write(&input, &demo_panel());
    write(&other, RANK_ONE_PANEL);
    let fit_path = dir.path().join("fit.json");
    fme(&[
        "estimate",
        "--input",
        input.to_str().unwrap(),
        "--r",
        "1",
        "--method",
        "pc",
        "--output",
        fit_path.to_str().unwrap(),
    ]);
    let out = fme(&[
        "factors",
        "--fit",
        fit_path.to_str().unwrap(),
        "--estimator",
        "ols",
        "--input",
        other.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn se_level_out_of_range_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("panel.csv");
    write(&input, &demo_panel());
    let fit_path = dir.path().join("fit.json");
    fme(&[
        "estimate",
        "--input",
        input.to_str().unwrap(),
        "--r",
        "1",
        "--method",
        "pc",
        "--output",
        fit_path.to_str().unwrap(),
    ]);
    let out = fme(&[
        "se",
        "--fit",
        fit_path.to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--level",
        "1.5",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

const DGP_JSON: &str = r#"{
    "n": 8, "t": 30, "r": 2,
    "tau": 0.0, "delta": 0.0,
    "distribution": "gaussian",
    "seed": 11
}"#;

#[test]
fn simulate_is_deterministic_and_writes_truth() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("dgp.json");
    write(&config, DGP_JSON);
    let mut panels = Vec::new();
    for run in 0..2 {
        let panel = dir.path().join(format!("panel{run}.csv"));
        let truth = dir.path().join(format!("truth{run}.json"));
        let out = fme(&[
            "simulate",
            "--config",
            config.to_str().unwrap(),
            "--output",
            panel.to_str().unwrap(),
            "--truth",
            truth.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        panels.push(fs::read(&panel).unwrap());
        let truth = fme_core::io::TruthFile::read_json(fs::File::open(&truth).unwrap()).unwrap();
        assert_eq!(truth.loadings.len(), 8);
        assert_eq!(truth.factors.len(), 30);
    }
    assert_eq!(panels[0], panels[1]);
}

#[test]
fn simulate_invalid_config_exits_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("dgp.json");
    write(
        &config,
        r#"{"n": 8, "t": 30, "r": 2, "tau": 1.5, "delta": 0.0, "seed": 1}"#,
    );
    let out = fme(&[
        "simulate",
        "--config",
        config.to_str().unwrap(),
        "--output",
        dir.path().join("p.csv").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("tau"), "stderr was: {stderr}");
}

#[test]
fn mc_is_byte_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("mc.json");
    write(
        &config,
        r#"{
            "grid": [
                {"n": 8, "t": 30, "r": 2, "tau": 0.0, "delta": 0.0,
                 "distribution": "gaussian", "seed": 0}
            ],
            "replications": 4,
            "master_seed": 99
        }"#,
    );
    let mut outputs = Vec::new();
    let mut tables = Vec::new();
    for threads in ["1", "8"] {
        let out_path = dir.path().join(format!("table{threads}.csv"));
        let out = fme(&[
            "mc",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out_path.to_str().unwrap(),
            "--threads",
            threads,
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        outputs.push(fs::read(&out_path).unwrap());
        tables.push(out.stdout);
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(tables[0], tables[1]);
}

#[test]
fn mc_single_rep_fixed_seed_runs() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("mc.json");
    write(
        &config,
        r#"{
            "grid": [
                {"n": 6, "t": 25, "r": 1, "tau": 0.0, "delta": 0.0,
                 "distribution": "gaussian", "seed": 0}
            ],
            "replications": 1,
            "master_seed": 7
        }"#,
    );
    let out_path = dir.path().join("table.csv");
    let out = fme(&[
        "mc",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_path.to_str().unwrap(),
        "--reps",
        "1",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&out_path).unwrap();
    assert!(text.lines().count() > 1);
    assert!(text.starts_with("n,t,r,tau,delta,distribution,metric,column,value"));
}
