use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn fewtreat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fewtreat"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("valid JSON")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const DATA: &str = "unit,y,d\nA,5,1\nB,1,0\nC,2,0\nD,0.5,0\nE,1.5,0\nF,-0.3,0\nG,0.9,0\n";

#[test]
fn permutation_test_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(dir.path(), "d.csv", DATA);
    let args = [
        "test", "--method", "perm", "--null", "0", "--input", &input, "--seed", "7", "--budget",
        "3",
    ];
    let a = fewtreat(&args);
    let b = fewtreat(&args);
    assert_eq!(a.stdout, b.stdout);
    let v = json(&a);
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["seed"], 7);
    assert_eq!(v["method"], "permutation/monte_carlo");
    for key in ["statistic", "p_value", "reject", "valid_under"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert_eq!(v["config"]["budget"], 3);
}

#[test]
fn realized_and_prediction_intervals_share_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(dir.path(), "d.csv", DATA);
    let run = |interp: &str| {
        json(&fewtreat(&[
            "interval",
            "--method",
            "quantile",
            "--level",
            "0.95",
            "--interpretation",
            interp,
            "--input",
            &input,
        ]))
    };
    let p = run("prediction");
    let r = run("realized");
    assert_eq!(p["intervals"], r["intervals"]);
    assert_ne!(p["valid_under"], r["valid_under"]);
    assert_eq!(r["interpretation"], "realized_effect_ci");
}

#[test]
fn inverted_quantile_tests_match_interval() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(dir.path(), "d.csv", DATA);
    let closed = json(&fewtreat(&[
        "interval", "--method", "quantile", "--input", &input,
    ]));
    let inverted = json(&fewtreat(&[
        "invert", "--method", "quantile", "--input", &input,
    ]));
    let tol = inverted["refine_tol"].as_f64().unwrap();
    let a = closed["intervals"][0].as_array().unwrap();
    let b = inverted["intervals"][0].as_array().unwrap();
    for k in 0..2 {
        assert!((a[k].as_f64().unwrap() - b[k].as_f64().unwrap()).abs() <= tol);
    }
}

#[test]
fn scale_model_uses_covariates() {
    let dir = tempfile::tempdir().unwrap();
    let text = "x,unit,d,y\n1.5,t1,1,4\n1.2,t2,1,3\n3,c1,0,0.2\n10,c2,0,-0.4\n25,c3,0,0.1\n40,c4,0,0.3\n5,c5,0,-1.1\n";
    let input = write(dir.path(), "x.csv", text);
    let v = json(&fewtreat(&[
        "interval", "--method", "ferman", "--input", &input,
    ]));
    assert_eq!(v["valid_under"][0], "scale_model");
    let no_x = write(dir.path(), "d.csv", DATA);
    assert_eq!(
        fewtreat(&["interval", "--method", "ferman", "--input", &no_x])
            .status
            .code(),
        Some(3)
    );
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = write(dir.path(), "d.csv", DATA);
    let no_d = write(dir.path(), "nod.csv", "unit,y\nA,1\nB,2\n");
    let bad_num = write(dir.path(), "bad.csv", "unit,y,d\nA,1,1\nB,x,0\n");
    let code = |args: &[&str]| fewtreat(args).status.code();

    assert_eq!(
        code(&["test", "--method", "ct", "--null", "0", "--input", &good]),
        Some(0)
    );
    let out = fewtreat(&["test", "--method", "ct", "--null", "0", "--input", &no_d]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing column \"d\""));
    let out = fewtreat(&["test", "--method", "ct", "--null", "0", "--input", &bad_num]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));

    assert_eq!(code(&["test", "--method", "ct", "--input", &good]), Some(2));
    assert_eq!(
        code(&["test", "--method", "ct", "--null", "0", "--level", "1.5", "--input", &good]),
        Some(2)
    );
    assert_eq!(
        code(&["interval", "--method", "perm", "--input", &good]),
        Some(2)
    );
    assert_eq!(code(&["simulate", "--dgp", "nonexistent"]), Some(2));
    assert_eq!(
        code(&[
            "simulate",
            "--dgp",
            "iid_normal",
            "--method",
            "ferman",
            "--reps",
            "5"
        ]),
        Some(2)
    );
    assert_eq!(
        code(&["simulate", "--dgp", "iid_normal", "--param", "tau"]),
        Some(2)
    );
    assert_eq!(code(&["frobnicate"]), Some(2));
}

#[test]
fn output_flag_writes_file() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(dir.path(), "d.csv", DATA);
    let out_path = dir.path().join("out.json");
    let out = fewtreat(&[
        "test",
        "--method",
        "quantile",
        "--null",
        "1",
        "--input",
        &input,
        "--output",
        out_path.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    let v: Value = serde_json::from_slice(&std::fs::read(&out_path).unwrap()).unwrap();
    assert_eq!(v["config"]["method"], "quantile");
    assert_eq!(v["config"]["null_c"].as_f64(), Some(1.0));
}

#[test]
fn appendix_a_simulation_coverage() {
    let v = json(&fewtreat(&[
        "simulate",
        "--dgp",
        "appendix_a",
        "--reps",
        "100000",
        "--level",
        "0.95",
    ]));
    let cov = v["unconditional_coverage"].as_f64().unwrap();
    assert!((cov - 0.95).abs() <= 0.005, "{cov}");
    assert_eq!(v["stratification"], "exact_satt");
    assert_eq!(v["config"]["replications"], 100000);
}

#[test]
fn unequal_variance_demo_reports_both_intervals() {
    let v = json(&fewtreat(&[
        "simulate",
        "--dgp",
        "unequal_variance_demo",
        "--reps",
        "300",
        "--budget",
        "2000",
    ]));
    assert_eq!(v["config"]["method"]["name"], "welch_t");
    assert_eq!(v["companion"]["config"]["method"]["name"], "quantile");
    assert_eq!(v["stratification"], "alpha_pattern");
}

#[test]
fn decompose_rows_add_up() {
    let v = json(&fewtreat(&[
        "decompose",
        "--dgp",
        "weather_mixture",
        "--reps",
        "5",
        "--seed",
        "3",
    ]));
    for row in v["rows"].as_array().unwrap() {
        let f = |k: &str| row[k].as_f64().unwrap();
        let total = f("heterogeneity") + f("treated_noise") + f("control_noise");
        assert!((total - (f("beta_dm") - f("att"))).abs() < 1e-10);
    }
    assert_eq!(
        fewtreat(&["decompose", "--dgp", "weather_mixture", "--input", "x.csv"])
            .status
            .code(),
        Some(2)
    );
}
