use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde_json::Value;

fn sor(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sor")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = sor(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn demo(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("demo").join(name).display().to_string()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p: PathBuf = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

/// Poisson counts for 150 subjects with a subject-level auxiliary flag.
fn toy_csv() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut s = String::from("id,time,y,z,x\n");
    for i in 0..150 {
        let x = f64::from(u8::from(rng.random_bool(0.4)));
        let z = u8::from(rng.random_bool(0.3));
        for t in 0..4 {
            let y = Poisson::new((0.2 + 0.3 * x - 0.1 * f64::from(t)).exp()).unwrap().sample(&mut rng);
            writeln!(s, "s{i},{t},{y},{z},{x}").unwrap();
        }
    }
    s
}

fn estimates(doc: &Value, fit: usize) -> Vec<f64> {
    doc["fits"][fit]["estimates"].as_array().unwrap().iter().map(|e| e["estimate"].as_f64().unwrap()).collect()
}

#[test]
fn version_prints_name_and_version() {
    assert_eq!(ok(&["version"]).trim(), format!("sor {}", env!("CARGO_PKG_VERSION")));
}

#[test]
fn toy_file_fits_and_bad_rows_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let good = write(dir.path(), "toy.csv", "id,time,y,z,x\na,1,0,1,0\na,2,2,1,0\nb,1,1,0,1\nb,2,3,0,1\nc,1,0,0,0\nc,2,1,0,0\n");
    let doc: Value = serde_json::from_str(&ok(&["fit", "--family", "poisson", "--data", &good, "--mean", "1,x", "--estimator", "naive"])).unwrap();
    assert_eq!(doc["input"]["n_subjects"], 3);
    assert_eq!(doc["input"]["n_obs"], 6);

    let bad = write(dir.path(), "bad.csv", "id,time,y,z,x\na,1,0,1,0\na,2,2,2,0\n");
    let out = sor(&["fit", "--family", "poisson", "--data", &bad, "--mean", "1,x", "--estimator", "naive"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("row 3"), "{err}");
}

#[test]
fn unit_ratio_sor_agrees_with_naive() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "toy.csv", &toy_csv());
    let common = ["fit", "--family", "poisson", "--data", &data, "--mean", "1,x,time", "--w1", "1,x", "--ratio", "*=1"];
    let sor_doc: Value = serde_json::from_str(&ok(&[&common[..], &["--estimator", "sor"]].concat())).unwrap();
    let naive_doc: Value = serde_json::from_str(&ok(&[&common[..], &["--estimator", "naive"]].concat())).unwrap();
    let (a, b) = (estimates(&sor_doc, 0), estimates(&naive_doc, 0));
    assert_eq!(a.len(), 3);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-8, "{x} vs {y}");
    }
}

#[test]
fn exp_flag_adds_exponentiated_columns() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "toy.csv", &toy_csv());
    let csv_path = dir.path().join("est.csv").display().to_string();
    let doc: Value = serde_json::from_str(&ok(&[
        "fit", "--family", "poisson", "--data", &data, "--mean", "1,x", "--estimator", "naive", "--exp", "--estimates-csv", &csv_path,
    ]))
    .unwrap();
    for e in doc["fits"][0]["estimates"].as_array().unwrap() {
        let est = e["estimate"].as_f64().unwrap();
        assert!((e["exp_estimate"].as_f64().unwrap() - est.exp()).abs() < 1e-12 * est.exp());
        let se = e["se"].as_f64().unwrap();
        assert!((e["exp_ci_upper"].as_f64().unwrap() - (est + 1.96 * se).exp()).abs() < 1e-12);
    }
    let table = std::fs::read_to_string(csv_path).unwrap();
    let mut lines = table.lines();
    assert!(lines.next().unwrap().ends_with("exp_estimate,exp_ci_lower,exp_ci_upper"));
    assert_eq!(lines.count(), 2);
}

#[test]
fn ratio_sweep_matches_single_runs() {
    let data = demo("adhd_analog.csv");
    let config = demo("adhd_analog.json");
    let sweep: Value = serde_json::from_str(&ok(&["fit", "--config", &config, "--data", &data, "--ratio-scale", "0.5,1,2"])).unwrap();
    assert_eq!(sweep["fits"].as_array().unwrap().len(), 3);
    for (k, c) in [0.5, 1.0, 2.0].into_iter().enumerate() {
        assert_eq!(sweep["fits"][k]["ratio_scale"].as_f64(), Some(c));
        let ratio = format!("1={:?};0={:?}", 22.619 * c, 6.67 * c);
        let single: Value = serde_json::from_str(&ok(&["fit", "--config", &config, "--data", &data, "--ratio", &ratio])).unwrap();
        let (a, b) = (estimates(&sweep, k), estimates(&single, 0));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "scale {c}: {x} vs {y}");
        }
    }
}

#[test]
fn echoed_config_reproduces_the_fit() {
    let dir = tempfile::tempdir().unwrap();
    let data = demo("hormone_analog.csv");
    let first: Value = serde_json::from_str(&ok(&["fit", "--config", &demo("hormone_analog.json"), "--data", &data, "--y0", "1.25"])).unwrap();
    let echo = write(dir.path(), "echo.json", &serde_json::to_string_pretty(&first["config"]).unwrap());
    let second: Value = serde_json::from_str(&ok(&["fit", "--config", &echo, "--data", &data])).unwrap();
    assert_eq!(first["fits"], second["fits"]);
    assert_eq!(first["config"], second["config"]);
}

#[test]
fn demo_fits_converge() {
    let doc: Value = serde_json::from_str(&ok(&["fit", "--config", &demo("adhd_analog.json"), "--data", &demo("adhd_analog.csv")])).unwrap();
    let fit = &doc["fits"][0];
    assert_eq!(fit["convergence"]["converged"], true);
    let names: Vec<&str> = fit["estimates"].as_array().unwrap().iter().map(|e| e["name"].as_str().unwrap()).collect();
    assert_eq!(names.len(), 9);
    assert!(fit["alpha"].as_f64().unwrap() > 0.0);
    assert!(fit["estimates"].as_array().unwrap().iter().all(|e| e["se"].as_f64().unwrap() > 0.0));

    let doc: Value = serde_json::from_str(&ok(&["fit", "--config", &demo("hormone_analog.json"), "--data", &demo("hormone_analog.csv")])).unwrap();
    assert_eq!(doc["fits"][0]["convergence"]["converged"], true);
    assert!(doc["fits"][0]["phi"].as_f64().unwrap() > 0.0);
}

#[test]
fn simulate_is_byte_reproducible() {
    let args = ["simulate", "--preset", "table1_p15", "--replicates", "2", "--seed", "1"];
    let a = ok(&args);
    let b = ok(&args);
    assert_eq!(a, b);
    assert!(a.lines().count() > 1);
}

#[test]
fn unknown_preset_lists_the_available_ones() {
    let out = sor(&["simulate", "--preset", "nope"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("table1_p15") && err.contains("table4_r40"), "{err}");
}
