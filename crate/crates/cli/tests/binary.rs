use std::path::Path;
use std::process::{Command, Output};

fn dkmlmc(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dkmlmc"))
        .args(args)
        .current_dir(cwd)
        .env_remove("DKMLMC_OUTPUT_DIR")
        .output()
        .expect("spawn dkmlmc")
}

const BASE: &str = r#"
d = 2
n0 = 8
tau0 = 0.256
coupling = "nn"
n_particles = 1e8
horizon = 1.024
psi = "square"
phi = "sinsum"
density = "reg"
seed = 11
"#;

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr line");
    serde_json::from_str(line).expect("json error object")
}

#[test]
fn invalid_config_exits_with_code_2_and_json() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bad.toml", "kind = \"mlmc\"\nd = 2\n");
    let out = dkmlmc(&[&cfg], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "config");
    let v = err["violations"].as_array().unwrap();
    assert!(v.iter().any(|s| s.as_str().unwrap().contains("seed")));
}

#[test]
fn cfl_violation_exits_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!("kind = \"mfl\"\nl_max = 1\n{}", BASE.replace("tau0 = 0.256", "tau0 = 1.024"));
    let cfg = write(tmp.path(), "cfl.toml", &body);
    let out = dkmlmc(&[&cfg], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_json(&out)["message"].as_str().unwrap().contains("CFL"));
}

#[test]
fn missing_file_exits_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dkmlmc(&["nope.toml"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn check_prints_normalized_config() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!("kind = \"mfl\"\nl_max = 1\n{BASE}");
    let cfg = write(tmp.path(), "mfl.toml", &body);
    let out = dkmlmc(&[&cfg, "--check", "--workers", "2"], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["workers"], 2);
    assert_eq!(v["b1"], 1.0);
    let out = dkmlmc(&[&cfg, "--check", "--workers", "0"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn selftest_and_mfl_runs_write_results() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!("kind = \"noise-selftest\"\nl_max = 1\n{BASE}");
    let cfg = write(tmp.path(), "st.toml", &body);
    let out = dkmlmc(&[&cfg, "--output-dir", "st"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("st/selftest.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")));

    let body = format!("kind = \"mfl\"\nl_max = 1\noutput_dir = \"m\"\n{BASE}");
    let cfg = write(tmp.path(), "mfl.toml", &body);
    let out = dkmlmc(&[&cfg], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("m/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["format"], "dkmlmc-summary");
    assert_eq!(summary["complete"], true);
    assert!((summary["results"]["final_mass"].as_f64().unwrap() - 1.0).abs() < 1e-3);

    // a summary is accepted as a configuration
    let out = dkmlmc(&["m/summary.json", "--output-dir", "m2"], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    let a = std::fs::read(tmp.path().join("m/mfl.csv")).unwrap();
    let b = std::fs::read(tmp.path().join("m2/mfl.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn output_is_independent_of_worker_count() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!("kind = \"convergence-table\"\nl_max = 2\nsamples = [40, 30, 20]\n{BASE}");
    let cfg = write(tmp.path(), "ct.toml", &body);
    for (w, dir) in [("1", "w1"), ("3", "w3")] {
        let out = dkmlmc(&[&cfg, "--workers", w, "--output-dir", dir], tmp.path());
        assert_eq!(out.status.code(), Some(0));
    }
    for f in ["convergence.csv", "summary.json"] {
        let a = std::fs::read_to_string(tmp.path().join("w1").join(f)).unwrap();
        let b = std::fs::read_to_string(tmp.path().join("w3").join(f)).unwrap();
        if f == "summary.json" {
            // the config echo records the worker count
            let mut a: serde_json::Value = serde_json::from_str(&a).unwrap();
            let mut b: serde_json::Value = serde_json::from_str(&b).unwrap();
            for v in [&mut a, &mut b] {
                v["config"]["workers"] = 0.into();
                v["config"]["output_dir"] = "".into();
            }
            assert_eq!(a, b);
        } else {
            assert_eq!(a, b);
        }
    }
}
