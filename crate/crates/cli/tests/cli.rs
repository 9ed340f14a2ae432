use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_equichk"))
}

fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn run(config: &Path, out: &Path) -> Output {
    bin()
        .args(["run", config.to_str().unwrap(), "--output-dir", out.to_str().unwrap()])
        .output()
        .unwrap()
}

fn run_with_threads(config: &Path, out: &Path, threads: &str) -> Output {
    bin()
        .env("EQUICHK_THREADS", threads)
        .args(["run", config.to_str().unwrap(), "--output-dir", out.to_str().unwrap()])
        .output()
        .unwrap()
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn reports(dir: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(dir.join("reports.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn version_prints_the_crate_version() {
    let out = bin().arg("version").output().unwrap();
    assert!(out.status.success());
    assert_eq!(
        String::from_utf8(out.stdout).unwrap().trim(),
        format!("equichk {}", env!("CARGO_PKG_VERSION"))
    );
}

#[test]
fn catalog_text_json_and_filter() {
    let out = bin().arg("catalog").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("check_first_order ⇠ first-order identity"));
    assert!(text.contains("homogeneous_relu_mlp") && text.contains("softmax_cross_entropy"));

    let out = bin().args(["catalog", "--json"]).output().unwrap();
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["transforms"].as_array().unwrap().len(), 11);

    let out = bin().args(["catalog", "--json", "--transform", "mirror"]).output().unwrap();
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let transforms = v["transforms"].as_array().unwrap();
    assert_eq!(transforms.len(), 1);
    assert_eq!(transforms[0]["name"], "mirror");
    for c in v["checks"].as_array().unwrap() {
        assert!(c["transforms"].as_array().unwrap().iter().any(|t| t == "mirror"));
    }

    let out = bin().args(["catalog", "--transform", "rotation"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn full_suite_passes_and_covers_every_family() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&bundled("suite_full.json"), tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = std::fs::read_to_string(tmp.path().join("summary.csv")).unwrap();
    for name in [
        "first_order",
        "second_action",
        "second_quadratic",
        "certificate_d2H_dtheta2",
        "homogeneity_action",
        "homogeneity_quadratic",
        "homogeneity_action_multiplied",
        "eigen_alignment",
        "gradient_in_column_space",
        "sharpness_bound",
        "discrete_first",
        "discrete_second",
        "mirror_gradient",
        "mirror_hessian",
        "last_layer_alignment",
        "last_layer_variance",
    ] {
        assert!(summary.contains(&format!(",{name},")), "missing {name}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["failed"], 0);
    assert!(manifest["config_digest"].as_str().unwrap().starts_with("sha256:"));
    assert_eq!(manifest["files"].as_array().unwrap().len(), 3);
}

#[test]
fn mutation_fails_exactly_the_mutated_transform() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&bundled("suite_mutation.json"), tmp.path());
    assert_eq!(out.status.code(), Some(1));
    let all = reports(tmp.path());
    let mutated = |r: &serde_json::Value| {
        r["context"]["transform"]
            .as_str()
            .is_some_and(|t| t.starts_with("layer_rescaling["))
    };
    assert!(all.iter().any(|r| r["pass"] == false));
    for r in &all {
        if r["pass"] == false {
            assert!(mutated(r), "unexpected failure {r}");
        } else if !mutated(r) {
            assert_eq!(r["pass"], true);
        }
    }
}

#[test]
fn unknown_model_is_a_config_error_with_field_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "bad.json",
        r#"{
  "experiment": "check_suite",
  "model": {"architecture": {"kind": "transformer", "layers": 2}},
  "loss": {"family": "square", "target": [0.0]}
}"#,
    );
    let out = run(&cfg, &tmp.path().join("out"));
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("model.architecture") && err.contains("line 3"), "{err}");
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn unknown_keys_and_bad_numbers_are_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "a.json", r#"{"experiment": "check_suite", "catalog": true, "positons": 2}"#);
    let out = run(&cfg, &tmp.path().join("out"));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("positons"));

    let cfg = write_config(
        tmp.path(),
        "b.json",
        r#"{
  "experiment": "flow",
  "model": {"architecture": {"kind": "linear_probe", "n": 2}, "input": [1.0, 2.0]},
  "loss": {"family": "square", "target": [0.0]},
  "dynamics": {"T": 1.0, "dt": -0.1}
}"#,
    );
    let out = run(&cfg, &tmp.path().join("out"));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("dynamics.dt"));

    let out = run(&tmp.path().join("missing.json"), &tmp.path().join("out"));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn numerical_blow_up_is_a_runtime_fault() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "blowup.json",
        r#"{
  "experiment": "flow",
  "model": {"architecture": {"kind": "exp_probe", "n": 2}, "input": [1.0, 1.0]},
  "loss": {"family": "square", "target": [0.0]},
  "dynamics": {"T": 1.0, "dt": 0.1, "initial": [400.0, 400.0]}
}"#,
    );
    let out = run(&cfg, &tmp.path().join("out"));
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn dynamics_configs_pass() {
    for name in ["flow_rescaling.json", "flow_norm_growth.json", "stationary.json"] {
        let tmp = tempfile::tempdir().unwrap();
        let out = run(&bundled(name), tmp.path());
        assert_eq!(out.status.code(), Some(0), "{name}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(tmp.path().join("trajectory_flow.csv").exists());
    }
}

fn same_files(a: &Path, b: &Path, names: &[&str]) {
    for n in names {
        let x = std::fs::read(a.join(n)).unwrap();
        let y = std::fs::read(b.join(n)).unwrap();
        assert!(x == y, "{n} differs between runs");
    }
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(run(&bundled("flow_rescaling.json"), &a).status.code(), Some(0));
    assert_eq!(run(&bundled("flow_rescaling.json"), &b).status.code(), Some(0));
    same_files(&a, &b, &["reports.jsonl", "summary.csv", "trajectory_flow.csv", "trajectory_descent.csv"]);
    let digest = |d: &Path| -> serde_json::Value {
        serde_json::from_str::<serde_json::Value>(&std::fs::read_to_string(d.join("manifest.json")).unwrap()).unwrap()
            ["config_digest"]
            .clone()
    };
    assert_eq!(digest(&a), digest(&b));
}

#[test]
fn ensembles_do_not_depend_on_thread_count() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "sgf.json",
        r#"{
  "experiment": "sgf_drift",
  "model": {"architecture": {"kind": "deep_linear", "widths": [1, 1, 1]}, "input": [1.0]},
  "loss": {"family": "square", "target": [0.0]},
  "transforms": [{"name": "layer_rescaling", "block1": "W1", "block2": "W2"}],
  "dataset": {"samples": [{"input": [1.0], "target": [1.0]}, {"input": [1.0], "target": [-1.0]}], "weights": [0.5, 0.5]},
  "seeds": [7],
  "dynamics": {"T": 0.05, "dt": 0.001, "sigma": 0.1, "ensemble": 120, "initial": [1.0, 0.0]}
}"#,
    );
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let oa = run_with_threads(&cfg, &a, "1");
    let ob = run_with_threads(&cfg, &b, "4");
    assert!(matches!(oa.status.code(), Some(0 | 1)), "{}", String::from_utf8_lossy(&oa.stderr));
    assert_eq!(oa.status.code(), ob.status.code());
    same_files(&a, &b, &["reports.jsonl", "summary.csv", "ensemble.json", "ensemble_mean.csv"]);

    let out = run_with_threads(&cfg, &tmp.path().join("c"), "zero");
    assert_eq!(out.status.code(), Some(2));
}
