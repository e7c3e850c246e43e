use mfgcc::fixtures;
use mfgcc::model::ModelSpec;
use serde_json::Value;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn model(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../models").join(format!("{name}.json"))
}

fn mfgcc(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfgcc"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn read_json(path: PathBuf) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn model_files_match_fixtures() {
    for (name, spec) in [
        ("scalar_reference", fixtures::scalar_reference()),
        ("zero_weight", fixtures::zero_weight()),
        ("no_coupling", fixtures::no_coupling()),
        ("coupled", fixtures::coupled()),
        ("stiff", fixtures::stiff()),
    ] {
        let text = std::fs::read_to_string(model(name)).unwrap();
        assert_eq!(ModelSpec::from_json_str(&text).unwrap(), spec, "{name}");
    }
}

#[test]
fn valid_model_validates() {
    let dir = tempfile::tempdir().unwrap();
    let m = model("scalar_reference");
    let o = mfgcc(&["validate", "--model", m.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(dir.path().join("validation.json"));
    assert_eq!(report["content"]["strict_pass"], true);
    assert_eq!(report["seed"], 2024);
    assert_eq!(report["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn zero_control_weight_fails_validation() {
    let dir = tempfile::tempdir().unwrap();
    let m = model("singular_control_weight");
    let o = mfgcc(&["validate", "--model", m.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 1);
    let report = read_json(dir.path().join("validation.json"));
    let violations = report["content"]["violations"].as_array().unwrap();
    assert!(violations.iter().any(|v| v["field"] == "R"), "{violations:?}");
}

#[test]
fn permissive_model_needs_the_override() {
    let dir = tempfile::tempdir().unwrap();
    let m = model("zero_weight");
    let args = ["validate", "--model", m.to_str().unwrap()];
    assert_eq!(code(&mfgcc(&args, dir.path())), 1);
    let o = mfgcc(&[&args[..], &["--allow-permissive"]].concat(), dir.path());
    assert_eq!(code(&o), 0);
}

#[test]
fn missing_model_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = mfgcc(&["validate", "--model", "/nonexistent/model.json"], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"replication": 3}"#).unwrap();
    let m = model("coupled");
    let o = mfgcc(&["validate", "--model", m.to_str().unwrap(), "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn zero_weight_model_settles_immediately() {
    let dir = tempfile::tempdir().unwrap();
    let m = model("zero_weight");
    let o = mfgcc(&["solve-cc", "--model", m.to_str().unwrap(), "--allow-permissive"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let diag = read_json(dir.path().join("diagnostics.json"));
    assert!(diag["content"]["diagnostics"]["iterations"].as_u64().unwrap() <= 2);
    let strategy = std::fs::read_to_string(dir.path().join("strategy.csv")).unwrap();
    assert!(strategy.lines().skip(1).all(|l| l.split(',').nth(2) == Some("0")));
}

#[test]
fn unconstrained_solve_matches_direct_solve() {
    let dir = tempfile::tempdir().unwrap();
    let m = model("scalar_reference");
    let o = mfgcc(&["oracle-check", "--model", m.to_str().unwrap(), "--depth", "7", "--gate"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let diff = read_json(dir.path().join("oracle_diff.json"));
    assert!(diff["content"]["max"].as_f64().unwrap() < 1e-7);
}

#[test]
fn constrained_model_has_no_direct_solve() {
    let dir = tempfile::tempdir().unwrap();
    let m = model("coupled");
    let o = mfgcc(&["oracle-check", "--model", m.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn undamped_picard_on_stiff_model_diverges() {
    let dir = tempfile::tempdir().unwrap();
    let m = model("stiff");
    let args = ["solve-cc", "--model", m.to_str().unwrap(), "--mode", "picard_only", "--damping", "1"];
    let o = mfgcc(&args, dir.path());
    assert_eq!(code(&o), 3);
    let diag = read_json(dir.path().join("diagnostics.json"));
    let history = diag["content"]["residual_history"].as_array().unwrap();
    assert!(history.len() >= 2);
    assert_eq!(read_json(dir.path().join("manifest.json"))["exit_code"], 3);
    // The default adaptive mode handles the same model.
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&mfgcc(&args[..3], dir.path())), 0);
}

#[test]
fn zero_replications_is_an_argument_error() {
    let dir = tempfile::tempdir().unwrap();
    let m = model("coupled");
    let o = mfgcc(&["nash-rates", "--model", m.to_str().unwrap(), "--replications", "0"], dir.path());
    assert_eq!(code(&o), 2);
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"replications": 0}"#).unwrap();
    let o = mfgcc(&["nash-rates", "--model", m.to_str().unwrap(), "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::copy(model("coupled"), dir.path().join("m.json")).unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"model": "m.json", "depth": 4, "agents": 4, "replications": 2, "seed": 9}"#).unwrap();
    let out = dir.path().join("out");
    let o = mfgcc(&["simulate", "--config", cfg.to_str().unwrap(), "--replications", "3"], &out);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = read_json(out.join("manifest.json"));
    assert_eq!(manifest["config"]["replications"], 3);
    assert_eq!(manifest["config"]["depth"], 4);
    assert_eq!(manifest["seed"], 9);
    let costs = std::fs::read_to_string(out.join("agent_costs.csv")).unwrap();
    assert_eq!(costs.lines().count(), 1 + 3 * 4);
}

#[test]
fn reruns_are_byte_identical_and_tagged() {
    let dir = tempfile::tempdir().unwrap();
    let m = model("coupled");
    let args = ["simulate", "--model", m.to_str().unwrap(), "--depth", "5", "--agents", "8", "--replications", "2"];
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&mfgcc(&args, &a)), 0);
    assert_eq!(code(&mfgcc(&[&args[..], &["--threads", "1"]].concat(), &b)), 0);
    let manifest = read_json(a.join("manifest.json"));
    let hash = manifest["config_hash"].as_str().unwrap().to_string();
    for name in manifest["artifacts"].as_array().unwrap() {
        let name = name.as_str().unwrap();
        let (x, y) = (std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap());
        assert_eq!(x, y, "{name} differs between runs");
        if name.ends_with(".csv") {
            let text = String::from_utf8(x).unwrap();
            assert!(text.lines().next().unwrap().ends_with(",config_hash,seed"));
            assert!(text.lines().skip(1).all(|l| l.ends_with(&format!(",{hash},2024"))));
        } else {
            assert_eq!(read_json(a.join(name))["config_hash"], hash.as_str());
        }
    }
}

fn nash_summary(name: &str, out: &Path) -> Value {
    let m = model(name);
    let args = ["nash-rates", "--model", m.to_str().unwrap(), "--depth", "6", "--n-grid", "8,16,32,64", "--replications", "8"];
    let o = mfgcc(&args, out);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    read_json(out.join("summary.json"))
}

#[test]
fn uncoupled_epsilon_sits_at_noise_floor() {
    let dir = tempfile::tempdir().unwrap();
    nash_summary("no_coupling", dir.path());
    let report = std::fs::read_to_string(dir.path().join("nash_report.csv")).unwrap();
    let header: Vec<&str> = report.lines().next().unwrap().split(',').collect();
    let col = |n: &str| header.iter().position(|h| *h == n).unwrap();
    for line in report.lines().skip(1) {
        // The candidate name is quoted and may hold commas; count from the end.
        let fields: Vec<&str> = line.rsplitn(header.len() - col("best_candidate"), ',').collect();
        let from_end = |n: &str| fields[header.len() - 1 - col(n)].parse::<f64>().unwrap();
        assert!(from_end("epsilon") <= 3.0 * from_end("epsilon_se") + 1e-15, "{line}");
    }
}

#[test]
fn coupled_rates_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let summary = nash_summary("coupled", dir.path());
    let fits = &summary["content"]["fits"];
    for name in ["gap_x_avg_slope", "gap_y_avg_slope", "gap_x_indiv_slope", "cost_gap_slope"] {
        assert!(fits[name]["slope"].as_f64().unwrap() < 0.0, "{name}: {fits}");
    }
    assert!(summary["content"]["checks"].as_array().unwrap().len() >= 6);
}
