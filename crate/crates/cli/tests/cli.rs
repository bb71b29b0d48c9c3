use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn fockscan(args: &[&str], config: Option<&str>, dir: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fockscan"));
    cmd.args(args).env_remove("FOCKSCAN_OUT");
    if let Some(text) = config {
        let path = dir.join("config.toml");
        fs::write(&path, text).unwrap();
        cmd.arg("--config").arg(path);
    }
    cmd.output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn without_wall_time(mut manifest: Value) -> Value {
    manifest.as_object_mut().unwrap().remove("wall_time_s");
    manifest
}

const SMALL_SWEEP: &str = "
seed = 11

[protocol]
trials_per_cell = 300

[sweep]
fock_levels = [0, 1]
nbar_grid = [0.05, 0.1]
";

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for (out, threads) in [(&a, "1"), (&b, "3")] {
        let o = fockscan(&["sweep", "--out", out.to_str().unwrap(), "--threads", threads], Some(SMALL_SWEEP), tmp.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for name in ["records.ndjson", "truth.ndjson", "sweep_cells.csv"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let (ma, mb) = (read_json(&a.join("manifest.json")), read_json(&b.join("manifest.json")));
    assert!(ma["wall_time_s"].as_f64().unwrap() >= 0.0);
    assert_eq!(without_wall_time(ma.clone()), without_wall_time(mb));
    assert_eq!(ma["seed"], 11);
    assert_eq!(ma["outputs"].as_array().unwrap().len(), 3);
}

#[test]
fn seed_flag_changes_records_and_hash() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let o = fockscan(&["sweep", "--out", a.to_str().unwrap()], Some(SMALL_SWEEP), tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = fockscan(&["sweep", "--out", b.to_str().unwrap(), "--seed", "12"], Some(SMALL_SWEEP), tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_ne!(fs::read(a.join("records.ndjson")).unwrap(), fs::read(b.join("records.ndjson")).unwrap());
    let (ma, mb) = (read_json(&a.join("manifest.json")), read_json(&b.join("manifest.json")));
    assert_ne!(ma["config_sha256"], mb["config_sha256"]);
    assert_eq!(mb["seed"], 12);
}

#[test]
fn unknown_key_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let o = fockscan(&["validate"], Some("[device]\nt1_s_ms = 1.36\n"), tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("t1_s_ms"), "{}", stderr(&o));
}

#[test]
fn missing_unit_suffix_points_at_the_right_key() {
    let tmp = TempDir::new().unwrap();
    let o = fockscan(&["validate"], Some("[device]\nchi = -0.001285\n"), tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("chi_ghz"), "{}", stderr(&o));
}

#[test]
fn negative_lifetime_names_the_field() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let o = fockscan(&["sweep", "--out", out.to_str().unwrap()], Some("[device]\nt1_s_us = -1360.0\n"), tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("device.t1_s_us"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn malformed_toml_and_bad_flags_exit_2() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(fockscan(&["validate"], Some("[device\n"), tmp.path()).status.code(), Some(2));
    assert_eq!(fockscan(&["frobnicate"], None, tmp.path()).status.code(), Some(2));
    assert_eq!(fockscan(&["run"], None, tmp.path()).status.code(), Some(2));
}

#[test]
fn validate_lists_defaults_with_units_and_origin() {
    let tmp = TempDir::new().unwrap();
    let o = fockscan(&["validate"], Some("[device]\nt1_s_us = 1200.0\n"), tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let line = |path: &str| -> Vec<String> {
        let l = text
            .lines()
            .find(|l| l.split_whitespace().next() == Some(path))
            .unwrap_or_else(|| panic!("{path} not listed"));
        l.split_whitespace().map(str::to_string).collect()
    };
    assert_eq!(line("device.demolition[n=3].p"), ["device.demolition[n=3].p", "0.1", "-", "default"]);
    assert_eq!(line("device.t1_s_us"), ["device.t1_s_us", "1200.0", "us", "override"]);
    assert_eq!(line("device.t1_q_us"), ["device.t1_q_us", "115.0", "us", "default"]);
    assert_eq!(line("device.chi_ghz")[1..], ["-0.001285", "GHz", "default"]);
    assert_eq!(line("physics.volume_cm3")[1..], ["43.13", "cm^3", "default"]);
}

#[test]
fn ideal_detector_has_unit_efficiency() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let config = "
seed = 5

[device]
ideal = true

[protocol]
trials_per_cell = 20000

[sweep]
fock_levels = [0]
";
    let o = fockscan(&["characterize", "--out", out.to_str().unwrap()], Some(config), tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let fits = read_json(&out.join("detector_fits.json"));
    let eta = fits[0]["eta"].as_f64().unwrap();
    assert!((eta - 1.0).abs() < 0.03, "eta {eta}");
    let csv = fs::read_to_string(out.join("detector_points.csv")).unwrap();
    assert!(csv.starts_with("n,nbar,trials,positives,positive_fraction,sigma"));
}

#[test]
fn pinned_limit_reproduces_the_library() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let config = "
pipeline = \"limit\"

[limit]
a0 = 1900.0
sigma_a0 = 9.807e5
monte_carlo_draws = 20000
";
    let o = fockscan(&["run", "--out", out.to_str().unwrap()], Some(config), tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let report = read_json(&out.join("exclusion.json"));
    let expected =
        fockscan::dmlimit::epsilon_from_a0(1900.0, 9.807e5, &fockscan::dmlimit::PhysicsParams::default()).unwrap();
    let got = report["result"]["epsilon_90"].as_f64().unwrap();
    assert!((got / expected.epsilon_90 - 1.0).abs() < 1e-12, "{got} vs {}", expected.epsilon_90);
    assert_eq!(report["a0_source"], "pinned");
    let mc = report["sigma_epsilon_monte_carlo"].as_f64().unwrap();
    assert!((mc / expected.sigma_epsilon - 1.0).abs() < 0.05);
    let duty = report["scan"]["duty_cycle"].as_f64().unwrap();
    assert!((duty - 20.0 / 193.0).abs() < 1e-9);
    let curve = fs::read_to_string(out.join("exclusion_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 122);
}

#[test]
fn background_then_limit_reads_the_dataset() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let config = format!(
        "output_dir = {:?}\n\n[background]\nsource = \"synthetic\"\n\n[limit]\nmonte_carlo_draws = 1000\n",
        out.to_str().unwrap()
    );
    let o = fockscan(&["background"], Some(&config), tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let fit = read_json(&out.join("background_fit.json"));
    let o = fockscan(&["limit"], Some(&config), tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let report = read_json(&out.join("exclusion.json"));
    assert_eq!(report["a0_source"], "fit");
    assert_eq!(report["result"]["a0"], fit["fit"]["a0"]);
}

#[test]
fn limit_without_dataset_is_a_pipeline_failure() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let o = fockscan(&["limit", "--out", out.to_str().unwrap()], None, tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("background"), "{}", stderr(&o));
}

#[test]
fn env_var_sets_the_default_output_dir() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("from-env");
    let o = Command::new(env!("CARGO_BIN_EXE_fockscan"))
        .args(["wigner"])
        .env("FOCKSCAN_OUT", &out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("wigner.csv")).unwrap();
    assert_eq!(csv.lines().count(), 81 * 81 + 1);
}
