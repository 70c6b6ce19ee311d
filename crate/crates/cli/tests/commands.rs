use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ene_core::io::{load_gains, load_solution};

fn ene(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ene"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn help_documents_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ene(dir.path(), &["--help"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    for line in ["0  success", "1  configuration", "2  nominal solve", "3  gain", "4  a check"] {
        assert!(text.contains(line), "missing '{line}' in help");
    }
}

#[test]
fn solve_then_gains_writes_loadable_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = ene(dir.path(), &["solve", "--out", "o"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let solution = load_solution(&dir.path().join("o/nominal.json")).unwrap();
    assert!(solution.is_optimal);
    assert!(solution.kkt_norm <= 1e-6);

    let out = ene(dir.path(), &["gains", "--out", "o"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let gains = load_gains(&dir.path().join("o/gains.json")).unwrap();
    assert_eq!(gains.horizon(), 35);
}

#[test]
fn repeated_solve_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&ene(dir.path(), &["solve", "--out", "a", "--seed", "3"])), 0);
    assert_eq!(code(&ene(dir.path(), &["solve", "--out", "b", "--seed", "3"])), 0);
    let a = fs::read(dir.path().join("a/nominal.json")).unwrap();
    let b = fs::read(dir.path().join("b/nominal.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_horizon_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "[scenario]\nhorizon = 0\n").unwrap();
    let out = ene(dir.path(), &["solve", "--config", "c.toml"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("horizon"));
}

#[test]
fn unknown_config_key_reports_location() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "seed = 2\n[scenario]\nhorizn = 3\n").unwrap();
    let out = ene(dir.path(), &["run", "--config", "c.toml"]);
    assert_eq!(code(&out), 1);
    let err = stderr(&out);
    assert!(err.contains("horizn") && err.contains("line 3"), "{err}");
}

#[test]
fn print_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = ene(dir.path(), &["--print-config", "--scenario", "large"]);
    assert_eq!(code(&out), 0);
    fs::write(dir.path().join("c.toml"), &out.stdout).unwrap();
    let again = ene(dir.path(), &["--print-config", "--config", "c.toml"]);
    assert_eq!(out.stdout, again.stdout);
    assert!(String::from_utf8_lossy(&out.stdout).contains("dx0 = [0.2, 0.2, 0.2, 0.2]"));
}

#[test]
fn corrupted_solution_reports_parse_location() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&ene(dir.path(), &["solve", "--out", "o"])), 0);
    let text = fs::read_to_string(dir.path().join("o/nominal.json")).unwrap();
    fs::write(dir.path().join("bad.json"), &text[..text.len() / 2]).unwrap();
    let out = ene(dir.path(), &["gains", "--solution", "bad.json", "--out", "o"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("line"), "{}", stderr(&out));
}

#[test]
fn indefinite_second_variation_exits_with_the_failing_step() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&ene(dir.path(), &["solve", "--out", "o"])), 0);
    let mut doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("o/nominal.json")).unwrap()).unwrap();
    // Inflating the velocities makes the costate-weighted curvature dominate.
    for state in doc["solution"]["trajectory"]["x"].as_array_mut().unwrap() {
        let data = state[0].as_array_mut().unwrap();
        for i in [1, 3] {
            let v = data[i].as_f64().unwrap();
            data[i] = serde_json::json!(v * 100.0);
        }
    }
    fs::write(dir.path().join("odd.json"), doc.to_string()).unwrap();
    let out = ene(dir.path(), &["gains", "--solution", "odd.json", "--out", "o"]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("step"), "{}", stderr(&out));
}

#[test]
fn run_all_controllers_writes_every_result_set() {
    let dir = tempfile::tempdir().unwrap();
    let out = ene(dir.path(), &["run", "--scenario", "small", "--controllers", "all", "--out", "o"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let o = dir.path().join("o");
    for name in ["olnmpc", "clnmpc", "ne", "ene", "mne", "mene"] {
        let csv = fs::read_to_string(o.join(format!("small_{name}.csv"))).unwrap();
        assert!(csv.starts_with("k,x0,x1,x2,x3,u0,w0,w1,w2,w3,c0,c1\n"));
        assert_eq!(csv.lines().count(), 1 + 36);
        let summary: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(o.join(format!("small_{name}_summary.json"))).unwrap()).unwrap();
        assert_eq!(summary["completed"], true);
    }
    let table: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(o.join("small_comparison.json")).unwrap()).unwrap();
    assert_eq!(table["rows"].as_array().unwrap().len(), 6);
    assert!(o.join("small_comparison.md").exists());
}

#[test]
fn run_json_format_writes_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let out = ene(dir.path(), &["run", "--controllers", "ene", "--format", "json", "--out", "o"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("o/small_ene.json")).unwrap()).unwrap();
    assert_eq!(doc["x"].as_array().unwrap().len(), 36);
}

#[test]
fn unknown_controller_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = ene(dir.path(), &["run", "--controllers", "ene,lqg"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("lqg"));
}

#[test]
fn preview_sweep_reports_both_models() {
    let dir = tempfile::tempdir().unwrap();
    let out = ene(dir.path(), &["run", "--preview-sweep", "--out", "o"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("o/preview-sweep_sweep.json")).unwrap()).unwrap();
    let entries = report["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 2);
    for e in entries {
        assert!(e["mene"]["failed"].is_null());
        assert!(e["mene"]["violations"].as_array().unwrap().is_empty());
    }
}

#[test]
fn check_passes_on_a_clean_build() {
    let dir = tempfile::tempdir().unwrap();
    let out = ene(dir.path(), &["check"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn check_fails_loudly_with_a_bad_difference_step() {
    let dir = tempfile::tempdir().unwrap();
    let out = ene(dir.path(), &["check", "--fd-step", "1.0"]);
    assert_eq!(code(&out), 4);
    assert!(stderr(&out).contains("derivative"), "{}", stderr(&out));
}
