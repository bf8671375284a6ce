use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn sensi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sensi"))
        .args(args)
        .env_remove("SENSI_THREADS")
        .output()
        .expect("run sensi")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

/// Twelve strata of sizes two and three with a clear effect on `y1`.
fn dataset(dir: &Path) -> PathBuf {
    let mut text = String::from("stratum,treated,y1,y2\n");
    for i in 0..12 {
        let n = if i % 3 == 0 { 3 } else { 2 };
        for j in 0..n {
            let t = usize::from(j == 0);
            let y1 = 1.5 * t as f64 + ((i * 7 + j * 3) % 5) as f64 * 0.3;
            let y2 = 0.2 * t as f64 + ((i * 5 + j * 11) % 7) as f64 * 0.25;
            text.push_str(&format!("s{i},{t},{y1},{y2}\n"));
        }
    }
    let path = dir.join("d.csv");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn analyze_at_gamma_one_reports_uniform_moments() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dataset(dir.path());
    let out = sensi(&[
        "analyze",
        csv.to_str().unwrap(),
        "--outcomes",
        "y1,y2",
        "--stat",
        "aligned-rank",
        "--gamma",
        "1",
        "--alpha",
        "0.05",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = json(&out);
    assert_eq!(r["design"]["strata"], 12);
    assert_eq!(r["design"]["members"], 28);
    assert_eq!(r["input"]["sha256"].as_str().unwrap().len(), 64);
    for o in r["gamma_one"].as_array().unwrap() {
        let d = (o["t_obs"].as_f64().unwrap() - o["mean"].as_f64().unwrap()) / o["variance"].as_f64().unwrap().sqrt();
        assert!((d - o["deviate"].as_f64().unwrap()).abs() < 1e-12);
        // 2^8 * 3^4 assignments, within the default enumeration cap
        assert!(o["exact_p_value"].as_f64().is_some());
    }
    let rows = r["decisions"].as_array().unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["minimax"]["certificate"], "singleton");
}

#[test]
fn gamma_search_brackets_the_minimax_changepoint() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dataset(dir.path());
    let out = sensi(&[
        "analyze",
        csv.to_str().unwrap(),
        "--outcomes",
        "y1,y2",
        "--gamma-search",
        "--method",
        "minimax",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = json(&out);
    let cps = r["changepoints"].as_array().unwrap();
    assert_eq!(cps.len(), 1);
    assert_eq!(cps[0]["method"], "minimax:overall");
    let g = cps[0]["gamma_star"].as_f64().unwrap();
    assert!(g > 1.0);
    assert!(cps[0]["bracket"].as_f64().unwrap() <= 1e-3);
    assert!(r["decisions"][0]["separate"].is_null());

    // the decision just below and above the changepoint flips
    let below = format!("{}", g - 2e-3);
    let above = format!("{}", g + 2e-3);
    let out = sensi(&[
        "analyze",
        csv.to_str().unwrap(),
        "--outcomes",
        "y1,y2",
        "--gamma",
        &format!("{below},{above}"),
        "--method",
        "minimax",
    ]);
    let r = json(&out);
    assert_eq!(r["decisions"][0]["minimax"]["reject"], true);
    assert_eq!(r["decisions"][1]["minimax"]["reject"], false);
}

#[test]
fn default_grid_and_table_export() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dataset(dir.path());
    let table = dir.path().join("t.csv");
    let out = sensi(&[
        "analyze",
        csv.to_str().unwrap(),
        "--outcomes",
        "y1,y2",
        "--table-csv",
        table.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = json(&out);
    let gammas: Vec<f64> = r["decisions"]
        .as_array()
        .unwrap()
        .iter()
        .map(|d| d["gamma"].as_f64().unwrap())
        .collect();
    assert_eq!(gammas, vec![1.0, 1.25, 1.5, 1.75, 2.0]);
    let text = std::fs::read_to_string(table).unwrap();
    assert!(text.starts_with("gamma,method,target,reject,value\n"));
    // per Gamma: overall + 2 separate, 1 minimax, 2 closed testing
    assert_eq!(text.lines().count(), 1 + 5 * 6);
}

#[test]
fn closed_testing_never_loses_to_holm() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dataset(dir.path());
    let out = sensi(&["analyze", csv.to_str().unwrap(), "--outcomes", "y1,y2", "--gamma-grid", "1:3:0.5"]);
    let r = json(&out);
    for row in r["decisions"].as_array().unwrap() {
        let holm = row["separate"]["holm_reject"].as_array().unwrap();
        let closed = row["closed_testing"]["reject"].as_array().unwrap();
        for (h, c) in holm.iter().zip(closed) {
            assert!(!h.as_bool().unwrap() || c.as_bool().unwrap());
        }
        if row["separate"]["bonferroni_overall"] == true {
            assert_eq!(row["minimax"]["reject"], true);
        }
    }
}

#[test]
fn reports_are_reproducible_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dataset(dir.path());
    let run = |threads: &str| {
        sensi(&[
            "--threads",
            threads,
            "analyze",
            csv.to_str().unwrap(),
            "--outcomes",
            "y1,y2",
            "--gamma-search",
        ])
        .stdout
    };
    let a = run("1");
    assert!(!a.is_empty());
    assert_eq!(a, run("1"));
    assert_eq!(a, run("3"));
}

#[test]
fn malformed_treated_column_exits_with_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "stratum,treated,y1\na,1,0.5\na,maybe,0.1\nb,1,0.2\nb,0,0.3\n").unwrap();
    let out = sensi(&["analyze", path.to_str().unwrap(), "--outcomes", "y1"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3") && err.contains("treated"), "{err}");
}

#[test]
fn bad_flags_exit_with_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dataset(dir.path());
    let csv = csv.to_str().unwrap();
    for extra in [
        vec!["--gamma-grid", "2:1:0.5"],
        vec!["--alt", "sideways"],
        vec!["--null", "additive:x"],
        vec!["--stat", "mean,aligned-rank,signed-rank"],
        vec!["--alpha", "1.5"],
    ] {
        let mut args = vec!["analyze", csv, "--outcomes", "y1,y2"];
        args.extend(extra.iter());
        assert_eq!(sensi(&args).status.code(), Some(2), "{extra:?}");
    }
    assert_eq!(sensi(&["analyze", "/nonexistent.csv", "--outcomes", "y1"]).status.code(), Some(2));
}

#[test]
fn additive_null_shifts_the_statistic() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dataset(dir.path());
    let t = |null: &str| {
        let out = sensi(&[
            "analyze",
            csv.to_str().unwrap(),
            "--outcomes",
            "y1",
            "--stat",
            "mean-difference",
            "--gamma",
            "1",
            "--null",
            null,
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        json(&out)["gamma_one"][0]["deviate"].as_f64().unwrap()
    };
    assert!(t("additive:1.5").abs() < t("sharp").abs());
}

#[test]
fn unknown_preset_exits_with_input_error() {
    let out = sensi(&["simulate", "--preset", "table9-t1-s1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn single_replicate_flags_degenerate_errors() {
    let out = sensi(&["simulate", "--preset", "table1-t2-s1", "--reps", "1", "--seed", "7"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = json(&out);
    assert_eq!(r["se_degenerate"], true);
    assert_eq!(r["completed"], 1);
}

#[test]
fn simulation_output_is_byte_identical_for_a_seed() {
    let args = ["simulate", "--preset", "appc-s1", "--reps", "8", "--seed", "11", "--format", "csv"];
    let a = sensi(&args);
    assert!(a.status.success());
    assert_eq!(a.stdout, sensi(&args).stdout);
    let other = sensi(&["simulate", "--preset", "appc-s1", "--reps", "8", "--seed", "12", "--format", "csv"]);
    assert_ne!(a.stdout, other.stdout);
}

#[test]
fn scenario_file_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.txt");
    std::fs::write(&path, "# two outcomes\ntau = 0.5, 0\npairs = 40\ngammas = 1, 1.5\nreps = 4\n").unwrap();
    let out = sensi(&["simulate", "--scenario", path.to_str().unwrap(), "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = json(&out);
    assert_eq!(r["scenario"]["seed"], 3);
    assert_eq!(r["completed"], 4);
}

#[test]
fn oracle_check_with_no_instances_passes_with_warning() {
    let out = sensi(&["oracle-check", "--instances", "0"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("vacuous"));
    assert_eq!(json(&out)["checked"], 0);
}

#[test]
fn oracle_check_small_run_passes() {
    let out = sensi(&["oracle-check", "--instances", "6", "--n-max", "6", "--seed", "4"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = json(&out);
    assert_eq!(r["pass"], true);
    assert!(r["worst_gap"].as_f64().unwrap() <= 1e-4);
}

#[test]
fn oracle_check_rejects_large_instances() {
    assert_eq!(sensi(&["oracle-check", "--n-max", "9"]).status.code(), Some(2));
}

#[test]
fn oracle_check_failure_exits_with_one() {
    // a tolerance no solver can meet against a grid search
    let out = sensi(&["oracle-check", "--instances", "3", "--n-max", "6", "--no-opposed", "--tol", "1e-300", "--resolution", "3", "--refine", "0"]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn implied_probability_fixture() {
    let out = sensi(&["implied", "--u", "0.953,0.391", "--gamma", "10"]);
    assert!(out.status.success());
    let p = json(&out)["probabilities"][1].as_f64().unwrap();
    assert!((p - 0.215).abs() < 0.005);
}

#[test]
fn replay_reproduces_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dataset(dir.path());
    let report = dir.path().join("r.json");
    let out = sensi(&[
        "analyze",
        csv.to_str().unwrap(),
        "--outcomes",
        "y1,y2",
        "--alt",
        "greater,two-sided",
        "--gamma",
        "1,1.3,1.7",
        "--gamma-search",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let replay = sensi(&["analyze", csv.to_str().unwrap(), "--replay", report.to_str().unwrap()]);
    assert!(replay.status.success(), "{}", String::from_utf8_lossy(&replay.stderr));
    assert_eq!(std::fs::read(&report).unwrap(), replay.stdout);

    // a changed input no longer matches the recorded hash
    let mut text = std::fs::read_to_string(&csv).unwrap();
    text.push_str("s99,1,0,0\ns99,0,1,1\n");
    std::fs::write(&csv, text).unwrap();
    let stale = sensi(&["analyze", csv.to_str().unwrap(), "--replay", report.to_str().unwrap()]);
    assert_eq!(stale.status.code(), Some(2));
}
