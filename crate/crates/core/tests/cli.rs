use std::path::Path;
use std::process::{Command, Output};

fn stcf(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stcf")).args(args).current_dir(cwd).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const FAST: [&str; 10] = [
    "--benchmark",
    "--set",
    "intensity.backend=kernel",
    "--set",
    "propensity.epochs=2",
    "--set",
    "estimator.counterfactual_samples=100",
    "--set",
    "truth_replications=30",
    "--set=resolution=20",
];

#[test]
fn simulate_fit_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&stcf(&["simulate", "--length", "6", "--resolution", "20", "--seed", "3", "--out", "data"], d));
    assert!(d.join("data").is_dir());
    let mut fit = vec!["fit", "--dataset", "data", "--out", "fits"];
    fit.extend(FAST);
    ok(&stcf(&fit, d));
    assert!(d.join("fits/lambda1.json").exists());
    let mut est = vec!["estimate", "--dataset", "data", "--fits", "fits", "--duration", "2", "--magnitude", "4", "--truth"];
    est.extend(FAST);
    let out = stcf(&est, d);
    let stdout = ok(&out);
    assert!(stdout.starts_with("t,weight,integral,estimate\n"));
    assert_eq!(stdout.lines().filter(|l| !l.starts_with('#')).count(), 1 + 5);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("estimate") && stderr.contains("ground truth"), "{stderr}");
}

#[test]
fn grid_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut grid = vec!["grid", "--out", "res", "--set", "lengths=[6]", "--set", "runs=2", "--set", "durations=[1]"];
    grid.extend(FAST);
    grid.extend(["--set", "magnitudes=[3.0]"]);
    let stdout = ok(&stcf(&grid, d));
    assert!(stdout.contains("results written to res"));
    assert!(d.join("res/results.csv").exists());
    // criteria settings are absent, so every check is skipped and report succeeds
    let report = ok(&stcf(&["report", "res"], d));
    assert!(report.contains("[SKIP]"));
    assert!(!report.contains("[FAIL]"));
}

#[test]
fn report_fails_on_a_failing_check() {
    let dir = tempfile::tempdir().unwrap();
    let csv = "T,M,c,kernel_mode,method,n_runs,mean,std,mean_rer,std_rer\n32,1,3,exponential,ipw,20,10,1,0.9,0.1\n";
    std::fs::write(dir.path().join("results.csv"), csv).unwrap();
    let out = stcf(&["report", "results.csv"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("[FAIL]"));
}

#[test]
fn ingest_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("events.csv"),
        "year,lon,lat,kind\n2001,-74.0,4.5,treatment\n2002,-73.5,5.0,outcome\n2002,20.0,5.0,outcome\n",
    )
    .unwrap();
    std::fs::write(d.join("bounds.json"), r#"{"lon_min": -80, "lon_max": -66, "lat_min": -5, "lat_max": 13, "resolution": 20}"#)
        .unwrap();
    let out = stcf(&["ingest", "--events", "events.csv", "--bounds", "bounds.json", "--out", "obs"], d);
    assert!(ok(&out).contains("2 steps, 1 rows rejected"));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rejected line 4"));
}

#[test]
fn bad_config_exits_with_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = stcf(&["grid", "--set", "runs=0"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("runs must be at least 1"));
    let out = stcf(&["simulate", "--out", "x", "--length", "2"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}
