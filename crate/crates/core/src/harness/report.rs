use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::grid::{GridOutput, Method, ResultRow};
use crate::error::{Error, Result};
use crate::synthetic::KernelMode;

pub const NOT_APPLICABLE: &str = "N/A";

const RESULT_HEADER: [&str; 10] = ["T", "M", "c", "kernel_mode", "method", "n_runs", "mean", "std", "mean_rer", "std_rer"];

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| NOT_APPLICABLE.to_string(), |x| x.to_string())
}

pub fn write_results_csv<W: Write>(rows: &[ResultRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(RESULT_HEADER)?;
    for r in rows {
        out.write_record([
            r.t_len.to_string(),
            r.m.to_string(),
            r.c.to_string(),
            r.kernel_mode.to_string(),
            r.method.to_string(),
            r.n_runs.to_string(),
            r.mean.to_string(),
            r.std.to_string(),
            opt(r.mean_rer),
            opt(r.std_rer),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let bad = |what: &str, line: u64| Error::Config(format!("{}: line {line}: bad {what}", path.display()));
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != RESULT_HEADER.len() {
            return Err(bad("column count", line));
        }
        let num = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(RESULT_HEADER[i], line));
        let int = |i: usize| rec[i].parse::<usize>().map_err(|_| bad(RESULT_HEADER[i], line));
        let maybe = |i: usize| if &rec[i] == NOT_APPLICABLE { Ok(None) } else { num(i).map(Some) };
        let kernel_mode = match &rec[3] {
            "exponential" => KernelMode::Exponential,
            "gaussian" => KernelMode::Gaussian,
            _ => return Err(bad("kernel_mode", line)),
        };
        rows.push(ResultRow {
            t_len: int(0)?,
            m: int(1)?,
            c: num(2)?,
            kernel_mode,
            method: rec[4].parse::<Method>()?,
            n_runs: int(5)?,
            mean: num(6)?,
            std: num(7)?,
            mean_rer: maybe(8)?,
            std_rer: maybe(9)?,
            wall_time_s: 0.0,
        });
    }
    Ok(rows)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    version: &'a str,
    config_sha256: String,
    results_sha256: String,
    content_hash: String,
    omega: String,
    baseline_fitting_population: &'a str,
    runs: usize,
    rows: usize,
    failures: usize,
    files: Vec<String>,
}

/// Writes `config.toml`, `results.csv`, `records.csv`, `timings.csv`,
/// `failures.csv`, per-run traces under `runs/`, and `manifest.json`.
/// Everything except `timings.csv` is a deterministic function of the config.
pub fn write_output(dir: &Path, out: &GridOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    let config = out.config.to_toml()?;
    fs::write(dir.join("config.toml"), &config)?;
    let mut results = Vec::new();
    write_results_csv(&out.rows, &mut results)?;
    fs::write(dir.join("results.csv"), &results)?;

    let mut w = csv::Writer::from_path(dir.join("records.csv"))?;
    w.write_record(["T", "run", "M", "c", "method", "estimate", "truth", "rer"])?;
    for r in &out.records {
        w.write_record([
            r.t_len.to_string(),
            r.run.to_string(),
            r.m.to_string(),
            r.c.to_string(),
            r.method.to_string(),
            r.estimate.to_string(),
            opt(r.truth),
            opt(r.rer),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("timings.csv"))?;
    w.write_record(["stage", "T", "run", "c", "seconds"])?;
    for t in &out.timings {
        let run = t.run.map_or_else(String::new, |r| r.to_string());
        let c = t.c.map_or_else(String::new, |c| c.to_string());
        w.write_record([t.stage.clone(), t.t_len.to_string(), run, c, t.seconds.to_string()])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("failures.csv"))?;
    w.write_record(["stage", "T", "run", "M", "c", "message"])?;
    for f in &out.failures {
        w.write_record([
            f.stage.clone(),
            f.t_len.to_string(),
            f.run.map_or_else(String::new, |r| r.to_string()),
            f.m.map_or_else(String::new, |m| m.to_string()),
            f.c.map_or_else(String::new, |c| c.to_string()),
            f.message.clone(),
        ])?;
    }
    w.flush()?;

    let mut files = vec![
        "config.toml".to_string(),
        "results.csv".into(),
        "records.csv".into(),
        "timings.csv".into(),
        "failures.csv".into(),
    ];
    for tr in &out.traces {
        let rel = format!("runs/T{}/run{:02}", tr.t_len, tr.run);
        let run_dir = dir.join(&rel);
        fs::create_dir_all(&run_dir)?;
        let name = format!("ipw_M{}_c{}.csv", tr.m, tr.c);
        tr.estimate.write_csv(fs::File::create(run_dir.join(&name))?)?;
        files.push(format!("{rel}/{name}"));
        if let Some(g) = &tr.truth {
            let name = format!("truth_M{}_c{}.csv", tr.m, tr.c);
            let mut w = csv::Writer::from_path(run_dir.join(&name))?;
            w.write_record(["t", "mean", "standard_error"])?;
            for s in &g.per_t {
                w.write_record([s.t.to_string(), s.mean.to_string(), s.standard_error.to_string()])?;
            }
            w.flush()?;
            files.push(format!("{rel}/{name}"));
        }
    }

    let config_sha256 = sha256_hex(config.as_bytes());
    let results_sha256 = sha256_hex(&results);
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        content_hash: sha256_hex(format!("{config_sha256}{results_sha256}").as_bytes()),
        config_sha256,
        results_sha256,
        omega: match out.config.omega {
            None => "full region".into(),
            Some(r) => format!("[{}, {}] x [{}, {}]", r.x0, r.x1, r.y0, r.y1),
        },
        baseline_fitting_population: "per-t regressions fitted across the replicate runs of each series length",
        runs: out.config.runs,
        rows: out.rows.len(),
        failures: out.failures.len(),
        files,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// M rows × c columns of `mean ± std` for one method and series length.
pub fn estimate_table(rows: &[ResultRow], method: Method, t_len: usize) -> String {
    let sel: Vec<&ResultRow> = rows.iter().filter(|r| r.method == method && r.t_len == t_len).collect();
    let mut ms: Vec<usize> = sel.iter().map(|r| r.m).collect();
    ms.sort_unstable();
    ms.dedup();
    let mut cs: Vec<f64> = Vec::new();
    for r in &sel {
        if !cs.contains(&r.c) {
            cs.push(r.c);
        }
    }
    cs.sort_by(f64::total_cmp);
    let mut s = String::new();
    let _ = write!(s, "{:>6}", "M \\ c");
    for c in &cs {
        let _ = write!(s, " | {:>20}", c);
    }
    s.push('\n');
    for m in ms {
        let _ = write!(s, "{m:>6}");
        for &c in &cs {
            let cell = sel
                .iter()
                .find(|r| r.m == m && r.c == c)
                .map_or_else(|| "-".to_string(), |r| format!("{:.2} ± {:.2}", r.mean, r.std));
            let _ = write!(s, " | {cell:>20}");
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub id: u8,
    pub name: &'static str,
    /// `None` when the results lack the rows the check needs.
    pub passed: Option<bool>,
    pub detail: String,
}

fn find(rows: &[ResultRow], t: usize, m: usize, c: f64, mode: KernelMode, method: Method) -> Option<&ResultRow> {
    rows.iter().find(|r| r.t_len == t && r.m == m && r.c == c && r.kernel_mode == mode && r.method == method)
}

fn pooled_se(a: &ResultRow, b: &ResultRow) -> f64 {
    let sa = a.std_rer.unwrap_or(0.0);
    let sb = b.std_rer.unwrap_or(0.0);
    (sa * sa / a.n_runs as f64 + sb * sb / b.n_runs as f64).sqrt()
}

pub const ACCURACY_RER: f64 = 0.15;
pub const ROBUSTNESS_MARGIN: f64 = 0.05;

/// The result-level checks: end-to-end accuracy, ordering against the
/// baselines, the consistency trend and kernel robustness.
pub fn result_checks(rows: &[ResultRow]) -> Vec<Check> {
    use KernelMode::*;
    let mut checks = Vec::new();

    let acc = find(rows, 32, 1, 3.0, Exponential, Method::Ipw).and_then(|r| r.mean_rer);
    checks.push(Check {
        id: 6,
        name: "end-to-end accuracy (T=32, M=1, c=3): mean RER <= 0.15",
        passed: acc.map(|v| v <= ACCURACY_RER),
        detail: acc.map_or("missing".into(), |v| format!("mean RER {v:.4}")),
    });

    let mut detail = String::new();
    let mut ordering: Option<bool> = None;
    for c in [3.0, 4.0, 5.0, 6.0, 7.0] {
        let get = |m| find(rows, 64, 1, c, Exponential, m).and_then(|r| r.mean_rer);
        match (get(Method::Ipw), get(Method::Lr), get(Method::Msm)) {
            (Some(i), Some(l), Some(s)) => {
                let ok = i < l && i < s;
                ordering = Some(ordering.unwrap_or(true) && ok);
                let _ = write!(detail, "c={c}: ipw {i:.3} lr {l:.3} msm {s:.3}; ");
            }
            _ => {
                ordering = None;
                detail = "missing".into();
                break;
            }
        }
    }
    checks.push(Check {
        id: 7,
        name: "ordering (T=64, M=1): IPW mean RER below LR and MSM for every c in 3..7",
        passed: ordering,
        detail: detail.trim_end().to_string(),
    });

    let trend: Vec<Option<&ResultRow>> =
        [32, 48, 64].iter().map(|&t| find(rows, t, 1, 5.0, Exponential, Method::Ipw)).collect();
    let (passed, detail) = match (trend[0], trend[1], trend[2]) {
        (Some(a), Some(b), Some(c)) if a.mean_rer.is_some() && b.mean_rer.is_some() && c.mean_rer.is_some() => {
            let r = |x: &ResultRow| x.mean_rer.unwrap_or(f64::NAN);
            let ok1 = r(b) <= r(a) + pooled_se(a, b);
            let ok2 = r(c) <= r(b) + pooled_se(b, c);
            (
                Some(ok1 && ok2),
                format!(
                    "mean RER {:.4} -> {:.4} -> {:.4} (pooled SE {:.4}, {:.4})",
                    r(a),
                    r(b),
                    r(c),
                    pooled_se(a, b),
                    pooled_se(b, c)
                ),
            )
        }
        _ => (None, "missing".into()),
    };
    checks.push(Check {
        id: 8,
        name: "consistency (M=1, c=5): mean RER non-increasing over T=32,48,64 within one pooled SE",
        passed,
        detail,
    });

    let e = find(rows, 32, 1, 3.0, Exponential, Method::Ipw).and_then(|r| r.mean_rer);
    let g = find(rows, 32, 1, 3.0, Gaussian, Method::Ipw).and_then(|r| r.mean_rer);
    checks.push(Check {
        id: 9,
        name: "robustness: gaussian kernel mode degrades mean RER by at most 0.05",
        passed: e.zip(g).map(|(e, g)| g - e <= ROBUSTNESS_MARGIN),
        detail: e.zip(g).map_or("missing".into(), |(e, g)| format!("exponential {e:.4}, gaussian {g:.4}")),
    });
    checks
}

pub fn format_checks(checks: &[Check]) -> String {
    checks
        .iter()
        .map(|c| {
            let status = match c.passed {
                Some(true) => "PASS",
                Some(false) => "FAIL",
                None => "SKIP",
            };
            format!("[{status}] {}. {} ({})\n", c.id, c.name, c.detail)
        })
        .collect()
}
