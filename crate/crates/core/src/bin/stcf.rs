use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use stcf_core::estimator::{counterfactual_rates, estimate, FittedModels};
use stcf_core::harness::{
    estimate_table, format_checks, ingest_files, policy_fields, read_results_csv, result_checks, run_grid,
    write_output, ExperimentConfig, Method, Mode,
};
use stcf_core::point_process::Region;
use stcf_core::synthetic::{default_roads, ground_truth, simulate_series, Dataset, InterventionSpec, KernelMode};

#[derive(Parser)]
#[command(name = "stcf", version, about = "Counterfactual outcome counts for spatial-temporal point patterns")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the reduced benchmark budget instead of the defaults.
    #[arg(long)]
    benchmark: bool,
    /// Override a config entry, e.g. `--set runs=5 --set intensity.backend=kernel`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let base = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None if self.benchmark => ExperimentConfig::benchmark(),
            None => ExperimentConfig::default(),
        };
        Ok(base.with_overrides(&self.overrides)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one synthetic series and save it.
    Simulate {
        #[arg(long, default_value_t = 32)]
        length: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        resolution: usize,
        #[arg(long, value_enum, default_value = "exponential")]
        kernel_mode: KernelModeArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the propensity model and per-step outcome intensities.
    Fit {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Estimate the expected outcome count under one intervention.
    Estimate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        fits: PathBuf,
        #[arg(long)]
        duration: usize,
        #[arg(long)]
        magnitude: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-step CSV output; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also compute the simulation ground truth (synthetic data only).
        #[arg(long)]
        truth: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run the runs × settings grid and write a result directory.
    Grid {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert an event CSV plus bounds sidecar into a dataset.
    Ingest {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        bounds: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print tables and result checks; exits nonzero if a check fails.
    Report {
        /// Result directories; rows are merged.
        #[arg(required = true)]
        results: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum KernelModeArg {
    Exponential,
    Gaussian,
}

impl From<KernelModeArg> for KernelMode {
    fn from(k: KernelModeArg) -> Self {
        match k {
            KernelModeArg::Exponential => KernelMode::Exponential,
            KernelModeArg::Gaussian => KernelMode::Gaussian,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Simulate { length, seed, resolution, kernel_mode, out } => {
            let params = ExperimentConfig::default().generator.with_kernel_mode(kernel_mode.into());
            let d = simulate_series(&Region::unit_square(resolution), &default_roads(), &params, length, seed)?;
            d.save(&out)?;
            println!("treatment counts {:?}", d.treatment_counts());
            println!("outcome counts   {:?}", d.outcome_counts());
        }
        Command::Fit { dataset, out, seed, config } => {
            let cfg = config.resolve()?;
            let d = Dataset::load(&dataset)?;
            let models = FittedModels::fit(&d, &cfg.propensity, &cfg.intensity, seed)?;
            models.save(&out)?;
            println!("fitted {} steps into {}", d.len(), out.display());
        }
        Command::Estimate { dataset, fits, duration, magnitude, seed, out, truth, config } => {
            let cfg = config.resolve()?;
            let d = Dataset::load(&dataset)?;
            let models = FittedModels::load(&fits, &d)?;
            let omega = cfg.omega(&d.region)?;
            let integrals = models.integrals(&omega)?;
            let policy = policy_fields(&d, cfg.intensity.bandwidth_fraction)?;
            let spec = InterventionSpec::from_treatment_fields(duration, magnitude, &policy)?;
            let cps = counterfactual_rates(&spec, cfg.estimator.counterfactual_samples, seed)?;
            let est = estimate(&d, &spec, &integrals, &models.lambda1, &cps, &cfg.estimator, seed)?;
            match out {
                Some(p) => est.write_csv(BufWriter::new(File::create(&p)?))?,
                None => est.write_csv(std::io::stdout().lock())?,
            }
            eprintln!("estimate {}", est.value);
            if truth {
                let g = ground_truth(&d, &spec, &omega, cfg.truth_replications, seed)?;
                eprintln!("ground truth {} (se {})", g.value, g.standard_error);
            }
        }
        Command::Grid { config, out } => {
            let cfg = config.resolve()?;
            let dir = out.unwrap_or_else(|| cfg.output.clone());
            let result = run_grid(&cfg)?;
            write_output(&dir, &result)?;
            for f in &result.failures {
                eprintln!("failed: {} T={} run={:?} M={:?} c={:?}: {}", f.stage, f.t_len, f.run, f.m, f.c, f.message);
            }
            let lengths: Vec<usize> = result.rows.iter().map(|r| r.t_len).fold(Vec::new(), |mut v, t| {
                if !v.contains(&t) {
                    v.push(t);
                }
                v
            });
            for t in lengths {
                for method in Method::ALL {
                    println!("T = {t}, {method}:\n{}", estimate_table(&result.rows, method, t));
                }
            }
            if cfg.mode == Mode::Synthetic {
                print!("{}", format_checks(&result_checks(&result.rows)));
            }
            println!("results written to {}", dir.display());
        }
        Command::Ingest { events, bounds, out } => {
            let got = ingest_files(&events, &bounds)?;
            for r in &got.rejected {
                eprintln!("rejected line {}: {}", r.line, r.reason);
            }
            got.dataset.save(&out)?;
            println!("{} steps, {} rows rejected", got.dataset.len(), got.rejected.len());
        }
        Command::Report { results } => {
            let mut rows = Vec::new();
            for dir in &results {
                let path = if dir.is_dir() { dir.join("results.csv") } else { dir.clone() };
                rows.extend(read_results_csv(&path).with_context(|| format!("reading {}", path.display()))?);
            }
            if rows.is_empty() {
                bail!("no result rows found");
            }
            let mut lengths: Vec<usize> = rows.iter().map(|r| r.t_len).collect();
            lengths.sort_unstable();
            lengths.dedup();
            for t in lengths {
                println!("T = {t}, ipw:\n{}", estimate_table(&rows, Method::Ipw, t));
            }
            let checks = result_checks(&rows);
            print!("{}", format_checks(&checks));
            if checks.iter().any(|c| c.passed == Some(false)) {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
