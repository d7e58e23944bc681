use stcf_core::baselines::{lr_estimate, msm_estimate, ScalarSeries, Solver};
use stcf_core::estimator::{counterfactual_rates, estimate, EstimatorConfig, FittedModels};
use stcf_core::harness::{
    ingest_events, read_results_csv, result_checks, run_grid, write_output, Bounds, ExperimentConfig, Method, Mode,
};
use stcf_core::intensity::{Backend, IntensityConfig, NeuralConfig};
use stcf_core::point_process::{Point, PointPattern, SubRegion};
use stcf_core::propensity::PropensityConfig;
use stcf_core::synthetic::{default_roads, simulate_series, Dataset, GenParams, InterventionSpec};

fn small() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::benchmark();
    cfg.lengths = vec![8];
    cfg.durations = vec![1, 2];
    cfg.magnitudes = vec![3.0];
    cfg.runs = 2;
    cfg.resolution = 20;
    cfg.truth_replications = 50;
    cfg.estimator.counterfactual_samples = 100;
    cfg.propensity.epochs = 3;
    cfg.intensity.backend = Backend::Kernel;
    cfg
}

#[test]
fn smoke_grid_writes_every_setting_and_method() {
    let cfg = small();
    let out = run_grid(&cfg).unwrap();
    assert!(out.failures.is_empty(), "{:?}", out.failures);
    assert_eq!(out.rows.len(), 2 * Method::ALL.len());
    for row in &out.rows {
        assert_eq!(row.n_runs, 2);
        assert!(row.std >= 0.0);
        assert!(row.mean_rer.is_some_and(|r| r >= 0.0));
    }
    assert_eq!(out.records.len(), 2 * 2 * Method::ALL.len());

    let dir = tempfile::tempdir().unwrap();
    write_output(dir.path(), &out).unwrap();
    for f in ["config.toml", "results.csv", "records.csv", "timings.csv", "failures.csv", "manifest.json"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    assert!(dir.path().join("runs/T8/run00/ipw_M1_c3.csv").exists());
    let back = read_results_csv(&dir.path().join("results.csv")).unwrap();
    assert_eq!(back.len(), out.rows.len());
    for (a, b) in back.iter().zip(&out.rows) {
        assert_eq!((a.t_len, a.m, a.method, a.n_runs), (b.t_len, b.m, b.method, b.n_runs));
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.mean_rer, b.mean_rer);
    }
    let saved = ExperimentConfig::load(&dir.path().join("config.toml")).unwrap();
    assert_eq!(saved, cfg);
}

#[test]
fn observed_mode_reports_estimates_without_rer() {
    let mut csv = String::from("year,lon,lat,kind\n");
    for year in 2000..2008 {
        for k in 0..6 {
            let lon = -76.0 + 0.3 * k as f64 + 0.05 * (year - 2000) as f64;
            let kind = if k % 2 == 0 { "treatment" } else { "outcome" };
            csv.push_str(&format!("{year},{lon},{},{kind}\n", 4.0 + 0.4 * k as f64));
        }
    }
    let bounds = Bounds {
        lon_min: -80.0,
        lon_max: -66.0,
        lat_min: -5.0,
        lat_max: 13.0,
        resolution: 20,
        first_year: None,
        last_year: None,
    };
    let got = ingest_events(csv.as_bytes(), &bounds, "test").unwrap();
    assert_eq!(got.dataset.len(), 8);
    let dir = tempfile::tempdir().unwrap();
    got.dataset.save(dir.path()).unwrap();

    let mut cfg = small();
    cfg.mode = Mode::Observed;
    cfg.dataset = Some(dir.path().to_path_buf());
    let out = run_grid(&cfg).unwrap();
    assert!(out.failures.is_empty(), "{:?}", out.failures);
    assert!(!out.rows.is_empty());
    assert!(out.rows.iter().all(|r| r.mean_rer.is_none() && r.mean.is_finite()));
    assert!(result_checks(&out.rows).iter().all(|c| c.passed.is_none()));
}

fn reversed(d: &Dataset) -> Dataset {
    let flip = |p: &PointPattern| {
        let mut pts: Vec<Point> = p.points().to_vec();
        pts.reverse();
        PointPattern::new(p.time_index, p.kind, pts, &d.region).unwrap()
    };
    Dataset::new(
        d.region,
        d.roads.clone(),
        d.treatments.iter().map(flip).collect(),
        d.outcomes.iter().map(flip).collect(),
        d.covariates.clone(),
        d.source.clone(),
    )
    .unwrap()
}

#[test]
fn estimates_ignore_point_order() {
    let r = stcf_core::point_process::Region::unit_square(16);
    let d = simulate_series(&r, &default_roads(), &GenParams::default(), 6, 2).unwrap();
    let e = reversed(&d);
    assert_ne!(d.outcomes, e.outcomes);
    let icfg = IntensityConfig {
        backend: Backend::Neural,
        neural: NeuralConfig {
            width: 8,
            blocks: 1,
            heads: 2,
            latent: 2,
            decoder_layers: 2,
            decoder_width: 8,
            epochs: 3,
            quadrature: 6,
            ..NeuralConfig::default()
        },
        ..IntensityConfig::default()
    };
    let pcfg = PropensityConfig { epochs: 2, ..PropensityConfig::default() };
    let run = |d: &Dataset| {
        let models = FittedModels::fit(d, &pcfg, &icfg, 4).unwrap();
        let integrals = models.integrals(&SubRegion::full(&r)).unwrap();
        let spec = InterventionSpec::from_dataset(d, 2, 3.0).unwrap();
        let cps = counterfactual_rates(&spec, 50, 4).unwrap();
        estimate(d, &spec, &integrals, &models.lambda1, &cps, &EstimatorConfig::default(), 4).unwrap()
    };
    let (a, b) = (run(&d), run(&e));
    assert_eq!(a.per_t, b.per_t);
    assert_eq!(a.value, b.value);
}

#[test]
fn baselines_see_only_reduced_counts() {
    let r = stcf_core::point_process::Region::unit_square(16);
    let runs: Vec<Dataset> =
        (0..6).map(|s| simulate_series(&r, &default_roads(), &GenParams::default(), 6, s).unwrap()).collect();
    // move every event to the region centre, keeping counts
    let moved: Vec<Dataset> = runs
        .iter()
        .map(|d| {
            let shift = |p: &PointPattern| {
                PointPattern::new(p.time_index, p.kind, vec![Point::new(0.5, 0.5); p.len()], &d.region).unwrap()
            };
            let mut e = d.clone();
            e.treatments = d.treatments.iter().map(shift).collect();
            e.outcomes = d.outcomes.iter().map(shift).collect();
            e
        })
        .collect();
    let series = |ds: &[Dataset]| ds.iter().map(ScalarSeries::from_dataset).collect::<Vec<_>>();
    let (a, b) = (series(&runs), series(&moved));
    assert_eq!(a, b);
    for m in [1, 3] {
        assert_eq!(
            lr_estimate(&a, m, 4.0, Solver::ClosedForm).unwrap(),
            lr_estimate(&b, m, 4.0, Solver::ClosedForm).unwrap()
        );
        assert_eq!(
            msm_estimate(&a, m, 4.0, Solver::ClosedForm).unwrap(),
            msm_estimate(&b, m, 4.0, Solver::ClosedForm).unwrap()
        );
    }
}

#[test]
fn shipped_configs_match_presets() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    assert_eq!(ExperimentConfig::load(&root.join("default.toml")).unwrap(), ExperimentConfig::default());
    assert_eq!(ExperimentConfig::load(&root.join("benchmark.toml")).unwrap(), ExperimentConfig::benchmark());
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let render = |workers| {
        let mut cfg = small();
        cfg.workers = workers;
        let mut buf = Vec::new();
        stcf_core::harness::write_results_csv(&run_grid(&cfg).unwrap().rows, &mut buf).unwrap();
        buf
    };
    assert_eq!(render(1), render(3));
}
