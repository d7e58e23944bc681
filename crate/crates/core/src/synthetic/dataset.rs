use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::covariates::{build_covariates, CovariateSet};
use super::generate::{outcome_intensity, treatment_intensity};
use super::params::GenParams;
use crate::error::{Error, Result};
use crate::point_process::{
    read_patterns_csv, sample_pattern, write_patterns_csv, Grid, IntensityField, PatternKind, PointPattern, Polyline,
    Region,
};
use crate::rng::{derived_stream, label};

/// Number of treatment steps (t-3..t) feeding the outcome intensity at t.
pub const OUTCOME_TREATMENT_WINDOW: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic { params: GenParams, seed: u64 },
    Observed { origin: String, first_year: i64 },
}

/// A treatment/outcome series of length T over one region, with covariates.
///
/// Time steps are 1-based: `treatment(1)` is the first pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub region: Region,
    pub roads: Vec<Polyline>,
    pub treatments: Vec<PointPattern>,
    pub outcomes: Vec<PointPattern>,
    pub covariates: CovariateSet,
    pub source: DataSource,
}

impl Dataset {
    pub fn new(
        region: Region,
        roads: Vec<Polyline>,
        treatments: Vec<PointPattern>,
        outcomes: Vec<PointPattern>,
        covariates: CovariateSet,
        source: DataSource,
    ) -> Result<Self> {
        if treatments.len() != outcomes.len() {
            return Err(Error::Shape(format!(
                "{} treatment steps but {} outcome steps",
                treatments.len(),
                outcomes.len()
            )));
        }
        if covariates.region() != &region {
            return Err(Error::Alignment("covariates were built on a different grid".into()));
        }
        Ok(Self { region, roads, treatments, outcomes, covariates, source })
    }

    /// Series length T.
    pub fn len(&self) -> usize {
        self.treatments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.treatments.is_empty()
    }

    pub fn treatment(&self, t: usize) -> &PointPattern {
        &self.treatments[t - 1]
    }

    pub fn outcome(&self, t: usize) -> &PointPattern {
        &self.outcomes[t - 1]
    }

    pub fn gen_params(&self) -> Option<&GenParams> {
        match &self.source {
            DataSource::Synthetic { params, .. } => Some(params),
            DataSource::Observed { .. } => None,
        }
    }

    pub fn treatment_counts(&self) -> Vec<usize> {
        self.treatments.iter().map(PointPattern::len).collect()
    }

    pub fn outcome_counts(&self) -> Vec<usize> {
        self.outcomes.iter().map(PointPattern::len).collect()
    }

    /// Treatments of steps `max(1, t-3)..=t`, truncated at the start of the series.
    pub fn treatment_window(&self, t: usize) -> Vec<&PointPattern> {
        let start = t.saturating_sub(OUTCOME_TREATMENT_WINDOW - 1).max(1);
        (start..=t).map(|j| self.treatment(j)).collect()
    }

    fn previous<'a>(&self, patterns: &'a [PointPattern], t: usize) -> &'a [crate::point_process::Point] {
        if t >= 2 {
            patterns[t - 2].points()
        } else {
            &[]
        }
    }

    fn require_params(&self) -> Result<&GenParams> {
        self.gen_params()
            .ok_or_else(|| Error::State("generating intensities exist only for synthetic datasets".into()))
    }

    /// The generating treatment intensity λ_{Z_t} given the factual history.
    pub fn treatment_field(&self, t: usize) -> Result<IntensityField> {
        let params = self.require_params()?;
        treatment_intensity(
            &self.covariates,
            self.previous(&self.treatments, t),
            self.previous(&self.outcomes, t),
            params,
        )
    }

    /// The generating outcome intensity λ_{Y_t} given the factual history.
    pub fn outcome_field(&self, t: usize) -> Result<IntensityField> {
        let params = self.require_params()?;
        outcome_intensity(&self.covariates, &self.treatment_window(t), self.previous(&self.outcomes, t), params)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("covariates"))?;
        fs::create_dir_all(dir.join("patterns"))?;
        let manifest = Manifest {
            series_length: self.len(),
            region: self.region,
            roads: self.roads.clone(),
            source: self.source.clone(),
        };
        serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join("manifest.json"))?), &manifest)?;
        for (k, g) in self.covariates.grids.iter().enumerate() {
            g.write_csv(BufWriter::new(File::create(dir.join(format!("covariates/x{}.csv", k + 1)))?))?;
        }
        write_patterns_csv(
            BufWriter::new(File::create(dir.join("covariates/anchors.csv"))?),
            &[&self.covariates.anchors3, &tagged(&self.covariates.anchors4, 1)],
        )?;
        for t in 1..=self.len() {
            let f = File::create(dir.join(format!("patterns/t{t:04}.csv")))?;
            write_patterns_csv(BufWriter::new(f), &[self.treatment(t), self.outcome(t)])?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_reader(BufReader::new(File::open(dir.join("manifest.json"))?))?;
        let region = manifest.region;
        let grid = |k: usize| -> Result<Grid> {
            Grid::read_csv(BufReader::new(File::open(dir.join(format!("covariates/x{k}.csv")))?))
        };
        let grids = [grid(1)?, grid(2)?, grid(3)?, grid(4)?];
        let mut anchors = read_patterns_csv(File::open(dir.join("covariates/anchors.csv"))?, &region)?;
        let mut take_anchor = |t: usize| {
            let mut p = anchors
                .remove(&(t, PatternKind::CovariateAnchor))
                .unwrap_or_else(|| PointPattern::empty(t, PatternKind::CovariateAnchor));
            p.time_index = 0;
            p
        };
        let covariates = CovariateSet { grids, anchors3: take_anchor(0), anchors4: take_anchor(1) };
        let mut treatments = Vec::with_capacity(manifest.series_length);
        let mut outcomes = Vec::with_capacity(manifest.series_length);
        for t in 1..=manifest.series_length {
            let mut pats = read_patterns_csv(File::open(dir.join(format!("patterns/t{t:04}.csv")))?, &region)?;
            let mut take = |kind| pats.remove(&(t, kind)).unwrap_or_else(|| PointPattern::empty(t, kind));
            treatments.push(take(PatternKind::Treatment));
            outcomes.push(take(PatternKind::Outcome));
        }
        Dataset::new(region, manifest.roads, treatments, outcomes, covariates, manifest.source)
    }
}

// anchors4 is stored with time index 1 so both anchor sets share one file
fn tagged(p: &PointPattern, t: usize) -> PointPattern {
    let mut q = p.clone();
    q.time_index = t;
    q
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    series_length: usize,
    region: Region,
    roads: Vec<Polyline>,
    source: DataSource,
}

/// Runs the synthetic generating process for `series_length` steps.
///
/// Each step samples Z_t from the treatment intensity given (Z_{t-1}, Y_{t-1}),
/// then Y_t from the outcome intensity given Z_{t-3..t} and Y_{t-1}.
pub fn simulate_series(
    region: &Region,
    roads: &[Polyline],
    params: &GenParams,
    series_length: usize,
    seed: u64,
) -> Result<Dataset> {
    if series_length < OUTCOME_TREATMENT_WINDOW {
        return Err(Error::Config(format!("series length must be at least {OUTCOME_TREATMENT_WINDOW}")));
    }
    let covariates = build_covariates(region, roads, params, &mut derived_stream(seed, &[label("covariates")]))?;
    let mut rng = derived_stream(seed, &[label("series")]);
    let mut treatments: Vec<PointPattern> = Vec::with_capacity(series_length);
    let mut outcomes: Vec<PointPattern> = Vec::with_capacity(series_length);
    for t in 1..=series_length {
        let prev_z = if t > 1 { treatments[t - 2].points() } else { &[] };
        let prev_y = if t > 1 { outcomes[t - 2].points() } else { &[] };
        let lz = treatment_intensity(&covariates, prev_z, prev_y, params)?;
        treatments.push(sample_pattern(&lz, t, PatternKind::Treatment, &mut rng));
        let start = t.saturating_sub(OUTCOME_TREATMENT_WINDOW - 1).max(1);
        let window: Vec<&PointPattern> = treatments[start - 1..t].iter().collect();
        let prev_y = if t > 1 { outcomes[t - 2].points() } else { &[] };
        let ly = outcome_intensity(&covariates, &window, prev_y, params)?;
        outcomes.push(sample_pattern(&ly, t, PatternKind::Outcome, &mut rng));
    }
    Dataset::new(
        *region,
        roads.to_vec(),
        treatments,
        outcomes,
        covariates,
        DataSource::Synthetic { params: params.clone(), seed },
    )
}

pub fn load_field_csv(path: &Path) -> Result<IntensityField> {
    IntensityField::read_csv(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::default_roads;

    #[test]
    fn series_has_requested_length_and_is_deterministic() {
        let r = Region::unit_square(30);
        let p = GenParams::default();
        let a = simulate_series(&r, &default_roads(), &p, 6, 77).unwrap();
        let b = simulate_series(&r, &default_roads(), &p, 6, 77).unwrap();
        assert_eq!(a.len(), 6);
        assert_eq!(a.outcomes.len(), 6);
        assert_eq!(a, b);
        assert_ne!(a, simulate_series(&r, &default_roads(), &p, 6, 78).unwrap());
        assert!(simulate_series(&r, &default_roads(), &p, 3, 1).is_err());
    }

    #[test]
    fn window_truncates_at_series_start() {
        let r = Region::unit_square(20);
        let d = simulate_series(&r, &default_roads(), &GenParams::default(), 6, 5).unwrap();
        assert_eq!(d.treatment_window(1).len(), 1);
        assert_eq!(d.treatment_window(3).len(), 3);
        assert_eq!(d.treatment_window(6).iter().map(|p| p.time_index).collect::<Vec<_>>(), vec![3, 4, 5, 6]);
    }

    #[test]
    fn fields_are_strictly_positive() {
        let r = Region::unit_square(20);
        let d = simulate_series(&r, &default_roads(), &GenParams::default(), 5, 8).unwrap();
        for t in 1..=5 {
            assert!(d.treatment_field(t).unwrap().values().iter().all(|&v| v > 0.0));
            assert!(d.outcome_field(t).unwrap().values().iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = Region::unit_square(25);
        let d = simulate_series(&r, &default_roads(), &GenParams::default(), 5, 21).unwrap();
        d.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, d);
    }
}
