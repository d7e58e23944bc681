use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::point_process::{PatternKind, Point, PointPattern, Polyline, Region};
use crate::rng::{derived_stream, label};
use crate::synthetic::{build_covariates, DataSource, Dataset, GenParams};

/// Region bounds sidecar for an event file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub lon_min: f64,
    pub lon_max: f64,
    pub lat_min: f64,
    pub lat_max: f64,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    /// Inclusive year span; inferred from the events when absent.
    #[serde(default)]
    pub first_year: Option<i64>,
    #[serde(default)]
    pub last_year: Option<i64>,
}

fn default_resolution() -> usize {
    100
}

impl Bounds {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }

    pub fn region(&self) -> Result<Region> {
        Region::new(self.lon_min, self.lon_max, self.lat_min, self.lat_max, self.resolution, self.resolution)
    }
}

/// The five road polylines (lon, lat) used for the observed-data covariates.
pub fn observed_roads() -> Vec<Polyline> {
    let roads: [&[(f64, f64)]; 5] = [
        &[(-77.66, 0.77), (-76.42, 3.09), (-76.06, 4.29)],
        &[(-76.06, 4.29), (-74.03, 4.66), (-73.04, 7.05), (-72.38, 7.75)],
        &[(-76.02, 4.31), (-75.54, 6.15), (-73.11, 7.09), (-74.22, 10.97), (-72.23, 11.33)],
        &[(-75.52, 6.15), (-74.69, 10.93)],
        &[(-75.52, 6.22), (-76.77, 8.42)],
    ];
    roads.iter().map(|r| Polyline::from_coords(r).expect("static road")).collect()
}

#[derive(Debug, Deserialize)]
struct EventRow {
    year: i64,
    lon: f64,
    lat: f64,
    kind: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rejected {
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub dataset: Dataset,
    pub rejected: Vec<Rejected>,
}

/// Reads `year,lon,lat,kind` rows and buckets them by year into time steps.
/// Rows outside the bounds are rejected and reported by line number.
pub fn ingest_events<R: Read>(events: R, bounds: &Bounds, origin: &str) -> Result<Ingested> {
    let region = bounds.region()?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(events);
    let headers = rdr.headers()?.clone();
    let mut rows: Vec<(i64, PatternKind, Point)> = Vec::new();
    let mut rejected = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let row: EventRow = rec
            .deserialize(Some(&headers))
            .map_err(|e| Error::Config(format!("line {line}: malformed event row: {e}")))?;
        let kind = match row.kind.as_str() {
            "treatment" => PatternKind::Treatment,
            "outcome" => PatternKind::Outcome,
            other => return Err(Error::Config(format!("line {line}: unknown event kind `{other}`"))),
        };
        let p = Point::new(row.lon, row.lat);
        let in_years = bounds.first_year.is_none_or(|y| row.year >= y) && bounds.last_year.is_none_or(|y| row.year <= y);
        if !region.contains(&p) || !in_years {
            log::warn!("line {line}: event ({}, {}, {}) outside declared bounds", row.year, row.lon, row.lat);
            rejected.push(Rejected { line, reason: format!("({}, {}, {}) outside bounds", row.year, row.lon, row.lat) });
            continue;
        }
        rows.push((row.year, kind, p));
    }
    let first = bounds.first_year.or_else(|| rows.iter().map(|r| r.0).min());
    let last = bounds.last_year.or_else(|| rows.iter().map(|r| r.0).max());
    let (first, last) = match (first, last) {
        (Some(a), Some(b)) if a <= b => (a, b),
        _ => return Err(Error::Config("no events and no year span declared".into())),
    };
    let len = (last - first + 1) as usize;
    let mut z = vec![Vec::new(); len];
    let mut y = vec![Vec::new(); len];
    for (year, kind, p) in rows {
        let slot = (year - first) as usize;
        match kind {
            PatternKind::Treatment => z[slot].push(p),
            _ => y[slot].push(p),
        }
    }
    let to_patterns = |v: Vec<Vec<Point>>, kind| {
        v.into_iter().enumerate().map(|(i, pts)| PointPattern::new(i + 1, kind, pts, &region)).collect::<Result<Vec<_>>>()
    };
    let roads = observed_roads();
    let covariates = build_covariates(&region, &roads, &GenParams::default(), &mut derived_stream(0, &[label("covariates")]))?;
    let dataset = Dataset::new(
        region,
        roads,
        to_patterns(z, PatternKind::Treatment)?,
        to_patterns(y, PatternKind::Outcome)?,
        covariates,
        DataSource::Observed { origin: origin.to_string(), first_year: first },
    )?;
    Ok(Ingested { dataset, rejected })
}

pub fn ingest_files(events: &Path, bounds: &Path) -> Result<Ingested> {
    let b = Bounds::load(bounds)?;
    ingest_events(BufReader::new(File::open(events)?), &b, &events.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bounds() -> Bounds {
        Bounds { lon_min: -80.0, lon_max: -66.0, lat_min: -5.0, lat_max: 13.0, resolution: 20, first_year: None, last_year: None }
    }

    #[test]
    fn single_row_gives_one_step() {
        let csv = "year,lon,lat,kind\n2002,-74.0,4.5,treatment\n";
        let got = ingest_events(csv.as_bytes(), &bounds(), "mem").unwrap();
        assert_eq!(got.dataset.len(), 1);
        assert_eq!(got.dataset.treatment(1).len(), 1);
        assert!(got.dataset.outcome(1).is_empty());
    }

    #[test]
    fn years_are_bucketed_and_gaps_are_empty() {
        let csv = "year,lon,lat,kind\n2002,-74.0,4.5,treatment\n2005,-73.0,5.0,outcome\n2005,-75.0,6.0,outcome\n";
        let d = ingest_events(csv.as_bytes(), &bounds(), "mem").unwrap().dataset;
        assert_eq!(d.len(), 4);
        assert_eq!(d.treatment_counts(), vec![1, 0, 0, 0]);
        assert_eq!(d.outcome_counts(), vec![0, 0, 0, 2]);
    }

    #[test]
    fn out_of_bounds_rows_are_rejected_with_line() {
        let csv = "year,lon,lat,kind\n2002,-74.0,4.5,treatment\n2002,10.0,4.5,outcome\n";
        let got = ingest_events(csv.as_bytes(), &bounds(), "mem").unwrap();
        assert_eq!(got.rejected.len(), 1);
        assert_eq!(got.rejected[0].line, 3);
        assert!(got.dataset.outcome(1).is_empty());
    }

    #[test]
    fn malformed_rows_fail() {
        let csv = "year,lon,lat,kind\n2002,abc,4.5,treatment\n";
        let err = ingest_events(csv.as_bytes(), &bounds(), "mem").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let csv = "year,lon,lat,kind\n2002,-74.0,4.5,fire\n";
        assert!(ingest_events(csv.as_bytes(), &bounds(), "mem").is_err());
    }

    #[test]
    fn first_road_is_verbatim() {
        let r = &observed_roads()[0];
        let v: Vec<(f64, f64)> = r.vertices().iter().map(|p| (p.x, p.y)).collect();
        assert_eq!(v, vec![(-77.66, 0.77), (-76.42, 3.09), (-76.06, 4.29)]);
        assert_eq!(observed_roads().len(), 5);
    }
}
