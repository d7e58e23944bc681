use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::geometry::{Point, Region, SubRegion};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    Treatment,
    Outcome,
    CovariateAnchor,
}

impl fmt::Display for PatternKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PatternKind::Treatment => "treatment",
            PatternKind::Outcome => "outcome",
            PatternKind::CovariateAnchor => "covariate_anchor",
        })
    }
}

impl FromStr for PatternKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "treatment" => Ok(PatternKind::Treatment),
            "outcome" => Ok(PatternKind::Outcome),
            "covariate_anchor" => Ok(PatternKind::CovariateAnchor),
            other => Err(Error::Domain(format!("unknown pattern kind {other:?}"))),
        }
    }
}

/// Event locations of one kind at one time step.
///
/// The coordinate list keeps coincident points distinct; only the binarized
/// grid view collapses them.
#[derive(Debug, Clone, PartialEq)]
pub struct PointPattern {
    pub time_index: usize,
    pub kind: PatternKind,
    points: Vec<Point>,
}

impl PointPattern {
    pub fn new(time_index: usize, kind: PatternKind, points: Vec<Point>, region: &Region) -> Result<Self> {
        if let Some(p) = points.iter().find(|p| !region.contains(p)) {
            return Err(Error::Domain(format!("point ({}, {}) lies outside the region", p.x, p.y)));
        }
        Ok(Self { time_index, kind, points })
    }

    pub fn empty(time_index: usize, kind: PatternKind) -> Self {
        Self { time_index, kind, points: Vec::new() }
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn count_in(&self, omega: &SubRegion) -> usize {
        self.points.iter().filter(|p| omega.contains_point(p)).count()
    }

    /// 0/1 indicator per cell: a cell is 1 iff it holds at least one point.
    pub fn binarize(&self, region: &Region) -> Vec<f64> {
        let mut grid = vec![0.0; region.n_cells()];
        for p in &self.points {
            if let Some(c) = region.cell_index(p) {
                grid[c] = 1.0;
            }
        }
        grid
    }

    /// Points sorted lexicographically by (x, y).
    pub fn canonical_points(&self) -> Vec<Point> {
        let mut pts = self.points.clone();
        pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
        pts
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PatternRow {
    t: usize,
    x: f64,
    y: f64,
    kind: PatternKind,
}

/// Writes patterns as `t,x,y,kind` rows.
pub fn write_patterns_csv<W: Write>(w: W, patterns: &[&PointPattern]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(w);
    for pat in patterns {
        for p in &pat.points {
            writer.serialize(PatternRow { t: pat.time_index, x: p.x, y: p.y, kind: pat.kind })?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Reads `t,x,y,kind` rows, grouping them by `(t, kind)`.
pub fn read_patterns_csv<R: Read>(r: R, region: &Region) -> Result<BTreeMap<(usize, PatternKind), PointPattern>> {
    let mut reader = csv::Reader::from_reader(r);
    let mut out: BTreeMap<(usize, PatternKind), PointPattern> = BTreeMap::new();
    for (k, row) in reader.deserialize::<PatternRow>().enumerate() {
        let row = row.map_err(|e| Error::Parse { line: k + 2, msg: e.to_string() })?;
        let p = Point::new(row.x, row.y);
        if !region.contains(&p) {
            return Err(Error::Parse { line: k + 2, msg: format!("point ({}, {}) outside region", p.x, p.y) });
        }
        out.entry((row.t, row.kind))
            .or_insert_with(|| PointPattern::empty(row.t, row.kind))
            .points
            .push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binarize_collapses_coincident_points() {
        let r = Region::unit_square(10);
        let pts = vec![Point::new(0.01, 0.01), Point::new(0.02, 0.03), Point::new(0.55, 0.55)];
        let pat = PointPattern::new(1, PatternKind::Treatment, pts, &r).unwrap();
        assert_eq!(pat.len(), 3);
        assert_eq!(pat.binarize(&r).iter().sum::<f64>(), 2.0);
    }

    #[test]
    fn rejects_outside_points() {
        let r = Region::unit_square(10);
        let err = PointPattern::new(1, PatternKind::Outcome, vec![Point::new(1.5, 0.5)], &r);
        assert!(err.is_err());
    }

    #[test]
    fn csv_round_trip() {
        let r = Region::unit_square(10);
        let a = PointPattern::new(1, PatternKind::Treatment, vec![Point::new(0.1, 0.2)], &r).unwrap();
        let b = PointPattern::new(2, PatternKind::Outcome, vec![Point::new(0.3, 0.4), Point::new(0.5, 0.6)], &r)
            .unwrap();
        let mut buf = Vec::new();
        write_patterns_csv(&mut buf, &[&a, &b]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,x,y,kind\n1,0.1,0.2,treatment\n"));
        let back = read_patterns_csv(&buf[..], &r).unwrap();
        assert_eq!(back[&(1, PatternKind::Treatment)], a);
        assert_eq!(back[&(2, PatternKind::Outcome)], b);
    }
}
