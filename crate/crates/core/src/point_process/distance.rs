use super::field::Grid;
use super::geometry::{Point, Polyline, Region};
use crate::error::{Error, Result};

/// What a distance field measures distance to.
#[derive(Debug, Clone, Copy)]
pub enum DistanceTarget<'a> {
    Points(&'a [Point]),
    Polylines(&'a [Polyline]),
    Border,
    Center,
}

/// Distance reported for an empty point set: 10 × the region diagonal, so
/// that `exp(-2 D)` is numerically zero.
pub fn empty_set_distance(region: &Region) -> f64 {
    10.0 * region.diagonal()
}

/// Distance from `p` to the nearest of `pts`; the sentinel when `pts` is empty.
pub fn nearest_point_distance(p: &Point, pts: &[Point], region: &Region) -> f64 {
    if pts.is_empty() {
        return empty_set_distance(region);
    }
    pts.iter().map(|q| p.dist2(q)).fold(f64::INFINITY, f64::min).sqrt()
}

pub fn distance_at(target: DistanceTarget<'_>, region: &Region, p: &Point) -> Result<f64> {
    Ok(match target {
        DistanceTarget::Points(pts) => nearest_point_distance(p, pts, region),
        DistanceTarget::Polylines(lines) => {
            if lines.is_empty() {
                return Err(Error::Domain("no polylines to measure distance to".into()));
            }
            lines.iter().map(|l| l.distance(p)).fold(f64::INFINITY, f64::min)
        }
        DistanceTarget::Border => region.distance_to_border(p),
        DistanceTarget::Center => p.dist(&region.center()),
    })
}

/// Euclidean distance from every cell center to the target.
pub fn distance_field(target: DistanceTarget<'_>, region: &Region) -> Result<Grid> {
    let values = match target {
        DistanceTarget::Points(pts) => nearest_point_distances(region, pts),
        _ => region
            .cell_centers()
            .map(|c| distance_at(target, region, &c))
            .collect::<Result<Vec<_>>>()?,
    };
    Grid::new(*region, values)
}

/// Per-cell nearest-point distance, looping points outermost for cache friendliness.
pub fn nearest_point_distances(region: &Region, pts: &[Point]) -> Vec<f64> {
    if pts.is_empty() {
        return vec![empty_set_distance(region); region.n_cells()];
    }
    let xs: Vec<f64> = (0..region.nx).map(|i| region.cell_center(i).x).collect();
    let ys: Vec<f64> = (0..region.ny).map(|j| region.cell_center(j * region.nx).y).collect();
    let mut best = vec![f64::INFINITY; region.n_cells()];
    for q in pts {
        let dx2: Vec<f64> = xs.iter().map(|x| (x - q.x) * (x - q.x)).collect();
        for (j, y) in ys.iter().enumerate() {
            let dy2 = (y - q.y) * (y - q.y);
            let row = &mut best[j * region.nx..(j + 1) * region.nx];
            for (b, d) in row.iter_mut().zip(&dx2) {
                let v = d + dy2;
                if v < *b {
                    *b = v;
                }
            }
        }
    }
    best.iter_mut().for_each(|v| *v = v.sqrt());
    best
}
