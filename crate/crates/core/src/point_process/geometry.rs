use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist2(&self, other: &Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    pub fn dist(&self, other: &Point) -> f64 {
        self.dist2(other).sqrt()
    }
}

/// Axis-aligned rectangle discretized into `nx × ny` equal cells.
///
/// Cells are indexed row-major with rows running along y: `idx = j * nx + i`.
/// Field values are interpreted at cell centers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub nx: usize,
    pub ny: usize,
}

impl Region {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64, nx: usize, ny: usize) -> Result<Self> {
        let finite = [x_min, x_max, y_min, y_max].iter().all(|v| v.is_finite());
        if !finite || x_max <= x_min || y_max <= y_min {
            return Err(Error::Domain(format!(
                "degenerate bounds [{x_min}, {x_max}] x [{y_min}, {y_max}]"
            )));
        }
        if nx == 0 || ny == 0 {
            return Err(Error::Domain("grid resolution must be positive".into()));
        }
        Ok(Self { x_min, x_max, y_min, y_max, nx, ny })
    }

    /// Unit square at `resolution × resolution` cells.
    pub fn unit_square(resolution: usize) -> Self {
        Self::new(0.0, 1.0, 0.0, 1.0, resolution, resolution).expect("positive resolution")
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn diagonal(&self) -> f64 {
        self.width().hypot(self.height())
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn cell_width(&self) -> f64 {
        self.width() / self.nx as f64
    }

    pub fn cell_height(&self) -> f64 {
        self.height() / self.ny as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.area() / self.n_cells() as f64
    }

    pub fn center(&self) -> Point {
        Point::new(0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }

    pub fn cell_center(&self, idx: usize) -> Point {
        let i = idx % self.nx;
        let j = idx / self.nx;
        Point::new(
            self.x_min + self.width() * (i as f64 + 0.5) / self.nx as f64,
            self.y_min + self.height() * (j as f64 + 0.5) / self.ny as f64,
        )
    }

    /// Index of the cell containing `p`; points on the upper edges belong to the last cell.
    pub fn cell_index(&self, p: &Point) -> Option<usize> {
        if !self.contains(p) {
            return None;
        }
        let i = (((p.x - self.x_min) / self.width()) * self.nx as f64).floor() as usize;
        let j = (((p.y - self.y_min) / self.height()) * self.ny as f64).floor() as usize;
        Some(j.min(self.ny - 1) * self.nx + i.min(self.nx - 1))
    }

    pub fn cell_centers(&self) -> impl Iterator<Item = Point> + '_ {
        (0..self.n_cells()).map(move |idx| self.cell_center(idx))
    }

    /// Distance from `p` to the nearest edge of the bounding rectangle.
    pub fn distance_to_border(&self, p: &Point) -> f64 {
        let dx = (p.x - self.x_min).min(self.x_max - p.x);
        let dy = (p.y - self.y_min).min(self.y_max - p.y);
        dx.min(dy).max(0.0)
    }
}

/// A cell-aligned subset ω of a region, stored as a cell mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SubRegion {
    region: Region,
    mask: Vec<bool>,
}

impl SubRegion {
    pub fn full(region: &Region) -> Self {
        Self { region: *region, mask: vec![true; region.n_cells()] }
    }

    pub fn empty(region: &Region) -> Self {
        Self { region: *region, mask: vec![false; region.n_cells()] }
    }

    pub fn from_cells(region: &Region, cells: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut sub = Self::empty(region);
        for c in cells {
            if c >= region.n_cells() {
                return Err(Error::Alignment(format!("cell {c} outside a {}-cell grid", region.n_cells())));
            }
            sub.mask[c] = true;
        }
        Ok(sub)
    }

    /// Rectangle `[x0, x1] × [y0, y1]`; every edge must fall on a grid line.
    pub fn from_rect(region: &Region, x0: f64, x1: f64, y0: f64, y1: f64) -> Result<Self> {
        let snap = |v: f64, lo: f64, extent: f64, n: usize| -> Result<usize> {
            let pos = (v - lo) / extent * n as f64;
            let k = pos.round();
            if (pos - k).abs() > 1e-9 || k < 0.0 || k > n as f64 {
                return Err(Error::Alignment(format!("coordinate {v} is not on a grid line")));
            }
            Ok(k as usize)
        };
        let i0 = snap(x0, region.x_min, region.width(), region.nx)?;
        let i1 = snap(x1, region.x_min, region.width(), region.nx)?;
        let j0 = snap(y0, region.y_min, region.height(), region.ny)?;
        let j1 = snap(y1, region.y_min, region.height(), region.ny)?;
        if i1 < i0 || j1 < j0 {
            return Err(Error::Alignment("rectangle bounds are inverted".into()));
        }
        let mut sub = Self::empty(region);
        for j in j0..j1 {
            for i in i0..i1 {
                sub.mask[j * region.nx + i] = true;
            }
        }
        Ok(sub)
    }

    pub fn region(&self) -> &Region {
        &self.region
    }

    pub fn contains_cell(&self, idx: usize) -> bool {
        self.mask.get(idx).copied().unwrap_or(false)
    }

    pub fn contains_point(&self, p: &Point) -> bool {
        self.region.cell_index(p).is_some_and(|c| self.mask[c])
    }

    pub fn cells(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask.iter().enumerate().filter_map(|(i, &m)| m.then_some(i))
    }

    pub fn n_cells(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_full(&self) -> bool {
        self.mask.iter().all(|&m| m)
    }

    pub fn area(&self) -> f64 {
        self.n_cells() as f64 * self.region.cell_area()
    }

    pub fn union(&self, other: &SubRegion) -> Result<SubRegion> {
        self.check_same(other)?;
        let mask = self.mask.iter().zip(&other.mask).map(|(a, b)| *a || *b).collect();
        Ok(SubRegion { region: self.region, mask })
    }

    pub fn is_disjoint(&self, other: &SubRegion) -> bool {
        self.region == other.region && !self.mask.iter().zip(&other.mask).any(|(a, b)| *a && *b)
    }

    /// Errors unless `self` lives on exactly this grid.
    pub fn check_region(&self, region: &Region) -> Result<()> {
        if &self.region != region {
            return Err(Error::Alignment("sub-region was built on a different grid".into()));
        }
        Ok(())
    }

    fn check_same(&self, other: &SubRegion) -> Result<()> {
        other.check_region(&self.region)
    }
}

/// Ordered vertex list; distance is measured to the union of its segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    vertices: Vec<Point>,
}

impl Polyline {
    pub fn new(vertices: Vec<Point>) -> Result<Self> {
        if vertices.len() < 2 {
            return Err(Error::Domain("a polyline needs at least two vertices".into()));
        }
        if vertices.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::Domain("polyline vertex is not finite".into()));
        }
        Ok(Self { vertices })
    }

    pub fn from_coords(coords: &[(f64, f64)]) -> Result<Self> {
        Self::new(coords.iter().map(|&(x, y)| Point::new(x, y)).collect())
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn distance(&self, p: &Point) -> f64 {
        self.vertices
            .windows(2)
            .map(|w| segment_distance(p, &w[0], &w[1]))
            .fold(f64::INFINITY, f64::min)
    }
}

pub fn segment_distance(p: &Point, a: &Point, b: &Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return p.dist(a);
    }
    let t = (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0);
    p.dist(&Point::new(a.x + t * dx, a.y + t * dy))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cells_tile_the_region() {
        let r = Region::new(-2.0, 3.0, 1.0, 2.0, 10, 4).unwrap();
        assert!((r.cell_area() * r.n_cells() as f64 - r.area()).abs() < 1e-12);
        for idx in 0..r.n_cells() {
            assert_eq!(r.cell_index(&r.cell_center(idx)), Some(idx));
        }
        assert_eq!(r.cell_index(&Point::new(3.0, 2.0)), Some(r.n_cells() - 1));
        assert_eq!(r.cell_index(&Point::new(3.1, 2.0)), None);
    }

    #[test]
    fn rect_subregions_must_align() {
        let r = Region::unit_square(10);
        let left = SubRegion::from_rect(&r, 0.0, 0.5, 0.0, 1.0).unwrap();
        assert_eq!(left.n_cells(), 50);
        assert!(matches!(SubRegion::from_rect(&r, 0.0, 0.55, 0.0, 1.0), Err(Error::Alignment(_))));
        let right = SubRegion::from_rect(&r, 0.5, 1.0, 0.0, 1.0).unwrap();
        assert!(left.is_disjoint(&right));
        assert!(left.union(&right).unwrap().is_full());
        let other = SubRegion::full(&Region::unit_square(5));
        assert!(left.union(&other).is_err());
    }

    #[test]
    fn segment_distance_cases() {
        let a = Point::new(0.0, 0.0);
        let b = Point::new(1.0, 0.0);
        assert_eq!(segment_distance(&Point::new(0.5, 0.0), &a, &b), 0.0);
        assert!((segment_distance(&Point::new(0.5, 2.0), &a, &b) - 2.0).abs() < 1e-15);
        assert!((segment_distance(&Point::new(2.0, 0.0), &a, &b) - 1.0).abs() < 1e-15);
        assert!(Polyline::from_coords(&[(0.0, 0.0)]).is_err());
    }

    #[test]
    fn border_distance_at_center() {
        let r = Region::unit_square(100);
        assert_eq!(r.distance_to_border(&r.center()), 0.5);
    }
}
