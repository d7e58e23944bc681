use rand::Rng;

use super::params::GenParams;
use crate::error::{Error, Result};
use crate::point_process::{
    distance_field, sample_points, DistanceTarget, Grid, IntensityField, PatternKind, PointPattern, Polyline, Region,
};

const MAX_ANCHOR_DRAWS: usize = 10_000;

/// The four time-invariant covariate grids plus the anchor patterns behind X3 and X4.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateSet {
    pub grids: [Grid; 4],
    pub anchors3: PointPattern,
    pub anchors4: PointPattern,
}

impl CovariateSet {
    pub fn region(&self) -> &Region {
        self.grids[0].region()
    }

    /// `coeffs · X(s)` at every cell.
    pub fn linear_term(&self, coeffs: &[f64; 4]) -> Vec<f64> {
        let n = self.region().n_cells();
        (0..n)
            .map(|c| coeffs.iter().zip(&self.grids).map(|(b, g)| b * g.get(c)).sum())
            .collect()
    }
}

/// The two synthetic roads: the main diagonal and a five-vertex arc.
pub fn default_roads() -> Vec<Polyline> {
    vec![
        Polyline::from_coords(&[(0.0, 0.0), (1.0, 1.0)]).expect("static road"),
        Polyline::from_coords(&[(0.05, 0.30), (0.30, 0.55), (0.50, 0.62), (0.70, 0.55), (0.95, 0.30)])
            .expect("static road"),
    ]
}

/// X1 = e^{-3 D_road} + ln D_border, X2 = e^{-3 D_center}, X3 = e^{D_anchor3}, X4 = e^{D_anchor4}.
///
/// Border distances are floored at half a cell before the log. Anchor
/// patterns are drawn from `exp(a0 + a1 X1)` and redrawn until nonempty.
pub fn build_covariates<R: Rng + ?Sized>(
    region: &Region,
    roads: &[Polyline],
    params: &GenParams,
    rng: &mut R,
) -> Result<CovariateSet> {
    params.validate()?;
    if roads.is_empty() {
        return Err(Error::Domain("at least one road is required".into()));
    }
    let d_road = distance_field(DistanceTarget::Polylines(roads), region)?;
    let d_border = distance_field(DistanceTarget::Border, region)?;
    let d_center = distance_field(DistanceTarget::Center, region)?;
    let floor = 0.5 * region.cell_width().min(region.cell_height());
    let x1 = Grid::new(
        *region,
        d_road
            .values()
            .iter()
            .zip(d_border.values())
            .map(|(&d1, &d2)| (-3.0 * d1).exp() + d2.max(floor).ln())
            .collect(),
    )?;
    let x2 = d_center.map(|d| (-3.0 * d).exp())?;

    let lambda3 = IntensityField::from_grid(x1.map(|v| (params.a3_0 + params.a3_1 * v).exp())?)?;
    let lambda4 = IntensityField::from_grid(x1.map(|v| (params.a4_0 + params.a4_1 * v).exp())?)?;
    let anchors3 = draw_nonempty(&lambda3, rng)?;
    let anchors4 = draw_nonempty(&lambda4, rng)?;
    let x3 = distance_field(DistanceTarget::Points(anchors3.points()), region)?.map(f64::exp)?;
    let x4 = distance_field(DistanceTarget::Points(anchors4.points()), region)?.map(f64::exp)?;
    Ok(CovariateSet { grids: [x1, x2, x3, x4], anchors3, anchors4 })
}

fn draw_nonempty<R: Rng + ?Sized>(field: &IntensityField, rng: &mut R) -> Result<PointPattern> {
    for _ in 0..MAX_ANCHOR_DRAWS {
        let pts = sample_points(field, rng);
        if !pts.is_empty() {
            return PointPattern::new(0, PatternKind::CovariateAnchor, pts, field.region());
        }
    }
    Err(Error::Domain(format!(
        "anchor intensity (mass {:.3e}) produced no points in {MAX_ANCHOR_DRAWS} draws",
        field.integrate_all()
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn x1_at_center_with_road_through_center() {
        let r = Region::unit_square(101);
        let cov = build_covariates(&r, &default_roads(), &GenParams::default(), &mut stream(3)).unwrap();
        let mid = 50 * 101 + 50;
        let expected = 1.0 + 0.5f64.ln();
        assert!((cov.grids[0].get(mid) - expected).abs() < 1e-12);
        assert!((expected - 0.3069).abs() < 1e-4);
        assert_eq!(cov.grids[1].get(mid), 1.0);
    }

    #[test]
    fn anchor_intensity_at_zero_x1() {
        let p = GenParams::default();
        assert!(((p.a3_0 + p.a3_1 * 0.0f64).exp() - 0.8187).abs() < 1e-4);
    }

    #[test]
    fn covariates_are_reproducible_and_finite() {
        let r = Region::unit_square(40);
        let p = GenParams::default();
        let a = build_covariates(&r, &default_roads(), &p, &mut stream(11)).unwrap();
        let b = build_covariates(&r, &default_roads(), &p, &mut stream(11)).unwrap();
        assert_eq!(a, b);
        assert!(!a.anchors3.is_empty() && !a.anchors4.is_empty());
        assert!(a.grids.iter().all(|g| g.values().iter().all(|v| v.is_finite())));
        // border cells are floored at half a cell, not -inf
        let min_x1 = a.grids[0].values().iter().copied().fold(f64::MAX, f64::min);
        assert!(min_x1 >= (0.5f64 / 40.0).ln() - 1e-12);
    }

    #[test]
    fn no_roads_is_an_error() {
        let r = Region::unit_square(10);
        assert!(build_covariates(&r, &[], &GenParams::default(), &mut stream(1)).is_err());
    }
}
