use crate::error::{Error, Result};
use crate::point_process::{IntensityField, Point, Region, SubRegion};

/// Default bandwidth as a fraction of the region width.
pub const DEFAULT_BANDWIDTH_FRACTION: f64 = 0.05;

/// Sum of isotropic Gaussian bumps centred on the events, each renormalised
/// to unit mass over the grid (border correction), so the field integrates to
/// the event count over the whole region.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelEstimate {
    pub bandwidth: f64,
    pub field: IntensityField,
}

impl KernelEstimate {
    pub fn integral(&self, omega: &SubRegion) -> Result<f64> {
        self.field.integrate(omega)
    }
}

pub fn kernel_intensity(points: &[Point], bandwidth: f64, region: &Region) -> Result<KernelEstimate> {
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::Domain(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    // bumps are negligible (< e^-32) beyond 8 bandwidths
    let reach = 8.0 * bandwidth;
    let (cw, ch) = (region.cell_width(), region.cell_height());
    let span = |lo: f64, origin: f64, step: f64, n: usize| {
        let a = ((lo - reach - origin) / step).floor().max(0.0) as usize;
        let b = (((lo + reach - origin) / step).ceil().max(0.0) as usize).min(n);
        a..b
    };
    let mut values = vec![0.0; region.n_cells()];
    let mut bump = Vec::new();
    for p in points {
        bump.clear();
        for j in span(p.y, region.y_min, ch, region.ny) {
            for i in span(p.x, region.x_min, cw, region.nx) {
                let idx = j * region.nx + i;
                bump.push((idx, (-region.cell_center(idx).dist2(p) * inv).exp()));
            }
        }
        let mass = bump.iter().map(|b| b.1).sum::<f64>() * region.cell_area();
        if mass > 0.0 {
            for &(idx, v) in &bump {
                values[idx] += v / mass;
            }
        } else {
            // bandwidth far below the cell size
            let idx = region.cell_index(p).ok_or_else(|| Error::Domain(format!("event {p:?} outside region")))?;
            values[idx] += 1.0 / region.cell_area();
        }
    }
    Ok(KernelEstimate { bandwidth, field: IntensityField::new(*region, values)? })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_pattern_gives_zero_field() {
        let r = Region::unit_square(20);
        let k = kernel_intensity(&[], 0.05, &r).unwrap();
        assert_eq!(k.integral(&SubRegion::full(&r)).unwrap(), 0.0);
        assert!(kernel_intensity(&[], 0.0, &r).is_err());
    }

    #[test]
    fn interior_points_keep_their_mass() {
        let r = Region::unit_square(100);
        let pts = [(0.3, 0.3), (0.5, 0.5), (0.7, 0.4), (0.4, 0.7), (0.6, 0.65)].map(|(x, y)| Point::new(x, y));
        let k = kernel_intensity(&pts, 0.05, &r).unwrap();
        let mass = k.integral(&SubRegion::full(&r)).unwrap();
        assert!((mass - 5.0).abs() / 5.0 < 0.05, "mass {mass}");
    }

    #[test]
    fn single_point_argmax() {
        let r = Region::unit_square(50);
        let p = Point::new(0.237, 0.611);
        let k = kernel_intensity(&[p], 0.05, &r).unwrap();
        let (argmax, _) =
            k.field.values().iter().enumerate().fold((0, f64::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
        assert_eq!(Some(argmax), r.cell_index(&p));
    }

    #[test]
    fn border_events_keep_their_mass() {
        let r = Region::unit_square(40);
        let pts = [(0.0, 0.0), (0.99, 0.5), (0.5, 0.01)].map(|(x, y)| Point::new(x, y));
        for bw in [0.05, 0.2, 1e-4] {
            let k = kernel_intensity(&pts, bw, &r).unwrap();
            let mass = k.integral(&SubRegion::full(&r)).unwrap();
            assert!((mass - 3.0).abs() < 1e-12, "bandwidth {bw}: mass {mass}");
        }
    }
}
