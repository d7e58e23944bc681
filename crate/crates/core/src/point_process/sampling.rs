use rand::Rng;
use rand_distr::{Distribution, Poisson};

use super::field::IntensityField;
use super::geometry::{Point, Region, SubRegion};
use super::pattern::{PatternKind, PointPattern};
use crate::error::{Error, Result};

/// Rejection envelope as a multiple of the field maximum.
pub const ENVELOPE_FACTOR: f64 = 1.1;

/// Draws a Poisson count; a zero mean yields zero.
pub fn poisson_count<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|d| d.sample(rng) as u64).unwrap_or(0)
}

fn uniform_in_region<R: Rng + ?Sized>(region: &Region, rng: &mut R) -> Point {
    Point::new(
        region.x_min + rng.gen::<f64>() * region.width(),
        region.y_min + rng.gen::<f64>() * region.height(),
    )
}

/// Inhomogeneous Poisson sample by thinning a homogeneous process at `1.1 × max λ`.
pub fn sample_points<R: Rng + ?Sized>(field: &IntensityField, rng: &mut R) -> Vec<Point> {
    let region = field.region();
    let envelope = ENVELOPE_FACTOR * field.max();
    if envelope <= 0.0 {
        return Vec::new();
    }
    let n = poisson_count(envelope * region.area(), rng);
    let mut out = Vec::new();
    for _ in 0..n {
        let p = uniform_in_region(region, rng);
        let u: f64 = rng.gen();
        let cell = region.cell_index(&p).expect("candidate drawn inside region");
        if u * envelope < field.get(cell) {
            out.push(p);
        }
    }
    out
}

pub fn sample_pattern<R: Rng + ?Sized>(
    field: &IntensityField,
    time_index: usize,
    kind: PatternKind,
    rng: &mut R,
) -> PointPattern {
    let pts = sample_points(field, rng);
    PointPattern::new(time_index, kind, pts, field.region()).expect("samples lie inside the region")
}

/// Thinning sampler restricted to the cells of ω with a cell-wise envelope.
///
/// Candidates are drawn from the piecewise-constant envelope and accepted
/// with probability `λ(cell) / envelope(cell)`, where `λ` is supplied lazily.
/// The accepted points follow the Poisson law of `λ` on ω, without ever
/// materialising `λ` on the full grid.
#[derive(Debug, Clone)]
pub struct CellEnvelope {
    region: Region,
    cells: Vec<usize>,
    envelope: Vec<f64>,
    cumulative: Vec<f64>,
    total: f64,
}

impl CellEnvelope {
    pub fn new(envelope: &IntensityField, omega: &SubRegion) -> Result<Self> {
        omega.check_region(envelope.region())?;
        let region = *envelope.region();
        let area = region.cell_area();
        let mut cells = Vec::new();
        let mut env = Vec::new();
        let mut cumulative = Vec::new();
        let mut acc = 0.0;
        for c in omega.cells() {
            let v = envelope.get(c);
            if v > 0.0 {
                acc += v * area;
                cells.push(c);
                env.push(v);
                cumulative.push(acc);
            }
        }
        Ok(Self { region, cells, envelope: env, cumulative, total: acc })
    }

    pub fn total_mass(&self) -> f64 {
        self.total
    }

    /// Visits every accepted point; `intensity(cell, point)` must not exceed the envelope.
    pub fn thin<R, F>(&self, rng: &mut R, mut intensity: F) -> Result<Vec<Point>>
    where
        R: Rng + ?Sized,
        F: FnMut(usize, &Point) -> f64,
    {
        let mut out = Vec::new();
        self.visit(rng, |cell, p, env, u| {
            let lam = intensity(cell, &p);
            if lam > env * (1.0 + 1e-12) {
                return Err(Error::Domain(format!("intensity {lam} exceeds envelope {env} at cell {cell}")));
            }
            if u * env < lam {
                out.push(p);
            }
            Ok(())
        })?;
        Ok(out)
    }

    fn visit<R, F>(&self, rng: &mut R, mut f: F) -> Result<()>
    where
        R: Rng + ?Sized,
        F: FnMut(usize, Point, f64, f64) -> Result<()>,
    {
        let n = poisson_count(self.total, rng);
        let (w, h) = (self.region.cell_width(), self.region.cell_height());
        for _ in 0..n {
            let target = rng.gen::<f64>() * self.total;
            let k = self.cumulative.partition_point(|&c| c <= target).min(self.cells.len() - 1);
            let cell = self.cells[k];
            let (i, j) = (cell % self.region.nx, cell / self.region.nx);
            let p = Point::new(
                self.region.x_min + (i as f64 + rng.gen::<f64>()) * w,
                self.region.y_min + (j as f64 + rng.gen::<f64>()) * h,
            );
            let u: f64 = rng.gen();
            f(cell, p, self.envelope[k], u)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_field_is_always_empty() {
        let f = IntensityField::zeros(Region::unit_square(20));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert!(sample_points(&f, &mut rng).is_empty());
        }
    }

    #[test]
    fn sampling_is_deterministic_given_seed() {
        let f = IntensityField::from_fn(Region::unit_square(20), |p| 30.0 * p.x).unwrap();
        let a = sample_points(&f, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_points(&f, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert!(!a.is_empty());
    }

    #[test]
    fn constant_rate_mean_count() {
        // 10,000 draws of a rate-5 process: mean within 3 standard errors of 5.
        let f = IntensityField::constant(Region::unit_square(10), 5.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 10_000;
        let total: usize = (0..n).map(|_| sample_points(&f, &mut rng).len()).sum();
        let mean = total as f64 / n as f64;
        assert!((mean - 5.0).abs() <= 3.0 * (5.0f64 / n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn thinning_matches_expected_count() {
        let r = Region::unit_square(16);
        let lam = IntensityField::from_fn(r, |p| 40.0 * p.x * p.y).unwrap();
        let env = IntensityField::constant(r, 45.0).unwrap();
        let omega = SubRegion::from_rect(&r, 0.5, 1.0, 0.0, 1.0).unwrap();
        let sampler = CellEnvelope::new(&env, &omega).unwrap();
        let expected = lam.integrate(&omega).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let reps = 4000;
        let mut total = 0usize;
        for _ in 0..reps {
            let pts = sampler.thin(&mut rng, |c, _| lam.get(c)).unwrap();
            assert!(pts.iter().all(|p| omega.contains_point(p)));
            total += pts.len();
        }
        let mean = total as f64 / reps as f64;
        assert!((mean - expected).abs() < 4.0 * (expected / reps as f64).sqrt(), "{mean} vs {expected}");
    }

    #[test]
    fn thinning_rejects_intensity_above_envelope() {
        let r = Region::unit_square(4);
        let env = IntensityField::constant(r, 50.0).unwrap();
        let sampler = CellEnvelope::new(&env, &SubRegion::full(&r)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sampler.thin(&mut rng, |_, _| 60.0).is_err());
    }
}
