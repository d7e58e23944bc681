use std::ops::RangeInclusive;

use super::dataset::Dataset;
use crate::error::{Error, Result};
use crate::point_process::IntensityField;

/// h(s) = max(c · ln λ(s), 0); cells with λ = 0 map to 0.
pub fn intervene(field: &IntensityField, c: f64) -> Result<IntensityField> {
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::Domain(format!("intervention magnitude must be positive, got {c}")));
    }
    let values = field.values().iter().map(|&v| if v > 0.0 { (c * v.ln()).max(0.0) } else { 0.0 }).collect();
    IntensityField::new(*field.region(), values)
}

/// Intervention distribution F_H: for each step j, treatments are drawn from a
/// Poisson process with intensity h_j. The last `duration` steps before (and
/// including) t are intervened when targeting N_t.
#[derive(Debug, Clone)]
pub struct InterventionSpec {
    duration: usize,
    magnitude: f64,
    fields: Vec<IntensityField>,
}

impl InterventionSpec {
    /// `fields[j - 1]` is h_j for j = 1..=T.
    pub fn new(duration: usize, magnitude: f64, fields: Vec<IntensityField>) -> Result<Self> {
        if duration == 0 {
            return Err(Error::Config("intervention duration M must be at least 1".into()));
        }
        if duration > fields.len() {
            return Err(Error::Config(format!("M = {duration} exceeds the series length {}", fields.len())));
        }
        if !(magnitude > 0.0) || !magnitude.is_finite() {
            return Err(Error::Config(format!("intervention magnitude must be positive, got {magnitude}")));
        }
        Ok(Self { duration, magnitude, fields })
    }

    /// h_j = max(c ln λ_{Z_j}, 0) applied to the given treatment intensities.
    pub fn from_treatment_fields(duration: usize, magnitude: f64, treatment_fields: &[IntensityField]) -> Result<Self> {
        let fields = treatment_fields.iter().map(|f| intervene(f, magnitude)).collect::<Result<Vec<_>>>()?;
        Self::new(duration, magnitude, fields)
    }

    /// Uses the generating treatment intensities of a synthetic dataset.
    pub fn from_dataset(dataset: &Dataset, duration: usize, magnitude: f64) -> Result<Self> {
        let fields = (1..=dataset.len()).map(|t| dataset.treatment_field(t)).collect::<Result<Vec<_>>>()?;
        Self::from_treatment_fields(duration, magnitude, &fields)
    }

    pub fn duration(&self) -> usize {
        self.duration
    }

    pub fn magnitude(&self) -> f64 {
        self.magnitude
    }

    pub fn series_length(&self) -> usize {
        self.fields.len()
    }

    pub fn field(&self, j: usize) -> &IntensityField {
        &self.fields[j - 1]
    }

    pub fn fields(&self) -> &[IntensityField] {
        &self.fields
    }

    /// Steps t-M+1..=t.
    pub fn window(&self, t: usize) -> Result<RangeInclusive<usize>> {
        if t < self.duration || t > self.fields.len() {
            return Err(Error::Domain(format!(
                "t = {t} outside {}..={} for M = {}",
                self.duration,
                self.fields.len(),
                self.duration
            )));
        }
        Ok(t + 1 - self.duration..=t)
    }

    /// Target steps M..=T.
    pub fn targets(&self) -> RangeInclusive<usize> {
        self.duration..=self.fields.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::point_process::Region;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        let r = Region::unit_square(4);
        let e = IntensityField::constant(r, 1.0f64.exp()).unwrap();
        assert!(intervene(&e, 3.0).unwrap().values().iter().all(|&v| (v - 3.0).abs() < 1e-12));
        let one = IntensityField::constant(r, 1.0).unwrap();
        assert!(intervene(&one, 5.0).unwrap().values().iter().all(|&v| v == 0.0));
        let half = IntensityField::constant(r, 0.5).unwrap();
        assert!(intervene(&half, 7.0).unwrap().values().iter().all(|&v| v == 0.0));
        assert!(intervene(&IntensityField::zeros(r), 2.0).unwrap().values().iter().all(|&v| v == 0.0));
        assert!(intervene(&e, 0.0).is_err());
    }

    #[test]
    fn spec_validation_and_windows() {
        let r = Region::unit_square(2);
        let fields = vec![IntensityField::constant(r, 2.0).unwrap(); 5];
        assert!(InterventionSpec::new(6, 3.0, fields.clone()).is_err());
        assert!(InterventionSpec::new(0, 3.0, fields.clone()).is_err());
        let spec = InterventionSpec::new(3, 3.0, fields).unwrap();
        assert_eq!(spec.window(3).unwrap(), 1..=3);
        assert_eq!(spec.window(5).unwrap(), 3..=5);
        assert!(spec.window(2).is_err());
        assert_eq!(spec.targets(), 3..=5);
    }

    proptest! {
        #[test]
        fn monotone_in_magnitude(vals in proptest::collection::vec(0.0f64..100.0, 16), c1 in 0.1f64..10.0, dc in 0.0f64..10.0) {
            let f = IntensityField::new(Region::unit_square(4), vals).unwrap();
            let a = intervene(&f, c1).unwrap();
            let b = intervene(&f, c1 + dc).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!(x <= y);
                prop_assert!(*x >= 0.0);
            }
        }
    }
}
