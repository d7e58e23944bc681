//! Spatial geometry, grid-valued intensity fields and Poisson point-process
//! sampling.
//!
//! Everything here is immutable after construction; sampling takes an explicit
//! RNG so results are reproducible from a seed.

mod distance;
mod field;
mod geometry;
mod pattern;
mod poisson;
mod sampling;

pub use distance::{
    distance_at, distance_field, empty_set_distance, nearest_point_distance, nearest_point_distances,
    DistanceTarget,
};
pub use field::{integrate_intensity, Grid, IntensityField};
pub use geometry::{segment_distance, Point, Polyline, Region, SubRegion};
pub use pattern::{read_patterns_csv, write_patterns_csv, PatternKind, PointPattern};
pub use poisson::{poisson_log_pmf, poisson_pmf};
pub use sampling::{poisson_count, sample_pattern, sample_points, CellEnvelope, ENVELOPE_FACTOR};
