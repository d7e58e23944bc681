use std::io::{BufRead, Write};

use super::geometry::{Region, SubRegion};
use crate::error::{Error, Result};

/// Real values on the cells of a region (covariates, distances).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    region: Region,
    values: Vec<f64>,
}

impl Grid {
    pub fn new(region: Region, values: Vec<f64>) -> Result<Self> {
        if values.len() != region.n_cells() {
            return Err(Error::Shape(format!(
                "{} values for a {}x{} grid",
                values.len(),
                region.nx,
                region.ny
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("grid value at cell {i} is not finite")));
        }
        Ok(Self { region, values })
    }

    pub fn constant(region: Region, value: f64) -> Result<Self> {
        Self::new(region, vec![value; region.n_cells()])
    }

    pub fn from_fn(region: Region, f: impl Fn(super::Point) -> f64) -> Result<Self> {
        let values = region.cell_centers().map(f).collect();
        Self::new(region, values)
    }

    pub fn region(&self) -> &Region {
        &self.region
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, idx: usize) -> f64 {
        self.values[idx]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Grid> {
        Grid::new(self.region, self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let r = &self.region;
        writeln!(
            w,
            "# nx={} ny={} x_min={} x_max={} y_min={} y_max={}",
            r.nx, r.ny, r.x_min, r.x_max, r.y_min, r.y_max
        )?;
        for row in self.values.chunks(r.nx) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(reader: R) -> Result<Grid> {
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or(Error::Parse { line: 1, msg: "empty grid file".into() })??;
        let region = parse_header(&header)?;
        let mut values = Vec::with_capacity(region.n_cells());
        for (k, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            for tok in line.split(',') {
                let v: f64 = tok
                    .trim()
                    .parse()
                    .map_err(|e| Error::Parse { line: k + 2, msg: format!("{tok:?}: {e}") })?;
                values.push(v);
            }
        }
        Grid::new(region, values)
    }
}

fn parse_header(header: &str) -> Result<Region> {
    let bad = |msg: String| Error::Parse { line: 1, msg };
    let body = header
        .strip_prefix('#')
        .ok_or_else(|| bad("grid header must start with '#'".into()))?;
    let get = |key: &str| -> Result<String> {
        body.split_whitespace()
            .find_map(|kv| kv.strip_prefix(key).and_then(|rest| rest.strip_prefix('=')))
            .map(str::to_owned)
            .ok_or_else(|| bad(format!("missing {key}")))
    };
    let num = |s: String| s.parse::<f64>().map_err(|e| bad(e.to_string()));
    let int = |s: String| s.parse::<usize>().map_err(|e| bad(e.to_string()));
    let nx = int(get("nx")?)?;
    let ny = int(get("ny")?)?;
    Region::new(
        num(get("x_min")?)?,
        num(get("x_max")?)?,
        num(get("y_min")?)?,
        num(get("y_max")?)?,
        nx,
        ny,
    )
}

/// Nonnegative intensity λ on the grid, read as the value at each cell center.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityField {
    grid: Grid,
    max: f64,
}

impl IntensityField {
    pub fn new(region: Region, values: Vec<f64>) -> Result<Self> {
        Self::from_grid(Grid::new(region, values)?)
    }

    pub fn from_grid(grid: Grid) -> Result<Self> {
        if let Some(i) = grid.values.iter().position(|&v| v < 0.0) {
            return Err(Error::Domain(format!("negative intensity {} at cell {i}", grid.values[i])));
        }
        let max = grid.values.iter().copied().fold(0.0, f64::max);
        Ok(Self { grid, max })
    }

    pub fn constant(region: Region, value: f64) -> Result<Self> {
        Self::from_grid(Grid::constant(region, value)?)
    }

    pub fn zeros(region: Region) -> Self {
        Self::constant(region, 0.0).expect("zero is a valid intensity")
    }

    pub fn from_fn(region: Region, f: impl Fn(super::Point) -> f64) -> Result<Self> {
        Self::from_grid(Grid::from_fn(region, f)?)
    }

    pub fn region(&self) -> &Region {
        self.grid.region()
    }

    pub fn values(&self) -> &[f64] {
        self.grid.values()
    }

    pub fn get(&self, idx: usize) -> f64 {
        self.grid.get(idx)
    }

    pub fn max(&self) -> f64 {
        self.max
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn into_grid(self) -> Grid {
        self.grid
    }

    /// Expected count in ω: midpoint rule over the cells of ω.
    pub fn integrate(&self, omega: &SubRegion) -> Result<f64> {
        omega.check_region(self.region())?;
        let sum: f64 = omega.cells().map(|c| self.grid.values[c]).sum();
        Ok(sum * self.region().cell_area())
    }

    pub fn integrate_all(&self) -> f64 {
        self.grid.values.iter().sum::<f64>() * self.region().cell_area()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        self.grid.write_csv(w)
    }

    pub fn read_csv<R: BufRead>(reader: R) -> Result<Self> {
        Self::from_grid(Grid::read_csv(reader)?)
    }
}

/// ∫_ω field ds via the midpoint rule.
pub fn integrate_intensity(field: &IntensityField, omega: &SubRegion) -> Result<f64> {
    field.integrate(omega)
}
