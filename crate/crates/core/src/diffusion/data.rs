use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{Rng, Tensor};

/// Isotropic Gaussians with equal weights centered evenly on a circle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaussianMixture {
    pub components: usize,
    pub radius: f64,
    pub sigma: f64,
}

impl Default for GaussianMixture {
    fn default() -> Self {
        Self { components: 8, radius: 4.0, sigma: 0.1 }
    }
}

impl GaussianMixture {
    pub fn centers(&self) -> Vec<[f64; 2]> {
        (0..self.components)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / self.components as f64;
                [self.radius * a.cos(), self.radius * a.sin()]
            })
            .collect()
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Tensor> {
        if self.components == 0 {
            return Err(invalid("mixture needs at least one component"));
        }
        let centers = self.centers();
        let mut data = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let c = centers[rng.below(self.components)];
            data.push(c[0] + self.sigma * rng.normal());
            data.push(c[1] + self.sigma * rng.normal());
        }
        Tensor::new(vec![n, 2], data)
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => invalid(format!("malformed CSV: {other:?}")),
    }
}

/// Reads a CSV of numeric rows with a header line.
pub fn read_csv(path: &Path) -> Result<Tensor> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let cols = reader.headers().map_err(csv_err)?.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        for field in record.iter() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| invalid(format!("{}: row {}: not a number: {field:?}", path.display(), rows + 1)))?;
            if !v.is_finite() {
                return Err(invalid(format!("{}: row {}: non-finite value", path.display(), rows + 1)));
            }
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(invalid(format!("{}: no data rows", path.display())));
    }
    Tensor::new(vec![rows, cols], data)
}

/// Writes rows with a header `x0,x1,…`. An empty tensor yields a header only.
pub fn write_csv(path: &Path, data: &Tensor, cols: usize) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(csv_err)?;
    writer.write_record((0..cols).map(|c| format!("x{c}"))).map_err(csv_err)?;
    for r in 0..data.rows() {
        writer.write_record(data.row(r).iter().map(|v| format!("{v:?}"))).map_err(csv_err)?;
    }
    writer.flush()?;
    Ok(())
}
