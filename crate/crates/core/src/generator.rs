//! Image generation from stored drifts.
//!
//! Everything here is noise-free: a latent point is decoded as given, so
//! outputs are pure functions of the parameters, the registry and the grid.

use crate::error::{Error, Result};
use crate::gradcore::Tensor;
use crate::model::{Level, Model, LATENT_DIM};
use crate::trainer::DriftRegistry;

/// Latent point for both levels, `[level][dim]`.
pub type Latent = [[f64; LATENT_DIM]; 2];

/// `(row, col, gx, gy, latent)` of one grid cell.
pub type GridPoint = (usize, usize, f64, f64, Latent);

/// A square grid of offsets added to one level's two latent coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub n_per_axis: usize,
    /// Offsets run over `[−span, span]`, in prior units.
    pub span: f64,
    pub varied_level: Level,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            n_per_axis: 15,
            span: 7.0,
            varied_level: Level::Coarse,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_axis < 2 {
            return Err(Error::invalid("a grid needs at least 2 points per axis"));
        }
        if !(self.span.is_finite() && self.span > 0.0) {
            return Err(Error::invalid(format!(
                "grid span must be positive, got {}",
                self.span
            )));
        }
        Ok(())
    }

    /// Equally spaced offsets; for odd counts the middle one is exactly 0.
    pub fn values(&self) -> Vec<f64> {
        let n = self.n_per_axis;
        let last = (n - 1) as f64;
        (0..n)
            .map(|i| self.span * (2.0 * i as f64 - last) / last)
            .collect()
    }

    pub fn cells(&self) -> usize {
        self.n_per_axis * self.n_per_axis
    }
}

/// One grid cell; `row` follows `gy`, `col` follows `gx`.
#[derive(Clone, Debug)]
pub struct GridCell {
    pub row: usize,
    pub col: usize,
    pub gx: f64,
    pub gy: f64,
    pub latent: Latent,
    pub image: Tensor,
}

fn drifts(registry: &DriftRegistry, index: usize) -> Result<Latent> {
    match (
        registry.drift(index, Level::Residual),
        registry.drift(index, Level::Coarse),
    ) {
        (Some(r), Some(c)) => Ok([r, c]),
        _ => Err(Error::invalid(format!(
            "registry has no drifts for observation {index} (it covers {})",
            registry.len()
        ))),
    }
}

/// Decodes an observation's stored drifts with zero noise.
pub fn decode_at(
    model: &Model,
    registry: &DriftRegistry,
    index: usize,
    class: u8,
) -> Result<Tensor> {
    model.decode_image(drifts(registry, index)?, class)
}

/// Latent points of the grid around `center`, row-major.
pub fn grid_latents(spec: &GridSpec, center: Latent) -> Result<Vec<GridPoint>> {
    spec.validate()?;
    let v = spec.values();
    let li = spec.varied_level.index();
    let mut out = Vec::with_capacity(spec.cells());
    for (row, &gy) in v.iter().enumerate() {
        for (col, &gx) in v.iter().enumerate() {
            let mut z = center;
            z[li] = [center[li][0] + gx, center[li][1] + gy];
            out.push((row, col, gx, gy, z));
        }
    }
    Ok(out)
}

fn decode_grid(model: &Model, spec: &GridSpec, center: Latent, class: u8) -> Result<Vec<GridCell>> {
    grid_latents(spec, center)?
        .into_iter()
        .map(|(row, col, gx, gy, latent)| {
            Ok(GridCell {
                row,
                col,
                gx,
                gy,
                latent,
                image: model.decode_image(latent, class)?,
            })
        })
        .collect()
}

/// Offsets one observation's drift over the grid and decodes every cell.
pub fn perturbation_grid(
    model: &Model,
    spec: &GridSpec,
    registry: &DriftRegistry,
    index: usize,
    class: u8,
) -> Result<Vec<GridCell>> {
    decode_grid(model, spec, drifts(registry, index)?, class)
}

/// The same grid around the all-zero latent.
pub fn zero_drift_baseline(model: &Model, spec: &GridSpec, class: u8) -> Result<Vec<GridCell>> {
    decode_grid(model, spec, [[0.0; LATENT_DIM]; 2], class)
}

/// Latent path `(1 − t)·μ_a + t·μ_b` at `steps` equally spaced `t` in `[0, 1]`.
pub fn interpolation_path(a: Latent, b: Latent, steps: usize) -> Result<Vec<Latent>> {
    if steps < 2 {
        return Err(Error::invalid("interpolation needs at least 2 steps"));
    }
    let last = (steps - 1) as f64;
    Ok((0..steps)
        .map(|k| {
            let t = k as f64 / last;
            let mut z = [[0.0; LATENT_DIM]; 2];
            for l in 0..2 {
                for d in 0..LATENT_DIM {
                    z[l][d] = (1.0 - t) * a[l][d] + t * b[l][d];
                }
            }
            z
        })
        .collect())
}

/// Decodes the straight latent path between two observations of one class.
pub fn interpolate(
    model: &Model,
    registry: &DriftRegistry,
    (index_a, class_a): (usize, u8),
    (index_b, class_b): (usize, u8),
    steps: usize,
) -> Result<Vec<Tensor>> {
    if class_a != class_b {
        return Err(Error::invalid(format!(
            "observations {index_a} and {index_b} have classes {class_a} and {class_b}; \
             decoders are class-specific"
        )));
    }
    interpolation_path(
        drifts(registry, index_a)?,
        drifts(registry, index_b)?,
        steps,
    )?
    .into_iter()
    .map(|z| model.decode_image(z, class_a))
    .collect()
}
