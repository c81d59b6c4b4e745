//! 2D kernel density estimation with an unnormalized Gaussian kernel.
//!
//! Three evaluation modes: at query points against a reference set,
//! self-excluded within one set, and on a regular grid (for the overlay
//! figures). The kernel argument is the bandwidth-scaled offset
//! `(dx/h_x, dy/h_y)`, with `sigma` applied inside the exponent; the
//! redundancy between sigma and the bandwidths is absorbed by defaulting
//! sigma to 1.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point2 = [f64; 2];

/// Truncation tolerance for the accelerated batch path.
const TRUNCATION_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdeParams {
    pub h_x: f64,
    pub h_y: f64,
    pub sigma: f64,
}

impl KdeParams {
    pub fn new(h_x: f64, h_y: f64, sigma: f64) -> Result<Self> {
        let p = KdeParams { h_x, h_y, sigma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("h_x", self.h_x), ("h_y", self.h_y), ("sigma", self.sigma)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Precondition(format!(
                    "KDE parameter {name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }
}

impl Default for KdeParams {
    fn default() -> Self {
        KdeParams {
            h_x: 1.0,
            h_y: 1.0,
            sigma: 1.0,
        }
    }
}

/// Which count divides the self-excluded sum: the full point count `m`
/// (as printed) or `m - 1` (the number of summed terms).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelfExcludedDivisor {
    #[default]
    M,
    MMinusOne,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    /// Grid node coordinates; nodes are evenly spaced and include both
    /// extents.
    pub fn node(&self, ix: usize, iy: usize) -> Point2 {
        let x = self.x_min + (self.x_max - self.x_min) * ix as f64 / (self.nx - 1) as f64;
        let y = self.y_min + (self.y_max - self.y_min) * iy as f64 / (self.ny - 1) as f64;
        [x, y]
    }
}

/// An evaluated KDE surface on a regular grid. `values` is row-major by
/// y: index `iy * nx + ix`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    pub params: KdeParams,
    pub grid: GridSpec,
    pub values: Vec<f32>,
    pub source_tag: String,
}

impl DensityField {
    pub fn value(&self, ix: usize, iy: usize) -> f32 {
        self.values[iy * self.grid.nx + ix]
    }

    pub fn max_value(&self) -> f32 {
        self.values.iter().copied().fold(0.0, f32::max)
    }

    /// Grid index (ix, iy) of the maximum value; first occurrence in
    /// storage order on ties.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0usize;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        (best % self.grid.nx, best / self.grid.nx)
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.grid.nx < 2 || self.grid.ny < 2 {
            return Err(Error::Precondition("grid must be at least 2x2".into()));
        }
        if self.values.len() != self.grid.nx * self.grid.ny {
            return Err(Error::InvalidRecord("field value count != nx*ny".into()));
        }
        if self.values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidRecord("field contains negative or non-finite values".into()));
        }
        Ok(())
    }
}

/// The unnormalized Gaussian kernel
/// `exp(-((ax-bx)^2 + (ay-by)^2) / (2 sigma^2))`.
pub fn kernel(a: Point2, b: Point2, sigma: f64) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
}

fn scaled_kernel_sum(query: Point2, reference: &[Point2], params: &KdeParams) -> f64 {
    let two_sigma_sq = 2.0 * params.sigma * params.sigma;
    reference
        .iter()
        .map(|r| {
            let u = (query[0] - r[0]) / params.h_x;
            let v = (query[1] - r[1]) / params.h_y;
            (-(u * u + v * v) / two_sigma_sq).exp()
        })
        .sum()
}

/// Density of `query` against a reference set:
/// `(1/(n h_x h_y)) * sum_j K((dx/h_x, dy/h_y))`.
pub fn kde_at(query: Point2, reference: &[Point2], params: &KdeParams) -> Result<f64> {
    params.validate()?;
    if reference.is_empty() {
        return Err(Error::Precondition("KDE reference set is empty".into()));
    }
    let n = reference.len() as f64;
    Ok(scaled_kernel_sum(query, reference, params) / (n * params.h_x * params.h_y))
}

/// Density of point `i` within its own set, excluding the self term.
/// The divisor is the full count `m` by default, as printed in the
/// defining formula, even though the sum has `m - 1` terms.
pub fn kde_self_excluded(i: usize, points: &[Point2], params: &KdeParams) -> Result<f64> {
    kde_self_excluded_with(i, points, params, SelfExcludedDivisor::M)
}

pub fn kde_self_excluded_with(
    i: usize,
    points: &[Point2],
    params: &KdeParams,
    divisor: SelfExcludedDivisor,
) -> Result<f64> {
    params.validate()?;
    let m = points.len();
    if m < 2 {
        return Err(Error::Precondition(format!(
            "self-excluded KDE needs >= 2 points, got {m}"
        )));
    }
    if i >= m {
        return Err(Error::Precondition(format!("index {i} out of range for {m} points")));
    }
    let two_sigma_sq = 2.0 * params.sigma * params.sigma;
    let q = points[i];
    let sum: f64 = points
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != i)
        .map(|(_, r)| {
            let u = (q[0] - r[0]) / params.h_x;
            let v = (q[1] - r[1]) / params.h_y;
            (-(u * u + v * v) / two_sigma_sq).exp()
        })
        .sum();
    let denom = match divisor {
        SelfExcludedDivisor::M => m as f64,
        SelfExcludedDivisor::MMinusOne => (m - 1) as f64,
    };
    Ok(sum / (denom * params.h_x * params.h_y))
}

/// Evaluate the KDE on a regular grid over the padded bounding box of the
/// points. A degenerate axis (all coordinates equal) is expanded to a
/// unit interval centered on the points.
pub fn kde_grid(
    points: &[Point2],
    params: &KdeParams,
    nx: usize,
    ny: usize,
    padding_fraction: f64,
    source_tag: &str,
) -> Result<DensityField> {
    params.validate()?;
    if points.is_empty() {
        return Err(Error::Precondition("KDE grid over empty point set".into()));
    }
    if nx < 2 || ny < 2 {
        return Err(Error::Precondition("grid must be at least 2x2".into()));
    }
    let mut x_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for p in points {
        x_min = x_min.min(p[0]);
        x_max = x_max.max(p[0]);
        y_min = y_min.min(p[1]);
        y_max = y_max.max(p[1]);
    }
    let expand = |min: &mut f64, max: &mut f64| {
        if *max - *min <= 0.0 {
            *min -= 0.5;
            *max += 0.5;
        } else {
            let pad = (*max - *min) * padding_fraction;
            *min -= pad;
            *max += pad;
        }
    };
    expand(&mut x_min, &mut x_max);
    expand(&mut y_min, &mut y_max);
    let grid = GridSpec {
        x_min,
        x_max,
        y_min,
        y_max,
        nx,
        ny,
    };
    let n = points.len() as f64;
    let norm = n * params.h_x * params.h_y;
    let values: Vec<f32> = (0..nx * ny)
        .into_par_iter()
        .map(|idx| {
            let node = grid.node(idx % nx, idx / nx);
            (scaled_kernel_sum(node, points, params) / norm) as f32
        })
        .collect();
    Ok(DensityField {
        params: *params,
        grid,
        values,
        source_tag: source_tag.to_string(),
    })
}

/// Scott's rule per axis: `h = n^(-1/6) * std(axis)`, sigma fixed at 1
/// (the scaling is carried entirely by the bandwidths).
pub fn default_bandwidth(points: &[Point2]) -> Result<KdeParams> {
    if points.len() < 2 {
        return Err(Error::Precondition("bandwidth selection needs >= 2 points".into()));
    }
    let n = points.len() as f64;
    let factor = n.powf(-1.0 / 6.0);
    let axis_stats = |axis: usize| -> (f64, f64) {
        let mean = points.iter().map(|p| p[axis]).sum::<f64>() / n;
        let var = points.iter().map(|p| (p[axis] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let range = points
            .iter()
            .map(|p| p[axis])
            .fold(f64::NEG_INFINITY, f64::max)
            - points.iter().map(|p| p[axis]).fold(f64::INFINITY, f64::min);
        (var.sqrt(), range)
    };
    let (std_x, range_x) = axis_stats(0);
    let (std_y, range_y) = axis_stats(1);
    let fallback = |other_range: f64| 1e-3 * (other_range + 1e-9);
    let h_x = if std_x > 0.0 {
        factor * std_x
    } else {
        log::warn!("zero variance on x axis, using fallback bandwidth");
        fallback(range_y)
    };
    let h_y = if std_y > 0.0 {
        factor * std_y
    } else {
        log::warn!("zero variance on y axis, using fallback bandwidth");
        fallback(range_x)
    };
    KdeParams::new(h_x, h_y, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    Exact,
    /// Skip reference points beyond `r_cut = sigma * sqrt(2 ln(1/eps))`
    /// in bandwidth-scaled space, using a uniform grid index over the
    /// reference set. Relative error on realistic inputs <= 1e-6.
    Truncated,
}

/// Batch density evaluation, deterministic and ordered by query index.
pub fn kde_batch(
    queries: &[Point2],
    reference: &[Point2],
    params: &KdeParams,
    mode: BatchMode,
) -> Result<Vec<f64>> {
    params.validate()?;
    if reference.is_empty() {
        return Err(Error::Precondition("KDE reference set is empty".into()));
    }
    if queries.is_empty() {
        return Ok(Vec::new());
    }
    match mode {
        BatchMode::Exact => {
            let n = reference.len() as f64;
            let norm = n * params.h_x * params.h_y;
            Ok(queries
                .par_iter()
                .map(|q| scaled_kernel_sum(*q, reference, params) / norm)
                .collect())
        }
        BatchMode::Truncated => Ok(kde_batch_truncated(queries, reference, params)),
    }
}

fn kde_batch_truncated(queries: &[Point2], reference: &[Point2], params: &KdeParams) -> Vec<f64> {
    let r_cut = params.sigma * (2.0 * (1.0 / TRUNCATION_EPS).ln()).sqrt();
    let r_cut_sq = r_cut * r_cut;
    let two_sigma_sq = 2.0 * params.sigma * params.sigma;

    // index reference points in bandwidth-scaled space, cell size r_cut
    let scaled: Vec<Point2> = reference
        .iter()
        .map(|p| [p[0] / params.h_x, p[1] / params.h_y])
        .collect();
    let cell_of = |p: &Point2| -> (i64, i64) {
        ((p[0] / r_cut).floor() as i64, (p[1] / r_cut).floor() as i64)
    };
    let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in scaled.iter().enumerate() {
        cells.entry(cell_of(p)).or_default().push(i);
    }

    let norm = reference.len() as f64 * params.h_x * params.h_y;
    queries
        .par_iter()
        .map(|q| {
            let sq = [q[0] / params.h_x, q[1] / params.h_y];
            let (cx, cy) = cell_of(&sq);
            let mut sum = 0.0f64;
            for dx in -1..=1 {
                for dy in -1..=1 {
                    if let Some(bucket) = cells.get(&(cx + dx, cy + dy)) {
                        for &i in bucket {
                            let du = sq[0] - scaled[i][0];
                            let dv = sq[1] - scaled[i][1];
                            let d_sq = du * du + dv * dv;
                            if d_sq <= r_cut_sq {
                                sum += (-d_sq / two_sigma_sq).exp();
                            }
                        }
                    }
                }
            }
            sum / norm
        })
        .collect()
}

fn sidecar_path(header_path: &Path) -> PathBuf {
    header_path.with_extension("field")
}

#[derive(Serialize, Deserialize)]
struct FieldHeader {
    params: KdeParams,
    grid: GridSpec,
    source_tag: String,
}

/// Persist a field as a JSON header plus an f32-LE binary sidecar
/// `<name>.field`.
pub fn save_density_field(field: &DensityField, header_path: &Path) -> Result<()> {
    field.validate()?;
    let header = FieldHeader {
        params: field.params,
        grid: field.grid,
        source_tag: field.source_tag.clone(),
    };
    std::fs::write(header_path, serde_json::to_string_pretty(&header)?)
        .map_err(|e| Error::io(header_path, e))?;
    let sidecar = sidecar_path(header_path);
    let inner = || -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&sidecar)?);
        for v in &field.values {
            f.write_all(&v.to_le_bytes())?;
        }
        f.flush()
    };
    inner().map_err(|e| Error::io(&sidecar, e))
}

pub fn load_density_field(header_path: &Path) -> Result<DensityField> {
    let header: FieldHeader =
        serde_json::from_str(&std::fs::read_to_string(header_path).map_err(|e| Error::io(header_path, e))?)?;
    let sidecar = sidecar_path(header_path);
    let bytes = std::fs::read(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let expected = header.grid.nx * header.grid.ny * 4;
    if bytes.len() != expected {
        return Err(Error::CacheFormat(format!(
            "{}: expected {expected} bytes, got {}",
            sidecar.display(),
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let field = DensityField {
        params: header.params,
        grid: header.grid,
        values,
        source_tag: header.source_tag,
    };
    field.validate()?;
    Ok(field)
}
