//! Shared 2D projection of embeddings: PCA fitted once (on the union of
//! both datasets) and applied to both, so the resulting densities live in
//! a common basis.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};

/// Above this input dimension the covariance matrix is not
/// eigendecomposed directly; subspace iteration is used instead.
pub const EXACT_EIGEN_MAX_DIM: usize = 1024;

const ITER_TOL: f64 = 1e-9;
const MAX_ITERS: usize = 50_000;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f32>,
    pub components: [Vec<f32>; 2],
    pub explained_variance: [f32; 2],
    pub fitted_on: String,
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        for row in &self.components {
            if row.len() != d {
                return Err(Error::InvalidRecord("component length != mean length".into()));
            }
            let norm: f64 = row.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-5 {
                return Err(Error::InvalidRecord(format!("component not unit norm: {norm}")));
            }
        }
        let dot: f64 = self.components[0]
            .iter()
            .zip(&self.components[1])
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum();
        if dot.abs() > 1e-5 {
            return Err(Error::InvalidRecord(format!("components not orthogonal: {dot}")));
        }
        if self.explained_variance[0] < self.explained_variance[1] || self.explained_variance[1] < 0.0
        {
            return Err(Error::InvalidRecord("explained variance out of order".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub id: String,
    pub x: f32,
    pub y: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitStrategy {
    /// Exact eigendecomposition for dim <= [`EXACT_EIGEN_MAX_DIM`],
    /// subspace iteration above.
    Auto,
    Exact,
    Iterative,
}

fn center(m: &EmbeddingMatrix) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (m.n_rows(), m.dim);
    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for (j, v) in m.row(i).iter().enumerate() {
            mean[j] += *v as f64;
        }
    }
    for v in &mut mean {
        *v /= n as f64;
    }
    let mut centered = vec![0.0f64; n * d];
    for i in 0..n {
        for (j, v) in m.row(i).iter().enumerate() {
            centered[i * d + j] = *v as f64 - mean[j];
        }
    }
    (mean, centered)
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix, returning
/// (eigenvalues, eigenvectors as rows), unsorted.
fn jacobi_eigen(mut a: Vec<f64>, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0f64; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..d {
            for q in (p + 1)..d {
                off += a[p * d + q].powi(2);
            }
        }
        if off.sqrt() < 1e-12 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eigenvalues: Vec<f64> = (0..d).map(|i| a[i * d + i]).collect();
    // transpose so eigenvectors are rows
    let mut rows = vec![0.0f64; d * d];
    for i in 0..d {
        for j in 0..d {
            rows[i * d + j] = v[j * d + i];
        }
    }
    (eigenvalues, rows)
}

fn top2_exact(centered: &[f64], n: usize, d: usize) -> ([Vec<f64>; 2], [f64; 2]) {
    let mut cov = vec![0.0f64; d * d];
    for row in centered.chunks(d) {
        for i in 0..d {
            let ri = row[i];
            if ri == 0.0 {
                continue;
            }
            for j in i..d {
                cov[i * d + j] += ri * row[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / denom;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    let (evals, evecs) = jacobi_eigen(cov, d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| evals[b].partial_cmp(&evals[a]).unwrap());
    let take = |idx: usize| evecs[order[idx] * d..(order[idx] + 1) * d].to_vec();
    (
        [take(0), take(1)],
        [evals[order[0]].max(0.0), evals[order[1]].max(0.0)],
    )
}

/// Apply the covariance operator implicitly: C v = Xc^T (Xc v) / (n-1).
fn apply_cov(centered: &[f64], n: usize, d: usize, v: &[f64]) -> Vec<f64> {
    let mut xv = vec![0.0f64; n];
    for (i, row) in centered.chunks(d).enumerate() {
        xv[i] = row.iter().zip(v).map(|(a, b)| a * b).sum();
    }
    let mut out = vec![0.0f64; d];
    for (i, row) in centered.chunks(d).enumerate() {
        let s = xv[i];
        if s == 0.0 {
            continue;
        }
        for (j, a) in row.iter().enumerate() {
            out[j] += a * s;
        }
    }
    let denom = (n - 1) as f64;
    for o in &mut out {
        *o /= denom;
    }
    out
}

fn orthonormalize(basis: &mut [Vec<f64>; 2]) {
    let norm0: f64 = basis[0].iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut basis[0] {
        *v /= norm0;
    }
    let dot: f64 = basis[0].iter().zip(&basis[1]).map(|(a, b)| a * b).sum();
    let b0 = basis[0].clone();
    for (v, u) in basis[1].iter_mut().zip(&b0) {
        *v -= dot * u;
    }
    let norm1: f64 = basis[1].iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut basis[1] {
        *v /= norm1;
    }
}

fn top2_iterative(centered: &[f64], n: usize, d: usize) -> ([Vec<f64>; 2], [f64; 2]) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e3779b97f4a7c15);
    let mut basis: [Vec<f64>; 2] = [
        (0..d).map(|_| StandardNormal.sample(&mut rng)).collect(),
        (0..d).map(|_| StandardNormal.sample(&mut rng)).collect(),
    ];
    orthonormalize(&mut basis);
    for _ in 0..MAX_ITERS {
        let mut next = [
            apply_cov(centered, n, d, &basis[0]),
            apply_cov(centered, n, d, &basis[1]),
        ];
        orthonormalize(&mut next);
        let drift = (1.0
            - basis[0]
                .iter()
                .zip(&next[0])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                .abs())
        .max(
            1.0 - basis[1]
                .iter()
                .zip(&next[1])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                .abs(),
        );
        basis = next;
        if drift < ITER_TOL {
            break;
        }
    }
    // Rayleigh-Ritz on the converged subspace to split the two axes
    let cb0 = apply_cov(centered, n, d, &basis[0]);
    let cb1 = apply_cov(centered, n, d, &basis[1]);
    let t00: f64 = basis[0].iter().zip(&cb0).map(|(a, b)| a * b).sum();
    let t01: f64 = basis[0].iter().zip(&cb1).map(|(a, b)| a * b).sum();
    let t11: f64 = basis[1].iter().zip(&cb1).map(|(a, b)| a * b).sum();
    let tr = t00 + t11;
    let det = t00 * t11 - t01 * t01;
    let disc = ((tr * tr / 4.0 - det).max(0.0)).sqrt();
    let l0 = tr / 2.0 + disc;
    let l1 = tr / 2.0 - disc;
    // eigenvector of the 2x2 [[t00,t01],[t01,t11]] for l0
    let (a0, b0) = if t01.abs() > 1e-300 {
        (l0 - t11, t01)
    } else if t00 >= t11 {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    let norm = (a0 * a0 + b0 * b0).sqrt();
    let (a0, b0) = (a0 / norm, b0 / norm);
    let comp0: Vec<f64> = basis[0]
        .iter()
        .zip(&basis[1])
        .map(|(u, v)| a0 * u + b0 * v)
        .collect();
    let comp1: Vec<f64> = basis[0]
        .iter()
        .zip(&basis[1])
        .map(|(u, v)| -b0 * u + a0 * v)
        .collect();
    ([comp0, comp1], [l0.max(0.0), l1.max(0.0)])
}

fn apply_sign_convention(comp: &mut [f64]) {
    let mut max_idx = 0;
    let mut max_abs = 0.0f64;
    for (i, v) in comp.iter().enumerate() {
        if v.abs() > max_abs {
            max_abs = v.abs();
            max_idx = i;
        }
    }
    if comp[max_idx] < 0.0 {
        for v in comp.iter_mut() {
            *v = -*v;
        }
    }
}

pub fn pca_fit(m: &EmbeddingMatrix) -> Result<PcaModel> {
    pca_fit_with_strategy(m, FitStrategy::Auto)
}

/// Fit the top-2 PCA of the sample covariance (denominator n-1).
/// Sign convention: each component's largest-|entry| is made positive, so
/// the fit is fully deterministic.
pub fn pca_fit_with_strategy(m: &EmbeddingMatrix, strategy: FitStrategy) -> Result<PcaModel> {
    m.validate()?;
    let (n, d) = (m.n_rows(), m.dim);
    if n < 3 {
        return Err(Error::Precondition(format!("PCA needs >= 3 rows, got {n}")));
    }
    if d < 2 {
        return Err(Error::Precondition(format!("PCA needs dim >= 2, got {d}")));
    }
    let (mean, centered) = center(m);
    let total_var: f64 = centered.iter().map(|v| v * v).sum::<f64>() / (n - 1) as f64;
    if total_var <= 1e-24 {
        return Err(Error::Precondition("zero-variance data: covariance has rank 0".into()));
    }
    let use_exact = match strategy {
        FitStrategy::Exact => true,
        FitStrategy::Iterative => false,
        FitStrategy::Auto => d <= EXACT_EIGEN_MAX_DIM,
    };
    let (mut comps, evs) = if use_exact {
        top2_exact(&centered, n, d)
    } else {
        top2_iterative(&centered, n, d)
    };
    apply_sign_convention(&mut comps[0]);
    apply_sign_convention(&mut comps[1]);
    Ok(PcaModel {
        mean: mean.iter().map(|v| *v as f32).collect(),
        components: [
            comps[0].iter().map(|v| *v as f32).collect(),
            comps[1].iter().map(|v| *v as f32).collect(),
        ],
        explained_variance: [evs[0] as f32, evs[1] as f32],
        fitted_on: m.model_tag.clone(),
    })
}

/// Project rows into the model's 2D basis: point = components . (row - mean).
pub fn pca_transform(model: &PcaModel, m: &EmbeddingMatrix) -> Result<Vec<ProjectedPoint>> {
    if m.dim != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: m.dim,
        });
    }
    let d = m.dim;
    let mut out = Vec::with_capacity(m.n_rows());
    for (i, id) in m.ids.iter().enumerate() {
        let row = m.row(i);
        let mut x = 0.0f64;
        let mut y = 0.0f64;
        for j in 0..d {
            let c = row[j] as f64 - model.mean[j] as f64;
            x += c * model.components[0][j] as f64;
            y += c * model.components[1][j] as f64;
        }
        out.push(ProjectedPoint {
            id: id.clone(),
            x: x as f32,
            y: y as f32,
        });
    }
    Ok(out)
}

pub fn save_pca_model(model: &PcaModel, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(model)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_pca_model(path: &Path) -> Result<PcaModel> {
    let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let model: PcaModel = serde_json::from_str(&json)?;
    model.validate()?;
    Ok(model)
}

pub fn load_points(path: &Path) -> Result<Vec<ProjectedPoint>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut points = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        points.push(serde_json::from_str(line)?);
    }
    Ok(points)
}
