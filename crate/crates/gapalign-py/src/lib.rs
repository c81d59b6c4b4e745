//! Python bindings for the gapalign core: KDE, PCA projection,
//! difference-set extraction, reservoir sampling, prompt rendering, and
//! the SVG overlay renderer.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use gapalign::corpus_io;
use gapalign::density::{self, BatchMode, DensityField, GridSpec, KdeParams};
use gapalign::diffset::{self, DiffsetConfig};
use gapalign::embedding::{self, EmbeddingMatrix};
use gapalign::projection::{self, ProjectedPoint};
use gapalign::rewrite::{self, PromptKind, PromptTemplate};
use gapalign::viz;

fn err(e: gapalign::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn params(h_x: f64, h_y: f64, sigma: f64) -> PyResult<KdeParams> {
    KdeParams::new(h_x, h_y, sigma).map_err(err)
}

#[pyfunction]
fn kernel(a: (f64, f64), b: (f64, f64), sigma: f64) -> f64 {
    density::kernel([a.0, a.1], [b.0, b.1], sigma)
}

#[pyfunction]
#[pyo3(signature = (query, reference, h_x=1.0, h_y=1.0, sigma=1.0))]
fn kde_at(
    query: (f64, f64),
    reference: Vec<(f64, f64)>,
    h_x: f64,
    h_y: f64,
    sigma: f64,
) -> PyResult<f64> {
    let refs: Vec<[f64; 2]> = reference.iter().map(|p| [p.0, p.1]).collect();
    density::kde_at([query.0, query.1], &refs, &params(h_x, h_y, sigma)?).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (i, points, h_x=1.0, h_y=1.0, sigma=1.0))]
fn kde_self_excluded(
    i: usize,
    points: Vec<(f64, f64)>,
    h_x: f64,
    h_y: f64,
    sigma: f64,
) -> PyResult<f64> {
    let pts: Vec<[f64; 2]> = points.iter().map(|p| [p.0, p.1]).collect();
    density::kde_self_excluded(i, &pts, &params(h_x, h_y, sigma)?).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (queries, reference, h_x=1.0, h_y=1.0, sigma=1.0, truncated=false))]
fn kde_batch(
    queries: Vec<(f64, f64)>,
    reference: Vec<(f64, f64)>,
    h_x: f64,
    h_y: f64,
    sigma: f64,
    truncated: bool,
) -> PyResult<Vec<f64>> {
    let qs: Vec<[f64; 2]> = queries.iter().map(|p| [p.0, p.1]).collect();
    let refs: Vec<[f64; 2]> = reference.iter().map(|p| [p.0, p.1]).collect();
    let mode = if truncated { BatchMode::Truncated } else { BatchMode::Exact };
    density::kde_batch(&qs, &refs, &params(h_x, h_y, sigma)?, mode).map_err(err)
}

/// Scott's-rule bandwidth, returned as (h_x, h_y, sigma).
#[pyfunction]
fn default_bandwidth(points: Vec<(f64, f64)>) -> PyResult<(f64, f64, f64)> {
    let pts: Vec<[f64; 2]> = points.iter().map(|p| [p.0, p.1]).collect();
    let p = density::default_bandwidth(&pts).map_err(err)?;
    Ok((p.h_x, p.h_y, p.sigma))
}

#[pyfunction]
fn mock_embedding(text: &str, dim: usize) -> Vec<f32> {
    embedding::mock_embedding(text, dim)
}

/// One-pass uniform sample of k items; deterministic under the seed.
#[pyfunction]
fn reservoir_sample(items: Vec<PyObject>, k: usize, seed: u64) -> PyResult<Vec<PyObject>> {
    corpus_io::reservoir_sample(items.into_iter().map(gapalign::Result::Ok), k, seed).map_err(err)
}

#[pyclass(name = "PcaModel")]
struct PyPcaModel {
    inner: projection::PcaModel,
}

#[pymethods]
impl PyPcaModel {
    /// Fit on row-major data (a list of equal-length float rows).
    #[staticmethod]
    fn fit(rows: Vec<Vec<f32>>) -> PyResult<Self> {
        let m = matrix_from_rows(rows)?;
        Ok(PyPcaModel { inner: projection::pca_fit(&m).map_err(err)? })
    }

    fn transform(&self, rows: Vec<Vec<f32>>) -> PyResult<Vec<(f32, f32)>> {
        let m = matrix_from_rows(rows)?;
        let pts = projection::pca_transform(&self.inner, &m).map_err(err)?;
        Ok(pts.into_iter().map(|p| (p.x, p.y)).collect())
    }

    #[getter]
    fn mean(&self) -> Vec<f32> {
        self.inner.mean.clone()
    }

    #[getter]
    fn components(&self) -> (Vec<f32>, Vec<f32>) {
        (self.inner.components[0].clone(), self.inner.components[1].clone())
    }

    #[getter]
    fn explained_variance(&self) -> (f32, f32) {
        (self.inner.explained_variance[0], self.inner.explained_variance[1])
    }
}

fn matrix_from_rows(rows: Vec<Vec<f32>>) -> PyResult<EmbeddingMatrix> {
    let n = rows.len();
    let dim = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != dim) {
        return Err(PyValueError::new_err("rows have inconsistent lengths"));
    }
    let m = EmbeddingMatrix {
        ids: (0..n).map(|i| format!("row{i}")).collect(),
        dim,
        data: rows.into_iter().flatten().collect(),
        model_tag: "python".into(),
    };
    m.validate().map_err(err)?;
    Ok(m)
}

#[pyclass(name = "DiffVerdict")]
#[derive(Clone)]
struct PyDiffVerdict {
    #[pyo3(get)]
    index: usize,
    #[pyo3(get)]
    f_sft: f32,
    #[pyo3(get)]
    f_pre: Option<f32>,
    #[pyo3(get)]
    score: f32,
    #[pyo3(get)]
    selected: bool,
}

#[pymethods]
impl PyDiffVerdict {
    fn __repr__(&self) -> String {
        format!(
            "DiffVerdict(index={}, score={}, selected={})",
            self.index, self.score, self.selected
        )
    }
}

/// Difference-set decision per corpus point. criterion is "threshold"
/// (select where the normalized SFT density is below tau) or "ratio"
/// (select where self-excluded corpus density over SFT density exceeds
/// tau). Bandwidth defaults to Scott's rule over the union.
#[pyfunction]
#[pyo3(signature = (pre, sft, criterion="threshold", tau=0.7, h_x=None, h_y=None, sigma=1.0))]
#[allow(clippy::too_many_arguments)]
fn diff_select(
    pre: Vec<(f64, f64)>,
    sft: Vec<(f64, f64)>,
    criterion: &str,
    tau: f64,
    h_x: Option<f64>,
    h_y: Option<f64>,
    sigma: f64,
) -> PyResult<Vec<PyDiffVerdict>> {
    let mut cfg = match criterion {
        "threshold" => DiffsetConfig::threshold(tau),
        "ratio" => DiffsetConfig::ratio(tau),
        other => return Err(PyValueError::new_err(format!("unknown criterion {other:?}"))),
    };
    if let (Some(hx), Some(hy)) = (h_x, h_y) {
        cfg.kde = Some(params(hx, hy, sigma)?);
    }
    let to_points = |pts: &[(f64, f64)], prefix: &str| -> Vec<ProjectedPoint> {
        pts.iter()
            .enumerate()
            .map(|(i, p)| ProjectedPoint { id: format!("{prefix}{i}"), x: p.0 as f32, y: p.1 as f32 })
            .collect()
    };
    let verdicts = diffset::run_diffset(&to_points(&pre, "p"), &to_points(&sft, "s"), &cfg)
        .map_err(err)?;
    Ok(verdicts
        .into_iter()
        .enumerate()
        .map(|(i, v)| PyDiffVerdict {
            index: i,
            f_sft: v.f_sft,
            f_pre: v.f_pre,
            score: v.score,
            selected: v.selected,
        })
        .collect())
}

/// Render one of the shipped prompt templates ("query_generation",
/// "query_scoring", "answer_generation") with its slot values.
#[pyfunction]
fn render_prompt(kind: &str, slots: Vec<String>) -> PyResult<String> {
    let kind = match kind {
        "query_generation" => PromptKind::QueryGeneration,
        "query_scoring" => PromptKind::QueryScoring,
        "answer_generation" => PromptKind::AnswerGeneration,
        other => return Err(PyValueError::new_err(format!("unknown prompt kind {other:?}"))),
    };
    let slot_refs: Vec<&str> = slots.iter().map(|s| s.as_str()).collect();
    rewrite::render_prompt(&PromptTemplate::shipped(kind), &slot_refs).map_err(err)
}

/// Extract and reserialize the first balanced JSON object in a model
/// reply (tolerates surrounding prose and code fences).
#[pyfunction]
fn parse_model_json(raw: &str) -> PyResult<String> {
    rewrite::parse_model_json(raw).map(|v| v.to_string()).map_err(err)
}

/// Render a two-layer density overlay (base reds, overlay blues) as an
/// SVG string. Both value lists are row-major nx*ny grids over [0,1]^2.
#[pyfunction]
#[pyo3(signature = (base, overlay, nx, ny, title="overlay"))]
fn overlay_svg(
    base: Vec<f32>,
    overlay: Vec<f32>,
    nx: usize,
    ny: usize,
    title: &str,
) -> PyResult<String> {
    let grid = GridSpec { x_min: 0.0, x_max: 1.0, y_min: 0.0, y_max: 1.0, nx, ny };
    let field = |values: Vec<f32>, tag: &str| DensityField {
        params: KdeParams::default(),
        grid,
        values,
        source_tag: tag.to_string(),
    };
    let spec = viz::OverlaySpec::new(field(base, "base"), field(overlay, "overlay"), title);
    viz::overlay_svg_string(&spec).map_err(err)
}

#[pymodule]
fn gapalign_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(kernel, m)?)?;
    m.add_function(wrap_pyfunction!(kde_at, m)?)?;
    m.add_function(wrap_pyfunction!(kde_self_excluded, m)?)?;
    m.add_function(wrap_pyfunction!(kde_batch, m)?)?;
    m.add_function(wrap_pyfunction!(default_bandwidth, m)?)?;
    m.add_function(wrap_pyfunction!(mock_embedding, m)?)?;
    m.add_function(wrap_pyfunction!(reservoir_sample, m)?)?;
    m.add_function(wrap_pyfunction!(diff_select, m)?)?;
    m.add_function(wrap_pyfunction!(render_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(parse_model_json, m)?)?;
    m.add_function(wrap_pyfunction!(overlay_svg, m)?)?;
    m.add_class::<PyPcaModel>()?;
    m.add_class::<PyDiffVerdict>()?;
    Ok(())
}
