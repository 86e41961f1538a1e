//! Python bindings for the core segmentation operations: metrics,
//! aggregation, augmentation, boundary decoding, losses and adapter cost
//! accounting.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use east::adapters::{self, AdapterKind, FlopDims};
use east::aggregate::{aggregate as agg_impl, ZeroCoverage};
use east::augment::{augment as augment_impl, AugmentSpec};
use east::detector::diou_loss_1d as diou_impl;
use east::metrics;
use east::types::ActionProposal;

fn to_py_err(e: east::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_kind(kind: &str) -> PyResult<AdapterKind> {
    match kind {
        "none" => Ok(AdapterKind::None),
        "standard" => Ok(AdapterKind::Standard),
        "tia" => Ok(AdapterKind::Tia),
        "cea" => Ok(AdapterKind::Cea),
        other => Err(PyValueError::new_err(format!("unknown adapter kind {other}"))),
    }
}

fn proposals_from_tuples(props: Vec<(f64, f64, Vec<f64>, f64)>) -> Vec<ActionProposal> {
    props
        .into_iter()
        .map(|(s, e, dist, conf)| ActionProposal {
            t_start: s,
            t_end: e,
            dist,
            confidence: conf,
            source_frame: 0,
            source_level: 0,
        })
        .collect()
}

/// Deterministic seeded RNG (xoshiro256++), the same stream the Rust side
/// uses for a given seed.
#[pyclass(name = "Rng")]
struct PyRng {
    inner: east::tensor::Rng,
}

#[pymethods]
impl PyRng {
    #[new]
    fn new(seed: u64) -> Self {
        PyRng {
            inner: east::tensor::Rng::new(seed),
        }
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn uniform(&mut self) -> f64 {
        self.inner.uniform()
    }

    fn normal(&mut self) -> f64 {
        self.inner.normal()
    }
}

/// 100 * matching frames / T.
#[pyfunction]
fn framewise_accuracy(pred: Vec<usize>, gt: Vec<usize>) -> PyResult<f64> {
    metrics::framewise_accuracy(&pred, &gt).map_err(to_py_err)
}

/// Segmental edit score over per-frame labels (background segments
/// excluded unless `keep_background`).
#[pyfunction]
#[pyo3(signature = (pred, gt, keep_background=false))]
fn edit_score(pred: Vec<usize>, gt: Vec<usize>, keep_background: bool) -> f64 {
    metrics::edit_score(
        &metrics::metric_segments(&pred, keep_background),
        &metrics::metric_segments(&gt, keep_background),
    )
}

/// Segmental F1 at overlap threshold `k` percent over per-frame labels.
#[pyfunction]
#[pyo3(signature = (pred, gt, k, keep_background=false))]
fn f1_at_k(pred: Vec<usize>, gt: Vec<usize>, k: f64, keep_background: bool) -> f64 {
    metrics::f1_at_k(
        &metrics::metric_segments(&pred, keep_background),
        &metrics::metric_segments(&gt, keep_background),
        k,
    )
}

/// Aggregate proposals `(t_start, t_end, dist, confidence)` into per-frame
/// distributions; frame `i` sits at `(i + 0.5) / fps` seconds.
#[pyfunction]
#[pyo3(signature = (proposals, num_frames, fps, background_fallback=false))]
fn aggregate(
    proposals: Vec<(f64, f64, Vec<f64>, f64)>,
    num_frames: usize,
    fps: f64,
    background_fallback: bool,
) -> PyResult<Vec<Vec<f64>>> {
    let props = proposals_from_tuples(proposals);
    let zero = if background_fallback {
        ZeroCoverage::Background
    } else {
        ZeroCoverage::Uniform
    };
    let lab = agg_impl(&props, num_frames, fps, zero).map_err(to_py_err)?;
    Ok((0..lab.num_frames()).map(|i| lab.row(i).to_vec()).collect())
}

/// One augmentation draw: remove `deletions` of the `top_pool` most
/// confident proposals. Returns the removed indices (ascending).
#[pyfunction]
fn augment_removals(
    proposals: Vec<(f64, f64, Vec<f64>, f64)>,
    top_pool: usize,
    deletions: usize,
    seed: u64,
) -> PyResult<Vec<usize>> {
    let props = proposals_from_tuples(proposals);
    let spec = AugmentSpec {
        top_pool,
        deletions,
        draws: 1,
        include_original: false,
        resample_k: false,
    };
    let mut rng = east::tensor::Rng::new(seed);
    let (_, report) = augment_impl(&props, &spec, &mut rng).map_err(to_py_err)?;
    Ok(report.removed)
}

/// Boundary decoding: `(t - d_start, t + d_end)` per frame.
#[pyfunction]
fn decode_boundaries(
    timestamps: Vec<f64>,
    d_start: Vec<f64>,
    d_end: Vec<f64>,
) -> PyResult<Vec<(f64, f64)>> {
    if timestamps.len() != d_start.len() || timestamps.len() != d_end.len() {
        return Err(PyValueError::new_err("length mismatch"));
    }
    Ok(timestamps
        .iter()
        .zip(d_start.iter().zip(&d_end))
        .map(|(&t, (&ds, &de))| (t - ds, t + de))
        .collect())
}

/// 1-D DIoU loss between two intervals.
#[pyfunction]
fn diou_loss_1d(pred: (f64, f64), gt: (f64, f64)) -> f64 {
    diou_impl(pred, gt)
}

/// Exact FLOP count of one adapter instance (2 FLOPs per multiply-add;
/// CEA's pooling counted as adds).
#[pyfunction]
#[pyo3(signature = (kind, channels, ratio, kernel, frames, height, width, pooled_h=1, pooled_w=1))]
#[allow(clippy::too_many_arguments)]
fn adapter_flops(
    kind: &str,
    channels: usize,
    ratio: usize,
    kernel: usize,
    frames: usize,
    height: usize,
    width: usize,
    pooled_h: usize,
    pooled_w: usize,
) -> PyResult<u64> {
    let dims = FlopDims {
        batch: 1,
        channels,
        ratio,
        kernel,
        frames,
        height,
        width,
        pooled: (pooled_h, pooled_w),
    };
    Ok(adapters::count_flops(parse_kind(kind)?, &dims).total as u64)
}

/// Exact trainable-parameter count of one adapter instance.
#[pyfunction]
fn adapter_params(kind: &str, channels: usize, ratio: usize, kernel: usize) -> PyResult<u64> {
    Ok(adapters::count_params(parse_kind(kind)?, channels, ratio, kernel) as u64)
}

#[pymodule]
fn east_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRng>()?;
    m.add_function(wrap_pyfunction!(framewise_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(edit_score, m)?)?;
    m.add_function(wrap_pyfunction!(f1_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(augment_removals, m)?)?;
    m.add_function(wrap_pyfunction!(decode_boundaries, m)?)?;
    m.add_function(wrap_pyfunction!(diou_loss_1d, m)?)?;
    m.add_function(wrap_pyfunction!(adapter_flops, m)?)?;
    m.add_function(wrap_pyfunction!(adapter_params, m)?)?;
    Ok(())
}
