//! Python bindings: arrays travel as nested lists, structured results as
//! plain dicts.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use serde::Serialize;

use matseg_core::augment::{AugmentConfig, Sample};
use matseg_core::loss::{self, HflpConfig, KlDirection, LogitMap, QerConfig};
use matseg_core::matching::{self, CostMatrix};
use matseg_core::metrics;
use matseg_core::split::{self, ClassHistogram};
use matseg_core::tensor::{LabelMask, Tensor};
use matseg_core::train::{self, ParamGroup, Schedule, TrainConfig};

type Grid<T> = Vec<Vec<T>>;
type Augmented<'py> = (Vec<Grid<f64>>, Grid<u16>, Bound<'py, PyAny>);

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn grid_dims<T>(g: &[Vec<T>]) -> PyResult<(usize, usize)> {
    let w = g.first().map_or(0, Vec::len);
    if g.iter().any(|r| r.len() != w) {
        return Err(err("ragged rows"));
    }
    Ok((g.len(), w))
}

fn mask_from(g: Grid<u16>) -> PyResult<LabelMask> {
    let (h, w) = grid_dims(&g)?;
    LabelMask::new(h, w, g.into_iter().flatten().collect()).map_err(err)
}

fn mask_to(m: &LabelMask) -> Grid<u16> {
    m.data()
        .chunks(m.width().max(1))
        .map(<[u16]>::to_vec)
        .collect()
}

fn tensor3_from(v: Vec<Grid<f64>>) -> PyResult<Tensor> {
    let (h, w) = v.first().map_or(Ok((0, 0)), |g| grid_dims(g))?;
    if v.iter()
        .any(|g| !matches!(grid_dims(g), Ok(d) if d == (h, w)))
    {
        return Err(err("channels differ in shape"));
    }
    Tensor::new(
        vec![v.len(), h, w],
        v.into_iter().flatten().flatten().collect(),
    )
    .map_err(err)
}

fn tensor3_to(t: &Tensor) -> Vec<Grid<f64>> {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    t.data()
        .chunks(h * w)
        .map(|c| c.chunks(w.max(1)).map(<[f64]>::to_vec).collect())
        .collect()
}

fn matrix_from(g: Grid<f64>) -> PyResult<Tensor> {
    let (n, k) = grid_dims(&g)?;
    Tensor::new(vec![n, k], g.into_iter().flatten().collect()).map_err(err)
}

fn matrix_to(t: &Tensor) -> Grid<f64> {
    t.data()
        .chunks(t.shape()[1].max(1))
        .map(<[f64]>::to_vec)
        .collect()
}

/// Smoothed cross-entropy of `(C, h, w)` logits upsampled by `stride` against
/// full-resolution labels. Returns `(loss, grad)`.
#[pyfunction]
#[pyo3(signature = (logits, labels, stride, epsilon=0.1, ignore_label=255, align_corners=false))]
fn hflp_loss(
    logits: Vec<Grid<f64>>,
    labels: Grid<u16>,
    stride: usize,
    epsilon: f64,
    ignore_label: u16,
    align_corners: bool,
) -> PyResult<(f64, Vec<Grid<f64>>)> {
    let z = LogitMap::new(tensor3_from(logits)?, stride).map_err(err)?;
    let cfg = HflpConfig {
        epsilon,
        ignore_label,
        align_corners,
    };
    let out = loss::hflp_loss(&z, &mask_from(labels)?, &cfg).map_err(err)?;
    Ok((out.loss, tensor3_to(&out.grad)))
}

/// Plain cross-entropy against labels nearest-neighbour downsampled to the
/// logit grid.
#[pyfunction]
#[pyo3(signature = (logits, labels, stride, ignore_label=255))]
fn cross_entropy_downsampled(
    logits: Vec<Grid<f64>>,
    labels: Grid<u16>,
    stride: usize,
    ignore_label: u16,
) -> PyResult<(f64, Vec<Grid<f64>>)> {
    let z = LogitMap::new(tensor3_from(logits)?, stride).map_err(err)?;
    let out =
        loss::cross_entropy_downsampled(&z, &mask_from(labels)?, ignore_label).map_err(err)?;
    Ok((out.loss, tensor3_to(&out.grad)))
}

/// Query entropy regulariser over `(N, K)` logits. `direction` is
/// `"entropy-max"` or `"reverse"`.
#[pyfunction]
#[pyo3(signature = (logits, lam=0.1, direction="entropy-max"))]
fn qer_loss(logits: Grid<f64>, lam: f64, direction: &str) -> PyResult<(f64, Grid<f64>)> {
    let direction = match direction {
        "entropy-max" => KlDirection::EntropyMax,
        "reverse" => KlDirection::Reverse,
        other => return Err(err(format!("unknown direction {other:?}"))),
    };
    let out = loss::qer_loss(
        &matrix_from(logits)?,
        &QerConfig {
            lambda: lam,
            direction,
        },
    )
    .map_err(err)?;
    Ok((out.loss, matrix_to(&out.grad)))
}

/// Minimum-cost assignment. Returns `(pairs, total_cost)`.
#[pyfunction]
fn hungarian(cost: Grid<f64>) -> PyResult<(Vec<(usize, usize)>, f64)> {
    let (r, c) = grid_dims(&cost)?;
    let m = CostMatrix::new(r, c, cost.into_iter().flatten().collect()).map_err(err)?;
    let a = matching::hungarian(&m).map_err(err)?;
    Ok((a.pairs, a.total_cost))
}

#[pyfunction]
fn jsd(p: Vec<u64>, q: Vec<u64>) -> PyResult<f64> {
    split::jsd(&ClassHistogram::new(p), &ClassHistogram::new(q)).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (step, total_steps, group="head", lr_backbone=1e-4, lr_head=1e-3, lr_min=1e-6))]
fn cosine_lr(
    step: usize,
    total_steps: usize,
    group: &str,
    lr_backbone: f64,
    lr_head: f64,
    lr_min: f64,
) -> PyResult<f64> {
    let group = match group {
        "backbone" => ParamGroup::Backbone,
        "head" => ParamGroup::Head,
        other => return Err(err(format!("unknown group {other:?}"))),
    };
    let s = Schedule {
        lr_backbone,
        lr_head,
        lr_min,
        total_steps,
    };
    train::cosine_lr(step, &s, group).map_err(err)
}

/// Accumulating confusion matrix over label maps.
#[pyclass(name = "ConfusionMatrix")]
struct PyConfusionMatrix {
    inner: metrics::ConfusionMatrix,
}

#[pymethods]
impl PyConfusionMatrix {
    #[new]
    #[pyo3(signature = (classes, ignore_label=255))]
    fn new(classes: usize, ignore_label: u16) -> Self {
        Self {
            inner: metrics::ConfusionMatrix::new(classes, ignore_label),
        }
    }

    fn update(&mut self, pred: Grid<u16>, gt: Grid<u16>) -> PyResult<()> {
        self.inner
            .accumulate(&mask_from(pred)?, &mask_from(gt)?)
            .map_err(err)
    }

    fn merge(&mut self, other: PyRef<'_, PyConfusionMatrix>) -> PyResult<()> {
        self.inner.merge(&other.inner).map_err(err)
    }

    /// `{"miou", "macc", "aacc", "per_class_iou", "per_class_acc"}`
    fn summary<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.summarize().map_err(err)?)
    }
}

#[pyfunction]
#[pyo3(signature = (pred, gt, classes, ignore_label=255, d_frac=0.02))]
fn boundary_iou<'py>(
    py: Python<'py>,
    pred: Grid<u16>,
    gt: Grid<u16>,
    classes: usize,
    ignore_label: u16,
    d_frac: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let b = metrics::boundary_iou(
        &mask_from(pred)?,
        &mask_from(gt)?,
        classes,
        ignore_label,
        d_frac,
    )
    .map_err(err)?;
    to_py(py, &b)
}

/// Augments one `(3, H, W)` image in `[0, 1]` with its label map. Returns
/// `(image, mask, record)`.
#[pyfunction]
#[pyo3(signature = (image, mask, preset="segformer", seed=0, sample_id=0, crop=None))]
fn augment<'py>(
    py: Python<'py>,
    image: Vec<Grid<f64>>,
    mask: Grid<u16>,
    preset: &str,
    seed: u64,
    sample_id: u64,
    crop: Option<(usize, usize)>,
) -> PyResult<Augmented<'py>> {
    let mut cfg = AugmentConfig::preset(preset).map_err(err)?;
    cfg.seed = seed;
    if let Some((h, w)) = crop {
        cfg.crop = [h, w];
    }
    let sample = Sample::new(tensor3_from(image)?, mask_from(mask)?).map_err(err)?;
    let (out, record) = matseg_core::augment::apply(&sample, &cfg, sample_id).map_err(err)?;
    Ok((
        tensor3_to(&out.image),
        mask_to(&out.mask),
        to_py(py, &record)?,
    ))
}

/// Synthetic textured scene. Returns `(image, mask)`.
#[pyfunction]
#[pyo3(signature = (seed, size=32, regions=4, class_weights=vec![1.0, 1.0]))]
fn texture_scene(
    seed: u64,
    size: usize,
    regions: usize,
    class_weights: Vec<f64>,
) -> PyResult<(Vec<Grid<f64>>, Grid<u16>)> {
    let s = train::generate_texture_scene(seed, size, regions, &class_weights).map_err(err)?;
    Ok((tensor3_to(&s.sample.image), mask_to(&s.sample.mask)))
}

/// Trains the toy model. `config` is a JSON object in the same shape the
/// `train-toy` command reads; missing fields take defaults.
#[pyfunction]
#[pyo3(signature = (config=None))]
fn train_toy<'py>(py: Python<'py>, config: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let cfg: TrainConfig = match config {
        Some(text) => serde_json::from_str(text).map_err(err)?,
        None => TrainConfig::default(),
    };
    cfg.validate().map_err(err)?;
    let outcome = py.detach(|| train::train(&cfg)).map_err(err)?;
    to_py(py, &outcome.report)
}

/// Largest finite-difference relative error of the toy model gradient.
#[pyfunction]
#[pyo3(signature = (instances=5))]
fn gradcheck(instances: usize) -> PyResult<f64> {
    let cfg = train::gradcheck::GradcheckConfig {
        instances,
        ..Default::default()
    };
    let blocks = train::gradcheck::check_instances(&cfg).map_err(err)?;
    Ok(blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max))
}

#[pymodule]
pub fn matseg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(hflp_loss, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy_downsampled, m)?)?;
    m.add_function(wrap_pyfunction!(qer_loss, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian, m)?)?;
    m.add_function(wrap_pyfunction!(jsd, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_lr, m)?)?;
    m.add_function(wrap_pyfunction!(boundary_iou, m)?)?;
    m.add_function(wrap_pyfunction!(augment, m)?)?;
    m.add_function(wrap_pyfunction!(texture_scene, m)?)?;
    m.add_function(wrap_pyfunction!(train_toy, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_class::<PyConfusionMatrix>()?;
    Ok(())
}
