//! Central finite-difference checks of analytic gradients.

use serde::{Deserialize, Serialize};

use crate::augment::Sample;
use crate::error::Result;

use crate::util::stable_hash;

use super::model::{LossConfig, LossMode, ModelConfig, ToyModel, BLOCK_NAMES};
use super::scene::generate_texture_scene;

/// Denominator floor of [`relative_error`]; keeps the measure meaningful for
/// gradients near zero, where finite differences carry ~1e-11 absolute noise.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a| + |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(REL_ERR_FLOOR)
}

/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every coordinate.
pub fn central_difference(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    step: f64,
) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let up = f(&probe)?;
        probe[i] = x[i] - step;
        let down = f(&probe)?;
        probe[i] = x[i];
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

/// Largest [`relative_error`] between two gradient vectors.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockError {
    pub block: String,
    pub params: usize,
    pub max_rel_err: f64,
}

/// Compares every parameter of `model` against finite differences of the
/// single-sample loss.
pub fn check_model(
    model: &ToyModel,
    sample: &Sample,
    cfg: &LossConfig,
    step: f64,
) -> Result<Vec<BlockError>> {
    let (_, grad) = model.loss_and_grad(sample, cfg)?;
    let mut report = Vec::with_capacity(BLOCK_NAMES.len());
    for (b, name) in BLOCK_NAMES.iter().enumerate() {
        let x = model.params.blocks()[b].data().to_vec();
        let mut probe = model.clone();
        let numeric = central_difference(
            |v| {
                probe.params.blocks_mut()[b].data_mut().copy_from_slice(v);
                probe.loss(sample, cfg)
            },
            &x,
            step,
        )?;
        report.push(BlockError {
            block: (*name).to_string(),
            params: x.len(),
            max_rel_err: max_relative_error(grad.blocks()[b].data(), &numeric),
        });
    }
    Ok(report)
}

/// Small enough (under 300 parameters) for an exhaustive check.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        classes: 3,
        dim: 4,
        queries: 3,
        stride: 2,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub mode: LossMode,
    pub instances: usize,
    pub image_size: usize,
    pub regions: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            model: tiny_model(),
            mode: LossMode::HflpQer,
            instances: 20,
            image_size: 8,
            regions: 3,
            step: 1e-5,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

/// Checks `instances` freshly initialised models, each on its own scene, and
/// keeps the worst error per block.
pub fn check_instances(cfg: &GradcheckConfig) -> Result<Vec<BlockError>> {
    let weights = vec![1.0; cfg.model.classes];
    let loss = LossConfig {
        mode: cfg.mode,
        ..Default::default()
    };
    let mut worst: Vec<BlockError> = Vec::new();
    for i in 0..cfg.instances as u64 {
        let seed = stable_hash(&[&cfg.seed.to_le_bytes(), &i.to_le_bytes()]);
        let model = ToyModel::new(cfg.model, seed)?;
        let scene = generate_texture_scene(seed ^ 1, cfg.image_size, cfg.regions, &weights)?;
        let report = check_model(&model, &scene.sample, &loss, cfg.step)?;
        if worst.is_empty() {
            worst = report;
        } else {
            for (w, r) in worst.iter_mut().zip(report) {
                w.max_rel_err = w.max_rel_err.max(r.max_rel_err);
            }
        }
    }
    Ok(worst)
}
