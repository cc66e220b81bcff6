//! Segmentation and query losses with analytic gradients.
//!
//! * [`hflp_loss`]: label-smoothed cross-entropy evaluated on logits that were
//!   bilinearly projected up to the label resolution.
//! * [`cross_entropy_downsampled`]: the conventional baseline that instead
//!   shrinks the labels to the logit grid with nearest-neighbour sampling.
//! * [`qer_loss`]: KL penalty pulling each query's class distribution toward
//!   uniform.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    downsample_nearest, log_softmax_slice, upsample_bilinear, upsample_bilinear_backward,
    LabelMask, Tensor, DEFAULT_IGNORE_LABEL,
};

/// Per-pixel class scores of shape `(C, h, w)`, produced at `1/stride` of the
/// label resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap {
    tensor: Tensor,
    stride: usize,
}

impl LogitMap {
    pub fn new(tensor: Tensor, stride: usize) -> Result<Self> {
        if tensor.rank() != 3 {
            return Err(Error::Shape(format!(
                "logit map must be (C, h, w), got {:?}",
                tensor.shape()
            )));
        }
        if tensor.shape()[0] < 2 {
            return Err(Error::invalid("logit map needs at least 2 classes"));
        }
        if stride == 0 {
            return Err(Error::invalid("stride must be positive"));
        }
        Ok(Self { tensor, stride })
    }

    pub fn classes(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    fn check_labels(&self, y: &LabelMask) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        if h * self.stride != y.height() || w * self.stride != y.width() {
            return Err(Error::Shape(format!(
                "logits {h}x{w} at stride {} do not cover labels {}x{}",
                self.stride,
                y.height(),
                y.width()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HflpConfig {
    pub epsilon: f64,
    pub ignore_label: u16,
    pub align_corners: bool,
}

impl Default for HflpConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            ignore_label: DEFAULT_IGNORE_LABEL,
            align_corners: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlDirection {
    /// KL(P‖U) = ln K − H(P)
    EntropyMax,
    /// KL(U‖P)
    Reverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QerConfig {
    pub lambda: f64,
    pub direction: KlDirection,
}

impl Default for QerConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            direction: KlDirection::EntropyMax,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Tensor,
}

/// Smoothed cross-entropy of `(C, H, W)` logits against same-resolution labels.
/// Returns the mean loss over supervised pixels and its gradient.
fn smoothed_cross_entropy(
    logits: &Tensor,
    labels: &LabelMask,
    epsilon: f64,
    ignore_label: u16,
) -> Result<LossOutput> {
    let classes = logits.shape()[0];
    let plane = labels.height() * labels.width();
    debug_assert_eq!(logits.len(), classes * plane);
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::invalid(format!("epsilon {epsilon} outside [0, 1)")));
    }
    let supervised = labels.data().iter().filter(|&&l| l != ignore_label).count();
    if supervised == 0 {
        return Err(Error::EmptySupervision);
    }
    let norm = 1.0 / supervised as f64;
    let off = epsilon / classes as f64;
    let on = 1.0 - epsilon + off;

    let z = logits.data();
    let mut grad = Tensor::zeros(logits.shape().to_vec());
    let g = grad.data_mut();
    let mut total = 0.0;
    let mut scores = vec![0.0; classes];
    for (pix, &label) in labels.data().iter().enumerate() {
        if label == ignore_label {
            continue;
        }
        if usize::from(label) >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        for (c, s) in scores.iter_mut().enumerate() {
            *s = z[c * plane + pix];
        }
        let logp = log_softmax_slice(&scores);
        let mut pixel_loss = 0.0;
        for c in 0..classes {
            let target = if c == usize::from(label) { on } else { off };
            pixel_loss -= target * logp[c];
            g[c * plane + pix] = (logp[c].exp() - target) * norm;
        }
        total += pixel_loss;
    }
    let loss = total * norm;
    if !loss.is_finite() || !grad.is_finite() {
        return Err(Error::NonFinite("cross entropy"));
    }
    Ok(LossOutput { loss, grad })
}

/// Label-smoothed cross-entropy on logits bilinearly projected to label
/// resolution. Ignored pixels are excluded from both the sum and the
/// normaliser. The gradient is taken with respect to the low-resolution
/// logits.
pub fn hflp_loss(z: &LogitMap, y: &LabelMask, cfg: &HflpConfig) -> Result<LossOutput> {
    z.check_labels(y)?;
    let (h, w) = (y.height(), y.width());
    let up = upsample_bilinear(z.tensor(), h, w, cfg.align_corners)?;
    let out = smoothed_cross_entropy(&up, y, cfg.epsilon, cfg.ignore_label)?;
    let grad = upsample_bilinear_backward(&out.grad, z.height(), z.width(), cfg.align_corners)?;
    Ok(LossOutput {
        loss: out.loss,
        grad,
    })
}

/// Plain cross-entropy against labels shrunk to the logit grid by
/// nearest-neighbour sampling.
pub fn cross_entropy_downsampled(
    z: &LogitMap,
    y: &LabelMask,
    ignore_label: u16,
) -> Result<LossOutput> {
    z.check_labels(y)?;
    let small = downsample_nearest(y, z.height(), z.width())?;
    smoothed_cross_entropy(z.tensor(), &small, 0.0, ignore_label)
}

/// Entropy of the smoothed target distribution for `classes` classes; a lower
/// bound on the per-pixel [`hflp_loss`].
pub fn smoothed_target_entropy(classes: usize, epsilon: f64) -> f64 {
    let off = epsilon / classes as f64;
    let on = 1.0 - epsilon + off;
    let term = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
    term(on) + (classes - 1) as f64 * term(off)
}

/// Query entropy regulariser over `(N, K)` class logits, averaged over
/// queries and scaled by `lambda`.
pub fn qer_loss(q: &Tensor, cfg: &QerConfig) -> Result<LossOutput> {
    if q.rank() != 2 {
        return Err(Error::Shape(format!(
            "query logits must be (N, K), got {:?}",
            q.shape()
        )));
    }
    let (n, k) = (q.shape()[0], q.shape()[1]);
    if k < 2 {
        return Err(Error::invalid(format!("qer needs K >= 2, got {k}")));
    }
    if cfg.lambda < 0.0 {
        return Err(Error::invalid("qer lambda must be non-negative"));
    }
    q.ensure_finite("qer_loss")?;
    let mut grad = Tensor::zeros(vec![n, k]);
    if n == 0 || cfg.lambda == 0.0 {
        return Ok(LossOutput { loss: 0.0, grad });
    }
    let ln_k = (k as f64).ln();
    let scale = cfg.lambda / n as f64;
    let mut total = 0.0;
    for (row, g) in q.data().chunks(k).zip(grad.data_mut().chunks_mut(k)) {
        let logp = log_softmax_slice(row);
        let p: Vec<f64> = logp.iter().map(|v| v.exp()).collect();
        match cfg.direction {
            KlDirection::EntropyMax => {
                let neg_entropy: f64 = p.iter().zip(&logp).map(|(a, b)| a * b).sum();
                // each term is <= 0, so this lies in [0, ln K] up to rounding
                total += (ln_k + neg_entropy).clamp(0.0, ln_k);
                for j in 0..k {
                    g[j] = scale * p[j] * (logp[j] - neg_entropy);
                }
            }
            KlDirection::Reverse => {
                let mean_logp = logp.iter().sum::<f64>() / k as f64;
                total += (-ln_k - mean_logp).max(0.0);
                for j in 0..k {
                    g[j] = scale * (p[j] - 1.0 / k as f64);
                }
            }
        }
    }
    let mut loss = total * scale;
    if cfg.direction == KlDirection::EntropyMax {
        loss = loss.min(cfg.lambda * ln_k);
    }
    if !loss.is_finite() || !grad.is_finite() {
        return Err(Error::NonFinite("qer_loss"));
    }
    Ok(LossOutput { loss, grad })
}
