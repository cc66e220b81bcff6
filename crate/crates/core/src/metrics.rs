//! Confusion-matrix based region metrics (mIoU, mAcc, aAcc) and boundary IoU.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::LabelMask;

/// `C × C` pixel counts, rows indexed by ground truth and columns by
/// prediction. Pixels whose ground truth is the ignore label are skipped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    ignore_label: u16,
    counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// `None` for classes absent from both ground truth and prediction.
    pub per_class_iou: Vec<Option<f64>>,
    /// `None` for classes without ground-truth pixels.
    pub per_class_acc: Vec<Option<f64>>,
    pub miou: f64,
    pub macc: f64,
    pub aacc: f64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize, ignore_label: u16) -> Self {
        Self {
            classes,
            ignore_label,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn ignore_label(&self) -> u16 {
        self.ignore_label
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Ground-truth pixel count per class.
    pub fn gt_counts(&self) -> Vec<u64> {
        (0..self.classes)
            .map(|g| (0..self.classes).map(|p| self.count(g, p)).sum())
            .collect()
    }

    pub fn pred_counts(&self) -> Vec<u64> {
        (0..self.classes)
            .map(|p| (0..self.classes).map(|g| self.count(g, p)).sum())
            .collect()
    }

    pub fn accumulate(&mut self, pred: &LabelMask, gt: &LabelMask) -> Result<()> {
        if pred.dims() != gt.dims() {
            return Err(Error::Shape(format!(
                "prediction {:?} vs ground truth {:?}",
                pred.dims(),
                gt.dims()
            )));
        }
        let c = self.classes;
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if usize::from(p) >= c {
                return Err(Error::LabelOutOfRange {
                    label: p,
                    classes: c,
                });
            }
            if g != self.ignore_label && usize::from(g) >= c {
                return Err(Error::LabelOutOfRange {
                    label: g,
                    classes: c,
                });
            }
        }
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g != self.ignore_label {
                self.counts[usize::from(g) * c + usize::from(p)] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape(format!(
                "cannot merge {}-class and {}-class matrices",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn summarize(&self) -> Result<Summary> {
        let total = self.total();
        if total == 0 {
            return Err(Error::EmptyMatrix);
        }
        let gt = self.gt_counts();
        let pred = self.pred_counts();
        let mut per_class_iou = Vec::with_capacity(self.classes);
        let mut per_class_acc = Vec::with_capacity(self.classes);
        let mut trace = 0;
        for c in 0..self.classes {
            let tp = self.count(c, c);
            trace += tp;
            let union = gt[c] + pred[c] - tp;
            per_class_iou.push((union > 0).then(|| tp as f64 / union as f64));
            per_class_acc.push((gt[c] > 0).then(|| tp as f64 / gt[c] as f64));
        }
        Ok(Summary {
            miou: mean_present(&per_class_iou),
            macc: mean_present(&per_class_acc),
            aacc: trace as f64 / total as f64,
            per_class_iou,
            per_class_acc,
        })
    }
}

fn mean_present(values: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryIou {
    /// Band width in pixels actually used.
    pub radius: usize,
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// Band width `ceil(d_frac · diagonal)`, at least one pixel.
pub fn boundary_radius(height: usize, width: usize, d_frac: f64) -> usize {
    let diag = ((height * height + width * width) as f64).sqrt();
    ((d_frac * diag).ceil() as usize).max(1)
}

/// Erodes a binary mask by a `(2r+1)²` square; pixels outside the image count
/// as background, so the image border is part of every boundary.
fn erode(mask: &[bool], height: usize, width: usize, r: usize) -> Vec<bool> {
    // prefix sums of background pixels
    let stride = width + 1;
    let mut bg = vec![0u32; (height + 1) * stride];
    for y in 0..height {
        for x in 0..width {
            bg[(y + 1) * stride + x + 1] = bg[y * stride + x + 1] + bg[(y + 1) * stride + x]
                - bg[y * stride + x]
                + u32::from(!mask[y * width + x]);
        }
    }
    let mut out = vec![false; mask.len()];
    for y in r..height.saturating_sub(r) {
        for x in r..width.saturating_sub(r) {
            let (y0, y1, x0, x1) = (y - r, y + r + 1, x - r, x + r + 1);
            let zeros = bg[y1 * stride + x1] + bg[y0 * stride + x0]
                - bg[y0 * stride + x1]
                - bg[y1 * stride + x0];
            out[y * width + x] = zeros == 0;
        }
    }
    out
}

/// Pixels of `mask` within chessboard distance `r` of background.
pub fn boundary_band(mask: &[bool], height: usize, width: usize, r: usize) -> Vec<bool> {
    let eroded = erode(mask, height, width, r);
    mask.iter().zip(&eroded).map(|(&m, &e)| m && !e).collect()
}

/// Per-class boundary IoU between prediction and ground truth, averaged over
/// classes present in either map. Ground-truth ignore pixels are excluded
/// from both bands.
pub fn boundary_iou(
    pred: &LabelMask,
    gt: &LabelMask,
    classes: usize,
    ignore_label: u16,
    d_frac: f64,
) -> Result<BoundaryIou> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    if d_frac <= 0.0 || !d_frac.is_finite() {
        return Err(Error::invalid(format!(
            "d_frac must be positive, got {d_frac}"
        )));
    }
    let (h, w) = gt.dims();
    let radius = boundary_radius(h, w, d_frac);
    let valid: Vec<bool> = gt.data().iter().map(|&g| g != ignore_label).collect();

    let mut per_class = vec![None; classes];
    for (c, slot) in per_class.iter_mut().enumerate() {
        let in_gt: Vec<bool> = gt.data().iter().map(|&g| usize::from(g) == c).collect();
        let in_pred: Vec<bool> = pred
            .data()
            .iter()
            .zip(&valid)
            .map(|(&p, &v)| v && usize::from(p) == c)
            .collect();
        if !in_gt.iter().any(|&b| b) && !in_pred.iter().any(|&b| b) {
            continue;
        }
        let band_gt = boundary_band(&in_gt, h, w, radius);
        let band_pred = boundary_band(&in_pred, h, w, radius);
        let (mut inter, mut union) = (0u64, 0u64);
        for i in 0..valid.len() {
            if !valid[i] {
                continue;
            }
            inter += u64::from(band_gt[i] && band_pred[i]);
            union += u64::from(band_gt[i] || band_pred[i]);
        }
        *slot = Some(if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        });
    }
    if per_class.iter().all(Option::is_none) {
        return Err(Error::EmptyMatrix);
    }
    Ok(BoundaryIou {
        radius,
        mean: mean_present(&per_class),
        per_class,
    })
}
