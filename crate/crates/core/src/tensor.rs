//! Dense row-major tensors and the handful of kernels the loss and image
//! paths need: softmax, bilinear resampling (with its transpose) and
//! nearest-neighbour label resampling.
//!
//! Everything here is a pure function of its inputs. Non-finite values are
//! reported as errors instead of being propagated.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label value reserved for unlabeled pixels unless configured otherwise.
pub const DEFAULT_IGNORE_LABEL: u16 = 255;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_scalar(&self, c: f64) -> Self {
        self.map(|v| v + c)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a * b)
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "elementwise op on {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Splits the shape into (outer, extent, inner) around `axis`.
    fn axis_layout(&self, axis: usize) -> Result<(usize, usize, usize)> {
        if axis >= self.rank() {
            return Err(Error::InvalidAxis {
                axis,
                rank: self.rank(),
            });
        }
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        Ok((outer, self.shape[axis], inner))
    }

    /// Last two extents, interpreted as (height, width).
    pub fn spatial(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [.., h, w] => Ok((*h, *w)),
            _ => Err(Error::Shape(format!(
                "tensor of shape {:?} has no spatial dims",
                self.shape
            ))),
        }
    }
}

fn slice_op(t: &Tensor, axis: usize, op: &'static str, log: bool) -> Result<Tensor> {
    let (outer, extent, inner) = t.axis_layout(axis)?;
    if extent == 0 {
        return Err(Error::invalid(format!("{op}: empty axis {axis}")));
    }
    t.ensure_finite(op)?;
    let mut out = t.clone();
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * extent + k) * inner + i;
            let max = (0..extent)
                .map(|k| t.data[at(k)])
                .fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = (0..extent).map(|k| (t.data[at(k)] - max).exp()).sum();
            if log {
                let lse = denom.ln();
                for k in 0..extent {
                    out.data[at(k)] = t.data[at(k)] - max - lse;
                }
            } else {
                for k in 0..extent {
                    out.data[at(k)] = (t.data[at(k)] - max).exp() / denom;
                }
            }
        }
    }
    out.ensure_finite(op)?;
    Ok(out)
}

/// Softmax along `axis`, computed with max subtraction.
pub fn softmax(t: &Tensor, axis: usize) -> Result<Tensor> {
    slice_op(t, axis, "softmax", false)
}

pub fn log_softmax(t: &Tensor, axis: usize) -> Result<Tensor> {
    slice_op(t, axis, "log_softmax", true)
}

/// Log-softmax of a single logit vector. Assumes finite input.
pub(crate) fn log_softmax_slice(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&v| v - lse).collect()
}

/// Two-tap linear interpolation along one axis: `(1 - frac)·v[lo] + frac·v[hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

/// Source taps for resampling an axis of length `input` to `output`.
///
/// Without corner alignment, pixel centres sit at half-integer positions and
/// sources left of the first centre clamp to it. With corner alignment the
/// first and last samples of both grids coincide.
pub fn linear_taps(input: usize, output: usize, align_corners: bool) -> Vec<Tap> {
    let last = input - 1;
    (0..output)
        .map(|o| {
            let src = if align_corners {
                if output == 1 {
                    0.0
                } else {
                    o as f64 * last as f64 / (output - 1) as f64
                }
            } else {
                ((o as f64 + 0.5) * (input as f64 / output as f64) - 0.5).max(0.0)
            };
            let lo = (src.floor() as usize).min(last);
            let hi = (lo + 1).min(last);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            Tap { lo, hi, frac }
        })
        .collect()
}

/// Bilinear resampling of the last two dims of `t` to `out_h × out_w`.
pub fn upsample_bilinear(
    t: &Tensor,
    out_h: usize,
    out_w: usize,
    align_corners: bool,
) -> Result<Tensor> {
    let (in_h, in_w) = t.spatial()?;
    if in_h == 0 || in_w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::Shape(format!(
            "bilinear resize {in_h}x{in_w} -> {out_h}x{out_w} has a zero-sized dim"
        )));
    }
    t.ensure_finite("upsample_bilinear")?;
    let planes = t.len() / (in_h * in_w);
    let rows = linear_taps(in_h, out_h, align_corners);
    let cols = linear_taps(in_w, out_w, align_corners);

    let mut shape = t.shape.clone();
    let r = shape.len();
    shape[r - 2] = out_h;
    shape[r - 1] = out_w;
    let mut data = Vec::with_capacity(planes * out_h * out_w);
    for p in 0..planes {
        let src = &t.data[p * in_h * in_w..(p + 1) * in_h * in_w];
        for ry in &rows {
            let top = &src[ry.lo * in_w..(ry.lo + 1) * in_w];
            let bottom = &src[ry.hi * in_w..(ry.hi + 1) * in_w];
            for cx in &cols {
                let upper = (1.0 - cx.frac) * top[cx.lo] + cx.frac * top[cx.hi];
                let lower = (1.0 - cx.frac) * bottom[cx.lo] + cx.frac * bottom[cx.hi];
                data.push((1.0 - ry.frac) * upper + ry.frac * lower);
            }
        }
    }
    Ok(Tensor { shape, data })
}

/// Transpose of [`upsample_bilinear`]: scatters an output-space gradient back
/// onto the `in_h × in_w` source grid using the same interpolation weights.
pub fn upsample_bilinear_backward(
    grad_out: &Tensor,
    in_h: usize,
    in_w: usize,
    align_corners: bool,
) -> Result<Tensor> {
    let (out_h, out_w) = grad_out.spatial()?;
    if in_h == 0 || in_w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::Shape("zero-sized dim in bilinear backward".into()));
    }
    let planes = grad_out.len() / (out_h * out_w);
    let rows = linear_taps(in_h, out_h, align_corners);
    let cols = linear_taps(in_w, out_w, align_corners);

    let mut shape = grad_out.shape.clone();
    let r = shape.len();
    shape[r - 2] = in_h;
    shape[r - 1] = in_w;
    let mut data = vec![0.0; planes * in_h * in_w];
    for p in 0..planes {
        let dst = &mut data[p * in_h * in_w..(p + 1) * in_h * in_w];
        let g = &grad_out.data[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, ry) in rows.iter().enumerate() {
            for (ox, cx) in cols.iter().enumerate() {
                let v = g[oy * out_w + ox];
                if v == 0.0 {
                    continue;
                }
                let wy = [(ry.lo, 1.0 - ry.frac), (ry.hi, ry.frac)];
                let wx = [(cx.lo, 1.0 - cx.frac), (cx.hi, cx.frac)];
                for (y, a) in wy {
                    for (x, b) in wx {
                        dst[y * in_w + x] += v * a * b;
                    }
                }
            }
        }
    }
    Ok(Tensor { shape, data })
}

/// Per-pixel integer class map.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelMask {
    height: usize,
    width: usize,
    data: Vec<u16>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, data: Vec<u16>) -> Result<Self> {
        if height * width != data.len() {
            return Err(Error::Shape(format!(
                "mask {height}x{width} needs {} labels, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, label: u16) -> Self {
        Self {
            height,
            width,
            data: vec![label; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> u16) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u16] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u16 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, label: u16) {
        self.data[y * self.width + x] = label;
    }

    pub fn labels(&self) -> BTreeSet<u16> {
        self.data.iter().copied().collect()
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| {
            self.get(y, self.width - 1 - x)
        })
    }
}

/// Source index for nearest-neighbour resampling: `floor((o + 0.5)·in/out)`.
pub fn nearest_index(o: usize, input: usize, output: usize) -> usize {
    let src = ((o as f64 + 0.5) * input as f64 / output as f64).floor() as usize;
    src.min(input - 1)
}

/// Nearest-neighbour resampling to an arbitrary size.
pub fn resize_nearest(mask: &LabelMask, out_h: usize, out_w: usize) -> Result<LabelMask> {
    if out_h == 0 || out_w == 0 || mask.height == 0 || mask.width == 0 {
        return Err(Error::Shape(format!(
            "nearest resize {}x{} -> {out_h}x{out_w} has a zero-sized dim",
            mask.height, mask.width
        )));
    }
    let rows: Vec<usize> = (0..out_h)
        .map(|o| nearest_index(o, mask.height, out_h))
        .collect();
    let cols: Vec<usize> = (0..out_w)
        .map(|o| nearest_index(o, mask.width, out_w))
        .collect();
    Ok(LabelMask::from_fn(out_h, out_w, |y, x| {
        mask.get(rows[y], cols[x])
    }))
}

/// Nearest-neighbour label downsampling; the output may not exceed the input.
pub fn downsample_nearest(mask: &LabelMask, out_h: usize, out_w: usize) -> Result<LabelMask> {
    if out_h > mask.height || out_w > mask.width {
        return Err(Error::Shape(format!(
            "downsample target {out_h}x{out_w} exceeds source {}x{}",
            mask.height, mask.width
        )));
    }
    resize_nearest(mask, out_h, out_w)
}
