//! Texture-first augmentation: large-scale jitter with crop/pad, horizontal
//! flip, bounded HSV/contrast jitter, specular highlights and Gaussian sensor
//! noise.
//!
//! Geometric operations move image (bilinear) and mask (nearest) together;
//! photometric operations touch the image only. Every random draw comes from a
//! ChaCha stream keyed by `(seed, sample_id)`, so a sample's result does not
//! depend on which other samples were processed or in what order.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{resize_nearest, upsample_bilinear, LabelMask, Tensor, DEFAULT_IGNORE_LABEL};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpecularConfig {
    /// Inclusive range for the number of highlights.
    pub count: [usize; 2],
    pub amplitude: [f64; 2],
    /// Per-axis standard deviation as a fraction of `min(H, W)`.
    pub sigma_frac: [f64; 2],
}

impl Default for SpecularConfig {
    fn default() -> Self {
        Self {
            count: [1, 3],
            amplitude: [0.3, 0.8],
            sigma_frac: [0.01, 0.06],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub scale_range: [f64; 2],
    /// Output `(height, width)`.
    pub crop: [usize; 2],
    pub flip_p: f64,
    /// Maximum absolute hue rotation as a fraction of the hue circle.
    pub hue_delta: f64,
    pub saturation_range: [f64; 2],
    pub contrast_range: [f64; 2],
    pub specular_p: f64,
    pub specular: SpecularConfig,
    /// Probability of Gaussian noise; 0 disables the operator entirely.
    pub noise_p: f64,
    pub noise_sigma_range: [f64; 2],
    pub ignore_label: u16,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self::segformer()
    }
}

impl AugmentConfig {
    pub fn mask2former() -> Self {
        Self {
            scale_range: [0.1, 2.0],
            crop: [512, 512],
            flip_p: 0.5,
            hue_delta: 0.02,
            saturation_range: [0.8, 1.2],
            contrast_range: [0.6, 1.4],
            specular_p: 0.3,
            specular: SpecularConfig::default(),
            noise_p: 0.0,
            noise_sigma_range: [0.01, 0.05],
            ignore_label: DEFAULT_IGNORE_LABEL,
            seed: 0,
        }
    }

    pub fn segformer() -> Self {
        Self {
            scale_range: [0.5, 2.0],
            contrast_range: [0.7, 1.3],
            noise_p: 0.3,
            ..Self::mask2former()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "mask2former" => Ok(Self::mask2former()),
            "segformer" => Ok(Self::segformer()),
            other => Err(Error::invalid(format!(
                "unknown augmentation preset {other:?} (expected mask2former or segformer)"
            ))),
        }
    }

    /// Configuration under which [`apply`] returns its input unchanged.
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            scale_range: [1.0, 1.0],
            crop: [height, width],
            flip_p: 0.0,
            hue_delta: 0.0,
            saturation_range: [1.0, 1.0],
            contrast_range: [1.0, 1.0],
            specular_p: 0.0,
            noise_p: 0.0,
            ..Self::mask2former()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("scale_range", self.scale_range),
            ("saturation_range", self.saturation_range),
            ("contrast_range", self.contrast_range),
            ("noise_sigma_range", self.noise_sigma_range),
            ("specular.amplitude", self.specular.amplitude),
            ("specular.sigma_frac", self.specular.sigma_frac),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::invalid(format!(
                    "{name} must satisfy 0 < lo <= hi, got [{lo}, {hi}]"
                )));
            }
        }
        for (name, p) in [
            ("flip_p", self.flip_p),
            ("specular_p", self.specular_p),
            ("noise_p", self.noise_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if !(0.0..=0.5).contains(&self.hue_delta) {
            return Err(Error::invalid("hue_delta must be in [0, 0.5]"));
        }
        if self.crop[0] == 0 || self.crop[1] == 0 {
            return Err(Error::invalid("crop size must be positive"));
        }
        let [lo, hi] = self.specular.count;
        if lo == 0 || lo > hi {
            return Err(Error::invalid("specular.count must satisfy 1 <= lo <= hi"));
        }
        Ok(())
    }
}

/// RGB image `(3, H, W)` with values in `[0, 1]` and its label mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub image: Tensor,
    pub mask: LabelMask,
}

impl Sample {
    pub fn new(image: Tensor, mask: LabelMask) -> Result<Self> {
        match image.shape() {
            [3, h, w] if (*h, *w) == mask.dims() => {}
            s => {
                return Err(Error::Shape(format!(
                    "image {s:?} does not pair with mask {:?}",
                    mask.dims()
                )))
            }
        }
        image.ensure_finite("sample image")?;
        Ok(Self { image, mask })
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Highlight {
    pub center_y: f64,
    pub center_x: f64,
    pub sigma_y: f64,
    pub sigma_x: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhotometricDraw {
    pub hue_shift: f64,
    pub saturation: f64,
    pub contrast: f64,
}

/// Every draw made for one sample, sufficient to replay the transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentRecord {
    pub sample_id: u64,
    pub scale: f64,
    pub scaled_size: [usize; 2],
    /// Top-left corner of the crop window in the scaled image.
    pub crop_offset: [usize; 2],
    pub padded: bool,
    pub flipped: bool,
    pub photometric: PhotometricDraw,
    pub highlights: Vec<Highlight>,
    pub noise_sigma: Option<f64>,
}

/// Per-sample random stream.
pub fn sample_rng(seed: u64, sample_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample_id);
    rng
}

fn uniform(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    let u: f64 = rng.random();
    lo + (hi - lo) * u
}

/// Runs the whole pipeline on one sample.
pub fn apply(
    sample: &Sample,
    cfg: &AugmentConfig,
    sample_id: u64,
) -> Result<(Sample, AugmentRecord)> {
    cfg.validate()?;
    let mut rng = sample_rng(cfg.seed, sample_id);
    let (h, w) = (sample.height(), sample.width());

    let scale = uniform(&mut rng, cfg.scale_range);
    let sh = ((h as f64 * scale).round() as usize).max(1);
    let sw = ((w as f64 * scale).round() as usize).max(1);
    let (image, mask) = if (sh, sw) == (h, w) {
        (sample.image.clone(), sample.mask.clone())
    } else {
        (
            upsample_bilinear(&sample.image, sh, sw, false)?,
            resize_nearest(&sample.mask, sh, sw)?,
        )
    };

    let [ch, cw] = cfg.crop;
    let oy = if sh > ch {
        rng.random_range(0..=sh - ch)
    } else {
        0
    };
    let ox = if sw > cw {
        rng.random_range(0..=sw - cw)
    } else {
        0
    };
    let padded = sh < ch || sw < cw;
    let (mut image, mut mask) = crop_or_pad(&image, &mask, oy, ox, ch, cw, cfg.ignore_label);

    let flipped = rng.random_bool(cfg.flip_p);
    if flipped {
        image = flip_image(&image);
        mask = mask.flip_horizontal();
    }

    let photometric = draw_photometric(&mut rng, cfg);
    image = apply_photometric(&image, &photometric);

    let mut highlights = Vec::new();
    if rng.random_bool(cfg.specular_p) {
        highlights = draw_highlights(&mut rng, ch, cw, &cfg.specular);
        image = apply_highlights(&image, &highlights);
    }

    let mut noise_sigma = None;
    if cfg.noise_p > 0.0 && rng.random_bool(cfg.noise_p) {
        let sigma = uniform(&mut rng, cfg.noise_sigma_range);
        image = add_noise(&image, sigma, &mut rng)?;
        noise_sigma = Some(sigma);
    }

    let record = AugmentRecord {
        sample_id,
        scale,
        scaled_size: [sh, sw],
        crop_offset: [oy, ox],
        padded,
        flipped,
        photometric,
        highlights,
        noise_sigma,
    };
    Ok((Sample { image, mask }, record))
}

fn crop_or_pad(
    image: &Tensor,
    mask: &LabelMask,
    oy: usize,
    ox: usize,
    ch: usize,
    cw: usize,
    ignore_label: u16,
) -> (Tensor, LabelMask) {
    let (sh, sw) = mask.dims();
    if (oy, ox, sh, sw) == (0, 0, ch, cw) {
        return (image.clone(), mask.clone());
    }
    let mut out = Tensor::zeros(vec![3, ch, cw]);
    let mut out_mask = LabelMask::filled(ch, cw, ignore_label);
    let rows = ch.min(sh - oy);
    let cols = cw.min(sw - ox);
    for c in 0..3 {
        for y in 0..rows {
            let src = (c * sh + oy + y) * sw + ox;
            let dst = (c * ch + y) * cw;
            out.data_mut()[dst..dst + cols].copy_from_slice(&image.data()[src..src + cols]);
        }
    }
    for y in 0..rows {
        for x in 0..cols {
            out_mask.set(y, x, mask.get(oy + y, ox + x));
        }
    }
    (out, out_mask)
}

/// Mirrors the last (width) axis.
pub fn flip_image(image: &Tensor) -> Tensor {
    let (h, w) = image.spatial().expect("image tensors have spatial dims");
    let mut out = image.clone();
    for row in 0..image.len() / w {
        let src = &image.data()[row * w..(row + 1) * w];
        let dst = &mut out.data_mut()[row * w..(row + 1) * w];
        for x in 0..w {
            dst[x] = src[w - 1 - x];
        }
    }
    debug_assert_eq!(out.len(), 3 * h * w);
    out
}

/// RGB → HSV with all components in `[0, 1]`.
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let v = max;
    if max == min {
        return (0.0, 0.0, v);
    }
    let d = max - min;
    let s = d / max;
    let h = if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    (h / 6.0, s, v)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    if s == 0.0 {
        return (v, v, v);
    }
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as usize).min(5);
    let f = h6 - sector as f64;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Hue rotation and saturation scaling in HSV, then contrast about the image
/// mean, then clamping. Identity draws leave the image bit-identical.
pub fn apply_photometric(image: &Tensor, draw: &PhotometricDraw) -> Tensor {
    let mut out = image.clone();
    let plane = out.len() / 3;
    if draw.hue_shift != 0.0 || draw.saturation != 1.0 {
        let d = out.data_mut();
        for i in 0..plane {
            let (h, s, v) = rgb_to_hsv(d[i], d[plane + i], d[2 * plane + i]);
            let (r, g, b) = hsv_to_rgb(
                (h + draw.hue_shift).rem_euclid(1.0),
                (s * draw.saturation).clamp(0.0, 1.0),
                v,
            );
            d[i] = r;
            d[plane + i] = g;
            d[2 * plane + i] = b;
        }
    }
    if draw.contrast != 1.0 {
        let mean = out.mean();
        for v in out.data_mut() {
            *v = (*v - mean) * draw.contrast + mean;
        }
    }
    for v in out.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    out
}

pub fn draw_photometric(rng: &mut impl Rng, cfg: &AugmentConfig) -> PhotometricDraw {
    PhotometricDraw {
        hue_shift: (2.0 * rng.random::<f64>() - 1.0) * cfg.hue_delta,
        saturation: uniform(rng, cfg.saturation_range),
        contrast: uniform(rng, cfg.contrast_range),
    }
}

/// Draws and applies bounded hue/saturation/contrast jitter.
pub fn photometric_jitter(image: &Tensor, rng: &mut impl Rng, cfg: &AugmentConfig) -> Tensor {
    apply_photometric(image, &draw_photometric(rng, cfg))
}

pub fn draw_highlights(
    rng: &mut impl Rng,
    height: usize,
    width: usize,
    cfg: &SpecularConfig,
) -> Vec<Highlight> {
    let k = rng.random_range(cfg.count[0]..=cfg.count[1]);
    let side = height.min(width) as f64;
    (0..k)
        .map(|_| Highlight {
            center_y: rng.random::<f64>() * height as f64,
            center_x: rng.random::<f64>() * width as f64,
            sigma_y: uniform(rng, cfg.sigma_frac) * side,
            sigma_x: uniform(rng, cfg.sigma_frac) * side,
            amplitude: uniform(rng, cfg.amplitude),
        })
        .collect()
}

/// Adds axis-aligned elliptical Gaussian bumps to every channel and clamps.
pub fn apply_highlights(image: &Tensor, highlights: &[Highlight]) -> Tensor {
    let (h, w) = image.spatial().expect("image tensors have spatial dims");
    let mut boost = vec![0.0; h * w];
    for hl in highlights {
        if hl.amplitude == 0.0 {
            continue;
        }
        for y in 0..h {
            let dy = (y as f64 - hl.center_y) / hl.sigma_y;
            for x in 0..w {
                let dx = (x as f64 - hl.center_x) / hl.sigma_x;
                boost[y * w + x] += hl.amplitude * (-0.5 * (dy * dy + dx * dx)).exp();
            }
        }
    }
    let mut out = image.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = (*v + boost[i % (h * w)]).min(1.0);
    }
    out
}

/// Draws and injects 1–3 specular highlights.
pub fn inject_specular(image: &Tensor, rng: &mut impl Rng, cfg: &SpecularConfig) -> Tensor {
    let (h, w) = image.spatial().expect("image tensors have spatial dims");
    let highlights = draw_highlights(rng, h, w, cfg);
    apply_highlights(image, &highlights)
}

fn add_noise(image: &Tensor, sigma: f64, rng: &mut impl Rng) -> Result<Tensor> {
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let normal =
        Normal::new(0.0, sigma).map_err(|e| Error::invalid(format!("noise sigma {sigma}: {e}")))?;
    let mut out = image.clone();
    for v in out.data_mut() {
        *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Gaussian sensor noise with σ drawn uniformly from `sigma_range`.
/// Returns the noisy image and the σ used.
pub fn gaussian_iso_noise(
    image: &Tensor,
    rng: &mut impl Rng,
    sigma_range: [f64; 2],
) -> Result<(Tensor, f64)> {
    let sigma = uniform(rng, sigma_range);
    Ok((add_noise(image, sigma, rng)?, sigma))
}

/// Noise with a fixed σ.
pub fn gaussian_noise_with_sigma(image: &Tensor, sigma: f64, rng: &mut impl Rng) -> Result<Tensor> {
    add_noise(image, sigma, rng)
}
