//! Procedural texture scenes used as a synthetic dataset.

use std::f64::consts::PI;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{hsv_to_rgb, sample_rng, Sample};
use crate::error::{Error, Result};
use crate::tensor::{LabelMask, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    /// Voronoi partition with one textured class per cell.
    Regions,
    /// Background texture crossed by one- and two-pixel lines.
    Thin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub sample: Sample,
    /// Class of each Voronoi cell, or of the background followed by each line.
    pub region_classes: Vec<u16>,
}

/// Base colour of a class: hues spread by the golden ratio.
fn class_colour(class: u16) -> [f64; 3] {
    let h = (f64::from(class) * 0.618_033_988_75 + 0.1).rem_euclid(1.0);
    let v = if class.is_multiple_of(2) { 0.85 } else { 0.6 };
    let (r, g, b) = hsv_to_rgb(h, 0.7, v);
    [r, g, b]
}

/// Texture value in `[0, 1]` for one region, drawn once per region.
enum Pattern {
    Checker {
        period: f64,
    },
    Stripes {
        period: f64,
        angle: f64,
    },
    Noise {
        cell: f64,
        lattice: Vec<f64>,
        cols: usize,
    },
    Gradient {
        angle: f64,
    },
}

impl Pattern {
    fn draw(class: u16, size: usize, rng: &mut impl Rng) -> Self {
        let c = usize::from(class);
        match c % 4 {
            0 => Pattern::Checker {
                period: (2 + c % 3) as f64,
            },
            1 => Pattern::Stripes {
                period: (3 + c % 5) as f64,
                angle: rng.random::<f64>() * PI,
            },
            2 => {
                let cell = (3 + c % 4) as f64;
                let cols = (size as f64 / cell).ceil() as usize + 2;
                let lattice = (0..cols * cols).map(|_| rng.random::<f64>()).collect();
                Pattern::Noise {
                    cell,
                    lattice,
                    cols,
                }
            }
            _ => Pattern::Gradient {
                angle: rng.random::<f64>() * 2.0 * PI,
            },
        }
    }

    fn value(&self, y: usize, x: usize, size: usize) -> f64 {
        let (fy, fx) = (y as f64, x as f64);
        match self {
            Pattern::Checker { period } => {
                let k = (fy / period).floor() as i64 + (fx / period).floor() as i64;
                (k.rem_euclid(2)) as f64
            }
            Pattern::Stripes { period, angle } => {
                let t = fx * angle.cos() + fy * angle.sin();
                0.5 + 0.5 * (2.0 * PI * t / period).sin()
            }
            Pattern::Noise {
                cell,
                lattice,
                cols,
            } => {
                let (gy, gx) = (fy / cell, fx / cell);
                let (iy, ix) = (gy.floor() as usize, gx.floor() as usize);
                let (ty, tx) = (gy - iy as f64, gx - ix as f64);
                let at = |r: usize, c: usize| lattice[r * cols + c];
                let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
                let bottom = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
                top * (1.0 - ty) + bottom * ty
            }
            Pattern::Gradient { angle } => {
                let s = size.max(2) as f64 - 1.0;
                let t = (fx / s - 0.5) * angle.cos() + (fy / s - 0.5) * angle.sin();
                (t / std::f64::consts::SQRT_2 + 0.5).clamp(0.0, 1.0)
            }
        }
    }
}

fn check_weights(class_weights: &[f64]) -> Result<WeightedIndex<f64>> {
    if class_weights.len() < 2 || class_weights.len() > usize::from(u16::MAX) {
        return Err(Error::invalid("scenes need between 2 and 65535 classes"));
    }
    WeightedIndex::new(class_weights).map_err(|e| Error::invalid(format!("class weights: {e}")))
}

fn render(size: usize, owner: &[usize], classes: &[u16], patterns: &[Pattern]) -> Result<Sample> {
    let plane = size * size;
    let mut image = Tensor::zeros(vec![3, size, size]);
    let mut labels = vec![0u16; plane];
    let data = image.data_mut();
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let region = owner[i];
            let class = classes[region];
            let base = class_colour(class);
            let shade = 0.7 + 0.3 * patterns[region].value(y, x, size);
            for ch in 0..3 {
                data[ch * plane + i] = (base[ch] * shade).clamp(0.0, 1.0);
            }
            labels[i] = class;
        }
    }
    Sample::new(image, LabelMask::new(size, size, labels)?)
}

/// Voronoi scene: `n_regions` uniformly placed sites, each cell assigned a
/// class drawn from `class_weights` and filled with that class's texture.
pub fn generate_texture_scene(
    seed: u64,
    size: usize,
    n_regions: usize,
    class_weights: &[f64],
) -> Result<Scene> {
    if size == 0 || n_regions == 0 {
        return Err(Error::invalid(
            "scene size and region count must be positive",
        ));
    }
    let dist = check_weights(class_weights)?;
    let mut rng = sample_rng(seed, 0);
    let sites: Vec<(f64, f64)> = (0..n_regions)
        .map(|_| {
            (
                rng.random::<f64>() * size as f64,
                rng.random::<f64>() * size as f64,
            )
        })
        .collect();
    let classes: Vec<u16> = (0..n_regions)
        .map(|_| dist.sample(&mut rng) as u16)
        .collect();
    let patterns: Vec<Pattern> = classes
        .iter()
        .map(|&c| Pattern::draw(c, size, &mut rng))
        .collect();
    let mut owner = vec![0usize; size * size];
    for y in 0..size {
        for x in 0..size {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut best = (f64::INFINITY, 0);
            for (k, &(sy, sx)) in sites.iter().enumerate() {
                let d = (py - sy).powi(2) + (px - sx).powi(2);
                if d < best.0 {
                    best = (d, k);
                }
            }
            owner[y * size + x] = best.1;
        }
    }
    Ok(Scene {
        sample: render(size, &owner, &classes, &patterns)?,
        region_classes: classes,
    })
}

/// Class 0 background crossed by `n_lines` straight lines one or two pixels
/// wide, each drawn from the remaining classes by weight.
pub fn generate_thin_scene(
    seed: u64,
    size: usize,
    n_lines: usize,
    class_weights: &[f64],
) -> Result<Scene> {
    if size == 0 {
        return Err(Error::invalid("scene size must be positive"));
    }
    check_weights(class_weights)?;
    let fg = WeightedIndex::new(&class_weights[1..])
        .map_err(|e| Error::invalid(format!("foreground class weights: {e}")))?;
    let mut rng = sample_rng(seed, 1);
    let mut classes = vec![0u16];
    classes.extend((0..n_lines).map(|_| (fg.sample(&mut rng) + 1) as u16));
    let patterns: Vec<Pattern> = classes
        .iter()
        .map(|&c| Pattern::draw(c, size, &mut rng))
        .collect();
    let lines: Vec<(f64, f64, f64, f64)> = (0..n_lines)
        .map(|_| {
            let cy = rng.random::<f64>() * size as f64;
            let cx = rng.random::<f64>() * size as f64;
            let angle = rng.random::<f64>() * PI;
            let width = if rng.random::<bool>() { 1.0 } else { 2.0 };
            (cy, cx, angle, width)
        })
        .collect();
    let mut owner = vec![0usize; size * size];
    for y in 0..size {
        for x in 0..size {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            for (k, &(cy, cx, angle, width)) in lines.iter().enumerate() {
                // distance from the pixel centre to the line through (cy, cx)
                let d = ((px - cx) * angle.sin() - (py - cy) * angle.cos()).abs();
                if d < width / 2.0 {
                    owner[y * size + x] = k + 1;
                }
            }
        }
    }
    Ok(Scene {
        sample: render(size, &owner, &classes, &patterns)?,
        region_classes: classes,
    })
}
