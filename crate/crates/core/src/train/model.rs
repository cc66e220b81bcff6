//! Tiny segmentation network with hand-written backprop.
//!
//! Layout for an image `(3, H, W)` at stride `s`, grid `h = H/s`, `w = W/s`,
//! `P = h·w` positions and feature width `D`:
//!
//! ```text
//! F0 = tanh(We · patches + be)                  (D, P)   backbone
//! F  = F0 + tanh(conv3x3(F0) + bc)              (D, P)   backbone
//! Z  = Wp · F + bp                              (C, P)   pixel head
//! M  = E · F / √D                               (Nq, P)  query masks
//! Q  = Wq · (E + softmax_P(M) · Fᵀ) + bq        (Nq, K)  query classes, K = C + 1
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::Sample;
use crate::error::{Error, Result};
use crate::loss::{
    cross_entropy_downsampled, hflp_loss, qer_loss, HflpConfig, LogitMap, QerConfig,
};
use crate::matching::{hungarian, matching_cost, GtSegment, MatchWeights};
use crate::tensor::{log_softmax, softmax, upsample_bilinear, LabelMask, Tensor};

use super::schedule::ParamGroup;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Material classes, excluding the no-object slot of the query head.
    pub classes: usize,
    pub dim: usize,
    pub queries: usize,
    pub stride: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            classes: 2,
            dim: 16,
            queries: 4,
            stride: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("model needs at least 2 classes"));
        }
        if self.dim == 0 || self.queries == 0 || self.stride == 0 {
            return Err(Error::invalid("dim, queries and stride must be positive"));
        }
        Ok(())
    }

    pub fn patch_len(&self) -> usize {
        3 * self.stride * self.stride
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossMode {
    #[serde(rename = "hflp")]
    Hflp,
    #[serde(rename = "downsampled-ce")]
    DownsampledCe,
    #[serde(rename = "hflp+qer")]
    HflpQer,
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hflp" => Ok(Self::Hflp),
            "downsampled-ce" => Ok(Self::DownsampledCe),
            "hflp+qer" => Ok(Self::HflpQer),
            other => Err(Error::invalid(format!("unknown loss mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub mode: LossMode,
    pub hflp: HflpConfig,
    /// Used only in `hflp+qer` mode.
    pub qer: QerConfig,
    /// Weight of the no-object target for unmatched queries.
    pub no_object_weight: f64,
    /// Weight of the query classification and mask terms.
    pub query_weight: f64,
    pub match_weights: MatchWeights,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            mode: LossMode::Hflp,
            hflp: HflpConfig::default(),
            qer: QerConfig::default(),
            no_object_weight: 0.1,
            query_weight: 1.0,
            match_weights: MatchWeights::default(),
        }
    }
}

/// Parameter blocks. Every block belongs to exactly one [`ParamGroup`].
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub embed_w: Tensor,
    pub embed_b: Tensor,
    pub conv_w: Tensor,
    pub conv_b: Tensor,
    pub pixel_w: Tensor,
    pub pixel_b: Tensor,
    pub query_embed: Tensor,
    pub class_w: Tensor,
    pub class_b: Tensor,
}

pub const BLOCK_NAMES: [&str; 9] = [
    "backbone.embed.weight",
    "backbone.embed.bias",
    "backbone.conv.weight",
    "backbone.conv.bias",
    "head.pixel.weight",
    "head.pixel.bias",
    "head.query.embed",
    "head.query.class.weight",
    "head.query.class.bias",
];

pub fn block_group(name: &str) -> ParamGroup {
    if name.starts_with("backbone.") {
        ParamGroup::Backbone
    } else {
        ParamGroup::Head
    }
}

impl Params {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (d, c, n) = (cfg.dim, cfg.classes, cfg.queries);
        Self {
            embed_w: Tensor::zeros(vec![d, cfg.patch_len()]),
            embed_b: Tensor::zeros(vec![d]),
            conv_w: Tensor::zeros(vec![d, d, 3, 3]),
            conv_b: Tensor::zeros(vec![d]),
            pixel_w: Tensor::zeros(vec![c, d]),
            pixel_b: Tensor::zeros(vec![c]),
            query_embed: Tensor::zeros(vec![n, d]),
            class_w: Tensor::zeros(vec![c + 1, d]),
            class_b: Tensor::zeros(vec![c + 1]),
        }
    }

    pub fn blocks(&self) -> [&Tensor; 9] {
        [
            &self.embed_w,
            &self.embed_b,
            &self.conv_w,
            &self.conv_b,
            &self.pixel_w,
            &self.pixel_b,
            &self.query_embed,
            &self.class_w,
            &self.class_b,
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.embed_w,
            &mut self.embed_b,
            &mut self.conv_w,
            &mut self.conv_b,
            &mut self.pixel_w,
            &mut self.pixel_b,
            &mut self.query_embed,
            &mut self.class_w,
            &mut self.class_b,
        ]
    }

    pub fn count(&self) -> usize {
        self.blocks().iter().map(|t| t.len()).sum()
    }

    pub fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.blocks_mut() {
            for x in t.data_mut() {
                *x *= k;
            }
        }
    }

    /// L2 norm over the blocks of one group, or over all blocks.
    pub fn norm(&self, group: Option<ParamGroup>) -> f64 {
        self.blocks()
            .iter()
            .zip(BLOCK_NAMES)
            .filter(|(_, name)| group.is_none_or(|g| block_group(name) == g))
            .flat_map(|(t, _)| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|t| t.is_finite())
    }
}

/// Per-term losses for one sample.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub pixel: f64,
    pub query_class: f64,
    pub mask: f64,
    pub qer: f64,
    /// Queries whose most likely class is each material class.
    pub usage: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: ModelConfig,
    pub params: Params,
}

struct Forward {
    h: usize,
    w: usize,
    patches: Vec<f64>,
    f0: Vec<f64>,
    f1: Vec<f64>,
    feat: Vec<f64>,
    z: Tensor,
    m: Vec<f64>,
    attn: Vec<f64>,
    g: Vec<f64>,
    q: Tensor,
}

fn init_normal(rng: &mut ChaCha8Rng, t: &mut Tensor, std: f64) {
    let normal = Normal::new(0.0, std).expect("positive std");
    for v in t.data_mut() {
        *v = normal.sample(rng);
    }
}

impl ToyModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut p = Params::zeros(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim as f64;
        init_normal(
            &mut rng,
            &mut p.embed_w,
            1.0 / (config.patch_len() as f64).sqrt(),
        );
        init_normal(&mut rng, &mut p.conv_w, 1.0 / (9.0 * d).sqrt());
        init_normal(&mut rng, &mut p.pixel_w, 1.0 / d.sqrt());
        init_normal(&mut rng, &mut p.query_embed, 1.0);
        init_normal(&mut rng, &mut p.class_w, 1.0 / d.sqrt());
        Ok(Self { config, params: p })
    }

    pub fn from_params(config: ModelConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let expected = Params::zeros(&config);
        for ((have, want), name) in params
            .blocks()
            .iter()
            .zip(expected.blocks())
            .zip(BLOCK_NAMES)
        {
            if have.shape() != want.shape() {
                return Err(Error::Shape(format!(
                    "{name}: expected {:?}, got {:?}",
                    want.shape(),
                    have.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    fn grid(&self, image: &Tensor) -> Result<(usize, usize)> {
        let s = self.config.stride;
        match image.shape() {
            [3, hh, ww] if hh % s == 0 && ww % s == 0 && *hh > 0 && *ww > 0 => Ok((hh / s, ww / s)),
            other => Err(Error::Shape(format!(
                "image must be (3, H, W) with H, W positive multiples of {s}, got {other:?}"
            ))),
        }
    }

    fn forward(&self, image: &Tensor) -> Result<Forward> {
        let (h, w) = self.grid(image)?;
        let cfg = &self.config;
        let (s, d, c, nq) = (cfg.stride, cfg.dim, cfg.classes, cfg.queries);
        let k = c + 1;
        let pl = cfg.patch_len();
        let npos = h * w;
        let (img_w, img_plane) = (w * s, h * s * w * s);
        let p = &self.params;

        // patches (P, L)
        let mut patches = vec![0.0; npos * pl];
        let img = image.data();
        for i in 0..h {
            for j in 0..w {
                let row = &mut patches[(i * w + j) * pl..(i * w + j + 1) * pl];
                for ch in 0..3 {
                    for dy in 0..s {
                        for dx in 0..s {
                            row[(ch * s + dy) * s + dx] =
                                img[ch * img_plane + (i * s + dy) * img_w + j * s + dx];
                        }
                    }
                }
            }
        }

        let we = p.embed_w.data();
        let mut f0 = vec![0.0; d * npos];
        for e in 0..d {
            let wrow = &we[e * pl..(e + 1) * pl];
            for pos in 0..npos {
                let x = &patches[pos * pl..(pos + 1) * pl];
                let u: f64 =
                    p.embed_b.data()[e] + wrow.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                f0[e * npos + pos] = u.tanh();
            }
        }

        let wc = p.conv_w.data();
        let mut f1 = vec![0.0; d * npos];
        for o in 0..d {
            for i in 0..h {
                for j in 0..w {
                    let mut u = p.conv_b.data()[o];
                    for e in 0..d {
                        for ky in 0..3 {
                            let Some(y) = (i + ky).checked_sub(1).filter(|&y| y < h) else {
                                continue;
                            };
                            for kx in 0..3 {
                                let Some(x) = (j + kx).checked_sub(1).filter(|&x| x < w) else {
                                    continue;
                                };
                                u += wc[((o * d + e) * 3 + ky) * 3 + kx] * f0[e * npos + y * w + x];
                            }
                        }
                    }
                    f1[o * npos + i * w + j] = u.tanh();
                }
            }
        }
        let feat: Vec<f64> = f0.iter().zip(&f1).map(|(a, b)| a + b).collect();

        let wp = p.pixel_w.data();
        let mut z = Tensor::zeros(vec![c, h, w]);
        for cls in 0..c {
            for pos in 0..npos {
                let mut v = p.pixel_b.data()[cls];
                for e in 0..d {
                    v += wp[cls * d + e] * feat[e * npos + pos];
                }
                z.data_mut()[cls * npos + pos] = v;
            }
        }

        let emb = p.query_embed.data();
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let mut m = vec![0.0; nq * npos];
        for qi in 0..nq {
            for pos in 0..npos {
                let mut v = 0.0;
                for e in 0..d {
                    v += emb[qi * d + e] * feat[e * npos + pos];
                }
                m[qi * npos + pos] = v * inv_sqrt_d;
            }
        }
        let attn = softmax(&Tensor::new(vec![nq, npos], m.clone())?, 1)?.into_data();
        let mut g = emb.to_vec();
        for qi in 0..nq {
            for e in 0..d {
                let mut v = 0.0;
                for pos in 0..npos {
                    v += attn[qi * npos + pos] * feat[e * npos + pos];
                }
                g[qi * d + e] += v;
            }
        }
        let wq = p.class_w.data();
        let mut q = Tensor::zeros(vec![nq, k]);
        for qi in 0..nq {
            for j in 0..k {
                let mut v = p.class_b.data()[j];
                for e in 0..d {
                    v += wq[j * d + e] * g[qi * d + e];
                }
                q.data_mut()[qi * k + j] = v;
            }
        }
        Ok(Forward {
            h,
            w,
            patches,
            f0,
            f1,
            feat,
            z,
            m,
            attn,
            g,
            q,
        })
    }

    /// Low-resolution pixel logits `(C, H/s, W/s)`.
    pub fn logits(&self, image: &Tensor) -> Result<LogitMap> {
        LogitMap::new(self.forward(image)?.z, self.config.stride)
    }

    /// Query class logits `(Nq, C + 1)`; the last column is no-object.
    pub fn query_logits(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.forward(image)?.q)
    }

    /// Full-resolution prediction: bilinear upsampling then argmax.
    pub fn predict(&self, image: &Tensor) -> Result<LabelMask> {
        let z = self.logits(image)?;
        let (hh, ww) = (image.shape()[1], image.shape()[2]);
        let up = upsample_bilinear(z.tensor(), hh, ww, false)?;
        let c = self.config.classes;
        let plane = hh * ww;
        Ok(LabelMask::from_fn(hh, ww, |y, x| {
            let i = y * ww + x;
            let mut best = 0;
            for cls in 1..c {
                if up.data()[cls * plane + i] > up.data()[best * plane + i] {
                    best = cls;
                }
            }
            best as u16
        }))
    }

    /// Ground-truth segments on the feature grid: per present class, the
    /// fraction of each stride cell covered by that class.
    fn segments(
        &self,
        mask: &LabelMask,
        h: usize,
        w: usize,
        ignore: u16,
    ) -> Result<Vec<GtSegment>> {
        let s = self.config.stride;
        let area = (s * s) as f64;
        let mut segs = Vec::new();
        for label in mask.labels() {
            if label == ignore {
                continue;
            }
            if usize::from(label) >= self.config.classes {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes: self.config.classes,
                });
            }
            let mut region = Tensor::zeros(vec![h, w]);
            for y in 0..h * s {
                for x in 0..w * s {
                    if mask.get(y, x) == label {
                        region.data_mut()[(y / s) * w + x / s] += 1.0 / area;
                    }
                }
            }
            segs.push(GtSegment {
                class_id: usize::from(label),
                region,
            });
        }
        Ok(segs)
    }

    /// Loss and parameter gradient for one sample.
    pub fn loss_and_grad(
        &self,
        sample: &Sample,
        cfg: &LossConfig,
    ) -> Result<(LossBreakdown, Params)> {
        let fw = self.forward(&sample.image)?;
        let mc = &self.config;
        let (d, c, nq) = (mc.dim, mc.classes, mc.queries);
        let k = c + 1;
        let (h, w) = (fw.h, fw.w);
        let npos = h * w;
        let pl = mc.patch_len();
        let p = &self.params;
        let mut out = LossBreakdown {
            usage: vec![0; c],
            ..Default::default()
        };

        // pixel head
        let zmap = LogitMap::new(fw.z.clone(), mc.stride)?;
        let pix = match cfg.mode {
            LossMode::Hflp | LossMode::HflpQer => hflp_loss(&zmap, &sample.mask, &cfg.hflp)?,
            LossMode::DownsampledCe => {
                cross_entropy_downsampled(&zmap, &sample.mask, cfg.hflp.ignore_label)?
            }
        };
        out.pixel = pix.loss;
        let dz = pix.grad.into_data();

        // query head: matching against soft ground-truth regions
        let segs = self.segments(&sample.mask, h, w, cfg.hflp.ignore_label)?;
        let qprob = softmax(&fw.q, 1)?;
        let logq = log_softmax(&fw.q, 1)?;
        let mprob: Vec<f64> = fw.m.iter().map(|&v| sigmoid(v)).collect();
        let mut target = vec![None; nq];
        if !segs.is_empty() {
            let cost = matching_cost(
                &qprob,
                &Tensor::new(vec![nq, h, w], mprob.clone())?,
                &segs,
                cfg.match_weights,
            )?;
            for (qi, t) in hungarian(&cost)?.pairs {
                target[qi] = Some(t);
            }
        }

        let mut dq = vec![0.0; nq * k];
        let weight_sum: f64 = target
            .iter()
            .map(|t| {
                if t.is_some() {
                    1.0
                } else {
                    cfg.no_object_weight
                }
            })
            .sum();
        let qw = cfg.query_weight;
        if weight_sum > 0.0 && qw != 0.0 {
            for qi in 0..nq {
                let (cls, wt) = match target[qi] {
                    Some(t) => (segs[t].class_id, 1.0),
                    None => (c, cfg.no_object_weight),
                };
                out.query_class -= wt * logq.data()[qi * k + cls] / weight_sum;
                for j in 0..k {
                    let onehot = if j == cls { 1.0 } else { 0.0 };
                    dq[qi * k + j] += qw * wt * (qprob.data()[qi * k + j] - onehot) / weight_sum;
                }
            }
        }

        let mut dm = vec![0.0; nq * npos];
        let matched = target.iter().filter(|t| t.is_some()).count();
        if matched > 0 && qw != 0.0 {
            let norm = (matched * npos) as f64;
            for qi in 0..nq {
                let Some(t) = target[qi] else { continue };
                let region = segs[t].region.data();
                for pos in 0..npos {
                    let (logit, r) = (fw.m[qi * npos + pos], region[pos]);
                    // binary cross-entropy in logit form
                    out.mask += (softplus(logit) - r * logit) / norm;
                    dm[qi * npos + pos] += qw * (mprob[qi * npos + pos] - r) / norm;
                }
            }
        }

        if cfg.mode == LossMode::HflpQer {
            let qer = qer_loss(&fw.q, &cfg.qer)?;
            out.qer = qer.loss;
            for (a, b) in dq.iter_mut().zip(qer.grad.data()) {
                *a += b;
            }
        }
        out.total = out.pixel + qw * (out.query_class + out.mask) + out.qer;

        for qi in 0..nq {
            let row = &fw.q.data()[qi * k..(qi + 1) * k];
            let best = (1..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            if best < c {
                out.usage[best] += 1;
            }
        }

        // backward
        let mut gr = Params::zeros(mc);
        let mut dfeat = vec![0.0; d * npos];

        // class head
        let mut dg = vec![0.0; nq * d];
        for qi in 0..nq {
            for j in 0..k {
                let gq = dq[qi * k + j];
                if gq == 0.0 {
                    continue;
                }
                gr.class_b.data_mut()[j] += gq;
                for e in 0..d {
                    gr.class_w.data_mut()[j * d + e] += gq * fw.g[qi * d + e];
                    dg[qi * d + e] += gq * p.class_w.data()[j * d + e];
                }
            }
        }
        // G = E + A·Fᵀ
        gr.query_embed.data_mut().copy_from_slice(&dg);
        let mut da = vec![0.0; nq * npos];
        for qi in 0..nq {
            for pos in 0..npos {
                let a = fw.attn[qi * npos + pos];
                let mut acc = 0.0;
                for e in 0..d {
                    let g = dg[qi * d + e];
                    acc += g * fw.feat[e * npos + pos];
                    dfeat[e * npos + pos] += a * g;
                }
                da[qi * npos + pos] = acc;
            }
        }
        // softmax over positions
        for qi in 0..nq {
            let a = &fw.attn[qi * npos..(qi + 1) * npos];
            let dar = &da[qi * npos..(qi + 1) * npos];
            let dot: f64 = a.iter().zip(dar).map(|(x, y)| x * y).sum();
            for pos in 0..npos {
                dm[qi * npos + pos] += a[pos] * (dar[pos] - dot);
            }
        }
        // M = E·F/√D
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        for qi in 0..nq {
            for pos in 0..npos {
                let g = dm[qi * npos + pos] * inv_sqrt_d;
                if g == 0.0 {
                    continue;
                }
                for e in 0..d {
                    gr.query_embed.data_mut()[qi * d + e] += g * fw.feat[e * npos + pos];
                    dfeat[e * npos + pos] += g * p.query_embed.data()[qi * d + e];
                }
            }
        }
        // pixel head
        for cls in 0..c {
            for pos in 0..npos {
                let g = dz[cls * npos + pos];
                gr.pixel_b.data_mut()[cls] += g;
                for e in 0..d {
                    gr.pixel_w.data_mut()[cls * d + e] += g * fw.feat[e * npos + pos];
                    dfeat[e * npos + pos] += g * p.pixel_w.data()[cls * d + e];
                }
            }
        }
        // F = F0 + tanh(U1)
        let mut df0 = dfeat.clone();
        let du1: Vec<f64> = dfeat
            .iter()
            .zip(&fw.f1)
            .map(|(g, t)| g * (1.0 - t * t))
            .collect();
        let wc = p.conv_w.data();
        for o in 0..d {
            for i in 0..h {
                for j in 0..w {
                    let g = du1[o * npos + i * w + j];
                    gr.conv_b.data_mut()[o] += g;
                    for e in 0..d {
                        for ky in 0..3 {
                            let Some(y) = (i + ky).checked_sub(1).filter(|&y| y < h) else {
                                continue;
                            };
                            for kx in 0..3 {
                                let Some(x) = (j + kx).checked_sub(1).filter(|&x| x < w) else {
                                    continue;
                                };
                                let wi = ((o * d + e) * 3 + ky) * 3 + kx;
                                let src = e * npos + y * w + x;
                                gr.conv_w.data_mut()[wi] += g * fw.f0[src];
                                df0[src] += g * wc[wi];
                            }
                        }
                    }
                }
            }
        }
        // F0 = tanh(We·x + be)
        for e in 0..d {
            for pos in 0..npos {
                let t = fw.f0[e * npos + pos];
                let g = df0[e * npos + pos] * (1.0 - t * t);
                gr.embed_b.data_mut()[e] += g;
                let x = &fw.patches[pos * pl..(pos + 1) * pl];
                let row = &mut gr.embed_w.data_mut()[e * pl..(e + 1) * pl];
                for (r, xv) in row.iter_mut().zip(x) {
                    *r += g * xv;
                }
            }
        }

        if !out.total.is_finite() || !gr.is_finite() {
            return Err(Error::NonFinite("toy model loss"));
        }
        Ok((out, gr))
    }

    /// Loss value alone, for finite-difference checks.
    pub fn loss(&self, sample: &Sample, cfg: &LossConfig) -> Result<f64> {
        Ok(self.loss_and_grad(sample, cfg)?.0.total)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
