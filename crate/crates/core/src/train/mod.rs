//! Desk-scale training loop: toy model, AdamW with per-group learning rates
//! and cosine annealing, synthetic texture scenes.

pub mod checkpoint;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod scene;
pub mod schedule;

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentConfig, Sample};
use crate::error::{Error, Result};
use crate::metrics::{boundary_iou, ConfusionMatrix};
use crate::util::stable_hash;

pub use model::{LossBreakdown, LossConfig, LossMode, ModelConfig, Params, ToyModel};
pub use optim::{adamw_step, AdamState, AdamWConfig};
pub use scene::{generate_texture_scene, generate_thin_scene, Scene, SceneKind};
pub use schedule::{cosine_lr, ParamGroup, Schedule};

/// Batch size of the reference recipe, recorded next to the toy value.
pub const REFERENCE_BATCH_SIZE: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub kind: SceneKind,
    pub image_size: usize,
    /// Voronoi cells per scene.
    pub regions: usize,
    /// Lines per thin scene.
    pub lines: usize,
    pub class_weights: Vec<f64>,
    pub eval_samples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: SceneKind::Regions,
            image_size: 32,
            regions: 4,
            lines: 2,
            class_weights: vec![1.0, 1.0],
            eval_samples: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optimizer: AdamWConfig,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub lr_min: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Augmentation preset name; the crop is forced to the scene size.
    pub augment: Option<String>,
    pub data: DataConfig,
    /// Boundary band width as a fraction of the image diagonal.
    pub boundary_d_frac: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let s = Schedule::default();
        Self {
            seed: 0,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optimizer: AdamWConfig::default(),
            lr_backbone: s.lr_backbone,
            lr_head: s.lr_head,
            lr_min: s.lr_min,
            batch_size: 8,
            epochs: 1,
            steps_per_epoch: 100,
            augment: None,
            data: DataConfig::default(),
            boundary_d_frac: 0.02,
        }
    }
}

impl TrainConfig {
    /// Epoch count and augmentation of a named recipe: `segformer` (20
    /// epochs, pixel loss) or `mask2former` (40 epochs, with the query
    /// regulariser).
    pub fn recipe(name: &str) -> Result<Self> {
        let mut cfg = Self::default();
        match name {
            "segformer" => {
                cfg.epochs = 20;
                cfg.augment = Some("segformer".into());
            }
            "mask2former" => {
                cfg.epochs = 40;
                cfg.augment = Some("mask2former".into());
                cfg.loss.mode = LossMode::HflpQer;
            }
            other => return Err(Error::invalid(format!("unknown recipe {other:?}"))),
        }
        Ok(cfg)
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            lr_backbone: self.lr_backbone,
            lr_head: self.lr_head,
            lr_min: self.lr_min,
            total_steps: self.total_steps(),
        }
    }

    pub fn augment_config(&self) -> Result<Option<AugmentConfig>> {
        let Some(name) = &self.augment else {
            return Ok(None);
        };
        let mut a = AugmentConfig::preset(name)?;
        a.crop = [self.data.image_size; 2];
        a.ignore_label = self.loss.hflp.ignore_label;
        a.seed = self.seed;
        a.validate()?;
        Ok(Some(a))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule().validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        let size = self.data.image_size;
        if size == 0 || !size.is_multiple_of(self.model.stride) {
            return Err(Error::invalid(format!(
                "image_size {size} must be a positive multiple of stride {}",
                self.model.stride
            )));
        }
        if self.data.class_weights.len() != self.model.classes {
            return Err(Error::invalid(format!(
                "{} class weights for {} classes",
                self.data.class_weights.len(),
                self.model.classes
            )));
        }
        if self.data.eval_samples == 0 {
            return Err(Error::invalid("eval_samples must be positive"));
        }
        if !(self.optimizer.weight_decay >= 0.0 && self.optimizer.weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay must be finite and >= 0"));
        }
        self.augment_config()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub pixel: f64,
    pub query_class: f64,
    pub mask: f64,
    pub qer: f64,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub grad_norm: f64,
    pub grad_norm_backbone: f64,
    pub grad_norm_head: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub miou: f64,
    pub macc: f64,
    pub aacc: f64,
    /// Mean over held-out images of the per-image boundary IoU.
    pub boundary_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    Diverged { step: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub status: RunStatus,
    pub steps: Vec<StepLog>,
    pub eval: EvalMetrics,
    /// Per material class, the number of query predictions (summed over
    /// training steps and samples) whose most likely class it was.
    pub query_usage: Vec<u64>,
    pub min_query_usage: u64,
    pub param_count: usize,
    pub batch_size: usize,
    pub reference_batch_size: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    /// Final model, or the last model with finite parameters on divergence.
    pub model: ToyModel,
}

fn scene(cfg: &TrainConfig, stream: &[u8], index: u64) -> Result<Sample> {
    let seed = stable_hash(&[&cfg.seed.to_le_bytes(), stream, &index.to_le_bytes()]);
    let d = &cfg.data;
    let s = match d.kind {
        SceneKind::Regions => {
            generate_texture_scene(seed, d.image_size, d.regions, &d.class_weights)?
        }
        SceneKind::Thin => generate_thin_scene(seed, d.image_size, d.lines, &d.class_weights)?,
    };
    Ok(s.sample)
}

/// Training sample `index`, augmented when a preset is configured.
pub fn train_sample(cfg: &TrainConfig, aug: Option<&AugmentConfig>, index: u64) -> Result<Sample> {
    let s = scene(cfg, b"train", index)?;
    match aug {
        Some(a) => Ok(augment::apply(&s, a, index)?.0),
        None => Ok(s),
    }
}

/// Held-out sample `index`; never augmented and disjoint from training draws.
pub fn eval_sample(cfg: &TrainConfig, index: u64) -> Result<Sample> {
    scene(cfg, b"eval", index)
}

pub fn evaluate(model: &ToyModel, cfg: &TrainConfig) -> Result<EvalMetrics> {
    let classes = model.config.classes;
    let ignore = cfg.loss.hflp.ignore_label;
    let per_image: Vec<(ConfusionMatrix, f64)> = (0..cfg.data.eval_samples as u64)
        .into_par_iter()
        .map(|i| {
            let s = eval_sample(cfg, i)?;
            let pred = model.predict(&s.image)?;
            let mut cm = ConfusionMatrix::new(classes, ignore);
            cm.accumulate(&pred, &s.mask)?;
            let b = boundary_iou(&pred, &s.mask, classes, ignore, cfg.boundary_d_frac)?;
            Ok((cm, b.mean))
        })
        .collect::<Result<_>>()?;
    let mut total = ConfusionMatrix::new(classes, ignore);
    let mut biou = 0.0;
    for (cm, b) in &per_image {
        total.merge(cm)?;
        biou += b;
    }
    let s = total.summarize()?;
    Ok(EvalMetrics {
        miou: s.miou,
        macc: s.macc,
        aacc: s.aacc,
        boundary_iou: biou / per_image.len() as f64,
    })
}

/// Runs the configured number of steps. Divergence (non-finite loss,
/// gradient or parameters) stops the run and keeps the last good model.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let aug = cfg.augment_config()?;
    let schedule = cfg.schedule();
    let mut model = ToyModel::new(cfg.model, cfg.seed)?;
    let mut states: Vec<AdamState> = model
        .params
        .blocks()
        .iter()
        .map(|t| AdamState::new(t.len()))
        .collect();
    let mut usage = vec![0u64; cfg.model.classes];
    let mut steps = Vec::with_capacity(schedule.total_steps);
    let mut status = RunStatus::Completed;
    let bsz = cfg.batch_size;

    for t in 0..schedule.total_steps {
        let results: Vec<Result<(LossBreakdown, Params)>> = (0..bsz)
            .into_par_iter()
            .map(|b| {
                let s = train_sample(cfg, aug.as_ref(), (t * bsz + b) as u64)?;
                model.loss_and_grad(&s, &cfg.loss)
            })
            .collect();

        // index-ordered reduction keeps the sum independent of scheduling
        let mut grad = Params::zeros(&cfg.model);
        let mut mean = LossBreakdown::default();
        let mut failure = None;
        for r in results {
            match r {
                Ok((l, g)) => {
                    grad.add_assign(&g);
                    mean.total += l.total;
                    mean.pixel += l.pixel;
                    mean.query_class += l.query_class;
                    mean.mask += l.mask;
                    mean.qer += l.qer;
                    for (u, v) in usage.iter_mut().zip(&l.usage) {
                        *u += v;
                    }
                }
                Err(Error::NonFinite(what)) => {
                    failure.get_or_insert_with(|| format!("non-finite value in {what}"));
                }
                Err(e) => return Err(e),
            }
        }
        if let Some(reason) = failure {
            status = RunStatus::Diverged { step: t, reason };
            break;
        }
        let inv = 1.0 / bsz as f64;
        grad.scale(inv);

        let lr_b = cosine_lr(t, &schedule, ParamGroup::Backbone)?;
        let lr_h = cosine_lr(t, &schedule, ParamGroup::Head)?;
        let mut next = model.clone();
        let mut next_states = states.clone();
        let mut step_err = None;
        for (b, name) in model::BLOCK_NAMES.iter().enumerate() {
            let lr = match model::block_group(name) {
                ParamGroup::Backbone => lr_b,
                ParamGroup::Head => lr_h,
            };
            let target = next.params.blocks_mut()[b].data_mut();
            if let Err(e) = adamw_step(
                target,
                grad.blocks()[b].data(),
                &mut next_states[b],
                lr,
                &cfg.optimizer,
            ) {
                step_err = Some(e.to_string());
                break;
            }
        }
        if step_err.is_none() && !next.params.is_finite() {
            step_err = Some("parameters became non-finite".into());
        }
        if let Some(reason) = step_err {
            status = RunStatus::Diverged { step: t, reason };
            break;
        }
        model = next;
        states = next_states;

        steps.push(StepLog {
            step: t,
            loss: mean.total * inv,
            pixel: mean.pixel * inv,
            query_class: mean.query_class * inv,
            mask: mean.mask * inv,
            qer: mean.qer * inv,
            lr_backbone: lr_b,
            lr_head: lr_h,
            grad_norm: grad.norm(None),
            grad_norm_backbone: grad.norm(Some(ParamGroup::Backbone)),
            grad_norm_head: grad.norm(Some(ParamGroup::Head)),
        });
    }

    let eval = evaluate(&model, cfg)?;
    let report = TrainReport {
        status,
        steps,
        eval,
        min_query_usage: usage.iter().copied().min().unwrap_or(0),
        query_usage: usage,
        param_count: model.params.count(),
        batch_size: bsz,
        reference_batch_size: REFERENCE_BATCH_SIZE,
    };
    Ok(TrainOutcome { report, model })
}

/// `step,loss,pixel,query_class,mask,qer,lr_backbone,lr_head`, floats in
/// shortest round-trip form.
pub fn write_loss_curve(steps: &[StepLog], mut w: impl Write) -> std::io::Result<()> {
    writeln!(
        w,
        "step,loss,pixel,query_class,mask,qer,lr_backbone,lr_head"
    )?;
    for s in steps {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            s.step, s.loss, s.pixel, s.query_class, s.mask, s.qer, s.lr_backbone, s.lr_head
        )?;
    }
    Ok(())
}

pub fn write_grad_norms(steps: &[StepLog], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "step,grad_norm,backbone,head")?;
    for s in steps {
        writeln!(
            w,
            "{},{},{},{}",
            s.step, s.grad_norm, s.grad_norm_backbone, s.grad_norm_head
        )?;
    }
    Ok(())
}
