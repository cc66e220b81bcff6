//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 runtime
//! failure (divergence, fatal I/O), 3 verification failure. Failures are
//! also written to `error.json` in the output directory when one was given.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::augment::{self, AugmentConfig, Sample};
use crate::error::Error;
use crate::ingest::{self, FetchPolicy};
use crate::io;
use crate::metrics::{boundary_iou, ConfusionMatrix};
use crate::split::{self, ClassHistogram, SplitManifest};
use crate::train::gradcheck::{check_instances, GradcheckConfig};
use crate::train::{self, checkpoint, LossMode, RunStatus, TrainConfig};
use crate::util::sample_key;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (config schema 1)");

#[derive(Parser, Debug)]
#[command(name = "matseg", version = VERSION, about = "Dense material segmentation toolkit")]
struct Cli {
    /// Seed overriding the one in any config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Progress messages on stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Download a JSONL manifest, or re-verify local files with --offline.
    Fetch(FetchArgs),
    /// Partition labeled masks into train/val/test.
    Split(SplitArgs),
    /// Apply the augmentation pipeline to image/mask pairs.
    Augment(AugmentArgs),
    /// Score predicted label maps against ground truth.
    Eval(EvalArgs),
    /// Train the toy model on synthetic scenes.
    TrainToy(TrainArgs),
    /// Compare analytic and finite-difference gradients of the toy model.
    Gradcheck(GradcheckArgs),
}

#[derive(clap::Args, Debug)]
struct FetchArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON fetch policy; flags below override its fields.
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long)]
    max_parallel: Option<usize>,
    #[arg(long)]
    max_attempts: Option<u32>,
    /// Only re-hash files already in --out.
    #[arg(long)]
    offline: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum SplitMethod {
    Stratified,
    Random,
}

#[derive(clap::Args, Debug)]
struct SplitArgs {
    /// Directory of grayscale PNG label maps; file stems are sample ids.
    #[arg(long)]
    masks: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Train, val and test fractions.
    #[arg(long, default_value = "0.8,0.1,0.1")]
    ratios: String,
    #[arg(long, value_enum, default_value = "stratified")]
    method: SplitMethod,
    /// Class count; inferred from the largest label when absent.
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, default_value_t = 255)]
    ignore_label: u16,
    /// Largest acceptable divergence between splits.
    #[arg(long, default_value_t = 0.02)]
    threshold: f64,
    /// JSON `{"train": [...], "val": [...], "test": [...]}` reproducing a
    /// given partition instead of generating one.
    #[arg(long, conflicts_with = "verify")]
    from_lists: Option<PathBuf>,
    /// Check an existing split manifest against the masks.
    #[arg(long)]
    verify: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct AugmentArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    masks: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "segformer")]
    preset: String,
    /// JSON augmentation config; replaces the preset.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    classes: usize,
    #[arg(long, default_value_t = 255)]
    ignore_label: u16,
    /// Boundary band width as a fraction of the image diagonal.
    #[arg(long, default_value_t = 0.02)]
    d_frac: f64,
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    /// JSON training config; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from a named recipe (segformer, mask2former) instead of defaults.
    #[arg(long, conflicts_with = "config")]
    recipe: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args, Debug)]
struct GradcheckArgs {
    /// JSON gradcheck config; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    mode: Option<String>,
    /// Also write gradcheck.json here.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Command {
    fn out_dir(&self) -> Option<&Path> {
        match self {
            Command::Fetch(a) => Some(&a.out),
            Command::Split(a) => Some(&a.out),
            Command::Augment(a) => Some(&a.out),
            Command::Eval(a) => Some(&a.out),
            Command::TrainToy(a) => Some(&a.out),
            Command::Gradcheck(a) => a.out.as_deref(),
        }
    }
}

#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
    details: Vec<String>,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
            details: Vec::new(),
        }
    }

    fn input(e: impl std::fmt::Display) -> Self {
        Self::new(1, e.to_string())
    }

    fn kind(&self) -> &'static str {
        match self.code {
            1 => "validation",
            2 => "runtime",
            _ => "verification",
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Diverged { .. } | Error::Io { .. } => 2,
            _ => 1,
        };
        Self::new(code, e.to_string())
    }
}

type Outcome = std::result::Result<(), Failure>;

struct Ctx {
    seed: Option<u64>,
    verbose: bool,
}

impl Ctx {
    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn ensure_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| Failure::from(Error::io(dir, e)))
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Outcome {
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(&path, text + "\n").map_err(|e| Failure::from(Error::io(&path, e)))
}

fn write_resolved(dir: &Path, command: &str, config: &impl Serialize) -> Outcome {
    ensure_dir(dir)?;
    write_json(
        dir,
        "resolved_config.json",
        &json!({
            "schema_version": CONFIG_SCHEMA_VERSION,
            "toolkit_version": env!("CARGO_PKG_VERSION"),
            "command": command,
            "config": config,
        }),
    )
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> std::result::Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::input(Error::io(path, e)))?;
    serde_json::from_str(&text).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

/// PNG files in `dir`, keyed by file stem, in name order.
fn png_files(dir: &Path) -> std::result::Result<BTreeMap<String, PathBuf>, Failure> {
    let rd = fs::read_dir(dir).map_err(|e| Failure::input(Error::io(dir, e)))?;
    let mut out = BTreeMap::new();
    for entry in rd {
        let path = entry.map_err(|e| Failure::input(Error::io(dir, e)))?.path();
        if path
            .extension()
            .is_some_and(|x| x.eq_ignore_ascii_case("png"))
        {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Requires both directories to hold the same file names.
fn pair_files(
    a_name: &str,
    a: &BTreeMap<String, PathBuf>,
    b_name: &str,
    b: &BTreeMap<String, PathBuf>,
) -> Outcome {
    let ka: BTreeSet<&String> = a.keys().collect();
    let kb: BTreeSet<&String> = b.keys().collect();
    if ka == kb {
        return Ok(());
    }
    let mut f = Failure::new(
        1,
        format!(
            "{a_name} has {} images but {b_name} has {}; unmatched files listed",
            a.len(),
            b.len()
        ),
    );
    for k in ka.difference(&kb) {
        f.details
            .push(format!("only in {a_name}: {}", a[*k].display()));
    }
    for k in kb.difference(&ka) {
        f.details
            .push(format!("only in {b_name}: {}", b[*k].display()));
    }
    Err(f)
}

fn parse_ratios(s: &str) -> std::result::Result<[f64; 3], Failure> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Failure::input(format!("ratios: {e}")))?;
    let r: [f64; 3] = parts
        .try_into()
        .map_err(|_| Failure::input("ratios must have three values: train,val,test"))?;
    split::validate_ratios(r)?;
    Ok(r)
}

fn cmd_fetch(a: &FetchArgs, ctx: &Ctx) -> Outcome {
    let mut policy: FetchPolicy = match &a.policy {
        Some(p) => read_json(p)?,
        None => FetchPolicy::default(),
    };
    if let Some(n) = a.max_parallel {
        policy.max_parallel = n;
    }
    if let Some(n) = a.max_attempts {
        policy.max_attempts = n;
    }
    policy.validate()?;
    let entries = ingest::read_manifest(&a.manifest).map_err(Failure::input)?;
    write_resolved(
        &a.out,
        "fetch",
        &json!({ "manifest": a.manifest, "out": a.out, "offline": a.offline, "policy": policy }),
    )?;
    if a.offline {
        let report = ingest::verify_local(&entries, &a.out)?;
        println!(
            "verified {} entries: {} ok, {} corrupt, {} missing",
            entries.len(),
            report.ok,
            report.corrupt,
            report.missing
        );
        return write_json(&a.out, "verify_report.json", &report);
    }
    ctx.log(format!("fetching {} entries", entries.len()));
    let (outcomes, report) = ingest::fetch_all(&entries, &a.out, &policy)?;
    println!(
        "recovered {} of {} ({})",
        report.totals[&ingest::FetchStatus::Ok],
        report.total,
        report.recovery_rate_display.as_deref().unwrap_or("n/a")
    );
    write_json(
        &a.out,
        "fetch_report.json",
        &json!({ "report": report, "outcomes": outcomes }),
    )
}

fn load_histograms(
    masks: &BTreeMap<String, PathBuf>,
    classes: Option<usize>,
    ignore: u16,
) -> std::result::Result<(Vec<(String, ClassHistogram)>, usize), Failure> {
    let mut loaded = Vec::with_capacity(masks.len());
    for (id, path) in masks {
        loaded.push((id.clone(), io::read_labels(path).map_err(Failure::input)?));
    }
    let classes = match classes {
        Some(c) => c,
        None => loaded
            .iter()
            .flat_map(|(_, m)| m.labels())
            .filter(|&l| l != ignore)
            .max()
            .map_or(0, |l| usize::from(l) + 1),
    };
    let hists = loaded
        .iter()
        .map(|(id, m)| Ok((id.clone(), ClassHistogram::from_mask(m, classes, ignore)?)))
        .collect::<crate::Result<Vec<_>>>()
        .map_err(Failure::input)?;
    Ok((hists, classes))
}

#[derive(Deserialize)]
struct IndexLists {
    train: Vec<String>,
    val: Vec<String>,
    test: Vec<String>,
}

fn cmd_split(a: &SplitArgs, ctx: &Ctx) -> Outcome {
    let ratios = parse_ratios(&a.ratios)?;
    let seed = ctx.seed.unwrap_or(0);
    let masks = png_files(&a.masks)?;
    let (samples, classes) = load_histograms(&masks, a.classes, a.ignore_label)?;
    write_resolved(
        &a.out,
        "split",
        &json!({
            "masks": a.masks, "out": a.out, "ratios": ratios, "method": a.method,
            "classes": classes, "ignore_label": a.ignore_label, "threshold": a.threshold,
            "from_lists": a.from_lists, "verify": a.verify, "seed": seed,
        }),
    )?;

    if let Some(path) = &a.verify {
        let manifest: SplitManifest = read_json(path)?;
        let lookup: BTreeMap<&str, &ClassHistogram> =
            samples.iter().map(|(id, h)| (id.as_str(), h)).collect();
        let report = split::verify_split(
            &manifest,
            |id| lookup.get(id).map(|h| (*h).clone()),
            a.threshold,
        );
        write_json(&a.out, "verify_report.json", &report)?;
        println!(
            "split verification {}: jsd train/val {:?}, train/test {:?}",
            if report.passed { "passed" } else { "failed" },
            report.jsd_train_val,
            report.jsd_train_test
        );
        return if report.passed {
            Ok(())
        } else {
            Err(Failure::new(3, "split verification failed"))
        };
    }

    let manifest = match (&a.from_lists, a.method) {
        (Some(p), _) => {
            let lists: IndexLists = read_json(p)?;
            SplitManifest::from_index_lists(&samples, [&lists.train, &lists.val, &lists.test])?
        }
        (None, SplitMethod::Stratified) => split::stratified_split(&samples, ratios, seed)?,
        (None, SplitMethod::Random) => split::random_split(&samples, ratios, seed)?,
    };
    let path = a.out.join("split.json");
    fs::write(&path, manifest.to_json()? + "\n").map_err(|e| Failure::from(Error::io(&path, e)))?;
    println!(
        "train {} / val {} / test {}; jsd train/val {:.6}, train/test {:.6}",
        manifest.count(split::Split::Train),
        manifest.count(split::Split::Val),
        manifest.count(split::Split::Test),
        manifest.jsd_train_val,
        manifest.jsd_train_test
    );
    if manifest.jsd_train_val > a.threshold || manifest.jsd_train_test > a.threshold {
        return Err(Failure::new(
            3,
            format!("split divergence exceeds threshold {}", a.threshold),
        ));
    }
    Ok(())
}

fn cmd_augment(a: &AugmentArgs, ctx: &Ctx) -> Outcome {
    let mut cfg: AugmentConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => AugmentConfig::preset(&a.preset).map_err(Failure::input)?,
    };
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let images = png_files(&a.images)?;
    let masks = png_files(&a.masks)?;
    pair_files("images", &images, "masks", &masks)?;
    write_resolved(&a.out, "augment", &cfg)?;
    let (img_dir, mask_dir) = (a.out.join("images"), a.out.join("masks"));
    ensure_dir(&img_dir)?;
    ensure_dir(&mask_dir)?;
    let mut records = String::new();
    for (stem, img_path) in &images {
        let image = io::read_rgb(img_path).map_err(Failure::input)?;
        let mask = io::read_labels(&masks[stem]).map_err(Failure::input)?;
        let sample = Sample::new(image, mask).map_err(Failure::input)?;
        let (out, record) = augment::apply(&sample, &cfg, sample_key(stem))?;
        io::write_rgb(&img_dir.join(format!("{stem}.png")), &out.image)?;
        io::write_labels(&mask_dir.join(format!("{stem}.png")), &out.mask)?;
        records.push_str(
            &serde_json::to_string(&json!({ "id": stem, "record": record }))
                .map_err(Error::from)?,
        );
        records.push('\n');
        ctx.log(format!("augmented {stem}"));
    }
    let path = a.out.join("records.jsonl");
    fs::write(&path, records).map_err(|e| Failure::from(Error::io(&path, e)))?;
    println!("augmented {} samples", images.len());
    Ok(())
}

fn cmd_eval(a: &EvalArgs, _ctx: &Ctx) -> Outcome {
    let pred = png_files(&a.pred)?;
    let gt = png_files(&a.gt)?;
    pair_files("pred", &pred, "gt", &gt)?;
    write_resolved(
        &a.out,
        "eval",
        &json!({
            "pred": a.pred, "gt": a.gt, "out": a.out, "classes": a.classes,
            "ignore_label": a.ignore_label, "d_frac": a.d_frac,
        }),
    )?;
    let mut cm = ConfusionMatrix::new(a.classes, a.ignore_label);
    let mut biou = Vec::with_capacity(gt.len());
    for (stem, gt_path) in &gt {
        let g = io::read_labels(gt_path).map_err(Failure::input)?;
        let p = io::read_labels(&pred[stem]).map_err(Failure::input)?;
        cm.accumulate(&p, &g)
            .map_err(|e| Failure::input(format!("{stem}: {e}")))?;
        biou.push(boundary_iou(&p, &g, a.classes, a.ignore_label, a.d_frac)?.mean);
    }
    let summary = cm.summarize()?;
    let mean_biou = if biou.is_empty() {
        None
    } else {
        Some(biou.iter().sum::<f64>() / biou.len() as f64)
    };
    println!(
        "mIoU {:.4}  mAcc {:.4}  aAcc {:.4}  boundary IoU {}",
        summary.miou,
        summary.macc,
        summary.aacc,
        mean_biou.map_or("n/a".into(), |v| format!("{v:.4}"))
    );
    write_json(
        &a.out,
        "metrics.json",
        &json!({
            "images": gt.len(), "summary": summary, "boundary_iou": mean_biou,
        }),
    )
}

fn cmd_train(a: &TrainArgs, ctx: &Ctx) -> Outcome {
    let mut cfg: TrainConfig = match (&a.config, &a.recipe) {
        (Some(p), _) => read_json(p)?,
        (None, Some(r)) => TrainConfig::recipe(r).map_err(Failure::input)?,
        (None, None) => TrainConfig::default(),
    };
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    write_resolved(&a.out, "train-toy", &cfg)?;
    ctx.log(format!("training for {} steps", cfg.total_steps()));
    let outcome = train::train(&cfg)?;
    let r = &outcome.report;

    let write_csv = |name: &str, f: &dyn Fn(&mut Vec<u8>) -> std::io::Result<()>| -> Outcome {
        let mut buf = Vec::new();
        f(&mut buf).map_err(|e| Failure::new(2, e.to_string()))?;
        let path = a.out.join(name);
        fs::write(&path, buf).map_err(|e| Failure::from(Error::io(&path, e)))
    };
    write_csv("loss_curve.csv", &|b| train::write_loss_curve(&r.steps, b))?;
    write_csv("gradnorm.csv", &|b| train::write_grad_norms(&r.steps, b))?;
    let ckpt = a.out.join("model.ckpt");
    let bytes = checkpoint::encode(&outcome.model, r.steps.len() as u64)?;
    fs::write(&ckpt, bytes).map_err(|e| Failure::from(Error::io(&ckpt, e)))?;
    write_json(
        &a.out,
        "metrics.json",
        &json!({
            "status": r.status,
            "eval": r.eval,
            "final_loss": r.steps.last().map(|s| s.loss),
            "query_usage": r.query_usage,
            "min_query_usage": r.min_query_usage,
            "param_count": r.param_count,
            "batch_size": r.batch_size,
            "reference_batch_size": r.reference_batch_size,
            "batch_size_note": format!(
                "toy runs use batch size {}; the reference recipe uses {}",
                r.batch_size, r.reference_batch_size
            ),
        }),
    )?;
    println!(
        "mIoU {:.4}  boundary IoU {:.4}  after {} steps",
        r.eval.miou,
        r.eval.boundary_iou,
        r.steps.len()
    );
    match &r.status {
        RunStatus::Completed => Ok(()),
        RunStatus::Diverged { step, reason } => Err(Failure::from(Error::Diverged {
            step: *step,
            reason: reason.clone(),
        })),
    }
}

fn cmd_gradcheck(a: &GradcheckArgs, ctx: &Ctx) -> Outcome {
    let mut cfg: GradcheckConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => GradcheckConfig::default(),
    };
    if let Some(n) = a.instances {
        cfg.instances = n;
    }
    if let Some(t) = a.tolerance {
        cfg.tolerance = t;
    }
    if let Some(m) = &a.mode {
        cfg.mode = m.parse::<LossMode>().map_err(Failure::input)?;
    }
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    cfg.model.validate()?;
    if cfg.instances == 0
        || cfg.step.is_nan()
        || cfg.step <= 0.0
        || cfg.tolerance.is_nan()
        || cfg.tolerance <= 0.0
    {
        return Err(Failure::input(
            "instances, step and tolerance must be positive",
        ));
    }
    if let Some(out) = &a.out {
        write_resolved(out, "gradcheck", &cfg)?;
    }
    let blocks = check_instances(&cfg)?;
    let max = blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max);
    for b in &blocks {
        println!(
            "{:<26} {:>6} params  max rel err {:.3e}",
            b.block, b.params, b.max_rel_err
        );
    }
    println!(
        "max relative error: {max:.3e} (tolerance {:.0e})",
        cfg.tolerance
    );
    if let Some(out) = &a.out {
        write_json(
            out,
            "gradcheck.json",
            &json!({
                "blocks": blocks, "max_rel_err": max, "tolerance": cfg.tolerance,
            }),
        )?;
    }
    if max < cfg.tolerance {
        Ok(())
    } else {
        Err(Failure::new(
            3,
            format!("max relative error {max:.3e} exceeds {:.0e}", cfg.tolerance),
        ))
    }
}

fn report_failure(f: &Failure, out: Option<&Path>) {
    eprintln!("error: {}", f.message);
    for d in &f.details {
        eprintln!("  {d}");
    }
    if let Some(dir) = out {
        let doc = json!({
            "exit_code": f.code, "kind": f.kind(), "message": f.message, "details": f.details,
        });
        if fs::create_dir_all(dir).is_ok() {
            let _ = write_json(dir, "error.json", &doc);
        }
    }
}

/// Parses `args` (including the program name) and runs the subcommand,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let ctx = Ctx {
        seed: cli.seed,
        verbose: cli.verbose,
    };
    let result = match &cli.command {
        Command::Fetch(a) => cmd_fetch(a, &ctx),
        Command::Split(a) => cmd_split(a, &ctx),
        Command::Augment(a) => cmd_augment(a, &ctx),
        Command::Eval(a) => cmd_eval(a, &ctx),
        Command::TrainToy(a) => cmd_train(a, &ctx),
        Command::Gradcheck(a) => cmd_gradcheck(a, &ctx),
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            report_failure(&f, cli.command.out_dir());
            f.code
        }
    }
}
