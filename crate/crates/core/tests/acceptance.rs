//! End-to-end acceptance checks. Each test prints one PASS/FAIL line to
//! stderr (written directly, so it survives output capture).

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{max_rel_err, numeric_grad, MockServer, Reply};
use matseg_core::augment::{self, AugmentConfig, Sample};
use matseg_core::ingest::{self, FetchOutcome, FetchPolicy, FetchStatus, ManifestEntry};
use matseg_core::loss::{
    cross_entropy_downsampled, hflp_loss, qer_loss, HflpConfig, KlDirection, LogitMap, QerConfig,
};
use matseg_core::matching::{hungarian, CostMatrix};
use matseg_core::metrics::ConfusionMatrix;
use matseg_core::split::{jsd, random_split, stratified_split, ClassHistogram};
use matseg_core::tensor::{LabelMask, Tensor};
use matseg_core::train::{
    self, cosine_lr, generate_texture_scene, LossConfig, LossMode, ModelConfig, ParamGroup,
    SceneKind, Schedule, ToyModel, TrainConfig,
};

const FD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;

fn verdict(n: u32, name: &str, ok: bool, started: Instant, detail: impl AsRef<str>) {
    let line = format!(
        "acceptance {n:>2} {name:<26} {} [{:.1}s] {}",
        if ok { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64(),
        detail.as_ref()
    );
    let _ = writeln!(std::io::stderr(), "{line}");
    assert!(ok, "{line}");
}

fn random_labels(rng: &mut ChaCha8Rng, h: usize, w: usize, classes: usize) -> LabelMask {
    let mut m = LabelMask::from_fn(h, w, |_, _| {
        if rng.random::<f64>() < 0.1 {
            255
        } else {
            rng.random_range(0..classes) as u16
        }
    });
    m.set(0, 0, 0);
    m
}

#[test]
fn criterion_01_gradient_oracle() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = [0.0f64; 4];

    for i in 0..20 {
        let (c, h, w) = (
            rng.random_range(2..=5),
            rng.random_range(1..=4),
            rng.random_range(1..=4),
        );
        let stride = rng.random_range(1..=3);
        let y = random_labels(&mut rng, h * stride, w * stride, c);
        let z: Vec<f64> = (0..c * h * w)
            .map(|_| rng.random_range(-3.0..3.0))
            .collect();
        let cfg = HflpConfig {
            epsilon: rng.random_range(0.0..0.3),
            align_corners: i % 2 == 1,
            ..Default::default()
        };
        let map = |x: &[f64]| {
            LogitMap::new(Tensor::new(vec![c, h, w], x.to_vec()).unwrap(), stride).unwrap()
        };
        let a = hflp_loss(&map(&z), &y, &cfg).unwrap().grad;
        let n = numeric_grad(|x| hflp_loss(&map(x), &y, &cfg).unwrap().loss, &z, FD_STEP);
        worst[0] = worst[0].max(max_rel_err(a.data(), &n));

        let a = cross_entropy_downsampled(&map(&z), &y, 255).unwrap().grad;
        let n = numeric_grad(
            |x| cross_entropy_downsampled(&map(x), &y, 255).unwrap().loss,
            &z,
            FD_STEP,
        );
        worst[1] = worst[1].max(max_rel_err(a.data(), &n));
    }

    for i in 0..20 {
        let (nq, k) = (rng.random_range(1..=5), rng.random_range(2..=6));
        let q: Vec<f64> = (0..nq * k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let cfg = QerConfig {
            lambda: rng.random_range(0.05..1.0),
            direction: if i % 2 == 0 {
                KlDirection::EntropyMax
            } else {
                KlDirection::Reverse
            },
        };
        let t = |x: &[f64]| Tensor::new(vec![nq, k], x.to_vec()).unwrap();
        let a = qer_loss(&t(&q), &cfg).unwrap().grad;
        let n = numeric_grad(|x| qer_loss(&t(x), &cfg).unwrap().loss, &q, FD_STEP);
        worst[2] = worst[2].max(max_rel_err(a.data(), &n));
    }

    let modes = [LossMode::Hflp, LossMode::DownsampledCe, LossMode::HflpQer];
    let mut max_params = 0;
    for i in 0..20u64 {
        let mc = ModelConfig {
            classes: rng.random_range(2..=3),
            dim: rng.random_range(3..=5),
            queries: rng.random_range(2..=3),
            stride: 2,
        };
        let model = ToyModel::new(mc, i).unwrap();
        max_params = max_params.max(model.params.count());
        let weights = vec![1.0; mc.classes];
        let sample = generate_texture_scene(1000 + i, 8, 3, &weights)
            .unwrap()
            .sample;
        let cfg = LossConfig {
            mode: modes[i as usize % 3],
            ..Default::default()
        };
        let (_, grad) = model.loss_and_grad(&sample, &cfg).unwrap();
        for b in 0..grad.blocks().len() {
            let x = model.params.blocks()[b].data().to_vec();
            let mut probe = model.clone();
            let n = numeric_grad(
                |v| {
                    probe.params.blocks_mut()[b].data_mut().copy_from_slice(v);
                    probe.loss(&sample, &cfg).unwrap()
                },
                &x,
                FD_STEP,
            );
            worst[3] = worst[3].max(max_rel_err(grad.blocks()[b].data(), &n));
        }
    }
    let ok = worst.iter().all(|&e| e < GRAD_TOL)
        && max_params <= 2000
        && t0.elapsed() < Duration::from_secs(60);
    verdict(
        1,
        "gradient oracle",
        ok,
        t0,
        format!(
            "max rel err hflp {:.1e}, ce-down {:.1e}, qer {:.1e}, model {:.1e} ({} params max)",
            worst[0], worst[1], worst[2], worst[3], max_params
        ),
    );
}

#[test]
fn criterion_02_analytic_constants() {
    let t0 = Instant::now();
    let mut ok = true;
    let mut notes = Vec::new();
    for c in [2usize, 5, 46] {
        let z = LogitMap::new(Tensor::zeros(vec![c, 3, 3]), 2).unwrap();
        let y = LabelMask::from_fn(6, 6, |r, col| ((r * 6 + col) % c) as u16);
        let l = hflp_loss(&z, &y, &HflpConfig::default()).unwrap().loss;
        let err = (l - (c as f64).ln()).abs();
        ok &= err < 1e-9;
        notes.push(format!("ln{c} err {err:.0e}"));
    }
    for k in [2usize, 7, 47] {
        let q = Tensor::full(vec![5, k], 0.3);
        let l = qer_loss(&q, &QerConfig::default()).unwrap().loss;
        ok &= l.abs() < 1e-12;
    }
    let s = Schedule {
        total_steps: 1000,
        ..Default::default()
    };
    ok &= cosine_lr(0, &s, ParamGroup::Head).unwrap() == 1.0e-3;
    ok &= cosine_lr(0, &s, ParamGroup::Backbone).unwrap() == 1.0e-4;
    ok &= cosine_lr(1000, &s, ParamGroup::Head).unwrap() == 1.0e-6;
    ok &= cosine_lr(1000, &s, ParamGroup::Backbone).unwrap() == 1.0e-6;
    verdict(2, "analytic constants", ok, t0, notes.join(", "));
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

#[test]
fn criterion_03_hungarian_oracle() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut failures = 0;
    let mut checked = 0;
    for n in 2..=7usize {
        let perms = permutations(n);
        for trial in 0..100 {
            let costs: Vec<f64> = (0..n * n)
                .map(|_| {
                    if trial % 2 == 0 {
                        rng.random_range(-5.0..10.0)
                    } else {
                        rng.random_range(0..4) as f64
                    }
                })
                .collect();
            let best = perms
                .iter()
                .map(|p| {
                    p.iter()
                        .enumerate()
                        .map(|(r, &c)| costs[r * n + c])
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min);
            let a = hungarian(&CostMatrix::new(n, n, costs.clone()).unwrap()).unwrap();
            let recomputed: f64 = a.pairs.iter().map(|&(r, c)| costs[r * n + c]).sum();
            let mut cols: Vec<usize> = a.pairs.iter().map(|&(_, c)| c).collect();
            cols.sort_unstable();
            let valid = cols == (0..n).collect::<Vec<_>>();
            if !valid || (recomputed - best).abs() > 1e-9 || (a.total_cost - best).abs() > 1e-9 {
                failures += 1;
            }
            checked += 1;
        }
    }
    verdict(
        3,
        "hungarian oracle",
        failures == 0 && t0.elapsed() < Duration::from_secs(60),
        t0,
        format!("{checked} matrices, {failures} mismatches"),
    );
}

fn mask(rows: &[&[u16]]) -> LabelMask {
    let h = rows.len();
    let w = rows[0].len();
    LabelMask::new(h, w, rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
}

#[test]
fn criterion_04_metrics_oracle() {
    let t0 = Instant::now();
    // (classes, [(pred, gt)], mIoU, mAcc, aAcc), all worked out by hand
    type Case = (usize, Vec<(LabelMask, LabelMask)>, f64, f64, f64);
    let cases: Vec<Case> = vec![
        (
            2,
            vec![(mask(&[&[0, 1], &[1, 1]]), mask(&[&[0, 0], &[1, 1]]))],
            7.0 / 12.0,
            0.75,
            0.75,
        ),
        (
            3,
            vec![(mask(&[&[0, 1, 2]]), mask(&[&[0, 1, 2]]))],
            1.0,
            1.0,
            1.0,
        ),
        (
            2,
            vec![(mask(&[&[1, 1], &[1, 1]]), mask(&[&[0, 0], &[0, 0]]))],
            0.0,
            0.0,
            0.0,
        ),
        (
            2,
            vec![(mask(&[&[0, 0], &[0, 1]]), mask(&[&[0, 255], &[1, 1]]))],
            0.5,
            0.75,
            2.0 / 3.0,
        ),
        (3, vec![(mask(&[&[0, 1]]), mask(&[&[0, 1]]))], 1.0, 1.0, 1.0),
        (
            3,
            vec![(mask(&[&[0, 0, 2]]), mask(&[&[0, 0, 0]]))],
            1.0 / 3.0,
            2.0 / 3.0,
            2.0 / 3.0,
        ),
        (
            3,
            vec![(mask(&[&[0, 1, 1, 2, 2, 0]]), mask(&[&[0, 0, 1, 1, 2, 2]]))],
            1.0 / 3.0,
            0.5,
            0.5,
        ),
        (
            2,
            vec![(mask(&[&[0, 0, 1]]), mask(&[&[255, 255, 1]]))],
            1.0,
            1.0,
            1.0,
        ),
        (
            3,
            vec![
                (mask(&[&[0, 1], &[1, 1]]), mask(&[&[0, 0], &[1, 1]])),
                (mask(&[&[0, 1, 1, 2, 2, 0]]), mask(&[&[0, 0, 1, 1, 2, 2]])),
            ],
            37.0 / 90.0,
            7.0 / 12.0,
            0.6,
        ),
        (
            2,
            vec![(
                LabelMask::from_fn(4, 4, |_, x| u16::from(x >= 1)),
                LabelMask::from_fn(4, 4, |_, x| u16::from(x >= 2)),
            )],
            7.0 / 12.0,
            0.75,
            0.75,
        ),
    ];
    let mut bad = Vec::new();
    for (i, (classes, pairs, miou, macc, aacc)) in cases.iter().enumerate() {
        let mut cm = ConfusionMatrix::new(*classes, 255);
        for (p, g) in pairs {
            cm.accumulate(p, g).unwrap();
        }
        let s = cm.summarize().unwrap();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-15;
        if !(close(s.miou, *miou) && close(s.macc, *macc) && close(s.aacc, *aacc)) {
            bad.push(format!(
                "case {i}: got {:.6}/{:.6}/{:.6}",
                s.miou, s.macc, s.aacc
            ));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let images: Vec<(LabelMask, LabelMask)> = (0..12)
        .map(|_| {
            let g = random_labels(&mut rng, 6, 5, 4);
            let p = LabelMask::from_fn(6, 5, |_, _| rng.random_range(0..4));
            (p, g)
        })
        .collect();
    let mut reference = ConfusionMatrix::new(4, 255);
    for (p, g) in &images {
        reference.accumulate(p, g).unwrap();
    }
    let want = reference.summarize().unwrap();
    let mut order_failures = 0;
    for _ in 0..50 {
        let mut idx: Vec<usize> = (0..images.len()).collect();
        for i in (1..idx.len()).rev() {
            idx.swap(i, rng.random_range(0..=i));
        }
        let parts = rng.random_range(1..=5);
        let mut partial: Vec<ConfusionMatrix> =
            (0..parts).map(|_| ConfusionMatrix::new(4, 255)).collect();
        for (n, &i) in idx.iter().enumerate() {
            partial[n % parts]
                .accumulate(&images[i].0, &images[i].1)
                .unwrap();
        }
        let mut merged = ConfusionMatrix::new(4, 255);
        for p in partial.iter().rev() {
            merged.merge(p).unwrap();
        }
        if merged != reference || merged.summarize().unwrap() != want {
            order_failures += 1;
        }
    }
    verdict(
        4,
        "metrics oracle",
        bad.is_empty() && order_failures == 0,
        t0,
        format!(
            "{} crafted cases, {} wrong {:?}; 50 partitions, {order_failures} order-dependent",
            cases.len(),
            bad.len(),
            bad
        ),
    );
}

/// 1000 samples whose dominant class follows a steep power law.
fn skewed_corpus(seed: u64) -> Vec<(String, ClassHistogram)> {
    let weights = [0.55, 0.2, 0.1, 0.06, 0.04, 0.03, 0.015, 0.005];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..1000)
        .map(|i| {
            let mut u = rng.random::<f64>();
            let mut dom = 0;
            while dom + 1 < weights.len() && u >= weights[dom] {
                u -= weights[dom];
                dom += 1;
            }
            let counts: Vec<u64> = (0..weights.len())
                .map(|c| {
                    if c == dom {
                        rng.random_range(500..3000)
                    } else if rng.random::<f64>() < 0.3 {
                        rng.random_range(0..200)
                    } else {
                        0
                    }
                })
                .collect();
            (format!("s{i:04}"), ClassHistogram::new(counts))
        })
        .collect()
}

#[test]
fn criterion_05_split_divergence() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut props = true;
    for _ in 0..200 {
        let k = rng.random_range(2..8);
        let p = ClassHistogram::new((0..k).map(|_| rng.random_range(0..50)).collect());
        let q = ClassHistogram::new((0..k).map(|_| rng.random_range(0..50)).collect());
        if p.total() == 0 || q.total() == 0 {
            continue;
        }
        props &= (jsd(&p, &q).unwrap() - jsd(&q, &p).unwrap()).abs() <= 1e-12;
        props &= jsd(&p, &p).unwrap().abs() <= 1e-12;
        let half = k / 2;
        let a = ClassHistogram::new(
            (0..k)
                .map(|i| if i < half { 1 + i as u64 } else { 0 })
                .collect(),
        );
        let b = ClassHistogram::new((0..k).map(|i| if i >= half { 2 } else { 0 }).collect());
        props &= (jsd(&a, &b).unwrap() - std::f64::consts::LN_2).abs() <= 1e-12;
    }

    let ratios = [0.8, 0.1, 0.1];
    let mut wins = 0;
    let mut worst_strat: f64 = 0.0;
    for seed in 0..20u64 {
        let corpus = skewed_corpus(seed);
        let s = stratified_split(&corpus, ratios, seed).unwrap();
        let r = random_split(&corpus, ratios, seed).unwrap();
        let ds = s.jsd_train_val.max(s.jsd_train_test);
        let dr = r.jsd_train_val.max(r.jsd_train_test);
        worst_strat = worst_strat.max(ds);
        wins += usize::from(ds < dr);
    }
    let corpus = skewed_corpus(99);
    let a = stratified_split(&corpus, ratios, 7)
        .unwrap()
        .to_json()
        .unwrap();
    let b = stratified_split(&corpus, ratios, 7)
        .unwrap()
        .to_json()
        .unwrap();
    let deterministic = a == b;
    verdict(
        5,
        "split divergence",
        props && wins >= 18 && deterministic && t0.elapsed() < Duration::from_secs(60),
        t0,
        format!("properties {props}; stratified wins {wins}/20 (worst {worst_strat:.4}); byte-identical {deterministic}"),
    );
}

fn random_sample(rng: &mut ChaCha8Rng) -> Sample {
    let (h, w) = (rng.random_range(8..40), rng.random_range(8..40));
    let classes = rng.random_range(1..6);
    let image = Tensor::from_fn(vec![3, h, w], |_| rng.random::<f64>());
    let mask = LabelMask::from_fn(h, w, |y, x| ((y / 5 + x / 7) % classes) as u16);
    Sample::new(image, mask).unwrap()
}

fn write_pairs(dir: &Path, n: u64) {
    std::fs::create_dir_all(dir.join("images")).unwrap();
    std::fs::create_dir_all(dir.join("masks")).unwrap();
    for i in 0..n {
        let s = generate_texture_scene(i, 40, 4, &[1.0, 1.0, 1.0])
            .unwrap()
            .sample;
        matseg_core::io::write_rgb(&dir.join(format!("images/img{i}.png")), &s.image).unwrap();
        matseg_core::io::write_labels(&dir.join(format!("masks/img{i}.png")), &s.mask).unwrap();
    }
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for sub in ["images", "masks"] {
        for e in std::fs::read_dir(dir.join(sub)).unwrap() {
            let p = e.unwrap().path();
            out.insert(
                format!("{sub}/{}", p.file_name().unwrap().to_string_lossy()),
                std::fs::read(&p).unwrap(),
            );
        }
    }
    out.insert(
        "records.jsonl".into(),
        std::fs::read(dir.join("records.jsonl")).unwrap(),
    );
    out
}

#[test]
fn criterion_06_augmentation() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);

    let s = random_sample(&mut rng);
    let ident = AugmentConfig::identity(s.height(), s.width());
    let round_trip = augment::apply(&s, &ident, 3).unwrap().0 == s;
    let involution = augment::flip_image(&augment::flip_image(&s.image)) == s.image
        && s.mask.flip_horizontal().flip_horizontal() == s.mask;

    let mut conserved = 0;
    let mut immutable = 0;
    for i in 0..200u64 {
        let s = random_sample(&mut rng);
        let mut full = if i % 2 == 0 {
            AugmentConfig::segformer()
        } else {
            AugmentConfig::mask2former()
        };
        full.crop = [rng.random_range(8..32), rng.random_range(8..32)];
        full.seed = i;
        let geometric = AugmentConfig {
            hue_delta: 0.0,
            saturation_range: [1.0, 1.0],
            contrast_range: [1.0, 1.0],
            specular_p: 0.0,
            noise_p: 0.0,
            ..full.clone()
        };
        let (a, _) = augment::apply(&s, &full, i).unwrap();
        let (b, _) = augment::apply(&s, &geometric, i).unwrap();
        let mut allowed = s.mask.labels();
        allowed.insert(full.ignore_label);
        conserved += usize::from(a.mask.labels().is_subset(&allowed));
        immutable += usize::from(a.mask == b.mask);
    }

    let work = tempfile::tempdir().unwrap();
    write_pairs(work.path(), 5);
    let run = |out: &str| {
        Command::new(env!("CARGO_BIN_EXE_matseg"))
            .args([
                "augment",
                "--seed",
                "11",
                "--preset",
                "mask2former",
                "--images",
            ])
            .arg(work.path().join("images"))
            .arg("--masks")
            .arg(work.path().join("masks"))
            .arg("--out")
            .arg(work.path().join(out))
            .status()
            .unwrap()
            .success()
    };
    let restart_ok = run("a")
        && run("b")
        && dir_bytes(&work.path().join("a")) == dir_bytes(&work.path().join("b"));
    verdict(
        6,
        "augmentation suite",
        round_trip && involution && conserved == 200 && immutable == 200 && restart_ok
            && t0.elapsed() < Duration::from_secs(60),
        t0,
        format!(
            "identity {round_trip}, involution {involution}, labels conserved {conserved}/200, \
             mask unaffected by photometrics {immutable}/200, identical across processes {restart_ok}"
        ),
    );
}

#[test]
fn criterion_07_toy_trainability() {
    let t0 = Instant::now();
    let cfg = TrainConfig {
        steps_per_epoch: 300,
        ..Default::default()
    };
    let out = train::train(&cfg).unwrap();
    let train_secs = t0.elapsed().as_secs_f64();
    let miou = out.report.eval.miou;

    let mut wins = 0;
    let mut strict = 0;
    let mut pairs = Vec::new();
    for seed in 0..5u64 {
        let mut biou = [0.0; 2];
        for (j, mode) in [LossMode::Hflp, LossMode::DownsampledCe]
            .into_iter()
            .enumerate()
        {
            let mut c = TrainConfig {
                seed,
                steps_per_epoch: 1500,
                ..Default::default()
            };
            c.data.kind = SceneKind::Thin;
            c.data.lines = 6;
            c.loss.mode = mode;
            biou[j] = train::train(&c).unwrap().report.eval.boundary_iou;
        }
        wins += usize::from(biou[0] >= biou[1]);
        strict += usize::from(biou[0] > biou[1]);
        pairs.push(format!("{:.3}/{:.3}", biou[0], biou[1]));
    }
    verdict(
        7,
        "toy trainability",
        miou >= 0.90 && train_secs < 300.0 && wins >= 4 && t0.elapsed() < Duration::from_secs(900),
        t0,
        format!(
            "mIoU {miou:.4} in {train_secs:.1}s; boundary IoU hflp/downsampled {} -> {wins}/5 ({strict} strict)",
            pairs.join(" ")
        ),
    );
}

#[test]
fn criterion_08_query_regulariser() {
    let t0 = Instant::now();
    let mut wins = 0;
    let mut strict = 0;
    let mut usage = Vec::new();
    let mut bound_ok = true;
    for seed in 0..5u64 {
        let mut mins = [0u64; 2];
        for (j, lambda) in [0.1, 0.0].into_iter().enumerate() {
            let mut c = TrainConfig {
                seed,
                steps_per_epoch: 200,
                ..Default::default()
            };
            c.model.classes = 4;
            c.model.queries = 4;
            c.data.class_weights = vec![0.55, 0.3, 0.1, 0.05];
            c.loss.mode = LossMode::HflpQer;
            c.loss.qer.lambda = lambda;
            let r = train::train(&c).unwrap().report;
            let bound = lambda * 5f64.ln();
            bound_ok &= r.steps.iter().all(|s| s.qer <= bound);
            mins[j] = r.min_query_usage;
        }
        wins += usize::from(mins[0] >= mins[1]);
        strict += usize::from(mins[0] > mins[1]);
        usage.push(format!("{}/{}", mins[0], mins[1]));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for i in 0..2000 {
        let (n, k) = (rng.random_range(1..6), rng.random_range(2..50));
        let scale = [1.0, 30.0, 1e3, 1e6][i % 4];
        let q = Tensor::from_fn(vec![n, k], |_| rng.random_range(-1.0..1.0) * scale);
        let lambda = rng.random_range(0.0..2.0);
        let cfg = QerConfig {
            lambda,
            direction: KlDirection::EntropyMax,
        };
        bound_ok &= qer_loss(&q, &cfg).unwrap().loss <= lambda * (k as f64).ln();
    }
    verdict(
        8,
        "query regulariser",
        wins >= 4 && bound_ok && t0.elapsed() < Duration::from_secs(600),
        t0,
        format!(
            "min query usage with/without {} -> {wins}/5 ({strict} strict); bound respected {bound_ok}",
            usage.join(" ")
        ),
    );
}

#[test]
fn criterion_09_ingest_protocol() {
    let t0 = Instant::now();
    let good = b"payload-good".to_vec();
    let server = MockServer::start(vec![
        ("/ok", vec![Reply::ok(&good)]),
        ("/gone", vec![Reply::code(404)]),
        ("/gone410", vec![Reply::code(410)]),
        (
            "/limited",
            vec![
                Reply::code(429).with_header("Retry-After", "1"),
                Reply::ok(&good),
            ],
        ),
        ("/busy", vec![Reply::code(503)]),
        ("/corrupt", vec![Reply::ok(b"tampered")]),
        ("/flaky", vec![Reply::code(500), Reply::ok(&good)]),
        ("/reset", vec![Reply::Drop]),
    ]);
    let sha = ingest::sha256_hex(&good);
    let entries: Vec<ManifestEntry> = [
        "ok", "gone", "gone410", "limited", "busy", "corrupt", "flaky", "reset",
    ]
    .iter()
    .map(|id| ManifestEntry {
        id: (*id).into(),
        url: server.url(&format!("/{id}")),
        sha256: Some(sha.clone()),
        path: format!("files/{id}.bin"),
    })
    .collect();
    let policy = FetchPolicy {
        base_backoff_ms: 10,
        jitter: 0.1,
        timeout_ms: 5000,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let (out, report) = ingest::fetch_all(&entries, dir.path(), &policy).unwrap();
    let by_id: BTreeMap<&str, &FetchOutcome> =
        out.iter().map(|o| (o.sample_id.as_str(), o)).collect();
    let expect = |id: &str, status: FetchStatus, attempts: u32| {
        let o = by_id[id];
        o.status == status && o.attempts == attempts
    };
    let table = expect("ok", FetchStatus::Ok, 1)
        && expect("gone", FetchStatus::ExpiredUrl, 1)
        && server.hits("/gone") == 1
        && expect("gone410", FetchStatus::ExpiredUrl, 1)
        && expect("limited", FetchStatus::Ok, 2)
        && expect("busy", FetchStatus::RateLimited, 4)
        && expect("corrupt", FetchStatus::Corrupt, 2)
        && server.hits("/corrupt") == 2
        && expect("flaky", FetchStatus::Ok, 2)
        && expect("reset", FetchStatus::NetworkFailure, 4);
    // only the Retry-After header can account for a full second
    let retry_after_honoured = t0.elapsed() >= Duration::from_secs(1);
    let conserved = report.totals.values().sum::<usize>() == entries.len()
        && report.total == entries.len()
        && out
            .iter()
            .map(|o| o.sample_id.as_str())
            .eq(entries.iter().map(|e| e.id.as_str()));

    let listing = |d: &Path| -> BTreeMap<String, Vec<u8>> {
        std::fs::read_dir(d.join("files"))
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                (
                    p.file_name().unwrap().to_string_lossy().into_owned(),
                    std::fs::read(&p).unwrap(),
                )
            })
            .collect()
    };
    let before = listing(dir.path());
    let ok_hits = server.hits("/ok");
    let (again, report2) = ingest::fetch_all(&entries, dir.path(), &policy).unwrap();
    let idempotent = listing(dir.path()) == before
        && server.hits("/ok") == ok_hits
        && again
            .iter()
            .filter(|o| o.status == FetchStatus::Ok)
            .all(|o| o.skipped)
        && report2.totals[&FetchStatus::Ok] == report.totals[&FetchStatus::Ok];

    let mut recovered: Vec<FetchOutcome> = Vec::with_capacity(44_560);
    for i in 0..44_560 {
        recovered.push(FetchOutcome {
            sample_id: i.to_string(),
            status: if i < 41_396 {
                FetchStatus::Ok
            } else {
                FetchStatus::ExpiredUrl
            },
            attempts: 1,
            bytes: 0,
            final_http_code: None,
            skipped: false,
            detail: None,
        });
    }
    let rate = ingest::summarize(&recovered).recovery_rate_display;
    let formatted = rate.as_deref() == Some("92.9%");
    verdict(
        9,
        "ingest protocol",
        table
            && retry_after_honoured
            && conserved
            && idempotent
            && formatted
            && t0.elapsed() < Duration::from_secs(60),
        t0,
        format!(
            "policy table {table}, Retry-After {retry_after_honoured}, conservation {conserved}, \
             idempotent {idempotent}, rate {}",
            rate.unwrap_or_default()
        ),
    );
}

#[test]
fn criterion_10_end_to_end_determinism() {
    let t0 = Instant::now();
    let work = tempfile::tempdir().unwrap();
    let config = work.path().join("config.json");
    std::fs::write(
        &config,
        r#"{"seed": 17, "steps_per_epoch": 60, "epochs": 1, "augment": "segformer",
            "loss": {"mode": "hflp+qer"}, "model": {"classes": 3, "queries": 4},
            "data": {"class_weights": [0.6, 0.3, 0.1]}}"#,
    )
    .unwrap();
    let run = |out: &str, threads: &str| {
        Command::new(env!("CARGO_BIN_EXE_matseg"))
            .env("RAYON_NUM_THREADS", threads)
            .arg("train-toy")
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(work.path().join(out))
            .status()
            .unwrap()
            .success()
    };
    let ran = run("a", "1") && run("b", "4");
    let read =
        |run: &str, f: &str| std::fs::read(work.path().join(run).join(f)).unwrap_or_default();
    let curve = ran
        && !read("a", "loss_curve.csv").is_empty()
        && read("a", "loss_curve.csv") == read("b", "loss_curve.csv");
    let rest = ran
        && read("a", "gradnorm.csv") == read("b", "gradnorm.csv")
        && read("a", "model.ckpt") == read("b", "model.ckpt");
    verdict(
        10,
        "end-to-end determinism",
        curve && rest && t0.elapsed() < Duration::from_secs(600),
        t0,
        format!("loss curves identical {curve}; grad norms and checkpoints identical {rest}"),
    );
}
