mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::{MockServer, Reply};
use matseg_core::ingest::sha256_hex;
use matseg_core::io::{write_labels, write_rgb};
use matseg_core::tensor::LabelMask;
use matseg_core::train::generate_texture_scene;
use serde_json::Value;

fn matseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_matseg"))
        .args(args)
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: PathBuf) -> Value {
    serde_json::from_slice(&std::fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display())))
        .unwrap()
}

fn write_masks(dir: &Path, n: u64) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        let scene = generate_texture_scene(i, 24, 3, &[1.0, 1.0, 1.0, 1.0]).unwrap();
        write_labels(&dir.join(format!("m{i:03}.png")), &scene.sample.mask).unwrap();
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(matseg(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(matseg(&["split"]).status.code(), Some(1));
    assert_eq!(matseg(&["--help"]).status.code(), Some(0));
    let v = matseg(&["--version"]);
    assert_eq!(v.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&v.stdout).contains("config schema 1"));
}

#[test]
fn eval_reports_unpaired_files() {
    let d = tempfile::tempdir().unwrap();
    let (pred, gt, out) = (
        d.path().join("pred"),
        d.path().join("gt"),
        d.path().join("out"),
    );
    std::fs::create_dir_all(&pred).unwrap();
    std::fs::create_dir_all(&gt).unwrap();
    let m = LabelMask::from_fn(8, 8, |y, _| u16::from(y >= 4));
    for name in ["a.png", "b.png"] {
        write_labels(&pred.join(name), &m).unwrap();
    }
    for name in ["a.png", "c.png"] {
        write_labels(&gt.join(name), &m).unwrap();
    }
    let o = matseg(&[
        "eval",
        "--pred",
        s(&pred),
        "--gt",
        s(&gt),
        "--out",
        s(&out),
        "--classes",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = json(out.join("error.json"));
    let details = err["details"].to_string();
    assert!(
        details.contains("b.png") && details.contains("c.png"),
        "{details}"
    );

    std::fs::remove_file(pred.join("b.png")).unwrap();
    std::fs::remove_file(gt.join("c.png")).unwrap();
    let o = matseg(&[
        "eval",
        "--pred",
        s(&pred),
        "--gt",
        s(&gt),
        "--out",
        s(&out),
        "--classes",
        "2",
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let metrics = json(out.join("metrics.json"));
    assert_eq!(metrics["summary"]["miou"].as_f64(), Some(1.0));
    assert_eq!(json(out.join("resolved_config.json"))["command"], "eval");
}

#[test]
fn split_writes_manifest_and_catches_tampering() {
    let d = tempfile::tempdir().unwrap();
    let masks = d.path().join("masks");
    write_masks(&masks, 40);
    let out = d.path().join("split");
    let o = matseg(&[
        "--seed",
        "3",
        "split",
        "--masks",
        s(&masks),
        "--out",
        s(&out),
        "--threshold",
        "1",
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let manifest = out.join("split.json");
    let first = std::fs::read(&manifest).unwrap();

    let again = d.path().join("again");
    matseg(&[
        "--seed",
        "3",
        "split",
        "--masks",
        s(&masks),
        "--out",
        s(&again),
        "--threshold",
        "1",
    ]);
    assert_eq!(std::fs::read(again.join("split.json")).unwrap(), first);

    let check = d.path().join("check");
    let verify = |dir: &Path| {
        matseg(&[
            "split",
            "--masks",
            s(&masks),
            "--out",
            s(dir),
            "--threshold",
            "1",
            "--verify",
            s(&manifest),
        ])
    };
    assert_eq!(verify(&check).status.code(), Some(0));

    write_labels(
        &masks.join("m000.png"),
        &LabelMask::from_fn(24, 24, |_, _| 0),
    )
    .unwrap();
    assert_eq!(verify(&check).status.code(), Some(3));
    assert_eq!(json(check.join("verify_report.json"))["passed"], false);

    let bad = matseg(&[
        "split",
        "--masks",
        s(&masks),
        "--out",
        s(&check),
        "--ratios",
        "0.8,0.1,0.2",
    ]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn augment_writes_records() {
    let d = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(d.path().join("images")).unwrap();
    std::fs::create_dir_all(d.path().join("masks")).unwrap();
    for i in 0..3 {
        let sample = generate_texture_scene(i, 32, 3, &[1.0, 1.0])
            .unwrap()
            .sample;
        write_rgb(&d.path().join(format!("images/x{i}.png")), &sample.image).unwrap();
        write_labels(&d.path().join(format!("masks/x{i}.png")), &sample.mask).unwrap();
    }
    let out = d.path().join("out");
    let o = matseg(&[
        "augment",
        "--images",
        s(&d.path().join("images")),
        "--masks",
        s(&d.path().join("masks")),
        "--out",
        s(&out),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let records = std::fs::read_to_string(out.join("records.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 3);
    assert_eq!(std::fs::read_dir(out.join("masks")).unwrap().count(), 3);
}

#[test]
fn train_toy_artifacts_and_divergence() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"steps_per_epoch": 15}"#).unwrap();
    let out = d.path().join("run");
    let o = matseg(&["train-toy", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    for f in [
        "resolved_config.json",
        "metrics.json",
        "loss_curve.csv",
        "gradnorm.csv",
        "model.ckpt",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let curve = std::fs::read_to_string(out.join("loss_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 16);
    let bytes = std::fs::read(out.join("model.ckpt")).unwrap();
    assert_eq!(
        matseg_core::train::checkpoint::decode(&bytes).unwrap().1,
        15
    );

    std::fs::write(
        &cfg,
        r#"{"steps_per_epoch": 15, "lr_backbone": 1e307, "lr_head": 1e307}"#,
    )
    .unwrap();
    let out = d.path().join("diverged");
    let o = matseg(&["train-toy", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(
        json(out.join("metrics.json"))["status"]["status"],
        "diverged"
    );
    assert_eq!(json(out.join("error.json"))["exit_code"], 2);
}

#[test]
fn gradcheck_passes_and_reports() {
    let d = tempfile::tempdir().unwrap();
    let o = matseg(&["gradcheck", "--instances", "3", "--out", s(d.path())]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("max relative error"));
    assert!(d.path().join("gradcheck.json").is_file());
    let o = matseg(&["gradcheck", "--instances", "3", "--tolerance", "1e-30"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn fetch_then_verify_offline() {
    let payload = b"sample bytes".to_vec();
    let server = MockServer::start(vec![
        ("/a", vec![Reply::ok(&payload)]),
        ("/b", vec![Reply::code(410)]),
    ]);
    let d = tempfile::tempdir().unwrap();
    let manifest = d.path().join("manifest.jsonl");
    let sha = sha256_hex(&payload);
    std::fs::write(
        &manifest,
        format!(
            "{{\"id\":\"a\",\"url\":\"{}\",\"sha256\":\"{sha}\",\"path\":\"a.bin\"}}\n\
             {{\"id\":\"b\",\"url\":\"{}\",\"sha256\":\"{sha}\",\"path\":\"b.bin\"}}\n",
            server.url("/a"),
            server.url("/b")
        ),
    )
    .unwrap();
    let out = d.path().join("data");
    let o = matseg(&["fetch", "--manifest", s(&manifest), "--out", s(&out)]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let report = json(out.join("fetch_report.json"));
    assert_eq!(report["report"]["totals"]["Ok"], 1);
    assert_eq!(report["report"]["totals"]["ExpiredUrl"], 1);
    assert_eq!(report["report"]["recovery_rate_display"], "50.0%");

    // cross-check the stored file against the system hasher when present
    if let Ok(o) = Command::new("sha256sum").arg(out.join("a.bin")).output() {
        assert!(String::from_utf8_lossy(&o.stdout).starts_with(&sha));
    }

    let o = matseg(&[
        "fetch",
        "--manifest",
        s(&manifest),
        "--out",
        s(&out),
        "--offline",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let v = json(out.join("verify_report.json"));
    assert_eq!(
        (v["ok"].as_u64(), v["missing"].as_u64()),
        (Some(1), Some(1))
    );

    std::fs::write(out.join("a.bin"), b"flipped").unwrap();
    matseg(&[
        "fetch",
        "--manifest",
        s(&manifest),
        "--out",
        s(&out),
        "--offline",
    ]);
    assert_eq!(
        json(out.join("verify_report.json"))["corrupt"].as_u64(),
        Some(1)
    );

    // an output path below a regular file cannot be created
    let blocked = d.path().join("manifest.jsonl").join("sub");
    let o = matseg(&["fetch", "--manifest", s(&manifest), "--out", s(&blocked)]);
    assert_eq!(o.status.code(), Some(2));
}
