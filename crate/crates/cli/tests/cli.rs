use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn repo(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn drsi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drsi")).args(args).env_remove("DRSI_SEED").output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn profile_csv_ends_with_totals() {
    let o = drsi(&["profile", "--config", path(&repo("configs/s.toml")), "--input-size", "960", "--format", "csv"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let last = text.lines().last().unwrap();
    let fields: Vec<&str> = last.split(',').collect();
    assert_eq!(fields[0], "total");
    let body: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let rows = &body[..body.len() - 1];
    let params: u64 = rows.iter().map(|r| r[2].parse::<u64>().unwrap()).sum();
    let macs: u64 = rows.iter().map(|r| r[3].parse::<u64>().unwrap()).sum();
    assert_eq!(fields[2].parse::<u64>().unwrap(), params);
    assert_eq!(fields[3].parse::<u64>().unwrap(), macs);
    assert_eq!(params, 13_715_573);
}

#[test]
fn profile_json_lines_parse() {
    let o = drsi(&["profile", "--config", path(&repo("configs/miniature.toml")), "--input-size", "128", "--format", "json"]);
    assert!(o.status.success());
    let lines: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.last().unwrap()["input_size"], 128);
    assert!(lines[0]["name"].is_string());
}

#[test]
fn trace_large_at_960() {
    let o = drsi(&["trace", "--config", path(&repo("configs/l.toml")), "--input-size", "960"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for line in [
        "backbone.P3 (256, 120, 120)",
        "backbone.P4 (512, 60, 60)",
        "backbone.P5 (768, 30, 30)",
        "backbone.P6 (1024, 15, 15)",
    ] {
        assert!(text.lines().any(|l| l == line), "{line}");
    }
}

#[test]
fn eval_fixture_prints_ap() {
    let o = drsi(&["eval", "--gt", path(&repo("fixtures/ap_gt.json")), "--pred", path(&repo("fixtures/ap_pred.json"))]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.lines().any(|l| l == "AP 0.1"), "{text}");
    assert!(text.lines().any(|l| l == "AP50 1.0"), "{text}");
    let with_file = drsi(&[
        "eval",
        "--gt",
        path(&repo("fixtures/ap_gt.json")),
        "--pred",
        path(&repo("fixtures/ap_pred.json")),
        "--sigmas",
        path(&repo("configs/coco_sigmas.toml")),
    ]);
    assert_eq!(stdout(&with_file), text);
}

#[test]
fn init_then_forward_writes_detections() {
    let dir = tempfile::tempdir().unwrap();
    let weights = dir.path().join("w.bin");
    let image = dir.path().join("x.raw");
    let out = dir.path().join("dets.json");
    let cfg = repo("configs/miniature.toml");
    assert!(drsi(&["init", "--config", path(&cfg), "--out", weights.to_str().unwrap()]).status.success());
    let pixels: Vec<u8> = (0..3 * 128 * 128).flat_map(|i| ((i % 255) as f32 / 255.0).to_le_bytes()).collect();
    std::fs::write(&image, pixels).unwrap();
    let args = |dims: &'static str, thr: &'static str| {
        vec![
            "forward".to_string(),
            "--config".into(),
            path(&cfg).into(),
            "--weights".into(),
            weights.to_str().unwrap().into(),
            "--image".into(),
            image.to_str().unwrap().into(),
            "--dims".into(),
            dims.into(),
            "--out".into(),
            out.to_str().unwrap().into(),
            "--conf-threshold".into(),
            thr.into(),
        ]
    };
    let run = |a: Vec<String>| Command::new(env!("CARGO_BIN_EXE_drsi")).args(a).output().unwrap();
    let o = run(args("1,3,128,128", "0.0"));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dets: Vec<serde_json::Value> = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert!(!dets.is_empty());
    assert_eq!(dets[0]["keypoints"].as_array().unwrap().len(), 51);
    assert_eq!(run(args("1,3,64,64", "0.0")).status.code(), Some(1));
}

#[test]
fn exit_codes() {
    let s = repo("configs/s.toml");
    assert_eq!(drsi(&["profile", "--config", path(&s), "--input-size", "640", "--bogus"]).status.code(), Some(1));
    assert_eq!(drsi(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(drsi(&["profile", "--config", "/definitely/missing.toml", "--input-size", "640"]).status.code(), Some(2));
    assert_eq!(drsi(&["profile", "--config", path(&s), "--input-size", "100"]).status.code(), Some(1));
    assert_eq!(drsi(&["gradcheck", "--module", "layer.nope"]).status.code(), Some(1));
    assert_eq!(drsi(&["--help"]).status.code(), Some(0));
}

#[test]
fn malformed_config_is_named() {
    let dir = tempfile::tempdir().unwrap();
    for (text, needle) in [
        ("variant = \"s\"\nneck = \"fpn\"\n", "unknown neck \"fpn\""),
        ("variant = \"s\"\nneck = \n", "invalid config"),
        ("variant = \"s\"\nlambda = -1.0\n", "lambda"),
    ] {
        let p = dir.path().join("bad.toml");
        std::fs::write(&p, text).unwrap();
        let o = drsi(&["trace", "--config", p.to_str().unwrap(), "--input-size", "640"]);
        assert_eq!(o.status.code(), Some(1));
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains(needle), "{err}");
    }
}

#[test]
fn ablation_config_traces_like_default() {
    let shapes = |cfg: &str| -> Vec<String> {
        stdout(&drsi(&["trace", "--config", path(&repo(cfg)), "--input-size", "640"]))
            .lines()
            .filter(|l| l.starts_with("backbone.P") || l.starts_with("neck.N") || l.starts_with("head."))
            .map(String::from)
            .collect()
    };
    let a = shapes("configs/ablation.toml");
    assert_eq!(a.len(), 13);
    assert_eq!(a, shapes("configs/s.toml"));
}

#[test]
fn gradcheck_single_module_with_seed() {
    let o = Command::new(env!("CARGO_BIN_EXE_drsi"))
        .args(["gradcheck", "--module", "layer.drsi_block"])
        .env("DRSI_SEED", "3")
        .output()
        .unwrap();
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("PASS layer.drsi_block"), "{text}");
    let o = drsi(&["gradcheck", "--module", "op", "--seed", "2"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 19);
}
