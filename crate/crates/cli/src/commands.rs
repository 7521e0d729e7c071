use std::io::Write;
use std::path::{Path, PathBuf};

use drsi::config::ModelConfig;
use drsi::decode::{decode, nms};
use drsi::eval::{self, CocoResult, EvalParams, KeypointSigmas};
use drsi::gradcases::{grad_cases, run_case};
use drsi::network::Model;
use drsi::{archive, profile as prof, selftest as st};
use drsi_tensor::{Shape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] drsi::Error),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Io { .. } | CliError::Core(drsi::Error::Io { .. }) => 2,
            _ => 1,
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn stdout_text(text: &str) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes()).and_then(|_| out.flush()).map_err(io(Path::new("<stdout>")))
}

pub fn profile(config: &Path, size: usize, seed: u64, json: bool) -> Result<bool, CliError> {
    let report = prof::profile(&ModelConfig::load(config)?, size, seed)?;
    stdout_text(&if json { report.to_json_lines() } else { report.to_csv() })?;
    Ok(true)
}

pub fn trace(config: &Path, size: usize, seed: u64) -> Result<bool, CliError> {
    let rows = prof::trace(&ModelConfig::load(config)?, size, seed)?;
    let text: String = rows.iter().map(|(name, s)| format!("{name} ({}, {}, {})\n", s.c, s.h, s.w)).collect();
    stdout_text(&text)?;
    Ok(true)
}

fn read_image(path: &Path, dims: &[usize]) -> Result<Tensor<f32>, CliError> {
    let &[n, c, h, w] = dims else {
        return Err(CliError::Usage(format!("--dims needs N,C,H,W, got {dims:?}")));
    };
    let bytes = std::fs::read(path).map_err(io(path))?;
    let shape = Shape::new(n, c, h, w);
    if bytes.len() != shape.numel() * 4 {
        return Err(CliError::Usage(format!(
            "{}: {} bytes, but dims {n},{c},{h},{w} need {}",
            path.display(),
            bytes.len(),
            shape.numel() * 4
        )));
    }
    let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Ok(Tensor::from_vec(shape, data).map_err(drsi::Error::from)?)
}

#[allow(clippy::too_many_arguments)]
pub fn forward(
    config: &Path,
    weights: &Path,
    image: &Path,
    dims: &[usize],
    out: &Path,
    seed: u64,
    conf_threshold: f64,
    iou_threshold: f64,
) -> Result<bool, CliError> {
    let cfg = ModelConfig::load(config)?;
    let mut model = Model::<f32>::build(&cfg, seed)?;
    archive::load(&mut model, weights)?;
    let x = read_image(image, dims)?;
    let heads = model.infer(&x).map_err(drsi::Error::from)?;
    if heads.iter().any(|h| !h.all_finite()) {
        return Err(CliError::Usage("forward produced non-finite values".into()));
    }
    let mut per_image = vec![Vec::new(); x.shape().n];
    for ((head, &stride), anchors) in heads.iter().zip(&cfg.strides).zip(&cfg.anchors) {
        for (i, dets) in decode(head, stride, anchors, cfg.num_keypoints, conf_threshold)?.into_iter().enumerate() {
            per_image[i].extend(dets);
        }
    }
    let mut results = Vec::new();
    for (i, dets) in per_image.iter().enumerate() {
        results.extend(nms(dets, iou_threshold)?.iter().map(|d| CocoResult::from_detection(i as u64, d)));
    }
    let text = serde_json::to_string_pretty(&results).expect("plain data");
    std::fs::write(out, text + "\n").map_err(io(out))?;
    println!("{} detections written to {}", results.len(), out.display());
    Ok(true)
}

pub fn eval(gt: &Path, pred: &Path, sigmas: Option<&Path>) -> Result<bool, CliError> {
    let sigmas = match sigmas {
        Some(p) => KeypointSigmas::load(p)?,
        None => KeypointSigmas::default(),
    };
    let gts = eval::load_ground_truth(gt)?;
    let preds = eval::load_predictions(pred)?;
    let m = eval::evaluate(&preds, &gts, &sigmas, &EvalParams::default())?;
    let mut text = String::new();
    for (name, v) in [("AP", m.ap), ("AP50", m.ap50), ("AP75", m.ap75), ("APL", m.apl), ("AR", m.ar)] {
        text.push_str(&format!("{name} {}\n", round(v)));
    }
    stdout_text(&text)?;
    Ok(true)
}

/// Four decimals, trailing zeros dropped.
fn round(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0');
    s.strip_suffix('.').map(|t| format!("{t}.0")).unwrap_or_else(|| s.to_string())
}

pub fn gradcheck(module: Option<&str>, seed: u64) -> Result<bool, CliError> {
    let cases = grad_cases();
    let selected: Vec<&'static str> = match module {
        None => cases.names(),
        Some(m) => {
            let hits: Vec<&'static str> =
                cases.names().into_iter().filter(|n| *n == m || n.starts_with(&format!("{m}."))).collect();
            if hits.is_empty() {
                return Err(drsi::Error::Unknown { kind: "gradient check", name: m.to_string(), known: cases.names().join(", ") }.into());
            }
            hits
        }
    };
    let mut ok = true;
    for name in selected {
        let out = run_case(name, cases.get(name)?.as_ref(), seed)?;
        ok &= out.passed();
        println!(
            "{} {name}: max rel error {:.3e} (tolerance {:.0e}), {} coordinates, {} skipped at kinks",
            if out.passed() { "PASS" } else { "FAIL" },
            out.report.max_rel_error,
            out.tolerance,
            out.report.coords_checked,
            out.report.coords_skipped
        );
    }
    Ok(ok)
}

pub fn selftest(seed: u64) -> Result<bool, CliError> {
    let mut ok = true;
    for id in st::criterion_ids() {
        let out = st::run_criterion(id, seed)?;
        ok &= out.passed;
        println!("{out}");
    }
    println!("selftest {}", if ok { "passed" } else { "failed" });
    Ok(ok)
}

pub fn init(config: &Path, out: &Path, seed: u64) -> Result<bool, CliError> {
    let model = Model::<f32>::build(&ModelConfig::load(config)?, seed)?;
    archive::save(&model, out)?;
    println!("{} parameters written to {}", model.count_trainable(), out.display());
    Ok(true)
}
