//! Keypoint similarity and the COCO-style AP/AR protocol.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decode::Detection;
use crate::error::{Error, Result};

/// Reference per-keypoint sigmas of the COCO keypoint protocol.
pub const COCO_SIGMAS: [f64; 17] =
    [0.26, 0.25, 0.25, 0.35, 0.35, 0.79, 0.79, 0.72, 0.72, 0.62, 0.62, 1.07, 1.07, 0.87, 0.87, 0.89, 0.89];

/// Area above which an instance counts as large.
pub const LARGE_AREA: f64 = 96.0 * 96.0;
pub const DEFAULT_MAX_DETS: usize = 20;

/// Per-keypoint falloff constants `h`: OKS term is `exp(-d² / (2 s² h²))`.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSigmas(pub Vec<f64>);

impl Default for KeypointSigmas {
    fn default() -> Self {
        Self::from_coco(&COCO_SIGMAS.map(|s| s / 10.0))
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SigmaFile {
    sigmas: Vec<f64>,
}

impl KeypointSigmas {
    /// From sigmas in the COCO convention, where the falloff is `2σ`.
    pub fn from_coco(sigmas: &[f64]) -> Self {
        KeypointSigmas(sigmas.iter().map(|s| 2.0 * s).collect())
    }

    /// Reads a TOML file with a `sigmas = [...]` array in the COCO convention.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: SigmaFile = toml::from_str(&text).map_err(|source| Error::Toml { path: path.into(), source })?;
        let s = Self::from_coco(&file.sigmas);
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() || self.0.iter().any(|h| h.is_nan() || *h <= 0.0 || !h.is_finite()) {
            return Err(Error::config("keypoint sigmas must be positive and finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// (x, y, v) with visibility v in {0, 1, 2}.
    pub keypoints: Vec<[f64; 3]>,
    pub area: f64,
    /// (x, y, w, h).
    pub bbox: [f64; 4],
    pub iscrowd: bool,
}

impl GroundTruth {
    pub fn visible(&self) -> usize {
        self.keypoints.iter().filter(|k| k[2] > 0.0).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// (x, y, confidence).
    pub keypoints: Vec<[f64; 3]>,
    pub score: f64,
}

impl Prediction {
    /// Area of the keypoint extent.
    pub fn area(&self) -> f64 {
        let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for k in &self.keypoints {
            x0 = x0.min(k[0]);
            x1 = x1.max(k[0]);
            y0 = y0.min(k[1]);
            y1 = y1.max(k[1]);
        }
        if self.keypoints.is_empty() {
            0.0
        } else {
            (x1 - x0) * (y1 - y0)
        }
    }
}

impl From<&Detection> for Prediction {
    fn from(d: &Detection) -> Self {
        Prediction { keypoints: d.keypoints.clone(), score: d.score }
    }
}

/// Object keypoint similarity over the visible ground-truth keypoints, `s² = area`.
pub fn oks(pred: &[[f64; 3]], gt: &GroundTruth, sigmas: &KeypointSigmas) -> Result<f64> {
    check_lengths(pred.len(), gt, sigmas)?;
    let visible = gt.visible();
    if visible == 0 {
        return Err(Error::Eval("ground truth has no visible keypoints".into()));
    }
    let mut total = 0.0;
    for ((p, g), h) in pred.iter().zip(&gt.keypoints).zip(&sigmas.0) {
        if g[2] > 0.0 {
            let d2 = (p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2);
            total += (-d2 / (2.0 * gt.area * h * h)).exp();
        }
    }
    Ok(total / visible as f64)
}

fn check_lengths(n: usize, gt: &GroundTruth, sigmas: &KeypointSigmas) -> Result<()> {
    if n != gt.keypoints.len() || n != sigmas.0.len() {
        return Err(Error::Eval(format!(
            "keypoint counts differ: prediction {n}, ground truth {}, sigmas {}",
            gt.keypoints.len(),
            sigmas.0.len()
        )));
    }
    Ok(())
}

/// Similarity used for instances without visible keypoints, which only serve
/// to absorb detections: distance to a box grown by its size on every side.
fn oks_unlabelled(pred: &[[f64; 3]], gt: &GroundTruth, sigmas: &KeypointSigmas) -> f64 {
    let [bx, by, bw, bh] = gt.bbox;
    let (x0, x1, y0, y1) = (bx - bw, bx + 2.0 * bw, by - bh, by + 2.0 * bh);
    let n = pred.len() as f64;
    pred.iter()
        .zip(&sigmas.0)
        .map(|(p, h)| {
            let dx = (x0 - p[0]).max(0.0) + (p[0] - x1).max(0.0);
            let dy = (y0 - p[1]).max(0.0) + (p[1] - y1).max(0.0);
            (-(dx * dx + dy * dy) / (2.0 * gt.area * h * h)).exp()
        })
        .sum::<f64>()
        / n
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metrics {
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP75")]
    pub ap75: f64,
    #[serde(rename = "APL")]
    pub apl: f64,
    #[serde(rename = "AR")]
    pub ar: f64,
}

#[derive(Clone, Debug)]
pub struct EvalParams {
    pub thresholds: Vec<f64>,
    pub recall_points: Vec<f64>,
    pub max_dets: usize,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            thresholds: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
            recall_points: (0..=100).map(|i| i as f64 / 100.0).collect(),
            max_dets: DEFAULT_MAX_DETS,
        }
    }
}

/// Precision at every recall point and final recall, per threshold; -1 where undefined.
#[derive(Clone, Debug)]
pub struct Accumulated {
    pub precision: Vec<Vec<f64>>,
    pub recall: Vec<f64>,
}

struct ImageMatches {
    scores: Vec<f64>,
    /// Per threshold, per detection: matched to a non-ignored instance.
    matched: Vec<Vec<bool>>,
    ignored: Vec<Vec<bool>>,
    relevant_gt: usize,
}

fn match_image(
    preds: &[Prediction],
    gts: &[GroundTruth],
    sigmas: &KeypointSigmas,
    params: &EvalParams,
    area: (f64, f64),
) -> Result<ImageMatches> {
    let in_range = |a: f64| a >= area.0 && a <= area.1;
    let ignore_gt: Vec<bool> = gts.iter().map(|g| g.iscrowd || g.visible() == 0 || !in_range(g.area)).collect();
    // non-ignored instances first, stable
    let mut gt_order: Vec<usize> = (0..gts.len()).collect();
    gt_order.sort_by_key(|&g| ignore_gt[g]);

    let mut det_order: Vec<usize> = (0..preds.len()).collect();
    det_order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    det_order.truncate(params.max_dets);

    let mut sim = vec![vec![0.0; gt_order.len()]; det_order.len()];
    for (di, &d) in det_order.iter().enumerate() {
        for (gi, &g) in gt_order.iter().enumerate() {
            let gt = &gts[g];
            check_lengths(preds[d].keypoints.len(), gt, sigmas)?;
            sim[di][gi] = if gt.visible() > 0 {
                oks(&preds[d].keypoints, gt, sigmas)?
            } else {
                oks_unlabelled(&preds[d].keypoints, gt, sigmas)
            };
        }
    }

    let nt = params.thresholds.len();
    let mut matched = vec![vec![false; det_order.len()]; nt];
    let mut ignored = vec![vec![false; det_order.len()]; nt];
    for (ti, &t) in params.thresholds.iter().enumerate() {
        let mut taken = vec![false; gt_order.len()];
        for di in 0..det_order.len() {
            let mut best = t.min(1.0 - 1e-10);
            let mut m: Option<usize> = None;
            for (gi, &g) in gt_order.iter().enumerate() {
                if taken[gi] && !gts[g].iscrowd {
                    continue;
                }
                if let Some(mi) = m {
                    if !ignore_gt[gt_order[mi]] && ignore_gt[g] {
                        break;
                    }
                }
                if sim[di][gi] < best {
                    continue;
                }
                best = sim[di][gi];
                m = Some(gi);
            }
            match m {
                Some(gi) => {
                    taken[gi] = true;
                    let ig = ignore_gt[gt_order[gi]];
                    ignored[ti][di] = ig;
                    matched[ti][di] = !ig;
                }
                None => ignored[ti][di] = !in_range(preds[det_order[di]].area()),
            }
        }
    }
    Ok(ImageMatches {
        scores: det_order.iter().map(|&d| preds[d].score).collect(),
        matched,
        ignored,
        relevant_gt: ignore_gt.iter().filter(|i| !**i).count(),
    })
}

/// Runs matching over every image (in key order) for instances whose area
/// lies in `area`, and builds the interpolated precision table.
pub fn accumulate(
    preds: &BTreeMap<u64, Vec<Prediction>>,
    gts: &BTreeMap<u64, Vec<GroundTruth>>,
    sigmas: &KeypointSigmas,
    params: &EvalParams,
    area: (f64, f64),
) -> Result<Accumulated> {
    sigmas.validate()?;
    if let Some(id) = preds.keys().find(|id| !gts.contains_key(id)) {
        return Err(Error::Eval(format!("predictions reference image {id}, which has no ground-truth entry")));
    }
    let nt = params.thresholds.len();
    let mut per_image = Vec::with_capacity(gts.len());
    for (id, g) in gts {
        let p = preds.get(id).map(Vec::as_slice).unwrap_or(&[]);
        per_image.push(match_image(p, g, sigmas, params, area)?);
    }
    let npig: usize = per_image.iter().map(|m| m.relevant_gt).sum();
    let mut out = Accumulated { precision: vec![vec![-1.0; params.recall_points.len()]; nt], recall: vec![-1.0; nt] };
    if npig == 0 {
        return Ok(out);
    }

    // (score, image, position) in global descending-score order, stable
    let mut flat: Vec<(f64, usize, usize)> = Vec::new();
    for (ii, m) in per_image.iter().enumerate() {
        flat.extend(m.scores.iter().enumerate().map(|(k, &s)| (s, ii, k)));
    }
    flat.sort_by(|a, b| b.0.total_cmp(&a.0));

    for ti in 0..nt {
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut rc = Vec::with_capacity(flat.len());
        let mut pr = Vec::with_capacity(flat.len());
        for &(_, ii, k) in &flat {
            let m = &per_image[ii];
            if !m.ignored[ti][k] {
                if m.matched[ti][k] {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
            rc.push(tp as f64 / npig as f64);
            pr.push(if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 });
        }
        out.recall[ti] = rc.last().copied().unwrap_or(0.0);
        for i in (1..pr.len()).rev() {
            if pr[i] > pr[i - 1] {
                pr[i - 1] = pr[i];
            }
        }
        for (ri, &r) in params.recall_points.iter().enumerate() {
            let idx = rc.partition_point(|&x| x < r);
            out.precision[ti][ri] = pr.get(idx).copied().unwrap_or(0.0);
        }
    }
    Ok(out)
}

fn mean_defined<'a>(xs: impl Iterator<Item = &'a f64>) -> f64 {
    let (sum, n) = xs.filter(|x| **x > -1.0).fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        -1.0
    } else {
        sum / n as f64
    }
}

fn threshold_index(params: &EvalParams, t: f64) -> Option<usize> {
    params.thresholds.iter().position(|x| (x - t).abs() < 1e-9)
}

/// AP over all thresholds, AP50, AP75, AP for large instances and AR at the
/// detection cap. Metrics with no relevant instance are -1.
pub fn evaluate(
    preds: &BTreeMap<u64, Vec<Prediction>>,
    gts: &BTreeMap<u64, Vec<GroundTruth>>,
    sigmas: &KeypointSigmas,
    params: &EvalParams,
) -> Result<Metrics> {
    let all = accumulate(preds, gts, sigmas, params, (0.0, f64::INFINITY))?;
    let large = accumulate(preds, gts, sigmas, params, (LARGE_AREA, f64::INFINITY))?;
    let at = |t: f64| {
        threshold_index(params, t).map(|i| mean_defined(all.precision[i].iter())).unwrap_or(-1.0)
    };
    Ok(Metrics {
        ap: mean_defined(all.precision.iter().flatten()),
        ap50: at(0.5),
        ap75: at(0.75),
        apl: mean_defined(large.precision.iter().flatten()),
        ar: mean_defined(all.recall.iter()),
    })
}

#[derive(Deserialize)]
struct CocoAnnotation {
    image_id: u64,
    keypoints: Vec<f64>,
    area: f64,
    #[serde(default)]
    bbox: Option<[f64; 4]>,
    #[serde(default)]
    iscrowd: u8,
}

#[derive(Deserialize)]
struct CocoImage {
    id: u64,
}

#[derive(Deserialize)]
struct CocoDataset {
    #[serde(default)]
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
}

#[derive(Deserialize, Serialize)]
pub struct CocoResult {
    pub image_id: u64,
    pub category_id: u64,
    pub keypoints: Vec<f64>,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
}

impl CocoResult {
    pub fn from_detection(image_id: u64, d: &Detection) -> Self {
        let [x0, y0, x1, y1] = d.corners();
        CocoResult {
            image_id,
            category_id: 1,
            keypoints: d.keypoints.iter().flatten().copied().collect(),
            score: d.score,
            bbox: Some([x0, y0, x1 - x0, y1 - y0]),
        }
    }
}

fn triplets(flat: &[f64], what: &str) -> Result<Vec<[f64; 3]>> {
    if !flat.len().is_multiple_of(3) {
        return Err(Error::Eval(format!("{what}: keypoint array length {} is not a multiple of 3", flat.len())));
    }
    Ok(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path: path.into(), source })
}

/// Reads a COCO keypoint annotation file. Every listed image gets an entry,
/// also when it has no annotations.
pub fn load_ground_truth(path: impl AsRef<Path>) -> Result<BTreeMap<u64, Vec<GroundTruth>>> {
    let path = path.as_ref();
    let ds: CocoDataset = read_json(path)?;
    let mut out: BTreeMap<u64, Vec<GroundTruth>> = ds.images.iter().map(|i| (i.id, Vec::new())).collect();
    for a in ds.annotations {
        let keypoints = triplets(&a.keypoints, &path.display().to_string())?;
        let bbox = a.bbox.unwrap_or([0.0; 4]);
        out.entry(a.image_id).or_default().push(GroundTruth { keypoints, area: a.area, bbox, iscrowd: a.iscrowd != 0 });
    }
    Ok(out)
}

/// Reads a COCO keypoint result file (an array of detections).
pub fn load_predictions(path: impl AsRef<Path>) -> Result<BTreeMap<u64, Vec<Prediction>>> {
    let path = path.as_ref();
    let rows: Vec<CocoResult> = read_json(path)?;
    let mut out: BTreeMap<u64, Vec<Prediction>> = BTreeMap::new();
    for r in rows {
        let keypoints = triplets(&r.keypoints, &path.display().to_string())?;
        out.entry(r.image_id).or_default().push(Prediction { keypoints, score: r.score });
    }
    Ok(out)
}
