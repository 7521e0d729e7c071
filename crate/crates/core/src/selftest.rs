//! Property checks behind the `selftest` command and the acceptance suite.
//!
//! Each check returns a [`CriterionOutcome`]; a check passes only if its
//! property holds and it finishes within its time budget.

use std::collections::BTreeMap;
use std::fmt;
use std::time::{Duration, Instant};

use drsi_tensor::{Ctx, Float, Initializer, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::archive;
use crate::config::{ModelConfig, Variant, DEFAULT_ANCHORS, STRIDES};
use crate::decode::{self, Target, BOX_LOGITS};
use crate::error::{Error, Result};
use crate::eval::{self, EvalParams, GroundTruth, KeypointSigmas, Prediction};
use crate::gradcases::{grad_cases, run_case};
use crate::interaction::{gconv_forward, gn_conv_forward, ChannelScheme, ResGnConv};
use crate::network::Model;
use crate::nn::Layer;
use crate::profile;

#[derive(Clone, Debug)]
pub struct CriterionOutcome {
    pub id: u32,
    pub title: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
    pub budget: Duration,
}

impl fmt::Display for CriterionOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {}. {} ({:.2}s of {}s): {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.title,
            self.elapsed.as_secs_f64(),
            self.budget.as_secs(),
            self.detail
        )
    }
}

type Check = fn(u64) -> Result<(bool, String)>;

struct Criterion {
    id: u32,
    title: &'static str,
    budget_secs: u64,
    check: Check,
}

const CRITERIA: [Criterion; 9] = [
    Criterion { id: 1, title: "channel scheme sums to 2C", budget_secs: 1, check: channel_scheme },
    Criterion { id: 2, title: "interaction reductions", budget_secs: 30, check: reductions },
    Criterion { id: 3, title: "gradient suite", budget_secs: 300, check: gradients },
    Criterion { id: 4, title: "GMACs resolution scaling", budget_secs: 10, check: mac_scaling },
    Criterion { id: 5, title: "parameter bands", budget_secs: 10, check: parameter_bands },
    Criterion { id: 6, title: "OKS closed forms and AP oracle", budget_secs: 30, check: oks_and_ap },
    Criterion { id: 7, title: "decode round trip", budget_secs: 10, check: decode_round_trip },
    Criterion { id: 8, title: "determinism and serialization", budget_secs: 600, check: determinism },
    Criterion { id: 9, title: "ablation toggles keep shapes", budget_secs: 30, check: ablation_shapes },
];

pub fn criterion_ids() -> Vec<u32> {
    CRITERIA.iter().map(|c| c.id).collect()
}

/// Runs one criterion. Errors inside the check count as failures.
pub fn run_criterion(id: u32, seed: u64) -> Result<CriterionOutcome> {
    let c = CRITERIA
        .iter()
        .find(|c| c.id == id)
        .ok_or_else(|| Error::Unknown { kind: "criterion", name: id.to_string(), known: "1..9".into() })?;
    let start = Instant::now();
    let (ok, detail) = match (c.check)(seed) {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    let elapsed = start.elapsed();
    let budget = Duration::from_secs(c.budget_secs);
    let detail = if elapsed > budget { format!("{detail}; over time budget") } else { detail };
    Ok(CriterionOutcome { id, title: c.title, passed: ok && elapsed <= budget, detail, elapsed, budget })
}

pub fn run_all(seed: u64) -> Vec<CriterionOutcome> {
    CRITERIA.iter().map(|c| run_criterion(c.id, seed).expect("listed criterion")).collect()
}

fn channel_scheme(_: u64) -> Result<(bool, String)> {
    let mut checked = 0;
    for n in 1..=5usize {
        for c in (8..=1024).step_by(8) {
            let divisible = c % (1 << (n - 1)) == 0;
            match ChannelScheme::new(c, n) {
                Ok(s) if divisible => {
                    if s.c_0 + s.c_k.iter().sum::<usize>() != 2 * c || s.c_k.len() != n {
                        return Ok((false, format!("C={c} n={n}: c_0={} c_k={:?}", s.c_0, s.c_k)));
                    }
                    checked += 1;
                }
                Err(_) if !divisible => {}
                _ => return Ok((false, format!("C={c} n={n}: accepted={}", divisible))),
            }
        }
    }
    Ok((true, format!("{checked} (C, n) pairs")))
}

fn layer_eval<L: Layer<f32> + ?Sized>(layer: &L, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut cx = Ctx::eager();
    Ok(layer.forward(&mut cx, &Var::from(x.clone()))?.tensor()?)
}

fn reductions(seed: u64) -> Result<(bool, String)> {
    const C: usize = 16;
    let shape = Shape::new(1, C, 8, 8);
    for t in 0..20 {
        let s = seed.wrapping_mul(1000).wrapping_add(t);
        let x = Tensor::<f32>::uniform(shape, s, -1.0, 1.0);
        let plain = ResGnConv::<f32>::new(&Initializer::new(s), "g", C, 1, 1.0, false)?;
        if !layer_eval(&plain, &x)?.bit_eq(&gconv_forward(&plain, &x)?) {
            return Ok((false, format!("order 1, input {t}: not bitwise equal to gConv")));
        }
    }
    let mut worst = 0.0f64;
    for n in 1..=3 {
        for t in 0..20 {
            let s = seed.wrapping_mul(1000).wrapping_add(100 * n as u64 + t);
            let x = Tensor::<f32>::uniform(shape, s, -1.0, 1.0);
            let layer = ResGnConv::<f32>::new(&Initializer::new(s), "g", C, n, 1.0, false)?;
            let d = layer_eval(&layer, &x)?.max_abs_diff(&gn_conv_forward(&layer, &x)?);
            worst = worst.max(d);
        }
    }
    Ok((worst <= 1e-5, format!("order 1 bitwise on 20 inputs; orders 1-3 max |diff| {worst:.2e}")))
}

fn gradients(seed: u64) -> Result<(bool, String)> {
    let cases = grad_cases();
    let mut failed = Vec::new();
    let mut worst_component = 0.0f64;
    let mut model_error = 0.0f64;
    let mut skipped = 0;
    for (name, case) in cases.iter() {
        let out = run_case(name, case.as_ref(), seed)?;
        skipped += out.report.coords_skipped;
        if name.starts_with("model.") {
            model_error = model_error.max(out.report.max_rel_error);
        } else {
            worst_component = worst_component.max(out.report.max_rel_error);
        }
        if !out.passed() {
            failed.push(format!("{name} {:.2e} > {:.0e} at {:?}", out.report.max_rel_error, out.tolerance, out.report.worst));
        }
    }
    let summary = format!(
        "{} cases, worst component {worst_component:.2e}, end-to-end {model_error:.2e}, {skipped} kink coordinates skipped",
        cases.names().len()
    );
    if failed.is_empty() {
        Ok((true, summary))
    } else {
        Ok((false, format!("{summary}; failed: {}", failed.join("; "))))
    }
}

fn mac_scaling(seed: u64) -> Result<(bool, String)> {
    let cfg = ModelConfig::preset(Variant::S);
    let model = Model::<f32>::build(&cfg, seed)?;
    let g = |size| profile::profile_model(&model, size).map(|r| r.totals.gmacs);
    let (g640, g960, g1280) = (g(640)?, g(960)?, g(1280)?);
    let (r1, r2) = (g960 / g640, g1280 / g960);
    let ok = (r1 - 2.257).abs() <= 0.07 && (r2 - 1.776).abs() <= 0.06;
    Ok((ok, format!("GMACs {g640:.2}/{g960:.2}/{g1280:.2} at 640/960/1280, ratios {r1:.4} and {r2:.4}")))
}

/// Inclusive parameter bands for the named sizes.
pub const PARAMETER_BANDS: [(Variant, u64, u64); 3] = [
    (Variant::S, 12_300_000, 18_500_000),
    (Variant::M, 29_400_000, 44_200_000),
    (Variant::L, 63_800_000, 95_600_000),
];

fn parameter_bands(seed: u64) -> Result<(bool, String)> {
    let mut ok = true;
    let mut parts = Vec::new();
    for (variant, lo, hi) in PARAMETER_BANDS {
        let report = profile::profile(&ModelConfig::preset(variant), 640, seed)?;
        let p = report.totals.params;
        if (lo..=hi).contains(&p) {
            parts.push(format!("{variant} {p}"));
        } else {
            ok = false;
            let top: Vec<String> = report.largest(5).iter().map(|r| format!("{} {}", r.name, r.params)).collect();
            parts.push(format!("{variant} {p} outside [{lo}, {hi}]; largest: {}", top.join(", ")));
        }
    }
    Ok((ok, parts.join("; ")))
}

fn random_instance(rng: &mut impl Rng, k: usize) -> GroundTruth {
    let (cx, cy) = (rng.random_range(50.0..450.0), rng.random_range(50.0..450.0));
    let size: f64 = rng.random_range(40.0..160.0);
    let keypoints = (0..k)
        .map(|_| {
            let v = if rng.random_bool(0.85) { 2.0 } else { 0.0 };
            [cx + rng.random_range(-0.5..0.5) * size, cy + rng.random_range(-0.5..0.5) * size, v]
        })
        .collect::<Vec<_>>();
    let mut gt = GroundTruth { keypoints, area: size * size * 0.6, bbox: [cx - size / 2.0, cy - size / 2.0, size, size], iscrowd: false };
    if gt.visible() == 0 {
        gt.keypoints[0][2] = 2.0;
    }
    gt
}

fn random_prediction(rng: &mut impl Rng, gts: &[GroundTruth]) -> Prediction {
    let score = rng.random_range(0.0..1.0);
    if gts.is_empty() || rng.random_bool(0.2) {
        let (x, y) = (rng.random_range(0.0..500.0), rng.random_range(0.0..500.0));
        return Prediction { keypoints: vec![[x, y, 1.0]; gts.first().map_or(17, |g| g.keypoints.len())], score };
    }
    let g = &gts[rng.random_range(0..gts.len())];
    let noise = rng.random_range(0.0..0.35) * g.area.sqrt();
    let keypoints = g
        .keypoints
        .iter()
        .map(|k| [k[0] + rng.random_range(-1.0..1.0) * noise, k[1] + rng.random_range(-1.0..1.0) * noise, 1.0])
        .collect();
    Prediction { keypoints, score }
}

/// Matches of one image by exhaustive search: among all injective assignments
/// of score-ordered predictions to instances with OKS ≥ `t`, the one whose
/// sequence of similarities (unmatched = -1) is lexicographically largest.
fn brute_force_matches(preds: &[Prediction], gts: &[GroundTruth], sigmas: &KeypointSigmas, t: f64) -> Result<Vec<(f64, bool)>> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    let sim = order
        .iter()
        .map(|&d| gts.iter().map(|g| eval::oks(&preds[d].keypoints, g, sigmas)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;

    fn search(sim: &[Vec<f64>], t: f64, di: usize, used: &mut Vec<bool>, cur: &mut Vec<f64>, best: &mut Option<Vec<f64>>) {
        if di == sim.len() {
            let better = match best {
                None => true,
                Some(b) => cur.iter().zip(b.iter()).find(|(x, y)| x != y).is_some_and(|(x, y)| x > y),
            };
            if better {
                *best = Some(cur.clone());
            }
            return;
        }
        cur.push(-1.0);
        search(sim, t, di + 1, used, cur, best);
        cur.pop();
        for g in 0..used.len() {
            if !used[g] && sim[di][g] >= t {
                used[g] = true;
                cur.push(sim[di][g]);
                search(sim, t, di + 1, used, cur, best);
                cur.pop();
                used[g] = false;
            }
        }
    }

    let mut best = None;
    search(&sim, t, 0, &mut vec![false; gts.len()], &mut Vec::new(), &mut best);
    let best = best.unwrap_or_default();
    Ok(order.iter().zip(best).map(|(&d, s)| (preds[d].score, s >= 0.0)).collect())
}

/// AP at one threshold from (score, true positive) pairs, by direct definition:
/// the mean over recall points r of the best precision at any recall ≥ r.
fn brute_force_ap(mut dets: Vec<(f64, bool)>, positives: usize, recall_points: &[f64]) -> f64 {
    if positives == 0 {
        return -1.0;
    }
    dets.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut curve = Vec::new();
    let mut tp = 0;
    for (k, (_, hit)) in dets.iter().enumerate() {
        tp += *hit as usize;
        curve.push((tp as f64 / positives as f64, tp as f64 / (k + 1) as f64));
    }
    let total: f64 = recall_points
        .iter()
        .map(|&r| curve.iter().filter(|(rc, _)| *rc >= r).map(|(_, p)| *p).fold(0.0, f64::max))
        .sum();
    total / recall_points.len() as f64
}

fn oks_and_ap(seed: u64) -> Result<(bool, String)> {
    let sigmas = KeypointSigmas::default();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let gt = random_instance(&mut rng, 17);
    let exact = Prediction { keypoints: gt.keypoints.iter().map(|k| [k[0], k[1], 1.0]).collect(), score: 1.0 };
    let one = eval::oks(&exact.keypoints, &gt, &sigmas)?;
    let shifted: Vec<[f64; 3]> = gt
        .keypoints
        .iter()
        .zip(&sigmas.0)
        .map(|(k, h)| [k[0] + (2.0 * gt.area).sqrt() * h, k[1], 1.0])
        .collect();
    let e_inv = eval::oks(&shifted, &gt, &sigmas)?;
    if (one - 1.0).abs() > 1e-9 || (e_inv - (-1.0f64).exp()).abs() > 1e-9 {
        return Ok((false, format!("closed forms: exact {one}, one falloff {e_inv}")));
    }

    let params = EvalParams::default();
    let mut all_preds = BTreeMap::new();
    let mut all_gts = BTreeMap::new();
    let mut all_dets = Vec::new();
    let mut all_pos = 0;
    let mut matched = 0;
    for image in 0..25u64 {
        let gts: Vec<GroundTruth> = (0..rng.random_range(1..=4)).map(|_| random_instance(&mut rng, 17)).collect();
        let preds: Vec<Prediction> = (0..rng.random_range(0..=5)).map(|_| random_prediction(&mut rng, &gts)).collect();
        let dets = brute_force_matches(&preds, &gts, &sigmas, 0.5)?;
        matched += dets.iter().filter(|d| d.1).count();
        let expected = brute_force_ap(dets.clone(), gts.len(), &params.recall_points);
        let single = eval::evaluate(&BTreeMap::from([(image, preds.clone())]), &BTreeMap::from([(image, gts.clone())]), &sigmas, &params)?;
        if single.ap50 != expected {
            return Ok((false, format!("image {image}: evaluate AP50 {} vs oracle {expected}", single.ap50)));
        }
        all_dets.extend(dets);
        all_pos += gts.len();
        all_preds.insert(image, preds);
        all_gts.insert(image, gts);
    }
    let expected = brute_force_ap(all_dets, all_pos, &params.recall_points);
    let pooled = eval::evaluate(&all_preds, &all_gts, &sigmas, &params)?.ap50;
    Ok((
        pooled == expected,
        format!("OKS 1 and e^-1 exact; 25 images ({matched} matches) agree per image and pooled (AP50 {pooled:.6} vs {expected:.6})"),
    ))
}

fn decode_round_trip(seed: u64) -> Result<(bool, String)> {
    const K: usize = 17;
    const GRID: usize = 4;
    let per = BOX_LOGITS + 3 * K;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for trial in 0..1000 {
        let level = trial % STRIDES.len();
        let stride = STRIDES[level] as f64;
        let anchors = DEFAULT_ANCHORS[level];
        let (a, i, j) = (rng.random_range(0..3), rng.random_range(0..GRID), rng.random_range(0..GRID));
        let anchor = anchors[a];
        let target = Target {
            bbox: [
                (j as f64 + rng.random_range(-0.45..1.45)) * stride,
                (i as f64 + rng.random_range(-0.45..1.45)) * stride,
                rng.random_range(0.02..3.9) * anchor[0],
                rng.random_range(0.02..3.9) * anchor[1],
            ],
            keypoints: (0..K)
                .map(|_| {
                    [(j as f64 + rng.random_range(-3.4..4.4)) * stride, (i as f64 + rng.random_range(-3.4..4.4)) * stride]
                })
                .collect(),
        };
        let logits = decode::encode(&target, i, j, STRIDES[level], anchor, 0.9)?;
        let shape = Shape::new(1, 3 * per, GRID, GRID);
        let mut data = vec![0.0; shape.numel()];
        for aa in 0..3 {
            for ii in 0..GRID {
                for jj in 0..GRID {
                    data[shape.index(0, aa * per + 4, ii, jj)] = -50.0;
                }
            }
        }
        for (k, &l) in logits.iter().enumerate() {
            data[shape.index(0, a * per + k, i, j)] = l;
        }
        let head = Tensor::from_vec(shape, data)?;
        let dets = decode::decode(&head, STRIDES[level], &anchors, K, 0.5)?;
        let [d] = dets[0].as_slice() else {
            return Ok((false, format!("trial {trial}: {} detections instead of 1", dets[0].len())));
        };
        for (x, y) in d.bbox.iter().zip(&target.bbox) {
            worst = worst.max((x - y).abs());
        }
        for (p, q) in d.keypoints.iter().zip(&target.keypoints) {
            worst = worst.max((p[0] - q[0]).abs()).max((p[1] - q[1]).abs());
        }
    }
    Ok((worst <= 1e-5, format!("1000 targets over strides {STRIDES:?}, max error {worst:.2e} px")))
}

fn single_threaded<R: Send>(f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn all_finite<T: Float>(outs: &[Tensor<T>]) -> bool {
    outs.iter().all(Tensor::all_finite)
}

fn determinism(seed: u64) -> Result<(bool, String)> {
    let cfg = ModelConfig::preset(Variant::S);
    let a = Model::<f32>::build(&cfg, seed)?;
    let b = Model::<f32>::build(&cfg, seed)?;
    if archive::encode(&archive::entries(&a))? != archive::encode(&archive::entries(&b))? {
        return Ok((false, "two builds with the same seed differ".into()));
    }
    drop(b);

    let x = Tensor::<f32>::uniform(Shape::new(1, 3, 960, 960), seed ^ 0x5eed, 0.0, 1.0);
    let start = Instant::now();
    let y = single_threaded(|| a.infer(&x))??;
    let forward_secs = start.elapsed().as_secs_f64();
    if !all_finite(&y) {
        return Ok((false, "960 forward produced NaN or Inf".into()));
    }

    let path = std::env::temp_dir().join(format!("drsi-selftest-{}-{seed}.bin", std::process::id()));
    archive::save(&a, &path)?;
    let mut c = Model::<f32>::build(&cfg, seed.wrapping_add(1))?;
    let loaded = archive::load(&mut c, &path);
    let _ = std::fs::remove_file(&path);
    loaded?;
    let z = single_threaded(|| c.infer(&x))??;
    let same = y.iter().zip(&z).all(|(p, q)| p.bit_eq(q));
    let shapes: Vec<String> = y.iter().map(|t| t.shape().to_string()).collect();
    Ok((
        same,
        format!(
            "same-seed weights identical; single-threaded 960 forward {forward_secs:.1}s, finite, heads {}; reload {}",
            shapes.join(" "),
            if same { "bitwise equal" } else { "differs" }
        ),
    ))
}

/// Inter-module trace rows: pyramid levels, neck outputs and heads.
pub fn interface_shapes(cfg: &ModelConfig, size: usize, seed: u64) -> Result<Vec<(String, Shape)>> {
    Ok(profile::trace(cfg, size, seed)?
        .into_iter()
        .filter(|(n, _)| n.starts_with("backbone.P") || n.starts_with("neck.N") || n.starts_with("head."))
        .collect())
}

const ABLATION_BASE: &str = "variant = \"s\"\nbackbone_block = \"c3dr\"\n";

fn ablation_shapes(seed: u64) -> Result<(bool, String)> {
    let mut reference: Option<Vec<(String, Shape)>> = None;
    let mut runs = 0;
    for neck in ["pan", "cbam_pan", "asi_pan"] {
        for interaction in ["gn_conv", "res_gn_conv"] {
            let text = format!("{ABLATION_BASE}neck = \"{neck}\"\ninteraction = \"{interaction}\"\n");
            let cfg = ModelConfig::from_toml_str(&text)?;
            let shapes = interface_shapes(&cfg, 640, seed)?;
            match &reference {
                None => reference = Some(shapes),
                Some(r) if *r != shapes => {
                    return Ok((false, format!("neck {neck}, interaction {interaction}: interface shapes differ")));
                }
                Some(_) => {}
            }
            runs += 1;
        }
    }
    let n = reference.map_or(0, |r| r.len());
    Ok((runs == 6, format!("{runs} configurations, {n} interface shapes identical")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_ap_examples() {
        let pts: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        assert_eq!(brute_force_ap(vec![(0.9, true)], 1, &pts), 1.0);
        assert_eq!(brute_force_ap(vec![(0.9, false), (0.5, true)], 1, &pts), 0.5);
        assert_eq!(brute_force_ap(vec![], 2, &pts), 0.0);
        assert_eq!(brute_force_ap(vec![], 0, &pts), -1.0);
    }

    #[test]
    fn oracle_prefers_the_best_first_match() {
        let sigmas = KeypointSigmas(vec![0.5]);
        let gt = |x: f64| GroundTruth { keypoints: vec![[x, 0.0, 2.0]], area: 100.0, bbox: [0.0; 4], iscrowd: false };
        let p = |x: f64, score: f64| Prediction { keypoints: vec![[x, 0.0, 1.0]], score };
        // the high-score prediction sits closer to the second instance
        let m = brute_force_matches(&[p(4.0, 0.9), p(1.0, 0.8)], &[gt(0.0), gt(5.0)], &sigmas, 0.5).unwrap();
        assert_eq!(m, vec![(0.9, true), (0.8, true)]);
        let m = brute_force_matches(&[p(0.2, 0.9), p(0.1, 0.8)], &[gt(0.0)], &sigmas, 0.5).unwrap();
        assert_eq!(m, vec![(0.9, true), (0.8, false)]);
    }

    #[test]
    fn cheap_criteria_pass() {
        for id in [1, 2, 6, 7] {
            let out = run_criterion(id, 0).unwrap();
            assert!(out.passed, "{out}");
        }
        assert!(run_criterion(42, 0).is_err());
    }
}
