use drsi::decode::{decode, decode_slot, encode, iou, nms, Detection, Target};
use drsi::eval::{oks, GroundTruth, KeypointSigmas};
use drsi_tensor::{Shape, Tensor};
use proptest::prelude::*;

fn instance(points: &[(f64, f64)], area: f64) -> GroundTruth {
    GroundTruth {
        keypoints: points.iter().map(|&(x, y)| [x, y, 2.0]).collect(),
        area,
        bbox: [0.0, 0.0, 1.0, 1.0],
        iscrowd: false,
    }
}

fn sigmas(k: usize) -> KeypointSigmas {
    KeypointSigmas(KeypointSigmas::default().0[..k].to_vec())
}

fn points(k: usize) -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((-500.0..500.0f64, -500.0..500.0f64), k)
}

proptest! {
    #[test]
    fn oks_lies_in_unit_interval(gt in points(5), pred in points(5), area in 1.0..1e5f64) {
        let v = oks(&pred.iter().map(|&(x, y)| [x, y, 1.0]).collect::<Vec<_>>(), &instance(&gt, area), &sigmas(5)).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn oks_decreases_with_displacement(gt in points(4), dir in points(4), area in 10.0..1e4f64, a in 0.0..3.0f64, b in 0.0..3.0f64) {
        let (near, far) = if a <= b { (a, b) } else { (b, a) };
        let at = |t: f64| -> Vec<[f64; 3]> {
            gt.iter().zip(&dir).map(|(g, d)| [g.0 + t * d.0 / 50.0, g.1 + t * d.1 / 50.0, 1.0]).collect()
        };
        let g = instance(&gt, area);
        prop_assert!(oks(&at(near), &g, &sigmas(4)).unwrap() >= oks(&at(far), &g, &sigmas(4)).unwrap());
    }

    #[test]
    fn oks_is_translation_and_scale_invariant(
        gt in points(3), pred in points(3), area in 10.0..1e4f64,
        shift in (-100.0..100.0f64, -100.0..100.0f64), k in 0.25..4.0f64,
    ) {
        let sig = sigmas(3);
        let base = oks(&pred.iter().map(|&(x, y)| [x, y, 1.0]).collect::<Vec<_>>(), &instance(&gt, area), &sig).unwrap();
        let mv = |p: &(f64, f64)| (k * (p.0 + shift.0), k * (p.1 + shift.1));
        let gt2: Vec<_> = gt.iter().map(mv).collect();
        let pred2: Vec<[f64; 3]> = pred.iter().map(mv).map(|(x, y)| [x, y, 1.0]).collect();
        let moved = oks(&pred2, &instance(&gt2, k * k * area), &sig).unwrap();
        prop_assert!((base - moved).abs() <= 1e-9, "{} vs {}", base, moved);
    }

    #[test]
    fn nms_keeps_a_separated_subset_and_is_idempotent(
        boxes in prop::collection::vec((0.0..100.0f64, 0.0..100.0f64, 1.0..40.0f64, 1.0..40.0f64, 0.0..1.0f64), 0..25),
        thr in 0.05..0.95f64,
    ) {
        let dets: Vec<Detection> = boxes
            .iter()
            .map(|&(cx, cy, w, h, s)| Detection { bbox: [cx, cy, w, h], objectness: s, class_score: 1.0, keypoints: vec![], score: s })
            .collect();
        let kept = nms(&dets, thr).unwrap();
        prop_assert!(kept.iter().all(|k| dets.contains(k)));
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(iou(a.corners(), b.corners()) <= thr);
                prop_assert!(a.score >= b.score);
            }
        }
        prop_assert_eq!(nms(&kept, thr).unwrap(), kept.clone());
        if let Some(top) = dets.iter().map(|d| d.score).reduce(f64::max) {
            prop_assert_eq!(kept[0].score, top);
        }
    }

    #[test]
    fn encode_inverts_decode(
        stride in prop::sample::select(vec![8usize, 16, 32, 64]),
        cell in (0usize..10, 0usize..10),
        off in (-0.45..1.45f64, -0.45..1.45f64),
        size in (0.02..3.9f64, 0.02..3.9f64),
        kps in prop::collection::vec((-3.4..4.4f64, -3.4..4.4f64), 0..17),
    ) {
        let (i, j) = cell;
        let s = stride as f64;
        let anchor = [30.0, 50.0];
        let target = Target {
            bbox: [(j as f64 + off.0) * s, (i as f64 + off.1) * s, size.0 * anchor[0], size.1 * anchor[1]],
            keypoints: kps.iter().map(|k| [(j as f64 + k.0) * s, (i as f64 + k.1) * s]).collect(),
        };
        let d = decode_slot(&encode(&target, i, j, stride, anchor, 0.7).unwrap(), i, j, stride, anchor);
        for (a, b) in d.bbox.iter().zip(&target.bbox) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
        for (a, b) in d.keypoints.iter().zip(&target.keypoints) {
            prop_assert!((a[0] - b[0]).abs() <= 1e-6 && (a[1] - b[1]).abs() <= 1e-6);
        }
        prop_assert!((d.score - 0.49).abs() <= 1e-12);
    }
}

#[test]
fn decode_keeps_only_slots_above_threshold() {
    let shape = Shape::new(2, 3 * 9, 2, 3);
    let mut data = vec![0.0f32; shape.numel()];
    for n in 0..2 {
        for a in 0..3 {
            for i in 0..2 {
                for j in 0..3 {
                    data[shape.index(n, a * 9 + 4, i, j)] = -20.0;
                }
            }
        }
    }
    data[shape.index(1, 9 + 4, 1, 2)] = 20.0;
    data[shape.index(1, 9 + 5, 1, 2)] = 20.0;
    let head = Tensor::from_vec(shape, data).unwrap();
    let dets = decode(&head, 16, &[[10.0, 10.0], [20.0, 24.0], [30.0, 30.0]], 1, 0.5).unwrap();
    assert!(dets[0].is_empty());
    assert_eq!(dets[1].len(), 1);
    assert_eq!(dets[1][0].bbox, [2.5 * 16.0, 1.5 * 16.0, 20.0, 24.0]);
    assert_eq!(dets[1][0].keypoints, vec![[40.0, 24.0, 0.5]]);
}
