//! Anchor decoding, its inverse, and box non-maximum suppression.

use drsi_tensor::{Float, Tensor};

use crate::error::{Error, Result};

/// Logits per anchor before the keypoint triplets: x, y, w, h, objectness, class.
pub const BOX_LOGITS: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    /// Center x, center y, width, height in input pixels.
    pub bbox: [f64; 4],
    pub objectness: f64,
    pub class_score: f64,
    /// (x, y, confidence) per keypoint.
    pub keypoints: Vec<[f64; 3]>,
    pub score: f64,
}

impl Detection {
    /// (x0, y0, x1, y1).
    pub fn corners(&self) -> [f64; 4] {
        let [cx, cy, w, h] = self.bbox;
        [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
    }
}

/// A box and keypoints to be expressed as logits of one anchor slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub bbox: [f64; 4],
    pub keypoints: Vec<[f64; 2]>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> Option<f64> {
    (p > 0.0 && p < 1.0).then(|| (p / (1.0 - p)).ln())
}

fn box_offset(t: f64) -> f64 {
    2.0 * sigmoid(t) - 0.5
}

fn keypoint_offset(t: f64) -> f64 {
    (2.0 * sigmoid(t) - 0.5) * 4.0 - 1.5
}

/// Decodes the logits of one anchor slot at grid cell (`row`, `col`).
pub fn decode_slot(logits: &[f64], row: usize, col: usize, stride: usize, anchor: [f64; 2]) -> Detection {
    let s = stride as f64;
    let (i, j) = (row as f64, col as f64);
    let bw = (2.0 * sigmoid(logits[2])).powi(2) * anchor[0];
    let bh = (2.0 * sigmoid(logits[3])).powi(2) * anchor[1];
    let objectness = sigmoid(logits[4]);
    let class_score = sigmoid(logits[5]);
    let keypoints = logits[BOX_LOGITS..]
        .chunks_exact(3)
        .map(|t| [(keypoint_offset(t[0]) + j) * s, (keypoint_offset(t[1]) + i) * s, sigmoid(t[2])])
        .collect();
    Detection {
        bbox: [(box_offset(logits[0]) + j) * s, (box_offset(logits[1]) + i) * s, bw, bh],
        objectness,
        class_score,
        keypoints,
        score: objectness * class_score,
    }
}

/// Inverse of [`decode_slot`] for the geometric logits. Objectness, class and
/// keypoint-confidence logits are set from `confidence`.
pub fn encode(target: &Target, row: usize, col: usize, stride: usize, anchor: [f64; 2], confidence: f64) -> Result<Vec<f64>> {
    let s = stride as f64;
    let (i, j) = (row as f64, col as f64);
    let out_of_range = || Error::Eval(format!("target {target:?} is not representable at cell ({row}, {col}), stride {stride}"));
    let from_box = |v: f64, cell: f64| logit((v / s - cell + 0.5) / 2.0);
    let from_size = |v: f64, a: f64| logit((v / a).sqrt() / 2.0);
    let from_kp = |v: f64, cell: f64| logit(((v / s - cell + 1.5) / 4.0 + 0.5) / 2.0);
    let conf = logit(confidence).ok_or_else(out_of_range)?;
    let [cx, cy, w, h] = target.bbox;
    let mut out = vec![
        from_box(cx, j).ok_or_else(out_of_range)?,
        from_box(cy, i).ok_or_else(out_of_range)?,
        from_size(w, anchor[0]).ok_or_else(out_of_range)?,
        from_size(h, anchor[1]).ok_or_else(out_of_range)?,
        conf,
        conf,
    ];
    for &[x, y] in &target.keypoints {
        out.push(from_kp(x, j).ok_or_else(out_of_range)?);
        out.push(from_kp(y, i).ok_or_else(out_of_range)?);
        out.push(conf);
    }
    Ok(out)
}

/// Decodes one head output of shape (n, A·(6 + 3K), H, W) into per-image
/// detections with `objectness · class ≥ conf_threshold`.
pub fn decode<T: Float>(
    head: &Tensor<T>,
    stride: usize,
    anchors: &[[f64; 2]],
    num_keypoints: usize,
    conf_threshold: f64,
) -> Result<Vec<Vec<Detection>>> {
    let s = head.shape();
    let per = BOX_LOGITS + 3 * num_keypoints;
    if anchors.is_empty() || s.c != anchors.len() * per {
        return Err(Error::Eval(format!(
            "head has {} channels, expected {} anchors x {per}",
            s.c,
            anchors.len()
        )));
    }
    let mut out = Vec::with_capacity(s.n);
    let mut logits = vec![0.0; per];
    for n in 0..s.n {
        let mut dets = Vec::new();
        for (a, &anchor) in anchors.iter().enumerate() {
            for i in 0..s.h {
                for j in 0..s.w {
                    for (k, l) in logits.iter_mut().enumerate() {
                        *l = head.at(n, a * per + k, i, j).as_f64();
                    }
                    let d = decode_slot(&logits, i, j, stride, anchor);
                    if d.score >= conf_threshold {
                        dets.push(d);
                    }
                }
            }
        }
        out.push(dets);
    }
    Ok(out)
}

/// Intersection over union of two boxes in corner form.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: [f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy suppression by descending score; equal scores keep input order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Result<Vec<Detection>> {
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(Error::Eval(format!("iou threshold must lie in (0, 1), got {iou_threshold}")));
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let c = dets[i].corners();
        if kept.iter().all(|k| iou(k.corners(), c) <= iou_threshold) {
            kept.push(dets[i].clone());
        }
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use drsi_tensor::Shape;

    fn corner_box(x0: f64, y0: f64, x1: f64, y1: f64, score: f64) -> Detection {
        Detection {
            bbox: [(x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0],
            objectness: score,
            class_score: 1.0,
            keypoints: vec![],
            score,
        }
    }

    #[test]
    fn zero_logits_land_on_cell_center() {
        let head = Tensor::<f32>::zeros(Shape::new(1, 3 * 57, 2, 2));
        let anchors = [[19.0, 27.0], [44.0, 40.0], [38.0, 94.0]];
        let dets = decode(&head, 8, &anchors, 17, 0.0).unwrap();
        let d = &dets[0][0];
        assert_eq!(d.bbox, [4.0, 4.0, 19.0, 27.0]);
        assert_eq!(d.score, 0.25);
        assert!(d.keypoints.iter().all(|k| k[0] == 4.0 && k[1] == 4.0 && k[2] == 0.5));
        assert_eq!(dets[0].len(), 12);
    }

    #[test]
    fn threshold_one_gives_nothing() {
        let head = Tensor::<f64>::full(Shape::new(1, 3 * 9, 3, 3), 30.0);
        let dets = decode(&head, 16, &[[1.0, 1.0]; 3], 1, 1.0).unwrap();
        assert!(dets[0].is_empty());
    }

    #[test]
    fn wrong_channel_count() {
        let head = Tensor::<f64>::zeros(Shape::new(1, 10, 2, 2));
        assert!(decode(&head, 8, &[[1.0, 1.0]; 3], 17, 0.5).is_err());
    }

    #[test]
    fn encode_rejects_out_of_range() {
        let t = Target { bbox: [100.0, 4.0, 10.0, 10.0], keypoints: vec![] };
        assert!(encode(&t, 0, 0, 8, [10.0, 10.0], 0.9).is_err());
        let t = Target { bbox: [4.0, 4.0, 41.0, 10.0], keypoints: vec![] };
        assert!(encode(&t, 0, 0, 8, [10.0, 10.0], 0.9).is_err());
    }

    #[test]
    fn nms_examples() {
        let a = corner_box(0.0, 0.0, 2.0, 2.0, 0.9);
        let b = corner_box(1.0, 1.0, 3.0, 3.0, 0.8);
        assert!((iou(a.corners(), b.corners()) - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(nms(&[a.clone(), b.clone()], 0.5).unwrap().len(), 2);
        assert_eq!(nms(&[a.clone(), b.clone()], 0.1).unwrap(), vec![a.clone()]);

        let mut twin = a.clone();
        twin.objectness = 0.1;
        let kept = nms(&[a.clone(), twin], 0.5).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].objectness, 0.9);

        assert!(nms(&[a], 1.0).is_err());
    }
}
