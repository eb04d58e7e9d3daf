use std::cmp::Ordering;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::HeadGeometry;
use crate::scalar::{sigmoid, Scalar};
use crate::tensor::Tensor;

/// `[x1, y1, x2, y2]` in pixels.
pub type Xyxy = [f64; 4];

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Detection {
    pub bbox: Xyxy,
    pub class_id: usize,
    /// Objectness times class probability.
    pub confidence: f64,
}

fn area(b: &Xyxy) -> f64 {
    (b[2] - b[0]) * (b[3] - b[1])
}

/// IoU of two boxes, rejecting boxes with non-positive extent.
pub fn iou(a: &Xyxy, b: &Xyxy) -> Result<f64> {
    for x in [a, b] {
        if !(x[2] > x[0] && x[3] > x[1]) {
            return Err(Error::Contract(format!("degenerate box {x:?}")));
        }
    }
    Ok(iou_unchecked(a, b))
}

pub(crate) fn iou_unchecked(a: &Xyxy, b: &Xyxy) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (area(a) + area(b) - inter)
}

/// Descending confidence, then box coordinates, then class.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then_with(|| a.bbox.iter().zip(&b.bbox).fold(Ordering::Equal, |o, (x, y)| o.then(x.total_cmp(y))))
        .then(a.class_id.cmp(&b.class_id))
}

/// Greedy per-class suppression. Output is in [`detection_order`].
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(detection_order);
    let mut keep: Vec<Detection> = Vec::new();
    for d in sorted {
        if !keep
            .iter()
            .any(|k| k.class_id == d.class_id && iou_unchecked(&k.bbox, &d.bbox) > iou_thresh)
        {
            keep.push(d);
        }
    }
    keep
}

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct DecodeSettings {
    pub conf_thresh: f64,
    pub nms_iou: f64,
    pub max_candidates: usize,
    pub max_det: usize,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        Self {
            conf_thresh: 0.001,
            nms_iou: 0.45,
            max_candidates: 3000,
            max_det: 100,
        }
    }
}

/// Head maps to post-NMS detections. Every class whose score clears the
/// threshold yields a candidate (multi-label).
pub fn decode<T: Scalar>(maps: &[Tensor<T>], geo: &HeadGeometry, set: &DecodeSettings) -> Vec<Detection> {
    let size = geo.input_size as f64;
    let mut cands = Vec::new();
    for (s, map) in maps.iter().enumerate() {
        let (g, stride) = (geo.grid(s), geo.strides[s] as f64);
        let d = map.data();
        for (a, anchor) in geo.anchors[s].iter().enumerate() {
            for gy in 0..g {
                for gx in 0..g {
                    let at = |k| d[geo.index(s, a, k, gy, gx)].as_f64();
                    let obj = sigmoid(at(4));
                    if obj <= set.conf_thresh {
                        continue;
                    }
                    let cx = (2.0 * sigmoid(at(0)) - 0.5 + gx as f64) * stride;
                    let cy = (2.0 * sigmoid(at(1)) - 0.5 + gy as f64) * stride;
                    let w = (2.0 * sigmoid(at(2))).powi(2) * anchor[0];
                    let h = (2.0 * sigmoid(at(3))).powi(2) * anchor[1];
                    let bbox = [
                        (cx - w / 2.0).clamp(0.0, size),
                        (cy - h / 2.0).clamp(0.0, size),
                        (cx + w / 2.0).clamp(0.0, size),
                        (cy + h / 2.0).clamp(0.0, size),
                    ];
                    if !(bbox[2] > bbox[0] && bbox[3] > bbox[1]) {
                        continue;
                    }
                    for c in 0..geo.num_classes {
                        let confidence = obj * sigmoid(at(5 + c));
                        if confidence > set.conf_thresh {
                            cands.push(Detection { bbox, class_id: c, confidence });
                        }
                    }
                }
            }
        }
    }
    cands.sort_by(detection_order);
    cands.truncate(set.max_candidates);
    let mut out = nms(&cands, set.nms_iou);
    out.truncate(set.max_det);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(b: Xyxy, c: usize, conf: f64) -> Detection {
        Detection { bbox: b, class_id: c, confidence: conf }
    }

    #[test]
    fn iou_cases() {
        let a = [0.0, 0.0, 2.0, 2.0];
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &[3.0, 3.0, 4.0, 4.0]).unwrap(), 0.0);
        assert!((iou(&a, &[1.0, 1.0, 3.0, 3.0]).unwrap() - 1.0 / 7.0).abs() < 1e-12);
        assert!(iou(&a, &[1.0, 1.0, 1.0, 3.0]).is_err());
    }

    #[test]
    fn nms_rules() {
        // IoU 0.8: 10x10 boxes shifted by 10/9 px horizontally
        let a = [0.0, 0.0, 10.0, 10.0];
        let b = [10.0 / 9.0, 0.0, 10.0 + 10.0 / 9.0, 10.0];
        assert!((iou(&a, &b).unwrap() - 0.8).abs() < 1e-9);
        let kept = nms(&[det(b, 0, 0.8), det(a, 0, 0.9)], 0.45);
        assert_eq!(kept, vec![det(a, 0, 0.9)]);
        let far = [9.0, 0.0, 19.0, 10.0];
        assert!(iou(&a, &far).unwrap() < 0.1);
        assert_eq!(nms(&[det(a, 0, 0.9), det(far, 0, 0.8)], 0.45).len(), 2);
        assert_eq!(nms(&[det(a, 0, 0.9), det(b, 1, 0.8)], 0.45).len(), 2);
    }
}
