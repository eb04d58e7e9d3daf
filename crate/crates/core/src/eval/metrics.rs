//! Matching, PR curves, AP and the per-class report.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::boxes::{detection_order, iou_unchecked, Detection, Xyxy};
use crate::error::{Error, Result};

pub const MATCH_IOU: f64 = 0.5;

/// Detections and ground truth of one image.
#[derive(Clone, Debug, Default)]
pub struct ImageEval {
    pub detections: Vec<Detection>,
    /// `(class_id, box)`.
    pub ground_truth: Vec<(usize, Xyxy)>,
}

/// A scored detection after matching.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scored {
    pub confidence: f64,
    pub tp: bool,
}

/// Greedy matching in descending confidence: each detection takes the
/// unmatched same-class ground truth with the highest IoU >= `iou_thresh`
/// (ties: lower index), otherwise it is a false positive.
pub fn match_image(img: &ImageEval, iou_thresh: f64) -> Vec<(usize, Scored)> {
    let mut dets = img.detections.clone();
    dets.sort_by(detection_order);
    let mut taken = vec![false; img.ground_truth.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, (c, g)) in img.ground_truth.iter().enumerate() {
                if *c != d.class_id || taken[j] {
                    continue;
                }
                let o = iou_unchecked(&d.bbox, g);
                if o >= iou_thresh && best.map_or(true, |(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            if let Some((j, _)) = best {
                taken[j] = true;
            }
            (
                d.class_id,
                Scored {
                    confidence: d.confidence,
                    tp: best.is_some(),
                },
            )
        })
        .collect()
}

/// One point per distinct confidence, in descending confidence:
/// `(recall, precision, confidence)` over all detections scoring at least it.
pub fn pr_points(scored: &[Scored], n_gt: usize) -> Vec<(f64, f64, f64)> {
    let mut s = scored.to_vec();
    s.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, d) in s.iter().enumerate() {
        if d.tp {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_group = s.get(i + 1).map_or(true, |n| n.confidence != d.confidence);
        if last_of_group {
            let recall = if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 };
            out.push((recall, tp as f64 / (tp + fp) as f64, d.confidence));
        }
    }
    out
}

/// Area under the all-point interpolated (monotone envelope) precision curve.
pub fn average_precision(points: &[(f64, f64, f64)]) -> f64 {
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (i, &(r, _, _)) in points.iter().enumerate() {
        let envelope = points[i..].iter().map(|p| p.1).fold(0.0, f64::max);
        ap += (r - prev_r) * envelope;
        prev_r = r;
    }
    ap
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ap50: f64,
    pub gt_count: usize,
}

/// AP plus P/R/F1 at the confidence with the highest F1 (ties: higher confidence).
pub fn class_metrics(scored: &[Scored], n_gt: usize) -> ClassMetrics {
    let pts = pr_points(scored, n_gt);
    let mut best = (0.0, 0.0, 0.0);
    for &(r, p, _) in &pts {
        let f = f1(p, r);
        if f > best.2 {
            best = (p, r, f);
        }
    }
    ClassMetrics {
        precision: best.0,
        recall: best.1,
        f1: best.2,
        ap50: if n_gt == 0 { 0.0 } else { average_precision(&pts) },
        gt_count: n_gt,
    }
}

/// Unweighted mean over rows with at least one ground-truth instance;
/// `gt_count` is the total.
pub fn macro_mean<'a>(rows: impl IntoIterator<Item = &'a ClassMetrics>) -> ClassMetrics {
    let mut acc = ClassMetrics::default();
    let mut n = 0usize;
    for r in rows {
        acc.gt_count += r.gt_count;
        if r.gt_count == 0 {
            continue;
        }
        n += 1;
        acc.precision += r.precision;
        acc.recall += r.recall;
        acc.f1 += r.f1;
        acc.ap50 += r.ap50;
    }
    if n > 0 {
        let k = n as f64;
        acc.precision /= k;
        acc.recall /= k;
        acc.f1 /= k;
        acc.ap50 /= k;
    }
    acc
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: IndexMap<String, ClassMetrics>,
    pub all: ClassMetrics,
}

impl MetricsReport {
    pub fn build(class_names: &[String], images: &[ImageEval]) -> Self {
        let mut scored: Vec<Vec<Scored>> = vec![Vec::new(); class_names.len()];
        let mut gt = vec![0usize; class_names.len()];
        for img in images {
            for (c, s) in match_image(img, MATCH_IOU) {
                scored[c].push(s);
            }
            for (c, _) in &img.ground_truth {
                gt[*c] += 1;
            }
        }
        let classes: IndexMap<String, ClassMetrics> = class_names
            .iter()
            .enumerate()
            .map(|(c, n)| (n.clone(), class_metrics(&scored[c], gt[c])))
            .collect();
        let all = macro_mean(classes.values());
        Self { classes, all }
    }

    /// Mean AP@0.5 over the named classes.
    pub fn mean_ap(&self, names: &[&str]) -> f64 {
        names.iter().map(|n| self.classes.get(*n).map_or(0.0, |m| m.ap50)).sum::<f64>() / names.len().max(1) as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serialisable") + "\n"
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::format(path, format!("line {}, column {}", e.line(), e.column()), e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }
}

/// Percent change `(new - old) / old * 100`; `None` when `old` is 0.
pub fn percent_change(new: f64, old: f64) -> Option<f64> {
    (old != 0.0).then(|| (new - old) / old * 100.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub ap50: Option<f64>,
}

impl DeltaRow {
    pub fn between(new: &ClassMetrics, old: &ClassMetrics) -> Self {
        Self {
            precision: percent_change(new.precision, old.precision),
            recall: percent_change(new.recall, old.recall),
            f1: percent_change(new.f1, old.f1),
            ap50: percent_change(new.ap50, old.ap50),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub classes: IndexMap<String, DeltaRow>,
    pub all: DeltaRow,
}

impl DeltaReport {
    /// Rows are matched by class name; classes missing from `old` compare against zeros.
    pub fn between(new: &MetricsReport, old: &MetricsReport) -> Self {
        let zero = ClassMetrics::default();
        Self {
            classes: new
                .classes
                .iter()
                .map(|(n, m)| (n.clone(), DeltaRow::between(m, old.classes.get(n).unwrap_or(&zero))))
                .collect(),
            all: DeltaRow::between(&new.all, &old.all),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(c: f64, tp: bool) -> Scored {
        Scored { confidence: c, tp }
    }

    #[test]
    fn tp_fp_tp_over_two_gt() {
        let d = [s(0.9, true), s(0.8, false), s(0.7, true)];
        let pts = pr_points(&d, 2);
        let rp: Vec<(f64, f64)> = pts.iter().map(|p| (p.0, p.1)).collect();
        assert_eq!(rp, vec![(0.5, 1.0), (0.5, 0.5), (1.0, 2.0 / 3.0)]);
        assert!((average_precision(&pts) - (0.5 + 1.0 / 3.0)).abs() < 1e-12);
        let m = class_metrics(&d, 2);
        assert!((m.f1 - 0.8).abs() < 1e-12 && m.recall == 1.0);
    }

    #[test]
    fn f1_and_deltas() {
        assert!((f1(0.848, 0.902) - 0.874).abs() < 5e-4);
        assert_eq!(f1(0.0, 0.0), 0.0);
        let d = percent_change(0.771, 0.924).unwrap();
        assert!((d + 16.56).abs() < 0.01);
        assert_eq!(percent_change(0.3, 0.0), None);
    }

    #[test]
    fn matching_prefers_higher_iou_then_lower_index() {
        let img = ImageEval {
            detections: vec![Detection { bbox: [0.0, 0.0, 10.0, 10.0], class_id: 0, confidence: 0.9 }],
            ground_truth: vec![(0, [1.0, 0.0, 11.0, 10.0]), (0, [0.0, 0.0, 10.0, 10.0]), (0, [0.0, 0.0, 10.0, 10.0])],
        };
        let img2 = ImageEval {
            detections: img.detections.clone(),
            ground_truth: vec![(0, [0.0, 0.0, 10.0, 10.0]), (0, [0.0, 0.0, 10.0, 10.0])],
        };
        assert!(match_image(&img, 0.5)[0].1.tp);
        // with two identical targets the lower index is consumed: a second
        // identical detection still finds the other one
        let mut two = img2.clone();
        two.detections.push(Detection { confidence: 0.8, ..two.detections[0] });
        assert!(match_image(&two, 0.5).iter().all(|(_, s)| s.tp));
    }

    #[test]
    fn macro_skips_classes_without_ground_truth() {
        let a = ClassMetrics { precision: 1.0, recall: 0.5, f1: 2.0 / 3.0, ap50: 0.5, gt_count: 2 };
        let b = ClassMetrics { precision: 0.9, recall: 0.9, f1: 0.9, ap50: 0.9, gt_count: 0 };
        let m = macro_mean([&a, &b]);
        assert_eq!((m.precision, m.gt_count), (1.0, 2));
    }
}
