//! Anchor target assignment.
//!
//! Every ground-truth box is tried at every scale. At a scale it goes to the
//! anchor with the best shape IoU (ties: lowest anchor index) if that IoU
//! exceeds [`ANCHOR_IOU`], at the grid cell containing its centre. When two
//! boxes claim the same anchor and cell, the higher IoU wins and equal IoUs
//! keep the lower box index. No neighbouring cells are used.

use crate::data::anchors::shape_iou;
use crate::data::Annotation;
use crate::model::HeadGeometry;

pub const ANCHOR_IOU: f64 = 0.2;

/// One positive anchor slot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Positive {
    pub scale: usize,
    pub anchor: usize,
    pub gy: usize,
    pub gx: usize,
    pub class_id: usize,
    /// Ground-truth `[cx, cy, w, h]` in pixels.
    pub gt: [f64; 4],
    pub gt_index: usize,
    pub anchor_iou: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Targets {
    /// Positives ordered by scale, anchor, row, column.
    pub positives: Vec<Positive>,
    /// Ground-truth boxes that received no positive at any scale.
    pub unmatched: usize,
}

impl Targets {
    /// Objectness target map for `scale`, laid out like the head map's
    /// objectness channels: `[A, S, S]` flattened.
    pub fn objectness(&self, geo: &HeadGeometry, scale: usize) -> Vec<f64> {
        let s = geo.grid(scale);
        let mut t = vec![0.0; geo.anchors_per_scale() * s * s];
        for p in self.positives.iter().filter(|p| p.scale == scale) {
            t[(p.anchor * s + p.gy) * s + p.gx] = 1.0;
        }
        t
    }
}

pub fn assign_targets(anns: &[Annotation], geo: &HeadGeometry) -> Targets {
    let size = geo.input_size as f64;
    let mut slots: Vec<Positive> = Vec::new();
    for (gi, a) in anns.iter().enumerate() {
        let gt = [a.cx * size, a.cy * size, a.w * size, a.h * size];
        for scale in 0..geo.scales() {
            let mut best = (0, f64::NEG_INFINITY);
            for (ai, anchor) in geo.anchors[scale].iter().enumerate() {
                let iou = shape_iou([gt[2], gt[3]], *anchor);
                if iou > best.1 {
                    best = (ai, iou);
                }
            }
            if best.1 <= ANCHOR_IOU {
                continue;
            }
            let (stride, s) = (geo.strides[scale] as f64, geo.grid(scale));
            let cell = |v: f64| ((v / stride).floor().max(0.0) as usize).min(s - 1);
            let p = Positive {
                scale,
                anchor: best.0,
                gy: cell(gt[1]),
                gx: cell(gt[0]),
                class_id: a.class_id,
                gt,
                gt_index: gi,
                anchor_iou: best.1,
            };
            let key = |q: &Positive| (q.scale, q.anchor, q.gy, q.gx);
            match slots.iter_mut().find(|q| key(q) == key(&p)) {
                // earlier boxes have lower indices, so only a strictly better IoU replaces
                Some(q) if p.anchor_iou > q.anchor_iou => *q = p,
                Some(_) => {}
                None => slots.push(p),
            }
        }
    }
    slots.sort_by_key(|q| (q.scale, q.anchor, q.gy, q.gx));
    let unmatched = (0..anns.len()).filter(|&i| !slots.iter().any(|q| q.gt_index == i)).count();
    Targets {
        positives: slots,
        unmatched,
    }
}
