//! Drawing detections onto screenshots.

use super::boxes::{detection_order, Detection};
use crate::data::{ClassCatalog, RgbImage};

pub const BOX_THICKNESS: i64 = 2;

/// Outline colours indexed by `class_id % len`.
pub const PALETTE: [[u8; 3]; 12] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [0, 128, 128],
    [170, 110, 40],
    [128, 0, 0],
];

pub fn class_color(class_id: usize) -> [u8; 3] {
    PALETTE[class_id % PALETTE.len()]
}

/// Copy of `image` with a 2-px outline around every detection, drawn in
/// ascending confidence so stronger boxes end up on top.
pub fn draw_detections(image: &RgbImage, dets: &[Detection]) -> RgbImage {
    let mut out = image.clone();
    let mut sorted = dets.to_vec();
    sorted.sort_by(detection_order);
    for d in sorted.iter().rev() {
        let color = class_color(d.class_id);
        let [x1, y1, x2, y2] = d.bbox.map(|v| v.round() as i64);
        let (x2, y2) = (x2 - 1, y2 - 1);
        for t in 0..BOX_THICKNESS {
            for x in x1..=x2 {
                out.put(x, y1 + t, color);
                out.put(x, y2 - t, color);
            }
            for y in y1..=y2 {
                out.put(x1 + t, y, color);
                out.put(x2 - t, y, color);
            }
        }
    }
    out
}

/// One line per detection in descending confidence:
/// `<class> <confidence> <x1> <y1> <x2> <y2>`.
pub fn detection_listing(dets: &[Detection], catalog: &ClassCatalog) -> String {
    let mut sorted = dets.to_vec();
    sorted.sort_by(detection_order);
    sorted
        .iter()
        .map(|d| {
            format!(
                "{} {:.4} {:.1} {:.1} {:.1} {:.1}\n",
                catalog.name_of(d.class_id),
                d.confidence,
                d.bbox[0],
                d.bbox[1],
                d.bbox[2],
                d.bbox[3]
            )
        })
        .collect()
}
