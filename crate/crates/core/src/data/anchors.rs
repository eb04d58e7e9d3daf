//! Anchor shapes from the generator's box-size distribution.

use super::catalog::ClassCatalog;
use super::dataset::scene_for;

pub const ANCHOR_SCENES: usize = 1000;
pub const ANCHOR_SEED: u64 = 0;

/// IoU of two boxes sharing their top-left corner.
pub fn shape_iou(a: [f64; 2], b: [f64; 2]) -> f64 {
    let inter = a[0].min(b[0]) * a[1].min(b[1]);
    inter / (a[0] * a[1] + b[0] * b[1] - inter)
}

/// `[w, h]` of every control in `n` seeded scenes.
pub fn box_sizes(catalog: &ClassCatalog, canvas: u32, n: usize, seed: u64) -> Vec<[f64; 2]> {
    (0..n)
        .flat_map(|i| scene_for(catalog, canvas, seed, i).controls)
        .map(|c| [c.bbox.w as f64, c.bbox.h as f64])
        .collect()
}

/// k-means under the `1 - IoU` distance, seeded at area quantiles.
///
/// Returns centroids sorted by area. Deterministic: no random restarts.
pub fn kmeans_anchors(sizes: &[[f64; 2]], k: usize, max_iter: usize) -> Vec<[f64; 2]> {
    assert!(sizes.len() >= k && k > 0, "need at least k boxes");
    let mut sorted = sizes.to_vec();
    sorted.sort_by(|a, b| (a[0] * a[1]).total_cmp(&(b[0] * b[1])));
    let mut centers: Vec<[f64; 2]> = (0..k)
        .map(|i| sorted[((2 * i + 1) * sorted.len()) / (2 * k)])
        .collect();
    let mut assign = vec![usize::MAX; sizes.len()];
    for _ in 0..max_iter {
        let mut changed = false;
        for (s, a) in sizes.iter().zip(assign.iter_mut()) {
            let best = (0..k)
                .max_by(|&i, &j| shape_iou(*s, centers[i]).total_cmp(&shape_iou(*s, centers[j])).then(j.cmp(&i)))
                .expect("k > 0");
            changed |= *a != best;
            *a = best;
        }
        if !changed {
            break;
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&[f64; 2]> = sizes.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(s, _)| s).collect();
            if !members.is_empty() {
                let n = members.len() as f64;
                *center = [
                    members.iter().map(|m| m[0]).sum::<f64>() / n,
                    members.iter().map(|m| m[1]).sum::<f64>() / n,
                ];
            }
        }
    }
    centers.sort_by(|a, b| (a[0] * a[1]).total_cmp(&(b[0] * b[1])));
    centers
}

/// Nine anchors for the default catalog, grouped three per scale and
/// rounded to 0.1 px.
pub fn default_catalog_anchors(canvas: u32) -> Vec<Vec<[f64; 2]>> {
    let sizes = box_sizes(&ClassCatalog::twin12(), canvas, ANCHOR_SCENES, ANCHOR_SEED);
    let c = kmeans_anchors(&sizes, 9, 300);
    c.chunks(3)
        .map(|s| s.iter().map(|a| a.map(|v| (v * 10.0).round() / 10.0)).collect())
        .collect()
}
