use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusionKind;

/// Output strides of the three detection scales.
pub const STRIDES: [usize; 3] = [8, 16, 32];

/// Default anchors in pixels, `[w, h]`, three per scale and sorted by area.
///
/// Produced by `data::anchors::default_catalog_anchors` over 1,000 seeded scenes of
/// the default catalog on a 256x256 canvas; `anchors_match_kmeans` in the
/// test suite recomputes them.
pub const DEFAULT_ANCHORS: [[[f64; 2]; 3]; 3] = [
    [[14.1, 16.7], [19.1, 14.5], [21.4, 21.7]],
    [[109.1, 8.9], [7.9, 128.2], [61.6, 18.4]],
    [[56.9, 28.3], [97.9, 21.9], [68.2, 60.3]],
];

/// Layout of the raw head maps: one `[A * (5 + C), S, S]` map per stride.
///
/// Channel `a * (5 + C) + k` of a map holds, for anchor `a`: `k = 0..4` box
/// offsets `tx, ty, tw, th`, `k = 4` objectness, `k >= 5` class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGeometry {
    pub input_size: usize,
    pub strides: Vec<usize>,
    pub anchors: Vec<Vec<[f64; 2]>>,
    pub num_classes: usize,
}

impl HeadGeometry {
    pub fn scales(&self) -> usize {
        self.strides.len()
    }

    pub fn anchors_per_scale(&self) -> usize {
        self.anchors.first().map_or(0, Vec::len)
    }

    pub fn grid(&self, scale: usize) -> usize {
        self.input_size / self.strides[scale]
    }

    pub fn entry(&self) -> usize {
        5 + self.num_classes
    }

    /// Flat index into a scale's map of channel `k` of anchor `a` at `(gy, gx)`.
    pub fn index(&self, scale: usize, a: usize, k: usize, gy: usize, gx: usize) -> usize {
        let s = self.grid(scale);
        ((a * self.entry() + k) * s + gy) * s + gx
    }

    pub fn map_shape(&self, scale: usize) -> [usize; 3] {
        let s = self.grid(scale);
        [self.anchors_per_scale() * self.entry(), s, s]
    }
}

/// Structural and fusion hyperparameters of a detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Square input side in pixels; a multiple of 32.
    pub input_size: usize,
    /// Output channels of the four backbone stages.
    pub channels: Vec<usize>,
    /// Bottlenecks per C3 block.
    pub c3_depth: usize,
    pub num_classes: usize,
    /// `anchors[scale][i] = [w, h]` in pixels.
    pub anchors: Vec<Vec<[f64; 2]>>,
    pub fusion: FusionKind,
    /// Number of cross-attention modules, a prefix of [`crate::model::INSERTION_ORDER`].
    pub xattn_count: usize,
    /// Width of a text embedding vector.
    pub text_dim: usize,
    /// Divide attention scores by `sqrt(d)`.
    pub scale_scores: bool,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            input_size: 256,
            channels: vec![16, 32, 64, 128],
            c3_depth: 1,
            num_classes: 12,
            anchors: DEFAULT_ANCHORS.iter().map(|s| s.to_vec()).collect(),
            fusion: FusionKind::None,
            xattn_count: 0,
            text_dim: 64,
            scale_scores: true,
            seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn with_fusion(mut self, fusion: FusionKind, xattn_count: usize) -> Self {
        self.fusion = fusion;
        self.xattn_count = xattn_count;
        self
    }

    pub fn anchors_per_scale(&self) -> usize {
        self.anchors.first().map_or(0, Vec::len)
    }

    /// Channels of one head output map: `A * (5 + C)`.
    pub fn head_channels(&self) -> usize {
        self.anchors_per_scale() * (5 + self.num_classes)
    }

    /// Grid side at each scale.
    pub fn grid_sizes(&self) -> [usize; 3] {
        STRIDES.map(|s| self.input_size / s)
    }

    pub fn geometry(&self) -> HeadGeometry {
        HeadGeometry {
            input_size: self.input_size,
            strides: STRIDES.to_vec(),
            anchors: self.anchors.clone(),
            num_classes: self.num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return bad(format!("input_size {} must be a positive multiple of 32", self.input_size));
        }
        if self.channels.len() != 4 || self.channels.iter().any(|&c| c < 2 || c % 2 != 0) {
            return bad(format!("channel schedule {:?} must list four even widths >= 2", self.channels));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be >= 1".into());
        }
        let a = self.anchors_per_scale();
        if self.anchors.len() != 3 || a == 0 || self.anchors.iter().any(|s| s.len() != a) {
            return bad("anchors must list the same positive number of anchors for each of 3 scales".into());
        }
        if self.anchors.iter().flatten().any(|[w, h]| !(*w > 0.0 && *h > 0.0)) {
            return bad("anchor sides must be positive".into());
        }
        if ![0, 3, 4, 5].contains(&self.xattn_count) {
            return bad(format!("xattn_count {} must be one of 0, 3, 4, 5", self.xattn_count));
        }
        if (self.xattn_count == 0) != (self.fusion == FusionKind::None) {
            return bad(format!(
                "fusion `{}` is incompatible with xattn_count {} (0 modules iff fusion none)",
                self.fusion, self.xattn_count
            ));
        }
        if self.text_dim == 0 {
            return bad("text_dim must be >= 1".into());
        }
        Ok(())
    }
}
