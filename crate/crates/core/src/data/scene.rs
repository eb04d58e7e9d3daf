use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::catalog::ClassCatalog;

pub const MIN_CONTROLS: usize = 1;
pub const MAX_CONTROLS: usize = 8;
pub const MAX_ATTEMPTS: usize = 1000;
/// Largest IoU allowed between two controls of one scene.
pub const MAX_OVERLAP: f64 = 0.1;

/// Named fill colours used for control bodies.
pub const FILLS: [(&str, [u8; 3]); 8] = [
    ("white", [255, 255, 255]),
    ("light gray", [222, 222, 222]),
    ("light blue", [196, 218, 248]),
    ("blue", [58, 108, 200]),
    ("green", [68, 158, 92]),
    ("orange", [238, 148, 52]),
    ("red", [206, 70, 60]),
    ("yellow", [244, 214, 92]),
];

/// Named ink colours used for borders, text bars and marks.
pub const INKS: [(&str, [u8; 3]); 4] = [
    ("black", [20, 20, 20]),
    ("dark gray", [84, 84, 84]),
    ("navy", [30, 40, 112]),
    ("white", [250, 250, 250]),
];

pub const BACKGROUNDS: [[u8; 3]; 4] = [[246, 246, 246], [236, 240, 246], [250, 248, 240], [232, 232, 232]];

/// Axis-aligned integer box in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl PixelBox {
    pub fn x2(&self) -> u32 {
        self.x + self.w
    }

    pub fn y2(&self) -> u32 {
        self.y + self.h
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn iou(&self, o: &PixelBox) -> f64 {
        let iw = self.x2().min(o.x2()).saturating_sub(self.x.max(o.x)) as u64;
        let ih = self.y2().min(o.y2()).saturating_sub(self.y.max(o.y)) as u64;
        let inter = iw * ih;
        let union = self.area() + o.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn as_xyxy(&self) -> [f64; 4] {
        [self.x as f64, self.y as f64, self.x2() as f64, self.y2() as f64]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Style {
    /// Index into [`FILLS`].
    pub fill: usize,
    /// Index into [`INKS`].
    pub ink: usize,
    /// Small per-glyph variation (line count, mark placement).
    pub variant: u8,
}

impl Style {
    pub fn color_phrase(&self) -> String {
        format!("{} on {}", INKS[self.ink].0, FILLS[self.fill].0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlSpec {
    pub class_id: usize,
    pub bbox: PixelBox,
    pub style: Style,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub canvas: u32,
    pub background: usize,
    pub controls: Vec<ControlSpec>,
    pub seed: u64,
}

/// Normalised YOLO-style label: class and centre/size in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Annotation {
    pub fn from_box(class_id: usize, b: &PixelBox, canvas: u32) -> Self {
        let s = canvas as f64;
        Self {
            class_id,
            cx: (b.x as f64 + b.w as f64 / 2.0) / s,
            cy: (b.y as f64 + b.h as f64 / 2.0) / s,
            w: b.w as f64 / s,
            h: b.h as f64 / s,
        }
    }

    /// `[x1, y1, x2, y2]` in pixels on a `canvas`-sized image.
    pub fn xyxy(&self, canvas: f64) -> [f64; 4] {
        let (cx, cy, w, h) = (self.cx * canvas, self.cy * canvas, self.w * canvas, self.h * canvas);
        [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
    }
}

impl Scene {
    pub fn annotations(&self) -> Vec<Annotation> {
        self.controls
            .iter()
            .map(|c| Annotation::from_box(c.class_id, &c.bbox, self.canvas))
            .collect()
    }
}

/// Box sides scale with the canvas; ranges are defined for 256 pixels.
fn scaled(v: u32, canvas: u32) -> u32 {
    ((v as u64 * canvas as u64 + 128) / 256).max(2) as u32
}

/// Samples a scene with 1 to 8 non-overlapping controls.
///
/// If the chosen number of controls cannot be placed within
/// [`MAX_ATTEMPTS`] draws, placement restarts with one control fewer.
/// A single control always fits, so this never fails.
pub fn sample_scene<R: Rng + ?Sized>(catalog: &ClassCatalog, canvas: u32, seed: u64, rng: &mut R) -> Scene {
    let weights = WeightedIndex::new(catalog.classes.iter().map(|c| c.weight)).expect("catalog weights are positive");
    let background = rng.gen_range(0..BACKGROUNDS.len());
    let mut n = rng.gen_range(MIN_CONTROLS..=MAX_CONTROLS);
    loop {
        let mut controls: Vec<ControlSpec> = Vec::with_capacity(n);
        let mut attempts = 0;
        while controls.len() < n && attempts < MAX_ATTEMPTS {
            attempts += 1;
            let class_id = weights.sample(rng);
            let (wr, hr) = catalog.classes[class_id].glyph.size_range();
            let w = scaled(rng.gen_range(wr[0]..=wr[1]), canvas).min(canvas);
            let h = scaled(rng.gen_range(hr[0]..=hr[1]), canvas).min(canvas);
            let bbox = PixelBox {
                x: rng.gen_range(0..=canvas - w),
                y: rng.gen_range(0..=canvas - h),
                w,
                h,
            };
            if controls.iter().any(|c| c.bbox.iou(&bbox) > MAX_OVERLAP) {
                continue;
            }
            let style = Style {
                fill: rng.gen_range(0..FILLS.len()),
                ink: rng.gen_range(0..INKS.len()),
                variant: rng.gen_range(0..4),
            };
            controls.push(ControlSpec { class_id, bbox, style });
        }
        if controls.len() == n || n == MIN_CONTROLS {
            return Scene {
                canvas,
                background,
                controls,
                seed,
            };
        }
        n -= 1;
    }
}
