//! Procedural glyph renderer.
//!
//! Drawing depends only on the glyph family, box and style, never on the
//! class id, so classes sharing a glyph are pixel-identical. Every glyph
//! stays inside its box; pixels outside all boxes keep the background.

use super::catalog::{ClassCatalog, Glyph};
use super::image::RgbImage;
use super::scene::{PixelBox, Scene, Style, BACKGROUNDS, FILLS, INKS};

struct Pen<'a> {
    img: &'a mut RgbImage,
    clip: PixelBox,
}

impl Pen<'_> {
    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        let b = self.clip;
        if x >= b.x as i64 && y >= b.y as i64 && x < b.x2() as i64 && y < b.y2() as i64 {
            self.img.put(x, y, c);
        }
    }

    fn rect(&mut self, x: i64, y: i64, w: i64, h: i64, c: [u8; 3]) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.put(xx, yy, c);
            }
        }
    }

    fn frame(&mut self, x: i64, y: i64, w: i64, h: i64, t: i64, c: [u8; 3]) {
        self.rect(x, y, w, t, c);
        self.rect(x, y + h - t, w, t, c);
        self.rect(x, y, t, h, c);
        self.rect(x + w - t, y, t, h, c);
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        // Bresenham
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.put(x, y, c);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    /// Filled disk (`ring = false`) or 2-px ring, centre in doubled coordinates.
    fn disk(&mut self, cx2: i64, cy2: i64, r2: i64, ring: bool, c: [u8; 3]) {
        let (x0, y0) = ((cx2 - r2) / 2 - 1, (cy2 - r2) / 2 - 1);
        for y in y0..=(cy2 + r2) / 2 + 1 {
            for x in x0..=(cx2 + r2) / 2 + 1 {
                let (dx, dy) = (2 * x + 1 - cx2, 2 * y + 1 - cy2);
                let d = dx * dx + dy * dy;
                let inner = (r2 - 4).max(0);
                if d <= r2 * r2 && (!ring || d >= inner * inner) {
                    self.put(x, y, c);
                }
            }
        }
    }
}

/// Horizontal "text" bars filling `w` at rows starting from `y`.
fn text_rows(p: &mut Pen, x: i64, y: i64, w: i64, h: i64, variant: u8, c: [u8; 3]) {
    let rows = (h / 7).max(1);
    for r in 0..rows {
        let len = w * (10 - ((r + variant as i64) % 4)) / 10;
        p.rect(x, y + r * 7 + (h - rows * 7).max(0) / 2 + 2, len.max(2), 3, c);
    }
}

fn draw_glyph(img: &mut RgbImage, glyph: Glyph, b: PixelBox, st: Style) {
    let fill = FILLS[st.fill].1;
    // keep marks visible on their body
    let ink = if INKS[st.ink].1 == fill || (st.ink == 3 && st.fill <= 2) {
        INKS[0].1
    } else {
        INKS[st.ink].1
    };
    let v = st.variant;
    let mut p = Pen { img, clip: b };
    let (x, y, w, h) = (b.x as i64, b.y as i64, b.w as i64, b.h as i64);
    match glyph {
        Glyph::Button => {
            p.rect(x, y, w, h, fill);
            p.frame(x, y, w, h, 1, ink);
            let tw = w * (4 + v as i64 % 3) / 10;
            p.rect(x + (w - tw) / 2, y + h / 2 - 1, tw, 3, ink);
        }
        Glyph::Checkbox { ticked } => {
            p.rect(x, y, w, h, FILLS[0].1);
            p.frame(x, y, w, h, 2, ink);
            if ticked {
                let (a, bb, c) = ((x + 3, y + h / 2), (x + w / 2 - 1, y + h - 4), (x + w - 4, y + 3));
                for o in 0..2 {
                    p.line((a.0, a.1 + o), (bb.0, bb.1 + o), ink);
                    p.line((bb.0, bb.1 + o), (c.0, c.1 + o), ink);
                }
            }
        }
        Glyph::Radio { dot } => {
            let (cx2, cy2, r2) = (2 * x + w, 2 * y + h, w.min(h));
            p.disk(cx2, cy2, r2, false, FILLS[0].1);
            p.disk(cx2, cy2, r2, true, ink);
            if dot {
                p.disk(cx2, cy2, r2 / 2, false, ink);
            }
        }
        Glyph::Icon => {
            p.rect(x, y, w, h, fill);
            let r2 = w.min(h) * 2 / 3;
            if v % 2 == 0 {
                p.disk(2 * x + w, 2 * y + h, r2, false, ink);
            } else {
                let s = r2 / 2;
                p.rect(x + (w - s) / 2, y + (h - s) / 2, s, s, ink);
            }
        }
        Glyph::Dropdown => {
            p.rect(x, y, w, h, fill);
            p.frame(x, y, w, h, 1, ink);
            text_rows(&mut p, x + 4, y, w / 2, h, v, ink);
            let (tx, ty, s) = (x + w - h / 2 - 4, y + h / 2 - 2, h / 3);
            for r in 0..s {
                p.rect(tx - s + r, ty + r, 2 * (s - r), 1, ink);
            }
        }
        Glyph::Input | Glyph::DateArea => {
            p.rect(x, y, w, h, FILLS[0].1);
            p.frame(x, y, w, h, 1, ink);
            p.rect(x + 4, y + 3, 1, h - 6, ink);
            if v % 2 == 1 {
                p.rect(x + 8, y + h / 2 - 1, w / 3, 3, FILLS[1].1);
            }
            if glyph == Glyph::DateArea {
                let s = h - 6;
                p.rect(x + w - s - 3, y + 3, s, s, fill);
                p.frame(x + w - s - 3, y + 3, s, s, 1, ink);
                p.rect(x + w - s - 3, y + 3, s, 3, ink);
            }
        }
        Glyph::Text | Glyph::TextareaLabel => text_rows(&mut p, x, y, w, h, v, ink),
        Glyph::Image => {
            p.rect(x, y, w, h, fill);
            let base = y + h - 1;
            for i in 0..w {
                let peak = h * 3 / 5 - (i - w / 2).abs() * h / w;
                if peak > 0 {
                    p.rect(x + i, base - peak, 1, peak + 1, ink);
                }
            }
            p.disk(2 * x + w * 3 / 2, 2 * y + h / 2, h / 4 + 2, false, FILLS[7].1);
        }
        Glyph::HorizontalAxis => {
            p.rect(x, y + h / 2 - 1, w, 2, ink);
            for t in (0..w).step_by(10 + v as usize * 2) {
                p.rect(x + t, y, 1, h, ink);
            }
        }
        Glyph::VerticalAxis => {
            p.rect(x + w / 2 - 1, y, 2, h, ink);
            for t in (0..h).step_by(10 + v as usize * 2) {
                p.rect(x, y + t, w, 1, ink);
            }
        }
        Glyph::Menu | Glyph::TabBar => {
            p.rect(x, y, w, h, fill);
            let items = 3 + v as i64 % 3;
            let iw = w / items;
            for i in 0..items {
                if glyph == Glyph::TabBar {
                    p.frame(x + i * iw, y, iw, h, 1, ink);
                    if i == 0 {
                        p.rect(x + 1, y + h - 3, iw - 2, 2, ink);
                    }
                }
                p.rect(x + i * iw + iw / 5, y + h / 2 - 1, iw * 3 / 5, 3, ink);
            }
        }
        Glyph::List | Glyph::Tree | Glyph::DescriptionList | Glyph::Legend => {
            if glyph != Glyph::Legend {
                p.rect(x, y, w, h, FILLS[0].1);
                p.frame(x, y, w, h, 1, ink);
            }
            let rows = (h / 10).max(1);
            for r in 0..rows {
                let ry = y + 3 + r * 10;
                let indent = match glyph {
                    Glyph::Tree => 4 + 6 * ((r + v as i64) % 3),
                    _ => 4,
                };
                match glyph {
                    Glyph::List => p.rect(x + 1, ry + 7, w - 2, 1, FILLS[1].1),
                    Glyph::Tree => p.frame(x + indent - 4, ry, 4, 4, 1, ink),
                    Glyph::DescriptionList => p.disk(2 * x + 8, 2 * ry + 3, 3, false, ink),
                    _ => p.rect(x + 1, ry, 6, 6, FILLS[(r as usize + st.fill) % FILLS.len()].1),
                }
                p.rect(x + indent + 6, ry + 1, (w - indent - 10) * (3 + (r + v as i64) % 3) / 5, 3, ink);
            }
        }
        Glyph::Table => {
            p.rect(x, y, w, h, FILLS[0].1);
            p.rect(x, y, w, 8, fill);
            p.frame(x, y, w, h, 1, ink);
            for cy in (y + 8..y + h).step_by(9) {
                p.rect(x, cy, w, 1, ink);
            }
            let cols = 2 + v as i64 % 3;
            for c in 1..cols {
                p.rect(x + c * w / cols, y, 1, h, ink);
            }
        }
        Glyph::Chart | Glyph::Graph => {
            p.rect(x + 2, y, 2, h - 2, ink);
            p.rect(x + 2, y + h - 4, w - 2, 2, ink);
            let n = 4 + v as i64;
            let step = (w - 8) / n;
            let height = |i: i64| (h - 8) * (2 + (i * 7 + v as i64 * 3) % 6) / 8;
            for i in 0..n {
                if glyph == Glyph::Chart {
                    let bh = height(i);
                    p.rect(x + 7 + i * step, y + h - 4 - bh, (step - 2).max(1), bh, fill);
                } else if i + 1 < n {
                    let a = (x + 7 + i * step, y + h - 5 - height(i));
                    let c = (x + 7 + (i + 1) * step, y + h - 5 - height(i + 1));
                    p.line(a, c, ink);
                    p.line((a.0, a.1 + 1), (c.0, c.1 + 1), fill);
                }
            }
        }
    }
}

/// Renders a scene to an RGB image.
pub fn render_scene(scene: &Scene, catalog: &ClassCatalog) -> RgbImage {
    let mut img = RgbImage::filled(scene.canvas, scene.canvas, BACKGROUNDS[scene.background]);
    for c in &scene.controls {
        draw_glyph(&mut img, catalog.classes[c.class_id].glyph, c.bbox, c.style);
    }
    img
}
