//! Control descriptions, tokenisation, hashed embeddings and the two text
//! corruptions used by the ablations.
//!
//! A description file holds one block per control:
//!
//! ```text
//! Button
//! Label: "Button"
//! Size: ~64x20 px
//! Position: top-left
//! Shape: wide rectangle
//! Color: black on white
//!
//! ```

pub mod external;
pub mod provider;

use std::fmt::Write as _;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::catalog::ClassCatalog;
use crate::data::scene::Scene;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use external::{load_external_embeddings, write_external_embeddings};
pub use provider::{Corruption, TextProvider};

/// 3x3 grid of canvas regions, row-major.
pub const POSITIONS: [&str; 9] = [
    "top-left",
    "top-center",
    "top-right",
    "middle-left",
    "middle-center",
    "middle-right",
    "bottom-left",
    "bottom-center",
    "bottom-right",
];

pub const DEFAULT_TEXT_DIM: usize = 64;

/// Key of the first (index) hash; the sign hash uses a derived key.
pub const EMBED_SEED: u64 = 0x6d6d_7569_7465_7874;

/// Grid cell phrase index for a normalised centre.
pub fn position_index(cx: f64, cy: f64) -> usize {
    let cell = |v: f64| ((v * 3.0).floor().max(0.0) as usize).min(2);
    3 * cell(cy) + cell(cx)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ControlDescription {
    pub label: String,
    /// Approximate extent in pixels.
    pub size: (u32, u32),
    /// Index into [`POSITIONS`].
    pub position: usize,
    pub shape: String,
    pub color: String,
}

impl ControlDescription {
    pub fn position_phrase(&self) -> &'static str {
        POSITIONS[self.position]
    }

    pub fn write_to(&self, out: &mut String) {
        let _ = write!(
            out,
            "{}\nLabel: \"{}\"\nSize: ~{}x{} px\nPosition: {}\nShape: {}\nColor: {}\n\n",
            self.label,
            self.label,
            self.size.0,
            self.size.1,
            self.position_phrase(),
            self.shape,
            self.color
        );
    }

    pub fn serialize(&self) -> String {
        let mut s = String::new();
        self.write_to(&mut s);
        s
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DescriptionDoc {
    pub blocks: Vec<ControlDescription>,
}

impl DescriptionDoc {
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        for b in &self.blocks {
            b.write_to(&mut s);
        }
        s
    }

    /// Parses the block layout; `path` is only used in error messages.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        let mut blocks = Vec::new();
        let mut i = 0;
        let err = |line: usize, msg: String| Error::format(path, format!("line {}", line + 1), msg);
        while i < lines.len() {
            if lines[i].trim().is_empty() {
                i += 1;
                continue;
            }
            if i + 6 > lines.len() {
                return Err(err(i, "truncated description block".into()));
            }
            let header = lines[i];
            let field = |k: usize, key: &str| -> Result<&str> {
                lines[i + k]
                    .strip_prefix(key)
                    .and_then(|r| r.strip_prefix(": "))
                    .ok_or_else(|| err(i + k, format!("expected `{key}: ...`")))
            };
            let label = field(1, "Label")?
                .strip_prefix('"')
                .and_then(|s| s.strip_suffix('"'))
                .ok_or_else(|| err(i + 1, "label must be quoted".into()))?;
            if label != header {
                return Err(err(i, format!("header `{header}` does not match label `{label}`")));
            }
            let size = field(2, "Size")?;
            let size = size
                .strip_prefix('~')
                .and_then(|s| s.strip_suffix(" px"))
                .and_then(|s| s.split_once('x'))
                .and_then(|(w, h)| Some((w.parse().ok()?, h.parse().ok()?)))
                .ok_or_else(|| err(i + 2, format!("bad size `{size}`")))?;
            let pos = field(3, "Position")?;
            let position = POSITIONS
                .iter()
                .position(|p| *p == pos)
                .ok_or_else(|| err(i + 3, format!("unknown position `{pos}`")))?;
            blocks.push(ControlDescription {
                label: label.to_string(),
                size,
                position,
                shape: field(4, "Shape")?.to_string(),
                color: field(5, "Color")?.to_string(),
            });
            i += 6;
        }
        Ok(Self { blocks })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// One block per control, in scene order.
pub fn generate_description(scene: &Scene, catalog: &ClassCatalog) -> Result<DescriptionDoc> {
    if scene.controls.is_empty() {
        return Err(Error::Contract("cannot describe a scene without controls".into()));
    }
    let blocks = scene
        .controls
        .iter()
        .zip(scene.annotations())
        .map(|(c, a)| {
            let class = &catalog.classes[c.class_id];
            ControlDescription {
                label: class.name.clone(),
                size: (c.bbox.w, c.bbox.h),
                position: position_index(a.cx, a.cy),
                shape: class.glyph.shape_phrase(c.bbox.w, c.bbox.h).to_string(),
                color: c.style.color_phrase(),
            }
        })
        .collect();
    Ok(DescriptionDoc { blocks })
}

/// Lowercased alphanumeric runs, additionally split between digits and letters.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut cur_digit = false;
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            let d = ch.is_numeric();
            if !cur.is_empty() && d != cur_digit {
                out.push(std::mem::take(&mut cur));
            }
            cur_digit = d;
            cur.extend(ch.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn fnv(key: u64, token: &str) -> u64 {
    let mut h = FnvHasher::with_key(key);
    h.write(token.as_bytes());
    h.finish()
}

/// Signed feature hashing, L2-normalised; an empty token list maps to `e0`.
pub fn embed_tokens<S: AsRef<str>>(tokens: &[S], dim: usize) -> Vec<f32> {
    let mut v = vec![0.0f64; dim];
    for t in tokens {
        let t = t.as_ref();
        let idx = (fnv(EMBED_SEED, t) % dim as u64) as usize;
        let sign = if fnv(EMBED_SEED.rotate_left(17) ^ 0x5bd1_e995, t) >> 63 == 0 { 1.0 } else { -1.0 };
        v[idx] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        let mut e = vec![0.0; dim];
        e[0] = 1.0;
        return e;
    }
    v.iter().map(|x| (x / norm) as f32).collect()
}

pub fn embed_block(block: &ControlDescription, dim: usize) -> Vec<f32> {
    embed_tokens(&tokenize(&block.serialize()), dim)
}

/// `[T, dim]` sequence, one row per block; an empty document yields `[e0]`.
pub fn embed_doc(doc: &DescriptionDoc, dim: usize) -> Tensor<f32> {
    if doc.blocks.is_empty() {
        return Tensor::from_fn(&[1, dim], |i| if i == 0 { 1.0 } else { 0.0 });
    }
    let data: Vec<f32> = doc.blocks.iter().flat_map(|b| embed_block(b, dim)).collect();
    Tensor::new(&[doc.blocks.len(), dim], data).expect("rows have the requested width")
}

/// Replaces every label with a different catalog class and every position
/// with a different grid phrase, each chosen uniformly.
pub fn corrupt_mismatch(doc: &DescriptionDoc, catalog: &ClassCatalog, seed: u64) -> Result<DescriptionDoc> {
    if catalog.len() < 2 {
        return Err(Error::Config("mismatch corruption needs at least two classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = doc.clone();
    for b in &mut out.blocks {
        let others: Vec<&str> = catalog.names().filter(|n| *n != b.label).collect();
        b.label = others.choose(&mut rng).expect("at least one other class").to_string();
        let shift = rng.gen_range(1..POSITIONS.len());
        b.position = (b.position + shift) % POSITIONS.len();
    }
    Ok(out)
}

/// Drops every block describing `target`; other blocks are kept verbatim.
pub fn corrupt_partial(doc: &DescriptionDoc, target: &str) -> DescriptionDoc {
    DescriptionDoc {
        blocks: doc.blocks.iter().filter(|b| b.label != target).cloned().collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(label: &str, position: usize) -> ControlDescription {
        ControlDescription {
            label: label.into(),
            size: (64, 20),
            position,
            shape: "wide rectangle".into(),
            color: "black on white".into(),
        }
    }

    #[test]
    fn tokenizer_rules() {
        assert_eq!(tokenize("Label: \"Button\""), ["label", "button"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("~160x40 px"), ["160", "x", "40", "px"]);
        assert_eq!(tokenize("Checkbox_Unchecked_Small"), ["checkbox", "unchecked", "small"]);
    }

    #[test]
    fn grid_cells() {
        assert_eq!(POSITIONS[position_index(0.1, 0.1)], "top-left");
        assert_eq!(POSITIONS[position_index(0.5, 0.5)], "middle-center");
        assert_eq!(POSITIONS[position_index(1.0, 0.9)], "bottom-right");
        assert_eq!(POSITIONS[position_index(0.9, 0.2)], "top-right");
    }

    #[test]
    fn block_layout_round_trips() {
        let doc = DescriptionDoc {
            blocks: vec![block("Button", 0), block("Icon", 8)],
        };
        let text = doc.serialize();
        assert!(text.starts_with("Button\nLabel: \"Button\"\nSize: ~64x20 px\nPosition: top-left\n"));
        assert_eq!(DescriptionDoc::parse(&text, Path::new("t")).unwrap(), doc);
        let bad = text.replace("top-left", "upper-left");
        let e = DescriptionDoc::parse(&bad, Path::new("t.txt")).unwrap_err().to_string();
        assert!(e.contains("t.txt") && e.contains("line 4"), "{e}");
    }

    #[test]
    fn embeddings_are_unit_and_fall_back_to_e0() {
        let v = embed_block(&block("Button", 0), 64);
        let n: f32 = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!(n > 0.0 && n <= 1.0 + 1e-6);
        assert_eq!(v, embed_block(&block("Button", 0), 64));
        let e = embed_tokens::<&str>(&[], 8);
        assert_eq!(e, [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let empty = embed_doc(&DescriptionDoc::default(), 4);
        assert_eq!(empty.shape(), &[1, 4]);
        assert_eq!(empty.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn labels_are_separable_over_full_catalog() {
        let names: Vec<String> = ClassCatalog::full23().names().chain(ClassCatalog::twin12().names()).map(String::from).collect();
        for (i, a) in names.iter().enumerate() {
            for b in &names[i + 1..] {
                if a == b {
                    continue;
                }
                assert_ne!(embed_block(&block(a, 4), 64), embed_block(&block(b, 4), 64), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn mismatch_changes_every_label_and_position() {
        let cat = ClassCatalog::twin12();
        let doc = DescriptionDoc {
            blocks: (0..9).map(|p| block(cat.name_of(p % cat.len()), p)).collect(),
        };
        let c = corrupt_mismatch(&doc, &cat, 3).unwrap();
        assert_eq!(c, corrupt_mismatch(&doc, &cat, 3).unwrap());
        for (o, n) in doc.blocks.iter().zip(&c.blocks) {
            assert_ne!(o.label, n.label);
            assert_ne!(o.position, n.position);
            assert!(cat.id_of(&n.label).is_some());
        }
        let single = ClassCatalog {
            classes: cat.classes[..1].to_vec(),
            twin_pairs: vec![],
            name: "one".into(),
        };
        assert!(corrupt_mismatch(&doc, &single, 0).is_err());
    }

    #[test]
    fn partial_removes_only_target_blocks() {
        let doc = DescriptionDoc {
            blocks: vec![block("Button", 0), block("Icon", 1)],
        };
        let p = corrupt_partial(&doc, "Button");
        assert_eq!(p.blocks, vec![block("Icon", 1)]);
        assert!(!tokenize(&p.serialize()).contains(&"button".to_string()));
        assert_eq!(corrupt_partial(&doc, "Table"), doc);
        let only = DescriptionDoc {
            blocks: vec![block("Button", 0)],
        };
        let e = embed_doc(&corrupt_partial(&only, "Button"), 64);
        assert_eq!(e.shape(), &[1, 64]);
        assert_eq!(e.data()[0], 1.0);
    }
}
