//! Backbone, PANet neck and anchor head, with optional fusion modules.
//!
//! Layout for channel schedule `[c0, c1, c2, c3]` and input side `N`:
//!
//! ```text
//! stem   Conv 3->c0/2 s2                          N/2
//! stage0 Conv s2 -> c0, C3(c0)                    N/4
//! stage1 Conv s2 -> c1, C3(c1)      = P3          N/8
//! stage2 Conv s2 -> c2, C3(c2)      = P4          N/16
//! stage3 Conv s2 -> c3, C3(c3), SPPF = P5         N/32
//!
//! lat5 = Conv1x1(P5) -> c2;  up, cat P4  -> neck C3-1 (c2)
//! lat4 = Conv1x1(.)  -> c1;  up, cat P3  -> neck C3-2 (c1)  -> head P3
//! Conv3x3 s2, cat lat4                   -> neck C3-3 (c2)  -> head P4
//! Conv3x3 s2, cat lat5                   -> neck C3-4 (c3)  -> head P5
//! ```
//!
//! Parameter names start with their group: `backbone.`, `neck.`, `head.`,
//! or `xattn.<i>.` for fusion modules.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::blocks::{ConvBlock, Sppf, C3};
use super::config::{DetectorConfig, STRIDES};
use super::params::{Bound, ParamId, ParamStore};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::fusion::{AttentionParams, AttentionState, FusionModule, FusionStrategy};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Location where a fusion module may be inserted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InsertionPoint {
    NeckC3First,
    NeckC3Second,
    NeckC3Third,
    BackboneC3Fourth,
    BackboneC3Third,
}

/// Insertion points in priority order; `xattn_count` takes a prefix.
///
/// The first three follow every neck C3 except the last one; the fourth and
/// fifth extend toward the backbone.
pub const INSERTION_ORDER: [InsertionPoint; 5] = [
    InsertionPoint::NeckC3First,
    InsertionPoint::NeckC3Second,
    InsertionPoint::NeckC3Third,
    InsertionPoint::BackboneC3Fourth,
    InsertionPoint::BackboneC3Third,
];

impl InsertionPoint {
    pub fn channels(self, ch: &[usize]) -> usize {
        match self {
            InsertionPoint::NeckC3First | InsertionPoint::NeckC3Third | InsertionPoint::BackboneC3Third => ch[2],
            InsertionPoint::NeckC3Second => ch[1],
            InsertionPoint::BackboneC3Fourth => ch[3],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            InsertionPoint::NeckC3First => "neck-C3-1",
            InsertionPoint::NeckC3Second => "neck-C3-2",
            InsertionPoint::NeckC3Third => "neck-C3-3",
            InsertionPoint::BackboneC3Fourth => "backbone-C3-4-output",
            InsertionPoint::BackboneC3Third => "backbone-C3-3-output",
        }
    }
}

#[derive(Clone, Debug)]
struct Head {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Neck {
    lat5: ConvBlock,
    c3_1: C3,
    lat4: ConvBlock,
    c3_2: C3,
    down3: ConvBlock,
    c3_3: C3,
    down4: ConvBlock,
    c3_4: C3,
}

/// Raw head maps `[A*(5+C), S, S]` for strides 8, 16, 32, plus the
/// attention state of each fusion module in insertion order.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub maps: [Var; 3],
    pub attention: Vec<AttentionState>,
}

/// Parameter totals per group.
#[derive(Clone, Debug, Default, PartialEq, Eq, serde::Serialize)]
pub struct ParamCounts {
    pub backbone: usize,
    pub neck: usize,
    pub head: usize,
    pub fusion: usize,
    pub total: usize,
}

#[derive(Clone, Debug)]
pub struct DetectorModel<T> {
    cfg: DetectorConfig,
    params: ParamStore<T>,
    stem: ConvBlock,
    stages: Vec<(ConvBlock, C3)>,
    sppf: Sppf,
    neck: Neck,
    heads: Vec<Head>,
    fusion: Vec<(InsertionPoint, FusionModule)>,
    shared_loaded: bool,
}

impl<T: Scalar> DetectorModel<T> {
    /// Builds and initialises a model.
    ///
    /// Shared weights are drawn from a stream seeded by `cfg.seed` alone, so a
    /// fusion model and a baseline with the same seed start from identical
    /// shared weights. Fusion modules draw from a separate stream.
    pub fn build(cfg: &DetectorConfig) -> Result<Self> {
        cfg.validate()?;
        let ch = &cfg.channels;
        let mut store = ParamStore::new();
        let rng = &mut ChaCha8Rng::seed_from_u64(cfg.seed);
        let depth = cfg.c3_depth;

        let stem = ConvBlock::new(&mut store, rng, "backbone.stem", 3, ch[0] / 2, 3, 2)?;
        let mut stages = Vec::with_capacity(4);
        let mut cin = ch[0] / 2;
        for (i, &c) in ch.iter().enumerate() {
            let down = ConvBlock::new(&mut store, rng, &format!("backbone.stage{i}.down"), cin, c, 3, 2)?;
            let c3 = C3::new(&mut store, rng, &format!("backbone.stage{i}.c3"), c, c, depth, true)?;
            stages.push((down, c3));
            cin = c;
        }
        let sppf = Sppf::new(&mut store, rng, "backbone.sppf", ch[3], ch[3])?;

        let neck = Neck {
            lat5: ConvBlock::new(&mut store, rng, "neck.lat5", ch[3], ch[2], 1, 1)?,
            c3_1: C3::new(&mut store, rng, "neck.c3_1", 2 * ch[2], ch[2], depth, false)?,
            lat4: ConvBlock::new(&mut store, rng, "neck.lat4", ch[2], ch[1], 1, 1)?,
            c3_2: C3::new(&mut store, rng, "neck.c3_2", 2 * ch[1], ch[1], depth, false)?,
            down3: ConvBlock::new(&mut store, rng, "neck.down3", ch[1], ch[1], 3, 2)?,
            c3_3: C3::new(&mut store, rng, "neck.c3_3", 2 * ch[1], ch[2], depth, false)?,
            down4: ConvBlock::new(&mut store, rng, "neck.down4", ch[2], ch[2], 3, 2)?,
            c3_4: C3::new(&mut store, rng, "neck.c3_4", 2 * ch[2], ch[3], depth, false)?,
        };

        let head_in = [ch[1], ch[2], ch[3]];
        let a = cfg.anchors_per_scale();
        let nc = cfg.num_classes;
        let mut heads = Vec::with_capacity(3);
        for (s, (&cin, name)) in head_in.iter().zip(["p3", "p4", "p5"]).enumerate() {
            let w = Tensor::randn(&[cfg.head_channels(), cin, 1, 1], 0.01, rng);
            // objectness prior of ~8 objects per 640x640 image, class prior 0.6/(C-0.99)
            let cells = (cfg.input_size / STRIDES[s]).pow(2) as f64;
            let obj = (8.0 / cells * (cfg.input_size as f64 / 640.0).powi(2)).ln();
            let cls = (0.6 / (nc as f64 - 0.99).max(0.01)).ln();
            let b = Tensor::from_fn(&[cfg.head_channels()], |i| {
                T::from_f64_lossy(match i % (5 + nc) {
                    4 => obj,
                    k if k >= 5 => cls,
                    _ => 0.0,
                })
            });
            heads.push(Head {
                w: store.add(format!("head.{name}.w"), w)?,
                b: store.add(format!("head.{name}.b"), b)?,
            });
        }
        debug_assert_eq!(heads.len() * a * (5 + nc), 3 * cfg.head_channels());

        let mut frng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7861_7474_6e00_0000);
        let mut fusion = Vec::new();
        for (i, &point) in INSERTION_ORDER.iter().take(cfg.xattn_count).enumerate() {
            let c = point.channels(ch);
            let attn = AttentionParams::init(c, cfg.text_dim, c, &mut frng);
            let strategy = FusionStrategy::init(cfg.fusion, c, &mut frng)
                .ok_or_else(|| Error::Config("fusion modules require a merge strategy".into()))?;
            fusion.push((point, FusionModule::register(&mut store, i, attn, strategy)?));
        }

        Ok(Self {
            cfg: cfg.clone(),
            params: store,
            stem,
            stages,
            sppf,
            neck,
            heads,
            fusion,
            shared_loaded: false,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn has_fusion(&self) -> bool {
        !self.fusion.is_empty()
    }

    pub fn fusion_modules(&self) -> impl Iterator<Item = (InsertionPoint, &FusionModule)> {
        self.fusion.iter().map(|(p, m)| (*p, m))
    }

    /// Sets every fusion module to its identity configuration.
    pub fn set_fusion_identity(&mut self) {
        for (_, m) in &self.fusion {
            m.set_identity(&mut self.params);
        }
    }

    /// Copies every parameter whose name and shape exist in `other`.
    ///
    /// Returns `(copied, kept)` name lists; `kept` are parameters of `self`
    /// left at their current (initial) values.
    pub fn load_shared_from(&mut self, other: &ParamStore<T>) -> (Vec<String>, Vec<String>) {
        let mut copied = Vec::new();
        let mut kept = Vec::new();
        for (name, t) in self.params.iter_mut() {
            match other.by_name(name) {
                Some(src) if src.shape() == t.shape() => {
                    *t = src.clone();
                    copied.push(name.to_string());
                }
                _ => kept.push(name.to_string()),
            }
        }
        self.shared_loaded |= !copied.is_empty();
        (copied, kept)
    }

    pub(crate) fn mark_loaded(&mut self) {
        self.shared_loaded = true;
    }

    /// Whether weights were loaded from another store (a baseline or a checkpoint).
    pub fn initialized_from_store(&self) -> bool {
        self.shared_loaded
    }

    pub fn count_parameters(&self) -> ParamCounts {
        let p = &self.params;
        ParamCounts {
            backbone: p.count_group("backbone"),
            neck: p.count_group("neck"),
            head: p.count_group("head"),
            fusion: p.count_group("xattn"),
            total: p.count(),
        }
    }

    /// Records a forward pass. `text` is the `[T, D]` embedding sequence and
    /// must be present exactly when the model has fusion modules.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, image: Var, text: Option<Var>) -> Result<ForwardOutput> {
        match (self.has_fusion(), text.is_some()) {
            (true, false) => return Err(Error::Usage("fusion model requires a text embedding sequence".into())),
            (false, true) => return Err(Error::Usage("image-only model was given a text embedding sequence".into())),
            _ => {}
        }
        if let Some(t) = text {
            let s = g.shape(t);
            if s.len() != 2 || s[1] != self.cfg.text_dim {
                return Err(Error::shape("text embedding", s, &[0, self.cfg.text_dim]));
            }
        }
        let n = self.cfg.input_size;
        if g.shape(image) != [3, n, n] {
            return Err(Error::shape("image", g.shape(image), &[3, n, n]));
        }

        let mut attention = Vec::new();
        let mut fuse = |g: &mut Graph<T>, point: InsertionPoint, x: Var| -> Result<Var> {
            match (self.fusion.iter().find(|(q, _)| *q == point), text) {
                (Some((_, m)), Some(t)) => {
                    let (y, st) = m.forward(g, p, x, t, self.cfg.scale_scores)?;
                    attention.push((m.index, st));
                    Ok(y)
                }
                _ => Ok(x),
            }
        };

        let mut x = self.stem.forward(g, p, image)?;
        let mut feats = Vec::with_capacity(4);
        for (i, (down, c3)) in self.stages.iter().enumerate() {
            x = down.forward(g, p, x)?;
            x = c3.forward(g, p, x)?;
            match i {
                2 => x = fuse(g, InsertionPoint::BackboneC3Third, x)?,
                3 => x = fuse(g, InsertionPoint::BackboneC3Fourth, x)?,
                _ => {}
            }
            feats.push(x);
        }
        let p5 = self.sppf.forward(g, p, feats[3])?;
        let (p3, p4) = (feats[1], feats[2]);

        let nk = &self.neck;
        let l5 = nk.lat5.forward(g, p, p5)?;
        let u = g.upsample_nearest2x(l5)?;
        let u = g.concat_channels(u, p4)?;
        let n1 = nk.c3_1.forward(g, p, u)?;
        let n1 = fuse(g, InsertionPoint::NeckC3First, n1)?;

        let l4 = nk.lat4.forward(g, p, n1)?;
        let u = g.upsample_nearest2x(l4)?;
        let u = g.concat_channels(u, p3)?;
        let out3 = nk.c3_2.forward(g, p, u)?;
        let out3 = fuse(g, InsertionPoint::NeckC3Second, out3)?;

        let d = nk.down3.forward(g, p, out3)?;
        let d = g.concat_channels(d, l4)?;
        let out4 = nk.c3_3.forward(g, p, d)?;
        let out4 = fuse(g, InsertionPoint::NeckC3Third, out4)?;

        let d = nk.down4.forward(g, p, out4)?;
        let d = g.concat_channels(d, l5)?;
        let out5 = nk.c3_4.forward(g, p, d)?;

        let mut maps = [out3; 3];
        for (s, (feat, head)) in [out3, out4, out5].into_iter().zip(&self.heads).enumerate() {
            maps[s] = g.conv2d(feat, p.var(head.w), Some(p.var(head.b)), 1, 0)?;
        }
        attention.sort_by_key(|(i, _)| *i);
        Ok(ForwardOutput {
            maps,
            attention: attention.into_iter().map(|(_, s)| s).collect(),
        })
    }

    /// Inference convenience: returns the three head maps as tensors.
    pub fn predict(&self, image: &Tensor<T>, text: Option<&Tensor<T>>) -> Result<[Tensor<T>; 3]> {
        let mut g = Graph::inference();
        let p = self.params.bind(&mut g);
        let img = g.constant(image.clone());
        let txt = text.map(|t| g.constant(t.clone()));
        let out = self.forward(&mut g, &p, img, txt)?;
        Ok(out.maps.map(|v| g.value(v).clone()))
    }
}

/// Analytic parameter count of the image-only part of a detector.
pub fn baseline_param_formula(cfg: &DetectorConfig) -> usize {
    let ch = &cfg.channels;
    let d = cfg.c3_depth;
    let mut n = ConvBlock::param_count(3, ch[0] / 2, 3);
    let mut cin = ch[0] / 2;
    for &c in ch {
        n += ConvBlock::param_count(cin, c, 3) + C3::param_count(c, c, d);
        cin = c;
    }
    n += Sppf::param_count(ch[3], ch[3]);
    n += ConvBlock::param_count(ch[3], ch[2], 1) + C3::param_count(2 * ch[2], ch[2], d);
    n += ConvBlock::param_count(ch[2], ch[1], 1) + C3::param_count(2 * ch[1], ch[1], d);
    n += ConvBlock::param_count(ch[1], ch[1], 3) + C3::param_count(2 * ch[1], ch[2], d);
    n += ConvBlock::param_count(ch[2], ch[2], 3) + C3::param_count(2 * ch[2], ch[3], d);
    let hc = cfg.head_channels();
    n += [ch[1], ch[2], ch[3]].iter().map(|&c| hc * c + hc).sum::<usize>();
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionKind;

    fn small() -> DetectorConfig {
        DetectorConfig {
            input_size: 64,
            channels: vec![4, 8, 8, 16],
            ..Default::default()
        }
    }

    #[test]
    fn baseline_has_no_fusion_names() {
        let m = DetectorModel::<f32>::build(&small()).unwrap();
        assert!(m.params().names().all(|n| !n.starts_with("xattn")));
        assert_eq!(m.count_parameters().fusion, 0);
    }

    #[test]
    fn usage_errors_for_text_presence() {
        let base = DetectorModel::<f32>::build(&small()).unwrap();
        let fused = DetectorModel::<f32>::build(&small().with_fusion(FusionKind::Add, 3)).unwrap();
        let mut g = Graph::inference();
        let pb = base.params().bind(&mut g);
        let pf = fused.params().bind(&mut g);
        let img = g.constant(Tensor::zeros(&[3, 64, 64]));
        let txt = g.constant(Tensor::full(&[2, 64], 0.125));
        assert!(matches!(base.forward(&mut g, &pb, img, Some(txt)), Err(Error::Usage(_))));
        assert!(matches!(fused.forward(&mut g, &pf, img, None), Err(Error::Usage(_))));
        let out = fused.forward(&mut g, &pf, img, Some(txt)).unwrap();
        assert_eq!(out.attention.len(), 3);
    }

    #[test]
    fn wrong_image_shape_is_rejected() {
        let m = DetectorModel::<f32>::build(&small()).unwrap();
        assert!(m.predict(&Tensor::zeros(&[3, 32, 32]), None).is_err());
    }
}
