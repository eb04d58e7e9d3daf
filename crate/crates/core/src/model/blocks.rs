//! YOLOv5-style building blocks: Conv, Bottleneck, C3 and SPPF.
//!
//! Every convolution is followed by a learnable per-channel affine
//! (scale initialised to 1, shift to 0) and SiLU. There are no batch
//! statistics, so a block's output depends only on its own input.

use rand::Rng;

use super::params::{Bound, ParamId, ParamStore};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// He-normal initialised `[cout, cin, k, k]` kernel.
pub(crate) fn he_kernel<T: Scalar, R: Rng + ?Sized>(cout: usize, cin: usize, k: usize, rng: &mut R) -> Tensor<T> {
    let fan_in = (cin * k * k) as f64;
    Tensor::randn(&[cout, cin, k, k], (2.0 / fan_in).sqrt(), rng)
}

/// Convolution + channel affine + SiLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub w: ParamId,
    pub b: ParamId,
    pub scale: ParamId,
    pub shift: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("{name}: kernel {kernel} must be odd")));
        }
        if cin == 0 || cout == 0 {
            return Err(Error::Config(format!("{name}: zero channels")));
        }
        Ok(Self {
            w: store.add(format!("{name}.w"), he_kernel(cout, cin, kernel, rng))?,
            b: store.add(format!("{name}.b"), Tensor::zeros(&[cout]))?,
            scale: store.add(format!("{name}.scale"), Tensor::full(&[cout], T::one()))?,
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[cout]))?,
            cin,
            cout,
            kernel,
            stride,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.conv2d(x, p.var(self.w), Some(p.var(self.b)), self.stride, self.kernel / 2)?;
        let y = g.channel_affine(y, p.var(self.scale), p.var(self.shift))?;
        Ok(g.silu(y))
    }

    pub fn param_count(cin: usize, cout: usize, kernel: usize) -> usize {
        kernel * kernel * cin * cout + 3 * cout
    }
}

/// 1x1 reduce then 3x3 conv, with a residual add when enabled.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub cv1: ConvBlock,
    pub cv2: ConvBlock,
    pub shortcut: bool,
}

impl Bottleneck {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        shortcut: bool,
    ) -> Result<Self> {
        Ok(Self {
            cv1: ConvBlock::new(store, rng, &format!("{name}.cv1"), cin, cout, 1, 1)?,
            cv2: ConvBlock::new(store, rng, &format!("{name}.cv2"), cout, cout, 3, 1)?,
            // residual only makes sense when shapes agree
            shortcut: shortcut && cin == cout,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = self.cv1.forward(g, p, x)?;
        let y = self.cv2.forward(g, p, y)?;
        if self.shortcut {
            g.add(x, y)
        } else {
            Ok(y)
        }
    }

    pub fn param_count(cin: usize, cout: usize) -> usize {
        ConvBlock::param_count(cin, cout, 1) + ConvBlock::param_count(cout, cout, 3)
    }
}

/// Cross-stage partial block with three convolutions.
///
/// `cv1 -> bottlenecks` and `cv2` run in parallel on the input; their
/// concatenation is merged by `cv3`.
#[derive(Clone, Debug)]
pub struct C3 {
    pub cv1: ConvBlock,
    pub cv2: ConvBlock,
    pub cv3: ConvBlock,
    pub m: Vec<Bottleneck>,
}

impl C3 {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        depth: usize,
        shortcut: bool,
    ) -> Result<Self> {
        let hidden = cout / 2;
        if hidden == 0 {
            return Err(Error::Config(format!("{name}: C3 needs at least 2 output channels")));
        }
        let cv1 = ConvBlock::new(store, rng, &format!("{name}.cv1"), cin, hidden, 1, 1)?;
        let cv2 = ConvBlock::new(store, rng, &format!("{name}.cv2"), cin, hidden, 1, 1)?;
        let m = (0..depth)
            .map(|i| Bottleneck::new(store, rng, &format!("{name}.m.{i}"), hidden, hidden, shortcut))
            .collect::<Result<Vec<_>>>()?;
        let cv3 = ConvBlock::new(store, rng, &format!("{name}.cv3"), 2 * hidden, cout, 1, 1)?;
        Ok(Self { cv1, cv2, cv3, m })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let mut a = self.cv1.forward(g, p, x)?;
        for b in &self.m {
            a = b.forward(g, p, a)?;
        }
        let c = self.cv2.forward(g, p, x)?;
        let cat = g.concat_channels(a, c)?;
        self.cv3.forward(g, p, cat)
    }

    pub fn out_channels(&self) -> usize {
        self.cv3.cout
    }

    pub fn param_count(cin: usize, cout: usize, depth: usize) -> usize {
        let h = cout / 2;
        2 * ConvBlock::param_count(cin, h, 1) + depth * Bottleneck::param_count(h, h) + ConvBlock::param_count(2 * h, cout, 1)
    }
}

/// Fast spatial pyramid pooling: three chained 5x5 max-pools (stride 1, pad 2).
#[derive(Clone, Debug)]
pub struct Sppf {
    pub cv1: ConvBlock,
    pub cv2: ConvBlock,
}

impl Sppf {
    pub const POOL: usize = 5;

    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Result<Self> {
        let hidden = (cin / 2).max(1);
        Ok(Self {
            cv1: ConvBlock::new(store, rng, &format!("{name}.cv1"), cin, hidden, 1, 1)?,
            cv2: ConvBlock::new(store, rng, &format!("{name}.cv2"), 4 * hidden, cout, 1, 1)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let x = self.cv1.forward(g, p, x)?;
        let pad = Self::POOL / 2;
        let y1 = g.maxpool2d(x, Self::POOL, 1, pad)?;
        let y2 = g.maxpool2d(y1, Self::POOL, 1, pad)?;
        let y3 = g.maxpool2d(y2, Self::POOL, 1, pad)?;
        let cat = g.concat_channels(x, y1)?;
        let cat = g.concat_channels(cat, y2)?;
        let cat = g.concat_channels(cat, y3)?;
        self.cv2.forward(g, p, cat)
    }

    pub fn param_count(cin: usize, cout: usize) -> usize {
        let h = (cin / 2).max(1);
        ConvBlock::param_count(cin, h, 1) + ConvBlock::param_count(4 * h, cout, 1)
    }
}
