//! Cross-attention fusion of text embeddings into image feature maps.
//!
//! Image features `x[C,H,W]` become `H*W` spatial tokens of width `C`
//! (row `r*W + c` holds position `(r, c)`). Queries come from the image
//! tokens, keys and values from the text sequence `[T,D]`:
//!
//! ```text
//! Q = x Wq          [HW,d]
//! K = text Wk       [T,d]
//! V = text Wv       [T,C]
//! weights = softmax_rows(Q K^T / sqrt(d))
//! attended = weights V
//! ```
//!
//! The attended tokens are merged back into the image tokens by one of
//! three strategies, and the result is folded back into `[C,H,W]`.
//! Every fusion module therefore preserves its input shape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which merge a fusion model uses; `None` is the image-only detector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    None,
    Add,
    Wsum,
    Conv,
}

impl FusionKind {
    pub const ALL: [FusionKind; 4] = [FusionKind::None, FusionKind::Add, FusionKind::Wsum, FusionKind::Conv];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionKind::None => "none",
            FusionKind::Add => "add",
            FusionKind::Wsum => "wsum",
            FusionKind::Conv => "conv",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Usage(format!("unknown fusion `{s}` (expected none|add|wsum|conv)")))
    }
}

impl std::fmt::Display for FusionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Query/key/value projections. `wv` maps text to the image channel count.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
}

impl<T: Scalar> AttentionParams<T> {
    /// Fan-in scaled normal init with attention width `d`.
    pub fn init<R: Rng + ?Sized>(channels: usize, text_dim: usize, d: usize, rng: &mut R) -> Self {
        Self {
            wq: Tensor::randn(&[channels, d], 1.0 / (channels as f64).sqrt(), rng),
            wk: Tensor::randn(&[text_dim, d], 1.0 / (text_dim as f64).sqrt(), rng),
            wv: Tensor::randn(&[text_dim, channels], 1.0 / (text_dim as f64).sqrt(), rng),
        }
    }

    pub fn attention_dim(&self) -> usize {
        self.wq.shape()[1]
    }
}

/// Merge strategy with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum FusionStrategy<T> {
    ElementwiseAdd,
    /// `alpha * attended + beta * image`, both learnable.
    WeightedSum { alpha: T, beta: T },
    /// 1x1 convolution over `[attended || image]`; kernel `[C, 2C, 1, 1]`.
    ConvFusion { kernel: Tensor<T>, bias: Tensor<T> },
}

impl<T: Scalar> FusionStrategy<T> {
    /// Starting point for fine-tuning: sum weights of one, passthrough kernel plus noise.
    pub fn init<R: Rng + ?Sized>(kind: FusionKind, channels: usize, rng: &mut R) -> Option<Self> {
        match kind {
            FusionKind::None => None,
            FusionKind::Add => Some(Self::ElementwiseAdd),
            FusionKind::Wsum => Some(Self::WeightedSum {
                alpha: T::one(),
                beta: T::one(),
            }),
            FusionKind::Conv => {
                let noise = Tensor::<T>::randn(&[channels, 2 * channels, 1, 1], 1e-3, rng);
                let mut kernel = passthrough_kernel::<T>(channels);
                for (k, n) in kernel.data_mut().iter_mut().zip(noise.data()) {
                    *k += *n;
                }
                Some(Self::ConvFusion {
                    kernel,
                    bias: Tensor::zeros(&[channels]),
                })
            }
        }
    }

    pub fn kind(&self) -> FusionKind {
        match self {
            Self::ElementwiseAdd => FusionKind::Add,
            Self::WeightedSum { .. } => FusionKind::Wsum,
            Self::ConvFusion { .. } => FusionKind::Conv,
        }
    }
}

/// `[0 | I]`: selects the image half of `[attended || image]`.
pub fn passthrough_kernel<T: Scalar>(channels: usize) -> Tensor<T> {
    let c = channels;
    Tensor::from_fn(&[c, 2 * c, 1, 1], |i| {
        let (o, j) = (i / (2 * c), i % (2 * c));
        if j == c + o {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// `[I | 0]`: selects the attended half.
pub fn attended_kernel<T: Scalar>(channels: usize) -> Tensor<T> {
    let c = channels;
    Tensor::from_fn(&[c, 2 * c, 1, 1], |i| if i / (2 * c) == i % (2 * c) { T::one() } else { T::zero() })
}

/// Number of scalars a fusion module adds for `channels` image channels.
pub fn module_param_count(kind: FusionKind, channels: usize, text_dim: usize) -> usize {
    let d = channels;
    let attn = channels * d + text_dim * d + text_dim * channels;
    attn + match kind {
        FusionKind::None => return 0,
        FusionKind::Add => 0,
        FusionKind::Wsum => 2,
        FusionKind::Conv => 2 * channels * channels + channels,
    }
}

/// Graph handles for the projections.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

/// Graph handles for a merge strategy.
#[derive(Clone, Copy, Debug)]
pub enum StrategyVars {
    Add,
    WeightedSum { alpha: Var, beta: Var },
    Conv { kernel: Var, bias: Var },
}

/// Intermediate attention values of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct AttentionState {
    /// `[HW, T]` scaled dot products before the softmax.
    pub scores: Var,
    /// `[HW, T]` softmax of `scores`; rows sum to one.
    pub weights: Var,
    /// `[HW, C]`.
    pub attended: Var,
}

/// `[C,H,W] -> [H*W, C]`.
pub fn image_to_tokens<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::Contract(format!("image_to_tokens expects [C,H,W], got {s:?}")));
    }
    let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
    g.transpose(flat)
}

/// `[H*W, C] -> [C,H,W]`, the inverse of [`image_to_tokens`].
pub fn tokens_to_image<T: Scalar>(g: &mut Graph<T>, tokens: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(tokens).to_vec();
    if s.len() != 2 || s[0] != h * w {
        return Err(Error::shape("tokens_to_image", &s, &[h * w]));
    }
    let t = g.transpose(tokens)?;
    g.reshape(t, &[s[1], h, w])
}

/// Single-head cross-attention from image tokens `[HW,C]` to text `[T,D]`.
///
/// With `scale_scores` the dot products are divided by `sqrt(d)`.
pub fn cross_attention<T: Scalar>(
    g: &mut Graph<T>,
    x_tokens: Var,
    text: Var,
    p: &AttentionVars,
    scale_scores: bool,
) -> Result<AttentionState> {
    let st = g.shape(text).to_vec();
    if st.len() != 2 || st[0] == 0 {
        return Err(Error::Contract(format!("text sequence must be [T>=1, D], got {st:?}")));
    }
    let q = g.matmul(x_tokens, p.wq)?;
    let k = g.matmul(text, p.wk)?;
    let v = g.matmul(text, p.wv)?;
    let kt = g.transpose(k)?;
    let mut scores = g.matmul(q, kt)?;
    if scale_scores {
        let d = g.shape(p.wq)[1];
        scores = g.scale(scores, T::one() / T::from_usize(d).unwrap().sqrt());
    }
    let weights = g.softmax_rows(scores)?;
    let attended = g.matmul(weights, v)?;
    if g.shape(attended) != g.shape(x_tokens) {
        return Err(Error::shape("cross_attention value", g.shape(attended), g.shape(x_tokens)));
    }
    Ok(AttentionState {
        scores,
        weights,
        attended,
    })
}

pub fn merge_add<T: Scalar>(g: &mut Graph<T>, attended: Var, x_tokens: Var) -> Result<Var> {
    g.add(attended, x_tokens)
}

/// `alpha * attended + beta * x_tokens`; `alpha`, `beta` are `[1]` vars.
pub fn merge_weighted<T: Scalar>(g: &mut Graph<T>, attended: Var, x_tokens: Var, alpha: Var, beta: Var) -> Result<Var> {
    let a = g.mul_scalar(attended, alpha)?;
    let b = g.mul_scalar(x_tokens, beta)?;
    g.add(a, b)
}

/// 1x1 convolution over the channel concatenation `[attended || image]`.
///
/// On tokens this is the per-position linear map `[a | x] K^T + b` with the
/// kernel viewed as `[C, 2C]`.
pub fn merge_conv<T: Scalar>(g: &mut Graph<T>, attended: Var, x_tokens: Var, kernel: Var, bias: Var) -> Result<Var> {
    let c = g.shape(x_tokens)[1];
    if g.shape(kernel) != [c, 2 * c, 1, 1] {
        return Err(Error::shape("merge_conv kernel", g.shape(kernel), &[c, 2 * c, 1, 1]));
    }
    let cat = g.concat_cols(attended, x_tokens)?;
    let k2 = g.reshape(kernel, &[c, 2 * c])?;
    let kt = g.transpose(k2)?;
    let y = g.matmul(cat, kt)?;
    g.add_row_bias(y, bias)
}

/// Tokenise, attend, merge and fold back; output shape equals `x`'s.
pub fn fusion_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    text: Var,
    attn: &AttentionVars,
    strategy: &StrategyVars,
    scale_scores: bool,
) -> Result<(Var, AttentionState)> {
    let s = g.shape(x).to_vec();
    let tokens = image_to_tokens(g, x)?;
    let state = cross_attention(g, tokens, text, attn, scale_scores)?;
    let merged = match *strategy {
        StrategyVars::Add => merge_add(g, state.attended, tokens)?,
        StrategyVars::WeightedSum { alpha, beta } => merge_weighted(g, state.attended, tokens, alpha, beta)?,
        StrategyVars::Conv { kernel, bias } => merge_conv(g, state.attended, tokens, kernel, bias)?,
    };
    let out = tokens_to_image(g, merged, s[1], s[2])?;
    Ok((out, state))
}

/// A fusion module registered in a [`ParamStore`] under `xattn.<index>.*`.
#[derive(Clone, Debug)]
pub struct FusionModule {
    pub index: usize,
    pub channels: usize,
    pub kind: FusionKind,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    merge: MergeIds,
}

#[derive(Clone, Debug)]
enum MergeIds {
    Add,
    WeightedSum { alpha: ParamId, beta: ParamId },
    Conv { w: ParamId, b: ParamId },
}

impl FusionModule {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        index: usize,
        attn: AttentionParams<T>,
        strategy: FusionStrategy<T>,
    ) -> Result<Self> {
        let channels = attn.wq.shape()[0];
        let p = format!("xattn.{index}");
        let kind = strategy.kind();
        let wq = store.add(format!("{p}.wq"), attn.wq)?;
        let wk = store.add(format!("{p}.wk"), attn.wk)?;
        let wv = store.add(format!("{p}.wv"), attn.wv)?;
        let merge = match strategy {
            FusionStrategy::ElementwiseAdd => MergeIds::Add,
            FusionStrategy::WeightedSum { alpha, beta } => MergeIds::WeightedSum {
                alpha: store.add(format!("{p}.alpha"), Tensor::scalar(alpha))?,
                beta: store.add(format!("{p}.beta"), Tensor::scalar(beta))?,
            },
            FusionStrategy::ConvFusion { kernel, bias } => MergeIds::Conv {
                w: store.add(format!("{p}.fuse_w"), kernel)?,
                b: store.add(format!("{p}.fuse_b"), bias)?,
            },
        };
        Ok(Self {
            index,
            channels,
            kind,
            wq,
            wk,
            wv,
            merge,
        })
    }

    pub fn attention_vars(&self, p: &Bound) -> AttentionVars {
        AttentionVars {
            wq: p.var(self.wq),
            wk: p.var(self.wk),
            wv: p.var(self.wv),
        }
    }

    pub fn strategy_vars(&self, p: &Bound) -> StrategyVars {
        match self.merge {
            MergeIds::Add => StrategyVars::Add,
            MergeIds::WeightedSum { alpha, beta } => StrategyVars::WeightedSum {
                alpha: p.var(alpha),
                beta: p.var(beta),
            },
            MergeIds::Conv { w, b } => StrategyVars::Conv {
                kernel: p.var(w),
                bias: p.var(b),
            },
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        text: Var,
        scale_scores: bool,
    ) -> Result<(Var, AttentionState)> {
        fusion_forward(g, x, text, &self.attention_vars(p), &self.strategy_vars(p), scale_scores)
    }

    /// Puts the module in its identity configuration: the output equals the input.
    pub fn set_identity<T: Scalar>(&self, store: &mut ParamStore<T>) {
        match self.merge {
            MergeIds::Add => {
                store.get_mut(self.wv).data_mut().fill(T::zero());
            }
            MergeIds::WeightedSum { alpha, beta } => {
                store.get_mut(alpha).data_mut()[0] = T::zero();
                store.get_mut(beta).data_mut()[0] = T::one();
            }
            MergeIds::Conv { w, b } => {
                *store.get_mut(w) = passthrough_kernel(self.channels);
                store.get_mut(b).data_mut().fill(T::zero());
            }
        }
    }
}
