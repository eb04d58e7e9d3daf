//! Reverse-mode automatic differentiation over a recorded op tape.
//!
//! A [`Graph`] records every executed op in execution order, which is a
//! topological order by construction. [`Graph::backward`] walks the tape once
//! in reverse, applying each op's vector-Jacobian product. Only the ops the
//! detector needs are provided, and none of them broadcast.
//!
//! A graph is consumed by its backward pass: a second call is an error, and a
//! fresh graph is built for every forward.

pub mod gradcheck;
pub mod kernels;

use crate::error::{Error, Result};
use crate::scalar::{sigmoid, softplus, Scalar};
use crate::tensor::Tensor;

use kernels::Window;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        win: Window,
    },
    SoftmaxRows(Var),
    Sigmoid(Var),
    Silu(Var),
    Add(Var, Var),
    Scale(Var, T),
    MulScalar(Var, Var),
    Concat0(Var, Var),
    ConcatCols(Var, Var),
    AddRowBias(Var, Var),
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    Upsample2x(Var),
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<T>,
    },
    SumAll(Var),
    WeightedSum(Var, Vec<T>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of executed ops plus the gradient buffers filled by `backward`.
#[derive(Debug)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    /// When false, `param` leaves do not require gradients and nothing is differentiated.
    track: bool,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// Graph that records gradients for `param` leaves.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            track: true,
            consumed: false,
        }
    }

    /// Graph for inference: parameters are plain constants.
    pub fn inference() -> Self {
        Self {
            track: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that never receives a gradient (images, text embeddings at inference).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient when the graph tracks gradients.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        let track = self.track;
        self.push(t, Op::Leaf, track)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of a leaf after `backward`; `None` when it does not require one.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn expect_rank(&self, op: &'static str, v: Var, rank: usize) -> Result<&[usize]> {
        let s = self.shape(v);
        if s.len() != rank {
            return Err(Error::Contract(format!("{op}: expected rank {rank}, got shape {s:?}")));
        }
        Ok(s)
    }

    // ---- forward ops ---------------------------------------------------

    /// `[M,K] x [K,N] -> [M,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.expect_rank("matmul", a, 2)?.to_vec();
        let sb = self.expect_rank("matmul", b, 2)?.to_vec();
        if sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.expect_rank("transpose", a, 2)?.to_vec();
        let (m, n) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Cross-correlation of `x[Cin,H,W]` with `w[Cout,Cin,k,k]` plus optional bias `b[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.expect_rank("conv2d", x, 3)?.to_vec();
        let sw = self.expect_rank("conv2d", w, 4)?.to_vec();
        if sw[1] != sx[0] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if sw[2] != sw[3] || sw[2] % 2 == 0 {
            return Err(Error::Config(format!("conv2d kernel must be square and odd, got {sw:?}")));
        }
        if let Some(b) = b {
            let sb = self.shape(b);
            if sb != [sw[0]] {
                return Err(Error::shape("conv2d bias", sb, &sw));
            }
        }
        let win = Window {
            channels: sx[0],
            height: sx[1],
            width: sx[2],
            kernel: sw[2],
            stride,
            pad,
        };
        let (Some(ho), Some(wo)) = (
            Window::out_extent(sx[1], sw[2], stride, pad),
            Window::out_extent(sx[2], sw[2], stride, pad),
        ) else {
            return Err(Error::Config(format!(
                "conv2d output extent < 1 for input {sx:?}, kernel {}, stride {stride}, pad {pad}",
                sw[2]
            )));
        };
        let cout = sw[0];
        let plane = ho * wo;
        let rows = win.col_rows();
        let mut out = vec![T::zero(); cout * plane];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (o, chunk) in out.chunks_mut(plane).enumerate() {
                chunk.fill(bias[o]);
            }
        }
        let owned;
        let cols: &[T] = if win.is_pointwise() {
            self.value(x).data()
        } else {
            let mut c = vec![T::zero(); rows * plane];
            kernels::im2col(self.value(x).data(), &win, &mut c);
            owned = c;
            &owned
        };
        T::gemm(
            cout,
            rows,
            plane,
            T::one(),
            self.value(w).data(),
            rows as isize,
            1,
            cols,
            plane as isize,
            1,
            T::one(),
            &mut out,
            plane as isize,
            1,
        );
        let mut vars = vec![x, w];
        vars.extend(b);
        let rg = self.rg(&vars);
        Ok(self.push(Tensor::new(&[cout, ho, wo], out)?, Op::Conv2d { x, w, b, win }, rg))
    }

    /// Row-wise softmax of a rank-2 tensor with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.expect_rank("softmax_rows", x, 2)?.to_vec();
        let src = self.value(x);
        if !src.all_finite() {
            return Err(Error::Contract("softmax_rows: non-finite input".into()));
        }
        let n = s[1];
        let mut out = src.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&s, out)?, Op::SoftmaxRows(x), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(t, Op::Sigmoid(x), rg)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * sigmoid(v));
        let rg = self.rg(&[x]);
        self.push(t, Op::Silu(x), rg)
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a).map(|v| v * s);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, s), rg)
    }

    /// Multiplication by a differentiable scalar `s` of shape `[1]`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != [1] {
            return Err(Error::shape("mul_scalar", self.shape(a), self.shape(s)));
        }
        let k = self.value(s).data()[0];
        let t = self.value(a).map(|v| k * v);
        let rg = self.rg(&[a, s]);
        Ok(self.push(t, Op::MulScalar(a, s), rg))
    }

    /// Concatenation along the leading axis; `[C1,H,W] ++ [C2,H,W] -> [C1+C2,H,W]`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != tb.rank() || ta.shape()[1..] != tb.shape()[1..] {
            return Err(Error::shape("concat_channels", ta.shape(), tb.shape()));
        }
        let mut shape = ta.shape().to_vec();
        shape[0] += tb.shape()[0];
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        data.extend_from_slice(ta.data());
        data.extend_from_slice(tb.data());
        let t = Tensor::new(&shape, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Concat0(a, b), rg))
    }

    /// Column concatenation of rank-2 tensors: `[M,N1] ++ [M,N2] -> [M,N1+N2]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.expect_rank("concat_cols", a, 2)?.to_vec();
        let sb = self.expect_rank("concat_cols", b, 2)?.to_vec();
        if sa[0] != sb[0] {
            return Err(Error::shape("concat_cols", &sa, &sb));
        }
        let (m, n1, n2) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(m * (n1 + n2));
        for r in 0..m {
            data.extend_from_slice(&da[r * n1..(r + 1) * n1]);
            data.extend_from_slice(&db[r * n2..(r + 1) * n2]);
        }
        let t = Tensor::new(&[m, n1 + n2], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::ConcatCols(a, b), rg))
    }

    /// Adds bias `b[N]` to every row of `x[M,N]`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.expect_rank("add_row_bias", x, 2)?.to_vec();
        if self.shape(b) != [sx[1]] {
            return Err(Error::shape("add_row_bias", &sx, self.shape(b)));
        }
        let bias = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .chunks(sx[1])
            .flat_map(|row| row.iter().zip(bias).map(|(&v, &c)| v + c))
            .collect();
        let t = Tensor::new(&sx, data)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(t, Op::AddRowBias(x, b), rg))
    }

    /// Per-channel `x * scale[c] + shift[c]` on `x[C,H,W]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let sx = self.expect_rank("channel_affine", x, 3)?.to_vec();
        let c = sx[0];
        if self.shape(scale) != [c] || self.shape(shift) != [c] {
            return Err(Error::shape("channel_affine", &sx, self.shape(scale)));
        }
        let plane = sx[1] * sx[2];
        let (g, h) = (self.value(scale).data(), self.value(shift).data());
        let mut data = self.value(x).data().to_vec();
        for (ch, chunk) in data.chunks_mut(plane).enumerate() {
            for v in chunk {
                *v = *v * g[ch] + h[ch];
            }
        }
        let t = Tensor::new(&sx, data)?;
        let rg = self.rg(&[x, scale, shift]);
        Ok(self.push(t, Op::ChannelAffine { x, scale, shift }, rg))
    }

    /// Nearest-neighbour 2x spatial upsampling of `x[C,H,W]`.
    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let s = self.expect_rank("upsample_nearest2x", x, 3)?.to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    data[(ch * 2 * h + y) * 2 * w + xx] = src[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let t = Tensor::new(&[c, 2 * h, 2 * w], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Upsample2x(x), rg))
    }

    /// Max pooling over square windows of `x[C,H,W]`.
    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let s = self.expect_rank("maxpool2d", x, 3)?.to_vec();
        if pad > k / 2 {
            return Err(Error::Config(format!("maxpool2d pad {pad} too large for kernel {k}")));
        }
        let win = Window {
            channels: s[0],
            height: s[1],
            width: s[2],
            kernel: k,
            stride,
            pad,
        };
        let (Some(ho), Some(wo)) = (
            Window::out_extent(s[1], k, stride, pad),
            Window::out_extent(s[2], k, stride, pad),
        ) else {
            return Err(Error::Config(format!("maxpool2d output extent < 1 for {s:?}")));
        };
        let mut out = vec![T::zero(); s[0] * ho * wo];
        let mut argmax = vec![0u32; out.len()];
        kernels::maxpool(self.value(x).data(), &win, &mut out, &mut argmax);
        let t = Tensor::new(&[s[0], ho, wo], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::MaxPool { x, argmax }, rg))
    }

    /// Mean binary cross-entropy between `logits` and constant `targets` in `[0,1]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let tl = self.value(logits);
        if tl.shape() != targets.shape() {
            return Err(Error::shape("bce_with_logits", tl.shape(), targets.shape()));
        }
        if let Some(bad) = targets.data().iter().find(|t| !(**t >= T::zero() && **t <= T::one())) {
            return Err(Error::Contract(format!("bce_with_logits: target {bad} outside [0,1]")));
        }
        let n = T::from_usize(tl.len()).unwrap();
        let loss = tl
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &t)| softplus(x) - x * t)
            .sum::<T>()
            / n;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.data().to_vec(),
            },
            rg,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    /// `sum(x * w)` for a constant weight tensor of the same shape.
    pub fn weighted_sum(&mut self, x: Var, w: &Tensor<T>) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape() != w.shape() {
            return Err(Error::shape("weighted_sum", tx.shape(), w.shape()));
        }
        let s = tx.data().iter().zip(w.data()).map(|(&a, &b)| a * b).sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(x, w.data().to_vec()), rg))
    }

    // ---- backward ------------------------------------------------------

    /// Backpropagates from a scalar output (`shape == [1]`).
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.shape(out) != [1] {
            return Err(Error::Graph(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(out)
            )));
        }
        self.backward_with(out, Tensor::scalar(T::one()))
    }

    /// Backpropagates an explicit upstream gradient `seed` for `out`.
    pub fn backward_with(&mut self, out: Var, seed: Tensor<T>) -> Result<()> {
        if self.consumed {
            return Err(Error::Graph("backward already ran on this graph".into()));
        }
        if seed.shape() != self.shape(out) {
            return Err(Error::shape("backward seed", seed.shape(), self.shape(out)));
        }
        self.consumed = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[out.0].requires_grad {
            return Ok(());
        }
        self.grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.apply_vjp(i, g.data());
        }
        Ok(())
    }

    fn apply_vjp(&mut self, i: usize, g: &[T]) {
        let Graph { nodes, grads, .. } = self;
        let nodes: &[Node<T>] = nodes;
        let node = &nodes[i];
        let y = node.value.data();
        macro_rules! acc {
            ($v:expr) => {
                grad_slot(grads, nodes, $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if let Some(da) = acc!(*a) {
                    // dA += dC . B^T
                    T::gemm(m, n, k, T::one(), g, n as isize, 1, vb.data(), 1, n as isize, T::one(), da, k as isize, 1);
                }
                if let Some(db) = acc!(*b) {
                    // dB += A^T . dC
                    T::gemm(k, m, n, T::one(), va.data(), 1, k as isize, g, n as isize, 1, T::one(), db, n as isize, 1);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                if let Some(da) = acc!(*a) {
                    for r in 0..m {
                        for c in 0..n {
                            da[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
            Op::Reshape(a) | Op::Add(a, _) => {
                if let Some(da) = acc!(*a) {
                    add_into(da, g);
                }
                if let Op::Add(_, b) = &node.op {
                    if let Some(db) = acc!(*b) {
                        add_into(db, g);
                    }
                }
            }
            Op::Conv2d { x, w, b, win } => {
                let plane = win.out_height() * win.out_width();
                let rows = win.col_rows();
                let cout = nodes[w.0].value.shape()[0];
                let xv = nodes[x.0].value.data();
                let wv = nodes[w.0].value.data();
                if let Some(b) = b {
                    if let Some(db) = acc!(*b) {
                        for (o, chunk) in g.chunks(plane).enumerate() {
                            db[o] += chunk.iter().copied().sum::<T>();
                        }
                    }
                }
                if let Some(dw) = acc!(*w) {
                    let owned;
                    let cols: &[T] = if win.is_pointwise() {
                        xv
                    } else {
                        let mut c = vec![T::zero(); rows * plane];
                        kernels::im2col(xv, win, &mut c);
                        owned = c;
                        &owned
                    };
                    // dW += dY . cols^T
                    T::gemm(cout, plane, rows, T::one(), g, plane as isize, 1, cols, 1, plane as isize, T::one(), dw, rows as isize, 1);
                }
                if let Some(dx) = acc!(*x) {
                    if win.is_pointwise() {
                        T::gemm(rows, cout, plane, T::one(), wv, 1, rows as isize, g, plane as isize, 1, T::one(), dx, plane as isize, 1);
                    } else {
                        let mut dcols = vec![T::zero(); rows * plane];
                        T::gemm(rows, cout, plane, T::one(), wv, 1, rows as isize, g, plane as isize, 1, T::zero(), &mut dcols, plane as isize, 1);
                        kernels::col2im_add(&dcols, win, dx);
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let n = node.value.shape()[1];
                if let Some(dx) = acc!(*x) {
                    for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(dx) = acc!(*x) {
                    for ((d, &s), &gg) in dx.iter_mut().zip(y).zip(g) {
                        *d += gg * s * (T::one() - s);
                    }
                }
            }
            Op::Silu(x) => {
                let xv = nodes[x.0].value.data();
                if let Some(dx) = acc!(*x) {
                    for ((d, &v), &gg) in dx.iter_mut().zip(xv).zip(g) {
                        let s = sigmoid(v);
                        *d += gg * s * (T::one() + v * (T::one() - s));
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(da) = acc!(*a) {
                    for (d, &gg) in da.iter_mut().zip(g) {
                        *d += gg * *s;
                    }
                }
            }
            Op::MulScalar(a, s) => {
                let k = nodes[s.0].value.data()[0];
                let av = nodes[a.0].value.data();
                if let Some(ds) = acc!(*s) {
                    ds[0] += av.iter().zip(g).map(|(&v, &gg)| v * gg).sum::<T>();
                }
                if let Some(da) = acc!(*a) {
                    for (d, &gg) in da.iter_mut().zip(g) {
                        *d += gg * k;
                    }
                }
            }
            Op::Concat0(a, b) => {
                let na = nodes[a.0].value.len();
                if let Some(da) = acc!(*a) {
                    add_into(da, &g[..na]);
                }
                if let Some(db) = acc!(*b) {
                    add_into(db, &g[na..]);
                }
            }
            Op::ConcatCols(a, b) => {
                let n1 = nodes[a.0].value.shape()[1];
                let n2 = nodes[b.0].value.shape()[1];
                if let Some(da) = acc!(*a) {
                    for (dr, gr) in da.chunks_mut(n1).zip(g.chunks(n1 + n2)) {
                        add_into(dr, &gr[..n1]);
                    }
                }
                if let Some(db) = acc!(*b) {
                    for (dr, gr) in db.chunks_mut(n2).zip(g.chunks(n1 + n2)) {
                        add_into(dr, &gr[n1..]);
                    }
                }
            }
            Op::AddRowBias(x, b) => {
                let n = node.value.shape()[1];
                if let Some(dx) = acc!(*x) {
                    add_into(dx, g);
                }
                if let Some(db) = acc!(*b) {
                    for gr in g.chunks(n) {
                        add_into(db, gr);
                    }
                }
            }
            Op::ChannelAffine { x, scale, shift } => {
                let s = nodes[x.0].value.shape();
                let plane = s[1] * s[2];
                let xv = nodes[x.0].value.data();
                let gs = nodes[scale.0].value.data();
                if let Some(dscale) = acc!(*scale) {
                    for (c, (xc, gc)) in xv.chunks(plane).zip(g.chunks(plane)).enumerate() {
                        dscale[c] += xc.iter().zip(gc).map(|(&a, &b)| a * b).sum::<T>();
                    }
                }
                if let Some(dshift) = acc!(*shift) {
                    for (c, gc) in g.chunks(plane).enumerate() {
                        dshift[c] += gc.iter().copied().sum::<T>();
                    }
                }
                if let Some(dx) = acc!(*x) {
                    for (c, (dc, gc)) in dx.chunks_mut(plane).zip(g.chunks(plane)).enumerate() {
                        for (d, &gg) in dc.iter_mut().zip(gc) {
                            *d += gg * gs[c];
                        }
                    }
                }
            }
            Op::Upsample2x(x) => {
                let s = nodes[x.0].value.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                if let Some(dx) = acc!(*x) {
                    for ch in 0..c {
                        for yy in 0..2 * h {
                            for xx in 0..2 * w {
                                dx[(ch * h + yy / 2) * w + xx / 2] += g[(ch * 2 * h + yy) * 2 * w + xx];
                            }
                        }
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(dx) = acc!(*x) {
                    for (&idx, &gg) in argmax.iter().zip(g) {
                        dx[idx as usize] += gg;
                    }
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let lv = nodes[logits.0].value.data();
                let n = T::from_usize(lv.len()).unwrap();
                if let Some(dl) = acc!(*logits) {
                    for ((d, &x), &t) in dl.iter_mut().zip(lv).zip(targets) {
                        *d += g[0] * (sigmoid(x) - t) / n;
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(dx) = acc!(*x) {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::WeightedSum(x, w) => {
                if let Some(dx) = acc!(*x) {
                    for (d, &wv) in dx.iter_mut().zip(w) {
                        *d += g[0] * wv;
                    }
                }
            }
        }
    }
}

/// Gradient buffer of `v`, allocated on first use; `None` when `v` needs no gradient.
fn grad_slot<'a, T: Scalar>(grads: &'a mut [Option<Tensor<T>>], nodes: &[Node<T>], v: Var) -> Option<&'a mut [T]> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let slot = &mut grads[v.0];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(nodes[v.0].value.shape()));
    }
    slot.as_mut().map(|t| t.data_mut())
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut g = Graph::<f64>::new();
        let i2 = g.constant(Tensor::eye(2));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
    }

    #[test]
    fn conv2d_identity_and_box_sum() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_fn(&[1, 3, 3], |i| i as f32));
        let w = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let ones = g.constant(Tensor::full(&[1, 3, 3], 1.0));
        let k = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let s = g.conv2d(ones, k, Some(b), 1, 0).unwrap();
        assert_eq!(g.shape(s), &[1, 1, 1]);
        assert_eq!(g.value(s).data(), &[9.0]);
    }

    #[test]
    fn conv2d_rejects_empty_output_and_even_kernels() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 2]));
        let w = g.constant(Tensor::zeros(&[1, 1, 5, 5]));
        assert!(matches!(g.conv2d(x, w, None, 1, 0), Err(Error::Config(_))));
        let w2 = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(matches!(g.conv2d(x, w2, None, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3, 3], &[0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 1000.0, 0.0, -1000.0]));
        let y = g.softmax_rows(x).unwrap();
        let v = g.value(y).data();
        for &p in &v[..3] {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        // e^k / (e + e^2 + e^3) evaluated independently
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|k| k.exp()).sum();
        for (j, k) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((v[3 + j] - k.exp() / z).abs() < 1e-12);
        }
        assert!((v[3] - 0.0900).abs() < 1e-4 && (v[4] - 0.2447).abs() < 1e-4 && (v[5] - 0.6652).abs() < 1e-4);
        assert_eq!(&v[6..], &[1.0, 0.0, 0.0]);

        let bad = g.constant(t(&[1, 2], &[f64::NAN, 0.0]));
        assert!(g.softmax_rows(bad).is_err());
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::<f32>::new();
        let z = g.constant(Tensor::zeros(&[1]));
        let s = g.sigmoid(z);
        let si = g.silu(z);
        assert_eq!(g.value(s).data(), &[0.5]);
        assert_eq!(g.value(si).data(), &[0.0]);

        let x = g.constant(Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let u = g.upsample_nearest2x(x).unwrap();
        assert_eq!(
            g.value(u).data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );

        let other = g.constant(Tensor::zeros(&[1, 3, 2]));
        assert!(matches!(g.concat_channels(x, other), Err(Error::Shape { .. })));
        assert!(matches!(g.add(x, other), Err(Error::Shape { .. })));
        let cat = g.concat_channels(x, x).unwrap();
        assert_eq!(g.shape(cat), &[2, 2, 2]);
    }

    #[test]
    fn bce_examples() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::zeros(&[1]));
        let loss = g.bce_with_logits(l, &Tensor::full(&[1], 0.5)).unwrap();
        assert!((g.value(loss).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        let big = g.constant(Tensor::full(&[1], 20.0));
        let sat = g.bce_with_logits(big, &Tensor::full(&[1], 1.0)).unwrap();
        assert!(g.value(sat).data()[0] < 1e-6);
        assert!(g.bce_with_logits(l, &Tensor::full(&[1], 1.5)).is_err());
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::full(&[2], 3.0));
        let s = g.sum_all(a);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[1.0, 1.0]);
        assert!(matches!(g.backward(s), Err(Error::Graph(_))));
    }

    #[test]
    fn shared_input_accumulates() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::full(&[2], 1.5));
        let b = g.add(a, a).unwrap();
        let s = g.sum_all(b);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn inference_graph_tracks_nothing() {
        let mut g = Graph::<f32>::inference();
        let a = g.param(Tensor::full(&[2], 1.0));
        let s = g.sum_all(a);
        assert!(!g.requires_grad(s));
        g.backward(s).unwrap();
        assert!(g.grad(a).is_none());
    }
}
