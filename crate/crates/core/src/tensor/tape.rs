use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, Mat, Scatter, Window};
use super::{check_same_shape, Real, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    Zero,
    Reflect,
}

/// Handle to a value recorded on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        stride: usize,
        padding: Padding,
        pad: usize,
    },
    ConvTranspose2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        stride: usize,
        crop: usize,
    },
    Upsample2x {
        input: usize,
    },
    InstanceNorm {
        input: usize,
        gain: usize,
        shift: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu {
        input: usize,
    },
    Tanh {
        input: usize,
    },
    Abs {
        input: usize,
    },
    Square {
        input: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    /// `b` may be a 1-channel map broadcast over the channels of `a`.
    Hadamard {
        a: usize,
        b: usize,
    },
    Scale {
        input: usize,
        factor: T,
    },
    Sum {
        input: usize,
    },
    Mean {
        input: usize,
    },
    AvgPool {
        input: usize,
        factor: usize,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        match *self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input, weight, bias, ..
            }
            | Op::ConvTranspose2d {
                input, weight, bias, ..
            } => {
                let mut v = vec![input, weight];
                v.extend(bias);
                v
            }
            Op::InstanceNorm {
                input, gain, shift, ..
            } => vec![input, gain, shift],
            Op::Add { a, b } | Op::Sub { a, b } | Op::Hadamard { a, b } => vec![a, b],
            Op::Upsample2x { input }
            | Op::Relu { input }
            | Op::Tanh { input }
            | Op::Abs { input }
            | Op::Square { input }
            | Op::Scale { input, .. }
            | Op::Sum { input }
            | Op::Mean { input }
            | Op::AvgPool { input, .. } => vec![input],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::Upsample2x { .. } => "bilinear_upsample2x",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::Relu { .. } => "relu",
            Op::Tanh { .. } => "tanh",
            Op::Abs { .. } => "abs",
            Op::Square { .. } => "square",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Hadamard { .. } => "hadamard",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::AvgPool { .. } => "avg_pool",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Define-by-run record of one forward pass.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order and backward is a single reverse sweep.
pub struct Tape<T: Real> {
    id: u64,
    nodes: Vec<Node<T>>,
    grads: Option<Vec<Option<Vec<T>>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_node(value, requires_grad, Op::Leaf)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Value of `v`.
    ///
    /// # Panics
    /// If `v` was recorded on a different tape.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        let i = self.index(v).expect("variable belongs to another tape");
        &self.nodes[i].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.index(v)
            .map(|i| self.nodes[i].requires_grad)
            .unwrap_or(false)
    }

    /// Gradient of the last backward root with respect to `v`, if computed.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let i = self.index(v).ok()?;
        let g = self.grads.as_ref()?.get(i)?.as_ref()?;
        Some(Tensor {
            shape: self.nodes[i].value.shape.clone(),
            data: g.clone(),
        })
    }

    /// Discards computed gradients so backward may run again.
    pub fn reset_grads(&mut self) {
        self.grads = None;
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Tape(format!(
                "variable {} is not recorded on tape {}",
                v.index, self.id
            )));
        }
        Ok(v.index)
    }

    fn push_node(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        #[cfg(debug_assertions)]
        {
            let inputs_finite = op.inputs().iter().all(|&i| self.nodes[i].value.is_finite());
            debug_assert!(
                !inputs_finite || value.is_finite(),
                "{} produced a non-finite value from finite inputs",
                op.name()
            );
        }
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.push_node(value, requires_grad, op)
    }

    fn node(&self, i: usize) -> &Tensor<T> {
        &self.nodes[i].value
    }

    // ---------------------------------------------------------------- ops

    /// 2-D cross-correlation. `weight` is `[Cout, Cin, K, K]` with odd `K`.
    ///
    /// Output size is `(H + 2·pad - K) / stride + 1`; the sweep must cover
    /// every input row and column, otherwise a geometry error is returned.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
        pad: usize,
    ) -> Result<Var> {
        let (xi, wi) = (self.index(input)?, self.index(weight)?);
        let bi = bias.map(|b| self.index(b)).transpose()?;
        let (n, c, h, w) = self.node(xi).dims4()?;
        let ws = self.node(wi).shape().to_vec();
        let [cout, cin, kh, kw] = ws[..] else {
            return Err(Error::Dimension(format!(
                "conv2d weight must be [Cout,Cin,K,K], got {ws:?}"
            )));
        };
        if cin != c {
            return Err(Error::Dimension(format!(
                "conv2d axis 1 (channels): input has {c}, weight expects {cin}"
            )));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::Config(format!(
                "conv2d kernel must be square and odd, got {kh}x{kw}"
            )));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::Config(format!("conv2d stride {stride} not in {{1,2}}")));
        }
        if let Some(bi) = bi {
            check_same_shape("conv2d bias", self.node(bi).shape(), &[cout])?;
        }
        let k = kh;
        if padding == Padding::Reflect && (pad >= h || pad >= w) {
            return Err(Error::Geometry(format!(
                "reflect padding {pad} needs spatial dims > {pad}, got {h}x{w}"
            )));
        }
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        if hp < k || wp < k {
            return Err(Error::Dimension(format!(
                "conv2d axis 2/3: padded input {hp}x{wp} smaller than kernel {k}"
            )));
        }
        let (ho, wo) = ((hp - k) / stride + 1, (wp - k) / stride + 1);
        if (ho - 1) * stride + k < h + pad || (wo - 1) * stride + k < w + pad {
            return Err(Error::Geometry(format!(
                "conv2d with kernel {k}, stride {stride}, pad {pad} leaves input {h}x{w} partly uncovered"
            )));
        }
        let geom = Window {
            channels: c,
            in_h: hp,
            in_w: wp,
            kernel: k,
            stride,
            out_h: ho,
            out_w: wo,
        };
        let x = self.node(xi).data();
        let wt = self.node(wi).data();
        let mut out = vec![T::zero(); n * cout * ho * wo];
        let mut cols = vec![T::zero(); geom.col_rows() * geom.col_cols()];
        for s in 0..n {
            let xs = &x[s * c * h * w..(s + 1) * c * h * w];
            let xp = kernels::pad_planes(xs, c, h, w, pad, padding);
            kernels::im2col(&xp, geom, &mut cols);
            let os = &mut out[s * cout * ho * wo..(s + 1) * cout * ho * wo];
            kernels::matmul(
                Mat::new(wt, cout, geom.col_rows()),
                Mat::new(&cols, geom.col_rows(), geom.col_cols()),
                os,
                false,
            );
            if let Some(bi) = bi {
                let b = self.node(bi).data();
                for (co, plane) in os.chunks_mut(ho * wo).enumerate() {
                    plane.iter_mut().for_each(|v| *v = *v + b[co]);
                }
            }
        }
        let value = Tensor::new(&[n, cout, ho, wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input: xi,
                weight: wi,
                bias: bi,
                stride,
                padding,
                pad,
            },
        ))
    }

    /// Transposed convolution with `weight` `[Cin, Cout, K, K]`.
    ///
    /// Input pixel `i` and tap `k` land on output `i·stride + k - crop` with
    /// `crop = (K - stride + 1) / 2`; the output is cropped to exactly
    /// `stride·H x stride·W`. For `K = 3, stride = 2` this matches the common
    /// `padding = 1, output_padding = 1` convention.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
    ) -> Result<Var> {
        let (xi, wi) = (self.index(input)?, self.index(weight)?);
        let bi = bias.map(|b| self.index(b)).transpose()?;
        let (n, c, h, w) = self.node(xi).dims4()?;
        let ws = self.node(wi).shape().to_vec();
        let [cin, cout, kh, kw] = ws[..] else {
            return Err(Error::Dimension(format!(
                "conv_transpose2d weight must be [Cin,Cout,K,K], got {ws:?}"
            )));
        };
        if cin != c {
            return Err(Error::Dimension(format!(
                "conv_transpose2d axis 1 (channels): input has {c}, weight expects {cin}"
            )));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::Config(format!(
                "conv_transpose2d stride {stride} not supported (1 or 2)"
            )));
        }
        if kh != kw || kh < stride {
            return Err(Error::Config(format!(
                "conv_transpose2d kernel must be square and at least the stride, got {kh}x{kw}"
            )));
        }
        if let Some(bi) = bi {
            check_same_shape("conv_transpose2d bias", self.node(bi).shape(), &[cout])?;
        }
        let k = kh;
        let geom = Scatter {
            out_channels: cout,
            in_h: h,
            in_w: w,
            kernel: k,
            stride,
            crop: (k - stride + 1) / 2,
            out_h: stride * h,
            out_w: stride * w,
        };
        let (ho, wo) = (geom.out_h, geom.out_w);
        let x = self.node(xi).data();
        let wt = self.node(wi).data();
        let rows = cout * k * k;
        let mut cols = vec![T::zero(); rows * h * w];
        let mut out = vec![T::zero(); n * cout * ho * wo];
        for s in 0..n {
            let xs = &x[s * c * h * w..(s + 1) * c * h * w];
            kernels::matmul(Mat::t(wt, cin, rows), Mat::new(xs, c, h * w), &mut cols, false);
            let os = &mut out[s * cout * ho * wo..(s + 1) * cout * ho * wo];
            kernels::scatter_add(&cols, geom, os);
            if let Some(bi) = bi {
                let b = self.node(bi).data();
                for (co, plane) in os.chunks_mut(ho * wo).enumerate() {
                    plane.iter_mut().for_each(|v| *v = *v + b[co]);
                }
            }
        }
        let value = Tensor::new(&[n, cout, ho, wo], out)?;
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                input: xi,
                weight: wi,
                bias: bi,
                stride,
                crop: geom.crop,
            },
        ))
    }

    /// 2x bilinear upsampling, half-pixel sample centers, clamped at borders.
    pub fn bilinear_upsample2x(&mut self, input: Var) -> Result<Var> {
        let xi = self.index(input)?;
        let (n, c, h, w) = self.node(xi).dims4()?;
        if h < 2 || w < 2 {
            return Err(Error::Dimension(format!(
                "bilinear_upsample2x axis {}: needs at least 2 samples, got {h}x{w}",
                if h < 2 { 2 } else { 3 }
            )));
        }
        let out = kernels::upsample2x(self.node(xi).data(), n * c, h, w);
        let value = Tensor::new(&[n, c, 2 * h, 2 * w], out)?;
        Ok(self.push(value, Op::Upsample2x { input: xi }))
    }

    /// Per-(sample, channel) standardization followed by a per-channel affine map.
    pub fn instance_norm(&mut self, input: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let (xi, gi, si) = (self.index(input)?, self.index(gain)?, self.index(shift)?);
        if !(eps > 0.0) {
            return Err(Error::Config(format!(
                "instance_norm eps must be positive, got {eps}"
            )));
        }
        let (n, c, h, w) = self.node(xi).dims4()?;
        check_same_shape("instance_norm gain", self.node(gi).shape(), &[c])?;
        check_same_shape("instance_norm shift", self.node(si).shape(), &[c])?;
        let m = h * w;
        let x = self.node(xi).data();
        let (g, b) = (self.node(gi).data(), self.node(si).data());
        let inv_m = T::lit(1.0 / m as f64);
        let eps = T::lit(eps);
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); n * c];
        let mut out = vec![T::zero(); x.len()];
        for nc in 0..n * c {
            let ch = nc % c;
            let xs = &x[nc * m..(nc + 1) * m];
            let mean = xs.iter().copied().sum::<T>() * inv_m;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_m;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[nc] = inv;
            for j in 0..m {
                let xh = (xs[j] - mean) * inv;
                xhat[nc * m + j] = xh;
                out[nc * m + j] = g[ch] * xh + b[ch];
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(
            value,
            Op::InstanceNorm {
                input: xi,
                gain: gi,
                shift: si,
                xhat,
                inv_std,
            },
        ))
    }

    fn unary(&mut self, input: Var, f: impl Fn(T) -> T, op: impl FnOnce(usize) -> Op<T>) -> Result<Var> {
        let xi = self.index(input)?;
        let value = self.node(xi).map(f);
        Ok(self.push(value, op(xi)))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.unary(input, |x| x.max(T::zero()), |input| Op::Relu { input })
    }

    pub fn tanh(&mut self, input: Var) -> Result<Var> {
        self.unary(input, |x| x.tanh(), |input| Op::Tanh { input })
    }

    pub fn abs(&mut self, input: Var) -> Result<Var> {
        self.unary(input, |x| x.abs(), |input| Op::Abs { input })
    }

    pub fn square(&mut self, input: Var) -> Result<Var> {
        self.unary(input, |x| x * x, |input| Op::Square { input })
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let f = T::lit(factor);
        self.unary(input, |x| x * f, |input| Op::Scale { input, factor: f })
    }

    fn binary_same(&mut self, what: &str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(usize, usize, Tensor<T>)> {
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        let (ta, tb) = (self.node(ai), self.node(bi));
        check_same_shape(what, ta.shape(), tb.shape())?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((ai, bi, Tensor::new(ta.shape(), data)?))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b, value) = self.binary_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b, value) = self.binary_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub { a, b }))
    }

    /// Elementwise product. Either operand may instead be a `[N,1,H,W]` map
    /// broadcast across the channels of a `[N,C,H,W]` partner.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let (mut ai, mut bi) = (self.index(a)?, self.index(b)?);
        if self.node(ai).shape() == self.node(bi).shape() {
            let (ta, tb) = (self.node(ai), self.node(bi));
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
            let value = Tensor::new(ta.shape(), data)?;
            return Ok(self.push(value, Op::Hadamard { a: ai, b: bi }));
        }
        if self.node(ai).shape().len() == 4 && self.node(ai).shape()[1] == 1 {
            std::mem::swap(&mut ai, &mut bi);
        }
        let sa = self.node(ai).shape().to_vec();
        let sb = self.node(bi).shape().to_vec();
        let legal = sa.len() == 4
            && sb.len() == 4
            && sb[1] == 1
            && sa[0] == sb[0]
            && sa[2] == sb[2]
            && sa[3] == sb[3];
        if !legal {
            check_same_shape("hadamard", &sa, &sb)?;
        }
        let (n, c, h, w) = (sa[0], sa[1], sa[2], sa[3]);
        let m = h * w;
        let (x, y) = (self.node(ai).data(), self.node(bi).data());
        let mut out = vec![T::zero(); x.len()];
        for s in 0..n {
            let ys = &y[s * m..(s + 1) * m];
            for ch in 0..c {
                let off = (s * c + ch) * m;
                for j in 0..m {
                    out[off + j] = x[off + j] * ys[j];
                }
            }
        }
        let value = Tensor::new(&sa, out)?;
        Ok(self.push(value, Op::Hadamard { a: ai, b: bi }))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let xi = self.index(input)?;
        let s = self.node(xi).data().iter().copied().sum::<T>();
        Ok(self.push(Tensor::scalar(s), Op::Sum { input: xi }))
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let xi = self.index(input)?;
        let t = self.node(xi);
        let s = t.data().iter().copied().sum::<T>() / T::lit(t.numel() as f64);
        Ok(self.push(Tensor::scalar(s), Op::Mean { input: xi }))
    }

    /// Average pooling over non-overlapping `factor x factor` cells.
    pub fn avg_pool(&mut self, input: Var, factor: usize) -> Result<Var> {
        let xi = self.index(input)?;
        let (n, c, h, w) = self.node(xi).dims4()?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::Dimension(format!(
                "avg_pool factor {factor} does not divide spatial dims {h}x{w}"
            )));
        }
        let out = kernels::avg_pool(self.node(xi).data(), n * c, h, w, factor);
        let value = Tensor::new(&[n, c, h / factor, w / factor], out)?;
        Ok(self.push(value, Op::AvgPool { input: xi, factor }))
    }

    // ----------------------------------------------------------- backward

    /// Populates gradients of the scalar `root` with respect to every
    /// recorded node that requires one.
    ///
    /// A second call without [`Tape::reset_grads`] is an error.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let ri = self.index(root)?;
        if self.nodes[ri].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be a scalar, got shape {:?}",
                self.nodes[ri].value.shape()
            )));
        }
        if self.grads.is_some() {
            return Err(Error::Tape(
                "backward already ran on this tape; reset gradients first".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[ri].requires_grad {
            grads[ri] = Some(vec![T::one()]);
        }
        for i in (0..=ri).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads)?;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(vec![T::zero(); node.value.numel()]);
            }
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
                pad,
            } => self.conv2d_backward(i, g, grads, input, weight, bias, stride, padding, pad)?,
            &Op::ConvTranspose2d {
                input,
                weight,
                bias,
                stride,
                crop,
            } => self.conv_transpose2d_backward(i, g, grads, input, weight, bias, stride, crop)?,
            &Op::Upsample2x { input } => {
                if self.wants(input) {
                    let (n, c, h, w) = self.node(input).dims4()?;
                    let gx = kernels::upsample2x_grad(g, n * c, h, w);
                    accumulate(grads, input, &gx);
                }
            }
            Op::InstanceNorm {
                input,
                gain,
                shift,
                xhat,
                inv_std,
            } => {
                let (n, c, h, w) = self.node(*input).dims4()?;
                let m = h * w;
                let gv = self.node(*gain).data();
                let mut ggain = vec![T::zero(); c];
                let mut gshift = vec![T::zero(); c];
                let mut gx = vec![T::zero(); n * c * m];
                let inv_m = T::lit(1.0 / m as f64);
                for nc in 0..n * c {
                    let ch = nc % c;
                    let gs = &g[nc * m..(nc + 1) * m];
                    let xs = &xhat[nc * m..(nc + 1) * m];
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for j in 0..m {
                        sum_g = sum_g + gs[j];
                        sum_gx = sum_gx + gs[j] * xs[j];
                    }
                    ggain[ch] = ggain[ch] + sum_gx;
                    gshift[ch] = gshift[ch] + sum_g;
                    // d xhat = g * gain; dx = inv/M (M dxhat - sum dxhat - xhat sum(dxhat xhat))
                    let scale = gv[ch] * inv_std[nc];
                    let mean_g = sum_g * inv_m;
                    let mean_gx = sum_gx * inv_m;
                    for j in 0..m {
                        gx[nc * m + j] = scale * (gs[j] - mean_g - xs[j] * mean_gx);
                    }
                }
                if self.wants(*input) {
                    accumulate(grads, *input, &gx);
                }
                if self.wants(*gain) {
                    accumulate(grads, *gain, &ggain);
                }
                if self.wants(*shift) {
                    accumulate(grads, *shift, &gshift);
                }
            }
            &Op::Relu { input } => {
                let x = self.node(input).data();
                let gx: Vec<T> = g
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                accumulate(grads, input, &gx);
            }
            &Op::Tanh { input } => {
                let y = node.value.data();
                let gx: Vec<T> = g.iter().zip(y).map(|(&g, &y)| g * (T::one() - y * y)).collect();
                accumulate(grads, input, &gx);
            }
            &Op::Abs { input } => {
                let x = self.node(input).data();
                let gx: Vec<T> = g
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| {
                        if x > T::zero() {
                            g
                        } else if x < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                accumulate(grads, input, &gx);
            }
            &Op::Square { input } => {
                let x = self.node(input).data();
                let two = T::lit(2.0);
                let gx: Vec<T> = g.iter().zip(x).map(|(&g, &x)| two * x * g).collect();
                accumulate(grads, input, &gx);
            }
            &Op::Add { a, b } => {
                if self.wants(a) {
                    accumulate(grads, a, g);
                }
                if self.wants(b) {
                    accumulate(grads, b, g);
                }
            }
            &Op::Sub { a, b } => {
                if self.wants(a) {
                    accumulate(grads, a, g);
                }
                if self.wants(b) {
                    let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                    accumulate(grads, b, &neg);
                }
            }
            &Op::Hadamard { a, b } => {
                let (x, y) = (self.node(a).data(), self.node(b).data());
                if x.len() == y.len() {
                    if self.wants(a) {
                        let ga: Vec<T> = g.iter().zip(y).map(|(&g, &y)| g * y).collect();
                        accumulate(grads, a, &ga);
                    }
                    if self.wants(b) {
                        let gb: Vec<T> = g.iter().zip(x).map(|(&g, &x)| g * x).collect();
                        accumulate(grads, b, &gb);
                    }
                } else {
                    let (n, c, h, w) = self.node(a).dims4()?;
                    let m = h * w;
                    let mut ga = vec![T::zero(); x.len()];
                    let mut gb = vec![T::zero(); y.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * m;
                            for j in 0..m {
                                ga[off + j] = g[off + j] * y[s * m + j];
                                gb[s * m + j] = gb[s * m + j] + g[off + j] * x[off + j];
                            }
                        }
                    }
                    if self.wants(a) {
                        accumulate(grads, a, &ga);
                    }
                    if self.wants(b) {
                        accumulate(grads, b, &gb);
                    }
                }
            }
            &Op::Scale { input, factor } => {
                let gx: Vec<T> = g.iter().map(|&v| v * factor).collect();
                accumulate(grads, input, &gx);
            }
            &Op::Sum { input } => {
                let gx = vec![g[0]; self.node(input).numel()];
                accumulate(grads, input, &gx);
            }
            &Op::Mean { input } => {
                let numel = self.node(input).numel();
                let gx = vec![g[0] / T::lit(numel as f64); numel];
                accumulate(grads, input, &gx);
            }
            &Op::AvgPool { input, factor } => {
                let (n, c, h, w) = self.node(input).dims4()?;
                let gx = kernels::avg_pool_grad(g, n * c, h, w, factor);
                accumulate(grads, input, &gx);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        i: usize,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        input: usize,
        weight: usize,
        bias: Option<usize>,
        stride: usize,
        padding: Padding,
        pad: usize,
    ) -> Result<()> {
        let (n, c, h, w) = self.node(input).dims4()?;
        let (_, cout, ho, wo) = self.nodes[i].value.dims4()?;
        let k = self.node(weight).shape()[2];
        let geom = Window {
            channels: c,
            in_h: h + 2 * pad,
            in_w: w + 2 * pad,
            kernel: k,
            stride,
            out_h: ho,
            out_w: wo,
        };
        let (rows, ncol) = (geom.col_rows(), geom.col_cols());
        let x = self.node(input).data();
        let wt = self.node(weight).data();
        let want_w = self.wants(weight);
        let want_x = self.wants(input);
        let mut gw = vec![T::zero(); cout * rows];
        let mut gx = vec![T::zero(); if want_x { x.len() } else { 0 }];
        let mut cols = vec![T::zero(); rows * ncol];
        let mut gxp = vec![T::zero(); if want_x { c * geom.in_h * geom.in_w } else { 0 }];
        for s in 0..n {
            let gs = &g[s * cout * ho * wo..(s + 1) * cout * ho * wo];
            if want_w {
                let xs = &x[s * c * h * w..(s + 1) * c * h * w];
                let xp = kernels::pad_planes(xs, c, h, w, pad, padding);
                kernels::im2col(&xp, geom, &mut cols);
                kernels::matmul(Mat::new(gs, cout, ncol), Mat::t(&cols, rows, ncol), &mut gw, true);
            }
            if want_x {
                kernels::matmul(Mat::t(wt, cout, rows), Mat::new(gs, cout, ncol), &mut cols, false);
                gxp.iter_mut().for_each(|v| *v = T::zero());
                kernels::col2im_add(&cols, geom, &mut gxp);
                let gs_x = kernels::unpad_planes_grad(&gxp, c, h, w, pad, padding);
                gx[s * c * h * w..(s + 1) * c * h * w].copy_from_slice(&gs_x);
            }
        }
        if want_w {
            accumulate(grads, weight, &gw);
        }
        if want_x {
            accumulate(grads, input, &gx);
        }
        if let Some(b) = bias.filter(|&b| self.wants(b)) {
            accumulate(grads, b, &channel_sums(g, n, cout, ho * wo));
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_transpose2d_backward(
        &self,
        i: usize,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        input: usize,
        weight: usize,
        bias: Option<usize>,
        stride: usize,
        crop: usize,
    ) -> Result<()> {
        let (n, c, h, w) = self.node(input).dims4()?;
        let (_, cout, ho, wo) = self.nodes[i].value.dims4()?;
        let k = self.node(weight).shape()[2];
        let geom = Scatter {
            out_channels: cout,
            in_h: h,
            in_w: w,
            kernel: k,
            stride,
            crop,
            out_h: ho,
            out_w: wo,
        };
        let rows = cout * k * k;
        let x = self.node(input).data();
        let wt = self.node(weight).data();
        let want_w = self.wants(weight);
        let want_x = self.wants(input);
        let mut gw = vec![T::zero(); c * rows];
        let mut gx = vec![T::zero(); if want_x { x.len() } else { 0 }];
        let mut cols = vec![T::zero(); rows * h * w];
        for s in 0..n {
            let gs = &g[s * cout * ho * wo..(s + 1) * cout * ho * wo];
            kernels::gather(gs, geom, &mut cols);
            if want_w {
                let xs = &x[s * c * h * w..(s + 1) * c * h * w];
                kernels::matmul(Mat::new(xs, c, h * w), Mat::t(&cols, rows, h * w), &mut gw, true);
            }
            if want_x {
                let gxs = &mut gx[s * c * h * w..(s + 1) * c * h * w];
                kernels::matmul(Mat::new(wt, c, rows), Mat::new(&cols, rows, h * w), gxs, false);
            }
        }
        if want_w {
            accumulate(grads, weight, &gw);
        }
        if want_x {
            accumulate(grads, input, &gx);
        }
        if let Some(b) = bias.filter(|&b| self.wants(b)) {
            accumulate(grads, b, &channel_sums(g, n, cout, ho * wo));
        }
        Ok(())
    }
}

fn channel_sums<T: Real>(g: &[T], n: usize, c: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for s in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            let off = (s * c + ch) * m;
            *o = *o + g[off..off + m].iter().copied().sum::<T>();
        }
    }
    out
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], i: usize, contribution: &[T]) {
    match &mut grads[i] {
        Some(acc) => acc
            .iter_mut()
            .zip(contribution)
            .for_each(|(a, &c)| *a = *a + c),
        slot @ None => *slot = Some(contribution.to_vec()),
    }
}
