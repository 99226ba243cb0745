//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value. `backward` walks the
//! tape in reverse and accumulates gradients only through nodes that depend
//! on a leaf created with `requires_grad = true`.

use crate::conv::{col2im, im2col, ConvGeom};
use crate::{Result, Scalar, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    Relu(Var),
    LeakyRelu(Var, T),
    Silu(Var),
    Sigmoid(Var),
    Upsample2(Var),
    ConcatChannels(Vec<Var>),
    ResidualSigmoid {
        x: Var,
        h: Var,
        eps: T,
    },
    LogClamp {
        x: Var,
        eps: T,
    },
    Mean(Var),
    L1Mean(Var, Var),
    MseMean(Var, Var),
    WeightedSum(Vec<(Var, T)>),
    Fused {
        inputs: Vec<Var>,
        grads: Vec<Tensor<T>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one forward computation.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
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

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// 2-D convolution. `x`: `[n, c, h, w]`, `w`: `[o, c, k, k]`, `b`: `[o]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (o, wc, kh, kw) = self.value(w).dims4()?;
        if wc != c || kh != kw {
            return Err(TensorError::Shape(format!(
                "conv2d weight {:?} incompatible with input {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            )));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [o] {
                return Err(TensorError::Shape(format!("conv2d bias {:?}, expected [{o}]", self.value(b).shape())));
            }
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw || stride == 0 {
            return Err(TensorError::Shape(format!("conv2d kernel {kh} too large for {h}x{wd} (pad {pad})")));
        }
        let g = ConvGeom {
            in_c: c,
            in_h: h,
            in_w: wd,
            kernel: kh,
            stride,
            pad,
        };
        let (oh, ow) = (g.out_h(), g.out_w());
        let (kk, hw) = (g.col_rows(), g.col_cols());
        let mut out = Tensor::zeros(&[n, o, oh, ow]);
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * hw] };
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            let od = out.data_mut();
            for i in 0..n {
                let xi = &xv[i * c * h * wd..(i + 1) * c * h * wd];
                let oi = &mut od[i * o * hw..(i + 1) * o * hw];
                let src: &[T] = if g.is_pointwise() {
                    xi
                } else {
                    im2col(&g, xi, &mut cols);
                    &cols
                };
                T::gemm(o, kk, hw, wv, false, src, false, oi, false);
                if let Some(bv) = bv {
                    for (ch, plane) in oi.chunks_mut(hw).enumerate() {
                        let bias = bv[ch];
                        plane.iter_mut().for_each(|v| *v += bias);
                    }
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= v;
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(&[x]);
        self.push(out, Op::Affine(x, scale), rg)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.affine(x, s, T::zero())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { slope * v });
        let rg = self.rg(&[x]);
        self.push(out, Op::LeakyRelu(x, slope), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        let rg = self.rg(&[x]);
        self.push(out, Op::Silu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// Nearest-neighbour 2× spatial upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        {
            let src = self.value(x).data();
            let dst = out.data_mut();
            for p in 0..n * c {
                let s = &src[p * h * w..(p + 1) * h * w];
                let d = &mut dst[p * 4 * h * w..(p + 1) * 4 * h * w];
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        d[y * 2 * w + xx] = s[(y / 2) * w + xx / 2];
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Upsample2(x), rg))
    }

    /// Concatenation along the channel axis of rank-4 tensors.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let (n, _, h, w) = self.value(parts[0]).dims4()?;
        let mut total_c = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(TensorError::Shape(format!(
                    "concat_channels: {:?} vs {:?}",
                    self.value(p).shape(),
                    self.value(parts[0]).shape()
                )));
            }
            total_c += pc;
        }
        let mut out = Tensor::zeros(&[n, total_c, h, w]);
        {
            let dst = out.data_mut();
            let mut c0 = 0;
            for &p in parts {
                let pc = self.value(p).shape()[1];
                let src = self.value(p).data();
                for i in 0..n {
                    let s = &src[i * pc * h * w..(i + 1) * pc * h * w];
                    let off = (i * total_c + c0) * h * w;
                    dst[off..off + pc * h * w].copy_from_slice(s);
                }
                c0 += pc;
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatChannels(parts.to_vec()), rg))
    }

    /// `sigmoid(logit(clamp(x, eps, 1 - eps)) + h)`: a correction `h` applied
    /// in logit space. With `h = 0` the output equals the clamped input.
    pub fn residual_sigmoid(&mut self, x: Var, h: Var, eps: T) -> Result<Var> {
        self.same_shape(x, h, "residual_sigmoid")?;
        let one = T::one();
        let mut out = self.value(x).clone();
        for (o, &hv) in out.data_mut().iter_mut().zip(self.value(h).data()) {
            let xc = o.max(eps).min(one - eps);
            *o = sigmoid((xc / (one - xc)).ln() + hv);
        }
        let rg = self.rg(&[x, h]);
        Ok(self.push(out, Op::ResidualSigmoid { x, h, eps }, rg))
    }

    /// Elementwise `ln(clamp(x, eps, 1 - eps))`.
    pub fn log_clamp(&mut self, x: Var, eps: T) -> Var {
        let one = T::one();
        let out = self.value(x).map(|v| v.max(eps).min(one - eps).ln());
        let rg = self.rg(&[x]);
        self.push(out, Op::LogClamp { x, eps }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = T::from_f64(t.numel() as f64);
        let s: T = t.data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s / n), Op::Mean(x), rg)
    }

    /// Mean absolute difference.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "l1_mean")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let s: T = ta.data().iter().zip(tb.data()).map(|(&x, &y)| (x - y).abs()).sum();
        let v = s / T::from_f64(ta.numel() as f64);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(v), Op::L1Mean(a, b), rg))
    }

    /// Mean squared difference.
    pub fn mse_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse_mean")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let s: T = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let v = s / T::from_f64(ta.numel() as f64);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(v), Op::MseMean(a, b), rg))
    }

    /// `Σ wᵢ·xᵢ` over equally shaped nodes. Terms with weight exactly zero
    /// receive no gradient.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let first = terms
            .first()
            .ok_or_else(|| TensorError::Shape("weighted_sum of zero terms".into()))?
            .0;
        let mut out = Tensor::zeros(self.value(first).shape());
        for &(v, w) in terms {
            self.same_shape(first, v, "weighted_sum")?;
            for (o, &x) in out.data_mut().iter_mut().zip(self.value(v).data()) {
                *o += w * x;
            }
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        Ok(self.push(out, Op::WeightedSum(terms.to_vec()), rg))
    }

    /// Scalar-valued op whose local gradients were computed by the caller.
    /// `grads[i]` is `d value / d inputs[i]`.
    pub fn fused_scalar(&mut self, inputs: &[Var], value: T, grads: Vec<Tensor<T>>) -> Result<Var> {
        if inputs.len() != grads.len() {
            return Err(TensorError::Shape("fused_scalar: inputs/grads length mismatch".into()));
        }
        for (&v, g) in inputs.iter().zip(&grads) {
            if self.value(v).shape() != g.shape() {
                return Err(TensorError::Shape(format!(
                    "fused_scalar: grad {:?} for input {:?}",
                    g.shape(),
                    self.value(v).shape()
                )));
            }
        }
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor::scalar(value),
            Op::Fused {
                inputs: inputs.to_vec(),
                grads,
            },
            rg,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Shape(format!(
                "backward needs a scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Grads { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let zero = T::zero();
        let one = T::one();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let (x, w) = (*x, *w);
                let xt = self.value(x);
                let wt = self.value(w);
                let (n, c, h, wd) = xt.dims4()?;
                let (o, _, k, _) = wt.dims4()?;
                let geom = ConvGeom {
                    in_c: c,
                    in_h: h,
                    in_w: wd,
                    kernel: k,
                    stride: *stride,
                    pad: *pad,
                };
                let (kk, hw) = (geom.col_rows(), geom.col_cols());
                let need_x = self.nodes[x.0].requires_grad;
                let need_w = self.nodes[w.0].requires_grad;
                let gd = g.data();
                if let Some(b) = b {
                    if self.nodes[b.0].requires_grad {
                        let mut gb = Tensor::zeros(&[o]);
                        for i in 0..n {
                            for (ch, acc) in gb.data_mut().iter_mut().enumerate() {
                                let off = (i * o + ch) * hw;
                                *acc += gd[off..off + hw].iter().copied().sum::<T>();
                            }
                        }
                        self.accumulate(grads, *b, gb);
                    }
                }
                let mut gw = need_w.then(|| Tensor::zeros(wt.shape()));
                let mut gx = need_x.then(|| Tensor::zeros(xt.shape()));
                let mut cols = vec![zero; kk * hw];
                let mut dcols = vec![zero; kk * hw];
                for i in 0..n {
                    let gi = &gd[i * o * hw..(i + 1) * o * hw];
                    let xi = &xt.data()[i * c * h * wd..(i + 1) * c * h * wd];
                    if let Some(gw) = gw.as_mut() {
                        let src: &[T] = if geom.is_pointwise() {
                            xi
                        } else {
                            im2col(&geom, xi, &mut cols);
                            &cols
                        };
                        T::gemm(o, hw, kk, gi, false, src, true, gw.data_mut(), true);
                    }
                    if let Some(gx) = gx.as_mut() {
                        let dxi = &mut gx.data_mut()[i * c * h * wd..(i + 1) * c * h * wd];
                        if geom.is_pointwise() {
                            T::gemm(kk, o, hw, wt.data(), true, gi, false, dxi, true);
                        } else {
                            T::gemm(kk, o, hw, wt.data(), true, gi, false, &mut dcols, false);
                            col2im(&geom, &dcols, dxi);
                        }
                    }
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, w, gw);
                }
                if let Some(gx) = gx {
                    self.accumulate(grads, x, gx);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    let mut ga = g.clone();
                    ga.data_mut().iter_mut().zip(vb.data()).for_each(|(x, &y)| *x *= y);
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = g.clone();
                    gb.data_mut().iter_mut().zip(va.data()).for_each(|(x, &y)| *x *= y);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Affine(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::Relu(x) => {
                let mut gx = g.clone();
                for (d, &y) in gx.data_mut().iter_mut().zip(node.value.data()) {
                    if y <= zero {
                        *d = zero;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LeakyRelu(x, slope) => {
                let mut gx = g.clone();
                for (d, &xv) in gx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if xv <= zero {
                        *d *= *slope;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Silu(x) => {
                let mut gx = g.clone();
                for (d, &xv) in gx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    let s = sigmoid(xv);
                    *d *= s * (one + xv * (one - s));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let mut gx = g.clone();
                for (d, &y) in gx.data_mut().iter_mut().zip(node.value.data()) {
                    *d *= y * (one - y);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Upsample2(x) => {
                let xt = self.value(*x);
                let (n, c, h, w) = xt.dims4()?;
                let mut gx = Tensor::zeros(xt.shape());
                let gd = g.data();
                let dst = gx.data_mut();
                for p in 0..n * c {
                    let s = &gd[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let d = &mut dst[p * h * w..(p + 1) * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            d[(y / 2) * w + xx / 2] += s[y * 2 * w + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatChannels(parts) => {
                let (n, total_c, h, w) = g.dims4()?;
                let mut c0 = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[1];
                    if self.nodes[p.0].requires_grad {
                        let mut gp = Tensor::zeros(&[n, pc, h, w]);
                        for i in 0..n {
                            let off = (i * total_c + c0) * h * w;
                            gp.data_mut()[i * pc * h * w..(i + 1) * pc * h * w]
                                .copy_from_slice(&g.data()[off..off + pc * h * w]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    c0 += pc;
                }
            }
            Op::ResidualSigmoid { x, h, eps } => {
                let y = node.value.data();
                if self.nodes[h.0].requires_grad {
                    let mut gh = g.clone();
                    for (d, &yv) in gh.data_mut().iter_mut().zip(y) {
                        *d *= yv * (one - yv);
                    }
                    self.accumulate(grads, *h, gh);
                }
                if self.nodes[x.0].requires_grad {
                    let mut gx = g.clone();
                    for ((d, &yv), &xv) in gx.data_mut().iter_mut().zip(y).zip(self.value(*x).data()) {
                        if xv > *eps && xv < one - *eps {
                            *d *= yv * (one - yv) / (xv * (one - xv));
                        } else {
                            *d = zero;
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::LogClamp { x, eps } => {
                let mut gx = g.clone();
                for (d, &xv) in gx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if xv > *eps && xv < one - *eps {
                        *d = *d / xv;
                    } else {
                        *d = zero;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Mean(x) => {
                let xt = self.value(*x);
                let v = g.item() / T::from_f64(xt.numel() as f64);
                self.accumulate(grads, *x, Tensor::full(xt.shape(), v));
            }
            Op::L1Mean(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let s = g.item() / T::from_f64(ta.numel() as f64);
                let mut ga = Tensor::zeros(ta.shape());
                for ((d, &x), &y) in ga.data_mut().iter_mut().zip(ta.data()).zip(tb.data()) {
                    *d = if x > y {
                        s
                    } else if x < y {
                        -s
                    } else {
                        zero
                    };
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, *b, ga.map(|v| -v));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::MseMean(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let s = T::from_f64(2.0) * g.item() / T::from_f64(ta.numel() as f64);
                let mut ga = Tensor::zeros(ta.shape());
                for ((d, &x), &y) in ga.data_mut().iter_mut().zip(ta.data()).zip(tb.data()) {
                    *d = s * (x - y);
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, *b, ga.map(|v| -v));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if w != zero && self.nodes[v.0].requires_grad {
                        self.accumulate(grads, v, g.map(|d| d * w));
                    }
                }
            }
            Op::Fused { inputs, grads: local } => {
                let up = g.item();
                for (&v, lg) in inputs.iter().zip(local) {
                    if self.nodes[v.0].requires_grad {
                        self.accumulate(grads, v, lg.map(|d| d * up));
                    }
                }
            }
        }
        Ok(())
    }
}
