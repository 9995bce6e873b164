//! Reverse-mode differentiation over a linear tape of tensor operations.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{numel, Shape, Tensor};

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var, stride: usize, padding: usize },
    GridSample { input: Var, positions: Var },
    Sigmoid(Var),
    MeanSubtractChannels(Var),
    LeakyRelu(Var, f64),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Abs(Var),
    Square(Var),
    Concat(Var, Var),
    SliceChannels { input: Var, start: usize },
    Resize(Var),
    Sum(Var),
    SumChannels(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Tape of executed operations. Nodes are appended in execution order, so
/// the reverse pass is a single backwards sweep over the node list.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contribution) {
                *a += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input tensor. It receives gradients iff `requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad;
        self.push(tensor, Op::Leaf, needs_grad)
    }

    /// Record an input that never receives gradients.
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a `requires_grad` leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    /// Clear gradients stored on leaves.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, shape: Shape, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let value = Tensor::new(shape, data).expect("kernel produced a consistent shape");
        self.push(value, op, needs_grad)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        self.derived(t.shape(), data, op, &[x])
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let x = self.value(input);
        let wt = self.value(weight);
        let [n, in_c, h, w] = x.shape();
        let [out_c, w_in_c, kh, kw] = wt.shape();
        if w_in_c != in_c {
            return Err(Error::shape("conv2d", format!("weight expects {w_in_c} input channels, input has {in_c}")));
        }
        if self.value(bias).len() != out_c {
            return Err(Error::shape("conv2d", format!("bias has {} values for {out_c} filters", self.value(bias).len())));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let (Some(out_h), Some(out_w)) = (
            kernels::conv_output_extent(h, kh, stride, padding),
            kernels::conv_output_extent(w, kw, stride, padding),
        ) else {
            return Err(Error::shape("conv2d", format!("kernel {kh}x{kw} larger than padded input {h}x{w}")));
        };
        let geo = ConvGeometry { stride, pad: padding, in_h: h, in_w: w, out_h, out_w, kw };
        let data = kernels::conv2d_forward(x, wt, self.value(bias), &geo);
        Ok(self.derived([n, out_c, out_h, out_w], data, Op::Conv2d { input, weight, bias, stride, padding }, &[input, weight, bias]))
    }

    /// Bilinear sampling of a single-channel map at absolute `(y, x)` pairs.
    /// Coordinates are clamped to the image before interpolation.
    pub fn grid_sample_bilinear(&mut self, input: Var, positions: Var) -> Result<Var> {
        let x = self.value(input);
        let p = self.value(positions);
        let [n, c, h, w] = x.shape();
        let [pn, pc, ph, pw] = p.shape();
        if c != 1 {
            return Err(Error::shape("grid_sample_bilinear", format!("input must have one channel, has {c}")));
        }
        if pc % 2 != 0 {
            return Err(Error::shape("grid_sample_bilinear", format!("position channels must be even, got {pc}")));
        }
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::shape("grid_sample_bilinear", format!("positions {:?} vs input {:?}", p.shape(), x.shape())));
        }
        let data = kernels::grid_sample_forward(x, p);
        Ok(self.derived([n, pc / 2, h, w], data, Op::GridSample { input, positions }, &[input, positions]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
    }

    /// Subtract the per-pixel mean over channels.
    pub fn mean_subtract_channels(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let [n, c, h, w] = t.shape();
        let hw = h * w;
        let src = t.data();
        let mut data = src.to_vec();
        for b in 0..n {
            let base = b * c * hw;
            for p in 0..hw {
                let mean = (0..c).map(|ch| src[base + ch * hw + p]).sum::<f64>() / c as f64;
                for ch in 0..c {
                    data[base + ch * hw + p] -= mean;
                }
            }
        }
        self.derived(t.shape(), data, Op::MeanSubtractChannels(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, Op::LeakyRelu(x, slope), move |v| if v > 0.0 { v } else { slope * v })
    }

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op_name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(self.derived(ta.shape(), data, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, Op::Scale(x, factor), move |v| v * factor)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let [n, ca, h, w] = ta.shape();
        let [nb, cb, hb, wb] = tb.shape();
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape("concat_channels", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * hw);
        for i in 0..n {
            data.extend_from_slice(&ta.data()[i * ca * hw..(i + 1) * ca * hw]);
            data.extend_from_slice(&tb.data()[i * cb * hw..(i + 1) * cb * hw]);
        }
        Ok(self.derived([n, ca + cb, h, w], data, Op::Concat(a, b), &[a, b]))
    }

    /// Channels `[start, start + len)` of `x`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let [n, c, h, w] = t.shape();
        if start + len > c {
            return Err(Error::shape("slice_channels", format!("range {start}..{} exceeds {c} channels", start + len)));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * len * hw);
        for i in 0..n {
            data.extend_from_slice(&t.data()[(i * c + start) * hw..(i * c + start + len) * hw]);
        }
        Ok(self.derived([n, len, h, w], data, Op::SliceChannels { input: x, start }, &[x]))
    }

    /// Bilinear upsampling by an integer factor with half-pixel centers
    /// (corners not aligned).
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::shape("upsample_bilinear", "factor must be positive"));
        }
        let [_, _, h, w] = self.shape(x);
        self.resize_bilinear(x, h * factor, w * factor)
    }

    /// Half-pixel-centered bilinear resampling to `out_h x out_w`.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let t = self.value(x);
        let [n, c, h, w] = t.shape();
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return Err(Error::shape("resize_bilinear", format!("cannot resize {h}x{w} to {out_h}x{out_w}")));
        }
        if (out_h, out_w) == (h, w) {
            return Ok(self.scale(x, 1.0));
        }
        let data = kernels::resize_forward(t, out_h, out_w);
        Ok(self.derived([n, c, out_h, out_w], data, Op::Resize(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.derived([1, 1, 1, 1], vec![s], Op::Sum(x), &[x])
    }

    /// Sum over channels, keeping a singleton channel axis.
    pub fn sum_channels(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let [n, c, h, w] = t.shape();
        let hw = h * w;
        let mut data = vec![0.0; n * hw];
        for b in 0..n {
            let out = &mut data[b * hw..(b + 1) * hw];
            for ch in 0..c {
                for (o, &v) in out.iter_mut().zip(t.plane(b, ch)) {
                    *o += v;
                }
            }
        }
        self.derived([n, 1, h, w], data, Op::SumChannels(x), &[x])
    }

    /// Reverse pass from a single-element `loss`. Gradients of leaves marked
    /// `requires_grad` are added to whatever an earlier pass left there.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_shape = self.shape(loss);
        if numel(loss_shape) != 1 {
            return Err(Error::NotScalar(loss_shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let value = &mut self.nodes[i].value;
                if value.requires_grad {
                    accumulate(&mut value.grad, g);
                }
                continue;
            }
            let node = &self.nodes[i];
            let needs = |v: Var| self.nodes[v.0].needs_grad;
            let mut emit = |v: Var, contribution: Vec<f64>| accumulate(&mut grads[v.0], contribution);
            match node.op {
                Op::Leaf => unreachable!("leaves handled above"),
                Op::Conv2d { input, weight, bias, stride, padding } => {
                    let x = self.value(input);
                    let wt = self.value(weight);
                    let [n, _, h, w] = x.shape();
                    let [out_c, _, _, kw] = wt.shape();
                    let [_, _, out_h, out_w] = node.value.shape();
                    let geo = ConvGeometry { stride, pad: padding, in_h: h, in_w: w, out_h, out_w, kw };
                    if needs(input) {
                        emit(input, kernels::conv2d_grad_input(wt, &g, n, &geo));
                    }
                    if needs(weight) {
                        emit(weight, kernels::conv2d_grad_weight(x, wt.shape(), &g, &geo));
                    }
                    if needs(bias) {
                        emit(bias, kernels::conv2d_grad_bias(&g, n, out_c, out_h * out_w));
                    }
                }
                Op::GridSample { input, positions } => {
                    let (gi, gp) = kernels::grid_sample_backward(self.value(input), self.value(positions), &g);
                    if needs(input) {
                        emit(input, gi);
                    }
                    if needs(positions) {
                        emit(positions, gp);
                    }
                }
                Op::Sigmoid(x) => {
                    let out = node.value.data();
                    emit(x, g.iter().zip(out).map(|(g, s)| g * s * (1.0 - s)).collect());
                }
                Op::MeanSubtractChannels(x) => {
                    let [n, c, h, w] = node.value.shape();
                    let hw = h * w;
                    let mut gx = g.clone();
                    for b in 0..n {
                        let base = b * c * hw;
                        for p in 0..hw {
                            let mean = (0..c).map(|ch| g[base + ch * hw + p]).sum::<f64>() / c as f64;
                            for ch in 0..c {
                                gx[base + ch * hw + p] -= mean;
                            }
                        }
                    }
                    emit(x, gx);
                }
                Op::LeakyRelu(x, slope) => {
                    let input = self.value(x).data();
                    emit(x, g.iter().zip(input).map(|(g, &v)| if v > 0.0 { *g } else { g * slope }).collect());
                }
                Op::Add(a, b) => {
                    if needs(a) {
                        emit(a, g.clone());
                    }
                    if needs(b) {
                        emit(b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if needs(a) {
                        emit(a, g.clone());
                    }
                    if needs(b) {
                        emit(b, g.iter().map(|v| -v).collect());
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(a).data(), self.value(b).data());
                    if needs(a) {
                        emit(a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                    }
                    if needs(b) {
                        emit(b, g.iter().zip(va).map(|(g, x)| g * x).collect());
                    }
                }
                Op::Scale(x, factor) => emit(x, g.iter().map(|v| v * factor).collect()),
                Op::Abs(x) => {
                    let input = self.value(x).data();
                    emit(x, g.iter().zip(input).map(|(g, &v)| if v > 0.0 { *g } else if v < 0.0 { -g } else { 0.0 }).collect());
                }
                Op::Square(x) => {
                    let input = self.value(x).data();
                    emit(x, g.iter().zip(input).map(|(g, v)| 2.0 * g * v).collect());
                }
                Op::Concat(a, b) => {
                    let [n, ca, h, w] = self.shape(a);
                    let cb = self.shape(b)[1];
                    let hw = h * w;
                    let (mut ga, mut gb) = (Vec::with_capacity(n * ca * hw), Vec::with_capacity(n * cb * hw));
                    for chunk in g.chunks((ca + cb) * hw) {
                        ga.extend_from_slice(&chunk[..ca * hw]);
                        gb.extend_from_slice(&chunk[ca * hw..]);
                    }
                    if needs(a) {
                        emit(a, ga);
                    }
                    if needs(b) {
                        emit(b, gb);
                    }
                }
                Op::SliceChannels { input, start } => {
                    let [n, c, h, w] = self.shape(input);
                    let len = node.value.channels();
                    let hw = h * w;
                    let mut gx = vec![0.0; n * c * hw];
                    for b in 0..n {
                        gx[(b * c + start) * hw..(b * c + start + len) * hw]
                            .copy_from_slice(&g[b * len * hw..(b + 1) * len * hw]);
                    }
                    emit(input, gx);
                }
                Op::Resize(input) => {
                    let [_, _, oh, ow] = node.value.shape();
                    emit(input, kernels::resize_backward(self.shape(input), oh, ow, &g));
                }
                Op::Sum(x) => emit(x, vec![g[0]; self.value(x).len()]),
                Op::SumChannels(x) => {
                    let [n, c, h, w] = self.shape(x);
                    let hw = h * w;
                    let mut gx = Vec::with_capacity(n * c * hw);
                    for b in 0..n {
                        for _ in 0..c {
                            gx.extend_from_slice(&g[b * hw..(b + 1) * hw]);
                        }
                    }
                    emit(x, gx);
                }
            }
        }
        Ok(())
    }
}
