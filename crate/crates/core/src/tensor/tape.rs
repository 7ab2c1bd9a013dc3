use super::kernels::{col2im, conv_out_dim, gemm, im2col, Layout};
use super::Tensor;
use crate::error::{invalid, shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Vector-Jacobian product of an operation defined outside this module.
///
/// `backward` receives the operation's inputs, its output and the gradient
/// flowing into the output, and returns one gradient per input (or `None`
/// when that input is not differentiated).
pub trait Backward {
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &[f64],
    ) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
    },
    MatMul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    AddRowBias(Var, Var),
    ChannelGate(Var, Var),
    ConcatChannels(Vec<Var>),
    ConcatCols(Vec<Var>),
    AdaptiveAvgPool(Var),
    Reshape(Var),
    Crop(Var),
    Sum(Var),
    Mean(Var),
    Custom(Vec<Var>, Box<dyn Backward>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of executed operations.
///
/// Every operation appends one node; [`Tape::backward`] walks the nodes in
/// reverse order, visiting each exactly once. Gradients accumulate into the
/// `grad` slot of every differentiable node until [`Tape::zero_grad`] is
/// called.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dims3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => shape_err(format!("{what} must be 3-D [C,H,W], got {s:?}")),
    }
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        ref s => shape_err(format!("{what} must be 2-D, got {s:?}")),
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(format!(
            "{what}: operand shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it is differentiated iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf)
    }

    /// Records a leaf that is never differentiated.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.with_grad(false), Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.zero_grad());
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_derived(&mut self, shape: &[usize], data: Vec<f64>, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|v| self.requires_grad(*v));
        let value = Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad,
            grad: None,
        };
        self.push(value, op)
    }

    /// Records an operation whose gradient is supplied by `op`.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor,
        op: impl Backward + 'static,
    ) -> Var {
        let shape = output.shape().to_vec();
        self.push_derived(&shape, output.data, inputs, Op::Custom(inputs.to_vec(), Box::new(op)))
    }

    /// 2-D convolution of `input: [C_in,H,W]` with `weight: [C_out,C_in,k,k]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (c_in, h, w) = dims3(self.value(input), "conv2d input")?;
        let (c_out, wc_in, kh, kw) = match *self.shape(weight) {
            [a, b, c, d] => (a, b, c, d),
            ref s => return shape_err(format!("conv2d weight must be 4-D, got {s:?}")),
        };
        if wc_in != c_in {
            return shape_err(format!(
                "conv2d: input has {c_in} channels but weight expects {wc_in}"
            ));
        }
        if kh != kw {
            return shape_err(format!("conv2d: kernel must be square, got {kh}x{kw}"));
        }
        if self.shape(bias) != [c_out] {
            return shape_err(format!(
                "conv2d: bias shape {:?} does not match {c_out} output channels",
                self.shape(bias)
            ));
        }
        if stride == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
            return shape_err(format!(
                "conv2d: kernel {kh} with padding {padding} does not fit input {h}x{w}"
            ));
        }
        let ho = conv_out_dim(h, kh, stride, padding);
        let wo = conv_out_dim(w, kw, stride, padding);
        let plane = ho * wo;
        let x = self.data(input);
        let cols = im2col(x, c_in, h, w, kh, stride, padding, ho, wo);
        let mut out = vec![0.0; c_out * plane];
        for (o, b) in out.chunks_mut(plane).zip(self.data(bias)) {
            o.fill(*b);
        }
        let kk = c_in * kh * kw;
        gemm(
            c_out,
            kk,
            plane,
            self.data(weight),
            Layout::Normal,
            &cols,
            Layout::Normal,
            1.0,
            &mut out,
        );
        Ok(self.push_derived(
            &[c_out, ho, wo],
            out,
            &[input, weight, bias],
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
        ))
    }

    /// Transposed convolution with `weight: [C_in,C_out,k,k]` and no padding.
    /// Output spatial size is `(H-1)*stride + k`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
    ) -> Result<Var> {
        let (c_in, h, w) = dims3(self.value(input), "conv_transpose2d input")?;
        let (wc_in, c_out, kh, kw) = match *self.shape(weight) {
            [a, b, c, d] => (a, b, c, d),
            ref s => {
                return shape_err(format!("conv_transpose2d weight must be 4-D, got {s:?}"))
            }
        };
        if wc_in != c_in {
            return shape_err(format!(
                "conv_transpose2d: input has {c_in} channels but weight expects {wc_in}"
            ));
        }
        if kh != kw || stride == 0 {
            return shape_err("conv_transpose2d: kernel must be square and stride positive");
        }
        if self.shape(bias) != [c_out] {
            return shape_err(format!(
                "conv_transpose2d: bias shape {:?} does not match {c_out} output channels",
                self.shape(bias)
            ));
        }
        let ho = (h - 1) * stride + kh;
        let wo = (w - 1) * stride + kw;
        let kk = c_out * kh * kw;
        let mut cols = vec![0.0; kk * h * w];
        gemm(
            kk,
            c_in,
            h * w,
            self.data(weight),
            Layout::Transposed,
            self.data(input),
            Layout::Normal,
            0.0,
            &mut cols,
        );
        let mut out = col2im(&cols, c_out, ho, wo, kh, stride, 0, h, w);
        for (o, b) in out.chunks_mut(ho * wo).zip(self.data(bias)) {
            o.iter_mut().for_each(|v| *v += b);
        }
        Ok(self.push_derived(
            &[c_out, ho, wo],
            out,
            &[input, weight, bias],
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                stride,
            },
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul lhs")?;
        let (k2, n) = dims2(self.value(b), "matmul rhs")?;
        if k != k2 {
            return shape_err(format!("matmul: [{m},{k}] x [{k2},{n}] is undefined"));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.data(a),
            Layout::Normal,
            self.data(b),
            Layout::Normal,
            0.0,
            &mut out,
        );
        Ok(self.push_derived(&[m, n], out, &[a, b], Op::MatMul(a, b)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push_derived(&shape, out, &[x], Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push_derived(&shape, out, &[x], Op::Sigmoid(x))
    }

    /// Softmax over all elements of `x`.
    pub fn softmax(&mut self, x: Var) -> Var {
        let out = softmax(self.data(x));
        let shape = self.shape(x).to_vec();
        self.push_derived(&shape, out, &[x], Op::Softmax(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_derived(&shape, out, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_derived(&shape, out, &[a, b], Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "hadamard")?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_derived(&shape, out, &[a, b], Op::Hadamard(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.data(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push_derived(&shape, out, &[x], Op::Scale(x, factor))
    }

    /// Elementwise product with a non-differentiated array of the same size.
    pub fn mul_const(&mut self, x: Var, factor: Vec<f64>) -> Result<Var> {
        if factor.len() != self.value(x).numel() {
            return shape_err(format!(
                "mul_const: {} factors for a tensor of shape {:?}",
                factor.len(),
                self.shape(x)
            ));
        }
        let out = self.data(x).iter().zip(&factor).map(|(a, b)| a * b).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push_derived(&shape, out, &[x], Op::MulConst(x, factor)))
    }

    /// `x: [m,n]` plus `bias: [n]` added to every row.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(x), "add_row_bias input")?;
        if self.shape(bias) != [n] {
            return shape_err(format!(
                "add_row_bias: bias {:?} does not match {n} columns",
                self.shape(bias)
            ));
        }
        let b = self.data(bias);
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
        }
        Ok(self.push_derived(&[m, n], out, &[x, bias], Op::AddRowBias(x, bias)))
    }

    /// Multiplies every channel of `x: [C,H,W]` by the map `gate: [1,H,W]`.
    pub fn channel_gate(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (c, h, w) = dims3(self.value(x), "channel_gate input")?;
        if self.shape(gate) != [1, h, w] {
            return shape_err(format!(
                "channel_gate: gate {:?} does not match spatial size {h}x{w}",
                self.shape(gate)
            ));
        }
        let g = self.data(gate);
        let mut out = self.data(x).to_vec();
        for plane in out.chunks_mut(h * w) {
            plane.iter_mut().zip(g).for_each(|(v, a)| *v *= a);
        }
        Ok(self.push_derived(&[c, h, w], out, &[x, gate], Op::ChannelGate(x, gate)))
    }

    /// Concatenates tensors along their first axis; trailing dims must agree.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return shape_err("concat_channels: no inputs");
        };
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for p in parts {
            let s = self.shape(*p);
            if s.is_empty() || s[1..] != tail[..] {
                return shape_err(format!(
                    "concat_channels: shape {s:?} does not match trailing dims {tail:?}"
                ));
            }
            lead += s[0];
            out.extend_from_slice(self.data(*p));
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        Ok(self.push_derived(&shape, out, parts, Op::ConcatChannels(parts.to_vec())))
    }

    /// Concatenates 2-D tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return shape_err("concat_cols: no inputs");
        };
        let (rows, _) = dims2(self.value(*first), "concat_cols input")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = dims2(self.value(*p), "concat_cols input")?;
            if r != rows {
                return shape_err(format!("concat_cols: row counts {rows} and {r} differ"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &c) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(*p)[r * c..(r + 1) * c]);
            }
        }
        Ok(self.push_derived(&[rows, total], out, parts, Op::ConcatCols(parts.to_vec())))
    }

    /// Global average pooling `[C,H,W] -> [C,1,1]`.
    pub fn adaptive_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = dims3(self.value(x), "adaptive_avg_pool input")?;
        let n = (h * w) as f64;
        let out = self
            .data(x)
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / n)
            .collect();
        Ok(self.push_derived(&[c, 1, 1], out, &[x], Op::AdaptiveAvgPool(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return shape_err(format!(
                "reshape: {:?} cannot become {shape:?}",
                self.shape(x)
            ));
        }
        let out = self.data(x).to_vec();
        Ok(self.push_derived(shape, out, &[x], Op::Reshape(x)))
    }

    /// Keeps the top-left `h×w` window of every channel of `x: [C,H,W]`.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (c, hh, ww) = dims3(self.value(x), "crop input")?;
        if h > hh || w > ww {
            return shape_err(format!("crop: {h}x{w} exceeds input {hh}x{ww}"));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                let row = (ch * hh + y) * ww;
                out.extend_from_slice(&src[row..row + w]);
            }
        }
        Ok(self.push_derived(&[c, h, w], out, &[x], Op::Crop(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push_derived(&[1], vec![s], &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let m = d.iter().sum::<f64>() / d.len().max(1) as f64;
        self.push_derived(&[1], vec![m], &[x], Op::Mean(x))
    }

    /// Back-propagates from the scalar `loss`, accumulating into the `grad`
    /// slot of every differentiable node that `loss` depends on.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return shape_err(format!(
                "backward: loss must be a scalar, got shape {:?}",
                self.shape(loss)
            ));
        }
        if !self.requires_grad(loss) {
            return invalid("backward: loss does not depend on any differentiable tensor");
        }
        let mut adjoints: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adjoints[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adjoints[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.value.requires_grad() {
                continue;
            }
            for (input, grad) in self.vjp(&node.op, &node.value, &g)? {
                match &mut adjoints[input.0] {
                    Some(acc) => add_into(acc, &grad),
                    slot @ None => *slot = Some(grad),
                }
            }
            self.nodes[i].value.accumulate_grad(&g);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.requires_grad(v)
    }

    fn vjp(&self, op: &Op, out: &Tensor, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let mut grads = Vec::new();
        match op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let x = self.value(*input);
                let wt = self.value(*weight);
                let (c_in, h, w) = dims3(x, "conv2d input")?;
                let (c_out, k) = (wt.shape()[0], wt.shape()[2]);
                let (ho, wo) = (out.shape()[1], out.shape()[2]);
                let plane = ho * wo;
                let kk = c_in * k * k;
                if self.wants(*weight) {
                    let cols = im2col(x.data(), c_in, h, w, k, *stride, *padding, ho, wo);
                    let mut dw = vec![0.0; c_out * kk];
                    gemm(
                        c_out,
                        plane,
                        kk,
                        g,
                        Layout::Normal,
                        &cols,
                        Layout::Transposed,
                        0.0,
                        &mut dw,
                    );
                    grads.push((*weight, dw));
                }
                if self.wants(*bias) {
                    grads.push((*bias, g.chunks(plane).map(|p| p.iter().sum()).collect()));
                }
                if self.wants(*input) {
                    let mut dcols = vec![0.0; kk * plane];
                    gemm(
                        kk,
                        c_out,
                        plane,
                        wt.data(),
                        Layout::Transposed,
                        g,
                        Layout::Normal,
                        0.0,
                        &mut dcols,
                    );
                    grads.push((
                        *input,
                        col2im(&dcols, c_in, h, w, k, *stride, *padding, ho, wo),
                    ));
                }
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                stride,
            } => {
                let x = self.value(*input);
                let wt = self.value(*weight);
                let (c_in, h, w) = dims3(x, "conv_transpose2d input")?;
                let (c_out, k) = (wt.shape()[1], wt.shape()[2]);
                let (ho, wo) = (out.shape()[1], out.shape()[2]);
                let kk = c_out * k * k;
                let dcols = im2col(g, c_out, ho, wo, k, *stride, 0, h, w);
                if self.wants(*weight) {
                    let mut dw = vec![0.0; c_in * kk];
                    gemm(
                        c_in,
                        h * w,
                        kk,
                        x.data(),
                        Layout::Normal,
                        &dcols,
                        Layout::Transposed,
                        0.0,
                        &mut dw,
                    );
                    grads.push((*weight, dw));
                }
                if self.wants(*bias) {
                    grads.push((
                        *bias,
                        g.chunks(ho * wo).map(|p| p.iter().sum()).collect(),
                    ));
                }
                if self.wants(*input) {
                    let mut dx = vec![0.0; c_in * h * w];
                    gemm(
                        c_in,
                        kk,
                        h * w,
                        wt.data(),
                        Layout::Normal,
                        &dcols,
                        Layout::Normal,
                        0.0,
                        &mut dx,
                    );
                    grads.push((*input, dx));
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.value(*a), "matmul lhs")?;
                let n = self.shape(*b)[1];
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        g,
                        Layout::Normal,
                        self.data(*b),
                        Layout::Transposed,
                        0.0,
                        &mut da,
                    );
                    grads.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        self.data(*a),
                        Layout::Transposed,
                        g,
                        Layout::Normal,
                        0.0,
                        &mut db,
                    );
                    grads.push((*b, db));
                }
            }
            Op::Relu(x) => {
                let d = self
                    .data(*x)
                    .iter()
                    .zip(g)
                    .map(|(v, gg)| if *v > 0.0 { *gg } else { 0.0 })
                    .collect();
                grads.push((*x, d));
            }
            Op::Sigmoid(x) => {
                let d = out
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(s, gg)| gg * s * (1.0 - s))
                    .collect();
                grads.push((*x, d));
            }
            Op::Softmax(x) => {
                let s = out.data();
                let dot: f64 = s.iter().zip(g).map(|(a, b)| a * b).sum();
                grads.push((*x, s.iter().zip(g).map(|(si, gi)| si * (gi - dot)).collect()));
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    grads.push((*a, g.to_vec()));
                }
                if self.wants(*b) {
                    grads.push((*b, g.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    grads.push((*a, g.to_vec()));
                }
                if self.wants(*b) {
                    grads.push((*b, g.iter().map(|v| -v).collect()));
                }
            }
            Op::Hadamard(a, b) => {
                if self.wants(*a) {
                    grads.push((*a, g.iter().zip(self.data(*b)).map(|(x, y)| x * y).collect()));
                }
                if self.wants(*b) {
                    grads.push((*b, g.iter().zip(self.data(*a)).map(|(x, y)| x * y).collect()));
                }
            }
            Op::Scale(x, f) => grads.push((*x, g.iter().map(|v| v * f).collect())),
            Op::MulConst(x, f) => grads.push((*x, g.iter().zip(f).map(|(a, b)| a * b).collect())),
            Op::AddRowBias(x, bias) => {
                if self.wants(*x) {
                    grads.push((*x, g.to_vec()));
                }
                if self.wants(*bias) {
                    let n = self.shape(*bias)[0];
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        add_into(&mut db, row);
                    }
                    grads.push((*bias, db));
                }
            }
            Op::ChannelGate(x, gate) => {
                let plane = self.data(*gate).len();
                if self.wants(*x) {
                    let a = self.data(*gate);
                    let mut dx = g.to_vec();
                    for p in dx.chunks_mut(plane) {
                        p.iter_mut().zip(a).for_each(|(v, s)| *v *= s);
                    }
                    grads.push((*x, dx));
                }
                if self.wants(*gate) {
                    let mut da = vec![0.0; plane];
                    for (gp, xp) in g.chunks(plane).zip(self.data(*x).chunks(plane)) {
                        for ((d, gg), xx) in da.iter_mut().zip(gp).zip(xp) {
                            *d += gg * xx;
                        }
                    }
                    grads.push((*gate, da));
                }
            }
            Op::ConcatChannels(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    if self.wants(*p) {
                        grads.push((*p, g[off..off + n].to_vec()));
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.shape()[1];
                let mut col = 0;
                for p in parts {
                    let (rows, c) = dims2(self.value(*p), "concat_cols input")?;
                    if self.wants(*p) {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + col..r * total + col + c]);
                        }
                        grads.push((*p, d));
                    }
                    col += c;
                }
            }
            Op::AdaptiveAvgPool(x) => {
                let (_, h, w) = dims3(self.value(*x), "adaptive_avg_pool input")?;
                let n = h * w;
                let d = g
                    .iter()
                    .flat_map(|v| std::iter::repeat_n(v / n as f64, n))
                    .collect();
                grads.push((*x, d));
            }
            Op::Reshape(x) => grads.push((*x, g.to_vec())),
            Op::Crop(x) => {
                let (c, hh, ww) = dims3(self.value(*x), "crop input")?;
                let (h, w) = (out.shape()[1], out.shape()[2]);
                let mut d = vec![0.0; c * hh * ww];
                for ch in 0..c {
                    for y in 0..h {
                        let dst = (ch * hh + y) * ww;
                        let src = (ch * h + y) * w;
                        d[dst..dst + w].copy_from_slice(&g[src..src + w]);
                    }
                }
                grads.push((*x, d));
            }
            Op::Sum(x) => grads.push((*x, vec![g[0]; self.value(*x).numel()])),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                grads.push((*x, vec![g[0] / n as f64; n]));
            }
            Op::Custom(inputs, backward) => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let result = backward.backward(&values, out, g);
                if result.len() != inputs.len() {
                    return Err(Error::Shape(format!(
                        "custom op returned {} gradients for {} inputs",
                        result.len(),
                        inputs.len()
                    )));
                }
                for (v, d) in inputs.iter().zip(result) {
                    if let Some(d) = d {
                        if self.wants(*v) {
                            grads.push((*v, d));
                        }
                    }
                }
            }
        }
        Ok(grads)
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of a slice.
pub(crate) fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_tape_gradients;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[1, 5, 5], 1.0));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = t.constant(Tensor::new(&[1, 1, 3, 3], k).unwrap());
        let b = t.constant(Tensor::zeros(&[1]));
        let y = t.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(t.shape(y), &[1, 5, 5]);
        assert!(t.data(y).iter().all(|v| *v == 1.0));
    }

    #[test]
    fn strided_conv_shape_follows_formula() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[3, 64, 512]));
        let w = t.constant(Tensor::zeros(&[32, 3, 3, 3]));
        let b = t.constant(Tensor::zeros(&[32]));
        let y = t.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(t.shape(y), &[32, 32, 256]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[2, 5, 5]));
        let w = t.constant(Tensor::zeros(&[4, 3, 3, 3]));
        let b = t.constant(Tensor::zeros(&[4]));
        let err = t.conv2d(x, w, b, 1, 1).unwrap_err();
        assert!(err.to_string().contains("2 channels"), "{err}");
    }

    #[test]
    fn transpose_conv_doubles_spatial_size() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[8, 32, 256]));
        let w = t.constant(Tensor::zeros(&[8, 4, 2, 2]));
        let b = t.constant(Tensor::zeros(&[4]));
        let y = t.conv_transpose2d(x, w, b, 2).unwrap();
        assert_eq!(t.shape(y), &[4, 64, 512]);
    }

    #[test]
    fn transpose_conv_single_tap_expansion() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[1, 1, 1], 2.5));
        let w = t.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let b = t.constant(Tensor::zeros(&[1]));
        let y = t.conv_transpose2d(x, w, b, 2).unwrap();
        assert_eq!(t.shape(y), &[1, 2, 2]);
        assert_eq!(t.data(y), &[2.5; 4]);
    }

    #[test]
    fn matmul_identity_and_relu_and_pool() {
        let mut t = Tape::new();
        let mut eye = vec![0.0; 9];
        eye[0] = 1.0;
        eye[4] = 1.0;
        eye[8] = 1.0;
        let i3 = t.constant(Tensor::new(&[3, 3], eye).unwrap());
        let b = t.constant(Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let p = t.matmul(i3, b).unwrap();
        assert_eq!(t.data(p), t.data(b));

        let r = t.constant(Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
        let r = t.relu(r);
        assert_eq!(t.data(r), &[1.0, 0.0]);

        let mut data = Vec::new();
        for c in 0..3 {
            data.extend(std::iter::repeat_n(c as f64 * 1.5 - 1.0, 12));
        }
        let x = t.constant(Tensor::new(&[3, 3, 4], data).unwrap());
        let pooled = t.adaptive_avg_pool(x).unwrap();
        assert_eq!(t.shape(pooled), &[3, 1, 1]);
        assert_eq!(t.data(pooled), &[-1.0, 0.5, 2.0]);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        let x = t.constant(random(&mut rng, &[8]));
        let x = t.scale(x, 30.0);
        let s = t.softmax(x);
        assert!((t.data(s).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn incompatible_shapes_are_rejected() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        assert!(t.matmul(a, b).is_err());
        let c = t.constant(Tensor::zeros(&[3, 2]));
        assert!(t.add(a, c).is_err());
        assert!(t.hadamard(a, c).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones_and_of_square_is_twice_x() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xv = random(&mut rng, &[2, 3, 4]).with_grad(true);
        let mut t = Tape::new();
        let x = t.leaf(xv.clone());
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert!(t.grad(x).unwrap().iter().all(|g| *g == 1.0));

        let mut t = Tape::new();
        let x = t.leaf(xv.clone());
        let sq = t.hadamard(x, x).unwrap();
        let s = t.sum(sq);
        t.backward(s).unwrap();
        for (g, v) in t.grad(x).unwrap().iter().zip(xv.data()) {
            assert_eq!(*g, 2.0 * v);
        }
    }

    #[test]
    fn repeated_backward_accumulates_until_zeroed() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::full(&[3], 2.0).with_grad(true));
        let s = t.sum(x);
        t.backward(s).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0; 3]);
        t.zero_grad();
        assert!(t.grad(x).is_none());
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0; 3]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::full(&[3], 2.0).with_grad(true));
        let y = t.relu(x);
        assert!(matches!(t.backward(y), Err(Error::Shape(_))));
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, &[3, 17, 23]);
        let w = random(&mut rng, &[20, 3, 3, 3]);
        let run = || {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let wv = t.constant(w.clone());
            let b = t.constant(Tensor::zeros(&[20]));
            let y = t.conv2d(xv, wv, b, 1, 1).unwrap();
            t.data(y).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let inputs = vec![
            random(&mut rng, &[2, 7, 9]),
            random(&mut rng, &[4, 2, 3, 3]),
            random(&mut rng, &[4]),
        ];
        let err = check_tape_gradients(&inputs, |t, v| t.conv2d(v[0], v[1], v[2], 1, 1)).unwrap();
        assert!(err < 1e-4, "conv2d rel err {err}");
        let err = check_tape_gradients(&inputs, |t, v| t.conv2d(v[0], v[1], v[2], 2, 1)).unwrap();
        assert!(err < 1e-4, "strided conv2d rel err {err}");
    }

    #[test]
    fn composite_chain_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let inputs = vec![
            random(&mut rng, &[2, 6, 5]),
            random(&mut rng, &[3, 2, 3, 3]),
            random(&mut rng, &[3]),
            random(&mut rng, &[1, 3]),
            random(&mut rng, &[3, 4]),
        ];
        let err = check_tape_gradients(&inputs, |t, v| {
            let c = t.conv2d(v[0], v[1], v[2], 1, 1)?;
            let r = t.relu(c);
            let p = t.adaptive_avg_pool(r)?;
            let p = t.reshape(p, &[3, 1])?;
            let m = t.matmul(v[3], p)?;
            let m = t.reshape(m, &[1, 1])?;
            let row = t_row(t, v[4]);
            let z = t.matmul(m, row)?;
            Ok(t.sigmoid(z))
        })
        .unwrap();
        assert!(err < 1e-4, "chain rel err {err}");
    }

    fn t_row(t: &mut Tape, v: Var) -> Var {
        let n = t.value(v).numel();
        t.reshape(v, &[1, n]).unwrap()
    }
}
