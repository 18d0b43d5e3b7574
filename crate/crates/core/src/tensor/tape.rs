use crate::error::{Error, Result};

use super::kernels::{self, ConvGeometry};
use super::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geometry: ConvGeometry,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<u32>,
    },
    Upsample2(Var),
    Concat {
        a: Var,
        b: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Ln(Var),
    Clamp {
        input: Var,
        lo: f32,
        hi: f32,
    },
    Sum(Var),
    SumPerChannel(Var),
    Pick {
        input: Var,
        index: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Linear record of a forward computation.
///
/// Operations are appended in execution order, so an operand always has a
/// smaller index than the node consuming it. A tape is single-owner; build a
/// fresh one per forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
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

    /// Records a leaf; it requires grad iff the tensor does.
    pub fn input(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push_leaf(tensor, requires_grad)
    }

    /// Records a trainable leaf regardless of the tensor's flag.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.push_leaf(tensor, true)
    }

    /// Records a leaf that never receives gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push_leaf(tensor, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push_leaf(&mut self, tensor: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, op: Op, operands: &[Var]) -> Var {
        let requires_grad = operands.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let x = self.value(input);
        let k = self.value(kernel);
        let b = self.value(bias);
        let [n, c, h, w] = x.dims4()?;
        let [f, kc, kh, kw] = k.dims4()?;
        if kc != c {
            return Err(Error::dim(format!(
                "conv2d input {:?} has {} channels but kernel {:?} expects {}",
                x.shape(),
                c,
                k.shape(),
                kc
            )));
        }
        if b.shape() != [f] {
            return Err(Error::dim(format!(
                "conv2d bias {:?} does not match kernel {:?}",
                b.shape(),
                k.shape()
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::geometry(format!("conv2d kernel {kh}x{kw} must have odd sides")));
        }
        if stride == 0 {
            return Err(Error::geometry("conv2d stride must be at least 1"));
        }
        let span_h = (h + 2 * padding).checked_sub(kh);
        let span_w = (w + 2 * padding).checked_sub(kw);
        let (span_h, span_w) = match (span_h, span_w) {
            (Some(a), Some(b)) if a % stride == 0 && b % stride == 0 => (a, b),
            _ => {
                return Err(Error::geometry(format!(
                    "conv2d on {h}x{w} with kernel {kh}x{kw}, padding {padding}, stride {stride} \
                     does not tile exactly"
                )))
            }
        };
        let geometry = ConvGeometry {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            pad: padding,
            oh: span_h / stride + 1,
            ow: span_w / stride + 1,
        };
        let out = kernels::conv2d_forward(&geometry, x.data(), k.data(), b.data());
        Ok(self.push(
            vec![n, f, geometry.oh, geometry.ow],
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
            },
            &[input, kernel, bias],
        ))
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let dims @ [n, c, h, w] = x.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::geometry(format!("maxpool2 needs even spatial dims, got {h}x{w}")));
        }
        let (out, argmax) = kernels::maxpool2_forward(dims, x.data());
        Ok(self.push(vec![n, c, h / 2, w / 2], out, Op::MaxPool2 { input, argmax }, &[input]))
    }

    pub fn upsample_nearest2(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let dims @ [n, c, h, w] = x.dims4()?;
        let out = kernels::upsample2_forward(dims, x.data());
        Ok(self.push(vec![n, c, 2 * h, 2 * w], out, Op::Upsample2(input), &[input]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = self.value(a).dims4()?;
        let [nb, cb, hb, wb] = self.value(b).dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::dim(format!(
                "concat_channels operands {:?} and {:?} differ outside the channel axis",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out = kernels::concat_channels(n, h * w, self.value(a).data(), ca, self.value(b).data(), cb);
        Ok(self.push(vec![n, ca + cb, h, w], out, Op::Concat { a, b }, &[a, b]))
    }

    fn unary(&mut self, input: Var, op: Op, f: impl Fn(f32) -> f32) -> Var {
        let x = self.value(input);
        let shape = x.shape().to_vec();
        let out = x.data().iter().map(|&v| f(v)).collect();
        self.push(shape, out, op, &[input])
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.unary(input, Op::Relu(input), |v| if v < 0.0 { 0.0 } else { v })
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.unary(input, Op::Sigmoid(input), sigmoid)
    }

    /// Softmax over axis 1 of an `[N, L, H, W]` tensor.
    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let dims = x.dims4()?;
        let out = kernels::softmax_channels(dims, x.data());
        Ok(self.push(dims.to_vec(), out, Op::Softmax(input), &[input]))
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f32, f32) -> f32) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::dim(format!(
                "elementwise operands {:?} and {:?} differ",
                x.shape(),
                y.shape()
            )));
        }
        let out = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let shape = x.shape().to_vec();
        Ok(self.push(shape, out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |p, q| p * q)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), |p, q| p / q)
    }

    pub fn scale(&mut self, input: Var, factor: f32) -> Var {
        self.unary(input, Op::Scale(input, factor), |v| v * factor)
    }

    pub fn add_scalar(&mut self, input: Var, offset: f32) -> Var {
        self.unary(input, Op::AddScalar(input), |v| v + offset)
    }

    /// Natural log. Inputs must be positive; clamp first.
    pub fn ln(&mut self, input: Var) -> Var {
        self.unary(input, Op::Ln(input), f32::ln)
    }

    /// Gradient passes only where `lo <= x <= hi`.
    pub fn clamp(&mut self, input: Var, lo: f32, hi: f32) -> Var {
        self.unary(input, Op::Clamp { input, lo, hi }, |v| v.clamp(lo, hi))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().sum::<f32>();
        self.push(vec![1], vec![total], Op::Sum(input), &[input])
    }

    /// Reduces `[N, C, H, W]` to `[C]` by summing over batch and space.
    pub fn sum_per_channel(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let [n, c, h, w] = x.dims4()?;
        let plane = h * w;
        let mut out = vec![0.0f32; c];
        for b in 0..n {
            for (ch, acc) in out.iter_mut().enumerate() {
                let start = (b * c + ch) * plane;
                *acc += x.data()[start..start + plane].iter().sum::<f32>();
            }
        }
        Ok(self.push(vec![c], out, Op::SumPerChannel(input), &[input]))
    }

    /// Extracts one element (flat index) as a `[1]` tensor.
    pub fn pick(&mut self, input: Var, index: usize) -> Result<Var> {
        let x = self.value(input);
        let value = *x.data().get(index).ok_or_else(|| {
            Error::dim(format!("index {index} out of range for shape {:?}", x.shape()))
        })?;
        Ok(self.push(vec![1], vec![value], Op::Pick { input, index }, &[input]))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Gradients accumulate by summation over every use of a value. Every
    /// gradient-requiring leaf gets an entry, zero-filled when the loss does
    /// not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Usage(format!("variable {} is not on this tape", loss.0)))?;
        if !loss_value.value.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.value.shape()
            )));
        }

        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (g, &node.op) {
                (Some(g), _) => Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
                (None, Op::Leaf) if node.requires_grad => Some(Tensor::zeros(node.value.shape())),
                (None, _) => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], var: Var, delta: Vec<f32>) {
        if !self.wants(var) {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, d)| *e += d),
            slot @ None => *slot = Some(delta),
        }
    }

    fn elementwise(&self, grads: &mut [Option<Vec<f32>>], var: Var, g: &[f32], f: impl Fn(usize, f32) -> f32) {
        if self.wants(var) {
            let delta = g.iter().enumerate().map(|(i, &gi)| f(i, gi)).collect();
            self.accumulate(grads, var, delta);
        }
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let out = node.value.data();
        match node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                ref geometry,
            } => {
                let (di, dk, db) = kernels::conv2d_backward(
                    geometry,
                    self.value(input).data(),
                    self.value(kernel).data(),
                    g,
                    self.wants(input),
                    self.wants(kernel),
                    self.wants(bias),
                );
                if self.wants(input) {
                    self.accumulate(grads, input, di);
                }
                if self.wants(kernel) {
                    self.accumulate(grads, kernel, dk);
                }
                if self.wants(bias) {
                    self.accumulate(grads, bias, db);
                }
            }
            Op::MaxPool2 { input, ref argmax } => {
                if self.wants(input) {
                    let mut delta = vec![0.0f32; self.value(input).numel()];
                    for (&src, &gi) in argmax.iter().zip(g) {
                        delta[src as usize] += gi;
                    }
                    self.accumulate(grads, input, delta);
                }
            }
            Op::Upsample2(input) => {
                if self.wants(input) {
                    let dims = self.value(input).dims4().expect("validated in forward");
                    self.accumulate(grads, input, kernels::upsample2_backward(dims, g));
                }
            }
            Op::Concat { a, b } => {
                let [n, ca, h, w] = self.value(a).dims4().expect("validated in forward");
                let cb = self.value(b).shape()[1];
                let (ga, gb) = kernels::split_channels(n, h * w, g, ca, cb);
                self.accumulate(grads, a, ga);
                self.accumulate(grads, b, gb);
            }
            Op::Relu(input) => {
                let x = self.value(input).data();
                self.elementwise(grads, input, g, |i, gi| if x[i] > 0.0 { gi } else { 0.0 });
            }
            Op::Sigmoid(input) => {
                self.elementwise(grads, input, g, |i, gi| gi * out[i] * (1.0 - out[i]));
            }
            Op::Softmax(input) => {
                if self.wants(input) {
                    let dims = node.value.dims4().expect("validated in forward");
                    self.accumulate(grads, input, kernels::softmax_channels_backward(dims, out, g));
                }
            }
            Op::Add(a, b) => {
                self.elementwise(grads, a, g, |_, gi| gi);
                self.elementwise(grads, b, g, |_, gi| gi);
            }
            Op::Sub(a, b) => {
                self.elementwise(grads, a, g, |_, gi| gi);
                self.elementwise(grads, b, g, |_, gi| -gi);
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(a).data(), self.value(b).data());
                self.elementwise(grads, a, g, |i, gi| gi * y[i]);
                self.elementwise(grads, b, g, |i, gi| gi * x[i]);
            }
            Op::Div(a, b) => {
                let (x, y) = (self.value(a).data(), self.value(b).data());
                self.elementwise(grads, a, g, |i, gi| gi / y[i]);
                self.elementwise(grads, b, g, |i, gi| -gi * x[i] / (y[i] * y[i]));
            }
            Op::Scale(input, factor) => {
                self.elementwise(grads, input, g, |_, gi| gi * factor);
            }
            Op::AddScalar(input) => {
                self.elementwise(grads, input, g, |_, gi| gi);
            }
            Op::Ln(input) => {
                let x = self.value(input).data();
                self.elementwise(grads, input, g, |i, gi| gi / x[i]);
            }
            Op::Clamp { input, lo, hi } => {
                let x = self.value(input).data();
                self.elementwise(grads, input, g, |i, gi| {
                    if x[i] >= lo && x[i] <= hi {
                        gi
                    } else {
                        0.0
                    }
                });
            }
            Op::Sum(input) => {
                let n = self.value(input).numel();
                if self.wants(input) {
                    self.accumulate(grads, input, vec![g[0]; n]);
                }
            }
            Op::SumPerChannel(input) => {
                if self.wants(input) {
                    let [n, c, h, w] = self.value(input).dims4().expect("validated in forward");
                    let plane = h * w;
                    let mut delta = vec![0.0f32; n * c * plane];
                    for b in 0..n {
                        for ch in 0..c {
                            let start = (b * c + ch) * plane;
                            delta[start..start + plane].fill(g[ch]);
                        }
                    }
                    self.accumulate(grads, input, delta);
                }
            }
            Op::Pick { input, index } => {
                if self.wants(input) {
                    let mut delta = vec![0.0f32; self.value(input).numel()];
                    delta[index] = g[0];
                    self.accumulate(grads, input, delta);
                }
            }
        }
    }
}

pub(crate) fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
