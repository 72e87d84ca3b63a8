use super::kernels::{self, ConvDims};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        dims: ConvDims,
    },
    Relu(Var),
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Log(Var),
    Exp(Var),
    Softplus(Var),
    Sigmoid(Var),
    Abs(Var),
    Square(Var),
    L2Norm(Var),
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Upsample2(Var),
    ConcatChannels(Var, Var),
    TvNorm(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    grad: Option<Vec<f64>>,
}

/// A recording of primitive operations in execution order.
///
/// Backward walks the tape once in reverse; gradients of tensors consumed by
/// several operations accumulate.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Row-wise log-softmax over the last axis.
fn log_softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(op_name, value.data())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf_node(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf_node(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf_node(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.leaf_node(value, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v` took
    /// part in it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(name, value, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("scale", x, |v| c * v, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    /// `[m,k] x [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.data(a), self.data(b), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// Adds a length-`n` bias to every row of a `[rows, n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(Error::shape("add_bias", format!("{sx:?} + {sb:?}")));
        }
        let n = sx[1];
        let b = self.data(bias).to_vec();
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % n])
            .collect();
        let value = Tensor::new(sx.to_vec(), data)?;
        self.push("add_bias", value, Op::AddBias(x, bias), &[x, bias])
    }

    /// Stride-1 convolution: input `[B,C,H,W]`, weight `[O,C,k,k]`, bias `[O]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, padding: usize) -> Result<Var> {
        let (si, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if si.len() != 4 || sw.len() != 4 || si[1] != sw[1] || sw[2] != sw[3] {
            return Err(Error::shape("conv2d", format!("input {si:?}, weight {sw:?}")));
        }
        if si[2] + 2 * padding < sw[2] || si[3] + 2 * padding < sw[3] {
            return Err(Error::shape("conv2d", "kernel larger than padded input"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(Error::shape("conv2d", format!("bias {:?}", self.shape(b))));
            }
        }
        let dims = ConvDims {
            batch: si[0],
            in_ch: si[1],
            height: si[2],
            width: si[3],
            out_ch: sw[0],
            kernel: sw[2],
            padding,
        };
        let data = kernels::conv2d_forward(
            self.data(input),
            self.data(weight),
            bias.map(|b| self.data(b)),
            dims,
        );
        let value = Tensor::new(vec![dims.batch, dims.out_ch, dims.out_h(), dims.out_w()], data)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                dims,
            },
            &inputs,
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    /// 2x2 max pooling with stride 2 over `[B,C,H,W]`.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::shape("maxpool2", format!("{s:?}")));
        }
        let (data, argmax) = kernels::maxpool2(self.data(x), s[0] * s[1], s[2], s[3]);
        let value = Tensor::new(vec![s[0], s[1], s[2] / 2, s[3] / 2], data)?;
        self.push("maxpool2", value, Op::MaxPool2 { input: x, argmax }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// `[B, ...]` -> `[B, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let b = s[0];
        let rest = s[1..].iter().product();
        self.reshape(x, &[b, rest])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let value = Tensor::scalar(self.value(x).sum() / n);
        self.push("mean", value, Op::Mean(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, f64::ln, Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    /// `log(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", x, softplus, Op::Softplus(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, f64::abs, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, |v| v * v, Op::Square(x))
    }

    /// Euclidean norm over all elements.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).l2_norm());
        self.push("l2_norm", value, Op::L2Norm(x), &[x])
    }

    fn last_dim(&self, op: &'static str, x: Var) -> Result<usize> {
        match self.shape(x) {
            [n] | [_, n] if *n > 0 => Ok(*n),
            s => Err(Error::shape(op, format!("expected rank 1 or 2, got {s:?}"))),
        }
    }

    /// Softmax over the last axis of a rank-1 or rank-2 tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.last_dim("softmax", x)?;
        let data = log_softmax_rows(self.data(x), n).into_iter().map(f64::exp).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("softmax", value, Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.last_dim("log_softmax", x)?;
        let data = log_softmax_rows(self.data(x), n);
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("log_softmax", value, Op::LogSoftmax(x), &[x])
    }

    /// Mean cross-entropy of `[B,C]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {s:?} with {} labels", labels.len()),
            ));
        }
        let c = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::shape("cross_entropy", format!("label {bad} with {c} classes")));
        }
        let logp = log_softmax_rows(self.data(logits), c);
        let loss = -labels
            .iter()
            .enumerate()
            .map(|(i, &l)| logp[i * c + l])
            .sum::<f64>()
            / labels.len() as f64;
        let probs = logp.into_iter().map(f64::exp).collect();
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Nearest-neighbour 2x upsampling of `[B,C,H,W]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("upsample2", format!("{s:?}")));
        }
        let data = kernels::upsample2(self.data(x), s[0] * s[1], s[2], s[3]);
        let value = Tensor::new(vec![s[0], s[1], 2 * s[2], 2 * s[3]], data)?;
        self.push("upsample2", value, Op::Upsample2(x), &[x])
    }

    /// Concatenates two `[B,C_i,H,W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::shape("concat_channels", format!("{sa:?} ++ {sb:?}")));
        }
        let plane = sa[2] * sa[3];
        let (ca, cb) = (sa[1] * plane, sb[1] * plane);
        let mut data = Vec::with_capacity(sa[0] * (ca + cb));
        for i in 0..sa[0] {
            data.extend_from_slice(&self.data(a)[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&self.data(b)[i * cb..(i + 1) * cb]);
        }
        let value = Tensor::new(vec![sa[0], sa[1] + sb[1], sa[2], sa[3]], data)?;
        self.push("concat_channels", value, Op::ConcatChannels(a, b), &[a, b])
    }

    /// Anisotropic total variation of a `[C,H,W]` or `[B,C,H,W]` tensor:
    /// sum of absolute vertical and horizontal neighbour differences.
    pub fn tv_norm(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("tv_norm", format!("{s:?}")));
        }
        let value = Tensor::scalar(tv_value(self.data(x), &s));
        self.push("tv_norm", value, Op::TvNorm(x), &[x])
    }

    /// Populates gradients of `loss` for every node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_node = &self.nodes[loss.0];
        if !loss_node.value.is_scalar() {
            return Err(Error::NotScalar(loss_node.value.shape().to_vec()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(grad) = self.nodes[idx].grad.take() else {
                continue;
            };
            let contributions = self.input_grads(idx, &grad);
            self.nodes[idx].grad = Some(grad);
            for (var, g) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut self.nodes[var.0].grad {
                    Some(acc) => kernels::add_into(acc, &g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `idx` for each of its inputs.
    fn input_grads(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let elementwise = |x: Var, f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
            self.data(x).iter().zip(g).map(|(&xv, &gv)| f(xv, gv)).collect()
        };
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let mut res = Vec::new();
                if wants(*a) {
                    res.push((*a, self.data(*b).iter().zip(g).map(|(y, gv)| y * gv).collect()));
                }
                if wants(*b) {
                    res.push((*b, self.data(*a).iter().zip(g).map(|(x, gv)| x * gv).collect()));
                }
                res
            }
            Op::Scale(x, c) => vec![(*x, g.iter().map(|v| c * v).collect())],
            Op::AddScalar(x) | Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let mut res = Vec::new();
                if wants(*a) {
                    res.push((*a, kernels::matmul_grad_a(g, self.data(*b), m, k, n)));
                }
                if wants(*b) {
                    res.push((*b, kernels::matmul_grad_b(self.data(*a), g, m, k, n)));
                }
                res
            }
            Op::AddBias(x, bias) => {
                let n = self.shape(*bias)[0];
                let mut gb = vec![0.0; n];
                for row in g.chunks(n) {
                    kernels::add_into(&mut gb, row);
                }
                vec![(*x, g.to_vec()), (*bias, gb)]
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                dims,
            } => {
                let mut res = Vec::new();
                if wants(*input) {
                    res.push((*input, kernels::conv2d_backward_input(g, self.data(*weight), *dims)));
                }
                let bias_wants = bias.map(wants).unwrap_or(false);
                if wants(*weight) || bias_wants {
                    let (gw, gb) = kernels::conv2d_backward_params(g, self.data(*input), *dims);
                    res.push((*weight, gw));
                    if let Some(b) = bias {
                        res.push((*b, gb));
                    }
                }
                res
            }
            Op::Relu(x) => vec![(*x, elementwise(*x, &|v, gv| if v > 0.0 { gv } else { 0.0 }))],
            Op::MaxPool2 { input, argmax } => {
                let mut gi = vec![0.0; self.value(*input).len()];
                for (&src, gv) in argmax.iter().zip(g) {
                    gi[src] += gv;
                }
                vec![(*input, gi)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).len()])],
            Op::Mean(x) => {
                let n = self.value(*x).len();
                vec![(*x, vec![g[0] / n as f64; n])]
            }
            Op::Log(x) => vec![(*x, elementwise(*x, &|v, gv| gv / v))],
            Op::Exp(x) => vec![(*x, out.iter().zip(g).map(|(o, gv)| o * gv).collect())],
            Op::Softplus(x) => vec![(*x, elementwise(*x, &|v, gv| gv * sigmoid(v)))],
            Op::Sigmoid(x) => vec![(*x, out.iter().zip(g).map(|(o, gv)| gv * o * (1.0 - o)).collect())],
            Op::Abs(x) => vec![(*x, elementwise(*x, &|v, gv| gv * sign(v)))],
            Op::Square(x) => vec![(*x, elementwise(*x, &|v, gv| 2.0 * v * gv))],
            Op::L2Norm(x) => {
                let norm = out[0];
                let gx = if norm > 0.0 {
                    self.data(*x).iter().map(|v| g[0] * v / norm).collect()
                } else {
                    vec![0.0; self.value(*x).len()]
                };
                vec![(*x, gx)]
            }
            Op::Softmax(x) => {
                let n = *self.shape(*x).last().unwrap();
                let mut gx = Vec::with_capacity(out.len());
                for (p, gr) in out.chunks(n).zip(g.chunks(n)) {
                    let dot: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                    gx.extend(p.iter().zip(gr).map(|(pi, gi)| pi * (gi - dot)));
                }
                vec![(*x, gx)]
            }
            Op::LogSoftmax(x) => {
                let n = *self.shape(*x).last().unwrap();
                let mut gx = Vec::with_capacity(out.len());
                for (lp, gr) in out.chunks(n).zip(g.chunks(n)) {
                    let total: f64 = gr.iter().sum();
                    gx.extend(lp.iter().zip(gr).map(|(l, gi)| gi - l.exp() * total));
                }
                vec![(*x, gx)]
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let scale = g[0] / labels.len() as f64;
                let mut gx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    gx[i * c + l] -= scale;
                }
                vec![(*logits, gx)]
            }
            Op::Upsample2(x) => {
                let s = self.shape(*x);
                vec![(*x, kernels::upsample2_backward(g, s[0] * s[1], s[2], s[3]))]
            }
            Op::ConcatChannels(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let plane = sa[2] * sa[3];
                let (ca, cb) = (sa[1] * plane, sb[1] * plane);
                let mut ga = Vec::with_capacity(sa[0] * ca);
                let mut gb = Vec::with_capacity(sa[0] * cb);
                for chunk in g.chunks(ca + cb) {
                    ga.extend_from_slice(&chunk[..ca]);
                    gb.extend_from_slice(&chunk[ca..]);
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::TvNorm(x) => vec![(*x, tv_grad(self.data(*x), self.shape(*x), g[0]))],
        }
    }
}

fn tv_value(data: &[f64], shape: &[usize]) -> f64 {
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let mut total = 0.0;
    for plane in data.chunks(h * w) {
        for y in 0..h {
            for x in 0..w {
                let v = plane[y * w + x];
                if y + 1 < h {
                    total += (plane[(y + 1) * w + x] - v).abs();
                }
                if x + 1 < w {
                    total += (plane[y * w + x + 1] - v).abs();
                }
            }
        }
    }
    total
}

fn tv_grad(data: &[f64], shape: &[usize], g: f64) -> Vec<f64> {
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let mut out = vec![0.0; data.len()];
    for (plane, gp) in data.chunks(h * w).zip(out.chunks_mut(h * w)) {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if y + 1 < h {
                    let s = sign(plane[i + w] - plane[i]) * g;
                    gp[i + w] += s;
                    gp[i] -= s;
                }
                if x + 1 < w {
                    let s = sign(plane[i + 1] - plane[i]) * g;
                    gp[i + 1] += s;
                    gp[i] -= s;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softplus_at_zero_is_ln2() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let y = g.softplus(x).unwrap();
        assert!((g.value(y).item() - 2f64.ln()).abs() < 1e-15);
        // large magnitudes stay finite
        let big = g.constant(Tensor::from_vec(vec![-800.0, 800.0]));
        let y = g.softplus(big).unwrap();
        assert_eq!(g.value(y).data()[1], 800.0);
    }

    #[test]
    fn identity_kernel_preserves_image() {
        let mut g = Graph::new();
        let img = Tensor::from_fn(&[1, 1, 4, 5], |i| (i as f64 * 0.37).sin());
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let x = g.constant(img.clone());
        let w = g.constant(t(&[1, 1, 3, 3], &k));
        let y = g.conv2d(x, w, None, 1).unwrap();
        assert_eq!(g.value(y), &img);
    }

    #[test]
    fn linear_sum_gradient_is_input() {
        let mut g = Graph::new();
        let xs = Tensor::from_vec(vec![1.5, -2.0, 3.0]);
        let w = g.param(Tensor::from_vec(vec![0.1, 0.2, 0.3]));
        let x = g.constant(xs.clone());
        let p = g.mul(w, x).unwrap();
        let loss = g.sum(p).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), xs);
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn dead_relu_has_zero_gradient() {
        let mut g = Graph::new();
        let z = g.param(Tensor::scalar(-1.0));
        let r = g.relu(z).unwrap();
        g.backward(r).unwrap();
        assert_eq!(g.grad(z).unwrap().item(), 0.0);
    }

    #[test]
    fn relu_and_abs_subgradient_at_zero() {
        let mut g = Graph::new();
        let z = g.param(Tensor::from_vec(vec![0.0, 0.0]));
        let r = g.relu(z).unwrap();
        let a = g.abs(z).unwrap();
        let s = g.add(r, a).unwrap();
        let loss = g.sum(s).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(z).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let z = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(g.backward(z), Err(Error::NotScalar(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        // x*x + 3x via two uses of x, versus the fused square op.
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![0.5, -1.25, 2.0]));
        let xx = g.mul(x, x).unwrap();
        let x3 = g.scale(x, 3.0).unwrap();
        let s = g.add(xx, x3).unwrap();
        let loss = g.sum(s).unwrap();
        g.backward(loss).unwrap();
        let fanned = g.grad(x).unwrap();

        let mut h = Graph::new();
        let y = h.param(Tensor::from_vec(vec![0.5, -1.25, 2.0]));
        let sq = h.square(y).unwrap();
        let l = h.sum(sq).unwrap();
        h.backward(l).unwrap();
        let fused: Vec<f64> = h.grad(y).unwrap().data().iter().map(|v| v + 3.0).collect();
        assert_eq!(fanned.data(), fused.as_slice());
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(g.matmul(a, b).is_err());
        let c = g.constant(Tensor::zeros(&[3]));
        assert!(g.add(a, c).is_err());
        assert!(g.cross_entropy(a, &[0]).is_err());
        assert!(g.cross_entropy(a, &[0, 3]).is_err());
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![0.0]));
        assert!(matches!(g.log(x), Err(Error::NonFinite { .. })));
        let y = g.constant(Tensor::from_vec(vec![1000.0]));
        assert!(matches!(g.exp(y), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn tv_of_two_pixel_image() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2], &[0.0, 1.0]));
        let tv = g.tv_norm(x).unwrap();
        assert_eq!(g.value(tv).item(), 1.0);
        let c = g.constant(Tensor::full(&[3, 4, 4], 0.7));
        let tv = g.tv_norm(c).unwrap();
        assert_eq!(g.value(tv).item(), 0.0);
    }

    #[test]
    fn no_grad_inputs_record_leaf() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(vec![1.0]));
        let b = g.exp(a).unwrap();
        assert!(!g.requires_grad(b));
    }
}
