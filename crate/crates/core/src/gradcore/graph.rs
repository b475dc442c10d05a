//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid reverse topological order. Gradients are produced fresh by every
//! [`Graph::backward`] call; there is no accumulation across calls, so a new
//! graph per optimizer step is the zero-grad.

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary op lines up with the left one.
#[derive(Clone, Copy, Debug)]
enum Bcast {
    Same,
    /// Right operand has the left operand's shape minus the leading batch axis.
    Row,
}

/// Per-feature grouping used by batch normalization: `[outer, features, inner]`.
#[derive(Clone, Copy, Debug)]
struct BnLayout {
    outer: usize,
    features: usize,
    inner: usize,
}

impl BnLayout {
    fn of(shape: &[usize]) -> Result<Self> {
        match shape.len() {
            2 => Ok(BnLayout {
                outer: shape[0],
                features: shape[1],
                inner: 1,
            }),
            4 => Ok(BnLayout {
                outer: shape[0],
                features: shape[1],
                inner: shape[2] * shape[3],
            }),
            _ => Err(Error::invalid(format!(
                "batchnorm expects [B, F] or [B, C, H, W], got {shape:?}"
            ))),
        }
    }

    fn count(&self) -> usize {
        self.outer * self.inner
    }

    fn feature_of(&self, flat: usize) -> usize {
        (flat / self.inner) % self.features
    }
}

enum Op {
    Leaf,
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    Abs(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Relu(Var),
    LnCosh(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    SumRows(Var),
    Reshape(Var),
    Gather(Var, Vec<usize>),
    Softmax(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    MaxPool2(Var, Vec<usize>),
    Upsample2(Var),
    GlobalAvgPool(Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        layout: BnLayout,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        /// Eval mode normalizes by fixed statistics, so the input gradient has
        /// no batch-coupling terms.
        fixed_stats: bool,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics produced by a train-mode batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased per-feature variance, for running-statistic updates.
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of a backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when `v` does not influence the root.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn bcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Bcast> {
    if a.shape() == b.shape() {
        Ok(Bcast::Same)
    } else if a.rank() >= 1 && &a.shape()[1..] == b.shape() {
        Ok(Bcast::Row)
    } else {
        Err(shape_err(op, a, b))
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
        None => *slot = Some(delta),
    }
}

/// Sums a left-shaped gradient down to a right operand's shape.
fn reduce_bcast(grad: &[f64], b: Bcast, right_len: usize) -> Vec<f64> {
    match b {
        Bcast::Same => grad.to_vec(),
        Bcast::Row => {
            let mut out = vec![0.0; right_len];
            for chunk in grad.chunks(right_len) {
                out.iter_mut().zip(chunk).for_each(|(o, g)| *o += g);
            }
            out
        }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(Bcast) -> Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bc = bcast(name, ta, tb)?;
        let n = tb.len().max(1);
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tb.data()[i % n]))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op(bc), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, |bc| Op::Add(a, b, bc))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, |bc| Op::Sub(a, b, bc))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, |bc| Op::Mul(a, b, bc))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("div", ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x / y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Div(a, b), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    /// `a + c` for a scalar constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::Offset(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Overflow-safe `ln cosh`; its derivative is `tanh`.
    pub fn lncosh(&mut self, a: Var) -> Var {
        self.unary(a, kernels::lncosh, Op::LnCosh(a))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the open interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `x · w + b` for `x: [B, I]`, `w: [I, O]`, `b: [O]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// `[B, F] -> [B]` row sums.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(Error::invalid(format!(
                "sum_rows expects rank 2, got {:?}",
                t.shape()
            )));
        }
        let f = t.shape()[1];
        let data: Vec<f64> = if f == 0 {
            vec![0.0; t.shape()[0]]
        } else {
            t.data().chunks(f).map(|r| r.iter().sum()).collect()
        };
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::vector(data), Op::SumRows(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Picks flat elements of `a` by index; output has shape `[indices.len()]`.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.len()) {
            return Err(Error::invalid(format!(
                "gather index {bad} out of range for {} elements",
                t.len()
            )));
        }
        let data = indices.iter().map(|&i| t.data()[i]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::vector(data), Op::Gather(a, indices.to_vec()), rg))
    }

    /// Softmax over a vector, with max-subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 1 || t.is_empty() {
            return Err(Error::invalid(format!(
                "softmax expects a non-empty vector, got {:?}",
                t.shape()
            )));
        }
        let value = Tensor::vector(softmax(t.data()));
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    /// Cross-correlation of `[B, C, H, W]` input with `[O, C, k, k]` kernels plus `[O]` bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(input), self.shape(kernel), stride, padding)?;
        if self.shape(bias) != [geom.out_channels] {
            return Err(shape_err(
                "conv2d bias",
                self.value(kernel),
                self.value(bias),
            ));
        }
        let (out, cols) = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            &geom,
        );
        let value = Tensor::new(geom.out_shape(), out)?;
        let rg = self.rg(&[input, kernel, bias]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
            rg,
        ))
    }

    pub fn maxpool2(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (out, arg, shape) = kernels::maxpool2(t.data(), t.shape())?;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MaxPool2(a, arg), rg))
    }

    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (out, shape) = kernels::upsample2(t.data(), t.shape())?;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Upsample2(a), rg))
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 4 {
            return Err(Error::invalid(format!(
                "global_avg_pool expects rank 4, got {:?}",
                t.shape()
            )));
        }
        let (b, c) = (t.shape()[0], t.shape()[1]);
        let hw = t.shape()[2] * t.shape()[3];
        let data = t
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![b, c], data)?, Op::GlobalAvgPool(a), rg))
    }

    fn check_affine_params(&self, layout: &BnLayout, gamma: Var, beta: Var) -> Result<()> {
        for p in [gamma, beta] {
            if self.shape(p) != [layout.features] {
                return Err(Error::Shape {
                    op: "batchnorm",
                    left: vec![layout.features],
                    right: self.shape(p).to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Train-mode batch normalization over the batch (and spatial) axes.
    ///
    /// Returns the normalized output and the batch statistics; the caller owns
    /// any running-statistic update.
    pub fn batchnorm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let t = self.value(input);
        let layout = BnLayout::of(t.shape())?;
        if layout.outer < 2 {
            return Err(Error::invalid(format!(
                "batchnorm in train mode needs a batch of at least 2, got {}",
                layout.outer
            )));
        }
        self.check_affine_params(&layout, gamma, beta)?;
        let m = layout.count() as f64;
        let mut mean = vec![0.0; layout.features];
        for (i, x) in t.data().iter().enumerate() {
            mean[layout.feature_of(i)] += x;
        }
        mean.iter_mut().for_each(|s| *s /= m);
        let mut ss = vec![0.0; layout.features];
        for (i, x) in t.data().iter().enumerate() {
            let f = layout.feature_of(i);
            ss[f] += (x - mean[f]).powi(2);
        }
        let inv_std: Vec<f64> = ss.iter().map(|s| 1.0 / (s / m + eps).sqrt()).collect();
        let var = ss.iter().map(|s| s / (m - 1.0)).collect();
        let stats = BatchStats {
            mean: mean.clone(),
            var,
        };
        let v = self.normalize(input, gamma, beta, layout, &mean, inv_std, false);
        Ok((v, stats))
    }

    /// Eval-mode batch normalization using fixed running statistics.
    pub fn batchnorm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let layout = BnLayout::of(self.shape(input))?;
        self.check_affine_params(&layout, gamma, beta)?;
        if running_mean.len() != layout.features || running_var.len() != layout.features {
            return Err(Error::invalid(
                "running statistics do not match feature count",
            ));
        }
        let inv_std = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        Ok(self.normalize(input, gamma, beta, layout, running_mean, inv_std, true))
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        layout: BnLayout,
        mean: &[f64],
        inv_std: Vec<f64>,
        fixed_stats: bool,
    ) -> Var {
        let t = self.value(input);
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(t.len());
        let mut out = Vec::with_capacity(t.len());
        for (i, x) in t.data().iter().enumerate() {
            let f = layout.feature_of(i);
            let h = (x - mean[f]) * inv_std[f];
            xhat.push(h);
            out.push(gv[f] * h + bv[f]);
        }
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[input, gamma, beta]);
        self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
                fixed_stats,
            },
            rg,
        )
    }

    /// Reverse pass from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let shapes = self.nodes[..=root.0]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        // Only nodes that require a gradient report one.
        for (i, slot) in grads.iter_mut().enumerate() {
            if !self.nodes[i].requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut send = |v: Var, delta: Vec<f64>| {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut grads[v.0], delta);
            }
        };
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, bc) => {
                send(*a, g.to_vec());
                send(*b, reduce_bcast(g, *bc, val(*b).len()));
            }
            Op::Sub(a, b, bc) => {
                send(*a, g.to_vec());
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                send(*b, reduce_bcast(&neg, *bc, val(*b).len()));
            }
            Op::Mul(a, b, bc) => {
                let (va, vb) = (val(*a), val(*b));
                let n = vb.len().max(1);
                let ga = g.iter().enumerate().map(|(i, x)| x * vb[i % n]).collect();
                let gb: Vec<f64> = g.iter().zip(va).map(|(x, y)| x * y).collect();
                send(*a, ga);
                send(*b, reduce_bcast(&gb, *bc, vb.len()));
            }
            Op::Div(a, b) => {
                let vb = val(*b);
                let ga = g.iter().zip(vb).map(|(x, y)| x / y).collect();
                let gb = g
                    .iter()
                    .zip(out)
                    .zip(vb)
                    .map(|((x, q), y)| -x * q / y)
                    .collect();
                send(*a, ga);
                send(*b, gb);
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|x| c * x).collect()),
            Op::Offset(a) => send(*a, g.to_vec()),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.nodes[a.0].requires_grad {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, false, val(*b), true, &mut ga, 0.0);
                    send(*a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm(k, m, n, val(*a), true, g, false, &mut gb, 0.0);
                    send(*b, gb);
                }
            }
            Op::Abs(a) => {
                // Subgradient 0 at the kink.
                let d = g
                    .iter()
                    .zip(val(*a))
                    .map(|(x, v)| {
                        if *v > 0.0 {
                            *x
                        } else if *v < 0.0 {
                            -x
                        } else {
                            0.0
                        }
                    })
                    .collect();
                send(*a, d);
            }
            Op::Exp(a) => send(*a, g.iter().zip(out).map(|(x, y)| x * y).collect()),
            Op::Log(a) => send(*a, g.iter().zip(val(*a)).map(|(x, v)| x / v).collect()),
            Op::Tanh(a) => send(
                *a,
                g.iter().zip(out).map(|(x, y)| x * (1.0 - y * y)).collect(),
            ),
            Op::Relu(a) => send(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(x, v)| if *v > 0.0 { *x } else { 0.0 })
                    .collect(),
            ),
            Op::LnCosh(a) => send(
                *a,
                g.iter().zip(val(*a)).map(|(x, v)| x * v.tanh()).collect(),
            ),
            Op::Clamp(a, lo, hi) => send(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(x, v)| if v > lo && v < hi { *x } else { 0.0 })
                    .collect(),
            ),
            Op::Sum(a) => send(*a, vec![g[0]; val(*a).len()]),
            Op::SumRows(a) => {
                let f = self.nodes[a.0].value.shape()[1];
                let mut d = Vec::with_capacity(val(*a).len());
                for x in g {
                    d.extend(std::iter::repeat_n(*x, f));
                }
                send(*a, d);
            }
            Op::Reshape(a) => send(*a, g.to_vec()),
            Op::Gather(a, idx) => {
                let mut d = vec![0.0; val(*a).len()];
                for (x, &i) in g.iter().zip(idx) {
                    d[i] += x;
                }
                send(*a, d);
            }
            Op::Softmax(a) => {
                let dot: f64 = g.iter().zip(out).map(|(x, y)| x * y).sum();
                send(*a, g.iter().zip(out).map(|(x, y)| y * (x - dot)).collect());
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let (di, dk, db) = kernels::conv2d_backward(g, val(*kernel), cols, geom);
                send(*input, di);
                send(*kernel, dk);
                send(*bias, db);
            }
            Op::MaxPool2(a, arg) => {
                let mut d = vec![0.0; val(*a).len()];
                for (x, &i) in g.iter().zip(arg) {
                    d[i] += x;
                }
                send(*a, d);
            }
            Op::Upsample2(a) => {
                send(
                    *a,
                    kernels::upsample2_adjoint(g, self.nodes[a.0].value.shape()),
                );
            }
            Op::GlobalAvgPool(a) => {
                let s = self.nodes[a.0].value.shape();
                let hw = s[2] * s[3];
                let mut d = Vec::with_capacity(val(*a).len());
                for x in g {
                    d.extend(std::iter::repeat_n(x / hw as f64, hw));
                }
                send(*a, d);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
                fixed_stats,
            } => {
                let gv = val(*gamma);
                let mut d_gamma = vec![0.0; layout.features];
                let mut d_beta = vec![0.0; layout.features];
                for (i, x) in g.iter().enumerate() {
                    let f = layout.feature_of(i);
                    d_beta[f] += x;
                    d_gamma[f] += x * xhat[i];
                }
                if self.nodes[input.0].requires_grad {
                    let d_in = if *fixed_stats {
                        g.iter()
                            .enumerate()
                            .map(|(i, x)| {
                                let f = layout.feature_of(i);
                                x * gv[f] * inv_std[f]
                            })
                            .collect()
                    } else {
                        // dxhat = g·γ; Σdxhat = γ·Σg and Σdxhat·xhat = γ·Σg·xhat.
                        let m = layout.count() as f64;
                        g.iter()
                            .enumerate()
                            .map(|(i, x)| {
                                let f = layout.feature_of(i);
                                gv[f] * inv_std[f] / m * (m * x - d_beta[f] - xhat[i] * d_gamma[f])
                            })
                            .collect()
                    };
                    send(*input, d_in);
                }
                send(*gamma, d_gamma);
                send(*beta, d_beta);
            }
        }
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
