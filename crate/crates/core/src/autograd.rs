//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only record of executed operations. Each call to
//! an op method evaluates the forward kernel immediately and pushes a node;
//! because a node can only reference nodes that already exist, the record is
//! always in topological order and [`Graph::backward`] is a single reverse
//! sweep.

use crate::error::{Error, Result};
use crate::kernels::{self, act, conv, norm, pool, resize, softmax, Activation, BnSpec, ConvSpec};
use crate::tensor::{Element, Shape, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kind of a node, without saved state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    Add,
    Mul,
    MulChannel,
    Scale,
    Activation(Activation),
    BatchNorm,
    AdaptiveMaxPool,
    GlobalAvgPool,
    Bilinear,
    Matmul,
    TransposeHw,
    Reshape,
    ConcatChannels,
    ConcatWidth,
    SelectChannels,
    Softmax,
    Sum,
    CrossEntropy,
}

impl OpKind {
    pub const BACKWARD_OPS: [OpKind; 21] = [
        OpKind::Conv2d,
        OpKind::Add,
        OpKind::Mul,
        OpKind::MulChannel,
        OpKind::Scale,
        OpKind::Activation(Activation::Relu),
        OpKind::Activation(Activation::Sigmoid),
        OpKind::Activation(Activation::HardSigmoid),
        OpKind::Activation(Activation::HardSwish),
        OpKind::BatchNorm,
        OpKind::AdaptiveMaxPool,
        OpKind::GlobalAvgPool,
        OpKind::Bilinear,
        OpKind::Matmul,
        OpKind::TransposeHw,
        OpKind::Reshape,
        OpKind::ConcatChannels,
        OpKind::ConcatWidth,
        OpKind::SelectChannels,
        OpKind::Softmax,
        OpKind::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::MulChannel => "mul_channel",
            OpKind::Scale => "scale",
            OpKind::Activation(Activation::Relu) => "relu",
            OpKind::Activation(Activation::Sigmoid) => "sigmoid",
            OpKind::Activation(Activation::HardSigmoid) => "hard_sigmoid",
            OpKind::Activation(Activation::HardSwish) => "hard_swish",
            OpKind::BatchNorm => "batch_norm",
            OpKind::AdaptiveMaxPool => "adaptive_max_pool",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::Bilinear => "bilinear",
            OpKind::Matmul => "matmul",
            OpKind::TransposeHw => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::ConcatChannels => "concat_channels",
            OpKind::ConcatWidth => "concat_width",
            OpKind::SelectChannels => "select_channels",
            OpKind::Softmax => "softmax",
            OpKind::Sum => "sum",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::BACKWARD_OPS
            .into_iter()
            .chain([OpKind::Sum])
            .find(|k| k.name() == name)
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Add(Var, Var),
    Mul(Var, Var),
    MulChannel {
        x: Var,
        gate: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: norm::BnSaved<T>,
    },
    AdaptiveMaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Bilinear {
        x: Var,
        align_corners: bool,
    },
    Matmul(Var, Var),
    TransposeHw(Var),
    Reshape(Var),
    ConcatChannels(Vec<Var>),
    ConcatWidth(Vec<Var>),
    SelectChannels {
        x: Var,
        idx: Vec<usize>,
    },
    Softmax(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Tensor<T>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::MulChannel { .. } => OpKind::MulChannel,
            Op::Scale { .. } => OpKind::Scale,
            Op::Act { kind, .. } => OpKind::Activation(*kind),
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::AdaptiveMaxPool { .. } => OpKind::AdaptiveMaxPool,
            Op::GlobalAvgPool(_) => OpKind::GlobalAvgPool,
            Op::Bilinear { .. } => OpKind::Bilinear,
            Op::Matmul(..) => OpKind::Matmul,
            Op::TransposeHw(_) => OpKind::TransposeHw,
            Op::Reshape(_) => OpKind::Reshape,
            Op::ConcatChannels(_) => OpKind::ConcatChannels,
            Op::ConcatWidth(_) => OpKind::ConcatWidth,
            Op::SelectChannels { .. } => OpKind::SelectChannels,
            Op::Softmax(_) => OpKind::Softmax,
            Op::Sum(_) => OpKind::Sum,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Add(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) => vec![*a, *b],
            Op::MulChannel { x, gate } => vec![*x, *gate],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ConcatChannels(v) | Op::ConcatWidth(v) => v.clone(),
            Op::Scale { x, .. }
            | Op::Act { x, .. }
            | Op::AdaptiveMaxPool { x, .. }
            | Op::Bilinear { x, .. }
            | Op::SelectChannels { x, .. }
            | Op::GlobalAvgPool(x)
            | Op::TransposeHw(x)
            | Op::Reshape(x)
            | Op::Softmax(x)
            | Op::Sum(x) => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    fault: Option<OpKind>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(what: &str, a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{what}: operand shapes differ, {a} vs {b}")));
    }
    Ok(())
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            fault: None,
        }
    }

    /// Test hook: the backward rule of `kind` is deliberately perturbed so
    /// that gradient checks must fail. Used as a negative control.
    pub fn inject_backward_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    pub fn conv_spec(&self, v: Var) -> Option<ConvSpec> {
        match &self.nodes[v.0].op {
            Op::Conv2d { spec, .. } => Some(*spec),
            _ => None,
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let out = conv::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &spec)?;
        Ok(self.push(out, Op::Conv2d { x, w, b, spec }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= v;
        }
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `x[N,C,H,W] * gate[N,C,1,1]`, broadcasting over the plane.
    pub fn mul_channel(&mut self, x: Var, gate: Var) -> Result<Var> {
        let xs = self.shape(x);
        let gs = self.shape(gate);
        if gs != Shape::new(xs.n(), xs.c(), 1, 1) {
            return Err(Error::shape(format!("channel gate {gs} does not fit {xs}")));
        }
        let plane = xs.plane();
        let mut out = self.value(x).clone();
        for (chunk, &g) in out.data_mut().chunks_mut(plane).zip(self.value(gate).data()) {
            for v in chunk {
                *v *= g;
            }
        }
        Ok(self.push(out, Op::MulChannel { x, gate }))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale { x, factor })
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let out = act::activation_forward(self.value(x), kind);
        self.push(out, Op::Act { x, kind })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    /// Batch normalization. In training mode the batch statistics are also
    /// returned so the caller can update its running buffers.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        spec: &BnSpec,
        train: bool,
    ) -> Result<(Var, Option<norm::BatchStats<T>>)> {
        let (out, saved, stats) = norm::batch_norm_forward(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            spec,
            train,
        )?;
        let v = self.push(out, Op::BatchNorm { x, gamma, beta, saved });
        Ok((v, stats))
    }

    pub fn adaptive_max_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (out, argmax) = pool::adaptive_max_pool2d(self.value(x), out_h, out_w)?;
        Ok(self.push(out, Op::AdaptiveMaxPool { x, argmax }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let out = pool::global_avg_pool(self.value(x));
        self.push(out, Op::GlobalAvgPool(x))
    }

    pub fn bilinear(&mut self, x: Var, out_h: usize, out_w: usize, align_corners: bool) -> Result<Var> {
        let out = resize::bilinear_resize(self.value(x), out_h, out_w, align_corners)?;
        Ok(self.push(out, Op::Bilinear { x, align_corners }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Matmul(a, b)))
    }

    pub fn transpose_hw(&mut self, x: Var) -> Var {
        let out = kernels::transpose_hw(self.value(x));
        self.push(out, Op::TransposeHw(x))
    }

    pub fn reshape(&mut self, x: Var, shape: Shape) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let out = kernels::concat_channels(&refs)?;
        Ok(self.push(out, Op::ConcatChannels(parts.to_vec())))
    }

    pub fn concat_width(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let out = kernels::concat_width(&refs)?;
        Ok(self.push(out, Op::ConcatWidth(parts.to_vec())))
    }

    pub fn select_channels(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let out = kernels::select_channels(self.value(x), idx)?;
        Ok(self.push(out, Op::SelectChannels { x, idx: idx.to_vec() }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = softmax::softmax_rows(self.value(x))?;
        Ok(self.push(out, Op::Softmax(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Weighted pixelwise softmax cross entropy over the channel axis:
    /// `sum_i weights[i] * -log softmax(logits[:, i])[targets[i]]`, where `i`
    /// ranges over the `N*H*W` pixels in NHW order. Pixels with zero weight
    /// do not contribute and their targets are not inspected.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let [n, k, h, w] = self.shape(logits).dims();
        let pixels = n * h * w;
        if targets.len() != pixels || weights.len() != pixels {
            return Err(Error::shape(format!(
                "cross_entropy expects {pixels} targets and weights, got {} and {}",
                targets.len(),
                weights.len()
            )));
        }
        let probs = channel_softmax(self.value(logits));
        let plane = h * w;
        let mut loss = 0.0f64;
        for (i, (&t, &wt)) in targets.iter().zip(weights).enumerate() {
            if wt == T::zero() {
                continue;
            }
            if t >= k {
                return Err(Error::invalid(format!("target class {t} out of range for {k} classes")));
            }
            let (b, p) = (i / plane, i % plane);
            let lg = self.value(logits).data();
            // log-softmax from logits for accuracy
            let col = |c: usize| lg[(b * k + c) * plane + p].as_f64();
            let m = (0..k).map(col).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + (0..k).map(|c| (col(c) - m).exp()).sum::<f64>().ln();
            loss += wt.as_f64() * (lse - col(t));
        }
        Ok(self.push(
            Tensor::scalar(T::of(loss)),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        ))
    }

    /// Accumulates gradients of the scalar `loss` into every node that
    /// requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape.numel() != 1 {
            return Err(Error::shape(format!("backward requires a scalar loss, got {shape}")));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::full(shape, T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let keep = matches!(self.nodes[i].op, Op::Leaf);
            let g = if keep {
                continue;
            } else {
                match self.grads[i].take() {
                    Some(g) => g,
                    None => continue,
                }
            };
            let contributions = self.backward_node(i, &g);
            let faulty = self.fault == Some(self.nodes[i].op.kind());
            for (v, mut t) in contributions {
                if faulty {
                    t = t.map(|x| x * T::of(1.01) + T::of(1e-3));
                }
                self.accumulate(v, t);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, t: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, spec } => {
                let need = (self.wants(*x), self.wants(*w), b.is_some_and(|b| self.wants(b)));
                let grads = conv::conv2d_backward(self.value(*x), self.value(*w), g, spec, need);
                out.extend(grads.input.map(|t| (*x, t)));
                out.extend(grads.weight.map(|t| (*w, t)));
                if let (Some(b), Some(t)) = (b, grads.bias) {
                    out.push((*b, t));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Mul(a, b) => {
                let ga = zip_map(g, self.value(*b), |gv, bv| gv * bv);
                let gb = zip_map(g, self.value(*a), |gv, av| gv * av);
                out.push((*a, ga));
                out.push((*b, gb));
            }
            Op::MulChannel { x, gate } => {
                let xs = self.shape(*x);
                let plane = xs.plane();
                let gate_v = self.value(*gate);
                let mut gx = g.clone();
                for (chunk, &gt) in gx.data_mut().chunks_mut(plane).zip(gate_v.data()) {
                    for v in chunk {
                        *v *= gt;
                    }
                }
                let mut gg = Tensor::zeros(gate_v.shape());
                for ((dst, gc), xc) in gg
                    .data_mut()
                    .iter_mut()
                    .zip(g.data().chunks(plane))
                    .zip(self.value(*x).data().chunks(plane))
                {
                    *dst = gc.iter().zip(xc).map(|(&a, &b)| a * b).sum();
                }
                out.push((*x, gx));
                out.push((*gate, gg));
            }
            Op::Scale { x, factor } => out.push((*x, g.map(|v| v * *factor))),
            Op::Act { x, kind } => {
                out.push((*x, act::activation_backward(self.value(*x), &node.value, g, *kind)));
            }
            Op::BatchNorm { x, gamma, beta, saved } => {
                let (dx, dg, db) = norm::batch_norm_backward(g, self.value(*gamma), saved);
                out.push((*x, dx));
                out.push((*gamma, dg));
                out.push((*beta, db));
            }
            Op::AdaptiveMaxPool { x, argmax } => {
                out.push((*x, pool::adaptive_max_pool2d_backward(self.shape(*x), argmax, g)));
            }
            Op::GlobalAvgPool(x) => {
                out.push((*x, pool::global_avg_pool_backward(self.shape(*x), g)));
            }
            Op::Bilinear { x, align_corners } => {
                out.push((*x, resize::bilinear_resize_backward(self.shape(*x), g, *align_corners)));
            }
            Op::Matmul(a, b) => {
                let (da, db) = kernels::matmul_backward(self.value(*a), self.value(*b), g);
                out.push((*a, da));
                out.push((*b, db));
            }
            Op::TransposeHw(x) => out.push((*x, kernels::transpose_hw(g))),
            Op::Reshape(x) => {
                out.push((*x, g.clone().reshape(self.shape(*x)).expect("reshape back")));
            }
            Op::ConcatChannels(parts) => {
                let mut start = 0;
                for &p in parts {
                    let c = self.shape(p).c();
                    out.push((p, g.channel_slice(start, c)));
                    start += c;
                }
            }
            Op::ConcatWidth(parts) => {
                let total_w = g.shape().w();
                let rows = g.numel() / total_w.max(1);
                let mut start = 0;
                for &p in parts {
                    let ps = self.shape(p);
                    let w = ps.w();
                    let mut data = Vec::with_capacity(ps.numel());
                    for r in 0..rows {
                        data.extend_from_slice(&g.data()[r * total_w + start..r * total_w + start + w]);
                    }
                    out.push((p, Tensor::from_vec(ps, data).expect("width slice")));
                    start += w;
                }
            }
            Op::SelectChannels { x, idx } => {
                let xs = self.shape(*x);
                let plane = xs.plane();
                let mut gx = Tensor::zeros(xs);
                let k = idx.len();
                for b in 0..xs.n() {
                    for (j, &src) in idx.iter().enumerate() {
                        let from = &g.data()[(b * k + j) * plane..][..plane];
                        let to = &mut gx.data_mut()[(b * xs.c() + src) * plane..][..plane];
                        for (t, &f) in to.iter_mut().zip(from) {
                            *t += f;
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::Softmax(x) => out.push((*x, softmax::softmax_rows_backward(&node.value, g))),
            Op::Sum(x) => out.push((*x, Tensor::full(self.shape(*x), g.item()))),
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let [n, k, h, w] = probs.shape().dims();
                let plane = h * w;
                let upstream = g.item();
                let mut d = Tensor::zeros(probs.shape());
                let dd = d.data_mut();
                let pd = probs.data();
                for (i, (&t, &wt)) in targets.iter().zip(weights).enumerate() {
                    if wt == T::zero() {
                        continue;
                    }
                    let (b, p) = (i / plane, i % plane);
                    let s = upstream * wt;
                    for c in 0..k {
                        let idx = (b * k + c) * plane + p;
                        let onehot = if c == t { T::one() } else { T::zero() };
                        dd[idx] = s * (pd[idx] - onehot);
                    }
                }
                debug_assert_eq!(dd.len(), n * k * plane);
                out.push((*logits, d));
            }
        }
        out
    }
}

fn zip_map<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}

/// Softmax over the channel axis of an NCHW tensor.
pub fn channel_softmax<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let [n, k, h, w] = x.shape().dims();
    let plane = h * w;
    let mut out = Tensor::zeros(x.shape());
    let xd = x.data();
    let od = out.data_mut();
    for b in 0..n {
        for p in 0..plane {
            let idx = |c: usize| (b * k + c) * plane + p;
            let m = (0..k).map(|c| xd[idx(c)]).fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for c in 0..k {
                let e = (xd[idx(c)] - m).exp();
                od[idx(c)] = e;
                s += e;
            }
            for c in 0..k {
                od[idx(c)] /= s;
            }
        }
    }
    out
}
