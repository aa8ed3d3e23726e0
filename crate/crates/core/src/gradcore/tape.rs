//! Dynamic reverse-mode tape.
//!
//! A [`Graph`] records every operation as a node holding its output value
//! and whatever the backward rule needs. Nodes only ever refer to earlier
//! nodes, so the tape is acyclic by construction and [`Graph::backward`]
//! is a single reverse sweep.

use std::collections::BTreeMap;

use super::kernels::{col2im_add, gemm, im2col, ConvGeometry};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Payload-free view of a node's operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Input,
    Param,
    Conv2d,
    Dense,
    Relu,
    MaxPool2d,
    Reshape,
    Gather,
    Add,
    Mul,
    Sum,
    SoftmaxCrossEntropy,
}

#[derive(Debug)]
enum Op {
    Input,
    Param,
    Conv2d { geometry: ConvGeometry },
    Dense,
    Relu,
    MaxPool2d { argmax: Vec<usize> },
    Reshape,
    Gather { indices: Vec<usize> },
    Add,
    Mul,
    Sum,
    SoftmaxCrossEntropy { labels: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Input => OpKind::Input,
            Op::Param => OpKind::Param,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Dense => OpKind::Dense,
            Op::Relu => OpKind::Relu,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::Reshape => OpKind::Reshape,
            Op::Gather { .. } => OpKind::Gather,
            Op::Add => OpKind::Add,
            Op::Mul => OpKind::Mul,
            Op::Sum => OpKind::Sum,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
        }
    }
}

#[derive(Debug)]
struct TapeNode {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients of the root with respect to every parameter leaf on the tape.
/// Parameters the root does not depend on get an all-zero entry.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.remove(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<TapeNode>,
    flops: u64,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn op_kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    /// Floating-point operations counted by convolution forwards, using the
    /// `2*k*k*C (+1 with bias)` per-output convention.
    pub fn conv_flops(&self) -> u64 {
        self.flops
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        let requires_grad = match op {
            Op::Param => true,
            Op::Input => false,
            _ => inputs.iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(TapeNode {
            op,
            inputs,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, vec![], value)
    }

    /// Trainable leaf; reported by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Param, vec![], value)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernels: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let xs = self.value(input).shape().to_vec();
        let ks = self.value(kernels).shape().to_vec();
        let mismatch = || Error::ShapeMismatch {
            op: "conv2d",
            left: xs.clone(),
            right: ks.clone(),
        };
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] || ks[2] != ks[3] || stride == 0 {
            return Err(mismatch());
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (j, k) = (ks[0], ks[2]);
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(mismatch());
        }
        let geometry = ConvGeometry {
            channels: c,
            height: h,
            width: w,
            kernel: k,
            stride,
            padding,
            out_height: (h + 2 * padding - k) / stride + 1,
            out_width: (w + 2 * padding - k) / stride + 1,
        };
        if let Some(b) = bias {
            let bs = self.value(b).shape();
            if bs != [j] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    left: bs.to_vec(),
                    right: vec![j],
                });
            }
        }

        let p = geometry.positions();
        let rows = geometry.col_rows();
        let mut out = Tensor::zeros(vec![n, j, geometry.out_height, geometry.out_width]);
        let mut cols = vec![0.0; rows * p];
        {
            let x = self.value(input).data();
            let kd = self.value(kernels).data();
            let bd = bias.map(|b| self.value(b).data());
            let od = out.data_mut();
            for img in 0..n {
                im2col(&x[img * c * h * w..(img + 1) * c * h * w], &geometry, &mut cols);
                let dst = &mut od[img * j * p..(img + 1) * j * p];
                gemm(j, rows, p, kd, false, &cols, false, 0.0, dst);
                if let Some(bd) = bd {
                    for (f, plane) in dst.chunks_mut(p).enumerate() {
                        plane.iter_mut().for_each(|v| *v += bd[f]);
                    }
                }
            }
        }
        let per_output = 2 * rows as u64 + u64::from(bias.is_some());
        self.flops += (n * j * p) as u64 * per_output;

        let mut inputs = vec![input, kernels];
        inputs.extend(bias);
        Ok(self.push(Op::Conv2d { geometry }, inputs, out))
    }

    pub fn dense(&mut self, input: NodeId, weights: NodeId, bias: NodeId) -> Result<NodeId> {
        let xs = self.value(input).shape();
        let ws = self.value(weights).shape();
        let bs = self.value(bias).shape();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
            return Err(Error::ShapeMismatch {
                op: "dense",
                left: xs.to_vec(),
                right: ws.to_vec(),
            });
        }
        let (n, d, k) = (xs[0], xs[1], ws[1]);
        let mut out = Tensor::zeros(vec![n, k]);
        {
            let od = out.data_mut();
            for row in od.chunks_mut(k) {
                row.copy_from_slice(self.value(bias).data());
            }
            gemm(
                n,
                d,
                k,
                self.value(input).data(),
                false,
                self.value(weights).data(),
                false,
                1.0,
                od,
            );
        }
        Ok(self.push(Op::Dense, vec![input, weights, bias], out))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let out = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().map(|v| v.max(0.0)).collect(),
        )
        .expect("same shape");
        self.push(Op::Relu, vec![input], out)
    }

    /// Max pooling over `window x window` patches. Ties resolve to the
    /// first maximal element in row-major window order.
    pub fn max_pool2d(&mut self, input: NodeId, window: usize, stride: usize) -> Result<NodeId> {
        let xs = self.value(input).shape().to_vec();
        if xs.len() != 4 || window == 0 || stride == 0 || xs[2] < window || xs[3] < window {
            return Err(Error::ShapeMismatch {
                op: "max_pool2d",
                left: xs,
                right: vec![window, window],
            });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let oh = (h - window) / stride + 1;
        let ow = (w - window) / stride + 1;
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for jj in 0..ow {
                    let mut best = base + i * stride * w + jj * stride;
                    for di in 0..window {
                        for dj in 0..window {
                            let idx = base + (i * stride + di) * w + jj * stride + dj;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(Op::MaxPool2d { argmax }, vec![input], out))
    }

    pub fn reshape(&mut self, input: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        let out = self.value(input).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape, vec![input], out))
    }

    /// `out[i] = table.flat[indices[i]]`, shaped as `shape`.
    pub fn gather(
        &mut self,
        table: NodeId,
        indices: Vec<usize>,
        shape: impl Into<Vec<usize>>,
    ) -> Result<NodeId> {
        let t = self.value(table).data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.len()) {
            return Err(Error::ShapeMismatch {
                op: "gather",
                left: vec![bad],
                right: self.value(table).shape().to_vec(),
            });
        }
        let out = Tensor::new(shape, indices.iter().map(|&i| t[i]).collect())?;
        Ok(self.push(Op::Gather { indices }, vec![table], out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.push(Op::Add, vec![a, b], out))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul, vec![a, b], out))
    }

    fn zip(&self, a: NodeId, b: NodeId, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect(),
        )
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let s = self.value(input).sum();
        self.push(Op::Sum, vec![input], Tensor::scalar(s))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let ls = self.value(logits).shape();
        if ls.len() != 2 || ls[0] != labels.len() || ls[0] == 0 {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: ls.to_vec(),
                right: vec![labels.len()],
            });
        }
        let (n, k) = (ls[0], ls[1]);
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &z[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_sum = max + sum.ln();
            loss += log_sum - row[label];
            for (p, v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (v - log_sum).exp();
            }
        }
        let out = Tensor::scalar(loss / n as f64);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                labels: labels.to_vec(),
                probs,
            },
            vec![logits],
            out,
        ))
    }

    /// Reverse sweep from a scalar root. Gradients from multiple uses of a
    /// node are summed.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::filled(rv.shape().to_vec(), 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Param | Op::Input) {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            for (input, g) in self.backward_node(node, &upstream) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }

        let mut out = Gradients::default();
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Param) {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()));
                out.grads.insert(NodeId(idx), g);
            }
        }
        Ok(out)
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn backward_node(&self, node: &TapeNode, up: &Tensor) -> Vec<(NodeId, Tensor)> {
        let ins = &node.inputs;
        let shape_of = |id: NodeId| self.value(id).shape().to_vec();
        match &node.op {
            Op::Input | Op::Param => vec![],
            Op::Conv2d { geometry: g } => {
                let (x, kern) = (ins[0], ins[1]);
                let n = self.value(x).shape()[0];
                let j = self.value(kern).shape()[0];
                let (p, rows) = (g.positions(), g.col_rows());
                let img_len = g.channels * g.height * g.width;
                let ud = up.data();
                let xd = self.value(x).data();
                let kd = self.value(kern).data();
                let need_x = self.wants(x);
                let mut gk = Tensor::zeros(shape_of(kern));
                let mut gx = need_x.then(|| Tensor::zeros(shape_of(x)));
                let mut cols = vec![0.0; rows * p];
                let mut gcols = vec![0.0; rows * p];
                for img in 0..n {
                    let gout = &ud[img * j * p..(img + 1) * j * p];
                    im2col(&xd[img * img_len..(img + 1) * img_len], g, &mut cols);
                    gemm(j, p, rows, gout, false, &cols, true, 1.0, gk.data_mut());
                    if let Some(gx) = gx.as_mut() {
                        gemm(rows, j, p, kd, true, gout, false, 0.0, &mut gcols);
                        col2im_add(
                            &gcols,
                            g,
                            &mut gx.data_mut()[img * img_len..(img + 1) * img_len],
                        );
                    }
                }
                let mut out = vec![(kern, gk)];
                if let Some(gx) = gx {
                    out.push((x, gx));
                }
                if let Some(&b) = ins.get(2) {
                    let mut gb = Tensor::zeros(vec![j]);
                    for (f, plane) in ud.chunks(p).enumerate() {
                        gb.data_mut()[f % j] += plane.iter().sum::<f64>();
                    }
                    out.push((b, gb));
                }
                out
            }
            Op::Dense => {
                let (x, w, b) = (ins[0], ins[1], ins[2]);
                let (n, d) = (self.value(x).shape()[0], self.value(x).shape()[1]);
                let k = self.value(w).shape()[1];
                let mut out = Vec::with_capacity(3);
                if self.wants(x) {
                    let mut gx = Tensor::zeros(vec![n, d]);
                    gemm(n, k, d, up.data(), false, self.value(w).data(), true, 0.0, gx.data_mut());
                    out.push((x, gx));
                }
                let mut gw = Tensor::zeros(vec![d, k]);
                gemm(d, n, k, self.value(x).data(), true, up.data(), false, 0.0, gw.data_mut());
                out.push((w, gw));
                let mut gb = Tensor::zeros(vec![k]);
                for row in up.data().chunks(k) {
                    for (a, v) in gb.data_mut().iter_mut().zip(row) {
                        *a += v;
                    }
                }
                out.push((b, gb));
                out
            }
            Op::Relu => {
                let x = self.value(ins[0]).data();
                let g = up
                    .data()
                    .iter()
                    .zip(x)
                    .map(|(u, v)| if *v > 0.0 { *u } else { 0.0 })
                    .collect();
                vec![(ins[0], Tensor::new(shape_of(ins[0]), g).expect("same shape"))]
            }
            Op::MaxPool2d { argmax } => {
                let mut gx = Tensor::zeros(shape_of(ins[0]));
                for (&src, u) in argmax.iter().zip(up.data()) {
                    gx.data_mut()[src] += u;
                }
                vec![(ins[0], gx)]
            }
            Op::Reshape => {
                let g = up.clone().reshape(shape_of(ins[0])).expect("same size");
                vec![(ins[0], g)]
            }
            Op::Gather { indices } => {
                vec![(ins[0], scatter_add(up.data(), indices, shape_of(ins[0])))]
            }
            Op::Add => vec![(ins[0], up.clone()), (ins[1], up.clone())],
            Op::Mul => {
                let (a, b) = (self.value(ins[0]), self.value(ins[1]));
                let prod = |t: &Tensor| {
                    Tensor::new(
                        t.shape().to_vec(),
                        up.data().iter().zip(t.data()).map(|(u, v)| u * v).collect(),
                    )
                    .expect("same shape")
                };
                vec![(ins[0], prod(b)), (ins[1], prod(a))]
            }
            Op::Sum => {
                let s = up.data()[0];
                vec![(ins[0], Tensor::filled(shape_of(ins[0]), s))]
            }
            Op::SoftmaxCrossEntropy { labels, probs } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = up.data()[0] / n as f64;
                let mut g: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    g[i * k + l] -= scale;
                }
                vec![(ins[0], Tensor::new(vec![n, k], g).expect("same shape"))]
            }
        }
    }
}

/// Adjoint of a flat gather: sums `upstream[i]` into `out[indices[i]]`.
pub fn scatter_add(upstream: &[f64], indices: &[usize], shape: Vec<usize>) -> Tensor {
    let mut out = Tensor::zeros(shape);
    let od = out.data_mut();
    for (&i, u) in indices.iter().zip(upstream) {
        od[i] += u;
    }
    out
}
