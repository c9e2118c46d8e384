//! Reverse-mode tape.
//!
//! Ops execute eagerly and append a node to the tape; creation order is the
//! topological order, and `backward` walks it in reverse, accumulating
//! vector-Jacobian products only into inputs that can reach a trainable
//! leaf. Tensors on the tape are never mutated in place.
//!
//! Exp arguments are clamped to [-30, 30] before exponentiation so the
//! Weibull shape/scale heads and the gamma-function terms of the KL stay in
//! a finite positive range.

use std::collections::BTreeMap;

use super::{Element, ParamStore, Tensor};
use crate::error::Error;
use crate::parallel;
use crate::special;

/// Insert every parameter of a store into the graph, either as trainable
/// leaves or as constants, returning name -> node.
pub fn insert_params<E: Element>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    trainable: bool,
) -> BTreeMap<String, NodeId> {
    store
        .iter()
        .map(|(name, t)| {
            let id = if trainable {
                g.leaf(t.clone())
            } else {
                g.constant(t.clone())
            };
            (name.clone(), id)
        })
        .collect()
}

/// Clamp bound for exponent inputs.
pub const EXP_CLAMP: f64 = 30.0;
/// Floor used by the guarded logarithms: ln never returns less than -30.
pub const LN_FLOOR: f64 = -30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Elementwise nonlinearity with an exact derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointFn {
    Softplus,
    /// exp with input clamped to [-30, 30]; zero derivative outside.
    ExpClamped,
    /// slope 0.2 on the negative side.
    LeakyRelu,
    Tanh,
    Sigmoid,
    /// ln(max(x, e^-30)); zero derivative below the floor.
    LnClamped,
    /// ln(1 - e^-x) for x > 0, clamped at -30.
    Ln1mExp,
    /// log-gamma; derivative is digamma.
    Lgamma,
}

#[derive(Debug, Clone)]
enum Op<E> {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    AddScalar(E),
    MulScalar(E),
    Pointwise(PointFn),
    Dense { has_bias: bool },
    Conv2d { stride: usize, pad: usize },
    UpsampleNn { factor: usize },
    AvgPool { factor: usize },
    ConcatAxis1,
    SliceAxis1 { start: usize, len: usize },
    TileSpatial { h: usize, w: usize },
    Reshape,
    SumAll,
    SumRows,
}

struct Node<E: Element> {
    op: Op<E>,
    inputs: Vec<NodeId>,
    value: Tensor<E>,
    needs_grad: bool,
}

/// Eager tape of tensor operations.
pub struct Graph<E: Element> {
    nodes: Vec<Node<E>>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Grads<E> {
    by_node: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Grads<E> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<E>> {
        self.by_node.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<E>> {
        self.by_node.get_mut(id.0).and_then(|g| g.take())
    }
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: gradients will be tracked through it.
    pub fn leaf(&mut self, value: Tensor<E>) -> NodeId {
        self.push(Op::Leaf, vec![], value, true)
    }

    /// Constant leaf: no gradient flows into or through it alone.
    pub fn constant(&mut self, value: Tensor<E>) -> NodeId {
        self.push(Op::Leaf, vec![], value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op<E>, inputs: Vec<NodeId>, value: Tensor<E>, needs: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            needs_grad: needs,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    fn binary(&mut self, op: Op<E>, a: NodeId, b: NodeId) -> crate::Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.dims() != vb.dims() {
            return Err(Error::Shape(format!(
                "elementwise op on {:?} vs {:?}",
                va.dims(),
                vb.dims()
            )));
        }
        let mut out = va.clone();
        {
            let (o, rb) = (out.data_mut(), vb.data());
            match op {
                Op::Add => o.iter_mut().zip(rb).for_each(|(x, &y)| *x += y),
                Op::Sub => o.iter_mut().zip(rb).for_each(|(x, &y)| *x -= y),
                Op::Mul => o.iter_mut().zip(rb).for_each(|(x, &y)| *x *= y),
                Op::Div => o.iter_mut().zip(rb).for_each(|(x, &y)| *x = *x / y),
                _ => unreachable!(),
            }
        }
        let needs = self.needs(&[a, b]);
        Ok(self.push(op, vec![a, b], out, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> crate::Result<NodeId> {
        self.binary(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> crate::Result<NodeId> {
        self.binary(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> crate::Result<NodeId> {
        self.binary(Op::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> crate::Result<NodeId> {
        self.binary(Op::Div, a, b)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let s = E::from_f64(s);
        let mut out = self.nodes[a.0].value.clone();
        out.data_mut().iter_mut().for_each(|x| *x += s);
        let needs = self.needs(&[a]);
        self.push(Op::AddScalar(s), vec![a], out, needs)
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let s = E::from_f64(s);
        let mut out = self.nodes[a.0].value.clone();
        out.data_mut().iter_mut().for_each(|x| *x *= s);
        let needs = self.needs(&[a]);
        self.push(Op::MulScalar(s), vec![a], out, needs)
    }

    pub fn pointwise(&mut self, a: NodeId, f: PointFn) -> NodeId {
        let x = &self.nodes[a.0].value;
        let mut out = x.clone();
        pointwise_forward(f, out.data_mut());
        let needs = self.needs(&[a]);
        self.push(Op::Pointwise(f), vec![a], out, needs)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.pointwise(a, PointFn::Softplus)
    }

    pub fn exp_clamped(&mut self, a: NodeId) -> NodeId {
        self.pointwise(a, PointFn::ExpClamped)
    }

    pub fn leaky_relu(&mut self, a: NodeId) -> NodeId {
        self.pointwise(a, PointFn::LeakyRelu)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.pointwise(a, PointFn::Tanh)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.pointwise(a, PointFn::Sigmoid)
    }

    pub fn ln_clamped(&mut self, a: NodeId) -> NodeId {
        self.pointwise(a, PointFn::LnClamped)
    }

    pub fn ln1mexp(&mut self, a: NodeId) -> NodeId {
        self.pointwise(a, PointFn::Ln1mExp)
    }

    pub fn lgamma(&mut self, a: NodeId) -> NodeId {
        self.pointwise(a, PointFn::Lgamma)
    }

    /// y = x W^T + b with x: (B, In), w: (Out, In), b: (Out).
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> crate::Result<NodeId> {
        let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        if vx.rank() != 2 || vw.rank() != 2 || vx.dims()[1] != vw.dims()[1] {
            return Err(Error::Shape(format!(
                "dense: x {:?} w {:?}",
                vx.dims(),
                vw.dims()
            )));
        }
        let (batch, nin) = (vx.dims()[0], vx.dims()[1]);
        let nout = vw.dims()[0];
        if let Some(b) = b {
            let vb = &self.nodes[b.0].value;
            if vb.dims() != [nout] {
                return Err(Error::Shape(format!(
                    "dense bias {:?}, expected [{nout}]",
                    vb.dims()
                )));
            }
        }
        let mut out = Tensor::zeros(&[batch, nout]);
        dense_forward(
            vx.data(),
            vw.data(),
            b.map(|b| self.nodes[b.0].value.data()),
            out.data_mut(),
            batch,
            nin,
            nout,
        );
        let mut inputs = vec![x, w];
        if let Some(b) = b {
            inputs.push(b);
        }
        let needs = self.needs(&inputs);
        Ok(self.push(Op::Dense { has_bias: b.is_some() }, inputs, out, needs))
    }

    /// Cross-correlation with x: (B, Ci, H, W), k: (Co, Ci, KH, KW), b: (Co).
    pub fn conv2d(
        &mut self,
        x: NodeId,
        k: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> crate::Result<NodeId> {
        let (vx, vk, vb) = (
            &self.nodes[x.0].value,
            &self.nodes[k.0].value,
            &self.nodes[b.0].value,
        );
        if vx.rank() != 4 || vk.rank() != 4 {
            return Err(Error::Shape("conv2d wants rank-4 x and k".into()));
        }
        let [batch, ci, h, w] = [vx.dims()[0], vx.dims()[1], vx.dims()[2], vx.dims()[3]];
        let [co, kci, kh, kw] = [vk.dims()[0], vk.dims()[1], vk.dims()[2], vk.dims()[3]];
        if kci != ci || vb.dims() != [co] {
            return Err(Error::Shape(format!(
                "conv2d: x {:?} k {:?} b {:?}",
                vx.dims(),
                vk.dims(),
                vb.dims()
            )));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw || stride == 0 {
            return Err(Error::Shape(format!(
                "conv2d: spatial {h}x{w} pad {pad} kernel {kh}x{kw} stride {stride}"
            )));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[batch, co, ho, wo]);
        let shape = ConvShape {
            ci,
            h,
            w,
            co,
            kh,
            kw,
            ho,
            wo,
            stride,
            pad,
        };
        conv_forward(vx.data(), vk.data(), vb.data(), out.data_mut(), &shape);
        let needs = self.needs(&[x, k, b]);
        Ok(self.push(Op::Conv2d { stride, pad }, vec![x, k, b], out, needs))
    }

    /// Nearest-neighbor (replicating) upsample by an integer factor.
    pub fn upsample_nn(&mut self, x: NodeId, factor: usize) -> crate::Result<NodeId> {
        let vx = &self.nodes[x.0].value;
        if vx.rank() != 4 || factor == 0 {
            return Err(Error::Shape("upsample_nn wants rank-4 input".into()));
        }
        let [b, c, h, w] = [vx.dims()[0], vx.dims()[1], vx.dims()[2], vx.dims()[3]];
        let mut out = Tensor::zeros(&[b, c, h * factor, w * factor]);
        {
            let (src, dst) = (vx.data(), out.data_mut());
            let (hw_in, w_out) = (h * w, w * factor);
            for bc in 0..b * c {
                for ih in 0..h {
                    for iw in 0..w {
                        let v = src[bc * hw_in + ih * w + iw];
                        for dy in 0..factor {
                            let row = bc * hw_in * factor * factor + (ih * factor + dy) * w_out;
                            let base = row + iw * factor;
                            dst[base..base + factor].iter_mut().for_each(|d| *d = v);
                        }
                    }
                }
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(Op::UpsampleNn { factor }, vec![x], out, needs))
    }

    /// Average pooling over non-overlapping factor x factor blocks.
    pub fn avgpool(&mut self, x: NodeId, factor: usize) -> crate::Result<NodeId> {
        let vx = &self.nodes[x.0].value;
        if vx.rank() != 4 || factor == 0 {
            return Err(Error::Shape("avgpool wants rank-4 input".into()));
        }
        let [b, c, h, w] = [vx.dims()[0], vx.dims()[1], vx.dims()[2], vx.dims()[3]];
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::Shape(format!(
                "avgpool: {h}x{w} not divisible by {factor}"
            )));
        }
        let (ho, wo) = (h / factor, w / factor);
        let mut out = Tensor::zeros(&[b, c, ho, wo]);
        let inv = E::from_f64(1.0 / (factor * factor) as f64);
        {
            let (src, dst) = (vx.data(), out.data_mut());
            // Pairwise reduction: doubling is exact, so pooling a replicated
            // block recovers the original value bit-exactly for
            // power-of-two factors.
            let mut buf: Vec<E> = Vec::with_capacity(factor * factor);
            for bc in 0..b * c {
                for oh in 0..ho {
                    for ow in 0..wo {
                        buf.clear();
                        for dy in 0..factor {
                            let row = bc * h * w + (oh * factor + dy) * w;
                            buf.extend_from_slice(&src[row + ow * factor..row + (ow + 1) * factor]);
                        }
                        while buf.len() > 1 {
                            let mut w_i = 0;
                            let mut i = 0;
                            while i + 1 < buf.len() {
                                buf[w_i] = buf[i] + buf[i + 1];
                                w_i += 1;
                                i += 2;
                            }
                            if i < buf.len() {
                                buf[w_i] = buf[i];
                                w_i += 1;
                            }
                            buf.truncate(w_i);
                        }
                        dst[bc * ho * wo + oh * wo + ow] = buf[0] * inv;
                    }
                }
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(Op::AvgPool { factor }, vec![x], out, needs))
    }

    /// Concatenate along axis 1 (features for rank 2, channels for rank 4).
    pub fn concat_axis1(&mut self, a: NodeId, b: NodeId) -> crate::Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.rank() != vb.rank()
            || va.dims()[0] != vb.dims()[0]
            || va.dims()[2..] != vb.dims()[2..]
        {
            return Err(Error::Shape(format!(
                "concat_axis1: {:?} vs {:?}",
                va.dims(),
                vb.dims()
            )));
        }
        let batch = va.dims()[0];
        let tail: usize = va.dims()[2..].iter().product();
        let (ca, cb) = (va.dims()[1], vb.dims()[1]);
        let mut dims = va.dims().to_vec();
        dims[1] = ca + cb;
        let mut out = Tensor::zeros(&dims);
        {
            let dst = out.data_mut();
            let (sa, sb) = (va.data(), vb.data());
            for i in 0..batch {
                let da = i * (ca + cb) * tail;
                dst[da..da + ca * tail].copy_from_slice(&sa[i * ca * tail..(i + 1) * ca * tail]);
                dst[da + ca * tail..da + (ca + cb) * tail]
                    .copy_from_slice(&sb[i * cb * tail..(i + 1) * cb * tail]);
            }
        }
        let needs = self.needs(&[a, b]);
        Ok(self.push(Op::ConcatAxis1, vec![a, b], out, needs))
    }

    /// Take `len` features/channels starting at `start` along axis 1.
    pub fn slice_axis1(&mut self, a: NodeId, start: usize, len: usize) -> crate::Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let c = va.dims()[1];
        if start + len > c {
            return Err(Error::Shape(format!(
                "slice_axis1: {start}+{len} > {c} in {:?}",
                va.dims()
            )));
        }
        let batch = va.dims()[0];
        let tail: usize = va.dims()[2..].iter().product();
        let mut dims = va.dims().to_vec();
        dims[1] = len;
        let mut out = Tensor::zeros(&dims);
        {
            let (src, dst) = (va.data(), out.data_mut());
            for i in 0..batch {
                let so = i * c * tail + start * tail;
                dst[i * len * tail..(i + 1) * len * tail]
                    .copy_from_slice(&src[so..so + len * tail]);
            }
        }
        let needs = self.needs(&[a]);
        Ok(self.push(Op::SliceAxis1 { start, len }, vec![a], out, needs))
    }

    /// Broadcast a (B, C) tensor to (B, C, h, w).
    pub fn tile_spatial(&mut self, a: NodeId, h: usize, w: usize) -> crate::Result<NodeId> {
        let va = &self.nodes[a.0].value;
        if va.rank() != 2 {
            return Err(Error::Shape("tile_spatial wants rank-2 input".into()));
        }
        let (batch, c) = (va.dims()[0], va.dims()[1]);
        let mut out = Tensor::zeros(&[batch, c, h, w]);
        {
            let (src, dst) = (va.data(), out.data_mut());
            for bc in 0..batch * c {
                let v = src[bc];
                dst[bc * h * w..(bc + 1) * h * w].iter_mut().for_each(|d| *d = v);
            }
        }
        let needs = self.needs(&[a]);
        Ok(self.push(Op::TileSpatial { h, w }, vec![a], out, needs))
    }

    pub fn reshape(&mut self, a: NodeId, dims: &[usize]) -> crate::Result<NodeId> {
        let out = self.nodes[a.0].value.reshaped(dims)?;
        let needs = self.needs(&[a]);
        Ok(self.push(Op::Reshape, vec![a], out, needs))
    }

    /// Scalar sum over every element.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let mut acc = E::ZERO;
        for &v in self.nodes[a.0].value.data() {
            acc += v;
        }
        let needs = self.needs(&[a]);
        self.push(Op::SumAll, vec![a], Tensor::scalar(acc), needs)
    }

    /// Row sums: (B, F) -> (B).
    pub fn sum_rows(&mut self, a: NodeId) -> crate::Result<NodeId> {
        let va = &self.nodes[a.0].value;
        if va.rank() != 2 {
            return Err(Error::Shape("sum_rows wants rank-2 input".into()));
        }
        let (batch, f) = (va.dims()[0], va.dims()[1]);
        let mut out = Tensor::zeros(&[batch]);
        {
            let (src, dst) = (va.data(), out.data_mut());
            for i in 0..batch {
                let mut acc = E::ZERO;
                for &v in &src[i * f..(i + 1) * f] {
                    acc += v;
                }
                dst[i] = acc;
            }
        }
        let needs = self.needs(&[a]);
        Ok(self.push(Op::SumRows, vec![a], out, needs))
    }

    /// Mean of all elements as a scalar node.
    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].value.len();
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n as f64)
    }

    /// Reverse pass from a scalar loss. Gradients are accumulated for every
    /// node that can reach a trainable leaf.
    pub fn backward(&self, loss: NodeId) -> crate::Result<Grads<E>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(Grads { by_node: grads });
        }
        grads[loss.0] = Some(Tensor::scalar(E::ONE));
        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(dy);
                continue;
            }
            self.vjp(idx, &dy, &mut grads)?;
        }
        Ok(Grads { by_node: grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor<E>>], id: NodeId, delta: Tensor<E>) {
        match &mut grads[id.0] {
            Some(g) => {
                debug_assert_eq!(g.dims(), delta.dims());
                g.data_mut()
                    .iter_mut()
                    .zip(delta.data())
                    .for_each(|(a, &d)| *a += d);
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn grad_slot<'a>(
        &self,
        grads: &'a mut [Option<Tensor<E>>],
        id: NodeId,
    ) -> &'a mut Tensor<E> {
        if grads[id.0].is_none() {
            grads[id.0] = Some(Tensor::zeros(self.nodes[id.0].value.dims()));
        }
        grads[id.0].as_mut().unwrap()
    }

    fn vjp(
        &self,
        idx: usize,
        dy: &Tensor<E>,
        grads: &mut [Option<Tensor<E>>],
    ) -> crate::Result<()> {
        let node = &self.nodes[idx];
        let ins = &node.inputs;
        let wants = |g: &Self, i: usize| g.nodes[ins[i].0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                if wants(self, 0) {
                    self.accum(grads, ins[0], dy.clone());
                }
                if wants(self, 1) {
                    self.accum(grads, ins[1], dy.clone());
                }
            }
            Op::Sub => {
                if wants(self, 0) {
                    self.accum(grads, ins[0], dy.clone());
                }
                if wants(self, 1) {
                    let mut d = dy.clone();
                    d.data_mut().iter_mut().for_each(|v| *v = -*v);
                    self.accum(grads, ins[1], d);
                }
            }
            Op::Mul => {
                if wants(self, 0) {
                    let mut d = dy.clone();
                    d.data_mut()
                        .iter_mut()
                        .zip(self.nodes[ins[1].0].value.data())
                        .for_each(|(v, &b)| *v *= b);
                    self.accum(grads, ins[0], d);
                }
                if wants(self, 1) {
                    let mut d = dy.clone();
                    d.data_mut()
                        .iter_mut()
                        .zip(self.nodes[ins[0].0].value.data())
                        .for_each(|(v, &a)| *v *= a);
                    self.accum(grads, ins[1], d);
                }
            }
            Op::Div => {
                let vb = self.nodes[ins[1].0].value.data();
                if wants(self, 0) {
                    let mut d = dy.clone();
                    d.data_mut()
                        .iter_mut()
                        .zip(vb)
                        .for_each(|(v, &b)| *v = *v / b);
                    self.accum(grads, ins[0], d);
                }
                if wants(self, 1) {
                    // d/db (a/b) = -y/b
                    let y = node.value.data();
                    let mut d = dy.clone();
                    d.data_mut()
                        .iter_mut()
                        .zip(y.iter().zip(vb))
                        .for_each(|(v, (&yv, &b))| *v = -(*v) * yv / b);
                    self.accum(grads, ins[1], d);
                }
            }
            Op::AddScalar(_) => {
                if wants(self, 0) {
                    self.accum(grads, ins[0], dy.clone());
                }
            }
            Op::MulScalar(s) => {
                if wants(self, 0) {
                    let s = *s;
                    let mut d = dy.clone();
                    d.data_mut().iter_mut().for_each(|v| *v *= s);
                    self.accum(grads, ins[0], d);
                }
            }
            Op::Pointwise(f) => {
                if wants(self, 0) {
                    let x = self.nodes[ins[0].0].value.data();
                    let y = node.value.data();
                    let mut d = dy.clone();
                    pointwise_backward(*f, x, y, d.data_mut());
                    self.accum(grads, ins[0], d);
                }
            }
            Op::Dense { has_bias } => {
                let vx = &self.nodes[ins[0].0].value;
                let vw = &self.nodes[ins[1].0].value;
                let (batch, nin) = (vx.dims()[0], vx.dims()[1]);
                let nout = vw.dims()[0];
                if wants(self, 0) {
                    let dx = self.grad_slot(grads, ins[0]);
                    dense_backward_x(dy.data(), vw.data(), dx.data_mut(), batch, nin, nout);
                }
                if wants(self, 1) {
                    let dw = self.grad_slot(grads, ins[1]);
                    dense_backward_w(dy.data(), vx.data(), dw.data_mut(), batch, nin, nout);
                }
                if *has_bias && wants(self, 2) {
                    let db = self.grad_slot(grads, ins[2]);
                    let dbm = db.data_mut();
                    for i in 0..batch {
                        for o in 0..nout {
                            dbm[o] += dy.data()[i * nout + o];
                        }
                    }
                }
            }
            Op::Conv2d { stride, pad } => {
                let vx = &self.nodes[ins[0].0].value;
                let vk = &self.nodes[ins[1].0].value;
                let shape = ConvShape {
                    ci: vx.dims()[1],
                    h: vx.dims()[2],
                    w: vx.dims()[3],
                    co: vk.dims()[0],
                    kh: vk.dims()[2],
                    kw: vk.dims()[3],
                    ho: node.value.dims()[2],
                    wo: node.value.dims()[3],
                    stride: *stride,
                    pad: *pad,
                };
                if wants(self, 0) {
                    let dx = self.grad_slot(grads, ins[0]);
                    conv_backward_x(dy.data(), vk.data(), dx.data_mut(), &shape);
                }
                if wants(self, 1) {
                    let dk = self.grad_slot(grads, ins[1]);
                    conv_backward_k(dy.data(), vx.data(), dk.data_mut(), &shape);
                }
                if wants(self, 2) {
                    let db = self.grad_slot(grads, ins[2]);
                    let dbm = db.data_mut();
                    let batch = vx.dims()[0];
                    let plane = shape.ho * shape.wo;
                    for b in 0..batch {
                        for co in 0..shape.co {
                            let base = (b * shape.co + co) * plane;
                            let mut acc = E::ZERO;
                            for &v in &dy.data()[base..base + plane] {
                                acc += v;
                            }
                            dbm[co] += acc;
                        }
                    }
                }
            }
            Op::UpsampleNn { factor } => {
                if wants(self, 0) {
                    let vx = &self.nodes[ins[0].0].value;
                    let [b, c, h, w] =
                        [vx.dims()[0], vx.dims()[1], vx.dims()[2], vx.dims()[3]];
                    let f = *factor;
                    let dx = self.grad_slot(grads, ins[0]);
                    let dxm = dx.data_mut();
                    let w_out = w * f;
                    for bc in 0..b * c {
                        for ih in 0..h {
                            for iw in 0..w {
                                let mut acc = E::ZERO;
                                for fy in 0..f {
                                    let row = bc * h * w * f * f + (ih * f + fy) * w_out;
                                    for fx in 0..f {
                                        acc += dy.data()[row + iw * f + fx];
                                    }
                                }
                                dxm[bc * h * w + ih * w + iw] += acc;
                            }
                        }
                    }
                }
            }
            Op::AvgPool { factor } => {
                if wants(self, 0) {
                    let vx = &self.nodes[ins[0].0].value;
                    let [b, c, h, w] =
                        [vx.dims()[0], vx.dims()[1], vx.dims()[2], vx.dims()[3]];
                    let f = *factor;
                    let inv = E::from_f64(1.0 / (f * f) as f64);
                    let (ho, wo) = (h / f, w / f);
                    let dx = self.grad_slot(grads, ins[0]);
                    let dxm = dx.data_mut();
                    for bc in 0..b * c {
                        for oh in 0..ho {
                            for ow in 0..wo {
                                let g = dy.data()[bc * ho * wo + oh * wo + ow] * inv;
                                for fy in 0..f {
                                    let row = bc * h * w + (oh * f + fy) * w;
                                    for fx in 0..f {
                                        dxm[row + ow * f + fx] += g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::ConcatAxis1 => {
                let (va, vb) = (&self.nodes[ins[0].0].value, &self.nodes[ins[1].0].value);
                let batch = va.dims()[0];
                let tail: usize = va.dims()[2..].iter().product();
                let (ca, cb) = (va.dims()[1], vb.dims()[1]);
                if wants(self, 0) {
                    let da = self.grad_slot(grads, ins[0]);
                    let dam = da.data_mut();
                    for i in 0..batch {
                        let src = i * (ca + cb) * tail;
                        dam[i * ca * tail..(i + 1) * ca * tail]
                            .iter_mut()
                            .zip(&dy.data()[src..src + ca * tail])
                            .for_each(|(g, &d)| *g += d);
                    }
                }
                if wants(self, 1) {
                    let db = self.grad_slot(grads, ins[1]);
                    let dbm = db.data_mut();
                    for i in 0..batch {
                        let src = i * (ca + cb) * tail + ca * tail;
                        dbm[i * cb * tail..(i + 1) * cb * tail]
                            .iter_mut()
                            .zip(&dy.data()[src..src + cb * tail])
                            .for_each(|(g, &d)| *g += d);
                    }
                }
            }
            Op::SliceAxis1 { start, len } => {
                if wants(self, 0) {
                    let va = &self.nodes[ins[0].0].value;
                    let batch = va.dims()[0];
                    let c = va.dims()[1];
                    let tail: usize = va.dims()[2..].iter().product();
                    let da = self.grad_slot(grads, ins[0]);
                    let dam = da.data_mut();
                    for i in 0..batch {
                        let dst = i * c * tail + start * tail;
                        dam[dst..dst + len * tail]
                            .iter_mut()
                            .zip(&dy.data()[i * len * tail..(i + 1) * len * tail])
                            .for_each(|(g, &d)| *g += d);
                    }
                }
            }
            Op::TileSpatial { h, w } => {
                if wants(self, 0) {
                    let plane = h * w;
                    let n = self.nodes[ins[0].0].value.len();
                    let da = self.grad_slot(grads, ins[0]);
                    let dam = da.data_mut();
                    for bc in 0..n {
                        let mut acc = E::ZERO;
                        for &v in &dy.data()[bc * plane..(bc + 1) * plane] {
                            acc += v;
                        }
                        dam[bc] += acc;
                    }
                }
            }
            Op::Reshape => {
                if wants(self, 0) {
                    let dims = self.nodes[ins[0].0].value.dims().to_vec();
                    self.accum(grads, ins[0], dy.reshaped(&dims)?);
                }
            }
            Op::SumAll => {
                if wants(self, 0) {
                    let g = dy.data()[0];
                    let d = Tensor::filled(self.nodes[ins[0].0].value.dims(), g);
                    self.accum(grads, ins[0], d);
                }
            }
            Op::SumRows => {
                if wants(self, 0) {
                    let va = &self.nodes[ins[0].0].value;
                    let (batch, f) = (va.dims()[0], va.dims()[1]);
                    let da = self.grad_slot(grads, ins[0]);
                    let dam = da.data_mut();
                    for i in 0..batch {
                        let g = dy.data()[i];
                        dam[i * f..(i + 1) * f].iter_mut().for_each(|v| *v += g);
                    }
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

struct ConvShape {
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

fn dense_forward<E: Element>(
    x: &[E],
    w: &[E],
    b: Option<&[E]>,
    y: &mut [E],
    _batch: usize,
    nin: usize,
    nout: usize,
) {
    parallel::for_blocks_mut(y, nout, |i, row| {
        let xrow = &x[i * nin..(i + 1) * nin];
        for (o, out) in row.iter_mut().enumerate() {
            let wrow = &w[o * nin..(o + 1) * nin];
            let mut acc = E::ZERO;
            for (xv, wv) in xrow.iter().zip(wrow) {
                acc += *xv * *wv;
            }
            *out = match b {
                Some(b) => acc + b[o],
                None => acc,
            };
        }
    });
}

fn dense_backward_x<E: Element>(
    dy: &[E],
    w: &[E],
    dx: &mut [E],
    _batch: usize,
    nin: usize,
    nout: usize,
) {
    parallel::for_blocks_mut(dx, nin, |i, drow| {
        for o in 0..nout {
            let g = dy[i * nout + o];
            let wrow = &w[o * nin..(o + 1) * nin];
            for (d, wv) in drow.iter_mut().zip(wrow) {
                *d += g * *wv;
            }
        }
    });
}

fn dense_backward_w<E: Element>(
    dy: &[E],
    x: &[E],
    dw: &mut [E],
    batch: usize,
    nin: usize,
    nout: usize,
) {
    parallel::for_blocks_mut(dw, nin, |o, wrow| {
        for i in 0..batch {
            let g = dy[i * nout + o];
            let xrow = &x[i * nin..(i + 1) * nin];
            for (d, xv) in wrow.iter_mut().zip(xrow) {
                *d += g * *xv;
            }
        }
    });
}

/// Valid output range `[lo, hi)` such that `0 <= ow*stride + base < w`.
#[inline]
fn ow_range(base: isize, stride: usize, w: usize, wo: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if base >= 0 { 0 } else { (-base + s - 1) / s };
    let hi = ((w as isize - 1 - base).div_euclid(s) + 1).clamp(0, wo as isize);
    if lo >= hi {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

fn conv_forward<E: Element>(x: &[E], k: &[E], b: &[E], y: &mut [E], s: &ConvShape) {
    let in_plane = s.h * s.w;
    let in_block = s.ci * in_plane;
    let out_block = s.co * s.ho * s.wo;
    parallel::for_blocks_mut(y, out_block, |bi, out| {
        let xb = &x[bi * in_block..(bi + 1) * in_block];
        for co in 0..s.co {
            for oh in 0..s.ho {
                let orow = &mut out[(co * s.ho + oh) * s.wo..(co * s.ho + oh + 1) * s.wo];
                orow.iter_mut().for_each(|v| *v = b[co]);
                for ci in 0..s.ci {
                    for khi in 0..s.kh {
                        let ih = (oh * s.stride + khi) as isize - s.pad as isize;
                        if ih < 0 || ih as usize >= s.h {
                            continue;
                        }
                        let xrow = &xb[ci * in_plane + ih as usize * s.w
                            ..ci * in_plane + (ih as usize + 1) * s.w];
                        let krow = &k[((co * s.ci + ci) * s.kh + khi) * s.kw
                            ..((co * s.ci + ci) * s.kh + khi + 1) * s.kw];
                        for (kwi, &kv) in krow.iter().enumerate() {
                            let base = kwi as isize - s.pad as isize;
                            let (lo, hi) = ow_range(base, s.stride, s.w, s.wo);
                            if lo >= hi {
                                continue;
                            }
                            if s.stride == 1 {
                                let xoff = (lo as isize + base) as usize;
                                for (ov, &xv) in
                                    orow[lo..hi].iter_mut().zip(&xrow[xoff..xoff + hi - lo])
                                {
                                    *ov += kv * xv;
                                }
                            } else {
                                for (ow, ov) in orow[lo..hi].iter_mut().enumerate() {
                                    let iw = ((lo + ow) * s.stride) as isize + base;
                                    *ov += kv * xrow[iw as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

fn conv_backward_x<E: Element>(dy: &[E], k: &[E], dx: &mut [E], s: &ConvShape) {
    let in_plane = s.h * s.w;
    let in_block = s.ci * in_plane;
    let out_plane = s.ho * s.wo;
    let out_block = s.co * out_plane;
    parallel::for_blocks_mut(dx, in_block, |bi, dxb| {
        let dyb = &dy[bi * out_block..(bi + 1) * out_block];
        for co in 0..s.co {
            for oh in 0..s.ho {
                let dyrow = &dyb[(co * s.ho + oh) * s.wo..(co * s.ho + oh + 1) * s.wo];
                for ci in 0..s.ci {
                    for khi in 0..s.kh {
                        let ih = (oh * s.stride + khi) as isize - s.pad as isize;
                        if ih < 0 || ih as usize >= s.h {
                            continue;
                        }
                        let dxrow = &mut dxb[ci * in_plane + ih as usize * s.w
                            ..ci * in_plane + (ih as usize + 1) * s.w];
                        let krow = &k[((co * s.ci + ci) * s.kh + khi) * s.kw
                            ..((co * s.ci + ci) * s.kh + khi + 1) * s.kw];
                        for (kwi, &kv) in krow.iter().enumerate() {
                            let base = kwi as isize - s.pad as isize;
                            let (lo, hi) = ow_range(base, s.stride, s.w, s.wo);
                            if lo >= hi {
                                continue;
                            }
                            if s.stride == 1 {
                                let xoff = (lo as isize + base) as usize;
                                for (dxv, &g) in
                                    dxrow[xoff..xoff + hi - lo].iter_mut().zip(&dyrow[lo..hi])
                                {
                                    *dxv += kv * g;
                                }
                            } else {
                                for (ow, &g) in dyrow[lo..hi].iter().enumerate() {
                                    let iw = ((lo + ow) * s.stride) as isize + base;
                                    dxrow[iw as usize] += kv * g;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

fn conv_backward_k<E: Element>(dy: &[E], x: &[E], dk: &mut [E], s: &ConvShape) {
    let in_plane = s.h * s.w;
    let in_block = s.ci * in_plane;
    let out_plane = s.ho * s.wo;
    let out_block = s.co * out_plane;
    let batch = dy.len() / out_block;
    let kblock = s.ci * s.kh * s.kw;
    parallel::for_blocks_mut(dk, kblock, |co, dkc| {
        for bi in 0..batch {
            let xb = &x[bi * in_block..(bi + 1) * in_block];
            let dyb = &dy[bi * out_block + co * out_plane..bi * out_block + (co + 1) * out_plane];
            for oh in 0..s.ho {
                let dyrow = &dyb[oh * s.wo..(oh + 1) * s.wo];
                for ci in 0..s.ci {
                    for khi in 0..s.kh {
                        let ih = (oh * s.stride + khi) as isize - s.pad as isize;
                        if ih < 0 || ih as usize >= s.h {
                            continue;
                        }
                        let xrow = &xb[ci * in_plane + ih as usize * s.w
                            ..ci * in_plane + (ih as usize + 1) * s.w];
                        let dkrow = &mut dkc[(ci * s.kh + khi) * s.kw..(ci * s.kh + khi + 1) * s.kw];
                        for (kwi, dkv) in dkrow.iter_mut().enumerate() {
                            let base = kwi as isize - s.pad as isize;
                            let (lo, hi) = ow_range(base, s.stride, s.w, s.wo);
                            if lo >= hi {
                                continue;
                            }
                            let mut acc = E::ZERO;
                            if s.stride == 1 {
                                let xoff = (lo as isize + base) as usize;
                                for (&g, &xv) in
                                    dyrow[lo..hi].iter().zip(&xrow[xoff..xoff + hi - lo])
                                {
                                    acc += g * xv;
                                }
                            } else {
                                for (ow, &g) in dyrow[lo..hi].iter().enumerate() {
                                    let iw = ((lo + ow) * s.stride) as isize + base;
                                    acc += g * xrow[iw as usize];
                                }
                            }
                            *dkv += acc;
                        }
                    }
                }
            }
        }
    });
}

fn pointwise_forward<E: Element>(f: PointFn, data: &mut [E]) {
    match f {
        PointFn::Softplus => data.iter_mut().for_each(|v| {
            let x = v.to_f64();
            *v = E::from_f64(if x > 0.0 {
                x + (-x).exp().ln_1p()
            } else {
                x.exp().ln_1p()
            });
        }),
        PointFn::ExpClamped => {
            let (lo, hi) = (E::from_f64(-EXP_CLAMP), E::from_f64(EXP_CLAMP));
            data.iter_mut()
                .for_each(|v| *v = v.maximum(lo).minimum(hi).exp());
        }
        PointFn::LeakyRelu => {
            let slope = E::from_f64(0.2);
            data.iter_mut().for_each(|v| {
                if *v < E::ZERO {
                    *v *= slope;
                }
            });
        }
        PointFn::Tanh => data.iter_mut().for_each(|v| *v = v.tanh()),
        PointFn::Sigmoid => data.iter_mut().for_each(|v| {
            let x = v.to_f64();
            *v = E::from_f64(1.0 / (1.0 + (-x).exp()));
        }),
        PointFn::LnClamped => {
            let floor = E::from_f64((-EXP_CLAMP).exp());
            data.iter_mut().for_each(|v| *v = v.maximum(floor).ln());
        }
        PointFn::Ln1mExp => data.iter_mut().for_each(|v| {
            let x = v.to_f64();
            let y = if x > std::f64::consts::LN_2 {
                (-(-x).exp()).ln_1p()
            } else {
                (-(-x).exp_m1()).ln()
            };
            *v = E::from_f64(y.max(LN_FLOOR));
        }),
        PointFn::Lgamma => data
            .iter_mut()
            .for_each(|v| *v = E::from_f64(special::lgamma(v.to_f64()))),
    }
}

fn pointwise_backward<E: Element>(f: PointFn, x: &[E], y: &[E], dy: &mut [E]) {
    match f {
        PointFn::Softplus => dy.iter_mut().zip(x).for_each(|(d, &xv)| {
            let s = 1.0 / (1.0 + (-xv.to_f64()).exp());
            *d *= E::from_f64(s);
        }),
        PointFn::ExpClamped => dy.iter_mut().zip(x.iter().zip(y)).for_each(|(d, (&xv, &yv))| {
            let inside = xv.to_f64().abs() < EXP_CLAMP;
            *d = if inside { *d * yv } else { E::ZERO };
        }),
        PointFn::LeakyRelu => {
            let slope = E::from_f64(0.2);
            dy.iter_mut().zip(x).for_each(|(d, &xv)| {
                if xv < E::ZERO {
                    *d *= slope;
                }
            });
        }
        PointFn::Tanh => dy.iter_mut().zip(y).for_each(|(d, &yv)| {
            *d *= E::ONE - yv * yv;
        }),
        PointFn::Sigmoid => dy.iter_mut().zip(y).for_each(|(d, &yv)| {
            *d *= yv * (E::ONE - yv);
        }),
        PointFn::LnClamped => {
            let floor = (-EXP_CLAMP).exp();
            dy.iter_mut().zip(x).for_each(|(d, &xv)| {
                let xv = xv.to_f64();
                *d = if xv > floor {
                    *d * E::from_f64(1.0 / xv)
                } else {
                    E::ZERO
                };
            });
        }
        PointFn::Ln1mExp => dy.iter_mut().zip(x).for_each(|(d, &xv)| {
            let xv = xv.to_f64();
            // Clamp kicks in when ln(1 - e^-x) < -30, i.e. x below ~e^-30.
            let thresh = -(-(-EXP_CLAMP).exp()).ln_1p();
            *d = if xv > thresh {
                *d * E::from_f64(1.0 / xv.exp_m1())
            } else {
                E::ZERO
            };
        }),
        PointFn::Lgamma => dy.iter_mut().zip(x).for_each(|(d, &xv)| {
            *d *= E::from_f64(special::digamma(xv.to_f64()));
        }),
    }
}
