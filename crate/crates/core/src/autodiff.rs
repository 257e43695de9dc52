//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles. Nodes
//! built only from constants carry no gradient bookkeeping, so frozen
//! sub-networks (the perceptual extractor, targets, negatives) cost a
//! forward pass and nothing more.
//!
//! Shape mismatches inside the graph are programming errors and panic;
//! public entry points validate user-supplied shapes before building.

use std::cell::RefCell;
use std::rc::Rc;

use crate::conv::{conv2d, conv2d_backward, ConvSpec};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv { x: usize, w: usize, b: usize, spec: ConvSpec },
    Relu(usize),
    Sigmoid(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Affine { x: usize, scale: f64 },
    SpatialMean(usize),
    Replicate(usize),
    ChannelScale { x: usize, s: usize },
    PixelScale { x: usize, s: usize },
    Concat(Vec<usize>),
    SliceChannels { x: usize, start: usize },
    SliceBatch { x: usize, start: usize },
    Clamp01(usize),
    MeanAbs(usize),
    MaxPool2(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Shares an existing tensor as a constant without copying it.
    pub fn constant_rc(&self, value: Rc<Tensor>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn unary(&self, x: usize, value: Tensor, op: Op) -> Var<'_> {
        let rg = self.requires(x);
        self.push(value, op, rg)
    }

    /// Back-propagates from a scalar `loss` to every differentiable leaf.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let val = |i: usize| -> &Tensor { &nodes[i].value };
            let needs = |i: usize| nodes[i].requires_grad;
            let mut acc = |i: usize, t: Tensor| {
                if !nodes[i].requires_grad {
                    return;
                }
                match &mut grads[i] {
                    Some(existing) => existing.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                }
                Op::Conv { x, w, b, spec } => {
                    let cg = conv2d_backward(val(*x), val(*w), &g, *spec, [needs(*x), needs(*w), needs(*b)]);
                    if let Some(t) = cg.input {
                        acc(*x, t);
                    }
                    if let Some(t) = cg.weight {
                        acc(*w, t);
                    }
                    if let Some(t) = cg.bias {
                        acc(*b, t);
                    }
                }
                Op::Relu(x) => {
                    acc(*x, g.zip_map(val(*x), |g, v| if v > 0.0 { g } else { 0.0 }));
                }
                Op::Sigmoid(x) => {
                    acc(*x, g.zip_map(&node.value, |g, y| g * y * (1.0 - y)));
                }
                Op::Add(a, b) => {
                    if needs(*b) {
                        acc(*b, g.clone());
                    }
                    acc(*a, g);
                }
                Op::Sub(a, b) => {
                    if needs(*b) {
                        acc(*b, g.map(|v| -v));
                    }
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        acc(*a, g.zip_map(val(*b), |g, v| g * v));
                    }
                    if needs(*b) {
                        acc(*b, g.zip_map(val(*a), |g, v| g * v));
                    }
                }
                Op::Div(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if needs(*a) {
                        acc(*a, g.zip_map(vb, |g, d| g / d));
                    }
                    if needs(*b) {
                        let num = g.zip_map(va, |g, n| g * n);
                        acc(*b, num.zip_map(vb, |gn, d| -gn / (d * d)));
                    }
                }
                Op::Affine { x, scale } => {
                    let s = *scale;
                    acc(*x, g.map(|v| v * s));
                }
                Op::SpatialMean(x) => {
                    let shape = val(*x).shape();
                    let area = (shape[2] * shape[3]) as f64;
                    acc(*x, Tensor::from_fn(shape, |[n, c, _, _]| g.at([n, c, 0, 0]) / area));
                }
                Op::Replicate(x) => {
                    let [n, c, _, _] = g.shape();
                    let mut out = Tensor::zeros([n, c, 1, 1]);
                    for (dst, chunk) in out.data_mut().iter_mut().zip(g.data().chunks(g.height() * g.width())) {
                        *dst = chunk.iter().sum();
                    }
                    acc(*x, out);
                }
                Op::ChannelScale { x, s } => {
                    let (vx, vs) = (val(*x), val(*s));
                    let area = vx.height() * vx.width();
                    if needs(*x) {
                        let mut dx = g.clone();
                        for (i, chunk) in dx.data_mut().chunks_mut(area).enumerate() {
                            let f = vs.data()[i];
                            chunk.iter_mut().for_each(|v| *v *= f);
                        }
                        acc(*x, dx);
                    }
                    if needs(*s) {
                        let mut ds = Tensor::zeros(vs.shape());
                        for (i, (gc, xc)) in g.data().chunks(area).zip(vx.data().chunks(area)).enumerate() {
                            ds.data_mut()[i] = gc.iter().zip(xc).map(|(a, b)| a * b).sum();
                        }
                        acc(*s, ds);
                    }
                }
                Op::PixelScale { x, s } => {
                    let (vx, vs) = (val(*x), val(*s));
                    let [n, c, h, w] = vx.shape();
                    if needs(*x) {
                        acc(*x, Tensor::from_fn([n, c, h, w], |[b, ch, y, xx]| {
                            g.at([b, ch, y, xx]) * vs.at([b, 0, y, xx])
                        }));
                    }
                    if needs(*s) {
                        let mut ds = Tensor::zeros(vs.shape());
                        for b in 0..n {
                            for ch in 0..c {
                                for y in 0..h {
                                    for xx in 0..w {
                                        let o = ds.offset([b, 0, y, xx]);
                                        ds.data_mut()[o] += g.at([b, ch, y, xx]) * vx.at([b, ch, y, xx]);
                                    }
                                }
                            }
                        }
                        acc(*s, ds);
                    }
                }
                Op::Concat(parts) => {
                    let [n, _, h, w] = g.shape();
                    let mut start = 0;
                    for &p in parts {
                        let c = val(p).channels();
                        if needs(p) {
                            acc(p, Tensor::from_fn([n, c, h, w], |[b, ch, y, x]| g.at([b, start + ch, y, x])));
                        }
                        start += c;
                    }
                }
                Op::SliceChannels { x, start } => {
                    let vx = val(*x);
                    let mut dx = Tensor::zeros(vx.shape());
                    let [n, c, h, w] = g.shape();
                    for b in 0..n {
                        for ch in 0..c {
                            for y in 0..h {
                                for xx in 0..w {
                                    dx.set([b, start + ch, y, xx], g.at([b, ch, y, xx]));
                                }
                            }
                        }
                    }
                    acc(*x, dx);
                }
                Op::SliceBatch { x, start } => {
                    let vx = val(*x);
                    let mut dx = Tensor::zeros(vx.shape());
                    let step = vx.item_len();
                    dx.data_mut()[start * step..start * step + g.len()].copy_from_slice(g.data());
                    acc(*x, dx);
                }
                Op::Clamp01(x) => {
                    acc(*x, g.zip_map(val(*x), |g, v| if (0.0..=1.0).contains(&v) { g } else { 0.0 }));
                }
                Op::MeanAbs(x) => {
                    let vx = val(*x);
                    let scale = g.item() / vx.len() as f64;
                    acc(*x, vx.map(|v| scale * sign(v)));
                }
                Op::MaxPool2(x) => {
                    let vx = val(*x);
                    let mut dx = Tensor::zeros(vx.shape());
                    let [n, c, oh, ow] = g.shape();
                    for b in 0..n {
                        for ch in 0..c {
                            for y in 0..oh {
                                for xx in 0..ow {
                                    let (by, bx) = argmax2(vx, b, ch, y, xx);
                                    dx.set([b, ch, by, bx], g.at([b, ch, y, xx]));
                                }
                            }
                        }
                    }
                    acc(*x, dx);
                }
            }
        }
        Gradients { grads }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn argmax2(t: &Tensor, b: usize, c: usize, y: usize, x: usize) -> (usize, usize) {
    let mut best = (2 * y, 2 * x);
    for dy in 0..2 {
        for dx in 0..2 {
            let p = (2 * y + dy, 2 * x + dx);
            if t.at([b, c, p.0, p.1]) > t.at([b, c, best.0, best.1]) {
                best = p;
            }
        }
    }
    best
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a differentiable leaf, or `None`
    /// when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: shape mismatch");
}

#[allow(clippy::should_implement_trait)]
impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Shape {
        self.graph.nodes.borrow()[self.id].value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires(self.id)
    }

    fn binary(self, other: Var<'g>, value: Tensor, op: Op) -> Var<'g> {
        let rg = self.requires_grad() || other.requires_grad();
        self.graph.push(value, op, rg)
    }

    /// Panics on channel or geometry mismatch; callers validate shapes first.
    pub fn conv2d(self, weight: Var<'g>, bias: Var<'g>, spec: ConvSpec) -> Var<'g> {
        let out = conv2d(&self.value(), &weight.value(), &bias.value(), spec)
            .unwrap_or_else(|e| panic!("conv2d: {e}"));
        let rg = self.requires_grad() || weight.requires_grad() || bias.requires_grad();
        self.graph.push(out, Op::Conv { x: self.id, w: weight.id, b: bias.id, spec }, rg)
    }

    pub fn relu(self) -> Var<'g> {
        let out = self.value().map(|v| v.max(0.0));
        self.graph.unary(self.id, out, Op::Relu(self.id))
    }

    pub fn sigmoid(self) -> Var<'g> {
        let out = self.value().map(|v| 1.0 / (1.0 + (-v).exp()));
        self.graph.unary(self.id, out, Op::Sigmoid(self.id))
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "add");
        self.binary(other, a.zip_map(&b, |x, y| x + y), Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "sub");
        self.binary(other, a.zip_map(&b, |x, y| x - y), Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "mul");
        self.binary(other, a.zip_map(&b, |x, y| x * y), Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "div");
        self.binary(other, a.zip_map(&b, |x, y| x / y), Op::Div(self.id, other.id))
    }

    /// `scale * self + shift`.
    pub fn affine(self, scale: f64, shift: f64) -> Var<'g> {
        let out = self.value().map(|v| scale * v + shift);
        self.graph.unary(self.id, out, Op::Affine { x: self.id, scale })
    }

    pub fn scale(self, factor: f64) -> Var<'g> {
        self.affine(factor, 0.0)
    }

    /// `[N, C, H, W] -> [N, C, 1, 1]` per-channel spatial mean.
    pub fn spatial_mean(self) -> Var<'g> {
        let x = self.value();
        let area = x.height() * x.width();
        let [n, c, _, _] = x.shape();
        let mut out = Tensor::zeros([n, c, 1, 1]);
        for (dst, chunk) in out.data_mut().iter_mut().zip(x.data().chunks(area)) {
            *dst = chunk.iter().sum::<f64>() / area as f64;
        }
        self.graph.unary(self.id, out, Op::SpatialMean(self.id))
    }

    /// `[N, C, 1, 1] -> [N, C, H, W]` by copying each channel value everywhere.
    pub fn replicate(self, height: usize, width: usize) -> Var<'g> {
        let x = self.value();
        assert_eq!((x.height(), x.width()), (1, 1), "replicate expects a pooled tensor");
        let out = Tensor::from_fn([x.batch(), x.channels(), height, width], |[n, c, _, _]| x.at([n, c, 0, 0]));
        self.graph.unary(self.id, out, Op::Replicate(self.id))
    }

    /// Multiplies every channel of `self` by the matching entry of a pooled `[N, C, 1, 1]` tensor.
    pub fn channel_scale(self, s: Var<'g>) -> Var<'g> {
        let (x, sv) = (self.value(), s.value());
        assert_eq!(sv.shape(), [x.batch(), x.channels(), 1, 1], "channel_scale shape");
        let area = x.height() * x.width();
        let mut out = (*x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(area).enumerate() {
            let f = sv.data()[i];
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        self.binary(s, out, Op::ChannelScale { x: self.id, s: s.id })
    }

    /// Multiplies every channel of `self` by a single-channel `[N, 1, H, W]` map.
    pub fn pixel_scale(self, s: Var<'g>) -> Var<'g> {
        let (x, sv) = (self.value(), s.value());
        assert_eq!(sv.shape(), [x.batch(), 1, x.height(), x.width()], "pixel_scale shape");
        let out = Tensor::from_fn(x.shape(), |[n, c, h, w]| x.at([n, c, h, w]) * sv.at([n, 0, h, w]));
        self.binary(s, out, Op::PixelScale { x: self.id, s: s.id })
    }

    pub fn concat_channels(parts: &[Var<'g>]) -> Var<'g> {
        let first = parts.first().expect("concat of nothing");
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let [n, _, h, w] = values[0].shape();
        let total: usize = values.iter().map(|v| v.channels()).sum();
        let mut out = Tensor::zeros([n, total, h, w]);
        let area = h * w;
        for b in 0..n {
            let mut start = 0;
            for v in &values {
                assert_eq!((v.batch(), v.height(), v.width()), (n, h, w), "concat shape");
                let len = v.channels() * area;
                let dst = (b * total + start) * area;
                out.data_mut()[dst..dst + len].copy_from_slice(&v.data()[b * len..(b + 1) * len]);
                start += v.channels();
            }
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        first.graph.push(out, Op::Concat(parts.iter().map(|p| p.id).collect()), rg)
    }

    pub fn slice_channels(self, start: usize, len: usize) -> Var<'g> {
        let x = self.value();
        assert!(start + len <= x.channels(), "slice_channels out of range");
        let out = Tensor::from_fn([x.batch(), len, x.height(), x.width()], |[n, c, h, w]| x.at([n, start + c, h, w]));
        self.graph.unary(self.id, out, Op::SliceChannels { x: self.id, start })
    }

    pub fn slice_batch(self, start: usize, count: usize) -> Var<'g> {
        let out = self.value().slice_batch(start, count);
        self.graph.unary(self.id, out, Op::SliceBatch { x: self.id, start })
    }

    pub fn clamp01(self) -> Var<'g> {
        let out = self.value().map(|v| v.clamp(0.0, 1.0));
        self.graph.unary(self.id, out, Op::Clamp01(self.id))
    }

    /// Mean absolute value over every element, as a scalar.
    pub fn mean_abs(self) -> Var<'g> {
        let x = self.value();
        let out = Tensor::scalar(x.data().iter().map(|v| v.abs()).sum::<f64>() / x.len() as f64);
        self.graph.unary(self.id, out, Op::MeanAbs(self.id))
    }

    /// 2×2 max pooling with stride 2 (odd trailing rows/columns dropped).
    pub fn max_pool2(self) -> Var<'g> {
        let x = self.value();
        let [n, c, h, w] = x.shape();
        let out = Tensor::from_fn([n, c, h / 2, w / 2], |[b, ch, y, xx]| {
            let (by, bx) = argmax2(&x, b, ch, y, xx);
            x.at([b, ch, by, bx])
        });
        self.graph.unary(self.id, out, Op::MaxPool2(self.id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::Padding;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of d(loss)/d(x) for a graph builder.
    fn check<F>(x0: &Tensor, build: F)
    where
        F: for<'g> Fn(&'g Graph, Var<'g>) -> Var<'g>,
    {
        let g = Graph::new();
        let x = g.param(x0.clone());
        let loss = build(&g, x);
        let grads = g.backward(loss);
        let analytic = grads.wrt(x).cloned().unwrap_or_else(|| Tensor::zeros(x0.shape()));
        let eps = 1e-6;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += delta;
                let g = Graph::new();
                let v = g.constant(xp);
                build(&g, v).value().item()
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            assert!(err < 1e-5 || (a - numeric).abs() < 1e-9, "coord {i}: analytic {a} numeric {numeric}");
        }
    }

    fn weighted_sum<'g>(g: &'g Graph, v: Var<'g>, seed: u64) -> Var<'g> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = g.constant(random(v.shape(), &mut rng));
        // mean_abs of a strictly positive tensor is its mean, a linear readout.
        v.mul(w).affine(1.0, 10.0).mean_abs()
    }

    #[test]
    fn elementwise_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = random([2, 3, 2, 2], &mut rng);
        check(&x0, |g, x| weighted_sum(g, x.sigmoid().mul(x).add(x.relu()), 2));
        check(&x0, |g, x| {
            let d = x.affine(0.5, 2.0);
            weighted_sum(g, x.div(d).sub(x.scale(3.0)), 3)
        });
    }

    #[test]
    fn pooling_and_broadcast_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = random([2, 4, 3, 3], &mut rng);
        check(&x0, |g, x| {
            let pooled = x.spatial_mean().sigmoid();
            let rep = pooled.replicate(3, 3);
            weighted_sum(g, x.channel_scale(pooled).add(rep.mul(x)), 5)
        });
        check(&x0, |g, x| {
            let att = x.slice_channels(1, 1).sigmoid();
            let cat = Var::concat_channels(&[x.pixel_scale(att), x.slice_channels(0, 2)]);
            weighted_sum(g, cat.slice_batch(1, 1), 6)
        });
    }

    #[test]
    fn conv_and_pool_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = random([1, 2, 6, 6], &mut rng);
        let w0 = random([3, 2, 3, 3], &mut rng);
        let b0 = random([1, 3, 1, 1], &mut rng);
        check(&x0, |g, x| {
            let w = g.constant(w0.clone());
            let b = g.constant(b0.clone());
            let y = x.conv2d(w, b, ConvSpec::same(3, Padding::Reflect));
            weighted_sum(g, y.max_pool2(), 8)
        });
        check(&w0, |g, w| {
            let x = g.constant(x0.clone());
            let b = g.constant(b0.clone());
            let y = x.conv2d(w, b, ConvSpec { stride: 2, pad: 1, padding: Padding::Zero });
            weighted_sum(g, y, 9)
        });
    }

    #[test]
    fn l1_and_clamp_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = random([1, 3, 3, 3], &mut rng).map(|v| 0.5 + 0.4 * v);
        let t0 = random([1, 3, 3, 3], &mut rng);
        check(&x0, |g, x| {
            let t = g.constant(t0.clone());
            x.affine(1.0, -0.2).clamp01().sub(t).mean_abs()
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let g = Graph::new();
        let c = g.constant(Tensor::full([1, 1, 2, 2], 2.0));
        let p = g.param(Tensor::full([1, 1, 2, 2], 3.0));
        let loss = c.mul(p).mean_abs();
        let grads = g.backward(loss);
        assert!(grads.wrt(c).is_none());
        assert_eq!(grads.wrt(p).unwrap().data(), &[0.5; 4]);
    }
}
