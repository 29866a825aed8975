//! Tape-based reverse-mode differentiation with support for differentiating gradients.
//!
//! Every backward rule is itself expressed with tape operations, so the result of
//! [`Graph::grad`] is an ordinary [`Var`] that can be differentiated again. The
//! gradient penalty of the adversarial critic needs exactly this: the norm of an input
//! gradient, differentiated with respect to the critic weights.

use std::rc::Rc;

use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Pow(Var, f32),
    LeakyRelu(Var, f32),
    Conv2d { x: Var, w: Var, dilation: usize },
    ConvWeightGrad { x: Var, g: Var, dilation: usize },
    FlipTranspose(Var),
    ChannelSum(Var),
    ChannelBroadcast(Var),
    SumAll(Var),
    Expand(Var),
    Resize(Var),
    ResizeAdjoint(Var),
    Narrow { x: Var, axis: usize, start: usize },
    PadAxis { x: Var, axis: usize, start: usize },
    Reshape(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match *self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![a, b],
            Conv2d { x, w, .. } => vec![x, w],
            ConvWeightGrad { x, g, .. } => vec![x, g],
            Scale(a, _)
            | AddScalar(a)
            | Pow(a, _)
            | LeakyRelu(a, _)
            | FlipTranspose(a)
            | ChannelSum(a)
            | ChannelBroadcast(a)
            | SumAll(a)
            | Expand(a)
            | Resize(a)
            | ResizeAdjoint(a)
            | Reshape(a) => vec![a],
            Narrow { x, .. } | PadAxis { x, .. } => vec![x],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        if trainable {
            self.param(value)
        } else {
            self.constant(value)
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f32 {
        let t = self.value(v);
        assert_eq!(t.numel(), 1, "not a scalar: {:?}", t.shape());
        t.data()[0]
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a))
    }

    pub fn pow(&mut self, a: Var, p: f32) -> Var {
        let v = self.value(a).map(|x| x.powf(p));
        self.push(v, Op::Pow(a, p))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f32) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { alpha * x });
        self.push(v, Op::LeakyRelu(a, alpha))
    }

    /// Same-padded stride-1 convolution, no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, dilation: usize) -> Var {
        let v = tensor::conv2d(self.value(x), self.value(w), dilation);
        self.push(v, Op::Conv2d { x, w, dilation })
    }

    fn conv_weight_grad(&mut self, x: Var, g: Var, k: usize, dilation: usize) -> Var {
        let v = tensor::conv2d_weight_grad(self.value(x), self.value(g), k, dilation);
        self.push(v, Op::ConvWeightGrad { x, g, dilation })
    }

    fn flip_transpose(&mut self, w: Var) -> Var {
        let v = tensor::flip_transpose(self.value(w));
        self.push(v, Op::FlipTranspose(w))
    }

    /// `[b, c, h, w] -> [c]`
    pub fn channel_sum(&mut self, a: Var) -> Var {
        let v = tensor::channel_sum(self.value(a));
        self.push(v, Op::ChannelSum(a))
    }

    /// `[c] -> shape` where `shape = [b, c, h, w]`
    pub fn channel_broadcast(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = tensor::channel_broadcast(self.value(a), shape);
        self.push(v, Op::ChannelBroadcast(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum::<f32>();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f32;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Broadcast a one-element tensor to `shape`.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = Tensor::full(shape.to_vec(), self.scalar(a));
        self.push(v, Op::Expand(a))
    }

    /// Bilinear resize of the two trailing axes.
    pub fn resize(&mut self, a: Var, h: usize, w: usize) -> Var {
        let v = tensor::resize_bilinear(self.value(a), h, w);
        self.push(v, Op::Resize(a))
    }

    fn resize_adjoint(&mut self, a: Var, h: usize, w: usize) -> Var {
        let v = tensor::resize_bilinear_adjoint(self.value(a), h, w);
        self.push(v, Op::ResizeAdjoint(a))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = tensor::narrow(self.value(x), axis, start, len);
        self.push(v, Op::Narrow { x, axis, start })
    }

    pub fn pad_axis(&mut self, x: Var, axis: usize, start: usize, total: usize) -> Var {
        let v = tensor::pad_axis(self.value(x), axis, start, total);
        self.push(v, Op::PadAxis { x, axis, start })
    }

    /// Concatenate along `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let total: usize = parts.iter().map(|&p| self.shape(p)[axis]).sum();
        let mut offset = 0;
        let mut acc: Option<Var> = None;
        for &p in parts {
            let len = self.shape(p)[axis];
            let padded = self.pad_axis(p, axis, offset, total);
            offset += len;
            acc = Some(match acc {
                Some(a) => self.add(a, padded),
                None => padded,
            });
        }
        acc.expect("concat of zero tensors")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).clone().reshape(shape.to_vec());
        self.push(v, Op::Reshape(a))
    }

    /// Vector-Jacobian products of `node` for upstream gradient `g`, one entry per
    /// input, `None` where the input does not need a gradient.
    fn backward_rule(&mut self, node: usize, g: Var, need: &[bool]) -> Vec<(Var, Var)> {
        let op = self.nodes[node].op.clone();
        let wants = |v: Var| need[v.0];
        let mut out = Vec::new();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(a) {
                    out.push((a, g));
                }
                if wants(b) {
                    out.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    out.push((a, g));
                }
                if wants(b) {
                    let n = self.scale(g, -1.0);
                    out.push((b, n));
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    let ga = self.mul(g, b);
                    out.push((a, ga));
                }
                if wants(b) {
                    let gb = self.mul(g, a);
                    out.push((b, gb));
                }
            }
            Op::Scale(a, s) => {
                let ga = self.scale(g, s);
                out.push((a, ga));
            }
            Op::AddScalar(a) => out.push((a, g)),
            Op::Pow(a, p) => {
                let d = self.pow(a, p - 1.0);
                let d = self.scale(d, p);
                let ga = self.mul(g, d);
                out.push((a, ga));
            }
            Op::LeakyRelu(a, alpha) => {
                // piecewise linear, so the local slope is a constant
                let mask = self.value(a).map(|x| if x > 0.0 { 1.0 } else { alpha });
                let m = self.constant(mask);
                let ga = self.mul(g, m);
                out.push((a, ga));
            }
            Op::Conv2d { x, w, dilation } => {
                if wants(x) {
                    let wt = self.flip_transpose(w);
                    let gx = self.conv2d(g, wt, dilation);
                    out.push((x, gx));
                }
                if wants(w) {
                    let k = self.shape(w)[2];
                    let gw = self.conv_weight_grad(x, g, k, dilation);
                    out.push((w, gw));
                }
            }
            Op::ConvWeightGrad { x, g: go, dilation } => {
                // output = sum_p go[co,p] * patch(x)[ci,ij,p]; upstream g has weight shape
                if wants(x) {
                    let gt = self.flip_transpose(g);
                    let gx = self.conv2d(go, gt, dilation);
                    out.push((x, gx));
                }
                if wants(go) {
                    let gg = self.conv2d(x, g, dilation);
                    out.push((go, gg));
                }
            }
            Op::FlipTranspose(a) => {
                let ga = self.flip_transpose(g);
                out.push((a, ga));
            }
            Op::ChannelSum(a) => {
                let shape = self.shape(a).to_vec();
                let ga = self.channel_broadcast(g, &shape);
                out.push((a, ga));
            }
            Op::ChannelBroadcast(a) => {
                let ga = self.channel_sum(g);
                out.push((a, ga));
            }
            Op::SumAll(a) => {
                let shape = self.shape(a).to_vec();
                let ga = self.expand(g, &shape);
                out.push((a, ga));
            }
            Op::Expand(a) => {
                let ga = self.sum(g);
                let shape = self.shape(a).to_vec();
                let ga = self.reshape(ga, &shape);
                out.push((a, ga));
            }
            Op::Resize(a) => {
                let s = self.shape(a);
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let ga = self.resize_adjoint(g, h, w);
                out.push((a, ga));
            }
            Op::ResizeAdjoint(a) => {
                let s = self.shape(a);
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let ga = self.resize(g, h, w);
                out.push((a, ga));
            }
            Op::Narrow { x, axis, start } => {
                let total = self.shape(x)[axis];
                let gx = self.pad_axis(g, axis, start, total);
                out.push((x, gx));
            }
            Op::PadAxis { x, axis, start } => {
                let len = self.shape(x)[axis];
                let gx = self.narrow(g, axis, start, len);
                out.push((x, gx));
            }
            Op::Reshape(a) => {
                let shape = self.shape(a).to_vec();
                let ga = self.reshape(g, &shape);
                out.push((a, ga));
            }
        }
        out
    }

    /// Gradients of the scalar `y` with respect to each of `wrt`. Returned gradients
    /// are graph nodes and can be differentiated further. `None` means `y` does not
    /// depend on that variable.
    pub fn grad(&mut self, y: Var, wrt: &[Var]) -> Vec<Option<Var>> {
        assert_eq!(self.value(y).numel(), 1, "grad: output must be a scalar");
        let n = y.0 + 1;
        // need[i]: node i lies on a path from some wrt var and requires a gradient
        let mut need = vec![false; n];
        for w in wrt {
            if w.0 < n {
                need[w.0] = true;
            }
        }
        for i in 0..n {
            if !need[i] && self.nodes[i].requires_grad {
                need[i] = self.nodes[i].op.inputs().iter().any(|v| need[v.0]);
            }
        }
        let mut grads: Vec<Option<Var>> = vec![None; n];
        if need[y.0] {
            let seed = Tensor::full(self.shape(y).to_vec(), 1.0);
            grads[y.0] = Some(self.constant(seed));
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i] else { continue };
            if !need[i] {
                continue;
            }
            for (input, contrib) in self.backward_rule(i, g, &need) {
                grads[input.0] = Some(match grads[input.0] {
                    Some(prev) => self.add(prev, contrib),
                    None => contrib,
                });
            }
        }
        wrt.iter()
            .map(|w| if w.0 < n { grads[w.0] } else { None })
            .collect()
    }
}

/// The operations the networks are written against. [`Graph`] records them for
/// differentiation; [`Eager`] evaluates them directly and frees intermediates as soon
/// as they go out of scope.
pub trait Backend {
    type V: Clone;

    fn leaf(&mut self, value: Tensor, trainable: bool) -> Self::V;
    fn value_of<'a>(&'a self, v: &'a Self::V) -> &'a Tensor;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn scale(&mut self, a: &Self::V, s: f32) -> Self::V;
    fn add_scalar(&mut self, a: &Self::V, s: f32) -> Self::V;
    fn pow(&mut self, a: &Self::V, p: f32) -> Self::V;
    fn leaky_relu(&mut self, a: &Self::V, alpha: f32) -> Self::V;
    fn conv2d(&mut self, x: &Self::V, w: &Self::V, dilation: usize) -> Self::V;
    fn channel_sum(&mut self, a: &Self::V) -> Self::V;
    fn channel_broadcast(&mut self, a: &Self::V, shape: &[usize]) -> Self::V;
    fn sum(&mut self, a: &Self::V) -> Self::V;
    fn resize(&mut self, a: &Self::V, h: usize, w: usize) -> Self::V;
    fn narrow(&mut self, x: &Self::V, axis: usize, start: usize, len: usize) -> Self::V;
    fn concat(&mut self, parts: &[Self::V], axis: usize) -> Self::V;
    fn reshape(&mut self, a: &Self::V, shape: &[usize]) -> Self::V;

    fn shape_of(&self, v: &Self::V) -> Vec<usize> {
        self.value_of(v).shape().to_vec()
    }

    fn square(&mut self, a: &Self::V) -> Self::V {
        self.mul(a, a)
    }

    fn mean(&mut self, a: &Self::V) -> Self::V {
        let n = self.value_of(a).numel() as f32;
        let s = self.sum(a);
        self.scale(&s, 1.0 / n)
    }
}

impl Backend for Graph {
    type V = Var;

    fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        Graph::leaf(self, value, trainable)
    }
    fn value_of<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        self.value(*v)
    }
    fn add(&mut self, a: &Var, b: &Var) -> Var {
        Graph::add(self, *a, *b)
    }
    fn sub(&mut self, a: &Var, b: &Var) -> Var {
        Graph::sub(self, *a, *b)
    }
    fn mul(&mut self, a: &Var, b: &Var) -> Var {
        Graph::mul(self, *a, *b)
    }
    fn scale(&mut self, a: &Var, s: f32) -> Var {
        Graph::scale(self, *a, s)
    }
    fn add_scalar(&mut self, a: &Var, s: f32) -> Var {
        Graph::add_scalar(self, *a, s)
    }
    fn pow(&mut self, a: &Var, p: f32) -> Var {
        Graph::pow(self, *a, p)
    }
    fn leaky_relu(&mut self, a: &Var, alpha: f32) -> Var {
        Graph::leaky_relu(self, *a, alpha)
    }
    fn conv2d(&mut self, x: &Var, w: &Var, dilation: usize) -> Var {
        Graph::conv2d(self, *x, *w, dilation)
    }
    fn channel_sum(&mut self, a: &Var) -> Var {
        Graph::channel_sum(self, *a)
    }
    fn channel_broadcast(&mut self, a: &Var, shape: &[usize]) -> Var {
        Graph::channel_broadcast(self, *a, shape)
    }
    fn sum(&mut self, a: &Var) -> Var {
        Graph::sum(self, *a)
    }
    fn resize(&mut self, a: &Var, h: usize, w: usize) -> Var {
        Graph::resize(self, *a, h, w)
    }
    fn narrow(&mut self, x: &Var, axis: usize, start: usize, len: usize) -> Var {
        Graph::narrow(self, *x, axis, start, len)
    }
    fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        Graph::concat(self, parts, axis)
    }
    fn reshape(&mut self, a: &Var, shape: &[usize]) -> Var {
        Graph::reshape(self, *a, shape)
    }
}

/// Direct evaluation without a tape.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl Backend for Eager {
    type V = Rc<Tensor>;

    fn leaf(&mut self, value: Tensor, _trainable: bool) -> Rc<Tensor> {
        Rc::new(value)
    }
    fn value_of<'a>(&'a self, v: &'a Rc<Tensor>) -> &'a Tensor {
        v
    }
    fn add(&mut self, a: &Rc<Tensor>, b: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(a.zip_map(b, |x, y| x + y))
    }
    fn sub(&mut self, a: &Rc<Tensor>, b: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(a.zip_map(b, |x, y| x - y))
    }
    fn mul(&mut self, a: &Rc<Tensor>, b: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(a.zip_map(b, |x, y| x * y))
    }
    fn scale(&mut self, a: &Rc<Tensor>, s: f32) -> Rc<Tensor> {
        Rc::new(a.map(|x| x * s))
    }
    fn add_scalar(&mut self, a: &Rc<Tensor>, s: f32) -> Rc<Tensor> {
        Rc::new(a.map(|x| x + s))
    }
    fn pow(&mut self, a: &Rc<Tensor>, p: f32) -> Rc<Tensor> {
        Rc::new(a.map(|x| x.powf(p)))
    }
    fn leaky_relu(&mut self, a: &Rc<Tensor>, alpha: f32) -> Rc<Tensor> {
        Rc::new(a.map(|x| if x > 0.0 { x } else { alpha * x }))
    }
    fn conv2d(&mut self, x: &Rc<Tensor>, w: &Rc<Tensor>, dilation: usize) -> Rc<Tensor> {
        Rc::new(tensor::conv2d(x, w, dilation))
    }
    fn channel_sum(&mut self, a: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(tensor::channel_sum(a))
    }
    fn channel_broadcast(&mut self, a: &Rc<Tensor>, shape: &[usize]) -> Rc<Tensor> {
        Rc::new(tensor::channel_broadcast(a, shape))
    }
    fn sum(&mut self, a: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(Tensor::scalar(a.data().iter().sum()))
    }
    fn resize(&mut self, a: &Rc<Tensor>, h: usize, w: usize) -> Rc<Tensor> {
        Rc::new(tensor::resize_bilinear(a, h, w))
    }
    fn narrow(&mut self, x: &Rc<Tensor>, axis: usize, start: usize, len: usize) -> Rc<Tensor> {
        Rc::new(tensor::narrow(x, axis, start, len))
    }
    fn concat(&mut self, parts: &[Rc<Tensor>], axis: usize) -> Rc<Tensor> {
        let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut offset = 0;
        let mut acc: Option<Tensor> = None;
        for p in parts {
            let padded = tensor::pad_axis(p, axis, offset, total);
            offset += p.shape()[axis];
            acc = Some(match acc {
                Some(a) => a.zip_map(&padded, |x, y| x + y),
                None => padded,
            });
        }
        Rc::new(acc.expect("concat of zero tensors"))
    }
    fn reshape(&mut self, a: &Rc<Tensor>, shape: &[usize]) -> Rc<Tensor> {
        Rc::new((**a).clone().reshape(shape.to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite difference of a scalar function of one tensor, in f64 accumulation.
    fn numeric_grad(x: &Tensor, eps: f32, f: &dyn Fn(&Tensor) -> f64) -> Tensor {
        let mut g = Tensor::zeros(x.shape().to_vec());
        for i in 0..x.numel() {
            let mut hi = x.clone();
            hi.data_mut()[i] += eps;
            let mut lo = x.clone();
            lo.data_mut()[i] -= eps;
            g.data_mut()[i] = ((f(&hi) - f(&lo)) / (2.0 * eps as f64)) as f32;
        }
        g
    }

    fn assert_close(a: &Tensor, b: &Tensor, tol: f32) {
        assert_eq!(a.shape(), b.shape());
        let scale = b.data().iter().map(|v| v.abs()).fold(0.0, f32::max).max(1e-3);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= tol * scale, "{x} vs {y} (scale {scale})");
        }
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = Tensor::randn(vec![1, 2, 3, 4], 1.0, &mut rng).map(|v| v.abs() + 0.5);
        let f = |g: &mut Graph, x: Var| {
            let a = g.pow(x, 1.5);
            let b = g.leaky_relu(x, 0.05);
            let c = g.mul(a, b);
            let d = g.add_scalar(c, 2.0);
            g.mean(d)
        };
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let y = f(&mut g, x);
        let gx = g.grad(y, &[x])[0].unwrap();
        let analytic = g.value(gx).clone();
        let numeric = numeric_grad(&x0, 1e-2, &|t: &Tensor| {
            let mut g = Graph::new();
            let x = g.constant(t.clone());
            let y = f(&mut g, x);
            g.scalar(y) as f64
        });
        assert_close(&analytic, &numeric, 1e-2);
    }

    #[test]
    fn conv_resize_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x0 = Tensor::randn(vec![1, 2, 5, 6], 1.0, &mut rng);
        let w0 = Tensor::randn(vec![3, 2, 3, 3], 0.5, &mut rng);
        let f = |g: &mut Graph, x: Var, w: Var| {
            let y = g.conv2d(x, w, 2);
            let y = g.resize(y, 7, 4);
            let y = g.narrow(y, 1, 1, 2);
            let y = g.square(y);
            g.sum(y)
        };
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let w = g.param(w0.clone());
        let y = f(&mut g, x, w);
        let gr = g.grad(y, &[x, w]);
        let gx = g.value(gr[0].unwrap()).clone();
        let gw = g.value(gr[1].unwrap()).clone();
        let nx = numeric_grad(&x0, 1e-2, &|t| {
            let mut g = Graph::new();
            let (x, w) = (g.constant(t.clone()), g.constant(w0.clone()));
            let y = f(&mut g, x, w);
            g.scalar(y) as f64
        });
        let nw = numeric_grad(&w0, 1e-2, &|t| {
            let mut g = Graph::new();
            let (x, w) = (g.constant(x0.clone()), g.constant(t.clone()));
            let y = f(&mut g, x, w);
            g.scalar(y) as f64
        });
        assert_close(&gx, &nx, 2e-2);
        assert_close(&gw, &nw, 2e-2);
    }

    #[test]
    fn second_order_through_conv() {
        // h(w) = || d/dx sum(conv(x, w)^2) ||^2, differentiated with respect to w.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = Tensor::randn(vec![1, 1, 5, 5], 1.0, &mut rng);
        let w0 = Tensor::randn(vec![2, 1, 3, 3], 0.5, &mut rng);
        let h = |g: &mut Graph, x: Var, w: Var| {
            let y = g.conv2d(x, w, 1);
            let y = g.leaky_relu(y, 0.2);
            let y = g.square(y);
            let s = g.sum(y);
            let gx = g.grad(s, &[x])[0].unwrap();
            let sq = g.square(gx);
            g.sum(sq)
        };
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let w = g.param(w0.clone());
        let y = h(&mut g, x, w);
        let gw = g.grad(y, &[w])[0].unwrap();
        let analytic = g.value(gw).clone();
        let numeric = numeric_grad(&w0, 1e-3, &|t| {
            let mut g = Graph::new();
            let x = g.param(x0.clone());
            let w = g.constant(t.clone());
            let y = h(&mut g, x, w);
            g.scalar(y) as f64
        });
        assert_close(&analytic, &numeric, 2e-2);
    }

    #[test]
    fn unrelated_inputs_have_no_gradient() {
        let mut g = Graph::new();
        let a = g.param(Tensor::scalar(2.0));
        let b = g.param(Tensor::scalar(3.0));
        let y = g.square(a);
        let gr = g.grad(y, &[a, b]);
        assert_eq!(g.scalar(gr[0].unwrap()), 4.0);
        assert!(gr[1].is_none());
    }
}
