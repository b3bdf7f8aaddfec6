use std::collections::BTreeMap;

use super::kernels;
use super::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Detach,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Abs(Var),
    Log(Var),
    Sigmoid(Var),
    Tanh(Var),
    Silu(Var),
    Pow(Var, f64),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    AddChannel(Var, Var),
    MulChannel(Var, Var),
    MulSpatial(Var, Var),
    Concat(Vec<Var>),
    Narrow(Var, usize),
    Reshape(Var),
    Conv3d { x: Var, w: Var, b: Var },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, mean: Vec<f64>, rstd: Vec<f64> },
    AvgPool2(Var),
    Upsample2(Var),
    GlobalAvgPool(Var),
    Linear { x: Var, w: Var, b: Var },
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    SoftmaxChannels(Var),
    SsmScan { x: Var, a: Var, b: Var, c: Var, d: Var, reverse: bool },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Tape of tensor operations supporting reverse-mode differentiation.
///
/// Ops eagerly compute their value; [`Graph::backward`] walks the tape in
/// reverse. Nodes that cannot reach a gradient-requiring leaf are skipped.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    named: BTreeMap<String, Var>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input (never differentiated).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Named leaf, bound once per graph. Repeated calls return the same node.
    pub fn named_leaf(&mut self, name: &str, value: impl FnOnce() -> Tensor, trainable: bool) -> Var {
        if let Some(&v) = self.named.get(name) {
            return v;
        }
        let v = if trainable { self.leaf(value()) } else { self.constant(value()) };
        self.named.insert(name.to_string(), v);
        v
    }

    pub fn named_vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.named.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Copies the value but blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Detach, &[])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(v, Op::Div(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::Scale(a, k), &[a])
    }

    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x + k);
        self.push(v, Op::Offset(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a), &[a])
    }

    /// `a^p` for positive `a`.
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let v = self.value(a).map(|x| x.powf(p));
        self.push(v, Op::Pow(a, p), &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(v, Op::Mean(a), &[a])
    }

    /// Adds `v[c]` to every element of channel `c`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Var {
        let xt = self.value(x);
        let vt = self.value(v);
        assert_eq!(xt.channels(), vt.numel(), "add_channel size mismatch");
        let inner = xt.inner();
        let mut out = xt.clone();
        for (c, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let k = vt.data()[c];
            chunk.iter_mut().for_each(|e| *e += k);
        }
        self.push(out, Op::AddChannel(x, v), &[x, v])
    }

    /// Multiplies channel `c` by `g[c]`.
    pub fn mul_channel(&mut self, x: Var, g: Var) -> Var {
        let xt = self.value(x);
        let gt = self.value(g);
        assert_eq!(xt.channels(), gt.numel(), "mul_channel size mismatch");
        let inner = xt.inner();
        let mut out = xt.clone();
        for (c, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let k = gt.data()[c];
            chunk.iter_mut().for_each(|e| *e *= k);
        }
        self.push(out, Op::MulChannel(x, g), &[x, g])
    }

    /// Multiplies every channel of `x` by the single-channel map `g`.
    pub fn mul_spatial(&mut self, x: Var, g: Var) -> Var {
        let xt = self.value(x);
        let gt = self.value(g);
        let inner = xt.inner();
        assert_eq!(gt.numel(), inner, "mul_spatial size mismatch");
        let mut out = xt.clone();
        for chunk in out.data_mut().chunks_mut(inner) {
            chunk.iter_mut().zip(gt.data()).for_each(|(e, k)| *e *= k);
        }
        self.push(out, Op::MulSpatial(x, g), &[x, g])
    }

    /// Concatenates along the leading (channel) axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let first = self.value(parts[0]).shape().to_vec();
        let mut channels = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(&t.shape()[1..], &first[1..], "concat shape mismatch");
            channels += t.channels();
            data.extend_from_slice(t.data());
        }
        let mut shape = first;
        shape[0] = channels;
        self.push(Tensor::from_vec(&shape, data), Op::Concat(parts.to_vec()), parts)
    }

    /// Channels `start..start+len` of `x`.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        let inner = t.inner();
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let data = t.data()[start * inner..(start + len) * inner].to_vec();
        self.push(Tensor::from_vec(&shape, data), Op::Narrow(x, start), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshaped(shape);
        self.push(t, Op::Reshape(x), &[x])
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let v = kernels::conv3d(self.value(x), self.value(w), self.value(b));
        self.push(v, Op::Conv3d { x, w, b }, &[x, w, b])
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let xt = self.value(x);
        assert_eq!(xt.channels() % groups, 0, "channels not divisible by groups");
        let (mean, rstd) = kernels::group_stats(xt, groups);
        let v = kernels::group_norm(xt, self.value(gamma), self.value(beta), groups, &mean, &rstd);
        self.push(v, Op::GroupNorm { x, gamma, beta, groups, mean, rstd }, &[x, gamma, beta])
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let v = kernels::avg_pool2(self.value(x));
        self.push(v, Op::AvgPool2(x), &[x])
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let v = kernels::upsample2(self.value(x));
        self.push(v, Op::Upsample2(x), &[x])
    }

    /// Mean over everything but the channel axis: `[C, ...] -> [C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let inner = t.inner();
        let data = t.data().chunks(inner).map(|c| c.iter().sum::<f64>() / inner as f64).collect();
        let v = Tensor::from_vec(&[t.channels()], data);
        self.push(v, Op::GlobalAvgPool(x), &[x])
    }

    /// `w·x + b` for a vector `x`; `w` is `[m, n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xt = self.value(x);
        let wt = self.value(w);
        let (m, n) = (wt.shape()[0], wt.shape()[1]);
        assert_eq!(xt.numel(), n, "linear input size mismatch");
        let bt = self.value(b);
        let data = (0..m)
            .map(|i| bt.data()[i] + wt.data()[i * n..(i + 1) * n].iter().zip(xt.data()).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        self.push(Tensor::from_vec(&[m], data), Op::Linear { x, w, b }, &[x, w, b])
    }

    /// 2D matrix product with optional transposes.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let v = kernels::matmul(self.value(a), self.value(b), ta, tb);
        self.push(v, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    /// Softmax over the leading axis at every inner position.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.channels();
        let inner = t.inner();
        let mut out = t.clone();
        let od = out.data_mut();
        for i in 0..inner {
            let mx = (0..c).map(|k| od[k * inner + i]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for k in 0..c {
                let e = (od[k * inner + i] - mx).exp();
                od[k * inner + i] = e;
                s += e;
            }
            for k in 0..c {
                od[k * inner + i] /= s;
            }
        }
        self.push(out, Op::SoftmaxChannels(x), &[x])
    }

    pub fn ssm_scan(&mut self, x: Var, a: Var, b: Var, c: Var, d: Var, reverse: bool) -> Var {
        let v = kernels::ssm_scan(self.value(x), self.value(a), self.value(b), self.value(c), self.value(d), reverse);
        self.push(v, Op::SsmScan { x, a, b, c, d, reverse }, &[x, a, b, c, d])
    }

    /// Reverse-mode sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).numel(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if wants(*b) {
                    self.accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(val(*b), |x, y| x * y));
                }
                if wants(*b) {
                    self.accumulate(grads, *b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                if wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(bv, |x, y| x / y));
                }
                if wants(*b) {
                    let gb = g.zip_map(&node.value, |x, q| x * q).zip_map(bv, |x, y| -x / y);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g.map(|x| x * k)),
            Op::Offset(a) => self.accumulate(grads, *a, g.clone()),
            Op::Abs(a) => self.accumulate(grads, *a, g.zip_map(val(*a), |x, y| x * sign(y))),
            Op::Log(a) => self.accumulate(grads, *a, g.zip_map(val(*a), |x, y| x / y)),
            Op::Sigmoid(a) => self.accumulate(grads, *a, g.zip_map(&node.value, |x, s| x * s * (1.0 - s))),
            Op::Tanh(a) => self.accumulate(grads, *a, g.zip_map(&node.value, |x, t| x * (1.0 - t * t))),
            Op::Silu(a) => {
                let d = val(*a).map(|x| {
                    let s = sigmoid(x);
                    s * (1.0 + x * (1.0 - s))
                });
                self.accumulate(grads, *a, g.zip_map(&d, |x, y| x * y));
            }
            Op::Pow(a, p) => {
                let p = *p;
                self.accumulate(grads, *a, g.zip_map(val(*a), |x, y| x * p * y.powf(p - 1.0)));
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                self.accumulate(grads, *a, g.zip_map(val(*a), |x, y| if y > lo && y < hi { x } else { 0.0 }));
            }
            Op::Sum(a) => self.accumulate(grads, *a, Tensor::full(val(*a).shape(), g.item())),
            Op::Mean(a) => {
                let n = val(*a).numel() as f64;
                self.accumulate(grads, *a, Tensor::full(val(*a).shape(), g.item() / n));
            }
            Op::AddChannel(x, v) => {
                self.accumulate(grads, *x, g.clone());
                if wants(*v) {
                    let inner = g.inner();
                    let d = g.data().chunks(inner).map(|c| c.iter().sum()).collect();
                    self.accumulate(grads, *v, Tensor::from_vec(val(*v).shape(), d));
                }
            }
            Op::MulChannel(x, gate) => {
                let inner = g.inner();
                let gv = val(*gate);
                if wants(*x) {
                    let mut dx = g.clone();
                    for (c, chunk) in dx.data_mut().chunks_mut(inner).enumerate() {
                        let k = gv.data()[c];
                        chunk.iter_mut().for_each(|e| *e *= k);
                    }
                    self.accumulate(grads, *x, dx);
                }
                if wants(*gate) {
                    let d = g
                        .data()
                        .chunks(inner)
                        .zip(val(*x).data().chunks(inner))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(a, b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *gate, Tensor::from_vec(gv.shape(), d));
                }
            }
            Op::MulSpatial(x, gate) => {
                let inner = g.inner();
                let gv = val(*gate);
                if wants(*x) {
                    let mut dx = g.clone();
                    for chunk in dx.data_mut().chunks_mut(inner) {
                        chunk.iter_mut().zip(gv.data()).for_each(|(e, k)| *e *= k);
                    }
                    self.accumulate(grads, *x, dx);
                }
                if wants(*gate) {
                    let mut d = vec![0.0; inner];
                    for (gc, xc) in g.data().chunks(inner).zip(val(*x).data().chunks(inner)) {
                        for i in 0..inner {
                            d[i] += gc[i] * xc[i];
                        }
                    }
                    self.accumulate(grads, *gate, Tensor::from_vec(gv.shape(), d));
                }
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let t = val(p);
                    let n = t.numel();
                    if wants(p) {
                        self.accumulate(grads, p, Tensor::from_vec(t.shape(), g.data()[start..start + n].to_vec()));
                    }
                    start += n;
                }
            }
            Op::Narrow(x, start) => {
                let xt = val(*x);
                let inner = xt.inner();
                let mut d = Tensor::zeros(xt.shape());
                d.data_mut()[start * inner..start * inner + g.numel()].copy_from_slice(g.data());
                self.accumulate(grads, *x, d);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.clone().reshaped(val(*x).shape())),
            Op::Conv3d { x, w, b } => {
                let (dx, dw, db) = kernels::conv3d_backward(val(*x), val(*w), g, wants(*x));
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, dw);
                self.accumulate(grads, *b, db);
            }
            Op::GroupNorm { x, gamma, beta, groups, mean, rstd } => {
                let (dx, dg, db) = kernels::group_norm_backward(val(*x), val(*gamma), *groups, mean, rstd, g);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dg);
                self.accumulate(grads, *beta, db);
            }
            Op::AvgPool2(x) => self.accumulate(grads, *x, kernels::avg_pool2_backward(val(*x).shape(), g)),
            Op::Upsample2(x) => self.accumulate(grads, *x, kernels::upsample2_backward(val(*x).shape(), g)),
            Op::GlobalAvgPool(x) => {
                let xt = val(*x);
                let inner = xt.inner();
                let mut d = Tensor::zeros(xt.shape());
                for (c, chunk) in d.data_mut().chunks_mut(inner).enumerate() {
                    let k = g.data()[c] / inner as f64;
                    chunk.iter_mut().for_each(|e| *e = k);
                }
                self.accumulate(grads, *x, d);
            }
            Op::Linear { x, w, b } => {
                let (xt, wt) = (val(*x), val(*w));
                let (m, n) = (wt.shape()[0], wt.shape()[1]);
                if wants(*x) {
                    let d = (0..n).map(|j| (0..m).map(|i| g.data()[i] * wt.data()[i * n + j]).sum()).collect();
                    self.accumulate(grads, *x, Tensor::from_vec(xt.shape(), d));
                }
                if wants(*w) {
                    let mut d = Tensor::zeros(wt.shape());
                    for i in 0..m {
                        for j in 0..n {
                            d.data_mut()[i * n + j] = g.data()[i] * xt.data()[j];
                        }
                    }
                    self.accumulate(grads, *w, d);
                }
                self.accumulate(grads, *b, g.clone());
            }
            Op::MatMul { a, b, ta, tb } => {
                // C = op(A)·op(B)
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    // dop(A) = G·op(B)^T
                    let da = if *ta {
                        kernels::matmul(bv, g, *tb, true)
                    } else {
                        kernels::matmul(g, bv, false, !*tb)
                    };
                    self.accumulate(grads, *a, da);
                }
                if wants(*b) {
                    // dop(B) = op(A)^T·G
                    let db = if *tb {
                        kernels::matmul(g, av, true, *ta)
                    } else {
                        kernels::matmul(av, g, !*ta, false)
                    };
                    self.accumulate(grads, *b, db);
                }
            }
            Op::SoftmaxChannels(x) => {
                let s = &node.value;
                let c = s.channels();
                let inner = s.inner();
                let mut d = Tensor::zeros(s.shape());
                let (sd, gd) = (s.data(), g.data());
                let dd = d.data_mut();
                for i in 0..inner {
                    let dot: f64 = (0..c).map(|k| sd[k * inner + i] * gd[k * inner + i]).sum();
                    for k in 0..c {
                        dd[k * inner + i] = sd[k * inner + i] * (gd[k * inner + i] - dot);
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::SsmScan { x, a, b, c, d, reverse } => {
                let sg = kernels::ssm_scan_backward(val(*x), val(*a), val(*b), val(*c), val(*d), *reverse, g);
                self.accumulate(grads, *x, sg.dx);
                self.accumulate(grads, *a, sg.da);
                self.accumulate(grads, *b, sg.db);
                self.accumulate(grads, *c, sg.dc);
                self.accumulate(grads, *d, sg.dd);
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
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
