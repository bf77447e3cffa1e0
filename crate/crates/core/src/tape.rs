//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Every op appends a node holding its output value and whatever the
//! backward pass needs. Nodes only reference earlier nodes, so the tape
//! order is a topological order and [`Tape::backward`] is a single reverse
//! sweep that visits each node once.

use crate::error::{Error, Result};
use crate::ops::{self, layout, Activation, ConvParams, GatherIndex, GrnCache, LayerNormCache};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, params: ConvParams },
    LayerNorm { x: Var, gamma: Var, beta: Var, cache: LayerNormCache<T> },
    Act { x: Var, kind: Activation },
    Softmax { x: Var },
    MaxPool { x: Var, argmax: Vec<u32> },
    AvgPool { x: Var },
    Bilinear { x: Var },
    MatMul { a: Var, b: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Gather { x: Var, index: Vec<GatherIndex> },
    Concat { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    ScaleChannels { x: Var, s: Var },
    Scale { x: Var, k: T },
    Grn { x: Var, gamma: Var, beta: Var, cache: GrnCache<T> },
    Reshape { x: Var },
    Sum { x: Var },
    DotConst { x: Var, weights: Tensor<T> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor<T> },
}

struct Node<T> {
    op: Op<T>,
    label: &'static str,
    value: Tensor<T>,
    requires_grad: bool,
}

/// One recorded operation as seen from outside: kind and output shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEntry {
    pub op: &'static str,
    pub dims: Vec<usize>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Tensor<T>>>,
    macs: u64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), leaf_grads: Vec::new(), macs: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates executed by conv, matmul and linear kernels so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// Hash of every discrete choice made so far: max-pool winners, and the
    /// signs entering a GRN on a 1×1 map, where the channel norm is `|x|`.
    /// Two evaluations with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for n in &self.nodes {
            match &n.op {
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                Op::Grn { x, .. } => {
                    let xv = self.value(*x);
                    let [_, _, hh, ww] = xv.nchw();
                    if hh * ww == 1 {
                        for v in xv.data() {
                            v.is_sign_negative().hash(&mut h);
                        }
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    pub fn trace(&self) -> Vec<TraceEntry> {
        self.nodes.iter().map(|n| TraceEntry { op: n.label, dims: n.value.dims().to_vec() }).collect()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Op::Leaf, "leaf", value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Accumulated gradient, or zeros for leaves that never received one
    /// (including leaves created with `requires_grad = false`).
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<T> {
        self.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(self.value(v).dims()))
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, op: Op<T>, label: &'static str, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, label, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, params: ConvParams) -> Result<Var> {
        let out = ops::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), params)?;
        self.macs += ops::conv2d_macs(self.value(x), self.value(w), params)?;
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(Op::Conv2d { x, w, b, params }, "conv2d", out, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (out, cache) = ops::layer_norm_with_cache(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(Op::LayerNorm { x, gamma, beta, cache }, "layer_norm", out, rg))
    }

    pub fn act(&mut self, x: Var, kind: Activation) -> Var {
        let out = ops::activation(self.value(x), kind);
        let rg = self.requires_grad(x);
        self.push(Op::Act { x, kind }, "activation", out, rg)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = ops::softmax_rows(self.value(x))?;
        let rg = self.requires_grad(x);
        Ok(self.push(Op::Softmax { x }, "softmax", out, rg))
    }

    pub fn adaptive_max_pool2d(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (out, argmax) = ops::adaptive_max_pool2d_with_argmax(self.value(x), out_h, out_w)?;
        let rg = self.requires_grad(x);
        Ok(self.push(Op::MaxPool { x, argmax }, "adaptive_max_pool2d", out, rg))
    }

    pub fn adaptive_avg_pool2d(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = ops::adaptive_avg_pool2d(self.value(x), out_h, out_w)?;
        let rg = self.requires_grad(x);
        Ok(self.push(Op::AvgPool { x }, "adaptive_avg_pool2d", out, rg))
    }

    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = ops::bilinear_resize(self.value(x), out_h, out_w)?;
        let rg = self.requires_grad(x);
        Ok(self.push(Op::Bilinear { x }, "bilinear_resize", out, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        self.macs += ops::matmul_macs(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::MatMul { a, b }, "matmul", out, rg))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = ops::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        self.macs += self.value(w).numel() as u64 * self.value(x).dims()[0] as u64;
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(Op::Linear { x, w, b }, "linear", out, rg))
    }

    fn gather(&mut self, x: Var, plan: layout::Plan, label: &'static str) -> Result<Var> {
        let out = ops::gather(self.value(x), &plan.dims, &plan.index)?;
        let rg = self.requires_grad(x);
        Ok(self.push(Op::Gather { x, index: plan.index }, label, out, rg))
    }

    pub fn split_channels(&mut self, x: Var, c_a: usize) -> Result<(Var, Var)> {
        let src = self.value(x).nchw();
        if c_a > src[1] {
            return Err(Error::shape("split_channels", "channel count", src[1], c_a));
        }
        let a = self.gather(x, layout::channel_slice(src, 0, c_a)?, "split_channels")?;
        let b = self.gather(x, layout::channel_slice(src, c_a, src[1] - c_a)?, "split_channels")?;
        Ok((a, b))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_channels(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::Concat { a, b }, "concat_channels", out, rg))
    }

    pub fn window_partition(&mut self, x: Var, win: usize) -> Result<Var> {
        let plan = layout::window_partition(self.value(x).nchw(), win)?;
        self.gather(x, plan, "window_partition")
    }

    pub fn window_reverse(&mut self, windows: Var, win: usize, n: usize, h: usize, w: usize) -> Result<Var> {
        let c = *self.value(windows).dims().last().unwrap_or(&0);
        if self.value(windows).numel() != n * c * h * w {
            return Err(Error::shape("window_reverse", "element count", n * c * h * w, self.value(windows).numel()));
        }
        let plan = layout::window_reverse([n, c, h, w], win)?;
        self.gather(windows, plan, "window_reverse")
    }

    pub fn pad_or_crop(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let plan = layout::pad_or_crop(self.value(x).nchw(), out_h, out_w)?;
        self.gather(x, plan, "pad_or_crop")
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let plan = layout::transpose_last2(self.value(x).dims())?;
        self.gather(x, plan, "transpose")
    }

    pub fn take_heads(&mut self, x: Var, parts: usize, part: usize, heads: usize) -> Result<Var> {
        let plan = layout::take_heads(self.value(x).nchw(), parts, part, heads)?;
        self.gather(x, plan, "take_heads")
    }

    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let plan = layout::merge_heads(self.value(x).nchw(), heads)?;
        self.gather(x, plan, "merge_heads")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (da, db) = (self.value(a).dims(), self.value(b).dims());
        if da != db {
            let i = da.iter().zip(db).position(|(x, y)| x != y).unwrap_or(0);
            return Err(Error::shape(
                op,
                "operand shape",
                da.get(i).copied().unwrap_or(da.len()),
                db.get(i).copied().unwrap_or(db.len()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::Add { a, b }, "add", out, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(self.value(a).dims(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::Mul { a, b }, "mul", out, rg))
    }

    /// `x (n, c, h, w) * s (n, c, 1, 1)` broadcast over space.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).nchw();
        let sd = self.value(s).nchw();
        if sd != [n, c, 1, 1] {
            return Err(Error::shape("scale_channels", "gate channels", c, sd[1]));
        }
        let hw = h * w;
        let gate = self.value(s).data();
        let data = self.value(x).data().iter().enumerate().map(|(i, &v)| v * gate[i / hw]).collect();
        let out = Tensor::new(self.value(x).dims(), data)?;
        let rg = self.any_grad(&[x, s]);
        Ok(self.push(Op::ScaleChannels { x, s }, "scale_channels", out, rg))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let out = self.value(x).map(|v| v * k);
        let rg = self.requires_grad(x);
        self.push(Op::Scale { x, k }, "scale", out, rg)
    }

    pub fn grn(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (out, cache) = ops::grn_with_cache(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(Op::Grn { x, gamma, beta, cache }, "grn", out, rg))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(dims)?;
        let rg = self.requires_grad(x);
        Ok(self.push(Op::Reshape { x }, "reshape", out, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.requires_grad(x);
        self.push(Op::Sum { x }, "sum", out, rg)
    }

    /// `sum(x ⊙ weights)` for a fixed weight tensor; a random projection to a scalar.
    pub fn dot_const(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        if weights.dims() != self.value(x).dims() {
            return Err(Error::shape("dot_const", "element count", self.value(x).numel(), weights.numel()));
        }
        let s = self.value(x).data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        let rg = self.requires_grad(x);
        Ok(self.push(Op::DotConst { x, weights }, "dot_const", Tensor::scalar(s), rg))
    }

    /// Mean softmax cross-entropy of `(n, classes)` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        const OP: &str = "cross_entropy";
        let lv = self.value(logits);
        if lv.rank() != 2 {
            return Err(Error::shape(OP, "logits rank", 2, lv.rank()));
        }
        let (n, k) = (lv.dims()[0], lv.dims()[1]);
        if labels.len() != n {
            return Err(Error::shape(OP, "label count", n, labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(OP, format!("label {bad} >= {k} classes")));
        }
        let probs = ops::softmax_rows(lv)?;
        let mut loss = T::zero();
        for (i, &l) in labels.iter().enumerate() {
            let row = &lv.data()[i * k..][..k];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            loss = loss + lse - row[l];
        }
        loss = loss / T::from_usize(n.max(1)).unwrap();
        let rg = self.requires_grad(logits);
        Ok(self.push(Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, "cross_entropy", Tensor::scalar(loss), rg))
    }

    /// Accumulates d`loss`/d`leaf` into every leaf created with `requires_grad`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", "loss element count", 1, self.value(loss).numel()));
        }
        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize_with(self.nodes.len(), || None);
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::ones(self.value(loss).dims()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut contribs: Vec<(Var, Tensor<T>)> = Vec::with_capacity(3);
            match &node.op {
                Op::Leaf => {
                    match &mut self.leaf_grads[i] {
                        Some(acc) => acc.add_assign(&g),
                        slot @ None => *slot = Some(g),
                    }
                    continue;
                }
                Op::Conv2d { x, w, b, params } => {
                    let cg = ops::conv2d_backward(self.value(*x), self.value(*w), b.is_some(), &g, *params)?;
                    contribs.push((*x, cg.input));
                    contribs.push((*w, cg.weight));
                    if let (Some(b), Some(gb)) = (b, cg.bias) {
                        contribs.push((*b, gb));
                    }
                }
                Op::LayerNorm { x, gamma, beta, cache } => {
                    let (gx, gg, gb) = ops::layer_norm_backward(self.value(*x).dims(), self.value(*gamma), cache, &g);
                    contribs.push((*x, gx));
                    contribs.push((*gamma, gg.reshape(self.value(*gamma).dims())?));
                    contribs.push((*beta, gb.reshape(self.value(*beta).dims())?));
                }
                Op::Act { x, kind } => {
                    let xv = self.value(*x);
                    let data = xv.data().iter().zip(g.data()).map(|(&v, &gv)| gv * kind.derivative(v)).collect();
                    contribs.push((*x, Tensor::new(xv.dims(), data)?));
                }
                Op::Softmax { x } => contribs.push((*x, ops::softmax_rows_backward(&node.value, &g))),
                Op::MaxPool { x, argmax } => {
                    contribs.push((*x, ops::gather_backward(self.value(*x).dims(), argmax, &g)));
                }
                Op::AvgPool { x } => contribs.push((*x, ops::adaptive_avg_pool2d_backward(self.value(*x).dims(), &g))),
                Op::Bilinear { x } => contribs.push((*x, ops::bilinear_resize_backward(self.value(*x).dims(), &g))),
                Op::MatMul { a, b } => {
                    let (ga, gb) = ops::matmul_backward(self.value(*a), self.value(*b), &g)?;
                    contribs.push((*a, ga));
                    contribs.push((*b, gb));
                }
                Op::Linear { x, w, b } => {
                    let (gx, gw, gb) = ops::linear_backward(self.value(*x), self.value(*w), &g);
                    contribs.push((*x, gx));
                    contribs.push((*w, gw));
                    if let Some(b) = b {
                        contribs.push((*b, gb.reshape(self.value(*b).dims())?));
                    }
                }
                Op::Gather { x, index } => contribs.push((*x, ops::gather_backward(self.value(*x).dims(), index, &g))),
                Op::Concat { a, b } => {
                    let (ga, gb) = ops::concat_channels_backward(self.value(*a).dims(), self.value(*b).dims(), &g);
                    contribs.push((*a, ga));
                    contribs.push((*b, gb));
                }
                Op::Add { a, b } => {
                    contribs.push((*a, g.clone()));
                    contribs.push((*b, g));
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                    let gb = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    contribs.push((*a, Tensor::new(av.dims(), ga)?));
                    contribs.push((*b, Tensor::new(bv.dims(), gb)?));
                }
                Op::ScaleChannels { x, s } => {
                    let (xv, sv) = (self.value(*x), self.value(*s));
                    let [_, _, h, w] = xv.nchw();
                    let hw = h * w;
                    let gate = sv.data();
                    let gx = g.data().iter().enumerate().map(|(i, &gv)| gv * gate[i / hw]).collect();
                    let mut gs = vec![T::zero(); sv.numel()];
                    for (i, (&gv, &xv)) in g.data().iter().zip(xv.data()).enumerate() {
                        gs[i / hw] = gs[i / hw] + gv * xv;
                    }
                    contribs.push((*x, Tensor::new(xv.dims(), gx)?));
                    contribs.push((*s, Tensor::new(sv.dims(), gs)?));
                }
                Op::Scale { x, k } => contribs.push((*x, g.map(|v| v * *k))),
                Op::Grn { x, gamma, beta, cache } => {
                    let (gx, gg, gb) = ops::grn_backward(self.value(*x), self.value(*gamma), cache, &g);
                    contribs.push((*x, gx));
                    contribs.push((*gamma, gg.reshape(self.value(*gamma).dims())?));
                    contribs.push((*beta, gb.reshape(self.value(*beta).dims())?));
                }
                Op::Reshape { x } => contribs.push((*x, g.reshape(self.value(*x).dims())?)),
                Op::Sum { x } => {
                    let s = g.data()[0];
                    contribs.push((*x, Tensor::full(self.value(*x).dims(), s)));
                }
                Op::DotConst { x, weights } => {
                    let s = g.data()[0];
                    contribs.push((*x, weights.map(|w| w * s)));
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let s = g.data()[0];
                    let (n, k) = (probs.dims()[0], probs.dims()[1]);
                    let inv_n = s / T::from_usize(n.max(1)).unwrap();
                    let mut gl = probs.map(|p| p * inv_n);
                    for (i, &l) in labels.iter().enumerate() {
                        let d = gl.data_mut();
                        d[i * k + l] = d[i * k + l] - inv_n;
                    }
                    contribs.push((*logits, gl));
                }
            }
            for (v, gv) in contribs {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&gv),
                    slot @ None => *slot = Some(gv),
                }
            }
        }
        Ok(())
    }
}
