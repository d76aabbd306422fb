//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its variables. Leaves are either
//! trainable (gradients are kept after [`Graph::backward`]) or constant. Nodes that do
//! not depend on a trainable leaf are skipped during the backward sweep, so frozen
//! networks evaluated on the same tape cost only their forward pass.
//!
//! Operation shape contracts are internal invariants of the network code and are
//! enforced with assertions; user-facing shape validation happens one level up.

use crate::tensor::{gemm, MatRef, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        groups: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Softplus(Var),
    GlobalAvgPool(Var),
    AvgPool2(Var),
    Concat(Vec<Var>),
    SliceChannels { input: Var, start: usize },
    Reshape(Var),
    MeanAbsDiff(Var, Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    SoftmaxCols(Var),
    L2NormalizeRows(Var),
    LayerNormChannels { input: Var, inv_std: Vec<f64> },
    DivScalar(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient buffer for `var`, or `None` when no gradient reached it.
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

const LN_EPS: f64 = 1e-5;
const L2_EPS: f64 = 1e-12;

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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v`'s value as a new constant leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    // ---- convolution -------------------------------------------------------

    /// Stride-1 "same" convolution of a `[C, H, W]` input with a
    /// `[C_out, C/groups, k, k]` kernel (odd `k`).
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, groups: usize) -> Var {
        let ishape = self.shape(input).to_vec();
        let wshape = self.shape(weight).to_vec();
        assert_eq!(ishape.len(), 3, "conv input must be [C, H, W]");
        assert_eq!(wshape.len(), 4, "conv weight must be [Co, Ci/g, k, k]");
        let (cin, h, w) = (ishape[0], ishape[1], ishape[2]);
        let (cout, cin_g, k) = (wshape[0], wshape[1], wshape[2]);
        assert_eq!(wshape[3], k);
        assert!(k % 2 == 1, "conv kernel must be odd");
        assert!(groups >= 1 && cin % groups == 0 && cout % groups == 0);
        assert_eq!(cin / groups, cin_g, "conv channel/group mismatch");
        if let Some(b) = bias {
            assert_eq!(self.shape(b), &[cout]);
        }
        let cout_g = cout / groups;
        let hw = h * w;
        let mut out = vec![0.0; cout * hw];
        {
            let x = self.value(input).data();
            let wt = self.value(weight).data();
            let kk = cin_g * k * k;
            let mut cols = Vec::new();
            for g in 0..groups {
                let xin = &x[g * cin_g * hw..(g + 1) * cin_g * hw];
                let cols_ref: &[f64] = if k == 1 {
                    xin
                } else {
                    im2col(xin, cin_g, h, w, k, &mut cols);
                    &cols
                };
                gemm(
                    MatRef::new(&wt[g * cout_g * kk..(g + 1) * cout_g * kk], cout_g, kk),
                    MatRef::new(cols_ref, kk, hw),
                    0.0,
                    &mut out[g * cout_g * hw..(g + 1) * cout_g * hw],
                );
            }
            if let Some(b) = bias {
                let bv = self.value(b).data();
                for (o, chunk) in out.chunks_mut(hw).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bv[o]);
                }
            }
        }
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        let value = Tensor::new(vec![cout, h, w], out).expect("conv output shape");
        self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                groups,
            },
            rg,
        )
    }

    // ---- elementwise -------------------------------------------------------

    fn broadcast_binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let av = self.value(a).data();
        let bv = self.value(b).data();
        if sa == sb {
            let data = av.iter().zip(bv).map(|(x, y)| f(*x, *y)).collect();
            return Tensor::new(sa, data).expect("shape");
        }
        let plan = BroadcastPlan::new(&sa, &sb);
        let mut data = Vec::with_capacity(plan.numel());
        plan.for_each(|_, ia, ib| data.push(f(av[ia], bv[ib])));
        Tensor::new(plan.out_shape.clone(), data).expect("shape")
    }

    /// Elementwise sum with rank-equal broadcasting (each dim equal or 1).
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.broadcast_binary(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.broadcast_binary(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.broadcast_binary(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let value = self.map(x, |v| v * k);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, k), rg)
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| f(*v)).collect())
            .expect("shape")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.map(x, |v| v.max(0.0));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.map(x, |v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(x);
        self.push(value, Op::LeakyRelu(x, slope), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.map(x, sigmoid);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.map(x, softplus);
        let rg = self.rg(x);
        self.push(value, Op::Softplus(x), rg)
    }

    // ---- pooling / layout --------------------------------------------------

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 3);
        let hw = s[1] * s[2];
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::new(vec![s[0], 1, 1], data).expect("shape");
        let rg = self.rg(x);
        self.push(value, Op::GlobalAvgPool(x), rg)
    }

    /// 2×2 average pooling with stride 2; odd trailing rows/columns form partial
    /// windows averaged over their valid elements, so the output is
    /// `[C, ceil(H/2), ceil(W/2)]`.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 3);
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let xv = self.value(x).data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            let src = &xv[ch * h * w..(ch + 1) * h * w];
            for oy in 0..oh {
                let y1 = (2 * oy + 2).min(h);
                for ox in 0..ow {
                    let x1 = (2 * ox + 2).min(w);
                    let mut acc = 0.0;
                    for y in 2 * oy..y1 {
                        for xx in 2 * ox..x1 {
                            acc += src[y * w + xx];
                        }
                    }
                    let n = ((y1 - 2 * oy) * (x1 - 2 * ox)) as f64;
                    out[ch * oh * ow + oy * ow + ox] = acc / n;
                }
            }
        }
        let value = Tensor::new(vec![c, oh, ow], out).expect("shape");
        let rg = self.rg(x);
        self.push(value, Op::AvgPool2(x), rg)
    }

    /// Channel concatenation of `[C_i, H, W]` tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let s0 = self.shape(parts[0]).to_vec();
        let mut channels = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(&s[1..], &s0[1..], "concat spatial mismatch");
            channels += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![channels, s0[1], s0[2]], data).expect("shape");
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(value, Op::Concat(parts.to_vec()), rg)
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Var {
        let s = self.shape(input).to_vec();
        assert!(start + len <= s[0]);
        let plane: usize = s[1..].iter().product();
        let data = self.value(input).data()[start * plane..(start + len) * plane].to_vec();
        let mut shape = s;
        shape[0] = len;
        let value = Tensor::new(shape, data).expect("shape");
        let rg = self.rg(input);
        self.push(value, Op::SliceChannels { input, start }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape).expect("reshape numel");
        let rg = self.rg(x);
        self.push(value, Op::Reshape(x), rg)
    }

    // ---- reductions / linear algebra ---------------------------------------

    /// Mean absolute difference over all elements; a scalar `[1]`.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mean_abs_diff shape mismatch");
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let n = av.len() as f64;
        let s: f64 = av.iter().zip(bv).map(|(x, y)| (x - y).abs()).sum();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(s / n), Op::MeanAbsDiff(a, b), rg)
    }

    /// Matrix product of `[m, k]` and `[k, n]` operands; `ta`/`tb` read the stored
    /// matrix transposed.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert!(sa.len() == 2 && sb.len() == 2, "matmul operands must be matrices");
        let ma = mat(self.value(a).data(), &sa, ta);
        let mb = mat(self.value(b).data(), &sb, tb);
        let m = if ta { sa[1] } else { sa[0] };
        let n = if tb { sb[0] } else { sb[1] };
        let mut out = vec![0.0; m * n];
        gemm(ma, mb, 0.0, &mut out);
        let value = Tensor::new(vec![m, n], out).expect("shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul { a, b, ta, tb }, rg)
    }

    /// Softmax down each column of a `[rows, cols]` matrix: every column sums to 1.
    pub fn softmax_cols(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2);
        let (r, c) = (s[0], s[1]);
        let xv = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for j in 0..c {
            let mx = (0..r).map(|i| xv[i * c + j]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for i in 0..r {
                let e = (xv[i * c + j] - mx).exp();
                out[i * c + j] = e;
                z += e;
            }
            for i in 0..r {
                out[i * c + j] /= z;
            }
        }
        let value = Tensor::new(s, out).expect("shape");
        let rg = self.rg(x);
        self.push(value, Op::SoftmaxCols(x), rg)
    }

    /// Scales each row of a `[rows, cols]` matrix to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2);
        let c = s[1];
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            let n = (row.iter().map(|v| v * v).sum::<f64>() + L2_EPS).sqrt();
            row.iter_mut().for_each(|v| *v /= n);
        }
        let value = Tensor::new(s, out).expect("shape");
        let rg = self.rg(x);
        self.push(value, Op::L2NormalizeRows(x), rg)
    }

    /// Zero-mean, unit-variance normalization across channels at every pixel of a
    /// `[C, H, W]` tensor (no affine part).
    pub fn layer_norm_channels(&mut self, input: Var) -> Var {
        let s = self.shape(input).to_vec();
        assert_eq!(s.len(), 3);
        let (c, hw) = (s[0], s[1] * s[2]);
        let xv = self.value(input).data();
        let mut out = vec![0.0; c * hw];
        let mut inv_std = vec![0.0; hw];
        for p in 0..hw {
            let mean = (0..c).map(|ch| xv[ch * hw + p]).sum::<f64>() / c as f64;
            let var = (0..c)
                .map(|ch| (xv[ch * hw + p] - mean).powi(2))
                .sum::<f64>()
                / c as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[p] = inv;
            for ch in 0..c {
                out[ch * hw + p] = (xv[ch * hw + p] - mean) * inv;
            }
        }
        let value = Tensor::new(s, out).expect("shape");
        let rg = self.rg(input);
        self.push(value, Op::LayerNormChannels { input, inv_std }, rg)
    }

    /// Divides every element of `x` by the scalar variable `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).numel(), 1);
        let d = self.scalar(s);
        let value = self.map(x, |v| v / d);
        let rg = self.rg(x) || self.rg(s);
        self.push(value, Op::DivScalar(x, s), rg)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).numel(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.rg(output) {
            return Gradients { grads };
        }
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                groups,
            } => self.backprop_conv(*input, *weight, *bias, *groups, g, grads),
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let (a, b) = (*a, *b);
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                if sa == sb {
                    if self.rg(a) {
                        accumulate(grads, a, g.len(), |buf| {
                            buf.iter_mut().zip(g).for_each(|(d, v)| *d += v)
                        });
                    }
                    if self.rg(b) {
                        accumulate(grads, b, g.len(), |buf| {
                            buf.iter_mut().zip(g).for_each(|(d, v)| *d += sign * v)
                        });
                    }
                } else {
                    let plan = BroadcastPlan::new(&sa, &sb);
                    if self.rg(a) {
                        accumulate(grads, a, self.value(a).numel(), |buf| {
                            plan.for_each(|o, ia, _| buf[ia] += g[o])
                        });
                    }
                    if self.rg(b) {
                        accumulate(grads, b, self.value(b).numel(), |buf| {
                            plan.for_each(|o, _, ib| buf[ib] += sign * g[o])
                        });
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let plan = BroadcastPlan::new(&sa, &sb);
                if self.rg(a) {
                    accumulate(grads, a, av.len(), |buf| {
                        plan.for_each(|o, ia, ib| buf[ia] += g[o] * bv[ib])
                    });
                }
                if self.rg(b) {
                    accumulate(grads, b, bv.len(), |buf| {
                        plan.for_each(|o, ia, ib| buf[ib] += g[o] * av[ia])
                    });
                }
            }
            Op::Scale(x, k) => {
                let k = *k;
                accumulate(grads, *x, g.len(), |buf| {
                    buf.iter_mut().zip(g).for_each(|(d, v)| *d += k * v)
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                accumulate(grads, *x, g.len(), |buf| {
                    for i in 0..buf.len() {
                        if xv[i] > 0.0 {
                            buf[i] += g[i];
                        }
                    }
                });
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                let slope = *slope;
                accumulate(grads, *x, g.len(), |buf| {
                    for i in 0..buf.len() {
                        buf[i] += if xv[i] > 0.0 { g[i] } else { slope * g[i] };
                    }
                });
            }
            Op::Sigmoid(x) => {
                accumulate(grads, *x, g.len(), |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                accumulate(grads, *x, g.len(), |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * sigmoid(xv[i]);
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let hw = s[1] * s[2];
                accumulate(grads, *x, s[0] * hw, |buf| {
                    for (c, chunk) in buf.chunks_mut(hw).enumerate() {
                        let v = g[c] / hw as f64;
                        chunk.iter_mut().for_each(|d| *d += v);
                    }
                });
            }
            Op::AvgPool2(x) => {
                let s = self.shape(*x).to_vec();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
                accumulate(grads, *x, c * h * w, |buf| {
                    for ch in 0..c {
                        for oy in 0..oh {
                            let y1 = (2 * oy + 2).min(h);
                            for ox in 0..ow {
                                let x1 = (2 * ox + 2).min(w);
                                let n = ((y1 - 2 * oy) * (x1 - 2 * ox)) as f64;
                                let v = g[ch * oh * ow + oy * ow + ox] / n;
                                for yy in 2 * oy..y1 {
                                    for xx in 2 * ox..x1 {
                                        buf[ch * h * w + yy * w + xx] += v;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.rg(p) {
                        let src = &g[offset..offset + n];
                        accumulate(grads, p, n, |buf| {
                            buf.iter_mut().zip(src).for_each(|(d, v)| *d += v)
                        });
                    }
                    offset += n;
                }
            }
            Op::SliceChannels { input, start } => {
                let s = self.shape(*input);
                let plane: usize = s[1..].iter().product();
                let off = start * plane;
                accumulate(grads, *input, self.value(*input).numel(), |buf| {
                    buf[off..off + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, v)| *d += v)
                });
            }
            Op::Reshape(x) => {
                accumulate(grads, *x, g.len(), |buf| {
                    buf.iter_mut().zip(g).for_each(|(d, v)| *d += v)
                });
            }
            Op::MeanAbsDiff(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let k = g[0] / av.len() as f64;
                let sign = |i: usize| {
                    let d = av[i] - bv[i];
                    if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                if self.rg(*a) {
                    accumulate(grads, *a, av.len(), |buf| {
                        for (i, d) in buf.iter_mut().enumerate() {
                            *d += k * sign(i);
                        }
                    });
                }
                if self.rg(*b) {
                    accumulate(grads, *b, bv.len(), |buf| {
                        for (i, d) in buf.iter_mut().enumerate() {
                            *d -= k * sign(i);
                        }
                    });
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let m = if ta { sa[1] } else { sa[0] };
                let n = if tb { sb[0] } else { sb[1] };
                let dc = MatRef::new(g, m, n);
                let ma = mat(self.value(a).data(), &sa, ta);
                let mb = mat(self.value(b).data(), &sb, tb);
                if self.rg(a) {
                    accumulate(grads, a, sa[0] * sa[1], |buf| {
                        if ta {
                            gemm(mb, dc.t(), 1.0, buf);
                        } else {
                            gemm(dc, mb.t(), 1.0, buf);
                        }
                    });
                }
                if self.rg(b) {
                    accumulate(grads, b, sb[0] * sb[1], |buf| {
                        if tb {
                            gemm(dc.t(), ma, 1.0, buf);
                        } else {
                            gemm(ma.t(), dc, 1.0, buf);
                        }
                    });
                }
            }
            Op::SoftmaxCols(x) => {
                let s = self.shape(*x);
                let (r, c) = (s[0], s[1]);
                accumulate(grads, *x, r * c, |buf| {
                    for j in 0..c {
                        let dot: f64 = (0..r).map(|i| y[i * c + j] * g[i * c + j]).sum();
                        for i in 0..r {
                            buf[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
                        }
                    }
                });
            }
            Op::L2NormalizeRows(x) => {
                let s = self.shape(*x);
                let c = s[1];
                let xv = self.value(*x).data();
                accumulate(grads, *x, xv.len(), |buf| {
                    for (r, row) in buf.chunks_mut(c).enumerate() {
                        let xs = &xv[r * c..(r + 1) * c];
                        let ys = &y[r * c..(r + 1) * c];
                        let gs = &g[r * c..(r + 1) * c];
                        let n = (xs.iter().map(|v| v * v).sum::<f64>() + L2_EPS).sqrt();
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for i in 0..c {
                            row[i] += (gs[i] - ys[i] * dot) / n;
                        }
                    }
                });
            }
            Op::LayerNormChannels { input, inv_std } => {
                let s = self.shape(*input);
                let (c, hw) = (s[0], s[1] * s[2]);
                accumulate(grads, *input, c * hw, |buf| {
                    for p in 0..hw {
                        let mut mean_g = 0.0;
                        let mut mean_gy = 0.0;
                        for ch in 0..c {
                            mean_g += g[ch * hw + p];
                            mean_gy += g[ch * hw + p] * y[ch * hw + p];
                        }
                        mean_g /= c as f64;
                        mean_gy /= c as f64;
                        for ch in 0..c {
                            let i = ch * hw + p;
                            buf[i] += inv_std[p] * (g[i] - mean_g - y[i] * mean_gy);
                        }
                    }
                });
            }
            Op::DivScalar(x, s) => {
                let d = self.scalar(*s);
                if self.rg(*x) {
                    accumulate(grads, *x, g.len(), |buf| {
                        buf.iter_mut().zip(g).for_each(|(b, v)| *b += v / d)
                    });
                }
                if self.rg(*s) {
                    let ds: f64 = -g.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / d;
                    accumulate(grads, *s, 1, |buf| buf[0] += ds);
                }
            }
        }
    }

    fn backprop_conv(
        &self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        groups: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let ishape = self.shape(input);
        let wshape = self.shape(weight);
        let (cin, h, w) = (ishape[0], ishape[1], ishape[2]);
        let (cout, cin_g, k) = (wshape[0], wshape[1], wshape[2]);
        let cout_g = cout / groups;
        let hw = h * w;
        let kk = cin_g * k * k;
        let x = self.value(input).data();
        let wt = self.value(weight).data();

        if let Some(b) = bias.filter(|b| self.rg(*b)) {
            accumulate(grads, b, cout, |buf| {
                for (o, chunk) in g.chunks(hw).enumerate() {
                    buf[o] += chunk.iter().sum::<f64>();
                }
            });
        }
        let need_w = self.rg(weight);
        let need_x = self.rg(input);
        if !need_w && !need_x {
            return;
        }
        let mut wgrad = if need_w { grads[weight.0].take() } else { None };
        if need_w && wgrad.is_none() {
            wgrad = Some(vec![0.0; cout * kk]);
        }
        let mut xgrad = if need_x { grads[input.0].take() } else { None };
        if need_x && xgrad.is_none() {
            xgrad = Some(vec![0.0; cin * hw]);
        }
        let mut cols = Vec::new();
        let mut dcols = vec![0.0; if k == 1 { 0 } else { kk * hw }];
        for gi in 0..groups {
            let dout = &g[gi * cout_g * hw..(gi + 1) * cout_g * hw];
            let xin = &x[gi * cin_g * hw..(gi + 1) * cin_g * hw];
            let wg = &wt[gi * cout_g * kk..(gi + 1) * cout_g * kk];
            if let Some(dw) = wgrad.as_mut() {
                let cols_ref: &[f64] = if k == 1 {
                    xin
                } else {
                    im2col(xin, cin_g, h, w, k, &mut cols);
                    &cols
                };
                gemm(
                    MatRef::new(dout, cout_g, hw),
                    MatRef::new(cols_ref, kk, hw).t(),
                    1.0,
                    &mut dw[gi * cout_g * kk..(gi + 1) * cout_g * kk],
                );
            }
            if let Some(dx) = xgrad.as_mut() {
                let dxin = &mut dx[gi * cin_g * hw..(gi + 1) * cin_g * hw];
                if k == 1 {
                    gemm(
                        MatRef::new(wg, cout_g, kk).t(),
                        MatRef::new(dout, cout_g, hw),
                        1.0,
                        dxin,
                    );
                } else {
                    gemm(
                        MatRef::new(wg, cout_g, kk).t(),
                        MatRef::new(dout, cout_g, hw),
                        0.0,
                        &mut dcols,
                    );
                    col2im(&dcols, cin_g, h, w, k, dxin);
                }
            }
        }
        if need_w {
            grads[weight.0] = wgrad;
        }
        if need_x {
            grads[input.0] = xgrad;
        }
    }
}

fn mat<'a>(data: &'a [f64], shape: &[usize], transposed: bool) -> MatRef<'a> {
    let m = MatRef::new(data, shape[0], shape[1]);
    if transposed {
        m.t()
    } else {
        m
    }
}

fn accumulate(
    grads: &mut [Option<Vec<f64>>],
    v: Var,
    len: usize,
    f: impl FnOnce(&mut [f64]),
) {
    let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Unfolds `[C, H, W]` into `[C·k·k, H·W]` patch columns with zero padding `k/2`.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, cols: &mut Vec<f64>) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    cols.clear();
    cols.resize(c * k * k * hw, 0.0);
    for ch in 0..c {
        let src = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    let drow = &mut dst[y * w..(y + 1) * w];
                    for xx in x0..x1 {
                        drow[xx] = srow[(xx as isize + dx) as usize];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch columns back onto `[C, H, W]`.
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, dx: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let dst = &mut dx[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let oy = ky as isize - pad;
                let ox = kx as isize - pad;
                let x0 = (-ox).max(0) as usize;
                let x1 = (w as isize - ox).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + oy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = &src[y * w..(y + 1) * w];
                    let drow = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    for xx in x0..x1 {
                        drow[(xx as isize + ox) as usize] += srow[xx];
                    }
                }
            }
        }
    }
}

/// Index mapping for rank-equal broadcasting, padded to rank 3.
struct BroadcastPlan {
    out_shape: Vec<usize>,
    dims: [usize; 3],
    sa: [usize; 3],
    sb: [usize; 3],
}

impl BroadcastPlan {
    fn new(a: &[usize], b: &[usize]) -> Self {
        assert_eq!(a.len(), b.len(), "broadcast needs equal ranks");
        assert!(a.len() <= 3, "broadcast supports rank ≤ 3");
        let out_shape: Vec<usize> = a
            .iter()
            .zip(b)
            .map(|(&x, &y)| {
                assert!(x == y || x == 1 || y == 1, "incompatible broadcast {a:?} vs {b:?}");
                x.max(y)
            })
            .collect();
        let pad = |s: &[usize]| {
            let mut p = [1usize; 3];
            p[3 - s.len()..].copy_from_slice(s);
            p
        };
        let (pa, pb, po) = (pad(a), pad(b), pad(&out_shape));
        let strides = |p: [usize; 3]| {
            let full = [p[1] * p[2], p[2], 1];
            let mut s = [0usize; 3];
            for i in 0..3 {
                s[i] = if p[i] == 1 { 0 } else { full[i] };
            }
            s
        };
        Self {
            out_shape,
            dims: po,
            sa: strides(pa),
            sb: strides(pb),
        }
    }

    fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [d0, d1, d2] = self.dims;
        let mut o = 0;
        for i in 0..d0 {
            for j in 0..d1 {
                let ba = i * self.sa[0] + j * self.sa[1];
                let bb = i * self.sb[0] + j * self.sb[1];
                for k in 0..d2 {
                    f(o, ba + k * self.sa[2], bb + k * self.sb[2]);
                    o += 1;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    /// Checks d(output)/d(leaf) for every leaf element by central differences.
    fn check_grad(
        leaves: Vec<Tensor>,
        build: impl Fn(&mut Graph, &[Var]) -> Var,
    ) {
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out);
        let eps = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.wrt(vars[li]).map(|s| s.to_vec()).unwrap_or(vec![0.0; leaf.numel()]);
            for i in 0..leaf.numel() {
                let eval = |delta: f64| {
                    let mut ls = leaves.clone();
                    ls[li].data_mut()[i] += delta;
                    let mut g = Graph::new();
                    let vs: Vec<Var> = ls.into_iter().map(|t| g.param(t)).collect();
                    let o = build(&mut g, &vs);
                    g.scalar(o)
                };
                let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (analytic[i] - numeric).abs() / denom < 1e-5,
                    "leaf {li} elem {i}: analytic {} numeric {}",
                    analytic[i],
                    numeric
                );
            }
        }
    }

    /// Reduces any tensor to a scalar with a fixed random projection so every
    /// output element carries a distinct weight.
    fn project(g: &mut Graph, x: Var) -> Var {
        let shape = g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let w = Tensor::new(shape, (0..n).map(|i| ((i as f64) * 0.7).sin() + 0.1).collect())
            .unwrap();
        let wv = g.constant(w);
        let prod = g.mul(x, wv);
        let flat = g.reshape(prod, &[1, n]);
        let ones = g.constant(Tensor::filled(&[n, 1], 1.0));
        let s = g.matmul(flat, ones, false, false);
        g.reshape(s, &[1])
    }

    #[test]
    fn conv_gradients_dense_grouped_and_pointwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (cin, cout, k, groups) in [(3, 4, 3, 1), (4, 4, 3, 4), (6, 4, 3, 2), (3, 5, 1, 1)] {
            let x = rand_tensor(&mut rng, &[cin, 5, 4]);
            let w = rand_tensor(&mut rng, &[cout, cin / groups, k, k]);
            let b = rand_tensor(&mut rng, &[cout]);
            check_grad(vec![x, w, b], |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), groups);
                project(g, y)
            });
        }
    }

    #[test]
    fn conv_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (cin, cout, h, w, k) = (2, 3, 4, 5, 3);
        let x = rand_tensor(&mut rng, &[cin, h, w]);
        let wt = rand_tensor(&mut rng, &[cout, cin, k, k]);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(wt.clone());
        let y = g.conv2d(xv, wv, None, 1);
        let yv = g.value(y).data();
        for o in 0..cout {
            for yy in 0..h as isize {
                for xx in 0..w as isize {
                    let mut acc = 0.0;
                    for c in 0..cin {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (sy, sx) = (yy + ky - 1, xx + kx - 1);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += x.data()[c * h * w + sy as usize * w + sx as usize]
                                    * wt.data()[((o * cin + c) * 3 + ky as usize) * 3 + kx as usize];
                            }
                        }
                    }
                    let got = yv[o * h * w + yy as usize * w + xx as usize];
                    assert!((acc - got).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn elementwise_and_pooling_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[3, 5, 3]);
        let cw = rand_tensor(&mut rng, &[3, 1, 1]);
        let pw = rand_tensor(&mut rng, &[1, 5, 3]);
        check_grad(vec![x, cw, pw], |g, v| {
            let a = g.mul(v[0], v[1]);
            let s = g.sigmoid(v[2]);
            let b = g.mul(a, s);
            let c = g.add(b, v[1]);
            let d = g.sub(c, v[2]);
            let e = g.leaky_relu(d, 0.1);
            let f = g.avg_pool2(e);
            let p = g.global_avg_pool(e);
            let sp = g.softplus(p);
            let pf = project(g, f);
            let ps = project(g, sp);
            let t = g.add(pf, ps);
            g.scale(t, 0.7)
        });
    }

    #[test]
    fn layout_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_tensor(&mut rng, &[2, 3, 3]);
        let b = rand_tensor(&mut rng, &[3, 3, 3]);
        check_grad(vec![a, b], |g, v| {
            let c = g.concat(&[v[0], v[1]]);
            let s = g.slice_channels(c, 1, 3);
            let r = g.relu(s);
            let m = g.reshape(r, &[3, 9]);
            project(g, m)
        });
    }

    #[test]
    fn attention_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = rand_tensor(&mut rng, &[4, 6]);
        let k = rand_tensor(&mut rng, &[4, 6]);
        let w = rand_tensor(&mut rng, &[4, 2]);
        let t = Tensor::scalar(0.8);
        let x = rand_tensor(&mut rng, &[4, 2, 3]);
        check_grad(vec![q, k, w, t, x], |g, v| {
            let qn = g.l2_normalize_rows(v[0]);
            let kn = g.l2_normalize_rows(v[1]);
            let a = g.matmul(qn, kn, false, true);
            let a = g.div_scalar(a, v[3]);
            let aw = g.matmul(a, v[2], false, false);
            let sm = g.softmax_cols(aw);
            let ln = g.layer_norm_channels(v[4]);
            let lv = g.reshape(ln, &[4, 6]);
            let out = g.matmul(sm, lv, true, false);
            project(g, out)
        });
    }

    #[test]
    fn mean_abs_diff_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_tensor(&mut rng, &[2, 3, 3]);
        let b = rand_tensor(&mut rng, &[2, 3, 3]);
        check_grad(vec![a, b], |g, v| g.mean_abs_diff(v[0], v[1]));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::filled(&[2], 1.0));
        let p = g.param(Tensor::filled(&[2], 3.0));
        let s = g.mean_abs_diff(c, p);
        let grads = g.backward(s);
        assert!(grads.wrt(c).is_none());
        assert_eq!(grads.wrt(p).unwrap(), &[0.5, 0.5]);
    }

    #[test]
    fn avg_pool_ceil_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[1, 3, 5], 2.0));
        let y = g.avg_pool2(x);
        assert_eq!(g.shape(y), &[1, 2, 3]);
        assert!(g.value(y).data().iter().all(|v| (*v - 2.0).abs() < 1e-15));
    }
}
