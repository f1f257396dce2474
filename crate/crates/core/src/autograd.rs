//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of a forward pass; [`Tape::backward`]
//! walks the recording in reverse and accumulates gradients for every node
//! that was built from a gradient-requiring leaf. All math is `f64` and all
//! kernels are deterministic: parallel sections only ever write disjoint
//! output ranges, reductions run in a fixed order.

use crate::tensor::Tensor;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zeros,
    /// Periodic padding; used by the translation-equivariance checks.
    Circular,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Value(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Silu,
    Relu,
    Matmul,
    Bmm,
    Transpose12,
    Conv2d { stride: usize, pad: usize, pad_mode: PadMode },
    GroupNorm { groups: usize, eps: f64 },
    BiasAddChan,
    AddPerSampleChan,
    BiasAddRow,
    SoftmaxLast,
    UpsampleNearest2x,
    ConcatChan,
    Reshape,
    Gather { indices: Vec<usize> },
    MeanAll,
    Mse,
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients keyed by node id, produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Value) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Value) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, t: Tensor, needs_grad: bool) -> Value {
        self.push(Op::Leaf, vec![], t, needs_grad)
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Tensor, needs_grad: bool) -> Value {
        self.nodes.push(Node { op, inputs, value, needs_grad });
        Value(self.nodes.len() - 1)
    }

    fn unary(&mut self, op: Op, a: Value, value: Tensor) -> Value {
        let ng = self.nodes[a.0].needs_grad;
        self.push(op, vec![a.0], value, ng)
    }

    fn binary(&mut self, op: Op, a: Value, b: Value, value: Tensor) -> Value {
        let ng = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        self.push(op, vec![a.0, b.0], value, ng)
    }

    pub fn add(&mut self, a: Value, b: Value) -> Value {
        let v = self.value(a).add(self.value(b));
        self.binary(Op::Add, a, b, v)
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Value {
        let v = self.value(a).sub(self.value(b));
        self.binary(Op::Sub, a, b, v)
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Value {
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        self.binary(Op::Mul, a, b, v)
    }

    pub fn scale(&mut self, a: Value, s: f64) -> Value {
        let v = self.value(a).scale(s);
        self.unary(Op::Scale(s), a, v)
    }

    pub fn silu(&mut self, a: Value) -> Value {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.unary(Op::Silu, a, v)
    }

    pub fn relu(&mut self, a: Value) -> Value {
        let v = self.value(a).map(|x| x.max(0.0));
        self.unary(Op::Relu, a, v)
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Value, b: Value) -> Value {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        assert_eq!(sa.len(), 2);
        assert_eq!(sb.len(), 2);
        assert_eq!(sa[1], sb[0], "matmul inner dims {:?} x {:?}", sa, sb);
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        matmul_into(out.data_mut(), self.value(a).data(), self.value(b).data(), m, k, n);
        self.binary(Op::Matmul, a, b, out)
    }

    /// `[B, m, k] x [B, k, n] -> [B, m, n]`
    pub fn bmm(&mut self, a: Value, b: Value) -> Value {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        assert_eq!(sa.len(), 3);
        assert_eq!(sb.len(), 3);
        assert_eq!(sa[0], sb[0]);
        assert_eq!(sa[2], sb[1]);
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = Tensor::zeros(&[bsz, m, n]);
        for i in 0..bsz {
            matmul_into(
                &mut out.data_mut()[i * m * n..(i + 1) * m * n],
                &self.value(a).data()[i * m * k..(i + 1) * m * k],
                &self.value(b).data()[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            );
        }
        self.binary(Op::Bmm, a, b, out)
    }

    /// `[B, m, n] -> [B, n, m]`
    pub fn transpose12(&mut self, a: Value) -> Value {
        let s = self.value(a).shape().to_vec();
        assert_eq!(s.len(), 3);
        let v = transpose12(self.value(a), s[0], s[1], s[2]);
        self.unary(Op::Transpose12, a, v)
    }

    /// 2-D convolution, `x [N, Cin, H, W]`, `w [Cout, Cin, kh, kw]`, square
    /// stride and padding.
    pub fn conv2d(
        &mut self,
        x: Value,
        w: Value,
        stride: usize,
        pad: usize,
        pad_mode: PadMode,
    ) -> Value {
        let out = conv2d_forward(self.value(x), self.value(w), stride, pad, pad_mode);
        let ng = self.nodes[x.0].needs_grad || self.nodes[w.0].needs_grad;
        self.push(Op::Conv2d { stride, pad, pad_mode }, vec![x.0, w.0], out, ng)
    }

    /// Group normalization over `[N, C, H, W]` with per-channel affine
    /// `gamma`, `beta` of shape `[C]`.
    pub fn group_norm(
        &mut self,
        x: Value,
        gamma: Value,
        beta: Value,
        groups: usize,
        eps: f64,
    ) -> Value {
        let out = group_norm_forward(self.value(x), self.value(gamma), self.value(beta), groups, eps);
        let ng = self.nodes[x.0].needs_grad
            || self.nodes[gamma.0].needs_grad
            || self.nodes[beta.0].needs_grad;
        self.push(Op::GroupNorm { groups, eps }, vec![x.0, gamma.0, beta.0], out, ng)
    }

    /// `[N, C, H, W] + [C]`
    pub fn bias_add_chan(&mut self, x: Value, b: Value) -> Value {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 4);
        assert_eq!(self.value(b).shape(), &[xs[1]]);
        let hw = xs[2] * xs[3];
        let mut out = self.value(x).clone();
        let bd = self.value(b).data().to_vec();
        let od = out.data_mut();
        for n in 0..xs[0] {
            for c in 0..xs[1] {
                let base = (n * xs[1] + c) * hw;
                let bv = bd[c];
                for v in &mut od[base..base + hw] {
                    *v += bv;
                }
            }
        }
        self.binary(Op::BiasAddChan, x, b, out)
    }

    /// `[N, C, H, W] + [N, C]`; broadcasts a per-sample channel vector over
    /// the spatial grid (used for time-embedding injection).
    pub fn add_per_sample_chan(&mut self, x: Value, e: Value) -> Value {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 4);
        assert_eq!(self.value(e).shape(), &[xs[0], xs[1]]);
        let hw = xs[2] * xs[3];
        let mut out = self.value(x).clone();
        let ed = self.value(e).data().to_vec();
        let od = out.data_mut();
        for n in 0..xs[0] {
            for c in 0..xs[1] {
                let base = (n * xs[1] + c) * hw;
                let ev = ed[n * xs[1] + c];
                for v in &mut od[base..base + hw] {
                    *v += ev;
                }
            }
        }
        self.binary(Op::AddPerSampleChan, x, e, out)
    }

    /// `[N, D] + [D]`
    pub fn bias_add_row(&mut self, x: Value, b: Value) -> Value {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 2);
        assert_eq!(self.value(b).shape(), &[xs[1]]);
        let mut out = self.value(x).clone();
        let bd = self.value(b).data().to_vec();
        let od = out.data_mut();
        for n in 0..xs[0] {
            for d in 0..xs[1] {
                od[n * xs[1] + d] += bd[d];
            }
        }
        self.binary(Op::BiasAddRow, x, b, out)
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&mut self, a: Value) -> Value {
        let s = self.value(a).shape().to_vec();
        let cols = *s.last().expect("softmax needs at least 1 axis");
        let rows = self.value(a).numel() / cols;
        let mut out = self.value(a).clone();
        for r in 0..rows {
            let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.unary(Op::SoftmaxLast, a, out)
    }

    pub fn upsample_nearest_2x(&mut self, a: Value) -> Value {
        let s = self.value(a).shape().to_vec();
        assert_eq!(s.len(), 4);
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        {
            let src = self.value(a).data();
            let dst = out.data_mut();
            for nc in 0..n * c {
                let sb = nc * h * w;
                let db = nc * 4 * h * w;
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        dst[db + y * 2 * w + x] = src[sb + (y / 2) * w + x / 2];
                    }
                }
            }
        }
        self.unary(Op::UpsampleNearest2x, a, out)
    }

    /// Concatenate along channel axis (axis 1) of `[N, C, H, W]`.
    pub fn concat_chan(&mut self, a: Value, b: Value) -> Value {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        assert_eq!(sa.len(), 4);
        assert_eq!(sb.len(), 4);
        assert_eq!(sa[0], sb[0]);
        assert_eq!(&sa[2..], &sb[2..]);
        let (n, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
        let mut out = Tensor::zeros(&[n, ca + cb, sa[2], sa[3]]);
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            let od = out.data_mut();
            for i in 0..n {
                let oa = i * (ca + cb) * hw;
                od[oa..oa + ca * hw].copy_from_slice(&ad[i * ca * hw..(i + 1) * ca * hw]);
                od[oa + ca * hw..oa + (ca + cb) * hw]
                    .copy_from_slice(&bd[i * cb * hw..(i + 1) * cb * hw]);
            }
        }
        self.binary(Op::ConcatChan, a, b, out)
    }

    pub fn reshape(&mut self, a: Value, shape: &[usize]) -> Value {
        let v = self.value(a).clone().reshaped(shape);
        self.unary(Op::Reshape, a, v)
    }

    /// Row gather from a `[V, D]` table, producing `[indices.len(), D]`.
    pub fn gather_rows(&mut self, table: Value, indices: Vec<usize>) -> Value {
        let ts = self.value(table).shape().to_vec();
        assert_eq!(ts.len(), 2);
        let d = ts[1];
        let mut out = Tensor::zeros(&[indices.len(), d]);
        {
            let td = self.value(table).data();
            let od = out.data_mut();
            for (i, &ix) in indices.iter().enumerate() {
                assert!(ix < ts[0], "gather index {} out of range {}", ix, ts[0]);
                od[i * d..(i + 1) * d].copy_from_slice(&td[ix * d..(ix + 1) * d]);
            }
        }
        let ng = self.nodes[table.0].needs_grad;
        self.push(Op::Gather { indices }, vec![table.0], out, ng)
    }

    pub fn mean_all(&mut self, a: Value) -> Value {
        let v = Tensor::scalar(self.value(a).mean());
        self.unary(Op::MeanAll, a, v)
    }

    /// Mean squared error between two same-shape tensors, as a scalar node.
    pub fn mse(&mut self, a: Value, b: Value) -> Value {
        let v = Tensor::scalar(self.value(a).mse(self.value(b)));
        self.binary(Op::Mse, a, b, v)
    }

    /// Reverse pass from scalar node `loss`. Returns per-node gradients.
    pub fn backward(&mut self, loss: Value) -> Grads {
        assert_eq!(self.nodes[loss.0].value.numel(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Grads { grads }
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let ins = &node.inputs;
        let needs = |i: usize| self.nodes[ins[i]].needs_grad;
        let mut acc = |slot: usize, t: Tensor, grads: &mut [Option<Tensor>]| {
            let target = &mut grads[ins[slot]];
            match target {
                Some(existing) => {
                    let sum = existing.add(&t);
                    *existing = sum;
                }
                None => *target = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                if needs(0) {
                    acc(0, g.clone(), grads);
                }
                if needs(1) {
                    acc(1, g.clone(), grads);
                }
            }
            Op::Sub => {
                if needs(0) {
                    acc(0, g.clone(), grads);
                }
                if needs(1) {
                    acc(1, g.scale(-1.0), grads);
                }
            }
            Op::Mul => {
                if needs(0) {
                    acc(0, g.zip(&self.nodes[ins[1]].value, |gv, b| gv * b), grads);
                }
                if needs(1) {
                    acc(1, g.zip(&self.nodes[ins[0]].value, |gv, a| gv * a), grads);
                }
            }
            Op::Scale(s) => {
                if needs(0) {
                    acc(0, g.scale(*s), grads);
                }
            }
            Op::Silu => {
                if needs(0) {
                    let x = &self.nodes[ins[0]].value;
                    acc(
                        0,
                        g.zip(x, |gv, xv| {
                            let s = sigmoid(xv);
                            gv * s * (1.0 + xv * (1.0 - s))
                        }),
                        grads,
                    );
                }
            }
            Op::Relu => {
                if needs(0) {
                    let x = &self.nodes[ins[0]].value;
                    acc(0, g.zip(x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }), grads);
                }
            }
            Op::Matmul => {
                let a = &self.nodes[ins[0]].value;
                let b = &self.nodes[ins[1]].value;
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                if needs(0) {
                    let mut da = Tensor::zeros(&[m, k]);
                    matmul_abt_into(da.data_mut(), g.data(), b.data(), m, n, k);
                    acc(0, da, grads);
                }
                if needs(1) {
                    let mut db = Tensor::zeros(&[k, n]);
                    matmul_atb_into(db.data_mut(), a.data(), g.data(), m, k, n);
                    acc(1, db, grads);
                }
            }
            Op::Bmm => {
                let a = &self.nodes[ins[0]].value;
                let b = &self.nodes[ins[1]].value;
                let (bsz, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
                let n = b.shape()[2];
                if needs(0) {
                    let mut da = Tensor::zeros(&[bsz, m, k]);
                    for i in 0..bsz {
                        matmul_abt_into(
                            &mut da.data_mut()[i * m * k..(i + 1) * m * k],
                            &g.data()[i * m * n..(i + 1) * m * n],
                            &b.data()[i * k * n..(i + 1) * k * n],
                            m,
                            n,
                            k,
                        );
                    }
                    acc(0, da, grads);
                }
                if needs(1) {
                    let mut db = Tensor::zeros(&[bsz, k, n]);
                    for i in 0..bsz {
                        matmul_atb_into(
                            &mut db.data_mut()[i * k * n..(i + 1) * k * n],
                            &a.data()[i * m * k..(i + 1) * m * k],
                            &g.data()[i * m * n..(i + 1) * m * n],
                            m,
                            k,
                            n,
                        );
                    }
                    acc(1, db, grads);
                }
            }
            Op::Transpose12 => {
                if needs(0) {
                    let s = node.value.shape();
                    acc(0, transpose12(g, s[0], s[1], s[2]), grads);
                }
            }
            Op::Conv2d { stride, pad, pad_mode } => {
                let x = &self.nodes[ins[0]].value;
                let w = &self.nodes[ins[1]].value;
                let (dx, dw) =
                    conv2d_backward(x, w, g, *stride, *pad, *pad_mode, needs(0), needs(1));
                if let Some(dx) = dx {
                    acc(0, dx, grads);
                }
                if let Some(dw) = dw {
                    acc(1, dw, grads);
                }
            }
            Op::GroupNorm { groups, eps } => {
                let x = &self.nodes[ins[0]].value;
                let gamma = &self.nodes[ins[1]].value;
                let (dx, dgamma, dbeta) = group_norm_backward(x, gamma, g, *groups, *eps);
                if needs(0) {
                    acc(0, dx, grads);
                }
                if needs(1) {
                    acc(1, dgamma, grads);
                }
                if needs(2) {
                    acc(2, dbeta, grads);
                }
            }
            Op::BiasAddChan => {
                if needs(0) {
                    acc(0, g.clone(), grads);
                }
                if needs(1) {
                    let s = node.value.shape();
                    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                    let mut db = Tensor::zeros(&[c]);
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            db.data_mut()[ci] += g.data()[base..base + hw].iter().sum::<f64>();
                        }
                    }
                    acc(1, db, grads);
                }
            }
            Op::AddPerSampleChan => {
                if needs(0) {
                    acc(0, g.clone(), grads);
                }
                if needs(1) {
                    let s = node.value.shape();
                    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                    let mut de = Tensor::zeros(&[n, c]);
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            de.data_mut()[ni * c + ci] =
                                g.data()[base..base + hw].iter().sum::<f64>();
                        }
                    }
                    acc(1, de, grads);
                }
            }
            Op::BiasAddRow => {
                if needs(0) {
                    acc(0, g.clone(), grads);
                }
                if needs(1) {
                    let s = node.value.shape();
                    let (n, d) = (s[0], s[1]);
                    let mut db = Tensor::zeros(&[d]);
                    for ni in 0..n {
                        for di in 0..d {
                            db.data_mut()[di] += g.data()[ni * d + di];
                        }
                    }
                    acc(1, db, grads);
                }
            }
            Op::SoftmaxLast => {
                if needs(0) {
                    let y = &node.value;
                    let cols = *y.shape().last().unwrap();
                    let rows = y.numel() / cols;
                    let mut dx = Tensor::zeros(y.shape());
                    for r in 0..rows {
                        let yr = &y.data()[r * cols..(r + 1) * cols];
                        let gr = &g.data()[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        let dr = &mut dx.data_mut()[r * cols..(r + 1) * cols];
                        for i in 0..cols {
                            dr[i] = yr[i] * (gr[i] - dot);
                        }
                    }
                    acc(0, dx, grads);
                }
            }
            Op::UpsampleNearest2x => {
                if needs(0) {
                    let s = self.nodes[ins[0]].value.shape();
                    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let mut dx = Tensor::zeros(&[n, c, h, w]);
                    for nc in 0..n * c {
                        let db = nc * h * w;
                        let gb = nc * 4 * h * w;
                        for y in 0..2 * h {
                            for x in 0..2 * w {
                                dx.data_mut()[db + (y / 2) * w + x / 2] +=
                                    g.data()[gb + y * 2 * w + x];
                            }
                        }
                    }
                    acc(0, dx, grads);
                }
            }
            Op::ConcatChan => {
                let sa = self.nodes[ins[0]].value.shape().to_vec();
                let sb = self.nodes[ins[1]].value.shape().to_vec();
                let (n, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
                if needs(0) {
                    let mut da = Tensor::zeros(&sa);
                    for i in 0..n {
                        let oa = i * (ca + cb) * hw;
                        da.data_mut()[i * ca * hw..(i + 1) * ca * hw]
                            .copy_from_slice(&g.data()[oa..oa + ca * hw]);
                    }
                    acc(0, da, grads);
                }
                if needs(1) {
                    let mut db = Tensor::zeros(&sb);
                    for i in 0..n {
                        let oa = i * (ca + cb) * hw;
                        db.data_mut()[i * cb * hw..(i + 1) * cb * hw]
                            .copy_from_slice(&g.data()[oa + ca * hw..oa + (ca + cb) * hw]);
                    }
                    acc(1, db, grads);
                }
            }
            Op::Reshape => {
                if needs(0) {
                    let s = self.nodes[ins[0]].value.shape().to_vec();
                    acc(0, g.clone().reshaped(&s), grads);
                }
            }
            Op::Gather { indices } => {
                if needs(0) {
                    let ts = self.nodes[ins[0]].value.shape().to_vec();
                    let d = ts[1];
                    let mut dt = Tensor::zeros(&ts);
                    for (i, &ix) in indices.iter().enumerate() {
                        for j in 0..d {
                            dt.data_mut()[ix * d + j] += g.data()[i * d + j];
                        }
                    }
                    acc(0, dt, grads);
                }
            }
            Op::MeanAll => {
                if needs(0) {
                    let x = &self.nodes[ins[0]].value;
                    let gv = g.data()[0] / x.numel() as f64;
                    acc(0, Tensor::full(x.shape(), gv), grads);
                }
            }
            Op::Mse => {
                let a = &self.nodes[ins[0]].value;
                let b = &self.nodes[ins[1]].value;
                let scale = 2.0 * g.data()[0] / a.numel() as f64;
                if needs(0) {
                    acc(0, a.zip(b, |av, bv| scale * (av - bv)), grads);
                }
                if needs(1) {
                    acc(1, a.zip(b, |av, bv| -scale * (av - bv)), grads);
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn transpose12(t: &Tensor, b: usize, m: usize, n: usize) -> Tensor {
    let mut out = Tensor::zeros(&[b, n, m]);
    let src = t.data();
    let dst = out.data_mut();
    for i in 0..b {
        for r in 0..m {
            for c in 0..n {
                dst[i * m * n + c * m + r] = src[i * m * n + r * n + c];
            }
        }
    }
    out
}

/// `out += a[m,k] * b[k,n]`, row-parallel.
pub fn matmul_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let body = |(i, out_row): (usize, &mut [f64])| {
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    #[cfg(feature = "parallel")]
    {
        if m * n * k >= 1 << 16 {
            out.par_chunks_mut(n).enumerate().for_each(body);
            return;
        }
    }
    out.chunks_mut(n).enumerate().for_each(body);
}

/// `out[m,k] += a[m,n] * b[k,n]^T` (dot products along contiguous rows).
fn matmul_abt_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    debug_assert_eq!(out.len(), m * k);
    let body = |(i, out_row): (usize, &mut [f64])| {
        let arow = &a[i * n..(i + 1) * n];
        for (j, o) in out_row.iter_mut().enumerate() {
            let brow = &b[j * n..(j + 1) * n];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            *o += s;
        }
    };
    #[cfg(feature = "parallel")]
    {
        if m * n * k >= 1 << 16 {
            out.par_chunks_mut(k).enumerate().for_each(body);
            return;
        }
    }
    out.chunks_mut(k).enumerate().for_each(body);
}

/// `out[k,n] += a[m,k]^T * b[m,n]`.
fn matmul_atb_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), k * n);
    for l in 0..m {
        let brow = &b[l * n..(l + 1) * n];
        for i in 0..k {
            let av = a[l * k + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Sequential `out += a * b`; used inside per-sample parallel regions.
fn matmul_seq_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Sequential `out[m,k] += a[m,n] * b[k,n]^T`.
fn matmul_abt_seq_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let out_row = &mut out[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            let brow = &b[j * n..(j + 1) * n];
            let mut s = 0.0;
            for (xv, yv) in arow.iter().zip(brow) {
                s += xv * yv;
            }
            *o += s;
        }
    }
}

fn conv_out_dim(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

fn wrap(i: isize, n: usize) -> usize {
    let n = n as isize;
    (((i % n) + n) % n) as usize
}

/// im2col for one sample; columns laid out `[Cin*kh*kw, Ho*Wo]`.
fn im2col(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    pad_mode: PadMode,
    cols: &mut [f64],
) {
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    debug_assert_eq!(cols.len(), cin * kh * kw * ho * wo);
    let mut row = 0;
    for c in 0..cin {
        for dy in 0..kh {
            for dx in 0..kw {
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                row += 1;
                let mut idx = 0;
                for oy in 0..ho {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    for ox in 0..wo {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        dst[idx] = match pad_mode {
                            PadMode::Zeros => {
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                    0.0
                                } else {
                                    x[c * h * w + iy as usize * w + ix as usize]
                                }
                            }
                            PadMode::Circular => x[c * h * w + wrap(iy, h) * w + wrap(ix, w)],
                        };
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// Scatter-add of column gradients back onto the input image.
#[allow(clippy::too_many_arguments)]
fn col2im_add(
    dcols: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    pad_mode: PadMode,
    dx: &mut [f64],
) {
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    let mut row = 0;
    for c in 0..cin {
        for dy in 0..kh {
            for dx_k in 0..kw {
                let src = &dcols[row * ho * wo..(row + 1) * ho * wo];
                row += 1;
                let mut idx = 0;
                for oy in 0..ho {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    for ox in 0..wo {
                        let ix = (ox * stride + dx_k) as isize - pad as isize;
                        match pad_mode {
                            PadMode::Zeros => {
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    dx[c * h * w + iy as usize * w + ix as usize] += src[idx];
                                }
                            }
                            PadMode::Circular => {
                                dx[c * h * w + wrap(iy, h) * w + wrap(ix, w)] += src[idx];
                            }
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
}

fn conv2d_forward(x: &Tensor, w: &Tensor, stride: usize, pad: usize, pad_mode: PadMode) -> Tensor {
    let xs = x.shape();
    let ws = w.shape();
    assert_eq!(xs.len(), 4, "conv input must be [N, C, H, W]");
    assert_eq!(ws.len(), 4, "conv weight must be [O, C, kh, kw]");
    assert_eq!(xs[1], ws[1], "conv channel mismatch: {:?} vs {:?}", xs, ws);
    let (n, cin, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(wdt, kw, stride, pad);
    let ck = cin * kh * kw;
    let mut out = Tensor::zeros(&[n, cout, ho, wo]);
    let xd = x.data();
    let body = |(ni, out_slice): (usize, &mut [f64])| {
        let mut cols = vec![0.0; ck * ho * wo];
        im2col(
            &xd[ni * cin * h * wdt..(ni + 1) * cin * h * wdt],
            cin,
            h,
            wdt,
            kh,
            kw,
            stride,
            pad,
            pad_mode,
            &mut cols,
        );
        matmul_seq_into(out_slice, w.data(), &cols, cout, ck, ho * wo);
    };
    #[cfg(feature = "parallel")]
    {
        out.data_mut().par_chunks_mut(cout * ho * wo).enumerate().for_each(body);
        return out;
    }
    #[allow(unreachable_code)]
    {
        out.data_mut().chunks_mut(cout * ho * wo).enumerate().for_each(body);
        out
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    stride: usize,
    pad: usize,
    pad_mode: PadMode,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let xs = x.shape();
    let ws = w.shape();
    let (n, cin, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(wdt, kw, stride, pad);
    let ck = cin * kh * kw;
    let mut dx = if need_dx { Some(Tensor::zeros(&[n, cin, h, wdt])) } else { None };
    let mut dw = if need_dw { Some(Tensor::zeros(&[cout, cin, kh, kw])) } else { None };
    // Per-sample work is independent; dW partials are reduced afterwards in
    // index order so the result does not depend on scheduling.
    let per_sample = |ni: usize, dx_slice: Option<&mut [f64]>| -> Option<Vec<f64>> {
        let gslice = &gy.data()[ni * cout * ho * wo..(ni + 1) * cout * ho * wo];
        let dw_part = if need_dw {
            let mut cols = vec![0.0; ck * ho * wo];
            im2col(
                &x.data()[ni * cin * h * wdt..(ni + 1) * cin * h * wdt],
                cin,
                h,
                wdt,
                kh,
                kw,
                stride,
                pad,
                pad_mode,
                &mut cols,
            );
            let mut dwp = vec![0.0; cout * ck];
            matmul_abt_seq_into(&mut dwp, gslice, &cols, cout, ho * wo, ck);
            Some(dwp)
        } else {
            None
        };
        if let Some(dst) = dx_slice {
            let mut dcols = vec![0.0; ck * ho * wo];
            matmul_atb_into(&mut dcols, w.data(), gslice, cout, ck, ho * wo);
            col2im_add(&dcols, cin, h, wdt, kh, kw, stride, pad, pad_mode, dst);
        }
        dw_part
    };
    let dw_parts: Vec<Option<Vec<f64>>>;
    #[cfg(feature = "parallel")]
    {
        match dx.as_mut() {
            Some(dxt) => {
                dw_parts = dxt
                    .data_mut()
                    .par_chunks_mut(cin * h * wdt)
                    .enumerate()
                    .map(|(ni, slice)| per_sample(ni, Some(slice)))
                    .collect();
            }
            None => {
                dw_parts = (0..n).into_par_iter().map(|ni| per_sample(ni, None)).collect();
            }
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let mut parts = Vec::with_capacity(n);
        for ni in 0..n {
            let slice = dx
                .as_mut()
                .map(|dxt| &mut dxt.data_mut()[ni * cin * h * wdt..(ni + 1) * cin * h * wdt]);
            parts.push(per_sample(ni, slice));
        }
        dw_parts = parts;
    }
    if let Some(dwt) = dw.as_mut() {
        for part in dw_parts.into_iter().flatten() {
            for (o, v) in dwt.data_mut().iter_mut().zip(part) {
                *o += v;
            }
        }
    }
    (dx, dw)
}

fn group_norm_forward(x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize, eps: f64) -> Tensor {
    let s = x.shape();
    assert_eq!(s.len(), 4);
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    assert_eq!(c % groups, 0, "channels {} not divisible by groups {}", c, groups);
    assert_eq!(gamma.shape(), &[c]);
    assert_eq!(beta.shape(), &[c]);
    let cg = c / groups;
    let gsize = (cg * hw) as f64;
    let mut out = Tensor::zeros(s);
    for ni in 0..n {
        for gi in 0..groups {
            let base = ni * c * hw + gi * cg * hw;
            let xg = &x.data()[base..base + cg * hw];
            let mean = xg.iter().sum::<f64>() / gsize;
            let var = xg.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / gsize;
            let rstd = 1.0 / (var + eps).sqrt();
            for ci in 0..cg {
                let ch = gi * cg + ci;
                let (gm, bt) = (gamma.data()[ch], beta.data()[ch]);
                let xrow = &x.data()[base + ci * hw..base + (ci + 1) * hw];
                let orow = &mut out.data_mut()[base + ci * hw..base + (ci + 1) * hw];
                for (o, &xv) in orow.iter_mut().zip(xrow) {
                    *o = (xv - mean) * rstd * gm + bt;
                }
            }
        }
    }
    out
}

fn group_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    gy: &Tensor,
    groups: usize,
    eps: f64,
) -> (Tensor, Tensor, Tensor) {
    let s = x.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let cg = c / groups;
    let gsize = (cg * hw) as f64;
    let mut dx = Tensor::zeros(s);
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for ni in 0..n {
        for gi in 0..groups {
            let base = ni * c * hw + gi * cg * hw;
            let xg = &x.data()[base..base + cg * hw];
            let mean = xg.iter().sum::<f64>() / gsize;
            let var = xg.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / gsize;
            let rstd = 1.0 / (var + eps).sqrt();
            // xhat = (x - mean) * rstd; dy flows through gamma.
            // dxhat = gy * gamma; dx = rstd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for ci in 0..cg {
                let ch = gi * cg + ci;
                let gm = gamma.data()[ch];
                for j in 0..hw {
                    let idx = base + ci * hw + j;
                    let xhat = (x.data()[idx] - mean) * rstd;
                    let dxhat = gy.data()[idx] * gm;
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                    dgamma.data_mut()[ch] += gy.data()[idx] * xhat;
                    dbeta.data_mut()[ch] += gy.data()[idx];
                }
            }
            let m_dxhat = sum_dxhat / gsize;
            let m_dxhat_xhat = sum_dxhat_xhat / gsize;
            for ci in 0..cg {
                let ch = gi * cg + ci;
                let gm = gamma.data()[ch];
                for j in 0..hw {
                    let idx = base + ci * hw + j;
                    let xhat = (x.data()[idx] - mean) * rstd;
                    let dxhat = gy.data()[idx] * gm;
                    dx.data_mut()[idx] = rstd * (dxhat - m_dxhat - xhat * m_dxhat_xhat);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}
