use std::sync::Arc;

use super::conv;
use super::kernels::{self, dot, gemm_nn, gemm_nt, gemm_tn};
use super::tape::{CustomOp, Node, Tape, Var};
use super::{check_perm, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Unary {
    Relu,
    Tanh,
    Sigmoid,
    Silu,
    Exp,
}

pub(crate) enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    BatchMatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddBroadcast { x: usize, y: usize },
    Scale { x: usize, c: f64 },
    Unary { x: usize, kind: Unary },
    Softmax { x: usize },
    LogSoftmax { x: usize },
    LogSumExp { x: usize, axis: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Reshape { x: usize },
    Permute { x: usize, perm: Vec<usize> },
    Concat { xs: Vec<usize>, axis: usize },
    Narrow { x: usize, axis: usize, start: usize },
    GatherRows { x: usize, rows: Arc<Vec<usize>> },
    Sum { x: usize },
    Mean { x: usize },
    ConvSpatial { x: usize, w: usize, b: usize },
    ConvTemporal { x: usize, w: usize, b: usize, windows: Arc<Vec<Option<usize>>> },
    DepthwiseConv1d { x: usize, w: usize, b: usize, pad_left: usize },
    MaxPool2d { x: usize, argmax: Vec<usize> },
    Custom { inputs: Vec<usize>, op: Box<dyn CustomOp> },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "bmm",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::AddBroadcast { .. } => "add_broadcast",
            Op::Scale { .. } => "scale",
            Op::Unary { .. } => "unary",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::LogSumExp { .. } => "logsumexp",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::GatherRows { .. } => "gather_rows",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::ConvSpatial { .. } => "conv_spatial",
            Op::ConvTemporal { .. } => "conv_temporal",
            Op::DepthwiseConv1d { .. } => "depthwise_conv1d",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::Custom { op, .. } => op.name(),
        }
    }

    pub(crate) fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b }
            | Op::BatchMatMul { a, b }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b } => vec![*a, *b],
            Op::AddBroadcast { x, y } => vec![*x, *y],
            Op::Scale { x, .. }
            | Op::Unary { x, .. }
            | Op::Softmax { x }
            | Op::LogSoftmax { x }
            | Op::LogSumExp { x, .. }
            | Op::Reshape { x }
            | Op::Permute { x, .. }
            | Op::Narrow { x, .. }
            | Op::GatherRows { x, .. }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::MaxPool2d { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Concat { xs, .. } => xs.clone(),
            Op::ConvSpatial { x, w, b }
            | Op::ConvTemporal { x, w, b, .. }
            | Op::DepthwiseConv1d { x, w, b, .. } => vec![*x, *w, *b],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }

    pub(crate) fn backward(
        &self,
        nodes: &[Node],
        out: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let val = |i: usize| -> &Tensor { &nodes[i].value };
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let da = needs[0].then(|| {
                    let mut d = vec![0.0; m * k];
                    gemm_nt(g, bv.data(), &mut d, m, n, k);
                    d
                });
                let db = needs[1].then(|| {
                    let mut d = vec![0.0; k * n];
                    gemm_tn(av.data(), g, &mut d, m, k, n);
                    d
                });
                vec![da, db]
            }
            Op::BatchMatMul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let (bs, m, k, n) = (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2]);
                let da = needs[0].then(|| {
                    let mut d = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        gemm_nt(
                            &g[i * m * n..(i + 1) * m * n],
                            &bv.data()[i * k * n..(i + 1) * k * n],
                            &mut d[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    d
                });
                let db = needs[1].then(|| {
                    let mut d = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        gemm_tn(
                            &av.data()[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut d[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    d
                });
                vec![da, db]
            }
            Op::Add { .. } => vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())],
            Op::Sub { .. } => vec![
                needs[0].then(|| g.to_vec()),
                needs[1].then(|| g.iter().map(|x| -x).collect()),
            ],
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                vec![
                    needs[0].then(|| g.iter().zip(bv.data()).map(|(g, b)| g * b).collect()),
                    needs[1].then(|| g.iter().zip(av.data()).map(|(g, a)| g * a).collect()),
                ]
            }
            Op::AddBroadcast { y, .. } => {
                let ylen = val(*y).len();
                let dy = needs[1].then(|| {
                    let mut d = vec![0.0; ylen];
                    for chunk in g.chunks_exact(ylen) {
                        d.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                    }
                    d
                });
                vec![needs[0].then(|| g.to_vec()), dy]
            }
            Op::Scale { c, .. } => vec![Some(g.iter().map(|x| x * c).collect())],
            Op::Unary { x, kind } => {
                let xv = val(*x).data();
                let y = out.data();
                let d: Vec<f64> = match kind {
                    Unary::Relu => g.iter().zip(xv).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
                    Unary::Tanh => g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
                    Unary::Sigmoid => g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                    Unary::Silu => g
                        .iter()
                        .zip(xv)
                        .map(|(g, &x)| {
                            let s = sigmoid(x);
                            g * s * (1.0 + x * (1.0 - s))
                        })
                        .collect(),
                    Unary::Exp => g.iter().zip(y).map(|(g, y)| g * y).collect(),
                };
                vec![Some(d)]
            }
            Op::Softmax { .. } => {
                let n = *out.shape().last().unwrap();
                let mut d = vec![0.0; g.len()];
                for ((dr, yr), gr) in d.chunks_exact_mut(n).zip(out.data().chunks_exact(n)).zip(g.chunks_exact(n)) {
                    let s = dot(gr, yr);
                    for ((di, yi), gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *di = yi * (gi - s);
                    }
                }
                vec![Some(d)]
            }
            Op::LogSoftmax { .. } => {
                let n = *out.shape().last().unwrap();
                let mut d = vec![0.0; g.len()];
                for ((dr, yr), gr) in d.chunks_exact_mut(n).zip(out.data().chunks_exact(n)).zip(g.chunks_exact(n)) {
                    let s: f64 = gr.iter().sum();
                    for ((di, yi), gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *di = gi - yi.exp() * s;
                    }
                }
                vec![Some(d)]
            }
            Op::LogSumExp { x, axis } => {
                let xv = val(*x);
                let (outer, n, inner) = split_axis(xv.shape(), *axis);
                let mut d = vec![0.0; xv.len()];
                for o in 0..outer {
                    for i in 0..n {
                        for j in 0..inner {
                            let src = (o * n + i) * inner + j;
                            let r = o * inner + j;
                            d[src] = g[r] * (xv.data()[src] - out.data()[r]).exp();
                        }
                    }
                }
                vec![Some(d)]
            }
            Op::LayerNorm { gain, xhat, rstd, .. } => {
                let gv = val(*gain).data();
                let dim = gv.len();
                let dx = needs[0].then(|| {
                    let mut d = vec![0.0; g.len()];
                    let mut dxhat = vec![0.0; dim];
                    for (r, ((dr, gr), xr)) in d
                        .chunks_exact_mut(dim)
                        .zip(g.chunks_exact(dim))
                        .zip(xhat.chunks_exact(dim))
                        .enumerate()
                    {
                        for k in 0..dim {
                            dxhat[k] = gr[k] * gv[k];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / dim as f64;
                        let mean_dx = dot(&dxhat, xr) / dim as f64;
                        for k in 0..dim {
                            dr[k] = rstd[r] * (dxhat[k] - mean_d - xr[k] * mean_dx);
                        }
                    }
                    d
                });
                let dg = needs[1].then(|| {
                    let mut d = vec![0.0; dim];
                    for (gr, xr) in g.chunks_exact(dim).zip(xhat.chunks_exact(dim)) {
                        for k in 0..dim {
                            d[k] += gr[k] * xr[k];
                        }
                    }
                    d
                });
                let db = needs[2].then(|| {
                    let mut d = vec![0.0; dim];
                    for gr in g.chunks_exact(dim) {
                        d.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                    d
                });
                vec![dx, dg, db]
            }
            Op::Reshape { .. } => vec![Some(g.to_vec())],
            Op::Permute { perm, .. } => {
                let inv = kernels::invert_perm(perm);
                vec![Some(kernels::permute(g, out.shape(), &inv))]
            }
            Op::Concat { xs, axis } => {
                let outer: usize = out.shape()[..*axis].iter().product();
                let inner: usize = out.shape()[axis + 1..].iter().product();
                let widths: Vec<usize> = xs.iter().map(|&i| val(i).shape()[*axis] * inner).collect();
                let total: usize = widths.iter().sum();
                let mut grads: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(w * outer)).collect();
                for o in 0..outer {
                    let mut off = o * total;
                    for (gr, &w) in grads.iter_mut().zip(&widths) {
                        gr.extend_from_slice(&g[off..off + w]);
                        off += w;
                    }
                }
                grads.into_iter().zip(needs).map(|(d, &n)| n.then_some(d)).collect()
            }
            Op::Narrow { x, axis, start } => {
                let xv = val(*x);
                let (outer, n, inner) = split_axis(xv.shape(), *axis);
                let len = out.shape()[*axis];
                let mut d = vec![0.0; xv.len()];
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = (o * n + start) * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                vec![Some(d)]
            }
            Op::GatherRows { x, rows } => {
                let xv = val(*x);
                let width = xv.len() / xv.shape()[0].max(1);
                let mut d = vec![0.0; xv.len()];
                for (k, &r) in rows.iter().enumerate() {
                    let src = &g[k * width..(k + 1) * width];
                    d[r * width..(r + 1) * width].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
                vec![Some(d)]
            }
            Op::Sum { x } => vec![Some(vec![g[0]; val(*x).len()])],
            Op::Mean { x } => {
                let n = val(*x).len();
                vec![Some(vec![g[0] / n as f64; n])]
            }
            Op::ConvSpatial { x, w, .. } => {
                let (xv, wv) = (val(*x), val(*w));
                let (xs, ws) = (xv.shape(), wv.shape());
                let dims = conv::SpatialDims {
                    frames: xs[0],
                    cin: xs[1],
                    h: xs[2],
                    w: xs[3],
                    k: ws[0],
                    cout: ws[3],
                };
                conv::spatial_backward(xv.data(), wv.data(), g, dims, needs)
            }
            Op::ConvTemporal { x, w, windows, .. } => {
                let (xv, wv) = (val(*x), val(*w));
                let (xs, ws) = (xv.shape(), wv.shape());
                let dims = conv::TemporalDims {
                    cin: xs[1],
                    pix: xs[2] * xs[3],
                    k: ws[0],
                    cout: ws[2],
                    windows,
                };
                conv::temporal_backward(xv.data(), wv.data(), g, &dims, needs)
            }
            Op::DepthwiseConv1d { x, w, pad_left, .. } => {
                let (xv, wv) = (val(*x), val(*w));
                let (t_len, c) = (xv.shape()[0], xv.shape()[1]);
                let k = wv.shape()[0];
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; wv.len()];
                let mut db = vec![0.0; c];
                for t in 0..t_len {
                    let gr = &g[t * c..(t + 1) * c];
                    db.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    for tap in 0..k {
                        let Some(src) = (t + tap).checked_sub(*pad_left).filter(|&s| s < t_len) else {
                            continue;
                        };
                        for ch in 0..c {
                            dx[src * c + ch] += gr[ch] * wv.data()[tap * c + ch];
                            dw[tap * c + ch] += gr[ch] * xv.data()[src * c + ch];
                        }
                    }
                }
                vec![needs[0].then_some(dx), needs[1].then_some(dw), needs[2].then_some(db)]
            }
            Op::MaxPool2d { x, argmax } => {
                let mut d = vec![0.0; val(*x).len()];
                for (gi, &src) in g.iter().zip(argmax) {
                    d[src] += gi;
                }
                vec![Some(d)]
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&i| val(i)).collect();
                op.backward(&ins, out, g, needs)
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

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softmax_rows(data: &mut [f64], n: usize) {
    for row in data.chunks_exact_mut(n) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        let inv = 1.0 / s;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

impl<'t> Var<'t> {
    fn same_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars recorded on different tapes");
    }

    fn unary_node(&self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(Arc::new(value), op, rg)
    }

    fn binary_node(&self, other: &Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        self.same_tape(other);
        let rg = self.tape.any_requires_grad(&[self.id, other.id]);
        self.tape.push(Arc::new(value), op, rg)
    }

    /// `[m×k] · [k×n]`
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::dim("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = vec![0.0; m * n];
        gemm_nn(a.data(), b.data(), &mut c, m, k, n);
        Ok(self.binary_node(other, Tensor { shape: vec![m, n], data: c }, Op::MatMul { a: self.id, b: other.id }))
    }

    /// Batched `[B×m×k] · [B×k×n]`.
    pub fn bmm(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] || a.shape()[2] != b.shape()[1] {
            return Err(Error::dim("bmm", a.shape(), b.shape()));
        }
        let (bs, m, k, n) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
        let mut c = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm_nn(
                &a.data()[i * m * k..(i + 1) * m * k],
                &b.data()[i * k * n..(i + 1) * k * n],
                &mut c[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        Ok(self.binary_node(other, Tensor { shape: vec![bs, m, n], data: c }, Op::BatchMatMul { a: self.id, b: other.id }))
    }

    fn zip_with(&self, other: &Var<'t>, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::dim(op, a.shape(), b.shape()));
        }
        Ok(Tensor {
            shape: a.shape().to_vec(),
            data: a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        })
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_with(other, "add", |a, b| a + b)?;
        Ok(self.binary_node(other, v, Op::Add { a: self.id, b: other.id }))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_with(other, "sub", |a, b| a - b)?;
        Ok(self.binary_node(other, v, Op::Sub { a: self.id, b: other.id }))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_with(other, "mul", |a, b| a * b)?;
        Ok(self.binary_node(other, v, Op::Mul { a: self.id, b: other.id }))
    }

    /// `self + y` where `y`'s shape is a trailing suffix of `self`'s shape.
    pub fn add_broadcast(&self, y: &Var<'t>) -> Result<Var<'t>> {
        let (xv, yv) = (self.value(), y.value());
        let (xs, ys) = (xv.shape(), yv.shape());
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != *ys {
            return Err(Error::dim("add_broadcast", xs, ys));
        }
        let ylen = yv.len();
        let mut data = xv.data().to_vec();
        if ylen > 0 {
            for chunk in data.chunks_exact_mut(ylen) {
                chunk.iter_mut().zip(yv.data()).for_each(|(a, b)| *a += b);
            }
        }
        Ok(self.binary_node(y, Tensor { shape: xs.to_vec(), data }, Op::AddBroadcast { x: self.id, y: y.id }))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x * c);
        self.unary_node(v, Op::Scale { x: self.id, c })
    }

    fn unary(&self, kind: Unary) -> Var<'t> {
        let f: fn(f64) -> f64 = match kind {
            Unary::Relu => |x| x.max(0.0),
            Unary::Tanh => f64::tanh,
            Unary::Sigmoid => sigmoid,
            Unary::Silu => |x| x * sigmoid(x),
            Unary::Exp => f64::exp,
        };
        let v = self.value().map(f);
        self.unary_node(v, Op::Unary { x: self.id, kind })
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Unary::Relu)
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Unary::Tanh)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Unary::Sigmoid)
    }

    /// `x·σ(x)` (swish).
    pub fn silu(&self) -> Var<'t> {
        self.unary(Unary::Silu)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Unary::Exp)
    }

    fn last_axis(&self, op: &'static str) -> Result<(Arc<Tensor>, usize)> {
        let v = self.value();
        match v.shape().last() {
            Some(&n) if n > 0 => Ok((v, n)),
            _ => Err(Error::domain(op, format!("empty last axis in shape {:?}", v.shape()))),
        }
    }

    /// Softmax over the last axis. `-inf` entries receive exactly zero mass.
    pub fn softmax(&self) -> Result<Var<'t>> {
        let (v, n) = self.last_axis("softmax")?;
        let mut data = v.data().to_vec();
        softmax_rows(&mut data, n);
        Ok(self.unary_node(Tensor { shape: v.shape().to_vec(), data }, Op::Softmax { x: self.id }))
    }

    pub fn log_softmax(&self) -> Result<Var<'t>> {
        let (v, n) = self.last_axis("log_softmax")?;
        let mut data = v.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            let lse = super::logsumexp_slice(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        Ok(self.unary_node(Tensor { shape: v.shape().to_vec(), data }, Op::LogSoftmax { x: self.id }))
    }

    /// Max-shifted `ln Σ exp` along `axis`; the axis is removed from the output shape.
    pub fn logsumexp(&self, axis: usize) -> Result<Var<'t>> {
        let v = self.value();
        if axis >= v.rank() {
            return Err(Error::domain("logsumexp", format!("axis {axis} out of range for shape {:?}", v.shape())));
        }
        let (outer, n, inner) = split_axis(v.shape(), axis);
        if n == 0 {
            return Err(Error::domain("logsumexp", "empty axis extent"));
        }
        let mut data = Vec::with_capacity(outer * inner);
        let mut buf = vec![0.0; n];
        for o in 0..outer {
            for j in 0..inner {
                for (i, b) in buf.iter_mut().enumerate() {
                    *b = v.data()[(o * n + i) * inner + j];
                }
                data.push(super::logsumexp_slice(&buf));
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        Ok(self.unary_node(Tensor { shape, data }, Op::LogSumExp { x: self.id, axis }))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Var<'t>, bias: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        let v = self.value();
        let (gv, bv) = (gain.value(), bias.value());
        let d = v.shape().last().copied().unwrap_or(0);
        if d == 0 {
            return Err(Error::domain("layer_norm", "normalized axis has extent 0"));
        }
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::dim("layer_norm", v.shape(), gv.shape()));
        }
        let rows = v.len() / d;
        let mut xhat = vec![0.0; v.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            let x = &v.data()[r * d..(r + 1) * d];
            let mean = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|&a| (a - mean) * (a - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for k in 0..d {
                let xh = (x[k] - mean) * rs;
                xhat[r * d + k] = xh;
                out[r * d + k] = xh * gv.data()[k] + bv.data()[k];
            }
        }
        let rg = self.tape.any_requires_grad(&[self.id, gain.id, bias.id]);
        Ok(self.tape.push(
            Arc::new(Tensor { shape: v.shape().to_vec(), data: out }),
            Op::LayerNorm { x: self.id, gain: gain.id, bias: bias.id, xhat, rstd },
            rg,
        ))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let v = self.value();
        let shape = shape.into();
        if shape.iter().product::<usize>() != v.len() {
            return Err(Error::dim("reshape", v.shape(), &shape));
        }
        Ok(self.unary_node(Tensor { shape, data: v.data().to_vec() }, Op::Reshape { x: self.id }))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        check_perm(perm, v.rank())?;
        let out = v.permute(perm)?;
        Ok(self.unary_node(out, Op::Permute { x: self.id, perm: perm.to_vec() }))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'t>> {
        let r = self.value().rank();
        if r < 2 {
            return Err(Error::domain("transpose", "rank < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value();
        if axis >= v.rank() || start + len > v.shape()[axis] {
            return Err(Error::domain(
                "narrow",
                format!("[{start}, {}) on axis {axis} of {:?}", start + len, v.shape()),
            ));
        }
        let (outer, n, inner) = split_axis(v.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * n + start) * inner;
            data.extend_from_slice(&v.data()[s..s + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        Ok(self.unary_node(Tensor { shape, data }, Op::Narrow { x: self.id, axis, start }))
    }

    /// Selects rows (entries along axis 0) by index; repeats allowed.
    pub fn gather_rows(&self, rows: impl Into<Arc<Vec<usize>>>) -> Result<Var<'t>> {
        let rows = rows.into();
        let v = self.value();
        if v.rank() == 0 {
            return Err(Error::domain("gather_rows", "scalar input"));
        }
        let r_count = v.shape()[0];
        let width = v.len().checked_div(r_count).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows.iter() {
            if r >= r_count {
                return Err(Error::domain("gather_rows", format!("row {r} out of range {r_count}")));
            }
            data.extend_from_slice(&v.data()[r * width..(r + 1) * width]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = rows.len();
        Ok(self.unary_node(Tensor { shape, data }, Op::GatherRows { x: self.id, rows }))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().sum();
        self.unary_node(Tensor::scalar(s), Op::Sum { x: self.id })
    }

    pub fn mean(&self) -> Var<'t> {
        let v = self.value();
        let m = v.sum() / v.len().max(1) as f64;
        self.unary_node(Tensor::scalar(m), Op::Mean { x: self.id })
    }

    /// Spatial `[1,k,k]` convolution, same padding, channels-first `[T,C,H,W]`.
    /// Weights `[k,k,C_in,C_out]`, bias `[C_out]`.
    pub fn conv_spatial(&self, w: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
        let (xv, wv, bv) = (self.value(), w.value(), b.value());
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 4 || ws.len() != 4 || ws[0] != ws[1] || ws[0] % 2 == 0 || ws[2] != xs[1] || bv.shape() != [ws[3]] {
            return Err(Error::dim("conv_spatial", xs, ws));
        }
        let dims = conv::SpatialDims {
            frames: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            k: ws[0],
            cout: ws[3],
        };
        let out = conv::spatial_forward(xv.data(), wv.data(), bv.data(), dims);
        let rg = self.tape.any_requires_grad(&[self.id, w.id, b.id]);
        Ok(self.tape.push(
            Arc::new(Tensor { shape: vec![xs[0], ws[3], xs[2], xs[3]], data: out }),
            Op::ConvSpatial { x: self.id, w: w.id, b: b.id },
            rg,
        ))
    }

    /// Temporal `[k,1,1]` convolution, same (zero) padding, on `[T,C,H,W]`.
    /// Weights `[k,C_in,C_out]`, bias `[C_out]`.
    pub fn conv_temporal(&self, w: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
        let (t_len, k) = (self.shape().first().copied().unwrap_or(0), w.shape().first().copied().unwrap_or(0));
        self.conv_temporal_windows(w, b, Arc::new(conv::sliding_windows(t_len, k)))
    }

    /// Temporal convolution over explicit windows: output frame `i` applies
    /// tap `j` to input frame `windows[i·k + j]`, with `None` as a zero frame.
    pub fn conv_temporal_windows(&self, w: &Var<'t>, b: &Var<'t>, windows: Arc<Vec<Option<usize>>>) -> Result<Var<'t>> {
        let (xv, wv, bv) = (self.value(), w.value(), b.value());
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 4 || ws.len() != 3 || ws[0] % 2 == 0 || ws[1] != xs[1] || bv.shape() != [ws[2]] {
            return Err(Error::dim("conv_temporal", xs, ws));
        }
        if !windows.len().is_multiple_of(ws[0]) || windows.iter().flatten().any(|&s| s >= xs[0]) {
            return Err(Error::domain("conv_temporal", format!("windows do not index {} frames in groups of {}", xs[0], ws[0])));
        }
        let dims = conv::TemporalDims {
            cin: xs[1],
            pix: xs[2] * xs[3],
            k: ws[0],
            cout: ws[2],
            windows: &windows,
        };
        let out = conv::temporal_forward(xv.data(), wv.data(), bv.data(), &dims);
        let rg = self.tape.any_requires_grad(&[self.id, w.id, b.id]);
        Ok(self.tape.push(
            Arc::new(Tensor { shape: vec![windows.len() / ws[0], ws[2], xs[2], xs[3]], data: out }),
            Op::ConvTemporal { x: self.id, w: w.id, b: b.id, windows },
            rg,
        ))
    }

    /// Per-channel 1-D convolution over time on `[T,C]` with weights `[k,C]`.
    /// `pad_left` zeros precede the sequence; the output keeps length `T`.
    pub fn depthwise_conv1d(&self, w: &Var<'t>, b: &Var<'t>, pad_left: usize) -> Result<Var<'t>> {
        let (xv, wv, bv) = (self.value(), w.value(), b.value());
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || bv.shape() != [xs[1]] || pad_left >= ws[0].max(1) {
            return Err(Error::dim("depthwise_conv1d", xs, ws));
        }
        let (t_len, c, k) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; t_len * c];
        for t in 0..t_len {
            let orow = &mut out[t * c..(t + 1) * c];
            orow.copy_from_slice(bv.data());
            for tap in 0..k {
                let Some(src) = (t + tap).checked_sub(pad_left).filter(|&s| s < t_len) else { continue };
                for ch in 0..c {
                    orow[ch] += xv.data()[src * c + ch] * wv.data()[tap * c + ch];
                }
            }
        }
        let rg = self.tape.any_requires_grad(&[self.id, w.id, b.id]);
        Ok(self.tape.push(
            Arc::new(Tensor { shape: vec![t_len, c], data: out }),
            Op::DepthwiseConv1d { x: self.id, w: w.id, b: b.id, pad_left },
            rg,
        ))
    }

    /// Non-overlapping `f×f` spatial max pooling on `[T,C,H,W]`.
    pub fn max_pool2d(&self, f: usize) -> Result<Var<'t>> {
        let v = self.value();
        let s = v.shape();
        if s.len() != 4 || f == 0 || !s[2].is_multiple_of(f) || !s[3].is_multiple_of(f) {
            return Err(Error::domain("max_pool2d", format!("factor {f} does not tile shape {s:?}")));
        }
        let (out, argmax) = conv::max_pool_forward(v.data(), s[0] * s[1], s[2], s[3], f);
        Ok(self.unary_node(Tensor { shape: vec![s[0], s[1], s[2] / f, s[3] / f], data: out }, Op::MaxPool2d { x: self.id, argmax }))
    }
}

impl Tape {
    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, xs: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = xs.first().ok_or_else(|| Error::EmptyInput("concat of zero tensors".into()))?.value();
        if axis >= first.rank() {
            return Err(Error::domain("concat", format!("axis {axis} out of range")));
        }
        let values: Vec<Arc<Tensor>> = xs.iter().map(|v| v.value()).collect();
        for v in &values {
            let ok = v.rank() == first.rank()
                && v.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::dim("concat", first.shape(), v.shape()));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let total_axis: usize = values.iter().map(|v| v.shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for v in &values {
                let w = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total_axis;
        let ids: Vec<usize> = xs.iter().map(|v| v.id).collect();
        let rg = self.any_requires_grad(&ids);
        Ok(self.push(Arc::new(Tensor { shape, data }), Op::Concat { xs: ids, axis }, rg))
    }
}
