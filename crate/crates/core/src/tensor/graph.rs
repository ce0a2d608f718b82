//! Define-by-run tape. Each op evaluates eagerly and records enough to run
//! its vector-Jacobian product in [`Graph::backward`].

use super::kernels::{self, gemm};
use super::{ParamId, ParamStore, Tensor, Unary};
use crate::error::{Error, Result};

pub const BATCH_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddPerSequence(Var, Var),
    Scale(Var, f64),
    Unary(Var, Unary),
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    BatchNorm { x: Var, inv_std: Vec<f64> },
    SliceLast { x: Var, start: usize },
    ConcatLast(Vec<Var>),
    SelectStep { x: Var, t: usize },
    StackSteps(Vec<Var>),
    Reshape(Var),
    Unfold2d { x: Var, kh: usize, kw: usize },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    CausalUnfold { x: Var, kernel: usize, dilation: usize },
    Sum(Var),
    Mse(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn grad_slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.value.numel()]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Constant => false,
            Op::Param(_) => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, &[])
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same var.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let mut t = store.get(id).clone();
        t.clear_grad();
        let v = self.push(t, Op::Param(id), &[]);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// `[.., k] x [k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.last_dim() != bv.shape()[0] {
            return Err(mismatch("matmul", av, bv));
        }
        let (m, k, n) = (av.rows(), av.last_dim(), bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]`, or with
    /// `[B, n, k]` when `transpose_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch("bmm", av, bv));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if transpose_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(mismatch("bmm", av, bv));
        }
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &av.data()[i * m * k..(i + 1) * m * k],
                false,
                &bv.data()[i * k * n..(i + 1) * k * n],
                transpose_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let t = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.push(t, Op::BatchMatMul { a, b, transpose_b }, &[a, b]))
    }

    fn broadcast_ok(a: &Tensor, b: &Tensor) -> bool {
        let (sa, sb) = (a.shape(), b.shape());
        sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb
    }

    /// Elementwise sum; `b` may be a trailing-suffix broadcast of `a`
    /// (e.g. a bias vector or a positional table).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !Self::broadcast_ok(av, bv) {
            return Err(mismatch("add", av, bv));
        }
        let n = bv.numel().max(1);
        let mut data = av.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, y) in chunk.iter_mut().zip(bv.data()) {
                *x += y;
            }
        }
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product with the same broadcast rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !Self::broadcast_ok(av, bv) {
            return Err(mismatch("mul", av, bv));
        }
        let n = bv.numel().max(1);
        let mut data = av.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, y) in chunk.iter_mut().zip(bv.data()) {
                *x *= y;
            }
        }
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("sub", av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    /// `x[b, t, :] + s[b, :]` for every step `t`.
    pub fn add_per_sequence(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        let sx = xv.shape();
        if sx.len() != 3 || sv.shape() != [sx[0], sx[2]] {
            return Err(mismatch("add_per_sequence", xv, sv));
        }
        let (b, t, f) = (sx[0], sx[1], sx[2]);
        let mut data = xv.data().to_vec();
        for i in 0..b {
            let srow = &sv.data()[i * f..(i + 1) * f];
            for j in 0..t {
                add_into(&mut data[(i * t + j) * f..(i * t + j + 1) * f], srow);
            }
        }
        let t = Tensor::new(sx.to_vec(), data)?;
        Ok(self.push(t, Op::AddPerSequence(x, s), &[x, s]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| v * c).collect())
            .expect("same shape");
        self.push(t, Op::Scale(x, c), &[x])
    }

    pub fn unary(&mut self, x: Var, op: Unary) -> Var {
        let t = self.value(x).map_op(op);
        self.push(t, Op::Unary(x, op), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    /// Softmax over the last axis. With `causal`, the input is `[.., m, n]`
    /// and row `i` only attends to columns `j <= i`.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Result<Var> {
        let xv = self.value(x);
        if xv.data().iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let causal_rows = if causal {
            let s = xv.shape();
            if s.len() < 2 {
                return Err(Error::invalid("causal softmax needs a [.., m, n] input"));
            }
            Some(s[s.len() - 2])
        } else {
            None
        };
        let mut data = xv.data().to_vec();
        kernels::softmax_rows(&mut data, xv.last_dim(), causal_rows);
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Softmax(x), &[x]))
    }

    /// Per-row standardization over the last axis (no gain or offset).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut data = xv.data().to_vec();
        let inv_std = kernels::layer_norm_rows(&mut data, xv.last_dim());
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::LayerNorm { x, inv_std }, &[x])
    }

    /// Training-mode batch normalization over all rows, per channel (last
    /// axis). Returns the normalized var and the batch mean and variance.
    pub fn batch_norm(&mut self, x: Var) -> (Var, Vec<f64>, Vec<f64>) {
        let xv = self.value(x);
        let c = xv.last_dim();
        let rows = xv.rows().max(1);
        let mut mean = vec![0.0; c];
        for r in xv.data().chunks(c) {
            add_into(&mut mean, r);
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; c];
        for r in xv.data().chunks(c) {
            for j in 0..c {
                var[j] += (r[j] - mean[j]).powi(2);
            }
        }
        var.iter_mut().for_each(|v| *v /= rows as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        let mut data = xv.data().to_vec();
        for r in data.chunks_mut(c) {
            for j in 0..c {
                r[j] = (r[j] - mean[j]) * inv_std[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let v = self.push(t, Op::BatchNorm { x, inv_std }, &[x]);
        (v, mean, var)
    }

    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.last_dim();
        if start + len > c {
            return Err(Error::invalid(format!(
                "slice {start}..{} out of range for width {c}",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(xv.rows() * len);
        for r in xv.data().chunks(c) {
            data.extend_from_slice(&r[start..start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::SliceLast { x, start }, &[x]))
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let lead = self.value(first).shape()[..self.value(first).shape().len() - 1].to_vec();
        let rows = self.value(first).rows();
        let mut width = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.shape()[..pv.shape().len() - 1] != lead[..] {
                return Err(mismatch("concat_last", self.value(first), pv));
            }
            width += pv.last_dim();
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(width);
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::ConcatLast(parts.to_vec()), parts))
    }

    /// `x[:, t, :]` from a `[B, T, F]` tensor.
    pub fn select_step(&mut self, x: Var, t: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 3 || t >= s[1] {
            return Err(Error::invalid(format!("step {t} out of range for {s:?}")));
        }
        let (b, steps, f) = (s[0], s[1], s[2]);
        let mut data = Vec::with_capacity(b * f);
        for i in 0..b {
            let off = (i * steps + t) * f;
            data.extend_from_slice(&xv.data()[off..off + f]);
        }
        let out = Tensor::new(vec![b, f], data)?;
        Ok(self.push(out, Op::SelectStep { x, t }, &[x]))
    }

    /// Stacks `[B, F]` tensors into `[B, T, F]`.
    pub fn stack_steps(&mut self, steps: &[Var]) -> Result<Var> {
        let first = *steps
            .first()
            .ok_or_else(|| Error::invalid("stack of zero tensors"))?;
        let s0 = self.value(first).shape().to_vec();
        if s0.len() != 2 {
            return Err(Error::invalid("stack_steps expects [B, F] inputs"));
        }
        for &v in steps {
            if self.value(v).shape() != s0.as_slice() {
                return Err(mismatch("stack_steps", self.value(first), self.value(v)));
            }
        }
        let (b, f, t) = (s0[0], s0[1], steps.len());
        let mut data = vec![0.0; b * t * f];
        for (j, &v) in steps.iter().enumerate() {
            let src = self.value(v).data();
            for i in 0..b {
                data[(i * t + j) * f..(i * t + j + 1) * f].copy_from_slice(&src[i * f..(i + 1) * f]);
            }
        }
        let out = Tensor::new(vec![b, t, f], data)?;
        Ok(self.push(out, Op::StackSteps(steps.to_vec()), steps))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Valid-padding patch extraction: `[B, H, W, C] -> [B, Ho, Wo, kh*kw*C]`.
    pub fn unfold2d(&mut self, x: Var, kh: usize, kw: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 4 || s[1] < kh || s[2] < kw || kh == 0 || kw == 0 {
            return Err(Error::invalid(format!(
                "cannot unfold {kh}x{kw} patches from {s:?}"
            )));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h - kh + 1, w - kw + 1);
        let patch = kh * kw * c;
        let mut data = vec![0.0; b * ho * wo * patch];
        let src = xv.data();
        for n in 0..b {
            for i in 0..ho {
                for j in 0..wo {
                    let dst = ((n * ho + i) * wo + j) * patch;
                    for di in 0..kh {
                        let s_off = ((n * h + i + di) * w + j) * c;
                        let d_off = dst + di * kw * c;
                        data[d_off..d_off + kw * c].copy_from_slice(&src[s_off..s_off + kw * c]);
                    }
                }
            }
        }
        let t = Tensor::new(vec![b, ho, wo, patch], data)?;
        Ok(self.push(t, Op::Unfold2d { x, kh, kw }, &[x]))
    }

    /// 2x2 max pooling with stride 2, floor on odd sizes.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 4 || s[1] < 2 || s[2] < 2 {
            return Err(Error::invalid(format!("cannot max-pool {s:?}")));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (h2, w2) = (h / 2, w / 2);
        let src = xv.data();
        let mut data = vec![0.0; b * h2 * w2 * c];
        let mut argmax = vec![0; data.len()];
        for n in 0..b {
            for i in 0..h2 {
                for j in 0..w2 {
                    for ch in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut at = 0;
                        for di in 0..2 {
                            for dj in 0..2 {
                                let idx = ((n * h + 2 * i + di) * w + 2 * j + dj) * c + ch;
                                if src[idx] > best {
                                    best = src[idx];
                                    at = idx;
                                }
                            }
                        }
                        let o = ((n * h2 + i) * w2 + j) * c + ch;
                        data[o] = best;
                        argmax[o] = at;
                    }
                }
            }
        }
        let t = Tensor::new(vec![b, h2, w2, c], data)?;
        Ok(self.push(t, Op::MaxPool2 { x, argmax }, &[x]))
    }

    /// Causal dilated patches: `[B, T, C] -> [B, T, k*C]`, where slot `s`
    /// holds `x[t - (k-1-s)*dilation]` or zero before the sequence start.
    pub fn causal_unfold(&mut self, x: Var, kernel: usize, dilation: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 3 || kernel == 0 || dilation == 0 {
            return Err(Error::invalid(format!(
                "causal_unfold(k={kernel}, d={dilation}) on {s:?}"
            )));
        }
        let (b, t, c) = (s[0], s[1], s[2]);
        let mut data = vec![0.0; b * t * kernel * c];
        for n in 0..b {
            for step in 0..t {
                for slot in 0..kernel {
                    let back = (kernel - 1 - slot) * dilation;
                    if back > step {
                        continue;
                    }
                    let src = (n * t + step - back) * c;
                    let dst = ((n * t + step) * kernel + slot) * c;
                    data[dst..dst + c].copy_from_slice(&xv.data()[src..src + c]);
                }
            }
        }
        let out = Tensor::new(vec![b, t, kernel * c], data)?;
        Ok(self.push(out, Op::CausalUnfold { x, kernel, dilation }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (pv, tv) = (self.value(pred), self.value(target));
        if pv.shape() != tv.shape() {
            return Err(mismatch("mse", pv, tv));
        }
        let n = pv.numel().max(1) as f64;
        let s = pv
            .data()
            .iter()
            .zip(tv.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        Ok(self.push(Tensor::scalar(s), Op::Mse(pred, target), &[pred, target]))
    }

    /// Distance of the recorded computation from the nearest point where a
    /// piecewise op switches branch: the smallest |input| of any ReLU and
    /// the smallest gap between the winner and runner-up of any max-pool
    /// window. Finite differences are only meaningful when this is well
    /// above the step size.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Unary(x, Unary::Relu) => {
                    for v in self.value(*x).data() {
                        margin = margin.min(v.abs());
                    }
                }
                Op::MaxPool2 { x, argmax } => {
                    let xv = self.value(*x);
                    let (h, w, c) = (xv.shape()[1], xv.shape()[2], xv.shape()[3]);
                    let src = xv.data();
                    for &at in argmax {
                        let (n, rest) = (at / (h * w * c), at % (h * w * c));
                        let (i, j, ch) = (rest / (w * c) / 2 * 2, rest / c % w / 2 * 2, rest % c);
                        for di in 0..2 {
                            for dj in 0..2 {
                                let idx = ((n * h + i + di) * w + j + dj) * c + ch;
                                // ties between ReLU-clamped zeros only split
                                // by crossing a ReLU kink, counted above
                                if idx != at && !(src[at] == 0.0 && src[idx] == 0.0) {
                                    margin = margin.min(src[at] - src[idx]);
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Runs reverse mode from a scalar `loss`, accumulating into the
    /// gradient slots of `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            if let Op::Param(id) = node.op {
                store.get_mut(id).accumulate_grad(&g);
            }
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.last_dim(), bv.shape()[1]);
                if let Some(da) = grad_slot(&self.nodes, grads, *a) {
                    gemm(m, n, k, g, false, bv.data(), true, da, true);
                }
                if let Some(db) = grad_slot(&self.nodes, grads, *b) {
                    gemm(k, m, n, av.data(), true, g, false, db, true);
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = node.value.shape()[2];
                let tb = *transpose_b;
                if let Some(da) = grad_slot(&self.nodes, grads, *a) {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bv.data()[i * k * n..(i + 1) * k * n];
                        // dA = dC * B^T (B stored k x n), or dC * B (B stored n x k)
                        gemm(m, n, k, gi, false, bi, !tb, &mut da[i * m * k..(i + 1) * m * k], true);
                    }
                }
                if let Some(db) = grad_slot(&self.nodes, grads, *b) {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av.data()[i * m * k..(i + 1) * m * k];
                        let dbi = &mut db[i * k * n..(i + 1) * k * n];
                        if tb {
                            gemm(n, m, k, gi, true, ai, false, dbi, true);
                        } else {
                            gemm(k, m, n, ai, true, gi, false, dbi, true);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = grad_slot(&self.nodes, grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = grad_slot(&self.nodes, grads, *b) {
                    let n = db.len().max(1);
                    for chunk in g.chunks(n) {
                        add_into(db, chunk);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let n = bv.numel().max(1);
                if let Some(da) = grad_slot(&self.nodes, grads, *a) {
                    for (dc, gc) in da.chunks_mut(n).zip(g.chunks(n)) {
                        for ((d, gv), bvv) in dc.iter_mut().zip(gc).zip(bv.data()) {
                            *d += gv * bvv;
                        }
                    }
                }
                if let Some(db) = grad_slot(&self.nodes, grads, *b) {
                    for (ac, gc) in av.data().chunks(n).zip(g.chunks(n)) {
                        for ((d, gv), avv) in db.iter_mut().zip(gc).zip(ac) {
                            *d += gv * avv;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = grad_slot(&self.nodes, grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = grad_slot(&self.nodes, grads, *b) {
                    for (d, v) in db.iter_mut().zip(g) {
                        *d -= v;
                    }
                }
            }
            Op::AddPerSequence(x, s) => {
                if let Some(dx) = grad_slot(&self.nodes, grads, *x) {
                    add_into(dx, g);
                }
                let shape = node.value.shape();
                let (b, t, f) = (shape[0], shape[1], shape[2]);
                if let Some(ds) = grad_slot(&self.nodes, grads, *s) {
                    for i in 0..b {
                        for j in 0..t {
                            add_into(&mut ds[i * f..(i + 1) * f], &g[(i * t + j) * f..(i * t + j + 1) * f]);
                        }
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(dx) = grad_slot(&self.nodes, grads, *x) {
                    for (d, v) in dx.iter_mut().zip(g) {
                        *d += c * v;
                    }
                }
            }
            Op::Unary(x, op) => {
                let xv = self.value(*x);
                if let Some(dx) = grad_slot(&self.nodes, grads, *x) {
                    for (i, d) in dx.iter_mut().enumerate() {
                        *d += g[i] * op.derivative(xv.data()[i], node.value.data()[i]);
                    }
                }
            }
            Op::Softmax(x) => {
                let n = node.value.last_dim();
                if let Some(dx) = grad_slot(&self.nodes, grads, *x) {
                    for ((y, gy), d) in node
                        .value
                        .data()
                        .chunks(n)
                        .zip(g.chunks(n))
                        .zip(dx.chunks_mut(n))
                    {
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            d[j] += y[j] * (gy[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, inv_std } => {
                let n = node.value.last_dim();
                if let Some(dx) = grad_slot(&self.nodes, grads, *x) {
                    for (r, ((y, gy), d)) in node
                        .value
                        .data()
                        .chunks(n)
                        .zip(g.chunks(n))
                        .zip(dx.chunks_mut(n))
                        .enumerate()
                    {
                        let mean_g = gy.iter().sum::<f64>() / n as f64;
                        let mean_gy = y.iter().zip(gy).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            d[j] += inv_std[r] * (gy[j] - mean_g - y[j] * mean_gy);
                        }
                    }
                }
            }
            Op::BatchNorm { x, inv_std } => {
                let c = node.value.last_dim();
                let rows = node.value.rows().max(1) as f64;
                let mut mean_g = vec![0.0; c];
                let mut mean_gy = vec![0.0; c];
                for (y, gy) in node.value.data().chunks(c).zip(g.chunks(c)) {
                    for j in 0..c {
                        mean_g[j] += gy[j];
                        mean_gy[j] += gy[j] * y[j];
                    }
                }
                mean_g.iter_mut().for_each(|v| *v /= rows);
                mean_gy.iter_mut().for_each(|v| *v /= rows);
                if let Some(dx) = grad_slot(&self.nodes, grads, *x) {
                    for ((y, gy), d) in node.value.data().chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                        for j in 0..c {
                            d[j] += inv_std[j] * (gy[j] - mean_g[j] - y[j] * mean_gy[j]);
                        }
                    }
                }
            }
            Op::SliceLast { x, start } => {
                let width = self.value(*x).last_dim();
                let len = node.value.last_dim();
                if let Some(dx) = grad_slot(&self.nodes, grads, *x) {
                    for (d, gr) in dx.chunks_mut(width).zip(g.chunks(len)) {
                        add_into(&mut d[*start..start + len], gr);
                    }
                }
            }
            Op::ConcatLast(parts) => {
                let width = node.value.last_dim();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if let Some(dp) = grad_slot(&self.nodes, grads, p) {
                        for (d, gr) in dp.chunks_mut(w).zip(g.chunks(width)) {
                            add_into(d, &gr[off..off + w]);
                        }
                    }
                    off += w;
                }
            }
            Op::SelectStep { x, t } => {
                let s = self.value(*x).shape();
                let (b, steps, f) = (s[0], s[1], s[2]);
                if let Some(dx) = grad_slot(&self.nodes, grads, *x) {
                    for i in 0..b {
                        let off = (i * steps + t) * f;
                        add_into(&mut dx[off..off + f], &g[i * f..(i + 1) * f]);
                    }
                }
            }
            Op::StackSteps(steps) => {
                let s = node.value.shape();
                let (b, t, f) = (s[0], s[1], s[2]);
                for (j, &v) in steps.iter().enumerate() {
                    if let Some(dv) = grad_slot(&self.nodes, grads, v) {
                        for i in 0..b {
                            add_into(&mut dv[i * f..(i + 1) * f], &g[(i * t + j) * f..(i * t + j + 1) * f]);
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = grad_slot(&self.nodes, grads, *x) {
                    add_into(dx, g);
                }
            }
            Op::Unfold2d { x, kh, kw } => {
                let s = self.value(*x).shape();
                let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
                let (ho, wo) = (h - kh + 1, w - kw + 1);
                let patch = kh * kw * c;
                if let Some(dx) = grad_slot(&self.nodes, grads, *x) {
                    for n in 0..b {
                        for i in 0..ho {
                            for j in 0..wo {
                                let src = ((n * ho + i) * wo + j) * patch;
                                for di in 0..*kh {
                                    let d_off = ((n * h + i + di) * w + j) * c;
                                    let g_off = src + di * kw * c;
                                    add_into(&mut dx[d_off..d_off + kw * c], &g[g_off..g_off + kw * c]);
                                }
                            }
                        }
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if let Some(dx) = grad_slot(&self.nodes, grads, *x) {
                    for (o, &src) in argmax.iter().enumerate() {
                        dx[src] += g[o];
                    }
                }
            }
            Op::CausalUnfold { x, kernel, dilation } => {
                let s = self.value(*x).shape();
                let (b, t, c) = (s[0], s[1], s[2]);
                if let Some(dx) = grad_slot(&self.nodes, grads, *x) {
                    for n in 0..b {
                        for step in 0..t {
                            for sl in 0..*kernel {
                                let back = (kernel - 1 - sl) * dilation;
                                if back > step {
                                    continue;
                                }
                                let dst = (n * t + step - back) * c;
                                let src = ((n * t + step) * kernel + sl) * c;
                                add_into(&mut dx[dst..dst + c], &g[src..src + c]);
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = grad_slot(&self.nodes, grads, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mse(p, t) => {
                let (pv, tv) = (self.value(*p), self.value(*t));
                let scale = 2.0 * g[0] / pv.numel().max(1) as f64;
                if let Some(dp) = grad_slot(&self.nodes, grads, *p) {
                    for i in 0..dp.len() {
                        dp[i] += scale * (pv.data()[i] - tv.data()[i]);
                    }
                }
                if let Some(dt) = grad_slot(&self.nodes, grads, *t) {
                    for i in 0..dt.len() {
                        dt[i] -= scale * (pv.data()[i] - tv.data()[i]);
                    }
                }
            }
        }
        Ok(())
    }
}
