//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! Every op appends a node holding its output value and enough saved state
//! to run its backward rule. Nodes are only ever appended, so the tape is in
//! topological order by construction and [`Tape::backward`] is a single
//! reverse sweep that visits each node once.
//!
//! ```
//! use ossem::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::from_vec(vec![0.0]).unwrap());
//! let y = tape.sigmoid(x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[0.25]);
//! ```

use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels;
use super::tensor::{check_finite, Real, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Default negative slope of the leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Handle to a node on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    Row,
}

enum Op<T> {
    Leaf,
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, T),
    LeakyRelu(Var, T),
    Relu(Var),
    Sigmoid(Var),
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    Conv1d { x: Var, w: Var, b: Var, k: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, stats: Vec<(T, T)> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    L1(Var, Var),
    Mean(Vec<Var>),
    Sum(Var),
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records executed ops for one forward pass.
pub struct Tape<T: Real> {
    id: u64,
    nodes: Vec<Node<T>>,
    leaky_slope: T,
    l1_margin: Option<T>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self::with_leaky_slope(LEAKY_SLOPE)
    }

    pub fn with_leaky_slope(slope: f64) -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            leaky_slope: T::of(slope),
            l1_margin: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest `|pred - target|` seen by any L1 op on this tape. The L1
    /// loss is not differentiable where this is zero.
    pub fn l1_margin(&self) -> Option<T> {
        self.l1_margin
    }

    /// Records a tensor; it participates in differentiation iff its
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let requires_grad = t.requires_grad();
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, mut t: Tensor<T>) -> Var {
        t.set_requires_grad(true);
        self.leaf(t)
    }

    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.idx].value
    }

    fn push(&mut self, mut value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        value.clear_grad();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(&self.nodes[v.idx])
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.idx].requires_grad)
    }

    fn emit(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        check_finite(&data, op_name)?;
        let rg = self.rg(inputs);
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        if av.shape() == bv.shape() {
            Ok(Bcast::Same)
        } else if bv.len() == 1 {
            Ok(Bcast::Scalar)
        } else if bv.len() == av.cols() && (bv.shape().len() == 1 || bv.rows() == 1) {
            Ok(Bcast::Row)
        } else {
            Err(Error::shape(op, format!("{:?} vs {:?}", av.shape(), bv.shape())))
        }
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, mk: fn(Var, Var, Bcast) -> Op<T>) -> Result<Var> {
        let bc = self.bcast(name, a, b)?;
        let av = &self.nodes[a.idx].value;
        let bv = self.nodes[b.idx].value.data();
        let cols = av.cols();
        let data: Vec<T> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match bc {
                    Bcast::Same => bv[i],
                    Bcast::Scalar => bv[0],
                    Bcast::Row => bv[i % cols],
                };
                f(x, y)
            })
            .collect();
        let shape = av.shape().to_vec();
        self.emit(name, shape, data, mk(a, b, bc), &[a, b])
    }

    /// `a + b`; `b` may be a scalar or a vector matching `a`'s last dimension.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise product with the same broadcasting rules as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, k: T) -> Result<Var> {
        let av = &self.node(a)?.value;
        let data = av.data().iter().map(|&x| x * k).collect();
        let shape = av.shape().to_vec();
        self.emit("scale", shape, data, Op::Scale(a, k), &[a])
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let av = &self.node(a)?.value;
        let data = av.data().iter().map(|&x| f(x)).collect();
        let shape = av.shape().to_vec();
        self.emit(name, shape, data, op, &[a])
    }

    pub fn leaky_relu(&mut self, a: Var) -> Result<Var> {
        let s = self.leaky_slope;
        self.unary("leaky_relu", a, |x| kernels::leaky_relu(x, s), Op::LeakyRelu(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, kernels::relu, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, kernels::sigmoid, Op::Sigmoid(a))
    }

    /// `[m, k] · [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.matmul_dims("matmul", a, b)?;
        let av = &self.nodes[a.idx].value;
        let bv = &self.nodes[b.idx].value;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            kernels::affine_row(av.row(i), bv.data(), None, n, &mut out[i * n..(i + 1) * n]);
        }
        self.emit("matmul", vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    fn matmul_dims(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.shape()[0] {
            return Err(Error::shape(op, format!("{:?} · {:?}", av.shape(), bv.shape())));
        }
        Ok((av.rows(), bv.cols()))
    }

    /// Dense layer `x · w + b` with `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (m, n) = self.matmul_dims("linear", x, w)?;
        let bv = &self.node(b)?.value;
        if bv.len() != n {
            return Err(Error::shape("linear", format!("bias length {} vs {n} outputs", bv.len())));
        }
        let xv = &self.nodes[x.idx].value;
        let wv = self.nodes[w.idx].value.data();
        let bd = self.nodes[b.idx].value.data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            kernels::affine_row(xv.row(i), wv, Some(bd), n, &mut out[i * n..(i + 1) * n]);
        }
        self.emit("linear", vec![m, n], out, Op::Linear { x, w, b }, &[x, w, b])
    }

    /// Causal 1-D convolution over frames: `x: [T, c_in]`, `w: [K, c_in, c_out]`,
    /// `b: [c_out]`. Output frame `t` reads input frames `t-K+1..=t` with
    /// implicit zero frames before the start.
    pub fn causal_conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (&self.node(x)?.value, &self.node(w)?.value, &self.node(b)?.value);
        let ws = wv.shape();
        if ws.len() != 3 || xv.shape().len() != 2 || ws[1] != xv.cols() || ws[2] != bv.len() {
            return Err(Error::shape(
                "causal_conv1d",
                format!("x {:?}, w {:?}, b {:?}", xv.shape(), ws, bv.shape()),
            ));
        }
        let (k, c_in, c_out) = (ws[0], ws[1], ws[2]);
        let t_len = xv.rows();
        let mut out = vec![T::zero(); t_len * c_out];
        let mut window: Vec<Option<&[T]>> = vec![None; k];
        for t in 0..t_len {
            for (j, slot) in window.iter_mut().enumerate() {
                let src = t as isize - (k as isize - 1) + j as isize;
                *slot = (src >= 0).then(|| xv.row(src as usize));
            }
            kernels::conv_frame(&window, wv.data(), bv.data(), c_in, &mut out[t * c_out..(t + 1) * c_out]);
        }
        self.emit("causal_conv1d", vec![t_len, c_out], out, Op::Conv1d { x, w, b, k }, &[x, w, b])
    }

    /// Per-row layer normalisation with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (xv, gv, bv) = (&self.node(x)?.value, &self.node(gain)?.value, &self.node(bias)?.value);
        let d = xv.cols();
        if gv.len() != d || bv.len() != d {
            return Err(Error::shape("layer_norm", format!("width {d}, gain {}, bias {}", gv.len(), bv.len())));
        }
        if eps <= T::zero() {
            return Err(Error::invalid("layer_norm eps must be positive"));
        }
        let rows = xv.rows();
        let mut out = vec![T::zero(); rows * d];
        let mut stats = Vec::with_capacity(rows);
        for r in 0..rows {
            stats.push(kernels::layer_norm_row(xv.row(r), gv.data(), bv.data(), eps, &mut out[r * d..(r + 1) * d]));
        }
        let shape = xv.shape().to_vec();
        self.emit("layer_norm", shape, out, Op::LayerNorm { x, gain, bias, stats }, &[x, gain, bias])
    }

    /// Multi-head scaled dot-product attention over `[T, d]` inputs.
    /// With `causal`, query `t` sees keys `0..=t` only.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let (qv, kv, vv) = (&self.node(q)?.value, &self.node(k)?.value, &self.node(v)?.value);
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() || qv.shape().len() != 2 {
            return Err(Error::shape(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", qv.shape(), kv.shape(), vv.shape()),
            ));
        }
        let (t_len, d) = (qv.rows(), qv.cols());
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape("attention", format!("width {d} not divisible by {heads} heads")));
        }
        let (out, probs) = attention_forward(qv, kv, vv, heads, causal);
        self.emit("attention", vec![t_len, d], out, Op::Attention { q, k, v, heads, probs }, &[q, k, v])
    }

    /// Mean absolute difference over all elements. The subgradient at a zero
    /// difference is taken as zero.
    pub fn l1_mean_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (pv, tv) = (&self.node(pred)?.value, &self.node(target)?.value);
        if pv.shape() != tv.shape() {
            return Err(Error::shape("l1_mean_loss", format!("{:?} vs {:?}", pv.shape(), tv.shape())));
        }
        let mut sum = T::zero();
        let mut margin = self.l1_margin.unwrap_or(T::infinity());
        for (&p, &y) in pv.data().iter().zip(tv.data()) {
            let a = (p - y).abs();
            sum += a;
            if a < margin {
                margin = a;
            }
        }
        let loss = sum / T::of(pv.len() as f64);
        self.l1_margin = Some(margin);
        self.emit("l1_mean_loss", vec![1], vec![loss], Op::L1(pred, target), &[pred, target])
    }

    /// Mean of per-utterance L1 losses over a set of `(pred, target)` pairs.
    pub fn l1_set_loss(&mut self, pairs: &[(Var, Var)]) -> Result<Var> {
        let losses = pairs
            .iter()
            .map(|&(p, t)| self.l1_mean_loss(p, t))
            .collect::<Result<Vec<_>>>()?;
        self.mean(&losses)
    }

    /// Mean of scalar nodes.
    pub fn mean(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::invalid("mean of an empty set"));
        }
        let mut s = T::zero();
        for &x in xs {
            let xv = &self.node(x)?.value;
            if !xv.is_scalar() {
                return Err(Error::NotScalar(xv.shape().to_vec()));
            }
            s += xv.item();
        }
        let m = s / T::of(xs.len() as f64);
        self.emit("mean", vec![1], vec![m], Op::Mean(xs.to_vec()), xs)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.node(a)?.value.data().iter().copied().sum();
        self.emit("sum", vec![1], vec![s], Op::Sum(a), &[a])
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape; gradients are
    /// returned for every node that requires them.
    pub fn backward(mut self, loss: Var) -> Result<Gradients<T>> {
        let lv = &self.node(loss)?.value;
        if !lv.is_scalar() {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.idx].requires_grad {
            grads[loss.idx] = Some(vec![T::one()]);
        }
        for i in (0..=loss.idx).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backward_op(i, &op, &g, &mut grads)?;
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                check_finite(g, "backward").map_err(|_| Error::NonFinite {
                    op: "backward",
                    index: i,
                })?;
            }
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn backward_op(&self, i: usize, op: &Op<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.idx].value;
        let needs = |v: Var| self.nodes[v.idx].requires_grad;
        match *op {
            Op::Leaf => {}
            Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                let neg = matches!(op, Op::Sub(..));
                if needs(a) {
                    acc(grads, a, g.to_vec());
                }
                if needs(b) {
                    let mut r = reduce_bcast(g, bc, val(a).cols(), val(b).len());
                    if neg {
                        r.iter_mut().for_each(|x| *x = -*x);
                    }
                    acc(grads, b, r);
                }
            }
            Op::Mul(a, b, bc) => {
                let (ad, bd) = (val(a).data(), val(b).data());
                let cols = val(a).cols();
                let pick = |j: usize| match bc {
                    Bcast::Same => bd[j],
                    Bcast::Scalar => bd[0],
                    Bcast::Row => bd[j % cols],
                };
                if needs(a) {
                    acc(grads, a, g.iter().enumerate().map(|(j, &gj)| gj * pick(j)).collect());
                }
                if needs(b) {
                    let prod: Vec<T> = g.iter().zip(ad).map(|(&gj, &x)| gj * x).collect();
                    acc(grads, b, reduce_bcast(&prod, bc, cols, bd.len()));
                }
            }
            Op::Scale(a, k) => acc(grads, a, g.iter().map(|&x| x * k).collect()),
            Op::LeakyRelu(a, s) => {
                let x = val(a).data();
                acc(grads, a, g.iter().zip(x).map(|(&gj, &xj)| if xj > T::zero() { gj } else { gj * s }).collect());
            }
            Op::Relu(a) => {
                let x = val(a).data();
                acc(grads, a, g.iter().zip(x).map(|(&gj, &xj)| if xj > T::zero() { gj } else { T::zero() }).collect());
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[i].value.data();
                acc(grads, a, g.iter().zip(y).map(|(&gj, &yj)| gj * yj * (T::one() - yj)).collect());
            }
            Op::MatMul(a, b) => self.backward_matmul(a, b, None, g, grads),
            Op::Linear { x, w, b } => self.backward_matmul(x, w, Some(b), g, grads),
            Op::Conv1d { x, w, b, k } => {
                let (xv, wv) = (val(x), val(w));
                let (c_in, c_out) = (xv.cols(), val(b).len());
                let t_len = xv.rows();
                let wd = wv.data();
                let mut dx = needs(x).then(|| vec![T::zero(); xv.len()]);
                let mut dw = needs(w).then(|| vec![T::zero(); wv.len()]);
                let mut db = needs(b).then(|| vec![T::zero(); c_out]);
                for t in 0..t_len {
                    let gt = &g[t * c_out..(t + 1) * c_out];
                    if let Some(db) = db.as_mut() {
                        db.iter_mut().zip(gt).for_each(|(d, &gv)| *d += gv);
                    }
                    for j in 0..k {
                        let src = t as isize - (k as isize - 1) + j as isize;
                        if src < 0 {
                            continue;
                        }
                        let src = src as usize;
                        let wj = &wd[j * c_in * c_out..(j + 1) * c_in * c_out];
                        if let Some(dx) = dx.as_mut() {
                            let dxr = &mut dx[src * c_in..(src + 1) * c_in];
                            for (ci, d) in dxr.iter_mut().enumerate() {
                                *d += kernels::dot(&wj[ci * c_out..(ci + 1) * c_out], gt);
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            let xr = xv.row(src);
                            let dwj = &mut dw[j * c_in * c_out..(j + 1) * c_in * c_out];
                            for (ci, &xval) in xr.iter().enumerate() {
                                let row = &mut dwj[ci * c_out..(ci + 1) * c_out];
                                row.iter_mut().zip(gt).for_each(|(d, &gv)| *d += xval * gv);
                            }
                        }
                    }
                }
                for (v, d) in [(x, dx), (w, dw), (b, db)] {
                    if let Some(d) = d {
                        acc(grads, v, d);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, ref stats } => {
                let xv = val(x);
                let gd = val(gain).data();
                let d = xv.cols();
                let n = T::of(d as f64);
                let mut dx = needs(x).then(|| vec![T::zero(); xv.len()]);
                let mut dg = needs(gain).then(|| vec![T::zero(); d]);
                let mut dbias = needs(bias).then(|| vec![T::zero(); d]);
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    let xr = xv.row(r);
                    let gr = &g[r * d..(r + 1) * d];
                    for c in 0..d {
                        xhat[c] = (xr[c] - mean) * rstd;
                        dxhat[c] = gr[c] * gd[c];
                    }
                    if let Some(dg) = dg.as_mut() {
                        for c in 0..d {
                            dg[c] += gr[c] * xhat[c];
                        }
                    }
                    if let Some(db) = dbias.as_mut() {
                        db.iter_mut().zip(gr).for_each(|(a, &b)| *a += b);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let m1 = dxhat.iter().copied().sum::<T>() / n;
                        let m2 = kernels::dot(&dxhat, &xhat) / n;
                        for c in 0..d {
                            dx[r * d + c] = rstd * (dxhat[c] - m1 - xhat[c] * m2);
                        }
                    }
                }
                for (v, dd) in [(x, dx), (gain, dg), (bias, dbias)] {
                    if let Some(dd) = dd {
                        acc(grads, v, dd);
                    }
                }
            }
            Op::Attention { q, k, v, heads, ref probs } => {
                let (qv, kv, vv) = (val(q), val(k), val(v));
                let (t_len, d) = (qv.rows(), qv.cols());
                let hd = d / heads;
                let scale = T::one() / T::of(hd as f64).sqrt();
                let mut dq = vec![T::zero(); t_len * d];
                let mut dk = vec![T::zero(); t_len * d];
                let mut dv = vec![T::zero(); t_len * d];
                let mut dp = vec![T::zero(); t_len];
                for t in 0..t_len {
                    for h in 0..heads {
                        let p = &probs[(t * heads + h) * t_len..(t * heads + h + 1) * t_len];
                        let go = &g[t * d + h * hd..t * d + (h + 1) * hd];
                        let mut weighted = T::zero();
                        for j in 0..t_len {
                            if p[j] == T::zero() {
                                dp[j] = T::zero();
                                continue;
                            }
                            let vj = &vv.data()[j * d + h * hd..j * d + (h + 1) * hd];
                            dp[j] = kernels::dot(go, vj);
                            weighted += p[j] * dp[j];
                            let dvj = &mut dv[j * d + h * hd..j * d + (h + 1) * hd];
                            dvj.iter_mut().zip(go).for_each(|(a, &b)| *a += p[j] * b);
                        }
                        let qt = &qv.data()[t * d + h * hd..t * d + (h + 1) * hd];
                        for j in 0..t_len {
                            if p[j] == T::zero() {
                                continue;
                            }
                            let ds = p[j] * (dp[j] - weighted) * scale;
                            let kj = &kv.data()[j * d + h * hd..j * d + (h + 1) * hd];
                            let dqt = &mut dq[t * d + h * hd..t * d + (h + 1) * hd];
                            dqt.iter_mut().zip(kj).for_each(|(a, &b)| *a += ds * b);
                            let dkj = &mut dk[j * d + h * hd..j * d + (h + 1) * hd];
                            dkj.iter_mut().zip(qt).for_each(|(a, &b)| *a += ds * b);
                        }
                    }
                }
                for (var, dd) in [(q, dq), (k, dk), (v, dv)] {
                    if needs(var) {
                        acc(grads, var, dd);
                    }
                }
            }
            Op::L1(pred, target) => {
                let (pd, td) = (val(pred).data(), val(target).data());
                let scale = g[0] / T::of(pd.len() as f64);
                let dp: Vec<T> = pd
                    .iter()
                    .zip(td)
                    .map(|(&p, &y)| {
                        if p > y {
                            scale
                        } else if p < y {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if needs(target) {
                    acc(grads, target, dp.iter().map(|&x| -x).collect());
                }
                if needs(pred) {
                    acc(grads, pred, dp);
                }
            }
            Op::Mean(ref xs) => {
                let share = g[0] / T::of(xs.len() as f64);
                for &x in xs {
                    if needs(x) {
                        acc(grads, x, vec![share]);
                    }
                }
            }
            Op::Sum(a) => acc(grads, a, vec![g[0]; val(a).len()]),
        }
        Ok(())
    }

    fn backward_matmul(&self, a: Var, b: Var, bias: Option<Var>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (av, bv) = (&self.nodes[a.idx].value, &self.nodes[b.idx].value);
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let bd = bv.data();
        if self.nodes[a.idx].requires_grad {
            let mut da = vec![T::zero(); m * k];
            for i in 0..m {
                let gi = &g[i * n..(i + 1) * n];
                for p in 0..k {
                    da[i * k + p] = kernels::dot(gi, &bd[p * n..(p + 1) * n]);
                }
            }
            acc(grads, a, da);
        }
        if self.nodes[b.idx].requires_grad {
            let mut db = vec![T::zero(); k * n];
            for i in 0..m {
                let gi = &g[i * n..(i + 1) * n];
                for (p, &x) in av.row(i).iter().enumerate() {
                    if x == T::zero() {
                        continue;
                    }
                    let row = &mut db[p * n..(p + 1) * n];
                    row.iter_mut().zip(gi).for_each(|(d, &gv)| *d += x * gv);
                }
            }
            acc(grads, b, db);
        }
        if let Some(bias) = bias {
            if self.nodes[bias.idx].requires_grad {
                acc(grads, bias, reduce_bcast(g, Bcast::Row, n, n));
            }
        }
    }
}

/// Batched attention forward. Returns the output and the weights laid out
/// as `[T, heads, T]` with exact zeros at masked positions.
pub(crate) fn attention_forward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    causal: bool,
) -> (Vec<T>, Vec<T>) {
    let (t_len, d) = (q.rows(), q.cols());
    let mut out = vec![T::zero(); t_len * d];
    let mut probs = vec![T::zero(); t_len * heads * t_len];
    let mut scratch = vec![T::zero(); heads * t_len];
    for t in 0..t_len {
        let n_keys = if causal { t + 1 } else { t_len };
        let ps = &mut scratch[..heads * n_keys];
        kernels::attention_row(
            q.row(t),
            &k.data()[..n_keys * d],
            &v.data()[..n_keys * d],
            heads,
            &mut out[t * d..(t + 1) * d],
            ps,
        );
        for h in 0..heads {
            let dst = &mut probs[(t * heads + h) * t_len..(t * heads + h) * t_len + n_keys];
            dst.copy_from_slice(&ps[h * n_keys..(h + 1) * n_keys]);
        }
    }
    (out, probs)
}

/// Attention weights `[heads, T, T]` for inspection; rows are probability
/// vectors and masked entries are exactly zero.
pub fn attention_weights<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, heads: usize, causal: bool) -> Result<Tensor<T>> {
    if q.shape() != k.shape() || q.shape() != v.shape() || q.shape().len() != 2 {
        return Err(Error::shape("attention_weights", "q, k, v must share a [T, d] shape"));
    }
    if heads == 0 || !q.cols().is_multiple_of(heads) {
        return Err(Error::shape("attention_weights", format!("width {} not divisible by {heads} heads", q.cols())));
    }
    let t_len = q.rows();
    let (_, probs) = attention_forward(q, k, v, heads, causal);
    let mut w = vec![T::zero(); heads * t_len * t_len];
    for t in 0..t_len {
        for h in 0..heads {
            let src = &probs[(t * heads + h) * t_len..(t * heads + h + 1) * t_len];
            w[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len].copy_from_slice(src);
        }
    }
    Tensor::new(vec![heads, t_len, t_len], w)
}

fn reduce_bcast<T: Real>(g: &[T], bc: Bcast, cols: usize, target_len: usize) -> Vec<T> {
    match bc {
        Bcast::Same => g.to_vec(),
        Bcast::Scalar => vec![g.iter().copied().sum()],
        Bcast::Row => {
            let mut r = vec![T::zero(); target_len];
            for chunk in g.chunks(cols) {
                r.iter_mut().zip(chunk).for_each(|(a, &b)| *a += b);
            }
            r
        }
    }
}

fn acc<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.idx] {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        slot => *slot = Some(g),
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx)?.as_deref()
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.idx)?.take()
    }

    /// Writes the gradient of `v` into `t.grad` (zeros if `v` got none).
    pub fn populate(&self, v: Var, t: &mut Tensor<T>) -> Result<()> {
        let g = self.get(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); t.len()]);
        t.set_grad(g)
    }
}
