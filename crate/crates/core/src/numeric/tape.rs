//! Reverse-mode differentiation over a linear record of primitive ops.
//!
//! Every op appends a node holding its forward value. [`Tape::backward`]
//! walks the nodes from last to first, so each node is visited once and
//! after all of its consumers.

use std::collections::HashMap;

use super::params::{Gradients, ParamId, ParameterStore};
use super::tensor::{matmul_at_into, matmul_bt_into, matmul_into, sigmoid, softmax_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulBt(Var, Var),
    Add(Var, Var),
    /// `m×n` plus a broadcast `1×n` row.
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    Pick(Var, Vec<usize>),
    Sum(Var),
    Transpose(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Bce(Var, f64),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Clamp applied to probabilities inside [`Tape::bce`].
pub const BCE_EPS: f64 = 1e-12;

/// Binary cross entropy `-[c ln p + (1-c) ln(1-p)]` with `p` clamped to `[eps, 1-eps]`.
pub fn bce_value(label: f64, p: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    /// Brings a parameter onto the tape; repeated calls return the same node.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::matrix(rows, cols, data).expect("op produced consistent shape")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.data(a), self.data(b), &mut out, m, k, n);
        Ok(self.push(Self::matrix(m, n, out), Op::MatMul(a, b)))
    }

    /// `a[m×k] · b[n×k]ᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul_bt", format!("{m}x{k} · ({n}x{k2})ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        matmul_bt_into(self.data(a), self.data(b), &mut out, m, k, n);
        Ok(self.push(Self::matrix(m, n, out), Op::MatMulBt(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.dims(a), self.dims(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (m, n) = self.dims(a);
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Self::matrix(m, n, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.dims(row) != (1, n) {
            return Err(Error::shape("add_row", format!("{m}x{n} + {:?}", self.dims(row))));
        }
        let r = self.data(row).to_vec();
        let out = self
            .data(a)
            .chunks(n)
            .flat_map(|c| c.iter().zip(&r).map(|(x, y)| x + y))
            .collect();
        Ok(self.push(Self::matrix(m, n, out), Op::AddRow(a, row)))
    }

    /// Elementwise product with a constant mask (used for dropout).
    pub fn mul_const(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let (m, n) = self.dims(a);
        if mask.len() != m * n {
            return Err(Error::shape("mul_const", format!("{m}x{n} vs {}", mask.len())));
        }
        let out = self.data(a).iter().zip(&mask).map(|(x, k)| x * k).collect();
        Ok(self.push(Self::matrix(m, n, out), Op::MulConst(a, mask)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (m, n) = self.dims(a);
        let out = self.data(a).iter().map(|x| x * s).collect();
        self.push(Self::matrix(m, n, out), Op::Scale(a, s))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let (m, n) = self.dims(a);
        Self::matrix(m, n, self.data(a).iter().map(|&x| f(x)).collect())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::tanh);
        self.push(t, Op::Tanh(a))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| {
            0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
        });
        self.push(t, Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let mut out = vec![0.0; m * n];
        for (row, o) in self.data(a).chunks(n).zip(out.chunks_mut(n)) {
            softmax_into(row, o);
        }
        self.push(Self::matrix(m, n, out), Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let mut out = Vec::with_capacity(m * n);
        for row in self.data(a).chunks(n) {
            let lse = super::tensor::log_sum_exp(row);
            out.extend(row.iter().map(|x| x - lse));
        }
        self.push(Self::matrix(m, n, out), Op::LogSoftmaxRows(a))
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims(table);
        if ids.is_empty() {
            return Err(Error::EmptySequence("gather_rows"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    size: v,
                });
            }
            out.extend_from_slice(&self.data(table)[id * d..(id + 1) * d]);
        }
        Ok(self.push(Self::matrix(ids.len(), d, out), Op::GatherRows(table, ids.to_vec())))
    }

    /// Mean over rows: `L×d -> 1×d`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let mut out = vec![0.0; n];
        for row in self.data(a).chunks(n) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        self.push(Self::matrix(1, n, out), Op::MeanRows(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.dims(parts[0]).0;
        if parts.iter().any(|&p| self.dims(p).0 != m) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let n: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                let c = self.dims(p).1;
                out.extend_from_slice(&self.data(p)[r * c..(r + 1) * c]);
            }
        }
        Ok(self.push(Self::matrix(m, n, out), Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.dims(parts[0]).1;
        if parts.iter().any(|&p| self.dims(p).1 != n) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        let m = out.len() / n;
        Ok(self.push(Self::matrix(m, n, out), Op::ConcatRows(parts.to_vec())))
    }

    /// Columns `[start, start + width)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start + width > n || width == 0 {
            return Err(Error::shape(
                "slice_cols",
                format!("[{start}, {}) of {n} columns", start + width),
            ));
        }
        let out = self
            .data(a)
            .chunks(n)
            .flat_map(|row| row[start..start + width].iter().copied())
            .collect();
        Ok(self.push(Self::matrix(m, width, out), Op::SliceCols(a, start)))
    }

    /// Picks flat (row-major) entries into a `1×k` row.
    pub fn pick(&mut self, a: Var, flat: &[usize]) -> Result<Var> {
        let len = self.data(a).len();
        if let Some(&bad) = flat.iter().find(|&&i| i >= len) {
            return Err(Error::Index {
                what: "pick",
                index: bad,
                size: len,
            });
        }
        let out = flat.iter().map(|&i| self.data(a)[i]).collect();
        Ok(self.push(Tensor::row(out), Op::Pick(a, flat.to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        self.push(t, Op::Transpose(a))
    }

    /// Row-wise layer normalisation with learned `1×n` scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.dims(gamma) != (1, n) || self.dims(beta) != (1, n) {
            return Err(Error::shape("layer_norm", "gain/bias width mismatch"));
        }
        let mut xhat = Vec::with_capacity(m * n);
        let mut rstd = Vec::with_capacity(m);
        for row in self.data(x).chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            xhat.extend(row.iter().map(|v| (v - mean) * r));
        }
        let g = self.data(gamma);
        let b = self.data(beta);
        let out = xhat
            .chunks(n)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((h, g), b)| h * g + b))
            .collect();
        Ok(self.push(
            Self::matrix(m, n, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Binary cross entropy of a scalar probability against a 0/1 label.
    pub fn bce(&mut self, p: Var, label: f64) -> Result<Var> {
        if self.data(p).len() != 1 {
            return Err(Error::shape("bce", "probability must be a scalar"));
        }
        let v = bce_value(label, self.data(p)[0]);
        Ok(self.push(Tensor::scalar(v), Op::Bce(p, label)))
    }

    /// Back-propagates from a scalar `loss` and returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::new(0);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => out.add(*id, &g),
                Op::MatMul(a, b) => {
                    let (m, k) = self.dims(*a);
                    let n = self.dims(*b).1;
                    let ga = acc(&mut grads, *a, m * k);
                    matmul_bt_into(&g, self.data(*b), ga, m, n, k);
                    let gb = acc(&mut grads, *b, k * n);
                    matmul_at_into(self.data(*a), &g, gb, m, k, n);
                }
                Op::MatMulBt(a, b) => {
                    let (m, k) = self.dims(*a);
                    let n = self.dims(*b).0;
                    let ga = acc(&mut grads, *a, m * k);
                    matmul_into(&g, self.data(*b), ga, m, n, k);
                    let gb = acc(&mut grads, *b, n * k);
                    matmul_at_into(&g, self.data(*a), gb, m, n, k);
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads, *a, g.len()), &g);
                    add_into(acc(&mut grads, *b, g.len()), &g);
                }
                Op::Sub(a, b) => {
                    add_into(acc(&mut grads, *a, g.len()), &g);
                    let gb = acc(&mut grads, *b, g.len());
                    for (x, y) in gb.iter_mut().zip(&g) {
                        *x -= y;
                    }
                }
                Op::AddRow(a, row) => {
                    add_into(acc(&mut grads, *a, g.len()), &g);
                    let n = self.dims(*row).1;
                    let gr = acc(&mut grads, *row, n);
                    for chunk in g.chunks(n) {
                        add_into(gr, chunk);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.data(*a), self.data(*b));
                    let ga = acc(&mut grads, *a, g.len());
                    for ((x, gi), bi) in ga.iter_mut().zip(&g).zip(bv) {
                        *x += gi * bi;
                    }
                    let gb = acc(&mut grads, *b, g.len());
                    for ((x, gi), ai) in gb.iter_mut().zip(&g).zip(av) {
                        *x += gi * ai;
                    }
                }
                Op::MulConst(a, mask) => {
                    let ga = acc(&mut grads, *a, g.len());
                    for ((x, gi), k) in ga.iter_mut().zip(&g).zip(mask) {
                        *x += gi * k;
                    }
                }
                Op::Scale(a, s) => {
                    let ga = acc(&mut grads, *a, g.len());
                    for (x, gi) in ga.iter_mut().zip(&g) {
                        *x += gi * s;
                    }
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    let ga = acc(&mut grads, *a, g.len());
                    for ((x, gi), yi) in ga.iter_mut().zip(&g).zip(y) {
                        *x += gi * yi * (1.0 - yi);
                    }
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    let ga = acc(&mut grads, *a, g.len());
                    for ((x, gi), yi) in ga.iter_mut().zip(&g).zip(y) {
                        *x += gi * (1.0 - yi * yi);
                    }
                }
                Op::Gelu(a) => {
                    let xin = self.data(*a);
                    let ga = acc(&mut grads, *a, g.len());
                    for ((x, gi), &v) in ga.iter_mut().zip(&g).zip(xin) {
                        let u = SQRT_2_OVER_PI * (v + GELU_C * v * v * v);
                        let t = u.tanh();
                        let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * v * v);
                        *x += gi * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let n = self.dims(*a).1;
                    let y = node.value.data();
                    let ga = acc(&mut grads, *a, g.len());
                    for ((gr, yr), xr) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((x, gi), yi) in xr.iter_mut().zip(gr).zip(yr) {
                            *x += yi * (gi - dot);
                        }
                    }
                }
                Op::LogSoftmaxRows(a) => {
                    let n = self.dims(*a).1;
                    let y = node.value.data();
                    let ga = acc(&mut grads, *a, g.len());
                    for ((gr, yr), xr) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                        let s: f64 = gr.iter().sum();
                        for ((x, gi), yi) in xr.iter_mut().zip(gr).zip(yr) {
                            *x += gi - yi.exp() * s;
                        }
                    }
                }
                Op::GatherRows(table, ids) => {
                    let (v, d) = self.dims(*table);
                    let gt = acc(&mut grads, *table, v * d);
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
                Op::MeanRows(a) => {
                    let (m, n) = self.dims(*a);
                    let ga = acc(&mut grads, *a, m * n);
                    let inv = 1.0 / m as f64;
                    for row in ga.chunks_mut(n) {
                        for (x, gi) in row.iter_mut().zip(&g) {
                            *x += gi * inv;
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let (m, n) = node.value.dims2();
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.dims(p).1;
                        let gp = acc(&mut grads, p, m * c);
                        for r in 0..m {
                            add_into(&mut gp[r * c..(r + 1) * c], &g[r * n + offset..r * n + offset + c]);
                        }
                        offset += c;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.data(p).len();
                        add_into(acc(&mut grads, p, len), &g[offset..offset + len]);
                        offset += len;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (m, n) = self.dims(*a);
                    let w = node.value.dims2().1;
                    let ga = acc(&mut grads, *a, m * n);
                    for r in 0..m {
                        add_into(&mut ga[r * n + start..r * n + start + w], &g[r * w..(r + 1) * w]);
                    }
                }
                Op::Pick(a, flat) => {
                    let len = self.data(*a).len();
                    let ga = acc(&mut grads, *a, len);
                    for (gi, &i) in g.iter().zip(flat) {
                        ga[i] += gi;
                    }
                }
                Op::Sum(a) => {
                    let len = self.data(*a).len();
                    let ga = acc(&mut grads, *a, len);
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
                Op::Transpose(a) => {
                    let (m, n) = self.dims(*a);
                    let ga = acc(&mut grads, *a, m * n);
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let (m, n) = self.dims(*x);
                    let gam = self.data(*gamma).to_vec();
                    {
                        let gg = acc(&mut grads, *gamma, n);
                        for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                            for ((x, gi), hi) in gg.iter_mut().zip(gr).zip(hr) {
                                *x += gi * hi;
                            }
                        }
                    }
                    {
                        let gb = acc(&mut grads, *beta, n);
                        for gr in g.chunks(n) {
                            add_into(gb, gr);
                        }
                    }
                    let gx = acc(&mut grads, *x, m * n);
                    let nf = n as f64;
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let dh: Vec<f64> = gr.iter().zip(&gam).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / nf;
                        let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / nf;
                        for j in 0..n {
                            gx[r * n + j] += rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
                Op::Bce(p, label) => {
                    let pv = self.data(*p)[0];
                    let gp = acc(&mut grads, *p, 1);
                    if pv > BCE_EPS && pv < 1.0 - BCE_EPS {
                        gp[0] += g[0] * (-label / pv + (1.0 - label) / (1.0 - pv));
                    }
                }
            }
        }
        Ok(out)
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::params::Group;

    fn store1(t: Tensor) -> (ParameterStore, ParamId) {
        let mut s = ParameterStore::new();
        let id = s.add("w", Group::Mlp, t);
        (s, id)
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(3, 2, vec![0.0, 0.0, 2f64.ln(), 0.0, 1000.0, 1000.0]).unwrap());
        let y = tape.softmax_rows(x);
        let v = tape.value(y).data();
        assert_eq!(&v[0..2], &[0.5, 0.5]);
        assert!((v[2] - 2.0 / 3.0).abs() < 1e-15 && (v[3] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(&v[4..6], &[0.5, 0.5]);
    }

    #[test]
    fn sum_gives_ones() {
        let (s, id) = store1(Tensor::row(vec![1.0, -2.0, 3.0]));
        let mut tape = Tape::new();
        let w = tape.param(&s, id);
        let l = tape.sum(w);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(id).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn dot_self_gives_twice() {
        let (s, id) = store1(Tensor::row(vec![1.0, -2.0, 3.0]));
        let mut tape = Tape::new();
        let w = tape.param(&s, id);
        let q = tape.matmul_bt(w, w).unwrap();
        let g = tape.backward(q).unwrap();
        assert_eq!(g.get(id).unwrap(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn gather_repeated_id_accumulates() {
        let (s, id) = store1(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let mut tape = Tape::new();
        let t = tape.param(&s, id);
        let r = tape.gather_rows(t, &[1, 1]).unwrap();
        assert_eq!(tape.value(r).data(), &[3.0, 4.0, 3.0, 4.0]);
        let l = tape.sum(r);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(id).unwrap(), &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn gather_out_of_range() {
        let mut tape = Tape::new();
        let t = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.gather_rows(t, &[2]), Err(Error::Index { .. })));
    }

    #[test]
    fn mean_pool_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 2, vec![1.0, 3.0, 3.0, 5.0]).unwrap());
        let m = tape.mean_rows(x);
        assert_eq!(tape.value(m).data(), &[2.0, 4.0]);
        let one = tape.constant(Tensor::row(vec![7.0, -1.0]));
        let m1 = tape.mean_rows(one);
        assert_eq!(tape.value(m1).data(), &[7.0, -1.0]);
    }

    #[test]
    fn bce_values() {
        assert!((bce_value(1.0, 0.5) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((bce_value(0.0, 0.5) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_value(1.0, 1.0 - 1e-15) < 1e-11);
        assert!(bce_value(1.0, 0.0).is_finite());
    }
}
