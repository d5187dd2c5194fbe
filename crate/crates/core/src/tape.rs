//! Reverse-mode differentiation over a linear tape of matrix operations.
//!
//! Every operation records its output value and the inputs it read; the
//! backward sweep walks the tape once in reverse. Matrix products are routed
//! through the tape's [`FlopCounter`] so a forward pass doubles as a FLOP
//! measurement.

use crate::error::{Error, Result};
use crate::numerics::{self, FlopCounter, MatmulKind, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    MeanRows(Var),
    Average(Vec<Var>),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    flops: FlopCounter,
}

/// Gradients indexed by [`Var`]; `None` where nothing flowed back.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
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

    pub fn flops(&self) -> &FlopCounter {
        &self.flops
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var, kind: MatmulKind) -> Result<Var> {
        let out = self.flops.matmul(kind, self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a x bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var, kind: MatmulKind) -> Result<Var> {
        let out = self.flops.matmul_bt(kind, self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMulBt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds the vector `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.len() != x.cols() {
            return Err(Error::shape("add_row", x.shape(), b.shape()));
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddRow(a, bias)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Result<Var> {
        let out = self.value(a).gather_rows(&rows)?;
        Ok(self.push(out, Op::GatherRows(a, rows)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.gather_rows(a, (start..start + len).collect())
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&vals)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_cols(&vals)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = numerics::softmax_rows_dense(self.value(a));
        self.push(out, Op::Softmax(a))
    }

    /// Row-wise layer normalization with per-column gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let cols = xv.cols();
        if g.len() != cols || b.len() != cols {
            return Err(Error::shape("layer_norm", xv.shape(), g.shape()));
        }
        let mut xhat = xv.clone();
        let mut rstd = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xhat.row_mut(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * s;
            }
            rstd.push(s);
        }
        let mut out = xhat.clone();
        for r in 0..out.rows() {
            for ((o, &gv), &bv) in out.row_mut(r).iter_mut().zip(g.data()).zip(b.data()) {
                *o = *o * gv + bv;
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a))
    }

    /// Column means, as a `1 x cols` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Tensor::zeros(&[1, x.cols()]);
        let inv = 1.0 / x.rows() as f64;
        for r in 0..x.rows() {
            for (o, &v) in out.data_mut().iter_mut().zip(x.row(r)) {
                *o += v * inv;
            }
        }
        self.push(out, Op::MeanRows(a))
    }

    /// Elementwise mean of equally shaped tensors.
    pub fn average(&mut self, parts: &[Var]) -> Result<Var> {
        let mut acc = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            acc = acc.add(self.value(p))?;
        }
        let out = acc.scale(1.0 / parts.len() as f64);
        Ok(self.push(out, Op::Average(parts.to_vec())))
    }

    /// Mean softmax cross-entropy of `logits` rows against `labels`, as a
    /// `1 x 1` tensor.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        if labels.len() != z.rows() {
            return Err(Error::shape("cross_entropy", z.shape(), &[labels.len()]));
        }
        let classes = z.cols();
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Label { label, classes });
        }
        let probs = numerics::softmax_rows_dense(z);
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = z.row(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        let out = Tensor::full(&[1, 1], loss / labels.len() as f64);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Back-propagates `seed * d(root)` through the tape. `root` is treated
    /// as summed if it is not a scalar.
    pub fn backward(&self, root: Var, seed: f64) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let rv = self.value(root);
        grads[root.0] = Some(Tensor::full(rv.shape(), seed));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = numerics::matmul_bt(&g, self.value(*b))?;
                    let db = numerics::matmul(&self.value(*a).transpose(), &g)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::MatMulBt(a, b) => {
                    let da = numerics::matmul(&g, self.value(*b))?;
                    let db = numerics::matmul(&g.transpose(), self.value(*a))?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::AddRow(a, bias) => {
                    let mut db = Tensor::zeros(self.value(*bias).shape());
                    for r in 0..g.rows() {
                        for (o, &v) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *a, g)?;
                    accumulate(&mut grads, *bias, db)?;
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s))?,
                Op::GatherRows(a, rows) => {
                    let mut da = Tensor::zeros(self.value(*a).shape());
                    for (k, &r) in rows.iter().enumerate() {
                        for (o, &v) in da.row_mut(r).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.value(p).rows();
                        accumulate(&mut grads, p, g.slice_rows(start, n)?)?;
                        start += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let c = pv.cols();
                        let mut dp = Tensor::zeros(pv.shape());
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[start..start + c]);
                        }
                        accumulate(&mut grads, p, dp)?;
                        start += c;
                    }
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut da = y.clone();
                    for r in 0..y.rows() {
                        let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                        for ((o, &yv), &gv) in da.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                            *o = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let gv = self.value(*gain);
                    let cols = xhat.cols();
                    let mut dgain = Tensor::zeros(gv.shape());
                    let mut dbias = Tensor::zeros(self.value(*bias).shape());
                    let mut dx = Tensor::zeros(xhat.shape());
                    for (r, &rs) in rstd.iter().enumerate() {
                        let (gr, xr) = (g.row(r), xhat.row(r));
                        let mut dxhat = vec![0.0; cols];
                        for c in 0..cols {
                            dgain.data_mut()[c] += gr[c] * xr[c];
                            dbias.data_mut()[c] += gr[c];
                            dxhat[c] = gr[c] * gv.data()[c];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                        let mean_dx = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = rs * (dxhat[c] - mean_d - xr[c] * mean_dx);
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *gain, dgain)?;
                    accumulate(&mut grads, *bias, dbias)?;
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut da = g;
                    for (o, &xv) in da.data_mut().iter_mut().zip(x.data()) {
                        *o *= gelu_grad(xv);
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::MeanRows(a) => {
                    let x = self.value(*a);
                    let inv = 1.0 / x.rows() as f64;
                    let mut da = Tensor::zeros(x.shape());
                    for r in 0..x.rows() {
                        for (o, &v) in da.row_mut(r).iter_mut().zip(g.data()) {
                            *o = v * inv;
                        }
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::Average(parts) => {
                    let share = g.scale(1.0 / parts.len() as f64);
                    for &p in parts {
                        accumulate(&mut grads, p, share.clone())?;
                    }
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let upstream = g.data()[0] / labels.len() as f64;
                    let mut dz = probs.clone();
                    for (r, &y) in labels.iter().enumerate() {
                        dz.row_mut(r)[y] -= 1.0;
                    }
                    accumulate(&mut grads, *logits, dz.scale(upstream))?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(acc) => acc.axpy(1.0, &g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}
