//! Reverse-mode automatic differentiation on a flat tape.
//!
//! The adaptation loop needs exact gradients of the entropy objectives with
//! respect to the normalization scale/shift vectors, through the full encoder
//! forward pass. The op set below is exactly what that forward pass and the
//! losses are built from; every `backward` case is checked against central
//! finite differences in the tests.

use crate::error::{MlmpError, Result};
use crate::tensor::Mat;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Constant input; no gradient tracked.
    Leaf,
    /// Differentiable input; gradient accumulated during backward.
    Param,
    MatMul(Var, Var),
    /// `a (m x k) * b^T (n x k)`.
    MatMulNT(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    /// Matrix plus a 1 x cols row vector broadcast over rows.
    AddRow(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    Gelu(Var),
    SoftmaxRows(Var),
    /// Sum over rows of the Shannon entropy of `softmax(row)`, in nats. 1x1 output.
    SoftmaxEntropySum(Var),
    L2NormalizeRows(Var),
    SliceRows {
        x: Var,
        start: usize,
        len: usize,
    },
    Exp(Var),
    Recip(Var),
    Mul(Var, Var),
    /// 1x1 scalar times a matrix.
    ScalarMul(Var, Var),
    SumAll(Var),
    VStack(Vec<Var>),
}

struct Node {
    op: Op,
    value: Mat,
}

/// Wengert-list tape. Build the graph forward, then call [`Tape::backward`]
/// on a 1x1 output node and read gradients of `Param` leaves.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.shape(), (1, 1));
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, op: Op, value: Mat) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn param(&mut self, value: Mat) -> Var {
        self.push(Op::Param, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(Op::MatMulNT(a, b), v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.value(a).add_row(self.value(row))?;
        Ok(self.push(Op::AddRow(a, row), v))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let v = crate::tensor::layer_norm_rows(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(Op::LayerNorm { x, gamma, beta, eps }, v))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(crate::tensor::gelu);
        self.push(Op::Gelu(x), v)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = self.value(x).softmax_rows();
        self.push(Op::SoftmaxRows(x), v)
    }

    pub fn softmax_entropy_sum(&mut self, logits: Var) -> Var {
        let x = self.value(logits);
        let mut total = 0.0;
        for r in 0..x.rows() {
            total += row_softmax_entropy(x.row(r)).0;
        }
        let v = Mat::from_vec(1, 1, vec![total]).expect("1x1");
        self.push(Op::SoftmaxEntropySum(logits), v)
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).l2_normalize_rows()?;
        Ok(self.push(Op::L2NormalizeRows(x), v))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).slice_rows(start, len)?;
        Ok(self.push(Op::SliceRows { x, start, len }, v))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::exp);
        self.push(Op::Exp(x), v)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|t| 1.0 / t);
        self.push(Op::Recip(x), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scalar_mul(&mut self, s: Var, m: Var) -> Result<Var> {
        if self.value(s).shape() != (1, 1) {
            return Err(MlmpError::shape("1x1 scalar", format!("{:?}", self.value(s).shape())));
        }
        let c = self.scalar(s);
        let v = self.value(m).scale(c);
        Ok(self.push(Op::ScalarMul(s, m), v))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let v = Mat::from_vec(1, 1, vec![s]).expect("1x1");
        self.push(Op::SumAll(x), v)
    }

    pub fn vstack(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Mat> = parts.iter().map(|v| self.value(*v)).collect();
        let v = Mat::vstack(&mats)?;
        Ok(self.push(Op::VStack(parts.to_vec()), v))
    }

    /// Sums a list of same-shape vars.
    pub fn add_many(&mut self, vars: &[Var]) -> Result<Var> {
        let mut it = vars.iter();
        let mut acc = *it
            .next()
            .ok_or_else(|| MlmpError::invalid("add_many of zero vars"))?;
        for v in it {
            acc = self.add(acc, *v)?;
        }
        Ok(acc)
    }

    /// Runs reverse accumulation from a 1x1 `output` node and returns the
    /// gradient of every node (None where no gradient flows).
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).shape() != (1, 1) {
            return Err(MlmpError::invalid(
                "backward seed must be a 1x1 scalar node",
            ));
        }
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Mat::from_vec(1, 1, vec![1.0])?);

        for idx in (0..=output.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Leaf | Op::Param => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_nt(self.value(*b))?; // G * B^T
                    let db = self.value(*a).transpose().matmul(&g)?; // A^T * G
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::MatMulNT(a, b) => {
                    // C = A * B^T: dA = G * B, dB = G^T * A
                    let da = g.matmul(self.value(*b))?;
                    let db = g.transpose().matmul(self.value(*a))?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, g.scale(*c))?;
                }
                Op::AddRow(a, row) => {
                    let cols = g.cols();
                    let mut drow = Mat::zeros(1, cols);
                    for r in 0..g.rows() {
                        for c in 0..cols {
                            drow.data_mut()[c] += g.get(r, c);
                        }
                    }
                    accumulate(&mut grads, *a, g)?;
                    accumulate(&mut grads, *row, drow)?;
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let (dx, dgamma, dbeta) =
                        layer_norm_backward(self.value(*x), self.value(*gamma), *eps, &g);
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *gamma, dgamma)?;
                    accumulate(&mut grads, *beta, dbeta)?;
                }
                Op::Gelu(x) => {
                    let dx = self.value(*x).map(gelu_grad).hadamard(&g)?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::SoftmaxRows(x) => {
                    let p = &self.nodes[idx].value;
                    let mut dx = p.clone();
                    for r in 0..p.rows() {
                        let dot: f64 = p
                            .row(r)
                            .iter()
                            .zip(g.row(r))
                            .map(|(&pi, &gi)| pi * gi)
                            .sum();
                        let row = dx.row_mut(r);
                        for (c, v) in row.iter_mut().enumerate() {
                            *v *= g.get(r, c) - dot;
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::SoftmaxEntropySum(x) => {
                    // dH/dz_j = -p_j (log p_j + h_row), per row, scaled by the
                    // incoming scalar gradient.
                    let gscalar = g.data()[0];
                    let z = self.value(*x);
                    let mut dx = Mat::zeros(z.rows(), z.cols());
                    for r in 0..z.rows() {
                        let (h_row, p, logp) = row_softmax_entropy_full(z.row(r));
                        for (c, slot) in dx.row_mut(r).iter_mut().enumerate() {
                            *slot = -gscalar * p[c] * (logp[c] + h_row);
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::L2NormalizeRows(x) => {
                    let xv = self.value(*x);
                    let y = &self.nodes[idx].value;
                    let mut dx = Mat::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        let norm = xv.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                        let dot: f64 = y
                            .row(r)
                            .iter()
                            .zip(g.row(r))
                            .map(|(&yi, &gi)| yi * gi)
                            .sum();
                        for (c, slot) in dx.row_mut(r).iter_mut().enumerate() {
                            *slot = (g.get(r, c) - y.get(r, c) * dot) / norm;
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::SliceRows { x, start, len } => {
                    let xv = self.value(*x);
                    let mut dx = Mat::zeros(xv.rows(), xv.cols());
                    for r in 0..*len {
                        let src = g.row(r).to_vec();
                        dx.row_mut(start + r).copy_from_slice(&src);
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Exp(x) => {
                    let dx = self.nodes[idx].value.hadamard(&g)?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Recip(x) => {
                    let y = &self.nodes[idx].value;
                    let dx = y.hadamard(y)?.scale(-1.0).hadamard(&g)?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Mul(a, b) => {
                    let da = self.value(*b).hadamard(&g)?;
                    let db = self.value(*a).hadamard(&g)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::ScalarMul(s, m) => {
                    let c = self.scalar(*s);
                    let ds: f64 = self
                        .value(*m)
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&mi, &gi)| mi * gi)
                        .sum();
                    accumulate(&mut grads, *s, Mat::from_vec(1, 1, vec![ds])?)?;
                    accumulate(&mut grads, *m, g.scale(c))?;
                }
                Op::SumAll(x) => {
                    let xv = self.value(*x);
                    let gscalar = g.data()[0];
                    let dx = Mat::from_fn(xv.rows(), xv.cols(), |_, _| gscalar);
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::VStack(parts) => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let rows = self.value(p).rows();
                        let piece = g.slice_rows(offset, rows)?;
                        offset += rows;
                        accumulate(&mut grads, p, piece)?;
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients indexed by [`Var`] after a backward pass.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient of a node; zeros if no gradient reached it.
    pub fn get(&self, v: Var, shape_of: &Mat) -> Mat {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Mat::zeros(shape_of.rows(), shape_of.cols()),
        }
    }

    pub fn try_get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => {
            *existing = existing.add(&g)?;
        }
        slot @ None => {
            *slot = Some(g);
        }
    }
    Ok(())
}

fn gelu_grad(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.7978845608028654;
    let inner = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// Entropy of `softmax(row)` in nats, computed via log-sum-exp.
fn row_softmax_entropy(row: &[f64]) -> (f64, Vec<f64>) {
    let (h, p, _) = row_softmax_entropy_full(row);
    (h, p)
}

fn row_softmax_entropy_full(row: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &v in row {
        sum += (v - max).exp();
    }
    let lse = max + sum.ln();
    let logp: Vec<f64> = row.iter().map(|&v| v - lse).collect();
    let p: Vec<f64> = logp.iter().map(|&lp| lp.exp()).collect();
    let h = -p.iter().zip(&logp).map(|(&pi, &lpi)| pi * lpi).sum::<f64>();
    (h, p, logp)
}

/// Backward pass of row-wise layer norm. Returns (dx, dgamma, dbeta).
fn layer_norm_backward(x: &Mat, gamma: &Mat, eps: f64, g: &Mat) -> (Mat, Mat, Mat) {
    let (rows, cols) = x.shape();
    let n = cols as f64;
    let mut dx = Mat::zeros(rows, cols);
    let mut dgamma = Mat::zeros(1, cols);
    let mut dbeta = Mat::zeros(1, cols);
    for r in 0..rows {
        let xr = x.row(r);
        let mean = xr.iter().sum::<f64>() / n;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let rstd = 1.0 / (var + eps).sqrt();
        let xhat: Vec<f64> = xr.iter().map(|&v| (v - mean) * rstd).collect();
        let gr = g.row(r);

        let mut gprime = vec![0.0; cols];
        let mut mean_g = 0.0;
        let mut mean_gx = 0.0;
        for c in 0..cols {
            dgamma.data_mut()[c] += gr[c] * xhat[c];
            dbeta.data_mut()[c] += gr[c];
            gprime[c] = gr[c] * gamma.data()[c];
            mean_g += gprime[c];
            mean_gx += gprime[c] * xhat[c];
        }
        mean_g /= n;
        mean_gx /= n;
        let dxr = dx.row_mut(r);
        for c in 0..cols {
            dxr[c] = rstd * (gprime[c] - mean_g - xhat[c] * mean_gx);
        }
    }
    (dx, dgamma, dbeta)
}
