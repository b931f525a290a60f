//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every value on the tape is a row-major matrix. Binary elementwise ops
//! broadcast their right operand when it is a single column, a single row or
//! a single element. Parameters are borrowed rather than copied, so a tape
//! lives no longer than the networks that fed it.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub rows: usize,
    pub cols: usize,
}

impl Dims {
    pub fn new(rows: usize, cols: usize) -> Self {
        Dims { rows, cols }
    }

    pub fn len(self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Full,
    Col,
    Row,
    Scalar,
}

impl Broadcast {
    fn resolve(lhs: Dims, rhs: Dims) -> Result<Self> {
        if rhs == lhs {
            Ok(Broadcast::Full)
        } else if rhs.rows == 1 && rhs.cols == 1 {
            Ok(Broadcast::Scalar)
        } else if rhs.cols == 1 && rhs.rows == lhs.rows {
            Ok(Broadcast::Col)
        } else if rhs.rows == 1 && rhs.cols == lhs.cols {
            Ok(Broadcast::Row)
        } else if rhs.rows != lhs.rows && rhs.rows != 1 {
            Err(Error::Dimension {
                axis: 0,
                expected: lhs.rows,
                got: rhs.rows,
            })
        } else {
            Err(Error::Dimension {
                axis: 1,
                expected: lhs.cols,
                got: rhs.cols,
            })
        }
    }

    #[inline]
    fn index(self, cols: usize, r: usize, c: usize) -> usize {
        match self {
            Broadcast::Full => r * cols + c,
            Broadcast::Col => r,
            Broadcast::Row => c,
            Broadcast::Scalar => 0,
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, f64),
    Mish(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    LayerNorm(Var, Vec<f64>),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
}

struct Node<'a> {
    dims: Dims,
    value: Cow<'a, [f64]>,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation for later reverse-mode differentiation.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

const LN_EPS: f64 = 1e-5;

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn mish(x: f64) -> f64 {
    x * softplus(x).tanh()
}

#[inline]
fn mish_grad(x: f64) -> f64 {
    let t = softplus(x).tanh();
    t + x * sigmoid(x) * (1.0 - t * t)
}

/// `c (+)= op(a) · op(b)` for row-major operands; `op` optionally transposes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked above against the strides passed in,
    // and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, dims: Dims, value: Cow<'a, [f64]>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(dims.len(), value.len());
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            dims,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned input that never receives a gradient.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                axis: 0,
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(self.push(Dims::new(rows, cols), Cow::Owned(data), Op::Leaf, false))
    }

    /// Owned input whose gradient will be reported by `backward`.
    pub fn variable(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                axis: 0,
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(self.push(Dims::new(rows, cols), Cow::Owned(data), Op::Leaf, true))
    }

    /// Borrows a parameter tensor; `trainable` decides whether it collects gradients.
    pub fn param(&mut self, tensor: &'a Tensor, trainable: bool) -> Var {
        let (rows, cols) = tensor.as_matrix_dims();
        self.push(
            Dims::new(rows, cols),
            Cow::Borrowed(tensor.data()),
            Op::Leaf,
            trainable,
        )
    }

    pub fn dims(&self, v: Var) -> Dims {
        self.nodes[v.0].dims
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let n = &self.nodes[v.0];
        if n.dims.len() != 1 {
            return Err(Error::Contract(format!(
                "expected scalar, found {}x{}",
                n.dims.rows, n.dims.cols
            )));
        }
        Ok(n.value[0])
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da.cols != db.rows {
            return Err(Error::Dimension {
                axis: 1,
                expected: db.rows,
                got: da.cols,
            });
        }
        let mut out = vec![0.0; da.rows * db.cols];
        gemm(
            da.rows,
            da.cols,
            db.cols,
            self.value(a),
            false,
            self.value(b),
            false,
            &mut out,
            false,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Dims::new(da.rows, db.cols),
            Cow::Owned(out),
            Op::MatMul(a, b),
            ng,
        ))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(Broadcast) -> Op,
    ) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        let bc = Broadcast::resolve(da, db)?;
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(da.len());
        for r in 0..da.rows {
            for c in 0..da.cols {
                out.push(f(av[r * da.cols + c], bv[bc.index(da.cols, r, c)]));
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(da, Cow::Owned(out), op(bc), ng))
    }

    /// `a + b`, broadcasting `b`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, |bc| Op::Add(a, b, bc))
    }

    /// `a − b`, broadcasting `b`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, |bc| Op::Sub(a, b, bc))
    }

    /// `a ⊙ b`, broadcasting `b`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, |bc| Op::Mul(a, b, bc))
    }

    /// Elementwise minimum of two same-shape values.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            let (da, db) = (self.dims(a), self.dims(b));
            return Err(Error::Dimension {
                axis: if da.rows != db.rows { 0 } else { 1 },
                expected: if da.rows != db.rows { da.rows } else { da.cols },
                got: if da.rows != db.rows { db.rows } else { db.cols },
            });
        }
        self.binary(a, b, f64::min, |_| Op::Minimum(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let d = self.dims(a);
        let out: Vec<f64> = self.value(a).iter().map(|&x| f(x)).collect();
        let ng = self.ng(a);
        self.push(d, Cow::Owned(out), op, ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| k * x, Op::Scale(a, k))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn mish(&mut self, a: Var) -> Var {
        self.unary(a, mish, Op::Mish(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Clamps into `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Per-row normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let d = self.dims(a);
        let av = self.value(a);
        let mut out = Vec::with_capacity(d.len());
        let mut inv_std = Vec::with_capacity(d.rows);
        for r in 0..d.rows {
            let row = &av[r * d.cols..(r + 1) * d.cols];
            let mean = row.iter().sum::<f64>() / d.cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d.cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            out.extend(row.iter().map(|x| (x - mean) * is));
        }
        let ng = self.ng(a);
        self.push(d, Cow::Owned(out), Op::LayerNorm(a, inv_std), ng)
    }

    /// Column-wise concatenation of values with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat of zero parts".into()));
        };
        let rows = self.dims(first).rows;
        let mut cols = 0;
        for &p in parts {
            let d = self.dims(p);
            if d.rows != rows {
                return Err(Error::Dimension {
                    axis: 0,
                    expected: rows,
                    got: d.rows,
                });
            }
            cols += d.cols;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let d = self.dims(p);
                out.extend_from_slice(&self.value(p)[r * d.cols..(r + 1) * d.cols]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Dims::new(rows, cols),
            Cow::Owned(out),
            Op::Concat(parts.to_vec()),
            ng,
        ))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let d = self.dims(a);
        if start + len > d.cols {
            return Err(Error::Dimension {
                axis: 1,
                expected: d.cols,
                got: start + len,
            });
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(d.rows * len);
        for r in 0..d.rows {
            out.extend_from_slice(&av[r * d.cols + start..r * d.cols + start + len]);
        }
        let ng = self.ng(a);
        Ok(self.push(
            Dims::new(d.rows, len),
            Cow::Owned(out),
            Op::SliceCols(a, start),
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(a);
        self.push(Dims::new(1, 1), Cow::Owned(vec![s]), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.dims(a).len().max(1) as f64;
        let s = self.value(a).iter().sum::<f64>() / n;
        let ng = self.ng(a);
        self.push(Dims::new(1, 1), Cow::Owned(vec![s]), Op::Mean(a), ng)
    }

    /// Sum across each row, producing a single column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let d = self.dims(a);
        let out: Vec<f64> = self
            .value(a)
            .chunks(d.cols.max(1))
            .map(|row| row.iter().sum())
            .collect();
        let ng = self.ng(a);
        self.push(Dims::new(d.rows, 1), Cow::Owned(out), Op::RowSum(a), ng)
    }

    /// Consumes the tape and returns d(loss)/d(node) for every node on the
    /// gradient path of a scalar `loss`.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes;
        let ld = nodes[loss.0].dims;
        if ld.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, found {}x{}",
                ld.rows, ld.cols
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        if !nodes[loss.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);

        fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'g mut [f64]> {
            if !nodes[v.0].needs_grad {
                return None;
            }
            let len = nodes[v.0].dims.len();
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let d = node.dims;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (da, db) = (nodes[a.0].dims, nodes[b.0].dims);
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        gemm(da.rows, d.cols, da.cols, &g, false, &nodes[b.0].value, true, ga, true);
                    }
                    if let Some(gb) = slot(&mut grads, &nodes, *b) {
                        gemm(db.rows, da.rows, db.cols, &nodes[a.0].value, true, &g, false, gb, true);
                    }
                }
                Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    }
                    if let Some(gb) = slot(&mut grads, &nodes, *b) {
                        for r in 0..d.rows {
                            for c in 0..d.cols {
                                gb[bc.index(d.cols, r, c)] += sign * g[r * d.cols + c];
                            }
                        }
                    }
                }
                Op::Mul(a, b, bc) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        for r in 0..d.rows {
                            for c in 0..d.cols {
                                let k = r * d.cols + c;
                                ga[k] += g[k] * bv[bc.index(d.cols, r, c)];
                            }
                        }
                    }
                    if let Some(gb) = slot(&mut grads, &nodes, *b) {
                        for r in 0..d.rows {
                            for c in 0..d.cols {
                                let k = r * d.cols + c;
                                gb[bc.index(d.cols, r, c)] += g[k] * av[k];
                            }
                        }
                    }
                }
                Op::Scale(a, k) => {
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += k * y);
                    }
                }
                Op::Mish(a) => {
                    let av = &nodes[a.0].value;
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        for k in 0..g.len() {
                            ga[k] += g[k] * mish_grad(av[k]);
                        }
                    }
                }
                Op::Relu(a) => {
                    let av = &nodes[a.0].value;
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        for k in 0..g.len() {
                            if av[k] > 0.0 {
                                ga[k] += g[k];
                            }
                        }
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        for k in 0..g.len() {
                            ga[k] += g[k] * (1.0 - y[k] * y[k]);
                        }
                    }
                }
                Op::Exp(a) => {
                    let y = &node.value;
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        for k in 0..g.len() {
                            ga[k] += g[k] * y[k];
                        }
                    }
                }
                Op::Square(a) => {
                    let av = &nodes[a.0].value;
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        for k in 0..g.len() {
                            ga[k] += 2.0 * g[k] * av[k];
                        }
                    }
                }
                Op::LayerNorm(a, inv_std) => {
                    let xhat = &node.value;
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        let n = d.cols as f64;
                        for r in 0..d.rows {
                            let row = r * d.cols..(r + 1) * d.cols;
                            let gr = &g[row.clone()];
                            let xr = &xhat[row.clone()];
                            let mean_g = gr.iter().sum::<f64>() / n;
                            let mean_gx = gr.iter().zip(xr).map(|(p, q)| p * q).sum::<f64>() / n;
                            for (k, idx) in row.enumerate() {
                                ga[idx] += inv_std[r] * (gr[k] - mean_g - xr[k] * mean_gx);
                            }
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let pc = nodes[p.0].dims.cols;
                        if let Some(gp) = slot(&mut grads, &nodes, *p) {
                            for r in 0..d.rows {
                                let src = &g[r * d.cols + offset..r * d.cols + offset + pc];
                                gp[r * pc..(r + 1) * pc]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(x, y)| *x += y);
                            }
                        }
                        offset += pc;
                    }
                }
                Op::SliceCols(a, start) => {
                    let ac = nodes[a.0].dims.cols;
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        for r in 0..d.rows {
                            for c in 0..d.cols {
                                ga[r * ac + start + c] += g[r * d.cols + c];
                            }
                        }
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    let av = &nodes[a.0].value;
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        for k in 0..g.len() {
                            if av[k] >= *lo && av[k] <= *hi {
                                ga[k] += g[k];
                            }
                        }
                    }
                }
                Op::Minimum(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        for k in 0..g.len() {
                            if av[k] <= bv[k] {
                                ga[k] += g[k];
                            }
                        }
                    }
                    if let Some(gb) = slot(&mut grads, &nodes, *b) {
                        for k in 0..g.len() {
                            if av[k] > bv[k] {
                                gb[k] += g[k];
                            }
                        }
                    }
                }
                Op::Sum(a) => {
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        ga.iter_mut().for_each(|x| *x += g[0]);
                    }
                }
                Op::Mean(a) => {
                    let n = nodes[a.0].dims.len().max(1) as f64;
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        ga.iter_mut().for_each(|x| *x += g[0] / n);
                    }
                }
                Op::RowSum(a) => {
                    let ac = nodes[a.0].dims.cols;
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        for r in 0..d.rows {
                            ga[r * ac..(r + 1) * ac].iter_mut().for_each(|x| *x += g[r]);
                        }
                    }
                }
            }
            // Interior nodes do not keep their gradient; only leaves are reported.
        }
        Ok(Gradients { grads })
    }
}
