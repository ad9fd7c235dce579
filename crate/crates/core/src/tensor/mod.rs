//! Reverse-mode autodiff on 2D f64 matrices.
//!
//! An eager Wengert tape: every operation computes its value immediately and
//! records enough to replay the chain rule backwards. Values are always
//! available during graph construction, which the model layers rely on for
//! data-dependent wiring (nearest-neighbor selection, argmin candidate picks,
//! fallback injection into degenerate attention rows).
//!
//! `checked` mode scans every freshly produced value and reports the first op
//! that yields a NaN or infinity instead of letting it propagate.

mod backward;
pub mod gradcheck;

pub use backward::Gradients;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major 2D array. Scalars are 1x1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{}x{} needs {} values, got {}", rows, cols, rows * cols, data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn full(rows: usize, cols: usize, v: f64) -> Self {
        Matrix { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn scalar(v: f64) -> Self {
        Matrix { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Single row from a flat slice.
    pub fn row_vec(data: &[f64]) -> Self {
        Matrix { rows: 1, cols: data.len(), data: data.to_vec() }
    }

    /// Single column from a flat slice.
    pub fn col_vec(data: &[f64]) -> Self {
        Matrix { rows: data.len(), cols: 1, data: data.to_vec() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }
}

/// y = a * b. Inner loop is over contiguous rows of both operands (ikj order)
/// so the optimizer can vectorize it.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("{} * {}", a.shape_str(), b.shape_str()),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    let n = b.cols;
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * n..(i + 1) * n];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * n..(k + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
    Ok(out)
}

/// y = a * b^T. Both operands stream row-wise; the dot product of two
/// contiguous rows vectorizes well.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::shape(
            "matmul_nt",
            format!("{} * {}^T", a.shape_str(), b.shape_str()),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            let brow = b.row(j);
            let mut acc = 0.0;
            for k in 0..a.cols {
                acc += arow[k] * brow[k];
            }
            out.data[i * b.rows + j] = acc;
        }
    }
    Ok(out)
}

/// y = a^T * b, accumulated row by row of `a` (rank-1 updates on contiguous
/// output rows).
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::shape(
            "matmul_tn",
            format!("{}^T * {}", a.shape_str(), b.shape_str()),
        ));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    let n = b.cols;
    for r in 0..a.rows {
        let arow = a.row(r);
        let brow = b.row(r);
        for (i, &ari) in arow.iter().enumerate() {
            if ari == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += ari * brow[j];
            }
        }
    }
    Ok(out)
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recorded operation. Index-valued fields capture forward-time decisions
/// (argmax positions, gather maps) that backward replays exactly.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    AddRow(Var, Var),
    DivRow(Var, Var),
    DivCol(Var, Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    RowNorm(Var),
    RowSum(Var),
    ColSum(Var),
    SumAll(Var),
    MeanAll(Var),
    BlockMax(Var, Vec<usize>),
    BlockMean(Var, usize),
    GatherRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    InterpRows(Var, Vec<[usize; 3]>, Vec<[f64; 3]>),
    Reshape(Var),
    CrossEntropyRows {
        x: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Matrix,
        weight_sum: f64,
    },
    SmoothL1 {
        x: Var,
        target: Matrix,
        weights: Vec<f64>,
        beta: f64,
        weight_sum: f64,
    },
}

pub(crate) struct Node {
    pub(crate) value: Matrix,
    pub(crate) op: Op,
}

/// Eager autodiff tape. One tape per forward pass; dropped afterwards.
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    checked: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), checked: false }
    }

    /// A tape that rejects the first op producing NaN or +-inf.
    pub fn checked() -> Self {
        Tape { nodes: Vec::new(), checked: true }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value.data[0]
    }

    fn push(&mut self, op: &'static str, value: Matrix, rec: Op) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        self.nodes.push(Node { value, op: rec });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(Matrix::scalar(v))
    }

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !va.same_shape(vb) {
            return Err(Error::shape(op, format!("{} vs {}", va.shape_str(), vb.shape_str())));
        }
        Ok((va.rows, va.cols))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let v = {
            let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            Matrix {
                rows: va.rows,
                cols: va.cols,
                data: va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect(),
            }
        };
        self.push("add", v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let v = {
            let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            Matrix {
                rows: va.rows,
                cols: va.cols,
                data: va.data.iter().zip(&vb.data).map(|(x, y)| x - y).collect(),
            }
        };
        self.push("sub", v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let v = {
            let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            Matrix {
                rows: va.rows,
                cols: va.cols,
                data: va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect(),
            }
        };
        self.push("mul", v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.nodes[a.0].value.map(|x| x * c);
        self.push("scale", v, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.nodes[a.0].value.map(|x| x + c);
        self.push("add_const", v, Op::AddConst(a))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        self.push("matmul", v, Op::MatMul(a, b))
    }

    /// a * b^T
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul_nt(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        self.push("matmul_nt", v, Op::MatMulNT(a, b))
    }

    /// Add a 1xC row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = {
            let (va, vr) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
            if vr.rows != 1 || vr.cols != va.cols {
                return Err(Error::shape(
                    "add_row",
                    format!("{} + row {}", va.shape_str(), vr.shape_str()),
                ));
            }
            let mut out = va.clone();
            for r in 0..out.rows {
                let orow = out.row_mut(r);
                for c in 0..vr.cols {
                    orow[c] += vr.data[c];
                }
            }
            out
        };
        self.push("add_row", v, Op::AddRow(a, row))
    }

    /// Divide every column entry of `a` by the matching entry of a 1xC row.
    pub fn div_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = {
            let (va, vr) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
            if vr.rows != 1 || vr.cols != va.cols {
                return Err(Error::shape(
                    "div_row",
                    format!("{} / row {}", va.shape_str(), vr.shape_str()),
                ));
            }
            let mut out = va.clone();
            for r in 0..out.rows {
                let orow = out.row_mut(r);
                for c in 0..vr.cols {
                    orow[c] /= vr.data[c];
                }
            }
            out
        };
        self.push("div_row", v, Op::DivRow(a, row))
    }

    /// Divide every row of `a` by the matching entry of an Rx1 column.
    pub fn div_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let v = {
            let (va, vc) = (&self.nodes[a.0].value, &self.nodes[col.0].value);
            if vc.cols != 1 || vc.rows != va.rows {
                return Err(Error::shape(
                    "div_col",
                    format!("{} / col {}", va.shape_str(), vc.shape_str()),
                ));
            }
            let mut out = va.clone();
            for r in 0..out.rows {
                let d = vc.data[r];
                for x in out.row_mut(r) {
                    *x /= d;
                }
            }
            out
        };
        self.push("div_col", v, Op::DivCol(a, col))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.nodes[a.0].value.map(|x| x.max(0.0));
        self.push("relu", v, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.nodes[a.0].value.map(f64::exp);
        self.push("exp", v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let v = self.nodes[a.0].value.map(f64::ln);
        self.push("ln", v, Op::Ln(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let v = self.nodes[a.0].value.map(|x| x.clamp(lo, hi));
        self.push("clamp", v, Op::Clamp(a, lo, hi))
    }

    /// Row-wise softmax, max-shifted for stability.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = {
            let va = &self.nodes[a.0].value;
            let mut out = Matrix::zeros(va.rows, va.cols);
            for r in 0..va.rows {
                let row = va.row(r);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let orow = out.row_mut(r);
                let mut denom = 0.0;
                for (o, &x) in orow.iter_mut().zip(row) {
                    *o = (x - m).exp();
                    denom += *o;
                }
                for o in orow.iter_mut() {
                    *o /= denom;
                }
            }
            out
        };
        self.push("softmax_rows", v, Op::SoftmaxRows(a))
    }

    /// Per-row L2 norm with eps inside the root: sqrt(sum x^2 + eps), Rx1.
    pub fn row_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let v = {
            let va = &self.nodes[a.0].value;
            let mut out = Matrix::zeros(va.rows, 1);
            for r in 0..va.rows {
                let s: f64 = va.row(r).iter().map(|x| x * x).sum();
                out.data[r] = (s + eps).sqrt();
            }
            out
        };
        self.push("row_norm", v, Op::RowNorm(a))
    }

    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let v = {
            let va = &self.nodes[a.0].value;
            let mut out = Matrix::zeros(va.rows, 1);
            for r in 0..va.rows {
                out.data[r] = va.row(r).iter().sum();
            }
            out
        };
        self.push("row_sum", v, Op::RowSum(a))
    }

    pub fn col_sum(&mut self, a: Var) -> Result<Var> {
        let v = {
            let va = &self.nodes[a.0].value;
            let mut out = Matrix::zeros(1, va.cols);
            for r in 0..va.rows {
                for (o, &x) in out.data.iter_mut().zip(va.row(r)) {
                    *o += x;
                }
            }
            out
        };
        self.push("col_sum", v, Op::ColSum(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.nodes[a.0].value.data.iter().sum();
        self.push("sum_all", Matrix::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let s: f64 = va.data.iter().sum();
        let n = va.len().max(1) as f64;
        self.push("mean_all", Matrix::scalar(s / n), Op::MeanAll(a))
    }

    /// Max over consecutive row blocks of size `block`; ties keep the first
    /// row so the result is independent of how equal values arose.
    pub fn block_max(&mut self, a: Var, block: usize) -> Result<Var> {
        let (v, arg) = {
            let va = &self.nodes[a.0].value;
            if block == 0 || va.rows % block != 0 {
                return Err(Error::shape(
                    "block_max",
                    format!("{} rows not divisible by block {}", va.rows, block),
                ));
            }
            let out_rows = va.rows / block;
            let mut out = Matrix::full(out_rows, va.cols, f64::NEG_INFINITY);
            let mut arg = vec![0usize; out_rows * va.cols];
            for g in 0..out_rows {
                for i in 0..block {
                    let r = g * block + i;
                    let row = va.row(r);
                    let orow = &mut out.data[g * va.cols..(g + 1) * va.cols];
                    for c in 0..va.cols {
                        if row[c] > orow[c] {
                            orow[c] = row[c];
                            arg[g * va.cols + c] = r;
                        }
                    }
                }
            }
            (out, arg)
        };
        self.push("block_max", v, Op::BlockMax(a, arg))
    }

    /// Mean over consecutive row blocks of size `block`.
    pub fn block_mean(&mut self, a: Var, block: usize) -> Result<Var> {
        let v = {
            let va = &self.nodes[a.0].value;
            if block == 0 || va.rows % block != 0 {
                return Err(Error::shape(
                    "block_mean",
                    format!("{} rows not divisible by block {}", va.rows, block),
                ));
            }
            let out_rows = va.rows / block;
            let mut out = Matrix::zeros(out_rows, va.cols);
            for g in 0..out_rows {
                for i in 0..block {
                    let row = va.row(g * block + i);
                    let orow = &mut out.data[g * va.cols..(g + 1) * va.cols];
                    for c in 0..va.cols {
                        orow[c] += row[c];
                    }
                }
            }
            let inv = 1.0 / block as f64;
            for x in &mut out.data {
                *x *= inv;
            }
            out
        };
        self.push("block_mean", v, Op::BlockMean(a, block))
    }

    /// Rows of `a` selected (possibly repeatedly) by `idx`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let v = {
            let va = &self.nodes[a.0].value;
            if let Some(&bad) = idx.iter().find(|&&i| i >= va.rows) {
                return Err(Error::shape(
                    "gather_rows",
                    format!("index {} out of {} rows", bad, va.rows),
                ));
            }
            let mut out = Matrix::zeros(idx.len(), va.cols);
            for (o, &i) in idx.iter().enumerate() {
                out.row_mut(o).copy_from_slice(va.row(i));
            }
            out
        };
        self.push("gather_rows", v, Op::GatherRows(a, idx.to_vec()))
    }

    /// One entry per row: out[r, 0] = a[r, idx[r]].
    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let v = {
            let va = &self.nodes[a.0].value;
            if idx.len() != va.rows {
                return Err(Error::shape(
                    "gather_cols",
                    format!("{} indices for {} rows", idx.len(), va.rows),
                ));
            }
            if let Some(&bad) = idx.iter().find(|&&c| c >= va.cols) {
                return Err(Error::shape(
                    "gather_cols",
                    format!("column {} out of {}", bad, va.cols),
                ));
            }
            let mut out = Matrix::zeros(va.rows, 1);
            for (r, &c) in idx.iter().enumerate() {
                out.data[r] = va.get(r, c);
            }
            out
        };
        self.push("gather_cols", v, Op::GatherCols(a, idx.to_vec()))
    }

    /// Columns `[start, end)` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = {
            let va = &self.nodes[a.0].value;
            if start > end || end > va.cols {
                return Err(Error::shape(
                    "slice_cols",
                    format!("[{start}, {end}) of {} cols", va.cols),
                ));
            }
            let mut out = Matrix::zeros(va.rows, end - start);
            for r in 0..va.rows {
                out.row_mut(r).copy_from_slice(&va.row(r)[start..end]);
            }
            out
        };
        self.push("slice_cols", v, Op::SliceCols(a, start))
    }

    /// Horizontal concatenation; all parts must share a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no parts".to_string()));
        }
        let v = {
            let rows = self.nodes[parts[0].0].value.rows;
            let total: usize = parts.iter().map(|p| self.nodes[p.0].value.cols).sum();
            let mut out = Matrix::zeros(rows, total);
            let mut at = 0;
            for p in parts {
                let vp = &self.nodes[p.0].value;
                if vp.rows != rows {
                    return Err(Error::shape(
                        "concat_cols",
                        format!("{} rows vs {}", vp.rows, rows),
                    ));
                }
                for r in 0..rows {
                    out.row_mut(r)[at..at + vp.cols].copy_from_slice(vp.row(r));
                }
                at += vp.cols;
            }
            out
        };
        self.push("concat_cols", v, Op::ConcatCols(parts.to_vec()))
    }

    /// Weighted blend of three source rows per output row:
    /// out[r] = sum_k w[r][k] * a[idx[r][k]].
    pub fn interp_rows(&mut self, a: Var, idx: &[[usize; 3]], w: &[[f64; 3]]) -> Result<Var> {
        if idx.len() != w.len() {
            return Err(Error::shape(
                "interp_rows",
                format!("{} index triples vs {} weight triples", idx.len(), w.len()),
            ));
        }
        let v = {
            let va = &self.nodes[a.0].value;
            if let Some(bad) = idx.iter().flatten().find(|&&i| i >= va.rows) {
                return Err(Error::shape(
                    "interp_rows",
                    format!("index {} out of {} rows", bad, va.rows),
                ));
            }
            let mut out = Matrix::zeros(idx.len(), va.cols);
            for (r, (tri, wr)) in idx.iter().zip(w).enumerate() {
                let orow = out.row_mut(r);
                for k in 0..3 {
                    let srow = va.row(tri[k]);
                    for c in 0..orow.len() {
                        orow[c] += wr[k] * srow[c];
                    }
                }
            }
            out
        };
        self.push("interp_rows", v, Op::InterpRows(a, idx.to_vec(), w.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let v = {
            let va = &self.nodes[a.0].value;
            if rows * cols != va.len() {
                return Err(Error::shape(
                    "reshape",
                    format!("{} -> {}x{}", va.shape_str(), rows, cols),
                ));
            }
            Matrix { rows, cols, data: va.data.clone() }
        };
        self.push("reshape", v, Op::Reshape(a))
    }

    /// Weighted mean cross-entropy over rows of logits, one target class per
    /// row. Rows with weight 0 contribute nothing; the total is divided by
    /// the weight sum (0 if all weights are 0).
    pub fn cross_entropy_rows(&mut self, x: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let (v, probs, weight_sum) = {
            let vx = &self.nodes[x.0].value;
            if targets.len() != vx.rows || weights.len() != vx.rows {
                return Err(Error::shape(
                    "cross_entropy_rows",
                    format!("{} rows vs {} targets / {} weights", vx.rows, targets.len(), weights.len()),
                ));
            }
            if let Some(&bad) = targets.iter().find(|&&t| t >= vx.cols) {
                return Err(Error::shape(
                    "cross_entropy_rows",
                    format!("target {} out of {} classes", bad, vx.cols),
                ));
            }
            let mut probs = Matrix::zeros(vx.rows, vx.cols);
            let mut total = 0.0;
            let mut wsum = 0.0;
            for r in 0..vx.rows {
                let row = vx.row(r);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let prow = probs.row_mut(r);
                let mut denom = 0.0;
                for (p, &v) in prow.iter_mut().zip(row) {
                    *p = (v - m).exp();
                    denom += *p;
                }
                for p in prow.iter_mut() {
                    *p /= denom;
                }
                let w = weights[r];
                if w != 0.0 {
                    total -= w * prow[targets[r]].max(1e-300).ln();
                    wsum += w;
                }
            }
            let mean = if wsum > 0.0 { total / wsum } else { 0.0 };
            (Matrix::scalar(mean), probs, wsum)
        };
        self.push(
            "cross_entropy_rows",
            v,
            Op::CrossEntropyRows {
                x,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
                weight_sum,
            },
        )
    }

    /// Weighted mean smooth-L1 distance to a constant target, summed over
    /// columns within a row, divided by the weight sum.
    pub fn smooth_l1(&mut self, x: Var, target: &Matrix, weights: &[f64], beta: f64) -> Result<Var> {
        let (v, weight_sum) = {
            let vx = &self.nodes[x.0].value;
            if !vx.same_shape(target) {
                return Err(Error::shape(
                    "smooth_l1",
                    format!("{} vs target {}", vx.shape_str(), target.shape_str()),
                ));
            }
            if weights.len() != vx.rows {
                return Err(Error::shape(
                    "smooth_l1",
                    format!("{} rows vs {} weights", vx.rows, weights.len()),
                ));
            }
            if beta <= 0.0 {
                return Err(Error::shape("smooth_l1", format!("beta {beta} must be > 0")));
            }
            let mut total = 0.0;
            let mut wsum = 0.0;
            for r in 0..vx.rows {
                let w = weights[r];
                if w == 0.0 {
                    continue;
                }
                wsum += w;
                let mut acc = 0.0;
                for (x, t) in vx.row(r).iter().zip(target.row(r)) {
                    let d = (x - t).abs();
                    acc += if d < beta { 0.5 * d * d / beta } else { d - 0.5 * beta };
                }
                total += w * acc;
            }
            let mean = if wsum > 0.0 { total / wsum } else { 0.0 };
            (Matrix::scalar(mean), wsum)
        };
        self.push(
            "smooth_l1",
            v,
            Op::SmoothL1 {
                x,
                target: target.clone(),
                weights: weights.to_vec(),
                beta,
                weight_sum,
            },
        )
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Matrix {
        Matrix::new(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_matches_hand_result() {
        let a = m(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = m(3, 2, &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let y = matmul(&a, &b).unwrap();
        assert_eq!(y.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_variants_agree_with_explicit_transpose() {
        let a = m(2, 3, &[1.0, -2.0, 3.0, 0.5, 4.0, -1.0]);
        let b = m(4, 3, &[2.0, 1.0, 0.0, -1.0, 3.0, 2.0, 0.0, 0.5, 1.0, 2.0, 2.0, 2.0]);
        let nt = matmul_nt(&a, &b).unwrap();
        let via_t = matmul(&a, &b.transpose()).unwrap();
        assert_eq!(nt, via_t);

        let c = m(2, 4, &[1.0, 0.0, 2.0, -1.0, 3.0, 1.0, 0.0, 2.0]);
        let tn = matmul_tn(&a, &c).unwrap();
        let via_t2 = matmul(&a.transpose(), &c).unwrap();
        for (x, y) in tn.data().iter().zip(via_t2.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_rejects_mismatched_shapes() {
        let a = m(2, 3, &[0.0; 6]);
        let b = m(2, 3, &[0.0; 6]);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_order_preserved() {
        let mut t = Tape::new();
        let x = t.leaf(m(2, 3, &[1.0, 2.0, 3.0, -1000.0, 0.0, 1000.0]));
        let y = t.softmax_rows(x).unwrap();
        let v = t.value(y);
        for r in 0..2 {
            let s: f64 = v.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(v.get(0, 2) > v.get(0, 1) && v.get(0, 1) > v.get(0, 0));
        // Extreme logits stay finite thanks to max shifting.
        assert!(v.is_finite());
    }

    #[test]
    fn block_max_takes_first_of_ties() {
        let mut t = Tape::new();
        let x = t.leaf(m(4, 2, &[1.0, 5.0, 3.0, 5.0, 0.0, 0.0, -1.0, 2.0]));
        let y = t.block_max(x, 2).unwrap();
        assert_eq!(t.value(y).data(), &[3.0, 5.0, 0.0, 2.0]);
        // Tie in column 1 of block 0: backward must route to row 0.
        match &t.nodes[y.0].op {
            Op::BlockMax(_, arg) => assert_eq!(arg, &[1, 0, 2, 3]),
            _ => unreachable!(),
        }
    }

    #[test]
    fn checked_mode_catches_non_finite() {
        let mut t = Tape::checked();
        let x = t.leaf(m(1, 2, &[1000.0, 0.0]));
        let e = t.exp(x);
        assert!(matches!(e, Err(Error::NonFinite { op: "exp" })));

        let mut u = Tape::new();
        let x = u.leaf(m(1, 2, &[1000.0, 0.0]));
        assert!(u.exp(x).is_ok());
    }

    #[test]
    fn gather_and_slice_round_trip() {
        let mut t = Tape::new();
        let x = t.leaf(m(3, 4, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0]));
        let g = t.gather_rows(x, &[2, 0, 2]).unwrap();
        assert_eq!(t.value(g).row(0), &[8.0, 9.0, 10.0, 11.0]);
        assert_eq!(t.value(g).row(2), &[8.0, 9.0, 10.0, 11.0]);
        let s = t.slice_cols(x, 1, 3).unwrap();
        assert_eq!(t.value(s).row(1), &[5.0, 6.0]);
        let c = t.gather_cols(x, &[3, 0, 2]).unwrap();
        assert_eq!(t.value(c).data(), &[3.0, 4.0, 10.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_classes() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::zeros(4, 8));
        let ce = t.cross_entropy_rows(x, &[0, 3, 5, 7], &[1.0; 4]).unwrap();
        assert!((t.scalar_value(ce) - (8.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_ignores_zero_weight_rows() {
        let mut t = Tape::new();
        let x = t.leaf(m(2, 2, &[100.0, 0.0, 0.0, 100.0]));
        // Row 0 is a confident wrong answer but has weight 0.
        let ce = t.cross_entropy_rows(x, &[1, 1], &[0.0, 1.0]).unwrap();
        assert!(t.scalar_value(ce) < 1e-12);
    }

    #[test]
    fn smooth_l1_quadratic_near_linear_far() {
        let mut t = Tape::new();
        let x = t.leaf(m(2, 1, &[0.5, 3.0]));
        let target = Matrix::zeros(2, 1);
        let near = t.smooth_l1(x, &target, &[1.0, 0.0], 1.0).unwrap();
        assert!((t.scalar_value(near) - 0.125).abs() < 1e-12);
        let far = t.smooth_l1(x, &target, &[0.0, 1.0], 1.0).unwrap();
        assert!((t.scalar_value(far) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn interp_rows_blends_sources() {
        let mut t = Tape::new();
        let x = t.leaf(m(3, 2, &[0.0, 0.0, 1.0, 10.0, 2.0, 20.0]));
        let y = t
            .interp_rows(x, &[[1, 2, 0]], &[[0.25, 0.75, 0.0]])
            .unwrap();
        assert_eq!(t.value(y).data(), &[1.75, 17.5]);
    }

    #[test]
    fn row_norm_includes_eps_inside_root() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::zeros(1, 3));
        let n = t.row_norm(x, 1e-12).unwrap();
        assert!((t.scalar_value(n) - 1e-6).abs() < 1e-18);
    }
}
