//! Reverse pass over a recorded tape.

use super::{matmul, matmul_tn, matmul_nt, Matrix, Op, Tape, Var};
use crate::error::{Error, Result};

/// Per-node adjoints from one backward pass. Nodes the loss does not depend
/// on have no entry.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adjoint of `v`, or zeros of the given shape when the loss does not
    /// depend on it.
    pub fn get_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Matrix {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Matrix::zeros(rows, cols),
        }
    }
}

fn accumulate(slot: &mut Option<Matrix>, delta: Matrix) {
    match slot {
        Some(g) => {
            debug_assert!(g.same_shape(&delta));
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        None => *slot = Some(delta),
    }
}

impl Tape {
    /// Backpropagate from a scalar (1x1) node. Returns adjoints for every
    /// node the scalar depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be 1x1, got {}", lv.shape_str()),
            ));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.apply_op_backward(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn apply_op_backward(
        &self,
        node: usize,
        g: &Matrix,
        grads: &mut [Option<Matrix>],
    ) -> Result<()> {
        match &self.nodes[node].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(&mut grads[a.0], g.clone());
                accumulate(&mut grads[b.0], g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(&mut grads[a.0], g.clone());
                accumulate(&mut grads[b.0], g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let mut da = g.clone();
                for (d, s) in da.data_mut().iter_mut().zip(vb.data()) {
                    *d *= s;
                }
                let mut db = g.clone();
                for (d, s) in db.data_mut().iter_mut().zip(va.data()) {
                    *d *= s;
                }
                accumulate(&mut grads[a.0], da);
                accumulate(&mut grads[b.0], db);
            }
            Op::Scale(a, c) => {
                accumulate(&mut grads[a.0], g.map(|x| x * c));
            }
            Op::AddConst(a) => {
                accumulate(&mut grads[a.0], g.clone());
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                accumulate(&mut grads[a.0], matmul_nt(g, vb)?);
                accumulate(&mut grads[b.0], matmul_tn(va, g)?);
            }
            Op::MatMulNT(a, b) => {
                // y = a b^T: da = g b, db = g^T a.
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                accumulate(&mut grads[a.0], matmul(g, vb)?);
                accumulate(&mut grads[b.0], matmul_tn(g, va)?);
            }
            Op::AddRow(a, row) => {
                accumulate(&mut grads[a.0], g.clone());
                let mut dr = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (d, &x) in dr.data_mut().iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
                accumulate(&mut grads[row.0], dr);
            }
            Op::DivRow(a, row) => {
                let (va, vr) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
                let mut da = g.clone();
                for r in 0..da.rows() {
                    let drow = da.row_mut(r);
                    for (c, d) in drow.iter_mut().enumerate() {
                        *d /= vr.data()[c];
                    }
                }
                let mut dr = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        let s = vr.data()[c];
                        dr.data_mut()[c] -= g.get(r, c) * va.get(r, c) / (s * s);
                    }
                }
                accumulate(&mut grads[a.0], da);
                accumulate(&mut grads[row.0], dr);
            }
            Op::DivCol(a, col) => {
                let (va, vc) = (&self.nodes[a.0].value, &self.nodes[col.0].value);
                let mut da = g.clone();
                for r in 0..da.rows() {
                    let s = vc.data()[r];
                    for d in da.row_mut(r) {
                        *d /= s;
                    }
                }
                let mut dc = Matrix::zeros(g.rows(), 1);
                for r in 0..g.rows() {
                    let s = vc.data()[r];
                    let mut acc = 0.0;
                    for (gx, ax) in g.row(r).iter().zip(va.row(r)) {
                        acc -= gx * ax;
                    }
                    dc.data_mut()[r] = acc / (s * s);
                }
                accumulate(&mut grads[a.0], da);
                accumulate(&mut grads[col.0], dc);
            }
            Op::Relu(a) => {
                let va = &self.nodes[a.0].value;
                let mut da = g.clone();
                for (d, &x) in da.data_mut().iter_mut().zip(va.data()) {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                }
                accumulate(&mut grads[a.0], da);
            }
            Op::Exp(a) => {
                let vy = &self.nodes[node].value;
                let mut da = g.clone();
                for (d, &y) in da.data_mut().iter_mut().zip(vy.data()) {
                    *d *= y;
                }
                accumulate(&mut grads[a.0], da);
            }
            Op::Ln(a) => {
                let va = &self.nodes[a.0].value;
                let mut da = g.clone();
                for (d, &x) in da.data_mut().iter_mut().zip(va.data()) {
                    *d /= x;
                }
                accumulate(&mut grads[a.0], da);
            }
            Op::Clamp(a, lo, hi) => {
                let va = &self.nodes[a.0].value;
                let mut da = g.clone();
                for (d, &x) in da.data_mut().iter_mut().zip(va.data()) {
                    if x <= *lo || x >= *hi {
                        *d = 0.0;
                    }
                }
                accumulate(&mut grads[a.0], da);
            }
            Op::SoftmaxRows(a) => {
                // dX = (G - rowdot(G, Y)) .* Y
                let vy = &self.nodes[node].value;
                let mut da = Matrix::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let (grow, yrow) = (g.row(r), vy.row(r));
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    let orow = da.row_mut(r);
                    for c in 0..orow.len() {
                        orow[c] = (grow[c] - dot) * yrow[c];
                    }
                }
                accumulate(&mut grads[a.0], da);
            }
            Op::RowNorm(a) => {
                // n = sqrt(sum x^2 + eps); dn/dx = x / n.
                let (va, vn) = (&self.nodes[a.0].value, &self.nodes[node].value);
                let mut da = Matrix::zeros(va.rows(), va.cols());
                for r in 0..va.rows() {
                    let coef = g.data()[r] / vn.data()[r];
                    let (orow, xrow) = (da.row_mut(r), va.row(r));
                    for c in 0..orow.len() {
                        orow[c] = coef * xrow[c];
                    }
                }
                accumulate(&mut grads[a.0], da);
            }
            Op::RowSum(a) => {
                let va = &self.nodes[a.0].value;
                let mut da = Matrix::zeros(va.rows(), va.cols());
                for r in 0..va.rows() {
                    let gx = g.data()[r];
                    for d in da.row_mut(r) {
                        *d = gx;
                    }
                }
                accumulate(&mut grads[a.0], da);
            }
            Op::ColSum(a) => {
                let va = &self.nodes[a.0].value;
                let mut da = Matrix::zeros(va.rows(), va.cols());
                for r in 0..va.rows() {
                    da.row_mut(r).copy_from_slice(g.row(0));
                }
                accumulate(&mut grads[a.0], da);
            }
            Op::SumAll(a) => {
                let va = &self.nodes[a.0].value;
                accumulate(&mut grads[a.0], Matrix::full(va.rows(), va.cols(), g.data()[0]));
            }
            Op::MeanAll(a) => {
                let va = &self.nodes[a.0].value;
                let c = g.data()[0] / va.len().max(1) as f64;
                accumulate(&mut grads[a.0], Matrix::full(va.rows(), va.cols(), c));
            }
            Op::BlockMax(a, arg) => {
                let va = &self.nodes[a.0].value;
                let mut da = Matrix::zeros(va.rows(), va.cols());
                let cols = va.cols();
                for (o, &src_row) in arg.iter().enumerate() {
                    let (g_row, col) = (o / cols, o % cols);
                    da.data_mut()[src_row * cols + col] += g.get(g_row, col);
                }
                accumulate(&mut grads[a.0], da);
            }
            Op::BlockMean(a, block) => {
                let va = &self.nodes[a.0].value;
                let mut da = Matrix::zeros(va.rows(), va.cols());
                let inv = 1.0 / *block as f64;
                for r in 0..va.rows() {
                    let grow = g.row(r / block);
                    let orow = da.row_mut(r);
                    for c in 0..orow.len() {
                        orow[c] = grow[c] * inv;
                    }
                }
                accumulate(&mut grads[a.0], da);
            }
            Op::GatherRows(a, idx) => {
                let va = &self.nodes[a.0].value;
                let mut da = Matrix::zeros(va.rows(), va.cols());
                for (o, &src) in idx.iter().enumerate() {
                    let grow = g.row(o);
                    let orow = da.row_mut(src);
                    for c in 0..orow.len() {
                        orow[c] += grow[c];
                    }
                }
                accumulate(&mut grads[a.0], da);
            }
            Op::GatherCols(a, idx) => {
                let va = &self.nodes[a.0].value;
                let mut da = Matrix::zeros(va.rows(), va.cols());
                for (r, &c) in idx.iter().enumerate() {
                    da.set(r, c, g.data()[r]);
                }
                accumulate(&mut grads[a.0], da);
            }
            Op::SliceCols(a, start) => {
                let va = &self.nodes[a.0].value;
                let mut da = Matrix::zeros(va.rows(), va.cols());
                for r in 0..va.rows() {
                    da.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                }
                accumulate(&mut grads[a.0], da);
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for p in parts {
                    let vp = &self.nodes[p.0].value;
                    let mut dp = Matrix::zeros(vp.rows(), vp.cols());
                    for r in 0..vp.rows() {
                        dp.row_mut(r).copy_from_slice(&g.row(r)[at..at + vp.cols()]);
                    }
                    at += vp.cols();
                    accumulate(&mut grads[p.0], dp);
                }
            }
            Op::InterpRows(a, idx, w) => {
                let va = &self.nodes[a.0].value;
                let mut da = Matrix::zeros(va.rows(), va.cols());
                for (r, (tri, wr)) in idx.iter().zip(w).enumerate() {
                    let grow = g.row(r);
                    for k in 0..3 {
                        let orow = da.row_mut(tri[k]);
                        for c in 0..orow.len() {
                            orow[c] += wr[k] * grow[c];
                        }
                    }
                }
                accumulate(&mut grads[a.0], da);
            }
            Op::Reshape(a) => {
                let va = &self.nodes[a.0].value;
                let da = Matrix::new(va.rows(), va.cols(), g.data().to_vec())?;
                accumulate(&mut grads[a.0], da);
            }
            Op::CrossEntropyRows { x, targets, weights, probs, weight_sum } => {
                let gx = g.data()[0];
                let mut da = Matrix::zeros(probs.rows(), probs.cols());
                if *weight_sum > 0.0 {
                    for r in 0..probs.rows() {
                        let w = weights[r];
                        if w == 0.0 {
                            continue;
                        }
                        let coef = gx * w / weight_sum;
                        let prow = probs.row(r);
                        let orow = da.row_mut(r);
                        for c in 0..orow.len() {
                            orow[c] = coef * prow[c];
                        }
                        orow[targets[r]] -= coef;
                    }
                }
                accumulate(&mut grads[x.0], da);
            }
            Op::SmoothL1 { x, target, weights, beta, weight_sum } => {
                let vx = &self.nodes[x.0].value;
                let gx = g.data()[0];
                let mut da = Matrix::zeros(vx.rows(), vx.cols());
                if *weight_sum > 0.0 {
                    for r in 0..vx.rows() {
                        let w = weights[r];
                        if w == 0.0 {
                            continue;
                        }
                        let coef = gx * w / weight_sum;
                        let (xrow, trow) = (vx.row(r), target.row(r));
                        let orow = da.row_mut(r);
                        for c in 0..orow.len() {
                            let d = xrow[c] - trow[c];
                            orow[c] = coef * if d.abs() < *beta { d / beta } else { d.signum() };
                        }
                    }
                }
                accumulate(&mut grads[x.0], da);
            }
        }
        Ok(())
    }
}
