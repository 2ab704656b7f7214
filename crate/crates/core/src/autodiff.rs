//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Tape`] records every operation eagerly. Calling [`Tape::backward`]
//! on a `1×1` node walks the record in reverse and returns the gradient of
//! that scalar with respect to every node that requires one.

use std::sync::Arc;

use crate::tensor::{gemm, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulCol(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Sqrt(Var),
    Ln(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    Gather(Var, Arc<Vec<usize>>),
    ScatterAdd(Var, Arc<Vec<usize>>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SumAll(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Mat, inv_std: Vec<f64> },
    EdgeGeom { coords: Var, src: Arc<Vec<usize>>, dst: Arc<Vec<usize>> },
    BceLogits { logits: Var, targets: Vec<f64> },
    RowMatVec { mats: Var, vecs: Var },
    GaussKl { u: Var, a1: Var, a2: Var, sigma_inv: Vec<f64> },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Statistics from a training-mode batch normalization, used by callers to
/// update running averages.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of the given shape when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Mat {
        self.grads[v.0].clone().unwrap_or_else(|| Mat::zeros(rows, cols))
    }
}

pub const BN_EPS: f64 = 1e-5;

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
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1));
        m.data[0]
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input; no gradient is tracked.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// Adds a `1×m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows, 1);
        assert_eq!(av.cols, rv.cols);
        let mut value = av.clone();
        for r in 0..value.rows {
            for (x, b) in value.row_mut(r).iter_mut().zip(&rv.data) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect();
        let value = Mat::from_vec(av.rows, av.cols, data);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(value, Op::AddScalar(a), ng)
    }

    /// Scales row `i` of `a` by `col[i]` (`col` is `n×1`).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (av, cv) = (self.value(a), self.value(col));
        assert_eq!(cv.cols, 1);
        assert_eq!(av.rows, cv.rows, "mul_col row mismatch");
        let mut value = av.clone();
        for r in 0..value.rows {
            let s = cv.data[r];
            for x in value.row_mut(r) {
                *x *= s;
            }
        }
        let ng = self.ng(a) || self.ng(col);
        self.push(value, Op::MulCol(a, col), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Elementwise clamp; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn gather(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Var {
        let value = self.value(a).select_rows(&idx);
        let ng = self.ng(a);
        self.push(value, Op::Gather(a, idx), ng)
    }

    /// Row `i` of `a` is added into output row `idx[i]`.
    pub fn scatter_add(&mut self, a: Var, idx: Arc<Vec<usize>>, out_rows: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows, idx.len());
        let mut value = Mat::zeros(out_rows, av.cols);
        for (i, &o) in idx.iter().enumerate() {
            let src = av.row(i);
            for (x, s) in value.row_mut(o).iter_mut().zip(src) {
                *x += s;
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::ScatterAdd(a, idx), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut value = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                value.row_mut(r)[off..off + pv.cols].copy_from_slice(pv.row(r));
            }
            off += pv.cols;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = self.value(a);
        assert!(start <= end && end <= av.cols);
        let mut value = Mat::zeros(av.rows, end - start);
        for r in 0..av.rows {
            value.row_mut(r).copy_from_slice(&av.row(r)[start..end]);
        }
        let ng = self.ng(a);
        self.push(value, Op::SliceCols(a, start), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Mat::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).data.len().max(1) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-column normalization using the batch's own statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> (Var, BatchStats) {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        let nf = n.max(1) as f64;
        let mut mean = vec![0.0; c];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(xv.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= nf);
        let mut var = vec![0.0; c];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= nf);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = Mat::zeros(n, c);
        for r in 0..n {
            for j in 0..c {
                xhat.data[r * c + j] = (xv.data[r * c + j] - mean[j]) * inv_std[j];
            }
        }
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut value = xhat.clone();
        for r in 0..n {
            for j in 0..c {
                value.data[r * c + j] = value.data[r * c + j] * gv.data[j] + bv.data[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let out = self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std }, ng);
        (out, BatchStats { mean, var })
    }

    /// Edge geometry: for each edge `(src[e] → dst[e])` returns the row
    /// `[‖r_dst − r_src‖, (r_dst − r_src)/‖r_dst − r_src‖]`. Coincident
    /// endpoints yield a zero displacement.
    pub fn edge_geom(&mut self, coords: Var, src: Arc<Vec<usize>>, dst: Arc<Vec<usize>>) -> Var {
        let cv = self.value(coords);
        let d = cv.cols;
        let mut value = Mat::zeros(src.len(), 1 + d);
        for (e, (&s, &t)) in src.iter().zip(dst.iter()).enumerate() {
            let (rs, rt) = (cv.row(s), cv.row(t));
            let dist = rs.iter().zip(rt).map(|(a, b)| (b - a) * (b - a)).sum::<f64>().sqrt();
            let row = value.row_mut(e);
            row[0] = dist;
            if dist > 0.0 {
                for k in 0..d {
                    row[1 + k] = (rt[k] - rs[k]) / dist;
                }
            }
        }
        let ng = self.ng(coords);
        self.push(value, Op::EdgeGeom { coords, src, dst }, ng)
    }

    /// Mean binary cross-entropy of `n×1` logits against 0/1 targets.
    pub fn bce_logits(&mut self, logits: Var, targets: &[f64]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.shape(), (targets.len(), 1));
        let n = targets.len().max(1) as f64;
        let loss: f64 = lv.data.iter().zip(targets).map(|(&z, &y)| softplus(z) - y * z).sum::<f64>() / n;
        let ng = self.ng(logits);
        self.push(Mat::scalar(loss), Op::BceLogits { logits, targets: targets.to_vec() }, ng)
    }

    /// Row-wise `D×D` matrix times `D`-vector: row `i` of `mats` holds a
    /// row-major matrix, row `i` of `vecs` the vector.
    pub fn row_mat_vec(&mut self, mats: Var, vecs: Var) -> Var {
        let (mv, vv) = (self.value(mats), self.value(vecs));
        let d = vv.cols;
        assert_eq!(mv.cols, d * d);
        assert_eq!(mv.rows, vv.rows);
        let mut value = Mat::zeros(vv.rows, d);
        for i in 0..vv.rows {
            let (m, v) = (mv.row(i), vv.row(i));
            for j in 0..d {
                value.data[i * d + j] = (0..d).map(|k| m[j * d + k] * v[k]).sum();
            }
        }
        let ng = self.ng(mats) || self.ng(vecs);
        self.push(value, Op::RowMatVec { mats, vecs }, ng)
    }

    /// Per-row `KL(N(0, Σ) ‖ N(0, I))` for `Σ = a1·U·Uᵀ + a2·I`, with `U`
    /// stored row-major in each row of `u` and `a1`, `a2` as `n×1` columns.
    pub fn gauss_kl(&mut self, u: Var, a1: Var, a2: Var) -> Var {
        let (uv, a1v, a2v) = (self.value(u), self.value(a1), self.value(a2));
        let n = uv.rows;
        let d = (uv.cols as f64).sqrt().round() as usize;
        assert_eq!(d * d, uv.cols);
        let mut value = Mat::zeros(n, 1);
        let mut sigma_inv = vec![0.0; n * d * d];
        for i in 0..n {
            let sigma = crate::linalg::sigma_from_factors(uv.row(i), a1v.data[i], a2v.data[i], d);
            let (inv, logdet) = crate::linalg::spd_inverse_logdet(&sigma, d);
            let trace: f64 = (0..d).map(|k| sigma[k * d + k]).sum();
            value.data[i] = 0.5 * (trace - d as f64 - logdet);
            sigma_inv[i * d * d..(i + 1) * d * d].copy_from_slice(&inv);
        }
        let ng = self.ng(u) || self.ng(a1) || self.ng(a2);
        self.push(value, Op::GaussKl { u, a1, a2, sigma_inv }, ng)
    }

    /// Gradients of the scalar node `out` with respect to every tracked node.
    pub fn backward(&self, out: Var) -> Grads {
        assert_eq!(self.value(out).shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Mat::scalar(1.0));
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let acc = |v: Var, delta: Mat, grads: &mut [Option<Mat>]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let mut ga = Mat::zeros(av.rows, av.cols);
                    gemm(g, false, bv, true, &mut ga, 0.0);
                    acc(*a, ga, grads);
                }
                if self.ng(*b) {
                    let mut gb = Mat::zeros(bv.rows, bv.cols);
                    gemm(av, true, g, false, &mut gb, 0.0);
                    acc(*b, gb, grads);
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone(), grads);
                if self.ng(*row) {
                    let mut gr = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (s, v) in gr.data.iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    acc(*row, gr, grads);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.map(|x| -x), grads);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    acc(*a, elementwise(g, bv, |x, y| x * y), grads);
                }
                if self.ng(*b) {
                    acc(*b, elementwise(g, av, |x, y| x * y), grads);
                }
            }
            Op::Scale(a, c) => acc(*a, g.map(|x| x * c), grads),
            Op::AddScalar(a) => acc(*a, g.clone(), grads),
            Op::MulCol(a, col) => {
                let (av, cv) = (self.value(*a), self.value(*col));
                if self.ng(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows {
                        let s = cv.data[r];
                        ga.row_mut(r).iter_mut().for_each(|x| *x *= s);
                    }
                    acc(*a, ga, grads);
                }
                if self.ng(*col) {
                    let gc = (0..g.rows).map(|r| g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum()).collect();
                    acc(*col, Mat::column(gc), grads);
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                acc(*a, elementwise(g, av, |gx, x| if x > 0.0 { gx } else { 0.0 }), grads);
            }
            Op::Sigmoid(a) => {
                acc(*a, elementwise(g, &node.value, |gx, s| gx * s * (1.0 - s)), grads);
            }
            Op::Softplus(a) => {
                let av = self.value(*a);
                acc(*a, elementwise(g, av, |gx, x| gx * sigmoid(x)), grads);
            }
            Op::Sqrt(a) => {
                acc(*a, elementwise(g, &node.value, |gx, s| gx * 0.5 / s), grads);
            }
            Op::Ln(a) => {
                let av = self.value(*a);
                acc(*a, elementwise(g, av, |gx, x| gx / x), grads);
            }
            Op::Exp(a) => {
                acc(*a, elementwise(g, &node.value, |gx, e| gx * e), grads);
            }
            Op::Clamp(a, lo, hi) => {
                let av = self.value(*a);
                acc(*a, elementwise(g, av, |gx, x| if x >= *lo && x <= *hi { gx } else { 0.0 }), grads);
            }
            Op::Gather(a, idx) => {
                let av = self.value(*a);
                let mut ga = Mat::zeros(av.rows, av.cols);
                for (o, &i) in idx.iter().enumerate() {
                    for (x, s) in ga.row_mut(i).iter_mut().zip(g.row(o)) {
                        *x += s;
                    }
                }
                acc(*a, ga, grads);
            }
            Op::ScatterAdd(a, idx) => {
                acc(*a, g.select_rows(idx), grads);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).cols;
                    if self.ng(p) {
                        let mut gp = Mat::zeros(g.rows, pc);
                        for r in 0..g.rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + pc]);
                        }
                        acc(p, gp, grads);
                    }
                    off += pc;
                }
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let mut ga = Mat::zeros(av.rows, av.cols);
                for r in 0..g.rows {
                    ga.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                }
                acc(*a, ga, grads);
            }
            Op::SumAll(a) => {
                let av = self.value(*a);
                acc(*a, Mat::filled(av.rows, av.cols, g.data[0]), grads);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let (n, c) = xhat.shape();
                let gv = self.value(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for r in 0..n {
                    for j in 0..c {
                        let gg = g.data[r * c + j];
                        dgamma[j] += gg * xhat.data[r * c + j];
                        dbeta[j] += gg;
                    }
                }
                if self.ng(*x) {
                    let nf = n as f64;
                    let mut dx = Mat::zeros(n, c);
                    for r in 0..n {
                        for j in 0..c {
                            let dxhat = g.data[r * c + j] * gv.data[j];
                            dx.data[r * c + j] = inv_std[j] / nf
                                * (nf * dxhat - dbeta[j] * gv.data[j] - xhat.data[r * c + j] * dgamma[j] * gv.data[j]);
                        }
                    }
                    acc(*x, dx, grads);
                }
                acc(*gamma, Mat::from_vec(1, c, dgamma), grads);
                acc(*beta, Mat::from_vec(1, c, dbeta), grads);
            }
            Op::EdgeGeom { coords, src, dst } => {
                let cv = self.value(*coords);
                let d = cv.cols;
                let mut gc = Mat::zeros(cv.rows, d);
                for (e, (&s, &t)) in src.iter().zip(dst.iter()).enumerate() {
                    let out = node.value.row(e);
                    let dist = out[0];
                    if dist <= 0.0 {
                        continue;
                    }
                    let ge = g.row(e);
                    let unit = &out[1..];
                    // d(dist)/d(diff) = unit; d(unit)/d(diff) = (I − u·uᵀ)/dist
                    let gu_dot: f64 = (0..d).map(|k| ge[1 + k] * unit[k]).sum();
                    for k in 0..d {
                        let gdiff = ge[0] * unit[k] + (ge[1 + k] - gu_dot * unit[k]) / dist;
                        gc.data[t * d + k] += gdiff;
                        gc.data[s * d + k] -= gdiff;
                    }
                }
                acc(*coords, gc, grads);
            }
            Op::BceLogits { logits, targets } => {
                let lv = self.value(*logits);
                let n = targets.len().max(1) as f64;
                let gl = lv.data.iter().zip(targets).map(|(&z, &y)| g.data[0] * (sigmoid(z) - y) / n).collect();
                acc(*logits, Mat::column(gl), grads);
            }
            Op::RowMatVec { mats, vecs } => {
                let (mv, vv) = (self.value(*mats), self.value(*vecs));
                let d = vv.cols;
                if self.ng(*mats) {
                    let mut gm = Mat::zeros(mv.rows, mv.cols);
                    for i in 0..vv.rows {
                        for j in 0..d {
                            for k in 0..d {
                                gm.data[i * d * d + j * d + k] = g.data[i * d + j] * vv.data[i * d + k];
                            }
                        }
                    }
                    acc(*mats, gm, grads);
                }
                if self.ng(*vecs) {
                    let mut gv = Mat::zeros(vv.rows, d);
                    for i in 0..vv.rows {
                        for k in 0..d {
                            gv.data[i * d + k] = (0..d).map(|j| g.data[i * d + j] * mv.data[i * d * d + j * d + k]).sum();
                        }
                    }
                    acc(*vecs, gv, grads);
                }
            }
            Op::GaussKl { u, a1, a2, sigma_inv } => {
                let (uv, a1v) = (self.value(*u), self.value(*a1));
                let n = uv.rows;
                let d = (uv.cols as f64).sqrt().round() as usize;
                let mut gu = Mat::zeros(n, d * d);
                let mut ga1 = Mat::zeros(n, 1);
                let mut ga2 = Mat::zeros(n, 1);
                for i in 0..n {
                    let gi = g.data[i];
                    let um = uv.row(i);
                    let inv = &sigma_inv[i * d * d..(i + 1) * d * d];
                    // dKL/dΣ = ½(I − Σ⁻¹)
                    let mut dsig = vec![0.0; d * d];
                    for r in 0..d {
                        for c in 0..d {
                            let id = if r == c { 1.0 } else { 0.0 };
                            dsig[r * d + c] = 0.5 * gi * (id - inv[r * d + c]);
                        }
                    }
                    // Σ = a1·U·Uᵀ + a2·I
                    let mut uut = vec![0.0; d * d];
                    for r in 0..d {
                        for c in 0..d {
                            uut[r * d + c] = (0..d).map(|k| um[r * d + k] * um[c * d + k]).sum();
                        }
                    }
                    ga1.data[i] = dsig.iter().zip(&uut).map(|(a, b)| a * b).sum();
                    ga2.data[i] = (0..d).map(|k| dsig[k * d + k]).sum();
                    let a1i = a1v.data[i];
                    for r in 0..d {
                        for k in 0..d {
                            // d/dU of tr(G·U·Uᵀ) = (G + Gᵀ)·U; G symmetric here
                            let s: f64 = (0..d).map(|c| dsig[r * d + c] * um[c * d + k]).sum();
                            gu.data[i * d * d + r * d + k] = 2.0 * a1i * s;
                        }
                    }
                }
                acc(*u, gu, grads);
                acc(*a1, ga1, grads);
                acc(*a2, ga2, grads);
            }
        }
    }
}

fn elementwise(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    Mat::from_vec(a.rows, a.cols, a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect())
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}
