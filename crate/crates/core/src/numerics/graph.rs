//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation as a node in topological order.
//! [`Graph::backward`] walks the tape in reverse and accumulates
//! `d loss / d node` for every node that depends on a trainable leaf.
//! Nodes built only from constants carry no gradient and are skipped.

use std::ops::Range;
use std::rc::Rc;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Norm below which `l2_normalize` returns the zero vector.
pub const NORM_EPS: f64 = 1e-12;
const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Rc<Vec<Option<usize>>>),
    GroupMean(Var, Rc<Vec<Vec<usize>>>),
    L2Normalize(Var, Vec<f64>),
    LayerNorm(Var, Vec<f64>),
    SoftmaxRows(Var),
    RowNormalize(Var, Vec<f64>),
    MaskedLogSumExp(Var, Rc<Vec<bool>>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Rc<Vec<Range<usize>>>,
        heads: usize,
        probs: Vec<Vec<f64>>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for every parameter leaf that was reached, keyed by id.
    pub fn param_grads(&self) -> Vec<(ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.get(v).map(|g| (id, g)))
            .collect()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf that is not tied to a parameter store.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf holding a copy of a stored parameter. Frozen parameters enter
    /// as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let trainable = store.is_trainable(id);
        let v = self.push(store.get(id).clone(), Op::Leaf, trainable);
        if trainable {
            self.params.push((id, v));
        }
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2();
        let (k2, n) = bv.dims2();
        if k != k2 {
            return Err(shape_err("matmul", av, bv));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(m, k, n, 1.0, av.data(), false, bv.data(), false, 0.0, out.data_mut());
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (m, n) = av.dims2();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av.data()[i * n + j];
            }
        }
        let t = Tensor::matrix(n, m, out).expect("transpose shape");
        let ng = self.ng(a);
        self.push(t, Op::Transpose(a), ng)
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dims2() != bv.dims2() {
            return Err(shape_err(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let (r, c) = av.dims2();
        Tensor::matrix(r, c, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    /// `x + r` with the row vector `r` broadcast over rows (bias add).
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(r));
        let (n, m) = xv.dims2();
        if rv.len() != m {
            return Err(shape_err("add_row", xv, rv));
        }
        let mut out = xv.clone().reshaped(vec![n, m])?;
        for i in 0..n {
            for (o, b) in out.row_slice_mut(i).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        let ng = self.ng(x) || self.ng(r);
        Ok(self.push(out, Op::AddRow(x, r), ng))
    }

    /// `x * r` with the row vector `r` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(r));
        let (n, m) = xv.dims2();
        if rv.len() != m {
            return Err(shape_err("mul_row", xv, rv));
        }
        let mut out = xv.clone().reshaped(vec![n, m])?;
        for i in 0..n {
            for (o, g) in out.row_slice_mut(i).iter_mut().zip(rv.data()) {
                *o *= g;
            }
        }
        let ng = self.ng(x) || self.ng(r);
        Ok(self.push(out, Op::MulRow(x, r), ng))
    }

    /// `x * c` with the column vector `c` (`[n, 1]`) broadcast over columns.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let (xv, cv) = (self.value(x), self.value(c));
        let (n, m) = xv.dims2();
        if cv.len() != n {
            return Err(shape_err("mul_col", xv, cv));
        }
        let mut out = xv.clone().reshaped(vec![n, m])?;
        for i in 0..n {
            let s = cv.data()[i];
            for o in out.row_slice_mut(i) {
                *o *= s;
            }
        }
        let ng = self.ng(x) || self.ng(c);
        Ok(self.push(out, Op::MulCol(x, c), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x + s);
        let ng = self.ng(a);
        self.push(t, Op::AddScalar(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(t, Op::Tanh(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        // Written so NaN passes through; `f64::max` would drop it.
        let t = self.value(a).map(|x| if x < 0.0 { 0.0 } else { x });
        let ng = self.ng(a);
        self.push(t, Op::Relu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(t, Op::Exp(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::ln);
        let ng = self.ng(a);
        self.push(t, Op::Log(a), ng)
    }

    /// Sum of all entries, as a `[1, 1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len().max(1) as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Per-row sums, `[n, m] -> [n, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (n, _) = v.dims2();
        let data = (0..n).map(|i| v.row_slice(i).iter().sum()).collect();
        let t = Tensor::matrix(n, 1, data).expect("sum_cols shape");
        let ng = self.ng(a);
        self.push(t, Op::SumCols(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.rows() != n {
                return Err(shape_err("concat_cols", self.value(parts[0]), v));
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let t = Tensor::matrix(n, total, data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != m {
                return Err(shape_err("concat_rows", self.value(parts[0]), v));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let t = Tensor::matrix(rows, m, data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, cols: Range<usize>) -> Result<Var> {
        let v = self.value(a);
        let (n, m) = v.dims2();
        if cols.end > m || cols.start > cols.end {
            return Err(Error::Shape {
                op: "slice_cols",
                left: v.shape().to_vec(),
                right: vec![cols.start, cols.end],
            });
        }
        let mut data = Vec::with_capacity(n * cols.len());
        for i in 0..n {
            data.extend_from_slice(&v.row_slice(i)[cols.clone()]);
        }
        let t = Tensor::matrix(n, cols.len(), data)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::SliceCols(a, cols.start), ng))
    }

    pub fn slice_rows(&mut self, a: Var, rows: Range<usize>) -> Result<Var> {
        let v = self.value(a);
        let (n, m) = v.dims2();
        if rows.end > n || rows.start > rows.end {
            return Err(Error::Shape {
                op: "slice_rows",
                left: v.shape().to_vec(),
                right: vec![rows.start, rows.end],
            });
        }
        let t = Tensor::matrix(rows.len(), m, v.data()[rows.start * m..rows.end * m].to_vec())?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::SliceRows(a, rows.start), ng))
    }

    /// Row gather; `None` produces a zero row.
    pub fn gather_rows(&mut self, a: Var, index: Rc<Vec<Option<usize>>>) -> Result<Var> {
        let v = self.value(a);
        let (n, m) = v.dims2();
        let mut data = vec![0.0; index.len() * m];
        for (o, src) in index.iter().enumerate() {
            if let Some(s) = *src {
                if s >= n {
                    return Err(Error::Shape {
                        op: "gather_rows",
                        left: v.shape().to_vec(),
                        right: vec![s],
                    });
                }
                data[o * m..(o + 1) * m].copy_from_slice(v.row_slice(s));
            }
        }
        let t = Tensor::matrix(index.len(), m, data)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::GatherRows(a, index), ng))
    }

    /// Mean of the listed rows for every group; an empty group yields zeros.
    pub fn group_mean(&mut self, a: Var, groups: Rc<Vec<Vec<usize>>>) -> Result<Var> {
        let v = self.value(a);
        let (n, m) = v.dims2();
        let mut data = vec![0.0; groups.len() * m];
        for (g, rows) in groups.iter().enumerate() {
            let out = &mut data[g * m..(g + 1) * m];
            for &r in rows {
                if r >= n {
                    return Err(Error::Shape {
                        op: "group_mean",
                        left: v.shape().to_vec(),
                        right: vec![r],
                    });
                }
                for (o, x) in out.iter_mut().zip(v.row_slice(r)) {
                    *o += x;
                }
            }
            if !rows.is_empty() {
                let inv = 1.0 / rows.len() as f64;
                out.iter_mut().for_each(|o| *o *= inv);
            }
        }
        let t = Tensor::matrix(groups.len(), m, data)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::GroupMean(a, groups), ng))
    }

    /// Mean over the rows whose mask flag is set, as a `[1, m]` row.
    pub fn masked_mean(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let n = self.value(a).rows();
        if mask.len() != n {
            return Err(Error::Shape {
                op: "masked_mean",
                left: self.value(a).shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let rows = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
        self.group_mean(a, Rc::new(vec![rows]))
    }

    /// Row-wise unit normalization. Rows with norm below [`NORM_EPS`] map
    /// to zero.
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (n, m) = v.dims2();
        let mut norms = Vec::with_capacity(n);
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            let row = v.row_slice(i);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            norms.push(norm);
            if !(norm < NORM_EPS) {
                for (o, x) in data[i * m..(i + 1) * m].iter_mut().zip(row) {
                    *o = x / norm;
                }
            }
        }
        let t = Tensor::matrix(n, m, data).expect("l2 shape");
        let ng = self.ng(a);
        self.push(t, Op::L2Normalize(a, norms), ng)
    }

    /// Row-wise standardization without affine terms.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (n, m) = v.dims2();
        let mut inv_std = Vec::with_capacity(n);
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            let row = v.row_slice(i);
            let mu = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (o, x) in data[i * m..(i + 1) * m].iter_mut().zip(row) {
                *o = (x - mu) * is;
            }
        }
        let t = Tensor::matrix(n, m, data).expect("layer_norm shape");
        let ng = self.ng(a);
        self.push(t, Op::LayerNorm(a, inv_std), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (n, m) = v.dims2();
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            let row = v.row_slice(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[i * m..(i + 1) * m];
            let mut s = 0.0;
            for (o, x) in out.iter_mut().zip(row) {
                *o = (x - mx).exp();
                s += *o;
            }
            out.iter_mut().for_each(|o| *o /= s);
        }
        let t = Tensor::matrix(n, m, data).expect("softmax shape");
        let ng = self.ng(a);
        self.push(t, Op::SoftmaxRows(a), ng)
    }

    /// `x / rowsum(x)`; a row whose sum is below `1e-12` becomes uniform
    /// and passes no gradient.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (n, m) = v.dims2();
        let mut sums = Vec::with_capacity(n);
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            let row = v.row_slice(i);
            let s: f64 = row.iter().sum();
            sums.push(s);
            let out = &mut data[i * m..(i + 1) * m];
            if s < 1e-12 {
                out.iter_mut().for_each(|o| *o = 1.0 / m as f64);
            } else {
                for (o, x) in out.iter_mut().zip(row) {
                    *o = x / s;
                }
            }
        }
        let t = Tensor::matrix(n, m, data).expect("row_normalize shape");
        let ng = self.ng(a);
        self.push(t, Op::RowNormalize(a, sums), ng)
    }

    /// `log sum_j mask_ij exp(x_ij)` per row, `[n, m] -> [n, 1]`.
    ///
    /// Every row must have at least one selected entry.
    pub fn masked_logsumexp(&mut self, a: Var, mask: Rc<Vec<bool>>) -> Result<Var> {
        let v = self.value(a);
        let (n, m) = v.dims2();
        if mask.len() != n * m {
            return Err(Error::Shape {
                op: "masked_logsumexp",
                left: v.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let row = v.row_slice(i);
            let sel = &mask[i * m..(i + 1) * m];
            let mx = row
                .iter()
                .zip(sel)
                .filter(|(_, &s)| s)
                .map(|(x, _)| *x)
                .fold(f64::NEG_INFINITY, f64::max);
            if !sel.iter().any(|&s| s) {
                return Err(Error::Data(format!("masked_logsumexp: row {i} selects nothing")));
            }
            let s: f64 = row
                .iter()
                .zip(sel)
                .filter(|(_, &s)| s)
                .map(|(x, _)| (x - mx).exp())
                .sum();
            data.push(mx + s.ln());
        }
        let t = Tensor::matrix(n, 1, data)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::MaskedLogSumExp(a, mask), ng))
    }

    /// Multi-head scaled dot-product attention restricted to row segments.
    ///
    /// Rows outside a segment never attend to each other, which is how
    /// padded slots are excluded: they are simply not packed.
    pub fn segment_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: Rc<Vec<Range<usize>>>,
        heads: usize,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.dims2();
        if kv.dims2() != (n, d) {
            return Err(shape_err("segment_attention", qv, kv));
        }
        if vv.dims2() != (n, d) {
            return Err(shape_err("segment_attention", qv, vv));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("model width {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; n * d];
        let mut probs = Vec::with_capacity(segments.len() * heads);
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for seg in segments.iter() {
            let len = seg.len();
            for h in 0..heads {
                let off = h * dh;
                let mut p = vec![0.0; len * len];
                for i in 0..len {
                    let qi = &qd[(seg.start + i) * d + off..(seg.start + i) * d + off + dh];
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..len {
                        let kj = &kd[(seg.start + j) * d + off..(seg.start + j) * d + off + dh];
                        let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        p[i * len + j] = s;
                        mx = mx.max(s);
                    }
                    let row = &mut p[i * len..(i + 1) * len];
                    let mut z = 0.0;
                    for x in row.iter_mut() {
                        *x = (*x - mx).exp();
                        z += *x;
                    }
                    row.iter_mut().for_each(|x| *x /= z);
                    let o = &mut out[(seg.start + i) * d + off..(seg.start + i) * d + off + dh];
                    for j in 0..len {
                        let w = p[i * len + j];
                        let vj = &vd[(seg.start + j) * d + off..(seg.start + j) * d + off + dh];
                        for (oo, x) in o.iter_mut().zip(vj) {
                            *oo += w * x;
                        }
                    }
                }
                probs.push(p);
            }
        }
        let t = Tensor::matrix(n, d, out)?;
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let lv = self.value(loss);
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                let shape = self.value(v).shape().to_vec();
                *slot = Some(g.reshaped(shape).expect("gradient shape"));
            }
        }
    }

    /// Accumulate into `v` through a closure that writes into a zeroed or
    /// existing buffer, avoiding a temporary for large gradients.
    fn accum_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.ng(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2();
                let n = bv.cols();
                // dA = G @ B^T, dB = A^T @ G
                self.accum_with(grads, *a, |buf| {
                    gemm(m, n, k, 1.0, g.data(), false, bv.data(), true, 1.0, buf)
                });
                self.accum_with(grads, *b, |buf| {
                    gemm(k, m, n, 1.0, av.data(), true, g.data(), false, 1.0, buf)
                });
            }
            Op::Transpose(a) => {
                let (m, n) = g.dims2();
                let mut t = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        t[j * m + i] = g.data()[i * n + j];
                    }
                }
                self.accum(grads, *a, Tensor::matrix(n, m, t).unwrap());
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accum_with(grads, *a, |buf| {
                    for ((o, gg), y) in buf.iter_mut().zip(g.data()).zip(bv.data()) {
                        *o += gg * y;
                    }
                });
                self.accum_with(grads, *b, |buf| {
                    for ((o, gg), x) in buf.iter_mut().zip(g.data()).zip(av.data()) {
                        *o += gg * x;
                    }
                });
            }
            Op::AddRow(x, r) => {
                self.accum(grads, *x, g.clone());
                let (n, m) = g.dims2();
                self.accum_with(grads, *r, |buf| {
                    for i in 0..n {
                        for (o, gg) in buf.iter_mut().zip(&g.data()[i * m..(i + 1) * m]) {
                            *o += gg;
                        }
                    }
                });
            }
            Op::MulRow(x, r) => {
                let (xv, rv) = (self.value(*x), self.value(*r));
                let (n, m) = g.dims2();
                self.accum_with(grads, *x, |buf| {
                    for i in 0..n {
                        for j in 0..m {
                            buf[i * m + j] += g.data()[i * m + j] * rv.data()[j];
                        }
                    }
                });
                self.accum_with(grads, *r, |buf| {
                    for i in 0..n {
                        for j in 0..m {
                            buf[j] += g.data()[i * m + j] * xv.data()[i * m + j];
                        }
                    }
                });
            }
            Op::MulCol(x, c) => {
                let (xv, cv) = (self.value(*x), self.value(*c));
                let (n, m) = g.dims2();
                self.accum_with(grads, *x, |buf| {
                    for i in 0..n {
                        let s = cv.data()[i];
                        for j in 0..m {
                            buf[i * m + j] += g.data()[i * m + j] * s;
                        }
                    }
                });
                self.accum_with(grads, *c, |buf| {
                    for i in 0..n {
                        let mut s = 0.0;
                        for j in 0..m {
                            s += g.data()[i * m + j] * xv.data()[i * m + j];
                        }
                        buf[i] += s;
                    }
                });
            }
            Op::Scale(a, s) => self.accum(grads, *a, g.map(|x| x * s)),
            Op::AddScalar(a) => self.accum(grads, *a, g.clone()),
            Op::Tanh(a) => {
                self.accum_with(grads, *a, |buf| {
                    for ((o, gg), y) in buf.iter_mut().zip(g.data()).zip(out.data()) {
                        *o += gg * (1.0 - y * y);
                    }
                });
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                self.accum_with(grads, *a, |buf| {
                    for ((o, gg), x) in buf.iter_mut().zip(g.data()).zip(av.data()) {
                        if *x > 0.0 {
                            *o += gg;
                        }
                    }
                });
            }
            Op::Exp(a) => {
                self.accum_with(grads, *a, |buf| {
                    for ((o, gg), y) in buf.iter_mut().zip(g.data()).zip(out.data()) {
                        *o += gg * y;
                    }
                });
            }
            Op::Log(a) => {
                let av = self.value(*a);
                self.accum_with(grads, *a, |buf| {
                    for ((o, gg), x) in buf.iter_mut().zip(g.data()).zip(av.data()) {
                        *o += gg / x;
                    }
                });
            }
            Op::Sum(a) => {
                let s = g.item();
                self.accum_with(grads, *a, |buf| buf.iter_mut().for_each(|o| *o += s));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len().max(1) as f64;
                let s = g.item() / n;
                self.accum_with(grads, *a, |buf| buf.iter_mut().for_each(|o| *o += s));
            }
            Op::SumCols(a) => {
                let (n, m) = self.value(*a).dims2();
                self.accum_with(grads, *a, |buf| {
                    for i in 0..n {
                        let s = g.data()[i];
                        buf[i * m..(i + 1) * m].iter_mut().for_each(|o| *o += s);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (n, total) = g.dims2();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.accum_with(grads, p, |buf| {
                        for i in 0..n {
                            for (o, gg) in buf[i * w..(i + 1) * w]
                                .iter_mut()
                                .zip(&g.data()[i * total + off..i * total + off + w])
                            {
                                *o += gg;
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accum_with(grads, p, |buf| {
                        for (o, gg) in buf.iter_mut().zip(&g.data()[off..off + len]) {
                            *o += gg;
                        }
                    });
                    off += len;
                }
            }
            Op::SliceCols(a, start) => {
                let (n, w) = g.dims2();
                let m = self.value(*a).cols();
                self.accum_with(grads, *a, |buf| {
                    for i in 0..n {
                        for (o, gg) in buf[i * m + start..i * m + start + w]
                            .iter_mut()
                            .zip(&g.data()[i * w..(i + 1) * w])
                        {
                            *o += gg;
                        }
                    }
                });
            }
            Op::SliceRows(a, start) => {
                let m = g.cols();
                let off = start * m;
                self.accum_with(grads, *a, |buf| {
                    for (o, gg) in buf[off..off + g.len()].iter_mut().zip(g.data()) {
                        *o += gg;
                    }
                });
            }
            Op::GatherRows(a, index) => {
                let m = g.cols();
                self.accum_with(grads, *a, |buf| {
                    for (o, src) in index.iter().enumerate() {
                        if let Some(s) = *src {
                            for (b, gg) in buf[s * m..(s + 1) * m].iter_mut().zip(&g.data()[o * m..(o + 1) * m]) {
                                *b += gg;
                            }
                        }
                    }
                });
            }
            Op::GroupMean(a, groups) => {
                let m = g.cols();
                self.accum_with(grads, *a, |buf| {
                    for (gi, rows) in groups.iter().enumerate() {
                        if rows.is_empty() {
                            continue;
                        }
                        let inv = 1.0 / rows.len() as f64;
                        let gg = &g.data()[gi * m..(gi + 1) * m];
                        for &r in rows {
                            for (b, x) in buf[r * m..(r + 1) * m].iter_mut().zip(gg) {
                                *b += x * inv;
                            }
                        }
                    }
                });
            }
            Op::L2Normalize(a, norms) => {
                let (n, m) = g.dims2();
                self.accum_with(grads, *a, |buf| {
                    for i in 0..n {
                        if norms[i] < NORM_EPS {
                            continue;
                        }
                        let y = &out.data()[i * m..(i + 1) * m];
                        let gg = &g.data()[i * m..(i + 1) * m];
                        let dot: f64 = y.iter().zip(gg).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            buf[i * m + j] += (gg[j] - y[j] * dot) / norms[i];
                        }
                    }
                });
            }
            Op::LayerNorm(a, inv_std) => {
                let (n, m) = g.dims2();
                self.accum_with(grads, *a, |buf| {
                    for i in 0..n {
                        let y = &out.data()[i * m..(i + 1) * m];
                        let gg = &g.data()[i * m..(i + 1) * m];
                        let mg = gg.iter().sum::<f64>() / m as f64;
                        let mgy = gg.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                        for j in 0..m {
                            buf[i * m + j] += inv_std[i] * (gg[j] - mg - y[j] * mgy);
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let (n, m) = g.dims2();
                self.accum_with(grads, *a, |buf| {
                    for i in 0..n {
                        let y = &out.data()[i * m..(i + 1) * m];
                        let gg = &g.data()[i * m..(i + 1) * m];
                        let dot: f64 = y.iter().zip(gg).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            buf[i * m + j] += y[j] * (gg[j] - dot);
                        }
                    }
                });
            }
            Op::RowNormalize(a, sums) => {
                let (n, m) = g.dims2();
                self.accum_with(grads, *a, |buf| {
                    for i in 0..n {
                        if sums[i] < 1e-12 {
                            continue;
                        }
                        let y = &out.data()[i * m..(i + 1) * m];
                        let gg = &g.data()[i * m..(i + 1) * m];
                        let dot: f64 = y.iter().zip(gg).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            buf[i * m + j] += (gg[j] - dot) / sums[i];
                        }
                    }
                });
            }
            Op::MaskedLogSumExp(a, mask) => {
                let av = self.value(*a);
                let (n, m) = av.dims2();
                self.accum_with(grads, *a, |buf| {
                    for i in 0..n {
                        let lse = out.data()[i];
                        let gi = g.data()[i];
                        for j in 0..m {
                            if mask[i * m + j] {
                                buf[i * m + j] += gi * (av.data()[i * m + j] - lse).exp();
                            }
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, segments, *heads, probs, g, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Range<usize>],
        heads: usize,
        probs: &[Vec<f64>],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.dims2();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let (qd, kd, vd, gd) = (qv.data(), kv.data(), vv.data(), g.data());
        let mut pi = 0;
        for seg in segments {
            let len = seg.len();
            let s0 = seg.start;
            for h in 0..heads {
                let off = h * dh;
                let p = &probs[pi];
                pi += 1;
                // dP = dO V^T, dV = P^T dO
                let mut ds = vec![0.0; len * len];
                for i in 0..len {
                    let go = &gd[(s0 + i) * d + off..(s0 + i) * d + off + dh];
                    let mut rowdot = 0.0;
                    for j in 0..len {
                        let vj = &vd[(s0 + j) * d + off..(s0 + j) * d + off + dh];
                        let dp: f64 = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                        ds[i * len + j] = dp;
                        rowdot += dp * p[i * len + j];
                        let w = p[i * len + j];
                        let dvj = &mut dv[(s0 + j) * d + off..(s0 + j) * d + off + dh];
                        for (o, x) in dvj.iter_mut().zip(go) {
                            *o += w * x;
                        }
                    }
                    for j in 0..len {
                        ds[i * len + j] = p[i * len + j] * (ds[i * len + j] - rowdot) * scale;
                    }
                }
                for i in 0..len {
                    for j in 0..len {
                        let w = ds[i * len + j];
                        if w == 0.0 {
                            continue;
                        }
                        for t in 0..dh {
                            dq[(s0 + i) * d + off + t] += w * kd[(s0 + j) * d + off + t];
                            dk[(s0 + j) * d + off + t] += w * qd[(s0 + i) * d + off + t];
                        }
                    }
                }
            }
        }
        let shape = qv.shape().to_vec();
        self.accum(grads, q, Tensor::new(shape.clone(), dq).unwrap());
        self.accum(grads, k, Tensor::new(shape.clone(), dk).unwrap());
        self.accum(grads, v, Tensor::new(shape, dv).unwrap());
    }
}
