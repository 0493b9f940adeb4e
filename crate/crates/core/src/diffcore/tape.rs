//! Reverse-mode differentiation over an append-only tape.
//!
//! Every op appends a node whose inputs precede it, so the tape is a DAG in
//! topological order by construction and backward is a single reverse sweep.

use super::params::{GradStore, ParamStore};
use super::tensor::{gemm_nn, gemm_nt, gemm_tn, log_softmax_row, softmax_row, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Op<T> {
    Const,
    Param(usize),
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    MulConst(Var, Vec<T>),
    Exp(Var),
    Gelu(Var),
    Clamp(Var, T, T),
    Minimum(Var, Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    SliceCols {
        x: Var,
        start: usize,
        width: usize,
    },
    ConcatCols(Vec<Var>),
    Pick {
        x: Var,
        at: Vec<(usize, usize)>,
    },
    Sum(Var),
    Dot(Var, Vec<T>),
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
}

pub struct Tape<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<Var>>,
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::Input(format!("{op}: {detail}"))
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(i)) => self.params.tensor(*i),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::Input(format!("node {} is not on this tape", v.0)))
        }
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Const)
    }

    /// Node for parameter `idx`; repeated calls return the same node.
    pub fn param(&mut self, idx: usize) -> Var {
        if let Some(v) = self.param_nodes[idx] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(idx),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[idx] = Some(v);
        v
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let idx = self
            .params
            .index_of(name)
            .ok_or_else(|| Error::Input(format!("unknown parameter {name}")))?;
        Ok(self.param(idx))
    }

    /// Rows of `table` selected by `ids`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.check(table)?;
        let t = self.value(table);
        let (rows, cols) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(shape_err("embed", format!("id {id} >= {rows} rows")));
            }
            out.extend_from_slice(t.row(id));
        }
        let value = Tensor::matrix(ids.len(), cols, out);
        Ok(self.push(
            value,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, k2, n) = (av.rows(), av.cols(), bv.rows(), bv.cols());
        if k != k2 || bv.shape().len() != 2 {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut c = vec![T::zero(); m * n];
        gemm_nn(av.data(), bv.data(), &mut c, m, k, n);
        Ok(self.push(Tensor::matrix(m, n, c), Op::MatMul(a, b)))
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n, k2) = (av.rows(), av.cols(), bv.rows(), bv.cols());
        if k != k2 {
            return Err(shape_err(
                "matmul_nt",
                format!("{:?} x {:?}^T", av.shape(), bv.shape()),
            ));
        }
        let mut c = vec![T::zero(); m * n];
        gemm_nt(av.data(), bv.data(), &mut c, m, k, n);
        Ok(self.push(Tensor::matrix(m, n, c), Op::MatMulNT(a, b)))
    }

    fn binary(&mut self, name: &str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(
                name,
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor::new(av.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("minimum", a, b, T::min)?;
        Ok(self.push(t, Op::Minimum(a, b)))
    }

    /// Adds a length-`cols` vector to every row of a matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.check(x)?;
        self.check(row)?;
        let (xv, rv) = (self.value(x), self.value(row));
        let cols = xv.cols();
        if rv.len() != cols {
            return Err(shape_err(
                "add_row",
                format!("{:?} + row {:?}", xv.shape(), rv.shape()),
            ));
        }
        let mut data = xv.data().to_vec();
        for chunk in data.chunks_mut(cols) {
            for (d, &r) in chunk.iter_mut().zip(rv.data()) {
                *d = *d + r;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), data);
        Ok(self.push(t, Op::AddRow(x, row)))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T) -> Result<Tensor<T>> {
        self.check(x)?;
        let xv = self.value(x);
        Ok(Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|&v| f(v)).collect(),
        ))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let t = self.unary(x, |v| v * s)?;
        Ok(self.push(t, Op::Scale(x, s)))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let t = self.unary(x, T::exp)?;
        Ok(self.push(t, Op::Exp(x)))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let c = T::of(GELU_C);
        let k = T::of(0.044_715);
        let half = T::of(0.5);
        let t = self.unary(x, |v| {
            half * v * (T::one() + (c * (v + k * v * v * v)).tanh())
        })?;
        Ok(self.push(t, Op::Gelu(x)))
    }

    /// Elementwise clamp; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        let t = self.unary(x, |v| v.max(lo).min(hi))?;
        Ok(self.push(t, Op::Clamp(x, lo, hi)))
    }

    fn const_vec_check(&self, name: &str, x: Var, c: &[T]) -> Result<()> {
        self.check(x)?;
        if self.value(x).len() != c.len() {
            return Err(shape_err(
                name,
                format!("{} elements vs {} constants", self.value(x).len(), c.len()),
            ));
        }
        Ok(())
    }

    pub fn add_const(&mut self, x: Var, c: &[T]) -> Result<Var> {
        self.const_vec_check("add_const", x, c)?;
        let xv = self.value(x);
        let data = xv.data().iter().zip(c).map(|(&a, &b)| a + b).collect();
        let t = Tensor::new(xv.shape().to_vec(), data);
        Ok(self.push(t, Op::AddConst(x)))
    }

    pub fn mul_const(&mut self, x: Var, c: &[T]) -> Result<Var> {
        self.const_vec_check("mul_const", x, c)?;
        let xv = self.value(x);
        let data = xv.data().iter().zip(c).map(|(&a, &b)| a * b).collect();
        let t = Tensor::new(xv.shape().to_vec(), data);
        Ok(self.push(t, Op::MulConst(x, c.to_vec())))
    }

    /// Row-wise layer normalization with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(gain)?;
        self.check(bias)?;
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let (rows, cols) = (xv.rows(), xv.cols());
        if gv.len() != cols || bv.len() != cols {
            return Err(shape_err(
                "layer_norm",
                format!("{cols} features vs gain {:?}", gv.shape()),
            ));
        }
        let n = T::of(cols as f64);
        let eps = T::of(LN_EPS);
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    fn rowwise(&mut self, x: Var, f: fn(&[T], &mut [T])) -> Result<Tensor<T>> {
        self.check(x)?;
        let xv = self.value(x);
        let cols = xv.cols();
        let mut out = vec![T::zero(); xv.len()];
        for (src, dst) in xv.data().chunks(cols).zip(out.chunks_mut(cols)) {
            f(src, dst);
        }
        Ok(Tensor::new(xv.shape().to_vec(), out))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.rowwise(x, softmax_row)?;
        Ok(self.push(t, Op::Softmax(x)))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.rowwise(x, log_softmax_row)?;
        Ok(self.push(t, Op::LogSoftmax(x)))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if start + width > cols {
            return Err(shape_err(
                "slice_cols",
                format!("[{start}, {}) of {cols}", start + width),
            ));
        }
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&xv.row(r)[start..start + width]);
        }
        let t = Tensor::matrix(rows, width, out);
        Ok(self.push(t, Op::SliceCols { x, start, width }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat_cols", "no inputs".into()));
        }
        for &p in parts {
            self.check(p)?;
        }
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(shape_err("concat_cols", "row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::matrix(rows, total, out);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    /// Gathers `x[row, col]` for each pair into a vector.
    pub fn pick(&mut self, x: Var, at: &[(usize, usize)]) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut out = Vec::with_capacity(at.len());
        for &(r, c) in at {
            if r >= rows || c >= cols {
                return Err(shape_err(
                    "pick",
                    format!("({r}, {c}) outside {rows}x{cols}"),
                ));
            }
            out.push(xv.data()[r * cols + c]);
        }
        let t = Tensor::vector(out);
        Ok(self.push(t, Op::Pick { x, at: at.to_vec() }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.value(x).data().iter().copied().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x)))
    }

    /// Weighted sum `sum_i w_i x_i` with constant weights; a 0/1 weight
    /// vector gives a masked sum.
    pub fn dot(&mut self, x: Var, w: &[T]) -> Result<Var> {
        self.const_vec_check("dot", x, w)?;
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(w)
            .map(|(&a, &b)| a * b)
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot(x, w.to_vec())))
    }

    /// Gradients of the scalar `loss` with respect to every parameter.
    /// Parameters not reachable from `loss` get zeros.
    pub fn backward(&self, loss: Var) -> Result<GradStore<T>> {
        self.check(loss)?;
        if self.value(loss).len() != 1 {
            return Err(Error::Input(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut out = GradStore::zeros_like(self.params);
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Const => {}
                Op::Param(idx) => out.grad_mut(*idx).add_assign(&g),
                Op::Embed { table, ids } => {
                    let tv = self.value(*table);
                    let cols = tv.cols();
                    let mut d = Tensor::zeros(tv.shape());
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut d.data_mut()[id * cols..(id + 1) * cols];
                        for (x, &y) in dst.iter_mut().zip(g.row(r)) {
                            *x = *x + y;
                        }
                    }
                    accumulate(&mut grads, *table, d);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    let mut da = vec![T::zero(); m * k];
                    gemm_nt(g.data(), bv.data(), &mut da, m, n, k);
                    let mut db = vec![T::zero(); k * n];
                    gemm_tn(av.data(), g.data(), &mut db, m, k, n);
                    accumulate(&mut grads, *a, Tensor::new(av.shape().to_vec(), da));
                    accumulate(&mut grads, *b, Tensor::new(bv.shape().to_vec(), db));
                }
                Op::MatMulNT(a, b) => {
                    // c = a b^T: da = g b, db = g^T a
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                    let mut da = vec![T::zero(); m * k];
                    gemm_nn(g.data(), bv.data(), &mut da, m, n, k);
                    let mut db = vec![T::zero(); n * k];
                    gemm_tn(g.data(), av.data(), &mut db, m, n, k);
                    accumulate(&mut grads, *a, Tensor::new(av.shape().to_vec(), da));
                    accumulate(&mut grads, *b, Tensor::new(bv.shape().to_vec(), db));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    let neg = map(&g, |x| -x);
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, neg);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = zip_map(&g, bv, |x, y| x * y);
                    let db = zip_map(&g, av, |x, y| x * y);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Minimum(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = Tensor::zeros(av.shape());
                    let mut db = Tensor::zeros(bv.shape());
                    for j in 0..g.len() {
                        // ties route to the first argument
                        if av.data()[j] <= bv.data()[j] {
                            da.data_mut()[j] = g.data()[j];
                        } else {
                            db.data_mut()[j] = g.data()[j];
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddRow(x, row) => {
                    let cols = g.cols();
                    let mut dr = vec![T::zero(); cols];
                    for chunk in g.data().chunks(cols) {
                        for (d, &v) in dr.iter_mut().zip(chunk) {
                            *d = *d + v;
                        }
                    }
                    let rshape = self.value(*row).shape().to_vec();
                    accumulate(&mut grads, *row, Tensor::new(rshape, dr));
                    accumulate(&mut grads, *x, g);
                }
                Op::Scale(x, s) => accumulate(&mut grads, *x, map(&g, |v| v * *s)),
                Op::AddConst(x) => accumulate(&mut grads, *x, g),
                Op::MulConst(x, c) => {
                    let mut d = g;
                    for (v, &k) in d.data_mut().iter_mut().zip(c) {
                        *v = *v * k;
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::Exp(x) => {
                    let y = node.value.as_ref().expect("exp value");
                    accumulate(&mut grads, *x, zip_map(&g, y, |a, b| a * b));
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let c = T::of(GELU_C);
                    let k = T::of(0.044_715);
                    let half = T::of(0.5);
                    let three = T::of(3.0);
                    let d = zip_map(&g, xv, |gv, v| {
                        let u = c * (v + k * v * v * v);
                        let th = u.tanh();
                        let du = c * (T::one() + three * k * v * v);
                        gv * (half * (T::one() + th) + half * v * (T::one() - th * th) * du)
                    });
                    accumulate(&mut grads, *x, d);
                }
                Op::Clamp(x, lo, hi) => {
                    let xv = self.value(*x);
                    let d = zip_map(
                        &g,
                        xv,
                        |gv, v| {
                            if v < *lo || v > *hi {
                                T::zero()
                            } else {
                                gv
                            }
                        },
                    );
                    accumulate(&mut grads, *x, d);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let gv = self.value(*gain);
                    let cols = g.cols();
                    let rows = g.rows();
                    let n = T::of(cols as f64);
                    let mut dx = vec![T::zero(); rows * cols];
                    let mut dgain = vec![T::zero(); cols];
                    let mut dbias = vec![T::zero(); cols];
                    for r in 0..rows {
                        let gr = g.row(r);
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for c in 0..cols {
                            let dh = gr[c] * gv.data()[c];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * hr[c];
                            dgain[c] = dgain[c] + gr[c] * hr[c];
                            dbias[c] = dbias[c] + gr[c];
                        }
                        mean_dh = mean_dh / n;
                        mean_dh_h = mean_dh_h / n;
                        for c in 0..cols {
                            let dh = gr[c] * gv.data()[c];
                            dx[r * cols + c] = rstd[r] * (dh - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                    let xs = self.value(*x).shape().to_vec();
                    let gs = gv.shape().to_vec();
                    let bs = self.value(*bias).shape().to_vec();
                    accumulate(&mut grads, *x, Tensor::new(xs, dx));
                    accumulate(&mut grads, *gain, Tensor::new(gs, dgain));
                    accumulate(&mut grads, *bias, Tensor::new(bs, dbias));
                }
                Op::Softmax(x) => {
                    let y = node.value.as_ref().expect("softmax value");
                    let cols = y.cols();
                    let mut d = vec![T::zero(); y.len()];
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dotv: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for c in 0..cols {
                            d[r * cols + c] = yr[c] * (gr[c] - dotv);
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(y.shape().to_vec(), d));
                }
                Op::LogSoftmax(x) => {
                    let y = node.value.as_ref().expect("log_softmax value");
                    let cols = y.cols();
                    let mut d = vec![T::zero(); y.len()];
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let gsum: T = gr.iter().copied().sum();
                        for c in 0..cols {
                            d[r * cols + c] = gr[c] - yr[c].exp() * gsum;
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(y.shape().to_vec(), d));
                }
                Op::SliceCols { x, start, width } => {
                    let xv = self.value(*x);
                    let cols = xv.cols();
                    let mut d = Tensor::zeros(xv.shape());
                    for r in 0..xv.rows() {
                        let dst = &mut d.data_mut()[r * cols + start..r * cols + start + width];
                        dst.copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let w = pv.cols();
                        let mut d = Vec::with_capacity(pv.len());
                        for r in 0..pv.rows() {
                            d.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        offset += w;
                        accumulate(&mut grads, p, Tensor::new(pv.shape().to_vec(), d));
                    }
                }
                Op::Pick { x, at } => {
                    let xv = self.value(*x);
                    let cols = xv.cols();
                    let mut d = Tensor::zeros(xv.shape());
                    for (j, &(r, c)) in at.iter().enumerate() {
                        let slot = &mut d.data_mut()[r * cols + c];
                        *slot = *slot + g.data()[j];
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::Sum(x) => {
                    let xv = self.value(*x);
                    let d = Tensor::new(xv.shape().to_vec(), vec![g.item(); xv.len()]);
                    accumulate(&mut grads, *x, d);
                }
                Op::Dot(x, w) => {
                    let xv = self.value(*x);
                    let gi = g.item();
                    let d = Tensor::new(xv.shape().to_vec(), w.iter().map(|&k| k * gi).collect());
                    accumulate(&mut grads, *x, d);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, d: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

fn map<T: Real>(t: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::new(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.push(
            "w",
            Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]),
        );
        p.push("b", Tensor::vector(vec![0.0, 0.0, 0.0]));
        p.push("unused", Tensor::vector(vec![1.0]));
        p
    }

    #[test]
    fn sum_of_params_gives_ones() {
        let p = store();
        let mut tape = Tape::new(&p);
        let w = tape.param(0);
        let s = tape.sum(w).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.grad(0).data().iter().all(|&x| x == 1.0));
        assert!(g.grad(1).data().iter().all(|&x| x == 0.0));
        assert!(g.grad(2).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn cross_entropy_bias_gradient_is_softmax_minus_onehot() {
        let p = store();
        let mut tape = Tape::new(&p);
        let x = tape.constant(Tensor::matrix(1, 2, vec![1.0, -1.0]));
        let w = tape.param(0);
        let b = tape.param(1);
        let h = tape.matmul(x, w).unwrap();
        let logits = tape.add_row(h, b).unwrap();
        let lp = tape.log_softmax(logits).unwrap();
        let picked = tape.pick(lp, &[(0, 2)]).unwrap();
        let loss = tape.scale(picked, -1.0).unwrap();
        let g = tape.backward(loss).unwrap();
        let mut probs = [0.0; 3];
        softmax_row(tape.value(logits).row(0), &mut probs);
        for c in 0..3 {
            let onehot = if c == 2 { 1.0 } else { 0.0 };
            assert!((g.grad(1).data()[c] - (probs[c] - onehot)).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let p = store();
        let mut tape = Tape::new(&p);
        let w = tape.param(0);
        assert!(tape.backward(w).is_err());
    }

    #[test]
    fn shape_mismatch_is_construction_error() {
        let p = store();
        let mut tape = Tape::new(&p);
        let w = tape.param(0);
        let b = tape.param(1);
        assert!(tape.matmul(w, w).is_err());
        assert!(tape.add(w, b).is_err());
    }

    #[test]
    fn minimum_routes_gradient_to_smaller() {
        let p = store();
        let mut tape = Tape::new(&p);
        let a = tape.constant(Tensor::matrix(1, 2, vec![1.0, 5.0]));
        let b = tape.param(1);
        let b2 = tape.slice_cols(b, 0, 2).unwrap();
        let m = tape.minimum(a, b2).unwrap();
        let s = tape.sum(m).unwrap();
        let g = tape.backward(s).unwrap();
        // b = [0, 0, 0]: b < a in both slots
        assert_eq!(g.grad(1).data(), &[1.0, 1.0, 0.0]);
    }
}
