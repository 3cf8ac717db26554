//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward pass. [`Tape::backward`] walks the nodes in
//! reverse and accumulates adjoints. Parameters are read from a borrowed
//! [`ParamStore`] without copying; their gradients are returned through a
//! [`GradStore`].

use super::tensor::{gemm, gemm_view, MatView};
use super::{GradStore, ParamId, ParamStore, ShapeError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Marker for "no source" in [`Tape::gather`]; the output element is 0.
pub const GATHER_NONE: usize = usize::MAX;

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        x: Var,
        row: Var,
    },
    Scale(Var, f64),
    MulConst {
        x: Var,
        c: Vec<f64>,
    },
    Gelu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    MeanRows(Var),
    SumAll(Var),
    Reshape(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Custom {
        x: Var,
        local_grad: Vec<f64>,
    },
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Deliberate backward-pass corruption, used only as a negative control for
/// gradient checking.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fault {
    /// Multiplies the GELU input adjoint by the given factor.
    ScaleGeluGrad(f64),
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    fault: Option<Fault>,
}

/// Adjoints of every node after [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
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

fn softmax_row_inplace(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => {
            for (a, b) in d.iter_mut().zip(src) {
                *a += b;
            }
        }
        None => *dst = Some(src.to_vec()),
    }
}

fn slot(dst: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    dst.get_or_insert_with(|| vec![0.0; len])
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn set_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.requires(v));
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// The node for a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// `a · b`, both 2-D.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, ShapeError> {
        let (m, k) = self.dims(a);
        let (br, bc) = self.dims(b);
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(ShapeError::new(
                "matmul",
                format!(
                    "{:?} x {:?}{}",
                    self.shape(a),
                    self.shape(b),
                    if trans_b { "ᵀ" } else { "" }
                ),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
            false,
            trans_b,
            false,
        );
        Ok(self.push(
            Tensor::matrix(m, n, out),
            Op::MatMul { a, b, trans_b },
            &[a, b],
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), ShapeError> {
        if self.shape(a) != self.shape(b) {
            return Err(ShapeError::new(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, ShapeError> {
        self.same_shape(op_name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let t = Tensor::new(ta.shape(), data).expect("same shape");
        Ok(self.push(t, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, ShapeError> {
        let cols = self.value(x).cols();
        if self.value(row).len() != cols {
            return Err(ShapeError::new(
                "add_row",
                format!("{:?} + {:?}", self.shape(x), self.shape(row)),
            ));
        }
        let r = self.value(row).data().to_vec();
        let tx = self.value(x);
        let mut data = tx.data().to_vec();
        if cols > 0 {
            for chunk in data.chunks_exact_mut(cols) {
                for (a, b) in chunk.iter_mut().zip(&r) {
                    *a += b;
                }
            }
        }
        let t = Tensor::new(tx.shape(), data).expect("shape");
        Ok(self.push(t, Op::AddRow { x, row }, &[x, row]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape(), tx.data().iter().map(|v| v * s).collect()).expect("shape");
        self.push(t, Op::Scale(x, s), &[x])
    }

    /// Elementwise product with a constant of the same length (masks).
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var, ShapeError> {
        let tx = self.value(x);
        if tx.len() != c.len() {
            return Err(ShapeError::new(
                "mul_const",
                format!("{:?} vs {}", tx.shape(), c.len()),
            ));
        }
        let t = Tensor::new(
            tx.shape(),
            tx.data().iter().zip(&c).map(|(a, b)| a * b).collect(),
        )
        .expect("shape");
        Ok(self.push(t, Op::MulConst { x, c }, &[x]))
    }

    fn map(&mut self, x: Var, f: fn(f64) -> f64, op: Op) -> Var {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape(), tx.data().iter().map(|&v| f(v)).collect()).expect("shape");
        self.push(t, op, &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, gelu, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let cols = tx.cols();
        let mut data = tx.data().to_vec();
        if cols > 0 {
            data.chunks_exact_mut(cols).for_each(softmax_row_inplace);
        }
        let t = Tensor::new(tx.shape(), data).expect("shape");
        self.push(t, Op::SoftmaxRows(x), &[x])
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let cols = tx.cols();
        let mut data = tx.data().to_vec();
        if cols > 0 {
            for row in data.chunks_exact_mut(cols) {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                row.iter_mut().for_each(|v| *v -= lse);
            }
        }
        let t = Tensor::new(tx.shape(), data).expect("shape");
        self.push(t, Op::LogSoftmaxRows(x), &[x])
    }

    /// Per-row normalization to zero mean and unit variance (biased
    /// estimator), then `gain * x̂ + bias`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    ) -> Result<Var, ShapeError> {
        let cols = self.value(x).cols();
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(ShapeError::new(
                "layer_norm",
                format!("{:?} with affine {:?}", self.shape(x), self.shape(gain)),
            ));
        }
        let (tx, g, b) = (
            self.value(x),
            self.value(gain).data(),
            self.value(bias).data(),
        );
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = tx.row(r);
            let mut mean = row.iter().sum::<f64>() / cols as f64;
            mean += row.iter().map(|v| v - mean).sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let t = Tensor::new(tx.shape(), out).expect("shape");
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Concatenates 2-D inputs along columns.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var, ShapeError> {
        let rows = self.dims(xs[0]).0;
        if xs.iter().any(|&v| self.dims(v).0 != rows) {
            return Err(ShapeError::new("concat_cols", "row counts differ"));
        }
        let total: usize = xs.iter().map(|&v| self.dims(v).1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &v in xs {
                out.extend_from_slice(self.value(v).row(r));
            }
        }
        Ok(self.push(
            Tensor::matrix(rows, total, out),
            Op::ConcatCols(xs.to_vec()),
            xs,
        ))
    }

    /// Concatenates 2-D inputs along rows.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var, ShapeError> {
        let cols = self.dims(xs[0]).1;
        if xs.iter().any(|&v| self.dims(v).1 != cols) {
            return Err(ShapeError::new("concat_rows", "column counts differ"));
        }
        let mut out = Vec::new();
        for &v in xs {
            out.extend_from_slice(self.value(v).data());
        }
        let rows = out.len() / cols.max(1);
        Ok(self.push(
            Tensor::matrix(rows, cols, out),
            Op::ConcatRows(xs.to_vec()),
            xs,
        ))
    }

    /// `out[i] = x[idx[i]]` over flat data, 0 where `idx[i] == GATHER_NONE`.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>, shape: &[usize]) -> Result<Var, ShapeError> {
        let n = self.value(x).len();
        if shape.iter().product::<usize>() != idx.len()
            || idx.iter().any(|&i| i != GATHER_NONE && i >= n)
        {
            return Err(ShapeError::new(
                "gather",
                format!("index out of range or shape {shape:?}"),
            ));
        }
        let src = self.value(x).data();
        let data = idx
            .iter()
            .map(|&i| if i == GATHER_NONE { 0.0 } else { src[i] })
            .collect();
        let t = Tensor::new(shape, data).expect("shape");
        Ok(self.push(t, Op::Gather { x, idx }, &[x]))
    }

    /// Selects rows of a 2-D input.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, ShapeError> {
        let (n, c) = self.dims(x);
        if rows.iter().any(|&r| r >= n) {
            return Err(ShapeError::new("gather_rows", "row out of range"));
        }
        let idx = rows
            .iter()
            .flat_map(|&r| (0..c).map(move |j| r * c + j))
            .collect();
        self.gather(x, idx, &[rows.len(), c])
    }

    /// Places row `i` of `x` at row `rows[i]` of an `n_rows`-row zero matrix.
    pub fn scatter_rows(
        &mut self,
        x: Var,
        rows: &[usize],
        n_rows: usize,
    ) -> Result<Var, ShapeError> {
        let (n, c) = self.dims(x);
        if rows.len() != n {
            return Err(ShapeError::new(
                "scatter_rows",
                format!("{} targets for {n} rows", rows.len()),
            ));
        }
        let mut src_of = vec![GATHER_NONE; n_rows];
        for (i, &r) in rows.iter().enumerate() {
            if r >= n_rows || src_of[r] != GATHER_NONE {
                return Err(ShapeError::new(
                    "scatter_rows",
                    format!("target row {r} invalid or duplicated"),
                ));
            }
            src_of[r] = i;
        }
        let idx = src_of
            .iter()
            .flat_map(|&s| {
                (0..c).map(move |j| {
                    if s == GATHER_NONE {
                        GATHER_NONE
                    } else {
                        s * c + j
                    }
                })
            })
            .collect();
        self.gather(x, idx, &[n_rows, c])
    }

    /// Mean over rows: `n×c -> 1×c`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(self.value(x).row(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        self.push(Tensor::matrix(1, c, out), Op::MeanRows(x), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, ShapeError> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let idx = (0..c)
            .flat_map(|j| (0..r).map(move |i| i * c + j))
            .collect();
        self.gather(x, idx, &[c, r])
            .expect("transpose indices are in range")
    }

    /// Multi-head scaled dot-product attention core. `q` is `nq×D`, `k` and
    /// `v` are `nk×D`; head `h` uses columns `h·d_k..(h+1)·d_k`. Returns the
    /// concatenated head outputs `nq×D`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var, ShapeError> {
        let (nq, d) = self.dims(q);
        let (nk, dk_) = self.dims(k);
        if dk_ != d || self.dims(v) != (nk, d) || heads == 0 || d % heads != 0 {
            return Err(ShapeError::new(
                "attention",
                format!(
                    "q {:?} k {:?} v {:?} heads {heads}",
                    self.shape(q),
                    self.shape(k),
                    self.shape(v)
                ),
            ));
        }
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut probs = vec![0.0; heads * nq * nk];
        let mut out = vec![0.0; nq * d];
        let (tq, tk, tv) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        for h in 0..heads {
            let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
            gemm_view(
                MatView {
                    data: tq,
                    offset: h * dk,
                    row_stride: d,
                },
                MatView {
                    data: tk,
                    offset: h * dk,
                    row_stride: d,
                },
                p,
                0,
                nk,
                nq,
                dk,
                nk,
                false,
                true,
                scale,
                false,
            );
            if nk > 0 {
                p.chunks_exact_mut(nk).for_each(softmax_row_inplace);
            }
            gemm_view(
                MatView {
                    data: p,
                    offset: 0,
                    row_stride: nk,
                },
                MatView {
                    data: tv,
                    offset: h * dk,
                    row_stride: d,
                },
                &mut out,
                h * dk,
                d,
                nq,
                nk,
                dk,
                false,
                false,
                1.0,
                false,
            );
        }
        let t = Tensor::matrix(nq, d, out);
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Scalar node with a precomputed local gradient `d out / d x`.
    pub fn custom_scalar(
        &mut self,
        x: Var,
        value: f64,
        local_grad: Vec<f64>,
    ) -> Result<Var, ShapeError> {
        if local_grad.len() != self.value(x).len() {
            return Err(ShapeError::new(
                "custom_scalar",
                "gradient length differs from input",
            ));
        }
        Ok(self.push(Tensor::scalar(value), Op::Custom { x, local_grad }, &[x]))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    /// Reverse pass that adds every parameter gradient into `out`.
    pub fn backward_into(&self, loss: Var, out: &mut GradStore) {
        let grads = self.backward(loss);
        for (pid, var) in self.param_vars.iter().enumerate() {
            if let Some(var) = var {
                if let Some(g) = grads.get(*var) {
                    out.accumulate(ParamId(pid), g);
                }
            }
        }
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = match &node.value {
            Value::Owned(t) => t,
            Value::Param(_) => return,
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.dims(*a);
                let n = out.cols();
                if self.requires(*a) {
                    // dA = G · B  (if trans_b)  or  G · Bᵀ
                    let bv = self.value(*b).data();
                    let da = slot(&mut grads[a.0], m * k);
                    gemm(g, bv, da, m, n, k, false, !trans_b, true);
                }
                if self.requires(*b) {
                    let av = self.value(*a).data();
                    let db = slot(&mut grads[b.0], k * n);
                    if *trans_b {
                        // B is n×k: dB = Gᵀ · A
                        gemm(g, av, db, n, m, k, true, false, true);
                    } else {
                        gemm(av, g, db, k, m, n, true, false, true);
                    }
                }
            }
            Op::Add(a, b) => {
                if self.requires(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.requires(*b) {
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if self.requires(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.requires(*b) {
                    let d = slot(&mut grads[b.0], g.len());
                    d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                for (this, other) in [(*a, *b), (*b, *a)] {
                    if self.requires(this) {
                        let o = self.value(other).data();
                        let d = slot(&mut grads[this.0], g.len());
                        for ((d, g), o) in d.iter_mut().zip(g).zip(o) {
                            *d += g * o;
                        }
                    }
                }
            }
            Op::AddRow { x, row } => {
                if self.requires(*x) {
                    add_into(&mut grads[x.0], g);
                }
                if self.requires(*row) {
                    let c = out.cols();
                    let d = slot(&mut grads[row.0], c);
                    for chunk in g.chunks_exact(c) {
                        d.iter_mut().zip(chunk).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Scale(x, s) => {
                if self.requires(*x) {
                    let d = slot(&mut grads[x.0], g.len());
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g * s);
                }
            }
            Op::MulConst { x, c } => {
                if self.requires(*x) {
                    let d = slot(&mut grads[x.0], g.len());
                    for ((d, g), c) in d.iter_mut().zip(g).zip(c) {
                        *d += g * c;
                    }
                }
            }
            Op::Gelu(x) => {
                if self.requires(*x) {
                    let factor = match self.fault {
                        Some(Fault::ScaleGeluGrad(f)) => f,
                        None => 1.0,
                    };
                    let xv = self.value(*x).data();
                    let d = slot(&mut grads[x.0], g.len());
                    for ((d, g), x) in d.iter_mut().zip(g).zip(xv) {
                        *d += g * gelu_grad(*x) * factor;
                    }
                }
            }
            Op::Sigmoid(x) => {
                if self.requires(*x) {
                    let d = slot(&mut grads[x.0], g.len());
                    for ((d, g), y) in d.iter_mut().zip(g).zip(out.data()) {
                        *d += g * y * (1.0 - y);
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                if self.requires(*x) {
                    let c = out.cols();
                    let d = slot(&mut grads[x.0], g.len());
                    for ((d, g), y) in d
                        .chunks_exact_mut(c)
                        .zip(g.chunks_exact(c))
                        .zip(out.data().chunks_exact(c))
                    {
                        let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            d[j] += y[j] * (g[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(x) => {
                if self.requires(*x) {
                    let c = out.cols();
                    let d = slot(&mut grads[x.0], g.len());
                    for ((d, g), y) in d
                        .chunks_exact_mut(c)
                        .zip(g.chunks_exact(c))
                        .zip(out.data().chunks_exact(c))
                    {
                        let s: f64 = g.iter().sum();
                        for j in 0..c {
                            d[j] += g[j] - y[j].exp() * s;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = out.cols();
                let gv = self.value(*gain).data();
                if self.requires(*x) {
                    let d = slot(&mut grads[x.0], g.len());
                    let mut dxhat = vec![0.0; c];
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        for j in 0..c {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dh =
                            dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        let dr = &mut d[r * c..(r + 1) * c];
                        for j in 0..c {
                            dr[j] += rs * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
                if self.requires(*gain) {
                    let d = slot(&mut grads[gain.0], c);
                    for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            d[j] += gr[j] * hr[j];
                        }
                    }
                }
                if self.requires(*bias) {
                    let d = slot(&mut grads[bias.0], c);
                    for gr in g.chunks_exact(c) {
                        d.iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::ConcatCols(xs) => {
                let total = out.cols();
                let rows = out.rows();
                let mut off = 0;
                for &v in xs {
                    let c = self.dims(v).1;
                    if self.requires(v) {
                        let d = slot(&mut grads[v.0], rows * c);
                        for r in 0..rows {
                            for j in 0..c {
                                d[r * c + j] += g[r * total + off + j];
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &v in xs {
                    let n = self.value(v).len();
                    if self.requires(v) {
                        add_into(&mut grads[v.0], &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::Gather { x, idx } => {
                if self.requires(*x) {
                    let n = self.value(*x).len();
                    let d = slot(&mut grads[x.0], n);
                    for (&i, g) in idx.iter().zip(g) {
                        if i != GATHER_NONE {
                            d[i] += g;
                        }
                    }
                }
            }
            Op::MeanRows(x) => {
                if self.requires(*x) {
                    let (r, c) = self.dims(*x);
                    let d = slot(&mut grads[x.0], r * c);
                    for chunk in d.chunks_exact_mut(c) {
                        chunk
                            .iter_mut()
                            .zip(g)
                            .for_each(|(d, g)| *d += g / r as f64);
                    }
                }
            }
            Op::SumAll(x) => {
                if self.requires(*x) {
                    let n = self.value(*x).len();
                    let d = slot(&mut grads[x.0], n);
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Reshape(x) => {
                if self.requires(*x) {
                    add_into(&mut grads[x.0], g);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                self.attention_backward(*q, *k, *v, *heads, probs, g, grads);
            }
            Op::Custom { x, local_grad } => {
                if self.requires(*x) {
                    let d = slot(&mut grads[x.0], local_grad.len());
                    d.iter_mut()
                        .zip(local_grad)
                        .for_each(|(d, l)| *d += g[0] * l);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (nq, d) = self.dims(q);
        let nk = self.dims(k).0;
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let (tq, tk, tv) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut dq = vec![0.0; nq * d];
        let mut dkm = vec![0.0; nk * d];
        let mut dv = vec![0.0; nk * d];
        let mut dp = vec![0.0; nq * nk];
        for h in 0..heads {
            let p = &probs[h * nq * nk..(h + 1) * nq * nk];
            // dV_h += Pᵀ · G_h
            gemm_view(
                MatView {
                    data: p,
                    offset: 0,
                    row_stride: nk,
                },
                MatView {
                    data: g,
                    offset: h * dk,
                    row_stride: d,
                },
                &mut dv,
                h * dk,
                d,
                nk,
                nq,
                dk,
                true,
                false,
                1.0,
                true,
            );
            // dP = G_h · V_hᵀ
            gemm_view(
                MatView {
                    data: g,
                    offset: h * dk,
                    row_stride: d,
                },
                MatView {
                    data: tv,
                    offset: h * dk,
                    row_stride: d,
                },
                &mut dp,
                0,
                nk,
                nq,
                dk,
                nk,
                false,
                true,
                1.0,
                false,
            );
            // dS = P ⊙ (dP - rowsum(dP ⊙ P))
            if nk > 0 {
                for (dr, pr) in dp.chunks_exact_mut(nk).zip(p.chunks_exact(nk)) {
                    let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                    for (d, p) in dr.iter_mut().zip(pr) {
                        *d = p * (*d - dot);
                    }
                }
            }
            // dQ_h += scale · dS · K_h ; dK_h += scale · dSᵀ · Q_h
            gemm_view(
                MatView {
                    data: &dp,
                    offset: 0,
                    row_stride: nk,
                },
                MatView {
                    data: tk,
                    offset: h * dk,
                    row_stride: d,
                },
                &mut dq,
                h * dk,
                d,
                nq,
                nk,
                dk,
                false,
                false,
                scale,
                true,
            );
            gemm_view(
                MatView {
                    data: &dp,
                    offset: 0,
                    row_stride: nk,
                },
                MatView {
                    data: tq,
                    offset: h * dk,
                    row_stride: d,
                },
                &mut dkm,
                h * dk,
                d,
                nk,
                nq,
                dk,
                true,
                false,
                scale,
                true,
            );
        }
        for (var, d) in [(q, dq), (k, dkm), (v, dv)] {
            if self.requires(var) {
                add_into(&mut grads[var.0], &d);
            }
        }
    }
}
