//! Reverse-mode differentiation over a linear tape of 2-D values.
//!
//! Every node is a `rows x cols` matrix (vectors are `1 x n` or `n x 1`).
//! Forward ops append nodes; [`Tape::backward`] walks the tape once in reverse
//! and returns the gradient of a scalar node with respect to every node that
//! requires one.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::tensor::{ParamId, ParamSet, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub(crate) const GELU_COEFF: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Ln(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Transpose(Var),
    Sum(Var),
    RowSum(Var),
    BroadcastCols(Var),
    Gather { x: Var, idx: Vec<usize> },
    Bce { p: Var, targets: Vec<f64>, eps: f64 },
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<(u64, usize), Var>,
}

/// `C = A·B + beta·C` where `A` is logically `m x k` and `B` is `k x n`.
/// `a_t`/`b_t` mark operands stored transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_t { (1, k) } else { (n, 1) };
    // SAFETY: slice lengths checked above; strides describe exactly the
    // row-major (or transposed) layouts of those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x * x)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
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

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(vec![n.rows, n.cols], n.value.clone()).expect("node dims are consistent")
    }

    /// Records a tensor as a leaf; it is differentiable iff the tensor has a
    /// gradient buffer.
    pub fn input(&mut self, t: &Tensor) -> Var {
        let (r, c) = t.as_matrix_dims();
        self.push(r, c, t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        if rows * cols != value.len() {
            return Err(Error::shape("constant", format!("{rows}x{cols} vs {}", value.len())));
        }
        Ok(self.push(rows, cols, value, Op::Leaf, false))
    }

    /// Differentiable leaf from raw values.
    pub fn variable(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        if rows * cols != value.len() {
            return Err(Error::shape("variable", format!("{rows}x{cols} vs {}", value.len())));
        }
        Ok(self.push(rows, cols, value, Op::Leaf, true))
    }

    /// Leaf bound to a parameter. Repeated calls for the same parameter
    /// return the same node so its gradient is gathered once.
    pub fn param(&mut self, set: &ParamSet, id: ParamId) -> Var {
        let key = (set.uid(), id.0);
        if let Some(v) = self.params.get(&key) {
            return *v;
        }
        let t = set.get(id);
        let (r, c) = t.as_matrix_dims();
        let v = self.push(
            r,
            c,
            t.data().to_vec(),
            Op::Param,
            true,
        );
        self.params.insert(key, v);
        v
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::shape(op, format!("{da:?} vs {db:?}")));
        }
        Ok(da)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(m, n, out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (n, k2)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("{m}x{k} · ({n}x{k2})ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), true, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(m, n, out, Op::MatMulNt(a, b), rg))
    }

    fn zip_op(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (r, c) = self.same_dims(name, a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(r, c, out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let ((m, n), (r1, n2)) = (self.dims(a), self.dims(row));
        if r1 != 1 || n != n2 {
            return Err(Error::shape("add_row", format!("{m}x{n} + {r1}x{n2}")));
        }
        let b = self.value(row);
        let out = self
            .value(a)
            .chunks(n.max(1))
            .flat_map(|r| r.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(m, n, out, Op::AddRow(a, row), rg))
    }

    fn map_op(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|x| f(*x)).collect();
        let rg = self.rg(a);
        self.push(r, c, out, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map_op(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map_op(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map_op(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// GELU, tanh approximation with cubic coefficient 0.044715.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map_op(a, gelu, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map_op(a, sigmoid, Op::Sigmoid(a))
    }

    /// Numerically stable `ln σ(x)`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.map_op(a, log_sigmoid, Op::LogSigmoid(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.map_op(a, f64::ln, Op::Ln(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let rg = self.rg(a);
        self.push(r, c, out, Op::SoftmaxRows(a), rg)
    }

    /// Row-wise standardization followed by a per-column affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.dims(gain) != (1, n) || self.dims(bias) != (1, n) {
            return Err(Error::shape(
                "layer_norm",
                format!("x {m}x{n}, gain {:?}, bias {:?}", self.dims(gain), self.dims(bias)),
            ));
        }
        if n < 2 {
            return Err(Error::shape("layer_norm", "needs at least 2 columns"));
        }
        let mut xhat = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        for row in self.value(x).chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            xhat.extend(row.iter().map(|v| (v - mean) * is));
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let out = xhat
            .chunks(n)
            .flat_map(|r| r.iter().zip(g).zip(b).map(|((h, g), b)| h * g + b))
            .collect();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            m,
            n,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start + len > n {
            return Err(Error::shape("slice_cols", format!("{start}+{len} > {n}")));
        }
        let out = self
            .value(x)
            .chunks(n.max(1))
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let rg = self.rg(x);
        Ok(self.push(m, len, out, Op::SliceCols { x, start }, rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start + len > m {
            return Err(Error::shape("slice_rows", format!("{start}+{len} > {m}")));
        }
        let out = self.value(x)[start * n..(start + len) * n].to_vec();
        let rg = self.rg(x);
        Ok(self.push(len, n, out, Op::SliceRows { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::shape("concat_cols", "no inputs"));
        };
        let m = self.dims(*first).0;
        if parts.iter().any(|p| self.dims(*p).0 != m) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let n: usize = parts.iter().map(|p| self.dims(*p).1).sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for p in parts {
                let c = self.dims(*p).1;
                out.extend_from_slice(&self.value(*p)[r * c..(r + 1) * c]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(m, n, out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::shape("concat_rows", "no inputs"));
        };
        let n = self.dims(*first).1;
        if parts.iter().any(|p| self.dims(*p).1 != n) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let m: usize = parts.iter().map(|p| self.dims(*p).0).sum();
        let mut out = Vec::with_capacity(m * n);
        for p in parts {
            out.extend_from_slice(self.value(*p));
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(m, n, out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let v = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v[i * n + j];
            }
        }
        let rg = self.rg(x);
        self.push(n, m, out, Op::Transpose(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(1, 1, vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums each row: `m x n -> m x 1`.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let out = self.value(x).chunks(n.max(1)).map(|r| r.iter().sum()).collect();
        let rg = self.rg(x);
        self.push(m, 1, out, Op::RowSum(x), rg)
    }

    /// Repeats an `m x 1` column `n` times: `m x 1 -> m x n`.
    pub fn broadcast_cols(&mut self, x: Var, n: usize) -> Result<Var> {
        let (m, c) = self.dims(x);
        if c != 1 {
            return Err(Error::shape("broadcast_cols", format!("expected column, got {m}x{c}")));
        }
        let out = self.value(x).iter().flat_map(|v| std::iter::repeat_n(*v, n)).collect();
        let rg = self.rg(x);
        Ok(self.push(m, n, out, Op::BroadcastCols(x), rg))
    }

    /// Selects flat elements into a `1 x k` row.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let len = self.value(x).len();
        if let Some(bad) = idx.iter().find(|i| **i >= len) {
            return Err(Error::shape("gather", format!("index {bad} out of {len}")));
        }
        let out = idx.iter().map(|i| self.value(x)[*i]).collect();
        let rg = self.rg(x);
        Ok(self.push(1, idx.len(), out, Op::Gather { x, idx: idx.to_vec() }, rg))
    }

    /// Mean binary cross-entropy of probabilities `p` against fixed targets,
    /// with `p` clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, p: Var, targets: &[f64], eps: f64) -> Result<Var> {
        let n = self.value(p).len();
        if n != targets.len() {
            return Err(Error::shape("bce", format!("{n} predictions vs {} targets", targets.len())));
        }
        if n == 0 {
            return Err(Error::shape("bce", "empty input"));
        }
        let s: f64 = self
            .value(p)
            .iter()
            .zip(targets)
            .map(|(p, y)| {
                let p = p.clamp(eps, 1.0 - eps);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum();
        let rg = self.rg(p);
        Ok(self.push(
            1,
            1,
            vec![s / n as f64],
            Op::Bce {
                p,
                targets: targets.to_vec(),
                eps,
            },
            rg,
        ))
    }

    /// Gradient of the scalar `loss` with respect to every differentiable node.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.dims(loss) != (1, 1) {
            return Err(Error::shape("backward", format!("loss must be 1x1, got {:?}", self.dims(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    /// Runs [`Tape::backward`] and adds parameter gradients into the grad
    /// buffers of the given sets.
    pub fn backward_into(&self, loss: Var, sets: &mut [&mut ParamSet]) -> Result<Grads> {
        let grads = self.backward(loss)?;
        for set in sets.iter_mut() {
            self.accumulate(&grads, set);
        }
        Ok(grads)
    }

    pub fn accumulate(&self, grads: &Grads, set: &mut ParamSet) {
        let uid = set.uid();
        for (&(s, index), v) in &self.params {
            if s != uid {
                continue;
            }
            if let Some(g) = grads.get(*v) {
                if let Some(buf) = set.get_mut(ParamId(index)).grad_mut() {
                    add_into(buf, g);
                }
            }
        }
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (m, n) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let k = self.dims(*a).1;
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    gemm(m, n, k, g, false, bv, true, ga, 1.0);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm(k, m, n, av, true, g, false, gb, 1.0);
                }
            }
            Op::MatMulNt(a, b) => {
                let k = self.dims(*a).1;
                if let Some(ga) = self.acc(grads, *a) {
                    gemm(m, n, k, g, false, self.value(*b), false, ga, 1.0);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm(n, m, k, g, true, self.value(*a), false, gb, 1.0);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] / bv[i];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gr) = self.acc(grads, *row) {
                    for r in g.chunks(n.max(1)) {
                        add_into(gr, r);
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, v)| *d += v * s);
                }
            }
            Op::AddScalar(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        if av[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * gelu_grad(av[i]);
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::LogSigmoid(a) => {
                let av = self.value(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * sigmoid(-av[i]);
                    }
                }
            }
            Op::Ln(a) => {
                let av = self.value(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] / av[i];
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                if let Some(ga) = self.acc(grads, *a) {
                    for r in 0..m {
                        let (ys, gs) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            ga[r * n + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain);
                if let Some(gg) = self.acc(grads, *gain) {
                    for r in 0..m {
                        for j in 0..n {
                            gg[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for r in g.chunks(n) {
                        add_into(gb, r);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let nf = n as f64;
                    for r in 0..m {
                        let dxhat: Vec<f64> = (0..n).map(|j| g[r * n + j] * gv[j]).collect();
                        let xh = &xhat[r * n..(r + 1) * n];
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gx[r * n + j] += inv_std[r] / nf * (nf * dxhat[j] - s1 - xh[j] * s2);
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let src_n = self.dims(*x).1;
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..m {
                        add_into(&mut gx[r * src_n + start..r * src_n + start + n], &g[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::SliceRows { x, start } => {
                if let Some(gx) = self.acc(grads, *x) {
                    add_into(&mut gx[start * n..(start + m) * n], g);
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let c = self.dims(*p).1;
                    if let Some(gp) = self.acc(grads, *p) {
                        for r in 0..m {
                            add_into(&mut gp[r * c..(r + 1) * c], &g[r * n + off..r * n + off + c]);
                        }
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if let Some(gp) = self.acc(grads, *p) {
                        add_into(gp, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::Transpose(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    // node is n_src x m_src with m = n_src rows
                    for i in 0..m {
                        for j in 0..n {
                            gx[j * m + i] += g[i * n + j];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::RowSum(x) => {
                let c = self.dims(*x).1;
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..m {
                        gx[r * c..(r + 1) * c].iter_mut().for_each(|v| *v += g[r]);
                    }
                }
            }
            Op::BroadcastCols(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..m {
                        gx[r] += g[r * n..(r + 1) * n].iter().sum::<f64>();
                    }
                }
            }
            Op::Gather { x, idx } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (k, i) in idx.iter().enumerate() {
                        gx[*i] += g[k];
                    }
                }
            }
            Op::Bce { p, targets, eps } => {
                let pv = self.value(*p);
                let len = pv.len() as f64;
                if let Some(gp) = self.acc(grads, *p) {
                    for i in 0..pv.len() {
                        let pi = pv[i];
                        if pi > *eps && pi < 1.0 - eps {
                            let y = targets[i];
                            gp[i] += g[0] * (-y / pi + (1.0 - y) / (1.0 - pi)) / len;
                        }
                    }
                }
            }
        }
    }
}
