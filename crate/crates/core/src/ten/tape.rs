//! Eager reverse-mode tape over dense 2-D arrays.
//!
//! Every op evaluates immediately and appends a node holding its value and
//! whatever it needs for the backward sweep. Node inputs always have lower
//! indices than the node itself, so a single reverse pass over the node list
//! visits the graph in topological order.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::matrix::{dot, gemm_nn, gemm_nt, gemm_tn, DiffArray, Matrix};

/// Probability floor applied before any logarithm of a distribution.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    MulScalar(Var, Var),
    Exp(Var),
    SoftmaxRows(Var),
    CausalSoftmaxRows(Var),
    LogSoftmaxRows(Var),
    L2NormRows(Var, Vec<T>),
    LayerNormRows(Var, Vec<T>),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    RowDot(Var, Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    NllRows(Var, Vec<Option<usize>>),
    KlLogitsRows(Matrix<T>, Var),
    CrossEntropyRows(Matrix<T>, Var),
    KlRows(Matrix<T>, Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation tape. One tape per forward/backward pass; tapes share nothing.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar output with respect to every node that needs one.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: [usize; 2]) -> Matrix<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(shape[0], shape[1]))
    }
}

fn softmax_row<T: Scalar>(src: &[T], dst: &mut [T]) {
    let max = src.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        z += *d;
    }
    for d in dst.iter_mut() {
        *d /= z;
    }
}

fn log_softmax_row<T: Scalar>(src: &[T], dst: &mut [T]) {
    let max = src.iter().copied().fold(T::neg_infinity(), T::max);
    let z: T = src.iter().map(|&s| (s - max).exp()).sum();
    let lz = z.ln() + max;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = s - lz;
    }
}

/// Row-wise softmax on a plain matrix, with row-max subtraction.
pub fn softmax_rows<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        softmax_row(m.row(r), out.row_mut(r));
    }
    out
}

/// Row-wise log-softmax on a plain matrix.
pub fn log_softmax_rows<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        log_softmax_row(m.row(r), out.row_mut(r));
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Matrix<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.leaf(value, false)
    }

    /// Records a parameter as a leaf; gradients flow iff the array requires them.
    pub fn param(&mut self, p: &DiffArray<T>) -> Var {
        self.leaf(p.value.clone(), p.requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMulT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(out, Op::Transpose(a), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, &sa, &sb));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Matrix<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .as_slice()
            .iter()
            .zip(vb.as_slice())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Matrix::from_vec(va.rows(), va.cols(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    fn row_broadcast(&self, op: &'static str, a: Var, row: Var) -> Result<()> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr[0] != 1 || sr[1] != sa[1] {
            return Err(Error::shape(op, &sa, &sr));
        }
        Ok(())
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("add_row", a, row)?;
        let mut out = self.value(a).clone();
        let r = self.value(row).as_slice().to_vec();
        for i in 0..out.rows() {
            for (x, &b) in out.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    /// Multiplies every row of `a` elementwise by a `1 x n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("mul_row", a, row)?;
        let mut out = self.value(a).clone();
        let r = self.value(row).as_slice().to_vec();
        for i in 0..out.rows() {
            for (x, &b) in out.row_mut(i).iter_mut().zip(&r) {
                *x *= b;
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::MulRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Multiplies `a` by the value of a `1 x 1` node.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let ss = self.shape(s);
        if ss != [1, 1] {
            return Err(Error::shape("mul_scalar", &self.shape(a), &ss));
        }
        let c = self.value(s).item();
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a, s]);
        Ok(self.push(out, Op::MulScalar(a, s), rg))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(T::exp);
        let rg = self.rg(&[a]);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        let rg = self.rg(&[a]);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Softmax where row `i` only sees columns `0..=i`.
    pub fn causal_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.cols() < v.rows() {
            return Err(Error::shape("causal_softmax_rows", &v.shape(), &[v.rows(), v.rows()]));
        }
        let mut out = Matrix::zeros(v.rows(), v.cols());
        for r in 0..v.rows() {
            softmax_row(&v.row(r)[..=r], &mut out.row_mut(r)[..=r]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::CausalSoftmaxRows(a), rg))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let out = log_softmax_rows(self.value(a));
        let rg = self.rg(&[a]);
        self.push(out, Op::LogSoftmaxRows(a), rg)
    }

    /// Scales each row to unit Euclidean norm. Rows with norm `<= eps` are rejected.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: T) -> Result<Var> {
        let v = self.value(a);
        let mut out = v.clone();
        let mut norms = Vec::with_capacity(v.rows());
        for r in 0..v.rows() {
            let n = dot(v.row(r), v.row(r)).sqrt();
            if !(n > eps) {
                return Err(Error::Degenerate(format!(
                    "row {r} has norm {n} at or below {eps}"
                )));
            }
            for x in out.row_mut(r) {
                *x /= n;
            }
            norms.push(n);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::L2NormRows(a, norms), rg))
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: T) -> Var {
        let v = self.value(a);
        let n = T::lit(v.cols() as f64);
        let mut out = v.clone();
        let mut inv = Vec::with_capacity(v.rows());
        for r in 0..v.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv.push(is);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::LayerNormRows(a, inv), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, k) = (T::lit(GELU_C), T::lit(GELU_A));
        let half = T::lit(0.5);
        let out = self
            .value(a)
            .map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Matrix::scalar(v.sum() / T::lit(v.len() as f64));
        let rg = self.rg(&[a]);
        self.push(out, Op::Mean(a), rg)
    }

    /// Row-wise inner products of two same-shape matrices, as an `m x 1` column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = (0..va.rows()).map(|r| dot(va.row(r), vb.row(r))).collect();
        let out = Matrix::from_vec(va.rows(), 1, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::RowDot(a, b), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a);
        if start >= end || end > v.cols() {
            return Err(Error::shape("slice_cols", &v.shape(), &[start, end]));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(v.rows() * w);
        for r in 0..v.rows() {
            data.extend_from_slice(&v.row(r)[start..end]);
        }
        let out = Matrix::from_vec(v.rows(), w, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0])[0];
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[0] != rows {
                return Err(Error::shape("concat_cols", &self.shape(parts[0]), &s));
            }
            total += s[1];
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Matrix::from_vec(rows, total, data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.shape(parts[0])[1];
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[1] != cols {
                return Err(Error::shape("concat_rows", &self.shape(parts[0]), &s));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).as_slice());
        }
        let out = Matrix::from_vec(rows, cols, data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if idx.is_empty() || idx.iter().any(|&i| i >= v.rows()) {
            return Err(Error::shape("gather_rows", &v.shape(), idx));
        }
        let out = v.select_rows(idx);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::GatherRows(a, idx.to_vec()), rg))
    }

    /// Per-row negative log-likelihood of `targets` under `softmax(logits)`.
    /// Rows with a `None` target contribute zero.
    pub fn nll_rows(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let v = self.value(logits);
        if targets.len() != v.rows() || targets.iter().flatten().any(|&t| t >= v.cols()) {
            return Err(Error::shape("nll_rows", &v.shape(), &[targets.len()]));
        }
        let ls = log_softmax_rows(v);
        let data = targets
            .iter()
            .enumerate()
            .map(|(r, t)| t.map_or(T::zero(), |t| -ls.get(r, t)))
            .collect();
        let out = Matrix::from_vec(v.rows(), 1, data)?;
        let rg = self.rg(&[logits]);
        Ok(self.push(out, Op::NllRows(logits, targets.to_vec()), rg))
    }

    /// Per-row `KL(q || softmax(logits))` with `q` a constant target.
    pub fn kl_logits_rows(&mut self, q: Matrix<T>, logits: Var) -> Result<Var> {
        let v = self.value(logits);
        if q.shape() != v.shape() {
            return Err(Error::shape("kl_logits_rows", &q.shape(), &v.shape()));
        }
        let ls = log_softmax_rows(v);
        let floor = T::lit(PROB_FLOOR);
        let data = (0..v.rows())
            .map(|r| {
                q.row(r)
                    .iter()
                    .zip(ls.row(r))
                    .map(|(&qi, &lp)| qi * (qi.max(floor).ln() - lp))
                    .sum()
            })
            .collect();
        let out = Matrix::from_vec(v.rows(), 1, data)?;
        let rg = self.rg(&[logits]);
        Ok(self.push(out, Op::KlLogitsRows(q, logits), rg))
    }

    /// Per-row `H(y, p) = -sum y log max(p, floor)` on explicit distributions.
    pub fn cross_entropy_rows(&mut self, y: Matrix<T>, p: Var) -> Result<Var> {
        let v = self.value(p);
        if y.shape() != v.shape() {
            return Err(Error::shape("cross_entropy_rows", &y.shape(), &v.shape()));
        }
        let floor = T::lit(PROB_FLOOR);
        let data = (0..v.rows())
            .map(|r| {
                -y.row(r)
                    .iter()
                    .zip(v.row(r))
                    .map(|(&yi, &pi)| yi * pi.max(floor).ln())
                    .sum::<T>()
            })
            .collect();
        let out = Matrix::from_vec(v.rows(), 1, data)?;
        let rg = self.rg(&[p]);
        Ok(self.push(out, Op::CrossEntropyRows(y, p), rg))
    }

    /// Per-row `KL(q || p)` on explicit distributions, both floored before the log.
    pub fn kl_rows(&mut self, q: Matrix<T>, p: Var) -> Result<Var> {
        let v = self.value(p);
        if q.shape() != v.shape() {
            return Err(Error::shape("kl_rows", &q.shape(), &v.shape()));
        }
        let floor = T::lit(PROB_FLOOR);
        let data = (0..v.rows())
            .map(|r| {
                q.row(r)
                    .iter()
                    .zip(v.row(r))
                    .map(|(&qi, &pi)| qi * (qi.max(floor).ln() - pi.max(floor).ln()))
                    .sum()
            })
            .collect();
        let out = Matrix::from_vec(v.rows(), 1, data)?;
        let rg = self.rg(&[p]);
        Ok(self.push(out, Op::KlRows(q, p), rg))
    }

    /// Reverse sweep from a `1 x 1` output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let s = self.shape(output);
        if s != [1, 1] {
            return Err(Error::shape("backward", &s, &[1, 1]));
        }
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::scalar(T::one()));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(m) => m.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, node: &Node<T>, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                if self.wants(a) {
                    let mut ga = Matrix::zeros(va.rows(), va.cols());
                    gemm_nt(g, vb, &mut ga);
                    self.acc(grads, a, ga);
                }
                if self.wants(b) {
                    let mut gb = Matrix::zeros(vb.rows(), vb.cols());
                    gemm_tn(va, g, &mut gb);
                    self.acc(grads, b, gb);
                }
            }
            &Op::MatMulT(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                if self.wants(a) {
                    let mut ga = Matrix::zeros(va.rows(), va.cols());
                    gemm_nn(g, vb, &mut ga);
                    self.acc(grads, a, ga);
                }
                if self.wants(b) {
                    let mut gb = Matrix::zeros(vb.rows(), vb.cols());
                    gemm_tn(g, va, &mut gb);
                    self.acc(grads, b, gb);
                }
            }
            &Op::Transpose(a) => self.acc(grads, a, g.transpose()),
            &Op::Add(a, b) => {
                self.acc(grads, a, g.clone());
                self.acc(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.acc(grads, a, g.clone());
                self.acc(grads, b, g.map(|x| -x));
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    let vb = self.value(b);
                    let d = g.as_slice().iter().zip(vb.as_slice()).map(|(&x, &y)| x * y);
                    self.acc(grads, a, Matrix::from_vec(g.rows(), g.cols(), d.collect()).unwrap());
                }
                if self.wants(b) {
                    let va = self.value(a);
                    let d = g.as_slice().iter().zip(va.as_slice()).map(|(&x, &y)| x * y);
                    self.acc(grads, b, Matrix::from_vec(g.rows(), g.cols(), d.collect()).unwrap());
                }
            }
            &Op::AddRow(a, row) => {
                self.acc(grads, a, g.clone());
                if self.wants(row) {
                    let mut gr = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (s, &x) in gr.row_mut(0).iter_mut().zip(g.row(r)) {
                            *s += x;
                        }
                    }
                    self.acc(grads, row, gr);
                }
            }
            &Op::MulRow(a, row) => {
                let va = self.value(a);
                let vr = self.value(row).as_slice();
                if self.wants(a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        for (x, &b) in ga.row_mut(r).iter_mut().zip(vr) {
                            *x *= b;
                        }
                    }
                    self.acc(grads, a, ga);
                }
                if self.wants(row) {
                    let mut gr = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for ((s, &x), &av) in gr.row_mut(0).iter_mut().zip(g.row(r)).zip(va.row(r)) {
                            *s += x * av;
                        }
                    }
                    self.acc(grads, row, gr);
                }
            }
            &Op::Scale(a, c) => self.acc(grads, a, g.map(|x| x * c)),
            &Op::MulScalar(a, s) => {
                let c = self.value(s).item();
                if self.wants(a) {
                    self.acc(grads, a, g.map(|x| x * c));
                }
                if self.wants(s) {
                    let d = dot(g.as_slice(), self.value(a).as_slice());
                    self.acc(grads, s, Matrix::scalar(d));
                }
            }
            &Op::Exp(a) => {
                let d = g.as_slice().iter().zip(y.as_slice()).map(|(&x, &e)| x * e);
                self.acc(grads, a, Matrix::from_vec(g.rows(), g.cols(), d.collect()).unwrap());
            }
            &Op::SoftmaxRows(a) | &Op::CausalSoftmaxRows(a) => {
                let mut ga = Matrix::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let s = dot(gr, yr);
                    for ((o, &gi), &yi) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = yi * (gi - s);
                    }
                }
                self.acc(grads, a, ga);
            }
            &Op::LogSoftmaxRows(a) => {
                let mut ga = Matrix::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let s: T = gr.iter().copied().sum();
                    for ((o, &gi), &li) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = gi - li.exp() * s;
                    }
                }
                self.acc(grads, a, ga);
            }
            Op::L2NormRows(a, norms) => {
                let mut ga = Matrix::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let s = dot(gr, yr);
                    for ((o, &gi), &yi) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = (gi - yi * s) / norms[r];
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::LayerNormRows(a, inv) => {
                let n = T::lit(g.cols() as f64);
                let mut ga = Matrix::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let mg = gr.iter().copied().sum::<T>() / n;
                    let mgy = dot(gr, yr) / n;
                    for ((o, &gi), &yi) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = inv[r] * (gi - mg - yi * mgy);
                    }
                }
                self.acc(grads, *a, ga);
            }
            &Op::Gelu(a) => {
                let (c, k) = (T::lit(GELU_C), T::lit(GELU_A));
                let half = T::lit(0.5);
                let three = T::lit(3.0);
                let x = self.value(a);
                let d = g.as_slice().iter().zip(x.as_slice()).map(|(&gi, &xi)| {
                    let t = (c * (xi + k * xi * xi * xi)).tanh();
                    let dt = (T::one() - t * t) * c * (T::one() + three * k * xi * xi);
                    gi * (half * (T::one() + t) + half * xi * dt)
                });
                self.acc(grads, a, Matrix::from_vec(g.rows(), g.cols(), d.collect()).unwrap());
            }
            &Op::Sum(a) => {
                let s = self.shape(a);
                self.acc(grads, a, Matrix::filled(s[0], s[1], g.item()));
            }
            &Op::Mean(a) => {
                let s = self.shape(a);
                let n = T::lit((s[0] * s[1]) as f64);
                self.acc(grads, a, Matrix::filled(s[0], s[1], g.item() / n));
            }
            &Op::RowDot(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                for (v, other) in [(a, vb), (b, va)] {
                    if self.wants(v) {
                        let mut gv = other.clone();
                        for r in 0..gv.rows() {
                            let gr = g.get(r, 0);
                            for x in gv.row_mut(r) {
                                *x *= gr;
                            }
                        }
                        self.acc(grads, v, gv);
                    }
                }
            }
            &Op::SliceCols(a, start) => {
                let s = self.shape(a);
                let mut ga = Matrix::zeros(s[0], s[1]);
                for r in 0..g.rows() {
                    ga.row_mut(r)[start..start + g.cols()].copy_from_slice(g.row(r));
                }
                self.acc(grads, a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.wants(p) {
                        let mut gp = Matrix::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        self.acc(grads, p, gp);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let s = self.shape(p);
                    if self.wants(p) {
                        let idx: Vec<usize> = (off..off + s[0]).collect();
                        self.acc(grads, p, g.select_rows(&idx));
                    }
                    off += s[0];
                }
            }
            Op::GatherRows(a, idx) => {
                let s = self.shape(*a);
                let mut ga = Matrix::zeros(s[0], s[1]);
                for (k, &i) in idx.iter().enumerate() {
                    for (o, &x) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += x;
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::NllRows(logits, targets) => {
                let p = softmax_rows(self.value(*logits));
                let mut ga = Matrix::zeros(p.rows(), p.cols());
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let gr = g.get(r, 0);
                    for (o, &pi) in ga.row_mut(r).iter_mut().zip(p.row(r)) {
                        *o = gr * pi;
                    }
                    let cur = ga.get(r, t);
                    ga.set(r, t, cur - gr);
                }
                self.acc(grads, *logits, ga);
            }
            Op::KlLogitsRows(q, logits) => {
                let p = softmax_rows(self.value(*logits));
                let mut ga = Matrix::zeros(p.rows(), p.cols());
                for r in 0..p.rows() {
                    let gr = g.get(r, 0);
                    let mass: T = q.row(r).iter().copied().sum();
                    for ((o, &pi), &qi) in ga.row_mut(r).iter_mut().zip(p.row(r)).zip(q.row(r)) {
                        *o = gr * (mass * pi - qi);
                    }
                }
                self.acc(grads, *logits, ga);
            }
            Op::CrossEntropyRows(t, p) | Op::KlRows(t, p) => {
                let floor = T::lit(PROB_FLOOR);
                let vp = self.value(*p);
                let mut gp = Matrix::zeros(vp.rows(), vp.cols());
                for r in 0..vp.rows() {
                    let gr = g.get(r, 0);
                    for ((o, &pi), &ti) in gp.row_mut(r).iter_mut().zip(vp.row(r)).zip(t.row(r)) {
                        if pi > floor {
                            *o = -gr * ti / pi;
                        }
                    }
                }
                self.acc(grads, *p, gp);
            }
        }
    }
}
