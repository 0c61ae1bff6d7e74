//! Minimal define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every intermediate value produced during a forward pass.
//! Operations are methods on the tape and return lightweight [`Var`] handles.
//! Calling [`Tape::backward`] on a scalar node walks the tape once in reverse
//! and returns a [`Gradients`] table indexed by `Var`.
//!
//! Supported shapes are rank 0, 1 and 2. The only broadcast is a rank-1 row
//! added to every row of a rank-2 matrix ([`Tape::add_row`]).
//!
//! ```
//! use fgvr_lab::tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.mean(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[1.0, 2.0]);
//! ```

use thiserror::Error;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("{op}: value {value} outside the domain")]
    Domain { op: &'static str, value: f64 },
    #[error("{op}: index {index} out of range for extent {extent}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("clip bounds inverted: [{lo}, {hi}]")]
    ClipBounds { lo: f64, hi: f64 },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::BadLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row count of a rank-2 tensor; 1 for lower ranks.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Column count of a rank-2 tensor; the length for rank 1.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 1,
        }
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    LogSoftmax(Var),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    Clip(Var, f64, f64),
    Minimum(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Operation record for one forward pass.
///
/// Nodes are appended in creation order, so every node's parents precede it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node that required one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, or zeros of length `len` when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var, len: usize) -> Vec<f64> {
        self.get(var).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
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

    /// Registers a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = &self.nodes[x.0].value;
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&v| f(v)).collect(),
        };
        let needs = self.needs(&[x]);
        self.push(value, op, needs)
    }

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape != vb.shape {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: va.shape.clone(),
                rhs: vb.shape.clone(),
            });
        }
        let value = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect(),
        };
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, op, needs))
    }

    /// Matrix product. Accepts `(m,k)·(k,n)`, `(k)·(k,n)` and `(m,k)·(k)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: va.shape.clone(),
            rhs: vb.shape.clone(),
        };
        let (m, k, n, out_shape) = match (va.shape.as_slice(), vb.shape.as_slice()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n, vec![m, n]),
            (&[k], &[k2, n]) if k == k2 => (1, k, n, vec![n]),
            (&[m, k], &[k2]) if k == k2 => (m, k, 1, vec![m]),
            _ => return Err(mismatch()),
        };
        let data = matmul_raw(&va.data, &vb.data, m, k, n);
        let needs = self.needs(&[a, b]);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::MatMul(a, b),
            needs,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("minimum", a, b, Op::Minimum(a, b), f64::min)
    }

    /// Adds the rank-1 `row` to every row of the rank-2 `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (vx, vr) = (&self.nodes[x.0].value, &self.nodes[row.0].value);
        if vx.rank() != 2 || vr.rank() != 1 || vx.shape[1] != vr.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: vx.shape.clone(),
                rhs: vr.shape.clone(),
            });
        }
        let cols = vr.shape[0];
        let data = vx
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| v + vr.data[i % cols])
            .collect();
        let value = Tensor {
            shape: vx.shape.clone(),
            data,
        };
        let needs = self.needs(&[x, row]);
        Ok(self.push(value, Op::AddRow(x, row), needs))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, Op::Scale(x, factor), |v| v * factor)
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + offset)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    /// Natural log; any non-positive entry is a domain error.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(&bad) = self.nodes[x.0].value.data.iter().find(|&&v| v <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                value: bad,
            });
        }
        Ok(self.unary(x, Op::Log(x), f64::ln))
    }

    /// Clamps into `[lo, hi]`. The gradient passes where `lo <= x <= hi`.
    pub fn clip(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(TensorError::ClipBounds { lo, hi });
        }
        Ok(self.unary(x, Op::Clip(x, lo, hi), |v| v.clamp(lo, hi)))
    }

    /// Log-softmax over the last axis (each row of a matrix, or a whole vector).
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        if vx.rank() == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "log_softmax",
                lhs: vec![],
                rhs: vec![],
            });
        }
        let cols = vx.cols();
        let mut data = Vec::with_capacity(vx.len());
        for row in vx.data.chunks(cols) {
            let lse = log_sum_exp(row);
            data.extend(row.iter().map(|&v| v - lse));
        }
        let value = Tensor {
            shape: vx.shape.clone(),
            data,
        };
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::LogSoftmax(x), needs))
    }

    /// Selects rows of a matrix (embedding lookup). Output is `(len(indices), cols)`.
    pub fn gather_rows(&mut self, m: Var, indices: &[usize]) -> Result<Var> {
        let vm = &self.nodes[m.0].value;
        if vm.rank() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "gather_rows",
                lhs: vm.shape.clone(),
                rhs: vec![indices.len()],
            });
        }
        let (rows, cols) = (vm.shape[0], vm.shape[1]);
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    extent: rows,
                });
            }
            data.extend_from_slice(&vm.data[i * cols..(i + 1) * cols]);
        }
        let value = Tensor {
            shape: vec![indices.len(), cols],
            data,
        };
        let needs = self.needs(&[m]);
        Ok(self.push(value, Op::GatherRows(m, indices.to_vec()), needs))
    }

    /// Picks one column per row: `out[r] = x[r, indices[r]]`.
    pub fn pick(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        if vx.rank() != 2 || vx.shape[0] != indices.len() {
            return Err(TensorError::ShapeMismatch {
                op: "pick",
                lhs: vx.shape.clone(),
                rhs: vec![indices.len()],
            });
        }
        let cols = vx.shape[1];
        let mut data = Vec::with_capacity(indices.len());
        for (r, &c) in indices.iter().enumerate() {
            if c >= cols {
                return Err(TensorError::IndexOutOfRange {
                    op: "pick",
                    index: c,
                    extent: cols,
                });
            }
            data.push(vx.data[r * cols + c]);
        }
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::vector(data), Op::Pick(x, indices.to_vec()), needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.nodes[x.0].value.data.iter().sum();
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let m = v.data.iter().sum::<f64>() / v.len() as f64;
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), needs)
    }

    /// Reverse sweep from a scalar `loss`. Every node is visited once.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.needs_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &dyn Fn(usize) -> f64| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let g = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            for (i, gi) in g.iter_mut().enumerate() {
                *gi += f(i);
            }
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                acc(*a, &|i| dy[i]);
                acc(*b, &|i| dy[i]);
            }
            Op::Sub(a, b) => {
                acc(*a, &|i| dy[i]);
                acc(*b, &|i| -dy[i]);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &|i| dy[i] * vb.data[i]);
                acc(*b, &|i| dy[i] * va.data[i]);
            }
            Op::Minimum(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &|i| if va.data[i] <= vb.data[i] { dy[i] } else { 0.0 });
                acc(*b, &|i| if va.data[i] <= vb.data[i] { 0.0 } else { dy[i] });
            }
            Op::AddRow(x, row) => {
                acc(*x, &|i| dy[i]);
                let cols = val(*row).len();
                let mut col_sums = vec![0.0; cols];
                for (i, &d) in dy.iter().enumerate() {
                    col_sums[i % cols] += d;
                }
                acc(*row, &|j| col_sums[j]);
            }
            Op::Scale(x, f) => acc(*x, &|i| dy[i] * f),
            Op::AddScalar(x) => acc(*x, &|i| dy[i]),
            Op::Tanh(x) => {
                let y = &node.value.data;
                acc(*x, &|i| dy[i] * (1.0 - y[i] * y[i]));
            }
            Op::Exp(x) => {
                let y = &node.value.data;
                acc(*x, &|i| dy[i] * y[i]);
            }
            Op::Log(x) => {
                let vx = val(*x);
                acc(*x, &|i| dy[i] / vx.data[i]);
            }
            Op::Clip(x, lo, hi) => {
                let vx = val(*x);
                acc(*x, &|i| {
                    let v = vx.data[i];
                    if v >= *lo && v <= *hi {
                        dy[i]
                    } else {
                        0.0
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let cols = y.cols();
                let mut dx = vec![0.0; y.len()];
                for ((dxr, yr), dyr) in dx
                    .chunks_mut(cols)
                    .zip(y.data.chunks(cols))
                    .zip(dy.chunks(cols))
                {
                    let s: f64 = dyr.iter().sum();
                    for j in 0..cols {
                        dxr[j] = dyr[j] - yr[j].exp() * s;
                    }
                }
                acc(*x, &|i| dx[i]);
            }
            Op::GatherRows(m, idx) => {
                let vm = val(*m);
                let cols = vm.cols();
                let mut dm = vec![0.0; vm.len()];
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..cols {
                        dm[src * cols + j] += dy[r * cols + j];
                    }
                }
                acc(*m, &|i| dm[i]);
            }
            Op::Pick(x, idx) => {
                let cols = val(*x).cols();
                let mut dx = vec![0.0; val(*x).len()];
                for (r, &c) in idx.iter().enumerate() {
                    dx[r * cols + c] = dy[r];
                }
                acc(*x, &|i| dx[i]);
            }
            Op::Sum(x) => acc(*x, &|_| dy[0]),
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                acc(*x, &|_| dy[0] / n);
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = match (va.shape.as_slice(), vb.shape.as_slice()) {
                    (&[m, k], &[_, n]) => (m, k, n),
                    (&[k], &[_, n]) => (1, k, n),
                    (&[m, k], &[_]) => (m, k, 1),
                    _ => unreachable!("matmul shapes validated in forward"),
                };
                if self.nodes[a.0].needs_grad {
                    // dA = dY · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let dyr = &dy[i * n..(i + 1) * n];
                        for p in 0..k {
                            let br = &vb.data[p * n..(p + 1) * n];
                            da[i * k + p] = dyr.iter().zip(br).map(|(x, y)| x * y).sum();
                        }
                    }
                    acc(*a, &|i| da[i]);
                }
                if self.nodes[b.0].needs_grad {
                    // dB = Aᵀ · dY
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let dyr = &dy[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = va.data[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            let dbr = &mut db[p * n..(p + 1) * n];
                            for (d, &g) in dbr.iter_mut().zip(dyr) {
                                *d += a_ip * g;
                            }
                        }
                    }
                    acc(*b, &|i| db[i]);
                }
            }
        }
    }
}

/// `(m,k)·(k,n)` on flat row-major buffers.
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += a_ip * bv;
            }
        }
    }
    out
}

/// Stable `ln Σ exp(x)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn log_softmax_of_zeros_is_minus_ln2() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = tape.log_softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!(close(v, -std::f64::consts::LN_2, 1e-15));
        }
    }

    #[test]
    fn identity_matmul_returns_vector() {
        let mut tape = Tape::new();
        let eye = Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let i3 = tape.constant(eye);
        let v = tape.constant(Tensor::vector(vec![0.3, -1.2, 7.0]));
        let out = tape.matmul(i3, v).unwrap();
        assert_eq!(tape.value(out).data(), &[0.3, -1.2, 7.0]);
    }

    #[test]
    fn tanh_matches_reference_value() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.5));
        let y = tape.tanh(x);
        // libm reference: tanh(0.5)
        assert!(close(tape.value(y).data()[0], 0.46211715726000974, 1e-15));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 3, vec![1., -2., 3., 0.5, 9., -4.]).unwrap());
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn mean_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let l = tape.mean(sq);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn log_of_nonpositive_is_domain_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(tape.log(x), Err(TensorError::Domain { .. })));
    }

    #[test]
    fn shape_mismatch_reported() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(matches!(tape.add(a, b), Err(TensorError::ShapeMismatch { .. })));
        assert!(matches!(tape.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn clip_gradient_inside_including_boundary() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.5, 0.8, 1.0, 1.2, 1.5]));
        let c = tape.clip(x, 0.8, 1.2).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn log_softmax_pick_gradient_is_softmax_minus_onehot() {
        let logits = vec![0.3, -1.0, 2.0, 0.1];
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 4, logits.clone()).unwrap());
        let ls = tape.log_softmax(x).unwrap();
        let picked = tape.pick(ls, &[2]).unwrap();
        let neg = tape.neg(picked);
        let loss = tape.sum(neg);
        let g = tape.backward(loss).unwrap();
        let lse = log_sum_exp(&logits);
        for (j, &gj) in g.get(x).unwrap().iter().enumerate() {
            let p = (logits[j] - lse).exp();
            let expected = p - if j == 2 { 1.0 } else { 0.0 };
            assert!(close(gj, expected, 1e-14));
        }
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let x = tape.leaf(Tensor::vector(vec![3.0, 4.0]));
        let p = tape.mul(c, x).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn gather_rows_scatters_back() {
        let mut tape = Tape::new();
        let m = tape.leaf(Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let g = tape.gather_rows(m, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(g).data(), &[5., 6., 1., 2., 5., 6.]);
        let s = tape.sum(g);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(m).unwrap(), &[1., 1., 0., 0., 2., 2.]);
        assert!(tape.gather_rows(m, &[3]).is_err());
    }
}
