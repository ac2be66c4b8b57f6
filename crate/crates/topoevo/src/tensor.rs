//! Dense-array reverse-mode autodiff engine.
//!
//! Tensors live on a [`Tape`]: every differentiable op appends a node that
//! records its inputs, so the tape is topologically ordered by construction
//! and a single reverse sweep computes gradients for all leaves.
//!
//! Shapes are rank-1 (`[n]`) or rank-2 (`[rows, cols]`, row-major); scalars
//! are `[1]`. Everything is `f64`.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {details}")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("{op}: index {index} out of bounds for length {len}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{op}: empty input list")]
    EmptyInput { op: &'static str },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a tensor on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    ScaleConst(TensorId, f64),
    AddConst(TensorId),
    ScaleByScalar(TensorId, TensorId),
    AddScalarBroadcast(TensorId, TensorId),
    Matmul(TensorId, TensorId),
    MatVec(TensorId, TensorId),
    Dot(TensorId, TensorId),
    Sum(TensorId),
    MeanOverCols(TensorId),
    MeanOverRows(TensorId),
    Concat(Vec<TensorId>),
    StackRows(Vec<TensorId>),
    Row(TensorId, usize),
    Index(TensorId, usize),
    Gather(TensorId, Vec<usize>),
    GatherRows(TensorId, Vec<usize>),
    Softmax(TensorId),
    LogSoftmax(TensorId),
    LeakyRelu(TensorId, f64),
    Elu(TensorId),
    Sigmoid(TensorId),
    Tanh(TensorId),
    Exp(TensorId),
    Ln(TensorId),
    Sqrt(TensorId),
    Transpose(TensorId),
    BroadcastAddRow(TensorId, TensorId),
    BroadcastAddCol(TensorId, TensorId),
    Conv1d {
        input: TensorId,
        weight: TensorId,
        kernel: usize,
        dilation: usize,
    },
    StopGradient,
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Records forward ops and replays them in reverse for gradients.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
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

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].values
    }

    /// Scalar value of a `[1]` tensor.
    pub fn scalar(&self, id: TensorId) -> f64 {
        self.nodes[id.0].values[0]
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(numel(&shape), values.len());
        self.nodes.push(Node {
            shape,
            values,
            requires_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn leaf(&mut self, shape: &[usize], values: Vec<f64>, requires_grad: bool) -> TensorId {
        assert_eq!(
            numel(shape),
            values.len(),
            "leaf values length must match shape"
        );
        self.push(shape.to_vec(), values, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> TensorId {
        self.leaf(shape, values, false)
    }

    pub fn scalar_leaf(&mut self, v: f64) -> TensorId {
        self.constant(&[1], vec![v])
    }

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<Vec<usize>> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                details: format!("{sa:?} vs {sb:?}"),
            });
        }
        Ok(sa.clone())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let shape = self.same_shape("add", a, b)?;
        let values = self.zip(a, b, |x, y| x + y);
        Ok(self.push(shape, values, self.any_grad(&[a, b]), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let shape = self.same_shape("sub", a, b)?;
        let values = self.zip(a, b, |x, y| x - y);
        Ok(self.push(shape, values, self.any_grad(&[a, b]), Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let shape = self.same_shape("mul", a, b)?;
        let values = self.zip(a, b, |x, y| x * y);
        Ok(self.push(shape, values, self.any_grad(&[a, b]), Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let shape = self.same_shape("div", a, b)?;
        let values = self.zip(a, b, |x, y| x / y);
        Ok(self.push(shape, values, self.any_grad(&[a, b]), Op::Div(a, b)))
    }

    fn zip(&self, a: TensorId, b: TensorId, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let shape = self.nodes[a.0].shape.clone();
        let values = self.nodes[a.0].values.iter().map(|&x| x * c).collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push(shape, values, rg, Op::ScaleConst(a, c))
    }

    pub fn add_const(&mut self, a: TensorId, c: f64) -> TensorId {
        let shape = self.nodes[a.0].shape.clone();
        let values = self.nodes[a.0].values.iter().map(|&x| x + c).collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push(shape, values, rg, Op::AddConst(a))
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        self.scale(a, -1.0)
    }

    /// Multiply every element of `a` by the scalar tensor `s`.
    pub fn scale_by(&mut self, a: TensorId, s: TensorId) -> Result<TensorId> {
        if self.nodes[s.0].shape != [1] {
            return Err(TensorError::ShapeMismatch {
                op: "scale_by",
                details: format!("scalar operand has shape {:?}", self.nodes[s.0].shape),
            });
        }
        let sv = self.nodes[s.0].values[0];
        let shape = self.nodes[a.0].shape.clone();
        let values = self.nodes[a.0].values.iter().map(|&x| x * sv).collect();
        Ok(self.push(shape, values, self.any_grad(&[a, s]), Op::ScaleByScalar(a, s)))
    }

    /// Add the scalar tensor `s` to every element of `a`.
    pub fn add_scalar(&mut self, a: TensorId, s: TensorId) -> Result<TensorId> {
        if self.nodes[s.0].shape != [1] {
            return Err(TensorError::ShapeMismatch {
                op: "add_scalar",
                details: format!("scalar operand has shape {:?}", self.nodes[s.0].shape),
            });
        }
        let sv = self.nodes[s.0].values[0];
        let shape = self.nodes[a.0].shape.clone();
        let values = self.nodes[a.0].values.iter().map(|&x| x + sv).collect();
        Ok(self.push(
            shape,
            values,
            self.any_grad(&[a, s]),
            Op::AddScalarBroadcast(a, s),
        ))
    }

    fn dims2(&self, op: &'static str, a: TensorId) -> Result<(usize, usize)> {
        let s = &self.nodes[a.0].shape;
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op,
                details: format!("expected matrix, got shape {s:?}"),
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                details: format!("{:?} x {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            });
        }
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += x * bv[p * n + j];
                }
            }
        }
        Ok(self.push(vec![m, n], out, self.any_grad(&[a, b]), Op::Matmul(a, b)))
    }

    pub fn matvec(&mut self, a: TensorId, v: TensorId) -> Result<TensorId> {
        let (m, k) = self.dims2("matvec", a)?;
        let sv = &self.nodes[v.0].shape;
        if sv.len() != 1 || sv[0] != k {
            return Err(TensorError::ShapeMismatch {
                op: "matvec",
                details: format!("{:?} x {sv:?}", self.nodes[a.0].shape),
            });
        }
        let av = &self.nodes[a.0].values;
        let vv = &self.nodes[v.0].values;
        let out: Vec<f64> = (0..m)
            .map(|i| (0..k).map(|p| av[i * k + p] * vv[p]).sum())
            .collect();
        Ok(self.push(vec![m], out, self.any_grad(&[a, v]), Op::MatVec(a, v)))
    }

    pub fn dot(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("dot", a, b)?;
        let v: f64 = self.zip(a, b, |x, y| x * y).iter().sum();
        Ok(self.push(vec![1], vec![v], self.any_grad(&[a, b]), Op::Dot(a, b)))
    }

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let v: f64 = self.nodes[a.0].values.iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(vec![1], vec![v], rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let n = self.nodes[a.0].values.len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean over the column index: `[R, C] -> [R]`.
    pub fn mean_over_cols(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.dims2("mean_over_cols", a)?;
        let av = &self.nodes[a.0].values;
        let out: Vec<f64> = (0..r)
            .map(|i| av[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64)
            .collect();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![r], out, rg, Op::MeanOverCols(a)))
    }

    /// Mean over the row index: `[R, C] -> [C]`.
    pub fn mean_over_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.dims2("mean_over_rows", a)?;
        let av = &self.nodes[a.0].values;
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += av[i * c + j];
            }
        }
        for x in &mut out {
            *x /= r as f64;
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![c], out, rg, Op::MeanOverRows(a)))
    }

    pub fn concat(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput { op: "concat" });
        }
        let mut values = Vec::new();
        for &p in parts {
            values.extend_from_slice(&self.nodes[p.0].values);
        }
        let len = values.len();
        let rg = self.any_grad(parts);
        Ok(self.push(vec![len], values, rg, Op::Concat(parts.to_vec())))
    }

    pub fn stack_rows(&mut self, rows: &[TensorId]) -> Result<TensorId> {
        if rows.is_empty() {
            return Err(TensorError::EmptyInput { op: "stack_rows" });
        }
        let cols = self.nodes[rows[0].0].values.len();
        for &r in rows {
            let s = &self.nodes[r.0].shape;
            if s.len() != 1 || s[0] != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_rows",
                    details: format!("expected vectors of length {cols}, got {s:?}"),
                });
            }
        }
        let mut values = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            values.extend_from_slice(&self.nodes[r.0].values);
        }
        let rg = self.any_grad(rows);
        Ok(self.push(vec![rows.len(), cols], values, rg, Op::StackRows(rows.to_vec())))
    }

    pub fn row(&mut self, a: TensorId, i: usize) -> Result<TensorId> {
        let (r, c) = self.dims2("row", a)?;
        if i >= r {
            return Err(TensorError::IndexOutOfBounds {
                op: "row",
                index: i,
                len: r,
            });
        }
        let values = self.nodes[a.0].values[i * c..(i + 1) * c].to_vec();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![c], values, rg, Op::Row(a, i)))
    }

    pub fn index(&mut self, a: TensorId, i: usize) -> Result<TensorId> {
        let len = self.nodes[a.0].values.len();
        if i >= len {
            return Err(TensorError::IndexOutOfBounds {
                op: "index",
                index: i,
                len,
            });
        }
        let v = self.nodes[a.0].values[i];
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![1], vec![v], rg, Op::Index(a, i)))
    }

    pub fn gather(&mut self, a: TensorId, idxs: &[usize]) -> Result<TensorId> {
        let len = self.nodes[a.0].values.len();
        for &i in idxs {
            if i >= len {
                return Err(TensorError::IndexOutOfBounds {
                    op: "gather",
                    index: i,
                    len,
                });
            }
        }
        let values: Vec<f64> = idxs.iter().map(|&i| self.nodes[a.0].values[i]).collect();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![idxs.len()], values, rg, Op::Gather(a, idxs.to_vec())))
    }

    pub fn gather_rows(&mut self, a: TensorId, idxs: &[usize]) -> Result<TensorId> {
        let (r, c) = self.dims2("gather_rows", a)?;
        for &i in idxs {
            if i >= r {
                return Err(TensorError::IndexOutOfBounds {
                    op: "gather_rows",
                    index: i,
                    len: r,
                });
            }
        }
        let mut values = Vec::with_capacity(idxs.len() * c);
        for &i in idxs {
            values.extend_from_slice(&self.nodes[a.0].values[i * c..(i + 1) * c]);
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(
            vec![idxs.len(), c],
            values,
            rg,
            Op::GatherRows(a, idxs.to_vec()),
        ))
    }

    pub fn softmax(&mut self, a: TensorId) -> Result<TensorId> {
        let s = &self.nodes[a.0].shape;
        if s.len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "softmax",
                details: format!("expected vector, got {s:?}"),
            });
        }
        let values = softmax_vec(&self.nodes[a.0].values);
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(s.clone(), values, rg, Op::Softmax(a)))
    }

    pub fn log_softmax(&mut self, a: TensorId) -> Result<TensorId> {
        let s = &self.nodes[a.0].shape;
        if s.len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "log_softmax",
                details: format!("expected vector, got {s:?}"),
            });
        }
        let x = &self.nodes[a.0].values;
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        let values: Vec<f64> = x.iter().map(|&v| v - lse).collect();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(s.clone(), values, rg, Op::LogSoftmax(a)))
    }

    pub fn leaky_relu(&mut self, a: TensorId, slope: f64) -> TensorId {
        let shape = self.nodes[a.0].shape.clone();
        let values = self.nodes[a.0]
            .values
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push(shape, values, rg, Op::LeakyRelu(a, slope))
    }

    pub fn elu(&mut self, a: TensorId) -> TensorId {
        let shape = self.nodes[a.0].shape.clone();
        let values = self.nodes[a.0]
            .values
            .iter()
            .map(|&x| if x > 0.0 { x } else { x.exp() - 1.0 })
            .collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push(shape, values, rg, Op::Elu(a))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let shape = self.nodes[a.0].shape.clone();
        let values = self.nodes[a.0]
            .values
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push(shape, values, rg, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let shape = self.nodes[a.0].shape.clone();
        let values = self.nodes[a.0].values.iter().map(|&x| x.tanh()).collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push(shape, values, rg, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        let shape = self.nodes[a.0].shape.clone();
        let values = self.nodes[a.0].values.iter().map(|&x| x.exp()).collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push(shape, values, rg, Op::Exp(a))
    }

    pub fn ln(&mut self, a: TensorId) -> TensorId {
        let shape = self.nodes[a.0].shape.clone();
        let values = self.nodes[a.0].values.iter().map(|&x| x.ln()).collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push(shape, values, rg, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: TensorId) -> TensorId {
        let shape = self.nodes[a.0].shape.clone();
        let values = self.nodes[a.0].values.iter().map(|&x| x.sqrt()).collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push(shape, values, rg, Op::Sqrt(a))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.dims2("transpose", a)?;
        let av = &self.nodes[a.0].values;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![c, r], out, rg, Op::Transpose(a)))
    }

    /// Add vector `b` (length C) to every row of `a` (`[R, C]`).
    pub fn broadcast_add_row(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (r, c) = self.dims2("broadcast_add_row", a)?;
        let sb = &self.nodes[b.0].shape;
        if sb.len() != 1 || sb[0] != c {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_add_row",
                details: format!("matrix {:?} + vector {sb:?}", self.nodes[a.0].shape),
            });
        }
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(av[i * c + j] + bv[j]);
            }
        }
        Ok(self.push(
            vec![r, c],
            out,
            self.any_grad(&[a, b]),
            Op::BroadcastAddRow(a, b),
        ))
    }

    /// Add vector `b` (length R) to every column of `a` (`[R, C]`); per-row bias.
    pub fn broadcast_add_col(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (r, c) = self.dims2("broadcast_add_col", a)?;
        let sb = &self.nodes[b.0].shape;
        if sb.len() != 1 || sb[0] != r {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_add_col",
                details: format!("matrix {:?} + vector {sb:?}", self.nodes[a.0].shape),
            });
        }
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(av[i * c + j] + bv[i]);
            }
        }
        Ok(self.push(
            vec![r, c],
            out,
            self.any_grad(&[a, b]),
            Op::BroadcastAddCol(a, b),
        ))
    }

    /// Same-padded dilated 1-D convolution, stride 1.
    ///
    /// `input` is `[C_in, L]`, `weight` is `[C_out, C_in * kernel]`, output is
    /// `[C_out, L]`. Out-of-range taps read zero.
    pub fn conv1d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        kernel: usize,
        dilation: usize,
    ) -> Result<TensorId> {
        let (cin, len) = self.dims2("conv1d", input)?;
        let (cout, wcols) = self.dims2("conv1d", weight)?;
        if wcols != cin * kernel {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                details: format!(
                    "weight cols {wcols} != c_in {cin} * kernel {kernel}"
                ),
            });
        }
        let xv = &self.nodes[input.0].values;
        let wv = &self.nodes[weight.0].values;
        let center = (kernel - 1) / 2;
        let mut out = vec![0.0; cout * len];
        for o in 0..cout {
            for ci in 0..cin {
                for j in 0..kernel {
                    let w = wv[o * wcols + ci * kernel + j];
                    if w == 0.0 {
                        continue;
                    }
                    let offset = (j as isize - center as isize) * dilation as isize;
                    for t in 0..len {
                        let src = t as isize + offset;
                        if src >= 0 && (src as usize) < len {
                            out[o * len + t] += w * xv[ci * len + src as usize];
                        }
                    }
                }
            }
        }
        Ok(self.push(
            vec![cout, len],
            out,
            self.any_grad(&[input, weight]),
            Op::Conv1d {
                input,
                weight,
                kernel,
                dilation,
            },
        ))
    }

    /// Identity forward; backward contributes nothing upstream.
    pub fn stop_gradient(&mut self, a: TensorId) -> TensorId {
        let shape = self.nodes[a.0].shape.clone();
        let values = self.nodes[a.0].values.clone();
        self.push(shape, values, false, Op::StopGradient)
    }

    /// Reverse sweep from a scalar root. Returns per-node gradients indexed by
    /// `TensorId`; untouched nodes have zero gradients.
    pub fn backward(&self, root: TensorId) -> Result<Gradients> {
        if self.nodes[root.0].shape != [1] {
            return Err(TensorError::NonScalarRoot(self.nodes[root.0].shape.clone()));
        }
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.values.len()])
            .collect();
        grads[root.0][0] = 1.0;
        for i in (0..=root.0).rev() {
            if grads[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = std::mem::take(&mut grads[i]);
            self.backprop_node(i, &g, &mut grads);
            grads[i] = g;
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Vec<f64>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                accumulate(&mut grads[a.0], g, 1.0);
                accumulate(&mut grads[b.0], g, 1.0);
            }
            Op::Sub(a, b) => {
                accumulate(&mut grads[a.0], g, 1.0);
                accumulate(&mut grads[b.0], g, -1.0);
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a.0].values.clone();
                let bv = self.nodes[b.0].values.clone();
                for (k, &gk) in g.iter().enumerate() {
                    grads[a.0][k] += gk * bv[k];
                    grads[b.0][k] += gk * av[k];
                }
            }
            Op::Div(a, b) => {
                let av = self.nodes[a.0].values.clone();
                let bv = self.nodes[b.0].values.clone();
                for (k, &gk) in g.iter().enumerate() {
                    grads[a.0][k] += gk / bv[k];
                    grads[b.0][k] -= gk * av[k] / (bv[k] * bv[k]);
                }
            }
            Op::ScaleConst(a, c) => accumulate(&mut grads[a.0], g, *c),
            Op::AddConst(a) => accumulate(&mut grads[a.0], g, 1.0),
            Op::ScaleByScalar(a, s) => {
                let sv = self.nodes[s.0].values[0];
                let av = self.nodes[a.0].values.clone();
                for (k, &gk) in g.iter().enumerate() {
                    grads[a.0][k] += gk * sv;
                    grads[s.0][0] += gk * av[k];
                }
            }
            Op::AddScalarBroadcast(a, s) => {
                accumulate(&mut grads[a.0], g, 1.0);
                grads[s.0][0] += g.iter().sum::<f64>();
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                let av = self.nodes[a.0].values.clone();
                let bv = self.nodes[b.0].values.clone();
                // dA = G * B^T, dB = A^T * G
                for i2 in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[i2 * n + j] * bv[p * n + j];
                        }
                        grads[a.0][i2 * k + p] += acc;
                    }
                }
                for p in 0..k {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for i2 in 0..m {
                            acc += av[i2 * k + p] * g[i2 * n + j];
                        }
                        grads[b.0][p * n + j] += acc;
                    }
                }
            }
            Op::MatVec(a, v) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let av = self.nodes[a.0].values.clone();
                let vv = self.nodes[v.0].values.clone();
                for i2 in 0..m {
                    for p in 0..k {
                        grads[a.0][i2 * k + p] += g[i2] * vv[p];
                        grads[v.0][p] += av[i2 * k + p] * g[i2];
                    }
                }
            }
            Op::Dot(a, b) => {
                let av = self.nodes[a.0].values.clone();
                let bv = self.nodes[b.0].values.clone();
                for k in 0..av.len() {
                    grads[a.0][k] += g[0] * bv[k];
                    grads[b.0][k] += g[0] * av[k];
                }
            }
            Op::Sum(a) => {
                for ga in grads[a.0].iter_mut() {
                    *ga += g[0];
                }
            }
            Op::MeanOverCols(a) => {
                let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                for i2 in 0..r {
                    let gi = g[i2] / c as f64;
                    for j in 0..c {
                        grads[a.0][i2 * c + j] += gi;
                    }
                }
            }
            Op::MeanOverRows(a) => {
                let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                for i2 in 0..r {
                    for j in 0..c {
                        grads[a.0][i2 * c + j] += g[j] / r as f64;
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].values.len();
                    accumulate(&mut grads[p.0], &g[off..off + len], 1.0);
                    off += len;
                }
            }
            Op::StackRows(rows) => {
                let cols = self.nodes[rows[0].0].values.len();
                for (r, &row) in rows.iter().enumerate() {
                    accumulate(&mut grads[row.0], &g[r * cols..(r + 1) * cols], 1.0);
                }
            }
            Op::Row(a, i2) => {
                let c = self.nodes[a.0].shape[1];
                accumulate(&mut grads[a.0][i2 * c..(i2 + 1) * c], g, 1.0);
            }
            Op::Index(a, i2) => {
                grads[a.0][*i2] += g[0];
            }
            Op::Gather(a, idxs) => {
                for (k, &src) in idxs.iter().enumerate() {
                    grads[a.0][src] += g[k];
                }
            }
            Op::GatherRows(a, idxs) => {
                let c = self.nodes[a.0].shape[1];
                for (k, &src) in idxs.iter().enumerate() {
                    accumulate(&mut grads[a.0][src * c..(src + 1) * c], &g[k * c..(k + 1) * c], 1.0);
                }
            }
            Op::Softmax(a) => {
                let y = &node.values;
                let gy: f64 = g.iter().zip(y).map(|(&gk, &yk)| gk * yk).sum();
                for k in 0..y.len() {
                    grads[a.0][k] += y[k] * (g[k] - gy);
                }
            }
            Op::LogSoftmax(a) => {
                let y = &node.values;
                let gsum: f64 = g.iter().sum();
                for k in 0..y.len() {
                    grads[a.0][k] += g[k] - y[k].exp() * gsum;
                }
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.nodes[a.0].values.clone();
                for (k, &gk) in g.iter().enumerate() {
                    grads[a.0][k] += gk * if x[k] > 0.0 { 1.0 } else { *slope };
                }
            }
            Op::Elu(a) => {
                let x = self.nodes[a.0].values.clone();
                let y = &node.values;
                for (k, &gk) in g.iter().enumerate() {
                    grads[a.0][k] += gk * if x[k] > 0.0 { 1.0 } else { y[k] + 1.0 };
                }
            }
            Op::Sigmoid(a) => {
                let y = &node.values;
                for (k, &gk) in g.iter().enumerate() {
                    grads[a.0][k] += gk * y[k] * (1.0 - y[k]);
                }
            }
            Op::Tanh(a) => {
                let y = &node.values;
                for (k, &gk) in g.iter().enumerate() {
                    grads[a.0][k] += gk * (1.0 - y[k] * y[k]);
                }
            }
            Op::Exp(a) => {
                let y = &node.values;
                for (k, &gk) in g.iter().enumerate() {
                    grads[a.0][k] += gk * y[k];
                }
            }
            Op::Ln(a) => {
                let x = self.nodes[a.0].values.clone();
                for (k, &gk) in g.iter().enumerate() {
                    grads[a.0][k] += gk / x[k];
                }
            }
            Op::Sqrt(a) => {
                let y = &node.values;
                for (k, &gk) in g.iter().enumerate() {
                    grads[a.0][k] += gk / (2.0 * y[k]);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                for i2 in 0..r {
                    for j in 0..c {
                        grads[a.0][i2 * c + j] += g[j * r + i2];
                    }
                }
            }
            Op::BroadcastAddRow(a, b) => {
                let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                accumulate(&mut grads[a.0], g, 1.0);
                for i2 in 0..r {
                    for j in 0..c {
                        grads[b.0][j] += g[i2 * c + j];
                    }
                }
            }
            Op::BroadcastAddCol(a, b) => {
                let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                accumulate(&mut grads[a.0], g, 1.0);
                for i2 in 0..r {
                    for j in 0..c {
                        grads[b.0][i2] += g[i2 * c + j];
                    }
                }
            }
            Op::Conv1d {
                input,
                weight,
                kernel,
                dilation,
            } => {
                let (cin, len) = (self.nodes[input.0].shape[0], self.nodes[input.0].shape[1]);
                let cout = self.nodes[weight.0].shape[0];
                let wcols = cin * kernel;
                let xv = self.nodes[input.0].values.clone();
                let wv = self.nodes[weight.0].values.clone();
                let center = (kernel - 1) / 2;
                for o in 0..cout {
                    for ci in 0..cin {
                        for j in 0..*kernel {
                            let offset = (j as isize - center as isize) * *dilation as isize;
                            let w = wv[o * wcols + ci * kernel + j];
                            let mut gw = 0.0;
                            for t in 0..len {
                                let src = t as isize + offset;
                                if src >= 0 && (src as usize) < len {
                                    let gk = g[o * len + t];
                                    gw += gk * xv[ci * len + src as usize];
                                    grads[input.0][ci * len + src as usize] += gk * w;
                                }
                            }
                            grads[weight.0][o * wcols + ci * kernel + j] += gw;
                        }
                    }
                }
            }
        }
    }
}

/// Per-node gradients from one backward sweep.
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> &[f64] {
        &self.grads[id.0]
    }
}

fn accumulate(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

pub fn softmax_vec(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_shape() {
        let mut t = Tape::new();
        let a = t.constant(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t.constant(&[3, 1], vec![1.0, 1.0, 1.0]);
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.shape(c), &[2, 1]);
        assert_eq!(t.values(c), &[6.0, 15.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_op() {
        let mut t = Tape::new();
        let a = t.constant(&[2, 3], vec![0.0; 6]);
        let b = t.constant(&[2, 2], vec![0.0; 4]);
        let err = t.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn softmax_uniform() {
        let mut t = Tape::new();
        let a = t.constant(&[4], vec![0.7; 4]);
        let s = t.softmax(a).unwrap();
        for &v in t.values(s) {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn leaky_relu_negative() {
        let mut t = Tape::new();
        let a = t.constant(&[1], vec![-1.0]);
        let y = t.leaky_relu(a, 0.2);
        assert!((t.scalar(y) + 0.2).abs() < 1e-12);
    }

    #[test]
    fn backward_square() {
        let mut t = Tape::new();
        let x = t.leaf(&[1], vec![3.0], true);
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert!((g.get(x)[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn backward_non_scalar_root_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(&[2], vec![1.0, 2.0], true);
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn softmax_cross_entropy_uniform_logits() {
        // d/dlogits of -log_softmax(logits)[0] at uniform logits, 3 classes:
        // (-2/3, 1/3, 1/3).
        let mut t = Tape::new();
        let logits = t.leaf(&[3], vec![0.5, 0.5, 0.5], true);
        let ls = t.log_softmax(logits).unwrap();
        let picked = t.index(ls, 0).unwrap();
        let loss = t.neg(picked);
        let g = t.backward(loss).unwrap();
        let expect = [-2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];
        for (got, want) in g.get(logits).iter().zip(expect) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn stop_gradient_blocks_upstream() {
        let mut t = Tape::new();
        let x = t.leaf(&[1], vec![2.0], true);
        let y = t.leaf(&[1], vec![5.0], true);
        let sgx = t.stop_gradient(x);
        assert_eq!(t.values(sgx), t.values(x));
        let z = t.mul(sgx, y).unwrap();
        let g = t.backward(z).unwrap();
        assert_eq!(g.get(x)[0], 0.0);
        assert!((g.get(y)[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn backward_accumulates_across_uses() {
        let mut t = Tape::new();
        let x = t.leaf(&[1], vec![2.0], true);
        let a = t.mul(x, x).unwrap(); // x^2
        let s = t.add(a, x).unwrap(); // x^2 + x -> d/dx = 2x + 1 = 5
        let g = t.backward(s).unwrap();
        assert!((g.get(x)[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn backward_linearity_over_loss_sum() {
        let mut t = Tape::new();
        let x = t.leaf(&[3], vec![0.3, -0.2, 0.9], true);
        let l1 = t.dot(x, x).unwrap();
        let sm = t.softmax(x).unwrap();
        let l2 = t.index(sm, 1).unwrap();
        let total = t.add(l1, l2).unwrap();
        let g_total = t.backward(total).unwrap();
        let g1 = t.backward(l1).unwrap();
        let g2 = t.backward(l2).unwrap();
        for k in 0..3 {
            let sum = g1.get(x)[k] + g2.get(x)[k];
            assert!((g_total.get(x)[k] - sum).abs() < 1e-10);
        }
    }
}
