//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] owns every node; a [`Tensor`] is a copyable handle into it.
//! Nodes are created in topological order, so [`Tape::backward`] is a single
//! reverse sweep that visits each node exactly once and accumulates (sums)
//! gradients across fan-out. A tape is single-threaded; independent tapes
//! may run in parallel with gradients merged outside.

pub mod gradcheck;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AdError {
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch {
        op: &'static str,
        left: String,
        right: String,
    },
    #[error("{op}: expected {want}, got {got}")]
    BadShape {
        op: &'static str,
        want: String,
        got: String,
    },
    #[error("backward requires a scalar loss, got {0}")]
    NonScalarLoss(String),
    #[error("tape already consumed by backward; build a fresh forward pass")]
    TapeConsumed,
    #[error("index {index} out of bounds for dimension of size {size}")]
    IndexOutOfBounds { index: usize, size: usize },
}

/// Dense tensor shape, 1 to 3 dims, row-major layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Self {
        assert!(
            !dims.is_empty() && dims.len() <= 3,
            "shapes are 1 to 3 dims, got {dims:?}"
        );
        Shape(dims.to_vec())
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// (rows, cols) of a rank-2 shape.
    pub fn matrix(&self) -> Option<(usize, usize)> {
        match self.0.as_slice() {
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }

    fn without_axis(&self, axis: usize) -> Shape {
        let dims: Vec<usize> = self
            .0
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != axis)
            .map(|(_, &d)| d)
            .collect();
        Shape(if dims.is_empty() { vec![1] } else { dims })
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl From<&[usize]> for Shape {
    fn from(d: &[usize]) -> Self {
        Shape::new(d)
    }
}

impl<const N: usize> From<[usize; N]> for Shape {
    fn from(d: [usize; N]) -> Self {
        Shape::new(&d)
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor {
    id: usize,
}

enum Op {
    Leaf,
    Add {
        a: usize,
        b: usize,
        broadcast_rows: bool,
    },
    Sub(usize, usize),
    ScalarMul(usize, f64),
    Hadamard(usize, usize),
    Matmul(usize, usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    RowSoftmax(usize),
    L1NormalizeRows(usize),
    MaxOverAxis {
        input: usize,
        argmax: Vec<usize>,
    },
    MeanOverAxis {
        input: usize,
        axis: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Transpose(usize),
    GatherRows {
        input: usize,
        indices: Vec<usize>,
    },
    CrossEntropyLogits {
        logits: usize,
        targets: Vec<usize>,
    },
    Exp(usize),
    Log(usize),
    Reshape(usize),
    /// Row-indexed relative logits: q is [n, d], e is [n*n, d],
    /// out[i][j] = dot(q[i], e[i*n + j]).
    RelLogits {
        q: usize,
        e: usize,
    },
}

struct Node {
    shape: Shape,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Reverse-mode tape. One forward graph, one backward sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// L1 row normalization guard against empty rows; keeps the op total.
const L1_EPS: f64 = 1e-12;

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

    fn push(&mut self, shape: Shape, data: Vec<f64>, requires_grad: bool, op: Op) -> Tensor {
        debug_assert_eq!(shape.numel(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            requires_grad,
            op,
        });
        Tensor {
            id: self.nodes.len() - 1,
        }
    }

    fn check_open(&self) -> Result<(), AdError> {
        if self.consumed {
            Err(AdError::TapeConsumed)
        } else {
            Ok(())
        }
    }

    pub fn leaf(
        &mut self,
        data: Vec<f64>,
        shape: impl Into<Shape>,
        requires_grad: bool,
    ) -> Result<Tensor, AdError> {
        self.check_open()?;
        let shape = shape.into();
        if shape.numel() != data.len() {
            return Err(AdError::BadShape {
                op: "leaf",
                want: format!("{} values for shape {shape}", shape.numel()),
                got: format!("{} values", data.len()),
            });
        }
        Ok(self.push(shape, data, requires_grad, Op::Leaf))
    }

    pub fn constant(&mut self, data: Vec<f64>, shape: impl Into<Shape>) -> Result<Tensor, AdError> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> Tensor {
        self.leaf(vec![v], [1], false).unwrap()
    }

    pub fn value(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.id].data
    }

    pub fn shape(&self, t: Tensor) -> &Shape {
        &self.nodes[t.id].shape
    }

    pub fn grad(&self, t: Tensor) -> Option<&[f64]> {
        self.nodes[t.id].grad.as_deref()
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.id].requires_grad
    }

    fn mismatch(op: &'static str, a: &Shape, b: &Shape) -> AdError {
        AdError::ShapeMismatch {
            op,
            left: a.to_string(),
            right: b.to_string(),
        }
    }

    /// Elementwise addition; `b` may also be a bias row [1, C] added to every
    /// row of a [R, C] matrix.
    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, AdError> {
        self.check_open()?;
        let (sa, sb) = (&self.nodes[a.id].shape, &self.nodes[b.id].shape);
        let broadcast_rows = sa != sb;
        if broadcast_rows {
            let ok = matches!((sa.matrix(), sb.matrix()), (Some((_, ca)), Some((1, cb))) if ca == cb);
            if !ok {
                return Err(Self::mismatch("add", sa, sb));
            }
        }
        let shape = sa.clone();
        let req = self.nodes[a.id].requires_grad || self.nodes[b.id].requires_grad;
        let bv = &self.nodes[b.id].data;
        let data: Vec<f64> = if broadcast_rows {
            let cols = bv.len();
            self.nodes[a.id]
                .data
                .iter()
                .enumerate()
                .map(|(i, &x)| x + bv[i % cols])
                .collect()
        } else {
            self.nodes[a.id]
                .data
                .iter()
                .zip(bv.iter())
                .map(|(&x, &y)| x + y)
                .collect()
        };
        Ok(self.push(
            shape,
            data,
            req,
            Op::Add {
                a: a.id,
                b: b.id,
                broadcast_rows,
            },
        ))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, AdError> {
        self.check_open()?;
        let (sa, sb) = (&self.nodes[a.id].shape, &self.nodes[b.id].shape);
        if sa != sb {
            return Err(Self::mismatch("sub", sa, sb));
        }
        let shape = sa.clone();
        let req = self.nodes[a.id].requires_grad || self.nodes[b.id].requires_grad;
        let data = self.nodes[a.id]
            .data
            .iter()
            .zip(self.nodes[b.id].data.iter())
            .map(|(&x, &y)| x - y)
            .collect();
        Ok(self.push(shape, data, req, Op::Sub(a.id, b.id)))
    }

    pub fn scalar_mul(&mut self, a: Tensor, s: f64) -> Result<Tensor, AdError> {
        self.check_open()?;
        let shape = self.nodes[a.id].shape.clone();
        let req = self.nodes[a.id].requires_grad;
        let data = self.nodes[a.id].data.iter().map(|&x| x * s).collect();
        Ok(self.push(shape, data, req, Op::ScalarMul(a.id, s)))
    }

    pub fn hadamard(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, AdError> {
        self.check_open()?;
        let (sa, sb) = (&self.nodes[a.id].shape, &self.nodes[b.id].shape);
        if sa != sb {
            return Err(Self::mismatch("hadamard", sa, sb));
        }
        let shape = sa.clone();
        let req = self.nodes[a.id].requires_grad || self.nodes[b.id].requires_grad;
        let data = self.nodes[a.id]
            .data
            .iter()
            .zip(self.nodes[b.id].data.iter())
            .map(|(&x, &y)| x * y)
            .collect();
        Ok(self.push(shape, data, req, Op::Hadamard(a.id, b.id)))
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, AdError> {
        self.check_open()?;
        let (sa, sb) = (&self.nodes[a.id].shape, &self.nodes[b.id].shape);
        let ((m, ka), (kb, n)) = match (sa.matrix(), sb.matrix()) {
            (Some(x), Some(y)) => (x, y),
            _ => return Err(Self::mismatch("matmul", sa, sb)),
        };
        if ka != kb {
            return Err(Self::mismatch("matmul", sa, sb));
        }
        let mut data = vec![0.0; m * n];
        gemm(
            &self.nodes[a.id].data,
            &self.nodes[b.id].data,
            &mut data,
            m,
            ka,
            n,
        );
        let req = self.nodes[a.id].requires_grad || self.nodes[b.id].requires_grad;
        Ok(self.push(Shape::new(&[m, n]), data, req, Op::Matmul(a.id, b.id)))
    }

    pub fn relu(&mut self, a: Tensor) -> Result<Tensor, AdError> {
        self.check_open()?;
        let shape = self.nodes[a.id].shape.clone();
        let req = self.nodes[a.id].requires_grad;
        let data = self.nodes[a.id].data.iter().map(|&x| x.max(0.0)).collect();
        Ok(self.push(shape, data, req, Op::Relu(a.id)))
    }

    pub fn leaky_relu(&mut self, a: Tensor, slope: f64) -> Result<Tensor, AdError> {
        self.check_open()?;
        let shape = self.nodes[a.id].shape.clone();
        let req = self.nodes[a.id].requires_grad;
        let data = self.nodes[a.id]
            .data
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        Ok(self.push(shape, data, req, Op::LeakyRelu(a.id, slope)))
    }

    pub fn exp(&mut self, a: Tensor) -> Result<Tensor, AdError> {
        self.check_open()?;
        let shape = self.nodes[a.id].shape.clone();
        let req = self.nodes[a.id].requires_grad;
        let data = self.nodes[a.id].data.iter().map(|&x| x.exp()).collect();
        Ok(self.push(shape, data, req, Op::Exp(a.id)))
    }

    pub fn log(&mut self, a: Tensor) -> Result<Tensor, AdError> {
        self.check_open()?;
        let shape = self.nodes[a.id].shape.clone();
        let req = self.nodes[a.id].requires_grad;
        let data = self.nodes[a.id].data.iter().map(|&x| x.ln()).collect();
        Ok(self.push(shape, data, req, Op::Log(a.id)))
    }

    /// Numerically stable softmax along the last axis of a matrix.
    pub fn row_softmax(&mut self, a: Tensor) -> Result<Tensor, AdError> {
        self.check_open()?;
        let shape = self.nodes[a.id].shape.clone();
        let (rows, cols) = shape.matrix().ok_or_else(|| AdError::BadShape {
            op: "row_softmax",
            want: "rank-2 tensor".into(),
            got: shape.to_string(),
        })?;
        let x = &self.nodes[a.id].data;
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut sum = 0.0;
            for (o, &v) in data[r * cols..(r + 1) * cols].iter_mut().zip(row.iter()) {
                *o = (v - m).exp();
                sum += *o;
            }
            for o in &mut data[r * cols..(r + 1) * cols] {
                *o /= sum;
            }
        }
        let req = self.nodes[a.id].requires_grad;
        Ok(self.push(shape, data, req, Op::RowSoftmax(a.id)))
    }

    /// Divide each row by its L1 mass (plus a tiny epsilon).
    pub fn l1_normalize_rows(&mut self, a: Tensor) -> Result<Tensor, AdError> {
        self.check_open()?;
        let shape = self.nodes[a.id].shape.clone();
        let (rows, cols) = shape.matrix().ok_or_else(|| AdError::BadShape {
            op: "l1_normalize_rows",
            want: "rank-2 tensor".into(),
            got: shape.to_string(),
        })?;
        let x = &self.nodes[a.id].data;
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let s: f64 = row.iter().map(|v| v.abs()).sum::<f64>() + L1_EPS;
            for (o, &v) in data[r * cols..(r + 1) * cols].iter_mut().zip(row.iter()) {
                *o = v / s;
            }
        }
        let req = self.nodes[a.id].requires_grad;
        Ok(self.push(shape, data, req, Op::L1NormalizeRows(a.id)))
    }

    /// Maximum along `axis`; the gradient routes to the argmax element, ties
    /// to the lowest index.
    pub fn max_over_axis(&mut self, a: Tensor, axis: usize) -> Result<Tensor, AdError> {
        self.reduce_over_axis(a, axis, true)
    }

    pub fn mean_over_axis(&mut self, a: Tensor, axis: usize) -> Result<Tensor, AdError> {
        self.reduce_over_axis(a, axis, false)
    }

    fn reduce_over_axis(&mut self, a: Tensor, axis: usize, is_max: bool) -> Result<Tensor, AdError> {
        self.check_open()?;
        let shape = self.nodes[a.id].shape.clone();
        if axis >= shape.rank() {
            return Err(AdError::IndexOutOfBounds {
                index: axis,
                size: shape.rank(),
            });
        }
        let dims = shape.dims();
        let out_shape = shape.without_axis(axis);
        // Treat the tensor as [outer, axis_len, inner].
        let axis_len = dims[axis];
        let outer: usize = dims[..axis].iter().product();
        let inner: usize = dims[axis + 1..].iter().product();
        let x = &self.nodes[a.id].data;
        let mut data = vec![0.0; outer * inner];
        let mut argmax = vec![0usize; if is_max { outer * inner } else { 0 }];
        for o in 0..outer {
            for i in 0..inner {
                let out_idx = o * inner + i;
                if is_max {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = 0usize;
                    for j in 0..axis_len {
                        let idx = (o * axis_len + j) * inner + i;
                        if x[idx] > best {
                            best = x[idx];
                            best_at = idx;
                        }
                    }
                    data[out_idx] = best;
                    argmax[out_idx] = best_at;
                } else {
                    let mut sum = 0.0;
                    for j in 0..axis_len {
                        sum += x[(o * axis_len + j) * inner + i];
                    }
                    data[out_idx] = sum / axis_len as f64;
                }
            }
        }
        let req = self.nodes[a.id].requires_grad;
        let op = if is_max {
            Op::MaxOverAxis {
                input: a.id,
                argmax,
            }
        } else {
            Op::MeanOverAxis { input: a.id, axis }
        };
        Ok(self.push(out_shape, data, req, op))
    }

    /// Concatenate rank-2 tensors along `axis` (0 = stack rows, 1 = widen).
    pub fn concat(&mut self, inputs: &[Tensor], axis: usize) -> Result<Tensor, AdError> {
        self.check_open()?;
        assert!(!inputs.is_empty(), "concat of zero tensors");
        if axis > 1 {
            return Err(AdError::IndexOutOfBounds {
                index: axis,
                size: 2,
            });
        }
        let first = self.nodes[inputs[0].id].shape.clone();
        let (mut rows, mut cols) = first.matrix().ok_or_else(|| AdError::BadShape {
            op: "concat",
            want: "rank-2 tensors".into(),
            got: first.to_string(),
        })?;
        for t in &inputs[1..] {
            let s = &self.nodes[t.id].shape;
            let (r, c) = s.matrix().ok_or_else(|| AdError::BadShape {
                op: "concat",
                want: "rank-2 tensors".into(),
                got: s.to_string(),
            })?;
            if axis == 0 {
                if c != cols {
                    return Err(Self::mismatch("concat", &first, s));
                }
                rows += r;
            } else {
                if r != rows {
                    return Err(Self::mismatch("concat", &first, s));
                }
                cols += c;
            }
        }
        let mut data = Vec::with_capacity(rows * cols);
        if axis == 0 {
            for t in inputs {
                data.extend_from_slice(&self.nodes[t.id].data);
            }
        } else {
            let r0 = rows;
            for r in 0..r0 {
                for t in inputs {
                    let (_, c) = self.nodes[t.id].shape.matrix().unwrap();
                    let src = &self.nodes[t.id].data[r * c..(r + 1) * c];
                    data.extend_from_slice(src);
                }
            }
        }
        let req = inputs.iter().any(|t| self.nodes[t.id].requires_grad);
        Ok(self.push(
            Shape::new(&[rows, cols]),
            data,
            req,
            Op::Concat {
                inputs: inputs.iter().map(|t| t.id).collect(),
                axis,
            },
        ))
    }

    pub fn transpose(&mut self, a: Tensor) -> Result<Tensor, AdError> {
        self.check_open()?;
        let shape = self.nodes[a.id].shape.clone();
        let (rows, cols) = shape.matrix().ok_or_else(|| AdError::BadShape {
            op: "transpose",
            want: "rank-2 tensor".into(),
            got: shape.to_string(),
        })?;
        let x = &self.nodes[a.id].data;
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = x[r * cols + c];
            }
        }
        let req = self.nodes[a.id].requires_grad;
        Ok(self.push(Shape::new(&[cols, rows]), data, req, Op::Transpose(a.id)))
    }

    /// Select rows of a matrix by index; duplicates allowed. Gradient
    /// scatter-adds back into the source rows.
    pub fn gather_rows(&mut self, a: Tensor, indices: &[usize]) -> Result<Tensor, AdError> {
        self.check_open()?;
        let shape = self.nodes[a.id].shape.clone();
        let (rows, cols) = shape.matrix().ok_or_else(|| AdError::BadShape {
            op: "gather_rows",
            want: "rank-2 tensor".into(),
            got: shape.to_string(),
        })?;
        for &i in indices {
            if i >= rows {
                return Err(AdError::IndexOutOfBounds {
                    index: i,
                    size: rows,
                });
            }
        }
        let x = &self.nodes[a.id].data;
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(&x[i * cols..(i + 1) * cols]);
        }
        let req = self.nodes[a.id].requires_grad;
        Ok(self.push(
            Shape::new(&[indices.len(), cols]),
            data,
            req,
            Op::GatherRows {
                input: a.id,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Mean cross entropy between rows of logits and integer targets;
    /// stable log-sum-exp composition.
    pub fn cross_entropy_logits(
        &mut self,
        logits: Tensor,
        targets: &[usize],
    ) -> Result<Tensor, AdError> {
        self.check_open()?;
        let shape = self.nodes[logits.id].shape.clone();
        let (rows, cols) = shape.matrix().ok_or_else(|| AdError::BadShape {
            op: "cross_entropy_logits",
            want: "rank-2 logits".into(),
            got: shape.to_string(),
        })?;
        if targets.len() != rows {
            return Err(AdError::BadShape {
                op: "cross_entropy_logits",
                want: format!("{rows} targets"),
                got: format!("{}", targets.len()),
            });
        }
        for &t in targets {
            if t >= cols {
                return Err(AdError::IndexOutOfBounds {
                    index: t,
                    size: cols,
                });
            }
        }
        let x = &self.nodes[logits.id].data;
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &x[r * cols..(r + 1) * cols];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let req = self.nodes[logits.id].requires_grad;
        Ok(self.push(
            Shape::new(&[1]),
            vec![total / rows as f64],
            req,
            Op::CrossEntropyLogits {
                logits: logits.id,
                targets: targets.to_vec(),
            },
        ))
    }

    /// View with a new shape; same number of elements, identity gradient.
    pub fn reshape(&mut self, a: Tensor, shape: impl Into<Shape>) -> Result<Tensor, AdError> {
        self.check_open()?;
        let shape = shape.into();
        if shape.numel() != self.nodes[a.id].shape.numel() {
            return Err(Self::mismatch("reshape", &self.nodes[a.id].shape, &shape));
        }
        let data = self.nodes[a.id].data.clone();
        let req = self.nodes[a.id].requires_grad;
        Ok(self.push(shape, data, req, Op::Reshape(a.id)))
    }

    /// Per-query relative logits: `q` is [n, d], `e` is [n*n, d] (row i*n+j
    /// describes the pair (i, j)); out[i][j] = dot(q[i], e[i*n + j]).
    pub fn rel_logits(&mut self, q: Tensor, e: Tensor) -> Result<Tensor, AdError> {
        self.check_open()?;
        let sq = self.nodes[q.id].shape.clone();
        let se = self.nodes[e.id].shape.clone();
        let ((n, d), (rows_e, de)) = match (sq.matrix(), se.matrix()) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Self::mismatch("rel_logits", &sq, &se)),
        };
        if de != d || rows_e != n * n {
            return Err(Self::mismatch("rel_logits", &sq, &se));
        }
        let qd = &self.nodes[q.id].data;
        let ed = &self.nodes[e.id].data;
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            let qi = &qd[i * d..(i + 1) * d];
            for j in 0..n {
                let er = &ed[(i * n + j) * d..(i * n + j + 1) * d];
                data[i * n + j] = qi.iter().zip(er.iter()).map(|(&a, &b)| a * b).sum();
            }
        }
        let req = self.nodes[q.id].requires_grad || self.nodes[e.id].requires_grad;
        Ok(self.push(
            Shape::new(&[n, n]),
            data,
            req,
            Op::RelLogits { q: q.id, e: e.id },
        ))
    }

    /// Reverse sweep from a scalar loss. Gradients sum across fan-out; the
    /// tape is consumed afterwards and a second call errors.
    pub fn backward(&mut self, loss: Tensor) -> Result<(), AdError> {
        if self.consumed {
            return Err(AdError::TapeConsumed);
        }
        let shape = &self.nodes[loss.id].shape;
        if !shape.is_scalar() {
            return Err(AdError::NonScalarLoss(shape.to_string()));
        }
        self.consumed = true;
        self.nodes[loss.id].grad = Some(vec![1.0]);
        for idx in (0..self.nodes.len()).rev() {
            if self.nodes[idx].grad.is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(idx);
            let node = &mut rest[0];
            let out_grad = node.grad.as_ref().unwrap();
            backprop_node(node, out_grad, before);
        }
        Ok(())
    }
}

fn ensure_grad<'a>(nodes: &'a mut [Node], id: usize) -> Option<&'a mut [f64]> {
    let node = &mut nodes[id];
    if !node.requires_grad {
        return None;
    }
    if node.grad.is_none() {
        node.grad = Some(vec![0.0; node.data.len()]);
    }
    node.grad.as_deref_mut()
}

fn backprop_node(node: &Node, out_grad: &[f64], before: &mut [Node]) {
    match &node.op {
        Op::Leaf => {}
        Op::Add {
            a,
            b,
            broadcast_rows,
        } => {
            if let Some(ga) = ensure_grad(before, *a) {
                for (g, &og) in ga.iter_mut().zip(out_grad.iter()) {
                    *g += og;
                }
            }
            if let Some(gb) = ensure_grad(before, *b) {
                if *broadcast_rows {
                    let cols = gb.len();
                    for (i, &og) in out_grad.iter().enumerate() {
                        gb[i % cols] += og;
                    }
                } else {
                    for (g, &og) in gb.iter_mut().zip(out_grad.iter()) {
                        *g += og;
                    }
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = ensure_grad(before, *a) {
                for (g, &og) in ga.iter_mut().zip(out_grad.iter()) {
                    *g += og;
                }
            }
            if let Some(gb) = ensure_grad(before, *b) {
                for (g, &og) in gb.iter_mut().zip(out_grad.iter()) {
                    *g -= og;
                }
            }
        }
        Op::ScalarMul(a, s) => {
            if let Some(ga) = ensure_grad(before, *a) {
                for (g, &og) in ga.iter_mut().zip(out_grad.iter()) {
                    *g += s * og;
                }
            }
        }
        Op::Hadamard(a, b) => {
            // Clone the sibling's values before borrowing grads mutably.
            if before[*a].requires_grad {
                let bv = before[*b].data.clone();
                if let Some(ga) = ensure_grad(before, *a) {
                    for ((g, &og), &y) in ga.iter_mut().zip(out_grad.iter()).zip(bv.iter()) {
                        *g += og * y;
                    }
                }
            }
            if before[*b].requires_grad {
                let av = before[*a].data.clone();
                if let Some(gb) = ensure_grad(before, *b) {
                    for ((g, &og), &x) in gb.iter_mut().zip(out_grad.iter()).zip(av.iter()) {
                        *g += og * x;
                    }
                }
            }
        }
        Op::Matmul(a, b) => {
            let (m, k) = before[*a].shape.matrix().unwrap();
            let (_, n) = before[*b].shape.matrix().unwrap();
            if before[*a].requires_grad {
                let bv = before[*b].data.clone();
                if let Some(ga) = ensure_grad(before, *a) {
                    // dA[i][l] += sum_j dC[i][j] * B[l][j]
                    for i in 0..m {
                        let dc = &out_grad[i * n..(i + 1) * n];
                        for l in 0..k {
                            let brow = &bv[l * n..(l + 1) * n];
                            ga[i * k + l] +=
                                dc.iter().zip(brow.iter()).map(|(&x, &y)| x * y).sum::<f64>();
                        }
                    }
                }
            }
            if before[*b].requires_grad {
                let av = before[*a].data.clone();
                if let Some(gb) = ensure_grad(before, *b) {
                    // dB[l][j] += sum_i A[i][l] * dC[i][j]
                    for i in 0..m {
                        let dc = &out_grad[i * n..(i + 1) * n];
                        for l in 0..k {
                            let ail = av[i * k + l];
                            if ail != 0.0 {
                                let gbl = &mut gb[l * n..(l + 1) * n];
                                for (g, &d) in gbl.iter_mut().zip(dc.iter()) {
                                    *g += ail * d;
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::Relu(a) => {
            let xv = before[*a].data.clone();
            if let Some(ga) = ensure_grad(before, *a) {
                for ((g, &og), &x) in ga.iter_mut().zip(out_grad.iter()).zip(xv.iter()) {
                    if x > 0.0 {
                        *g += og;
                    }
                }
            }
        }
        Op::LeakyRelu(a, slope) => {
            let xv = before[*a].data.clone();
            if let Some(ga) = ensure_grad(before, *a) {
                for ((g, &og), &x) in ga.iter_mut().zip(out_grad.iter()).zip(xv.iter()) {
                    *g += if x > 0.0 { og } else { slope * og };
                }
            }
        }
        Op::RowSoftmax(a) => {
            let (rows, cols) = node.shape.matrix().unwrap();
            let y = &node.data;
            if let Some(ga) = ensure_grad(before, *a) {
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &out_grad[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
                    let out = &mut ga[r * cols..(r + 1) * cols];
                    for ((g, &yv), &gv) in out.iter_mut().zip(yr.iter()).zip(gr.iter()) {
                        *g += yv * (gv - dot);
                    }
                }
            }
        }
        Op::L1NormalizeRows(a) => {
            let (rows, cols) = node.shape.matrix().unwrap();
            let xv = before[*a].data.clone();
            if let Some(ga) = ensure_grad(before, *a) {
                for r in 0..rows {
                    let xr = &xv[r * cols..(r + 1) * cols];
                    let gr = &out_grad[r * cols..(r + 1) * cols];
                    let s: f64 = xr.iter().map(|v| v.abs()).sum::<f64>() + L1_EPS;
                    let dot: f64 = gr.iter().zip(xr.iter()).map(|(&g, &x)| g * x).sum();
                    let out = &mut ga[r * cols..(r + 1) * cols];
                    for ((g, &x), &gv) in out.iter_mut().zip(xr.iter()).zip(gr.iter()) {
                        *g += gv / s - x.signum() * dot / (s * s);
                    }
                }
            }
        }
        Op::MaxOverAxis { input, argmax } => {
            if let Some(ga) = ensure_grad(before, *input) {
                for (out_idx, &src) in argmax.iter().enumerate() {
                    ga[src] += out_grad[out_idx];
                }
            }
        }
        Op::MeanOverAxis { input, axis } => {
            let dims = before[*input].shape.dims().to_vec();
            let axis_len = dims[*axis];
            let outer: usize = dims[..*axis].iter().product();
            let inner: usize = dims[*axis + 1..].iter().product();
            if let Some(ga) = ensure_grad(before, *input) {
                let w = 1.0 / axis_len as f64;
                for o in 0..outer {
                    for i in 0..inner {
                        let og = out_grad[o * inner + i] * w;
                        for j in 0..axis_len {
                            ga[(o * axis_len + j) * inner + i] += og;
                        }
                    }
                }
            }
        }
        Op::Concat { inputs, axis } => {
            if *axis == 0 {
                let mut offset = 0;
                for &id in inputs {
                    let len = before[id].data.len();
                    if let Some(g) = ensure_grad(before, id) {
                        for (gv, &og) in g.iter_mut().zip(out_grad[offset..offset + len].iter()) {
                            *gv += og;
                        }
                    }
                    offset += len;
                }
            } else {
                let (rows, cols) = node.shape.matrix().unwrap();
                let widths: Vec<usize> = inputs
                    .iter()
                    .map(|&id| before[id].shape.matrix().unwrap().1)
                    .collect();
                let mut col_offset = 0;
                for (t, &id) in inputs.iter().enumerate() {
                    let w = widths[t];
                    if let Some(g) = ensure_grad(before, id) {
                        for r in 0..rows {
                            let src = &out_grad[r * cols + col_offset..r * cols + col_offset + w];
                            let dst = &mut g[r * w..(r + 1) * w];
                            for (gv, &og) in dst.iter_mut().zip(src.iter()) {
                                *gv += og;
                            }
                        }
                    }
                    col_offset += w;
                }
            }
        }
        Op::Transpose(a) => {
            let (rows, cols) = node.shape.matrix().unwrap();
            if let Some(ga) = ensure_grad(before, *a) {
                // node is [rows, cols] = input transposed, so input is
                // [cols, rows].
                for r in 0..rows {
                    for c in 0..cols {
                        ga[c * rows + r] += out_grad[r * cols + c];
                    }
                }
            }
        }
        Op::GatherRows { input, indices } => {
            let (_, cols) = before[*input].shape.matrix().unwrap();
            if let Some(ga) = ensure_grad(before, *input) {
                for (row, &src) in indices.iter().enumerate() {
                    let og = &out_grad[row * cols..(row + 1) * cols];
                    let dst = &mut ga[src * cols..(src + 1) * cols];
                    for (g, &v) in dst.iter_mut().zip(og.iter()) {
                        *g += v;
                    }
                }
            }
        }
        Op::CrossEntropyLogits { logits, targets } => {
            let (rows, cols) = before[*logits].shape.matrix().unwrap();
            let xv = before[*logits].data.clone();
            if let Some(ga) = ensure_grad(before, *logits) {
                let scale = out_grad[0] / rows as f64;
                for (r, &t) in targets.iter().enumerate() {
                    let row = &xv[r * cols..(r + 1) * cols];
                    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let sum: f64 = row.iter().map(|&v| (v - m).exp()).sum();
                    let out = &mut ga[r * cols..(r + 1) * cols];
                    for (c, (g, &v)) in out.iter_mut().zip(row.iter()).enumerate() {
                        let p = (v - m).exp() / sum;
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        *g += scale * (p - onehot);
                    }
                }
            }
        }
        Op::Exp(a) => {
            let y = &node.data;
            if let Some(ga) = ensure_grad(before, *a) {
                for ((g, &og), &yv) in ga.iter_mut().zip(out_grad.iter()).zip(y.iter()) {
                    *g += og * yv;
                }
            }
        }
        Op::Log(a) => {
            let xv = before[*a].data.clone();
            if let Some(ga) = ensure_grad(before, *a) {
                for ((g, &og), &x) in ga.iter_mut().zip(out_grad.iter()).zip(xv.iter()) {
                    *g += og / x;
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(ga) = ensure_grad(before, *a) {
                for (g, &og) in ga.iter_mut().zip(out_grad.iter()) {
                    *g += og;
                }
            }
        }
        Op::RelLogits { q, e } => {
            let (n, d) = before[*q].shape.matrix().unwrap();
            if before[*q].requires_grad {
                let ev = before[*e].data.clone();
                if let Some(gq) = ensure_grad(before, *q) {
                    for i in 0..n {
                        for j in 0..n {
                            let og = out_grad[i * n + j];
                            if og != 0.0 {
                                let er = &ev[(i * n + j) * d..(i * n + j + 1) * d];
                                let dst = &mut gq[i * d..(i + 1) * d];
                                for (g, &v) in dst.iter_mut().zip(er.iter()) {
                                    *g += og * v;
                                }
                            }
                        }
                    }
                }
            }
            if before[*e].requires_grad {
                let qv = before[*q].data.clone();
                if let Some(ge) = ensure_grad(before, *e) {
                    for i in 0..n {
                        let qi = &qv[i * d..(i + 1) * d];
                        for j in 0..n {
                            let og = out_grad[i * n + j];
                            if og != 0.0 {
                                let dst = &mut ge[(i * n + j) * d..(i * n + j + 1) * d];
                                for (g, &v) in dst.iter_mut().zip(qi.iter()) {
                                    *g += og * v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Row-major C += A * B with the k-loop outside the column loop; decent
/// cache behavior without external BLAS.
fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            let ail = a[i * k + l];
            if ail == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += ail * bv;
            }
        }
    }
}
