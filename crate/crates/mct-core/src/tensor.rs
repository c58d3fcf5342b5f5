//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a flat row-major buffer plus a shape. Gradient tracking is
//! opt-in: register a tensor on a [`Tape`] with [`Tape::var`] and every
//! operation whose inputs include a tracked tensor records a node. After
//! building a scalar result, [`Tape::backward`] sweeps the tape in reverse and
//! returns the gradient for every tracked tensor.
//!
//! A tape is owned by exactly one forward/backward pass. Tensors without a
//! node handle are plain immutable values and can be shared freely across
//! threads; parallelism happens across independent tapes, never inside one.

use thiserror::Error;

pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: left shape {left:?}, right shape {right:?}")]
    DimMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected a 2-d tensor, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("shape {shape:?} has {expected} elements but {got} values were provided")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: index {index} out of range for {len} elements")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("backward root must be a scalar (1 element), got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("{op}: empty input list")]
    EmptyInput { op: &'static str },
    #[error("cross entropy: no active (non-pad) positions")]
    NoActiveTargets,
    #[error("{op}: input tensor belongs to a different tape")]
    ForeignTape { op: &'static str },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Tape membership of a tracked tensor: which tape, which node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Handle {
    tape: u64,
    node: NodeId,
}

/// Dense row-major f64 tensor, optionally tracked on a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    node: Option<Handle>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            node: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            node: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
            node: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            node: None,
        }
    }

    /// Builds an m-by-n matrix from nested rows. All rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(TensorError::EmptyInput { op: "from_rows" });
        }
        let n = rows[0].len();
        for r in rows {
            if r.len() != n {
                return Err(TensorError::DimMismatch {
                    op: "from_rows",
                    left: vec![1, n],
                    right: vec![1, r.len()],
                });
            }
        }
        let mut data = Vec::with_capacity(rows.len() * n);
        for r in rows {
            data.extend_from_slice(r);
        }
        Tensor::from_vec(vec![rows.len(), n], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node.map(|h| h.node)
    }

    /// Returns (rows, cols) for a 2-d tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            _ => Err(TensorError::NotMatrix {
                op,
                shape: self.shape.clone(),
            }),
        }
    }

    /// Copies one row of a 2-d tensor into a fresh untracked 1-by-n tensor.
    pub fn row(&self, i: usize) -> Result<Tensor> {
        let (m, n) = self.dims2("row")?;
        if i >= m {
            return Err(TensorError::IndexOutOfRange {
                op: "row",
                index: i,
                len: m,
            });
        }
        Tensor::from_vec(vec![1, n], self.data[i * n..(i + 1) * n].to_vec())
    }

    /// Strips the tape handle, leaving a plain constant with the same values.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Maximum absolute difference against another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Boolean attention mask; `true` marks an allowed position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Self {
        assert_eq!(rows * cols, allowed.len(), "mask size mismatch");
        Mask {
            rows,
            cols,
            allowed,
        }
    }

    /// Lower-triangular mask: position (i, j) is allowed iff j <= i.
    pub fn causal(g: usize) -> Self {
        let mut allowed = vec![false; g * g];
        for i in 0..g {
            for j in 0..=i {
                allowed[i * g + j] = true;
            }
        }
        Mask {
            rows: g,
            cols: g,
            allowed,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }
}

/// Fault injection for validating the gradient checker itself.
///
/// `NegateReluBackward` flips the sign of the relu backward rule so that any
/// gradient check through a relu must fail. Used by the `gradcheck`
/// verification surface; never enabled in normal operation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BackwardFault {
    #[default]
    None,
    NegateReluBackward,
}

/// Saved operand: node handle (if tracked) plus the forward values needed by
/// the backward rules.
#[derive(Clone, Debug)]
struct Operand {
    id: Option<NodeId>,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul {
        a: Operand,
        b: Operand,
    },
    Add {
        a: Operand,
        b: Operand,
    },
    AddRow {
        x: Operand,
        bias: Operand,
    },
    Mul {
        a: Operand,
        b: Operand,
    },
    Scale {
        x: Operand,
        c: f64,
    },
    ScaleBy {
        x: Operand,
        s: Operand,
    },
    Relu {
        x: Operand,
    },
    Sigmoid {
        x: Operand,
        out: Vec<f64>,
    },
    Tanh {
        x: Operand,
        out: Vec<f64>,
    },
    Transpose {
        x: Operand,
    },
    ConcatCols {
        parts: Vec<Operand>,
    },
    StackRows {
        parts: Vec<Operand>,
    },
    MaskedFill {
        x: Operand,
        mask: Mask,
    },
    EmbeddingRows {
        table: Operand,
        ids: Vec<usize>,
    },
    SoftmaxRows {
        x: Operand,
        out: Vec<f64>,
    },
    LayerNorm {
        x: Operand,
        gain: Operand,
        bias: Operand,
        eps: f64,
    },
    SumAll {
        x: Operand,
    },
    Index {
        x: Operand,
        i: usize,
    },
    CrossEntropy {
        logits: Operand,
        targets: Vec<usize>,
        active: Vec<bool>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
}

static NEXT_TAPE_ID: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(1);

/// Append-only record of one forward pass. Node inputs always have smaller
/// ids than the node itself, so a single reverse sweep suffices. Each tape
/// carries a unique id; feeding a tensor tracked on one tape into another
/// is an error instead of silent gradient corruption.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    fault: BackwardFault,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Gradients keyed by node id, produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to a tracked tensor.
    /// Tensors from other tapes have no gradient here.
    pub fn wrt(&self, t: &Tensor) -> Option<&Tensor> {
        let h = t.node.filter(|h| h.tape == self.tape)?;
        self.by_node.get(h.node)?.as_ref()
    }

    pub fn by_node(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node.get(id)?.as_ref()
    }
}

fn raw_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn raw_transpose(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::with_fault(BackwardFault::None)
    }

    pub fn with_fault(fault: BackwardFault) -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, std::sync::atomic::Ordering::Relaxed),
            nodes: Vec::new(),
            fault,
        }
    }

    /// Saves `t` as an operand, insisting that tracked inputs live on this
    /// tape.
    fn operand(&self, op: &'static str, t: &Tensor) -> Result<Operand> {
        match t.node {
            Some(h) if h.tape != self.id => Err(TensorError::ForeignTape { op }),
            node => Ok(Operand {
                id: node.map(|h| h.node),
                shape: t.shape.clone(),
                data: t.data.clone(),
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tracked leaf. Gradients accumulate for leaves only through
    /// the tensor returned here.
    pub fn var(&mut self, t: &Tensor) -> Tensor {
        let id = self.push(Op::Leaf, t.shape.clone());
        Tensor {
            shape: t.shape.clone(),
            data: t.data.clone(),
            node: Some(Handle {
                tape: self.id,
                node: id,
            }),
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { op, shape });
        id
    }

    /// Records `op` only when at least one input is tracked.
    fn emit(&mut self, tracked: bool, op: Op, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        let node = if tracked {
            Some(Handle {
                tape: self.id,
                node: self.push(op, shape.clone()),
            })
        } else {
            None
        };
        Tensor { shape, data, node }
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = a.dims2("matmul")?;
        let (k2, n) = b.dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::DimMismatch {
                op: "matmul",
                left: a.shape.clone(),
                right: b.shape.clone(),
            });
        }
        let data = raw_matmul(&a.data, &b.data, m, k, n);
        let tracked = a.is_tracked() || b.is_tracked();
        let op = Op::Matmul {
            a: self.operand("matmul", a)?,
            b: self.operand("matmul", b)?,
        };
        Ok(self.emit(tracked, op, vec![m, n], data))
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape != b.shape {
            return Err(TensorError::DimMismatch {
                op: "add",
                left: a.shape.clone(),
                right: b.shape.clone(),
            });
        }
        let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
        let tracked = a.is_tracked() || b.is_tracked();
        let op = Op::Add {
            a: self.operand("add", a)?,
            b: self.operand("add", b)?,
        };
        Ok(self.emit(tracked, op, a.shape.clone(), data))
    }

    /// Adds a length-n bias vector to every row of an m-by-n matrix.
    pub fn add_row(&mut self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (m, n) = x.dims2("add_row")?;
        if bias.shape != [n] {
            return Err(TensorError::DimMismatch {
                op: "add_row",
                left: x.shape.clone(),
                right: bias.shape.clone(),
            });
        }
        let mut data = x.data.clone();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += bias.data[j];
            }
        }
        let tracked = x.is_tracked() || bias.is_tracked();
        let op = Op::AddRow {
            x: self.operand("add_row", x)?,
            bias: self.operand("add_row", bias)?,
        };
        Ok(self.emit(tracked, op, x.shape.clone(), data))
    }

    /// Elementwise product of two tensors of identical shape.
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape != b.shape {
            return Err(TensorError::DimMismatch {
                op: "mul",
                left: a.shape.clone(),
                right: b.shape.clone(),
            });
        }
        let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
        let tracked = a.is_tracked() || b.is_tracked();
        let op = Op::Mul {
            a: self.operand("mul", a)?,
            b: self.operand("mul", b)?,
        };
        Ok(self.emit(tracked, op, a.shape.clone(), data))
    }

    /// Multiplies every element by the constant `c`.
    pub fn scale(&mut self, x: &Tensor, c: f64) -> Tensor {
        let data = x.data.iter().map(|v| v * c).collect();
        let op = Op::Scale {
            x: self.operand("scale", x).expect("scale input from foreign tape"),
            c,
        };
        self.emit(x.is_tracked(), op, x.shape.clone(), data)
    }

    /// Multiplies every element by a one-element tensor (tracked scalar).
    pub fn scale_by(&mut self, x: &Tensor, s: &Tensor) -> Result<Tensor> {
        if s.numel() != 1 {
            return Err(TensorError::DimMismatch {
                op: "scale_by",
                left: x.shape.clone(),
                right: s.shape.clone(),
            });
        }
        let sv = s.data[0];
        let data = x.data.iter().map(|v| v * sv).collect();
        let tracked = x.is_tracked() || s.is_tracked();
        let op = Op::ScaleBy {
            x: self.operand("scale_by", x)?,
            s: self.operand("scale_by", s)?,
        };
        Ok(self.emit(tracked, op, x.shape.clone(), data))
    }

    pub fn relu(&mut self, x: &Tensor) -> Tensor {
        let data = x.data.iter().map(|v| v.max(0.0)).collect();
        let op = Op::Relu {
            x: self.operand("relu", x).expect("relu input from foreign tape"),
        };
        self.emit(x.is_tracked(), op, x.shape.clone(), data)
    }

    pub fn sigmoid(&mut self, x: &Tensor) -> Tensor {
        let out: Vec<f64> = x.data.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let op = Op::Sigmoid {
            x: self
                .operand("sigmoid", x)
                .expect("sigmoid input from foreign tape"),
            out: out.clone(),
        };
        self.emit(x.is_tracked(), op, x.shape.clone(), out)
    }

    pub fn tanh(&mut self, x: &Tensor) -> Tensor {
        let out: Vec<f64> = x.data.iter().map(|v| v.tanh()).collect();
        let op = Op::Tanh {
            x: self.operand("tanh", x).expect("tanh input from foreign tape"),
            out: out.clone(),
        };
        self.emit(x.is_tracked(), op, x.shape.clone(), out)
    }

    pub fn transpose(&mut self, x: &Tensor) -> Result<Tensor> {
        let (m, n) = x.dims2("transpose")?;
        let data = raw_transpose(&x.data, m, n);
        let op = Op::Transpose {
            x: self.operand("transpose", x)?,
        };
        Ok(self.emit(x.is_tracked(), op, vec![n, m], data))
    }

    /// Concatenates matrices with equal row counts along columns, preserving
    /// block layout.
    pub fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput { op: "concat_cols" });
        }
        let (m, _) = parts[0].dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pm, pn) = p.dims2("concat_cols")?;
            if pm != m {
                return Err(TensorError::DimMismatch {
                    op: "concat_cols",
                    left: parts[0].shape.clone(),
                    right: p.shape.clone(),
                });
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; m * total];
        for i in 0..m {
            let mut off = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                data[i * total + off..i * total + off + w]
                    .copy_from_slice(&p.data[i * w..(i + 1) * w]);
                off += w;
            }
        }
        let tracked = parts.iter().any(Tensor::is_tracked);
        let op = Op::ConcatCols {
            parts: parts
                .iter()
                .map(|p| self.operand("concat_cols", p))
                .collect::<Result<Vec<_>>>()?,
        };
        Ok(self.emit(tracked, op, vec![m, total], data))
    }

    /// Stacks matrices with equal widths along rows.
    pub fn stack_rows(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput { op: "stack_rows" });
        }
        let (_, n) = parts[0].dims2("stack_rows")?;
        let mut rows = 0;
        for p in parts {
            let (pm, pn) = p.dims2("stack_rows")?;
            if pn != n {
                return Err(TensorError::DimMismatch {
                    op: "stack_rows",
                    left: parts[0].shape.clone(),
                    right: p.shape.clone(),
                });
            }
            rows += pm;
        }
        let mut data = Vec::with_capacity(rows * n);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        let tracked = parts.iter().any(Tensor::is_tracked);
        let op = Op::StackRows {
            parts: parts
                .iter()
                .map(|p| self.operand("stack_rows", p))
                .collect::<Result<Vec<_>>>()?,
        };
        Ok(self.emit(tracked, op, vec![rows, n], data))
    }

    /// Replaces disallowed positions with `value`. Gradient at masked
    /// positions is zero: the fill value is a constant, not a function of
    /// the input.
    pub fn masked_fill(&mut self, x: &Tensor, mask: &Mask, value: f64) -> Result<Tensor> {
        let (m, n) = x.dims2("masked_fill")?;
        if mask.rows != m || mask.cols != n {
            return Err(TensorError::DimMismatch {
                op: "masked_fill",
                left: x.shape.clone(),
                right: vec![mask.rows, mask.cols],
            });
        }
        let data = x
            .data
            .iter()
            .zip(&mask.allowed)
            .map(|(&v, &ok)| if ok { v } else { value })
            .collect();
        let op = Op::MaskedFill {
            x: self.operand("masked_fill", x)?,
            mask: mask.clone(),
        };
        Ok(self.emit(x.is_tracked(), op, x.shape.clone(), data))
    }

    /// Row lookup: out[i] = table[ids[i]]. Backward accumulates per row id,
    /// so repeated ids sum their gradients.
    pub fn embedding_rows(&mut self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let (rows, n) = table.dims2("embedding_rows")?;
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding_rows",
                    index: id,
                    len: rows,
                });
            }
            data.extend_from_slice(&table.data[id * n..(id + 1) * n]);
        }
        let op = Op::EmbeddingRows {
            table: self.operand("embedding_rows", table)?,
            ids: ids.to_vec(),
        };
        Ok(self.emit(table.is_tracked(), op, vec![ids.len(), n], data))
    }

    /// Row-wise softmax with per-row max subtraction for stability.
    pub fn softmax_rows(&mut self, x: &Tensor) -> Result<Tensor> {
        let (m, n) = x.dims2("softmax_rows")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &x.data[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                out[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                out[i * n + j] /= sum;
            }
        }
        let op = Op::SoftmaxRows {
            x: self.operand("softmax_rows", x)?,
            out: out.clone(),
        };
        Ok(self.emit(x.is_tracked(), op, x.shape.clone(), out))
    }

    /// Per-row normalization to zero mean and unit variance (plus eps),
    /// scaled by `gain` and shifted by `bias`, both length-n vectors.
    pub fn layer_norm(
        &mut self,
        x: &Tensor,
        gain: &Tensor,
        bias: &Tensor,
        eps: f64,
    ) -> Result<Tensor> {
        let (m, n) = x.dims2("layer_norm")?;
        if gain.shape != [n] {
            return Err(TensorError::DimMismatch {
                op: "layer_norm",
                left: x.shape.clone(),
                right: gain.shape.clone(),
            });
        }
        if bias.shape != [n] {
            return Err(TensorError::DimMismatch {
                op: "layer_norm",
                left: x.shape.clone(),
                right: bias.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &x.data[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * inv_std * gain.data[j] + bias.data[j];
            }
        }
        let tracked = x.is_tracked() || gain.is_tracked() || bias.is_tracked();
        let op = Op::LayerNorm {
            x: self.operand("layer_norm", x)?,
            gain: self.operand("layer_norm", gain)?,
            bias: self.operand("layer_norm", bias)?,
            eps,
        };
        Ok(self.emit(tracked, op, x.shape.clone(), out))
    }

    /// Sum of all elements, as a shape-[1] scalar.
    pub fn sum_all(&mut self, x: &Tensor) -> Tensor {
        let s: f64 = x.data.iter().sum();
        let op = Op::SumAll {
            x: self
                .operand("sum_all", x)
                .expect("sum_all input from foreign tape"),
        };
        self.emit(x.is_tracked(), op, vec![1], vec![s])
    }

    /// Selects one element (flat index) as a shape-[1] scalar.
    pub fn index(&mut self, x: &Tensor, i: usize) -> Result<Tensor> {
        if i >= x.numel() {
            return Err(TensorError::IndexOutOfRange {
                op: "index",
                index: i,
                len: x.numel(),
            });
        }
        let value = x.data[i];
        let op = Op::Index {
            x: self.operand("index", x)?,
            i,
        };
        Ok(self.emit(x.is_tracked(), op, vec![1], vec![value]))
    }

    /// Mean over active rows of -log softmax(logits)[target]. Rows where
    /// `active` is false (padding) contribute nothing.
    pub fn cross_entropy_rows(
        &mut self,
        logits: &Tensor,
        targets: &[usize],
        active: &[bool],
    ) -> Result<Tensor> {
        let (m, n) = logits.dims2("cross_entropy_rows")?;
        if targets.len() != m || active.len() != m {
            return Err(TensorError::DimMismatch {
                op: "cross_entropy_rows",
                left: logits.shape.clone(),
                right: vec![targets.len(), active.len()],
            });
        }
        let count = active.iter().filter(|&&a| a).count();
        if count == 0 {
            return Err(TensorError::NoActiveTargets);
        }
        let mut total = 0.0;
        for i in 0..m {
            if !active[i] {
                continue;
            }
            if targets[i] >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy_rows",
                    index: targets[i],
                    len: n,
                });
            }
            let row = &logits.data[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[targets[i]];
        }
        let loss = total / count as f64;
        let op = Op::CrossEntropy {
            logits: self.operand("cross_entropy_rows", logits)?,
            targets: targets.to_vec(),
            active: active.to_vec(),
        };
        Ok(self.emit(logits.is_tracked(), op, vec![1], vec![loss]))
    }

    /// Reverse sweep from a scalar root. Returns gradients for every tracked
    /// node; leaves keep the shape they were registered with.
    pub fn backward(&self, root: &Tensor) -> Result<Gradients> {
        let handle = root.node.ok_or(TensorError::NonScalarRoot {
            shape: root.shape.clone(),
        })?;
        if handle.tape != self.id {
            return Err(TensorError::ForeignTape { op: "backward" });
        }
        let root_id = handle.node;
        if root.numel() != 1 {
            return Err(TensorError::NonScalarRoot {
                shape: root.shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root_id] = Some(vec![1.0]);

        for id in (0..=root_id).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.step_backward(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let mut by_node = Vec::with_capacity(self.nodes.len());
        for (id, g) in grads.into_iter().enumerate() {
            match g {
                Some(data) => by_node.push(Some(Tensor {
                    shape: self.nodes[id].shape.clone(),
                    data,
                    node: None,
                })),
                None => by_node.push(None),
            }
        }
        Ok(Gradients {
            tape: self.id,
            by_node,
        })
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], target: &Operand, delta: Vec<f64>) {
        let Some(id) = target.id else { return };
        match &mut grads[id] {
            Some(acc) => {
                for (a, d) in acc.iter_mut().zip(&delta) {
                    *a += d;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn step_backward(&self, id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (a.shape[0], a.shape[1]);
                let n = b.shape[1];
                if a.id.is_some() {
                    let bt = raw_transpose(&b.data, k, n);
                    let da = raw_matmul(g, &bt, m, n, k);
                    Self::accumulate(grads, a, da);
                }
                if b.id.is_some() {
                    let at = raw_transpose(&a.data, m, k);
                    let db = raw_matmul(&at, g, k, m, n);
                    Self::accumulate(grads, b, db);
                }
            }
            Op::Add { a, b } => {
                Self::accumulate(grads, a, g.to_vec());
                Self::accumulate(grads, b, g.to_vec());
            }
            Op::AddRow { x, bias } => {
                Self::accumulate(grads, x, g.to_vec());
                if bias.id.is_some() {
                    let n = bias.data.len();
                    let mut db = vec![0.0; n];
                    for (i, gv) in g.iter().enumerate() {
                        db[i % n] += gv;
                    }
                    Self::accumulate(grads, bias, db);
                }
            }
            Op::Mul { a, b } => {
                if a.id.is_some() {
                    let da = g.iter().zip(&b.data).map(|(gv, bv)| gv * bv).collect();
                    Self::accumulate(grads, a, da);
                }
                if b.id.is_some() {
                    let db = g.iter().zip(&a.data).map(|(gv, av)| gv * av).collect();
                    Self::accumulate(grads, b, db);
                }
            }
            Op::Scale { x, c } => {
                Self::accumulate(grads, x, g.iter().map(|gv| gv * c).collect());
            }
            Op::ScaleBy { x, s } => {
                let sv = s.data[0];
                if x.id.is_some() {
                    Self::accumulate(grads, x, g.iter().map(|gv| gv * sv).collect());
                }
                if s.id.is_some() {
                    let ds: f64 = g.iter().zip(&x.data).map(|(gv, xv)| gv * xv).sum();
                    Self::accumulate(grads, s, vec![ds]);
                }
            }
            Op::Relu { x } => {
                let sign = match self.fault {
                    BackwardFault::None => 1.0,
                    BackwardFault::NegateReluBackward => -1.0,
                };
                let dx = g
                    .iter()
                    .zip(&x.data)
                    .map(|(gv, &xv)| if xv > 0.0 { sign * gv } else { 0.0 })
                    .collect();
                Self::accumulate(grads, x, dx);
            }
            Op::Sigmoid { x, out } => {
                let dx = g
                    .iter()
                    .zip(out)
                    .map(|(gv, &s)| gv * s * (1.0 - s))
                    .collect();
                Self::accumulate(grads, x, dx);
            }
            Op::Tanh { x, out } => {
                let dx = g
                    .iter()
                    .zip(out)
                    .map(|(gv, &t)| gv * (1.0 - t * t))
                    .collect();
                Self::accumulate(grads, x, dx);
            }
            Op::Transpose { x } => {
                let (m, n) = (x.shape[0], x.shape[1]);
                // g has shape [n, m]; transpose it back.
                Self::accumulate(grads, x, raw_transpose(g, n, m));
            }
            Op::ConcatCols { parts } => {
                let m = parts[0].shape[0];
                let total: usize = parts.iter().map(|p| p.shape[1]).sum();
                let mut off = 0;
                for p in parts {
                    let w = p.shape[1];
                    if p.id.is_some() {
                        let mut dp = vec![0.0; m * w];
                        for i in 0..m {
                            dp[i * w..(i + 1) * w]
                                .copy_from_slice(&g[i * total + off..i * total + off + w]);
                        }
                        Self::accumulate(grads, p, dp);
                    }
                    off += w;
                }
            }
            Op::StackRows { parts } => {
                let mut off = 0;
                for p in parts {
                    let len = p.data.len();
                    if p.id.is_some() {
                        Self::accumulate(grads, p, g[off..off + len].to_vec());
                    }
                    off += len;
                }
            }
            Op::MaskedFill { x, mask } => {
                let dx = g
                    .iter()
                    .zip(&mask.allowed)
                    .map(|(gv, &ok)| if ok { *gv } else { 0.0 })
                    .collect();
                Self::accumulate(grads, x, dx);
            }
            Op::EmbeddingRows { table, ids } => {
                if table.id.is_some() {
                    let n = table.shape[1];
                    let mut dt = vec![0.0; table.data.len()];
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..n {
                            dt[id * n + j] += g[row * n + j];
                        }
                    }
                    Self::accumulate(grads, table, dt);
                }
            }
            Op::SoftmaxRows { x, out } => {
                let (m, n) = (x.shape[0], x.shape[1]);
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let s = &out[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let dot: f64 = s.iter().zip(gr).map(|(sv, gv)| sv * gv).sum();
                    for j in 0..n {
                        dx[i * n + j] = s[j] * (gr[j] - dot);
                    }
                }
                Self::accumulate(grads, x, dx);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (m, n) = (x.shape[0], x.shape[1]);
                let nf = n as f64;
                let mut dx = vec![0.0; m * n];
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                for i in 0..m {
                    let row = &x.data[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let mean = row.iter().sum::<f64>() / nf;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                    let dxhat: Vec<f64> = gr
                        .iter()
                        .zip(&gain.data)
                        .map(|(gv, gn)| gv * gn)
                        .collect();
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                        dx[i * n + j] = inv_std / nf
                            * (nf * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                Self::accumulate(grads, x, dx);
                Self::accumulate(grads, gain, dgain);
                Self::accumulate(grads, bias, dbias);
            }
            Op::SumAll { x } => {
                Self::accumulate(grads, x, vec![g[0]; x.data.len()]);
            }
            Op::Index { x, i } => {
                if x.id.is_some() {
                    let mut dx = vec![0.0; x.data.len()];
                    dx[*i] = g[0];
                    Self::accumulate(grads, x, dx);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                active,
            } => {
                if logits.id.is_some() {
                    let (m, n) = (logits.shape[0], logits.shape[1]);
                    let count = active.iter().filter(|&&a| a).count() as f64;
                    let mut dl = vec![0.0; m * n];
                    for i in 0..m {
                        if !active[i] {
                            continue;
                        }
                        let row = &logits.data[i * n..(i + 1) * n];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                        let sum: f64 = exps.iter().sum();
                        for j in 0..n {
                            let p = exps[j] / sum;
                            let t = if j == targets[i] { 1.0 } else { 0.0 };
                            dl[i * n + j] = g[0] * (p - t) / count;
                        }
                    }
                    Self::accumulate(grads, logits, dl);
                }
            }
        }
    }
}

/// Central-difference gradient check for a scalar-valued function of one
/// tensor. Returns the maximum over coordinates of
/// |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &Tensor) -> Result<Tensor>,
{
    grad_check_with(f, x, eps, BackwardFault::None)
}

/// As [`grad_check`] but with a backward fault injected into the analytic
/// pass, for verifying that the checker catches broken gradients.
pub fn grad_check_with<F>(f: F, x: &Tensor, eps: f64, fault: BackwardFault) -> Result<f64>
where
    F: Fn(&mut Tape, &Tensor) -> Result<Tensor>,
{
    let mut tape = Tape::with_fault(fault);
    let v = tape.var(x);
    let y = f(&mut tape, &v)?;
    if y.numel() != 1 {
        return Err(TensorError::NonScalarRoot {
            shape: y.shape().to_vec(),
        });
    }
    let grads = tape.backward(&y)?;
    let analytic = grads
        .wrt(&v)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut max_rel = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.detach();
        plus.data[i] += eps;
        let mut minus = x.detach();
        minus.data[i] -= eps;

        let mut tp = Tape::new();
        let yp = f(&mut tp, &plus)?;
        let mut tm = Tape::new();
        let ym = f(&mut tm, &minus)?;
        let numeric = (yp.data()[0] - ym.data()[0]) / (2.0 * eps);

        let rel = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

/// Gradient check over several inputs at once; returns the worst coordinate
/// over all of them. The function receives the inputs in the given order.
pub fn grad_check_multi<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor>,
{
    grad_check_multi_with(f, inputs, eps, BackwardFault::None)
}

pub fn grad_check_multi_with<F>(
    f: F,
    inputs: &[Tensor],
    eps: f64,
    fault: BackwardFault,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor>,
{
    let mut worst: f64 = 0.0;
    for k in 0..inputs.len() {
        let err = grad_check_with(
            |tape, xk| {
                let mut args: Vec<Tensor> = Vec::with_capacity(inputs.len());
                for (j, t) in inputs.iter().enumerate() {
                    if j == k {
                        args.push(xk.clone());
                    } else {
                        args.push(t.detach());
                    }
                }
                f(tape, &args)
            },
            &inputs[k],
            eps,
            fault,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}
