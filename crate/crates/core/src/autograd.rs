//! Dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Values are 64-bit floats in row-major order. A [`Tape`] records every
//! operation of a forward pass; [`Tape::backward`] replays the record in
//! reverse to populate gradients. One tape is one computation graph and is
//! confined to a single thread; plain [`Array`] values carry no graph and
//! can be shared freely.
//!
//! Shapes are one- or two-dimensional. Scalars are `[1]`, row vectors are
//! `[1, n]`. There is no broadcasting beyond the explicit row-broadcast op;
//! everything else requires exact shapes, which keeps the engine auditable.

use crate::error::{Error, Result};

// ── Plain values ─────────────────────────────────────────────────────

/// A dense array with no gradient bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "Array::new",
                expected: format!("{numel} elements for shape {shape:?}"),
                got: format!("{}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// A named model parameter. `trainable == false` means optimizer steps must
/// leave the value bit-identical; gradients still flow through it.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Array,
    pub trainable: bool,
}

// ── Tape ─────────────────────────────────────────────────────────────

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul {
        a: TensorId,
        b: TensorId,
    },
    Transpose {
        x: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    /// `[t, n] + [1, n]`, the only broadcast form.
    AddRow {
        x: TensorId,
        row: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Scale {
        x: TensorId,
        c: f64,
    },
    Relu {
        x: TensorId,
    },
    Gelu {
        x: TensorId,
    },
    SoftmaxRows {
        x: TensorId,
    },
    LogSoftmaxRows {
        x: TensorId,
    },
    LayerNormRows {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        /// Cached per-element normalized values and per-row 1/std.
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows {
        table: TensorId,
        indices: Vec<usize>,
    },
    SliceCols {
        x: TensorId,
        start: usize,
        end: usize,
    },
    ConcatCols {
        xs: Vec<TensorId>,
    },
    MeanRows {
        x: TensorId,
    },
    SumAll {
        x: TensorId,
    },
    Get {
        x: TensorId,
        index: usize,
    },
    LogAddExp {
        a: TensorId,
        b: TensorId,
    },
    CrossEntropyRows {
        logits: TensorId,
        targets: Vec<usize>,
        weights: Vec<f64>,
        softmax: Vec<f64>,
    },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op,
}

/// Records a forward pass and computes reverse-mode gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => unreachable!("tape tensors are 1-D or 2-D"),
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn gelu_tanh(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_tanh_grad(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// `ln(e^a + e^b)` with guards for infinitely unlikely branches.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            data,
            shape,
            requires_grad,
            op,
        });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    fn needs_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient buffer, populated by [`Tape::backward`]. `None` for tensors
    /// that do not require grad or were not reached.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// Value of a scalar (shape `[1]`) tensor.
    pub fn scalar(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1, "scalar() on non-scalar");
        self.nodes[id.0].data[0]
    }

    pub fn clear_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    // ── Graph construction ───────────────────────────────────────────

    pub fn leaf(&mut self, value: &Array, requires_grad: bool) -> TensorId {
        self.push(
            value.data.clone(),
            value.shape.clone(),
            requires_grad,
            Op::Leaf,
        )
    }

    pub fn constant(&mut self, value: &Array) -> TensorId {
        self.leaf(value, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> TensorId {
        self.push(vec![v], vec![1], false, Op::Leaf)
    }

    /// `a[m,k] × b[k,n] → [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let [m, ka] = *self.shape(a) else {
            return Err(Error::Shape {
                op: "matmul",
                expected: "2-D lhs".into(),
                got: format!("{:?}", self.shape(a)),
            });
        };
        let [kb, n] = *self.shape(b) else {
            return Err(Error::Shape {
                op: "matmul",
                expected: "2-D rhs".into(),
                got: format!("{:?}", self.shape(b)),
            });
        };
        if ka != kb {
            return Err(Error::Shape {
                op: "matmul",
                expected: format!("inner dims to agree, lhs [{m}, {ka}]"),
                got: format!("rhs [{kb}, {n}]"),
            });
        }
        let data = matmul_raw(self.value(a), self.value(b), m, ka, n);
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(data, vec![m, n], rg, Op::MatMul { a, b }))
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let [r, c] = *self.shape(x) else {
            return Err(Error::Shape {
                op: "transpose",
                expected: "2-D input".into(),
                got: format!("{:?}", self.shape(x)),
            });
        };
        let src = self.value(x);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(data, vec![c, r], rg, Op::Transpose { x }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: "add",
                expected: format!("{:?}", self.shape(a)),
                got: format!("{:?}", self.shape(b)),
            });
        }
        let data: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(data, shape, rg, Op::Add { a, b }))
    }

    /// `x[t, n] + row[1, n]`, row repeated over every row of `x`.
    pub fn add_row(&mut self, x: TensorId, row: TensorId) -> Result<TensorId> {
        let (t, n) = rows_cols(self.shape(x));
        let (rr, rn) = rows_cols(self.shape(row));
        if rr != 1 || rn != n {
            return Err(Error::Shape {
                op: "add_row",
                expected: format!("[1, {n}]"),
                got: format!("{:?}", self.shape(row)),
            });
        }
        let rowv = self.value(row).to_vec();
        let mut data = self.value(x).to_vec();
        for i in 0..t {
            for j in 0..n {
                data[i * n + j] += rowv[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.needs_grad(&[x, row]);
        Ok(self.push(data, shape, rg, Op::AddRow { x, row }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: "mul",
                expected: format!("{:?}", self.shape(a)),
                got: format!("{:?}", self.shape(b)),
            });
        }
        let data: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(data, shape, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.value(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs_grad(&[x]);
        self.push(data, shape, rg, Op::Scale { x, c })
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.value(x).iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs_grad(&[x]);
        self.push(data, shape, rg, Op::Relu { x })
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.value(x).iter().map(|&v| gelu_tanh(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs_grad(&[x]);
        self.push(data, shape, rg, Op::Gelu { x })
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: TensorId) -> TensorId {
        let (t, n) = rows_cols(self.shape(x));
        let src = self.value(x);
        let mut data = vec![0.0; t * n];
        for i in 0..t {
            let row = &src[i * n..(i + 1) * n];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - m).exp();
                data[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                data[i * n + j] /= sum;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.needs_grad(&[x]);
        self.push(data, shape, rg, Op::SoftmaxRows { x })
    }

    pub fn log_softmax_rows(&mut self, x: TensorId) -> TensorId {
        let (t, n) = rows_cols(self.shape(x));
        let src = self.value(x);
        let mut data = vec![0.0; t * n];
        for i in 0..t {
            let row = &src[i * n..(i + 1) * n];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for j in 0..n {
                data[i * n + j] = row[j] - lse;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.needs_grad(&[x]);
        self.push(data, shape, rg, Op::LogSoftmaxRows { x })
    }

    /// Per-row zero mean / unit variance (population variance, `eps` inside
    /// the square root) followed by the affine `gain ⊙ y + bias`.
    pub fn layer_norm_rows(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let (t, n) = rows_cols(self.shape(x));
        for (name, id) in [("gain", gain), ("bias", bias)] {
            let (r, c) = rows_cols(self.shape(id));
            if r != 1 || c != n {
                return Err(Error::Shape {
                    op: "layer_norm",
                    expected: format!("{name} of shape [1, {n}]"),
                    got: format!("{:?}", self.shape(id)),
                });
            }
        }
        let src = self.value(x);
        let mut normalized = vec![0.0; t * n];
        let mut inv_std = vec![0.0; t];
        for i in 0..t {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..n {
                normalized[i * n + j] = (row[j] - mean) * inv;
            }
        }
        let g = self.value(gain).to_vec();
        let b = self.value(bias).to_vec();
        let mut data = vec![0.0; t * n];
        for i in 0..t {
            for j in 0..n {
                data[i * n + j] = g[j] * normalized[i * n + j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.needs_grad(&[x, gain, bias]);
        Ok(self.push(
            data,
            shape,
            rg,
            Op::LayerNormRows {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
        ))
    }

    /// Row lookup: `table[v, d]` gathered at `indices` → `[len, d]`.
    pub fn gather_rows(&mut self, table: TensorId, indices: &[usize]) -> Result<TensorId> {
        let [v, d] = *self.shape(table) else {
            return Err(Error::Shape {
                op: "gather_rows",
                expected: "2-D table".into(),
                got: format!("{:?}", self.shape(table)),
            });
        };
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::Input(format!(
                "gather_rows: index {bad} out of range for table with {v} rows"
            )));
        }
        let src = self.value(table);
        let mut data = vec![0.0; indices.len() * d];
        for (i, &ix) in indices.iter().enumerate() {
            data[i * d..(i + 1) * d].copy_from_slice(&src[ix * d..(ix + 1) * d]);
        }
        let rg = self.needs_grad(&[table]);
        Ok(self.push(
            data,
            vec![indices.len(), d],
            rg,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, end: usize) -> Result<TensorId> {
        let (t, n) = rows_cols(self.shape(x));
        if start >= end || end > n {
            return Err(Error::Input(format!(
                "slice_cols: range {start}..{end} invalid for {n} columns"
            )));
        }
        let w = end - start;
        let src = self.value(x);
        let mut data = vec![0.0; t * w];
        for i in 0..t {
            data[i * w..(i + 1) * w].copy_from_slice(&src[i * n + start..i * n + end]);
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(data, vec![t, w], rg, Op::SliceCols { x, start, end }))
    }

    pub fn concat_cols(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(Error::Input("concat_cols: empty input list".into()));
        }
        let (t, _) = rows_cols(self.shape(xs[0]));
        let widths: Vec<usize> = xs
            .iter()
            .map(|&id| {
                let (r, c) = rows_cols(self.shape(id));
                if r != t {
                    return Err(Error::Shape {
                        op: "concat_cols",
                        expected: format!("{t} rows"),
                        got: format!("{r} rows"),
                    });
                }
                Ok(c)
            })
            .collect::<Result<_>>()?;
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; t * total];
        let mut off = 0;
        for (&id, &w) in xs.iter().zip(&widths) {
            let src = self.value(id).to_vec();
            for i in 0..t {
                data[i * total + off..i * total + off + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let rg = self.needs_grad(xs);
        Ok(self.push(data, vec![t, total], rg, Op::ConcatCols { xs: xs.to_vec() }))
    }

    /// `[t, n] → [1, n]` mean over rows.
    pub fn mean_rows(&mut self, x: TensorId) -> TensorId {
        let (t, n) = rows_cols(self.shape(x));
        let src = self.value(x);
        let mut data = vec![0.0; n];
        for i in 0..t {
            for j in 0..n {
                data[j] += src[i * n + j];
            }
        }
        for v in &mut data {
            *v /= t as f64;
        }
        let rg = self.needs_grad(&[x]);
        self.push(data, vec![1, n], rg, Op::MeanRows { x })
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.value(x).iter().sum();
        let rg = self.needs_grad(&[x]);
        self.push(vec![s], vec![1], rg, Op::SumAll { x })
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.value(x).len();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Extract one element (by flat index) as a scalar tensor.
    pub fn get(&mut self, x: TensorId, index: usize) -> Result<TensorId> {
        let src = self.value(x);
        if index >= src.len() {
            return Err(Error::Input(format!(
                "get: flat index {index} out of range for {} elements",
                src.len()
            )));
        }
        let v = src[index];
        let rg = self.needs_grad(&[x]);
        Ok(self.push(vec![v], vec![1], rg, Op::Get { x, index }))
    }

    /// Scalar `ln(e^a + e^b)`.
    pub fn logaddexp(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let v = log_add_exp(self.scalar(a), self.scalar(b));
        let rg = self.needs_grad(&[a, b]);
        self.push(vec![v], vec![1], rg, Op::LogAddExp { a, b })
    }

    /// Weighted token-level negative log-likelihood:
    /// `Σᵢ wᵢ·(−log softmax(logits[i])[targets[i]]) / Σᵢ wᵢ`.
    /// A weight of zero excludes the row entirely.
    pub fn cross_entropy_rows(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<TensorId> {
        let (t, v) = rows_cols(self.shape(logits));
        if targets.len() != t || weights.len() != t {
            return Err(Error::Shape {
                op: "cross_entropy_rows",
                expected: format!("{t} targets and weights"),
                got: format!("{} targets, {} weights", targets.len(), weights.len()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&ix| ix >= v) {
            return Err(Error::Input(format!(
                "cross_entropy_rows: target {bad} out of range for {v} classes"
            )));
        }
        if weights.iter().any(|&w| w < 0.0) {
            return Err(Error::Input(
                "cross_entropy_rows: negative weight".into(),
            ));
        }
        let wsum: f64 = weights.iter().sum();
        if wsum <= 0.0 {
            return Err(Error::DegenerateBatch);
        }
        let src = self.value(logits);
        let mut softmax = vec![0.0; t * v];
        let mut loss = 0.0;
        for i in 0..t {
            let row = &src[i * v..(i + 1) * v];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..v {
                let e = (row[j] - m).exp();
                softmax[i * v + j] = e;
                sum += e;
            }
            for j in 0..v {
                softmax[i * v + j] /= sum;
            }
            let lse = m + sum.ln();
            loss += weights[i] * (lse - row[targets[i]]);
        }
        loss /= wsum;
        let rg = self.needs_grad(&[logits]);
        Ok(self.push(
            vec![loss],
            vec![1],
            rg,
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                softmax,
            },
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse-mode gradients from a scalar loss. Grads accumulate across
    /// repeated calls until [`Tape::clear_grads`].
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut scratch: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        scratch[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = scratch[i].take() else { continue };
            self.propagate(i, &g, &mut scratch);
            // Keep the node's own gradient (accumulating across calls).
            match &mut self.grads[i] {
                Some(acc) => {
                    for (a, v) in acc.iter_mut().zip(&g) {
                        *a += v;
                    }
                }
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn accumulate(scratch: &mut [Option<Vec<f64>>], id: TensorId, delta: &[f64]) {
        match &mut scratch[id.0] {
            Some(acc) => {
                for (a, v) in acc.iter_mut().zip(delta) {
                    *a += v;
                }
            }
            slot => *slot = Some(delta.to_vec()),
        }
    }

    fn accum_if_needed(&self, scratch: &mut [Option<Vec<f64>>], id: TensorId, delta: &[f64]) {
        if self.nodes[id.0].requires_grad {
            Self::accumulate(scratch, id, delta);
        }
    }

    fn propagate(&self, i: usize, g: &[f64], scratch: &mut [Option<Vec<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = rows_cols(&self.nodes[a.0].shape);
                let n = self.nodes[b.0].shape[1];
                if self.nodes[a.0].requires_grad {
                    // dA = G · Bᵀ
                    let bdat = &self.nodes[b.0].data;
                    let mut bt = vec![0.0; n * k];
                    for p in 0..k {
                        for j in 0..n {
                            bt[j * k + p] = bdat[p * n + j];
                        }
                    }
                    let da = matmul_raw(g, &bt, m, n, k);
                    Self::accumulate(scratch, *a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    // dB = Aᵀ · G
                    let adat = &self.nodes[a.0].data;
                    let mut at = vec![0.0; k * m];
                    for ii in 0..m {
                        for p in 0..k {
                            at[p * m + ii] = adat[ii * k + p];
                        }
                    }
                    let db = matmul_raw(&at, g, k, m, n);
                    Self::accumulate(scratch, *b, &db);
                }
            }
            Op::Transpose { x } => {
                let (r, c) = rows_cols(&self.nodes[x.0].shape);
                // g has shape [c, r]
                let mut dx = vec![0.0; r * c];
                for i2 in 0..c {
                    for j in 0..r {
                        dx[j * c + i2] = g[i2 * r + j];
                    }
                }
                self.accum_if_needed(scratch, *x, &dx);
            }
            Op::Add { a, b } => {
                self.accum_if_needed(scratch, *a, g);
                self.accum_if_needed(scratch, *b, g);
            }
            Op::AddRow { x, row } => {
                self.accum_if_needed(scratch, *x, g);
                if self.nodes[row.0].requires_grad {
                    let (t, n) = rows_cols(&self.nodes[x.0].shape);
                    let mut dr = vec![0.0; n];
                    for i2 in 0..t {
                        for j in 0..n {
                            dr[j] += g[i2 * n + j];
                        }
                    }
                    Self::accumulate(scratch, *row, &dr);
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[a.0].requires_grad {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .map(|(gv, bv)| gv * bv)
                        .collect();
                    Self::accumulate(scratch, *a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let db: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(gv, av)| gv * av)
                        .collect();
                    Self::accumulate(scratch, *b, &db);
                }
            }
            Op::Scale { x, c } => {
                let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.accum_if_needed(scratch, *x, &dx);
            }
            Op::Relu { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[x.0].data)
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accum_if_needed(scratch, *x, &dx);
            }
            Op::Gelu { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[x.0].data)
                    .map(|(gv, &xv)| gv * gelu_tanh_grad(xv))
                    .collect();
                self.accum_if_needed(scratch, *x, &dx);
            }
            Op::SoftmaxRows { x } => {
                let (t, n) = rows_cols(&self.nodes[i].shape);
                let y = &self.nodes[i].data;
                let mut dx = vec![0.0; t * n];
                for r in 0..t {
                    let dot: f64 = (0..n).map(|j| g[r * n + j] * y[r * n + j]).sum();
                    for j in 0..n {
                        dx[r * n + j] = y[r * n + j] * (g[r * n + j] - dot);
                    }
                }
                self.accum_if_needed(scratch, *x, &dx);
            }
            Op::LogSoftmaxRows { x } => {
                let (t, n) = rows_cols(&self.nodes[i].shape);
                let out = &self.nodes[i].data;
                let mut dx = vec![0.0; t * n];
                for r in 0..t {
                    let gsum: f64 = (0..n).map(|j| g[r * n + j]).sum();
                    for j in 0..n {
                        dx[r * n + j] = g[r * n + j] - out[r * n + j].exp() * gsum;
                    }
                }
                self.accum_if_needed(scratch, *x, &dx);
            }
            Op::LayerNormRows {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let (t, n) = rows_cols(&self.nodes[x.0].shape);
                let gval = &self.nodes[gain.0].data;
                if self.nodes[gain.0].requires_grad {
                    let mut dg = vec![0.0; n];
                    for r in 0..t {
                        for j in 0..n {
                            dg[j] += g[r * n + j] * normalized[r * n + j];
                        }
                    }
                    Self::accumulate(scratch, *gain, &dg);
                }
                if self.nodes[bias.0].requires_grad {
                    let mut db = vec![0.0; n];
                    for r in 0..t {
                        for j in 0..n {
                            db[j] += g[r * n + j];
                        }
                    }
                    Self::accumulate(scratch, *bias, &db);
                }
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; t * n];
                    for r in 0..t {
                        let mut dy_mean = 0.0;
                        let mut dyy_mean = 0.0;
                        for j in 0..n {
                            let dy = g[r * n + j] * gval[j];
                            dy_mean += dy;
                            dyy_mean += dy * normalized[r * n + j];
                        }
                        dy_mean /= n as f64;
                        dyy_mean /= n as f64;
                        for j in 0..n {
                            let dy = g[r * n + j] * gval[j];
                            dx[r * n + j] =
                                inv_std[r] * (dy - dy_mean - normalized[r * n + j] * dyy_mean);
                        }
                    }
                    Self::accumulate(scratch, *x, &dx);
                }
            }
            Op::GatherRows { table, indices } => {
                if self.nodes[table.0].requires_grad {
                    let d = self.nodes[table.0].shape[1];
                    let mut dt = vec![0.0; self.nodes[table.0].data.len()];
                    for (r, &ix) in indices.iter().enumerate() {
                        for j in 0..d {
                            dt[ix * d + j] += g[r * d + j];
                        }
                    }
                    Self::accumulate(scratch, *table, &dt);
                }
            }
            Op::SliceCols { x, start, end } => {
                if self.nodes[x.0].requires_grad {
                    let (t, n) = rows_cols(&self.nodes[x.0].shape);
                    let w = end - start;
                    let mut dx = vec![0.0; t * n];
                    for r in 0..t {
                        dx[r * n + start..r * n + end].copy_from_slice(&g[r * w..(r + 1) * w]);
                    }
                    Self::accumulate(scratch, *x, &dx);
                }
            }
            Op::ConcatCols { xs } => {
                let (t, total) = rows_cols(&self.nodes[i].shape);
                let mut off = 0;
                for &id in xs {
                    let (_, w) = rows_cols(&self.nodes[id.0].shape);
                    if self.nodes[id.0].requires_grad {
                        let mut dx = vec![0.0; t * w];
                        for r in 0..t {
                            dx[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        Self::accumulate(scratch, id, &dx);
                    }
                    off += w;
                }
            }
            Op::MeanRows { x } => {
                if self.nodes[x.0].requires_grad {
                    let (t, n) = rows_cols(&self.nodes[x.0].shape);
                    let mut dx = vec![0.0; t * n];
                    for r in 0..t {
                        for j in 0..n {
                            dx[r * n + j] = g[j] / t as f64;
                        }
                    }
                    Self::accumulate(scratch, *x, &dx);
                }
            }
            Op::SumAll { x } => {
                if self.nodes[x.0].requires_grad {
                    let dx = vec![g[0]; self.nodes[x.0].data.len()];
                    Self::accumulate(scratch, *x, &dx);
                }
            }
            Op::Get { x, index } => {
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; self.nodes[x.0].data.len()];
                    dx[*index] = g[0];
                    Self::accumulate(scratch, *x, &dx);
                }
            }
            Op::LogAddExp { a, b } => {
                let out = self.nodes[i].data[0];
                let av = self.nodes[a.0].data[0];
                let bv = self.nodes[b.0].data[0];
                if self.nodes[a.0].requires_grad {
                    Self::accumulate(scratch, *a, &[g[0] * (av - out).exp()]);
                }
                if self.nodes[b.0].requires_grad {
                    Self::accumulate(scratch, *b, &[g[0] * (bv - out).exp()]);
                }
            }
            Op::CrossEntropyRows {
                logits,
                targets,
                weights,
                softmax,
            } => {
                if self.nodes[logits.0].requires_grad {
                    let (t, v) = rows_cols(&self.nodes[logits.0].shape);
                    let wsum: f64 = weights.iter().sum();
                    let mut dx = vec![0.0; t * v];
                    for r in 0..t {
                        let w = weights[r] / wsum;
                        if w == 0.0 {
                            continue;
                        }
                        for j in 0..v {
                            let indicator = if j == targets[r] { 1.0 } else { 0.0 };
                            dx[r * v + j] = g[0] * w * (softmax[r * v + j] - indicator);
                        }
                    }
                    Self::accumulate(scratch, *logits, &dx);
                }
            }
        }
    }
}

// ── Gradient checking ────────────────────────────────────────────────

pub mod gradcheck {
    /// Central finite differences of `eval` at `values`.
    pub fn finite_difference<F>(values: &[f64], eps: f64, mut eval: F) -> Vec<f64>
    where
        F: FnMut(&[f64]) -> f64,
    {
        let mut grad = vec![0.0; values.len()];
        let mut work = values.to_vec();
        for i in 0..values.len() {
            let orig = work[i];
            work[i] = orig + eps;
            let plus = eval(&work);
            work[i] = orig - eps;
            let minus = eval(&work);
            work[i] = orig;
            grad[i] = (plus - minus) / (2.0 * eps);
        }
        grad
    }

    /// Max over components of |a − n| / max(|a|, |n|, floor).
    pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
        assert_eq!(analytic.len(), numeric.len());
        analytic
            .iter()
            .zip(numeric)
            .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{finite_difference, max_rel_err};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const FD_EPS: f64 = 1e-5;
    const FD_FLOOR: f64 = 1e-3;
    const FD_TOL: f64 = 1e-4;

    fn arr(shape: &[usize], data: &[f64]) -> Array {
        Array::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
        Array::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.leaf(&arr(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), false);
        let b = tape.leaf(&arr(&[2, 2], &[2.0, 3.0, 4.0, 5.0]), false);
        let c = tape.matmul(i2, b).unwrap();
        assert_eq!(tape.value(c), &[2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn matmul_hand_dot() {
        let mut tape = Tape::new();
        let a = tape.leaf(&arr(&[1, 2], &[1.0, 2.0]), false);
        let b = tape.leaf(&arr(&[2, 1], &[3.0, 4.0]), false);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut tape = Tape::new();
        let a = tape.leaf(&arr(&[2, 3], &[0.0; 6]), false);
        let b = tape.leaf(&arr(&[2, 2], &[0.0; 4]), false);
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_grad_of_sum_is_ones_times_bt() {
        // loss = sum(a × b): d(loss)/da = ones(m,n) × bᵀ
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let av = rand_array(&mut rng, &[3, 4]);
        let bv = rand_array(&mut rng, &[4, 2]);

        let mut tape = Tape::new();
        let a = tape.leaf(&av, true);
        let b = tape.leaf(&bv, false);
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum_all(c);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(a).unwrap().to_vec();

        let numeric = finite_difference(av.data(), 1e-6, |vals| {
            let mut t = Tape::new();
            let a2 = t.leaf(&arr(&[3, 4], vals), false);
            let b2 = t.leaf(&bv, false);
            let c2 = t.matmul(a2, b2).unwrap();
            let l = t.sum_all(c2);
            t.scalar(l)
        });
        assert!(max_rel_err(&analytic, &numeric, FD_FLOOR) < 1e-6);

        // closed form: ones × bᵀ replicates column sums of bᵀ
        for i in 0..3 {
            for k in 0..4 {
                let expect: f64 = (0..2).map(|j| bv.data()[k * 2 + j]).sum();
                assert!((analytic[i * 4 + k] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut tape = Tape::new();
        let x = tape.leaf(&arr(&[1, 2], &[0.0, 0.0]), false);
        let y = tape.softmax_rows(x);
        assert_eq!(tape.value(y), &[0.5, 0.5]);

        let x2 = tape.leaf(&arr(&[1, 2], &[1000.0, 0.0]), false);
        let y2 = tape.softmax_rows(x2);
        assert!((tape.value(y2)[0] - 1.0).abs() < 1e-12);
        assert!(tape.value(y2)[1].abs() < 1e-12);
        assert!(tape.value(y2).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_matches_extended_precision() {
        let mut tape = Tape::new();
        let x = tape.leaf(&arr(&[1, 3], &[1.0, 2.0, 3.0]), false);
        let y = tape.softmax_rows(x);
        // exp-normalize evaluated at 50-digit precision
        let expect = [
            0.090030573170380458,
            0.24472847105479765,
            0.66524095577482189,
        ];
        for (got, want) in tape.value(y).iter().zip(expect) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let x = rand_array(&mut rng, &[4, 7]);
            let mut tape = Tape::new();
            let id = tape.leaf(&x, false);
            let y = tape.softmax_rows(id);
            let v = tape.value(y);
            for r in 0..4 {
                let s: f64 = v[r * 7..(r + 1) * 7].iter().sum();
                assert!((s - 1.0).abs() <= 1e-12);
                assert!(v[r * 7..(r + 1) * 7].iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&arr(&[1, 4], &[3.0; 4]), false);
        let g = tape.leaf(&arr(&[1, 4], &[1.0; 4]), false);
        let b = tape.leaf(&arr(&[1, 4], &[0.0; 4]), false);
        let y = tape.layer_norm_rows(x, g, b, 1e-5).unwrap();
        for v in tape.value(y) {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_two_point() {
        let mut tape = Tape::new();
        let x = tape.leaf(&arr(&[1, 2], &[1.0, 3.0]), false);
        let g = tape.leaf(&arr(&[1, 2], &[1.0; 2]), false);
        let b = tape.leaf(&arr(&[1, 2], &[0.0; 2]), false);
        let y = tape.layer_norm_rows(x, g, b, 1e-12).unwrap();
        assert!((tape.value(y)[0] + 1.0).abs() < 1e-6);
        assert!((tape.value(y)[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xv = rand_array(&mut rng, &[2, 5]);
        let gv = rand_array(&mut rng, &[1, 5]);
        let bv = rand_array(&mut rng, &[1, 5]);

        let eval = |x: &[f64], g: &[f64], b: &[f64]| {
            let mut t = Tape::new();
            let xi = t.leaf(&arr(&[2, 5], x), false);
            let gi = t.leaf(&arr(&[1, 5], g), false);
            let bi = t.leaf(&arr(&[1, 5], b), false);
            let y = t.layer_norm_rows(xi, gi, bi, 1e-5).unwrap();
            let sq = t.mul(y, y).unwrap();
            let l = t.sum_all(sq);
            t.scalar(l)
        };

        let mut tape = Tape::new();
        let xi = tape.leaf(&xv, true);
        let gi = tape.leaf(&gv, true);
        let bi = tape.leaf(&bv, true);
        let y = tape.layer_norm_rows(xi, gi, bi, 1e-5).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let l = tape.sum_all(sq);
        tape.backward(l).unwrap();

        let fx = finite_difference(xv.data(), FD_EPS, |v| eval(v, gv.data(), bv.data()));
        let fg = finite_difference(gv.data(), FD_EPS, |v| eval(xv.data(), v, bv.data()));
        let fb = finite_difference(bv.data(), FD_EPS, |v| eval(xv.data(), gv.data(), v));
        assert!(max_rel_err(tape.grad(xi).unwrap(), &fx, FD_FLOOR) < 1e-5);
        assert!(max_rel_err(tape.grad(gi).unwrap(), &fg, FD_FLOOR) < 1e-5);
        assert!(max_rel_err(tape.grad(bi).unwrap(), &fb, FD_FLOOR) < 1e-5);
    }

    #[test]
    fn cross_entropy_uniform_is_log_v() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&arr(&[1, 4], &[0.7; 4]), false);
        let l = tape.cross_entropy_rows(logits, &[2], &[1.0]).unwrap();
        assert!((tape.scalar(l) - 1.3862943611198906).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_zero_weight_masks_row() {
        let mut tape = Tape::new();
        let logits = tape.leaf(
            &arr(&[2, 3], &[0.1, 0.2, 0.3, 100.0, -50.0, 3.0]),
            false,
        );
        let both = tape.cross_entropy_rows(logits, &[0, 1], &[1.0, 0.0]).unwrap();
        let first = tape.cross_entropy_rows(logits, &[0, 0], &[1.0, 0.0]).unwrap();
        let only = {
            let l2 = tape.leaf(&arr(&[1, 3], &[0.1, 0.2, 0.3]), false);
            tape.cross_entropy_rows(l2, &[0], &[1.0]).unwrap()
        };
        assert_eq!(tape.scalar(both), tape.scalar(first));
        assert!((tape.scalar(both) - tape.scalar(only)).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_matches_direct_evaluation() {
        // pinned random 3×5 case, high-precision reference
        let logits = [
            0.2, -1.3, 0.7, 1.5, -0.4, //
            2.0, 0.0, -2.0, 0.5, 1.0, //
            -0.3, -0.6, 0.9, 0.1, 0.4,
        ];
        let mut tape = Tape::new();
        let id = tape.leaf(&arr(&[3, 5], &logits), false);
        let l = tape
            .cross_entropy_rows(id, &[3, 0, 2], &[1.0, 0.5, 2.0])
            .unwrap();
        assert!((tape.scalar(l) - 0.8093374524972160).abs() < 1e-14);
    }

    #[test]
    fn cross_entropy_degenerate_batch_errors() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&arr(&[2, 3], &[0.0; 6]), false);
        let r = tape.cross_entropy_rows(logits, &[0, 1], &[0.0, 0.0]);
        assert!(matches!(r, Err(Error::DegenerateBatch)));
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&arr(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 0.0, -1.0]), true);
        let l = tape.sum_all(x);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_sum_of_squares_gives_2x() {
        let data = [1.0, -2.0, 0.5, 3.0];
        let mut tape = Tape::new();
        let x = tape.leaf(&arr(&[1, 4], &data), true);
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum_all(sq);
        tape.backward(l).unwrap();
        let g = tape.grad(x).unwrap();
        for (gv, xv) in g.iter().zip(data) {
            assert!((gv - 2.0 * xv).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&arr(&[1, 4], &[0.0; 4]), true);
        let y = tape.scale(x, 2.0);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_accumulates_until_cleared() {
        let mut tape = Tape::new();
        let x = tape.leaf(&arr(&[1, 2], &[1.0, 2.0]), true);
        let l = tape.sum_all(x);
        tape.backward(l).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
        tape.clear_grads();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn grads_flow_through_frozen_leaves() {
        // x (trainable) × w (frozen): x still gets a grad and w does not.
        let mut tape = Tape::new();
        let x = tape.leaf(&arr(&[1, 2], &[1.0, 2.0]), true);
        let w = tape.leaf(&arr(&[2, 2], &[0.5, -1.0, 2.0, 0.25]), false);
        let y = tape.matmul(x, w).unwrap();
        let l = tape.sum_all(y);
        tape.backward(l).unwrap();
        assert!(tape.grad(x).is_some());
        assert!(tape.grad(w).is_none());
        let g = tape.grad(x).unwrap();
        assert!((g[0] - (0.5 - 1.0)).abs() < 1e-15);
        assert!((g[1] - (2.0 + 0.25)).abs() < 1e-15);
    }

    #[test]
    fn every_op_passes_finite_difference() {
        // One composite graph exercising each differentiable op.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let xv = rand_array(&mut rng, &[3, 4]);
        let wv = rand_array(&mut rng, &[4, 4]);
        let gv = rand_array(&mut rng, &[1, 4]);
        let bv = rand_array(&mut rng, &[1, 4]);
        let tablev = rand_array(&mut rng, &[5, 4]);

        let build = |x: &[f64], w: &[f64], gn: &[f64], bs: &[f64], tb: &[f64], grads: bool| {
            let mut t = Tape::new();
            let xi = t.leaf(&arr(&[3, 4], x), grads);
            let wi = t.leaf(&arr(&[4, 4], w), grads);
            let gi = t.leaf(&arr(&[1, 4], gn), grads);
            let bi = t.leaf(&arr(&[1, 4], bs), grads);
            let ti = t.leaf(&arr(&[5, 4], tb), grads);

            let emb = t.gather_rows(ti, &[0, 2, 4]).unwrap();
            let h0 = t.add(xi, emb).unwrap();
            let h1 = t.matmul(h0, wi).unwrap();
            let h2 = t.add_row(h1, bi).unwrap();
            let h3 = t.layer_norm_rows(h2, gi, bi, 1e-5).unwrap();
            let a = t.slice_cols(h3, 0, 2).unwrap();
            let b = t.slice_cols(h3, 2, 4).unwrap();
            let bt = t.transpose(b).unwrap();
            let scores = t.matmul(a, bt).unwrap();
            let scores = t.scale(scores, 0.70710678);
            let att = t.softmax_rows(scores);
            let mixed = t.matmul(att, a).unwrap();
            let merged = t.concat_cols(&[mixed, a]).unwrap();
            let r = t.relu(merged);
            let ge = t.gelu(h3);
            let pooled = t.mean_rows(ge);
            let lsm = t.log_softmax_rows(r);
            let s0 = t.get(lsm, 1).unwrap();
            let s1 = t.get(pooled, 2).unwrap();
            let lae = t.logaddexp(s0, s1);
            let ce = t.cross_entropy_rows(h3, &[1, 0, 3], &[1.0, 0.5, 2.0]).unwrap();
            let part = t.add(lae, ce).unwrap();
            let sm = t.sum_all(r);
            let sm2 = t.scale(sm, 0.1);
            let loss = t.add(part, sm2).unwrap();
            (t, [xi, wi, gi, bi, ti], loss)
        };

        let (mut tape, ids, loss) = build(
            xv.data(),
            wv.data(),
            gv.data(),
            bv.data(),
            tablev.data(),
            true,
        );
        tape.backward(loss).unwrap();

        let inputs: [&Array; 5] = [&xv, &wv, &gv, &bv, &tablev];
        for (slot, _) in inputs.iter().enumerate() {
            let numeric = finite_difference(inputs[slot].data(), FD_EPS, |vals| {
                let mut bufs: Vec<Vec<f64>> =
                    inputs.iter().map(|a| a.data().to_vec()).collect();
                bufs[slot] = vals.to_vec();
                let (t, _, l) = build(&bufs[0], &bufs[1], &bufs[2], &bufs[3], &bufs[4], false);
                t.scalar(l)
            });
            let analytic = tape.grad(ids[slot]).unwrap();
            let err = max_rel_err(analytic, &numeric, FD_FLOOR);
            assert!(err < FD_TOL, "op suite slot {slot}: max rel err {err}");
        }
    }

    #[test]
    fn deterministic_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_array(&mut rng, &[4, 4]);
        let run = || {
            let mut t = Tape::new();
            let xi = t.leaf(&x, false);
            let s = t.softmax_rows(xi);
            let l = t.sum_all(s);
            t.scalar(l).to_bits()
        };
        assert_eq!(run(), run());
    }
}
