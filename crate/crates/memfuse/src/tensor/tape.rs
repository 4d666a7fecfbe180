//! Operation tape for reverse-mode differentiation.
//!
//! The tape owns every intermediate value of a forward pass. Each public
//! operation appends one node recording its inputs and any state the
//! backward rule needs (softmax outputs, dropout masks, argmax indices).
//! [`Tape::backward`] seeds dL/dL = 1 at the loss node and walks the node
//! list in reverse, accumulating gradients into per-node buffers.
//!
//! A tape is single use: one forward graph, one backward pass. Parameters
//! are re-registered on a fresh tape each training step.

use rand::Rng;

use super::{Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

struct Node {
    value: Tensor,
    op: Op,
    param: bool,
}

enum Op {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Relu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    Scale {
        x: NodeId,
        factor: f64,
    },
    MaskedSoftmax {
        x: NodeId,
        mask: Vec<bool>,
    },
    Sum {
        x: NodeId,
    },
    MeanAxis {
        x: NodeId,
        axis: usize,
    },
    MaxAxis {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    Transpose {
        x: NodeId,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    RepeatRows {
        x: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        shift: NodeId,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: NodeId,
        keep: Vec<bool>,
        scale: f64,
    },
    MaskedMeanRows {
        x: NodeId,
        mask: Vec<bool>,
    },
    MaskedMaxRows {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Reshape {
        x: NodeId,
    },
}

/// Records a forward computation and differentiates it in reverse.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
    done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            done: false,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, param: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op, param });
        id
    }

    /// Registers an input value. It receives a gradient buffer during
    /// backward but is not flagged as a parameter.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Registers a trainable parameter; guaranteed a populated gradient
    /// after [`Tape::backward`], even off the loss path.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Gradient of the loss w.r.t. the given node. Only valid after
    /// [`Tape::backward`]; nodes off the loss path yield `None` unless
    /// they are parameters.
    pub fn grad(&self, id: NodeId) -> Result<Option<&[f64]>, TensorError> {
        if !self.done {
            return Err(TensorError::GradsNotReady);
        }
        let g = &self.grads[id.0];
        Ok(if g.is_empty() { None } else { Some(g.as_slice()) })
    }

    fn check(&self, id: NodeId) -> Result<(), TensorError> {
        if id.0 >= self.nodes.len() {
            return Err(TensorError::DetachedNode {
                index: id.0,
                len: self.nodes.len(),
            });
        }
        Ok(())
    }

    fn same_shape(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<(), TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, id: NodeId) -> Result<(usize, usize), TensorError> {
        let s = self.value(id).shape();
        if s.len() != 2 {
            return Err(TensorError::RankMismatch {
                op,
                expected: "matrix",
                shape: s.to_vec(),
            });
        }
        Ok((s[0], s[1]))
    }

    // ── Forward ops ─────────────────────────────────────────────────

    /// Standard matrix product a[m×k] · b[k×n].
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.check(a)?;
        self.check(b)?;
        let (m, ka) = self.matrix_dims("matmul", a)?;
        let (kb, n) = self.matrix_dims("matmul", b)?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, ka],
                rhs: vec![kb, n],
            });
        }
        let mut out = vec![0.0; m * n];
        let da = self.value(a).data();
        let db = self.value(b).data();
        for i in 0..m {
            for k in 0..ka {
                let aik = da[i * ka + k];
                if aik == 0.0 {
                    continue;
                }
                let brow = &db[k * n..(k + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aik * bv;
                }
            }
        }
        let value = Tensor::from_vec(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b }, false))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.check(a)?;
        self.check(b)?;
        self.same_shape("add", a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }, false))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.check(a)?;
        self.check(b)?;
        self.same_shape("sub", a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Sub { a, b }, false))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.check(a)?;
        self.check(b)?;
        self.same_shape("mul", a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul { a, b }, false))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.check(x)?;
        let data: Vec<f64> = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::from_vec(self.value(x).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Relu { x }, false))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.check(x)?;
        let data: Vec<f64> = self.value(x).data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::from_vec(self.value(x).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Sigmoid { x }, false))
    }

    /// Multiplication by a compile-time-known scalar (the only broadcast).
    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId, TensorError> {
        self.check(x)?;
        let data: Vec<f64> = self.value(x).data().iter().map(|v| v * factor).collect();
        let value = Tensor::from_vec(self.value(x).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Scale { x, factor }, false))
    }

    /// Row-wise softmax over valid positions only. Masked entries come out
    /// exactly zero; logits are stabilized by subtracting the per-row max
    /// of the valid entries. A row with no valid position is an error.
    pub fn masked_softmax(&mut self, x: NodeId, mask: &[bool]) -> Result<NodeId, TensorError> {
        self.check(x)?;
        let t = self.value(x);
        if mask.len() != t.numel() {
            return Err(TensorError::MaskLength {
                op: "masked_softmax",
                mask_len: mask.len(),
                expected: t.numel(),
            });
        }
        let (rows, cols) = (t.rows(), t.cols());
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let lo = r * cols;
            let row = &src[lo..lo + cols];
            let valid = &mask[lo..lo + cols];
            let mut max = f64::NEG_INFINITY;
            for (v, &keep) in row.iter().zip(valid) {
                if keep {
                    if !v.is_finite() {
                        return Err(TensorError::NonFinite {
                            op: "masked_softmax",
                        });
                    }
                    if *v > max {
                        max = *v;
                    }
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(TensorError::AllMaskedRow { row: r });
            }
            let mut denom = 0.0;
            for c in 0..cols {
                if valid[c] {
                    let e = (row[c] - max).exp();
                    out[lo + c] = e;
                    denom += e;
                }
            }
            for c in 0..cols {
                if valid[c] {
                    out[lo + c] /= denom;
                }
            }
        }
        let value = Tensor::from_vec(t.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::MaskedSoftmax {
                x,
                mask: mask.to_vec(),
            },
            false,
        ))
    }

    /// Full reduction to a scalar of shape `[1]`.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.check(x)?;
        let total: f64 = self.value(x).data().iter().sum();
        Ok(self.push(Tensor::scalar(total), Op::Sum { x }, false))
    }

    /// Mean along `axis`. For a matrix, axis 0 averages over rows (one
    /// entry per column); axis 1 averages each row. Vectors reduce to a
    /// scalar on axis 0.
    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        self.check(x)?;
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "mean_axis",
                axis,
                shape,
            });
        }
        let value = match shape.len() {
            1 => {
                let n = shape[0] as f64;
                Tensor::scalar(t.data().iter().sum::<f64>() / n)
            }
            _ => {
                let (rows, cols) = (shape[0], shape[1]);
                if axis == 0 {
                    let mut out = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            out[c] += t.at(r, c);
                        }
                    }
                    out.iter_mut().for_each(|v| *v /= rows as f64);
                    Tensor::from_vec(vec![cols], out)?
                } else {
                    let mut out = vec![0.0; rows];
                    for r in 0..rows {
                        out[r] = (0..cols).map(|c| t.at(r, c)).sum::<f64>() / cols as f64;
                    }
                    Tensor::from_vec(vec![rows], out)?
                }
            }
        };
        Ok(self.push(value, Op::MeanAxis { x, axis }, false))
    }

    /// Max along `axis`, recording argmax positions for backward. Ties
    /// route the full gradient to the first (lowest-index) maximum.
    pub fn max_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        self.check(x)?;
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "max_axis",
                axis,
                shape,
            });
        }
        let (value, argmax) = match shape.len() {
            1 => {
                let (mut best, mut at) = (f64::NEG_INFINITY, 0);
                for (i, &v) in t.data().iter().enumerate() {
                    if v > best {
                        best = v;
                        at = i;
                    }
                }
                (Tensor::scalar(best), vec![at])
            }
            _ => {
                let (rows, cols) = (shape[0], shape[1]);
                if axis == 0 {
                    let mut out = vec![f64::NEG_INFINITY; cols];
                    let mut arg = vec![0usize; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            let v = t.at(r, c);
                            if v > out[c] {
                                out[c] = v;
                                arg[c] = r;
                            }
                        }
                    }
                    (Tensor::from_vec(vec![cols], out)?, arg)
                } else {
                    let mut out = vec![f64::NEG_INFINITY; rows];
                    let mut arg = vec![0usize; rows];
                    for r in 0..rows {
                        for c in 0..cols {
                            let v = t.at(r, c);
                            if v > out[r] {
                                out[r] = v;
                                arg[r] = c;
                            }
                        }
                    }
                    (Tensor::from_vec(vec![rows], out)?, arg)
                }
            }
        };
        // axis is recoverable from shapes at backward time via argmax layout;
        // store it implicitly by normalizing argmax to flat offsets.
        let flat = self.flatten_argmax(x, axis, argmax);
        Ok(self.push(value, Op::MaxAxis { x, argmax: flat }, false))
    }

    fn flatten_argmax(&self, x: NodeId, axis: usize, argmax: Vec<usize>) -> Vec<usize> {
        let shape = self.value(x).shape();
        match shape.len() {
            1 => argmax,
            _ => {
                let cols = shape[1];
                if axis == 0 {
                    argmax
                        .iter()
                        .enumerate()
                        .map(|(c, &r)| r * cols + c)
                        .collect()
                } else {
                    argmax
                        .iter()
                        .enumerate()
                        .map(|(r, &c)| r * cols + c)
                        .collect()
                }
            }
        }
    }

    /// Concatenation. Vectors concatenate end to end on axis 0. Matrices
    /// stack rows on axis 0 or columns on axis 1; the other extent must
    /// agree across all parts.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId, TensorError> {
        for &p in parts {
            self.check(p)?;
        }
        let first = parts.first().ok_or(TensorError::EmptyReduction {
            op: "concat",
            shape: vec![],
        })?;
        let rank = self.value(*first).shape().len();
        if axis >= rank {
            return Err(TensorError::InvalidAxis {
                op: "concat",
                axis,
                shape: self.value(*first).shape().to_vec(),
            });
        }
        let value = if rank == 1 {
            let mut data = Vec::new();
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            Tensor::from_vec(vec![data.len()], data)?
        } else if axis == 0 {
            let cols = self.value(*first).cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for &p in parts {
                let t = self.value(p);
                if t.cols() != cols {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        lhs: self.value(*first).shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    });
                }
                rows += t.rows();
                data.extend_from_slice(t.data());
            }
            Tensor::from_vec(vec![rows, cols], data)?
        } else {
            let rows = self.value(*first).rows();
            let mut cols = 0;
            for &p in parts {
                let t = self.value(p);
                if t.rows() != rows {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        lhs: self.value(*first).shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    });
                }
                cols += t.cols();
            }
            let mut data = vec![0.0; rows * cols];
            let mut offset = 0;
            for &p in parts {
                let t = self.value(p);
                let w = t.cols();
                for r in 0..rows {
                    data[r * cols + offset..r * cols + offset + w]
                        .copy_from_slice(&t.data()[r * w..(r + 1) * w]);
                }
                offset += w;
            }
            Tensor::from_vec(vec![rows, cols], data)?
        };
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            false,
        ))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.check(x)?;
        let (rows, cols) = self.matrix_dims("transpose", x)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        let value = Tensor::from_vec(vec![cols, rows], out)?;
        Ok(self.push(value, Op::Transpose { x }, false))
    }

    /// Extracts columns `[start, start+len)` of a matrix.
    pub fn slice_cols(
        &mut self,
        x: NodeId,
        start: usize,
        len: usize,
    ) -> Result<NodeId, TensorError> {
        self.check(x)?;
        let (rows, cols) = self.matrix_dims("slice_cols", x)?;
        if start + len > cols || len == 0 {
            return Err(TensorError::InvalidAxis {
                op: "slice_cols",
                axis: start + len,
                shape: vec![rows, cols],
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let value = Tensor::from_vec(vec![rows, len], out)?;
        Ok(self.push(value, Op::SliceCols { x, start }, false))
    }

    /// Tiles a vector `[d]` into `n` identical matrix rows `[n, d]`.
    pub fn repeat_rows(&mut self, x: NodeId, n: usize) -> Result<NodeId, TensorError> {
        self.check(x)?;
        let t = self.value(x);
        if t.shape().len() != 1 {
            return Err(TensorError::RankMismatch {
                op: "repeat_rows",
                expected: "vector",
                shape: t.shape().to_vec(),
            });
        }
        let d = t.numel();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(t.data());
        }
        let value = Tensor::from_vec(vec![n, d], data)?;
        Ok(self.push(value, Op::RepeatRows { x }, false))
    }

    /// Per-row normalization over the last axis followed by the affine
    /// map `gain ⊙ ẑ + shift`. Variance is the population form with
    /// `eps` inside the square root. Width-1 rows are degenerate but
    /// permitted: zero variance maps every entry to `shift`.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        shift: NodeId,
        eps: f64,
    ) -> Result<NodeId, TensorError> {
        self.check(x)?;
        self.check(gain)?;
        self.check(shift)?;
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        if self.value(gain).numel() != cols || self.value(shift).numel() != cols {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: t.shape().to_vec(),
                rhs: self.value(gain).shape().to_vec(),
            });
        }
        let src = t.data();
        let g = self.value(gain).data().to_vec();
        let s = self.value(shift).data().to_vec();
        let mut normalized = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for c in 0..cols {
                let z = (row[c] - mean) * istd;
                normalized[r * cols + c] = z;
                out[r * cols + c] = g[c] * z + s[c];
            }
        }
        let value = Tensor::from_vec(t.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                shift,
                normalized,
                inv_std,
            },
            false,
        ))
    }

    /// Inverted dropout: keeps entries with probability `1 − rate` and
    /// scales survivors by `1/(1 − rate)`. The mask is drawn once here
    /// and reused by the backward rule.
    pub fn dropout<R: Rng>(
        &mut self,
        x: NodeId,
        rate: f64,
        rng: &mut R,
    ) -> Result<NodeId, TensorError> {
        self.check(x)?;
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidDropoutRate { rate });
        }
        let t = self.value(x);
        let keep: Vec<bool> = (0..t.numel()).map(|_| rng.random::<f64>() >= rate).collect();
        let scale = 1.0 / (1.0 - rate);
        let data: Vec<f64> = t
            .data()
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v * scale } else { 0.0 })
            .collect();
        let value = Tensor::from_vec(t.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { x, keep, scale }, false))
    }

    /// Mean of the valid rows of a matrix; yields a vector `[d]`.
    pub fn masked_mean_rows(&mut self, x: NodeId, mask: &[bool]) -> Result<NodeId, TensorError> {
        self.check(x)?;
        let (rows, cols) = self.matrix_dims("masked_mean_rows", x)?;
        if mask.len() != rows {
            return Err(TensorError::MaskLength {
                op: "masked_mean_rows",
                mask_len: mask.len(),
                expected: rows,
            });
        }
        let n_valid = mask.iter().filter(|&&m| m).count();
        if n_valid == 0 {
            return Err(TensorError::AllMaskedRow { row: 0 });
        }
        let t = self.value(x);
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            if mask[r] {
                for c in 0..cols {
                    out[c] += t.at(r, c);
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= n_valid as f64);
        let value = Tensor::from_vec(vec![cols], out)?;
        Ok(self.push(
            value,
            Op::MaskedMeanRows {
                x,
                mask: mask.to_vec(),
            },
            false,
        ))
    }

    /// Per-column max over the valid rows of a matrix; first valid row
    /// wins ties.
    pub fn masked_max_rows(&mut self, x: NodeId, mask: &[bool]) -> Result<NodeId, TensorError> {
        self.check(x)?;
        let (rows, cols) = self.matrix_dims("masked_max_rows", x)?;
        if mask.len() != rows {
            return Err(TensorError::MaskLength {
                op: "masked_max_rows",
                mask_len: mask.len(),
                expected: rows,
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(TensorError::AllMaskedRow { row: 0 });
        }
        let t = self.value(x);
        let mut out = vec![f64::NEG_INFINITY; cols];
        let mut argmax = vec![0usize; cols];
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            for c in 0..cols {
                let v = t.at(r, c);
                if v > out[c] {
                    out[c] = v;
                    argmax[c] = r;
                }
            }
        }
        let flat: Vec<usize> = argmax
            .iter()
            .enumerate()
            .map(|(c, &r)| r * cols + c)
            .collect();
        let value = Tensor::from_vec(vec![cols], out)?;
        Ok(self.push(value, Op::MaskedMaxRows { x, argmax: flat }, false))
    }

    /// Shape change over the same row-major buffer.
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, TensorError> {
        self.check(x)?;
        let t = self.value(x);
        let expected: usize = shape.iter().product();
        if expected != t.numel() || shape.iter().any(|&e| e == 0) {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                actual: t.numel(),
            });
        }
        let value = Tensor::from_vec(shape, t.data().to_vec())?;
        Ok(self.push(value, Op::Reshape { x }, false))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse accumulation from a scalar loss. Seeds dL/dL = 1, then
    /// visits nodes in exact reverse execution order. Every parameter
    /// node ends with a populated gradient (zeros if off the loss path).
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if self.done {
            return Err(TensorError::BackwardAlreadyRun);
        }
        self.check(loss)?;
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        self.grads = vec![Vec::new(); self.nodes.len()];
        self.grads[loss.0] = vec![1.0];

        for idx in (0..=loss.0).rev() {
            if self.grads[idx].is_empty() {
                continue;
            }
            let dy = std::mem::take(&mut self.grads[idx]);
            self.propagate(idx, &dy);
            self.grads[idx] = dy;
        }

        // Parameters always report a gradient, even when unused.
        for idx in 0..self.nodes.len() {
            if self.nodes[idx].param && self.grads[idx].is_empty() {
                self.grads[idx] = vec![0.0; self.nodes[idx].value.numel()];
            }
        }
        self.done = true;
        Ok(())
    }

    fn accumulate(&mut self, target: NodeId, contribution: impl Fn(usize) -> f64) {
        let n = self.nodes[target.0].value.numel();
        if self.grads[target.0].is_empty() {
            self.grads[target.0] = vec![0.0; n];
        }
        for i in 0..n {
            self.grads[target.0][i] += contribution(i);
        }
    }

    fn propagate(&mut self, idx: usize, dy: &[f64]) {
        // Clone the small per-op metadata we need, then accumulate.
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = {
                    let s = self.nodes[a.0].value.shape();
                    (s[0], s[1])
                };
                let n = self.nodes[b.0].value.shape()[1];
                let da: Vec<f64> = {
                    let bd = self.nodes[b.0].value.data();
                    let mut g = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let d = dy[i * n + j];
                            if d == 0.0 {
                                continue;
                            }
                            for kk in 0..k {
                                g[i * k + kk] += d * bd[kk * n + j];
                            }
                        }
                    }
                    g
                };
                let db: Vec<f64> = {
                    let ad = self.nodes[a.0].value.data();
                    let mut g = vec![0.0; k * n];
                    for i in 0..m {
                        for kk in 0..k {
                            let av = ad[i * k + kk];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                g[kk * n + j] += av * dy[i * n + j];
                            }
                        }
                    }
                    g
                };
                self.accumulate(a, |i| da[i]);
                self.accumulate(b, |i| db[i]);
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate(a, |i| dy[i]);
                self.accumulate(b, |i| dy[i]);
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate(a, |i| dy[i]);
                self.accumulate(b, |i| -dy[i]);
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let bd = self.nodes[b.0].value.data().to_vec();
                let ad = self.nodes[a.0].value.data().to_vec();
                self.accumulate(a, |i| dy[i] * bd[i]);
                self.accumulate(b, |i| dy[i] * ad[i]);
            }
            Op::Relu { x } => {
                let x = *x;
                let xd = self.nodes[x.0].value.data().to_vec();
                self.accumulate(x, |i| if xd[i] > 0.0 { dy[i] } else { 0.0 });
            }
            Op::Sigmoid { x } => {
                let x = *x;
                let s = self.nodes[idx].value.data().to_vec();
                self.accumulate(x, |i| dy[i] * s[i] * (1.0 - s[i]));
            }
            Op::Scale { x, factor } => {
                let (x, factor) = (*x, *factor);
                self.accumulate(x, |i| dy[i] * factor);
            }
            Op::MaskedSoftmax { x, mask } => {
                let x = *x;
                let mask = mask.clone();
                let s = self.nodes[idx].value.data().to_vec();
                let cols = self.nodes[idx].value.cols();
                let rows = s.len() / cols;
                let mut dx = vec![0.0; s.len()];
                for r in 0..rows {
                    let lo = r * cols;
                    let mut dot = 0.0;
                    for c in 0..cols {
                        if mask[lo + c] {
                            dot += dy[lo + c] * s[lo + c];
                        }
                    }
                    for c in 0..cols {
                        if mask[lo + c] {
                            dx[lo + c] = s[lo + c] * (dy[lo + c] - dot);
                        }
                    }
                }
                self.accumulate(x, |i| dx[i]);
            }
            Op::Sum { x } => {
                let x = *x;
                let d = dy[0];
                self.accumulate(x, |_| d);
            }
            Op::MeanAxis { x, axis } => {
                let (x, axis) = (*x, *axis);
                let shape = self.nodes[x.0].value.shape().to_vec();
                match shape.len() {
                    1 => {
                        let d = dy[0] / shape[0] as f64;
                        self.accumulate(x, |_| d);
                    }
                    _ => {
                        let (rows, cols) = (shape[0], shape[1]);
                        if axis == 0 {
                            let scale = 1.0 / rows as f64;
                            self.accumulate(x, |i| dy[i % cols] * scale);
                        } else {
                            let scale = 1.0 / cols as f64;
                            self.accumulate(x, |i| dy[i / cols] * scale);
                        }
                    }
                }
            }
            Op::MaxAxis { x, argmax } => {
                let x = *x;
                let argmax = argmax.clone();
                let n = self.nodes[x.0].value.numel();
                let mut dx = vec![0.0; n];
                for (out_idx, &flat) in argmax.iter().enumerate() {
                    dx[flat] += dy[out_idx];
                }
                self.accumulate(x, |i| dx[i]);
            }
            Op::Concat { parts, axis } => {
                let parts = parts.clone();
                let axis = *axis;
                let rank = self.nodes[parts[0].0].value.shape().len();
                if rank == 1 || axis == 0 {
                    let mut offset = 0;
                    for &p in &parts {
                        let n = self.nodes[p.0].value.numel();
                        let lo = offset;
                        self.accumulate(p, |i| dy[lo + i]);
                        offset += n;
                    }
                } else {
                    let total_cols = self.nodes[idx].value.cols();
                    let mut offset = 0;
                    for &p in &parts {
                        let w = self.nodes[p.0].value.cols();
                        let lo = offset;
                        self.accumulate(p, |i| {
                            let (r, c) = (i / w, i % w);
                            dy[r * total_cols + lo + c]
                        });
                        offset += w;
                    }
                }
            }
            Op::Transpose { x } => {
                let x = *x;
                let (rows, cols) = {
                    let s = self.nodes[x.0].value.shape();
                    (s[0], s[1])
                };
                // dy has shape [cols, rows]
                self.accumulate(x, |i| {
                    let (r, c) = (i / cols, i % cols);
                    dy[c * rows + r]
                });
            }
            Op::SliceCols { x, start } => {
                let (x, start) = (*x, *start);
                let cols = self.nodes[x.0].value.cols();
                let width = self.nodes[idx].value.cols();
                self.accumulate(x, |i| {
                    let (r, c) = (i / cols, i % cols);
                    if c >= start && c < start + width {
                        dy[r * width + (c - start)]
                    } else {
                        0.0
                    }
                });
            }
            Op::RepeatRows { x } => {
                let x = *x;
                let d = self.nodes[x.0].value.numel();
                let n = self.nodes[idx].value.rows();
                self.accumulate(x, |j| (0..n).map(|r| dy[r * d + j]).sum());
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                normalized,
                inv_std,
            } => {
                let (x, gain, shift) = (*x, *gain, *shift);
                let normalized = normalized.clone();
                let inv_std = inv_std.clone();
                let g = self.nodes[gain.0].value.data().to_vec();
                let cols = self.nodes[x.0].value.cols();
                let rows = normalized.len() / cols;

                let mut dgain = vec![0.0; cols];
                let mut dshift = vec![0.0; cols];
                let mut dx = vec![0.0; normalized.len()];
                for r in 0..rows {
                    let lo = r * cols;
                    let mut mean_dz = 0.0;
                    let mut mean_dzz = 0.0;
                    for c in 0..cols {
                        let dyv = dy[lo + c];
                        let z = normalized[lo + c];
                        dgain[c] += dyv * z;
                        dshift[c] += dyv;
                        let dz = dyv * g[c];
                        mean_dz += dz;
                        mean_dzz += dz * z;
                    }
                    mean_dz /= cols as f64;
                    mean_dzz /= cols as f64;
                    for c in 0..cols {
                        let dz = dy[lo + c] * g[c];
                        let z = normalized[lo + c];
                        dx[lo + c] = inv_std[r] * (dz - mean_dz - z * mean_dzz);
                    }
                }
                self.accumulate(x, |i| dx[i]);
                self.accumulate(gain, |i| dgain[i]);
                self.accumulate(shift, |i| dshift[i]);
            }
            Op::Dropout { x, keep, scale } => {
                let (x, scale) = (*x, *scale);
                let keep = keep.clone();
                self.accumulate(x, |i| if keep[i] { dy[i] * scale } else { 0.0 });
            }
            Op::MaskedMeanRows { x, mask } => {
                let x = *x;
                let mask = mask.clone();
                let cols = self.nodes[x.0].value.cols();
                let n_valid = mask.iter().filter(|&&m| m).count() as f64;
                self.accumulate(x, |i| {
                    let r = i / cols;
                    if mask[r] {
                        dy[i % cols] / n_valid
                    } else {
                        0.0
                    }
                });
            }
            Op::MaskedMaxRows { x, argmax } => {
                let x = *x;
                let argmax = argmax.clone();
                let n = self.nodes[x.0].value.numel();
                let mut dx = vec![0.0; n];
                for (c, &flat) in argmax.iter().enumerate() {
                    dx[flat] += dy[c];
                }
                self.accumulate(x, |i| dx[i]);
            }
            Op::Reshape { x } => {
                let x = *x;
                self.accumulate(x, |i| dy[i]);
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
