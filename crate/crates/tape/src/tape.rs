//! Operation tape and reverse pass.
//!
//! Every forward op appends a node holding its output value and whatever
//! it needs to run backward. Nodes only ever reference earlier nodes, so the
//! append order is already a topological order and the reverse pass is a
//! single sweep from the loss down to index 0.

use crate::error::{Result, TapeError};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Normalization statistics of one train-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased per-channel variance, as used for running estimates.
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Abs(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SegmentMax {
        x: Var,
        argmax: Vec<usize>,
    },
    GatherRows {
        x: Var,
        idx: Vec<Option<usize>>,
    },
    ApplyRowTransforms {
        x: Var,
        mats: Var,
        seg: Vec<usize>,
    },
    WeightedSum {
        w: Var,
        v: Var,
    },
    GroupScores {
        a: Var,
        b: Var,
        group: usize,
    },
    GroupMix {
        p: Var,
        v: Var,
        group: usize,
    },
    RankSoftmax {
        logits: Var,
        counts: Vec<usize>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of the leaves that require them, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Decision taken by one piecewise op during a forward pass.
#[derive(Debug, Clone, PartialEq)]
enum Branch {
    Relu(Vec<bool>),
    Abs(Vec<i8>),
    Max(Vec<usize>),
}

/// The pieces every ReLU, |x| and segment max of a forward pass landed on,
/// in recording order. Feeding them to [`Tape::replaying`] evaluates the
/// function on that same smooth piece even where the inputs would cross a kink.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Branches(Vec<Branch>);

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    replay: Option<(Branches, usize)>,
}

const BN_UNUSED: usize = usize::MAX;

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TapeError {
    TapeError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose piecewise ops follow `branches` instead of their inputs.
    /// Meant for forward evaluation only; backward still differentiates the
    /// actual inputs. Recording a different op sequence panics.
    pub fn replaying(branches: Branches) -> Self {
        Self {
            nodes: Vec::new(),
            replay: Some((branches, 0)),
        }
    }

    fn next_branch(&mut self) -> Option<Branch> {
        let (branches, cursor) = self.replay.as_mut()?;
        let b = branches.0.get(*cursor).cloned().expect("replayed op sequence is longer than recorded");
        *cursor += 1;
        Some(b)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that gradients flow into.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Which piece of every piecewise op the recorded forward pass took:
    /// ReLU and |x| input signs, segment-max winners. Two evaluations with
    /// equal patterns lie on the same smooth piece of the function.
    pub fn branch_pattern(&self) -> Vec<u64> {
        let mut bits = Vec::new();
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => bits.extend(self.value(*a).data().iter().map(|x| *x > 0.0)),
                Op::Abs(a) => bits.extend(self.value(*a).data().iter().flat_map(|x| [*x > 0.0, *x < 0.0])),
                Op::SegmentMax { argmax, .. } => out.extend(argmax.iter().map(|i| *i as u64)),
                _ => {}
            }
        }
        out.extend(bits.chunks(64).map(|c| c.iter().enumerate().fold(0u64, |w, (i, b)| w | (u64::from(*b) << i))));
        out.push(bits.len() as u64);
        out
    }

    /// Full branch decisions of the recorded pass, for [`Tape::replaying`].
    pub fn branches(&self) -> Branches {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => out.push(Branch::Relu(self.value(*a).data().iter().map(|x| *x > 0.0).collect())),
                Op::Abs(a) => out.push(Branch::Abs(
                    self.value(*a).data().iter().map(|x| if *x > 0.0 { 1 } else if *x < 0.0 { -1 } else { 0 }).collect(),
                )),
                Op::SegmentMax { argmax, .. } => out.push(Branch::Max(argmax.clone())),
                _ => {}
            }
        }
        Branches(out)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2(op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut out,
        );
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `x · w + b` with `w` of shape `in x out` and `b` of length `out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, k) = self.dims2(x, "linear")?;
        let (k2, n) = self.dims2(w, "linear")?;
        if k != k2 {
            return Err(mismatch("linear", self.shape(x), self.shape(w)));
        }
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.len() != n {
                return Err(mismatch("linear", self.shape(w), bias.shape()));
            }
            for row in out.chunks_exact_mut(n) {
                row.copy_from_slice(bias.data());
            }
        }
        gemm(
            m,
            k,
            n,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            if b.is_some() { 1.0 } else { 0.0 },
            &mut out,
        );
        let value = Tensor::matrix(m, n, out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &parents))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(op_name, va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a row vector to every row of a matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, c) = self.dims2(a, "add_row")?;
        let r = self.value(row);
        if r.len() != c {
            return Err(mismatch("add_row", self.shape(a), self.shape(row)));
        }
        let mut value = self.value(a).clone();
        for out in value.data_mut().chunks_exact_mut(c) {
            for (o, b) in out.iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        Ok(self.push(value, Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.map(a, |x| x * factor);
        self.push(value, Op::Scale(a, factor), &[a])
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(a);
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| f(*x)).collect())
            .expect("map preserves shape")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = match self.next_branch() {
            Some(Branch::Relu(on)) => {
                let v = self.value(a);
                assert_eq!(on.len(), v.len(), "replayed relu size");
                let data = v.data().iter().zip(&on).map(|(x, o)| if *o { *x } else { 0.0 }).collect();
                Tensor::new(v.shape().to_vec(), data).expect("map preserves shape")
            }
            Some(_) => panic!("replayed op sequence differs at relu"),
            None => self.map(a, |x| x.max(0.0)),
        };
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.map(a, f64::tanh);
        self.push(value, Op::Tanh(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = match self.next_branch() {
            Some(Branch::Abs(sign)) => {
                let v = self.value(a);
                assert_eq!(sign.len(), v.len(), "replayed abs size");
                let data = v.data().iter().zip(&sign).map(|(x, s)| x * f64::from(*s)).collect();
                Tensor::new(v.shape().to_vec(), data).expect("map preserves shape")
            }
            Some(_) => panic!("replayed op sequence differs at abs"),
            None => self.map(a, f64::abs),
        };
        self.push(value, Op::Abs(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.map(a, sigmoid);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    /// Softmax along the last axis of a matrix (each row sums to 1).
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (_, c) = self.dims2(a, "softmax")?;
        let mut value = self.value(a).clone();
        if c > 0 {
            for row in value.data_mut().chunks_exact_mut(c) {
                softmax_in_place(row);
            }
        }
        Ok(self.push(value, Op::SoftmaxRows(a), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TapeError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let (rows, _) = self.dims2(first, "concat")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat")?;
            if r != rows {
                return Err(mismatch("concat", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let value = Tensor::matrix(rows, total, out)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "slice_cols")?;
        if start > end || end > cols {
            return Err(TapeError::Invalid {
                op: "slice_cols",
                msg: format!("range {start}..{end} outside {cols} columns"),
            });
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + end]);
        }
        let value = Tensor::matrix(rows, w, out)?;
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = if v.is_empty() {
            0.0
        } else {
            v.data().iter().sum::<f64>() / v.len() as f64
        };
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    fn check_affine(&self, x: Var, gamma: Var, beta: Var, op: &'static str) -> Result<(usize, usize)> {
        let (n, c) = self.dims2(x, op)?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(mismatch(op, self.shape(x), self.shape(gamma)));
        }
        Ok((n, c))
    }

    /// Batch normalization with statistics over the rows of `x`. Returns the
    /// batch statistics for running-estimate updates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (n, c) = self.check_affine(x, gamma, beta, "batch_norm")?;
        let xs = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for row in xs.chunks_exact(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        let nf = n.max(1) as f64;
        for m in &mut mean {
            *m /= nf;
        }
        for row in xs.chunks_exact(c) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s / nf + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; n * c];
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                let h = (xs[i * c + j] - mean[j]) * inv_std[j];
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        let unbiased = var
            .iter()
            .map(|s| if n > 1 { s / (n - 1) as f64 } else { 0.0 })
            .collect();
        let value = Tensor::matrix(n, c, out)?;
        let v = self.push(
            value,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        );
        Ok((v, BatchStats { mean, var: unbiased }))
    }

    /// Batch normalization with fixed (running) statistics: an affine map
    /// per channel.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (n, c) = self.check_affine(x, gamma, beta, "batch_norm")?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(mismatch("batch_norm", self.shape(x), &[running_mean.len()]));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let xs = self.value(x).data();
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                out[i * c + j] = g[j] * (xs[i * c + j] - running_mean[j]) * inv_std[j] + b[j];
            }
        }
        let value = Tensor::matrix(n, c, out)?;
        Ok(self.push(
            value,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Layer normalization over the columns of each row.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, c) = self.check_affine(x, gamma, beta, "layer_norm")?;
        let xs = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; n * c];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::matrix(n, c, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Channel-wise maximum over the rows of each segment. Segments without
    /// members produce an all-zero row. Ties route the gradient to the
    /// lowest row index.
    pub fn segment_max(&mut self, x: Var, segment_ids: &[usize], num_segments: usize) -> Result<Var> {
        let (n, c) = self.dims2(x, "segment_max")?;
        if segment_ids.len() != n {
            return Err(mismatch("segment_max", self.shape(x), &[segment_ids.len()]));
        }
        let replay = self.next_branch();
        let xs = self.value(x).data();
        let mut out = vec![0.0; num_segments * c];
        let mut argmax = vec![BN_UNUSED; num_segments * c];
        for (i, &s) in segment_ids.iter().enumerate() {
            if s >= num_segments {
                return Err(TapeError::IndexOutOfRange {
                    op: "segment_max",
                    index: s,
                    len: num_segments,
                });
            }
            for j in 0..c {
                let v = xs[i * c + j];
                let slot = s * c + j;
                if argmax[slot] == BN_UNUSED || v > out[slot] {
                    out[slot] = v;
                    argmax[slot] = i;
                }
            }
        }
        match replay {
            Some(Branch::Max(fixed)) => {
                assert_eq!(fixed.len(), argmax.len(), "replayed segment_max size");
                argmax = fixed;
                for (slot, &i) in argmax.iter().enumerate() {
                    out[slot] = if i == BN_UNUSED { 0.0 } else { xs[i * c + slot % c] };
                }
            }
            Some(_) => panic!("replayed op sequence differs at segment_max"),
            None => {}
        }
        let value = Tensor::matrix(num_segments, c, out)?;
        Ok(self.push(value, Op::SegmentMax { x, argmax }, &[x]))
    }

    /// Row gather; `None` yields an all-zero row.
    pub fn gather_rows(&mut self, x: Var, idx: &[Option<usize>]) -> Result<Var> {
        let (n, c) = self.dims2(x, "gather_rows")?;
        let xs = self.value(x).data();
        let mut out = vec![0.0; idx.len() * c];
        for (r, i) in idx.iter().enumerate() {
            if let Some(i) = *i {
                if i >= n {
                    return Err(TapeError::IndexOutOfRange {
                        op: "gather_rows",
                        index: i,
                        len: n,
                    });
                }
                out[r * c..(r + 1) * c].copy_from_slice(&xs[i * c..(i + 1) * c]);
            }
        }
        let value = Tensor::matrix(idx.len(), c, out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    /// Multiplies each row `x[i]` (length `f`) by the `f x f` matrix stored
    /// row-major in `mats[segment[i]]`.
    pub fn apply_row_transforms(&mut self, x: Var, mats: Var, segment: &[usize]) -> Result<Var> {
        let (n, f) = self.dims2(x, "apply_row_transforms")?;
        let (m, ff) = self.dims2(mats, "apply_row_transforms")?;
        if ff != f * f || segment.len() != n {
            return Err(mismatch("apply_row_transforms", self.shape(x), self.shape(mats)));
        }
        let xs = self.value(x).data();
        let ms = self.value(mats).data();
        let mut out = vec![0.0; n * f];
        for i in 0..n {
            let s = segment[i];
            if s >= m {
                return Err(TapeError::IndexOutOfRange {
                    op: "apply_row_transforms",
                    index: s,
                    len: m,
                });
            }
            let mat = &ms[s * ff..(s + 1) * ff];
            let o = &mut out[i * f..(i + 1) * f];
            for r in 0..f {
                let xv = xs[i * f + r];
                for (ov, mv) in o.iter_mut().zip(&mat[r * f..(r + 1) * f]) {
                    *ov += xv * mv;
                }
            }
        }
        let value = Tensor::matrix(n, f, out)?;
        Ok(self.push(
            value,
            Op::ApplyRowTransforms {
                x,
                mats,
                seg: segment.to_vec(),
            },
            &[x, mats],
        ))
    }

    /// `out[q] = Σ_k w[q, k] · v[q·K + k]` for `w` of shape `Q x K` and `v`
    /// of shape `(Q·K) x F`.
    pub fn weighted_sum(&mut self, w: Var, v: Var) -> Result<Var> {
        let (q, k) = self.dims2(w, "weighted_sum")?;
        let (qk, f) = self.dims2(v, "weighted_sum")?;
        if qk != q * k {
            return Err(mismatch("weighted_sum", self.shape(w), self.shape(v)));
        }
        let ws = self.value(w).data();
        let vs = self.value(v).data();
        let mut out = vec![0.0; q * f];
        for qi in 0..q {
            let o = &mut out[qi * f..(qi + 1) * f];
            for ki in 0..k {
                let wv = ws[qi * k + ki];
                if wv == 0.0 {
                    continue;
                }
                let row = &vs[(qi * k + ki) * f..(qi * k + ki + 1) * f];
                for (ov, x) in o.iter_mut().zip(row) {
                    *ov += wv * x;
                }
            }
        }
        let value = Tensor::matrix(q, f, out)?;
        Ok(self.push(value, Op::WeightedSum { w, v }, &[w, v]))
    }

    /// Within consecutive groups of `group` rows, computes `A_g · B_gᵀ`.
    /// Output has shape `N x group`.
    pub fn group_scores(&mut self, a: Var, b: Var, group: usize) -> Result<Var> {
        let (n, f) = self.dims2(a, "group_scores")?;
        if self.shape(a) != self.shape(b) || group == 0 || n % group != 0 {
            return Err(mismatch("group_scores", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; n * group];
        for g0 in (0..n).step_by(group) {
            for i in 0..group {
                let ra = &av[(g0 + i) * f..(g0 + i + 1) * f];
                for j in 0..group {
                    let rb = &bv[(g0 + j) * f..(g0 + j + 1) * f];
                    out[(g0 + i) * group + j] = dot(ra, rb);
                }
            }
        }
        let value = Tensor::matrix(n, group, out)?;
        Ok(self.push(value, Op::GroupScores { a, b, group }, &[a, b]))
    }

    /// Within consecutive groups of `group` rows, computes `P_g · V_g` where
    /// `P` is `N x group`.
    pub fn group_mix(&mut self, p: Var, v: Var, group: usize) -> Result<Var> {
        let (n, g) = self.dims2(p, "group_mix")?;
        let (n2, f) = self.dims2(v, "group_mix")?;
        if g != group || n != n2 || group == 0 || n % group != 0 {
            return Err(mismatch("group_mix", self.shape(p), self.shape(v)));
        }
        let (pv, vv) = (self.value(p).data(), self.value(v).data());
        let mut out = vec![0.0; n * f];
        for g0 in (0..n).step_by(group) {
            for i in 0..group {
                let o = &mut out[(g0 + i) * f..(g0 + i + 1) * f];
                for j in 0..group {
                    let w = pv[(g0 + i) * group + j];
                    for (ov, x) in o.iter_mut().zip(&vv[(g0 + j) * f..(g0 + j + 1) * f]) {
                        *ov += w * x;
                    }
                }
            }
        }
        let value = Tensor::matrix(n, f, out)?;
        Ok(self.push(value, Op::GroupMix { p, v, group }, &[p, v]))
    }

    /// Broadcasts a logit vector of length `K` to one row per entry of
    /// `counts`, applying a softmax over the first `counts[r]` entries of row
    /// `r` and zeroing the rest.
    pub fn rank_softmax(&mut self, logits: Var, counts: &[usize]) -> Result<Var> {
        let l = self.value(logits).data().to_vec();
        let k = l.len();
        let mut out = vec![0.0; counts.len() * k];
        for (r, &n) in counts.iter().enumerate() {
            if n > k {
                return Err(TapeError::IndexOutOfRange {
                    op: "rank_softmax",
                    index: n,
                    len: k,
                });
            }
            let row = &mut out[r * k..r * k + n];
            row.copy_from_slice(&l[..n]);
            softmax_in_place(row);
        }
        let value = Tensor::matrix(counts.len(), k, out)?;
        Ok(self.push(
            value,
            Op::RankSoftmax {
                logits,
                counts: counts.to_vec(),
            },
            &[logits],
        ))
    }

    /// Mean binary cross-entropy between sigmoid(logits) and 0/1 targets,
    /// evaluated in the numerically stable log-sum-exp form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let l = self.value(logits);
        if l.len() != targets.len() {
            return Err(mismatch("bce_with_logits", l.shape(), &[targets.len()]));
        }
        let n = targets.len().max(1) as f64;
        let total: f64 = l
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for every leaf
    /// created with [`Tape::variable`] that the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TapeError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn like(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor::new(self.value(v).shape().to_vec(), data).expect("gradient matches value shape")
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2("matmul").unwrap();
                let n = self.value(*b).cols();
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, self.value(*b).data(), true, 0.0, &mut da);
                    self.accumulate(grads, *a, self.like(*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), true, gd, false, 0.0, &mut db);
                    self.accumulate(grads, *b, self.like(*b, db));
                }
            }
            Op::Linear { x, w, b } => {
                let (m, k) = self.value(*x).dims2("linear").unwrap();
                let n = self.value(*w).cols();
                if self.wants(*x) {
                    let mut dx = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, self.value(*w).data(), true, 0.0, &mut dx);
                    self.accumulate(grads, *x, self.like(*x, dx));
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*x).data(), true, gd, false, 0.0, &mut dw);
                    self.accumulate(grads, *w, self.like(*w, dw));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        self.accumulate(grads, *b, self.like(*b, col_sums(gd, n)));
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, self.like(*b, gd.iter().map(|x| -x).collect()));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let d = gd.iter().zip(bv).map(|(g, y)| g * y).collect();
                    self.accumulate(grads, *a, self.like(*a, d));
                }
                if self.wants(*b) {
                    let d = gd.iter().zip(av).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, *b, self.like(*b, d));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*row) {
                    let c = self.value(*row).len();
                    self.accumulate(grads, *row, self.like(*row, col_sums(gd, c)));
                }
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, self.like(*a, gd.iter().map(|x| x * s).collect()));
            }
            Op::Relu(a) => {
                let y = node.value.data();
                let d = gd
                    .iter()
                    .zip(y)
                    .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Abs(a) => {
                let x = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(g, x)| {
                        if *x > 0.0 {
                            *g
                        } else if *x < 0.0 {
                            -*g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::SoftmaxRows(a) => {
                let c = node.value.cols();
                let y = node.value.data();
                let mut d = vec![0.0; y.len()];
                if c > 0 {
                    for ((dr, yr), gr) in d
                        .chunks_exact_mut(c)
                        .zip(y.chunks_exact(c))
                        .zip(gd.chunks_exact(c))
                    {
                        let s = dot(gr, yr);
                        for j in 0..c {
                            dr[j] = yr[j] * (gr[j] - s);
                        }
                    }
                }
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.wants(*p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, *p, self.like(*p, d));
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let cols = self.value(*x).cols();
                let w = node.value.cols();
                let rows = node.value.rows();
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + w]
                        .copy_from_slice(&gd[r * w..(r + 1) * w]);
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, self.like(*x, gd.to_vec()));
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, self.like(*x, vec![gd[0]; n]));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let v = if n == 0 { 0.0 } else { gd[0] / n as f64 };
                self.accumulate(grads, *x, self.like(*x, vec![v; n]));
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c) = node.value.dims2("batch_norm").unwrap();
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for i in 0..n {
                    for j in 0..c {
                        sum_g[j] += gd[i * c + j];
                        sum_gx[j] += gd[i * c + j] * xhat[i * c + j];
                    }
                }
                if self.wants(*x) {
                    let nf = n as f64;
                    let mut d = vec![0.0; n * c];
                    for i in 0..n {
                        for j in 0..c {
                            let k = i * c + j;
                            d[k] = gam[j] * inv_std[j] / nf
                                * (nf * gd[k] - sum_g[j] - xhat[k] * sum_gx[j]);
                        }
                    }
                    self.accumulate(grads, *x, self.like(*x, d));
                }
                if self.wants(*gamma) {
                    self.accumulate(grads, *gamma, self.like(*gamma, sum_gx));
                }
                if self.wants(*beta) {
                    self.accumulate(grads, *beta, self.like(*beta, sum_g));
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (n, c) = node.value.dims2("batch_norm").unwrap();
                let gam = self.value(*gamma).data();
                let xs = self.value(*x).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                let mut d = vec![0.0; n * c];
                for i in 0..n {
                    for j in 0..c {
                        let k = i * c + j;
                        sum_g[j] += gd[k];
                        sum_gx[j] += gd[k] * (xs[k] - mean[j]) * inv_std[j];
                        d[k] = gd[k] * gam[j] * inv_std[j];
                    }
                }
                self.accumulate(grads, *x, self.like(*x, d));
                if self.wants(*gamma) {
                    self.accumulate(grads, *gamma, self.like(*gamma, sum_gx));
                }
                if self.wants(*beta) {
                    self.accumulate(grads, *beta, self.like(*beta, sum_g));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c) = node.value.dims2("layer_norm").unwrap();
                let gam = self.value(*gamma).data();
                let mut dgam = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut d = vec![0.0; n * c];
                let cf = c as f64;
                for i in 0..n {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..c {
                        let k = i * c + j;
                        dgam[j] += gd[k] * xhat[k];
                        dbeta[j] += gd[k];
                        let dh = gd[k] * gam[j];
                        s1 += dh;
                        s2 += dh * xhat[k];
                    }
                    for j in 0..c {
                        let k = i * c + j;
                        let dh = gd[k] * gam[j];
                        d[k] = inv_std[i] / cf * (cf * dh - s1 - xhat[k] * s2);
                    }
                }
                self.accumulate(grads, *x, self.like(*x, d));
                if self.wants(*gamma) {
                    self.accumulate(grads, *gamma, self.like(*gamma, dgam));
                }
                if self.wants(*beta) {
                    self.accumulate(grads, *beta, self.like(*beta, dbeta));
                }
            }
            Op::SegmentMax { x, argmax } => {
                let c = node.value.cols();
                let mut d = vec![0.0; self.value(*x).len()];
                for (slot, &row) in argmax.iter().enumerate() {
                    if row != BN_UNUSED {
                        d[row * c + slot % c] += gd[slot];
                    }
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::GatherRows { x, idx } => {
                let c = node.value.cols();
                let mut d = vec![0.0; self.value(*x).len()];
                for (r, i) in idx.iter().enumerate() {
                    if let Some(i) = *i {
                        for j in 0..c {
                            d[i * c + j] += gd[r * c + j];
                        }
                    }
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::ApplyRowTransforms { x, mats, seg } => {
                let (n, f) = self.value(*x).dims2("apply_row_transforms").unwrap();
                let ff = f * f;
                let xs = self.value(*x).data();
                let ms = self.value(*mats).data();
                if self.wants(*x) {
                    let mut d = vec![0.0; n * f];
                    for i in 0..n {
                        let mat = &ms[seg[i] * ff..(seg[i] + 1) * ff];
                        let gi = &gd[i * f..(i + 1) * f];
                        for r in 0..f {
                            d[i * f + r] = dot(gi, &mat[r * f..(r + 1) * f]);
                        }
                    }
                    self.accumulate(grads, *x, self.like(*x, d));
                }
                if self.wants(*mats) {
                    let mut d = vec![0.0; ms.len()];
                    for i in 0..n {
                        let dm = &mut d[seg[i] * ff..(seg[i] + 1) * ff];
                        let gi = &gd[i * f..(i + 1) * f];
                        for r in 0..f {
                            let xv = xs[i * f + r];
                            for (o, gv) in dm[r * f..(r + 1) * f].iter_mut().zip(gi) {
                                *o += xv * gv;
                            }
                        }
                    }
                    self.accumulate(grads, *mats, self.like(*mats, d));
                }
            }
            Op::WeightedSum { w, v } => {
                let (q, k) = self.value(*w).dims2("weighted_sum").unwrap();
                let f = self.value(*v).cols();
                let ws = self.value(*w).data();
                let vs = self.value(*v).data();
                if self.wants(*w) {
                    let mut d = vec![0.0; q * k];
                    for qi in 0..q {
                        let gq = &gd[qi * f..(qi + 1) * f];
                        for ki in 0..k {
                            let r = qi * k + ki;
                            d[r] = dot(gq, &vs[r * f..(r + 1) * f]);
                        }
                    }
                    self.accumulate(grads, *w, self.like(*w, d));
                }
                if self.wants(*v) {
                    let mut d = vec![0.0; vs.len()];
                    for qi in 0..q {
                        let gq = &gd[qi * f..(qi + 1) * f];
                        for ki in 0..k {
                            let r = qi * k + ki;
                            let wv = ws[r];
                            for (o, gv) in d[r * f..(r + 1) * f].iter_mut().zip(gq) {
                                *o = wv * gv;
                            }
                        }
                    }
                    self.accumulate(grads, *v, self.like(*v, d));
                }
            }
            Op::GroupScores { a, b, group } => {
                let group = *group;
                let (n, f) = self.value(*a).dims2("group_scores").unwrap();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut da = vec![0.0; n * f];
                let mut db = vec![0.0; n * f];
                for g0 in (0..n).step_by(group) {
                    for i in 0..group {
                        for j in 0..group {
                            let s = gd[(g0 + i) * group + j];
                            if s == 0.0 {
                                continue;
                            }
                            let (ri, rj) = (g0 + i, g0 + j);
                            for t in 0..f {
                                da[ri * f + t] += s * bv[rj * f + t];
                                db[rj * f + t] += s * av[ri * f + t];
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, self.like(*a, da));
                self.accumulate(grads, *b, self.like(*b, db));
            }
            Op::GroupMix { p, v, group } => {
                let group = *group;
                let (n, f) = self.value(*v).dims2("group_mix").unwrap();
                let (pv, vv) = (self.value(*p).data(), self.value(*v).data());
                let mut dp = vec![0.0; n * group];
                let mut dv = vec![0.0; n * f];
                for g0 in (0..n).step_by(group) {
                    for i in 0..group {
                        let gi = &gd[(g0 + i) * f..(g0 + i + 1) * f];
                        for j in 0..group {
                            let rj = g0 + j;
                            dp[(g0 + i) * group + j] = dot(gi, &vv[rj * f..(rj + 1) * f]);
                            let w = pv[(g0 + i) * group + j];
                            for (o, gv) in dv[rj * f..(rj + 1) * f].iter_mut().zip(gi) {
                                *o += w * gv;
                            }
                        }
                    }
                }
                self.accumulate(grads, *p, self.like(*p, dp));
                self.accumulate(grads, *v, self.like(*v, dv));
            }
            Op::RankSoftmax { logits, counts } => {
                let k = self.value(*logits).len();
                let y = node.value.data();
                let mut d = vec![0.0; k];
                for (r, &n) in counts.iter().enumerate() {
                    let yr = &y[r * k..r * k + n];
                    let gr = &gd[r * k..r * k + n];
                    let s = dot(gr, yr);
                    for j in 0..n {
                        d[j] += yr[j] * (gr[j] - s);
                    }
                }
                self.accumulate(grads, *logits, self.like(*logits, d));
            }
            Op::BceWithLogits { logits, targets } => {
                let l = self.value(*logits).data();
                let n = targets.len().max(1) as f64;
                let d = l
                    .iter()
                    .zip(targets)
                    .map(|(x, y)| gd[0] * (sigmoid(*x) - y) / n)
                    .collect();
                self.accumulate(grads, *logits, self.like(*logits, d));
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn col_sums(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    if cols == 0 {
        return out;
    }
    for row in data.chunks_exact(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}
