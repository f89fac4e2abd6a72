//! The computation graph: op records, forward evaluation, backward pass.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{GrlConfig, Phase};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Exponential-moving-average statistics kept by a batch-norm layer for
/// eval-mode normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    /// Fresh statistics: mean 0, variance 1.
    pub fn new(n_features: usize) -> Self {
        RunningStats { mean: vec![0.0; n_features], var: vec![1.0; n_features] }
    }

    fn ema_update(&mut self, mean: &[f64], var: &[f64], momentum: f64) {
        for j in 0..self.mean.len() {
            self.mean[j] = momentum * self.mean[j] + (1.0 - momentum) * mean[j];
            self.var[j] = momentum * self.var[j] + (1.0 - momentum) * var[j];
        }
    }
}

enum Op {
    Leaf,
    Conv1d { input: NodeId, kernels: NodeId, bias: NodeId, stride: usize },
    MaxPool1d { input: NodeId, stride: usize, size: usize, argmax: Vec<u32> },
    Relu { input: NodeId },
    Dense { input: NodeId, weights: NodeId, bias: NodeId },
    RowDot { feats: NodeId, query: NodeId },
    Softmax1d { input: NodeId },
    WeightedRowSum { weights: NodeId, feats: NodeId },
    AppendRow { matrix: NodeId, row: NodeId },
    StackRows { rows: Vec<NodeId> },
    Flatten { input: NodeId },
    SliceRows { input: NodeId, start: usize },
    ConcatRows { a: NodeId, b: NodeId },
    /// `stats` is `None` in eval mode (running statistics captured into
    /// `mean`/`inv_std` as constants).
    BatchNorm { input: NodeId, gamma: NodeId, shift: NodeId, stats: Option<NodeId>, mean: Vec<f64>, inv_std: Vec<f64> },
    GradReverse { input: NodeId, beta: f64 },
    Dropout { input: NodeId, mask: Vec<f64> },
    SoftmaxCrossEntropy { logits: NodeId, targets: Vec<f64>, probs: Vec<f64> },
    WeightedSum { input: NodeId, coeffs: Vec<f64> },
    LinComb { terms: Vec<(NodeId, f64)> },
    SumSquares { input: NodeId },
    SumAbs { input: NodeId },
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the tape
/// itself is a topological order and the backward pass is a single reverse
/// sweep visiting each node exactly once.
pub struct Graph {
    ops: Vec<Op>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { ops: Vec::new(), values: Vec::new(), grads: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let grad = Tensor::zeros(value.shape());
        self.ops.push(op);
        self.values.push(value);
        self.grads.push(grad);
        NodeId(self.ops.len() - 1)
    }

    /// Record an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn grad(&self, id: NodeId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn node_count(&self) -> usize {
        self.ops.len()
    }

    // ---- operators -------------------------------------------------------

    /// Valid (no padding) 1-D convolution over time.
    ///
    /// `input` is `T x D`, `kernels` is `F x K x D`, `bias` is `F`; the
    /// output is `T' x F` with `T' = (T - K)/stride + 1`.
    pub fn conv1d(&mut self, input: NodeId, kernels: NodeId, bias: NodeId, stride: usize) -> Result<NodeId> {
        let x = self.value(input);
        let w = self.value(kernels);
        let b = self.value(bias);
        if x.rank() != 2 || w.rank() != 3 || b.rank() != 1 {
            return Err(Error::Dimension("conv1d: want input TxD, kernels FxKxD, bias F".into()));
        }
        let (t, d) = (x.shape()[0], x.shape()[1]);
        let (f, k, kd) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        if kd != d {
            return Err(Error::Dimension(format!(
                "conv1d: kernel depth {kd} does not match input channels {d}"
            )));
        }
        if b.numel() != f {
            return Err(Error::Dimension(format!("conv1d: bias length {} != {f} filters", b.numel())));
        }
        if stride == 0 {
            return Err(Error::Dimension("conv1d: stride must be >= 1".into()));
        }
        if t < k {
            return Err(Error::Dimension(format!("conv1d: input length {t} shorter than kernel {k}")));
        }
        let t_out = (t - k) / stride + 1;
        let mut out = vec![0.0; t_out * f];
        let xd = x.data();
        let wd = w.data();
        let bd = b.data();
        for ti in 0..t_out {
            let base = ti * stride;
            for fi in 0..f {
                let mut acc = bd[fi];
                for ki in 0..k {
                    let xr = &xd[(base + ki) * d..(base + ki + 1) * d];
                    let wr = &wd[(fi * k + ki) * d..(fi * k + ki + 1) * d];
                    for di in 0..d {
                        acc += xr[di] * wr[di];
                    }
                }
                out[ti * f + fi] = acc;
            }
        }
        Ok(self.push(
            Op::Conv1d { input, kernels, bias, stride },
            Tensor::new(&[t_out, f], out)?,
        ))
    }

    /// Valid max pooling over time; `input` is `T x F`.
    /// Gradient is routed to the argmax of each window, ties to the lowest
    /// index.
    pub fn maxpool1d(&mut self, input: NodeId, size: usize, stride: usize) -> Result<NodeId> {
        let x = self.value(input);
        if x.rank() != 2 {
            return Err(Error::Dimension("maxpool1d: want input TxF".into()));
        }
        let (t, f) = (x.shape()[0], x.shape()[1]);
        if size == 0 || stride == 0 {
            return Err(Error::Dimension("maxpool1d: size and stride must be >= 1".into()));
        }
        if size > t {
            return Err(Error::Dimension(format!("maxpool1d: window {size} larger than input {t}")));
        }
        let t_out = (t - size) / stride + 1;
        let mut out = vec![0.0; t_out * f];
        let mut argmax = vec![0u32; t_out * f];
        for ti in 0..t_out {
            let base = ti * stride;
            for fi in 0..f {
                let mut best = x.at(base, fi);
                let mut best_row = base;
                for ki in 1..size {
                    let v = x.at(base + ki, fi);
                    if v > best {
                        best = v;
                        best_row = base + ki;
                    }
                }
                out[ti * f + fi] = best;
                argmax[ti * f + fi] = best_row as u32;
            }
        }
        Ok(self.push(
            Op::MaxPool1d { input, stride, size, argmax },
            Tensor::new(&[t_out, f], out)?,
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out = Tensor::new(
            self.value(input).shape(),
            self.value(input).data().iter().map(|&v| v.max(0.0)).collect(),
        )
        .expect("relu preserves shape");
        self.push(Op::Relu { input }, out)
    }

    /// Affine map of a batch: `input` `N x I`, `weights` `I x O`, `bias` `O`.
    pub fn dense(&mut self, input: NodeId, weights: NodeId, bias: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let w = self.value(weights);
        let b = self.value(bias);
        if x.rank() != 2 || w.rank() != 2 || b.rank() != 1 {
            return Err(Error::Dimension("dense: want input NxI, weights IxO, bias O".into()));
        }
        let (n, i) = (x.shape()[0], x.shape()[1]);
        let (wi, o) = (w.shape()[0], w.shape()[1]);
        if wi != i || b.numel() != o {
            return Err(Error::Dimension(format!(
                "dense: input NxI={n}x{i} incompatible with weights {wi}x{o} / bias {}",
                b.numel()
            )));
        }
        let mut out = vec![0.0; n * o];
        for r in 0..n {
            let xr = x.row(r);
            for (c, slot) in out[r * o..(r + 1) * o].iter_mut().enumerate() {
                let mut acc = b.data()[c];
                for ii in 0..i {
                    acc += xr[ii] * w.at(ii, c);
                }
                *slot = acc;
            }
        }
        Ok(self.push(Op::Dense { input, weights, bias }, Tensor::new(&[n, o], out)?))
    }

    /// Per-row dot products against a query vector: `feats` `T x F`,
    /// `query` `F`, output `T`.
    pub fn row_dot(&mut self, feats: NodeId, query: NodeId) -> Result<NodeId> {
        let x = self.value(feats);
        let q = self.value(query);
        if x.rank() != 2 || q.rank() != 1 || q.numel() != x.shape()[1] {
            return Err(Error::Dimension("row_dot: want feats TxF and query F".into()));
        }
        let scores: Vec<f64> = (0..x.shape()[0])
            .map(|t| x.row(t).iter().zip(q.data()).map(|(a, b)| a * b).sum())
            .collect();
        Ok(self.push(Op::RowDot { feats, query }, Tensor::vector(scores)))
    }

    /// Softmax over a rank-1 tensor, computed with max subtraction.
    pub fn softmax1d(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        if x.rank() != 1 {
            return Err(Error::Dimension("softmax1d: want a rank-1 input".into()));
        }
        let m = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = x.data().iter().map(|&v| (v - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let out: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        Ok(self.push(Op::Softmax1d { input }, Tensor::vector(out)))
    }

    /// Convex combination of rows: `weights` `T`, `feats` `T x F`, output `F`.
    pub fn weighted_row_sum(&mut self, weights: NodeId, feats: NodeId) -> Result<NodeId> {
        let w = self.value(weights);
        let x = self.value(feats);
        if w.rank() != 1 || x.rank() != 2 || w.numel() != x.shape()[0] {
            return Err(Error::Dimension("weighted_row_sum: want weights T and feats TxF".into()));
        }
        let f = x.shape()[1];
        let mut out = vec![0.0; f];
        for t in 0..w.numel() {
            let wt = w.data()[t];
            for (o, v) in out.iter_mut().zip(x.row(t)) {
                *o += wt * v;
            }
        }
        Ok(self.push(Op::WeightedRowSum { weights, feats }, Tensor::vector(out)))
    }

    /// Softmax attention pooling over the rows of `feats` with a global
    /// query: returns `(weights, pooled)` where `weights` sums to 1 and
    /// `pooled = sum_i weights_i * feats_i`.
    pub fn attention_pool(&mut self, feats: NodeId, query: NodeId) -> Result<(NodeId, NodeId)> {
        let scores = self.row_dot(feats, query)?;
        let weights = self.softmax1d(scores)?;
        let pooled = self.weighted_row_sum(weights, feats)?;
        Ok((weights, pooled))
    }

    /// Append a rank-1 `row` below `matrix` along the time dimension.
    pub fn append_row(&mut self, matrix: NodeId, row: NodeId) -> Result<NodeId> {
        let m = self.value(matrix);
        let r = self.value(row);
        if m.rank() != 2 || r.rank() != 1 || r.numel() != m.shape()[1] {
            return Err(Error::Dimension("append_row: want matrix TxF and row F".into()));
        }
        let (t, f) = (m.shape()[0], m.shape()[1]);
        let mut data = Vec::with_capacity((t + 1) * f);
        data.extend_from_slice(m.data());
        data.extend_from_slice(r.data());
        Ok(self.push(Op::AppendRow { matrix, row }, Tensor::new(&[t + 1, f], data)?))
    }

    /// Stack rank-1 tensors of equal length into an `N x F` matrix.
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        if rows.is_empty() {
            return Err(Error::Dimension("stack_rows: no rows".into()));
        }
        let f = self.value(rows[0]).numel();
        let mut data = Vec::with_capacity(rows.len() * f);
        for &r in rows {
            let v = self.value(r);
            if v.rank() != 1 || v.numel() != f {
                return Err(Error::Dimension("stack_rows: rows must be rank-1 of equal length".into()));
            }
            data.extend_from_slice(v.data());
        }
        Ok(self.push(Op::StackRows { rows: rows.to_vec() }, Tensor::new(&[rows.len(), f], data)?))
    }

    /// Reshape to rank-1, row-major order.
    pub fn flatten(&mut self, input: NodeId) -> NodeId {
        let v = self.value(input);
        let out = Tensor::vector(v.data().to_vec());
        self.push(Op::Flatten { input }, out)
    }

    /// Rows `start .. start + len` of a rank-2 tensor.
    pub fn slice_rows(&mut self, input: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let x = self.value(input);
        if x.rank() != 2 {
            return Err(Error::Dimension("slice_rows: want a rank-2 input".into()));
        }
        let (n, f) = (x.shape()[0], x.shape()[1]);
        if len == 0 || start + len > n {
            return Err(Error::Dimension(format!(
                "slice_rows: rows {start}..{} out of bounds for {n} rows",
                start + len
            )));
        }
        let data = x.data()[start * f..(start + len) * f].to_vec();
        Ok(self.push(Op::SliceRows { input, start }, Tensor::new(&[len, f], data)?))
    }

    /// Vertical concatenation of two rank-2 tensors with equal column count.
    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(Error::Dimension("concat_rows: want rank-2 inputs with equal columns".into()));
        }
        let f = ta.shape()[1];
        let n = ta.shape()[0] + tb.shape()[0];
        let mut data = Vec::with_capacity(n * f);
        data.extend_from_slice(ta.data());
        data.extend_from_slice(tb.data());
        Ok(self.push(Op::ConcatRows { a, b }, Tensor::new(&[n, f], data)?))
    }

    /// Train-mode batch normalization of `input` (`N x F`) using statistics
    /// computed over the rows of `stats_source` (`M x F`, `M >= 2`).
    ///
    /// `stats_source` may be the same node as `input` or a different slice
    /// of the batch; the backward pass accounts for the mean/variance
    /// dependence either way. When `update` is given, the running statistics
    /// receive an EMA update from this batch's statistics.
    pub fn batch_norm_train(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        shift: NodeId,
        stats_source: NodeId,
        eps: f64,
        update: Option<(&mut RunningStats, f64)>,
    ) -> Result<NodeId> {
        let x = self.value(input);
        let y = self.value(stats_source);
        let g = self.value(gamma);
        let s = self.value(shift);
        if x.rank() != 2 || y.rank() != 2 {
            return Err(Error::Dimension("batch_norm: want rank-2 input and stats source".into()));
        }
        let f = x.shape()[1];
        if y.shape()[1] != f || g.numel() != f || s.numel() != f {
            return Err(Error::Dimension("batch_norm: feature dimensions disagree".into()));
        }
        let m = y.shape()[0];
        if m < 2 {
            return Err(Error::DegenerateBatch(format!(
                "batch statistics need at least 2 rows, got {m}"
            )));
        }
        let mut mean = vec![0.0; f];
        for r in 0..m {
            for (j, v) in y.row(r).iter().enumerate() {
                mean[j] += v;
            }
        }
        for mj in mean.iter_mut() {
            *mj /= m as f64;
        }
        let mut var = vec![0.0; f];
        for r in 0..m {
            for (j, v) in y.row(r).iter().enumerate() {
                let d = v - mean[j];
                var[j] += d * d;
            }
        }
        for vj in var.iter_mut() {
            *vj /= m as f64;
        }
        if let Some((running, momentum)) = update {
            running.ema_update(&mean, &var, momentum);
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let out = bn_forward(x, g.data(), s.data(), &mean, &inv_std);
        Ok(self.push(
            Op::BatchNorm { input, gamma, shift, stats: Some(stats_source), mean, inv_std },
            out,
        ))
    }

    /// Eval-mode batch normalization: running statistics are treated as
    /// constants, so the result is row-wise independent of batch size.
    pub fn batch_norm_eval(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        shift: NodeId,
        running: &RunningStats,
        eps: f64,
    ) -> Result<NodeId> {
        let x = self.value(input);
        let g = self.value(gamma);
        let s = self.value(shift);
        if x.rank() != 2 {
            return Err(Error::Dimension("batch_norm: want a rank-2 input".into()));
        }
        let f = x.shape()[1];
        if running.mean.len() != f || g.numel() != f || s.numel() != f {
            return Err(Error::Dimension("batch_norm: feature dimensions disagree".into()));
        }
        let inv_std: Vec<f64> = running.var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mean = running.mean.clone();
        let out = bn_forward(x, g.data(), s.data(), &mean, &inv_std);
        Ok(self.push(Op::BatchNorm { input, gamma, shift, stats: None, mean, inv_std }, out))
    }

    /// Gradient reversal: identity forward, `-beta`-scaled backward.
    pub fn grad_reverse(&mut self, input: NodeId, cfg: GrlConfig) -> NodeId {
        let out = self.value(input).clone();
        self.push(Op::GradReverse { input, beta: cfg.beta() }, out)
    }

    /// Inverted dropout. In train mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1/(1-rate)`; in eval
    /// mode this is the identity (the input node is returned unchanged).
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: NodeId,
        rate: f64,
        phase: Phase,
        rng: &mut R,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must be in [0,1), got {rate}")));
        }
        if phase == Phase::Eval || rate == 0.0 {
            return Ok(input);
        }
        let scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(input).numel())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale })
            .collect();
        Ok(self.dropout_with_mask(input, &mask))
    }

    /// Dropout with an externally fixed mask of per-element factors
    /// (each 0 or the survivor scale). Used by gradient checks, where the
    /// graph must be rebuilt bit-identically.
    pub fn dropout_with_mask(&mut self, input: NodeId, mask: &[f64]) -> NodeId {
        let x = self.value(input);
        debug_assert_eq!(mask.len(), x.numel());
        let out = Tensor::new(
            x.shape(),
            x.data().iter().zip(mask).map(|(v, m)| v * m).collect(),
        )
        .expect("dropout preserves shape");
        self.push(Op::Dropout { input, mask: mask.to_vec() }, out)
    }

    /// Mean softmax cross-entropy over the rows of `logits` (`N x C`)
    /// against one-hot targets, computed in log-sum-exp form.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, onehot: &Tensor) -> Result<NodeId> {
        let z = self.value(logits);
        if z.rank() != 2 || onehot.shape() != z.shape() {
            return Err(Error::Dimension("softmax_cross_entropy: logits and targets must both be NxC".into()));
        }
        let (n, c) = (z.shape()[0], z.shape()[1]);
        if c < 2 {
            return Err(Error::Label("softmax_cross_entropy: need at least 2 classes".into()));
        }
        for r in 0..n {
            let row = onehot.row(r);
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            if ones != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Label(format!("row {r} is not one-hot")));
            }
        }
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        for r in 0..n {
            let row = z.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                probs[r * c + j] = e;
                sum += e;
            }
            for p in &mut probs[r * c..(r + 1) * c] {
                *p /= sum;
            }
            let lse = m + sum.ln();
            let target: f64 = row.iter().zip(onehot.row(r)).map(|(a, b)| a * b).sum();
            total += lse - target;
        }
        let loss = total / n as f64;
        Ok(self.push(
            Op::SoftmaxCrossEntropy { logits, targets: onehot.data().to_vec(), probs },
            Tensor::scalar(loss),
        ))
    }

    /// Fixed-coefficient contraction to a scalar: `sum_i coeffs[i] * x[i]`.
    pub fn weighted_sum(&mut self, input: NodeId, coeffs: &[f64]) -> Result<NodeId> {
        let x = self.value(input);
        if coeffs.len() != x.numel() {
            return Err(Error::Dimension("weighted_sum: coefficient count mismatch".into()));
        }
        let v = x.data().iter().zip(coeffs).map(|(a, b)| a * b).sum();
        Ok(self.push(Op::WeightedSum { input, coeffs: coeffs.to_vec() }, Tensor::scalar(v)))
    }

    /// Linear combination of scalar nodes.
    pub fn lin_comb(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let mut v = 0.0;
        for &(id, coef) in terms {
            if self.value(id).numel() != 1 {
                return Err(Error::Usage("lin_comb: all terms must be scalars".into()));
            }
            v += coef * self.value(id).item();
        }
        Ok(self.push(Op::LinComb { terms: terms.to_vec() }, Tensor::scalar(v)))
    }

    /// Sum of squared entries, as a scalar.
    pub fn sum_squares(&mut self, input: NodeId) -> NodeId {
        let v = self.value(input).data().iter().map(|x| x * x).sum();
        self.push(Op::SumSquares { input }, Tensor::scalar(v))
    }

    /// Sum of absolute entries, as a scalar (subgradient 0 at 0).
    pub fn sum_abs(&mut self, input: NodeId) -> NodeId {
        let v = self.value(input).data().iter().map(|x| x.abs()).sum();
        self.push(Op::SumAbs { input }, Tensor::scalar(v))
    }

    // ---- backward --------------------------------------------------------

    /// Accumulate gradients of the scalar node `loss` into every node of the
    /// graph, visiting nodes in reverse topological order exactly once.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(Error::Usage("backward: loss must be a scalar".into()));
        }
        self.grads[loss.0].data_mut()[0] = 1.0;
        for i in (0..=loss.0).rev() {
            let (lower_grads, upper) = self.grads.split_at_mut(i);
            let g = &upper[0];
            // Nodes with identically zero gradient contribute nothing.
            if g.data().iter().all(|&v| v == 0.0) {
                continue;
            }
            match &self.ops[i] {
                Op::Leaf => {}
                Op::Conv1d { input, kernels, bias, stride } => {
                    let x = &self.values[input.0];
                    let w = &self.values[kernels.0];
                    let (t_out, f) = (g.shape()[0], g.shape()[1]);
                    let d = x.shape()[1];
                    let k = w.shape()[1];
                    {
                        let db = lower_grads[bias.0].data_mut();
                        for ti in 0..t_out {
                            let gr = g.row(ti);
                            for fi in 0..f {
                                db[fi] += gr[fi];
                            }
                        }
                    }
                    {
                        let dk = lower_grads[kernels.0].data_mut();
                        for ti in 0..t_out {
                            let base = ti * stride;
                            let gr = g.row(ti);
                            for fi in 0..f {
                                let gv = gr[fi];
                                if gv == 0.0 {
                                    continue;
                                }
                                for ki in 0..k {
                                    let xr = &x.data()[(base + ki) * d..(base + ki + 1) * d];
                                    let dkr = &mut dk[(fi * k + ki) * d..(fi * k + ki + 1) * d];
                                    for di in 0..d {
                                        dkr[di] += gv * xr[di];
                                    }
                                }
                            }
                        }
                    }
                    {
                        let dx = lower_grads[input.0].data_mut();
                        for ti in 0..t_out {
                            let base = ti * stride;
                            let gr = g.row(ti);
                            for fi in 0..f {
                                let gv = gr[fi];
                                if gv == 0.0 {
                                    continue;
                                }
                                for ki in 0..k {
                                    let wr = &w.data()[(fi * k + ki) * d..(fi * k + ki + 1) * d];
                                    let dxr = &mut dx[(base + ki) * d..(base + ki + 1) * d];
                                    for di in 0..d {
                                        dxr[di] += gv * wr[di];
                                    }
                                }
                            }
                        }
                    }
                }
                Op::MaxPool1d { input, argmax, .. } => {
                    let f = g.shape()[1];
                    let dx = lower_grads[input.0].data_mut();
                    for (idx, &src_row) in argmax.iter().enumerate() {
                        let fi = idx % f;
                        dx[src_row as usize * f + fi] += g.data()[idx];
                    }
                }
                Op::Relu { input } => {
                    let x = &self.values[input.0];
                    let dx = lower_grads[input.0].data_mut();
                    for (j, (&gv, &xv)) in g.data().iter().zip(x.data()).enumerate() {
                        if xv > 0.0 {
                            dx[j] += gv;
                        }
                    }
                }
                Op::Dense { input, weights, bias } => {
                    let x = &self.values[input.0];
                    let w = &self.values[weights.0];
                    let (n, o) = (g.shape()[0], g.shape()[1]);
                    let i_dim = x.shape()[1];
                    {
                        let db = lower_grads[bias.0].data_mut();
                        for r in 0..n {
                            let gr = g.row(r);
                            for c in 0..o {
                                db[c] += gr[c];
                            }
                        }
                    }
                    {
                        let dw = lower_grads[weights.0].data_mut();
                        for r in 0..n {
                            let gr = g.row(r);
                            let xr = x.row(r);
                            for ii in 0..i_dim {
                                let xv = xr[ii];
                                if xv == 0.0 {
                                    continue;
                                }
                                let dwr = &mut dw[ii * o..(ii + 1) * o];
                                for c in 0..o {
                                    dwr[c] += gr[c] * xv;
                                }
                            }
                        }
                    }
                    {
                        let dx = lower_grads[input.0].data_mut();
                        for r in 0..n {
                            let gr = g.row(r);
                            let dxr = &mut dx[r * i_dim..(r + 1) * i_dim];
                            for ii in 0..i_dim {
                                let wr = &w.data()[ii * o..(ii + 1) * o];
                                let mut acc = 0.0;
                                for c in 0..o {
                                    acc += gr[c] * wr[c];
                                }
                                dxr[ii] += acc;
                            }
                        }
                    }
                }
                Op::RowDot { feats, query } => {
                    let x = &self.values[feats.0];
                    let q = &self.values[query.0];
                    let f = x.shape()[1];
                    for t in 0..g.numel() {
                        let gv = g.data()[t];
                        if gv == 0.0 {
                            continue;
                        }
                        for j in 0..f {
                            lower_grads[feats.0].data_mut()[t * f + j] += gv * q.data()[j];
                            lower_grads[query.0].data_mut()[j] += gv * x.at(t, j);
                        }
                    }
                }
                Op::Softmax1d { input } => {
                    let y = &self.values[i];
                    let dot: f64 = g.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
                    let dx = lower_grads[input.0].data_mut();
                    for (j, (&gv, &yv)) in g.data().iter().zip(y.data()).enumerate() {
                        dx[j] += yv * (gv - dot);
                    }
                }
                Op::WeightedRowSum { weights, feats } => {
                    let w = &self.values[weights.0];
                    let x = &self.values[feats.0];
                    let f = x.shape()[1];
                    for t in 0..w.numel() {
                        let mut acc = 0.0;
                        let wt = w.data()[t];
                        for j in 0..f {
                            acc += g.data()[j] * x.at(t, j);
                            lower_grads[feats.0].data_mut()[t * f + j] += wt * g.data()[j];
                        }
                        lower_grads[weights.0].data_mut()[t] += acc;
                    }
                }
                Op::AppendRow { matrix, row } => {
                    let t = self.values[matrix.0].shape()[0];
                    let f = self.values[matrix.0].shape()[1];
                    for (j, &gv) in g.data()[..t * f].iter().enumerate() {
                        lower_grads[matrix.0].data_mut()[j] += gv;
                    }
                    for (j, &gv) in g.data()[t * f..].iter().enumerate() {
                        lower_grads[row.0].data_mut()[j] += gv;
                    }
                }
                Op::StackRows { rows } => {
                    let f = g.shape()[1];
                    for (r, id) in rows.iter().enumerate() {
                        let dst = lower_grads[id.0].data_mut();
                        for (j, &gv) in g.data()[r * f..(r + 1) * f].iter().enumerate() {
                            dst[j] += gv;
                        }
                    }
                }
                Op::Flatten { input } => {
                    let dx = lower_grads[input.0].data_mut();
                    for (j, &gv) in g.data().iter().enumerate() {
                        dx[j] += gv;
                    }
                }
                Op::SliceRows { input, start } => {
                    let f = g.shape()[1];
                    let dx = lower_grads[input.0].data_mut();
                    for (j, &gv) in g.data().iter().enumerate() {
                        dx[start * f + j] += gv;
                    }
                }
                Op::ConcatRows { a, b } => {
                    let na = self.values[a.0].shape()[0];
                    let f = g.shape()[1];
                    for (j, &gv) in g.data()[..na * f].iter().enumerate() {
                        lower_grads[a.0].data_mut()[j] += gv;
                    }
                    for (j, &gv) in g.data()[na * f..].iter().enumerate() {
                        lower_grads[b.0].data_mut()[j] += gv;
                    }
                }
                Op::BatchNorm { input, gamma, shift, stats, mean, inv_std } => {
                    let x = &self.values[input.0];
                    let gam = &self.values[gamma.0];
                    let (n, f) = (g.shape()[0], g.shape()[1]);
                    let mut col_g_sum = vec![0.0; f]; // sum_i G_ij
                    let mut col_gx_sum = vec![0.0; f]; // sum_i G_ij (x_ij - mu_j)
                    for r in 0..n {
                        let gr = g.row(r);
                        let xr = x.row(r);
                        for j in 0..f {
                            col_g_sum[j] += gr[j];
                            col_gx_sum[j] += gr[j] * (xr[j] - mean[j]);
                        }
                    }
                    {
                        let ds = lower_grads[shift.0].data_mut();
                        for j in 0..f {
                            ds[j] += col_g_sum[j];
                        }
                    }
                    {
                        let dgam = lower_grads[gamma.0].data_mut();
                        for j in 0..f {
                            dgam[j] += col_gx_sum[j] * inv_std[j];
                        }
                    }
                    {
                        let dx = lower_grads[input.0].data_mut();
                        for r in 0..n {
                            let gr = g.row(r);
                            let dxr = &mut dx[r * f..(r + 1) * f];
                            for j in 0..f {
                                dxr[j] += gr[j] * gam.data()[j] * inv_std[j];
                            }
                        }
                    }
                    // Statistics path (train mode only): mean and variance
                    // are functions of the stats-source rows.
                    if let Some(stats_id) = stats {
                        let y = &self.values[stats_id.0];
                        let m = y.shape()[0];
                        let dy = lower_grads[stats_id.0].data_mut();
                        for j in 0..f {
                            // d/dmu and the (y - mu)-proportional variance
                            // term, both spread 1/M over the stats rows.
                            let d_mu = -inv_std[j] * gam.data()[j] * col_g_sum[j] / m as f64;
                            let d_var2 =
                                -gam.data()[j] * inv_std[j].powi(3) * col_gx_sum[j] / m as f64;
                            for r in 0..m {
                                dy[r * f + j] += d_mu + d_var2 * (y.at(r, j) - mean[j]);
                            }
                        }
                    }
                }
                Op::GradReverse { input, beta } => {
                    let dx = lower_grads[input.0].data_mut();
                    for (j, &gv) in g.data().iter().enumerate() {
                        dx[j] += -beta * gv;
                    }
                }
                Op::Dropout { input, mask } => {
                    let dx = lower_grads[input.0].data_mut();
                    for (j, (&gv, &mv)) in g.data().iter().zip(mask).enumerate() {
                        dx[j] += gv * mv;
                    }
                }
                Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                    let gv = g.item();
                    let n = self.values[logits.0].shape()[0] as f64;
                    let dz = lower_grads[logits.0].data_mut();
                    for (j, (&p, &y)) in probs.iter().zip(targets).enumerate() {
                        dz[j] += gv * (p - y) / n;
                    }
                }
                Op::WeightedSum { input, coeffs } => {
                    let gv = g.item();
                    let dx = lower_grads[input.0].data_mut();
                    for (j, &c) in coeffs.iter().enumerate() {
                        dx[j] += gv * c;
                    }
                }
                Op::LinComb { terms } => {
                    let gv = g.item();
                    for &(id, coef) in terms {
                        lower_grads[id.0].data_mut()[0] += coef * gv;
                    }
                }
                Op::SumSquares { input } => {
                    let gv = g.item();
                    let x = &self.values[input.0];
                    let dx = lower_grads[input.0].data_mut();
                    for (j, &xv) in x.data().iter().enumerate() {
                        dx[j] += 2.0 * xv * gv;
                    }
                }
                Op::SumAbs { input } => {
                    let gv = g.item();
                    let x = &self.values[input.0];
                    let dx = lower_grads[input.0].data_mut();
                    for (j, &xv) in x.data().iter().enumerate() {
                        if xv > 0.0 {
                            dx[j] += gv;
                        } else if xv < 0.0 {
                            dx[j] -= gv;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn bn_forward(x: &Tensor, gamma: &[f64], shift: &[f64], mean: &[f64], inv_std: &[f64]) -> Tensor {
    let (n, f) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; n * f];
    for r in 0..n {
        for j in 0..f {
            out[r * f + j] = gamma[j] * (x.at(r, j) - mean[j]) * inv_std[j] + shift[j];
        }
    }
    Tensor::new(&[n, f], out).expect("bn preserves shape")
}
