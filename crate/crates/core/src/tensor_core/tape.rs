use std::rc::Rc;

use crate::error::{Error, Result};

use super::DenseArray;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(pub(crate) usize);

/// A fused operation that computes its forward pass outside the tape and
/// supplies its own vector-Jacobian product.
pub trait CustomGrad {
    fn name(&self) -> &'static str;

    /// Gradients w.r.t. every input, aligned with the `inputs` slice the op
    /// was registered with.
    fn backward(
        &self,
        grad_out: &DenseArray,
        inputs: &[&DenseArray],
        output: &DenseArray,
    ) -> Vec<DenseArray>;
}

enum Op {
    Leaf { differentiable: bool },
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Scale(ValueId, f64),
    Sigmoid(ValueId),
    Silu(ValueId),
    Exp(ValueId),
    Softplus(ValueId),
    SoftmaxRows(ValueId),
    Linear {
        x: ValueId,
        w: ValueId,
        b: ValueId,
    },
    Conv1d {
        x: ValueId,
        k: ValueId,
        b: ValueId,
        segments: Vec<usize>,
        depthwise: bool,
    },
    LayerNorm {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
    },
    BatchNorm {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
    },
    GatherRows {
        x: ValueId,
        indices: Vec<usize>,
    },
    ScatterRows {
        x: ValueId,
        indices: Vec<usize>,
    },
    SegmentMax {
        x: ValueId,
        argmax: Vec<usize>,
    },
    SumAll(ValueId),
    Custom {
        inputs: Vec<ValueId>,
        op: Rc<dyn CustomGrad>,
    },
}

/// Append-only record of a computation. Parents always precede children, so
/// index order is a topological order and [`Tape::backward`] is a single
/// reverse sweep.
pub struct Tape {
    values: Vec<DenseArray>,
    ops: Vec<Op>,
    grads: Vec<Option<DenseArray>>,
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &DenseArray {
        &self.values[id.0]
    }

    /// Gradient of the last [`Tape::backward`] loss w.r.t. `id`, if any
    /// reached it.
    pub fn grad(&self, id: ValueId) -> Option<&DenseArray> {
        self.grads[id.0].as_ref()
    }

    fn push(&mut self, value: DenseArray, op: Op, context: &str) -> Result<ValueId> {
        value.check_finite(context)?;
        self.values.push(value);
        self.ops.push(op);
        self.grads.push(None);
        Ok(ValueId(self.values.len() - 1))
    }

    /// Differentiable leaf (a parameter or checked input).
    pub fn leaf(&mut self, value: DenseArray) -> Result<ValueId> {
        self.push(value, Op::Leaf { differentiable: true }, "leaf")
    }

    /// Non-differentiable leaf (data the loss is never differentiated by).
    pub fn constant(&mut self, value: DenseArray) -> Result<ValueId> {
        self.push(value, Op::Leaf { differentiable: false }, "constant")
    }

    /// Returns (repeat factor) if `small` broadcasts over the trailing axes
    /// of `big`.
    fn broadcast_factor(big: &DenseArray, small: &DenseArray, op: &'static str) -> Result<usize> {
        if big.shape() == small.shape() {
            return Ok(1);
        }
        if small.numel() == 1 {
            return Ok(big.numel());
        }
        let bs = big.shape();
        let ss = small.shape();
        if ss.len() <= bs.len() && bs[bs.len() - ss.len()..] == *ss {
            return Ok(big.numel() / small.numel());
        }
        Err(Error::ShapeMismatch {
            op,
            msg: format!("cannot broadcast {ss:?} over {bs:?}"),
        })
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        Self::broadcast_factor(av, bv, "add")?;
        let nb = bv.numel();
        let data: Vec<f64> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv.data()[i % nb])
            .collect();
        let shape = av.shape().to_vec();
        self.push(DenseArray::from_vec(&shape, data), Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        Self::broadcast_factor(av, bv, "sub")?;
        let nb = bv.numel();
        let data: Vec<f64> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x - bv.data()[i % nb])
            .collect();
        let shape = av.shape().to_vec();
        self.push(DenseArray::from_vec(&shape, data), Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        Self::broadcast_factor(av, bv, "mul")?;
        let nb = bv.numel();
        let data: Vec<f64> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bv.data()[i % nb])
            .collect();
        let shape = av.shape().to_vec();
        self.push(DenseArray::from_vec(&shape, data), Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: ValueId, factor: f64) -> Result<ValueId> {
        let av = &self.values[a.0];
        let data: Vec<f64> = av.data().iter().map(|&x| x * factor).collect();
        let shape = av.shape().to_vec();
        self.push(
            DenseArray::from_vec(&shape, data),
            Op::Scale(a, factor),
            "scale",
        )
    }

    pub fn sigmoid(&mut self, a: ValueId) -> Result<ValueId> {
        let av = &self.values[a.0];
        let data: Vec<f64> = av.data().iter().map(|&x| stable_sigmoid(x)).collect();
        let shape = av.shape().to_vec();
        self.push(DenseArray::from_vec(&shape, data), Op::Sigmoid(a), "sigmoid")
    }

    /// x * sigmoid(x), the activation used everywhere unqualified sigma
    /// appears in block definitions.
    pub fn silu(&mut self, a: ValueId) -> Result<ValueId> {
        let av = &self.values[a.0];
        let data: Vec<f64> = av
            .data()
            .iter()
            .map(|&x| x * stable_sigmoid(x))
            .collect();
        let shape = av.shape().to_vec();
        self.push(DenseArray::from_vec(&shape, data), Op::Silu(a), "silu")
    }

    pub fn exp(&mut self, a: ValueId) -> Result<ValueId> {
        let av = &self.values[a.0];
        let data: Vec<f64> = av.data().iter().map(|&x| x.exp()).collect();
        let shape = av.shape().to_vec();
        self.push(DenseArray::from_vec(&shape, data), Op::Exp(a), "exp")
    }

    pub fn softplus(&mut self, a: ValueId) -> Result<ValueId> {
        let av = &self.values[a.0];
        let data: Vec<f64> = av.data().iter().map(|&x| stable_softplus(x)).collect();
        let shape = av.shape().to_vec();
        self.push(
            DenseArray::from_vec(&shape, data),
            Op::Softplus(a),
            "softplus",
        )
    }

    pub fn softmax_rows(&mut self, a: ValueId) -> Result<ValueId> {
        let av = &self.values[a.0];
        let (r, c) = (av.rows(), av.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &av.data()[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - m).exp();
                data[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                data[i * c + j] /= sum;
            }
        }
        let shape = av.shape().to_vec();
        self.push(
            DenseArray::from_vec(&shape, data),
            Op::SoftmaxRows(a),
            "softmax_rows",
        )
    }

    /// `x @ w + b` over the trailing axis: x `[.., cin]`, w `[cin, cout]`,
    /// b `[cout]`.
    pub fn linear(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId> {
        let (xv, wv, bv) = (&self.values[x.0], &self.values[w.0], &self.values[b.0]);
        let (cin, cout) = match wv.shape() {
            [cin, cout] => (*cin, *cout),
            s => {
                return Err(Error::ShapeMismatch {
                    op: "linear",
                    msg: format!("weight must be 2-d, got {s:?}"),
                })
            }
        };
        if xv.cols() != cin || bv.shape() != [cout] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                msg: format!(
                    "x {:?} w {:?} b {:?}",
                    xv.shape(),
                    wv.shape(),
                    bv.shape()
                ),
            });
        }
        let rows = xv.rows();
        let mut data = super::matmul(xv, wv, rows, cin, cout);
        for i in 0..rows {
            for j in 0..cout {
                data[i * cout + j] += bv.data()[j];
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = cout;
        self.push(
            DenseArray::from_vec(&shape, data),
            Op::Linear { x, w, b },
            "linear",
        )
    }

    /// Same-padded 1-D convolution along row order. `segments` partitions the
    /// rows into independent sequences; the window never reads across a
    /// boundary. Kernel is `[kw, cin, cout]`, `kw` odd.
    pub fn conv1d(
        &mut self,
        x: ValueId,
        k: ValueId,
        b: ValueId,
        segments: &[usize],
    ) -> Result<ValueId> {
        self.conv1d_impl(x, k, b, segments, false)
    }

    /// Depthwise variant: kernel `[kw, c]`, each channel filtered alone.
    pub fn conv1d_depthwise(
        &mut self,
        x: ValueId,
        k: ValueId,
        b: ValueId,
        segments: &[usize],
    ) -> Result<ValueId> {
        self.conv1d_impl(x, k, b, segments, true)
    }

    fn conv1d_impl(
        &mut self,
        x: ValueId,
        k: ValueId,
        b: ValueId,
        segments: &[usize],
        depthwise: bool,
    ) -> Result<ValueId> {
        let (xv, kv, bv) = (&self.values[x.0], &self.values[k.0], &self.values[b.0]);
        let rows = xv.rows();
        let cin = xv.cols();
        let (kw, cout) = if depthwise {
            match kv.shape() {
                [kw, c] if *c == cin => (*kw, cin),
                s => {
                    return Err(Error::ShapeMismatch {
                        op: "conv1d_depthwise",
                        msg: format!("kernel {s:?} vs {cin} channels"),
                    })
                }
            }
        } else {
            match kv.shape() {
                [kw, kcin, cout] if *kcin == cin => (*kw, *cout),
                s => {
                    return Err(Error::ShapeMismatch {
                        op: "conv1d",
                        msg: format!("kernel {s:?} vs {cin} input channels"),
                    })
                }
            }
        };
        if kw % 2 == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                msg: format!("kernel width {kw} must be odd"),
            });
        }
        if bv.shape() != [cout] {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                msg: format!("bias {:?} vs {cout} output channels", bv.shape()),
            });
        }
        if segments.iter().sum::<usize>() != rows {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                msg: format!("segments sum {} vs {rows} rows", segments.iter().sum::<usize>()),
            });
        }
        let half = kw / 2;
        let mut data = vec![0.0; rows * cout];
        for i in 0..rows {
            for j in 0..cout {
                data[i * cout + j] = bv.data()[j];
            }
        }
        let mut s0 = 0;
        for &len in segments {
            let s1 = s0 + len;
            for pos in s0..s1 {
                let orow = pos * cout;
                for dk in 0..kw {
                    let src = pos as isize + dk as isize - half as isize;
                    if src < s0 as isize || src >= s1 as isize {
                        continue;
                    }
                    let xrow = src as usize * cin;
                    if depthwise {
                        for c in 0..cin {
                            data[orow + c] += xv.data()[xrow + c] * kv.data()[dk * cin + c];
                        }
                    } else {
                        for ci in 0..cin {
                            let xval = xv.data()[xrow + ci];
                            if xval == 0.0 {
                                continue;
                            }
                            let krow = (dk * cin + ci) * cout;
                            for co in 0..cout {
                                data[orow + co] += xval * kv.data()[krow + co];
                            }
                        }
                    }
                }
            }
            s0 = s1;
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = cout;
        self.push(
            DenseArray::from_vec(&shape, data),
            Op::Conv1d {
                x,
                k,
                b,
                segments: segments.to_vec(),
                depthwise,
            },
            "conv1d",
        )
    }

    /// Normalizes each row over the trailing axis, then scales and shifts
    /// per channel.
    pub fn layer_norm(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
    ) -> Result<ValueId> {
        let (xv, gv, bv) = (&self.values[x.0], &self.values[gamma.0], &self.values[beta.0]);
        let (r, c) = (xv.rows(), xv.cols());
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                msg: format!("gamma {:?} beta {:?} vs {c} channels", gv.shape(), bv.shape()),
            });
        }
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv.data()[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                data[i * c + j] = gv.data()[j] * (row[j] - mu) * inv_std + bv.data()[j];
            }
        }
        let shape = xv.shape().to_vec();
        self.push(
            DenseArray::from_vec(&shape, data),
            Op::LayerNorm { x, gamma, beta, eps },
            "layer_norm",
        )
    }

    /// Normalizes each channel over all rows (batch statistics; there is no
    /// running-average mode, evaluation uses the same in-batch statistics).
    pub fn batch_norm(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
    ) -> Result<ValueId> {
        let (xv, gv, bv) = (&self.values[x.0], &self.values[gamma.0], &self.values[beta.0]);
        let (r, c) = (xv.rows(), xv.cols());
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                msg: format!("gamma {:?} beta {:?} vs {c} channels", gv.shape(), bv.shape()),
            });
        }
        if r == 0 {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                msg: "no rows".into(),
            });
        }
        let mut mu = vec![0.0; c];
        let mut var = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                mu[j] += xv.data()[i * c + j];
            }
        }
        for m in &mut mu {
            *m /= r as f64;
        }
        for i in 0..r {
            for j in 0..c {
                let d = xv.data()[i * c + j] - mu[j];
                var[j] += d * d;
            }
        }
        for v in &mut var {
            *v /= r as f64;
        }
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                let inv_std = 1.0 / (var[j] + eps).sqrt();
                data[i * c + j] =
                    gv.data()[j] * (xv.data()[i * c + j] - mu[j]) * inv_std + bv.data()[j];
            }
        }
        let shape = xv.shape().to_vec();
        self.push(
            DenseArray::from_vec(&shape, data),
            Op::BatchNorm { x, gamma, beta, eps },
            "batch_norm",
        )
    }

    /// `out[j] = x[indices[j]]`. Duplicate indices are allowed; their
    /// gradients accumulate.
    pub fn gather_rows(&mut self, x: ValueId, indices: &[usize]) -> Result<ValueId> {
        let xv = &self.values[x.0];
        let (r, c) = (xv.rows(), xv.cols());
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                msg: format!("index {bad} out of {r} rows"),
            });
        }
        let mut data = vec![0.0; indices.len() * c];
        for (j, &i) in indices.iter().enumerate() {
            data[j * c..(j + 1) * c].copy_from_slice(&xv.data()[i * c..(i + 1) * c]);
        }
        self.push(
            DenseArray::from_vec(&[indices.len(), c], data),
            Op::GatherRows {
                x,
                indices: indices.to_vec(),
            },
            "gather_rows",
        )
    }

    /// `out[indices[i]] = x[i]` into `out_rows` rows, the rest zero. Indices
    /// must be unique: each output slot receives at most one row.
    pub fn scatter_rows(
        &mut self,
        x: ValueId,
        indices: &[usize],
        out_rows: usize,
    ) -> Result<ValueId> {
        let xv = &self.values[x.0];
        let (r, c) = (xv.rows(), xv.cols());
        if indices.len() != r {
            return Err(Error::ShapeMismatch {
                op: "scatter_rows",
                msg: format!("{} indices vs {r} rows", indices.len()),
            });
        }
        let mut taken = vec![false; out_rows];
        for &i in indices {
            if i >= out_rows || taken[i] {
                return Err(Error::ShapeMismatch {
                    op: "scatter_rows",
                    msg: format!("index {i} out of range or duplicated"),
                });
            }
            taken[i] = true;
        }
        let mut data = vec![0.0; out_rows * c];
        for (src, &dst) in indices.iter().enumerate() {
            data[dst * c..(dst + 1) * c].copy_from_slice(&xv.data()[src * c..(src + 1) * c]);
        }
        self.push(
            DenseArray::from_vec(&[out_rows, c], data),
            Op::ScatterRows {
                x,
                indices: indices.to_vec(),
            },
            "scatter_rows",
        )
    }

    /// Per-channel max over each contiguous row segment. Gradient flows to
    /// the (first) maximal row of each segment.
    pub fn segment_max(&mut self, x: ValueId, lengths: &[usize]) -> Result<ValueId> {
        let xv = &self.values[x.0];
        let (r, c) = (xv.rows(), xv.cols());
        if lengths.iter().sum::<usize>() != r || lengths.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "segment_max",
                msg: format!("segment lengths {lengths:?} vs {r} rows"),
            });
        }
        let s = lengths.len();
        let mut data = vec![f64::NEG_INFINITY; s * c];
        let mut argmax = vec![0usize; s * c];
        let mut s0 = 0;
        for (seg, &len) in lengths.iter().enumerate() {
            for i in s0..s0 + len {
                for j in 0..c {
                    let v = xv.data()[i * c + j];
                    if v > data[seg * c + j] {
                        data[seg * c + j] = v;
                        argmax[seg * c + j] = i;
                    }
                }
            }
            s0 += len;
        }
        self.push(
            DenseArray::from_vec(&[s, c], data),
            Op::SegmentMax { x, argmax },
            "segment_max",
        )
    }

    pub fn sum_all(&mut self, x: ValueId) -> Result<ValueId> {
        let s: f64 = self.values[x.0].data().iter().sum();
        self.push(DenseArray::scalar(s), Op::SumAll(x), "sum_all")
    }

    pub fn mean_all(&mut self, x: ValueId) -> Result<ValueId> {
        let n = self.values[x.0].numel().max(1);
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Registers an externally computed op. `output` must be the forward
    /// result for the current values of `inputs`; `op.backward` supplies the
    /// input gradients later.
    pub fn custom(
        &mut self,
        inputs: &[ValueId],
        output: DenseArray,
        op: Rc<dyn CustomGrad>,
    ) -> Result<ValueId> {
        let name = op.name();
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            name,
        )
    }

    fn parents(op: &Op, out: &mut Vec<usize>) {
        out.clear();
        match op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                out.push(a.0);
                out.push(b.0);
            }
            Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::Silu(a)
            | Op::Exp(a)
            | Op::Softplus(a)
            | Op::SoftmaxRows(a)
            | Op::SumAll(a) => out.push(a.0),
            Op::Linear { x, w, b } => {
                out.push(x.0);
                out.push(w.0);
                out.push(b.0);
            }
            Op::Conv1d { x, k, b, .. } => {
                out.push(x.0);
                out.push(k.0);
                out.push(b.0);
            }
            Op::LayerNorm { x, gamma, beta, .. } | Op::BatchNorm { x, gamma, beta, .. } => {
                out.push(x.0);
                out.push(gamma.0);
                out.push(beta.0);
            }
            Op::GatherRows { x, .. } | Op::ScatterRows { x, .. } | Op::SegmentMax { x, .. } => {
                out.push(x.0)
            }
            Op::Custom { inputs, .. } => out.extend(inputs.iter().map(|i| i.0)),
        }
    }

    /// Reverse-mode sweep from `loss` (a scalar). Gradients land in
    /// [`Tape::grad`] slots; leaves created with [`Tape::constant`] absorb
    /// nothing.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                msg: format!("loss must be scalar, got {:?}", self.values[loss.0].shape()),
            });
        }
        // Which nodes feed the loss, and does any differentiable leaf?
        let mut reachable = vec![false; self.values.len()];
        reachable[loss.0] = true;
        let mut parent_buf = Vec::new();
        let mut any_diff_leaf = false;
        for id in (0..=loss.0).rev() {
            if !reachable[id] {
                continue;
            }
            match &self.ops[id] {
                Op::Leaf { differentiable } => any_diff_leaf |= differentiable,
                op => {
                    Self::parents(op, &mut parent_buf);
                    for &p in &parent_buf {
                        reachable[p] = true;
                    }
                }
            }
        }
        if !any_diff_leaf {
            return Err(Error::DisconnectedLoss);
        }

        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(DenseArray::scalar(1.0));

        for id in (0..=loss.0).rev() {
            if !reachable[id] || self.grads[id].is_none() {
                continue;
            }
            if matches!(self.ops[id], Op::Leaf { .. }) {
                continue;
            }
            let (grads_left, grads_right) = self.grads.split_at_mut(id);
            let g = grads_right[0].as_ref().unwrap();
            let values = &self.values;
            fn acc<'s>(slot: &'s mut Option<DenseArray>, shape: &[usize]) -> &'s mut DenseArray {
                slot.get_or_insert_with(|| DenseArray::zeros(shape))
            }

            match &self.ops[id] {
                Op::Leaf { .. } => unreachable!(),
                Op::Add(a, b) => {
                    let da = acc(&mut grads_left[a.0], values[a.0].shape());
                    for (d, &gv) in da.data_mut().iter_mut().zip(g.data()) {
                        *d += gv;
                    }
                    let nb = values[b.0].numel();
                    let db = acc(&mut grads_left[b.0], values[b.0].shape());
                    for (i, &gv) in g.data().iter().enumerate() {
                        db.data_mut()[i % nb] += gv;
                    }
                }
                Op::Sub(a, b) => {
                    let da = acc(&mut grads_left[a.0], values[a.0].shape());
                    for (d, &gv) in da.data_mut().iter_mut().zip(g.data()) {
                        *d += gv;
                    }
                    let nb = values[b.0].numel();
                    let db = acc(&mut grads_left[b.0], values[b.0].shape());
                    for (i, &gv) in g.data().iter().enumerate() {
                        db.data_mut()[i % nb] -= gv;
                    }
                }
                Op::Mul(a, b) => {
                    let nb = values[b.0].numel();
                    {
                        let bdata = values[b.0].data();
                        let da = acc(&mut grads_left[a.0], values[a.0].shape());
                        for (i, &gv) in g.data().iter().enumerate() {
                            da.data_mut()[i] += gv * bdata[i % nb];
                        }
                    }
                    {
                        let adata = values[a.0].data();
                        let db = acc(&mut grads_left[b.0], values[b.0].shape());
                        for (i, &gv) in g.data().iter().enumerate() {
                            db.data_mut()[i % nb] += gv * adata[i];
                        }
                    }
                }
                Op::Scale(a, f) => {
                    let da = acc(&mut grads_left[a.0], values[a.0].shape());
                    for (d, &gv) in da.data_mut().iter_mut().zip(g.data()) {
                        *d += gv * f;
                    }
                }
                Op::Sigmoid(a) => {
                    let y = values[id].data();
                    let da = acc(&mut grads_left[a.0], values[a.0].shape());
                    for i in 0..y.len() {
                        da.data_mut()[i] += g.data()[i] * y[i] * (1.0 - y[i]);
                    }
                }
                Op::Silu(a) => {
                    let x = values[a.0].data();
                    let da = acc(&mut grads_left[a.0], values[a.0].shape());
                    for i in 0..x.len() {
                        let s = stable_sigmoid(x[i]);
                        da.data_mut()[i] += g.data()[i] * s * (1.0 + x[i] * (1.0 - s));
                    }
                }
                Op::Exp(a) => {
                    let y = values[id].data();
                    let da = acc(&mut grads_left[a.0], values[a.0].shape());
                    for i in 0..y.len() {
                        da.data_mut()[i] += g.data()[i] * y[i];
                    }
                }
                Op::Softplus(a) => {
                    let x = values[a.0].data();
                    let da = acc(&mut grads_left[a.0], values[a.0].shape());
                    for i in 0..x.len() {
                        da.data_mut()[i] += g.data()[i] * stable_sigmoid(x[i]);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = values[id].data();
                    let c = values[id].cols();
                    let r = values[id].rows();
                    let da = acc(&mut grads_left[a.0], values[a.0].shape());
                    for i in 0..r {
                        let mut dot = 0.0;
                        for j in 0..c {
                            dot += g.data()[i * c + j] * y[i * c + j];
                        }
                        for j in 0..c {
                            da.data_mut()[i * c + j] +=
                                y[i * c + j] * (g.data()[i * c + j] - dot);
                        }
                    }
                }
                Op::Linear { x, w, b } => {
                    let xv = &values[x.0];
                    let wv = &values[w.0];
                    let rows = xv.rows();
                    let cin = xv.cols();
                    let cout = wv.shape()[1];
                    {
                        // dx = g . w^T
                        let dx = acc(&mut grads_left[x.0], xv.shape());
                        for i in 0..rows {
                            for ci in 0..cin {
                                let mut s = 0.0;
                                for co in 0..cout {
                                    s += g.data()[i * cout + co] * wv.data()[ci * cout + co];
                                }
                                dx.data_mut()[i * cin + ci] += s;
                            }
                        }
                    }
                    {
                        // dw = x^T . g
                        let dw = acc(&mut grads_left[w.0], wv.shape());
                        for i in 0..rows {
                            for ci in 0..cin {
                                let xval = xv.data()[i * cin + ci];
                                if xval == 0.0 {
                                    continue;
                                }
                                for co in 0..cout {
                                    dw.data_mut()[ci * cout + co] +=
                                        xval * g.data()[i * cout + co];
                                }
                            }
                        }
                    }
                    {
                        let db = acc(&mut grads_left[b.0], values[b.0].shape());
                        for i in 0..rows {
                            for co in 0..cout {
                                db.data_mut()[co] += g.data()[i * cout + co];
                            }
                        }
                    }
                }
                Op::Conv1d {
                    x,
                    k,
                    b,
                    segments,
                    depthwise,
                } => {
                    let xv = &values[x.0];
                    let kv = &values[k.0];
                    let cin = xv.cols();
                    let (kw, cout) = if *depthwise {
                        (kv.shape()[0], cin)
                    } else {
                        (kv.shape()[0], kv.shape()[2])
                    };
                    let half = kw / 2;
                    {
                        let db = acc(&mut grads_left[b.0], values[b.0].shape());
                        for i in 0..xv.rows() {
                            for co in 0..cout {
                                db.data_mut()[co] += g.data()[i * cout + co];
                            }
                        }
                    }
                    // dx and dk share the same window walk
                    {
                        let dx = acc(&mut grads_left[x.0], xv.shape());
                        let mut s0 = 0;
                        for &len in segments {
                            let s1 = s0 + len;
                            for pos in s0..s1 {
                                for dk in 0..kw {
                                    let src = pos as isize + dk as isize - half as isize;
                                    if src < s0 as isize || src >= s1 as isize {
                                        continue;
                                    }
                                    let src = src as usize;
                                    if *depthwise {
                                        for c in 0..cin {
                                            dx.data_mut()[src * cin + c] += g.data()
                                                [pos * cout + c]
                                                * kv.data()[dk * cin + c];
                                        }
                                    } else {
                                        for ci in 0..cin {
                                            let krow = (dk * cin + ci) * cout;
                                            let mut s = 0.0;
                                            for co in 0..cout {
                                                s += g.data()[pos * cout + co]
                                                    * kv.data()[krow + co];
                                            }
                                            dx.data_mut()[src * cin + ci] += s;
                                        }
                                    }
                                }
                            }
                            s0 = s1;
                        }
                    }
                    {
                        let dk_arr = acc(&mut grads_left[k.0], kv.shape());
                        let mut s0 = 0;
                        for &len in segments {
                            let s1 = s0 + len;
                            for pos in s0..s1 {
                                for dk in 0..kw {
                                    let src = pos as isize + dk as isize - half as isize;
                                    if src < s0 as isize || src >= s1 as isize {
                                        continue;
                                    }
                                    let src = src as usize;
                                    if *depthwise {
                                        for c in 0..cin {
                                            dk_arr.data_mut()[dk * cin + c] += xv.data()
                                                [src * cin + c]
                                                * g.data()[pos * cout + c];
                                        }
                                    } else {
                                        for ci in 0..cin {
                                            let xval = xv.data()[src * cin + ci];
                                            if xval == 0.0 {
                                                continue;
                                            }
                                            let krow = (dk * cin + ci) * cout;
                                            for co in 0..cout {
                                                dk_arr.data_mut()[krow + co] +=
                                                    xval * g.data()[pos * cout + co];
                                            }
                                        }
                                    }
                                }
                            }
                            s0 = s1;
                        }
                    }
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let xv = &values[x.0];
                    let gv = &values[gamma.0];
                    let (r, c) = (xv.rows(), xv.cols());
                    let cf = c as f64;
                    {
                        let dx = acc(&mut grads_left[x.0], xv.shape());
                        for i in 0..r {
                            let row = &xv.data()[i * c..(i + 1) * c];
                            let mu = row.iter().sum::<f64>() / cf;
                            let var =
                                row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / cf;
                            let inv_std = 1.0 / (var + eps).sqrt();
                            let mut sum_dxhat = 0.0;
                            let mut sum_dxhat_xhat = 0.0;
                            for j in 0..c {
                                let xhat = (row[j] - mu) * inv_std;
                                let dxhat = g.data()[i * c + j] * gv.data()[j];
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * xhat;
                            }
                            for j in 0..c {
                                let xhat = (row[j] - mu) * inv_std;
                                let dxhat = g.data()[i * c + j] * gv.data()[j];
                                dx.data_mut()[i * c + j] += (dxhat
                                    - sum_dxhat / cf
                                    - xhat * sum_dxhat_xhat / cf)
                                    * inv_std;
                            }
                        }
                    }
                    {
                        let dgamma = acc(&mut grads_left[gamma.0], &[c]);
                        for i in 0..r {
                            let row = &xv.data()[i * c..(i + 1) * c];
                            let mu = row.iter().sum::<f64>() / cf;
                            let var =
                                row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / cf;
                            let inv_std = 1.0 / (var + eps).sqrt();
                            for j in 0..c {
                                dgamma.data_mut()[j] +=
                                    g.data()[i * c + j] * (row[j] - mu) * inv_std;
                            }
                        }
                    }
                    {
                        let dbeta = acc(&mut grads_left[beta.0], &[c]);
                        for i in 0..r {
                            for j in 0..c {
                                dbeta.data_mut()[j] += g.data()[i * c + j];
                            }
                        }
                    }
                }
                Op::BatchNorm { x, gamma, beta, eps } => {
                    let xv = &values[x.0];
                    let gv = &values[gamma.0];
                    let (r, c) = (xv.rows(), xv.cols());
                    let rf = r as f64;
                    let mut mu = vec![0.0; c];
                    let mut var = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            mu[j] += xv.data()[i * c + j];
                        }
                    }
                    for m in &mut mu {
                        *m /= rf;
                    }
                    for i in 0..r {
                        for j in 0..c {
                            let d = xv.data()[i * c + j] - mu[j];
                            var[j] += d * d;
                        }
                    }
                    for v in &mut var {
                        *v /= rf;
                    }
                    let inv_std: Vec<f64> =
                        var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
                    let mut sum_dxhat = vec![0.0; c];
                    let mut sum_dxhat_xhat = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            let xhat = (xv.data()[i * c + j] - mu[j]) * inv_std[j];
                            let dxhat = g.data()[i * c + j] * gv.data()[j];
                            sum_dxhat[j] += dxhat;
                            sum_dxhat_xhat[j] += dxhat * xhat;
                        }
                    }
                    {
                        let dx = acc(&mut grads_left[x.0], xv.shape());
                        for i in 0..r {
                            for j in 0..c {
                                let xhat = (xv.data()[i * c + j] - mu[j]) * inv_std[j];
                                let dxhat = g.data()[i * c + j] * gv.data()[j];
                                dx.data_mut()[i * c + j] += (dxhat
                                    - sum_dxhat[j] / rf
                                    - xhat * sum_dxhat_xhat[j] / rf)
                                    * inv_std[j];
                            }
                        }
                    }
                    {
                        let dgamma = acc(&mut grads_left[gamma.0], &[c]);
                        for i in 0..r {
                            for j in 0..c {
                                let xhat = (xv.data()[i * c + j] - mu[j]) * inv_std[j];
                                dgamma.data_mut()[j] += g.data()[i * c + j] * xhat;
                            }
                        }
                    }
                    {
                        let dbeta = acc(&mut grads_left[beta.0], &[c]);
                        for i in 0..r {
                            for j in 0..c {
                                dbeta.data_mut()[j] += g.data()[i * c + j];
                            }
                        }
                    }
                }
                Op::GatherRows { x, indices } => {
                    let c = values[x.0].cols();
                    let dx = acc(&mut grads_left[x.0], values[x.0].shape());
                    for (j, &i) in indices.iter().enumerate() {
                        for col in 0..c {
                            dx.data_mut()[i * c + col] += g.data()[j * c + col];
                        }
                    }
                }
                Op::ScatterRows { x, indices } => {
                    let c = values[x.0].cols();
                    let dx = acc(&mut grads_left[x.0], values[x.0].shape());
                    for (src, &dst) in indices.iter().enumerate() {
                        for col in 0..c {
                            dx.data_mut()[src * c + col] += g.data()[dst * c + col];
                        }
                    }
                }
                Op::SegmentMax { x, argmax } => {
                    let c = values[x.0].cols();
                    let dx = acc(&mut grads_left[x.0], values[x.0].shape());
                    for (slot, &row) in argmax.iter().enumerate() {
                        let col = slot % c;
                        dx.data_mut()[row * c + col] += g.data()[slot];
                    }
                }
                Op::SumAll(a) => {
                    let gv = g.item();
                    let da = acc(&mut grads_left[a.0], values[a.0].shape());
                    for d in da.data_mut() {
                        *d += gv;
                    }
                }
                Op::Custom { inputs, op } => {
                    let input_vals: Vec<&DenseArray> =
                        inputs.iter().map(|i| &values[i.0]).collect();
                    let input_grads = op.backward(g, &input_vals, &values[id]);
                    debug_assert_eq!(input_grads.len(), inputs.len());
                    for (inp, ig) in inputs.iter().zip(input_grads) {
                        debug_assert_eq!(ig.shape(), values[inp.0].shape());
                        let slot = acc(&mut grads_left[inp.0], values[inp.0].shape());
                        for (d, &gv) in slot.data_mut().iter_mut().zip(ig.data()) {
                            *d += gv;
                        }
                    }
                }
            }
        }
        // Gradients themselves must stay finite.
        for (i, gslot) in self.grads.iter().enumerate() {
            if let Some(garr) = gslot {
                garr.check_finite(&format!("gradient of node {i}"))?;
            }
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}
