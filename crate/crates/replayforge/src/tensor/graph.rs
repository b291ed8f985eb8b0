//! The tape: forward ops that record themselves for reverse-mode backward.
//!
//! One `Graph` is active per training step. Ops compute their result
//! immediately and, when any input requires a gradient, push a node carrying
//! the context needed by the backward rule. `Graph::inference()` never
//! records, so evaluation passes cost nothing extra.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};

use rand::Rng as _;

use super::{row_major_strides, Result, Tensor, TensorError};
use crate::rng::Rng;

enum OpRecord {
    Add {
        lhs_shape: Vec<usize>,
        rhs_shape: Vec<usize>,
    },
    Sub,
    Mul,
    ScalarMul {
        factor: f64,
    },
    Matmul {
        m: usize,
        k: usize,
        n: usize,
    },
    Conv1d {
        stride: usize,
        padding: usize,
        has_bias: bool,
    },
    Relu,
    MaxPool1d {
        argmax: Vec<usize>,
    },
    GlobalAvgPool1d {
        in_len: usize,
    },
    BatchNorm1d {
        train: bool,
        xhat: Vec<f64>,
        invstd: Vec<f64>,
    },
    Dropout {
        mask: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    Mse,
    Concat {
        axis: usize,
        extents: Vec<usize>,
    },
    Slice {
        axis: usize,
        start: usize,
        in_extent: usize,
    },
    Reshape,
    EmbeddingLookup {
        indices: Vec<usize>,
    },
}

struct Node {
    inputs: Vec<Tensor>,
    output: Tensor,
    op: OpRecord,
}

/// Records one forward pass; rebuilt for every step.
pub struct Graph {
    recording: bool,
    nodes: RefCell<Vec<Node>>,
    produced: RefCell<HashSet<usize>>,
    leaves: RefCell<Vec<Tensor>>,
    leaf_ids: RefCell<HashSet<usize>>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph {
            recording: true,
            nodes: RefCell::new(Vec::new()),
            produced: RefCell::new(HashSet::new()),
            leaves: RefCell::new(Vec::new()),
            leaf_ids: RefCell::new(HashSet::new()),
        }
    }

    /// A graph that never records; use for evaluation and sampling.
    pub fn inference() -> Graph {
        let mut g = Graph::new();
        g.recording = false;
        g
    }

    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    fn record(&self, inputs: &[&Tensor], output: &Tensor, op: OpRecord) {
        if !self.recording || !inputs.iter().any(|t| t.requires_grad()) {
            return;
        }
        output.set_requires_grad(true);
        self.produced.borrow_mut().insert(output.id());
        for t in inputs {
            if t.requires_grad()
                && !self.produced.borrow().contains(&t.id())
                && self.leaf_ids.borrow_mut().insert(t.id())
            {
                self.leaves.borrow_mut().push((*t).clone());
            }
        }
        self.nodes.borrow_mut().push(Node {
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
            output: output.clone(),
            op,
        });
    }

    // ── elementwise and scalar ops ──────────────────────────────────────

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (a_shape, b_shape) = (a.shape(), b.shape());
        let out_shape = broadcast_shape("add", &a_shape, &b_shape)?;
        let out = if a_shape == b_shape {
            let (ad, bd) = (a.data(), b.data());
            let data = ad.iter().zip(bd.iter()).map(|(x, y)| x + y).collect();
            Tensor::new(&out_shape, data)?
        } else {
            broadcast_binary(&out_shape, a, &a_shape, b, &b_shape, |x, y| x + y)?
        };
        self.record(
            &[a, b],
            &out,
            OpRecord::Add {
                lhs_shape: a_shape,
                rhs_shape: b_shape,
            },
        );
        Ok(out)
    }

    /// Elementwise difference; shapes must match exactly.
    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("sub", a, b)?;
        let (ad, bd) = (a.data(), b.data());
        let data = ad.iter().zip(bd.iter()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(&a.shape(), data)?;
        drop((ad, bd));
        self.record(&[a, b], &out, OpRecord::Sub);
        Ok(out)
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("mul", a, b)?;
        let (ad, bd) = (a.data(), b.data());
        let data = ad.iter().zip(bd.iter()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(&a.shape(), data)?;
        drop((ad, bd));
        self.record(&[a, b], &out, OpRecord::Mul);
        Ok(out)
    }

    pub fn scalar_mul(&self, a: &Tensor, factor: f64) -> Result<Tensor> {
        let data = a.data().iter().map(|x| x * factor).collect();
        let out = Tensor::new(&a.shape(), data)?;
        self.record(&[a], &out, OpRecord::ScalarMul { factor });
        Ok(out)
    }

    // ── linear algebra ──────────────────────────────────────────────────

    /// `(m, k) x (k, n) -> (m, n)`.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (a_shape, b_shape) = (a.shape(), b.shape());
        if a_shape.len() != 2 || b_shape.len() != 2 || a_shape[1] != b_shape[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                detail: format!("{a_shape:?} x {b_shape:?}"),
            });
        }
        let (m, k, n) = (a_shape[0], a_shape[1], b_shape[1]);
        let (ad, bd) = (a.data(), b.data());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row_a = &ad[i * k..(i + 1) * k];
            let row_c = &mut data[i * n..(i + 1) * n];
            for (p, &aip) in row_a.iter().enumerate() {
                let row_b = &bd[p * n..(p + 1) * n];
                for (c, bv) in row_c.iter_mut().zip(row_b) {
                    *c += aip * bv;
                }
            }
        }
        let out = Tensor::new(&[m, n], data)?;
        drop((ad, bd));
        self.record(&[a, b], &out, OpRecord::Matmul { m, k, n });
        Ok(out)
    }

    /// 1-D convolution (cross-correlation) over `(batch, in_ch, len)` with a
    /// `(out_ch, in_ch, kernel)` weight, zero padding on both ends and an
    /// optional per-output-channel bias.
    pub fn conv1d(
        &self,
        input: &Tensor,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        let x_shape = input.shape();
        let w_shape = weight.shape();
        if x_shape.len() != 3 || w_shape.len() != 3 || x_shape[1] != w_shape[1] {
            return Err(TensorError::Shape {
                op: "conv1d",
                detail: format!("input {x_shape:?}, weight {w_shape:?}"),
            });
        }
        if stride == 0 {
            return Err(TensorError::Invalid {
                op: "conv1d",
                detail: "stride must be >= 1".into(),
            });
        }
        let (batch, in_ch, len) = (x_shape[0], x_shape[1], x_shape[2]);
        let (out_ch, _, kernel) = (w_shape[0], w_shape[1], w_shape[2]);
        let padded = len + 2 * padding;
        if padded < kernel {
            return Err(TensorError::Shape {
                op: "conv1d",
                detail: format!("kernel {kernel} exceeds padded length {padded}"),
            });
        }
        let out_len = (padded - kernel) / stride + 1;
        if let Some(b) = bias {
            if b.shape() != [out_ch] {
                return Err(TensorError::Shape {
                    op: "conv1d",
                    detail: format!("bias {:?}, expected [{out_ch}]", b.shape()),
                });
            }
        }

        let xp = pad_rows(&input.data(), batch * in_ch, len, padding);
        let wd = weight.data();
        let bd = bias.map(|b| b.to_vec());
        let mut data = vec![0.0; batch * out_ch * out_len];
        for bi in 0..batch {
            for co in 0..out_ch {
                let out_row = &mut data[(bi * out_ch + co) * out_len..][..out_len];
                if let Some(bv) = &bd {
                    out_row.iter_mut().for_each(|v| *v = bv[co]);
                }
                for ci in 0..in_ch {
                    let x_row = &xp[(bi * in_ch + ci) * padded..][..padded];
                    let w_row = &wd[(co * in_ch + ci) * kernel..][..kernel];
                    for (k, &w) in w_row.iter().enumerate() {
                        if stride == 1 {
                            let xs = &x_row[k..k + out_len];
                            for (o, xv) in out_row.iter_mut().zip(xs) {
                                *o += w * xv;
                            }
                        } else {
                            for (lo, o) in out_row.iter_mut().enumerate() {
                                *o += w * x_row[lo * stride + k];
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&[batch, out_ch, out_len], data)?;
        drop(wd);
        let mut inputs: Vec<&Tensor> = vec![input, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        self.record(
            &inputs,
            &out,
            OpRecord::Conv1d {
                stride,
                padding,
                has_bias: bias.is_some(),
            },
        );
        Ok(out)
    }

    // ── activations, pooling, regularization ────────────────────────────

    pub fn relu(&self, a: &Tensor) -> Result<Tensor> {
        let data = a
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { 0.0 })
            .collect();
        let out = Tensor::new(&a.shape(), data)?;
        self.record(&[a], &out, OpRecord::Relu);
        Ok(out)
    }

    /// Max pooling over the time axis of `(batch, ch, len)`; ties keep the
    /// earliest position.
    pub fn maxpool1d(&self, a: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
        let shape = a.shape();
        if shape.len() != 3 {
            return Err(TensorError::Shape {
                op: "maxpool1d",
                detail: format!("expected rank 3, got {shape:?}"),
            });
        }
        if kernel == 0 || stride == 0 {
            return Err(TensorError::Invalid {
                op: "maxpool1d",
                detail: "kernel and stride must be >= 1".into(),
            });
        }
        let (batch, ch, len) = (shape[0], shape[1], shape[2]);
        if len < kernel {
            return Err(TensorError::Shape {
                op: "maxpool1d",
                detail: format!("window {kernel} exceeds length {len}"),
            });
        }
        let out_len = (len - kernel) / stride + 1;
        let ad = a.data();
        let rows = batch * ch;
        let mut data = vec![0.0; rows * out_len];
        let mut argmax = vec![0usize; rows * out_len];
        for r in 0..rows {
            let x_row = &ad[r * len..(r + 1) * len];
            for lo in 0..out_len {
                let start = lo * stride;
                let mut best = x_row[start];
                let mut best_i = start;
                for (j, &v) in x_row[start..start + kernel].iter().enumerate() {
                    if v > best {
                        best = v;
                        best_i = start + j;
                    }
                }
                data[r * out_len + lo] = best;
                argmax[r * out_len + lo] = r * len + best_i;
            }
        }
        let out = Tensor::new(&[batch, ch, out_len], data)?;
        drop(ad);
        self.record(&[a], &out, OpRecord::MaxPool1d { argmax });
        Ok(out)
    }

    /// Mean over the entire time axis: `(batch, ch, len) -> (batch, ch)`.
    pub fn global_avg_pool1d(&self, a: &Tensor) -> Result<Tensor> {
        let shape = a.shape();
        if shape.len() != 3 {
            return Err(TensorError::Shape {
                op: "global_avg_pool1d",
                detail: format!("expected rank 3, got {shape:?}"),
            });
        }
        let (batch, ch, len) = (shape[0], shape[1], shape[2]);
        let ad = a.data();
        let data = (0..batch * ch)
            .map(|r| ad[r * len..(r + 1) * len].iter().sum::<f64>() / len as f64)
            .collect();
        let out = Tensor::new(&[batch, ch], data)?;
        drop(ad);
        self.record(&[a], &out, OpRecord::GlobalAvgPool1d { in_len: len });
        Ok(out)
    }

    /// Batch normalization over `(batch, ch, len)` with per-channel statistics
    /// taken across batch and time. In train mode the running buffers are
    /// updated in place with the given momentum; in eval mode they are used
    /// instead of batch statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm1d(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        running_mean: &Tensor,
        running_var: &Tensor,
        train: bool,
        momentum: f64,
        eps: f64,
    ) -> Result<Tensor> {
        let shape = x.shape();
        if shape.len() != 3 {
            return Err(TensorError::Shape {
                op: "batchnorm1d",
                detail: format!("expected rank 3, got {shape:?}"),
            });
        }
        let (batch, ch, len) = (shape[0], shape[1], shape[2]);
        for (name, t) in [
            ("gamma", gamma),
            ("beta", beta),
            ("running_mean", running_mean),
            ("running_var", running_var),
        ] {
            if t.shape() != [ch] {
                return Err(TensorError::Shape {
                    op: "batchnorm1d",
                    detail: format!("{name} {:?}, expected [{ch}]", t.shape()),
                });
            }
        }
        let n = (batch * len) as f64;
        let xd = x.data();
        let gd = gamma.data();
        let bd = beta.data();
        let mut data = vec![0.0; xd.len()];
        let mut xhat = vec![0.0; xd.len()];
        let mut invstd = vec![0.0; ch];

        if train {
            let mut new_mean = vec![0.0; ch];
            let mut new_var = vec![0.0; ch];
            for c in 0..ch {
                let mut sum = 0.0;
                for b in 0..batch {
                    let row = &xd[(b * ch + c) * len..][..len];
                    sum += row.iter().sum::<f64>();
                }
                let mean = sum / n;
                let mut var_sum = 0.0;
                for b in 0..batch {
                    let row = &xd[(b * ch + c) * len..][..len];
                    var_sum += row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
                }
                let var = var_sum / n;
                let istd = 1.0 / (var + eps).sqrt();
                invstd[c] = istd;
                new_mean[c] = mean;
                new_var[c] = var;
                for b in 0..batch {
                    let base = (b * ch + c) * len;
                    for l in 0..len {
                        let h = (xd[base + l] - mean) * istd;
                        xhat[base + l] = h;
                        data[base + l] = gd[c] * h + bd[c];
                    }
                }
            }
            // momentum update of the running buffers
            {
                let mut rm = running_mean.to_vec();
                let mut rv = running_var.to_vec();
                for c in 0..ch {
                    rm[c] = (1.0 - momentum) * rm[c] + momentum * new_mean[c];
                    rv[c] = (1.0 - momentum) * rv[c] + momentum * new_var[c];
                }
                running_mean.copy_from(&rm);
                running_var.copy_from(&rv);
            }
        } else {
            let rm = running_mean.data();
            let rv = running_var.data();
            for c in 0..ch {
                let istd = 1.0 / (rv[c] + eps).sqrt();
                invstd[c] = istd;
                for b in 0..batch {
                    let base = (b * ch + c) * len;
                    for l in 0..len {
                        let h = (xd[base + l] - rm[c]) * istd;
                        xhat[base + l] = h;
                        data[base + l] = gd[c] * h + bd[c];
                    }
                }
            }
        }
        let out = Tensor::new(&shape, data)?;
        drop((xd, gd, bd));
        self.record(
            &[x, gamma, beta],
            &out,
            OpRecord::BatchNorm1d {
                train,
                xhat,
                invstd,
            },
        );
        Ok(out)
    }

    /// Inverted dropout: scales kept activations by `1/(1-rate)` in train
    /// mode, identity in eval mode.
    pub fn dropout(&self, a: &Tensor, rate: f64, train: bool, rng: &mut Rng) -> Result<Tensor> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Invalid {
                op: "dropout",
                detail: format!("rate {rate} outside [0, 1)"),
            });
        }
        if !train || rate == 0.0 {
            // identity; no draws consumed in eval mode
            let out = Tensor::new(&a.shape(), a.to_vec())?;
            self.record(
                &[a],
                &out,
                OpRecord::Dropout {
                    mask: vec![1.0; a.numel()],
                },
            );
            return Ok(out);
        }
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let ad = a.data();
        let mut mask = vec![0.0; ad.len()];
        let mut data = vec![0.0; ad.len()];
        for i in 0..ad.len() {
            if rng.random::<f64>() < keep {
                mask[i] = scale;
                data[i] = ad[i] * scale;
            }
        }
        let out = Tensor::new(&a.shape(), data)?;
        drop(ad);
        self.record(&[a], &out, OpRecord::Dropout { mask });
        Ok(out)
    }

    // ── losses ──────────────────────────────────────────────────────────

    /// Mean softmax cross-entropy of `(batch, classes)` logits against
    /// integer labels.
    pub fn softmax_cross_entropy(&self, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let shape = logits.shape();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(TensorError::Shape {
                op: "softmax_cross_entropy",
                detail: format!("logits {shape:?}, {} labels", labels.len()),
            });
        }
        let (batch, classes) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(TensorError::Invalid {
                op: "softmax_cross_entropy",
                detail: format!("label {bad} out of range for {classes} classes"),
            });
        }
        let ld = logits.data();
        let mut probs = vec![0.0; ld.len()];
        let mut total = 0.0;
        for b in 0..batch {
            let row = &ld[b * classes..(b + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[b * classes + j] = e;
                denom += e;
            }
            for p in &mut probs[b * classes..(b + 1) * classes] {
                *p /= denom;
            }
            total += denom.ln() + max - row[labels[b]];
        }
        let out = Tensor::scalar(total / batch as f64);
        drop(ld);
        self.record(
            &[logits],
            &out,
            OpRecord::SoftmaxCrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
        );
        Ok(out)
    }

    /// Mean squared error over all elements.
    pub fn mse(&self, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
        same_shape("mse", pred, target)?;
        let (pd, td) = (pred.data(), target.data());
        let n = pd.len() as f64;
        let sum: f64 = pd
            .iter()
            .zip(td.iter())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let out = Tensor::scalar(sum / n);
        drop((pd, td));
        self.record(&[pred, target], &out, OpRecord::Mse);
        Ok(out)
    }

    // ── shape ops ───────────────────────────────────────────────────────

    /// Concatenates along `axis`; all other extents must match.
    pub fn concat(&self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat",
                detail: "no inputs".into(),
            });
        }
        let first = parts[0].shape();
        if axis >= first.len() {
            return Err(TensorError::Invalid {
                op: "concat",
                detail: format!("axis {axis} out of range for rank {}", first.len()),
            });
        }
        let mut extents = Vec::with_capacity(parts.len());
        let mut axis_total = 0;
        for p in parts {
            let s = p.shape();
            if s.len() != first.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &e)| i != axis && e != first[i])
            {
                return Err(TensorError::Shape {
                    op: "concat",
                    detail: format!("{s:?} incompatible with {first:?} on axis {axis}"),
                });
            }
            extents.push(s[axis]);
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * axis_total * inner];
        let mut offset = 0;
        for (p, &ext) in parts.iter().zip(&extents) {
            let pd = p.data();
            for o in 0..outer {
                let src = &pd[o * ext * inner..(o + 1) * ext * inner];
                let dst = &mut data[(o * axis_total + offset) * inner..][..ext * inner];
                dst.copy_from_slice(src);
            }
            offset += ext;
        }
        let out = Tensor::new(&out_shape, data)?;
        self.record(parts, &out, OpRecord::Concat { axis, extents });
        Ok(out)
    }

    /// Contiguous sub-range `[start, end)` along `axis`.
    pub fn slice(&self, a: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        let shape = a.shape();
        if axis >= shape.len() {
            return Err(TensorError::Invalid {
                op: "slice",
                detail: format!("axis {axis} out of range for rank {}", shape.len()),
            });
        }
        if start >= end || end > shape[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                detail: format!("range {start}..{end} invalid for extent {}", shape[axis]),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let ext = end - start;
        let ad = a.data();
        let mut data = vec![0.0; outer * ext * inner];
        for o in 0..outer {
            let src = &ad[(o * shape[axis] + start) * inner..][..ext * inner];
            data[o * ext * inner..(o + 1) * ext * inner].copy_from_slice(src);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = ext;
        let out = Tensor::new(&out_shape, data)?;
        drop(ad);
        self.record(
            &[a],
            &out,
            OpRecord::Slice {
                axis,
                start,
                in_extent: shape[axis],
            },
        );
        Ok(out)
    }

    pub fn reshape(&self, a: &Tensor, new_shape: &[usize]) -> Result<Tensor> {
        let numel: usize = new_shape.iter().product();
        if numel != a.numel() {
            return Err(TensorError::Shape {
                op: "reshape",
                detail: format!("{:?} -> {new_shape:?}", a.shape()),
            });
        }
        let out = Tensor::new(new_shape, a.to_vec())?;
        self.record(&[a], &out, OpRecord::Reshape);
        Ok(out)
    }

    /// Row gather: `(vocab, dim)` table indexed by `indices` -> `(len, dim)`.
    pub fn embedding_lookup(&self, table: &Tensor, indices: &[usize]) -> Result<Tensor> {
        let shape = table.shape();
        if shape.len() != 2 {
            return Err(TensorError::Shape {
                op: "embedding_lookup",
                detail: format!("table must be rank 2, got {shape:?}"),
            });
        }
        let (vocab, dim) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(TensorError::Invalid {
                op: "embedding_lookup",
                detail: format!("index {bad} out of range for table of {vocab} rows"),
            });
        }
        let td = table.data();
        let mut data = vec![0.0; indices.len() * dim];
        for (r, &i) in indices.iter().enumerate() {
            data[r * dim..(r + 1) * dim].copy_from_slice(&td[i * dim..(i + 1) * dim]);
        }
        let out = Tensor::new(&[indices.len(), dim], data)?;
        drop(td);
        self.record(
            &[table],
            &out,
            OpRecord::EmbeddingLookup {
                indices: indices.to_vec(),
            },
        );
        Ok(out)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Propagates `d(loss)/d(leaf)` into every requires-grad leaf reachable
    /// from `loss`, accumulating into existing `grad` buffers.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                numel: loss.numel(),
            });
        }
        if !self.produced.borrow().contains(&loss.id()) {
            return Err(TensorError::DetachedGraph);
        }
        let mut flowing: HashMap<usize, Vec<f64>> = HashMap::new();
        flowing.insert(loss.id(), vec![1.0]);

        let nodes = self.nodes.borrow();
        for node in nodes.iter().rev() {
            // All consumers of an output sit later in the tape, so its
            // gradient is complete when its producing node is reached.
            let Some(gout) = flowing.remove(&node.output.id()) else {
                continue;
            };
            let grads = backward_op(&node.op, &node.inputs, &node.output, &gout);
            for (input, grad) in node.inputs.iter().zip(grads) {
                let Some(grad) = grad else { continue };
                if !input.requires_grad() {
                    continue;
                }
                let entry = flowing
                    .entry(input.id())
                    .or_insert_with(|| vec![0.0; input.numel()]);
                for (e, g) in entry.iter_mut().zip(&grad) {
                    *e += g;
                }
            }
        }
        for leaf in self.leaves.borrow().iter() {
            if let Some(g) = flowing.get(&leaf.id()) {
                leaf.accumulate_grad(g);
            }
        }
        Ok(())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

// ── backward rules ──────────────────────────────────────────────────────

fn backward_op(
    op: &OpRecord,
    inputs: &[Tensor],
    output: &Tensor,
    gout: &[f64],
) -> Vec<Option<Vec<f64>>> {
    match op {
        OpRecord::Add {
            lhs_shape,
            rhs_shape,
        } => {
            let out_shape = output.shape();
            vec![
                Some(reduce_to_shape(gout, &out_shape, lhs_shape)),
                Some(reduce_to_shape(gout, &out_shape, rhs_shape)),
            ]
        }
        OpRecord::Sub => {
            vec![Some(gout.to_vec()), Some(gout.iter().map(|g| -g).collect())]
        }
        OpRecord::Mul => {
            let (ad, bd) = (inputs[0].data(), inputs[1].data());
            vec![
                Some(gout.iter().zip(bd.iter()).map(|(g, b)| g * b).collect()),
                Some(gout.iter().zip(ad.iter()).map(|(g, a)| g * a).collect()),
            ]
        }
        OpRecord::ScalarMul { factor } => {
            vec![Some(gout.iter().map(|g| g * factor).collect())]
        }
        OpRecord::Matmul { m, k, n } => {
            let (ad, bd) = (inputs[0].data(), inputs[1].data());
            let (m, k, n) = (*m, *k, *n);
            let mut da = vec![0.0; m * k];
            for i in 0..m {
                let g_row = &gout[i * n..(i + 1) * n];
                for p in 0..k {
                    da[i * k + p] = dot(g_row, &bd[p * n..(p + 1) * n]);
                }
            }
            let mut db = vec![0.0; k * n];
            for i in 0..m {
                let g_row = &gout[i * n..(i + 1) * n];
                for p in 0..k {
                    let a_ip = ad[i * k + p];
                    let db_row = &mut db[p * n..(p + 1) * n];
                    for (d, g) in db_row.iter_mut().zip(g_row) {
                        *d += a_ip * g;
                    }
                }
            }
            vec![Some(da), Some(db)]
        }
        OpRecord::Conv1d {
            stride,
            padding,
            has_bias,
        } => conv1d_backward(inputs, output, gout, *stride, *padding, *has_bias),
        OpRecord::Relu => {
            let ad = inputs[0].data();
            vec![Some(
                gout.iter()
                    .zip(ad.iter())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            )]
        }
        OpRecord::MaxPool1d { argmax } => {
            let mut dx = vec![0.0; inputs[0].numel()];
            for (o, &src) in argmax.iter().enumerate() {
                dx[src] += gout[o];
            }
            vec![Some(dx)]
        }
        OpRecord::GlobalAvgPool1d { in_len } => {
            let len = *in_len;
            let mut dx = vec![0.0; inputs[0].numel()];
            for (r, &g) in gout.iter().enumerate() {
                let share = g / len as f64;
                dx[r * len..(r + 1) * len]
                    .iter_mut()
                    .for_each(|v| *v = share);
            }
            vec![Some(dx)]
        }
        OpRecord::BatchNorm1d {
            train,
            xhat,
            invstd,
        } => batchnorm_backward(inputs, gout, *train, xhat, invstd),
        OpRecord::Dropout { mask } => {
            vec![Some(
                gout.iter().zip(mask.iter()).map(|(g, m)| g * m).collect(),
            )]
        }
        OpRecord::SoftmaxCrossEntropy { probs, labels } => {
            let batch = labels.len();
            let classes = probs.len() / batch;
            let scale = gout[0] / batch as f64;
            let mut dl = vec![0.0; probs.len()];
            for b in 0..batch {
                for j in 0..classes {
                    let indicator = if j == labels[b] { 1.0 } else { 0.0 };
                    dl[b * classes + j] = (probs[b * classes + j] - indicator) * scale;
                }
            }
            vec![Some(dl)]
        }
        OpRecord::Mse => {
            let (pd, td) = (inputs[0].data(), inputs[1].data());
            let scale = 2.0 * gout[0] / pd.len() as f64;
            let dp: Vec<f64> = pd
                .iter()
                .zip(td.iter())
                .map(|(p, t)| scale * (p - t))
                .collect();
            let dt = dp.iter().map(|d| -d).collect();
            vec![Some(dp), Some(dt)]
        }
        OpRecord::Concat { axis, extents } => {
            let out_shape = output.shape();
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[*axis + 1..].iter().product();
            let total = out_shape[*axis];
            let mut offset = 0;
            let mut grads = Vec::with_capacity(extents.len());
            for &ext in extents {
                let mut g = vec![0.0; outer * ext * inner];
                for o in 0..outer {
                    let src = &gout[(o * total + offset) * inner..][..ext * inner];
                    g[o * ext * inner..(o + 1) * ext * inner].copy_from_slice(src);
                }
                grads.push(Some(g));
                offset += ext;
            }
            grads
        }
        OpRecord::Slice {
            axis,
            start,
            in_extent,
        } => {
            let out_shape = output.shape();
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[*axis + 1..].iter().product();
            let ext = out_shape[*axis];
            let mut dx = vec![0.0; outer * in_extent * inner];
            for o in 0..outer {
                let dst = &mut dx[(o * in_extent + start) * inner..][..ext * inner];
                dst.copy_from_slice(&gout[o * ext * inner..(o + 1) * ext * inner]);
            }
            vec![Some(dx)]
        }
        OpRecord::Reshape => vec![Some(gout.to_vec())],
        OpRecord::EmbeddingLookup { indices } => {
            let dim = output.shape()[1];
            let mut dt = vec![0.0; inputs[0].numel()];
            for (r, &i) in indices.iter().enumerate() {
                let src = &gout[r * dim..(r + 1) * dim];
                let dst = &mut dt[i * dim..(i + 1) * dim];
                for (d, g) in dst.iter_mut().zip(src) {
                    *d += g;
                }
            }
            vec![Some(dt)]
        }
    }
}

fn conv1d_backward(
    inputs: &[Tensor],
    output: &Tensor,
    gout: &[f64],
    stride: usize,
    padding: usize,
    has_bias: bool,
) -> Vec<Option<Vec<f64>>> {
    let x_shape = inputs[0].shape();
    let w_shape = inputs[1].shape();
    let (batch, in_ch, len) = (x_shape[0], x_shape[1], x_shape[2]);
    let (out_ch, _, kernel) = (w_shape[0], w_shape[1], w_shape[2]);
    let out_len = output.shape()[2];
    let padded = len + 2 * padding;
    let xp = pad_rows(&inputs[0].data(), batch * in_ch, len, padding);
    let wd = inputs[1].data();

    let mut dxp = vec![0.0; batch * in_ch * padded];
    let mut dw = vec![0.0; wd.len()];
    for bi in 0..batch {
        for co in 0..out_ch {
            let g_row = &gout[(bi * out_ch + co) * out_len..][..out_len];
            for ci in 0..in_ch {
                let x_row = &xp[(bi * in_ch + ci) * padded..][..padded];
                let dx_row = &mut dxp[(bi * in_ch + ci) * padded..][..padded];
                let w_row = &wd[(co * in_ch + ci) * kernel..][..kernel];
                let dw_row = &mut dw[(co * in_ch + ci) * kernel..][..kernel];
                for k in 0..kernel {
                    if stride == 1 {
                        dw_row[k] += dot(&x_row[k..k + out_len], g_row);
                        let w = w_row[k];
                        for (dx, g) in dx_row[k..k + out_len].iter_mut().zip(g_row) {
                            *dx += w * g;
                        }
                    } else {
                        let mut acc = 0.0;
                        for (lo, &g) in g_row.iter().enumerate() {
                            let pos = lo * stride + k;
                            acc += x_row[pos] * g;
                            dx_row[pos] += w_row[k] * g;
                        }
                        dw_row[k] += acc;
                    }
                }
            }
        }
    }
    // strip padding
    let mut dx = vec![0.0; batch * in_ch * len];
    for r in 0..batch * in_ch {
        dx[r * len..(r + 1) * len].copy_from_slice(&dxp[r * padded + padding..][..len]);
    }
    let mut grads = vec![Some(dx), Some(dw)];
    if has_bias {
        let mut db = vec![0.0; out_ch];
        for bi in 0..batch {
            for (co, dbv) in db.iter_mut().enumerate() {
                *dbv += gout[(bi * out_ch + co) * out_len..][..out_len]
                    .iter()
                    .sum::<f64>();
            }
        }
        grads.push(Some(db));
    }
    grads
}

fn batchnorm_backward(
    inputs: &[Tensor],
    gout: &[f64],
    train: bool,
    xhat: &[f64],
    invstd: &[f64],
) -> Vec<Option<Vec<f64>>> {
    let x_shape = inputs[0].shape();
    let (batch, ch, len) = (x_shape[0], x_shape[1], x_shape[2]);
    let gd = inputs[1].data();
    let n = (batch * len) as f64;

    let mut dx = vec![0.0; gout.len()];
    let mut dgamma = vec![0.0; ch];
    let mut dbeta = vec![0.0; ch];

    for c in 0..ch {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for b in 0..batch {
            let base = (b * ch + c) * len;
            for l in 0..len {
                sum_dy += gout[base + l];
                sum_dy_xhat += gout[base + l] * xhat[base + l];
            }
        }
        dgamma[c] = sum_dy_xhat;
        dbeta[c] = sum_dy;
        let scale = gd[c] * invstd[c];
        for b in 0..batch {
            let base = (b * ch + c) * len;
            for l in 0..len {
                dx[base + l] = if train {
                    // batch statistics depend on x
                    scale * (gout[base + l] - sum_dy / n - xhat[base + l] * sum_dy_xhat / n)
                } else {
                    // running statistics are constants
                    scale * gout[base + l]
                };
            }
        }
    }
    vec![Some(dx), Some(dgamma), Some(dbeta)]
}

// ── helpers ─────────────────────────────────────────────────────────────

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(TensorError::Shape {
            op,
            detail: format!("{sa:?} vs {sb:?}"),
        });
    }
    Ok(())
}

/// Zero-pads each row of a `(rows, len)` buffer on both sides.
fn pad_rows(data: &[f64], rows: usize, len: usize, padding: usize) -> Vec<f64> {
    if padding == 0 {
        return data.to_vec();
    }
    let padded = len + 2 * padding;
    let mut out = vec![0.0; rows * padded];
    for r in 0..rows {
        out[r * padded + padding..][..len].copy_from_slice(&data[r * len..(r + 1) * len]);
    }
    out
}

/// Dot product with four running sums; fixed summation order.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let (a4, b4) = (&a[i * 4..i * 4 + 4], &b[i * 4..i * 4 + 4]);
        acc[0] += a4[0] * b4[0];
        acc[1] += a4[1] * b4[1];
        acc[2] += a4[2] * b4[2];
        acc[3] += a4[3] * b4[3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let ea = if i >= rank - a.len() {
            a[i - (rank - a.len())]
        } else {
            1
        };
        let eb = if i >= rank - b.len() {
            b[i - (rank - b.len())]
        } else {
            1
        };
        out[i] = if ea == eb || eb == 1 {
            ea
        } else if ea == 1 {
            eb
        } else {
            return Err(TensorError::Shape {
                op,
                detail: format!("{a:?} vs {b:?}"),
            });
        };
    }
    Ok(out)
}

/// Strides padded to `rank`, with 0 on broadcast axes.
fn broadcast_strides(shape: &[usize], rank: usize, out_shape: &[usize]) -> Vec<usize> {
    let strides = row_major_strides(shape);
    let mut out = vec![0; rank];
    let offset = rank - shape.len();
    for i in 0..shape.len() {
        out[offset + i] = if shape[i] == out_shape[offset + i] {
            strides[i]
        } else {
            0
        };
    }
    out
}

fn broadcast_binary(
    out_shape: &[usize],
    a: &Tensor,
    a_shape: &[usize],
    b: &Tensor,
    b_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let rank = out_shape.len();
    let sa = broadcast_strides(a_shape, rank, out_shape);
    let sb = broadcast_strides(b_shape, rank, out_shape);
    let (ad, bd) = (a.data(), b.data());
    let numel: usize = out_shape.iter().product();
    let mut data = vec![0.0; numel];
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for v in data.iter_mut() {
        *v = f(ad[ia], bd[ib]);
        // odometer increment
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
        }
    }
    drop((ad, bd));
    Tensor::new(out_shape, data)
}

/// Sums `grad` (shaped `from`) down to `to` for broadcast backward.
fn reduce_to_shape(grad: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return grad.to_vec();
    }
    let rank = from.len();
    let st = broadcast_strides(to, rank, from);
    let numel: usize = to.iter().product();
    let mut out = vec![0.0; numel];
    let mut idx = vec![0usize; rank];
    let mut it = 0usize;
    for g in grad {
        out[it] += g;
        for d in (0..rank).rev() {
            idx[d] += 1;
            it += st[d];
            if idx[d] < from[d] {
                break;
            }
            idx[d] = 0;
            it -= st[d] * from[d];
        }
    }
    out
}

#[cfg(test)]
mod tests;
