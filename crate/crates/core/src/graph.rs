//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Each op appends a node
//! holding its output value and whatever it needs for the backward sweep, so
//! node order is a topological order by construction. [`Graph::backward`]
//! walks the tape in reverse and returns gradients for every leaf that
//! requires them.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamId;
use crate::tensor::{gemm, Tensor};

/// Momentum used when folding batch statistics into the running estimates.
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
/// Probability clamp applied before the logs in [`Graph::bce`].
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Running mean/variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], 1.0),
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.numel()
    }
}

/// Batch-norm behaviour: batch statistics (and running-stat updates) in
/// training, frozen running statistics in evaluation.
pub enum NormMode<'a> {
    Train(&'a mut RunningStats),
    Eval(&'a RunningStats),
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    AbsSum(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalMaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    UpsampleNearest(Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    MulChannel {
        input: Var,
        scale: Var,
    },
    ConcatChannels(Vec<Var>),
    Bce {
        pred: Var,
        target: Var,
    },
    Softmax {
        input: Var,
        axis: usize,
    },
    SelectRow {
        input: Var,
        index: usize,
    },
    NarrowBatch {
        input: Var,
        start: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Gradients produced by one backward sweep.
#[derive(Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
    leaves: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor> {
        self.params
    }

    /// Gradient of a leaf registered with [`Graph::leaf`] or [`Graph::param`].
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(&var)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool, param: Option<ParamId>) -> Result<Var> {
        value.ensure_finite("graph input")?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push_leaf(value, false, None)
    }

    /// Differentiable leaf that is not a stored parameter.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push_leaf(value, true, None)
    }

    /// Differentiable leaf whose gradient is reported under `id`.
    pub fn param(&mut self, id: ParamId, value: Tensor) -> Result<Var> {
        self.push_leaf(value, true, Some(id))
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        value.ensure_finite(name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.dims(a), self.dims(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_dims(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.dims(), data)?;
        self.push(name, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        self.push("scale", out, Op::Scale(x, factor), &[x])
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, x: Var, offset: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v + offset);
        self.push("shift", out, Op::Shift(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push("relu", out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum", out, Op::Sum(x), &[x])
    }

    pub fn abs_sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).data().iter().map(|v| v.abs()).sum());
        self.push("abs_sum", out, Op::AbsSum(x), &[x])
    }

    /// 2-D convolution. `input` is `N x Cin x H x W`, `weight` is
    /// `Cout x Cin x k x k`, `bias` has `Cout` entries. Zero padding.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let xd = self.dims(input).to_vec();
        let wd = self.dims(weight).to_vec();
        if xd.len() != 4 || wd.len() != 4 || wd[2] != wd[3] {
            return Err(Error::shape("conv2d", format!("input {xd:?}, weight {wd:?}")));
        }
        if xd[1] != wd[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, weight expects {}", xd[1], wd[1]),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        if let Some(b) = bias {
            if self.value(b).numel() != wd[0] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {} outputs", self.dims(b), wd[0])));
            }
        }
        let geom = ConvGeom::new(&xd, &wd, stride, padding)?;
        let mut out = vec![0.0; geom.n * geom.cout * geom.p()];
        let mut col = vec![0.0; if geom.is_pointwise() { 0 } else { geom.kdim() * geom.p() }];
        let x = self.value(input).data();
        let w = self.value(weight).data();
        for n in 0..geom.n {
            let xn = &x[n * geom.in_len()..(n + 1) * geom.in_len()];
            let yn = &mut out[n * geom.cout * geom.p()..(n + 1) * geom.cout * geom.p()];
            let cols: &[f64] = if geom.is_pointwise() {
                xn
            } else {
                geom.im2col(xn, &mut col);
                &col
            };
            gemm(geom.cout, geom.kdim(), geom.p(), 1.0, w, false, cols, false, 0.0, yn);
            if let Some(b) = bias {
                let bv = self.value(b).data();
                for (co, row) in yn.chunks_mut(geom.p()).enumerate() {
                    row.iter_mut().for_each(|v| *v += bv[co]);
                }
            }
        }
        let out = Tensor::new(&[geom.n, geom.cout, geom.ho, geom.wo], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            "conv2d",
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            &inputs,
        )
    }

    /// 2x2 max pooling with stride 2. Spatial dims must be even.
    pub fn max_pool2d(&mut self, input: Var) -> Result<Var> {
        let d = self.dims(input).to_vec();
        if d.len() != 4 || !d[2].is_multiple_of(2) || !d[3].is_multiple_of(2) {
            return Err(Error::shape("max_pool2d", format!("needs N x C x even x even, got {d:?}")));
        }
        let (h, w) = (d[2], d[3]);
        let (ho, wo) = (h / 2, w / 2);
        let x = self.value(input).data();
        let planes = d[0] * d[1];
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for pl in 0..planes {
            let base = pl * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new(&[d[0], d[1], ho, wo], out)?;
        self.push("max_pool2d", out, Op::MaxPool2d { input, argmax }, &[input])
    }

    /// Maximum over all spatial positions: `N x C x H x W -> N x C`.
    pub fn global_max_pool(&mut self, input: Var) -> Result<Var> {
        let d = self.dims(input).to_vec();
        if d.len() != 4 {
            return Err(Error::shape("global_max_pool", format!("needs rank 4, got {d:?}")));
        }
        let hw = d[2] * d[3];
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(d[0] * d[1]);
        let mut argmax = Vec::with_capacity(d[0] * d[1]);
        for (pl, plane) in x.chunks(hw).enumerate() {
            let mut best = 0;
            for (i, &v) in plane.iter().enumerate() {
                if v > plane[best] {
                    best = i;
                }
            }
            out.push(plane[best]);
            argmax.push(pl * hw + best);
        }
        let out = Tensor::new(&[d[0], d[1]], out)?;
        self.push("global_max_pool", out, Op::GlobalMaxPool { input, argmax }, &[input])
    }

    /// Nearest-neighbour upsampling by a factor of two.
    pub fn upsample_nearest(&mut self, input: Var) -> Result<Var> {
        let d = self.dims(input).to_vec();
        if d.len() != 4 {
            return Err(Error::shape("upsample_nearest", format!("needs rank 4, got {d:?}")));
        }
        let (h, w) = (d[2], d[3]);
        let x = self.value(input).data();
        let mut out = vec![0.0; d[0] * d[1] * 4 * h * w];
        for (pl, plane) in x.chunks(h * w).enumerate() {
            let dst = &mut out[pl * 4 * h * w..(pl + 1) * 4 * h * w];
            for y in 0..2 * h {
                let src = &plane[(y / 2) * w..(y / 2 + 1) * w];
                let row = &mut dst[y * 2 * w..(y + 1) * 2 * w];
                for (xo, v) in row.iter_mut().enumerate() {
                    *v = src[xo / 2];
                }
            }
        }
        let out = Tensor::new(&[d[0], d[1], 2 * h, 2 * w], out)?;
        self.push("upsample_nearest", out, Op::UpsampleNearest(input), &[input])
    }

    /// Per-channel batch normalization over every axis except axis 1.
    pub fn batch_norm2d(&mut self, input: Var, gamma: Var, beta: Var, mode: NormMode<'_>) -> Result<Var> {
        let d = self.dims(input).to_vec();
        if d.len() < 2 {
            return Err(Error::shape("batch_norm2d", format!("needs rank >= 2, got {d:?}")));
        }
        let c = d[1];
        let inner: usize = d[2..].iter().product();
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape("batch_norm2d", format!("{c} channels vs affine params")));
        }
        let count = d[0] * inner;
        let x = self.value(input).data();
        let (mean, inv_std, train) = match &mode {
            NormMode::Train(_) => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for (ch, m) in mean.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for n in 0..d[0] {
                        s += x[(n * c + ch) * inner..(n * c + ch + 1) * inner].iter().sum::<f64>();
                    }
                    *m = s / count as f64;
                }
                for (ch, v) in var.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for n in 0..d[0] {
                        s += x[(n * c + ch) * inner..(n * c + ch + 1) * inner]
                            .iter()
                            .map(|&u| (u - mean[ch]) * (u - mean[ch]))
                            .sum::<f64>();
                    }
                    *v = s / count as f64;
                }
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                (mean, inv_std, Some(var))
            }
            NormMode::Eval(stats) => {
                if stats.channels() != c {
                    return Err(Error::shape("batch_norm2d", format!("running stats for {} channels, input has {c}", stats.channels())));
                }
                let inv_std = stats.var.data().iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                (stats.mean.data().to_vec(), inv_std, None)
            }
        };
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for n in 0..d[0] {
            for ch in 0..c {
                let range = (n * c + ch) * inner..(n * c + ch + 1) * inner;
                for i in range {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + b[ch];
                }
            }
        }
        if let (NormMode::Train(stats), Some(var)) = (mode, &train) {
            let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
            for ch in 0..c {
                let rm = &mut stats.mean.data_mut()[ch];
                *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean[ch];
                let rv = &mut stats.var.data_mut()[ch];
                *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * var[ch] * unbias;
            }
        }
        let out = Tensor::new(&d, out)?;
        self.push(
            "batch_norm2d",
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train: train.is_some(),
            },
            &[input, gamma, beta],
        )
    }

    /// Fully connected layer: `N x In` times `Out x In` weight, plus `Out` bias.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xd = self.dims(input).to_vec();
        let wd = self.dims(weight).to_vec();
        if xd.len() != 2 || wd.len() != 2 || xd[1] != wd[1] {
            return Err(Error::shape("linear", format!("input {xd:?}, weight {wd:?}")));
        }
        let (n, fin, fout) = (xd[0], xd[1], wd[0]);
        let mut out = vec![0.0; n * fout];
        gemm(n, fin, fout, 1.0, self.value(input).data(), false, self.value(weight).data(), true, 0.0, &mut out);
        if let Some(b) = bias {
            let bv = self.value(b).data();
            if bv.len() != fout {
                return Err(Error::shape("linear", format!("bias {:?} for {fout} outputs", self.dims(b))));
            }
            for row in out.chunks_mut(fout) {
                row.iter_mut().zip(bv).for_each(|(v, b)| *v += b);
            }
        }
        let out = Tensor::new(&[n, fout], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push("linear", out, Op::Linear { input, weight, bias }, &inputs)
    }

    /// Multiplies channel `c` of an `N x C x ...` tensor by `scale[c]`.
    pub fn mul_channel(&mut self, input: Var, scale: Var) -> Result<Var> {
        let d = self.dims(input).to_vec();
        let s = self.value(scale);
        if d.len() < 2 || s.numel() != d[1] {
            return Err(Error::shape("mul_channel", format!("input {d:?}, scale {:?}", s.dims())));
        }
        let inner: usize = d[2..].iter().product();
        let c = d[1];
        let sv = s.data();
        let x = self.value(input).data();
        let data = x
            .chunks(inner)
            .enumerate()
            .flat_map(|(i, chunk)| {
                let f = sv[i % c];
                chunk.iter().map(move |v| v * f)
            })
            .collect();
        let out = Tensor::new(&d, data)?;
        self.push("mul_channel", out, Op::MulChannel { input, scale }, &[input, scale])
    }

    /// Concatenation along axis 1.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let d0 = self.dims(first).to_vec();
        if d0.len() < 2 {
            return Err(Error::shape("concat_channels", format!("needs rank >= 2, got {d0:?}")));
        }
        let inner: usize = d0[2..].iter().product();
        let mut channels = 0;
        for &p in parts {
            let d = self.dims(p);
            if d.len() != d0.len() || d[0] != d0[0] || d[2..] != d0[2..] {
                return Err(Error::shape("concat_channels", format!("{d0:?} vs {d:?}")));
            }
            channels += d[1];
        }
        let mut data = Vec::with_capacity(d0[0] * channels * inner);
        for n in 0..d0[0] {
            for &p in parts {
                let v = self.value(p);
                let block = v.dims()[1] * inner;
                data.extend_from_slice(&v.data()[n * block..(n + 1) * block]);
            }
        }
        let mut dims = d0.clone();
        dims[1] = channels;
        let out = Tensor::new(&dims, data)?;
        self.push("concat_channels", out, Op::ConcatChannels(parts.to_vec()), parts)
    }

    /// Mean binary cross-entropy of probabilities `pred` against `target`.
    /// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]`; no gradient
    /// flows into `target`.
    pub fn bce(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_dims("bce", pred, target)?;
        let p = self.value(pred).data();
        let y = self.value(target).data();
        let total: f64 = p
            .iter()
            .zip(y)
            .map(|(&p, &y)| {
                let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
            })
            .sum();
        let out = Tensor::scalar(total / p.len() as f64);
        self.push("bce", out, Op::Bce { pred, target }, &[pred])
    }

    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let d = self.dims(input).to_vec();
        if axis >= d.len() {
            return Err(Error::shape("softmax", format!("axis {axis} for {d:?}")));
        }
        let (outer, len, inner) = axis_split(&d, axis);
        let x = self.value(input).data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let m = (0..len).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (x[at(k)] - m).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[at(k)] /= z;
                }
            }
        }
        let out = Tensor::new(&d, out)?;
        self.push("softmax", out, Op::Softmax { input, axis }, &[input])
    }

    /// Row `index` of the leading axis; drops that axis.
    pub fn select_row(&mut self, input: Var, index: usize) -> Result<Var> {
        let d = self.dims(input).to_vec();
        if d.len() < 2 || index >= d[0] {
            return Err(Error::shape("select_row", format!("row {index} of {d:?}")));
        }
        let inner: usize = d[1..].iter().product();
        let data = self.value(input).data()[index * inner..(index + 1) * inner].to_vec();
        let out = Tensor::new(&d[1..], data)?;
        self.push("select_row", out, Op::SelectRow { input, index }, &[input])
    }

    /// Rows `start..start + len` of the leading (batch) axis.
    pub fn narrow_batch(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(input).narrow_batch(start, len)?;
        self.push("narrow_batch", out, Op::NarrowBatch { input, start }, &[input])
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every parameter leaf on the tape gets an entry, zero if unreached.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.dims(loss))));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::new(self.dims(loss), vec![1.0])?);

        let mut result = Gradients::default();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                if matches!(node.op, Op::Leaf) {
                    let zero = Tensor::zeros(node.value.dims());
                    if let Some(pid) = node.param {
                        result.params.insert(pid, zero.clone());
                    }
                    result.leaves.insert(Var(i), zero);
                }
                continue;
            };
            if let Op::Leaf = node.op {
                g.ensure_finite("gradient")?;
                if let Some(pid) = node.param {
                    result.params.insert(pid, g.clone());
                }
                result.leaves.insert(Var(i), g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads)?;
        }
        // Parameters registered after the loss node cannot reach it.
        for (i, node) in self.nodes.iter().enumerate().skip(loss.0 + 1) {
            if let (Op::Leaf, Some(pid)) = (&node.op, node.param) {
                result.params.entry(pid).or_insert_with(|| Tensor::zeros(node.value.dims()));
                result.leaves.entry(Var(i)).or_insert_with(|| Tensor::zeros(node.value.dims()));
            }
        }
        Ok(result)
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, || g.clone());
                self.accumulate(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, || g.clone());
                self.accumulate(grads, *b, || g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, || zip_map(g, vb, |g, y| g * y));
                self.accumulate(grads, *b, || zip_map(g, va, |g, x| g * x));
            }
            Op::Scale(x, f) => self.accumulate(grads, *x, || g.map(|v| v * f)),
            Op::Shift(x) => self.accumulate(grads, *x, || g.clone()),
            Op::Relu(x) => {
                let vx = self.value(*x);
                self.accumulate(grads, *x, || zip_map(g, vx, |g, x| if x > 0.0 { g } else { 0.0 }));
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                self.accumulate(grads, *x, || zip_map(g, y, |g, s| g * s * (1.0 - s)));
            }
            Op::Sum(x) => {
                let s = gd[0];
                self.accumulate(grads, *x, || Tensor::full(self.dims(*x), s));
            }
            Op::AbsSum(x) => {
                let s = gd[0];
                self.accumulate(grads, *x, || self.value(*x).map(|v| s * sign(v)));
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => self.conv2d_backward(*input, *weight, *bias, *stride, *padding, g, grads)?,
            Op::MaxPool2d { input, argmax } | Op::GlobalMaxPool { input, argmax } => {
                if self.requires_grad(*input) {
                    let mut dx = Tensor::zeros(self.dims(*input));
                    let dxd = dx.data_mut();
                    for (&src, &gv) in argmax.iter().zip(gd) {
                        dxd[src] += gv;
                    }
                    self.accumulate(grads, *input, || dx);
                }
            }
            Op::UpsampleNearest(input) => {
                if self.requires_grad(*input) {
                    let d = self.dims(*input);
                    let (h, w) = (d[2], d[3]);
                    let mut dx = Tensor::zeros(d);
                    for (pl, plane) in dx.data_mut().chunks_mut(h * w).enumerate() {
                        let src = &gd[pl * 4 * h * w..(pl + 1) * 4 * h * w];
                        for y in 0..2 * h {
                            for xo in 0..2 * w {
                                plane[(y / 2) * w + xo / 2] += src[y * 2 * w + xo];
                            }
                        }
                    }
                    self.accumulate(grads, *input, || dx);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let d = self.dims(*input);
                let c = d[1];
                let n = d[0];
                let inner: usize = d[2..].iter().product();
                let count = (n * inner) as f64;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        for i in (b * c + ch) * inner..(b * c + ch + 1) * inner {
                            dgamma[ch] += gd[i] * xhat[i];
                            dbeta[ch] += gd[i];
                        }
                    }
                }
                if self.requires_grad(*input) {
                    let mut dx = vec![0.0; gd.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let scale = gam[ch] * inv_std[ch];
                            for i in (b * c + ch) * inner..(b * c + ch + 1) * inner {
                                dx[i] = if *train {
                                    // d/dx of gamma * xhat with batch statistics.
                                    scale * (gd[i] - dbeta[ch] / count - xhat[i] * dgamma[ch] / count)
                                } else {
                                    scale * gd[i]
                                };
                            }
                        }
                    }
                    let dx = Tensor::new(d, dx)?;
                    self.accumulate(grads, *input, || dx);
                }
                let gdims = self.dims(*gamma).to_vec();
                let bdims = self.dims(*beta).to_vec();
                self.accumulate(grads, *gamma, || Tensor::new(&gdims, dgamma).expect("dims"));
                self.accumulate(grads, *beta, || Tensor::new(&bdims, dbeta).expect("dims"));
            }
            Op::Linear { input, weight, bias } => {
                let xd = self.dims(*input);
                let wd = self.dims(*weight);
                let (n, fin, fout) = (xd[0], xd[1], wd[0]);
                if self.requires_grad(*input) {
                    let mut dx = vec![0.0; n * fin];
                    gemm(n, fout, fin, 1.0, gd, false, self.value(*weight).data(), false, 0.0, &mut dx);
                    let dx = Tensor::new(xd, dx)?;
                    self.accumulate(grads, *input, || dx);
                }
                if self.requires_grad(*weight) {
                    let mut dw = vec![0.0; fout * fin];
                    gemm(fout, n, fin, 1.0, gd, true, self.value(*input).data(), false, 0.0, &mut dw);
                    let dw = Tensor::new(wd, dw)?;
                    self.accumulate(grads, *weight, || dw);
                }
                if let Some(b) = bias {
                    let mut db = vec![0.0; fout];
                    for row in gd.chunks(fout) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    let bdims = self.dims(*b).to_vec();
                    self.accumulate(grads, *b, || Tensor::new(&bdims, db).expect("dims"));
                }
            }
            Op::MulChannel { input, scale } => {
                let d = self.dims(*input);
                let c = d[1];
                let inner: usize = d[2..].iter().product();
                let s = self.value(*scale).data();
                if self.requires_grad(*input) {
                    let dx: Vec<f64> = gd
                        .chunks(inner)
                        .enumerate()
                        .flat_map(|(i, ch)| {
                            let f = s[i % c];
                            ch.iter().map(move |v| v * f)
                        })
                        .collect();
                    let dx = Tensor::new(d, dx)?;
                    self.accumulate(grads, *input, || dx);
                }
                if self.requires_grad(*scale) {
                    let x = self.value(*input).data();
                    let mut ds = vec![0.0; c];
                    for (i, (gch, xch)) in gd.chunks(inner).zip(x.chunks(inner)).enumerate() {
                        ds[i % c] += gch.iter().zip(xch).map(|(a, b)| a * b).sum::<f64>();
                    }
                    let sdims = self.dims(*scale).to_vec();
                    self.accumulate(grads, *scale, || Tensor::new(&sdims, ds).expect("dims"));
                }
            }
            Op::ConcatChannels(parts) => {
                let d = node.value.dims();
                let inner: usize = d[2..].iter().product();
                let total = d[1] * inner;
                let mut offset = 0;
                for &p in parts {
                    let pd = self.dims(p).to_vec();
                    let block = pd[1] * inner;
                    if self.requires_grad(p) {
                        let mut dp = Vec::with_capacity(pd[0] * block);
                        for n in 0..pd[0] {
                            dp.extend_from_slice(&gd[n * total + offset..n * total + offset + block]);
                        }
                        let dp = Tensor::new(&pd, dp)?;
                        self.accumulate(grads, p, || dp);
                    }
                    offset += block;
                }
            }
            Op::Bce { pred, target } => {
                let p = self.value(*pred).data();
                let y = self.value(*target).data();
                let scale = gd[0] / p.len() as f64;
                let dp: Vec<f64> = p
                    .iter()
                    .zip(y)
                    .map(|(&p, &y)| {
                        if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
                            0.0
                        } else {
                            scale * (-y / p + (1.0 - y) / (1.0 - p))
                        }
                    })
                    .collect();
                let dp = Tensor::new(self.dims(*pred), dp)?;
                self.accumulate(grads, *pred, || dp);
            }
            Op::Softmax { input, axis } => {
                let d = node.value.dims();
                let (outer, len, inner) = axis_split(d, *axis);
                let s = node.value.data();
                let mut dx = vec![0.0; s.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| gd[at(k)] * s[at(k)]).sum();
                        for k in 0..len {
                            dx[at(k)] = s[at(k)] * (gd[at(k)] - dot);
                        }
                    }
                }
                let dx = Tensor::new(d, dx)?;
                self.accumulate(grads, *input, || dx);
            }
            Op::SelectRow { input, index } => {
                let d = self.dims(*input);
                let inner: usize = d[1..].iter().product();
                let mut dx = Tensor::zeros(d);
                dx.data_mut()[index * inner..(index + 1) * inner].copy_from_slice(gd);
                self.accumulate(grads, *input, || dx);
            }
            Op::NarrowBatch { input, start } => {
                let d = self.dims(*input);
                let inner: usize = d[1..].iter().product();
                let mut dx = Tensor::zeros(d);
                dx.data_mut()[start * inner..start * inner + gd.len()].copy_from_slice(gd);
                self.accumulate(grads, *input, || dx);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let xd = self.dims(input).to_vec();
        let wd = self.dims(weight).to_vec();
        let geom = ConvGeom::new(&xd, &wd, stride, padding)?;
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let gd = g.data();
        let need_dx = self.requires_grad(input);
        let need_dw = self.requires_grad(weight);
        let out_len = geom.cout * geom.p();

        if let Some(b) = bias {
            if self.requires_grad(b) {
                let mut db = vec![0.0; geom.cout];
                for n in 0..geom.n {
                    for (co, row) in gd[n * out_len..(n + 1) * out_len].chunks(geom.p()).enumerate() {
                        db[co] += row.iter().sum::<f64>();
                    }
                }
                let bdims = self.dims(b).to_vec();
                self.accumulate(grads, b, || Tensor::new(&bdims, db).expect("dims"));
            }
        }
        if !need_dx && !need_dw {
            return Ok(());
        }
        let pointwise = geom.is_pointwise();
        let mut col = vec![0.0; if pointwise { 0 } else { geom.kdim() * geom.p() }];
        let mut dcol = vec![0.0; if need_dx && !pointwise { geom.kdim() * geom.p() } else { 0 }];
        let mut dw = vec![0.0; if need_dw { w.len() } else { 0 }];
        let mut dx = vec![0.0; if need_dx { x.len() } else { 0 }];
        for n in 0..geom.n {
            let xn = &x[n * geom.in_len()..(n + 1) * geom.in_len()];
            let gn = &gd[n * out_len..(n + 1) * out_len];
            if need_dw {
                let cols: &[f64] = if pointwise {
                    xn
                } else {
                    geom.im2col(xn, &mut col);
                    &col
                };
                gemm(geom.cout, geom.p(), geom.kdim(), 1.0, gn, false, cols, true, 1.0, &mut dw);
            }
            if need_dx {
                let dxn = &mut dx[n * geom.in_len()..(n + 1) * geom.in_len()];
                if pointwise {
                    gemm(geom.kdim(), geom.cout, geom.p(), 1.0, w, true, gn, false, 0.0, dxn);
                } else {
                    gemm(geom.kdim(), geom.cout, geom.p(), 1.0, w, true, gn, false, 0.0, &mut dcol);
                    geom.col2im(&dcol, dxn);
                }
            }
        }
        if need_dw {
            let dw = Tensor::new(&wd, dw)?;
            self.accumulate(grads, weight, || dw);
        }
        if need_dx {
            let dx = Tensor::new(&xd, dx)?;
            self.accumulate(grads, input, || dx);
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, make: impl FnOnce() -> Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let g = make();
        match &mut grads[v.0] {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.dims(), data).expect("same dims")
}

fn axis_split(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

/// Shape bookkeeping shared by the conv forward and backward passes.
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(xd: &[usize], wd: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (h, w, k) = (xd[2], xd[3], wd[2]);
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {k} larger than padded input {h}x{w} (pad {pad})"),
            ));
        }
        Ok(Self {
            n: xd[0],
            cin: xd[1],
            h,
            w,
            cout: wd[0],
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn kdim(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Valid output columns `[lo, hi)` for kernel column offset `kj`.
    fn col_range(&self, kj: usize) -> (usize, usize) {
        // ix = ox * s + kj - pad must lie in [0, w)
        let lo = if kj >= self.pad { 0 } else { (self.pad - kj).div_ceil(self.stride) };
        let hi = if self.w + self.pad > kj {
            ((self.w + self.pad - kj - 1) / self.stride + 1).min(self.wo)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let p = self.p();
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (ci * self.k + ki) * self.k + kj;
                    let dst = &mut col[row * p..(row + 1) * p];
                    let (lo, hi) = self.col_range(kj);
                    for oy in 0..self.ho {
                        let drow = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            drow.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        drow[..lo].fill(0.0);
                        drow[hi..].fill(0.0);
                        if self.stride == 1 {
                            let start = lo + kj - self.pad;
                            drow[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        } else {
                            for (ox, d) in drow.iter_mut().enumerate().take(hi).skip(lo) {
                                *d = src[ox * self.stride + kj - self.pad];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], dx: &mut [f64]) {
        let p = self.p();
        dx.fill(0.0);
        for ci in 0..self.cin {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (ci * self.k + ki) * self.k + kj;
                    let src = &col[row * p..(row + 1) * p];
                    let (lo, hi) = self.col_range(kj);
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let srow = &src[oy * self.wo..(oy + 1) * self.wo];
                        let drow = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in lo..hi {
                            drow[ox * self.stride + kj - self.pad] += srow[ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(dims: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(dims, data.to_vec()).unwrap()
    }

    /// Direct convolution, used as an oracle for the im2col path.
    fn conv_naive(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (xd, wd) = (x.dims(), w.dims());
        let (n, cin, h, wi) = (xd[0], xd[1], xd[2] as isize, xd[3] as isize);
        let (cout, k) = (wd[0], wd[2]);
        let ho = (h as usize + 2 * pad - k) / stride + 1;
        let wo = (wi as usize + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[n, cout, ho, wo]);
        for b in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = 0.0;
                        for ci in 0..cin {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy >= 0 && iy < h && ix >= 0 && ix < wi {
                                        s += x.data()[((b * cin + ci) * h as usize + iy as usize) * wi as usize + ix as usize]
                                            * w.data()[((co * cin + ci) * k + ki) * k + kj];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((b * cout + co) * ho + oy) * wo + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 1, 3, 3], &[0.3, -1.0, 2.0, 4.0, 5.5, 0.0, 1.0, 7.0, -2.0])).unwrap();
        let w = g.input(t(&[1, 1, 1, 1], &[1.0])).unwrap();
        let b = g.input(t(&[1], &[0.0])).unwrap();
        let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn conv_two_by_two() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let w = g.input(t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y).dims(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[5.0]);
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(h, w, k, s, p) in &[(5, 6, 3, 1, 1), (6, 6, 3, 2, 1), (7, 5, 3, 2, 0), (4, 4, 1, 1, 0), (8, 8, 5, 3, 2)] {
            let x = Tensor::randn(&[2, 3, h, w], 1.0, &mut rng);
            let wt = Tensor::randn(&[4, 3, k, k], 1.0, &mut rng);
            let mut g = Graph::new();
            let xv = g.input(x.clone()).unwrap();
            let wv = g.input(wt.clone()).unwrap();
            let y = g.conv2d(xv, wv, None, s, p).unwrap();
            let want = conv_naive(&x, &wt, s, p);
            assert_eq!(g.value(y).dims(), want.dims());
            assert!(g.value(y).max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[2, 3, 2], |i| i as f64 - 4.0)).unwrap();
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn grad_of_square() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1], &[3.0])).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Shape { .. })));
    }

    #[test]
    fn unreached_params_get_zero_grad() {
        let mut g = Graph::new();
        let a = g.param(ParamId(0), t(&[2], &[1.0, 2.0])).unwrap();
        let _b = g.param(ParamId(1), t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let s = g.sum(a).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.param(ParamId(1)).unwrap().data(), &[0.0; 3]);
        assert_eq!(grads.params().len(), 2);
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut g = Graph::new();
        assert!(matches!(g.input(t(&[1], &[f64::INFINITY])), Err(Error::NonFinite(_))));
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.input(Tensor::zeros(&[3, 2])).unwrap();
        assert!(g.add(a, b).is_err());
        let odd = g.input(Tensor::zeros(&[1, 1, 3, 4])).unwrap();
        assert!(g.max_pool2d(odd).is_err());
        let x = g.input(Tensor::zeros(&[1, 2, 4, 4])).unwrap();
        let w = g.input(Tensor::zeros(&[1, 3, 3, 3])).unwrap();
        assert!(g.conv2d(x, w, None, 1, 1).is_err());
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let x = g.input(Tensor::randn(&[3, 4, 5], 3.0, &mut rng)).unwrap();
        for axis in 0..3 {
            let s = g.softmax(x, axis).unwrap();
            let v = g.value(s);
            let d = v.dims().to_vec();
            let (outer, len, inner) = axis_split(&d, axis);
            for o in 0..outer {
                for i in 0..inner {
                    let total: f64 = (0..len).map(|k| v.data()[(o * len + k) * inner + i]).sum();
                    assert!((total - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn batch_norm_eval_is_affine_and_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let stats = RunningStats {
            mean: Tensor::randn(&[3], 1.0, &mut rng),
            var: Tensor::rand_uniform(&[3], 0.5, 2.0, &mut rng),
        };
        let before = stats.clone();
        let x = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.input(x.clone()).unwrap();
        let x2 = g.scale(xv, 2.0).unwrap();
        let gamma = g.input(Tensor::randn(&[3], 1.0, &mut rng)).unwrap();
        let beta = g.input(Tensor::randn(&[3], 1.0, &mut rng)).unwrap();
        let zero = g.input(Tensor::zeros(&[2, 3, 2, 2])).unwrap();
        let y0 = g.batch_norm2d(zero, gamma, beta, NormMode::Eval(&stats)).unwrap();
        let y1 = g.batch_norm2d(xv, gamma, beta, NormMode::Eval(&stats)).unwrap();
        let y2 = g.batch_norm2d(x2, gamma, beta, NormMode::Eval(&stats)).unwrap();
        // Affine: y(2x) - y(0) = 2 (y(x) - y(0))
        for i in 0..x.numel() {
            let (a, b, c) = (g.value(y0).data()[i], g.value(y1).data()[i], g.value(y2).data()[i]);
            assert!(((c - a) - 2.0 * (b - a)).abs() < 1e-12);
        }
        assert_eq!(stats, before);
    }

    #[test]
    fn batch_norm_train_updates_running_stats() {
        let mut stats = RunningStats::new(1);
        let mut g = Graph::new();
        let x = g.input(t(&[4, 1], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let gamma = g.input(t(&[1], &[1.0])).unwrap();
        let beta = g.input(t(&[1], &[0.0])).unwrap();
        g.batch_norm2d(x, gamma, beta, NormMode::Train(&mut stats)).unwrap();
        assert!((stats.mean.data()[0] - 0.25).abs() < 1e-15);
        // unbiased variance of 1..4 is 5/3
        assert!((stats.var.data()[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[2, 3, 8, 8], 1.0, &mut rng);
        let w = Tensor::randn(&[5, 3, 3, 3], 1.0, &mut rng);
        let run = || {
            let mut g = Graph::new();
            let xv = g.input(x.clone()).unwrap();
            let wv = g.input(w.clone()).unwrap();
            let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run().data(), run().data());
    }
}
