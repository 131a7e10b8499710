//! Reverse-mode automatic differentiation over a define-by-run tape.
//!
//! A [`Graph`] records every operation as it executes. Values live in an
//! arena indexed by [`NodeId`]; calling [`Graph::backward`] on a scalar node
//! replays the tape in reverse and accumulates gradients into every tracked
//! node. The op set is exactly what the detector needs: convolution with
//! independent strides per axis, relu, sigmoid, a 3x3 stride-1 max pool,
//! elementwise add/scale, full-sum reduction, and the two fused loss
//! kernels (penalty-reduced focal loss, masked smooth L1).
//!
//! Every forward output and every backward contribution is checked for
//! NaN/Inf; nothing non-finite propagates silently.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Convolution geometry. Strides and padding are independent per axis;
/// the asymmetric pairs (1,2) and (2,1) drive the off-diagonal layers of
/// the matrix backbone.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    pub fn new(
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        in_channels: usize,
        out_channels: usize,
    ) -> Self {
        ConvSpec {
            kernel_h: kernel.0,
            kernel_w: kernel.1,
            stride_h: stride.0,
            stride_w: stride.1,
            pad_h: pad.0,
            pad_w: pad.1,
            in_channels,
            out_channels,
        }
    }

    /// out = floor((in + 2*pad - kernel) / stride) + 1, which must be >= 1.
    pub fn out_extent(axis: &str, input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
        if stride == 0 || kernel == 0 {
            return Err(Error::invalid("conv spec", format!("zero kernel or stride on {axis}")));
        }
        let padded = input + 2 * pad;
        if padded < kernel {
            return Err(Error::EmptyConvOutput {
                axis: axis.to_string(),
                input,
                kernel,
                stride,
                pad,
            });
        }
        Ok((padded - kernel) / stride + 1)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let oh = Self::out_extent("height", h, self.kernel_h, self.stride_h, self.pad_h)?;
        let ow = Self::out_extent("width", w, self.kernel_w, self.stride_w, self.pad_w)?;
        Ok((oh, ow))
    }

    /// Shape of the weight tensor this spec expects: [C_out, C_in, KH, KW].
    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        spec: ConvSpec,
    },
    Relu {
        input: NodeId,
    },
    Sigmoid {
        input: NodeId,
    },
    MaxPool3x3 {
        input: NodeId,
    },
    Add {
        lhs: NodeId,
        rhs: NodeId,
    },
    Scale {
        input: NodeId,
        factor: f64,
    },
    Sum {
        input: NodeId,
    },
    FocalLoss {
        pred: NodeId,
        target: Tensor,
        alpha: f64,
        beta: f64,
    },
    SmoothL1 {
        pred: NodeId,
        target: Tensor,
        mask: Tensor,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Predicted probabilities are clamped to this interval inside focal-loss
/// logs so that saturated sigmoids cannot produce infinities.
pub const PROB_CLAMP: f64 = 1e-7;

/// Define-by-run tape. One graph per forward/backward pass; independent
/// graphs on different threads never share state.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Untracked input (no gradient will be computed for it).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    /// Tracked input; [`Graph::grad`] is populated for it after backward.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward pass with respect to node `id`.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Number of recorded ops of each kind, for architectural assertions
    /// (e.g. proving no pooling op exists on the head path).
    pub fn op_census(&self) -> OpCensus {
        let mut census = OpCensus::default();
        for node in &self.nodes {
            match node.op {
                Op::Leaf => census.leaf += 1,
                Op::Conv2d { .. } => census.conv2d += 1,
                Op::Relu { .. } => census.relu += 1,
                Op::Sigmoid { .. } => census.sigmoid += 1,
                Op::MaxPool3x3 { .. } => census.max_pool += 1,
                Op::Add { .. } => census.add += 1,
                Op::Scale { .. } => census.scale += 1,
                Op::Sum { .. } => census.sum += 1,
                Op::FocalLoss { .. } => census.focal_loss += 1,
                Op::SmoothL1 { .. } => census.smooth_l1 += 1,
            }
        }
        census
    }

    // ---- ops ----

    /// 2-D convolution over NCHW input with weight [C_out, C_in, KH, KW]
    /// and bias [C_out].
    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, bias: NodeId, spec: &ConvSpec) -> Result<NodeId> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let out = conv2d_forward(x, w, b, spec)?;
        out.check_finite("conv2d output")?;
        let requires = self.requires(input) || self.requires(weight) || self.requires(bias);
        Ok(self.push(
            out,
            requires,
            Op::Conv2d {
                input,
                weight,
                bias,
                spec: *spec,
            },
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let out = Tensor::from_fn(x.shape(), |i| x.data()[i].max(0.0));
        let requires = self.requires(input);
        self.push(out, requires, Op::Relu { input })
    }

    /// Numerically stable logistic sigmoid.
    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let out = Tensor::from_fn(x.shape(), |i| stable_sigmoid(x.data()[i]));
        let requires = self.requires(input);
        self.push(out, requires, Op::Sigmoid { input })
    }

    /// 3x3 max pool with stride 1 and pad 1 over the trailing two axes;
    /// output shape equals input shape.
    pub fn max_pool_3x3_stride1(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let out = max_pool_3x3_forward(x)?;
        let requires = self.requires(input);
        Ok(self.push(out, requires, Op::MaxPool3x3 { input }))
    }

    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let a = self.value(lhs);
        let b = self.value(rhs);
        if a.shape() != b.shape() {
            return Err(Error::shape("add operands", format!("{:?}", a.shape()), format!("{:?}", b.shape())));
        }
        let out = Tensor::from_fn(a.shape(), |i| a.data()[i] + b.data()[i]);
        out.check_finite("add output")?;
        let requires = self.requires(lhs) || self.requires(rhs);
        Ok(self.push(out, requires, Op::Add { lhs, rhs }))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> Result<NodeId> {
        let x = self.value(input);
        let out = Tensor::from_fn(x.shape(), |i| x.data()[i] * factor);
        out.check_finite("scale output")?;
        let requires = self.requires(input);
        Ok(self.push(out, requires, Op::Scale { input, factor }))
    }

    /// Sum of all elements, as a `[1]`-shaped tensor.
    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let total: f64 = x.data().iter().sum();
        let out = Tensor::scalar(total);
        out.check_finite("sum output")?;
        let requires = self.requires(input);
        Ok(self.push(out, requires, Op::Sum { input }))
    }

    /// Penalty-reduced focal loss against a fixed target heatmap, normalized
    /// by the number of exact-1.0 target cells (at least 1).
    ///
    /// Positive cells (target == 1):  -(1-p)^alpha * log(p)
    /// Negative cells:                -(1-t)^beta * p^alpha * log(1-p)
    ///
    /// `pred` must hold probabilities; they are clamped to
    /// [PROB_CLAMP, 1-PROB_CLAMP] inside the logs.
    pub fn focal_loss(&mut self, pred: NodeId, target: &Tensor, alpha: f64, beta: f64) -> Result<NodeId> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::shape(
                "focal loss target",
                format!("{:?}", p.shape()),
                format!("{:?}", target.shape()),
            ));
        }
        if target.data().iter().any(|&t| !(0.0..=1.0).contains(&t)) {
            return Err(Error::invalid("focal loss target", "values outside [0,1]"));
        }
        let loss = focal_forward(p, target, alpha, beta);
        let out = Tensor::scalar(loss);
        out.check_finite("focal loss")?;
        let requires = self.requires(pred);
        Ok(self.push(
            out,
            requires,
            Op::FocalLoss {
                pred,
                target: target.clone(),
                alpha,
                beta,
            },
        ))
    }

    /// Smooth L1 (Huber with delta 1) between pred and target, averaged over
    /// the entries selected by `mask`. The mask has one value per spatial
    /// cell and broadcasts over leading channels; an empty mask yields zero.
    pub fn smooth_l1(&mut self, pred: NodeId, target: &Tensor, mask: &Tensor) -> Result<NodeId> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::shape(
                "smooth_l1 target",
                format!("{:?}", p.shape()),
                format!("{:?}", target.shape()),
            ));
        }
        let cells: usize = mask.numel();
        if p.numel() % cells != 0 {
            return Err(Error::shape("smooth_l1 mask", format!("divisor of {}", p.numel()), cells));
        }
        let loss = smooth_l1_forward(p, target, mask);
        let out = Tensor::scalar(loss);
        out.check_finite("smooth_l1 loss")?;
        let requires = self.requires(pred);
        Ok(self.push(
            out,
            requires,
            Op::SmoothL1 {
                pred,
                target: target.clone(),
                mask: mask.clone(),
            },
        ))
    }

    // ---- backward ----

    /// Reverse pass from a `[1]`-shaped root. Gradients accumulate into every
    /// node with `requires_grad`; read them back with [`Graph::grad`].
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::invalid("backward root", "must be a scalar node"));
        }
        for node in self.nodes.iter_mut() {
            node.grad = if node.requires_grad {
                Some(Tensor::zeros(node.value.shape()))
            } else {
                None
            };
        }
        if !self.nodes[root.0].requires_grad {
            // Nothing tracked feeds the root; gradients are all zero.
            return Ok(());
        }
        self.nodes[root.0].grad = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(out_grad) = self.nodes[i].grad.take() else {
                continue;
            };
            if out_grad.data().iter().all(|&g| g == 0.0) {
                // Node doesn't feed the root; nothing to propagate.
                self.nodes[i].grad = Some(out_grad);
                continue;
            }
            // Take the op out so arms can borrow node values freely.
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            let result = self.dispatch_backward(i, &op, &out_grad);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(out_grad);
            result?;
        }
        Ok(())
    }

    fn dispatch_backward(&mut self, node: usize, op: &Op, out_grad: &Tensor) -> Result<()> {
        match op {
            Op::Leaf => Ok(()),
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            } => {
                let (input, weight, bias) = (*input, *weight, *bias);
                let (dx, dw, db) = {
                    let x = &self.nodes[input.0].value;
                    let w = &self.nodes[weight.0].value;
                    conv2d_backward(
                        x,
                        w,
                        out_grad,
                        spec,
                        self.requires(input),
                        self.requires(weight),
                        self.requires(bias),
                    )
                };
                if let Some(dx) = dx {
                    self.accumulate(input, &dx, "conv2d input grad")?;
                }
                if let Some(dw) = dw {
                    self.accumulate(weight, &dw, "conv2d weight grad")?;
                }
                if let Some(db) = db {
                    self.accumulate(bias, &db, "conv2d bias grad")?;
                }
                Ok(())
            }
            Op::Relu { input } => {
                let input = *input;
                let dx = {
                    let x = &self.nodes[input.0].value;
                    Tensor::from_fn(x.shape(), |i| {
                        if x.data()[i] > 0.0 {
                            out_grad.data()[i]
                        } else {
                            0.0
                        }
                    })
                };
                self.accumulate(input, &dx, "relu grad")
            }
            Op::Sigmoid { input } => {
                let input = *input;
                let dx = {
                    let y = &self.nodes[node].value;
                    Tensor::from_fn(y.shape(), |i| {
                        let s = y.data()[i];
                        out_grad.data()[i] * s * (1.0 - s)
                    })
                };
                self.accumulate(input, &dx, "sigmoid grad")
            }
            Op::MaxPool3x3 { input } => {
                let input = *input;
                let dx = max_pool_3x3_backward(&self.nodes[input.0].value, out_grad);
                self.accumulate(input, &dx, "max_pool grad")
            }
            Op::Add { lhs, rhs } => {
                let (lhs, rhs) = (*lhs, *rhs);
                if self.requires(lhs) {
                    self.accumulate(lhs, out_grad, "add grad")?;
                }
                if self.requires(rhs) {
                    self.accumulate(rhs, out_grad, "add grad")?;
                }
                Ok(())
            }
            Op::Scale { input, factor } => {
                let (input, factor) = (*input, *factor);
                let dx = Tensor::from_fn(out_grad.shape(), |i| out_grad.data()[i] * factor);
                self.accumulate(input, &dx, "scale grad")
            }
            Op::Sum { input } => {
                let input = *input;
                let g = out_grad.item();
                let shape = self.nodes[input.0].value.shape().to_vec();
                let dx = Tensor::full(&shape, g);
                self.accumulate(input, &dx, "sum grad")
            }
            Op::FocalLoss {
                pred,
                target,
                alpha,
                beta,
            } => {
                let pred = *pred;
                let dx = focal_backward(&self.nodes[pred.0].value, target, *alpha, *beta, out_grad.item());
                self.accumulate(pred, &dx, "focal loss grad")
            }
            Op::SmoothL1 { pred, target, mask } => {
                let pred = *pred;
                let dx = smooth_l1_backward(&self.nodes[pred.0].value, target, mask, out_grad.item());
                self.accumulate(pred, &dx, "smooth_l1 grad")
            }
        }
    }

    fn accumulate(&mut self, id: NodeId, contribution: &Tensor, context: &str) -> Result<()> {
        contribution.check_finite(context)?;
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return Ok(());
        }
        let grad = node
            .grad
            .get_or_insert_with(|| Tensor::zeros(contribution.shape()));
        debug_assert_eq!(grad.shape(), contribution.shape());
        for (g, c) in grad.data_mut().iter_mut().zip(contribution.data()) {
            *g += c;
        }
        Ok(())
    }
}

/// Per-kind op counts reported by [`Graph::op_census`].
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct OpCensus {
    pub leaf: usize,
    pub conv2d: usize,
    pub relu: usize,
    pub sigmoid: usize,
    pub max_pool: usize,
    pub add: usize,
    pub scale: usize,
    pub sum: usize,
    pub focal_loss: usize,
    pub smooth_l1: usize,
}

#[inline]
fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---- convolution kernels ----

fn check_conv_shapes(x: &Tensor, w: &Tensor, b: &Tensor, spec: &ConvSpec) -> Result<(usize, usize, usize, usize)> {
    if x.shape().len() != 4 {
        return Err(Error::shape("conv input rank", 4, x.shape().len()));
    }
    let [n, c, h, width] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    if c != spec.in_channels {
        return Err(Error::shape("conv input channels", spec.in_channels, c));
    }
    if w.shape() != spec.weight_shape() {
        return Err(Error::shape(
            "conv weight",
            format!("{:?}", spec.weight_shape()),
            format!("{:?}", w.shape()),
        ));
    }
    if b.shape() != [spec.out_channels] {
        return Err(Error::shape("conv bias", spec.out_channels, b.numel()));
    }
    Ok((n, c, h, width))
}

/// Valid output range [lo, hi) for which `o*stride + k - pad` stays inside
/// `[0, extent)`.
#[inline]
fn valid_out_range(out_extent: usize, in_extent: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if k >= pad {
        0
    } else {
        // smallest o with o*stride + k - pad >= 0
        (pad - k).div_ceil(stride)
    };
    // largest o with o*stride + k - pad <= in_extent - 1
    let max_pos = in_extent + pad;
    if max_pos <= k {
        return (0, 0);
    }
    let hi = ((max_pos - 1 - k) / stride + 1).min(out_extent);
    (lo.min(hi), hi)
}

pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let (n_batch, cin, h, width) = check_conv_shapes(x, w, b, spec)?;
    let (oh, ow) = spec.output_hw(h, width)?;
    let cout = spec.out_channels;
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let (sh, sw) = (spec.stride_h, spec.stride_w);
    let (ph, pw) = (spec.pad_h, spec.pad_w);

    let mut out = Tensor::zeros(&[n_batch, cout, oh, ow]);
    let xs = x.data();
    let ws = w.data();
    let bs = b.data();
    let os = out.data_mut();

    for n in 0..n_batch {
        for co in 0..cout {
            let out_plane = &mut os[((n * cout + co) * oh * ow)..((n * cout + co + 1) * oh * ow)];
            out_plane.fill(bs[co]);
            for ci in 0..cin {
                let in_plane = &xs[((n * cin + ci) * h * width)..((n * cin + ci + 1) * h * width)];
                let w_base = ((co * cin) + ci) * kh * kw;
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_out_range(oh, h, ky, sh, ph);
                    let w_row = &ws[(w_base + ky * kw)..(w_base + (ky + 1) * kw)];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * sh + ky - ph;
                        let in_row = &in_plane[iy * width..(iy + 1) * width];
                        let out_row = &mut out_plane[oy * ow..(oy + 1) * ow];
                        for (kx, &wv) in w_row.iter().enumerate() {
                            let (ox_lo, ox_hi) = valid_out_range(ow, width, kx, sw, pw);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            if sw == 1 {
                                // contiguous input slice: ix = ox + kx - pw
                                let start = ox_lo + kx - pw;
                                let src = &in_row[start..start + (ox_hi - ox_lo)];
                                let dst = &mut out_row[ox_lo..ox_hi];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += wv * s;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * sw + kx - pw;
                                    out_row[ox] += wv * in_row[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    out_grad: &Tensor,
    spec: &ConvSpec,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (n_batch, cin) = (x.shape()[0], x.shape()[1]);
    let (h, width) = (x.shape()[2], x.shape()[3]);
    let cout = spec.out_channels;
    let (oh, ow) = (out_grad.shape()[2], out_grad.shape()[3]);
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let (sh, sw) = (spec.stride_h, spec.stride_w);
    let (ph, pw) = (spec.pad_h, spec.pad_w);

    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    let mut db = need_db.then(|| Tensor::zeros(&[cout]));

    let xs = x.data();
    let ws = w.data();
    let gs = out_grad.data();

    if let Some(db) = db.as_mut() {
        let dbs = db.data_mut();
        for n in 0..n_batch {
            for co in 0..cout {
                let g_plane = &gs[((n * cout + co) * oh * ow)..((n * cout + co + 1) * oh * ow)];
                dbs[co] += g_plane.iter().sum::<f64>();
            }
        }
    }

    if dx.is_none() && dw.is_none() {
        return (dx, dw, db);
    }

    for n in 0..n_batch {
        for co in 0..cout {
            let g_plane = &gs[((n * cout + co) * oh * ow)..((n * cout + co + 1) * oh * ow)];
            for ci in 0..cin {
                let in_plane = &xs[((n * cin + ci) * h * width)..((n * cin + ci + 1) * h * width)];
                let w_base = ((co * cin) + ci) * kh * kw;
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_out_range(oh, h, ky, sh, ph);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * sh + ky - ph;
                        let g_row = &g_plane[oy * ow..(oy + 1) * ow];
                        for kx in 0..kw {
                            let (ox_lo, ox_hi) = valid_out_range(ow, width, kx, sw, pw);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            let wv = ws[w_base + ky * kw + kx];
                            let mut wacc = 0.0;
                            if let Some(dxt) = dx.as_mut() {
                                let dplane_base = (n * cin + ci) * h * width + iy * width;
                                let dxs = dxt.data_mut();
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * sw + kx - pw;
                                    let g = g_row[ox];
                                    dxs[dplane_base + ix] += wv * g;
                                    wacc += in_plane[iy * width + ix] * g;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * sw + kx - pw;
                                    wacc += in_plane[iy * width + ix] * g_row[ox];
                                }
                            }
                            if let Some(dwt) = dw.as_mut() {
                                dwt.data_mut()[w_base + ky * kw + kx] += wacc;
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

// ---- max pool ----

pub(crate) fn max_pool_3x3_forward(x: &Tensor) -> Result<Tensor> {
    let rank = x.shape().len();
    if rank < 2 {
        return Err(Error::shape("max_pool input rank", ">=2", rank));
    }
    let h = x.shape()[rank - 2];
    let w = x.shape()[rank - 1];
    let planes: usize = x.shape()[..rank - 2].iter().product();
    let mut out = Tensor::zeros(x.shape());
    let mut hmax = vec![0.0f64; h * w];
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        // horizontal 3-window max
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            let dst = &mut hmax[y * w..(y + 1) * w];
            for xx in 0..w {
                let lo = xx.saturating_sub(1);
                let hi = (xx + 2).min(w);
                let mut m = f64::NEG_INFINITY;
                for &v in &row[lo..hi] {
                    if v > m {
                        m = v;
                    }
                }
                dst[xx] = m;
            }
        }
        // vertical 3-window max of the horizontal maxima
        let dst_plane = &mut out.data_mut()[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let lo = y.saturating_sub(1);
            let hi = (y + 2).min(h);
            for xx in 0..w {
                let mut m = f64::NEG_INFINITY;
                for yy in lo..hi {
                    let v = hmax[yy * w + xx];
                    if v > m {
                        m = v;
                    }
                }
                dst_plane[y * w + xx] = m;
            }
        }
    }
    Ok(out)
}

/// Routes each output cell's gradient to the first maximal input in its 3x3
/// neighborhood (row-major scan order breaks ties deterministically).
pub(crate) fn max_pool_3x3_backward(x: &Tensor, out_grad: &Tensor) -> Tensor {
    let rank = x.shape().len();
    let h = x.shape()[rank - 2];
    let w = x.shape()[rank - 1];
    let planes: usize = x.shape()[..rank - 2].iter().product();
    let mut dx = Tensor::zeros(x.shape());
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let grad = &out_grad.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let g = grad[y * w + xx];
                if g == 0.0 {
                    continue;
                }
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for yy in y.saturating_sub(1)..(y + 2).min(h) {
                    for xxx in xx.saturating_sub(1)..(xx + 2).min(w) {
                        let v = src[yy * w + xxx];
                        if v > best {
                            best = v;
                            best_idx = yy * w + xxx;
                        }
                    }
                }
                dst[best_idx] += g;
            }
        }
    }
    dx
}

// ---- loss kernels ----

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

fn num_positives(target: &Tensor) -> f64 {
    let n = target.data().iter().filter(|&&t| t == 1.0).count();
    (n.max(1)) as f64
}

pub(crate) fn focal_forward(pred: &Tensor, target: &Tensor, alpha: f64, beta: f64) -> f64 {
    let npos = num_positives(target);
    let mut loss = 0.0;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let p = clamp_prob(p);
        if t == 1.0 {
            loss -= (1.0 - p).powf(alpha) * p.ln();
        } else {
            loss -= (1.0 - t).powf(beta) * p.powf(alpha) * (1.0 - p).ln();
        }
    }
    loss / npos
}

pub(crate) fn focal_backward(pred: &Tensor, target: &Tensor, alpha: f64, beta: f64, upstream: f64) -> Tensor {
    let npos = num_positives(target);
    let scale = upstream / npos;
    Tensor::from_fn(pred.shape(), |i| {
        let raw = pred.data()[i];
        // Clamped probabilities sit on a flat section: zero gradient there.
        if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&raw) {
            return 0.0;
        }
        let p = raw;
        let t = target.data()[i];
        let d = if t == 1.0 {
            // d/dp [-(1-p)^a ln p] = a (1-p)^(a-1) ln p - (1-p)^a / p
            alpha * (1.0 - p).powf(alpha - 1.0) * p.ln() - (1.0 - p).powf(alpha) / p
        } else {
            // d/dp [-(1-t)^b p^a ln(1-p)]
            //   = (1-t)^b [ -a p^(a-1) ln(1-p) + p^a / (1-p) ]
            (1.0 - t).powf(beta) * (-alpha * p.powf(alpha - 1.0) * (1.0 - p).ln() + p.powf(alpha) / (1.0 - p))
        };
        scale * d
    })
}

pub(crate) fn smooth_l1_forward(pred: &Tensor, target: &Tensor, mask: &Tensor) -> f64 {
    let cells = mask.numel();
    let channels = pred.numel() / cells;
    let active: f64 = mask.data().iter().filter(|&&m| m != 0.0).count() as f64;
    if active == 0.0 {
        return 0.0;
    }
    let mut loss = 0.0;
    for c in 0..channels {
        let off = c * cells;
        for i in 0..cells {
            if mask.data()[i] == 0.0 {
                continue;
            }
            let d = pred.data()[off + i] - target.data()[off + i];
            loss += if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
        }
    }
    loss / (active * channels as f64)
}

pub(crate) fn smooth_l1_backward(pred: &Tensor, target: &Tensor, mask: &Tensor, upstream: f64) -> Tensor {
    let cells = mask.numel();
    let channels = pred.numel() / cells;
    let active: f64 = mask.data().iter().filter(|&&m| m != 0.0).count() as f64;
    if active == 0.0 {
        return Tensor::zeros(pred.shape());
    }
    let scale = upstream / (active * channels as f64);
    Tensor::from_fn(pred.shape(), |idx| {
        let i = idx % cells;
        if mask.data()[i] == 0.0 {
            return 0.0;
        }
        let d = pred.data()[idx] - target.data()[idx];
        let g = if d.abs() < 1.0 { d } else { d.signum() };
        scale * g
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    /// Naive sliding-window convolution used as the independent oracle.
    fn conv2d_oracle(x: &Tensor, w: &Tensor, b: &Tensor, spec: &ConvSpec) -> Tensor {
        let (n_batch, cin) = (x.shape()[0], x.shape()[1]);
        let (h, width) = (x.shape()[2], x.shape()[3]);
        let (oh, ow) = spec.output_hw(h, width).unwrap();
        let cout = spec.out_channels;
        let mut out = Tensor::zeros(&[n_batch, cout, oh, ow]);
        for n in 0..n_batch {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[co];
                        for ci in 0..cin {
                            for ky in 0..spec.kernel_h {
                                for kx in 0..spec.kernel_w {
                                    let iy = (oy * spec.stride_h + ky) as isize - spec.pad_h as isize;
                                    let ix = (ox * spec.stride_w + kx) as isize - spec.pad_w as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= width as isize {
                                        continue;
                                    }
                                    let xv = x.data()[x.idx4(n, ci, iy as usize, ix as usize)];
                                    let wv = w.data()
                                        [((co * cin + ci) * spec.kernel_h + ky) * spec.kernel_w + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                        let idx = out.idx4(n, co, oy, ox);
                        out.data_mut()[idx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_1x1() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 1, 1, 1], vec![3.0]).unwrap());
        let w = g.leaf(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let b = g.leaf(Tensor::zeros(&[1]));
        let spec = ConvSpec::new((1, 1), (1, 1), (0, 0), 1, 1);
        let y = g.conv2d(x, w, b, &spec).unwrap();
        assert_eq!(g.value(y).data(), &[3.0]);
    }

    #[test]
    fn conv_stride_1x2_halves_width() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 1, 8, 8]));
        let spec = ConvSpec::new((3, 3), (1, 2), (1, 1), 1, 3);
        let w = g.leaf(Tensor::zeros(&spec.weight_shape()));
        let b = g.leaf(Tensor::zeros(&[3]));
        let y = g.conv2d(x, w, b, &spec).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 3, 8, 4]);
    }

    #[test]
    fn conv_matches_oracle_strided() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(sh, sw) in &[(2usize, 1usize), (1, 2), (1, 1), (2, 2)] {
            let spec = ConvSpec::new((3, 3), (sh, sw), (1, 1), 2, 3);
            let x = rand_tensor(&mut rng, &[1, 2, 5, 7], -2.0, 2.0);
            let w = rand_tensor(&mut rng, &spec.weight_shape(), -1.0, 1.0);
            let b = rand_tensor(&mut rng, &[3], -1.0, 1.0);
            let got = conv2d_forward(&x, &w, &b, &spec).unwrap();
            let want = conv2d_oracle(&x, &w, &b, &spec);
            assert_eq!(got.shape(), want.shape());
            for (a, e) in got.data().iter().zip(want.data()) {
                assert!((a - e).abs() < 1e-12, "conv mismatch: {a} vs {e}");
            }
        }
    }

    #[test]
    fn conv_rejects_empty_output() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 1, 2, 2]));
        let spec = ConvSpec::new((5, 5), (1, 1), (0, 0), 1, 1);
        let w = g.leaf(Tensor::zeros(&spec.weight_shape()));
        let b = g.leaf(Tensor::zeros(&[1]));
        let err = g.conv2d(x, w, b, &spec).unwrap_err();
        assert!(err.to_string().contains("extent < 1"));
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 3, 4, 4]));
        let spec = ConvSpec::new((3, 3), (1, 1), (1, 1), 2, 4);
        let w = g.leaf(Tensor::zeros(&spec.weight_shape()));
        let b = g.leaf(Tensor::zeros(&[4]));
        let err = g.conv2d(x, w, b, &spec).unwrap_err();
        assert!(err.to_string().contains("channels"));
    }

    #[test]
    fn conv_linearity_zero_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = ConvSpec::new((3, 3), (1, 1), (1, 1), 2, 2);
        let x = rand_tensor(&mut rng, &[1, 2, 6, 6], -2.0, 2.0);
        let w = rand_tensor(&mut rng, &spec.weight_shape(), -1.0, 1.0);
        let b = Tensor::zeros(&[2]);
        let a = 3.7;
        let xa = Tensor::from_fn(x.shape(), |i| a * x.data()[i]);
        let y = conv2d_forward(&x, &w, &b, &spec).unwrap();
        let ya = conv2d_forward(&xa, &w, &b, &spec).unwrap();
        for (&v, &va) in y.data().iter().zip(ya.data()) {
            let rel = (va - a * v).abs() / v.abs().max(1.0);
            assert!(rel < 1e-10, "linearity violated: {va} vs {}", a * v);
        }
    }

    #[test]
    fn relu_forward_and_subgradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_all_negative_zero_grad() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![4], vec![-3.0, -2.0, -0.5, -1e-9]).unwrap());
        let y = g.relu(x);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sigmoid_midpoint_and_saturation() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![3], vec![0.0, -1000.0, 1000.0]).unwrap());
        let y = g.sigmoid(x);
        let vals = g.value(y).data();
        assert_eq!(vals[0], 0.5);
        assert!(vals[1] >= 0.0 && vals[1] < 1e-300);
        assert!(vals[2] <= 1.0 && vals[2] > 1.0 - 1e-12);
        assert!(vals.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn max_pool_plateau_from_single_pixel() {
        let mut x = Tensor::zeros(&[1, 6, 6]);
        let idx = x.idx3(0, 2, 3);
        x.data_mut()[idx] = 5.0;
        let y = max_pool_3x3_forward(&x).unwrap();
        for yy in 0..6 {
            for xx in 0..6 {
                let expect = if (1..=3).contains(&yy) && (2..=4).contains(&xx) {
                    5.0
                } else {
                    0.0
                };
                assert_eq!(y.data()[y.idx3(0, yy, xx)], expect, "at ({yy},{xx})");
            }
        }
    }

    #[test]
    fn max_pool_constant_map_unchanged() {
        let x = Tensor::full(&[2, 4, 5], 1.25);
        let y = max_pool_3x3_forward(&x).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn max_pool_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, &[1, 6, 6], -1.0, 1.0);
        let y = max_pool_3x3_forward(&x).unwrap();
        for yy in 0..6usize {
            for xx in 0..6usize {
                let mut m = f64::NEG_INFINITY;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (py, px) = (yy as i64 + dy, xx as i64 + dx);
                        if py < 0 || px < 0 || py >= 6 || px >= 6 {
                            continue;
                        }
                        m = m.max(x.data()[x.idx3(0, py as usize, px as usize)]);
                    }
                }
                assert_eq!(y.data()[y.idx3(0, yy, xx)], m);
            }
        }
    }

    #[test]
    fn backward_through_add_scale_sum() {
        let mut g = Graph::new();
        let a = g.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let b = g.param(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let c = g.add(a, b).unwrap();
        let d = g.scale(c, 2.5).unwrap();
        let s = g.sum(d).unwrap();
        assert_eq!(g.value(s).item(), 2.5 * 10.0);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[2.5, 2.5]);
        assert_eq!(g.grad(b).unwrap().data(), &[2.5, 2.5]);
    }

    #[test]
    fn focal_single_positive_closed_form() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::scalar(0.5));
        let t = Tensor::scalar(1.0);
        let l = g.focal_loss(p, &t, 2.0, 4.0).unwrap();
        let expect = 0.25 * std::f64::consts::LN_2;
        assert!((g.value(l).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn focal_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let shape = [1usize, 10, 10];
        let mut target = Tensor::zeros(&shape);
        target.data_mut()[37] = 1.0;
        let pred = Tensor::full(&shape, 0.5);
        let mut g = Graph::new();
        let p = g.leaf(pred.clone());
        let l = g.focal_loss(p, &target, 2.0, 4.0).unwrap();

        // independent oracle
        let mut expect = 0.0;
        for i in 0..100 {
            let t = target.data()[i];
            let pv: f64 = 0.5;
            if t == 1.0 {
                expect -= (1.0 - pv).powi(2) * pv.ln();
            } else {
                expect -= (1.0 - t).powi(4) * pv.powi(2) * (1.0 - pv).ln();
            }
        }
        expect /= 1.0;
        assert!((g.value(l).item() - expect).abs() < 1e-10);
        let _ = &mut rng;
    }

    #[test]
    fn focal_rejects_bad_targets() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::scalar(0.5));
        let t = Tensor::scalar(1.5);
        assert!(g.focal_loss(p, &t, 2.0, 4.0).is_err());
    }

    #[test]
    fn smooth_l1_exact_cases() {
        let mut g = Graph::new();
        // pred == target everywhere -> 0
        let p = g.leaf(Tensor::full(&[2, 4], 0.7));
        let l = g.smooth_l1(p, &Tensor::full(&[2, 4], 0.7), &Tensor::full(&[4], 1.0)).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        // single masked cell, both channels at |d| = 2 -> |d| - 0.5 = 1.5
        let mut mask = Tensor::zeros(&[4]);
        mask.data_mut()[1] = 1.0;
        let mut pred = Tensor::zeros(&[2, 4]);
        pred.data_mut()[1] = 2.0;
        pred.data_mut()[5] = 2.0;
        let p = g.leaf(pred);
        let l = g.smooth_l1(p, &Tensor::zeros(&[2, 4]), &mask).unwrap();
        assert_eq!(g.value(l).item(), 1.5);
    }

    #[test]
    fn smooth_l1_empty_mask_is_zero_not_nan() {
        let mut g = Graph::new();
        let p = g.param(Tensor::full(&[2, 4], 3.0));
        let l = g.smooth_l1(p, &Tensor::zeros(&[2, 4]), &Tensor::zeros(&[4])).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        g.backward(l).unwrap();
        assert!(g.grad(p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn smooth_l1_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pred = rand_tensor(&mut rng, &[2, 12], -3.0, 3.0);
        let target = rand_tensor(&mut rng, &[2, 12], -3.0, 3.0);
        let mask = Tensor::from_fn(&[12], |_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 });
        let mut g = Graph::new();
        let p = g.leaf(pred.clone());
        let l = g.smooth_l1(p, &target, &mask).unwrap();

        let mut total = 0.0;
        let mut count = 0.0;
        for c in 0..2usize {
            for i in 0..12usize {
                if mask.data()[i] == 0.0 {
                    continue;
                }
                let d: f64 = pred.data()[c * 12 + i] - target.data()[c * 12 + i];
                total += if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
                count += 1.0;
            }
        }
        let expect = if count == 0.0 { 0.0 } else { total / count };
        assert!((g.value(l).item() - expect).abs() < 1e-10);
    }

    #[test]
    fn nan_input_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1], vec![f64::NAN]).unwrap());
        let y = g.scale(x, 1.0);
        assert!(y.is_err());
    }

    #[test]
    fn census_counts_ops() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[1, 1, 4, 4]));
        let y = g.relu(x);
        let _ = g.max_pool_3x3_stride1(y).unwrap();
        let census = g.op_census();
        assert_eq!(census.relu, 1);
        assert_eq!(census.max_pool, 1);
        assert_eq!(census.conv2d, 0);
    }
}
