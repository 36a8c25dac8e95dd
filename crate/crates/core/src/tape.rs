//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] owns every tensor produced during a forward pass together
//! with an operation record per node. Calling [`Tape::backward`] on a
//! scalar replays the records in reverse and accumulates gradients into
//! the leaves that were created with `requires_grad`.
//!
//! Recording can be paused with [`Tape::set_recording`]: ops still
//! compute values through the exact same kernels (so paused and tracked
//! forward passes are bitwise identical), but paused outputs are stored
//! as constants and gradients do not flow through them. The unrolled
//! solver uses this for truncated backpropagation.

use crate::error::{Error, Result};
use crate::tensor::{
    conv2d_backward_input, conv2d_backward_kernels, conv2d_forward, soft_threshold,
    soft_threshold_deriv_tau, soft_threshold_deriv_x, softplus, softplus_deriv, Padding, Tensor,
};

/// Handle to a tensor stored on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(pub usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    Neg(TensorId),
    AddScalar(TensorId),
    MulScalar(TensorId, f64),
    /// Multiply by a one-element tensor, broadcast over the input.
    ScaleBy { input: TensorId, scalar: TensorId },
    Exp(TensorId),
    SumAll(TensorId),
    MeanAll(TensorId),
    Relu(TensorId),
    LeakyRelu(TensorId, f64),
    Softplus(TensorId),
    SoftThreshold { input: TensorId, tau: TensorId },
    Conv2d { input: TensorId, kernels: TensorId, pad: Padding },
    AddChannelBias { input: TensorId, bias: TensorId },
    AvgPool2(TensorId),
    UpsampleNearest2(TensorId),
    ConcatChannels(Vec<TensorId>),
    SliceChannels { input: TensorId, start: usize, count: usize },
    Reshape(TensorId),
    Permute3 { input: TensorId, perm: [usize; 3] },
    /// Fixed real Fourier-domain multiplier on a [2,H,W] tensor; self-adjoint.
    FourierMultiplier { input: TensorId, mult: std::rc::Rc<Vec<f64>> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// True when a gradient must be propagated into or through this node.
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Computation tape; single-threaded, append-only.
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), recording: true }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Pause or resume recording of backward rules. Values are computed
    /// either way; paused outputs become constants.
    pub fn set_recording(&mut self, on: bool) {
        self.recording = on;
    }

    /// New trainable leaf.
    pub fn param(&mut self, value: Tensor) -> TensorId {
        self.push_leaf(value, true)
    }

    /// New constant leaf.
    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            needs_grad: requires_grad,
            grad: None,
        });
        id
    }

    fn push(&mut self, value: Tensor, op: Op, parents_need_grad: bool) -> TensorId {
        let id = TensorId(self.nodes.len());
        let (op, needs) = if self.recording && parents_need_grad {
            (op, true)
        } else {
            (Op::Leaf, false)
        };
        self.nodes.push(Node { value, op, requires_grad: false, needs_grad: needs, grad: None });
        id
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    /// Gradient buffer of a leaf after `backward`; `None` until computed.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn assert_same_shape(&self, a: TensorId, b: TensorId, context: &'static str) {
        assert_eq!(
            self.nodes[a.0].value.shape, self.nodes[b.0].value.shape,
            "{context}: operand shapes differ"
        );
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.assert_same_shape(a, b, "add");
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].value.shape.clone();
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::new(shape, data), Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.assert_same_shape(a, b, "sub");
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].value.shape.clone();
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::new(shape, data), Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.assert_same_shape(a, b, "mul");
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].value.shape.clone();
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::new(shape, data), Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.assert_same_shape(a, b, "div");
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x / y)
            .collect();
        let shape = self.nodes[a.0].value.shape.clone();
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::new(shape, data), Op::Div(a, b), ng)
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].value.data.iter().map(|x| -x).collect();
        let shape = self.nodes[a.0].value.shape.clone();
        let ng = self.needs(a);
        self.push(Tensor::new(shape, data), Op::Neg(a), ng)
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].value.data.iter().map(|x| x + c).collect();
        let shape = self.nodes[a.0].value.shape.clone();
        let ng = self.needs(a);
        self.push(Tensor::new(shape, data), Op::AddScalar(a), ng)
    }

    pub fn mul_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].value.data.iter().map(|x| x * c).collect();
        let shape = self.nodes[a.0].value.shape.clone();
        let ng = self.needs(a);
        self.push(Tensor::new(shape, data), Op::MulScalar(a, c), ng)
    }

    /// Broadcast-multiply by a one-element tensor.
    pub fn scale_by(&mut self, input: TensorId, scalar: TensorId) -> TensorId {
        assert_eq!(self.nodes[scalar.0].value.numel(), 1, "scale_by expects a one-element tensor");
        let s = self.nodes[scalar.0].value.data[0];
        let data: Vec<f64> = self.nodes[input.0].value.data.iter().map(|x| x * s).collect();
        let shape = self.nodes[input.0].value.shape.clone();
        let ng = self.needs(input) || self.needs(scalar);
        self.push(Tensor::new(shape, data), Op::ScaleBy { input, scalar }, ng)
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].value.data.iter().map(|x| x.exp()).collect();
        let shape = self.nodes[a.0].value.shape.clone();
        let ng = self.needs(a);
        self.push(Tensor::new(shape, data), Op::Exp(a), ng)
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.nodes[a.0].value.data.iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = self.nodes[a.0].value.numel() as f64;
        let s: f64 = self.nodes[a.0].value.data.iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s / n), Op::MeanAll(a), ng)
    }

    // ---- activations ----

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].value.data.iter().map(|&x| x.max(0.0)).collect();
        let shape = self.nodes[a.0].value.shape.clone();
        let ng = self.needs(a);
        self.push(Tensor::new(shape, data), Op::Relu(a), ng)
    }

    pub fn leaky_relu(&mut self, a: TensorId, alpha: f64) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data
            .iter()
            .map(|&x| if x >= 0.0 { x } else { alpha * x })
            .collect();
        let shape = self.nodes[a.0].value.shape.clone();
        let ng = self.needs(a);
        self.push(Tensor::new(shape, data), Op::LeakyRelu(a, alpha), ng)
    }

    pub fn softplus(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].value.data.iter().map(|&x| softplus(x)).collect();
        let shape = self.nodes[a.0].value.shape.clone();
        let ng = self.needs(a);
        self.push(Tensor::new(shape, data), Op::Softplus(a), ng)
    }

    /// Elementwise `sign(x) max(|x|-tau, 0)` with a same-shape threshold.
    pub fn soft_threshold(&mut self, input: TensorId, tau: TensorId) -> Result<TensorId> {
        self.assert_same_shape(input, tau, "soft_threshold");
        if self.nodes[tau.0].value.data.iter().any(|&t| t < 0.0) {
            return Err(Error::InvalidSparsityLevel(
                "soft_threshold requires nonnegative tau".into(),
            ));
        }
        let data: Vec<f64> = self.nodes[input.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[tau.0].value.data)
            .map(|(&x, &t)| soft_threshold(x, t))
            .collect();
        let shape = self.nodes[input.0].value.shape.clone();
        let ng = self.needs(input) || self.needs(tau);
        Ok(self.push(Tensor::new(shape, data), Op::SoftThreshold { input, tau }, ng))
    }

    // ---- structured ops ----

    /// Same-size 2D cross-correlation: input `[C,H,W]`, kernels `[O,C,k,k]`.
    pub fn conv2d(&mut self, input: TensorId, kernels: TensorId, pad: Padding) -> Result<TensorId> {
        let ishape = self.nodes[input.0].value.shape.clone();
        let kshape = self.nodes[kernels.0].value.shape.clone();
        if ishape.len() != 3 {
            return Err(Error::ShapeMismatch {
                context: "conv2d",
                axis: "input rank (want [C,H,W])",
                expected: 3,
                actual: ishape.len(),
            });
        }
        if kshape.len() != 4 || kshape[2] != kshape[3] {
            return Err(Error::ShapeMismatch {
                context: "conv2d",
                axis: "kernel rank (want [O,C,k,k])",
                expected: 4,
                actual: kshape.len(),
            });
        }
        let (c_in, h, w) = (ishape[0], ishape[1], ishape[2]);
        let (c_out, k) = (kshape[0], kshape[2]);
        crate::tensor::check_conv_shapes(c_in, h, w, c_out, kshape[1], k)?;

        let mut out = vec![0.0; c_out * h * w];
        conv2d_forward(
            &self.nodes[input.0].value.data,
            c_in,
            h,
            w,
            &self.nodes[kernels.0].value.data,
            c_out,
            k,
            pad,
            &mut out,
        );
        let ng = self.needs(input) || self.needs(kernels);
        Ok(self.push(
            Tensor::new(vec![c_out, h, w], out),
            Op::Conv2d { input, kernels, pad },
            ng,
        ))
    }

    /// Add a per-channel bias `[C]` to a `[C,H,W]` tensor.
    pub fn add_channel_bias(&mut self, input: TensorId, bias: TensorId) -> TensorId {
        let ishape = self.nodes[input.0].value.shape.clone();
        assert_eq!(ishape.len(), 3, "add_channel_bias expects [C,H,W]");
        assert_eq!(self.nodes[bias.0].value.numel(), ishape[0], "bias length");
        let (c, hw) = (ishape[0], ishape[1] * ishape[2]);
        let mut data = self.nodes[input.0].value.data.clone();
        for ch in 0..c {
            let b = self.nodes[bias.0].value.data[ch];
            for v in &mut data[ch * hw..(ch + 1) * hw] {
                *v += b;
            }
        }
        let ng = self.needs(input) || self.needs(bias);
        self.push(Tensor::new(ishape, data), Op::AddChannelBias { input, bias }, ng)
    }

    /// 2x average-pool downsample of a `[C,H,W]` tensor; H and W must be even.
    pub fn avg_pool2(&mut self, input: TensorId) -> TensorId {
        let shape = self.nodes[input.0].value.shape.clone();
        assert_eq!(shape.len(), 3, "avg_pool2 expects [C,H,W]");
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims");
        let (oh, ow) = (h / 2, w / 2);
        let src = &self.nodes[input.0].value.data;
        let mut data = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let base = ch * h * w + 2 * y * w + 2 * x;
                    data[ch * oh * ow + y * ow + x] =
                        0.25 * (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]);
                }
            }
        }
        let ng = self.needs(input);
        self.push(Tensor::new(vec![c, oh, ow], data), Op::AvgPool2(input), ng)
    }

    /// Nearest-neighbor 2x upsample of a `[C,H,W]` tensor.
    pub fn upsample_nearest2(&mut self, input: TensorId) -> TensorId {
        let shape = self.nodes[input.0].value.shape.clone();
        assert_eq!(shape.len(), 3, "upsample_nearest2 expects [C,H,W]");
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let (oh, ow) = (2 * h, 2 * w);
        let src = &self.nodes[input.0].value.data;
        let mut data = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    data[ch * oh * ow + y * ow + x] = src[ch * h * w + (y / 2) * w + (x / 2)];
                }
            }
        }
        let ng = self.needs(input);
        self.push(Tensor::new(vec![c, oh, ow], data), Op::UpsampleNearest2(input), ng)
    }

    /// Concatenate `[C_i,H,W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat_channels needs at least one part");
        let (h, w) = {
            let s = &self.nodes[parts[0].0].value.shape;
            assert_eq!(s.len(), 3, "concat_channels expects [C,H,W] parts");
            (s[1], s[2])
        };
        let mut data = Vec::new();
        for &p in parts {
            let s = &self.nodes[p.0].value.shape;
            assert_eq!((s[1], s[2]), (h, w), "concat_channels: spatial dims differ");
            data.extend_from_slice(&self.nodes[p.0].value.data);
        }
        let c_total: usize = parts.iter().map(|&p| self.nodes[p.0].value.shape[0]).sum();
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(
            Tensor::new(vec![c_total, h, w], data),
            Op::ConcatChannels(parts.to_vec()),
            ng,
        )
    }

    /// Extract channels `start..start+count` of a `[C,H,W]` tensor.
    pub fn slice_channels(&mut self, input: TensorId, start: usize, count: usize) -> TensorId {
        let shape = self.nodes[input.0].value.shape.clone();
        assert_eq!(shape.len(), 3, "slice_channels expects [C,H,W]");
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        assert!(start + count <= c, "slice_channels out of range");
        let hw = h * w;
        let data = self.nodes[input.0].value.data[start * hw..(start + count) * hw].to_vec();
        let ng = self.needs(input);
        self.push(
            Tensor::new(vec![count, h, w], data),
            Op::SliceChannels { input, start, count },
            ng,
        )
    }

    pub fn reshape(&mut self, input: TensorId, new_shape: Vec<usize>) -> TensorId {
        let numel: usize = new_shape.iter().product();
        assert_eq!(numel, self.nodes[input.0].value.numel(), "reshape: element count differs");
        let data = self.nodes[input.0].value.data.clone();
        let ng = self.needs(input);
        self.push(Tensor::new(new_shape, data), Op::Reshape(input), ng)
    }

    /// Permute the axes of a rank-3 tensor.
    pub fn permute3(&mut self, input: TensorId, perm: [usize; 3]) -> TensorId {
        let shape = self.nodes[input.0].value.shape.clone();
        assert_eq!(shape.len(), 3, "permute3 expects rank 3");
        let mut sorted = perm;
        sorted.sort_unstable();
        assert_eq!(sorted, [0, 1, 2], "permute3: invalid permutation");
        let out_shape = [shape[perm[0]], shape[perm[1]], shape[perm[2]]];
        let data = permute3_data(&self.nodes[input.0].value.data, &shape, perm);
        let ng = self.needs(input);
        self.push(Tensor::new(out_shape.to_vec(), data), Op::Permute3 { input, perm }, ng)
    }

    /// Fixed real Fourier-domain multiplier applied to a `[2,H,W]` tensor
    /// holding (re, im) channels. Self-adjoint, so backward reapplies it.
    pub fn fourier_multiplier(&mut self, input: TensorId, mult: std::rc::Rc<Vec<f64>>) -> TensorId {
        let shape = self.nodes[input.0].value.shape.clone();
        assert_eq!(shape.len(), 3, "fourier_multiplier expects [2,H,W]");
        assert_eq!(shape[0], 2, "fourier_multiplier expects two channels (re, im)");
        let (h, w) = (shape[1], shape[2]);
        assert_eq!(mult.len(), h * w, "multiplier length");
        let data = apply_fourier_multiplier_2ch(&self.nodes[input.0].value.data, h, w, &mult);
        let ng = self.needs(input);
        self.push(Tensor::new(shape, data), Op::FourierMultiplier { input, mult }, ng)
    }

    // ---- backward ----

    /// Reverse accumulation from a scalar loss. Gradients accumulate across
    /// calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Autodiff("loss id is not on this tape".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Autodiff(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape
            )));
        }

        // local adjoint buffers for this pass; leaf grads persist on nodes
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            if self.nodes[i].requires_grad {
                let slot = self.nodes[i].grad.get_or_insert_with(|| vec![0.0; g.len()]);
                for (dst, src) in slot.iter_mut().zip(&g) {
                    *dst += src;
                }
            }
            let op = self.nodes[i].op.clone();
            self.propagate(&op, i, &g, &mut adj);
        }
        Ok(())
    }

    fn accumulate(&self, adj: &mut [Option<Vec<f64>>], id: TensorId, contrib: &[f64]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut adj[id.0] {
            Some(buf) => {
                for (dst, src) in buf.iter_mut().zip(contrib) {
                    *dst += src;
                }
            }
            slot @ None => *slot = Some(contrib.to_vec()),
        }
    }

    fn propagate(&self, op: &Op, out: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(adj, *a, g);
                self.accumulate(adj, *b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accumulate(adj, *b, &neg);
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[a.0].value.data;
                let bv = &self.nodes[b.0].value.data;
                let ga: Vec<f64> = g.iter().zip(bv).map(|(gv, y)| gv * y).collect();
                let gb: Vec<f64> = g.iter().zip(av).map(|(gv, x)| gv * x).collect();
                self.accumulate(adj, *a, &ga);
                self.accumulate(adj, *b, &gb);
            }
            Op::Div(a, b) => {
                let av = &self.nodes[a.0].value.data;
                let bv = &self.nodes[b.0].value.data;
                let ga: Vec<f64> = g.iter().zip(bv).map(|(gv, y)| gv / y).collect();
                let gb: Vec<f64> = g
                    .iter()
                    .zip(av.iter().zip(bv))
                    .map(|(gv, (x, y))| -gv * x / (y * y))
                    .collect();
                self.accumulate(adj, *a, &ga);
                self.accumulate(adj, *b, &gb);
            }
            Op::Neg(a) => {
                let ga: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accumulate(adj, *a, &ga);
            }
            Op::AddScalar(a) => self.accumulate(adj, *a, g),
            Op::MulScalar(a, c) => {
                let ga: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.accumulate(adj, *a, &ga);
            }
            Op::ScaleBy { input, scalar } => {
                let s = self.nodes[scalar.0].value.data[0];
                let gi: Vec<f64> = g.iter().map(|v| v * s).collect();
                self.accumulate(adj, *input, &gi);
                let xv = &self.nodes[input.0].value.data;
                let gs: f64 = g.iter().zip(xv).map(|(gv, x)| gv * x).sum();
                self.accumulate(adj, *scalar, &[gs]);
            }
            Op::Exp(a) => {
                let out_v = &self.nodes[out].value.data;
                let ga: Vec<f64> = g.iter().zip(out_v).map(|(gv, e)| gv * e).collect();
                self.accumulate(adj, *a, &ga);
            }
            Op::SumAll(a) => {
                let n = self.nodes[a.0].value.numel();
                self.accumulate(adj, *a, &vec![g[0]; n]);
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.0].value.numel();
                self.accumulate(adj, *a, &vec![g[0] / n as f64; n]);
            }
            Op::Relu(a) => {
                let xv = &self.nodes[a.0].value.data;
                let ga: Vec<f64> =
                    g.iter().zip(xv).map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 }).collect();
                self.accumulate(adj, *a, &ga);
            }
            Op::LeakyRelu(a, alpha) => {
                let xv = &self.nodes[a.0].value.data;
                let ga: Vec<f64> = g
                    .iter()
                    .zip(xv)
                    .map(|(gv, &x)| if x >= 0.0 { *gv } else { gv * alpha })
                    .collect();
                self.accumulate(adj, *a, &ga);
            }
            Op::Softplus(a) => {
                let xv = &self.nodes[a.0].value.data;
                let ga: Vec<f64> = g.iter().zip(xv).map(|(gv, &x)| gv * softplus_deriv(x)).collect();
                self.accumulate(adj, *a, &ga);
            }
            Op::SoftThreshold { input, tau } => {
                let xv = &self.nodes[input.0].value.data;
                let tv = &self.nodes[tau.0].value.data;
                let gx: Vec<f64> = g
                    .iter()
                    .zip(xv.iter().zip(tv))
                    .map(|(gv, (&x, &t))| gv * soft_threshold_deriv_x(x, t))
                    .collect();
                self.accumulate(adj, *input, &gx);
                let gt: Vec<f64> = g
                    .iter()
                    .zip(xv.iter().zip(tv))
                    .map(|(gv, (&x, &t))| gv * soft_threshold_deriv_tau(x, t))
                    .collect();
                self.accumulate(adj, *tau, &gt);
            }
            Op::Conv2d { input, kernels, pad } => {
                let ishape = &self.nodes[input.0].value.shape;
                let kshape = &self.nodes[kernels.0].value.shape;
                let (c_in, h, w) = (ishape[0], ishape[1], ishape[2]);
                let (c_out, k) = (kshape[0], kshape[2]);
                if self.nodes[input.0].needs_grad {
                    let mut gi = vec![0.0; c_in * h * w];
                    conv2d_backward_input(
                        g,
                        c_out,
                        h,
                        w,
                        &self.nodes[kernels.0].value.data,
                        c_in,
                        k,
                        *pad,
                        &mut gi,
                    );
                    self.accumulate(adj, *input, &gi);
                }
                if self.nodes[kernels.0].needs_grad {
                    let mut gk = vec![0.0; c_out * c_in * k * k];
                    conv2d_backward_kernels(
                        g,
                        c_out,
                        h,
                        w,
                        &self.nodes[input.0].value.data,
                        c_in,
                        k,
                        *pad,
                        &mut gk,
                    );
                    self.accumulate(adj, *kernels, &gk);
                }
            }
            Op::AddChannelBias { input, bias } => {
                self.accumulate(adj, *input, g);
                if self.nodes[bias.0].needs_grad {
                    let c = self.nodes[bias.0].value.numel();
                    let hw = g.len() / c;
                    let gb: Vec<f64> =
                        (0..c).map(|ch| g[ch * hw..(ch + 1) * hw].iter().sum()).collect();
                    self.accumulate(adj, *bias, &gb);
                }
            }
            Op::AvgPool2(a) => {
                let shape = &self.nodes[a.0].value.shape;
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let (oh, ow) = (h / 2, w / 2);
                let mut ga = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        for x in 0..ow {
                            let gv = 0.25 * g[ch * oh * ow + y * ow + x];
                            let base = ch * h * w + 2 * y * w + 2 * x;
                            ga[base] += gv;
                            ga[base + 1] += gv;
                            ga[base + w] += gv;
                            ga[base + w + 1] += gv;
                        }
                    }
                }
                self.accumulate(adj, *a, &ga);
            }
            Op::UpsampleNearest2(a) => {
                let shape = &self.nodes[a.0].value.shape;
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let (oh, ow) = (2 * h, 2 * w);
                let mut ga = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        for x in 0..ow {
                            ga[ch * h * w + (y / 2) * w + (x / 2)] += g[ch * oh * ow + y * ow + x];
                        }
                    }
                }
                self.accumulate(adj, *a, &ga);
            }
            Op::ConcatChannels(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.numel();
                    self.accumulate(adj, p, &g[offset..offset + n]);
                    offset += n;
                }
            }
            Op::SliceChannels { input, start, count } => {
                let shape = &self.nodes[input.0].value.shape;
                let hw = shape[1] * shape[2];
                let mut ga = vec![0.0; self.nodes[input.0].value.numel()];
                ga[start * hw..(start + count) * hw].copy_from_slice(g);
                self.accumulate(adj, *input, &ga);
            }
            Op::Reshape(a) => self.accumulate(adj, *a, g),
            Op::Permute3 { input, perm } => {
                let out_shape = &self.nodes[out].value.shape;
                let inv = inverse_perm3(*perm);
                let ga = permute3_data(g, out_shape, inv);
                self.accumulate(adj, *input, &ga);
            }
            Op::FourierMultiplier { input, mult } => {
                let shape = &self.nodes[out].value.shape;
                let ga = apply_fourier_multiplier_2ch(g, shape[1], shape[2], mult);
                self.accumulate(adj, *input, &ga);
            }
        }
    }

    /// Smallest distance to a subgradient kink over every recorded
    /// soft-threshold, relu and leaky-relu. Finite-difference checks use
    /// this to resample instances that sit on a kink.
    pub fn min_kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::SoftThreshold { input, tau } => {
                    let xv = &self.nodes[input.0].value.data;
                    let tv = &self.nodes[tau.0].value.data;
                    for (&x, &t) in xv.iter().zip(tv) {
                        margin = margin.min((x.abs() - t).abs());
                    }
                }
                Op::Relu(a) | Op::LeakyRelu(a, _) => {
                    for &x in &self.nodes[a.0].value.data {
                        margin = margin.min(x.abs());
                    }
                }
                _ => {}
            }
        }
        margin
    }
}

fn inverse_perm3(perm: [usize; 3]) -> [usize; 3] {
    let mut inv = [0usize; 3];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn permute3_data(data: &[f64], shape: &[usize], perm: [usize; 3]) -> Vec<f64> {
    let (s0, s1, s2) = (shape[0], shape[1], shape[2]);
    let out_shape = [shape[perm[0]], shape[perm[1]], shape[perm[2]]];
    let mut out = vec![0.0; data.len()];
    for i0 in 0..s0 {
        for i1 in 0..s1 {
            for i2 in 0..s2 {
                let idx = [i0, i1, i2];
                let o = (idx[perm[0]] * out_shape[1] + idx[perm[1]]) * out_shape[2] + idx[perm[2]];
                out[o] = data[(i0 * s1 + i1) * s2 + i2];
            }
        }
    }
    out
}

use crate::linops::fourier_multiplier_packed as apply_fourier_multiplier_2ch;

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = crate::rng::stream(seed, "tape-test");
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Random tensor with every coordinate redrawn until `ok` holds, used to
    /// keep finite-difference probes away from subgradient kinks.
    fn random_tensor_where(shape: Vec<usize>, seed: u64, ok: impl Fn(f64) -> bool) -> Tensor {
        let mut rng = crate::rng::stream(seed, "tape-test");
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let v = rng.gen_range(-1.0..1.0);
                if ok(v) {
                    break v;
                }
            })
            .collect();
        Tensor::new(shape, data)
    }

    /// Central finite differences of a scalar-valued graph w.r.t. one leaf,
    /// rebuilt from scratch per perturbation. `build` pushes the leaf and
    /// returns `(leaf_id, loss_id)`.
    fn finite_diff_check(
        build: impl Fn(&mut Tape, &Tensor) -> (TensorId, TensorId),
        leaf: &Tensor,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let (id, loss) = build(&mut tape, leaf);
        // guard against kink-sitting instances
        assert!(tape.min_kink_margin() > 1e-3, "test instance too close to a kink");
        tape.backward(loss).unwrap();
        let grad = tape.grad(id).unwrap().to_vec();

        let eps = 1e-5;
        for i in 0..leaf.numel() {
            let mut plus = leaf.clone();
            plus.data[i] += eps;
            let mut tp = Tape::new();
            let (_, lp) = build(&mut tp, &plus);
            let mut minus = leaf.clone();
            minus.data[i] -= eps;
            let mut tm = Tape::new();
            let (_, lm) = build(&mut tm, &minus);
            let fd = (tp.value(lp).data[0] - tm.value(lm).data[0]) / (2.0 * eps);
            let denom = fd.abs().max(grad[i].abs()).max(1e-8);
            assert!(
                (grad[i] - fd).abs() / denom < tol,
                "coord {i}: autodiff {} vs fd {fd}",
                grad[i]
            );
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let x = random_tensor(vec![3, 4], 1);
        let mut tape = Tape::new();
        let id = tape.param(x);
        let loss = tape.sum_all(id);
        tape.backward(loss).unwrap();
        assert!(tape.grad(id).unwrap().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn half_norm_sq_gradient_is_x() {
        let x = random_tensor(vec![5], 2);
        let mut tape = Tape::new();
        let id = tape.param(x.clone());
        let sq = tape.mul(id, id);
        let s = tape.sum_all(sq);
        let loss = tape.mul_scalar(s, 0.5);
        tape.backward(loss).unwrap();
        let g = tape.grad(id).unwrap();
        for i in 0..5 {
            assert_relative_eq!(g[i], x.data[i], epsilon = 1e-14);
        }
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let x = random_tensor(vec![4], 3);
        let mut tape = Tape::new();
        let id = tape.param(x);
        let loss = tape.sum_all(id);
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(id).unwrap().iter().all(|&g| g == 2.0));
        tape.zero_grad();
        tape.backward(loss).unwrap();
        assert!(tape.grad(id).unwrap().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_ids() {
        let x = random_tensor(vec![4], 4);
        let mut tape = Tape::new();
        let id = tape.param(x);
        assert!(tape.backward(id).is_err());
        assert!(tape.backward(TensorId(999)).is_err());
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let x = random_tensor(vec![2, 3, 3], 5);
        let y = random_tensor(vec![2, 3, 3], 6);
        // offset denominators away from zero for div
        let y_off = Tensor::new(y.shape.clone(), y.data.iter().map(|v| v + 3.0).collect());

        finite_diff_check(
            |tape, leaf| {
                let a = tape.param(leaf.clone());
                let b = tape.constant(y_off.clone());
                let m = tape.mul(a, b);
                let d = tape.div(m, b);
                let s = tape.sub(d, a);
                let n = tape.neg(s);
                let ac = tape.add_scalar(n, 0.7);
                let mc = tape.mul_scalar(ac, -1.3);
                let added = tape.add(mc, a);
                (a, tape.sum_all(added))
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn activations_match_finite_differences() {
        let x = random_tensor_where(vec![17], 7, |v| v.abs() > 5e-3);
        finite_diff_check(
            |tape, leaf| {
                let a = tape.param(leaf.clone());
                let r = tape.relu(a);
                let l = tape.leaky_relu(a, 0.01);
                let both = tape.add(r, l);
                let sp = tape.softplus(both);
                let e = tape.exp(sp);
                (a, tape.mean_all(e))
            },
            &x,
            1e-4,
        );
    }

    #[test]
    fn soft_threshold_matches_finite_differences() {
        let x = random_tensor_where(vec![25], 8, |v| (v.abs() - 0.3).abs() > 5e-3);
        let tau = Tensor::new(vec![25], vec![0.3; 25]);
        finite_diff_check(
            |tape, leaf| {
                let a = tape.param(leaf.clone());
                let t = tape.constant(tau.clone());
                let st = tape.soft_threshold(a, t).unwrap();
                let sq = tape.mul(st, st);
                (a, tape.sum_all(sq))
            },
            &x,
            1e-5,
        );
    }

    #[test]
    fn soft_threshold_tau_gradient_matches_finite_differences() {
        let x = random_tensor_where(vec![25], 9, |v| (v.abs() - 0.4).abs() > 5e-3);
        let tau0 = Tensor::new(vec![25], vec![0.4; 25]);
        finite_diff_check(
            |tape, t_leaf| {
                let t = tape.param(t_leaf.clone());
                let a = tape.constant(x.clone());
                let st = tape.soft_threshold(a, t).unwrap();
                let sq = tape.mul(st, st);
                (t, tape.sum_all(sq))
            },
            &tau0,
            1e-5,
        );
    }

    #[test]
    fn soft_threshold_rejects_negative_tau() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.0));
        let t = tape.constant(Tensor::scalar(-0.1));
        assert!(tape.soft_threshold(x, t).is_err());
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        for pad in [Padding::Zero, Padding::Circular] {
            let x = random_tensor(vec![2, 6, 6], 10);
            let k = random_tensor(vec![3, 2, 3, 3], 11);
            // input gradient
            finite_diff_check(
                |tape, leaf| {
                    let a = tape.param(leaf.clone());
                    let kid = tape.constant(k.clone());
                    let c = tape.conv2d(a, kid, pad).unwrap();
                    let sq = tape.mul(c, c);
                    (a, tape.sum_all(sq))
                },
                &x,
                1e-5,
            );
            // kernel gradient
            finite_diff_check(
                |tape, leaf| {
                    let kid = tape.param(leaf.clone());
                    let a = tape.constant(x.clone());
                    let c = tape.conv2d(a, kid, pad).unwrap();
                    let sq = tape.mul(c, c);
                    (kid, tape.sum_all(sq))
                },
                &k,
                1e-5,
            );
        }
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let x = random_tensor(vec![2, 4, 4], 12);
        finite_diff_check(
            |tape, leaf| {
                let a = tape.param(leaf.clone());
                let pooled = tape.avg_pool2(a);
                let up = tape.upsample_nearest2(pooled);
                let both = tape.concat_channels(&[a, up]);
                let sl = tape.slice_channels(both, 1, 2);
                let rs = tape.reshape(sl, vec![4, 4, 2]);
                let pm = tape.permute3(rs, [2, 0, 1]);
                let sq = tape.mul(pm, pm);
                (a, tape.sum_all(sq))
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn bias_and_scale_match_finite_differences() {
        let bias = random_tensor(vec![3], 13);
        let x = random_tensor(vec![3, 4, 4], 14);
        finite_diff_check(
            |tape, leaf| {
                let b = tape.param(leaf.clone());
                let a = tape.constant(x.clone());
                let wb = tape.add_channel_bias(a, b);
                let sq = tape.mul(wb, wb);
                (b, tape.sum_all(sq))
            },
            &bias,
            1e-6,
        );

        let t = Tensor::scalar(0.8);
        finite_diff_check(
            |tape, leaf| {
                let s = tape.param(leaf.clone());
                let a = tape.constant(x.clone());
                let scaled = tape.scale_by(a, s);
                let sq = tape.mul(scaled, scaled);
                (s, tape.sum_all(sq))
            },
            &t,
            1e-7,
        );
    }

    #[test]
    fn fourier_multiplier_matches_finite_differences_and_is_self_adjoint() {
        let x = random_tensor(vec![2, 4, 4], 15);
        let mult: Vec<f64> = (0..16).map(|i| 1.0 / (1.0 + 0.3 * i as f64)).collect();
        let mult = std::rc::Rc::new(mult);
        let m2 = mult.clone();
        finite_diff_check(
            move |tape, leaf| {
                let a = tape.param(leaf.clone());
                let f = tape.fourier_multiplier(a, m2.clone());
                let sq = tape.mul(f, f);
                (a, tape.sum_all(sq))
            },
            &x,
            1e-6,
        );

        // <Mx, y> == <x, My>
        let y = random_tensor(vec![2, 4, 4], 16);
        let mut tape = Tape::new();
        let xid = tape.constant(x.clone());
        let yid = tape.constant(y.clone());
        let mx = tape.fourier_multiplier(xid, mult.clone());
        let my = tape.fourier_multiplier(yid, mult);
        let lhs: f64 = tape.value(mx).data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&tape.value(my).data).map(|(a, b)| a * b).sum();
        assert_relative_eq!(lhs, rhs, max_relative = 1e-12);
    }

    #[test]
    fn paused_recording_blocks_gradient_flow_but_not_values() {
        let x = random_tensor(vec![8], 17);
        let mut tracked = Tape::new();
        let id_t = tracked.param(x.clone());
        let sq_t = tracked.mul(id_t, id_t);

        let mut paused = Tape::new();
        let id_p = paused.param(x.clone());
        paused.set_recording(false);
        let sq_p = paused.mul(id_p, id_p);
        paused.set_recording(true);

        assert_eq!(tracked.value(sq_t).data, paused.value(sq_p).data);

        let loss_p = paused.sum_all(sq_p);
        paused.backward(loss_p).unwrap();
        assert!(paused.grad(id_p).is_none(), "gradient leaked through paused section");
    }

    #[test]
    fn nan_free_on_nan_free_inputs() {
        let x = random_tensor(vec![64], 18);
        let mut tape = Tape::new();
        let id = tape.param(x);
        let big = tape.mul_scalar(id, 1e6);
        let sp = tape.softplus(big);
        let tau = tape.constant(Tensor::new(vec![64], vec![0.5; 64]));
        let st = tape.soft_threshold(sp, tau).unwrap();
        let loss = tape.mean_all(st);
        tape.backward(loss).unwrap();
        assert!(tape.value(st).data.iter().all(|v| v.is_finite()));
        assert!(tape.grad(id).unwrap().iter().all(|v| v.is_finite()));
    }
}
