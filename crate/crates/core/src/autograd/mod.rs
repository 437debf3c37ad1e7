//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every value produced during a forward pass. Operations are
//! appended in execution order, so the node list is already topologically
//! sorted and [`Tape::backward`] is a single reverse sweep. A tape built with
//! [`Tape::no_grad`] computes values only and records nothing.

mod kernels;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::tensor::Tensor;
use kernels::ConvGeom;

#[derive(Debug, Error, PartialEq)]
pub enum AutogradError {
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("backward on a tape that records no gradients")]
    NotRecording,
    #[error("target class {target} at row {row} is masked out")]
    TargetMasked { row: usize, target: usize },
    #[error("class mask has no active entry")]
    EmptyMask,
}

type Result<T> = std::result::Result<T, AutogradError>;

fn shape_err<T>(op: &'static str, detail: String) -> Result<T> {
    Err(AutogradError::Shape { op, detail })
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        cols: kernels::Scratch,
    },
    Relu(Var),
    MaxPool {
        input: Var,
        argmax: Vec<u32>,
    },
    GlobalAvgPool(Var),
    Reshape(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    ChannelMask {
        input: Var,
        mask: Vec<bool>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f32>,
    },
    Mse(Var, Var),
    MaskedMse {
        input: Var,
        target: Vec<f32>,
        mask: Vec<bool>,
        count: usize,
    },
    Sum(Var),
    SumSquares(Var),
    WeightedSqDev {
        input: Var,
        anchor: Vec<f32>,
        weights: Vec<f32>,
    },
    Scale {
        input: Var,
        factor: f32,
    },
    Add(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Mode {
    Recording,
    NoGrad,
    Consumed,
}

pub struct Tape {
    nodes: Vec<Node>,
    mode: Mode,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Gradients of a loss with respect to every leaf that required one.
#[derive(Debug, Default)]
pub struct Gradients {
    by_leaf: BTreeMap<Var, Vec<f32>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f32]> {
        self.by_leaf.get(&var).map(Vec::as_slice)
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f32>> {
        self.by_leaf.remove(&var)
    }
}

fn add_into(slot: &mut Option<Vec<f32>>, g: Vec<f32>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            mode: Mode::Recording,
        }
    }

    /// A tape that evaluates values without recording anything for backward.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            mode: Mode::NoGrad,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.mode == Mode::Recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of `var`. Panics on a handle from another tape or a consumed tape.
    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Adds a leaf. Its `requires_grad` flag decides whether backward reports
    /// a gradient for it.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad() && self.mode == Mode::Recording;
        self.push_raw(tensor, Op::Leaf, rg)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push_raw(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        assert!(self.mode != Mode::Consumed, "tape already consumed");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracks(&self, inputs: &[Var]) -> bool {
        self.mode == Mode::Recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        if cfg!(debug_assertions) && inputs.iter().all(|v| self.nodes[v.0].value.all_finite()) {
            assert!(
                value.all_finite(),
                "{name} produced non-finite values from finite inputs"
            );
        }
        let rg = self.tracks(inputs);
        // Untracked results keep no saved state.
        let op = if rg { op } else { Op::Leaf };
        self.push_raw(value, op, rg)
    }

    fn check_live(&self) -> Result<()> {
        if self.mode == Mode::Consumed {
            Err(AutogradError::TapeConsumed)
        } else {
            Ok(())
        }
    }

    /// 2-d convolution of an `N x C x H x W` input with an `O x C x K x K`
    /// kernel and a length-`O` bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        self.check_live()?;
        const OP: &str = "conv2d";
        let xs = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        let bs = self.value(bias).shape().to_vec();
        if xs.len() != 4 {
            return shape_err(OP, format!("input must be N x C x H x W, got {xs:?}"));
        }
        if ws.len() != 4 || ws[2] != ws[3] {
            return shape_err(OP, format!("weight must be O x I x K x K, got {ws:?}"));
        }
        if xs[1] != ws[1] {
            return shape_err(
                OP,
                format!("input channels {} != weight in-channels {}", xs[1], ws[1]),
            );
        }
        if bs != [ws[0]] {
            return shape_err(OP, format!("bias shape {bs:?} != [out-channels {}]", ws[0]));
        }
        if stride == 0 {
            return shape_err(OP, "stride must be positive".into());
        }
        let k = ws[2];
        if xs[2] + 2 * padding < k {
            return shape_err(
                OP,
                format!("padded height {} < kernel {k}", xs[2] + 2 * padding),
            );
        }
        if xs[3] + 2 * padding < k {
            return shape_err(
                OP,
                format!("padded width {} < kernel {k}", xs[3] + 2 * padding),
            );
        }
        let geom = ConvGeom {
            in_channels: xs[1],
            out_channels: ws[0],
            height: xs[2],
            width: xs[3],
            kernel: k,
            stride,
            padding,
            out_height: (xs[2] + 2 * padding - k) / stride + 1,
            out_width: (xs[3] + 2 * padding - k) / stride + 1,
        };
        let (out, cols) = kernels::conv_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            xs[0],
            &geom,
        );
        // The patch matrix is only needed for the weight gradient.
        let cols = if self.tracks(&[weight]) {
            cols
        } else {
            kernels::Scratch::empty()
        };
        let shape = vec![xs[0], geom.out_channels, geom.out_height, geom.out_width];
        let value = Tensor::new(shape, out).expect("conv output length");
        Ok(self.push(
            OP,
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
            &[input, weight, bias],
        ))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.check_live()?;
        let x = self.value(input);
        let data = x
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("relu length");
        Ok(self.push("relu", value, Op::Relu(input), &[input]))
    }

    /// Max pooling without padding; ties go to the first element in scan order.
    pub fn max_pool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        self.check_live()?;
        const OP: &str = "max_pool2d";
        let xs = self.value(input).shape().to_vec();
        if xs.len() != 4 {
            return shape_err(OP, format!("input must be N x C x H x W, got {xs:?}"));
        }
        if window == 0 || stride == 0 {
            return shape_err(OP, "window and stride must be positive".into());
        }
        if window > xs[2] || window > xs[3] {
            return shape_err(
                OP,
                format!("window {window} larger than input {}x{}", xs[2], xs[3]),
            );
        }
        let (out, argmax, oh, ow) = kernels::max_pool_forward(
            self.value(input).data(),
            xs[0] * xs[1],
            xs[2],
            xs[3],
            window,
            stride,
        );
        let value = Tensor::new(vec![xs[0], xs[1], oh, ow], out).expect("pool length");
        Ok(self.push(OP, value, Op::MaxPool { input, argmax }, &[input]))
    }

    /// Mean over the spatial axes: `N x C x H x W -> N x C`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        self.check_live()?;
        let xs = self.value(input).shape().to_vec();
        if xs.len() != 4 {
            return shape_err("global_avg_pool", format!("input must be 4-d, got {xs:?}"));
        }
        let hw = xs[2] * xs[3];
        let data = self
            .value(input)
            .data()
            .chunks_exact(hw)
            .map(|plane| plane.iter().sum::<f32>() / hw as f32)
            .collect();
        let value = Tensor::new(vec![xs[0], xs[1]], data).expect("gap length");
        Ok(self.push("global_avg_pool", value, Op::GlobalAvgPool(input), &[input]))
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        self.check_live()?;
        let value = self
            .value(input)
            .clone()
            .with_requires_grad(false)
            .reshape(shape)
            .map_err(|e| AutogradError::Shape {
                op: "reshape",
                detail: e.to_string(),
            })?;
        Ok(self.push("reshape", value, Op::Reshape(input), &[input]))
    }

    /// `input (N x F) * weight^T (F x C) + bias (C)`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        self.check_live()?;
        const OP: &str = "linear";
        let xs = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        let bs = self.value(bias).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 {
            return shape_err(
                OP,
                format!("expected 2-d input and weight, got {xs:?} and {ws:?}"),
            );
        }
        if xs[1] != ws[1] {
            return shape_err(
                OP,
                format!("input features {} != weight features {}", xs[1], ws[1]),
            );
        }
        if bs != [ws[0]] {
            return shape_err(OP, format!("bias shape {bs:?} != [outputs {}]", ws[0]));
        }
        let (n, f, c) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0f32; n * c];
        kernels::gemm(
            n,
            f,
            c,
            kernels::View::rows(self.value(input).data(), f),
            kernels::View::transposed(self.value(weight).data(), f),
            0.0,
            &mut out,
        );
        let b = self.value(bias).data();
        if c > 0 {
            for row in out.chunks_exact_mut(c) {
                row.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
            }
        }
        let value = Tensor::new(vec![n, c], out).expect("linear length");
        Ok(self.push(
            OP,
            value,
            Op::Linear {
                input,
                weight,
                bias,
            },
            &[input, weight, bias],
        ))
    }

    /// Zeroes channel `c` (axis 1) wherever `mask[c]` is false.
    pub fn channel_mask(&mut self, input: Var, mask: &[bool]) -> Result<Var> {
        self.check_live()?;
        let x = self.value(input);
        let xs = x.shape().to_vec();
        if xs.len() < 2 || xs[1] != mask.len() {
            return shape_err(
                "channel_mask",
                format!("mask of {} channels for input {xs:?}", mask.len()),
            );
        }
        let inner: usize = xs[2..].iter().product();
        let mut data = x.data().to_vec();
        for (i, chunk) in data.chunks_exact_mut(inner.max(1)).enumerate() {
            if !mask[i % mask.len()] {
                chunk.fill(0.0);
            }
        }
        let value = Tensor::new(xs, data).expect("mask length");
        Ok(self.push(
            "channel_mask",
            value,
            Op::ChannelMask {
                input,
                mask: mask.to_vec(),
            },
            &[input],
        ))
    }

    /// Mean negative log-likelihood over the batch with classes outside
    /// `mask` treated as `-inf` logits.
    pub fn masked_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var> {
        self.check_live()?;
        const OP: &str = "masked_cross_entropy";
        let z = self.value(logits);
        let zs = z.shape().to_vec();
        if zs.len() != 2 || zs[0] != targets.len() {
            return shape_err(OP, format!("logits {zs:?} vs {} targets", targets.len()));
        }
        let (n, c) = (zs[0], zs[1]);
        if mask.len() != c {
            return shape_err(OP, format!("mask length {} != classes {c}", mask.len()));
        }
        if !mask.iter().any(|&m| m) {
            return Err(AutogradError::EmptyMask);
        }
        for (row, &t) in targets.iter().enumerate() {
            if t >= c || !mask[t] {
                return Err(AutogradError::TargetMasked { row, target: t });
            }
        }
        let mut probs = vec![0.0f32; n * c];
        let mut total = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            let row = &z.data()[r * c..(r + 1) * c];
            let max = row
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v as f64)
                .fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| (v as f64 - max).exp())
                .sum();
            let lse = max + denom.ln();
            total += lse - row[t] as f64;
            for j in 0..c {
                if mask[j] {
                    probs[r * c + j] = ((row[j] as f64 - lse).exp()) as f32;
                }
            }
        }
        let loss = if n == 0 {
            0.0
        } else {
            (total / n as f64) as f32
        };
        Ok(self.push(
            OP,
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Mean squared difference of two same-shape tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return shape_err("mse", format!("{:?} vs {:?}", av.shape(), bv.shape()));
        }
        let n = av.numel();
        let sum: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| ((x - y) as f64).powi(2))
            .sum();
        let loss = if n == 0 { 0.0 } else { (sum / n as f64) as f32 };
        Ok(self.push("mse", Tensor::scalar(loss), Op::Mse(a, b), &[a, b]))
    }

    /// Mean squared difference against a constant target over the entries
    /// where `mask` is true. Zero when the mask is empty.
    pub fn masked_mse(&mut self, input: Var, target: &[f32], mask: &[bool]) -> Result<Var> {
        self.check_live()?;
        let x = self.value(input);
        if x.numel() != target.len() || x.numel() != mask.len() {
            return shape_err(
                "masked_mse",
                format!(
                    "input has {} entries, target {}, mask {}",
                    x.numel(),
                    target.len(),
                    mask.len()
                ),
            );
        }
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for ((&v, &t), &m) in x.data().iter().zip(target).zip(mask) {
            if m {
                sum += ((v - t) as f64).powi(2);
                count += 1;
            }
        }
        let loss = if count == 0 {
            0.0
        } else {
            (sum / count as f64) as f32
        };
        Ok(self.push(
            "masked_mse",
            Tensor::scalar(loss),
            Op::MaskedMse {
                input,
                target: target.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            &[input],
        ))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        self.check_live()?;
        let s: f64 = self.value(input).data().iter().map(|&v| v as f64).sum();
        Ok(self.push("sum", Tensor::scalar(s as f32), Op::Sum(input), &[input]))
    }

    /// Sum of squared entries (squared L2 norm).
    pub fn sum_squares(&mut self, input: Var) -> Result<Var> {
        self.check_live()?;
        let s: f64 = self
            .value(input)
            .data()
            .iter()
            .map(|&v| (v as f64).powi(2))
            .sum();
        Ok(self.push(
            "sum_squares",
            Tensor::scalar(s as f32),
            Op::SumSquares(input),
            &[input],
        ))
    }

    /// `sum_i weights_i * (input_i - anchor_i)^2`.
    pub fn weighted_sq_dev(&mut self, input: Var, anchor: &[f32], weights: &[f32]) -> Result<Var> {
        self.check_live()?;
        let x = self.value(input);
        if x.numel() != anchor.len() || x.numel() != weights.len() {
            return shape_err(
                "weighted_sq_dev",
                format!(
                    "input has {} entries, anchor {}, weights {}",
                    x.numel(),
                    anchor.len(),
                    weights.len()
                ),
            );
        }
        let s: f64 = x
            .data()
            .iter()
            .zip(anchor)
            .zip(weights)
            .map(|((&v, &a), &w)| w as f64 * ((v - a) as f64).powi(2))
            .sum();
        Ok(self.push(
            "weighted_sq_dev",
            Tensor::scalar(s as f32),
            Op::WeightedSqDev {
                input,
                anchor: anchor.to_vec(),
                weights: weights.to_vec(),
            },
            &[input],
        ))
    }

    pub fn scale(&mut self, input: Var, factor: f32) -> Result<Var> {
        self.check_live()?;
        let x = self.value(input);
        let data = x.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("scale length");
        Ok(self.push("scale", value, Op::Scale { input, factor }, &[input]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return shape_err("add", format!("{:?} vs {:?}", av.shape(), bv.shape()));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data).expect("add length");
        Ok(self.push("add", value, Op::Add(a, b), &[a, b]))
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for every leaf
    /// created with `requires_grad` (zeros for leaves the loss does not reach)
    /// and releases the tape; a second call fails with
    /// [`AutogradError::TapeConsumed`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        match self.mode {
            Mode::Consumed => return Err(AutogradError::TapeConsumed),
            Mode::NoGrad => return Err(AutogradError::NotRecording),
            Mode::Recording => {}
        }
        let shape = self.value(loss).shape().to_vec();
        if !self.value(loss).is_scalar() {
            return Err(AutogradError::NotScalar(shape));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(dy);
                continue;
            }
            self.backprop_node(idx, &dy, &mut grads);
        }
        let mut by_leaf = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                by_leaf.insert(Var(idx), g);
            }
        }
        self.nodes.clear();
        self.mode = Mode::Consumed;
        Ok(Gradients { by_leaf })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, idx: usize, dy: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let batch = self.value(*input).shape()[0];
                let g = kernels::conv_backward(
                    cols,
                    self.value(*weight).data(),
                    dy,
                    batch,
                    geom,
                    [self.wants(*input), self.wants(*weight), self.wants(*bias)],
                );
                if let Some(dx) = g.input {
                    add_into(&mut grads[input.0], dx);
                }
                if let Some(dw) = g.weight {
                    add_into(&mut grads[weight.0], dw);
                }
                if let Some(db) = g.bias {
                    add_into(&mut grads[bias.0], db);
                }
            }
            Op::Relu(input) => {
                let x = self.value(*input).data();
                let dx = x
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                add_into(&mut grads[input.0], dx);
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = vec![0.0f32; self.value(*input).numel()];
                for (&a, &g) in argmax.iter().zip(dy) {
                    dx[a as usize] += g;
                }
                add_into(&mut grads[input.0], dx);
            }
            Op::GlobalAvgPool(input) => {
                let xs = self.value(*input).shape();
                let hw = xs[2] * xs[3];
                let mut dx = Vec::with_capacity(self.value(*input).numel());
                for &g in dy {
                    let share = g / hw as f32;
                    dx.extend(std::iter::repeat_n(share, hw));
                }
                add_into(&mut grads[input.0], dx);
            }
            Op::Reshape(input) => add_into(&mut grads[input.0], dy.to_vec()),
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let xs = self.value(*input).shape();
                let (n, f) = (xs[0], xs[1]);
                let c = self.value(*weight).shape()[0];
                if self.wants(*input) {
                    let mut dx = vec![0.0f32; n * f];
                    kernels::gemm(
                        n,
                        c,
                        f,
                        kernels::View::rows(dy, c),
                        kernels::View::rows(self.value(*weight).data(), f),
                        0.0,
                        &mut dx,
                    );
                    add_into(&mut grads[input.0], dx);
                }
                if self.wants(*weight) {
                    let mut dw = vec![0.0f32; c * f];
                    kernels::gemm(
                        c,
                        n,
                        f,
                        kernels::View::transposed(dy, c),
                        kernels::View::rows(self.value(*input).data(), f),
                        0.0,
                        &mut dw,
                    );
                    add_into(&mut grads[weight.0], dw);
                }
                if self.wants(*bias) {
                    let mut db = vec![0.0f32; c];
                    if c > 0 {
                        for row in dy.chunks_exact(c) {
                            db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                        }
                    }
                    add_into(&mut grads[bias.0], db);
                }
            }
            Op::ChannelMask { input, mask } => {
                let xs = self.value(*input).shape();
                let inner: usize = xs[2..].iter().product::<usize>().max(1);
                let mut dx = dy.to_vec();
                for (i, chunk) in dx.chunks_exact_mut(inner).enumerate() {
                    if !mask[i % mask.len()] {
                        chunk.fill(0.0);
                    }
                }
                add_into(&mut grads[input.0], dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len();
                let c = if n == 0 { 0 } else { probs.len() / n };
                let scale = if n == 0 { 0.0 } else { dy[0] / n as f32 };
                let mut dz: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dz[r * c + t] -= scale;
                }
                add_into(&mut grads[logits.0], dz);
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let n = av.len().max(1) as f32;
                let diff: Vec<f32> = av
                    .iter()
                    .zip(bv)
                    .map(|(x, y)| 2.0 * (x - y) / n * dy[0])
                    .collect();
                if self.wants(*b) {
                    add_into(&mut grads[b.0], diff.iter().map(|v| -v).collect());
                }
                if self.wants(*a) {
                    add_into(&mut grads[a.0], diff);
                }
            }
            Op::MaskedMse {
                input,
                target,
                mask,
                count,
            } => {
                let x = self.value(*input).data();
                let denom = (*count).max(1) as f32;
                let dx = x
                    .iter()
                    .zip(target)
                    .zip(mask)
                    .map(|((&v, &t), &m)| {
                        if m {
                            2.0 * (v - t) / denom * dy[0]
                        } else {
                            0.0
                        }
                    })
                    .collect();
                add_into(&mut grads[input.0], dx);
            }
            Op::Sum(input) => {
                let n = self.value(*input).numel();
                add_into(&mut grads[input.0], vec![dy[0]; n]);
            }
            Op::SumSquares(input) => {
                let dx = self
                    .value(*input)
                    .data()
                    .iter()
                    .map(|v| 2.0 * v * dy[0])
                    .collect();
                add_into(&mut grads[input.0], dx);
            }
            Op::WeightedSqDev {
                input,
                anchor,
                weights,
            } => {
                let dx = self
                    .value(*input)
                    .data()
                    .iter()
                    .zip(anchor)
                    .zip(weights)
                    .map(|((&v, &a), &w)| 2.0 * w * (v - a) * dy[0])
                    .collect();
                add_into(&mut grads[input.0], dx);
            }
            Op::Scale { input, factor } => {
                add_into(&mut grads[input.0], dy.iter().map(|g| g * factor).collect());
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], dy.to_vec());
                }
                if self.wants(*b) {
                    add_into(&mut grads[b.0], dy.to_vec());
                }
            }
        }
    }
}
