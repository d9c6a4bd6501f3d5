//! Reverse-mode differentiation tape.
//!
//! Operations are recorded in execution order; `backward` replays them in
//! reverse, so every op is visited exactly once and inputs always precede
//! their consumers. A tape is confined to one training step (and one
//! thread); parameters live outside and are registered as leaves.

use super::conv::{
    conv2d_backward, conv2d_forward, conv_transpose2d_backward, conv_transpose2d_forward,
    ConvDims, ConvTransposeDims,
};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use std::sync::atomic::{AtomicU64, Ordering};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        dims: ConvDims,
    },
    ConvTranspose2d {
        input: usize,
        weight: usize,
        bias: usize,
        dims: ConvTransposeDims,
    },
    MaxPool2d {
        input: usize,
        argmax: Vec<u32>,
    },
    LeakyRelu {
        input: usize,
        slope: f64,
    },
    ConcatChannels {
        a: usize,
        b: usize,
        a_channels: usize,
    },
    SoftmaxChannels {
        input: usize,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        targets: Vec<u8>,
        probs: Vec<f64>,
    },
    NllOnProbs {
        probs: usize,
        targets: Vec<u8>,
    },
    SoftDiceOnProbs {
        probs: usize,
        targets: Vec<u8>,
        smooth: f64,
    },
    MseAgainst {
        pred: usize,
        target: Vec<f64>,
    },
    MeanStack {
        inputs: Vec<usize>,
    },
    AddWeighted {
        a: usize,
        b: usize,
        weight_a: f64,
        weight_b: f64,
    },
    SumAll {
        input: usize,
    },
}

/// Wengert tape: values, op records and gradient slots in parallel arrays.
pub struct Tape {
    id: u64,
    values: Vec<Tensor>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f64>>>,
    active: Vec<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            values: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
            active: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Record a leaf. It participates in gradients iff `requires_grad` is
    /// set on the tensor.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let active = tensor.requires_grad;
        self.push(tensor, Op::Leaf, active)
    }

    /// Record a leaf that never receives a gradient (inputs, targets).
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        self.push(tensor, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, active: bool) -> Var {
        let index = self.values.len();
        self.values.push(value);
        self.ops.push(op);
        self.grads.push(None);
        self.active.push(active);
        Var { tape: self.id, index }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::Tape(
                "variable belongs to a different tape".to_string(),
            ));
        }
        debug_assert!(v.index < self.values.len());
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        &self.values[v.index]
    }

    /// Gradient of the last `backward` with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        self.grads[v.index].as_deref()
    }

    // ── Primitives ──────────────────────────────────────────────────

    /// 2D convolution over NCHW input with [Cout, Cin, kh, kw] weights.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (ii, wi, bi) = (self.check(input)?, self.check(weight)?, self.check(bias)?);
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let (batch, cin, h, w) = self.values[ii].dims4()?;
        let (cout, wcin, kh, kw) = self.values[wi].dims4()?;
        if wcin != cin {
            return Err(Error::Shape(format!(
                "conv2d weight expects {wcin} input channels, input has {cin}"
            )));
        }
        if self.values[bi].shape() != [cout] {
            return Err(Error::Shape(format!(
                "conv2d bias shape {:?} does not match {cout} filters",
                self.values[bi].shape()
            )));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::Shape(format!(
                "conv2d kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let dims = ConvDims {
            batch, cin, h, w, cout, kh, kw,
            stride,
            pad: padding,
            oh, ow,
        };
        let out = conv2d_forward(
            &dims,
            self.values[ii].data(),
            self.values[wi].data(),
            self.values[bi].data(),
        );
        let value = Tensor::new(vec![batch, cout, oh, ow], out)?;
        let active = self.active[ii] || self.active[wi] || self.active[bi];
        Ok(self.push(value, Op::Conv2d { input: ii, weight: wi, bias: bi, dims }, active))
    }

    /// Transposed 2D convolution with kernel size == stride (disjoint
    /// output blocks), [Cin, Cout, k, k] weights.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
    ) -> Result<Var> {
        let (ii, wi, bi) = (self.check(input)?, self.check(weight)?, self.check(bias)?);
        let (batch, cin, h, w) = self.values[ii].dims4()?;
        let (wcin, cout, kh, kw) = self.values[wi].dims4()?;
        if kh != kw || kh != stride || stride == 0 {
            return Err(Error::Config(format!(
                "conv_transpose2d supports kernel == stride only, got kernel {kh}x{kw} stride {stride}"
            )));
        }
        if wcin != cin {
            return Err(Error::Shape(format!(
                "conv_transpose2d weight expects {wcin} input channels, input has {cin}"
            )));
        }
        if self.values[bi].shape() != [cout] {
            return Err(Error::Shape(format!(
                "conv_transpose2d bias shape {:?} does not match {cout} filters",
                self.values[bi].shape()
            )));
        }
        let dims = ConvTransposeDims {
            batch, cin, h, w, cout,
            k: stride,
            oh: h * stride,
            ow: w * stride,
        };
        let out = conv_transpose2d_forward(
            &dims,
            self.values[ii].data(),
            self.values[wi].data(),
            self.values[bi].data(),
        );
        let value = Tensor::new(vec![batch, cout, dims.oh, dims.ow], out)?;
        let active = self.active[ii] || self.active[wi] || self.active[bi];
        Ok(self.push(
            value,
            Op::ConvTranspose2d { input: ii, weight: wi, bias: bi, dims },
            active,
        ))
    }

    /// Max pooling over disjoint `window x window` blocks. Gradient flows
    /// to the first (row-major) maximal element of each block.
    pub fn maxpool2d(&mut self, input: Var, window: usize) -> Result<Var> {
        let ii = self.check(input)?;
        if window == 0 {
            return Err(Error::Config("maxpool2d window must be positive".into()));
        }
        let (batch, c, h, w) = self.values[ii].dims4()?;
        if h % window != 0 || w % window != 0 {
            return Err(Error::Shape(format!(
                "maxpool2d window {window} does not divide extents {h}x{w}"
            )));
        }
        let (oh, ow) = (h / window, w / window);
        let src = self.values[ii].data();
        let mut out = vec![0.0; batch * c * oh * ow];
        let mut argmax = vec![0u32; out.len()];
        for nc in 0..batch * c {
            let plane = &src[nc * h * w..(nc + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = 0usize;
                    for ky in 0..window {
                        for kx in 0..window {
                            let at = (oy * window + ky) * w + ox * window + kx;
                            if plane[at] > best {
                                best = plane[at];
                                best_at = at;
                            }
                        }
                    }
                    out[nc * oh * ow + oy * ow + ox] = best;
                    argmax[nc * oh * ow + oy * ow + ox] = (nc * h * w + best_at) as u32;
                }
            }
        }
        let value = Tensor::new(vec![batch, c, oh, ow], out)?;
        let active = self.active[ii];
        Ok(self.push(value, Op::MaxPool2d { input: ii, argmax }, active))
    }

    /// Elementwise leaky rectifier: `x >= 0 -> x`, `x < 0 -> slope * x`.
    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Result<Var> {
        let ii = self.check(input)?;
        if !(0.0..1.0).contains(&slope) {
            return Err(Error::Config(format!(
                "leaky_relu slope must be in [0, 1), got {slope}"
            )));
        }
        let data: Vec<f64> = self.values[ii]
            .data()
            .iter()
            .map(|&x| if x >= 0.0 { x } else { slope * x })
            .collect();
        let value = Tensor::new(self.values[ii].shape().to_vec(), data)?;
        let active = self.active[ii];
        Ok(self.push(value, Op::LeakyRelu { input: ii, slope }, active))
    }

    /// Concatenate along the channel axis: `a` fills channels `[0, C_a)`,
    /// `b` fills `[C_a, C_a + C_b)`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (an, ac, ah, aw) = self.values[ai].dims4()?;
        let (bn, bc, bh, bw) = self.values[bi].dims4()?;
        if (an, ah, aw) != (bn, bh, bw) {
            return Err(Error::Shape(format!(
                "concat_channels spatial mismatch: {:?} vs {:?}",
                self.values[ai].shape(),
                self.values[bi].shape()
            )));
        }
        let mut data = Vec::with_capacity((ac + bc) * an * ah * aw);
        let (ad, bd) = (self.values[ai].data(), self.values[bi].data());
        let plane = ah * aw;
        for n in 0..an {
            data.extend_from_slice(&ad[n * ac * plane..(n + 1) * ac * plane]);
            data.extend_from_slice(&bd[n * bc * plane..(n + 1) * bc * plane]);
        }
        let value = Tensor::new(vec![an, ac + bc, ah, aw], data)?;
        let active = self.active[ai] || self.active[bi];
        Ok(self.push(value, Op::ConcatChannels { a: ai, b: bi, a_channels: ac }, active))
    }

    /// Per-pixel softmax over the channel axis, max-subtracted for
    /// stability.
    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let ii = self.check(input)?;
        let (batch, c, h, w) = self.values[ii].dims4()?;
        if c == 0 {
            return Err(Error::Shape("softmax over zero channels".into()));
        }
        let probs = softmax_nchw(self.values[ii].data(), batch, c, h, w);
        let value = Tensor::new(vec![batch, c, h, w], probs)?;
        let active = self.active[ii];
        Ok(self.push(value, Op::SoftmaxChannels { input: ii }, active))
    }

    /// Mean per-pixel cross-entropy between logits and integer targets,
    /// fused with the softmax for stability. Returns a scalar.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[u8],
        class_count: usize,
    ) -> Result<Var> {
        let li = self.check(logits)?;
        let (batch, c, h, w) = self.values[li].dims4()?;
        if c != class_count {
            return Err(Error::Shape(format!(
                "logits carry {c} channels, expected {class_count} classes"
            )));
        }
        check_targets(targets, batch * h * w, class_count)?;
        let probs = softmax_nchw(self.values[li].data(), batch, c, h, w);
        let plane = h * w;
        let count = batch * plane;
        let mut loss = 0.0;
        for n in 0..batch {
            for p in 0..plane {
                let t = targets[n * plane + p] as usize;
                loss -= probs[(n * c + t) * plane + p].ln();
            }
        }
        loss /= count as f64;
        let value = Tensor::scalar(loss);
        let active = self.active[li];
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy { logits: li, targets: targets.to_vec(), probs },
            active,
        ))
    }

    /// Mean negative log of already-formed probabilities at the target
    /// class. Errors if the result is not finite.
    pub fn nll_on_probs(&mut self, probs: Var, targets: &[u8]) -> Result<Var> {
        let pi = self.check(probs)?;
        let (batch, c, h, w) = self.values[pi].dims4()?;
        check_targets(targets, batch * h * w, c)?;
        let plane = h * w;
        let count = batch * plane;
        let data = self.values[pi].data();
        let mut loss = 0.0;
        for n in 0..batch {
            for p in 0..plane {
                let t = targets[n * plane + p] as usize;
                loss -= data[(n * c + t) * plane + p].ln();
            }
        }
        loss /= count as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(
                "cross-entropy on probabilities is not finite".into(),
            ));
        }
        let value = Tensor::scalar(loss);
        let active = self.active[pi];
        Ok(self.push(value, Op::NllOnProbs { probs: pi, targets: targets.to_vec() }, active))
    }

    /// Soft Dice loss over probabilities: `1 - mean_c (2*sum(p*y) + s) /
    /// (sum(p) + sum(y) + s)`.
    pub fn soft_dice_on_probs(&mut self, probs: Var, targets: &[u8], smooth: f64) -> Result<Var> {
        let pi = self.check(probs)?;
        let (batch, c, h, w) = self.values[pi].dims4()?;
        check_targets(targets, batch * h * w, c)?;
        if smooth <= 0.0 {
            return Err(Error::Config("soft dice smoothing must be positive".into()));
        }
        let (loss, _, _) = soft_dice_terms(self.values[pi].data(), targets, batch, c, h, w, smooth);
        let value = Tensor::scalar(loss);
        let active = self.active[pi];
        Ok(self.push(
            value,
            Op::SoftDiceOnProbs { probs: pi, targets: targets.to_vec(), smooth },
            active,
        ))
    }

    /// Mean squared error against a fixed target tensor.
    pub fn mse_against(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let pi = self.check(pred)?;
        if self.values[pi].shape() != target.shape() {
            return Err(Error::Shape(format!(
                "mse shapes differ: {:?} vs {:?}",
                self.values[pi].shape(),
                target.shape()
            )));
        }
        let n = target.len().max(1);
        let loss = self.values[pi]
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n as f64;
        let value = Tensor::scalar(loss);
        let active = self.active[pi];
        Ok(self.push(value, Op::MseAgainst { pred: pi, target: target.data().to_vec() }, active))
    }

    /// Elementwise arithmetic mean of two or more same-shaped tensors.
    pub fn mean_stack(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.len() < 2 {
            return Err(Error::Config(format!(
                "mean_stack needs at least 2 members, got {}",
                inputs.len()
            )));
        }
        let idx: Vec<usize> = inputs.iter().map(|&v| self.check(v)).collect::<Result<_>>()?;
        let shape = self.values[idx[0]].shape().to_vec();
        for &i in &idx[1..] {
            if self.values[i].shape() != shape {
                return Err(Error::Shape(format!(
                    "mean_stack member shapes differ: {:?} vs {:?}",
                    shape,
                    self.values[i].shape()
                )));
            }
        }
        let k = idx.len() as f64;
        let mut data = self.values[idx[0]].data().to_vec();
        for &i in &idx[1..] {
            for (d, v) in data.iter_mut().zip(self.values[i].data()) {
                *d += v;
            }
        }
        for d in &mut data {
            *d /= k;
        }
        let value = Tensor::new(shape, data)?;
        let active = idx.iter().any(|&i| self.active[i]);
        Ok(self.push(value, Op::MeanStack { inputs: idx }, active))
    }

    /// `weight_a * a + weight_b * b`, elementwise over equal shapes.
    pub fn add_weighted(&mut self, a: Var, weight_a: f64, b: Var, weight_b: f64) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        if self.values[ai].shape() != self.values[bi].shape() {
            return Err(Error::Shape(format!(
                "add_weighted shapes differ: {:?} vs {:?}",
                self.values[ai].shape(),
                self.values[bi].shape()
            )));
        }
        let data: Vec<f64> = self.values[ai]
            .data()
            .iter()
            .zip(self.values[bi].data())
            .map(|(&x, &y)| weight_a * x + weight_b * y)
            .collect();
        let value = Tensor::new(self.values[ai].shape().to_vec(), data)?;
        let active = self.active[ai] || self.active[bi];
        Ok(self.push(value, Op::AddWeighted { a: ai, b: bi, weight_a, weight_b }, active))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum_all(&mut self, input: Var) -> Result<Var> {
        let ii = self.check(input)?;
        let value = Tensor::scalar(self.values[ii].data().iter().sum());
        let active = self.active[ii];
        Ok(self.push(value, Op::SumAll { input: ii }, active))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates gradients on every
    /// active node that the loss depends on.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.check(loss)?;
        if self.values[li].len() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.values[li].shape()
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[li] = Some(vec![1.0]);
        self.sweep(li);
        Ok(())
    }

    /// Reverse sweep from an arbitrary node with a caller-supplied output
    /// gradient. Used by adjoint and vector-Jacobian tests.
    pub fn backward_seeded(&mut self, output: Var, seed: &Tensor) -> Result<()> {
        let oi = self.check(output)?;
        if self.values[oi].shape() != seed.shape() {
            return Err(Error::Shape(format!(
                "seed shape {:?} does not match output {:?}",
                seed.shape(),
                self.values[oi].shape()
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[oi] = Some(seed.data().to_vec());
        self.sweep(oi);
        Ok(())
    }

    fn sweep(&mut self, start: usize) {
        for i in (0..=start).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            self.apply_adjoint(i, &g);
            self.grads[i] = Some(g);
        }
    }

    fn acc(&mut self, node: usize, update: impl FnOnce(&mut [f64])) {
        if !self.active[node] {
            return;
        }
        let len = self.values[node].len();
        let slot = self.grads[node].get_or_insert_with(|| vec![0.0; len]);
        update(slot);
    }

    fn apply_adjoint(&mut self, i: usize, g: &[f64]) {
        // Ops are cheap to clone next to the arithmetic they trigger; the
        // cached buffers (argmax, probs, targets) are shared per node.
        let op = self.ops[i].clone();
        match op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, dims } => {
                let needs_input = self.active[input];
                let needs_weight = self.active[weight];
                let needs_bias = self.active[bias];
                let mut d_input = needs_input.then(|| vec![0.0; self.values[input].len()]);
                let mut d_weight = needs_weight.then(|| vec![0.0; self.values[weight].len()]);
                let mut d_bias = needs_bias.then(|| vec![0.0; self.values[bias].len()]);
                conv2d_backward(
                    &dims,
                    self.values[input].data(),
                    self.values[weight].data(),
                    g,
                    d_input.as_deref_mut(),
                    d_weight.as_deref_mut(),
                    d_bias.as_deref_mut(),
                );
                if let Some(d) = d_input {
                    self.acc(input, |s| add_into(s, &d));
                }
                if let Some(d) = d_weight {
                    self.acc(weight, |s| add_into(s, &d));
                }
                if let Some(d) = d_bias {
                    self.acc(bias, |s| add_into(s, &d));
                }
            }
            Op::ConvTranspose2d { input, weight, bias, dims } => {
                let needs_input = self.active[input];
                let needs_weight = self.active[weight];
                let needs_bias = self.active[bias];
                let mut d_input = needs_input.then(|| vec![0.0; self.values[input].len()]);
                let mut d_weight = needs_weight.then(|| vec![0.0; self.values[weight].len()]);
                let mut d_bias = needs_bias.then(|| vec![0.0; self.values[bias].len()]);
                conv_transpose2d_backward(
                    &dims,
                    self.values[input].data(),
                    self.values[weight].data(),
                    g,
                    d_input.as_deref_mut(),
                    d_weight.as_deref_mut(),
                    d_bias.as_deref_mut(),
                );
                if let Some(d) = d_input {
                    self.acc(input, |s| add_into(s, &d));
                }
                if let Some(d) = d_weight {
                    self.acc(weight, |s| add_into(s, &d));
                }
                if let Some(d) = d_bias {
                    self.acc(bias, |s| add_into(s, &d));
                }
            }
            Op::MaxPool2d { input, argmax } => {
                self.acc(input, |s| {
                    for (o, &src) in argmax.iter().enumerate() {
                        s[src as usize] += g[o];
                    }
                });
            }
            Op::LeakyRelu { input, slope } => {
                let x = self.values[input].data().to_vec();
                self.acc(input, |s| {
                    for (k, (&xv, &gv)) in x.iter().zip(g).enumerate() {
                        s[k] += if xv >= 0.0 { gv } else { slope * gv };
                    }
                });
            }
            Op::ConcatChannels { a, b, a_channels } => {
                let (n, c, h, w) = self.values[i].dims4().expect("concat output is 4d");
                let plane = h * w;
                let bc = c - a_channels;
                self.acc(a, |s| {
                    for ni in 0..n {
                        let src = &g[ni * c * plane..ni * c * plane + a_channels * plane];
                        add_into(&mut s[ni * a_channels * plane..(ni + 1) * a_channels * plane], src);
                    }
                });
                self.acc(b, |s| {
                    for ni in 0..n {
                        let src = &g[ni * c * plane + a_channels * plane..(ni + 1) * c * plane];
                        add_into(&mut s[ni * bc * plane..(ni + 1) * bc * plane], src);
                    }
                });
            }
            Op::SoftmaxChannels { input } => {
                let (n, c, h, w) = self.values[i].dims4().expect("softmax output is 4d");
                let y = self.values[i].data().to_vec();
                let plane = h * w;
                self.acc(input, |s| {
                    for ni in 0..n {
                        for p in 0..plane {
                            let mut dot = 0.0;
                            for ci in 0..c {
                                let at = (ni * c + ci) * plane + p;
                                dot += g[at] * y[at];
                            }
                            for ci in 0..c {
                                let at = (ni * c + ci) * plane + p;
                                s[at] += y[at] * (g[at] - dot);
                            }
                        }
                    }
                });
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                let (n, c, h, w) = self.values[logits].dims4().expect("logits are 4d");
                let plane = h * w;
                let scale = g[0] / (n * plane) as f64;
                self.acc(logits, |s| {
                    for (k, &p) in probs.iter().enumerate() {
                        s[k] += scale * p;
                    }
                    for ni in 0..n {
                        for p in 0..plane {
                            let t = targets[ni * plane + p] as usize;
                            s[(ni * c + t) * plane + p] -= scale;
                        }
                    }
                });
            }
            Op::NllOnProbs { probs, targets } => {
                let (n, c, h, w) = self.values[probs].dims4().expect("probs are 4d");
                let plane = h * w;
                let scale = g[0] / (n * plane) as f64;
                let pdata = self.values[probs].data().to_vec();
                self.acc(probs, |s| {
                    for ni in 0..n {
                        for p in 0..plane {
                            let t = targets[ni * plane + p] as usize;
                            let at = (ni * c + t) * plane + p;
                            s[at] -= scale / pdata[at];
                        }
                    }
                });
            }
            Op::SoftDiceOnProbs { probs, targets, smooth } => {
                let (n, c, h, w) = self.values[probs].dims4().expect("probs are 4d");
                let plane = h * w;
                let (_, nums, dens) =
                    soft_dice_terms(self.values[probs].data(), &targets, n, c, h, w, smooth);
                let scale = g[0] / c as f64;
                self.acc(probs, |s| {
                    for ni in 0..n {
                        for ci in 0..c {
                            for p in 0..plane {
                                let y = (targets[ni * plane + p] as usize == ci) as u8 as f64;
                                let at = (ni * c + ci) * plane + p;
                                s[at] -= scale * (2.0 * y * dens[ci] - nums[ci]) / (dens[ci] * dens[ci]);
                            }
                        }
                    }
                });
            }
            Op::MseAgainst { pred, target } => {
                let scale = 2.0 * g[0] / target.len().max(1) as f64;
                let p = self.values[pred].data().to_vec();
                self.acc(pred, |s| {
                    for (k, (&pv, &tv)) in p.iter().zip(&target).enumerate() {
                        s[k] += scale * (pv - tv);
                    }
                });
            }
            Op::MeanStack { inputs } => {
                let k = inputs.len() as f64;
                for input in inputs {
                    self.acc(input, |s| {
                        for (sv, &gv) in s.iter_mut().zip(g) {
                            *sv += gv / k;
                        }
                    });
                }
            }
            Op::AddWeighted { a, b, weight_a, weight_b } => {
                self.acc(a, |s| {
                    for (sv, &gv) in s.iter_mut().zip(g) {
                        *sv += weight_a * gv;
                    }
                });
                self.acc(b, |s| {
                    for (sv, &gv) in s.iter_mut().zip(g) {
                        *sv += weight_b * gv;
                    }
                });
            }
            Op::SumAll { input } => {
                self.acc(input, |s| {
                    for sv in s.iter_mut() {
                        *sv += g[0];
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn check_targets(targets: &[u8], expected: usize, class_count: usize) -> Result<()> {
    if targets.len() != expected {
        return Err(Error::Shape(format!(
            "expected {expected} target labels, got {}",
            targets.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| (t as usize) >= class_count) {
        return Err(Error::Label(format!(
            "label {bad} out of range for {class_count} classes"
        )));
    }
    Ok(())
}

fn softmax_nchw(logits: &[f64], n: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let plane = h * w;
    let mut probs = vec![0.0; logits.len()];
    for ni in 0..n {
        for p in 0..plane {
            let mut max = f64::NEG_INFINITY;
            for ci in 0..c {
                max = max.max(logits[(ni * c + ci) * plane + p]);
            }
            let mut sum = 0.0;
            for ci in 0..c {
                let at = (ni * c + ci) * plane + p;
                let e = (logits[at] - max).exp();
                probs[at] = e;
                sum += e;
            }
            for ci in 0..c {
                probs[(ni * c + ci) * plane + p] /= sum;
            }
        }
    }
    probs
}

/// Soft-Dice loss plus the per-class numerators and denominators the
/// adjoint needs.
fn soft_dice_terms(
    probs: &[f64],
    targets: &[u8],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    smooth: f64,
) -> (f64, Vec<f64>, Vec<f64>) {
    let plane = h * w;
    let mut nums = vec![smooth; c];
    let mut dens = vec![smooth; c];
    for ni in 0..n {
        for ci in 0..c {
            for p in 0..plane {
                let pv = probs[(ni * c + ci) * plane + p];
                let y = (targets[ni * plane + p] as usize == ci) as u8 as f64;
                nums[ci] += 2.0 * pv * y;
                dens[ci] += pv + y;
            }
        }
    }
    let mean: f64 = nums.iter().zip(&dens).map(|(n, d)| n / d).sum::<f64>() / c as f64;
    (1.0 - mean, nums, dens)
}
