//! Reverse-mode gradient computation via an operation tape.
//!
//! A [`Tape`] owns every tensor produced during a forward pass. Each call to
//! an op method appends a node recording the operation and its inputs;
//! [`Tape::backward`] replays the nodes in reverse execution order, visiting
//! each exactly once and accumulating gradients additively whenever a value
//! feeds several ops. A tape is confined to one thread and is typically
//! rebuilt per training step; tensors themselves are plain values and move
//! freely between threads.

use super::{conv_out_extent, Tensor};
use crate::error::{Error, Result};

/// Output of the clamped sigmoid never leaves `[SIGMOID_CLAMP, 1 - SIGMOID_CLAMP]`,
/// so the logarithms in the adversarial objectives stay finite.
pub const SIGMOID_CLAMP: f64 = 1e-7;

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// A (row, col) location on a spatial grid.
pub type GridPoint = (usize, usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    Upsample2 {
        input: Var,
    },
    Maxpool2 {
        input: Var,
        /// Flat input index of the winning element, per output element.
        argmax: Vec<usize>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Affine {
        input: Var,
        scale: f64,
    },
    Square {
        input: Var,
    },
    Ln {
        input: Var,
    },
    Sum {
        input: Var,
    },
    Reshape {
        input: Var,
    },
    Crop {
        input: Var,
        y0: usize,
        x0: usize,
    },
    TotalVariation {
        input: Var,
    },
    PatchSsd {
        map: Var,
        pairs: Vec<(GridPoint, GridPoint)>,
        radius: usize,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of executed differentiable operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Register a leaf value. Gradients flow into it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(id)
    }

    /// Leaf that participates in gradient computation.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of `v`, populated by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of `v`, or zeros when nothing flowed into it.
    pub fn grad_or_zero(&self, v: Var) -> Tensor {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[v.0].value.shape()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(id)
    }

    // ---- ops -----------------------------------------------------------

    /// Strided cross-correlation plus bias.
    ///
    /// `input` is h x w x c_in, `kernels` kh x kw x c_in x c_out, `bias`
    /// c_out. Output spatial extent is `(in + 2*padding - k) / stride + 1`
    /// per axis.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernels: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (ih, iw, ic) = dims3(self.value(input), "conv2d input")?;
        let k = self.value(kernels);
        if k.rank() != 4 {
            return Err(Error::Shape(format!(
                "conv2d kernels must be rank 4 (kh x kw x c_in x c_out), got {:?}",
                k.shape()
            )));
        }
        let (kh, kw, kic, oc) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
        if kic != ic {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input has {ic} channels, kernels expect {kic}"
            )));
        }
        if kh > ih + 2 * padding || kw > iw + 2 * padding {
            return Err(Error::Shape(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                ih + 2 * padding,
                iw + 2 * padding
            )));
        }
        if self.value(bias).numel() != oc {
            return Err(Error::Shape(format!(
                "conv2d bias length {} != {} output channels",
                self.value(bias).numel(),
                oc
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }

        let oh = conv_out_extent(ih, kh, stride, padding);
        let ow = conv_out_extent(iw, kw, stride, padding);
        let mut out = vec![0.0; oh * ow * oc];
        {
            let x = self.value(input).data();
            let kd = self.value(kernels).data();
            let bd = self.value(bias).data();
            for oy in 0..oh {
                for ox in 0..ow {
                    let o_base = (oy * ow + ox) * oc;
                    out[o_base..o_base + oc].copy_from_slice(bd);
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= ih as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= iw as isize {
                                continue;
                            }
                            let i_base = (iy as usize * iw + ix as usize) * ic;
                            let k_base = ((ky * kw) + kx) * ic * oc;
                            for icc in 0..ic {
                                let xv = x[i_base + icc];
                                if xv == 0.0 {
                                    continue;
                                }
                                let ks = &kd[k_base + icc * oc..k_base + (icc + 1) * oc];
                                let os = &mut out[o_base..o_base + oc];
                                for (o, kv) in os.iter_mut().zip(ks) {
                                    *o += xv * kv;
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[oh, ow, oc], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernels,
                bias,
                stride,
                padding,
            },
            &[input, kernels, bias],
        ))
    }

    /// Affine map of the flattened input: `out = W x + b`.
    pub fn fully_connected(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let n = self.value(input).numel();
        let w = self.value(weight);
        if w.rank() != 2 {
            return Err(Error::Shape(format!(
                "fully_connected weight must be rank 2 (out x in), got {:?}",
                w.shape()
            )));
        }
        let (m, wn) = (w.shape()[0], w.shape()[1]);
        if wn != n {
            return Err(Error::Shape(format!(
                "fully_connected: flattened input length {n} != weight input extent {wn}"
            )));
        }
        if self.value(bias).numel() != m {
            return Err(Error::Shape(format!(
                "fully_connected bias length {} != {m} outputs",
                self.value(bias).numel()
            )));
        }
        let mut out = vec![0.0; m];
        {
            let x = self.value(input).data();
            let wd = self.value(weight).data();
            let bd = self.value(bias).data();
            for i in 0..m {
                let row = &wd[i * n..(i + 1) * n];
                let mut acc = bd[i];
                for (wv, xv) in row.iter().zip(x) {
                    acc += wv * xv;
                }
                out[i] = acc;
            }
        }
        let value = Tensor::from_vec(&[m], out)?;
        Ok(self.push(
            value,
            Op::Dense {
                input,
                weight,
                bias,
            },
            &[input, weight, bias],
        ))
    }

    /// Elementwise max(0, x).
    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| v.max(0.0));
        self.push(value, Op::Relu { input }, &[input])
    }

    /// Elementwise logistic, clamped to `[SIGMOID_CLAMP, 1 - SIGMOID_CLAMP]`.
    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = self
            .value(input)
            .map(|v| sigmoid_scalar(v).clamp(SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP));
        self.push(value, Op::Sigmoid { input }, &[input])
    }

    /// Double both spatial extents, replicating each value into a 2x2 block.
    pub fn upsample_nearest2(&mut self, input: Var) -> Result<Var> {
        let (h, w, c) = dims3(self.value(input), "upsample_nearest2 input")?;
        let x = self.value(input).data();
        let mut out = vec![0.0; 4 * h * w * c];
        let ow = 2 * w;
        for y in 0..h {
            for xx in 0..w {
                let src = &x[(y * w + xx) * c..(y * w + xx + 1) * c];
                for dy in 0..2 {
                    for dx in 0..2 {
                        let dst = ((2 * y + dy) * ow + 2 * xx + dx) * c;
                        out[dst..dst + c].copy_from_slice(src);
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[2 * h, 2 * w, c], out)?;
        Ok(self.push(value, Op::Upsample2 { input }, &[input]))
    }

    /// Non-overlapping 2x2 max pooling. Ties go to the first element in
    /// row-major scan order; spatial extents must be even.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (h, w, c) = dims3(self.value(input), "maxpool2 input")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "maxpool2 requires even spatial extents, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = vec![0.0; oh * ow * c];
        let mut argmax = vec![0usize; oh * ow * c];
        for oy in 0..oh {
            for ox in 0..ow {
                for cc in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = ((2 * oy + dy) * w + 2 * ox + dx) * c + cc;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (oy * ow + ox) * c + cc;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        let value = Tensor::from_vec(&[oh, ow, c], out)?;
        Ok(self.push(value, Op::Maxpool2 { input, argmax }, &[input]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(value, Op::Sub { a, b }, &[a, b]))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    /// Elementwise `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, input: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(input).map(|v| scale * v + shift);
        self.push(value, Op::Affine { input, scale }, &[input])
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        self.affine(input, factor, 0.0)
    }

    pub fn square(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| v * v);
        self.push(value, Op::Square { input }, &[input])
    }

    /// Elementwise natural logarithm; all inputs must be strictly positive.
    pub fn ln(&mut self, input: Var) -> Result<Var> {
        if self.value(input).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Numeric(
                "ln of non-positive value (clamp upstream)".into(),
            ));
        }
        let value = self.value(input).map(f64::ln);
        Ok(self.push(value, Op::Ln { input }, &[input]))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, input: Var) -> Var {
        let s: f64 = self.value(input).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { input }, &[input])
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { input }, &[input]))
    }

    /// Spatial crop of a rank-3 tensor, all channels kept.
    pub fn crop(&mut self, input: Var, y0: usize, x0: usize, h: usize, w: usize) -> Result<Var> {
        let (ih, iw, c) = dims3(self.value(input), "crop input")?;
        if y0 + h > ih || x0 + w > iw {
            return Err(Error::Shape(format!(
                "crop {h}x{w}+{y0}+{x0} exceeds input {ih}x{iw}"
            )));
        }
        let x = self.value(input).data();
        let mut out = vec![0.0; h * w * c];
        for y in 0..h {
            let src = ((y0 + y) * iw + x0) * c;
            let dst = y * w * c;
            out[dst..dst + w * c].copy_from_slice(&x[src..src + w * c]);
        }
        let value = Tensor::from_vec(&[h, w, c], out)?;
        Ok(self.push(value, Op::Crop { input, y0, x0 }, &[input]))
    }

    /// Sum of squared horizontal and vertical neighbor differences over all
    /// channels, as a scalar.
    pub fn total_variation(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        let v = total_variation_value(t)?;
        Ok(self.push(Tensor::scalar(v), Op::TotalVariation { input }, &[input]))
    }

    /// Summed squared difference between feature patches at paired grid
    /// locations of one map: `sum over pairs (p, q) of || patch(p) - patch(q) ||^2`
    /// with square patches of the given radius.
    pub fn patch_ssd(
        &mut self,
        map: Var,
        pairs: &[(GridPoint, GridPoint)],
        radius: usize,
    ) -> Result<Var> {
        let (h, w, c) = dims3(self.value(map), "patch_ssd map")?;
        for &(p, q) in pairs {
            for pt in [p, q] {
                if !patch_in_bounds(pt, radius, h, w) {
                    return Err(Error::Shape(format!(
                        "patch of radius {radius} at {pt:?} exceeds {h}x{w} map"
                    )));
                }
            }
        }
        let x = self.value(map).data();
        let mut total = 0.0;
        let r = radius as isize;
        for &((py, px), (qy, qx)) in pairs {
            for dy in -r..=r {
                for dx in -r..=r {
                    let pi = ((py as isize + dy) as usize * w + (px as isize + dx) as usize) * c;
                    let qi = ((qy as isize + dy) as usize * w + (qx as isize + dx) as usize) * c;
                    for cc in 0..c {
                        let d = x[pi + cc] - x[qi + cc];
                        total += d * d;
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::PatchSsd {
                map,
                pairs: pairs.to_vec(),
                radius,
            },
            &[map],
        ))
    }

    fn zip(&self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "{name}: shapes {:?} and {:?} differ",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_vec(ta.shape(), data)
    }

    // ---- backward ------------------------------------------------------

    /// Populate gradients of `root` with respect to every tensor that
    /// requires them. `root` must be scalar. Repeated calls accumulate into
    /// the stored gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::Shape(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        // Per-pass adjoints; merged into stored grads at the end so that a
        // second backward() adds a fresh pass instead of re-propagating
        // already-accumulated totals.
        let mut adj: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            let op = self.nodes[i].op.clone();
            self.propagate(&op, &g, &mut adj);
            if self.nodes[i].requires_grad {
                accumulate(&mut self.nodes[i].grad, &g);
            }
        }
        Ok(())
    }

    /// Clear all stored gradients, keeping values.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Hash of the discrete state of the recorded forward pass: relu signs,
    /// maxpool winner positions, and sigmoid clamp regions. Two evaluations
    /// with equal patterns lie on the same smooth piece of the function, so
    /// a central difference between them is well-posed.
    pub fn activation_pattern(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } => {
                    for &v in self.value(*input).data() {
                        mix(1 + (v > 0.0) as u64);
                    }
                }
                Op::Sigmoid { input } => {
                    for &v in self.value(*input).data() {
                        let s = sigmoid_scalar(v);
                        let region = if s <= SIGMOID_CLAMP {
                            0
                        } else if s >= 1.0 - SIGMOID_CLAMP {
                            2
                        } else {
                            1
                        };
                        mix(4 + region);
                    }
                }
                Op::Maxpool2 { ref argmax, .. } => {
                    for &a in argmax {
                        mix(8 + a as u64);
                    }
                }
                _ => {}
            }
        }
        h
    }

    fn propagate(&self, op: &Op, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut send = |v: Var, t: Tensor| {
            accumulate(&mut adj[v.0], &t);
        };
        match *op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernels,
                bias,
                stride,
                padding,
            } => {
                let x = self.value(input);
                let k = self.value(kernels);
                let (ih, iw, ic) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (kh, kw, oc) = (k.shape()[0], k.shape()[1], k.shape()[3]);
                let (oh, ow) = (
                    conv_out_extent(ih, kh, stride, padding),
                    conv_out_extent(iw, kw, stride, padding),
                );
                let gd = g.data();
                let (want_in, want_k, want_b) = (needs(input), needs(kernels), needs(bias));
                let mut gx = vec![0.0; if want_in { ih * iw * ic } else { 0 }];
                let mut gk = vec![0.0; if want_k { kh * kw * ic * oc } else { 0 }];
                let mut gb = vec![0.0; if want_b { oc } else { 0 }];
                if want_b {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let o_base = (oy * ow + ox) * oc;
                            for occ in 0..oc {
                                gb[occ] += gd[o_base + occ];
                            }
                        }
                    }
                }
                if want_in || want_k {
                    let xd = x.data();
                    let kd = k.data();
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let o_base = (oy * ow + ox) * oc;
                            let gs = &gd[o_base..o_base + oc];
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= ih as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= iw as isize {
                                        continue;
                                    }
                                    let i_base = (iy as usize * iw + ix as usize) * ic;
                                    let k_base = ((ky * kw) + kx) * ic * oc;
                                    for icc in 0..ic {
                                        let ks = &kd[k_base + icc * oc..k_base + (icc + 1) * oc];
                                        if want_k {
                                            let xv = xd[i_base + icc];
                                            let gks =
                                                &mut gk[k_base + icc * oc..k_base + (icc + 1) * oc];
                                            for (gkv, gov) in gks.iter_mut().zip(gs) {
                                                *gkv += xv * gov;
                                            }
                                        }
                                        if want_in {
                                            let mut acc = 0.0;
                                            for (kv, gov) in ks.iter().zip(gs) {
                                                acc += kv * gov;
                                            }
                                            gx[i_base + icc] += acc;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if want_in {
                    send(input, Tensor::from_vec(&[ih, iw, ic], gx).unwrap());
                }
                if want_k {
                    send(kernels, Tensor::from_vec(&[kh, kw, ic, oc], gk).unwrap());
                }
                if want_b {
                    send(bias, Tensor::from_vec(&[oc], gb).unwrap());
                }
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let n = self.value(input).numel();
                let m = self.value(weight).shape()[0];
                let gd = g.data();
                if needs(input) {
                    let wd = self.value(weight).data();
                    let mut gx = vec![0.0; n];
                    for i in 0..m {
                        let row = &wd[i * n..(i + 1) * n];
                        let gi = gd[i];
                        for (gxv, wv) in gx.iter_mut().zip(row) {
                            *gxv += gi * wv;
                        }
                    }
                    send(
                        input,
                        Tensor::from_vec(self.value(input).shape(), gx).unwrap(),
                    );
                }
                if needs(weight) {
                    let xd = self.value(input).data();
                    let mut gw = vec![0.0; m * n];
                    for i in 0..m {
                        let gi = gd[i];
                        let row = &mut gw[i * n..(i + 1) * n];
                        for (gwv, xv) in row.iter_mut().zip(xd) {
                            *gwv += gi * xv;
                        }
                    }
                    send(weight, Tensor::from_vec(&[m, n], gw).unwrap());
                }
                if needs(bias) {
                    send(bias, Tensor::from_vec(&[m], gd.to_vec()).unwrap());
                }
            }
            Op::Relu { input } => {
                if needs(input) {
                    let x = self.value(input);
                    let data = x
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect();
                    send(input, Tensor::from_vec(x.shape(), data).unwrap());
                }
            }
            Op::Sigmoid { input } => {
                if needs(input) {
                    let x = self.value(input);
                    // Local slope is zero in the clamped tails, matching the
                    // clamped forward value.
                    let data = x
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xv, &gv)| {
                            let s = sigmoid_scalar(xv);
                            if s < SIGMOID_CLAMP || s > 1.0 - SIGMOID_CLAMP {
                                0.0
                            } else {
                                gv * s * (1.0 - s)
                            }
                        })
                        .collect();
                    send(input, Tensor::from_vec(x.shape(), data).unwrap());
                }
            }
            Op::Upsample2 { input } => {
                if needs(input) {
                    let x = self.value(input);
                    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                    let gd = g.data();
                    let ow = 2 * w;
                    let mut gx = vec![0.0; h * w * c];
                    for y in 0..h {
                        for xx in 0..w {
                            let dst = (y * w + xx) * c;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let src = ((2 * y + dy) * ow + 2 * xx + dx) * c;
                                    for cc in 0..c {
                                        gx[dst + cc] += gd[src + cc];
                                    }
                                }
                            }
                        }
                    }
                    send(input, Tensor::from_vec(&[h, w, c], gx).unwrap());
                }
            }
            Op::Maxpool2 { input, ref argmax } => {
                if needs(input) {
                    let x = self.value(input);
                    let mut gx = vec![0.0; x.numel()];
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += g.data()[o];
                    }
                    send(input, Tensor::from_vec(x.shape(), gx).unwrap());
                }
            }
            Op::Add { a, b } => {
                if needs(a) {
                    send(a, g.clone());
                }
                if needs(b) {
                    send(b, g.clone());
                }
            }
            Op::Sub { a, b } => {
                if needs(a) {
                    send(a, g.clone());
                }
                if needs(b) {
                    send(b, g.map(|v| -v));
                }
            }
            Op::Mul { a, b } => {
                if needs(a) {
                    let t = elementwise(g, self.value(b), |gv, bv| gv * bv);
                    send(a, t);
                }
                if needs(b) {
                    let t = elementwise(g, self.value(a), |gv, av| gv * av);
                    send(b, t);
                }
            }
            Op::Affine { input, scale } => {
                if needs(input) {
                    send(input, g.map(|v| scale * v));
                }
            }
            Op::Square { input } => {
                if needs(input) {
                    let t = elementwise(g, self.value(input), |gv, xv| 2.0 * xv * gv);
                    send(input, t);
                }
            }
            Op::Ln { input } => {
                if needs(input) {
                    let t = elementwise(g, self.value(input), |gv, xv| gv / xv);
                    send(input, t);
                }
            }
            Op::Sum { input } => {
                if needs(input) {
                    let gv = g.data()[0];
                    send(input, Tensor::filled(self.value(input).shape(), gv));
                }
            }
            Op::Reshape { input } => {
                if needs(input) {
                    send(input, g.reshaped(self.value(input).shape()).unwrap());
                }
            }
            Op::Crop { input, y0, x0 } => {
                if needs(input) {
                    let x = self.value(input);
                    let (ih, iw, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                    let (h, w) = (g.shape()[0], g.shape()[1]);
                    let mut gx = vec![0.0; ih * iw * c];
                    let gd = g.data();
                    for y in 0..h {
                        let dst = ((y0 + y) * iw + x0) * c;
                        let src = y * w * c;
                        gx[dst..dst + w * c].copy_from_slice(&gd[src..src + w * c]);
                    }
                    send(input, Tensor::from_vec(&[ih, iw, c], gx).unwrap());
                }
            }
            Op::TotalVariation { input } => {
                if needs(input) {
                    let x = self.value(input);
                    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                    let xd = x.data();
                    let gv = g.data()[0];
                    let mut gx = vec![0.0; xd.len()];
                    for y in 0..h {
                        for xx in 0..w {
                            let i = (y * w + xx) * c;
                            for cc in 0..c {
                                if xx + 1 < w {
                                    let j = (y * w + xx + 1) * c + cc;
                                    let d = xd[j] - xd[i + cc];
                                    gx[j] += 2.0 * d * gv;
                                    gx[i + cc] -= 2.0 * d * gv;
                                }
                                if y + 1 < h {
                                    let j = ((y + 1) * w + xx) * c + cc;
                                    let d = xd[j] - xd[i + cc];
                                    gx[j] += 2.0 * d * gv;
                                    gx[i + cc] -= 2.0 * d * gv;
                                }
                            }
                        }
                    }
                    send(input, Tensor::from_vec(&[h, w, c], gx).unwrap());
                }
            }
            Op::PatchSsd {
                map,
                ref pairs,
                radius,
            } => {
                if needs(map) {
                    let x = self.value(map);
                    let (_, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                    let xd = x.data();
                    let gv = g.data()[0];
                    let mut gx = vec![0.0; xd.len()];
                    let r = radius as isize;
                    for &((py, px), (qy, qx)) in pairs {
                        for dy in -r..=r {
                            for dx in -r..=r {
                                let pi = ((py as isize + dy) as usize * w
                                    + (px as isize + dx) as usize)
                                    * c;
                                let qi = ((qy as isize + dy) as usize * w
                                    + (qx as isize + dx) as usize)
                                    * c;
                                for cc in 0..c {
                                    let d = xd[pi + cc] - xd[qi + cc];
                                    gx[pi + cc] += 2.0 * d * gv;
                                    gx[qi + cc] -= 2.0 * d * gv;
                                }
                            }
                        }
                    }
                    send(map, Tensor::from_vec(x.shape(), gx).unwrap());
                }
            }
        }
    }
}

/// Raw total-variation value of a rank-3 tensor (no tape involved).
pub fn total_variation_value(t: &Tensor) -> Result<f64> {
    let (h, w, c) = dims3(t, "total_variation input")?;
    let xd = t.data();
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) * c;
            for cc in 0..c {
                if x + 1 < w {
                    let d = xd[(y * w + x + 1) * c + cc] - xd[i + cc];
                    total += d * d;
                }
                if y + 1 < h {
                    let d = xd[((y + 1) * w + x) * c + cc] - xd[i + cc];
                    total += d * d;
                }
            }
        }
    }
    Ok(total)
}

/// Number of squared-difference terms in the total variation of an
/// h x w x c tensor; used to normalize the TV energy term.
pub fn total_variation_terms(h: usize, w: usize, c: usize) -> usize {
    (h * (w.saturating_sub(1)) + w * (h.saturating_sub(1))) * c
}

fn patch_in_bounds(p: GridPoint, radius: usize, h: usize, w: usize) -> bool {
    p.0 >= radius && p.1 >= radius && p.0 + radius < h && p.1 + radius < w
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dims3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    if t.rank() != 3 {
        return Err(Error::Shape(format!(
            "{what} must be rank 3 (h x w x c), got {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1], t.shape()[2]))
}

fn accumulate(slot: &mut Option<Tensor>, g: &Tensor) {
    match slot {
        Some(t) => {
            debug_assert_eq!(t.shape(), g.shape());
            for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g.clone()),
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.numel(), b.numel());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(b.shape(), data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t3(h: usize, w: usize, c: usize, data: Vec<f64>) -> Tensor {
        Tensor::from_vec(&[h, w, c], data).unwrap()
    }

    #[test]
    fn conv2d_sum_of_ones() {
        // 4x4x1 all-ones input, one 4x4x1 all-ones kernel, stride 2, pad 0
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(&[4, 4, 1], 1.0));
        let k = tape.constant(Tensor::filled(&[4, 4, 1, 1], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, k, b, 2, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1]);
        assert_eq!(tape.value(y).data()[0], 16.0);
    }

    #[test]
    fn conv2d_zero_kernels_give_zero_output() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[5, 5, 2], |i| (i as f64).sin()));
        let k = tape.constant(Tensor::zeros(&[3, 3, 2, 4]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.conv2d(x, k, b, 1, 1).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    /// Nested-loop reference convolution, independent of the tape path.
    fn conv2d_oracle(
        x: &Tensor,
        k: &Tensor,
        b: &Tensor,
        stride: usize,
        padding: usize,
    ) -> Tensor {
        let (ih, iw, ic) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (kh, kw, oc) = (k.shape()[0], k.shape()[1], k.shape()[3]);
        let oh = conv_out_extent(ih, kh, stride, padding);
        let ow = conv_out_extent(iw, kw, stride, padding);
        let mut out = Tensor::zeros(&[oh, ow, oc]);
        for oy in 0..oh {
            for ox in 0..ow {
                for occ in 0..oc {
                    let mut acc = b.data()[occ];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if iy < 0 || ix < 0 || iy >= ih as isize || ix >= iw as isize {
                                continue;
                            }
                            for icc in 0..ic {
                                let xv = x.at3(iy as usize, ix as usize, icc);
                                let kv = k.data()
                                    [(((ky * kw) + kx) * ic + icc) * oc + occ];
                                acc += xv * kv;
                            }
                        }
                    }
                    out.set3(oy, ox, occ, acc);
                }
            }
        }
        out
    }

    fn seeded(shape: &[usize], seed: u64) -> Tensor {
        // Small deterministic pseudo-random values in [-1, 1].
        let mut s = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn conv2d_matches_loop_oracle() {
        let x = seeded(&[6, 6, 2], 3);
        let k = seeded(&[3, 3, 2, 3], 4);
        let b = seeded(&[3], 5);
        let mut tape = Tape::new();
        let (xv, kv, bv) = (
            tape.constant(x.clone()),
            tape.constant(k.clone()),
            tape.constant(b.clone()),
        );
        let y = tape.conv2d(xv, kv, bv, 1, 1).unwrap();
        let want = conv2d_oracle(&x, &k, &b, 1, 1);
        assert_eq!(tape.value(y).shape(), want.shape());
        for (a, e) in tape.value(y).data().iter().zip(want.data()) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn conv2d_random_configs_match_oracle() {
        // >= 20 shape/stride/padding configurations against the reference.
        let mut case = 0u64;
        for &(ih, iw) in &[(4usize, 4usize), (5, 7), (6, 6), (8, 5)] {
            for &(kh, kw) in &[(1usize, 1usize), (3, 3), (4, 2)] {
                for &stride in &[1usize, 2] {
                    for &padding in &[0usize, 1] {
                        if kh > ih + 2 * padding || kw > iw + 2 * padding {
                            continue;
                        }
                        case += 1;
                        let x = seeded(&[ih, iw, 2], case);
                        let k = seeded(&[kh, kw, 2, 3], case + 100);
                        let b = seeded(&[3], case + 200);
                        let mut tape = Tape::new();
                        let (xv, kv, bv) = (
                            tape.constant(x.clone()),
                            tape.constant(k.clone()),
                            tape.constant(b.clone()),
                        );
                        let y = tape.conv2d(xv, kv, bv, stride, padding).unwrap();
                        let want = conv2d_oracle(&x, &k, &b, stride, padding);
                        assert_eq!(tape.value(y).shape(), want.shape());
                        for (a, e) in tape.value(y).data().iter().zip(want.data()) {
                            assert!((a - e).abs() < 1e-12);
                        }
                    }
                }
            }
        }
        assert!(case >= 20, "only {case} configurations exercised");
    }

    #[test]
    fn conv2d_channel_mismatch_is_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4, 4, 2]));
        let k = tape.constant(Tensor::zeros(&[3, 3, 3, 1]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let err = tape.conv2d(x, k, b, 1, 0).unwrap_err();
        assert!(err.to_string().contains("channel mismatch"), "{err}");
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).data()[0], 0.5);

        let big = tape.constant(Tensor::from_vec(&[2], vec![500.0, -500.0]).unwrap());
        let sb = tape.sigmoid(big);
        let d = tape.value(sb).data();
        assert_eq!(d[0], 1.0 - SIGMOID_CLAMP);
        assert_eq!(d[1], SIGMOID_CLAMP);
        assert!(d[0] < 1.0 && d[1] > 0.0);
    }

    #[test]
    fn fully_connected_identity_and_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let eye = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        let w = tape.constant(eye);
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.fully_connected(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let w0 = tape.constant(Tensor::zeros(&[2, 4]));
        let bb = tape.constant(Tensor::from_vec(&[2], vec![7.0, -3.0]).unwrap());
        let z = tape.fully_connected(x, w0, bb).unwrap();
        assert_eq!(tape.value(z).data(), &[7.0, -3.0]);
    }

    #[test]
    fn fully_connected_matches_loop_oracle() {
        let x = seeded(&[8], 11);
        let w = seeded(&[3, 8], 12);
        let b = seeded(&[3], 13);
        let mut expected = [0.0; 3];
        for i in 0..3 {
            expected[i] = b.data()[i];
            for j in 0..8 {
                expected[i] += w.data()[i * 8 + j] * x.data()[j];
            }
        }
        let mut tape = Tape::new();
        let (xv, wv, bv) = (
            tape.constant(x),
            tape.constant(w),
            tape.constant(b),
        );
        let y = tape.fully_connected(xv, wv, bv).unwrap();
        for (a, e) in tape.value(y).data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn fully_connected_length_mismatch_is_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[5]));
        let w = tape.constant(Tensor::zeros(&[2, 4]));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.fully_connected(x, w, b).is_err());
    }

    #[test]
    fn upsample_replicates_blocks() {
        let mut tape = Tape::new();
        let x = tape.constant(t3(1, 1, 1, vec![3.0]));
        let y = tape.upsample_nearest2(x).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 2, 1]);
        assert!(tape.value(y).data().iter().all(|&v| v == 3.0));

        let x2 = tape.var(t3(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]));
        let y2 = tape.upsample_nearest2(x2).unwrap();
        let v = tape.value(y2);
        assert_eq!(v.at3(0, 0, 0), 1.0);
        assert_eq!(v.at3(0, 1, 0), 1.0);
        assert_eq!(v.at3(0, 2, 0), 2.0);
        assert_eq!(v.at3(3, 3, 0), 4.0);

        // d(sum of output)/d(input) = 4 everywhere: each input feeds 4 cells.
        let s = tape.sum(y2);
        tape.backward(s).unwrap();
        assert!(tape.grad(x2).unwrap().data().iter().all(|&g| g == 4.0));
    }

    #[test]
    fn maxpool_value_ties_and_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(t3(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]));
        let y = tape.maxpool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);

        let c = tape.constant(Tensor::filled(&[4, 4, 2], 0.7));
        let yc = tape.maxpool2(c).unwrap();
        assert_eq!(tape.value(yc).shape(), &[2, 2, 2]);
        assert!(tape.value(yc).data().iter().all(|&v| v == 0.7));

        let odd = tape.constant(Tensor::zeros(&[3, 4, 1]));
        assert!(tape.maxpool2(odd).is_err());
    }

    #[test]
    fn maxpool_tie_routes_gradient_to_first_in_scan_order() {
        let mut tape = Tape::new();
        let x = tape.var(t3(2, 2, 1, vec![5.0, 5.0, 5.0, 5.0]));
        let y = tape.maxpool2(x).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_sum_gives_ones_and_norm_gives_2p() {
        let mut tape = Tape::new();
        let p = tape.var(Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(p).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let p = tape.var(Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = tape.square(p);
        let n = tape.sum(sq);
        tape.backward(n).unwrap();
        assert_eq!(tape.grad(p).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let p = tape.var(Tensor::zeros(&[2]));
        let y = tape.relu(p);
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn fanout_accumulates_k_fold() {
        // p used 3 times: s = sum(p) + sum(p) + sum(p) -> grad = 3.
        let mut tape = Tape::new();
        let p = tape.var(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let s1 = tape.sum(p);
        let s2 = tape.sum(p);
        let s3 = tape.sum(p);
        let t = tape.add(s1, s2).unwrap();
        let root = tape.add(t, s3).unwrap();
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(p).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let p = tape.var(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(p).unwrap().data(), &[2.0, 2.0]);
        tape.zero_grads();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(p).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn total_variation_values() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::filled(&[5, 4, 3], 0.3));
        let tv = tape.total_variation(c).unwrap();
        assert_eq!(tape.value(tv).data()[0], 0.0);

        // [[0,1],[0,1]]: two horizontal unit jumps, squared.
        let x = tape.constant(t3(2, 2, 1, vec![0.0, 1.0, 0.0, 1.0]));
        let tv = tape.total_variation(x).unwrap();
        assert_eq!(tape.value(tv).data()[0], 2.0);
    }

    #[test]
    fn patch_ssd_matches_hand_count() {
        // Map with two distinct 1x1 patches (radius 0).
        let mut tape = Tape::new();
        let m = tape.constant(t3(2, 2, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let s = tape.patch_ssd(m, &[((0, 0), (1, 1))], 0).unwrap();
        // (1-7)^2 + (2-8)^2 = 72
        assert_eq!(tape.value(s).data()[0], 72.0);

        let err = tape.patch_ssd(m, &[((0, 0), (1, 1))], 1);
        assert!(err.is_err());
    }

    #[test]
    fn crop_extracts_and_backward_scatters() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::from_fn(&[4, 4, 1], |i| i as f64));
        let y = tape.crop(x, 1, 2, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[6.0, 7.0, 10.0, 11.0]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        let g = tape.grad(x).unwrap();
        let mut want = [0.0; 16];
        for i in [6, 7, 10, 11] {
            want[i] = 1.0;
        }
        assert_eq!(g.data(), &want[..]);
    }

    #[test]
    fn ln_rejects_non_positive() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[2], vec![0.5, -0.1]).unwrap());
        assert!(tape.ln(x).is_err());
    }
}
