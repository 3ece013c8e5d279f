//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Operations are recorded in execution order on a [`Tape`]; [`Tape::backward`]
//! walks the tape in reverse and accumulates gradients into every input that
//! requires one. Accumulation order is fixed by the recording order, so two
//! replays of the same graph produce bit-identical gradients.
//!
//! Only first-order derivatives are supported. Quantities that are themselves
//! gradients (such as the dissimilarity gradient inside the unrolled solver)
//! are written as compositions of the primitives here, so training can
//! back-propagate through them with ordinary first-order rules.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels;
use crate::real::{lit, Real};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Square(Var),
    Scale(Var, T),
    AddScalar(Var),
    Sqrt(Var),
    ClampMin(Var, T),
    Sum(Var),
    Mean(Var),
    Conv2d { input: Var, weight: Var, bias: Var },
    LeakyRelu(Var, T),
    AvgPool2(Var),
    Upsample2(Var, T),
    Warp { image: Var, disp: Var },
    WarpSlope { image: Var, disp: Var },
    SpatialGrad(Var),
    BoxMean(Var, usize),
    BoxMeanT(Var, usize),
    Concat(Vec<Var>),
    Channels(Var, usize),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records tensor operations for reverse-mode differentiation.
///
/// An inference tape ([`Tape::inference`]) computes the same values but keeps
/// no backward information.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    recording: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
///
/// Only leaves retain their gradient; intermediate gradients are released as
/// the backward sweep passes them.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` if `v` did not influence the root.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    /// A tape that records backward information.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that only evaluates values.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers an input. Gradients are tracked only on recording tapes.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.recording;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn binary(&self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            ta.zip_map(tb, op, f)
        } else if tb.numel() == 1 {
            let s = tb.data()[0];
            Ok(ta.map(|x| f(x, s)))
        } else if ta.numel() == 1 {
            let s = ta.data()[0];
            Ok(tb.map(|x| f(s, x)))
        } else {
            Err(Error::ShapeMismatch {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            })
        }
    }

    // -- elementwise -------------------------------------------------------

    /// Elementwise sum. Tensor-tensor operands must have identical shapes; a
    /// one-element operand broadcasts as a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Elementwise quotient; any exactly-zero divisor is an error.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|v| v.is_zero()) {
            return Err(Error::DivisionByZero { op: "div" });
        }
        let out = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(out, Op::Div(a, b), &[a, b]))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| -x);
        self.push(out, Op::Neg(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a), &[a])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v <= T::zero()) {
            return Err(Error::DivisionByZero { op: "sqrt" });
        }
        let out = self.value(a).map(|x| x.sqrt());
        Ok(self.push(out, Op::Sqrt(a), &[a]))
    }

    /// `max(a, floor)` elementwise.
    pub fn clamp_min(&mut self, a: Var, floor: T) -> Var {
        let out = self.value(a).map(|x| x.max(floor));
        self.push(out, Op::ClampMin(a, floor), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        self.push(out, Op::Mean(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let out = self.value(a).map(|x| if x >= T::zero() { x } else { x * slope });
        self.push(out, Op::LeakyRelu(a, slope), &[a])
    }

    // -- image operators ---------------------------------------------------

    /// 3x3 convolution (cross-correlation), stride 1, zero padding 1.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (ci, h, w) = self.value(input).chw()?;
        let ws = self.value(weight).shape().to_vec();
        if ws.len() != 4 || ws[2] != 3 || ws[3] != 3 {
            return Err(Error::InvalidShape {
                shape: ws,
                reason: "conv2d weights must be [C_out, C_in, 3, 3]",
            });
        }
        if ws[1] != ci {
            return Err(Error::ChannelMismatch {
                op: "conv2d",
                expected: ws[1],
                got: ci,
            });
        }
        let co = ws[0];
        if self.value(bias).shape() != [co] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: vec![co],
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            (ci, h, w),
            self.value(weight).data(),
            self.value(bias).data(),
            co,
        );
        let out = Tensor::from_parts(vec![co, h, w], out);
        Ok(self.push(out, Op::Conv2d { input, weight, bias }, &[input, weight, bias]))
    }

    /// Non-overlapping 2x2 mean pooling; height and width must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let dims @ (c, h, w) = self.value(x).chw()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidShape {
                shape: vec![c, h, w],
                reason: "avg_pool2 needs even height and width",
            });
        }
        let out = kernels::avg_pool2_forward(self.value(x).data(), dims);
        let out = Tensor::from_parts(vec![c, h / 2, w / 2], out);
        Ok(self.push(out, Op::AvgPool2(x), &[x]))
    }

    /// x2 linear upsampling (output `2i` sits on input `i`, corners aligned),
    /// followed by multiplication with `value_scale`.
    pub fn upsample_linear2(&mut self, x: Var, value_scale: T) -> Result<Var> {
        let dims @ (c, h, w) = self.value(x).chw()?;
        let out = kernels::upsample2_forward(self.value(x).data(), dims, value_scale);
        let out = Tensor::from_parts(vec![c, 2 * h, 2 * w], out);
        Ok(self.push(out, Op::Upsample2(x, value_scale), &[x]))
    }

    fn check_warp_operands(&self, image: Var, disp: Var, op: &'static str) -> Result<(usize, usize, usize)> {
        let dims @ (_, h, w) = self.value(image).chw()?;
        let ds = self.value(disp).shape();
        if ds != [2, h, w] {
            return Err(Error::ShapeMismatch {
                op,
                lhs: vec![2, h, w],
                rhs: ds.to_vec(),
            });
        }
        Ok(dims)
    }

    /// Samples every channel of `image` at `x + disp(x)` bilinearly, clamping
    /// sample coordinates to the image border. Channel 0 of `disp` moves along
    /// rows, channel 1 along columns, in pixels.
    pub fn warp_bilinear(&mut self, image: Var, disp: Var) -> Result<Var> {
        let dims @ (c, h, w) = self.check_warp_operands(image, disp, "warp_bilinear")?;
        let out = kernels::warp_forward(self.value(image).data(), dims, self.value(disp).data());
        let out = Tensor::from_parts(vec![c, h, w], out);
        Ok(self.push(out, Op::Warp { image, disp }, &[image, disp]))
    }

    /// Exact derivative of [`Tape::warp_bilinear`] with respect to the sample
    /// position: `[2C, H, W]`, row derivative then column derivative per channel.
    /// Zero along an axis where the sample coordinate is clamped.
    pub fn warp_slope(&mut self, image: Var, disp: Var) -> Result<Var> {
        let dims @ (c, h, w) = self.check_warp_operands(image, disp, "warp_slope")?;
        let out = kernels::warp_slope_forward(self.value(image).data(), dims, self.value(disp).data());
        let out = Tensor::from_parts(vec![2 * c, h, w], out);
        Ok(self.push(out, Op::WarpSlope { image, disp }, &[image, disp]))
    }

    /// Central differences in the interior, one-sided at borders:
    /// `[C, H, W] -> [2C, H, W]` with (d/d row, d/d col) per input channel.
    pub fn spatial_gradient(&mut self, x: Var) -> Result<Var> {
        let dims @ (c, h, w) = self.value(x).chw()?;
        if h < 2 || w < 2 {
            return Err(Error::InvalidShape {
                shape: vec![c, h, w],
                reason: "spatial gradient needs at least 2x2 pixels",
            });
        }
        let out = kernels::spatial_grad_forward(self.value(x).data(), dims);
        let out = Tensor::from_parts(vec![2 * c, h, w], out);
        Ok(self.push(out, Op::SpatialGrad(x), &[x]))
    }

    /// Mean over the in-image part of a `window x window` neighbourhood.
    pub fn box_mean(&mut self, x: Var, window: usize) -> Result<Var> {
        let out = self.box_values(x, window, false)?;
        Ok(self.push(out, Op::BoxMean(x, window), &[x]))
    }

    /// Adjoint of [`Tape::box_mean`].
    pub fn box_mean_transpose(&mut self, x: Var, window: usize) -> Result<Var> {
        let out = self.box_values(x, window, true)?;
        Ok(self.push(out, Op::BoxMeanT(x, window), &[x]))
    }

    fn box_values(&self, x: Var, window: usize, transpose: bool) -> Result<Tensor<T>> {
        let dims @ (c, h, w) = self.value(x).chw()?;
        if window.is_multiple_of(2) {
            return Err(Error::InvalidConfig(alloc::format!(
                "box window must be odd, got {window}"
            )));
        }
        let out = kernels::box_mean(self.value(x).data(), dims, window, transpose);
        Ok(Tensor::from_parts(vec![c, h, w], out))
    }

    /// Concatenates `[C_i, H, W]` tensors along channels.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::InvalidShape {
            shape: vec![],
            reason: "concat of nothing",
        })?;
        let (_, h, w) = self.value(first).chw()?;
        let mut total = 0;
        for &p in parts {
            let (c, ph, pw) = self.value(p).chw()?;
            if (ph, pw) != (h, w) {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            total += c;
        }
        let mut data = Vec::with_capacity(total * h * w);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::from_parts(vec![total, h, w], data);
        Ok(self.push(out, Op::Concat(parts.to_vec()), parts))
    }

    /// Channels `[start, start + len)` of a `[C, H, W]` tensor.
    pub fn channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).channels(start, len)?;
        Ok(self.push(out, Op::Channels(x, start), &[x]))
    }

    // -- backward ----------------------------------------------------------

    /// Back-propagates from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::ones(root_value.shape()));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.accumulate(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Reduces an output-shaped contribution onto a (possibly broadcast) input.
    fn fit(&self, v: Var, contrib: Tensor<T>) -> Tensor<T> {
        let shape = self.value(v).shape();
        if shape == contrib.shape() {
            contrib
        } else {
            Tensor::from_parts(shape.to_vec(), vec![contrib.sum()])
        }
    }

    /// Broadcast-aware elementwise product `g * value(v)` over the output shape.
    fn times(g: &Tensor<T>, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
        if other.shape() == g.shape() {
            Tensor::from_parts(
                g.shape().to_vec(),
                g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect(),
            )
        } else {
            let s = other.data()[0];
            g.map(|a| f(a, s))
        }
    }

    fn broadcast_value(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        let t = self.value(v);
        if t.shape() == shape {
            t.clone()
        } else {
            Tensor::full(shape, t.data()[0])
        }
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.accumulate(grads, a, self.fit(a, g.clone()));
                self.accumulate(grads, b, self.fit(b, g.clone()));
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, self.fit(a, g.clone()));
                self.accumulate(grads, b, self.fit(b, g.map(|x| -x)));
            }
            &Op::Mul(a, b) => {
                if self.requires_grad(a) {
                    let c = Self::times(g, self.value(b), |x, y| x * y);
                    self.accumulate(grads, a, self.fit(a, c));
                }
                if self.requires_grad(b) {
                    let c = Self::times(g, self.value(a), |x, y| x * y);
                    self.accumulate(grads, b, self.fit(b, c));
                }
            }
            &Op::Div(a, b) => {
                if self.requires_grad(a) {
                    let c = Self::times(g, self.value(b), |x, y| x / y);
                    self.accumulate(grads, a, self.fit(a, c));
                }
                if self.requires_grad(b) {
                    // d(a/b)/db = -(a/b)/b = -out/b
                    let bv = self.broadcast_value(b, out.shape());
                    let c = Tensor::from_parts(
                        out.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(out.data())
                            .zip(bv.data())
                            .map(|((&gg, &o), &bb)| -gg * o / bb)
                            .collect(),
                    );
                    self.accumulate(grads, b, self.fit(b, c));
                }
            }
            &Op::Neg(a) => self.accumulate(grads, a, g.map(|x| -x)),
            &Op::Square(a) => {
                let two = lit::<T>(2.0);
                let c = Self::times(g, self.value(a), |x, y| x * two * y);
                self.accumulate(grads, a, c);
            }
            &Op::Scale(a, c) => self.accumulate(grads, a, g.map(|x| x * c)),
            &Op::AddScalar(a) => self.accumulate(grads, a, g.clone()),
            &Op::Sqrt(a) => {
                let half = lit::<T>(0.5);
                let c = Self::times(g, out, |x, y| x * half / y);
                self.accumulate(grads, a, c);
            }
            &Op::ClampMin(a, floor) => {
                let c = Self::times(g, self.value(a), |x, y| if y >= floor { x } else { T::zero() });
                self.accumulate(grads, a, c);
            }
            &Op::Sum(a) => {
                let s = g.item();
                self.accumulate(grads, a, Tensor::full(self.value(a).shape(), s));
            }
            &Op::Mean(a) => {
                let t = self.value(a);
                let s = g.item() / T::from_f64(t.numel() as f64);
                self.accumulate(grads, a, Tensor::full(t.shape(), s));
            }
            &Op::LeakyRelu(a, slope) => {
                let c = Self::times(g, self.value(a), |x, y| if y >= T::zero() { x } else { x * slope });
                self.accumulate(grads, a, c);
            }
            &Op::Conv2d { input, weight, bias } => {
                let iv = self.value(input);
                let wv = self.value(weight);
                let dims = iv.chw().expect("validated in forward");
                let co = wv.shape()[0];
                let cg = kernels::conv2d_backward(
                    iv.data(),
                    dims,
                    wv.data(),
                    co,
                    g.data(),
                    self.requires_grad(input),
                    self.requires_grad(weight),
                    self.requires_grad(bias),
                );
                if let Some(gi) = cg.input {
                    self.accumulate(grads, input, Tensor::from_parts(iv.shape().to_vec(), gi));
                }
                if let Some(gw) = cg.weight {
                    self.accumulate(grads, weight, Tensor::from_parts(wv.shape().to_vec(), gw));
                }
                if let Some(gb) = cg.bias {
                    self.accumulate(grads, bias, Tensor::from_parts(vec![co], gb));
                }
            }
            &Op::AvgPool2(a) => {
                let t = self.value(a);
                let gi = kernels::avg_pool2_backward(g.data(), t.chw().expect("validated"));
                self.accumulate(grads, a, Tensor::from_parts(t.shape().to_vec(), gi));
            }
            &Op::Upsample2(a, scale) => {
                let t = self.value(a);
                let gi = kernels::upsample2_backward(g.data(), t.chw().expect("validated"), scale);
                self.accumulate(grads, a, Tensor::from_parts(t.shape().to_vec(), gi));
            }
            &Op::Warp { image, disp } => {
                let iv = self.value(image);
                let (gi, gd) = kernels::warp_backward(
                    iv.data(),
                    iv.chw().expect("validated"),
                    self.value(disp).data(),
                    g.data(),
                    self.requires_grad(image),
                    self.requires_grad(disp),
                );
                if let Some(gi) = gi {
                    self.accumulate(grads, image, Tensor::from_parts(iv.shape().to_vec(), gi));
                }
                if let Some(gd) = gd {
                    self.accumulate(grads, disp, Tensor::from_parts(self.value(disp).shape().to_vec(), gd));
                }
            }
            &Op::WarpSlope { image, disp } => {
                let iv = self.value(image);
                let (gi, gd) = kernels::warp_slope_backward(
                    iv.data(),
                    iv.chw().expect("validated"),
                    self.value(disp).data(),
                    g.data(),
                    self.requires_grad(image),
                    self.requires_grad(disp),
                );
                if let Some(gi) = gi {
                    self.accumulate(grads, image, Tensor::from_parts(iv.shape().to_vec(), gi));
                }
                if let Some(gd) = gd {
                    self.accumulate(grads, disp, Tensor::from_parts(self.value(disp).shape().to_vec(), gd));
                }
            }
            &Op::SpatialGrad(a) => {
                let t = self.value(a);
                let gi = kernels::spatial_grad_backward(g.data(), t.chw().expect("validated"));
                self.accumulate(grads, a, Tensor::from_parts(t.shape().to_vec(), gi));
            }
            &Op::BoxMean(a, window) | &Op::BoxMeanT(a, window) => {
                let transpose = matches!(node.op, Op::BoxMean(..));
                let t = self.value(a);
                let gi = kernels::box_mean(g.data(), t.chw().expect("validated"), window, transpose);
                self.accumulate(grads, a, Tensor::from_parts(t.shape().to_vec(), gi));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.requires_grad(p) {
                        let gp = g.data()[offset..offset + n].to_vec();
                        self.accumulate(grads, p, Tensor::from_parts(self.value(p).shape().to_vec(), gp));
                    }
                    offset += n;
                }
            }
            &Op::Channels(a, start) => {
                let t = self.value(a);
                let mut gi = Tensor::zeros(t.shape());
                let (_, h, w) = t.chw().expect("validated");
                let off = start * h * w;
                gi.data_mut()[off..off + g.numel()].copy_from_slice(g.data());
                self.accumulate(grads, a, gi);
            }
        }
    }
}

/// A named learnable tensor with its gradient accumulator.
///
/// Gradients are only cleared by [`Parameter::zero_grad`].
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(T::zero());
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    /// Adds a gradient contribution of matching shape.
    pub fn accumulate_grad(&mut self, g: &Tensor<T>) -> Result<()> {
        self.grad.expect_same_shape(g, "accumulate_grad")?;
        self.grad.accumulate(g);
        Ok(())
    }
}
