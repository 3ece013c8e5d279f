//! Regularization: the analytic diffusion penalty and the learned CNN
//! regularizer step.

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels;
use crate::real::{lit, Real};
use crate::tape::{Parameter, Tape, Var};
use crate::tensor::Tensor;

/// Recorded `(1/|grid|) * sum_x |grad u(x)|^2` using central differences.
pub fn diffusion_penalty<T: Real>(tape: &mut Tape<T>, field: Var) -> Result<Var> {
    let (_, h, w) = tape.value(field).chw()?;
    let g = tape.spatial_gradient(field)?;
    let sq = tape.square(g);
    let total = tape.sum(sq);
    Ok(tape.scale(total, lit(1.0 / (h * w) as f64)))
}

/// Diffusion penalty of a `[2, H, W]` field, evaluated without recording.
pub fn diffusion_penalty_value<T: Real>(field: &Tensor<T>) -> Result<T> {
    let mut tape = Tape::inference();
    let v = tape.constant(field.clone());
    let p = diffusion_penalty(&mut tape, v)?;
    Ok(tape.value(p).item())
}

/// Closed-form gradient of [`diffusion_penalty`]: `(2/|grid|) G^T G u`, where
/// `G` is the central-difference operator. `-G^T G` is the Laplacian stencil
/// matching that operator, with its border rows realising the one-sided
/// (replicate) boundary.
pub fn diffusion_gradient<T: Real>(field: &Tensor<T>) -> Result<Tensor<T>> {
    let dims @ (c, h, w) = field.chw()?;
    if h < 2 || w < 2 {
        return Err(Error::InvalidShape {
            shape: field.shape().to_vec(),
            reason: "diffusion gradient needs at least 2x2 pixels",
        });
    }
    let g = kernels::spatial_grad_forward(field.data(), dims);
    let mut out = kernels::spatial_grad_backward(&g, dims);
    let k = lit::<T>(2.0 / (h * w) as f64);
    for v in &mut out {
        *v = *v * k;
    }
    Tensor::new(alloc::vec![c, h, w], out)
}

/// Input channels of the regularizer CNN: field (2), moving (1), fixed (1).
pub const CNN_INPUT_CHANNELS: usize = 4;
pub const CNN_HIDDEN_CHANNELS: usize = 32;
pub const CNN_LAYERS: usize = 5;
pub const LEAKY_SLOPE: f64 = 0.2;

/// Learnable scalars in one [`RegularizerCnn`].
pub const fn cnn_parameter_count() -> usize {
    let first = CNN_INPUT_CHANNELS * CNN_HIDDEN_CHANNELS * 9 + CNN_HIDDEN_CHANNELS;
    let middle = CNN_HIDDEN_CHANNELS * CNN_HIDDEN_CHANNELS * 9 + CNN_HIDDEN_CHANNELS;
    let last = CNN_HIDDEN_CHANNELS * 2 * 9 + 2;
    first + (CNN_LAYERS - 2) * middle + last
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
}

/// Five 3x3 conv layers (4 -> 32 -> 32 -> 32 -> 32 -> 2) with LeakyReLU after
/// the first four. Its output is the learned regularizer gradient step.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularizerCnn<T> {
    pub layers: Vec<ConvLayer<T>>,
    pub slope: T,
}

impl<T: Real> RegularizerCnn<T> {
    /// Layer shapes `(out, in)` in order.
    pub fn layer_shapes() -> [(usize, usize); CNN_LAYERS] {
        [
            (CNN_HIDDEN_CHANNELS, CNN_INPUT_CHANNELS),
            (CNN_HIDDEN_CHANNELS, CNN_HIDDEN_CHANNELS),
            (CNN_HIDDEN_CHANNELS, CNN_HIDDEN_CHANNELS),
            (CNN_HIDDEN_CHANNELS, CNN_HIDDEN_CHANNELS),
            (2, CNN_HIDDEN_CHANNELS),
        ]
    }

    /// Fan-in scaled uniform init for layers 1-4 (LeakyReLU gain), zero biases,
    /// and an all-zero final layer so the initial step is exactly zero.
    pub fn init(index: usize, rng: &mut impl Rng) -> Self {
        let slope = LEAKY_SLOPE;
        let gain = Float::sqrt(2.0 / (1.0 + slope * slope));
        let layers = Self::layer_shapes()
            .iter()
            .enumerate()
            .map(|(k, &(co, ci))| {
                let fan_in = (ci * 9) as f64;
                let bound = gain * Float::sqrt(3.0 / fan_in);
                let last = k + 1 == CNN_LAYERS;
                let weight = Tensor::from_fn(&[co, ci, 3, 3], |_| {
                    if last {
                        T::zero()
                    } else {
                        T::from_f64(rng.random_range(-bound..bound))
                    }
                });
                ConvLayer {
                    weight: Parameter::new(format!("cnn{index}.layer{}.weight", k + 1), weight),
                    bias: Parameter::new(format!("cnn{index}.layer{}.bias", k + 1), Tensor::zeros(&[co])),
                }
            })
            .collect();
        Self {
            layers,
            slope: lit(slope),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.numel() + l.bias.numel()).sum()
    }

    pub fn parameters(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    /// Records the weights as tape leaves.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundCnn<T> {
        BoundCnn {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    (
                        tape.leaf(l.weight.value.clone(), true),
                        tape.leaf(l.bias.value.clone(), true),
                    )
                })
                .collect(),
            slope: self.slope,
        }
    }
}

/// Tape handles of a [`RegularizerCnn`]'s weights.
#[derive(Debug, Clone)]
pub struct BoundCnn<T> {
    pub layers: Vec<(Var, Var)>,
    pub slope: T,
}

/// Recorded CNN regularizer step: `[field, moving, fixed] -> [2, H, W]`.
pub fn cnn_step<T: Real>(tape: &mut Tape<T>, net: &BoundCnn<T>, field: Var, moving: Var, fixed: Var) -> Result<Var> {
    let fs = tape.value(field).shape().to_vec();
    let (c, h, w) = tape.value(field).chw()?;
    if c != 2 {
        return Err(Error::ChannelMismatch {
            op: "cnn_step field",
            expected: 2,
            got: c,
        });
    }
    for img in [moving, fixed] {
        if tape.value(img).shape() != [1, h, w] {
            return Err(Error::ShapeMismatch {
                op: "cnn_step",
                lhs: fs,
                rhs: tape.value(img).shape().to_vec(),
            });
        }
    }
    let mut x = tape.concat(&[field, moving, fixed])?;
    let last = net.layers.len() - 1;
    for (k, &(weight, bias)) in net.layers.iter().enumerate() {
        x = tape.conv2d(x, weight, bias)?;
        if k != last {
            x = tape.leaky_relu(x, net.slope);
        }
    }
    Ok(x)
}

/// Per-step learnable step sizes, indexed globally across resolution levels.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSizes<T> {
    pub tau: Vec<Parameter<T>>,
}

impl<T: Real> StepSizes<T> {
    pub fn new(total_steps: usize, init: T) -> Self {
        Self {
            tau: (1..=total_steps)
                .map(|t| Parameter::new(format!("tau.{t}"), Tensor::scalar(init)))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.tau {
            if !p.value.all_finite() {
                return Err(Error::ParameterMismatch(format!("{} is not finite", p.name)));
            }
        }
        Ok(())
    }
}
