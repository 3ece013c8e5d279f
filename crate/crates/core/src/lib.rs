//! Deformable image registration by unrolled, multi-resolution gradient descent.
//!
//! The forward pass alternates explicit image-dissimilarity gradient steps with
//! steps predicted by a small CNN, coarse to fine, and the whole pass is recorded
//! on a reverse-mode tape so the step sizes and CNN weights can be trained
//! end-to-end from a self-supervised loss.
//!
//! This crate is `no_std` (it needs `alloc`). File formats, synthetic data and
//! the command-line tool live in the `gradirn` crate.

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod error;
pub mod evaluation;
mod kernels;
pub mod real;
pub mod registration;
pub mod regularizer;
pub mod similarity;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod transform;

pub use crate::error::{Error, Result};
pub use crate::evaluation::{dice, hausdorff, hausdorff_percentile, warp_labels, LabelMask};
pub use crate::real::{DType, Real};
pub use crate::registration::{
    build_pyramid, forward_register, register_pair, RegistrationConfig, RegistrationOutcome, RegistrationParams,
    TrajectoryDump, TrajectoryEntry, Variant,
};
pub use crate::regularizer::{diffusion_gradient, diffusion_penalty, RegularizerCnn, StepSizes};
pub use crate::similarity::{dissimilarity, dissimilarity_gradient, SimilarityKind};
pub use crate::tape::{Gradients, Parameter, Tape, Var};
pub use crate::tensor::Tensor;
pub use crate::training::{adam_step, loss, AdamState, TrainConfig, Trainer};
pub use crate::transform::{jacobian_determinant, jacobian_stats, DisplacementField, JacobianStats};
