//! The unrolled, multi-resolution registration solver.
//!
//! Starting from the identity at the coarsest level, each level runs a fixed
//! number of update steps and the field is then upsampled to the next level:
//!
//! ```text
//! phi <- phi - tau_t * (grad_D(phi) + cnn_n(phi, moving_n, fixed_n))
//! ```
//!
//! `grad_D` is used as a gradient density (the discrete gradient of the
//! mean-normalized dissimilarity times the pixel count of the level), which
//! keeps its per-pixel magnitude independent of the level resolution. One CNN
//! is shared by all steps of a level; step sizes are per step.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::real::{lit, Real};
use crate::regularizer::{cnn_step, diffusion_gradient, BoundCnn, RegularizerCnn, StepSizes};
use crate::similarity::{dissimilarity_gradient, warped_dissimilarity, SimilarityKind};
use crate::tape::{Gradients, Parameter, Tape, Var};
use crate::tensor::Tensor;
use crate::transform::{compose, jacobian_stats, upsample_field, DisplacementField, JacobianStats};

/// Which update rule the unrolled solver uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Dissimilarity gradient plus learned CNN step, scaled by learned `tau_t`.
    Vn,
    /// Learned CNN step only.
    VnNoGrad,
    /// Recursive cascade: CNN on the warped moving image, increments composed.
    RcCnn,
    /// Classic gradient descent on dissimilarity plus diffusion; nothing learned.
    PlainGd,
}

impl Variant {
    pub fn is_learnable(self) -> bool {
        !matches!(self, Variant::PlainGd)
    }

    pub fn uses_tau(self) -> bool {
        matches!(self, Variant::Vn | Variant::VnNoGrad)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationConfig {
    pub variant: Variant,
    /// Number of resolution levels N.
    pub levels: usize,
    /// Update steps per level T_n.
    pub steps_per_level: usize,
    pub similarity: SimilarityKind,
    /// Weight of the diffusion term in the training loss.
    pub lambda: f64,
    /// Weight of the diffusion gradient in plain gradient descent.
    pub alpha: f64,
    /// Step size of plain gradient descent.
    pub plain_gd_step: f64,
    pub dump_intermediate: bool,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Vn,
            levels: 3,
            steps_per_level: 3,
            similarity: SimilarityKind::Ssd,
            lambda: 0.05,
            alpha: 0.01,
            plain_gd_step: 1e-2,
            dump_intermediate: false,
        }
    }
}

impl RegistrationConfig {
    pub fn total_steps(&self) -> usize {
        self.levels * self.steps_per_level
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::InvalidConfig("at least one resolution level is required".into()));
        }
        if self.steps_per_level == 0 {
            return Err(Error::InvalidConfig("at least one step per level is required".into()));
        }
        if !(self.lambda >= 0.0) || !(self.alpha >= 0.0) {
            return Err(Error::InvalidConfig("lambda and alpha must be nonnegative".into()));
        }
        if !self.plain_gd_step.is_finite() {
            return Err(Error::InvalidConfig("plain_gd_step must be finite".into()));
        }
        self.similarity.validate()?;
        Ok(())
    }

    /// Images must be `[1, H, W]` with sides divisible by `2^(levels - 1)`.
    pub fn check_image(&self, shape: &[usize]) -> Result<(usize, usize)> {
        let [1, h, w] = shape[..] else {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: "images must be [1, H, W]",
            });
        };
        let f = 1usize << (self.levels - 1);
        if h % f != 0 || w % f != 0 {
            return Err(Error::InvalidConfig(format!(
                "image {h}x{w} is not divisible by {f} for {} levels",
                self.levels
            )));
        }
        Ok((h, w))
    }
}

/// Learnable state: one CNN per level plus one step size per unrolled step.
#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationParams<T> {
    pub cnns: Vec<RegularizerCnn<T>>,
    pub step_sizes: StepSizes<T>,
}

/// Default initial step size. With the gradient density formulation the
/// dissimilarity gradient of a typical edge moves the field by a useful
/// fraction of the residual at this scale.
pub const DEFAULT_TAU_INIT: f64 = 1.0;

impl<T: Real> RegistrationParams<T> {
    pub fn init(cfg: &RegistrationConfig, tau_init: f64, seed: u64) -> Self {
        Self::with_shape(cfg.levels, cfg.steps_per_level, tau_init, seed)
    }

    pub fn with_shape(levels: usize, steps_per_level: usize, tau_init: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            cnns: (0..levels).map(|n| RegularizerCnn::init(n, &mut rng)).collect(),
            step_sizes: StepSizes::new(levels * steps_per_level, lit(tau_init)),
        }
    }

    /// An empty parameter set (zero levels).
    pub fn empty() -> Self {
        Self {
            cnns: Vec::new(),
            step_sizes: StepSizes { tau: Vec::new() },
        }
    }

    /// All parameters in canonical order: CNNs by level and layer, then step sizes.
    pub fn parameters(&self) -> Vec<&Parameter<T>> {
        self.cnns
            .iter()
            .flat_map(|c| c.parameters())
            .chain(self.step_sizes.tau.iter())
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let (cnns, taus) = (&mut self.cnns, &mut self.step_sizes.tau);
        cnns.iter_mut()
            .flat_map(|c| c.parameters_mut())
            .chain(taus.iter_mut())
            .collect()
    }

    /// Total learnable scalars across all CNNs and step sizes.
    pub fn count_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.parameters_mut() {
            p.zero_grad();
        }
    }

    pub fn check_against(&self, cfg: &RegistrationConfig) -> Result<()> {
        if !cfg.variant.is_learnable() {
            return Ok(());
        }
        if self.cnns.len() != cfg.levels {
            return Err(Error::ParameterMismatch(format!(
                "{} CNNs for {} levels",
                self.cnns.len(),
                cfg.levels
            )));
        }
        if self.step_sizes.len() != cfg.total_steps() {
            return Err(Error::ParameterMismatch(format!(
                "{} step sizes for {} steps",
                self.step_sizes.len(),
                cfg.total_steps()
            )));
        }
        self.step_sizes.validate()
    }

    /// Records all parameters as tape leaves. Step sizes only receive
    /// gradients when `train_tau` is set.
    pub fn bind(&self, tape: &mut Tape<T>, train_tau: bool) -> BoundParams<T> {
        BoundParams {
            cnns: self.cnns.iter().map(|c| c.bind(tape)).collect(),
            tau: self
                .step_sizes
                .tau
                .iter()
                .map(|p| tape.leaf(p.value.clone(), train_tau))
                .collect(),
        }
    }

    /// Adds the gradients of the bound leaves into the parameter accumulators.
    pub fn accumulate_grads(&mut self, bound: &BoundParams<T>, grads: &Gradients<T>) -> Result<()> {
        let vars: Vec<Var> = bound
            .cnns
            .iter()
            .flat_map(|c| c.layers.iter().flat_map(|&(w, b)| [w, b]))
            .chain(bound.tau.iter().copied())
            .collect();
        for (p, v) in self.parameters_mut().into_iter().zip(vars) {
            if let Some(g) = grads.get(v) {
                p.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

/// Tape handles for [`RegistrationParams`].
#[derive(Debug, Clone)]
pub struct BoundParams<T> {
    pub cnns: Vec<BoundCnn<T>>,
    pub tau: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEntry<T> {
    /// Global step index; 0 is the initial identity field.
    pub step: usize,
    pub level: usize,
    pub field: DisplacementField<T>,
    /// Dissimilarity between the level's warped moving and fixed images.
    pub dissimilarity: T,
}

/// Snapshots of the field after every unrolled step (T + 1 entries).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryDump<T> {
    pub entries: Vec<TrajectoryEntry<T>>,
}

/// Average-pooled pyramid of a `[1, H, W]` image, ordered coarse to fine.
pub fn build_pyramid<T: Real>(tape: &mut Tape<T>, image: Var, levels: usize) -> Result<Vec<Var>> {
    if levels == 0 {
        return Err(Error::InvalidConfig("pyramid needs at least one level".into()));
    }
    let (_, h, w) = tape.value(image).chw()?;
    let f = 1usize << (levels - 1);
    if h % f != 0 || w % f != 0 {
        return Err(Error::InvalidConfig(format!(
            "image {h}x{w} is not divisible by {f} for {levels} levels"
        )));
    }
    let mut out = Vec::with_capacity(levels);
    out.push(image);
    for _ in 1..levels {
        let finer = *out.last().expect("nonempty");
        out.push(tape.avg_pool2(finer)?);
    }
    out.reverse();
    Ok(out)
}

/// Min-max rescales intensities into `[0, 1]`; a constant image maps to zeros.
pub fn normalize_min_max<T: Real>(image: &Tensor<T>) -> Tensor<T> {
    let lo = image.data().iter().fold(T::infinity(), |a, &b| a.min(b));
    let hi = image.data().iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let range = hi - lo;
    if !(range > T::zero()) {
        return Tensor::zeros(image.shape());
    }
    image.map(|v| (v - lo) / range)
}

fn snapshot<T: Real>(
    tape: &Tape<T>,
    kind: SimilarityKind,
    moving: Var,
    fixed: Var,
    field: Var,
    step: usize,
    level: usize,
) -> Result<TrajectoryEntry<T>> {
    let grid = tape.value(field).clone();
    let dissimilarity = warped_dissimilarity(kind, tape.value(moving), tape.value(fixed), &grid)?;
    Ok(TrajectoryEntry {
        step,
        level,
        field: DisplacementField::new(grid, level)?,
        dissimilarity,
    })
}

/// Runs the unrolled solver on `tape` and returns the full-resolution field.
///
/// `params` may be `None` only for [`Variant::PlainGd`]. When `dump` is given,
/// it receives `T + 1` snapshots.
pub fn forward_register<T: Real>(
    tape: &mut Tape<T>,
    moving: Var,
    fixed: Var,
    params: Option<&BoundParams<T>>,
    cfg: &RegistrationConfig,
    mut dump: Option<&mut TrajectoryDump<T>>,
) -> Result<Var> {
    cfg.validate()?;
    let (h, w) = cfg.check_image(tape.value(moving).shape())?;
    if tape.value(fixed).shape() != tape.value(moving).shape() {
        return Err(Error::ShapeMismatch {
            op: "forward_register",
            lhs: tape.value(moving).shape().to_vec(),
            rhs: tape.value(fixed).shape().to_vec(),
        });
    }
    let params = match (cfg.variant.is_learnable(), params) {
        (true, None) => return Err(Error::ParameterMismatch("learnable variant needs parameters".into())),
        (true, Some(p)) => {
            if p.cnns.len() != cfg.levels || p.tau.len() != cfg.total_steps() {
                return Err(Error::ParameterMismatch(format!(
                    "parameters for {} levels / {} steps, config wants {} / {}",
                    p.cnns.len(),
                    p.tau.len(),
                    cfg.levels,
                    cfg.total_steps()
                )));
            }
            Some(p)
        }
        (false, p) => p,
    };

    let kind = cfg.similarity;
    let moving_pyr = build_pyramid(tape, moving, cfg.levels)?;
    let fixed_pyr = build_pyramid(tape, fixed, cfg.levels)?;
    let coarse = 1usize << (cfg.levels - 1);
    let mut phi = tape.constant(Tensor::zeros(&[2, h / coarse, w / coarse]));
    if let Some(d) = dump.as_deref_mut() {
        d.entries.clear();
        d.entries
            .push(snapshot(tape, kind, moving_pyr[0], fixed_pyr[0], phi, 0, 0)?);
    }

    let mut t = 0;
    for level in 0..cfg.levels {
        if level > 0 {
            phi = upsample_field(tape, phi)?;
        }
        let (m, f) = (moving_pyr[level], fixed_pyr[level]);
        let (_, lh, lw) = tape.value(m).chw()?;
        let density = lit::<T>((lh * lw) as f64);
        for _ in 0..cfg.steps_per_level {
            phi = match cfg.variant {
                Variant::Vn | Variant::VnNoGrad => {
                    let p = params.expect("checked above");
                    let reg = cnn_step(tape, &p.cnns[level], phi, m, f)?;
                    let direction = if cfg.variant == Variant::Vn {
                        let g = dissimilarity_gradient(tape, kind, m, f, phi)?;
                        let g = tape.scale(g, density);
                        tape.add(g, reg)?
                    } else {
                        reg
                    };
                    let step = tape.mul(p.tau[t], direction)?;
                    tape.sub(phi, step)?
                }
                Variant::RcCnn => {
                    let p = params.expect("checked above");
                    let warped = tape.warp_bilinear(m, phi)?;
                    let delta = cnn_step(tape, &p.cnns[level], phi, warped, f)?;
                    compose(tape, delta, phi)?
                }
                Variant::PlainGd => {
                    let g = dissimilarity_gradient(tape, kind, m, f, phi)?;
                    let mut dir = tape.scale(g, density);
                    if cfg.alpha > 0.0 {
                        let reg = diffusion_gradient(tape.value(phi))?;
                        let reg = tape.constant(reg);
                        let reg = tape.scale(reg, lit::<T>(cfg.alpha) * density);
                        dir = tape.add(dir, reg)?;
                    }
                    let step = tape.scale(dir, lit(cfg.plain_gd_step));
                    tape.sub(phi, step)?
                }
            };
            t += 1;
            if !tape.value(phi).all_finite() {
                return Err(Error::NonFiniteDisplacement { step: t, level });
            }
            if let Some(d) = dump.as_deref_mut() {
                d.entries.push(snapshot(tape, kind, m, f, phi, t, level)?);
            }
        }
    }
    Ok(phi)
}

/// Result of an inference-mode registration.
#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationOutcome<T> {
    pub warped: Tensor<T>,
    pub field: DisplacementField<T>,
    pub stats: JacobianStats,
    pub dissimilarity_before: T,
    pub dissimilarity_after: T,
    pub trajectory: Option<TrajectoryDump<T>>,
}

/// Registers one pair without recording gradients.
pub fn register_pair<T: Real>(
    moving: &Tensor<T>,
    fixed: &Tensor<T>,
    params: &RegistrationParams<T>,
    cfg: &RegistrationConfig,
) -> Result<RegistrationOutcome<T>> {
    params.check_against(cfg)?;
    let mut tape = Tape::inference();
    let m = tape.constant(moving.clone());
    let f = tape.constant(fixed.clone());
    let bound = cfg.variant.is_learnable().then(|| params.bind(&mut tape, false));
    let mut dump = cfg.dump_intermediate.then(TrajectoryDump::default);
    let phi = forward_register(&mut tape, m, f, bound.as_ref(), cfg, dump.as_mut())?;
    let warped = tape.warp_bilinear(m, phi)?;
    let before = crate::similarity::dissimilarity_value(cfg.similarity, moving, fixed)?;
    let after = crate::similarity::dissimilarity_value(cfg.similarity, tape.value(warped), fixed)?;
    let field = DisplacementField::new(tape.value(phi).clone(), cfg.levels - 1)?;
    let stats = jacobian_stats(&field, 1e-6)?;
    Ok(RegistrationOutcome {
        warped: tape.value(warped).clone(),
        field,
        stats,
        dissimilarity_before: before,
        dissimilarity_after: after,
        trajectory: dump,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regularizer::cnn_parameter_count;

    fn blob(h: usize, w: usize, cy: f64, cx: f64) -> Tensor<f64> {
        Tensor::from_fn(&[1, h, w], |i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            let r2 = ((y - cy) / 5.0).powi(2) + ((x - cx) / 6.0).powi(2);
            0.1 + 0.8 * (-r2).exp()
        })
    }

    #[test]
    fn parameter_counts() {
        let cfg = RegistrationConfig::default();
        let p = RegistrationParams::<f32>::init(&cfg, 1.0, 0);
        assert_eq!(p.count_parameters(), 88_527);
        assert_eq!(p.count_parameters(), 3 * cnn_parameter_count() + 9);
        let p = RegistrationParams::<f32>::with_shape(1, 3, 1.0, 0);
        assert_eq!(p.count_parameters(), 29_509);
        assert_eq!(RegistrationParams::<f32>::empty().count_parameters(), 0);
    }

    #[test]
    fn pyramid_examples() {
        let mut tape = Tape::new();
        let img = Tensor::from_fn(&[1, 4, 4], |i| ((i / 4 + i % 4) % 2) as f64);
        let v = tape.constant(img);
        let p = build_pyramid(&mut tape, v, 1).unwrap();
        assert_eq!(p, alloc::vec![v]);
        let p = build_pyramid(&mut tape, v, 2).unwrap();
        assert!(tape.value(p[0]).data().iter().all(|&x| x == 0.5));
        assert_eq!(p[1], v);
        let c = tape.constant(Tensor::full(&[1, 8, 8], 0.3));
        for l in build_pyramid(&mut tape, c, 3).unwrap() {
            assert!(tape.value(l).data().iter().all(|&x| (x - 0.3).abs() < 1e-15));
        }
        let odd = tape.constant(Tensor::<f64>::zeros(&[1, 6, 6]));
        assert!(build_pyramid(&mut tape, odd, 3).is_err());
    }

    #[test]
    fn identical_images_stay_at_identity() {
        let img = blob(16, 16, 8.0, 7.0);
        let cfg = RegistrationConfig {
            variant: Variant::PlainGd,
            ..Default::default()
        };
        let out = register_pair(&img, &img, &RegistrationParams::empty(), &cfg).unwrap();
        assert!(out.field.grid().data().iter().all(|&v| v == 0.0));

        let cfg = RegistrationConfig::default();
        let params = RegistrationParams::init(&cfg, 1.0, 4);
        let out = register_pair(&img, &img, &params, &cfg).unwrap();
        assert_eq!(out.warped, img);
        assert_eq!(out.stats.folding_fraction, 0.0);
        assert_eq!(out.dissimilarity_after, 0.0);
    }

    #[test]
    fn zero_step_plain_gd_is_identity() {
        let cfg = RegistrationConfig {
            variant: Variant::PlainGd,
            plain_gd_step: 0.0,
            ..Default::default()
        };
        let out = register_pair(
            &blob(16, 16, 8.0, 7.0),
            &blob(16, 16, 9.0, 6.0),
            &RegistrationParams::empty(),
            &cfg,
        )
        .unwrap();
        assert!(out.field.grid().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dump_has_t_plus_one_entries() {
        let cfg = RegistrationConfig {
            dump_intermediate: true,
            ..Default::default()
        };
        let params = RegistrationParams::init(&cfg, 1.0, 4);
        let out = register_pair(&blob(16, 16, 8.0, 7.0), &blob(16, 16, 9.0, 6.0), &params, &cfg).unwrap();
        let dump = out.trajectory.unwrap();
        assert_eq!(dump.entries.len(), 10);
        assert_eq!(dump.entries[0].field.grid().shape(), &[2, 4, 4]);
        assert_eq!(dump.entries[9].level, 2);
        assert_eq!(dump.entries[9].field.grid(), out.field.grid());
    }

    #[test]
    fn rejects_bad_configs() {
        let img = blob(10, 10, 5.0, 5.0);
        let cfg = RegistrationConfig {
            variant: Variant::PlainGd,
            ..Default::default()
        };
        // 10 is not divisible by 4
        assert!(register_pair(&img, &img, &RegistrationParams::empty(), &cfg).is_err());
        let cfg = RegistrationConfig {
            steps_per_level: 0,
            ..cfg
        };
        assert!(cfg.validate().is_err());
        let cfg = RegistrationConfig::default();
        let wrong = RegistrationParams::<f64>::with_shape(2, 3, 1.0, 0);
        assert!(register_pair(&blob(16, 16, 8.0, 8.0), &blob(16, 16, 8.0, 8.0), &wrong, &cfg).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = RegistrationConfig::default();
        let mut params = RegistrationParams::init(&cfg, 1.0, 9);
        // make the learned step nonzero
        for p in params.parameters_mut() {
            if p.name.contains("layer5.weight") {
                let n = p.value.numel();
                p.value = Tensor::from_fn(p.value.shape(), |i| ((i * 7919 % n) as f64 / n as f64 - 0.5) * 1e-2);
            }
        }
        let (m, f) = (blob(16, 16, 8.0, 7.0), blob(16, 16, 9.0, 6.0));
        let a = register_pair(&m, &f, &params, &cfg).unwrap();
        let b = register_pair(&m, &f, &params, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_cnn_vn_matches_plain_gd() {
        let (m, f) = (blob(16, 16, 8.0, 7.0), blob(16, 16, 9.0, 6.0));
        let vn = RegistrationConfig::default();
        let params = RegistrationParams::init(&vn, 0.7, 2);
        let plain = RegistrationConfig {
            variant: Variant::PlainGd,
            alpha: 0.0,
            plain_gd_step: 0.7,
            ..Default::default()
        };
        let a = register_pair(&m, &f, &params, &vn).unwrap();
        let b = register_pair(&m, &f, &RegistrationParams::empty(), &plain).unwrap();
        for (x, y) in a.field.grid().data().iter().zip(b.field.grid().data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(a.field.grid().max_abs() > 0.0);
    }

    #[test]
    fn small_shift_descends() {
        let (m, f) = (blob(16, 16, 8.0, 7.0), blob(16, 16, 8.0, 7.6));
        let cfg = RegistrationConfig {
            variant: Variant::PlainGd,
            plain_gd_step: 0.5,
            ..Default::default()
        };
        let out = register_pair(&m, &f, &RegistrationParams::empty(), &cfg).unwrap();
        assert!(out.dissimilarity_after < out.dissimilarity_before);
    }
}
