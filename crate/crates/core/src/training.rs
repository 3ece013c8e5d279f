//! End-to-end training of the unrolled solver with Adam.

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::real::{lit, Real};
use crate::registration::{forward_register, RegistrationConfig, RegistrationParams};
use crate::regularizer::diffusion_penalty;
use crate::similarity::{dissimilarity, SimilarityKind};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Weight of the diffusion penalty in the loss.
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Checkpoint period in epochs; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// Optional global gradient-norm clip.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lambda: 0.05,
            epochs: 30,
            batch_size: 1,
            seed: 0,
            checkpoint_every: 0,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidConfig(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::InvalidConfig("adam_eps must be positive".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lambda must be nonnegative, got {}",
                self.lambda
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::InvalidConfig(format!("clip_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// First and second moments, one per parameter in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &RegistrationParams<T>) -> Self {
        let zeros: Vec<_> = params
            .parameters()
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn check_against(&self, params: &RegistrationParams<T>) -> Result<()> {
        let ps = params.parameters();
        if self.m.len() != ps.len() || self.v.len() != ps.len() {
            return Err(Error::ParameterMismatch(format!(
                "optimizer state has {} moments for {} parameters",
                self.m.len(),
                ps.len()
            )));
        }
        for ((p, m), v) in ps.iter().zip(&self.m).zip(&self.v) {
            if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                return Err(Error::ParameterMismatch(format!(
                    "moment shape mismatch for {}",
                    p.name
                )));
            }
        }
        Ok(())
    }
}

/// Training loss `D(warp(moving, phi), fixed) + lambda * diffusion(phi)`.
pub fn loss<T: Real>(
    tape: &mut Tape<T>,
    moving: Var,
    fixed: Var,
    phi: Var,
    kind: SimilarityKind,
    lambda: f64,
) -> Result<Var> {
    let warped = tape.warp_bilinear(moving, phi)?;
    let d = dissimilarity(tape, kind, warped, fixed)?;
    if lambda == 0.0 {
        return Ok(d);
    }
    let r = diffusion_penalty(tape, phi)?;
    let r = tape.scale(r, lit(lambda));
    tape.add(d, r)
}

/// Global L2 norm of the accumulated gradients.
pub fn grad_norm<T: Real>(params: &RegistrationParams<T>) -> f64 {
    let s: f64 = params
        .parameters()
        .iter()
        .flat_map(|p| p.grad.data().iter())
        .map(|g| {
            let g = g.as_f64();
            g * g
        })
        .sum();
    Float::sqrt(s)
}

/// One bias-corrected Adam update from the gradients stored in `params`.
pub fn adam_step<T: Real>(
    params: &mut RegistrationParams<T>,
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    state.check_against(params)?;
    for p in params.parameters() {
        if !p.grad.all_finite() {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
    }
    let clip = match cfg.clip_norm {
        Some(c) => {
            let n = grad_norm(params);
            if n > c {
                c / n
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - Float::powi(b1, t);
    let bc2 = 1.0 - Float::powi(b2, t);
    let (b1t, b2t): (T, T) = (lit(b1), lit(b2));
    let (one, lr, eps, clip_t): (T, T, T, T) = (T::one(), lit(cfg.lr), lit(cfg.adam_eps), lit(clip));
    let (bc1, bc2): (T, T) = (lit(bc1), lit(bc2));
    for ((p, m), v) in params.parameters_mut().into_iter().zip(&mut state.m).zip(&mut state.v) {
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, (x, &g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
            let g = g * clip_t;
            m[i] = b1t * m[i] + (one - b1t) * g;
            v[i] = b2t * v[i] + (one - b2t) * g * g;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            *x = *x - lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Per-sample stochastic training loop over in-memory pairs.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub params: RegistrationParams<T>,
    pub adam: AdamState<T>,
    pub cfg: TrainConfig,
    pub reg: RegistrationConfig,
    /// Completed epochs.
    pub epoch: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(params: RegistrationParams<T>, cfg: TrainConfig, reg: RegistrationConfig) -> Result<Self> {
        let adam = AdamState::new(&params);
        Self::resume(params, adam, cfg, reg, 0)
    }

    pub fn resume(
        params: RegistrationParams<T>,
        adam: AdamState<T>,
        cfg: TrainConfig,
        reg: RegistrationConfig,
        epoch: usize,
    ) -> Result<Self> {
        if !reg.variant.is_learnable() {
            return Err(Error::InvalidConfig(
                "nothing to train for plain gradient descent".into(),
            ));
        }
        cfg.validate()?;
        reg.validate()?;
        params.check_against(&reg)?;
        adam.check_against(&params)?;
        Ok(Self {
            params,
            adam,
            cfg,
            reg,
            epoch,
        })
    }

    /// Forward and backward pass for one pair; gradients are added to the
    /// parameter accumulators. Returns the loss.
    pub fn accumulate_pair(&mut self, moving: &Tensor<T>, fixed: &Tensor<T>) -> Result<T> {
        let mut tape = Tape::new();
        let m = tape.constant(moving.clone());
        let f = tape.constant(fixed.clone());
        let bound = self.params.bind(&mut tape, self.reg.variant.uses_tau());
        let phi = forward_register(&mut tape, m, f, Some(&bound), &self.reg, None)?;
        let l = loss(&mut tape, m, f, phi, self.reg.similarity, self.cfg.lambda)?;
        let grads = tape.backward(l)?;
        self.params.accumulate_grads(&bound, &grads)?;
        Ok(tape.value(l).item())
    }

    /// One optimizer step on a batch of pairs; returns the mean loss.
    pub fn train_step(&mut self, batch: &[(&Tensor<T>, &Tensor<T>)]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidConfig("empty batch".into()));
        }
        self.params.zero_grad();
        let mut total = 0.0;
        for (m, f) in batch {
            total += self.accumulate_pair(m, f)?.as_f64();
        }
        if batch.len() > 1 {
            let inv: T = lit(1.0 / batch.len() as f64);
            for p in self.params.parameters_mut() {
                p.grad = p.grad.map(|g| g * inv);
            }
        }
        adam_step(&mut self.params, &mut self.adam, &self.cfg)?;
        Ok(total / batch.len() as f64)
    }

    /// Visiting order of epoch `epoch` (0-based), derived from the seed only.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Trains one epoch over `data` and returns the mean training loss.
    pub fn train_epoch(&mut self, data: &[(Tensor<T>, Tensor<T>)]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::InvalidConfig("training set is empty".into()));
        }
        let order = self.epoch_order(self.epoch, data.len());
        let mut total = 0.0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| (&data[i].0, &data[i].1)).collect();
            total += self.train_step(&batch)? * chunk.len() as f64;
        }
        self.epoch += 1;
        Ok(total / data.len() as f64)
    }

    /// Mean loss over `data` without recording gradients.
    pub fn evaluate_loss(&self, data: &[(Tensor<T>, Tensor<T>)]) -> Result<f64> {
        validation_loss(&self.params, &self.reg, self.cfg.lambda, data)
    }
}

/// Mean loss of `params` over `data`, computed on inference tapes.
pub fn validation_loss<T: Real>(
    params: &RegistrationParams<T>,
    reg: &RegistrationConfig,
    lambda: f64,
    data: &[(Tensor<T>, Tensor<T>)],
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidConfig("validation set is empty".into()));
    }
    let mut total = 0.0;
    for (moving, fixed) in data {
        let mut tape = Tape::inference();
        let m = tape.constant(moving.clone());
        let f = tape.constant(fixed.clone());
        let bound = reg.variant.is_learnable().then(|| params.bind(&mut tape, false));
        let phi = forward_register(&mut tape, m, f, bound.as_ref(), reg, None)?;
        let l = loss(&mut tape, m, f, phi, reg.similarity, lambda)?;
        total += tape.value(l).item().as_f64();
    }
    Ok(total / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registration::Variant;

    fn blob(h: usize, cy: f64, cx: f64) -> Tensor<f64> {
        Tensor::from_fn(&[1, h, h], |i| {
            let (y, x) = ((i / h) as f64, (i % h) as f64);
            let r2 = ((y - cy) / 4.0).powi(2) + ((x - cx) / 5.0).powi(2);
            0.1 + 0.8 * (-r2).exp()
        })
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut params = RegistrationParams::<f64>::with_shape(1, 1, 1.0, 0);
        for p in params.parameters_mut() {
            p.grad.data_mut().fill(1.0);
        }
        let before = params.step_sizes.tau[0].value.item();
        let mut st = AdamState::new(&params);
        adam_step(&mut params, &mut st, &TrainConfig::default()).unwrap();
        let after = params.step_sizes.tau[0].value.item();
        // m_hat = 1, v_hat = 1 -> lr / (1 + eps)
        let want = 1e-4 / (1.0 + 1e-8);
        assert!(((before - after) - want).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut params = RegistrationParams::<f64>::with_shape(1, 2, 0.5, 3);
        let orig = params.clone();
        let mut st = AdamState::new(&params);
        for _ in 0..3 {
            adam_step(&mut params, &mut st, &TrainConfig::default()).unwrap();
        }
        assert_eq!(params, orig);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut params = RegistrationParams::<f64>::with_shape(1, 2, 0.5, 3);
        params.step_sizes.tau[1].grad.data_mut()[0] = f64::NAN;
        let mut st = AdamState::new(&params);
        match adam_step(&mut params, &mut st, &TrainConfig::default()) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "tau.2"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn loss_examples() {
        let img = blob(16, 8.0, 8.0);
        let mut tape = Tape::new();
        let m = tape.constant(img.clone());
        let z = tape.constant(Tensor::zeros(&[2, 16, 16]));
        let l = loss(&mut tape, m, m, z, SimilarityKind::Ssd, 3.0).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let shift = tape.constant(Tensor::full(&[2, 16, 16], 1.0));
        let l = loss(&mut tape, m, m, shift, SimilarityKind::Ssd, 3.0).unwrap();
        let l0 = loss(&mut tape, m, m, shift, SimilarityKind::Ssd, 0.0).unwrap();
        assert_eq!(tape.value(l).item(), tape.value(l0).item());
        assert!(tape.value(l).item() > 0.0);
    }

    #[test]
    fn plain_gd_is_not_trainable() {
        let reg = RegistrationConfig {
            variant: Variant::PlainGd,
            ..Default::default()
        };
        assert!(Trainer::new(RegistrationParams::<f64>::empty(), TrainConfig::default(), reg).is_err());
    }

    #[test]
    fn identical_pair_is_fixed_point() {
        let reg = RegistrationConfig {
            levels: 2,
            steps_per_level: 1,
            ..Default::default()
        };
        let params = RegistrationParams::init(&reg, 1.0, 1);
        let orig = params.clone();
        let mut tr = Trainer::new(params, TrainConfig::default(), reg).unwrap();
        let img = blob(16, 7.0, 9.0);
        let data = [(img.clone(), img)];
        for _ in 0..3 {
            assert_eq!(tr.train_epoch(&data).unwrap(), 0.0);
        }
        for (a, b) in tr.params.parameters().iter().zip(orig.parameters()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let reg = RegistrationConfig::default();
        let tr = Trainer::new(
            RegistrationParams::<f32>::init(&reg, 1.0, 0),
            TrainConfig::default(),
            reg,
        )
        .unwrap();
        let a = tr.epoch_order(0, 20);
        let mut s = a.clone();
        s.sort_unstable();
        assert_eq!(s, (0..20).collect::<Vec<_>>());
        assert_eq!(a, tr.epoch_order(0, 20));
        assert_ne!(a, tr.epoch_order(1, 20));
    }
}
