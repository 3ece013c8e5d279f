//! Finite-difference checks of every differentiable operation in 64-bit.
//!
//! Each check compares an analytic gradient with central differences. The
//! error of one gradient tensor is `max |analytic - numeric|` divided by the
//! largest magnitude in either, so entries that are tiny compared to the rest
//! of the tensor cannot dominate through cancellation noise.

use gradirn_core::registration::BoundParams;
use gradirn_core::regularizer::diffusion_penalty_value;
use gradirn_core::similarity::{dissimilarity_gradient_value, warped_dissimilarity};
use gradirn_core::training::loss;
use gradirn_core::{
    diffusion_gradient, forward_register, RegistrationConfig, RegistrationParams, Result as CoreResult, SimilarityKind,
    Tape, Tensor, Var, Variant,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const COMPOSITE_TOL: f64 = 1e-3;
const H: f64 = 1e-6;
/// Entries sampled per parameter tensor in the end-to-end checks.
const SAMPLED_ENTRIES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Number of finite-difference evaluations compared.
    pub compared: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Error of one gradient tensor, as described in the module docs.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn central(f: &mut dyn FnMut(f64) -> Result<f64>) -> Result<f64> {
    Ok((f(H)? - f(-H)?) / (2.0 * H))
}

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> CoreResult<Var>;

/// Checks `build` against central differences with respect to every input
/// entry, using the scalar `sum(weights * output)`.
fn check_primitive(name: &str, inputs: &[Tensor<f64>], build: &Build, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars)?;
    let weights = Tensor::from_fn(tape.value(out).shape(), |_| rng.random_range(-1.0..1.0));
    let wv = tape.constant(weights.clone());
    let prod = tape.mul(out, wv)?;
    let root = tape.sum(prod);
    let grads = tape.backward(root)?;

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::inference();
        let vs: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let o = build(&mut t, &vs)?;
        Ok(t.value(o).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
    };
    let mut worst = 0.0f64;
    let mut compared = 0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v, inputs[k].shape());
        let mut numeric = Vec::with_capacity(inputs[k].numel());
        for i in 0..inputs[k].numel() {
            let mut f = |d: f64| {
                let mut xs = inputs.to_vec();
                xs[k].data_mut()[i] += d;
                eval(&xs)
            };
            numeric.push(central(&mut f)?);
            compared += 1;
        }
        worst = worst.max(rel_err(analytic.data(), &numeric));
    }
    Ok(CheckResult {
        name: name.into(),
        max_rel_err: worst,
        tolerance: PRIMITIVE_TOL,
        compared,
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero: magnitude in `[lo, hi)` with a random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(lo..hi);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Displacements whose sample positions stay off the integer grid lines and
/// inside the image, where bilinear interpolation is smooth.
fn smooth_disp(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f64> {
    let hw = h * w;
    Tensor::from_fn(&[2, h, w], |i| {
        let (c, p) = (i / hw, i % hw);
        let (pos, n) = if c == 0 { (p / w, h) } else { (p % w, w) };
        loop {
            let whole: i64 = rng.random_range(-1..=1);
            let d = whole as f64 + rng.random_range(0.2..0.8) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let target = pos as f64 + d;
            if target > 0.05 && target < (n - 1) as f64 - 0.05 {
                return d;
            }
        }
    })
}

/// Smooth test image in `[0, 1]`.
fn test_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f64> {
    let blobs: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.0..h as f64),
                rng.random_range(0.0..w as f64),
                rng.random_range(1.5..4.0),
                rng.random_range(0.2..0.8),
            )
        })
        .collect();
    let (fy, fx) = (rng.random_range(0.3..0.9), rng.random_range(0.3..0.9));
    Tensor::from_fn(&[1, h, w], |i| {
        let (y, x) = ((i / w) as f64, (i % w) as f64);
        let mut v = 0.1 + 0.05 * (fy * y).sin() * (fx * x).cos();
        for &(cy, cx, r, a) in &blobs {
            v += a * (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * r * r)).exp();
        }
        v.clamp(0.0, 1.0)
    })
}

fn primitive_checks(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let s = [2, 3, 4];
    let a = uniform(rng, &s, -1.0, 1.0);
    let b = uniform(rng, &s, -1.0, 1.0);
    let pos = uniform(rng, &s, 0.5, 2.0);
    let nz = away_from_zero(rng, &s, 0.5, 2.0);
    let c = uniform(rng, &[1], 0.5, 1.5);
    let binary: [(&str, &Build); 4] = [
        ("add", &|t, v| t.add(v[0], v[1])),
        ("sub", &|t, v| t.sub(v[0], v[1])),
        ("mul", &|t, v| t.mul(v[0], v[1])),
        ("div", &|t, v| t.div(v[0], v[1])),
    ];
    for (name, f) in binary {
        out.push(check_primitive(name, &[a.clone(), nz.clone()], f, rng)?);
        out.push(check_primitive(
            &format!("{name} (scalar operand)"),
            &[b.clone(), c.clone()],
            f,
            rng,
        )?);
    }
    let unary: [(&str, &Build, &Tensor<f64>); 9] = [
        ("neg", &|t, v| Ok(t.neg(v[0])), &a),
        ("square", &|t, v| Ok(t.square(v[0])), &a),
        ("scale", &|t, v| Ok(t.scale(v[0], -1.7)), &a),
        ("add_scalar", &|t, v| Ok(t.add_scalar(v[0], 0.3)), &a),
        ("sqrt", &|t, v| t.sqrt(v[0]), &pos),
        ("clamp_min", &|t, v| Ok(t.clamp_min(v[0], 0.0)), &nz),
        ("sum", &|t, v| Ok(t.sum(v[0])), &a),
        ("mean", &|t, v| Ok(t.mean(v[0])), &a),
        ("leaky_relu", &|t, v| Ok(t.leaky_relu(v[0], 0.2)), &nz),
    ];
    for (name, f, x) in unary {
        out.push(check_primitive(name, std::slice::from_ref(x), f, rng)?);
    }
    let x = uniform(rng, &[3, 5, 6], -1.0, 1.0);
    let wt = uniform(rng, &[4, 3, 3, 3], -0.5, 0.5);
    let bias = uniform(rng, &[4], -0.5, 0.5);
    out.push(check_primitive(
        "conv2d",
        &[x.clone(), wt, bias],
        &|t, v| t.conv2d(v[0], v[1], v[2]),
        rng,
    )?);
    out.push(check_primitive(
        "avg_pool2",
        &[uniform(rng, &[2, 4, 6], -1.0, 1.0)],
        &|t, v| t.avg_pool2(v[0]),
        rng,
    )?);
    out.push(check_primitive(
        "upsample_linear2",
        &[uniform(rng, &[2, 3, 4], -1.0, 1.0)],
        &|t, v| t.upsample_linear2(v[0], 2.0),
        rng,
    )?);
    let img = uniform(rng, &[2, 6, 7], 0.0, 1.0);
    let disp = smooth_disp(rng, 6, 7);
    out.push(check_primitive(
        "warp_bilinear",
        &[img.clone(), disp.clone()],
        &|t, v| t.warp_bilinear(v[0], v[1]),
        rng,
    )?);
    let img1 = uniform(rng, &[1, 6, 7], 0.0, 1.0);
    out.push(check_primitive(
        "warp_slope",
        &[img1, disp],
        &|t, v| t.warp_slope(v[0], v[1]),
        rng,
    )?);
    out.push(check_primitive(
        "spatial_gradient",
        std::slice::from_ref(&x),
        &|t, v| t.spatial_gradient(v[0]),
        rng,
    )?);
    let y = uniform(rng, &[2, 6, 7], -1.0, 1.0);
    out.push(check_primitive(
        "box_mean",
        std::slice::from_ref(&y),
        &|t, v| t.box_mean(v[0], 3),
        rng,
    )?);
    out.push(check_primitive(
        "box_mean_transpose",
        std::slice::from_ref(&y),
        &|t, v| t.box_mean_transpose(v[0], 5),
        rng,
    )?);
    out.push(check_primitive(
        "concat",
        &[y.clone(), uniform(rng, &[1, 6, 7], -1.0, 1.0)],
        &|t, v| t.concat(&[v[0], v[1], v[0]]),
        rng,
    )?);
    out.push(check_primitive("channels", &[y], &|t, v| t.channels(v[0], 1, 1), rng)?);
    Ok(out)
}

fn similarity_kinds() -> [(&'static str, SimilarityKind); 3] {
    [
        ("ssd", SimilarityKind::Ssd),
        ("ncc-global", SimilarityKind::NccGlobal),
        ("ncc-local", SimilarityKind::NccLocal { window: 5 }),
    ]
}

/// Closed-form dissimilarity gradients and the diffusion gradient against
/// differences of the functionals themselves.
fn field_gradient_checks(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let (h, w) = (10, 11);
    let moving = test_image(rng, h, w);
    let fixed = test_image(rng, h, w);
    let disp = smooth_disp(rng, h, w);
    let mut out = Vec::new();
    let fd_field = |f: &dyn Fn(&Tensor<f64>) -> Result<f64>| -> Result<Vec<f64>> {
        (0..disp.numel())
            .map(|i| {
                let mut g = |d: f64| {
                    let mut x = disp.clone();
                    x.data_mut()[i] += d;
                    f(&x)
                };
                central(&mut g)
            })
            .collect()
    };
    for (name, kind) in similarity_kinds() {
        let analytic = dissimilarity_gradient_value(kind, &moving, &fixed, &disp)?;
        let numeric = fd_field(&|x| Ok(warped_dissimilarity(kind, &moving, &fixed, x)?))?;
        out.push(CheckResult {
            name: format!("dissimilarity_gradient ({name})"),
            max_rel_err: rel_err(analytic.data(), &numeric),
            tolerance: COMPOSITE_TOL,
            compared: numeric.len(),
        });
    }
    let field = uniform(rng, &[2, h, w], -2.0, 2.0);
    let analytic = diffusion_gradient(&field)?;
    let numeric: Vec<f64> = (0..field.numel())
        .map(|i| {
            let mut g = |d: f64| {
                let mut x = field.clone();
                x.data_mut()[i] += d;
                Ok(diffusion_penalty_value(&x)?)
            };
            central(&mut g)
        })
        .collect::<Result<_>>()?;
    out.push(CheckResult {
        name: "diffusion_gradient".into(),
        max_rel_err: rel_err(analytic.data(), &numeric),
        tolerance: COMPOSITE_TOL,
        compared: numeric.len(),
    });
    Ok(out)
}

fn forward_loss(
    params: &RegistrationParams<f64>,
    moving: &Tensor<f64>,
    fixed: &Tensor<f64>,
    reg: &RegistrationConfig,
    train_tau: bool,
    tape: &mut Tape<f64>,
) -> Result<(Var, BoundParams<f64>)> {
    let m = tape.constant(moving.clone());
    let f = tape.constant(fixed.clone());
    let bound = params.bind(tape, train_tau);
    let phi = forward_register(tape, m, f, Some(&bound), reg, None)?;
    Ok((loss(tape, m, f, phi, reg.similarity, reg.lambda)?, bound))
}

/// Gradient of the full training loss with respect to every parameter tensor
/// of a 16x16, two-level, one-step-per-level solver. Step sizes are checked
/// entry by entry; each CNN tensor along a random direction plus a few
/// sampled entries.
fn end_to_end_check(rng: &mut ChaCha8Rng, variant: Variant, name: &str, kind: SimilarityKind) -> Result<CheckResult> {
    let reg = RegistrationConfig {
        variant,
        levels: 2,
        steps_per_level: 1,
        similarity: kind,
        lambda: 0.3,
        ..Default::default()
    };
    let mut params = RegistrationParams::<f64>::init(&reg, 0.8, rng.random());
    // a nonzero final layer makes every CNN weight matter
    for cnn in &mut params.cnns {
        let last = cnn.layers.last_mut().expect("layers");
        last.weight.value = uniform(rng, last.weight.value.shape(), -0.05, 0.05);
        last.bias.value = uniform(rng, last.bias.value.shape(), -0.1, 0.1);
    }
    for (t, p) in params.step_sizes.tau.iter_mut().enumerate() {
        p.value = Tensor::scalar(0.6 + 0.3 * t as f64);
    }
    let moving = test_image(rng, 16, 16);
    let fixed = test_image(rng, 16, 16);
    let train_tau = variant.uses_tau();

    let mut tape = Tape::new();
    let (root, bound) = forward_loss(&params, &moving, &fixed, &reg, train_tau, &mut tape)?;
    let grads = tape.backward(root)?;
    let mut analytic = params.clone();
    analytic.zero_grad();
    analytic.accumulate_grads(&bound, &grads)?;

    let eval = |p: &RegistrationParams<f64>| -> Result<f64> {
        let mut t = Tape::inference();
        let (l, _) = forward_loss(p, &moving, &fixed, &reg, false, &mut t)?;
        Ok(t.value(l).item())
    };
    let mut worst = 0.0f64;
    let mut compared = 0;
    let count = params.parameters().len();
    for k in 0..count {
        let (name_k, shape, numel) = {
            let p = params.parameters()[k];
            (p.name.clone(), p.value.shape().to_vec(), p.numel())
        };
        if name_k.starts_with("tau.") && !train_tau {
            continue;
        }
        let g = analytic.parameters()[k].grad.clone();
        let perturb = |dir: &Tensor<f64>, d: f64| -> Result<f64> {
            let mut q = params.clone();
            let p = &mut q.parameters_mut()[k];
            for (x, u) in p.value.data_mut().iter_mut().zip(dir.data()) {
                *x += d * u;
            }
            eval(&q)
        };
        let mut a = Vec::new();
        let mut n = Vec::new();
        let entries: Vec<usize> = if numel <= SAMPLED_ENTRIES {
            (0..numel).collect()
        } else {
            (0..SAMPLED_ENTRIES).map(|_| rng.random_range(0..numel)).collect()
        };
        for i in entries {
            let mut dir = Tensor::zeros(&shape);
            dir.data_mut()[i] = 1.0;
            a.push(g.data()[i]);
            n.push(central(&mut |d| perturb(&dir, d))?);
        }
        if numel > SAMPLED_ENTRIES {
            let dir = uniform(rng, &shape, -1.0, 1.0);
            let norm = dir.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            let dir = dir.map(|v| v / norm);
            a.push(g.data().iter().zip(dir.data()).map(|(x, y)| x * y).sum());
            n.push(central(&mut |d| perturb(&dir, d))?);
        }
        compared += a.len();
        worst = worst.max(rel_err(&a, &n));
    }
    Ok(CheckResult {
        name: format!("end-to-end loss gradient ({name})"),
        max_rel_err: worst,
        tolerance: COMPOSITE_TOL,
        compared,
    })
}

/// Runs the whole suite.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = primitive_checks(&mut rng)?;
    out.extend(field_gradient_checks(&mut rng)?);
    out.push(end_to_end_check(&mut rng, Variant::Vn, "vn, ssd", SimilarityKind::Ssd)?);
    out.push(end_to_end_check(
        &mut rng,
        Variant::Vn,
        "vn, ncc-global",
        SimilarityKind::NccGlobal,
    )?);
    out.push(end_to_end_check(
        &mut rng,
        Variant::Vn,
        "vn, ncc-local",
        SimilarityKind::NccLocal { window: 5 },
    )?);
    out.push(end_to_end_check(
        &mut rng,
        Variant::VnNoGrad,
        "vn-nograd, ssd",
        SimilarityKind::Ssd,
    )?);
    out.push(end_to_end_check(
        &mut rng,
        Variant::RcCnn,
        "rc-cnn, ssd",
        SimilarityKind::Ssd,
    )?);
    Ok(out)
}

/// Fails with the names of the checks that missed their tolerance.
pub fn require_all(results: &[CheckResult]) -> Result<()> {
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} ({:.2e} >= {:.0e})", r.name, r.max_rel_err, r.tolerance))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::GradCheck(failed.join(", ")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_scales_by_largest_entry() {
        assert_eq!(rel_err(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert_eq!(rel_err(&[2.0, 1e-9], &[2.0, 0.0]), 5e-10);
        assert_eq!(rel_err(&[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn smooth_disp_avoids_grid_lines() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = smooth_disp(&mut rng, 6, 7);
        for v in d.data() {
            let f = v.abs().fract();
            assert!((0.2..0.8).contains(&f));
        }
    }
}
