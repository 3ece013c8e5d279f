//! Image dissimilarity metrics and their gradients with respect to the
//! displacement field.
//!
//! Every metric is 0 at perfect alignment and is minimised by registration.
//! The gradients are assembled from differentiable tape primitives, so the
//! unrolled solver that uses them can itself be back-propagated through.

use crate::error::{Error, Result};
use crate::real::{lit, Real};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Variances below this are replaced by it in the NCC denominators.
pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilarityKind {
    /// Mean of squared differences.
    Ssd,
    /// `1 - ncc` over the whole image.
    NccGlobal,
    /// `1 - mean(ncc)` over odd `window x window` neighbourhoods.
    NccLocal { window: usize },
}

impl SimilarityKind {
    pub const DEFAULT_WINDOW: usize = 9;

    pub fn validate(self) -> Result<Self> {
        if let SimilarityKind::NccLocal { window } = self {
            if window < 3 || window % 2 == 0 {
                return Err(Error::InvalidConfig(alloc::format!(
                    "local NCC window must be odd and >= 3, got {window}"
                )));
            }
        }
        Ok(self)
    }
}

fn check_pair<T: Real>(tape: &Tape<T>, a: Var, b: Var, op: &'static str) -> Result<()> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb {
        return Err(Error::ShapeMismatch {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    tape.value(a).chw()?;
    Ok(())
}

/// Recorded scalar dissimilarity between `warped` and `fixed`, both `[1, H, W]`.
pub fn dissimilarity<T: Real>(tape: &mut Tape<T>, kind: SimilarityKind, warped: Var, fixed: Var) -> Result<Var> {
    check_pair(tape, warped, fixed, "dissimilarity")?;
    let floor = lit::<T>(VARIANCE_FLOOR);
    match kind.validate()? {
        SimilarityKind::Ssd => {
            let r = tape.sub(warped, fixed)?;
            let sq = tape.square(r);
            Ok(tape.mean(sq))
        }
        SimilarityKind::NccGlobal => {
            let g = global_terms(tape, warped, fixed, floor)?;
            let cc = tape.div(g.cov, g.s)?;
            Ok(one_minus(tape, cc))
        }
        SimilarityKind::NccLocal { window } => {
            let l = local_terms(tape, warped, fixed, window, floor)?;
            let m = tape.mean(l.cc);
            Ok(one_minus(tape, m))
        }
    }
}

fn one_minus<T: Real>(tape: &mut Tape<T>, v: Var) -> Var {
    let n = tape.neg(v);
    tape.add_scalar(n, T::one())
}

struct GlobalTerms {
    w_hat: Var,
    f_hat: Var,
    cov: Var,
    var_w: Var,
    s: Var,
}

fn global_terms<T: Real>(tape: &mut Tape<T>, w: Var, f: Var, floor: T) -> Result<GlobalTerms> {
    let mw = tape.mean(w);
    let mf = tape.mean(f);
    let w_hat = tape.sub(w, mw)?;
    let f_hat = tape.sub(f, mf)?;
    let prod = tape.mul(w_hat, f_hat)?;
    let cov = tape.mean(prod);
    let w2 = tape.square(w_hat);
    let var_w = tape.mean(w2);
    let var_w = tape.clamp_min(var_w, floor);
    let f2 = tape.square(f_hat);
    let var_f = tape.mean(f2);
    let var_f = tape.clamp_min(var_f, floor);
    let vv = tape.mul(var_w, var_f)?;
    let s = tape.sqrt(vv)?;
    Ok(GlobalTerms {
        w_hat,
        f_hat,
        cov,
        var_w,
        s,
    })
}

struct LocalTerms {
    mu_w: Var,
    mu_f: Var,
    var_w: Var,
    s: Var,
    cc: Var,
}

fn local_terms<T: Real>(tape: &mut Tape<T>, w: Var, f: Var, window: usize, floor: T) -> Result<LocalTerms> {
    let mu_w = tape.box_mean(w, window)?;
    let mu_f = tape.box_mean(f, window)?;
    let wf = tape.mul(w, f)?;
    let e_wf = tape.box_mean(wf, window)?;
    let mwmf = tape.mul(mu_w, mu_f)?;
    let cov = tape.sub(e_wf, mwmf)?;
    let w2 = tape.square(w);
    let e_w2 = tape.box_mean(w2, window)?;
    let mw2 = tape.square(mu_w);
    let var_w = tape.sub(e_w2, mw2)?;
    let var_w = tape.clamp_min(var_w, floor);
    let f2 = tape.square(f);
    let e_f2 = tape.box_mean(f2, window)?;
    let mf2 = tape.square(mu_f);
    let var_f = tape.sub(e_f2, mf2)?;
    let var_f = tape.clamp_min(var_f, floor);
    let vv = tape.mul(var_w, var_f)?;
    let s = tape.sqrt(vv)?;
    let cc = tape.div(cov, s)?;
    Ok(LocalTerms {
        mu_w,
        mu_f,
        var_w,
        s,
        cc,
    })
}

/// Recorded derivative of the dissimilarity with respect to the warped image
/// intensities, `[1, H, W]`.
fn intensity_gradient<T: Real>(tape: &mut Tape<T>, kind: SimilarityKind, w: Var, f: Var) -> Result<Var> {
    let (_, h, wd) = tape.value(w).chw()?;
    let n = (h * wd) as f64;
    let floor = lit::<T>(VARIANCE_FLOOR);
    match kind.validate()? {
        SimilarityKind::Ssd => {
            let r = tape.sub(w, f)?;
            Ok(tape.scale(r, lit(2.0 / n)))
        }
        SimilarityKind::NccGlobal => {
            // dD/dw_i = -(f^_i - cov * w^_i / var_w) / (N s)
            let g = global_terms(tape, w, f, floor)?;
            let ratio = tape.div(g.cov, g.var_w)?;
            let t2 = tape.mul(g.w_hat, ratio)?;
            let diff = tape.sub(g.f_hat, t2)?;
            let q = tape.div(diff, g.s)?;
            Ok(tape.scale(q, lit(-1.0 / n)))
        }
        SimilarityKind::NccLocal { window } => {
            // dD/dw_i = -(1/N) [ f_i B'(1/s) - B'(mu_f/s) - w_i B'(cc/var_w) + B'(cc mu_w/var_w) ]
            // with B the windowed mean and B' its adjoint.
            let l = local_terms(tape, w, f, window, floor)?;
            let ones = tape.constant(Tensor::ones(tape.value(w).shape()));
            let inv_s = tape.div(ones, l.s)?;
            let a = tape.box_mean_transpose(inv_s, window)?;
            let a = tape.mul(f, a)?;
            let mf_s = tape.div(l.mu_f, l.s)?;
            let b = tape.box_mean_transpose(mf_s, window)?;
            let cc_v = tape.div(l.cc, l.var_w)?;
            let c = tape.box_mean_transpose(cc_v, window)?;
            let c = tape.mul(w, c)?;
            let cc_mw = tape.mul(cc_v, l.mu_w)?;
            let d = tape.box_mean_transpose(cc_mw, window)?;
            let ab = tape.sub(a, b)?;
            let abc = tape.sub(ab, c)?;
            let sum = tape.add(abc, d)?;
            Ok(tape.scale(sum, lit(-1.0 / n)))
        }
    }
}

/// Recorded gradient of `dissimilarity(kind, warp(moving, disp), fixed)` with
/// respect to `disp`, `[2, H, W]`.
///
/// The chain rule goes through the exact slope of the bilinear sampler at the
/// displaced positions, so the result matches finite differences of the
/// dissimilarity away from sampling-cell boundaries.
pub fn dissimilarity_gradient<T: Real>(
    tape: &mut Tape<T>,
    kind: SimilarityKind,
    moving: Var,
    fixed: Var,
    disp: Var,
) -> Result<Var> {
    check_pair(tape, moving, fixed, "dissimilarity_gradient")?;
    let (c, _, _) = tape.value(moving).chw()?;
    if c != 1 {
        return Err(Error::ChannelMismatch {
            op: "dissimilarity_gradient",
            expected: 1,
            got: c,
        });
    }
    let warped = tape.warp_bilinear(moving, disp)?;
    let slope = tape.warp_slope(moving, disp)?;
    let dw = intensity_gradient(tape, kind, warped, fixed)?;
    let dw2 = tape.concat(&[dw, dw])?;
    tape.mul(dw2, slope)
}

/// Dissimilarity of two images, evaluated without recording.
pub fn dissimilarity_value<T: Real>(kind: SimilarityKind, warped: &Tensor<T>, fixed: &Tensor<T>) -> Result<T> {
    let mut tape = Tape::inference();
    let w = tape.constant(warped.clone());
    let f = tape.constant(fixed.clone());
    let d = dissimilarity(&mut tape, kind, w, f)?;
    Ok(tape.value(d).item())
}

/// Dissimilarity gradient w.r.t. a displacement field, evaluated without recording.
pub fn dissimilarity_gradient_value<T: Real>(
    kind: SimilarityKind,
    moving: &Tensor<T>,
    fixed: &Tensor<T>,
    disp: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::inference();
    let m = tape.constant(moving.clone());
    let f = tape.constant(fixed.clone());
    let d = tape.constant(disp.clone());
    let g = dissimilarity_gradient(&mut tape, kind, m, f, d)?;
    Ok(tape.value(g).clone())
}

/// Warps `moving` by `disp` and returns the dissimilarity against `fixed`.
pub fn warped_dissimilarity<T: Real>(
    kind: SimilarityKind,
    moving: &Tensor<T>,
    fixed: &Tensor<T>,
    disp: &Tensor<T>,
) -> Result<T> {
    let mut tape = Tape::inference();
    let m = tape.constant(moving.clone());
    let f = tape.constant(fixed.clone());
    let d = tape.constant(disp.clone());
    let w = tape.warp_bilinear(m, d)?;
    let v = dissimilarity(&mut tape, kind, w, f)?;
    Ok(tape.value(v).item())
}
