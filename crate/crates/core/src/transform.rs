//! Dense displacement-field transforms and their Jacobian analysis.

use alloc::vec;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::kernels;
use crate::real::{lit, Real};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Per-pixel displacement `[2, H, W]` in pixels of its own grid; channel 0 is
/// the row displacement, channel 1 the column displacement. `level` is the
/// pyramid level the grid belongs to (0 = coarsest).
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField<T> {
    grid: Tensor<T>,
    pub level: usize,
}

impl<T: Real> DisplacementField<T> {
    pub fn new(grid: Tensor<T>, level: usize) -> Result<Self> {
        let (c, _, _) = grid.chw()?;
        if c != 2 {
            return Err(Error::ChannelMismatch {
                op: "displacement field",
                expected: 2,
                got: c,
            });
        }
        Ok(Self { grid, level })
    }

    pub fn zeros(height: usize, width: usize, level: usize) -> Self {
        Self {
            grid: Tensor::zeros(&[2, height, width]),
            level,
        }
    }

    /// Field whose value at pixel `(row, col)` is `f(row, col)`.
    pub fn from_fn(height: usize, width: usize, level: usize, f: impl Fn(usize, usize) -> (T, T)) -> Self {
        let mut grid = Tensor::zeros(&[2, height, width]);
        let hw = height * width;
        let data = grid.data_mut();
        for y in 0..height {
            for x in 0..width {
                let (a, b) = f(y, x);
                data[y * width + x] = a;
                data[hw + y * width + x] = b;
            }
        }
        Self { grid, level }
    }

    pub fn grid(&self) -> &Tensor<T> {
        &self.grid
    }

    pub fn into_grid(self) -> Tensor<T> {
        self.grid
    }

    pub fn height(&self) -> usize {
        self.grid.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.grid.shape()[2]
    }

    pub fn is_finite(&self) -> bool {
        self.grid.all_finite()
    }

    /// Displacement vector at `(row, col)`.
    pub fn at(&self, y: usize, x: usize) -> (T, T) {
        let (h, w) = (self.height(), self.width());
        let d = self.grid.data();
        (d[y * w + x], d[h * w + y * w + x])
    }

    /// x2 linear upsampling with values doubled (pixel units of the finer grid).
    pub fn upsample(&self) -> Result<Self> {
        let mut tape = Tape::inference();
        let v = tape.constant(self.grid.clone());
        let up = upsample_field(&mut tape, v)?;
        Ok(Self {
            grid: tape.value(up).clone(),
            level: self.level + 1,
        })
    }

    /// `self` applied after `inner`: `inner(x) + self(x + inner(x))`.
    pub fn compose(&self, inner: &Self) -> Result<Self> {
        let mut tape = Tape::inference();
        let outer = tape.constant(self.grid.clone());
        let inner_v = tape.constant(inner.grid.clone());
        let out = compose(&mut tape, outer, inner_v)?;
        Ok(Self {
            grid: tape.value(out).clone(),
            level: inner.level,
        })
    }
}

/// Recorded composition `inner(x) + outer(x + inner(x))` (bilinear, border clamp).
pub fn compose<T: Real>(tape: &mut Tape<T>, outer: Var, inner: Var) -> Result<Var> {
    let (so, si) = (tape.value(outer).shape(), tape.value(inner).shape());
    if so != si {
        return Err(Error::ShapeMismatch {
            op: "compose",
            lhs: so.to_vec(),
            rhs: si.to_vec(),
        });
    }
    let sampled = tape.warp_bilinear(outer, inner)?;
    tape.add(inner, sampled)
}

/// Recorded x2 field upsampling; displacement values are doubled.
pub fn upsample_field<T: Real>(tape: &mut Tape<T>, field: Var) -> Result<Var> {
    tape.upsample_linear2(field, lit(2.0))
}

/// `det(I + grad u)` per pixel; central differences inside, one-sided at the border.
pub fn jacobian_determinant<T: Real>(d: &DisplacementField<T>) -> Result<Tensor<T>> {
    let (h, w) = (d.height(), d.width());
    if h < 3 || w < 3 {
        return Err(Error::InvalidShape {
            shape: d.grid.shape().to_vec(),
            reason: "Jacobian analysis needs at least 3x3 pixels",
        });
    }
    let hw = h * w;
    // channels: du0/dy, du0/dx, du1/dy, du1/dx
    let g = kernels::spatial_grad_forward(d.grid.data(), (2, h, w));
    let mut det = vec![T::zero(); hw];
    for (i, v) in det.iter_mut().enumerate() {
        let a = T::one() + g[i];
        let b = g[hw + i];
        let c = g[2 * hw + i];
        let e = T::one() + g[3 * hw + i];
        *v = a * e - b * c;
    }
    Tensor::new(vec![1, h, w], det)
}

/// Regularity statistics of a deformation over interior pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JacobianStats {
    /// Fraction of interior pixels with `det <= 0`.
    pub folding_fraction: f64,
    /// Population standard deviation of `log(max(det, eps))`.
    pub std_log_jac: f64,
    pub min_det: f64,
}

impl JacobianStats {
    pub fn folding_percent(&self) -> f64 {
        100.0 * self.folding_fraction
    }
}

pub fn jacobian_stats<T: Real>(d: &DisplacementField<T>, eps: f64) -> Result<JacobianStats> {
    if !(eps > 0.0) {
        return Err(Error::InvalidConfig(alloc::format!("eps must be positive, got {eps}")));
    }
    let det = jacobian_determinant(d)?;
    let (h, w) = (d.height(), d.width());
    let mut folded = 0usize;
    let mut min_det = f64::INFINITY;
    let mut logs = alloc::vec::Vec::with_capacity((h - 2) * (w - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let v = det.data()[y * w + x].as_f64();
            if v <= 0.0 {
                folded += 1;
            }
            min_det = min_det.min(v);
            logs.push(Float::ln(v.max(eps)));
        }
    }
    let n = logs.len() as f64;
    let mean = logs.iter().sum::<f64>() / n;
    let var = logs.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / n;
    Ok(JacobianStats {
        folding_fraction: folded as f64 / n,
        std_log_jac: Float::sqrt(var),
        min_det,
    })
}
