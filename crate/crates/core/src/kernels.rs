//! Raw forward/backward kernels on `[C, H, W]` row-major buffers.
//!
//! The tape in `crate::tape` owns shapes and bookkeeping; everything here works
//! on plain slices.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::{lit, Real};

// ---------------------------------------------------------------------------
// 3x3 convolution, stride 1, zero padding 1

/// Unfolds `input[ci, h, w]` into a `[ci * 9, h * w]` patch matrix.
fn im2col<T: Real>(input: &[T], ci: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut cols = vec![T::zero(); ci * 9 * hw];
    for c in 0..ci {
        let plane = &input[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 9) + ky * 3 + kx) * hw..][..hw];
                // output x range whose source x + kx - 1 is in bounds
                let x_lo = if kx == 0 { 1 } else { 0 };
                let x_hi = if kx == 2 { w - 1 } else { w };
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    for x in x_lo..x_hi {
                        dst[x] = src[x + kx - 1];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds patch-matrix gradients back onto the input grid.
fn col2im<T: Real>(cols: &[T], ci: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut out = vec![T::zero(); ci * hw];
    for c in 0..ci {
        let plane = &mut out[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * 9) + ky * 3 + kx) * hw..][..hw];
                let x_lo = if kx == 0 { 1 } else { 0 };
                let x_hi = if kx == 2 { w - 1 } else { w };
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..][..w];
                    let src = &row[y * w..][..w];
                    for x in x_lo..x_hi {
                        dst[x + kx - 1] = dst[x + kx - 1] + src[x];
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_forward<T: Real>(
    input: &[T],
    (ci, h, w): (usize, usize, usize),
    weight: &[T],
    bias: &[T],
    co: usize,
) -> Vec<T> {
    let hw = h * w;
    let k = ci * 9;
    let cols = im2col(input, ci, h, w);
    let mut out = vec![T::zero(); co * hw];
    for (o, chunk) in out.chunks_mut(hw).enumerate() {
        chunk.fill(bias[o]);
    }
    T::gemm(
        co,
        k,
        hw,
        T::one(),
        weight,
        (k as isize, 1),
        &cols,
        (hw as isize, 1),
        T::one(),
        &mut out,
    );
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Real>(
    input: &[T],
    (ci, h, w): (usize, usize, usize),
    weight: &[T],
    co: usize,
    grad_out: &[T],
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads<T> {
    let hw = h * w;
    let k = ci * 9;
    let weight_grad = need_weight.then(|| {
        let cols = im2col(input, ci, h, w);
        let mut gw = vec![T::zero(); co * k];
        T::gemm(
            co,
            hw,
            k,
            T::one(),
            grad_out,
            (hw as isize, 1),
            &cols,
            (1, hw as isize),
            T::zero(),
            &mut gw,
        );
        gw
    });
    let bias_grad = need_bias.then(|| {
        grad_out
            .chunks(hw)
            .map(|row| row.iter().fold(T::zero(), |a, &b| a + b))
            .collect()
    });
    let input_grad = need_input.then(|| {
        let mut gcols = vec![T::zero(); k * hw];
        T::gemm(
            k,
            co,
            hw,
            T::one(),
            weight,
            (1, k as isize),
            grad_out,
            (hw as isize, 1),
            T::zero(),
            &mut gcols,
        );
        col2im(&gcols, ci, h, w)
    });
    ConvGrads {
        input: input_grad,
        weight: weight_grad,
        bias: bias_grad,
    }
}

// ---------------------------------------------------------------------------
// 2x2 average pooling and x2 linear upsampling

pub(crate) fn avg_pool2_forward<T: Real>(x: &[T], (c, h, w): (usize, usize, usize)) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = lit::<T>(0.25);
    let mut out = vec![T::zero(); c * ho * wo];
    for ch in 0..c {
        let src = &x[ch * h * w..];
        let dst = &mut out[ch * ho * wo..];
        for y in 0..ho {
            for xo in 0..wo {
                let a = src[2 * y * w + 2 * xo];
                let b = src[2 * y * w + 2 * xo + 1];
                let cc = src[(2 * y + 1) * w + 2 * xo];
                let d = src[(2 * y + 1) * w + 2 * xo + 1];
                dst[y * wo + xo] = (a + b + cc + d) * quarter;
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward<T: Real>(g: &[T], (c, h, w): (usize, usize, usize)) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = lit::<T>(0.25);
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[ch * h * w + y * w + x] = g[ch * ho * wo + (y / 2) * wo + x / 2] * quarter;
            }
        }
    }
    out
}

/// Source taps for output index `o` of a x2 upsampling of an axis of length `n`.
///
/// Output sample `o` sits at input coordinate `o / 2`, clamped to the last
/// input sample, so even outputs coincide with inputs and both corners align.
#[inline]
fn upsample_taps<T: Real>(o: usize, n: usize) -> (usize, usize, T) {
    let i0 = o / 2;
    let i1 = (i0 + 1).min(n - 1);
    let frac = if o % 2 == 1 && i1 != i0 { lit(0.5) } else { T::zero() };
    (i0, i1, frac)
}

pub(crate) fn upsample2_forward<T: Real>(x: &[T], (c, h, w): (usize, usize, usize), scale: T) -> Vec<T> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c * ho * wo];
    for ch in 0..c {
        let src = &x[ch * h * w..][..h * w];
        let dst = &mut out[ch * ho * wo..][..ho * wo];
        for oy in 0..ho {
            let (y0, y1, fy) = upsample_taps::<T>(oy, h);
            for ox in 0..wo {
                let (x0, x1, fx) = upsample_taps::<T>(ox, w);
                let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                dst[oy * wo + ox] = (top * (T::one() - fy) + bot * fy) * scale;
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Real>(g: &[T], (c, h, w): (usize, usize, usize), scale: T) -> Vec<T> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let src = &g[ch * ho * wo..][..ho * wo];
        let dst = &mut out[ch * h * w..][..h * w];
        for oy in 0..ho {
            let (y0, y1, fy) = upsample_taps::<T>(oy, h);
            for ox in 0..wo {
                let (x0, x1, fx) = upsample_taps::<T>(ox, w);
                let v = src[oy * wo + ox] * scale;
                let (gy0, gy1) = (v * (T::one() - fy), v * fy);
                dst[y0 * w + x0] = dst[y0 * w + x0] + gy0 * (T::one() - fx);
                dst[y0 * w + x1] = dst[y0 * w + x1] + gy0 * fx;
                dst[y1 * w + x0] = dst[y1 * w + x0] + gy1 * (T::one() - fx);
                dst[y1 * w + x1] = dst[y1 * w + x1] + gy1 * fx;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Bilinear sampling with border clamp

/// Sample position along one axis: lower tap, upper tap, fractional offset, and
/// whether the unclamped coordinate lies inside `[0, n - 1]` (outside, the
/// sample does not move with the coordinate).
#[derive(Clone, Copy)]
struct AxisTap<T> {
    i0: usize,
    i1: usize,
    frac: T,
    inside: bool,
}

#[inline]
fn axis_tap<T: Real>(p: T, n: usize) -> AxisTap<T> {
    if n == 1 {
        return AxisTap {
            i0: 0,
            i1: 0,
            frac: T::zero(),
            inside: false,
        };
    }
    let last = T::from_f64((n - 1) as f64);
    let inside = p >= T::zero() && p <= last;
    let pc = p.max(T::zero()).min(last);
    let i0 = pc.floor().as_f64().max(0.0) as usize;
    let i0 = i0.min(n - 2);
    let frac = pc - T::from_f64(i0 as f64);
    AxisTap {
        i0,
        i1: i0 + 1,
        frac,
        inside,
    }
}

#[inline]
fn taps<T: Real>(disp: &[T], hw: usize, y: usize, x: usize, h: usize, w: usize) -> (AxisTap<T>, AxisTap<T>) {
    let idx = y * w + x;
    let py = T::from_f64(y as f64) + disp[idx];
    let px = T::from_f64(x as f64) + disp[hw + idx];
    (axis_tap(py, h), axis_tap(px, w))
}

pub(crate) fn warp_forward<T: Real>(img: &[T], (c, h, w): (usize, usize, usize), disp: &[T]) -> Vec<T> {
    let hw = h * w;
    let mut out = vec![T::zero(); c * hw];
    for y in 0..h {
        for x in 0..w {
            let (ty, tx) = taps(disp, hw, y, x, h, w);
            for ch in 0..c {
                let p = &img[ch * hw..][..hw];
                let top = p[ty.i0 * w + tx.i0] * (T::one() - tx.frac) + p[ty.i0 * w + tx.i1] * tx.frac;
                let bot = p[ty.i1 * w + tx.i0] * (T::one() - tx.frac) + p[ty.i1 * w + tx.i1] * tx.frac;
                out[ch * hw + y * w + x] = top * (T::one() - ty.frac) + bot * ty.frac;
            }
        }
    }
    out
}

/// Corner values of the bilinear cell used for pixel `(y, x)` in one channel.
#[inline]
fn cell<T: Real>(p: &[T], w: usize, ty: &AxisTap<T>, tx: &AxisTap<T>) -> [T; 4] {
    [
        p[ty.i0 * w + tx.i0],
        p[ty.i0 * w + tx.i1],
        p[ty.i1 * w + tx.i0],
        p[ty.i1 * w + tx.i1],
    ]
}

/// Partial derivatives of the bilinear sample w.r.t. the row and column
/// sample coordinates (zero along an axis whose coordinate was clamped).
#[inline]
fn sample_slopes<T: Real>(v: [T; 4], ty: &AxisTap<T>, tx: &AxisTap<T>) -> (T, T) {
    let [i00, i01, i10, i11] = v;
    let one = T::one();
    let dy = if ty.inside {
        (one - tx.frac) * (i10 - i00) + tx.frac * (i11 - i01)
    } else {
        T::zero()
    };
    let dx = if tx.inside {
        (one - ty.frac) * (i01 - i00) + ty.frac * (i11 - i10)
    } else {
        T::zero()
    };
    (dy, dx)
}

pub(crate) fn warp_backward<T: Real>(
    img: &[T],
    (c, h, w): (usize, usize, usize),
    disp: &[T],
    g: &[T],
    need_img: bool,
    need_disp: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let hw = h * w;
    let mut gimg = need_img.then(|| vec![T::zero(); c * hw]);
    let mut gdisp = need_disp.then(|| vec![T::zero(); 2 * hw]);
    let one = T::one();
    for y in 0..h {
        for x in 0..w {
            let (ty, tx) = taps(disp, hw, y, x, h, w);
            let idx = y * w + x;
            for ch in 0..c {
                let up = g[ch * hw + idx];
                if let Some(gi) = gimg.as_mut() {
                    let gp = &mut gi[ch * hw..][..hw];
                    let (a, b) = (up * (one - ty.frac), up * ty.frac);
                    gp[ty.i0 * w + tx.i0] = gp[ty.i0 * w + tx.i0] + a * (one - tx.frac);
                    gp[ty.i0 * w + tx.i1] = gp[ty.i0 * w + tx.i1] + a * tx.frac;
                    gp[ty.i1 * w + tx.i0] = gp[ty.i1 * w + tx.i0] + b * (one - tx.frac);
                    gp[ty.i1 * w + tx.i1] = gp[ty.i1 * w + tx.i1] + b * tx.frac;
                }
                if let Some(gd) = gdisp.as_mut() {
                    let v = cell(&img[ch * hw..][..hw], w, &ty, &tx);
                    let (dy, dx) = sample_slopes(v, &ty, &tx);
                    gd[idx] = gd[idx] + up * dy;
                    gd[hw + idx] = gd[hw + idx] + up * dx;
                }
            }
        }
    }
    (gimg, gdisp)
}

/// Spatial derivative of the bilinear interpolant at the displaced positions:
/// output channel `2c` is d/d(row), `2c + 1` is d/d(col) of image channel `c`.
pub(crate) fn warp_slope_forward<T: Real>(img: &[T], (c, h, w): (usize, usize, usize), disp: &[T]) -> Vec<T> {
    let hw = h * w;
    let mut out = vec![T::zero(); 2 * c * hw];
    for y in 0..h {
        for x in 0..w {
            let (ty, tx) = taps(disp, hw, y, x, h, w);
            let idx = y * w + x;
            for ch in 0..c {
                let v = cell(&img[ch * hw..][..hw], w, &ty, &tx);
                let (dy, dx) = sample_slopes(v, &ty, &tx);
                out[2 * ch * hw + idx] = dy;
                out[(2 * ch + 1) * hw + idx] = dx;
            }
        }
    }
    out
}

pub(crate) fn warp_slope_backward<T: Real>(
    img: &[T],
    (c, h, w): (usize, usize, usize),
    disp: &[T],
    g: &[T],
    need_img: bool,
    need_disp: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let hw = h * w;
    let one = T::one();
    let mut gimg = need_img.then(|| vec![T::zero(); c * hw]);
    let mut gdisp = need_disp.then(|| vec![T::zero(); 2 * hw]);
    for y in 0..h {
        for x in 0..w {
            let (ty, tx) = taps(disp, hw, y, x, h, w);
            let idx = y * w + x;
            let iy = if ty.inside { one } else { T::zero() };
            let ix = if tx.inside { one } else { T::zero() };
            for ch in 0..c {
                let gy = g[2 * ch * hw + idx] * iy;
                let gx = g[(2 * ch + 1) * hw + idx] * ix;
                if let Some(gi) = gimg.as_mut() {
                    let gp = &mut gi[ch * hw..][..hw];
                    let (fy, fx) = (ty.frac, tx.frac);
                    let i00 = ty.i0 * w + tx.i0;
                    let i01 = ty.i0 * w + tx.i1;
                    let i10 = ty.i1 * w + tx.i0;
                    let i11 = ty.i1 * w + tx.i1;
                    gp[i00] = gp[i00] - gy * (one - fx) - gx * (one - fy);
                    gp[i01] = gp[i01] - gy * fx + gx * (one - fy);
                    gp[i10] = gp[i10] + gy * (one - fx) - gx * fy;
                    gp[i11] = gp[i11] + gy * fx + gx * fy;
                }
                if let Some(gd) = gdisp.as_mut() {
                    let [i00, i01, i10, i11] = cell(&img[ch * hw..][..hw], w, &ty, &tx);
                    // mixed second derivative; the pure ones vanish inside a cell
                    let mixed = (i11 - i01) - (i10 - i00);
                    gd[idx] = gd[idx] + gx * iy * mixed;
                    gd[hw + idx] = gd[hw + idx] + gy * ix * mixed;
                }
            }
        }
    }
    (gimg, gdisp)
}

// ---------------------------------------------------------------------------
// Central-difference spatial gradient

pub(crate) fn spatial_grad_forward<T: Real>(x: &[T], (c, h, w): (usize, usize, usize)) -> Vec<T> {
    let hw = h * w;
    let half = lit::<T>(0.5);
    let mut out = vec![T::zero(); 2 * c * hw];
    for ch in 0..c {
        let p = &x[ch * hw..][..hw];
        let (gy, gx) = out[2 * ch * hw..(2 * ch + 2) * hw].split_at_mut(hw);
        for y in 0..h {
            for xx in 0..w {
                let i = y * w + xx;
                gy[i] = if y == 0 {
                    p[i + w] - p[i]
                } else if y == h - 1 {
                    p[i] - p[i - w]
                } else {
                    (p[i + w] - p[i - w]) * half
                };
                gx[i] = if xx == 0 {
                    p[i + 1] - p[i]
                } else if xx == w - 1 {
                    p[i] - p[i - 1]
                } else {
                    (p[i + 1] - p[i - 1]) * half
                };
            }
        }
    }
    out
}

pub(crate) fn spatial_grad_backward<T: Real>(g: &[T], (c, h, w): (usize, usize, usize)) -> Vec<T> {
    let hw = h * w;
    let half = lit::<T>(0.5);
    let mut out = vec![T::zero(); c * hw];
    for ch in 0..c {
        let gy = &g[2 * ch * hw..][..hw];
        let gx = &g[(2 * ch + 1) * hw..][..hw];
        let o = &mut out[ch * hw..][..hw];
        for y in 0..h {
            for xx in 0..w {
                let i = y * w + xx;
                let v = gy[i];
                if y == 0 {
                    o[i + w] = o[i + w] + v;
                    o[i] = o[i] - v;
                } else if y == h - 1 {
                    o[i] = o[i] + v;
                    o[i - w] = o[i - w] - v;
                } else {
                    o[i + w] = o[i + w] + v * half;
                    o[i - w] = o[i - w] - v * half;
                }
                let v = gx[i];
                if xx == 0 {
                    o[i + 1] = o[i + 1] + v;
                    o[i] = o[i] - v;
                } else if xx == w - 1 {
                    o[i] = o[i] + v;
                    o[i - 1] = o[i - 1] - v;
                } else {
                    o[i + 1] = o[i + 1] + v * half;
                    o[i - 1] = o[i - 1] - v * half;
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Windowed mean over the valid (in-image) part of a square window

/// One separable pass of the windowed mean along `len`-long lines.
/// `transpose` applies the adjoint operator instead.
#[allow(clippy::too_many_arguments)]
fn box_pass<T: Real>(
    src: &[T],
    dst: &mut [T],
    lines: usize,
    len: usize,
    line_stride: usize,
    elem_stride: usize,
    radius: usize,
    transpose: bool,
) {
    for l in 0..lines {
        let base = l * line_stride;
        for i in 0..len {
            let lo = i.saturating_sub(radius);
            let hi = (i + radius).min(len - 1);
            if transpose {
                // dst[j] = sum over windows i containing j of src[i] / count(i)
                let mut acc = T::zero();
                for k in lo..=hi {
                    let klo = k.saturating_sub(radius);
                    let khi = (k + radius).min(len - 1);
                    let count = T::from_f64((khi - klo + 1) as f64);
                    acc = acc + src[base + k * elem_stride] / count;
                }
                dst[base + i * elem_stride] = acc;
            } else {
                let mut acc = T::zero();
                for k in lo..=hi {
                    acc = acc + src[base + k * elem_stride];
                }
                dst[base + i * elem_stride] = acc / T::from_f64((hi - lo + 1) as f64);
            }
        }
    }
}

pub(crate) fn box_mean<T: Real>(x: &[T], (c, h, w): (usize, usize, usize), window: usize, transpose: bool) -> Vec<T> {
    let hw = h * w;
    let r = window / 2;
    let mut tmp = vec![T::zero(); c * hw];
    let mut out = vec![T::zero(); c * hw];
    for ch in 0..c {
        let s = &x[ch * hw..][..hw];
        let t = &mut tmp[ch * hw..][..hw];
        box_pass(s, t, h, w, w, 1, r, transpose);
        let o = &mut out[ch * hw..][..hw];
        box_pass(t, o, w, h, 1, w, r, transpose);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_col2im_are_adjoint() {
        let (ci, h, w) = (2, 3, 4);
        let x: Vec<f64> = (0..ci * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..ci * 9 * h * w).map(|i| (i as f64 * 0.11).cos()).collect();
        let ax = im2col(&x, ci, h, w);
        let aty = col2im(&y, ci, h, w);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn box_mean_transpose_is_adjoint() {
        let dims = (1, 5, 7);
        let x: Vec<f64> = (0..35).map(|i| (i as f64 * 0.3).sin()).collect();
        let y: Vec<f64> = (0..35).map(|i| (i as f64 * 0.7).cos()).collect();
        let bx = box_mean(&x, dims, 3, false);
        let bty = box_mean(&y, dims, 3, true);
        let lhs: f64 = bx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&bty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn box_mean_of_constant_is_constant() {
        let x = vec![3.0f64; 4 * 6];
        for v in box_mean(&x, (1, 4, 6), 5, false) {
            assert!((v - 3.0).abs() < 1e-14);
        }
    }
}
