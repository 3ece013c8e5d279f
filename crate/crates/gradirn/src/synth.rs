//! Synthetic image pairs with known deformations.
//!
//! A pair is a moving image made of a few smooth ellipses and rings on a dark
//! background, and a fixed image obtained by warping it with a smooth random
//! displacement field. Both carry label maps and independent noise.

use gradirn_core::evaluation::warp_labels;
use gradirn_core::{jacobian_stats, DisplacementField, LabelMask, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const BACKGROUND: f64 = 0.1;
pub const NOISE_SIGMA: f64 = 0.01;
pub const TEXTURE_SMOOTHNESS: f64 = 2.0;
pub const MIN_INTERIOR_DET: f64 = 0.1;
pub const MAX_HALVINGS: usize = 10;
const INTENSITIES: [f64; 5] = [0.35, 0.5, 0.65, 0.8, 0.95];
const RING_INNER: f64 = 0.6;
const EDGE_WIDTH: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    /// Image side length; a power of two, at least 32.
    pub size: usize,
    /// Maximum displacement magnitude in pixels before any rejection halving.
    pub deform_scale: f64,
    /// Standard deviation in pixels of the Gaussian that smooths the field.
    pub smoothness: f64,
    /// Standard deviation of the smooth intensity texture laid over the image.
    pub texture: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            size: 64,
            deform_scale: 4.0,
            smoothness: 10.0,
            texture: 0.15,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.size < 32 || !self.size.is_power_of_two() {
            return Err(Error::Synth(format!(
                "size must be a power of two >= 32, got {}",
                self.size
            )));
        }
        if !(self.deform_scale >= 0.0) || !self.deform_scale.is_finite() {
            return Err(Error::Synth(format!(
                "deform_scale must be >= 0, got {}",
                self.deform_scale
            )));
        }
        if !(self.smoothness > 0.0) || !self.smoothness.is_finite() {
            return Err(Error::Synth(format!("smoothness must be > 0, got {}", self.smoothness)));
        }
        if !(self.texture >= 0.0) || !self.texture.is_finite() {
            return Err(Error::Synth(format!("texture must be >= 0, got {}", self.texture)));
        }
        Ok(())
    }
}

/// One registration problem.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub id: String,
    pub moving: Tensor<f32>,
    pub fixed: Tensor<f32>,
    pub moving_seg: Option<LabelMask>,
    pub fixed_seg: Option<LabelMask>,
    pub gt_disp: Option<DisplacementField<f32>>,
}

/// Dataset split a generated pair belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// RNG of pair `index`: seeded by the master seed, one stream per pair, with
/// validation pairs on streams disjoint from training pairs.
pub fn pair_rng(master_seed: u64, split: Split, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    let base = match split {
        Split::Train => 0,
        Split::Val => 1 << 63,
    };
    rng.set_stream(base | index);
    rng
}

#[derive(Debug, Clone, Copy)]
struct Shape {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    cos: f64,
    sin: f64,
    ring: bool,
    intensity: f64,
}

impl Shape {
    /// Approximate signed distance in pixels; negative inside.
    fn distance(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = self.cos * dy + self.sin * dx;
        let v = -self.sin * dy + self.cos * dx;
        let r = ((u / self.ry).powi(2) + (v / self.rx).powi(2)).sqrt();
        let scale = (self.ry * self.rx).sqrt();
        if self.ring {
            (r - 1.0).max(RING_INNER - r) * scale
        } else {
            (r - 1.0) * scale
        }
    }
}

fn random_shapes(rng: &mut ChaCha8Rng, size: usize) -> Vec<Shape> {
    let s = size as f64;
    let n = rng.random_range(2..=4usize);
    let mut levels = INTENSITIES;
    levels.shuffle(rng);
    (0..n)
        .map(|k| {
            let ring = rng.random_bool(0.5);
            let (lo, hi) = if ring { (0.14, 0.24) } else { (0.09, 0.2) };
            let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
            Shape {
                cy: rng.random_range(0.3 * s..0.7 * s),
                cx: rng.random_range(0.3 * s..0.7 * s),
                ry: rng.random_range(lo * s..hi * s),
                rx: rng.random_range(lo * s..hi * s),
                cos: angle.cos(),
                sin: angle.sin(),
                ring,
                intensity: levels[k],
            }
        })
        .collect()
}

/// Renders the noise-free image and its label map; later shapes cover earlier
/// ones. `texture` is added on top of everything.
fn render(shapes: &[Shape], texture: &Tensor<f64>, size: usize) -> (Tensor<f64>, LabelMask) {
    let mut img = vec![BACKGROUND; size * size];
    let mut labels = vec![0u8; size * size];
    for (k, sh) in shapes.iter().enumerate() {
        for y in 0..size {
            for x in 0..size {
                let d = sh.distance(y as f64, x as f64);
                let a = 1.0 / (1.0 + (d / EDGE_WIDTH).exp());
                let i = y * size + x;
                img[i] = img[i] * (1.0 - a) + sh.intensity * a;
                if d < 0.0 {
                    labels[i] = k as u8 + 1;
                }
            }
        }
    }
    for (v, t) in img.iter_mut().zip(texture.data()) {
        *v = (*v + t).clamp(0.0, 1.0);
    }
    (
        Tensor::new(vec![1, size, size], img).expect("valid shape"),
        LabelMask::new(size, size, labels).expect("labels come from the grid"),
    )
}

/// Separable Gaussian blur of each channel with border clamp.
pub fn gaussian_blur(t: &Tensor<f64>, sigma: f64) -> Tensor<f64> {
    let shape = t.shape().to_vec();
    let (c, h, w) = t.chw().expect("3-d tensor");
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let pass = |src: &[f64], along_rows: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for ch in 0..c {
            let off = ch * h * w;
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (j, k) in kernel.iter().enumerate() {
                        let o = j as isize - radius;
                        let (sy, sx) = if along_rows {
                            ((y as isize + o).clamp(0, h as isize - 1) as usize, x)
                        } else {
                            (y, (x as isize + o).clamp(0, w as isize - 1) as usize)
                        };
                        acc += k * src[off + sy * w + sx];
                    }
                    out[off + y * w + x] = acc;
                }
            }
        }
        out
    };
    let a = pass(t.data(), true);
    let b = pass(&a, false);
    Tensor::new(shape, b).expect("same shape")
}

/// Stationary smooth Gaussian noise: a padded white-noise grid is blurred and
/// cropped so the statistics do not depend on the distance to the border.
fn smooth_noise(rng: &mut ChaCha8Rng, channels: usize, n: usize, sigma: f64) -> Tensor<f64> {
    let pad = (3.0 * sigma).ceil() as usize;
    let m = n + 2 * pad;
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let raw = Tensor::from_fn(&[channels, m, m], |_| normal.sample(rng));
    let blurred = gaussian_blur(&raw, sigma);
    Tensor::from_fn(&[channels, n, n], |i| {
        let (c, y, x) = (i / (n * n), i / n % n, i % n);
        blurred.data()[c * m * m + (y + pad) * m + x + pad]
    })
}

/// Zero-mean texture with standard deviation `amplitude`.
fn random_texture(rng: &mut ChaCha8Rng, n: usize, amplitude: f64) -> Tensor<f64> {
    let t = smooth_noise(rng, 1, n, TEXTURE_SMOOTHNESS);
    let mean = t.mean();
    let sd = (t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t.numel() as f64).sqrt();
    if amplitude == 0.0 || sd == 0.0 {
        return Tensor::zeros(t.shape());
    }
    t.map(|v| (v - mean) / sd * amplitude)
}

/// Smooth random field with maximum magnitude `deform_scale`, halved until
/// its interior Jacobian determinant stays above [`MIN_INTERIOR_DET`].
fn random_field(rng: &mut ChaCha8Rng, p: &SynthParams) -> Result<DisplacementField<f64>> {
    let n = p.size;
    let smooth = smooth_noise(rng, 2, n, p.smoothness);
    let nn = n * n;
    let max_mag = (0..nn)
        .map(|i| smooth.data()[i].hypot(smooth.data()[nn + i]))
        .fold(0.0, f64::max);
    let mut amp = if max_mag > 0.0 { p.deform_scale / max_mag } else { 0.0 };
    for _ in 0..=MAX_HALVINGS {
        let field = DisplacementField::new(smooth.map(|v| v * amp), 0)?;
        if jacobian_stats(&field, 1e-6)?.min_det > MIN_INTERIOR_DET {
            return Ok(field);
        }
        amp *= 0.5;
    }
    Err(Error::Synth(format!(
        "no admissible field after {MAX_HALVINGS} halvings (deform_scale {}, smoothness {})",
        p.deform_scale, p.smoothness
    )))
}

fn warp_image(img: &Tensor<f64>, field: &DisplacementField<f64>) -> Result<Tensor<f64>> {
    let mut tape = Tape::inference();
    let i = tape.constant(img.clone());
    let d = tape.constant(field.grid().clone());
    let w = tape.warp_bilinear(i, d)?;
    Ok(tape.value(w).clone())
}

fn add_noise(rng: &mut ChaCha8Rng, img: &Tensor<f64>) -> Tensor<f32> {
    let normal = Normal::new(0.0, NOISE_SIGMA).expect("valid normal");
    let noisy: Vec<f32> = img
        .data()
        .iter()
        .map(|&v| (v + normal.sample(rng)).clamp(0.0, 1.0) as f32)
        .collect();
    Tensor::new(img.shape().to_vec(), noisy).expect("same shape")
}

/// Generates one pair from `rng`.
pub fn synth_pair(rng: &mut ChaCha8Rng, id: impl Into<String>, p: &SynthParams) -> Result<SamplePair> {
    p.validate()?;
    let shapes = random_shapes(rng, p.size);
    let texture = random_texture(rng, p.size, p.texture);
    let (base, moving_seg) = render(&shapes, &texture, p.size);
    let gt = random_field(rng, p)?;
    let fixed_base = warp_image(&base, &gt)?;
    let fixed_seg = warp_labels(&moving_seg, &gt)?;
    let moving = add_noise(rng, &base);
    let fixed = add_noise(rng, &fixed_base);
    Ok(SamplePair {
        id: id.into(),
        moving,
        fixed,
        moving_seg: Some(moving_seg),
        fixed_seg: Some(fixed_seg),
        gt_disp: Some(DisplacementField::new(gt.grid().cast(), 0)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_scale_gives_identity_field() {
        let p = SynthParams {
            deform_scale: 0.0,
            ..Default::default()
        };
        let pair = synth_pair(&mut pair_rng(3, Split::Train, 0), "a", &p).unwrap();
        let gt = pair.gt_disp.unwrap();
        assert!(gt.grid().data().iter().all(|&v| v == 0.0));
        assert_eq!(pair.moving_seg, pair.fixed_seg);
        let diff = pair
            .moving
            .data()
            .iter()
            .zip(pair.fixed.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(diff < 0.1, "noise-only difference, got {diff}");
    }

    #[test]
    fn fields_are_admissible_and_deterministic() {
        let p = SynthParams::default();
        for i in 0..5 {
            let a = synth_pair(&mut pair_rng(11, Split::Train, i), "x", &p).unwrap();
            let b = synth_pair(&mut pair_rng(11, Split::Train, i), "x", &p).unwrap();
            assert_eq!(a, b);
            let gt = a.gt_disp.as_ref().unwrap();
            assert!(jacobian_stats(gt, 1e-6).unwrap().min_det > MIN_INTERIOR_DET);
            assert!(a.moving.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let labels = a.moving_seg.as_ref().unwrap().labels().len();
            assert!((1..=4).contains(&labels));
        }
        let t = synth_pair(&mut pair_rng(11, Split::Train, 0), "x", &p).unwrap();
        let v = synth_pair(&mut pair_rng(11, Split::Val, 0), "x", &p).unwrap();
        assert_ne!(t.moving, v.moving);
    }

    #[test]
    fn rejects_bad_params() {
        let mut rng = pair_rng(0, Split::Train, 0);
        for p in [
            SynthParams {
                size: 16,
                ..Default::default()
            },
            SynthParams {
                size: 48,
                ..Default::default()
            },
            SynthParams {
                deform_scale: -1.0,
                ..Default::default()
            },
        ] {
            assert!(synth_pair(&mut rng, "x", &p).is_err());
        }
        let wild = SynthParams {
            deform_scale: 1e6,
            smoothness: 0.3,
            ..Default::default()
        };
        assert!(matches!(synth_pair(&mut rng, "x", &wild), Err(Error::Synth(_))));
    }

    #[test]
    fn blur_preserves_constants() {
        let t = Tensor::full(&[2, 8, 8], 0.7);
        assert!(gaussian_blur(&t, 2.0).data().iter().all(|v| (v - 0.7).abs() < 1e-12));
    }
}
