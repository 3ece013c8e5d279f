//! Overlap and boundary metrics on label maps, plus per-pair summaries.

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::registration::RegistrationOutcome;
use crate::transform::DisplacementField;

/// Integer label map; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    grid: Vec<u8>,
    labels: Vec<u8>,
}

impl LabelMask {
    /// Builds a mask whose label set is the sorted set of nonzero values.
    pub fn new(height: usize, width: usize, grid: Vec<u8>) -> Result<Self> {
        let mut labels: Vec<u8> = grid.iter().copied().filter(|&v| v != 0).collect();
        labels.sort_unstable();
        labels.dedup();
        Self::with_labels(height, width, grid, labels)
    }

    /// Builds a mask with an explicit label set, which may list labels absent
    /// from the grid.
    pub fn with_labels(height: usize, width: usize, grid: Vec<u8>, mut labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || grid.len() != height * width {
            return Err(Error::InvalidShape {
                shape: alloc::vec![height, width],
                reason: "label grid length must equal height * width",
            });
        }
        labels.sort_unstable();
        labels.dedup();
        if labels.contains(&0) {
            return Err(Error::InvalidConfig(
                "label 0 is background and cannot be in the label set".into(),
            ));
        }
        if let Some(v) = grid.iter().find(|&&v| v != 0 && labels.binary_search(&v).is_err()) {
            return Err(Error::InvalidConfig(format!("label {v} is missing from the label set")));
        }
        Ok(Self {
            height,
            width,
            grid,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn grid(&self) -> &[u8] {
        &self.grid
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.grid[y * self.width + x]
    }

    pub fn count(&self, label: u8) -> usize {
        self.grid.iter().filter(|&&v| v == label).count()
    }

    fn same_size(&self, other: &Self, op: &'static str) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: alloc::vec![self.height, self.width],
                rhs: alloc::vec![other.height, other.width],
            });
        }
        Ok(())
    }

    /// Pixels of `label` with at least one 4-neighbour that is not `label`
    /// or lies off the grid.
    pub fn boundary(&self, label: u8) -> Vec<(usize, usize)> {
        let (h, w) = (self.height, self.width);
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if self.get(y, x) != label {
                    continue;
                }
                let edge = y == 0
                    || x == 0
                    || y + 1 == h
                    || x + 1 == w
                    || self.get(y - 1, x) != label
                    || self.get(y + 1, x) != label
                    || self.get(y, x - 1) != label
                    || self.get(y, x + 1) != label;
                if edge {
                    out.push((y, x));
                }
            }
        }
        out
    }
}

/// Nearest-neighbour resampling of `mask` at `x + d(x)` with border clamp.
pub fn warp_labels<T: Real>(mask: &LabelMask, d: &DisplacementField<T>) -> Result<LabelMask> {
    let (h, w) = (mask.height, mask.width);
    if (d.height(), d.width()) != (h, w) {
        return Err(Error::ShapeMismatch {
            op: "warp_labels",
            lhs: alloc::vec![h, w],
            rhs: alloc::vec![d.height(), d.width()],
        });
    }
    let near = |p: f64, n: usize| -> usize {
        let r = Float::round(p);
        if !(r > 0.0) {
            0
        } else if r >= (n - 1) as f64 {
            n - 1
        } else {
            r as usize
        }
    };
    let mut grid = alloc::vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = d.at(y, x);
            let sy = near(y as f64 + dy.as_f64(), h);
            let sx = near(x as f64 + dx.as_f64(), w);
            grid[y * w + x] = mask.get(sy, sx);
        }
    }
    Ok(LabelMask {
        height: h,
        width: w,
        grid,
        labels: mask.labels.clone(),
    })
}

/// Dice overlap `2|A n B| / (|A| + |B|)` of one label; 1 when both regions
/// are empty.
pub fn dice(a: &LabelMask, b: &LabelMask, label: u8) -> Result<f64> {
    a.same_size(b, "dice")?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&u, &v) in a.grid.iter().zip(&b.grid) {
        let (ia, ib) = (u == label, v == label);
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Symmetric Hausdorff distance between the label boundaries, in pixels.
pub fn hausdorff(a: &LabelMask, b: &LabelMask, label: u8) -> Result<f64> {
    hausdorff_percentile(a, b, label, 100.0)
}

/// Like [`hausdorff`] but each directed distance is the `pct`-th percentile
/// (nearest rank) of the point-to-set distances instead of their maximum.
pub fn hausdorff_percentile(a: &LabelMask, b: &LabelMask, label: u8, pct: f64) -> Result<f64> {
    a.same_size(b, "hausdorff")?;
    if !(pct > 0.0 && pct <= 100.0) {
        return Err(Error::InvalidConfig(format!(
            "percentile must be in (0, 100], got {pct}"
        )));
    }
    let ba = a.boundary(label);
    if ba.is_empty() {
        return Err(Error::EmptyRegion { label, side: "first" });
    }
    let bb = b.boundary(label);
    if bb.is_empty() {
        return Err(Error::EmptyRegion { label, side: "second" });
    }
    Ok(directed(&ba, &bb, pct).max(directed(&bb, &ba, pct)))
}

fn directed(from: &[(usize, usize)], to: &[(usize, usize)], pct: f64) -> f64 {
    let mut d2: Vec<usize> = from
        .iter()
        .map(|&(y, x)| {
            to.iter()
                .map(|&(v, u)| {
                    let (dy, dx) = (y.abs_diff(v), x.abs_diff(u));
                    dy * dy + dx * dx
                })
                .min()
                .expect("nonempty")
        })
        .collect();
    let k = if pct >= 100.0 {
        d2.len() - 1
    } else {
        let rank = Float::ceil(pct / 100.0 * d2.len() as f64) as usize;
        rank.clamp(1, d2.len()) - 1
    };
    let (_, v, _) = d2.select_nth_unstable(k);
    Float::sqrt(*v as f64)
}

/// Mean Euclidean distance between two displacement fields.
pub fn endpoint_error<T: Real>(est: &DisplacementField<T>, gt: &DisplacementField<T>) -> Result<f64> {
    if est.grid().shape() != gt.grid().shape() {
        return Err(Error::ShapeMismatch {
            op: "endpoint_error",
            lhs: est.grid().shape().to_vec(),
            rhs: gt.grid().shape().to_vec(),
        });
    }
    let (h, w) = (gt.height(), gt.width());
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let (a, b) = est.at(y, x);
            let (c, d) = gt.at(y, x);
            let (dy, dx) = ((a - c).as_f64(), (b - d).as_f64());
            total += Float::sqrt(dy * dy + dx * dx);
        }
    }
    Ok(total / (h * w) as f64)
}

/// Mean displacement magnitude of a field.
pub fn mean_magnitude<T: Real>(d: &DisplacementField<T>) -> f64 {
    let (h, w) = (d.height(), d.width());
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let (a, b) = d.at(y, x);
            let (a, b) = (a.as_f64(), b.as_f64());
            total += Float::sqrt(a * a + b * b);
        }
    }
    total / (h * w) as f64
}

/// Sample mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Returns `None` for an empty input.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: Float::sqrt(var),
        })
    }
}

/// Metrics of one label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelScore {
    pub label: u8,
    pub dice: f64,
    pub initial_dice: f64,
    /// `None` when the label is missing from either mask.
    pub hausdorff: Option<f64>,
}

/// Everything measured for one registered pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairMetrics {
    pub labels: Vec<LabelScore>,
    pub mean_dice: f64,
    pub initial_mean_dice: f64,
    /// Mean over the labels whose distance is defined.
    pub mean_hausdorff: Option<f64>,
    pub folding_percent: f64,
    pub std_log_jac: f64,
    pub endpoint_error: Option<f64>,
    pub gt_magnitude: Option<f64>,
    pub dissimilarity_before: f64,
    pub dissimilarity_after: f64,
}

/// Scores a registration against the fixed mask (and ground truth, if any).
/// Labels are the union of both masks' label sets.
pub fn pair_metrics<T: Real>(
    outcome: &RegistrationOutcome<T>,
    moving_seg: &LabelMask,
    fixed_seg: &LabelMask,
    gt: Option<&DisplacementField<T>>,
) -> Result<PairMetrics> {
    moving_seg.same_size(fixed_seg, "pair_metrics")?;
    let warped = warp_labels(moving_seg, &outcome.field)?;
    let mut labels: Vec<u8> = moving_seg.labels.iter().chain(&fixed_seg.labels).copied().collect();
    labels.sort_unstable();
    labels.dedup();
    let mut scores = Vec::with_capacity(labels.len());
    for &label in &labels {
        let hd = match hausdorff(&warped, fixed_seg, label) {
            Ok(v) => Some(v),
            Err(Error::EmptyRegion { .. }) => None,
            Err(e) => return Err(e),
        };
        scores.push(LabelScore {
            label,
            dice: dice(&warped, fixed_seg, label)?,
            initial_dice: dice(moving_seg, fixed_seg, label)?,
            hausdorff: hd,
        });
    }
    let mean = |f: fn(&LabelScore) -> f64| {
        if scores.is_empty() {
            1.0
        } else {
            scores.iter().map(f).sum::<f64>() / scores.len() as f64
        }
    };
    let hds: Vec<f64> = scores.iter().filter_map(|s| s.hausdorff).collect();
    Ok(PairMetrics {
        mean_dice: mean(|s| s.dice),
        initial_mean_dice: mean(|s| s.initial_dice),
        mean_hausdorff: MeanStd::of(&hds).map(|m| m.mean),
        labels: scores,
        folding_percent: outcome.stats.folding_percent(),
        std_log_jac: outcome.stats.std_log_jac,
        endpoint_error: gt.map(|g| endpoint_error(&outcome.field, g)).transpose()?,
        gt_magnitude: gt.map(mean_magnitude),
        dissimilarity_before: outcome.dissimilarity_before.as_f64(),
        dissimilarity_after: outcome.dissimilarity_after.as_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn mask(h: usize, w: usize, g: &[u8]) -> LabelMask {
        LabelMask::new(h, w, g.to_vec()).unwrap()
    }

    #[test]
    fn warp_examples() {
        let m = mask(1, 3, &[1, 2, 3]);
        let z = DisplacementField::<f64>::zeros(1, 3, 0);
        assert_eq!(warp_labels(&m, &z).unwrap(), m);
        let s = DisplacementField::from_fn(1, 3, 0, |_, _| (0.0, 1.0));
        assert_eq!(warp_labels(&m, &s).unwrap().grid(), &[2, 3, 3]);
        let bad = DisplacementField::<f64>::zeros(2, 3, 0);
        assert!(warp_labels(&m, &bad).is_err());
    }

    #[test]
    fn dice_examples() {
        let a = mask(2, 4, &[1, 1, 1, 1, 0, 0, 0, 0]);
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
        let b = mask(2, 4, &[0, 0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.0);
        let c = mask(2, 4, &[0, 0, 1, 1, 1, 1, 0, 0]);
        assert_eq!(dice(&a, &c, 1).unwrap(), 0.5);
        assert_eq!(dice(&a, &c, 7).unwrap(), 1.0);
        let e = mask(2, 4, &[0; 8]);
        assert_eq!(dice(&a, &e, 1).unwrap(), 0.0);
    }

    #[test]
    fn hausdorff_examples() {
        let mut g = vec![0u8; 20];
        g[0] = 1;
        let a = mask(4, 5, &g);
        let mut g = vec![0u8; 20];
        g[3 * 5 + 4] = 1;
        let b = mask(4, 5, &g);
        assert_eq!(hausdorff(&a, &b, 1).unwrap(), 5.0);
        assert_eq!(hausdorff(&b, &a, 1).unwrap(), 5.0);
        assert_eq!(hausdorff(&a, &a, 1).unwrap(), 0.0);
        match hausdorff(&a, &b, 2) {
            Err(Error::EmptyRegion { side, .. }) => assert_eq!(side, "first"),
            other => panic!("unexpected {other:?}"),
        }
        let empty = mask(4, 5, &[0; 20]);
        match hausdorff(&a, &empty, 1) {
            Err(Error::EmptyRegion { side, .. }) => assert_eq!(side, "second"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn boundary_is_four_connected() {
        let a = mask(
            5,
            5,
            &[
                0, 0, 0, 0, 0, //
                0, 1, 1, 1, 0, //
                0, 1, 1, 1, 0, //
                0, 1, 1, 1, 0, //
                0, 0, 0, 0, 0,
            ],
        );
        let b = a.boundary(1);
        assert_eq!(b.len(), 8);
        assert!(!b.contains(&(2, 2)));
    }

    #[test]
    fn percentile_never_exceeds_full_distance() {
        let a = mask(3, 6, &[1, 1, 0, 0, 0, 0, 1, 1, 0, 0, 0, 0, 1, 1, 0, 0, 0, 1]);
        let b = mask(3, 6, &[1, 1, 0, 0, 0, 0, 1, 1, 0, 0, 0, 0, 1, 1, 0, 0, 0, 0]);
        let full = hausdorff(&a, &b, 1).unwrap();
        assert_eq!(full, 4.0);
        assert!(hausdorff_percentile(&a, &b, 1, 50.0).unwrap() <= full);
        assert_eq!(hausdorff_percentile(&a, &b, 1, 50.0).unwrap(), 0.0);
    }

    #[test]
    fn label_set_validation() {
        assert!(LabelMask::with_labels(1, 2, vec![1, 2], vec![1]).is_err());
        assert!(LabelMask::with_labels(1, 2, vec![1, 0], vec![0, 1]).is_err());
        assert!(LabelMask::new(2, 2, vec![1, 2]).is_err());
        let m = LabelMask::with_labels(1, 2, vec![1, 0], vec![1, 4]).unwrap();
        assert_eq!(m.labels(), &[1, 4]);
    }

    #[test]
    fn endpoint_error_of_constant_offset() {
        let a = DisplacementField::from_fn(3, 3, 0, |_, _| (3.0, 4.0));
        let z = DisplacementField::<f64>::zeros(3, 3, 0);
        assert_eq!(endpoint_error(&a, &z).unwrap(), 5.0);
        assert_eq!(mean_magnitude(&a), 5.0);
    }

    #[test]
    fn mean_std() {
        let s = MeanStd::of(&[1.0, 3.0]).unwrap();
        assert_eq!((s.mean, s.std), (2.0, 1.0));
        assert!(MeanStd::of(&[]).is_none());
    }
}
