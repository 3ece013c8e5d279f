use gradirn_core::similarity::{dissimilarity_gradient_value, dissimilarity_value, warped_dissimilarity};
use gradirn_core::{
    dice, hausdorff, jacobian_stats, warp_labels, DisplacementField, LabelMask, SimilarityKind, Tape, Tensor,
};
use proptest::prelude::*;

fn image(h: usize, w: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(0.0..1.0f64, h * w).prop_map(move |d| Tensor::new(vec![1, h, w], d).unwrap())
}

fn mask(h: usize, w: usize) -> impl Strategy<Value = LabelMask> {
    prop::collection::vec(0u8..4, h * w).prop_map(move |g| LabelMask::new(h, w, g).unwrap())
}

/// Smooth image from a few random Gaussian blobs.
fn smooth(h: usize, w: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec((0.0..h as f64, 0.0..w as f64, 2.0..5.0f64, 0.2..0.8f64), 2..5).prop_map(move |blobs| {
        Tensor::from_fn(&[1, h, w], |i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            0.1 + blobs
                .iter()
                .map(|&(cy, cx, r, a)| a * (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * r * r)).exp())
                .sum::<f64>()
        })
    })
}

fn warp(img: &Tensor<f64>, disp: &Tensor<f64>) -> Tensor<f64> {
    let mut t = Tape::inference();
    let (i, d) = (t.constant(img.clone()), t.constant(disp.clone()));
    let o = t.warp_bilinear(i, d).unwrap();
    t.value(o).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn zero_displacement_is_identity(img in image(7, 9)) {
        prop_assert_eq!(warp(&img, &Tensor::zeros(&[2, 7, 9])), img);
    }

    #[test]
    fn warp_stays_within_image_range(img in image(6, 6), d in prop::collection::vec(-8.0..8.0f64, 72)) {
        let out = warp(&img, &Tensor::new(vec![2, 6, 6], d).unwrap());
        let lo = img.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = img.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(out.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }

    #[test]
    fn dice_is_symmetric_and_bounded(a in mask(5, 6), b in mask(5, 6), label in 1u8..4) {
        let (x, y) = (dice(&a, &b, label).unwrap(), dice(&b, &a, label).unwrap());
        prop_assert_eq!(x, y);
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(dice(&a, &a, label).unwrap(), 1.0);
    }

    #[test]
    fn hausdorff_is_symmetric(a in mask(5, 6), b in mask(5, 6)) {
        match (hausdorff(&a, &b, 1), hausdorff(&b, &a, 1)) {
            (Ok(x), Ok(y)) => {
                prop_assert_eq!(x, y);
                prop_assert!(x >= 0.0);
            }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "asymmetric failure"),
        }
    }

    #[test]
    fn warped_labels_are_a_subset(m in mask(6, 5), d in prop::collection::vec(-3.0..3.0f64, 60)) {
        let field = DisplacementField::new(Tensor::new(vec![2, 6, 5], d).unwrap(), 0).unwrap();
        let out = warp_labels(&m, &field).unwrap();
        prop_assert!(out.grid().iter().all(|v| m.grid().contains(v)));
    }

    #[test]
    fn constant_shift_has_unit_jacobian(dy in -3.0..3.0f64, dx in -3.0..3.0f64) {
        let f = DisplacementField::from_fn(6, 7, 0, |_, _| (dy, dx));
        let s = jacobian_stats(&f, 1e-6).unwrap();
        prop_assert_eq!(s.folding_fraction, 0.0);
        prop_assert!(s.std_log_jac < 1e-12);
        prop_assert!((s.min_det - 1.0).abs() < 1e-12);
    }

    #[test]
    fn upsampled_constant_field_doubles(c0 in -2.0..2.0f64, c1 in -2.0..2.0f64) {
        let f = DisplacementField::from_fn(3, 4, 0, |_, _| (c0, c1));
        let up = f.upsample().unwrap();
        prop_assert_eq!((up.height(), up.width()), (6, 8));
        for y in 0..6 {
            for x in 0..8 {
                let (a, b) = up.at(y, x);
                prop_assert!((a - 2.0 * c0).abs() < 1e-12 && (b - 2.0 * c1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dissimilarities_are_bounded(a in image(6, 6), b in image(6, 6)) {
        prop_assert!(dissimilarity_value(SimilarityKind::Ssd, &a, &b).unwrap() >= 0.0);
        let g = dissimilarity_value(SimilarityKind::NccGlobal, &a, &b).unwrap();
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&g));
        let l = dissimilarity_value(SimilarityKind::NccLocal { window: 3 }, &a, &b).unwrap();
        prop_assert!((-1e-9..=2.0 + 1e-9).contains(&l));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    /// A small explicit step along the negative dissimilarity gradient does
    /// not increase the dissimilarity.
    #[test]
    fn small_gradient_step_descends(m in smooth(16, 16), f in smooth(16, 16), kind in 0usize..3) {
        let kind = [SimilarityKind::Ssd, SimilarityKind::NccGlobal, SimilarityKind::NccLocal { window: 5 }][kind];
        let d0 = Tensor::zeros(&[2, 16, 16]);
        let g = dissimilarity_gradient_value(kind, &m, &f, &d0).unwrap();
        let norm = g.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assume!(norm > 0.0);
        let tau = 1e-3 * 256.0 / norm;
        let d1 = g.map(|v| -tau * v);
        let before = warped_dissimilarity(kind, &m, &f, &d0).unwrap();
        let after = warped_dissimilarity(kind, &m, &f, &d1).unwrap();
        prop_assert!(after <= before, "{after} > {before}");
    }
}
