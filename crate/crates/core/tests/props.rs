//! Property tests for the numeric invariants the rest of the system leans on:
//! the drift metric's range and invariances, adjointness of the convolution
//! lowering, and lossless round-trips of the on-disk formats.

use proptest::prelude::*;

use widenet::data::{load_idx_images, load_idx_labels, write_idx_images, write_idx_labels};
use widenet::metrics::resemblance_drift;
use widenet::tensor::{col2im, im2col, Tensor};

fn finite_vec(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1e3..1e3f64, len)
}

proptest! {
    /// Drift is always within [0, 2] and never NaN, on any finite input.
    #[test]
    fn drift_stays_in_range(pair in finite_vec(1..40).prop_flat_map(|a| {
        let n = a.len();
        (Just(a), finite_vec(n..n + 1))
    })) {
        let (a, b) = pair;
        let (c, _) = resemblance_drift(&a, &b);
        prop_assert!(c.is_finite());
        prop_assert!((0.0..=2.0).contains(&c), "drift {c} out of range");
    }

    /// A weight slice has not drifted from itself.
    #[test]
    fn drift_of_identical_slices_is_zero(w in finite_vec(2..40)) {
        let (c, degenerate) = resemblance_drift(&w, &w);
        if !degenerate {
            prop_assert!(c.abs() < 1e-9, "self-drift {c}");
        }
    }

    /// Positive rescaling plus a shift leaves drift at zero: the metric sees
    /// only the pattern of a slice, not its magnitude.
    #[test]
    fn drift_ignores_positive_affine_maps(
        w in finite_vec(2..40),
        scale in 1e-3..1e3f64,
        shift in -1e3..1e3f64,
    ) {
        let scaled: Vec<f64> = w.iter().map(|x| scale * x + shift).collect();
        let (c, degenerate) = resemblance_drift(&scaled, &w);
        if !degenerate {
            prop_assert!(c.abs() < 1e-6, "drift {c} under scale {scale}, shift {shift}");
        }
    }

    /// Negating a slice lands at the far end of the range.
    #[test]
    fn drift_of_negated_slice_is_two(w in finite_vec(2..40)) {
        let negated: Vec<f64> = w.iter().map(|x| -x).collect();
        let (c, degenerate) = resemblance_drift(&negated, &w);
        if !degenerate {
            prop_assert!((c - 2.0).abs() < 1e-9, "negation drift {c}");
        }
    }

    /// A constant slice carries no pattern: it must be flagged degenerate and
    /// scored zero, regardless of which argument it appears in.
    #[test]
    fn constant_slices_are_degenerate(value in -10.0..10.0f64, other in finite_vec(2..20)) {
        let constant = vec![value; other.len()];
        let (c1, d1) = resemblance_drift(&constant, &other);
        let (c2, d2) = resemblance_drift(&other, &constant);
        prop_assert!(d1 && d2);
        prop_assert_eq!(c1, 0.0);
        prop_assert_eq!(c2, 0.0);
    }

    /// <im2col(x), y> == <x, col2im(y)>: the backward lowering is the exact
    /// adjoint of the forward one, for any geometry that fits.
    #[test]
    fn im2col_and_col2im_are_adjoint(
        (n, c, h, w, kh, kw, stride, padding, xs, ys) in
            (1usize..3, 1usize..3, 3usize..7, 3usize..7, 1usize..4, 1usize..4, 1usize..3, 0usize..2)
            .prop_filter("kernel fits", |(_, _, h, w, kh, kw, _, p)| {
                h + 2 * p >= *kh && w + 2 * p >= *kw
            })
            .prop_flat_map(|(n, c, h, w, kh, kw, s, p)| {
                let oh = (h + 2 * p - kh) / s + 1;
                let ow = (w + 2 * p - kw) / s + 1;
                let x_len = n * c * h * w;
                let y_len = (c * kh * kw) * (n * oh * ow);
                (
                    Just(n), Just(c), Just(h), Just(w), Just(kh), Just(kw), Just(s), Just(p),
                    prop::collection::vec(-1.0..1.0f64, x_len..x_len + 1),
                    prop::collection::vec(-1.0..1.0f64, y_len..y_len + 1),
                )
            })
    ) {
        let x = Tensor::from_vec(&[n, c, h, w], xs).unwrap();
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let cols = im2col(&x, kh, kw, stride, padding);
        let y = Tensor::from_vec(&[c * kh * kw, n * oh * ow], ys).unwrap();
        let back = col2im(&y, &[n, c, h, w], kh, kw, stride, padding);
        let lhs: f64 = cols.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs().max(rhs.abs())),
            "inner products differ: {lhs} vs {rhs}");
    }

    /// Tensor files reproduce shape and every bit of the payload.
    #[test]
    fn tensor_files_round_trip(
        (shape, data) in prop::collection::vec(1usize..5, 1..4).prop_flat_map(|shape| {
            let len: usize = shape.iter().product();
            (Just(shape), prop::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), len..len + 1))
        })
    ) {
        let t = Tensor::from_vec(&shape, data).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let back = Tensor::<f64>::read_from(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        let same_bits = back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same_bits);
    }

    /// Image/label files in the big-endian format round-trip exactly: u8
    /// pixels map to v/255 on load, and writing those values re-quantizes to
    /// the same bytes.
    #[test]
    fn idx_files_round_trip(
        (n, rows, cols, pixels, labels) in (1usize..4, 1usize..6, 1usize..6)
            .prop_flat_map(|(n, r, c)| {
                let len = n * r * c;
                (
                    Just(n), Just(r), Just(c),
                    prop::collection::vec(any::<u8>(), len..len + 1),
                    prop::collection::vec(0usize..10, n..n + 1),
                )
            })
    ) {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("imgs");
        let lbl_path = dir.path().join("lbls");
        let data: Vec<f64> = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
        let original = Tensor::from_vec(&[n, 1, rows, cols], data).unwrap();
        write_idx_images(&img_path, &original).unwrap();
        write_idx_labels(&lbl_path, &labels).unwrap();
        let images = load_idx_images(&img_path).unwrap();
        let read_labels = load_idx_labels(&lbl_path).unwrap();
        prop_assert_eq!(images.shape(), &[n, 1, rows, cols]);
        prop_assert_eq!(read_labels, labels);
        let same_bits = images
            .data()
            .iter()
            .zip(original.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same_bits);
    }
}
