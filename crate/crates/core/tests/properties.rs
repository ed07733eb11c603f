use crosstask::evalkit::{auc_fr, ced, CED_GRID};
use crosstask::heatmap::{hflip, rescale_point, LandmarkSet};
use crosstask::losses::{loss_cd, loss_ed, EdReduction};
use crosstask::synthfaces::flip_spec;
use crosstask::tensorcore::{checkpoint, ParamStore, Tensor};
use proptest::prelude::*;

fn tensor(rows: usize, cols: usize, data: Vec<f32>) -> Tensor {
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn matrices(rows: usize, cols: usize) -> impl Strategy<Value = (Tensor, Tensor)> {
    (
        prop::collection::vec(-5.0f32..5.0, rows * cols),
        prop::collection::vec(-5.0f32..5.0, rows * cols),
    )
        .prop_map(move |(a, b)| (tensor(rows, cols, a), tensor(rows, cols, b)))
}

proptest! {
    #[test]
    fn ced_is_monotone_and_reaches_one(errors in prop::collection::vec(0.0f64..10.0, 1..80), threshold in 0.1f64..5.0) {
        let curve = ced(&errors, threshold, CED_GRID).unwrap();
        prop_assert_eq!(curve.len(), CED_GRID);
        prop_assert!(curve.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 <= w[1].1));
        prop_assert_eq!(curve.last().unwrap().1, 1.0);
    }

    #[test]
    fn auc_ignores_image_order(mut errors in prop::collection::vec(0.0f64..3.0, 1..50), seed in any::<u64>()) {
        let before = auc_fr(&errors, 1.2).unwrap();
        let n = errors.len();
        errors.rotate_left(seed as usize % n);
        errors.reverse();
        prop_assert_eq!(auc_fr(&errors, 1.2).unwrap(), before);
        prop_assert!((0.0..=1.0).contains(&before.0) && (0.0..=1.0).contains(&before.1));
    }

    #[test]
    fn cd_is_shift_invariant((s, t) in matrices(3, 10), a in -30.0f32..30.0, b in -30.0f32..30.0, mu in 0.5f32..4.0) {
        let shift = |x: &Tensor, by: f32| tensor(3, 10, x.data().iter().map(|v| v + by).collect());
        let base = loss_cd(&s, &t, mu).unwrap();
        prop_assert!((loss_cd(&shift(&s, a), &shift(&t, b), mu).unwrap() - base).abs() <= 1e-6);
    }

    #[test]
    fn ed_is_scale_invariant((s, t) in matrices(2, 16), a in 0.01f32..100.0, b in 0.01f32..100.0) {
        let scale = |x: &Tensor, by: f32| tensor(2, 16, x.data().iter().map(|v| v * by).collect());
        let base = loss_ed(&s, &t, EdReduction::Mean).unwrap();
        prop_assume!(!base.zero_norm.iter().any(|&z| z));
        let scaled = loss_ed(&scale(&s, a), &scale(&t, b), EdReduction::Mean).unwrap().value;
        prop_assert!((scaled - base.value).abs() <= 1e-6);
        prop_assert!((0.0..=2.0 + 1e-6).contains(&base.value));
    }

    #[test]
    fn hflip_is_an_involution(pixels in prop::collection::vec(0.0f32..1.0, 8 * 8 * 3), points in prop::collection::vec((0.0f32..7.0, 0.0f32..7.0), 14)) {
        let image = Tensor::new(vec![8, 8, 3], pixels).unwrap();
        let landmarks = LandmarkSet::new(points.into_iter().map(|(x, y)| [x, y]).collect()).unwrap();
        let spec = flip_spec();
        let (once, flipped) = hflip(&image, &landmarks, &spec).unwrap();
        let (twice, back) = hflip(&once, &flipped, &spec).unwrap();
        prop_assert_eq!(twice, image);
        // Pixels move exactly; coordinates pick up at most float rounding.
        let close = back.points.iter().zip(&landmarks.points).all(|(a, b)| (a[0] - b[0]).abs() <= 1e-5 && a[1] == b[1]);
        prop_assert!(close);
    }

    #[test]
    fn rescale_inverts(x in 0.0f32..64.0, y in 0.0f32..64.0, f in 0.8f32..1.25) {
        let [u, v] = rescale_point(rescale_point([x, y], f, 64, 64), 1.0 / f, 64, 64);
        prop_assert!((u - x).abs() <= 1e-4 && (v - y).abs() <= 1e-4);
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly(values in prop::collection::vec(any::<f32>(), 1..40), trainable in any::<bool>()) {
        let mut store = ParamStore::new();
        store.insert("a.w", Tensor::from_vec(values.clone()), trainable).unwrap();
        store.insert("b", Tensor::scalar(1.5), true).unwrap();
        let meta = serde_json::json!({"kind": "test"});
        let bytes = checkpoint::encode(&meta, &store).unwrap();
        let back = checkpoint::decode(&bytes).unwrap();
        let got = back.params.value("a.w").unwrap().data();
        prop_assert!(got.iter().zip(&values).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(checkpoint::encode(&back.meta, &back.params).unwrap(), bytes);
    }
}
