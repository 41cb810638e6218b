use ndarray::{Array2, Array3};
use probe_core::dataset::combined_mask;
use probe_core::saliency::{heatmap_overlay, jet, min_max_normalize, neural_activation_map, SoftMask};
use proptest::prelude::*;

fn map_strategy(max_side: usize) -> impl Strategy<Value = Array2<f64>> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(h, w)| {
        prop::collection::vec(-50.0f64..50.0, h * w)
            .prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap())
    })
}

fn mask_triple() -> impl Strategy<Value = [Array2<f64>; 3]> {
    (1usize..=6, 1usize..=6).prop_flat_map(|(h, w)| {
        let one = prop::collection::vec(0.0f64..=1.0, h * w)
            .prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap());
        [one.clone(), one.clone(), one]
    })
}

fn as_maps(channel: &Array2<f64>) -> Array3<f64> {
    channel.clone().insert_axis(ndarray::Axis(0))
}

fn mask(values: &Array2<f64>, feature: usize) -> (usize, SoftMask) {
    (feature, SoftMask::new(values.clone(), Some(feature), "img").unwrap())
}

proptest! {
    #[test]
    fn nam_spans_the_unit_interval(map in map_strategy(8), target in (1usize..40, 1usize..40)) {
        let nam = neural_activation_map(as_maps(&map).view(), 0, target, "img").unwrap();
        prop_assert_eq!(nam.dim(), target);
        let min = nam.values().fold(f64::INFINITY, |a, &b| a.min(b));
        let max = nam.values().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        prop_assert!(0.0 <= min && max <= 1.0);
        if min_max_normalize(map.view()).is_some() {
            // only a resize that flattens the map (e.g. to one pixel) leaves min == max
            if min < max {
                prop_assert_eq!(min, 0.0);
                prop_assert_eq!(max, 1.0);
            }
            prop_assert!(!nam.is_degenerate());
        } else {
            prop_assert!(nam.is_degenerate());
        }
    }

    #[test]
    fn nam_ignores_positive_affine_rescaling(
        map in map_strategy(8),
        scale in 0.01f64..100.0,
        shift in -100.0f64..100.0,
        target in (1usize..40, 1usize..40),
    ) {
        let a = neural_activation_map(as_maps(&map).view(), 0, target, "img").unwrap();
        let scaled = map.mapv(|v| v * scale + shift);
        let b = neural_activation_map(as_maps(&scaled).view(), 0, target, "img").unwrap();
        for (x, y) in a.values().iter().zip(b.values().iter()) {
            prop_assert!((x - y).abs() < 1e-9, "{} vs {}", x, y);
        }
    }

    #[test]
    fn nam_at_native_size_preserves_order_and_is_idempotent(map in map_strategy(10)) {
        let dim = map.dim();
        let nam = neural_activation_map(as_maps(&map).view(), 0, dim, "img").unwrap();
        let flat: Vec<f64> = map.iter().copied().collect();
        let out: Vec<f64> = nam.values().iter().copied().collect();
        for i in 0..flat.len() {
            for j in 0..flat.len() {
                if flat[i] <= flat[j] {
                    prop_assert!(out[i] <= out[j]);
                }
            }
        }
        let again = neural_activation_map(as_maps(&nam.values().to_owned()).view(), 0, dim, "img").unwrap();
        prop_assert_eq!(again.values(), nam.values());
    }

    #[test]
    fn heatmap_is_normalized(map in map_strategy(6), pixel in 0.0f64..=1.0) {
        let nam = neural_activation_map(as_maps(&map).view(), 0, (12, 12), "img").unwrap();
        let image = Array3::from_elem((3, 12, 12), pixel);
        let heat = heatmap_overlay(image.view(), &nam).unwrap();
        prop_assert!(heat.iter().all(|v| (0.0..=1.0).contains(v)));
        let max = heat.fold(0.0f64, |a, &b| a.max(b));
        prop_assert!(max == 0.0 || (max - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn combined_mask_is_a_commutative_idempotent_upper_bound(triple in mask_triple()) {
        let [a, b, c] = &triple;
        let (ma, mb, mc) = (mask(a, 1), mask(b, 2), mask(c, 3));
        let abc = combined_mask("img", &[ma.clone(), mb.clone(), mc.clone()]).unwrap();
        for m in [&ma.1, &mb.1, &mc.1] {
            for (x, y) in abc.values().iter().zip(m.values().iter()) {
                prop_assert!(x >= y);
            }
        }
        // every combined value comes from one of the inputs
        for ((idx, &v), ((&x, &y), &z)) in abc.values().indexed_iter().zip(a.iter().zip(b.iter()).zip(c.iter())) {
            prop_assert!(v == x || v == y || v == z, "{:?}", idx);
        }
        let aa = combined_mask("img", &[ma.clone(), ma.clone()]).unwrap();
        prop_assert_eq!(aa.values(), ma.1.values());
        let ab = combined_mask("img", &[ma.clone(), mb.clone()]).unwrap();
        let ba = combined_mask("img", &[mb.clone(), ma.clone()]).unwrap();
        prop_assert_eq!(ab.values(), ba.values());
        let ab_c = combined_mask("img", &[(0, ab), mc.clone()]).unwrap();
        prop_assert_eq!(ab_c.values(), abc.values());
    }
}

#[test]
fn jet_endpoints() {
    assert_eq!(jet(0.0), [0.0, 0.0, 0.5]);
    assert_eq!(jet(0.5), [0.5, 1.0, 0.5]);
    assert_eq!(jet(1.0), [0.5, 0.0, 0.0]);
}

#[test]
fn combined_mask_keeps_a_single_source() {
    let m = SoftMask::new(Array2::from_elem((2, 2), 0.5), Some(4), "img").unwrap();
    assert_eq!(combined_mask("img", &[(4, m.clone())]).unwrap().source_feature, Some(4));
    assert_eq!(combined_mask("img", &[(4, m.clone()), (5, m)]).unwrap().source_feature, None);
}

#[test]
fn mask_png_round_trip_is_within_half_a_level() {
    let values = Array2::from_shape_fn((9, 7), |(y, x)| ((y * 7 + x) as f64 / 62.0).sqrt());
    let m = SoftMask::new(values.clone(), Some(0), "img").unwrap();
    let back = SoftMask::from_png(&m.to_png().unwrap(), Some(0), "img").unwrap();
    for (a, b) in values.iter().zip(back.values().iter()) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
    }
}

#[test]
fn masks_outside_the_unit_interval_are_rejected() {
    assert!(SoftMask::new(Array2::from_elem((1, 1), 1.5), None, "img").is_err());
    assert!(SoftMask::new(Array2::from_elem((1, 1), -0.1), None, "img").is_err());
}
