use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, Axis};
use probe_core::model::{global_average_pool, LinearNetwork, ModelBundle, Normalization, TinyCnn};
use probe_core::saliency::{feature_attack, AttackConfig};
use probe_core::synthetic::{tiny_network, tiny_preprocessing, tiny_reference_model};
use probe_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(rng: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || rng.random::<f64>())
}

fn softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

/// Direct 4-D loop convolution over an explicitly zero-padded input.
fn oracle_feature_maps(net: &TinyCnn, input: &Array3<f64>) -> Array3<f64> {
    let mut x = input.clone();
    for conv in &net.convs {
        let (c, h, w) = x.dim();
        let p = conv.padding;
        let mut padded = Array3::<f64>::zeros((c, h + 2 * p, w + 2 * p));
        padded.slice_mut(ndarray::s![.., p..p + h, p..p + w]).assign(&x);
        let oh = (h + 2 * p - conv.kernel) / conv.stride + 1;
        let ow = (w + 2 * p - conv.kernel) / conv.stride + 1;
        let weights = Array1::from(conv.weights.clone())
            .into_shape_with_order((conv.out_channels, conv.in_channels, conv.kernel, conv.kernel))
            .unwrap();
        let mut out = Array3::<f64>::zeros((conv.out_channels, oh, ow));
        for o in 0..conv.out_channels {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = conv.bias[o];
                    for i in 0..conv.in_channels {
                        for ky in 0..conv.kernel {
                            for kx in 0..conv.kernel {
                                acc += weights[[o, i, ky, kx]]
                                    * padded[[i, y * conv.stride + ky, xx * conv.stride + kx]];
                            }
                        }
                    }
                    out[[o, y, xx]] = softplus(acc);
                }
            }
        }
        x = out;
    }
    x
}

#[test]
fn forward_matches_layer_by_layer_oracle() {
    let model = tiny_reference_model(3);
    let net = tiny_network(3, 32, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut images = vec![Array3::zeros((3, 32, 32))];
    images.extend((0..4).map(|_| random_image(&mut rng, (3, 32, 32))));
    for image in &images {
        let forward = model.forward("probe", image.view()).unwrap();
        let expected_maps = oracle_feature_maps(&net, &tiny_preprocessing().apply(image.view()));
        assert_eq!(forward.feature_maps.dim(), expected_maps.dim());
        for (a, b) in forward.feature_maps.iter().zip(expected_maps.iter()) {
            assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()), "{a} vs {b}");
        }
        let pooled = expected_maps.mean_axis(Axis(1)).unwrap().mean_axis(Axis(1)).unwrap();
        for (a, b) in forward.feature_vector.iter().zip(pooled.iter()) {
            assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
        }
        let logits = net.head_weights.dot(&pooled) + &net.head_bias;
        for (a, b) in forward.logits.iter().zip(logits.iter()) {
            assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
        }
    }
}

#[test]
fn pooled_vector_is_the_spatial_mean_of_the_maps() {
    let model = tiny_reference_model(0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch: Vec<(String, Array3<f64>)> = (0..6)
        .map(|i| (format!("img{i}"), random_image(&mut rng, (3, 32, 32))))
        .collect();
    let out = model.extract_activations(&batch).unwrap();
    assert_eq!(out.feature_maps.dim(), (6, 32, 8, 8));
    for b in 0..6 {
        let pooled = global_average_pool(out.feature_maps.index_axis(Axis(0), b));
        assert_eq!(pooled, out.feature_vectors.row(b));
        let single = model.forward(&batch[b].0, batch[b].1.view()).unwrap();
        assert_eq!(single.feature_vector, out.feature_vectors.row(b));
        assert_eq!(single.predicted, out.predicted[b]);
    }
}

#[test]
fn reference_model_is_deterministic_per_seed() {
    assert_eq!(tiny_network(5, 32, 8), tiny_network(5, 32, 8));
    assert_ne!(tiny_network(5, 32, 8), tiny_network(6, 32, 8));
    let image = Array3::from_elem((3, 32, 32), 0.3);
    let a = tiny_reference_model(5).forward("x", image.view()).unwrap();
    let b = tiny_reference_model(5).forward("x", image.view()).unwrap();
    assert_eq!(a.feature_maps, b.feature_maps);
    assert_eq!(a.logits, b.logits);
}

#[test]
fn reference_model_shape_and_head() {
    let model = tiny_reference_model(0);
    assert_eq!(model.feature_count(), 32);
    assert_eq!(model.num_classes(), 8);
    assert!(model.gradients_available());
    for class in 0..8 {
        let row = model.head_row(class).unwrap();
        let expected = Array1::from_shape_fn(32, |j| if j == class { 1.0 } else { 0.0 });
        assert_eq!(row, expected);
    }
    assert!(matches!(model.head_row(8), Err(Error::ClassOutOfRange { index: 8, .. })));
}

#[test]
fn wrong_image_shape_is_rejected() {
    let model = tiny_reference_model(0);
    let err = model.forward("small", Array3::zeros((3, 16, 16)).view()).unwrap_err();
    assert!(matches!(err, Error::ShapeMismatch { .. }), "{err}");
    assert!(model.input_gradient(Array3::zeros((3, 32, 32)).view(), 32).is_err());
}

#[test]
fn input_gradient_matches_central_differences() {
    let model = tiny_reference_model(7);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eps = 1e-5;
    let mut probes = 0;
    for _ in 0..10 {
        let image = random_image(&mut rng, (3, 32, 32));
        let feature = rng.random_range(0..32);
        let grad = model.input_gradient(image.view(), feature).unwrap();
        for _ in 0..12 {
            let idx = (rng.random_range(0..3), rng.random_range(0..32), rng.random_range(0..32));
            let mut plus = image.clone();
            plus[idx] += eps;
            let mut minus = image.clone();
            minus[idx] -= eps;
            let fd = (model.feature_value(plus.view(), feature).unwrap()
                - model.feature_value(minus.view(), feature).unwrap())
                / (2.0 * eps);
            let analytic = grad[idx];
            let scale = fd.abs().max(analytic.abs()).max(1e-9);
            assert!(
                (fd - analytic).abs() <= 1e-3 * scale,
                "feature {feature} at {idx:?}: fd {fd} analytic {analytic}"
            );
            probes += 1;
        }
    }
    assert!(probes >= 100);
}

#[test]
fn gradient_vanishes_outside_the_receptive_field() {
    let model = tiny_reference_model(2);
    let net = tiny_network(2, 32, 8);
    // last input row/column that can reach output cell (0, 0)
    let reach = net
        .convs
        .iter()
        .rev()
        .fold(0usize, |hi, c| (hi * c.stride + c.kernel - 1).saturating_sub(c.padding));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let image = random_image(&mut rng, (3, 32, 32));
    let mut seed = Array3::zeros((32, 8, 8));
    seed[[5, 0, 0]] = 1.0;
    let grad = model.feature_map_gradient(image.view(), seed.view()).unwrap();
    let mut inside = 0.0f64;
    for ((_, y, x), &g) in grad.indexed_iter() {
        if y > reach || x > reach {
            assert_eq!(g, 0.0, "gradient at ({y}, {x}) outside rows/cols 0..={reach}");
        } else {
            inside = inside.max(g.abs());
        }
    }
    assert!(inside > 0.0);
}

fn linear_bundle() -> (ModelBundle, Array2<f64>, Normalization) {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let shape = (2, 3, 4);
    let weights = Array2::from_shape_simple_fn((5, 24), || rng.random_range(-1.0..1.0));
    let bias = Array1::from_shape_simple_fn(5, || rng.random_range(-1.0..1.0));
    let head = Array2::from_shape_simple_fn((3, 5), || rng.random_range(-1.0..1.0));
    let norm = Normalization {
        mean: vec![0.4, 0.6],
        std: vec![0.5, 2.0],
    };
    let net = LinearNetwork::new(shape, weights.clone(), bias, head, Array1::zeros(3));
    let bundle = ModelBundle::new("linear", (3, 4), 2, norm.clone(), Arc::new(net)).unwrap();
    (bundle, weights, norm)
}

#[test]
fn linear_model_gradient_is_the_weight_row_over_std() {
    let (model, weights, norm) = linear_bundle();
    let image = Array3::from_elem((2, 3, 4), 0.5);
    for j in 0..5 {
        let grad = model.input_gradient(image.view(), j).unwrap();
        for ((c, y, x), &g) in grad.indexed_iter() {
            let expected = weights[[j, c * 12 + y * 4 + x]] / norm.std[c];
            assert!((g - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn linear_model_attack_moves_the_feature_by_gradient_norm_times_radius() {
    let (model, _, _) = linear_bundle();
    let image = Array3::from_elem((2, 3, 4), 0.5);
    // steps of 0.01 saturate the 0.03 ball after three iterations; pixels stay inside [0, 1]
    let config = AttackConfig {
        step_size: 0.01,
        iterations: 5,
        rho: 0.03,
    };
    for j in 0..5 {
        let grad = model.input_gradient(image.view(), j).unwrap();
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let attacked = feature_attack(&model, image.view(), j, &config).unwrap();
        let delta = &attacked - &image;
        let size = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
        assert!((size - 0.03).abs() < 1e-12, "{size}");
        let gain = model.feature_value(attacked.view(), j).unwrap() - model.feature_value(image.view(), j).unwrap();
        assert!((gain - norm * 0.03).abs() < 1e-10, "{gain} vs {}", norm * 0.03);
    }
}

#[test]
fn attack_respects_budget_and_raises_the_feature() {
    let model = tiny_reference_model(1);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for config in [
        AttackConfig::default(),
        AttackConfig {
            step_size: 0.5,
            iterations: 10,
            rho: 1.0,
        },
    ] {
        let probes = 20;
        let mut raised = 0;
        for _ in 0..probes {
            let image = random_image(&mut rng, (3, 32, 32));
            let feature = rng.random_range(0..32);
            let attacked = feature_attack(&model, image.view(), feature, &config).unwrap();
            let size = (&attacked - &image).iter().map(|d| d * d).sum::<f64>().sqrt();
            assert!(size <= config.rho + 1e-9, "{size} > {}", config.rho);
            assert!(attacked.iter().all(|v| (0.0..=1.0).contains(v)));
            let before = model.feature_value(image.view(), feature).unwrap();
            let after = model.feature_value(attacked.view(), feature).unwrap();
            assert!(after >= before);
            raised += usize::from(after > before);
        }
        assert!(raised * 100 >= probes * 95, "{raised}/{probes} raised with {config:?}");
    }
}

#[test]
fn attack_rejects_bad_configs() {
    let model = tiny_reference_model(1);
    let image = Array3::from_elem((3, 32, 32), 0.5);
    for config in [
        AttackConfig { step_size: 0.0, ..AttackConfig::default() },
        AttackConfig { rho: -1.0, ..AttackConfig::default() },
    ] {
        assert!(feature_attack(&model, image.view(), 0, &config).is_err());
    }
}
