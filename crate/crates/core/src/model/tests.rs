use super::*;
use crate::losses::{cross_entropy, evaluate, EmbeddingBatch, FieldNormalization, LossKind};
use crate::losses::ScalarHypers;

fn small_sizes(input: usize, dc: usize, ds: usize) -> ModelSizes {
    ModelSizes {
        input_dim: input,
        encoder: vec![8, 6],
        projection_hidden: Some(7),
        partition: FieldPartition::new(dc, ds).unwrap(),
    }
}

fn random_input(seed: u64, rows: usize, cols: usize) -> Matrix {
    let mut rng = SeededRng::new(seed);
    let data = (0..rows * cols).map(|_| rng.gaussian()).collect();
    Matrix::new(rows, cols, data).unwrap()
}

fn identity_layer(n: usize) -> DenseLayer {
    DenseLayer {
        weight: Matrix::identity(n),
        bias: vec![0.0; n],
    }
}

#[test]
fn zero_network_flags_degenerate_rows() {
    let mut state = init_model(&small_sizes(5, 3, 2), 1, 0.1, 0.0).unwrap();
    let zeros = vec![0.0; state.network_params().len()];
    state.set_network_params(&zeros).unwrap();
    let (z, cache) = state.forward(&random_input(2, 4, 5)).unwrap();
    assert!(cache.raw_embedding().data().iter().all(|&v| v == 0.0));
    assert!(z.data().iter().all(|&v| v == 0.0));
    assert!(cache.any_degenerate());
}

#[test]
fn pass_through_returns_normalized_input_fields() {
    let state = ModelState {
        encoder: MlpParams {
            layers: vec![identity_layer(4)],
            hidden: Activation::Relu,
            output: Activation::Identity,
        },
        projection: MlpParams {
            layers: vec![identity_layer(4), identity_layer(4)],
            hidden: Activation::Relu,
            output: Activation::Identity,
        },
        boundary: BoundaryParams::default(),
        partition: FieldPartition::new(2, 2).unwrap(),
        seed: 0,
    };
    state.validate().unwrap();
    let x = Matrix::from_rows(&[[3.0, 4.0, 0.0, 2.0], [1.0, 0.0, 5.0, 12.0]]).unwrap();
    let z = state.embed(&x).unwrap();
    let expect =
        Matrix::from_rows(&[[0.6, 0.8, 0.0, 1.0], [1.0, 0.0, 5.0 / 13.0, 12.0 / 13.0]]).unwrap();
    assert!(z.max_abs_diff(&expect) < 1e-15);
}

#[test]
fn random_state_gives_unit_fields() {
    let state = init_model(&small_sizes(5, 3, 2), 3, 0.1, 0.0).unwrap();
    let z = state.embed(&random_input(4, 4, 5)).unwrap();
    assert_eq!(z.shape(), (4, 5));
    for r in 0..4 {
        let c = crate::math::norm(&z.row(r)[..3]);
        let s = crate::math::norm(&z.row(r)[3..]);
        assert!((c - 1.0).abs() < 1e-12 && (s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn forward_rejects_wrong_width() {
    let state = init_model(&small_sizes(5, 3, 2), 3, 0.1, 0.0).unwrap();
    assert!(matches!(
        state.forward(&random_input(1, 2, 4)),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn zero_upstream_gradient_gives_zero_parameter_gradients() {
    let state = init_model(&small_sizes(5, 3, 2), 3, 0.1, 0.0).unwrap();
    let (z, cache) = state.forward(&random_input(4, 6, 5)).unwrap();
    let loss = LossOutput {
        value: 0.0,
        grad_z: Matrix::zeros(z.rows(), z.cols()),
        grad_t_log: 0.0,
        grad_b: 0.0,
        sigmoid_pairs: 0,
    };
    let g = state.backward(&cache, &loss).unwrap();
    assert!(g.network_flat().iter().all(|&v| v == 0.0));
    assert_eq!((g.t_log, g.b), (0.0, 0.0));
}

#[test]
fn stale_cache_is_rejected() {
    let mut state = init_model(&small_sizes(5, 3, 2), 3, 0.1, 0.0).unwrap();
    let (z, cache) = state.forward(&random_input(4, 6, 5)).unwrap();
    state.encoder.layers[0].bias[0] += 1e-3;
    let loss = LossOutput {
        value: 0.0,
        grad_z: z,
        grad_t_log: 0.0,
        grad_b: 0.0,
        sigmoid_pairs: 0,
    };
    assert!(matches!(state.backward(&cache, &loss), Err(Error::StaleCache)));
}

#[test]
fn dead_relu_unit_blocks_gradient() {
    let mut state = init_model(&small_sizes(5, 3, 2), 7, 0.1, 0.0).unwrap();
    state.encoder.layers[0].bias[2] = -1e3;
    let x = random_input(8, 6, 5);
    let labels = vec![0, 0, 1, 1, 2, 2];
    let (z, cache) = state.forward(&x).unwrap();
    let batch = EmbeddingBatch::new(z, labels, state.partition)
        .unwrap()
        .with_normalization(FieldNormalization::None);
    let loss = evaluate(
        LossKind::ScsSupcon,
        &batch,
        &state.boundary,
        &ScalarHypers::default(),
        true,
    )
    .unwrap();
    let g = state.backward(&cache, &loss).unwrap();
    let w = &g.encoder.layers[0].weight;
    for r in 0..w.rows() {
        assert_eq!(w.get(r, 2), 0.0);
    }
    assert_eq!(g.encoder.layers[0].bias[2], 0.0);
    assert!(g.network_flat().iter().any(|&v| v != 0.0));
}

fn model_gradient_error(kind: LossKind, seed: u64, b: usize, dc: usize, ds: usize) -> f64 {
    let sizes = small_sizes(5, dc, ds);
    let mut rng = SeededRng::new(seed ^ 0xabc);
    let t0 = (rng.uniform(0.05f64.ln(), 0.2f64.ln()).unwrap()).exp();
    let b0 = rng.uniform(-0.2, 0.2).unwrap();
    let state = init_model(&sizes, seed, t0, b0).unwrap();
    let x = random_input(seed + 11, b, 5);
    let labels: Vec<usize> = (0..b).map(|i| i % 3).collect();
    stack_gradient_check(kind, &state, &x, &labels, &ScalarHypers::default(), true, 1e-6)
        .unwrap()
        .max()
}

#[test]
fn stack_gradients_match_reference_differences() {
    for seed in 0..4u64 {
        for kind in LossKind::ALL {
            let (dc, ds) = if kind == LossKind::Supcon { (6, 0) } else { (4, 2) };
            let err = model_gradient_error(kind, seed, 6, dc, ds);
            assert!(err <= 1e-5, "{kind} seed {seed}: {err}");
        }
    }
}

#[test]
fn default_initialization_matches_boundary_defaults() {
    let sizes = ModelSizes::new(16, FieldPartition::new(24, 8).unwrap());
    let state = init_model(&sizes, 0, 0.1, 0.0).unwrap();
    // No f64 has an exponential of exactly 0.1; ln(0.1) comes back one ulp high.
    assert_eq!(state.boundary.t_log, 0.1f64.ln());
    assert!((state.boundary.temperature() - 0.1).abs() <= 0.1 * f64::EPSILON);
    assert_eq!(state.boundary.b, 0.0);
    assert_eq!(state.encoder.sizes(), vec![16, 64, 64]);
    assert_eq!(state.projection.sizes(), vec![64, 32, 32]);
}

#[test]
fn initialization_is_deterministic() {
    let sizes = small_sizes(5, 3, 2);
    let a = init_model(&sizes, 9, 0.1, 0.0).unwrap();
    let b = init_model(&sizes, 9, 0.1, 0.0).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.fingerprint(), b.fingerprint());
    let c = init_model(&sizes, 10, 0.1, 0.0).unwrap();
    assert_ne!(a.fingerprint(), c.fingerprint());
}

#[test]
fn temperature_range_accepted_and_zero_rejected() {
    let sizes = small_sizes(5, 3, 2);
    for t0 in [0.05, 0.2] {
        let s = init_model(&sizes, 1, t0, 0.0).unwrap();
        assert!((s.boundary.temperature() - t0).abs() < 1e-15);
    }
    assert!(matches!(init_model(&sizes, 1, 0.0, 0.0), Err(Error::Parameter { .. })));
    assert!(init_model(&sizes, 1, -0.1, 0.0).is_err());
}

#[test]
fn zero_classifier_gives_uniform_loss() {
    let clf = LinearClassifier::zeros(3, 5);
    let logits = clf.classify(&random_input(1, 4, 3)).unwrap();
    assert_eq!(logits.shape(), (4, 5));
    let ce = cross_entropy(&logits, &[0, 1, 2, 3]).unwrap();
    assert!((ce.value - 5f64.ln()).abs() < 1e-12);
}

#[test]
fn hand_set_classifier_separates_points() {
    let clf = LinearClassifier {
        weight: Matrix::from_rows(&[[1.0, -1.0], [0.0, 0.0]]).unwrap(),
        bias: vec![0.0, 0.0],
    };
    let pts = Matrix::from_rows(&[[1.0, 0.3], [-1.0, 0.3]]).unwrap();
    assert_eq!(clf.predict(&pts).unwrap(), vec![0, 1]);
    assert!(clf.classify(&random_input(1, 2, 3)).is_err());
}

#[test]
fn classifier_ignores_style_columns() {
    let state = init_model(&small_sizes(5, 3, 2), 3, 0.1, 0.0).unwrap();
    let z = state.embed(&random_input(4, 6, 5)).unwrap();
    let mut rng = SeededRng::new(1);
    let mut clf = LinearClassifier::zeros(3, 4);
    for v in clf.weight.data_mut() {
        *v = rng.gaussian();
    }
    let before = clf.classify_embedding(&z).unwrap();
    let mut perturbed = z.clone();
    for r in 0..perturbed.rows() {
        for v in &mut perturbed.row_mut(r)[3..] {
            *v = rng.gaussian() * 100.0;
        }
    }
    assert_eq!(before, clf.classify_embedding(&perturbed).unwrap());
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let mut state = init_model(&small_sizes(5, 3, 2), 21, 0.137, -0.05).unwrap();
    state.boundary.b = 1.0 / 3.0;
    let mut clf = LinearClassifier::zeros(3, 4);
    clf.bias = vec![0.1, 1e-300, -2.5e10, std::f64::consts::PI];
    let ck = Checkpoint::new(state, Some(clf));
    let text = ck.to_json().unwrap();
    let back = Checkpoint::from_json(&text).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_json().unwrap(), text);
    assert_eq!(back.state.fingerprint(), ck.state.fingerprint());
}

#[test]
fn checkpoint_rejects_unknown_version_and_keys() {
    let ck = Checkpoint::new(init_model(&small_sizes(5, 3, 2), 1, 0.1, 0.0).unwrap(), None);
    let text = ck.to_json().unwrap().replacen("\"version\": 1", "\"version\": 99", 1);
    assert!(Checkpoint::from_json(&text).is_err());
    let text = ck.to_json().unwrap().replacen('{', "{\"extra\": 1,", 1);
    assert!(Checkpoint::from_json(&text).is_err());
}

#[test]
fn flat_parameter_round_trip() {
    let mut state = init_model(&small_sizes(5, 3, 2), 4, 0.1, 0.0).unwrap();
    let p = state.network_params();
    let doubled: Vec<f64> = p.iter().map(|v| v * 2.0).collect();
    state.set_network_params(&doubled).unwrap();
    assert_eq!(state.network_params(), doubled);
    assert!(state.set_network_params(&p[1..]).is_err());
}
