use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::random_tensor;
use crate::params::Role;

fn images(n: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_tensor(&mut rng, &[n, 1, 64, 64], 0.0, 1.0)
}

#[test]
fn default_shapes() {
    let model = Model::<f64>::new(ModelConfig::default(), 1).unwrap();
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g, true);
    let x = g.constant(images(2, 0));
    let f = model.forward(&mut g, &bound, x, Mode::Train).unwrap();
    let shapes: Vec<_> = f.pyramid.scales.iter().map(|&s| g.value(s).shape().to_vec()).collect();
    assert_eq!(shapes, vec![vec![2, 16, 32, 32], vec![2, 16, 16, 16], vec![2, 16, 8, 8]]);
    assert_eq!(g.value(f.pyramid.final_feature).shape(), &[2, 64]);
    assert_eq!(g.value(f.classified.fused).shape(), &[2, 112]);
    assert_eq!(g.value(f.classified.probs).shape(), &[2, 3]);
    for row in g.value(f.weights).data().chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&w| w > 0.0 && w < 1.0));
    }
    assert_eq!(model.params.get("adjust3.weight").unwrap().shape(), &[16, 64, 1, 1]);
}

#[test]
fn same_seed_same_parameters() {
    let a = Model::<f32>::new(ModelConfig::default(), 9).unwrap();
    let b = Model::<f32>::new(ModelConfig::default(), 9).unwrap();
    let c = Model::<f32>::new(ModelConfig::default(), 10).unwrap();
    let bits = |m: &Model<f32>| -> Vec<u32> {
        m.params.iter().flat_map(|p| p.value.data().iter().map(|v| v.to_bits())).collect()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn zero_image_single_sample_is_finite() {
    let model = Model::<f64>::new(ModelConfig::default(), 2).unwrap();
    let inf = model.infer(&Tensor::zeros(&[1, 1, 64, 64]), Some(&AttentionConfig::default())).unwrap();
    assert!(inf.probs.all_finite() && inf.weights.all_finite());
    assert!(inf.vectors.iter().all(|(v, _)| v.all_finite()));
}

#[test]
fn train_mode_needs_two_samples() {
    let model = Model::<f64>::new(ModelConfig::default(), 2).unwrap();
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g, true);
    let x = g.constant(images(1, 0));
    assert!(matches!(
        model.forward(&mut g, &bound, x, Mode::Train),
        Err(Error::DegenerateBatch(_))
    ));
}

#[test]
fn eval_is_pure_and_permutation_equivariant() {
    let model = Model::<f64>::new(ModelConfig::default(), 3).unwrap();
    let x = images(3, 5);
    let a = model.infer(&x, Some(&AttentionConfig::default())).unwrap();
    let b = model.infer(&x, Some(&AttentionConfig::default())).unwrap();
    assert_eq!(a.probs, b.probs);

    // Rows [2, 0, 1] and a duplicate of row 0.
    let plane = 64 * 64;
    let order = [2usize, 0, 1, 0];
    let data: Vec<f64> = order.iter().flat_map(|&i| x.data()[i * plane..(i + 1) * plane].to_vec()).collect();
    let p = model.infer(&Tensor::new(vec![4, 1, 64, 64], data).unwrap(), None).unwrap();
    for (row, &src) in order.iter().enumerate() {
        for j in 0..3 {
            assert!((p.probs.data()[row * 3 + j] - a.probs.data()[src * 3 + j]).abs() < 1e-12);
            assert!((p.weights.data()[row * 3 + j] - a.weights.data()[src * 3 + j]).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_fused_vector_predicts_softmax_of_bias() {
    let mut model = Model::<f64>::new(ModelConfig::default(), 4).unwrap();
    for p in model.params.iter_mut() {
        if p.name.starts_with("adjust") || p.name.starts_with("stem.conv") {
            p.value = Tensor::zeros(p.value.shape());
        }
    }
    // Zero stem conv and zero BN shift after it leave every stage input zero.
    let bias = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
    *model.params.get_mut("awc.head.bias").unwrap() = bias.clone();
    let inf = model.infer(&images(2, 1), None).unwrap();
    let expected = crate::autodiff::softmax_last_axis(&bias).unwrap();
    for row in inf.probs.data().chunks(3) {
        for (a, b) in row.iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn uniform_weighting_has_no_predictor() {
    let cfg = ModelConfig { weighting: Weighting::Uniform, final_concat: false, ..ModelConfig::default() };
    let model = Model::<f64>::new(cfg, 1).unwrap();
    assert!(model.params.get("awc.scale1.fc.weight").is_err());
    assert_eq!(model.params.get("awc.head.weight").unwrap().shape(), &[48, 3]);
    let inf = model.infer(&images(2, 2), None).unwrap();
    assert!(inf.weights.data().iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn from_params_names_mismatched_tensor() {
    let small = ModelConfig::default().init_params::<f32>(0).unwrap();
    let mut wide = ModelConfig::default();
    wide.pyramid.adjusted_channels = 32;
    match Model::from_params(wide, small) {
        Err(Error::Checkpoint(msg)) => assert!(msg.contains("adjust1.weight"), "{msg}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn every_weight_receives_gradient() {
    let model = Model::<f64>::new(ModelConfig::default(), 6).unwrap();
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g, true);
    let x = g.constant(images(4, 3));
    let f = model.forward(&mut g, &bound, x, Mode::Train).unwrap();
    let loss = g.nll_mean(f.classified.probs, &[0, 1, 2, 0]).unwrap();
    g.backward(loss).unwrap();
    for (pos, var) in bound.weights() {
        let p = model.params.iter().nth(pos).unwrap();
        assert_eq!(p.role, Role::Weight);
        let grad = g.grad(var).unwrap();
        assert!(grad.data().iter().any(|&v| v != 0.0), "{} has zero gradient", p.name);
    }
}

#[test]
fn running_stats_update() {
    let mut model = Model::<f64>::new(ModelConfig::default(), 1).unwrap();
    let stats = vec![(
        "stem.bn".to_string(),
        BatchStats { mean: vec![1.0; 16], var: vec![2.0; 16], count: 5 },
    )];
    model.update_running_stats(&stats, 0.1).unwrap();
    let m = model.params.get("stem.bn.running_mean").unwrap().data()[0];
    let v = model.params.get("stem.bn.running_var").unwrap().data()[0];
    assert!((m - 0.1).abs() < 1e-15);
    assert!((v - (0.9 + 0.1 * 2.0 * 5.0 / 4.0)).abs() < 1e-15);
}
