use super::*;
use crate::data::synth;

fn draws(labels: &[usize]) -> Vec<Draw> {
    labels
        .iter()
        .enumerate()
        .map(|(index, &label)| Draw { index, label, flip: false, shift: (0, 0) })
        .collect()
}

#[test]
fn two_classes_one_triplet() {
    let list = draws(&[0, 0, 1]);
    let picked = sample_triplets(&list, 1, 3, 0).unwrap();
    let labels: Vec<usize> = picked.iter().map(|d| d.label).collect();
    assert_eq!(labels, vec![0, 0, 1]);
    assert_ne!(picked[0].index, picked[1].index);
    assert_eq!(picked, sample_triplets(&list, 1, 3, 0).unwrap());
}

#[test]
fn triplets_are_deterministic_per_step() {
    let list = draws(&[0, 0, 1, 1, 2, 2, 2]);
    let a = sample_triplets(&list, 8, 9, 41).unwrap();
    assert_eq!(a, sample_triplets(&list, 8, 9, 41).unwrap());
    assert_ne!(a, sample_triplets(&list, 8, 9, 42).unwrap());
    for t in a.chunks(3) {
        assert!(t[0].label == t[1].label && t[0].label != t[2].label);
    }
}

#[test]
fn single_class_is_rejected() {
    let err = sample_triplets(&draws(&[1, 1, 1]), 2, 0, 0).unwrap_err();
    assert!(err.to_string().contains("attention loss requires ≥ 2 classes"), "{err}");
}

#[test]
fn ordered_class_pairs_are_uniform() {
    let list = draws(&[0, 0, 0, 1, 1, 2, 2, 2, 2]);
    let n = 10_000;
    let mut counts = [[0f64; 3]; 3];
    for step in 0..n as u64 / 10 {
        for t in sample_triplets(&list, 10, 6, step).unwrap().chunks(3) {
            counts[t[0].label][t[2].label] += 1.0;
        }
    }
    let p = 1.0 / 6.0;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    for i in 0..3 {
        for j in 0..3 {
            if i == j {
                assert_eq!(counts[i][j], 0.0);
            } else {
                assert!((counts[i][j] - n as f64 * p).abs() < 3.0 * sd, "({i},{j}): {counts:?}");
            }
        }
    }
}

#[test]
fn learning_rate_decays_at_milestones() {
    let cfg = TrainConfig { epochs: 30, learning_rate: 1.0, ..TrainConfig::default() };
    let lrs: Vec<f64> = (0..30).map(|e| cfg.learning_rate_at(e)).collect();
    assert!(lrs[..18].iter().all(|&l| l == 1.0));
    assert!(lrs[18..25].iter().all(|&l| (l - 0.1).abs() < 1e-15));
    assert!(lrs[25..].iter().all(|&l| (l - 0.01).abs() < 1e-15));
    assert_eq!(cfg.steps_per_epoch(300), 13);
}

/// Small training set rendered in memory.
fn images(specs: &[synth::SyntheticClassSpec], per_class: usize, seed: u64) -> Images<f64> {
    let mut out = Images { images: Vec::new(), labels: Vec::new(), ids: Vec::new() };
    for (k, spec) in specs.iter().enumerate() {
        for i in 0..per_class {
            let mut r = rng::stream(seed, rng::SYNTH, (k * 1000 + i) as u64);
            let geom = synth::ShipGeometry::sample(spec, &mut r);
            let px = synth::render(spec, &geom, &mut r);
            out.images.push(Tensor::from_fn(&[1, 64, 64], |j| px[j] as f64 / 255.0));
            out.labels.push(k);
            out.ids.push(format!("{k}_{i}"));
        }
    }
    out
}

fn small_batch(t: usize) -> TripletBatch<f64> {
    let imgs = images(&synth::separable_three_class(), 4, 1);
    let list = draws(&imgs.labels);
    TripletBatch::gather(&imgs, sample_triplets(&list, t, 2, 0).unwrap()).unwrap()
}

fn small_model() -> Model<f64> {
    let mut config = ModelConfig::default();
    config.pyramid.stage_channels = vec![4, 8, 8];
    config.pyramid.adjusted_channels = 4;
    Model::new(config, 5).unwrap()
}

fn weights(m: &Model<f64>) -> Vec<Tensor<f64>> {
    m.params.iter().filter(|p| p.role == Role::Weight).map(|p| p.value.clone()).collect()
}

#[test]
fn zero_learning_rate_keeps_weights_and_reports_losses() {
    let batch = small_batch(2);
    let mut model = small_model();
    let before = weights(&model);
    let mut opt = Optimizer::new(&model);
    let cfg = TrainConfig::default();
    let l = train_step(&mut model, &mut opt, &batch, &cfg, 0.0, 0).unwrap();
    assert_eq!(weights(&model), before);
    assert!(l.recg > 0.0 && l.att >= 0.0);
    assert_eq!(l.total.to_bits(), awc::combine_losses(l.att, l.recg, &cfg.loss_weights).to_bits());
}

#[test]
fn plain_sgd_moves_by_learning_rate_times_gradient() {
    let batch = small_batch(2);
    let mut model = small_model();
    let cfg = TrainConfig { momentum: 0.0, ..TrainConfig::default() };
    let (grads, _, _) = compute_gradients(&model, &batch, &cfg, 0).unwrap();
    let before = model.params.clone();
    let mut opt = Optimizer::new(&model);
    train_step(&mut model, &mut opt, &batch, &cfg, 0.05, 0).unwrap();
    for ((old, new), g) in before.iter().zip(model.params.iter()).zip(&grads) {
        let Some(g) = g else { continue };
        for ((&a, &b), &d) in old.value.data().iter().zip(new.value.data()).zip(g.data()) {
            assert_eq!(b.to_bits(), (a - 0.05 * d).to_bits(), "{}", old.name);
        }
    }
}

#[test]
fn zero_attention_weight_matches_cross_entropy_training() {
    let batch = small_batch(2);
    let start = small_model();
    let cfg = TrainConfig {
        loss_weights: LossWeights { lambda_att: 0.0, lambda_recg: 1.0 },
        ..TrainConfig::default()
    };
    let mut a = start.clone();
    let mut opt = Optimizer::new(&a);
    let la = train_step(&mut a, &mut opt, &batch, &cfg, 0.01, 0).unwrap();
    assert!(la.att > 0.0, "attention is still reported");

    // Reference: cross-entropy alone, no attention branch on the tape.
    let mut b = start.clone();
    let mut g = Graph::new();
    let bound = b.params.bind(&mut g, true);
    let x = g.constant(batch.images.clone());
    let fwd = b.forward(&mut g, &bound, x, Mode::Train).unwrap();
    let recg = awc::recognition_loss(&mut g, fwd.classified.probs, &batch.labels).unwrap();
    g.backward(recg).unwrap();
    let grads: Vec<_> = bound.weights().map(|(pos, v)| (pos, g.grad(v).unwrap())).collect();
    let names: Vec<String> = b.params.iter().map(|p| p.name.clone()).collect();
    for (pos, grad) in grads {
        let p = b.params.get_mut(&names[pos]).unwrap();
        for (x, &d) in p.data_mut().iter_mut().zip(grad.data()) {
            *x -= 0.01 * d;
        }
    }
    for (pa, pb) in a.params.iter().zip(b.params.iter()).filter(|(p, _)| p.role == Role::Weight) {
        assert_eq!(pa.value, pb.value, "{}", pa.name);
    }
}

#[test]
fn overfits_one_separable_batch() {
    let imgs = images(&synth::separable_three_class(), 4, 1).cast_f32();
    let list = draws(&imgs.labels);
    let batch = TripletBatch::gather(&imgs, sample_triplets(&list, 4, 2, 0).unwrap()).unwrap();
    let mut model = Model::<f32>::new(ModelConfig::default(), 3).unwrap();
    let mut opt = Optimizer::new(&model);
    let cfg = TrainConfig::default();
    let mut last = f32::MAX;
    for step in 0..200 {
        last = train_step(&mut model, &mut opt, &batch, &cfg, 0.01, step).unwrap().recg;
        if last < 0.1 {
            break;
        }
    }
    assert!(last < 0.1, "recognition loss {last}");
}

#[test]
fn nan_input_names_the_step() {
    let mut batch = small_batch(1);
    batch.images.data_mut()[5] = f64::NAN;
    let mut model = small_model();
    let mut opt = Optimizer::new(&model);
    let err = train_step(&mut model, &mut opt, &batch, &TrainConfig::default(), 0.01, 7).unwrap_err();
    assert!(matches!(err, Error::Numeric { .. }), "{err}");
    assert!(err.to_string().contains("step 7"), "{err}");
}

fn meta(model: &Model<f32>) -> CheckpointMeta {
    CheckpointMeta {
        model: model.config.clone(),
        train: TrainConfig::default(),
        classes: vec!["a".into(), "b".into(), "c".into()],
        train_counts: vec![5, 5, 6],
        epoch: 4,
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let model = Model::<f32>::new(ModelConfig::default(), 8).unwrap();
    let ck = Checkpoint::from_model(&model, meta(&model));
    let bytes = ck.to_bytes();
    assert!(bytes.starts_with(MAGIC));
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes(), bytes);
    let restored: Model<f32> = back.model().unwrap();
    for (a, b) in restored.params.iter().zip(model.params.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.role, b.role);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value));
    }
}

#[test]
fn checkpoint_load_errors() {
    let model = Model::<f32>::new(ModelConfig::default(), 8).unwrap();
    let bytes = Checkpoint::from_model(&model, meta(&model)).to_bytes();

    let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
    assert!(err.to_string().contains("truncated"), "{err}");
    let err = Checkpoint::from_bytes(&bytes[..40]).unwrap_err();
    assert!(err.to_string().contains("truncated"), "{err}");

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("magic"));

    let mut wide = ModelConfig::default();
    wide.pyramid.adjusted_channels = 32;
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    let err = ck.into_model::<f32>(&wide).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)));
    assert!(err.to_string().contains("adjust1.weight"), "{err}");
}

fn tiny_dataset(dir: &Path) -> Manifest {
    synth::generate_synthetic(&synth::separable_three_class(), 4, 2, 3, dir).unwrap()
}

#[test]
fn zero_epochs_saves_initial_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_dataset(&dir.path().join("data"));
    let cfg = TrainConfig { epochs: 0, seed: 4, ..TrainConfig::default() };
    let out = dir.path().join("run");
    let fit = fit(&m, &cfg, Some(&out)).unwrap();
    let init = Model::<f32>::new(fit.model.config.clone(), 4).unwrap();
    let saved = Checkpoint::load(&out.join(CHECKPOINT)).unwrap();
    assert_eq!(saved.tensors, Checkpoint::from_model(&init, saved.meta.clone()).tensors);
    assert_eq!(saved.meta.epoch, 0);
    let log = std::fs::read_to_string(out.join(TRAIN_LOG)).unwrap();
    assert_eq!(log, "epoch,total_loss,att_loss,recg_loss,train_acc\n");
}

#[test]
fn fit_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_dataset(&dir.path().join("data"));
    let cfg = TrainConfig { epochs: 2, triplets_per_batch: 2, seed: 9, augment: true, ..TrainConfig::default() };
    let run = |name: &str| {
        let out = dir.path().join(name);
        let f = fit(&m, &cfg, Some(&out)).unwrap();
        assert_eq!(f.epochs.len(), 2);
        assert_eq!(f.steps.len(), 4);
        [CHECKPOINT, TRAIN_LOG, STEP_LOG].map(|f| std::fs::read(out.join(f)).unwrap())
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn step_log_round_trips_loss_identity() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_dataset(&dir.path().join("data"));
    let cfg = TrainConfig { epochs: 1, triplets_per_batch: 2, ..TrainConfig::default() };
    let out = dir.path().join("run");
    fit(&m, &cfg, Some(&out)).unwrap();
    let text = std::fs::read_to_string(out.join(STEP_LOG)).unwrap();
    for line in text.lines().skip(1) {
        let f: Vec<f32> = line.split(',').skip(3).map(|v| v.parse().unwrap()).collect();
        let recomputed = awc::combine_losses(f[1], f[2], &cfg.loss_weights);
        assert_eq!(f[0].to_bits(), recomputed.to_bits(), "{line}");
        assert!((f[3] + f[4] + f[5] - 1.0).abs() < 1e-6);
    }
}
