use super::*;
use crate::rng::{seeded, SeedTree};
use proptest::prelude::*;
use rand::Rng;

fn random_shard(n: usize, dim: usize, classes: usize, seed: u64) -> DatasetShard {
    let mut rng = seeded(seed);
    let features = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let labels = (0..n).map(|_| rng.gen_range(0..classes)).collect();
    DatasetShard::new(dim, classes, features, labels).unwrap()
}

fn profile(epochs: usize, batch: usize, lr: f64) -> DeviceProfile {
    DeviceProfile { uplink_factor: 1.0, local_epochs: epochs, batch_size: batch, learning_rate: lr }
}

#[test]
fn init_is_deterministic_and_bounded() {
    let a = MlpModel::init(&[2, 2], &mut seeded(1)).unwrap();
    let b = MlpModel::init(&[2, 2], &mut seeded(1)).unwrap();
    assert_eq!(a, b);
    let m = MlpModel::init(&[30, 20, 10], &mut seeded(2)).unwrap();
    for layer in m.layers() {
        let s = (6.0 / (layer.inputs() + layer.outputs()) as f64).sqrt();
        assert!(layer.weights().iter().all(|w| w.abs() < s));
        assert!(layer.biases().iter().all(|&b| b == 0.0));
    }
    assert!(MlpModel::init(&[3], &mut seeded(1)).is_err());
}

#[test]
fn uniform_output_has_log_ten_loss() {
    let model = MlpModel::zeros(&[4, 10]).unwrap();
    let shard = random_shard(7, 4, 10, 3);
    let (loss, probs) = forward_loss(&model, &shard).unwrap();
    assert!((loss - 10f64.ln()).abs() < 1e-12);
    assert!((loss - 2.302_585).abs() < 1e-6);
    for p in probs {
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn confident_correct_logits_have_vanishing_loss() {
    // a single linear layer with huge weight on the true class
    let mut params = vec![0.0; 2 * 2 + 2];
    params[0] = 1000.0; // class 0 ← feature 0
    params[3] = 1000.0; // class 1 ← feature 1
    let model = MlpModel::unflatten(&params, &[2, 2]).unwrap();
    let shard = DatasetShard::new(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0, 1]).unwrap();
    let (loss, _) = forward_loss(&model, &shard).unwrap();
    assert!(loss < 1e-12);
    assert_eq!(evaluate(&model, &shard).unwrap().accuracy, 1.0);
    let wrong = DatasetShard::new(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![1, 0]).unwrap();
    assert_eq!(evaluate(&model, &wrong).unwrap().accuracy, 0.0);
}

#[test]
fn dimension_mismatch_is_rejected() {
    let model = MlpModel::zeros(&[4, 3]).unwrap();
    assert!(matches!(
        forward_loss(&model, &random_shard(3, 5, 3, 1)),
        Err(LearnerError::Shape { expected: 4, found: 5 })
    ));
}

fn central_difference(model: &MlpModel, shard: &DatasetShard, h: f64) -> Vec<f64> {
    let dims = model.dims();
    let base = model.flatten();
    (0..base.len())
        .map(|k| {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[k] += h;
            minus[k] -= h;
            let lp = forward_loss(&MlpModel::unflatten(&plus, &dims).unwrap(), shard).unwrap().0;
            let lm = forward_loss(&MlpModel::unflatten(&minus, &dims).unwrap(), shard).unwrap().0;
            (lp - lm) / (2.0 * h)
        })
        .collect()
}

/// `|a − b| / max(|a|, |b|, 1e-6)`, worst coordinate.
pub(crate) fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

#[test]
fn backprop_matches_finite_differences() {
    let tree = SeedTree::new(77);
    for trial in 0..20 {
        let model = MlpModel::init(&[4, 3, 2], &mut tree.indexed("net", &[trial])).unwrap();
        let shard = random_shard(8, 4, 2, 1000 + trial);
        let analytic = gradient(&model, &shard).unwrap();
        let numeric = central_difference(&model, &shard, 1e-5);
        let err = max_relative_error(&analytic, &numeric);
        assert!(err <= 1e-5, "trial {trial}: {err}");
    }
}

#[test]
fn sgd_step_descends_and_zero_rate_is_identity() {
    let model = MlpModel::init(&[4, 8, 3], &mut seeded(5)).unwrap();
    let shard = random_shard(20, 4, 3, 6);
    assert_eq!(sgd_step(&model, &shard, 0.0).unwrap(), model);
    let before = forward_loss(&model, &shard).unwrap().0;
    let after = forward_loss(&sgd_step(&model, &shard, 1e-3).unwrap(), &shard).unwrap().0;
    assert!(after < before);
}

#[test]
fn local_train_counts_steps() {
    assert_eq!(local_step_count(50, &profile(1, 50, 0.1)), 1);
    assert_eq!(local_step_count(200, &profile(3, 50, 0.1)), 12);
    assert_eq!(local_step_count(120, &profile(2, 50, 0.1)), 6);

    // one full-batch epoch equals one sgd_step on the (order-invariant) mean loss
    let model = MlpModel::init(&[4, 5, 3], &mut seeded(8)).unwrap();
    let shard = random_shard(10, 4, 3, 9);
    let trained = local_train(&model, &shard, &profile(1, 10, 0.05), &mut seeded(1)).unwrap();
    let stepped = sgd_step(&model, &shard, 0.05).unwrap();
    let diff = max_relative_error(&trained.flatten(), &stepped.flatten());
    assert!(diff < 1e-12);
}

#[test]
fn local_train_is_deterministic() {
    let model = MlpModel::init(&[4, 5, 3], &mut seeded(8)).unwrap();
    let shard = random_shard(37, 4, 3, 9);
    let p = profile(3, 8, 0.05);
    let a = local_train(&model, &shard, &p, &mut seeded(42)).unwrap();
    let b = local_train(&model, &shard, &p, &mut seeded(42)).unwrap();
    assert_eq!(a, b);
    assert!(local_train(&model, &random_shard(0, 4, 3, 1), &p, &mut seeded(1)).is_err());
}

#[test]
fn more_epochs_fit_the_shard_better() {
    let mut wins = 0;
    for seed in 0..5 {
        let shard = synth_blobs(3, 30, 4, 2.0, 1.0, &mut seeded(seed)).unwrap();
        let model = MlpModel::init(&[4, 8, 3], &mut seeded(100 + seed)).unwrap();
        let one = local_train(&model, &shard, &profile(1, 10, 0.05), &mut seeded(seed)).unwrap();
        let five = local_train(&model, &shard, &profile(5, 10, 0.05), &mut seeded(seed)).unwrap();
        if forward_loss(&five, &shard).unwrap().0 <= forward_loss(&one, &shard).unwrap().0 {
            wins += 1;
        }
    }
    assert!(wins >= 3, "median comparison failed: {wins}/5");
}

#[test]
fn flatten_layout_and_roundtrip() {
    let model = MlpModel::init(&[2, 2], &mut seeded(3)).unwrap();
    let flat = model.flatten();
    assert_eq!(flat.len(), 6);
    assert_eq!(&flat[..4], model.layers()[0].weights());
    assert_eq!(MlpModel::unflatten(&flat, &[2, 2]).unwrap(), model);
    assert_eq!(param_count(&[784, 200, 100, 10]), 784 * 200 + 200 + 200 * 100 + 100 + 100 * 10 + 10);
    assert!(matches!(
        MlpModel::unflatten(&flat[..5], &[2, 2]),
        Err(LearnerError::Shape { expected: 6, found: 5 })
    ));
}

#[test]
fn fedavg_examples() {
    let m = MlpModel::init(&[3, 2], &mut seeded(4)).unwrap();
    assert_eq!(fedavg_aggregate(&[m.clone(), m.clone()], &[5, 5]).unwrap(), m);

    let zero = MlpModel::unflatten(&[0.0, 0.0], &[1, 1]).unwrap();
    let four = MlpModel::unflatten(&[4.0, 4.0], &[1, 1]).unwrap();
    let avg = fedavg_aggregate(&[zero.clone(), four.clone()], &[1, 3]).unwrap();
    assert_eq!(avg.flatten(), vec![3.0, 3.0]);
    let mean = fedavg_aggregate(&[zero, four], &[2, 2]).unwrap();
    assert_eq!(mean.flatten(), vec![2.0, 2.0]);

    let other = MlpModel::init(&[2, 2], &mut seeded(4)).unwrap();
    assert_eq!(fedavg_aggregate(&[m, other], &[1, 1]), Err(LearnerError::ArchitectureMismatch));
}

#[test]
fn uniform_predictor_scores_chance_on_balanced_labels() {
    // zero model: all logits tie, argmax picks class 0
    let model = MlpModel::zeros(&[3, 10]).unwrap();
    let mut rng = seeded(12);
    let labels: Vec<usize> = (0..5000).map(|_| rng.gen_range(0..10)).collect();
    let features = (0..5000 * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
    let shard = DatasetShard::new(3, 10, features, labels).unwrap();
    let acc = evaluate(&model, &shard).unwrap().accuracy;
    // binomial(5000, 0.1): sd ≈ 0.0042
    assert!((acc - 0.1).abs() < 0.02, "{acc}");
}

#[test]
fn idx_parsing_follows_the_format() {
    // hand-assembled: 2 images of 2×3, labels 7 and 1
    let mut images = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3];
    images.extend_from_slice(&[0, 255, 51, 102, 153, 204, 255, 0, 0, 0, 0, 255]);
    let labels = vec![0, 0, 8, 1, 0, 0, 0, 2, 7, 1];
    let shard = parse_idx(&images, &labels).unwrap();
    assert_eq!(shard.len(), 2);
    assert_eq!(shard.dim(), 6);
    assert_eq!(shard.features(0), &[0.0, 1.0, 0.2, 0.4, 0.6, 0.8]);
    assert_eq!(shard.labels(), &[7, 1]);

    let mut bad = images.clone();
    bad[3] = 0x01;
    assert!(matches!(parse_idx(&bad, &labels), Err(LearnerError::Format { offset: 0, .. })));
    assert!(matches!(
        parse_idx(&images[..20], &labels),
        Err(LearnerError::Format { offset: 20, .. })
    ));
    assert!(matches!(parse_idx(&images, &labels[..9]), Err(LearnerError::Format { offset: 9, .. })));
}

#[test]
fn idx_files_with_mnist_geometry() {
    let mut rng = seeded(3);
    let features: Vec<f64> = (0..3 * 784).map(|_| f64::from(rng.gen_range(0u8..=255)) / 255.0).collect();
    let shard = DatasetShard::new(784, 10, features, vec![3, 9, 0]).unwrap();
    let (images, labels) = to_idx(&shard, 28, 28);
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("img"), images).unwrap();
    std::fs::write(dir.path().join("lbl"), labels).unwrap();
    let loaded = load_idx(&dir.path().join("img"), &dir.path().join("lbl")).unwrap();
    assert_eq!(loaded.dim(), 784);
    assert_eq!(loaded, shard);
    assert!(matches!(
        load_idx(&dir.path().join("missing"), &dir.path().join("lbl")),
        Err(LearnerError::Io(_))
    ));
}

#[test]
fn blobs_geometry() {
    let exact = synth_blobs(4, 3, 2, 5.0, 0.0, &mut seeded(1)).unwrap();
    for i in 0..exact.len() {
        assert_eq!(exact.features(i), blob_center(exact.label(i), 2, 5.0).as_slice());
    }
    assert_eq!(blob_center(3, 2, 5.0), vec![0.0, 10.0]);
    assert!(synth_blobs(3, 0, 2, 5.0, 0.1, &mut seeded(1)).unwrap().is_empty());
}

#[test]
fn separated_blobs_are_linearly_learnable() {
    let train = synth_blobs(4, 25, 3, 5.0, 0.1, &mut seeded(1)).unwrap();
    let test = synth_blobs(4, 25, 3, 5.0, 0.1, &mut seeded(2)).unwrap();
    let model = MlpModel::init(&[3, 4], &mut seeded(3)).unwrap();
    let trained = local_train(&model, &train, &profile(30, 10, 0.1), &mut seeded(4)).unwrap();
    assert_eq!(evaluate(&trained, &test).unwrap().accuracy, 1.0);
}

#[test]
fn single_client_partition_takes_exact_count() {
    let labels: Vec<usize> = (0..100).map(|i| i % 5).collect();
    let cfg = PartitionConfig { beta: 0.5, n_clients: 1, samples_per_client: 40 };
    let parts = dirichlet_partition(&labels, 5, &cfg, &mut seeded(1)).unwrap();
    assert_eq!(parts.len(), 1);
    assert_eq!(parts[0].len(), 40);
    let too_many = PartitionConfig { beta: 0.5, n_clients: 3, samples_per_client: 40 };
    assert!(dirichlet_partition(&labels, 5, &too_many, &mut seeded(1)).is_err());
    let bad_beta = PartitionConfig { beta: 0.0, n_clients: 1, samples_per_client: 4 };
    assert!(dirichlet_partition(&labels, 5, &bad_beta, &mut seeded(1)).is_err());
}

#[test]
fn huge_concentration_gives_uniform_classes() {
    let labels: Vec<usize> = (0..10_000).map(|i| i % 10).collect();
    let cfg = PartitionConfig { beta: 1e6, n_clients: 20, samples_per_client: 200 };
    let parts = dirichlet_partition(&labels, 10, &cfg, &mut seeded(2)).unwrap();
    // χ² over the pooled histogram, 9 degrees of freedom, 1% critical value 21.67
    let mut counts = [0f64; 10];
    for part in &parts {
        for &i in part {
            counts[labels[i]] += 1.0;
        }
    }
    let expected = 4000.0 / 10.0;
    let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
    assert!(chi2 < 21.67, "{chi2}");
}

fn median_dominant_share(beta: f64, seed: u64) -> f64 {
    let labels: Vec<usize> = (0..10_000).map(|i| i % 10).collect();
    let cfg = PartitionConfig { beta, n_clients: 20, samples_per_client: 100 };
    let parts = dirichlet_partition(&labels, 10, &cfg, &mut seeded(seed)).unwrap();
    let mut shares: Vec<f64> = parts
        .iter()
        .map(|part| {
            let mut h = [0usize; 10];
            for &i in part {
                h[labels[i]] += 1;
            }
            *h.iter().max().unwrap() as f64 / part.len() as f64
        })
        .collect();
    shares.sort_by(f64::total_cmp);
    shares[shares.len() / 2]
}

#[test]
fn smaller_concentration_is_more_skewed() {
    for seed in 0..3 {
        assert!(median_dominant_share(0.1, seed) > median_dominant_share(10.0, seed));
    }
}

#[test]
fn exhausted_pools_fall_back_to_the_largest_class() {
    // class 0 has two samples, class 1 has ten
    let labels = vec![0, 0, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1];
    let cfg = PartitionConfig { beta: 1e6, n_clients: 2, samples_per_client: 6 };
    let parts = dirichlet_partition(&labels, 2, &cfg, &mut seeded(3)).unwrap();
    let mut all: Vec<usize> = parts.concat();
    all.sort_unstable();
    all.dedup();
    assert_eq!(all.len(), 12);
}

#[test]
fn largest_remainder_examples() {
    assert_eq!(largest_remainder(&[0.5, 0.5], 3), vec![2, 1]);
    assert_eq!(largest_remainder(&[0.1, 0.6, 0.3], 10), vec![1, 6, 3]);
    assert_eq!(largest_remainder(&[0.34, 0.33, 0.33], 2), vec![1, 1, 0]);
}

#[test]
fn device_profiles() {
    assert_eq!(epochs_for(0.2, 5), 1);
    assert_eq!(epochs_for(1.0, 5), 5);
    assert_eq!(epochs_for(0.5, 5), 3);
    let profiles = sample_device_profiles(500, 5, 50, 0.01, &mut seeded(4)).unwrap();
    assert!(profiles.iter().all(|p| (1..=5).contains(&p.local_epochs)));
    assert!(profiles.iter().all(|p| (0.2..=1.0).contains(&p.uplink_factor)));
    assert!(profiles.iter().all(|p| p.local_epochs == epochs_for(p.uplink_factor, 5)));
    assert!(sample_device_profiles(3, 0, 50, 0.01, &mut seeded(4)).is_err());
}

proptest! {
    #[test]
    fn flatten_is_a_bijection(seed in any::<u64>(), a in 1usize..6, b in 1usize..6, c in 1usize..6) {
        let dims = [a, b, c];
        let m = MlpModel::init(&dims, &mut seeded(seed)).unwrap();
        let flat = m.flatten();
        prop_assert_eq!(flat.len(), param_count(&dims));
        let back = MlpModel::unflatten(&flat, &dims).unwrap();
        prop_assert_eq!(back.flatten(), flat);
    }

    #[test]
    fn partitions_have_no_duplicates(seed in any::<u64>(), beta in 0.05f64..5.0, clients in 1usize..8) {
        let labels: Vec<usize> = (0..400).map(|i| (i * 7) % 6).collect();
        let cfg = PartitionConfig { beta, n_clients: clients, samples_per_client: 40 };
        let parts = dirichlet_partition(&labels, 6, &cfg, &mut seeded(seed)).unwrap();
        let mut all: Vec<usize> = parts.concat();
        prop_assert_eq!(all.len(), clients * 40);
        all.sort_unstable();
        all.dedup();
        prop_assert_eq!(all.len(), clients * 40);
    }

    #[test]
    fn softmax_rows_are_distributions(logits in proptest::collection::vec(-50.0f64..50.0, 1..12)) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn equal_weight_fedavg_is_the_mean(seed in any::<u64>(), k in 1usize..6) {
        let models: Vec<MlpModel> =
            (0..k).map(|i| MlpModel::init(&[3, 4, 2], &mut seeded(seed ^ i as u64)).unwrap()).collect();
        let avg = fedavg_aggregate(&models, &vec![7; k]).unwrap().flatten();
        let flats: Vec<Vec<f64>> = models.iter().map(MlpModel::flatten).collect();
        for (j, v) in avg.iter().enumerate() {
            let mean = flats.iter().map(|f| f[j]).sum::<f64>() / k as f64;
            prop_assert!((v - mean).abs() <= 1e-15 * mean.abs().max(1.0) * 4.0);
        }
    }
}

#[test]
fn class_evaluation_reweighted_by_test_mix_is_plain_evaluation() {
    let model = MlpModel::init(&[4, 6, 3], &mut seeded(40)).unwrap();
    let test = random_shard(90, 4, 3, 41);
    let by_class = evaluate_by_class(&model, &test).unwrap();
    let mix: Vec<f64> = test.class_histogram().iter().map(|&c| c as f64).collect();
    let a = by_class.reweighted(&mix);
    let b = evaluate(&model, &test).unwrap();
    assert!((a.accuracy - b.accuracy).abs() < 1e-12);
    assert!((a.loss - b.loss).abs() < 1e-12);
    assert_eq!(by_class.counts.iter().sum::<usize>(), 90);
}

#[test]
fn reweighting_skips_classes_missing_from_the_test_set() {
    let e = ClassEvaluation { counts: vec![5, 0, 5], accuracy: vec![1.0, 0.0, 0.5], loss: vec![0.1, 9.0, 0.3] };
    let r = e.reweighted(&[1.0, 100.0, 3.0]);
    assert!((r.accuracy - (1.0 + 1.5) / 4.0).abs() < 1e-15);
    assert!((r.loss - (0.1 + 0.9) / 4.0).abs() < 1e-15);
    assert_eq!(e.reweighted(&[0.0, 1.0, 0.0]), Evaluation { accuracy: 0.0, loss: 0.0 });
}
