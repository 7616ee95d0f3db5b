// SPDX-License-Identifier: MIT OR Apache-2.0

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::dataset::{LayerRange, TokenRecord};

fn random_model(rng: &mut ChaCha8Rng, t: usize, d: usize) -> ProbeModel {
    let mut m = ProbeModel::zeros(t, d);
    // Magnitudes kept away from zero so |w| is smooth within the FD step.
    for w in m.weights.iter_mut() {
        let mag: f64 = rng.random_range(0.1..1.0);
        *w = if rng.random::<bool>() { mag } else { -mag };
    }
    for b in m.bias.iter_mut() {
        *b = rng.random_range(-1.0..1.0);
    }
    m
}

fn random_batch(rng: &mut ChaCha8Rng, t: usize, d: usize, b: usize) -> (Vec<f64>, Vec<usize>) {
    let x = (0..b * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let y = (0..b).map(|_| rng.random_range(0..t)).collect();
    (x, y)
}

/// Softmax evaluated without max-shifting and with compensated summation.
fn oracle_softmax(model: &ProbeModel, x: &[f64]) -> Vec<f64> {
    let logits: Vec<f64> = (0..model.num_labels)
        .map(|t| {
            let mut terms: Vec<f64> = (0..model.num_features)
                .map(|j| model.weight(t, j) * x[j])
                .collect();
            terms.push(model.bias[t]);
            neumaier(&terms)
        })
        .collect();
    let exps: Vec<f64> = logits.iter().map(|z| z.exp()).collect();
    let total = neumaier(&exps);
    exps.iter().map(|e| e / total).collect()
}

fn neumaier(values: &[f64]) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Central finite differences of `loss` over every weight and bias entry.
fn finite_difference(model: &ProbeModel, batch: Batch<'_>, h: f64) -> Gradient {
    let mut out = Gradient::zeros(model);
    let mut probe = model.clone();
    for i in 0..model.weights.len() {
        let w = model.weights[i];
        probe.weights[i] = w + h;
        let up = loss(&probe, batch).unwrap();
        probe.weights[i] = w - h;
        let down = loss(&probe, batch).unwrap();
        probe.weights[i] = w;
        out.weights[i] = (up - down) / (2.0 * h);
    }
    for i in 0..model.bias.len() {
        let b = model.bias[i];
        probe.bias[i] = b + h;
        let up = loss(&probe, batch).unwrap();
        probe.bias[i] = b - h;
        let down = loss(&probe, batch).unwrap();
        probe.bias[i] = b;
        out.bias[i] = (up - down) / (2.0 * h);
    }
    out
}

fn max_relative_error(a: &Gradient, b: &Gradient) -> f64 {
    a.weights
        .iter()
        .chain(&a.bias)
        .zip(b.weights.iter().chain(&b.bias))
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

fn dataset_from(rows: &[Vec<f32>]) -> ActivationDataset {
    let d = rows[0].len();
    let tokens = (0..rows.len())
        .map(|i| TokenRecord {
            sentence_id: (i / 10) as u64,
            token_index: (i % 10) as u64,
            surface: format!("w{}", i % 37),
        })
        .collect();
    ActivationDataset::new(
        d,
        rows.iter().flatten().copied().collect(),
        tokens,
        vec![LayerRange::new("layer0", 0, d)],
    )
    .unwrap()
}

fn column(labels: Vec<usize>, t: usize) -> LabelColumn {
    LabelColumn::new("task", labels, (0..t).map(|i| format!("T{i}")).collect()).unwrap()
}

/// Two classes separated along neurons 0 and 1, the other 8 neurons noise.
fn planted_binary(seed: u64, n: usize) -> (ActivationDataset, LabelColumn) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = rng.random_range(0..2usize);
        let sign = if y == 1 { 1.0 } else { -1.0 };
        let mut row: Vec<f32> = (0..10).map(|_| noise.sample(&mut rng) as f32).collect();
        row[0] = (sign * 2.0 + 0.5 * noise.sample(&mut rng)) as f32;
        row[1] = (sign * 2.0 + 0.5 * noise.sample(&mut rng)) as f32;
        rows.push(row);
        labels.push(y);
    }
    (dataset_from(&rows), column(labels, 2))
}

#[test]
fn zero_model_is_uniform() {
    let m = ProbeModel::zeros(4, 3);
    assert_eq!(m.predict_proba(&[1.0, -2.0, 3.0]).unwrap(), vec![0.25; 4]);
}

#[test]
fn softmax_closed_form() {
    let mut m = ProbeModel::zeros(2, 1);
    m.bias = vec![2f64.ln(), 0.0];
    let p = m.predict_proba(&[0.0]).unwrap();
    assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn softmax_matches_compensated_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = random_model(&mut rng, 5, 12);
    let x: Vec<f64> = (0..12).map(|_| rng.random_range(-3.0..3.0)).collect();
    let p = m.predict_proba(&x).unwrap();
    let q = oracle_softmax(&m, &x);
    for (a, b) in p.iter().zip(&q) {
        assert!((a - b).abs() < 1e-6);
    }
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
}

#[test]
fn dimension_mismatch() {
    let m = ProbeModel::zeros(2, 3);
    assert!(matches!(
        m.predict_proba(&[1.0]),
        Err(Error::DimensionMismatch {
            expected: 3,
            found: 1
        })
    ));
    let x = [1.0, 2.0];
    assert!(loss(&m, Batch::new(&x, &[0])).is_err());
}

#[test]
fn zero_weights_give_ln2() {
    let m = ProbeModel::zeros(2, 3).with_lambdas(0.0, 1.0);
    let x = [1.0, 2.0, 3.0, -1.0, 0.5, 0.0, 4.0, 4.0, 4.0];
    let value = loss(&m, Batch::new(&x, &[0, 1, 1])).unwrap();
    assert!((value - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn hand_computed_loss() {
    let mut m = ProbeModel::zeros(2, 2).with_lambdas(0.1, 0.01);
    m.weights = vec![0.5, -0.25, -0.75, 1.0];
    m.bias = vec![0.1, -0.2];
    let x = [1.0, -2.0];
    let batch = Batch::new(&x, &[1]);
    // Evaluated independently at 40 significant digits.
    assert!((nll(&m, batch).unwrap() - 4.067272345143765).abs() < 1e-12);
    assert!((loss(&m, batch).unwrap() - 4.336022345143765).abs() < 1e-12);
}

#[test]
fn balanced_batch_has_zero_bias_gradient() {
    let m = ProbeModel::zeros(2, 2);
    let x = [1.0, 2.0, -3.0, 0.5];
    let g = gradient(&m, Batch::new(&x, &[0, 1])).unwrap();
    assert_eq!(g.bias, vec![0.0, 0.0]);
}

#[test]
fn l2_term_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let base = random_model(&mut rng, 3, 4);
    let (x, y) = random_batch(&mut rng, 3, 4, 6);
    let batch = Batch::new(&x, &y);
    let plain = gradient(&base, batch).unwrap();
    let reg = gradient(&base.clone().with_lambdas(0.0, 0.3), batch).unwrap();
    for ((r, p), w) in reg.weights.iter().zip(&plain.weights).zip(&base.weights) {
        assert!((r - p - 0.6 * w).abs() < 1e-14);
    }
    assert_eq!(reg.bias, plain.bias);
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let m = random_model(&mut rng, 3, 5).with_lambdas(0.05, 0.02);
    let (x, y) = random_batch(&mut rng, 3, 5, 7);
    let batch = Batch::new(&x, &y);
    let analytic = gradient(&m, batch).unwrap();
    let numeric = finite_difference(&m, batch, 1e-4);
    assert!(max_relative_error(&analytic, &numeric) < 1e-4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gradient_property(seed in any::<u64>(), d in 1usize..=8, t in 2usize..=5, b in 1usize..=16,
                         l1 in 0.0f64..0.1, l2 in 0.0f64..0.1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_model(&mut rng, t, d).with_lambdas(l1, l2);
        let (x, y) = random_batch(&mut rng, t, d, b);
        let batch = Batch::new(&x, &y);
        let err = max_relative_error(&gradient(&m, batch).unwrap(), &finite_difference(&m, batch, 1e-4));
        prop_assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn probabilities_normalized(seed in any::<u64>(), d in 1usize..=16, t in 2usize..=8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_model(&mut rng, t, d);
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-10.0..10.0)).collect();
        let p = m.predict_proba(&x).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn trains_on_separable_data() {
    let (ds, labels) = planted_binary(3, 1000);
    // The planted direction itself separates almost every row.
    let reference = (0..ds.num_tokens())
        .filter(|&r| {
            let row = ds.row(r);
            usize::from(row[0] + row[1] > 0.0) == labels.labels[r]
        })
        .count() as f64
        / ds.num_tokens() as f64;
    assert!(reference >= 0.99);

    let model = train(
        &ds,
        &labels,
        &TrainConfig::default().with_seed(3),
        0.0,
        0.0,
        None,
    )
    .unwrap();
    let acc = evaluate(&model, &ds, &labels).unwrap();
    assert!(acc >= 0.98, "accuracy {acc}");
    assert!(model.is_finite());
}

#[test]
fn full_subset_equals_full_training() {
    let (ds, labels) = planted_binary(4, 300);
    let config = TrainConfig::default().with_seed(9);
    let full = train(&ds, &labels, &config, 1e-3, 1e-3, None).unwrap();
    let all: Vec<usize> = (0..10).collect();
    let subset = train(&ds, &labels, &config, 1e-3, 1e-3, Some(&all)).unwrap();
    assert_eq!(full.weights, subset.weights);
    assert_eq!(full.bias, subset.bias);
    assert_eq!(
        evaluate(&full, &ds, &labels).unwrap(),
        evaluate(&subset, &ds, &labels).unwrap()
    );
    assert_eq!(subset.trained_on.feature_subset, Some(all));
}

#[test]
fn training_is_deterministic() {
    let (ds, labels) = planted_binary(5, 700);
    let config = TrainConfig {
        batch_size: 64,
        ..TrainConfig::default().with_seed(11)
    };
    let a = train(&ds, &labels, &config, 1e-4, 1e-3, None).unwrap();
    let b = train(&ds, &labels, &config, 1e-4, 1e-3, None).unwrap();
    assert_eq!(a, b);
    let c = train(&ds, &labels, &config.with_seed(12), 1e-4, 1e-3, None).unwrap();
    assert_ne!(a.weights, c.weights);
}

#[test]
fn invalid_training_inputs() {
    let (ds, labels) = planted_binary(6, 50);
    let zero_epochs = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    assert!(matches!(
        train(&ds, &labels, &zero_epochs, 0.0, 0.0, None),
        Err(Error::InvalidConfig(_))
    ));
    let c = TrainConfig::default();
    assert!(matches!(
        train(&ds, &labels, &c, 0.0, 0.0, Some(&[])),
        Err(Error::EmptySubset)
    ));
    assert!(matches!(
        train(&ds, &labels, &c, 0.0, 0.0, Some(&[10])),
        Err(Error::IndexOutOfRange { index: 10, .. })
    ));
    assert!(train(&ds, &labels, &c, -1.0, 0.0, None).is_err());
}

#[test]
fn subset_training_matches_restricted_dataset() {
    let (ds, labels) = planted_binary(8, 400);
    let config = TrainConfig::default().with_seed(2);
    let sorted = [0, 1, 4, 7];
    let via_subset = train(&ds, &labels, &config, 1e-3, 1e-2, Some(&[7, 1, 4, 0])).unwrap();
    let restricted = ds.select_columns(&sorted).unwrap();
    let via_columns = train(&restricted, &labels, &config, 1e-3, 1e-2, None).unwrap();
    assert_eq!(via_subset.weights, via_columns.weights);
    assert_eq!(via_subset.trained_on.feature_subset, Some(sorted.to_vec()));
    assert_eq!(
        evaluate(&via_subset, &ds, &labels).unwrap(),
        evaluate(&via_columns, &restricted, &labels).unwrap()
    );

    // A permuted column order yields the same probe up to column reordering.
    let permuted = ds.select_columns(&[7, 1, 4, 0]).unwrap();
    let via_permuted = train(&permuted, &labels, &config, 1e-3, 1e-2, None).unwrap();
    let map = [3, 1, 2, 0];
    for t in 0..2 {
        for (j, &k) in map.iter().enumerate() {
            assert!((via_subset.weight(t, j) - via_permuted.weight(t, k)).abs() < 1e-5);
        }
    }
    assert_eq!(
        evaluate(&via_subset, &ds, &labels).unwrap(),
        evaluate(&via_permuted, &permuted, &labels).unwrap()
    );
}

fn constant_model(d: usize) -> ProbeModel {
    let mut m = ProbeModel::zeros(2, d);
    m.bias = vec![1.0, 0.0];
    m
}

#[test]
fn accuracy_examples() {
    let ds = dataset_from(&[vec![0.3, 1.0], vec![-0.2, 4.0]]);
    let m = constant_model(2);
    assert_eq!(evaluate(&m, &ds, &column(vec![0, 0], 2)).unwrap(), 1.0);
    assert_eq!(evaluate(&m, &ds, &column(vec![0, 1], 2)).unwrap(), 0.5);
    // Ties resolve to the lowest label id.
    let tied = ProbeModel::zeros(2, 2);
    assert_eq!(evaluate(&tied, &ds, &column(vec![0, 0], 2)).unwrap(), 1.0);
    let wrong = dataset_from(&[vec![0.3, 1.0, 0.0], vec![-0.2, 4.0, 0.0]]);
    assert!(matches!(
        evaluate(&m, &wrong, &column(vec![0, 0], 2)),
        Err(Error::DimensionMismatch { .. })
    ));
}

#[test]
fn ablation_identity_and_empty_keep_set() {
    let (ds, labels) = planted_binary(12, 500);
    let model = train(
        &ds,
        &labels,
        &TrainConfig::default().with_seed(1),
        0.0,
        0.0,
        None,
    )
    .unwrap();
    let all: Vec<usize> = (0..10).collect();
    assert_eq!(
        evaluate(&model, &ds, &labels).unwrap().to_bits(),
        evaluate_ablated(&model, &ds, &labels, &all)
            .unwrap()
            .to_bits()
    );

    let bias_label = argmax(&model.bias);
    let freq = labels.labels.iter().filter(|&&l| l == bias_label).count() as f64 / 500.0;
    assert_eq!(evaluate_ablated(&model, &ds, &labels, &[]).unwrap(), freq);

    assert!(matches!(
        evaluate_ablated(&model, &ds, &labels, &[11]),
        Err(Error::IndexOutOfRange { .. })
    ));
}

#[test]
fn planted_ablation() {
    let (ds, labels) = planted_binary(13, 1000);
    let model = train(
        &ds,
        &labels,
        &TrainConfig::default().with_seed(4),
        0.0,
        0.0,
        None,
    )
    .unwrap();
    let full = evaluate(&model, &ds, &labels).unwrap();
    let informative = evaluate_ablated(&model, &ds, &labels, &[0, 1]).unwrap();
    assert!((full - informative).abs() <= 0.02);
    let majority = labels
        .labels
        .iter()
        .filter(|&&l| l == 1)
        .count()
        .max(labels.labels.iter().filter(|&&l| l == 0).count()) as f64
        / 1000.0;
    // Two least informative neurons (20% of 10).
    let noise = evaluate_ablated(&model, &ds, &labels, &[8, 9]).unwrap();
    assert!(
        (noise - majority).abs() < 0.1,
        "noise {noise}, majority {majority}"
    );
}

#[test]
fn selectivity_examples() {
    assert!((selectivity(0.9604, 0.8159) - 0.1445).abs() < 1e-12);
    assert_eq!(selectivity(0.7, 0.7), 0.0);
    assert!((selectivity(0.5, 0.7) + 0.2).abs() < 1e-12);
}

#[test]
fn model_file_round_trip() {
    let (ds, labels) = planted_binary(14, 200);
    let model = train(
        &ds,
        &labels,
        &TrainConfig::default().with_seed(3),
        1e-4,
        1e-4,
        Some(&[0, 3, 1]),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("probe.json");
    model.save(&path).unwrap();
    let bin = std::fs::metadata(dir.path().join("probe.bin"))
        .unwrap()
        .len();
    assert_eq!(bin, 4 * 2 * (3 + 1));
    assert_eq!(ProbeModel::load(&path).unwrap(), model);
    std::fs::write(dir.path().join("probe.bin"), [0u8; 4]).unwrap();
    assert!(matches!(
        ProbeModel::load(&path),
        Err(Error::SizeMismatch { .. })
    ));
}

/// Fixed full-batch instance: 60 rows, 20 features, 3 labels.
fn convex_instance() -> (Vec<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..60 {
        let label = i % 3;
        for j in 0..20 {
            let shift = if j % 3 == label && j < 6 { 1.0 } else { 0.0 };
            x.push(shift + noise.sample(&mut rng));
        }
        y.push(label);
    }
    (x, y)
}

#[test]
fn solver_reaches_stationarity() {
    let (x, y) = convex_instance();
    let (model, report) =
        solve_full_batch(Batch::new(&x, &y), 3, 1e-2, 1e-2, 1e-8, 200_000).unwrap();
    assert!(report.converged, "{report:?}");
    // At a stationary point the L1-free analytic gradient has |g| <= lambda1 on zeros.
    let g = gradient(&model.clone().with_lambdas(0.0, 1e-2), Batch::new(&x, &y)).unwrap();
    for (gw, w) in g.weights.iter().zip(&model.weights) {
        if *w == 0.0 {
            assert!(gw.abs() <= 1e-2 + 1e-8);
        }
    }
}

#[test]
fn l1_norm_shrinks_with_lambda1() {
    let (x, y) = convex_instance();
    let mut previous = f64::INFINITY;
    for lambda1 in [0.0, 1e-3, 1e-2, 1e-1] {
        let (model, report) =
            solve_full_batch(Batch::new(&x, &y), 3, lambda1, 1e-2, 1e-6, 500_000).unwrap();
        assert!(report.converged);
        assert!(model.l1_norm() <= previous + 1e-6);
        previous = model.l1_norm();
    }
}
