use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use vitprobe::probe::{
    evaluate_accuracy, fit_probe, fit_probe_from, softmax_xent_loss_grad, FeatureMatrix, FitConfig,
};
use vitprobe::rng::keyed_rng;
use vitprobe::Tensor;

mod common;

use common::{binomial_outside, blobs, separable_by_search};

fn matrix(rows: &[Vec<f32>], labels: &[usize], c: usize) -> FeatureMatrix {
    let d = rows[0].len();
    let data = rows.iter().flatten().copied().collect();
    FeatureMatrix::new(Tensor::new(vec![rows.len(), d], data).unwrap(), labels.to_vec(), c, None)
        .unwrap()
}

#[test]
fn separable_blobs_are_fit_exactly() {
    let (rows, labels) = blobs(40, 1, 0.5);
    assert!(separable_by_search(&rows, &labels));
    let train = matrix(&rows, &labels, 2);
    let model = fit_probe(&train, &FitConfig::default()).unwrap();
    assert_eq!(evaluate_accuracy(&model, &train).unwrap(), 1.0);
}

#[test]
fn noise_features_score_near_chance() {
    let (n_train, n_test, d, c) = (500usize, 500usize, 8usize, 10usize);
    // With 500 test rows, accuracy in [0.05, 0.18] means 25..=90 correct.
    let outside = binomial_outside(n_test as u64, 0.1, 25, 90);
    assert!(outside < 1e-3, "bounds too tight: {outside}");
    for seed in 0..5 {
        let mut rng = keyed_rng(seed, "noise-probe", 0);
        let mut draw = |n: usize| {
            let rows: Vec<Vec<f32>> = (0..n)
                .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
                .collect();
            let mut labels: Vec<usize> = (0..n).map(|i| i % c).collect();
            labels.shuffle(&mut rng);
            (rows, labels)
        };
        let (tr, ytr) = draw(n_train);
        let (te, yte) = draw(n_test);
        let model = fit_probe(&matrix(&tr, &ytr, c), &FitConfig::default()).unwrap();
        let acc = evaluate_accuracy(&model, &matrix(&te, &yte, c)).unwrap();
        assert!((0.05..=0.18).contains(&acc), "seed {seed}: {acc}");
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let (n, d, c) = (6, 3, 3);
    let mut rng = keyed_rng(2, "probe-fd", 0);
    let x: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
    let y = vec![0, 1, 2, 2, 1, 0];
    let w: Vec<f64> = (0..d * c).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.5).collect();
    let b: Vec<f64> = (0..c).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.5).collect();
    let l2 = 0.3;
    let loss = |w: &[f64], b: &[f64]| {
        let mut gw = vec![0.0; d * c];
        let mut gb = vec![0.0; c];
        softmax_xent_loss_grad(w, b, &x, &y, l2, &mut gw, &mut gb)
    };
    let mut gw = vec![0.0; d * c];
    let mut gb = vec![0.0; c];
    softmax_xent_loss_grad(&w, &b, &x, &y, l2, &mut gw, &mut gb);

    let h = 1e-5;
    let rel = |a: f64, num: f64| (a - num).abs() / a.abs().max(num.abs()).max(1e-8);
    for i in 0..d * c {
        let (mut p, mut m) = (w.clone(), w.clone());
        p[i] += h;
        m[i] -= h;
        let num = (loss(&p, &b) - loss(&m, &b)) / (2.0 * h);
        assert!(rel(gw[i], num) < 1e-6, "W[{i}]: {} vs {num}", gw[i]);
    }
    for j in 0..c {
        let (mut p, mut m) = (b.clone(), b.clone());
        p[j] += h;
        m[j] -= h;
        let num = (loss(&w, &p) - loss(&w, &m)) / (2.0 * h);
        assert!(rel(gb[j], num) < 1e-6, "b[{j}]: {} vs {num}", gb[j]);
    }
}

#[test]
fn duplicated_rows_leave_the_fit_unchanged() {
    let (rows, labels) = blobs(60, 3, 1.5);
    let doubled: Vec<Vec<f32>> = rows.iter().chain(&rows).cloned().collect();
    let doubled_labels: Vec<usize> = labels.iter().chain(&labels).copied().collect();
    let cfg = FitConfig {
        tol: 1e-10,
        max_iter: 1000,
        ..FitConfig::default()
    };
    let a = fit_probe(&matrix(&rows, &labels, 2), &cfg).unwrap();
    let b = fit_probe(&matrix(&doubled, &doubled_labels, 2), &cfg).unwrap();
    for (p, q) in a.weight.data().iter().zip(b.weight.data()) {
        assert!((p - q).abs() < 1e-6, "{p} vs {q}");
    }
    for (p, q) in a.bias.iter().zip(&b.bias) {
        assert!((p - q).abs() < 1e-6, "{p} vs {q}");
    }
}

#[test]
fn different_starts_reach_the_same_objective() {
    let mut rng = keyed_rng(5, "starts", 0);
    let (n, d, c) = (150, 6, 4);
    let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    let rows: Vec<Vec<f32>> = labels
        .iter()
        .map(|&y| {
            (0..d)
                .map(|j| (if j == y { 1.0 } else { 0.0 }) + rng.sample::<f32, _>(StandardNormal))
                .collect()
        })
        .collect();
    let train = matrix(&rows, &labels, c);
    let cfg = FitConfig::default();
    let zero = fit_probe(&train, &cfg).unwrap();
    let init: Vec<f64> = (0..d * c + c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let other = fit_probe_from(&train, &cfg, &init).unwrap();
    assert!(zero.meta.converged && other.meta.converged);
    assert!(
        (zero.meta.final_loss - other.meta.final_loss).abs() < 1e-6,
        "{} vs {}",
        zero.meta.final_loss,
        other.meta.final_loss
    );
}

#[test]
fn standardization_does_not_change_predictions() {
    let (rows, labels) = blobs(40, 7, 0.5);
    // Shift and stretch the raw coordinates so standardization has work to do.
    let raw: Vec<Vec<f32>> = rows.iter().map(|r| vec![100.0 + 20.0 * r[0], 0.1 * r[1] - 3.0]).collect();
    let (test_rows, test_labels) = blobs(200, 8, 0.5);
    let test_raw: Vec<Vec<f32>> = test_rows
        .iter()
        .map(|r| vec![100.0 + 20.0 * r[0], 0.1 * r[1] - 3.0])
        .collect();
    let train = matrix(&raw, &labels, 2);
    let test = matrix(&test_raw, &test_labels, 2);
    let with = fit_probe(&train, &FitConfig::default()).unwrap();
    let without = fit_probe(
        &train,
        &FitConfig {
            standardize: false,
            max_iter: 2000,
            ..FitConfig::default()
        },
    )
    .unwrap();
    assert_eq!(
        with.predict(&test.features).unwrap(),
        without.predict(&test.features).unwrap()
    );
}

#[test]
fn accuracy_ignores_test_row_order() {
    let (rows, labels) = blobs(40, 9, 1.5);
    let model = fit_probe(&matrix(&rows, &labels, 2), &FitConfig::default()).unwrap();
    let (test_rows, test_labels) = blobs(100, 10, 1.5);
    let base = evaluate_accuracy(&model, &matrix(&test_rows, &test_labels, 2)).unwrap();
    let mut order: Vec<usize> = (0..100).collect();
    order.shuffle(&mut keyed_rng(11, "perm", 0));
    let pr: Vec<Vec<f32>> = order.iter().map(|&i| test_rows[i].clone()).collect();
    let pl: Vec<usize> = order.iter().map(|&i| test_labels[i]).collect();
    assert_eq!(evaluate_accuracy(&model, &matrix(&pr, &pl, 2)).unwrap(), base);
    let wrong = matrix(&[vec![0.0; 3]], &[0], 2);
    assert!(evaluate_accuracy(&model, &wrong).is_err());
}
