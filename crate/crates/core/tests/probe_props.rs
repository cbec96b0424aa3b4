use layerlens::probe::{
    stack_inputs, statistical_pool, train, train_from, Activation, PooledVector, ProbeModel, TrainConfig,
};
use layerlens::rng::{seeded, Rng};
use layerlens::store::EmbeddingMatrix;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng as _;

fn random_batch(rng: &mut Rng, n: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let x = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let y = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
    (x, y)
}

/// Largest `|a − n| / max(|a|, |n|, floor)` over all parameters, with `n`
/// the central difference at step `h`. The floor only matters for entries
/// whose true gradient is zero (dead rectifier units).
fn gradient_check(model: &ProbeModel, x: &[f64], y: &[f64], h: f64, floor: f64) -> f64 {
    let (_, analytic) = model.loss_and_gradient(x, y).unwrap();
    let analytic = analytic.flatten();
    let base = model.flatten();
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        let mut p = base.clone();
        p[i] = base[i] + h;
        probe.set_flat(&p).unwrap();
        let up = probe.loss(x, y).unwrap();
        p[i] = base[i] - h;
        probe.set_flat(&p).unwrap();
        let down = probe.loss(x, y).unwrap();
        let numeric = (up - down) / (2.0 * h);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn analytic_gradient_matches_central_differences() {
    for seed in 0..20u64 {
        let mut rng = seeded(1000 + seed);
        let model = ProbeModel::init(6, 16, Activation::Relu, seed);
        let (x, y) = random_batch(&mut rng, 5, 6);
        let worst = gradient_check(&model, &x, &y, 1e-5, 1e-6);
        assert!(worst < 1e-4, "seed {seed}: relative error {worst}");
    }
}

#[test]
fn identity_activation_gradient() {
    let mut rng = seeded(3);
    let model = ProbeModel::init(4, 8, Activation::Identity, 3);
    let (x, y) = random_batch(&mut rng, 5, 4);
    assert!(gradient_check(&model, &x, &y, 1e-5, 1e-6) < 1e-4);
}

#[test]
fn forward_matches_matrix_oracle() {
    let mut rng = seeded(17);
    for seed in 0..10 {
        let (d, h) = (10, 12);
        let model = ProbeModel::init(d, h, Activation::Relu, seed);
        let (x, _) = random_batch(&mut rng, 7, d);
        let got = model.predict(&x).unwrap();

        let xm = DMatrix::from_row_slice(7, d, &x);
        let w1 = DMatrix::from_row_slice(d, h, &model.w1);
        let w2 = DMatrix::from_row_slice(h, h, &model.w2);
        let w3 = DVector::from_column_slice(&model.w3);
        let relu = |m: DMatrix<f64>| m.map(|v| v.max(0.0));
        let bias = |m: DMatrix<f64>, b: &[f64]| {
            let mut m = m;
            for mut row in m.row_iter_mut() {
                for (v, bi) in row.iter_mut().zip(b) {
                    *v += bi;
                }
            }
            m
        };
        let a1 = relu(bias(&xm * w1, &model.b1));
        let a2 = relu(bias(&a1 * w2, &model.b2));
        let out = a2 * w3;
        for (g, o) in got.iter().zip(out.iter()) {
            assert!((g - (o + model.b3)).abs() < 1e-10);
        }
        let single = model.forward(&PooledVector::from_vec(x[..d].to_vec())).unwrap();
        assert_eq!(single, got[0]);
    }
}

#[test]
fn random_matrix_pooling_matches_two_pass_oracle() {
    let mut rng = seeded(37);
    let data: Vec<f32> = (0..37 * 16).map(|_| rng.random_range(-5.0f32..5.0)).collect();
    let m = EmbeddingMatrix::new(37, 16, data.clone()).unwrap();
    let p = statistical_pool(&m);
    for j in 0..16 {
        let col: Vec<f64> = (0..37).map(|i| f64::from(data[i * 16 + j])).collect();
        let mean = col.iter().sum::<f64>() / 37.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 37.0;
        assert!((p.means()[j] - mean).abs() < 1e-12);
        assert!((p.stds()[j] - var.sqrt()).abs() < 1e-12);
    }
}

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        hidden_dim: 16,
        learning_rate: 1e-3,
        max_epochs: 60,
        patience: 10,
        seed,
        ..TrainConfig::default()
    }
}

fn pooled_items(rng: &mut Rng, n: usize, d: usize) -> Vec<PooledVector> {
    (0..n)
        .map(|_| PooledVector::from_vec((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect()
}

#[test]
fn training_is_bit_reproducible() {
    let mut rng = seeded(5);
    let x = pooled_items(&mut rng, 40, 6);
    let y: Vec<f64> = (0..40).map(|i| (i % 10) as f64).collect();
    let (m1, h1) = train(&x, &y, &small_config(9)).unwrap();
    let (m2, h2) = train(&x, &y, &small_config(9)).unwrap();
    assert_eq!(m1.flatten(), m2.flatten());
    assert_eq!(h1, h2);
    let (m3, _) = train(&x, &y, &small_config(10)).unwrap();
    assert_ne!(m1.flatten(), m3.flatten());
    assert!(m1.is_finite());
}

#[test]
fn constant_target_is_absorbed() {
    let mut rng = seeded(6);
    let x = pooled_items(&mut rng, 50, 4);
    let y = vec![6.5; 50];
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        batch_size: 50,
        max_epochs: 5000,
        patience: 200,
        validation_fraction: 0.0,
        ..small_config(1)
    };
    let (model, _) = train(&x, &y, &cfg).unwrap();
    let (flat, _) = stack_inputs(&x).unwrap();
    let preds = model.predict(&flat).unwrap();
    let mse = preds.iter().map(|p| (p - 6.5).powi(2)).sum::<f64>() / 50.0;
    assert!(preds.iter().all(|p| (p - 6.5).abs() < 1e-2), "{preds:?}");
    assert!(mse < 1e-3);
}

#[test]
fn outputs_are_not_clamped() {
    let mut model = ProbeModel::zeros(2, 3, Activation::Relu);
    model.b3 = 42.0;
    assert_eq!(model.forward(&PooledVector::from_vec(vec![1.0, 2.0])).unwrap(), 42.0);
    model.b3 = -3.0;
    assert_eq!(model.forward(&PooledVector::from_vec(vec![1.0, 2.0])).unwrap(), -3.0);
}

#[test]
fn convex_full_batch_loss_never_increases() {
    let mut rng = seeded(8);
    let d = 6;
    let x = pooled_items(&mut rng, 32, d);
    let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y: Vec<f64> = x
        .iter()
        .map(|p| 5.0 + p.as_slice().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    let cfg = TrainConfig {
        learning_rate: 1e-5,
        batch_size: 32,
        max_epochs: 300,
        patience: 299,
        freeze_hidden: true,
        ..TrainConfig::default()
    };
    let start = ProbeModel::identity_passthrough(d);
    let (model, hist) = train_from(start.clone(), &x, &y, &x, &y, &cfg).unwrap();
    assert_eq!(hist.epochs.len(), 300);
    for pair in hist.epochs.windows(2) {
        assert!(pair[1].train_mse <= pair[0].train_mse, "{:?}", pair);
    }
    assert_eq!(model.w1, start.w1);
    assert_eq!(model.w2, start.w2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pooling_is_frame_permutation_invariant(
        frames in 1usize..20,
        dim in 1usize..6,
        seed in any::<u64>(),
    ) {
        let mut rng = seeded(seed);
        let rows: Vec<Vec<f32>> = (0..frames)
            .map(|_| (0..dim).map(|_| rng.random_range(-100.0f32..100.0)).collect())
            .collect();
        let mut shuffled = rows.clone();
        shuffled.shuffle(&mut rng);
        let a = statistical_pool(&EmbeddingMatrix::from_rows(&rows).unwrap());
        let b = statistical_pool(&EmbeddingMatrix::from_rows(&shuffled).unwrap());
        prop_assert_eq!(a.len(), 2 * dim);
        for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
            prop_assert!((u - v).abs() <= 1e-9 * (1.0 + u.abs()));
        }
        prop_assert!(a.stds().iter().all(|s| *s >= 0.0));
    }
}
