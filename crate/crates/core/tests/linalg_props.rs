use layerlens::linalg::{center_columns, qr, svd, Matrix};
use layerlens::rng::seeded;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-10.0..10.0))
}

fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn orthonormality_error(cols_of: &Matrix) -> f64 {
    let g = cols_of.t_matmul(cols_of).unwrap();
    max_abs_diff(&g, &Matrix::identity(g.rows()))
}

/// Eigenvalues of AᵀA, descending, via an independent symmetric solver.
fn gram_eigen_singular_values(a: &Matrix) -> Vec<f64> {
    let m = DMatrix::from_row_slice(a.rows(), a.cols(), a.as_slice());
    let gram = m.transpose() * &m;
    let mut ev: Vec<f64> = gram
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

#[test]
fn svd_and_qr_contracts_on_1000_random_matrices() {
    let mut rng = seeded(20_240_601);
    for trial in 0..1000 {
        // Mostly small shapes, with a steady share of large ones up to 200×128.
        let (rows, cols) = if trial % 50 == 0 {
            (rng.random_range(128..=200), rng.random_range(64..=128))
        } else {
            let r = rng.random_range(1..=40);
            (r, rng.random_range(1..=40))
        };
        let a = random_matrix(&mut rng, rows, cols);
        let amax = a.max_abs().max(1.0);

        let s = svd(&a).unwrap();
        let k = rows.min(cols);
        assert_eq!(s.u.shape(), (rows, k));
        assert_eq!(s.vt.shape(), (k, cols));
        assert_eq!(s.s.len(), k);
        assert!(orthonormality_error(&s.u) <= 1e-10, "U not orthonormal ({rows}×{cols})");
        assert!(
            orthonormality_error(&s.vt.transpose()) <= 1e-10,
            "V not orthonormal ({rows}×{cols})"
        );
        assert!(s.s.windows(2).all(|w| w[0] >= w[1]) && s.s.iter().all(|v| *v >= 0.0));
        assert!(
            max_abs_diff(&s.reconstruct(), &a) <= 1e-8 * amax,
            "svd reconstruction ({rows}×{cols})"
        );

        if rows >= cols {
            let f = qr(&a).unwrap();
            assert!(orthonormality_error(&f.q) <= 1e-10, "Q not orthonormal ({rows}×{cols})");
            for r in 0..f.r.rows() {
                for c in 0..r.min(f.r.cols()) {
                    assert_eq!(f.r[(r, c)], 0.0);
                }
            }
            assert!(max_abs_diff(&f.q.matmul(&f.r).unwrap(), &a) <= 1e-8 * amax);
        }
    }
}

#[test]
fn singular_values_match_gram_eigen_oracle() {
    let mut rng = seeded(7);
    for _ in 0..20 {
        let a = random_matrix(&mut rng, 20, 10);
        let s = svd(&a).unwrap().s;
        let oracle = gram_eigen_singular_values(&a);
        for (x, y) in s.iter().zip(&oracle) {
            assert!((x - y).abs() <= 1e-8, "{x} vs {y}");
        }
    }
}

#[test]
fn transpose_has_same_spectrum() {
    let mut rng = seeded(11);
    for _ in 0..100 {
        let rows = rng.random_range(1..60);
        let cols = rng.random_range(1..60);
        let a = random_matrix(&mut rng, rows, cols);
        let s1 = svd(&a).unwrap().s;
        let s2 = svd(&a.transpose()).unwrap().s;
        for (x, y) in s1.iter().zip(&s2) {
            assert!((x - y).abs() <= 1e-10, "{x} vs {y}");
        }
    }
}

#[test]
fn random_centered_means_vanish() {
    let mut rng = seeded(3);
    let a = random_matrix(&mut rng, 50, 8);
    let c = center_columns(&a);
    for m in c.column_means() {
        assert!(m.abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn centering_is_idempotent(rows in 1usize..30, cols in 1usize..6, seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let a = random_matrix(&mut rng, rows, cols);
        let once = center_columns(&a);
        let twice = center_columns(&once);
        prop_assert!(max_abs_diff(&once, &twice) <= 1e-12);
        for m in once.column_means() {
            prop_assert!(m.abs() <= 1e-12 * rows as f64);
        }
    }
}
