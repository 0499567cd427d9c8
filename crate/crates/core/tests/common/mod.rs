#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rrqr_lora::Matrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// A mix of generic, rank-deficient and duplicate-column matrices.
pub fn pivot_corpus(count: usize, seed: u64) -> Vec<Matrix> {
    let mut rng = rng(seed);
    (0..count)
        .map(|i| {
            let d = rng.random_range(2..=12);
            let k = rng.random_range(2..=12);
            match i % 4 {
                0 | 1 => random_matrix(&mut rng, d, k),
                2 => {
                    let r = rng.random_range(1..=d.min(k));
                    let left = random_matrix(&mut rng, d, r);
                    let right = random_matrix(&mut rng, r, k);
                    left.matmul(&right).unwrap()
                }
                _ => {
                    let mut cols = random_matrix(&mut rng, d, k).columns();
                    let dups = rng.random_range(1..k.max(2));
                    for _ in 0..dups {
                        let src = rng.random_range(0..k);
                        let dst = rng.random_range(0..k);
                        cols[dst] = cols[src].clone();
                    }
                    Matrix::from_columns(&cols).unwrap()
                }
            }
        })
        .collect()
}

pub fn to_na(m: &Matrix) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

pub fn orthonormality_error(m: &Matrix) -> f64 {
    m.t_matmul(m)
        .unwrap()
        .sub(&Matrix::identity(m.cols()))
        .unwrap()
        .frobenius_norm()
}
