//! Seeded initializers and dropout masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

/// Deterministic RNG for a `(seed, stream)` pair.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Random matrix with orthonormal columns (`rows >= cols`) or orthonormal
/// rows (`rows < cols`), from the QR factorization of a Gaussian matrix.
pub fn orthogonal_init(rows: usize, cols: usize, seed: u64) -> Tensor {
    orthogonal_with(rows, cols, &mut rng_for(seed, 0))
}

pub fn orthogonal_with(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    assert!(rows >= 1 && cols >= 1, "orthogonal_init needs positive sizes");
    let (tall, narrow) = (rows.max(cols), rows.min(cols));
    // Column-major working copy: `basis[j]` is column j of a tall×narrow matrix.
    let mut basis: Vec<Vec<f64>> = (0..narrow)
        .map(|_| (0..tall).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    for j in 0..narrow {
        let mut diag = 0.0;
        // Two Gram-Schmidt passes keep the columns orthogonal to machine precision.
        for pass in 0..2 {
            for k in 0..j {
                let (done, rest) = basis.split_at_mut(j);
                let proj: f64 = done[k].iter().zip(&rest[0]).map(|(a, b)| a * b).sum();
                for (x, q) in rest[0].iter_mut().zip(&done[k]) {
                    *x -= proj * q;
                }
            }
            let norm = basis[j].iter().map(|x| x * x).sum::<f64>().sqrt();
            if pass == 0 {
                diag = norm;
            }
            for x in &mut basis[j] {
                *x /= norm;
            }
        }
        debug_assert!(diag > 0.0);
    }
    let mut data = vec![0.0; rows * cols];
    for (j, col) in basis.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            if rows >= cols {
                data[i * cols + j] = v;
            } else {
                data[j * cols + i] = v;
            }
        }
    }
    Tensor::from_parts(vec![rows, cols], data)
}

/// Inverted-dropout mask: entries are `0` with probability `p`, otherwise
/// `1 / (1 - p)`.
pub fn dropout_mask(shape: &[usize], p: f64, rng: &mut impl Rng) -> Tensor {
    assert!((0.0..1.0).contains(&p), "dropout probability must be in [0, 1)");
    let keep = 1.0 / (1.0 - p);
    let mut mask = Tensor::full(shape, keep);
    if p > 0.0 {
        for m in mask.data_mut() {
            if rng.random::<f64>() < p {
                *m = 0.0;
            }
        }
    }
    mask
}

/// Inverted dropout on a plain tensor; the identity when not training or `p == 0`.
pub fn dropout(x: &Tensor, p: f64, training: bool, seed: u64) -> Tensor {
    if !training || p == 0.0 {
        return x.clone();
    }
    let mask = dropout_mask(x.shape(), p, &mut rng_for(seed, 1));
    let data = x.data().iter().zip(mask.data()).map(|(a, m)| a * m).collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}
