//! Seeded randomness. Every stochastic step in the crate draws from a
//! [`Rng`] built here, so fixed seeds reproduce results bit for bit.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::Matrix;

pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Derives an independent stream seed from a base seed and a label, so
/// that e.g. the task data and the model weights of one run never share a
/// stream.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    // FNV-1a over the label, mixed with the base through splitmix64.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = base ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn gaussian(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Matrix with i.i.d. `N(0, std²)` entries, drawn row-major.
pub fn gaussian_matrix(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let data: Vec<f64> = (0..rows * cols).map(|_| std * gaussian(rng)).collect();
    Matrix::from_raw(rows, cols, data)
}

/// Matrix with orthonormal columns spanning a uniformly random subspace.
pub fn random_orthonormal(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    assert!(cols <= rows, "cannot fit {cols} orthonormal columns in R^{rows}");
    let g = gaussian_matrix(rng, rows, cols, 1.0);
    gram_schmidt(&g)
}

/// Modified Gram-Schmidt with one re-orthogonalization pass. The input
/// columns must be linearly independent.
pub(crate) fn gram_schmidt(m: &Matrix) -> Matrix {
    let (rows, cols) = m.shape();
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(cols);
    for j in 0..cols {
        let mut v = m.col(j);
        for _ in 0..2 {
            for prev in &q {
                let d = crate::linalg::dot(prev, &v);
                for (x, p) in v.iter_mut().zip(prev) {
                    *x -= d * p;
                }
            }
        }
        let n = libm::sqrt(crate::linalg::dot(&v, &v));
        for x in &mut v {
            *x /= n;
        }
        q.push(v);
    }
    Matrix::from_fn(rows, cols, |i, j| q[j][i]).expect("orthonormalized columns are finite")
}
