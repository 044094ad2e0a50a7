use alloc::vec::Vec;

use super::{dot, matmul_nt, sym_eigh, Matrix};
use crate::error::{Error, Result};

/// Singular values below this fraction of `σ_max` are treated as zero and
/// their singular vectors are completed by orthogonalization.
pub const ZERO_SINGULAR_TOL: f64 = 1e-12;

/// Which end of the spectrum [`thin_svd`] keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SvdSelection {
    Top,
    Bottom,
}

/// Truncated singular value decomposition; singular values descending.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdSystem {
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    pub v: Matrix,
}

impl SvdSystem {
    /// `U · diag(S) · Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let us = scale_columns(&self.u, &self.singular_values);
        matmul_nt(&us, &self.v).expect("factor shapes agree")
    }
}

pub(crate) fn scale_columns(m: &Matrix, s: &[f64]) -> Matrix {
    Matrix::from_raw(
        m.rows(),
        m.cols(),
        m.as_slice().chunks(m.cols()).flat_map(|row| row.iter().zip(s).map(|(x, w)| x * w)).collect(),
    )
}

/// `k` singular triplets of `m` from the requested end of the spectrum.
///
/// Computed from the eigendecomposition of the smaller Gram matrix (`MᵀM`
/// or `MMᵀ`); the other factor is recovered by `M v / σ`, then
/// re-orthogonalized so small singular values do not cost orthogonality.
pub fn thin_svd(m: &Matrix, k: usize, which: SvdSelection) -> Result<SvdSystem> {
    let p = m.rows().min(m.cols());
    if k == 0 || k > p {
        return Err(Error::InvalidRank { rank: k, max: p });
    }
    let full = full_thin_svd(m)?;
    let range = match which {
        SvdSelection::Top => 0..k,
        SvdSelection::Bottom => p - k..p,
    };
    Ok(SvdSystem {
        u: full.u.column_range(range.start, range.end)?,
        singular_values: full.singular_values[range.clone()].to_vec(),
        v: full.v.column_range(range.start, range.end)?,
    })
}

fn full_thin_svd(m: &Matrix) -> Result<SvdSystem> {
    let tall = m.rows() >= m.cols();
    let (gram, other) = if tall { (m.gram(), m.clone()) } else { (m.outer_gram(), m.transpose()) };
    // `other` maps eigenvectors of `gram` to the opposite factor.
    let es = sym_eigh(&gram)?;
    let p = es.dim();
    // σ_j = ‖M v_j‖ is accurate to roundoff of σ_max, unlike √λ_j, which
    // loses half the digits for small singular values.
    let mapped = super::matmul(&other, &es.eigenvectors)?;
    let n_out = mapped.rows();
    let mut triplets: Vec<(f64, Vec<f64>, Vec<f64>)> = (0..p)
        .map(|j| {
            let image = mapped.col(j);
            (libm::sqrt(dot(&image, &image)), image, es.eigenvectors.col(j))
        })
        .collect();
    triplets.sort_by(|a, b| b.0.total_cmp(&a.0));
    let smax = triplets[0].0;
    let cutoff = ZERO_SINGULAR_TOL * smax;

    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(p);
    let mut singular_values = Vec::with_capacity(p);
    let mut gram_vectors = Vec::with_capacity(p * p);
    for (sigma, image, v) in triplets {
        if smax > 0.0 && sigma > cutoff {
            cols.push(image.into_iter().map(|x| x / sigma).collect());
            singular_values.push(sigma);
        } else {
            cols.push(Vec::new());
            singular_values.push(0.0);
        }
        gram_vectors.push(v);
    }
    orthonormalize_with_completion(&mut cols, n_out);

    let recovered = Matrix::from_fn(n_out, p, |i, j| cols[j][i])?;
    let gram_side = Matrix::from_fn(p, p, |i, j| gram_vectors[j][i])?;
    let (u, v) = if tall { (recovered, gram_side) } else { (gram_side, recovered) };
    Ok(SvdSystem { u, singular_values, v })
}

/// Re-orthogonalizes the non-empty columns in order (modified Gram-Schmidt,
/// two passes) and fills empty ones with the standard basis vector that has
/// the largest residual against everything accepted so far.
fn orthonormalize_with_completion(cols: &mut [Vec<f64>], dim: usize) {
    let mut accepted: Vec<Vec<f64>> = Vec::with_capacity(cols.len());
    let reject = |v: &mut Vec<f64>, basis: &[Vec<f64>]| {
        for _ in 0..2 {
            for b in basis {
                let d = dot(b, v);
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= d * y;
                }
            }
        }
    };
    for col in cols.iter_mut() {
        if col.is_empty() {
            continue;
        }
        let mut v = core::mem::take(col);
        reject(&mut v, &accepted);
        let n = libm::sqrt(dot(&v, &v));
        v.iter_mut().for_each(|x| *x /= n);
        accepted.push(v.clone());
        *col = v;
    }
    for col in cols.iter_mut() {
        if !col.is_empty() {
            continue;
        }
        let mut best: Option<(f64, Vec<f64>)> = None;
        for i in 0..dim {
            let mut e = alloc::vec![0.0; dim];
            e[i] = 1.0;
            reject(&mut e, &accepted);
            let n = libm::sqrt(dot(&e, &e));
            if best.as_ref().is_none_or(|(bn, _)| n > *bn) {
                best = Some((n, e));
            }
        }
        let (n, mut v) = best.expect("dim > 0");
        v.iter_mut().for_each(|x| *x /= n);
        accepted.push(v.clone());
        *col = v;
    }
}
