use alloc::vec::Vec;

use super::Matrix;
use crate::error::{Error, Result};

/// Sweep cap for the cyclic Jacobi iteration.
pub const MAX_SWEEPS: usize = 100;
/// Convergence target: off-diagonal Frobenius norm relative to `‖S‖_F`.
pub const OFF_DIAGONAL_TOL: f64 = 1e-12;
/// Largest accepted `|s_ij - s_ji|`, relative to `max(1, max|s|)`.
pub const SYMMETRY_TOL: f64 = 1e-9;
/// Negative eigenvalues no larger than this (relative to `max(1, ‖S‖_F)`)
/// are treated as roundoff and clamped to zero.
pub const PSD_CLAMP_TOL: f64 = 1e-10;

/// Eigenvalues sorted descending, with eigenvectors as the matching
/// orthonormal columns.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenSystem {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

impl EigenSystem {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Eigenvectors of the `r` smallest eigenvalues (the last `r` columns).
    pub fn tail(&self, r: usize) -> Result<Matrix> {
        let d = self.dim();
        if r == 0 || r > d {
            return Err(Error::InvalidRank { rank: r, max: d });
        }
        self.eigenvectors.column_range(d - r, d)
    }

    /// Eigenvectors of the `d - r` largest eigenvalues.
    pub fn main(&self, r: usize) -> Result<Matrix> {
        let d = self.dim();
        if r == 0 || r >= d {
            return Err(Error::InvalidRank { rank: r, max: d.saturating_sub(1) });
        }
        self.eigenvectors.column_range(0, d - r)
    }

    /// `Q · diag(λ) · Qᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let q = &self.eigenvectors;
        let n = q.rows();
        let scaled = Matrix::from_fn(n, self.dim(), |i, j| q.get(i, j) * self.eigenvalues[j])
            .expect("finite eigensystem");
        super::matmul_nt(&scaled, q).expect("shapes agree")
    }
}

/// Eigendecomposition of a real symmetric matrix by cyclic Jacobi rotations.
///
/// The input is symmetrized as `(S + Sᵀ)/2` after checking that it is
/// symmetric to [`SYMMETRY_TOL`]. Eigenvalues come back descending; each
/// eigenvector is signed so its largest-magnitude entry is positive.
pub fn sym_eigh(s: &Matrix) -> Result<EigenSystem> {
    if !s.is_square() {
        return Err(Error::NotSquare { rows: s.rows(), cols: s.cols() });
    }
    let asym = s.max_asymmetry();
    if asym > SYMMETRY_TOL * s.max_abs().max(1.0) {
        return Err(Error::NotSymmetric { max_asymmetry: asym });
    }
    let n = s.rows();
    let mut a = s.symmetrized()?.into_vec();
    // Row k of `vt` is the k-th eigenvector, so rotations touch contiguous rows.
    let mut vt = Matrix::identity(n).into_vec();

    let norm = libm::sqrt(a.iter().map(|v| v * v).sum::<f64>());
    let target = OFF_DIAGONAL_TOL * norm;

    let rounds = round_robin(n);
    let mut rots = Vec::with_capacity(n / 2);
    let mut converged = false;
    let mut off = off_diagonal_norm(&a, n);
    for _ in 0..MAX_SWEEPS {
        if off <= target {
            converged = true;
            break;
        }
        for round in &rounds {
            rotate_round(&mut a, &mut vt, n, round, &mut rots);
        }
        off = off_diagonal_norm(&a, n);
    }
    if !converged && off > target {
        return Err(Error::NoConvergence { sweeps: MAX_SWEEPS, off_diagonal: off });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));

    let clamp = PSD_CLAMP_TOL * norm.max(1.0);
    let mut eigenvalues = Vec::with_capacity(n);
    let mut vectors = Vec::with_capacity(n * n);
    for &k in &order {
        let mut lambda = a[k * n + k];
        if lambda < 0.0 && lambda >= -clamp {
            lambda = 0.0;
        }
        eigenvalues.push(lambda);
        let v = &vt[k * n..(k + 1) * n];
        let mut pivot = 0;
        for (i, x) in v.iter().enumerate() {
            if x.abs() > v[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        vectors.extend(v.iter().map(|x| sign * x));
    }
    // `vectors` holds eigenvectors as rows; transpose into columns.
    let eigenvectors = Matrix::from_raw(n, n, vectors).transpose();
    Ok(EigenSystem { eigenvalues, eigenvectors })
}

fn off_diagonal_norm(a: &[f64], n: usize) -> f64 {
    let mut sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            sum += 2.0 * a[i * n + j] * a[i * n + j];
        }
    }
    libm::sqrt(sum)
}

/// Tournament pairing of `0..n`: `n - 1` rounds (one more for odd `n`) of
/// disjoint pairs, together covering every pair exactly once.
fn round_robin(n: usize) -> Vec<Vec<(usize, usize)>> {
    if n < 2 {
        return Vec::new();
    }
    let m = n + n % 2;
    let mut pos: Vec<usize> = (0..m).collect();
    let mut rounds = Vec::with_capacity(m - 1);
    for _ in 0..m - 1 {
        let mut pairs = Vec::with_capacity(m / 2);
        for i in 0..m / 2 {
            let (x, y) = (pos[i], pos[m - 1 - i]);
            if x < n && y < n {
                pairs.push((x.min(y), x.max(y)));
            }
        }
        pairs.sort_unstable();
        rounds.push(pairs);
        pos[1..].rotate_right(1);
    }
    rounds
}

#[derive(Clone, Copy)]
struct Rotation {
    p: usize,
    q: usize,
    c: f64,
    s: f64,
    /// Exact diagonal results `a_pp - t·a_pq` and `a_qq + t·a_pq`.
    app: f64,
    aqq: f64,
}

/// Applies one round of disjoint rotations, each annihilating its `a[p][q]`.
/// Disjoint pivots do not disturb each other's 2×2 blocks, so all angles
/// come from the same state; rows are rotated first, then columns, one
/// contiguous row at a time.
fn rotate_round(a: &mut [f64], vt: &mut [f64], n: usize, pairs: &[(usize, usize)], rots: &mut Vec<Rotation>) {
    rots.clear();
    for &(p, q) in pairs {
        let apq = a[p * n + q];
        if apq == 0.0 {
            continue;
        }
        let app = a[p * n + p];
        let aqq = a[q * n + q];
        let theta = (aqq - app) / (2.0 * apq);
        let t = if theta == 0.0 {
            1.0
        } else {
            let sign = if theta > 0.0 { 1.0 } else { -1.0 };
            sign / (theta.abs() + libm::sqrt(theta * theta + 1.0))
        };
        let c = 1.0 / libm::sqrt(t * t + 1.0);
        rots.push(Rotation { p, q, c, s: t * c, app: app - t * apq, aqq: aqq + t * apq });
    }
    if rots.is_empty() {
        return;
    }
    for r in rots.iter() {
        rotate_rows(a, n, r);
        rotate_rows(vt, n, r);
    }
    for row in a.chunks_exact_mut(n) {
        for r in rots.iter() {
            let (xp, yq) = (row[r.p], row[r.q]);
            row[r.p] = r.c * xp - r.s * yq;
            row[r.q] = r.s * xp + r.c * yq;
        }
    }
    for r in rots.iter() {
        a[r.p * n + r.p] = r.app;
        a[r.q * n + r.q] = r.aqq;
        a[r.p * n + r.q] = 0.0;
        a[r.q * n + r.p] = 0.0;
    }
}

fn rotate_rows(m: &mut [f64], n: usize, r: &Rotation) {
    let (head, tail) = m.split_at_mut(r.q * n);
    let vp = &mut head[r.p * n..(r.p + 1) * n];
    let vq = &mut tail[..n];
    for (x, y) in vp.iter_mut().zip(vq.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = r.c * xp - r.s * yq;
        *y = r.s * xp + r.c * yq;
    }
}
