//! Small dense linear algebra on row-major square matrices: cyclic Jacobi
//! eigendecomposition, power iteration, matrix exponential and numerical rank.

use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

/// Eigendecomposition of a symmetric matrix, eigenvalues sorted descending.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub n: usize,
    pub values: Vec<f64>,
    /// Eigenvectors stored as rows: `vectors[k]` pairs with `values[k]`.
    pub vectors: Vec<Vec<f64>>,
    pub sweeps: usize,
}

impl SymmetricEigen {
    /// `Σ_k λ_k u_k u_kᵀ` as a flat row-major matrix.
    pub fn reconstruct(&self) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n * n];
        for (lam, u) in self.values.iter().zip(&self.vectors) {
            for i in 0..n {
                for j in 0..n {
                    out[i * n + j] += lam * u[i] * u[j];
                }
            }
        }
        out
    }

    /// Largest deviation of `UᵀU` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (a, ua) in self.vectors.iter().enumerate() {
            for (b, ub) in self.vectors.iter().enumerate() {
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((dot(ua, ub) - target).abs());
            }
        }
        worst
    }
}

const MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi rotations on a symmetric `n×n` matrix.
pub fn symmetric_eigen(matrix: &[f64], n: usize) -> Result<SymmetricEigen> {
    if matrix.len() != n * n {
        return Err(Error::SizeMismatch(format!(
            "expected {} entries for a {n}x{n} matrix, got {}",
            n * n,
            matrix.len()
        )));
    }
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteResult("eigendecomposition input".into()));
    }
    let mut a = matrix.to_vec();
    // symmetrize; callers pass matrices that are symmetric up to rounding
    for i in 0..n {
        for j in i + 1..n {
            let m = 0.5 * (a[i * n + j] + a[j * n + i]);
            a[i * n + j] = m;
            a[j * n + i] = m;
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let total: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut sweeps = 0;
    let mut previous_off = f64::INFINITY;
    loop {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        // stop at roundoff level or once a sweep no longer reduces the
        // off-diagonal mass
        if off == 0.0 || off <= 1e-17 * total || (off <= 1e-13 * total && off >= previous_off) {
            break;
        }
        if sweeps == MAX_SWEEPS {
            return Err(Error::NonFiniteResult(
                "Jacobi iteration did not converge".into(),
            ));
        }
        previous_off = off;
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let values = order.iter().map(|&k| a[k * n + k]).collect();
    let vectors = order
        .iter()
        .map(|&k| (0..n).map(|i| v[i * n + k]).collect())
        .collect();
    Ok(SymmetricEigen {
        n,
        values,
        vectors,
        sweeps,
    })
}

/// Largest algebraic eigenvalue of a symmetric matrix by shifted power
/// iteration. Independent of [`symmetric_eigen`]; used as a cross-check.
pub fn power_iteration_max(matrix: &[f64], n: usize, iters: usize) -> f64 {
    let shift = matrix.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut x: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * (i as f64).sin()).collect();
    let mut lam = 0.0;
    for _ in 0..iters {
        let mut y = vec![0.0; n];
        for i in 0..n {
            y[i] = dot(&matrix[i * n..(i + 1) * n], &x) + shift * x[i];
        }
        let norm = dot(&y, &y).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        y.iter_mut().for_each(|v| *v /= norm);
        let ay: Vec<f64> = (0..n).map(|i| dot(&matrix[i * n..(i + 1) * n], &y)).collect();
        lam = dot(&y, &ay);
        x = y;
    }
    lam
}

/// Row-major product of `n×n` matrices.
pub fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

/// Matrix exponential by scaling and squaring with a Taylor core.
pub fn expm(a: &[f64], n: usize) -> Vec<f64> {
    let norm = (0..n)
        .map(|i| (0..n).map(|j| a[i * n + j].abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let mut squarings = 0;
    let mut scale = 1.0;
    while norm * scale > 0.25 {
        scale *= 0.5;
        squarings += 1;
    }
    let scaled: Vec<f64> = a.iter().map(|v| v * scale).collect();
    let mut result = vec![0.0; n * n];
    let mut term = vec![0.0; n * n];
    for i in 0..n {
        result[i * n + i] = 1.0;
        term[i * n + i] = 1.0;
    }
    for k in 1..=20 {
        term = matmul(&term, &scaled, n);
        term.iter_mut().for_each(|v| *v /= k as f64);
        for (r, t) in result.iter_mut().zip(&term) {
            *r += t;
        }
    }
    for _ in 0..squarings {
        result = matmul(&result, &result, n);
    }
    result
}

/// Number of rows of `rows` that are linearly independent at relative
/// tolerance `tol`, via Gram–Schmidt with largest-residual pivoting. A row
/// counts when its residual exceeds `tol` times the largest input row norm.
pub fn numerical_rank(rows: &[Vec<f64>], tol: f64) -> Result<usize> {
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteResult("rank input".into()));
    }
    let mut work: Vec<Vec<f64>> = rows.to_vec();
    let top = work.iter().map(|r| dot(r, r).sqrt()).fold(0.0, f64::max);
    if top == 0.0 {
        return Ok(0);
    }
    let mut rank = 0;
    while !work.is_empty() {
        let (best, norm) = work
            .iter()
            .enumerate()
            .map(|(i, r)| (i, dot(r, r).sqrt()))
            .fold((0, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if norm <= tol * top {
            break;
        }
        let q: Vec<f64> = work.swap_remove(best).iter().map(|v| v / norm).collect();
        for r in work.iter_mut() {
            // two passes keep the residual orthogonal at roundoff level
            for _ in 0..2 {
                let c = dot(r, &q);
                r.iter_mut().zip(&q).for_each(|(v, qv)| *v -= c * qv);
            }
        }
        rank += 1;
    }
    Ok(rank)
}

/// Factor `B` with `B Bᵀ = M` for a symmetric positive semidefinite `M`.
/// Negative eigenvalues down to `-neg_tol` are clipped to zero; anything
/// more negative is reported as an error.
pub fn psd_sqrt(matrix: &[f64], n: usize, neg_tol: f64) -> Result<Vec<f64>> {
    let eig = symmetric_eigen(matrix, n)?;
    let mut b = vec![0.0; n * n];
    for (k, (lam, u)) in eig.values.iter().zip(&eig.vectors).enumerate() {
        if *lam < -neg_tol {
            return Err(Error::InvalidNoiseModel(format!(
                "covariance has eigenvalue {lam:e} below -{neg_tol:e}"
            )));
        }
        // column k of B is sqrt(λ_k) u_k
        let s = lam.max(0.0).sqrt();
        for i in 0..n {
            b[i * n + k] = s * u[i];
        }
    }
    Ok(b)
}

/// Symmetric matrix from a rank-2 tensor, checked for squareness.
pub fn square_data(t: &Tensor) -> Result<(&[f64], usize)> {
    let [r, c] = t.matrix_dims()?;
    if r != c {
        return Err(Error::AxisMismatch(format!("expected a square matrix, got {r}x{c}")));
    }
    Ok((t.data(), r))
}
