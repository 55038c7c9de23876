//! One-sided Jacobi singular value decomposition.
//!
//! Chosen over iterative Golub-Kahan style solvers because it is short,
//! dependency free, and fully deterministic: sweeps visit column pairs in a
//! fixed order and stop on a fixed relative threshold, so the factors are
//! reproducible bit for bit. Accuracy is ample for the head dimensions this
//! crate works at (tens of columns).

use crate::error::Error;
use crate::tensor::Matrix;
use crate::Result;

/// Relative off-diagonal threshold that counts a column pair as orthogonal.
const TOL: f64 = 1e-12;
/// Sweep budget before reporting non-convergence.
const MAX_SWEEPS: usize = 60;

/// Factorization `a = u * diag(sigma) * r_mat^T` with `r = min(rows, cols)`:
/// `u` is rows x r, `sigma` has length r sorted non-increasing, `r_mat` is
/// cols x r. Columns of both factors are orthonormal.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub r_mat: Matrix,
}

/// Computes the SVD of an arbitrary finite matrix.
///
/// Wide inputs are handled by factoring the transpose and swapping the
/// factors. Returns an error if the sweep budget is exhausted before every
/// column pair falls below the relative threshold.
pub fn svd(a: &Matrix) -> Result<SvdResult> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(Error::EmptyMatrix { context: "svd input".into() });
    }
    if a.rows() < a.cols() {
        let t = svd(&a.transpose())?;
        return Ok(SvdResult { u: t.r_mat, sigma: t.sigma, r_mat: t.u });
    }
    let (m, n) = (a.rows(), a.cols());

    // Column-major working copies: u_cols starts as a, v_cols as identity.
    let mut u_cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.get(i, j)).collect()).collect();
    let mut v_cols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut converged = false;
    let mut residual = 0.0;
    for _sweep in 0..MAX_SWEEPS {
        let mut max_ratio: f64 = 0.0;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for i in 0..m {
                    let up = u_cols[p][i];
                    let uq = u_cols[q][i];
                    alpha += up * up;
                    beta += uq * uq;
                    gamma += up * uq;
                }
                let norm = (alpha * beta).sqrt();
                if norm == 0.0 {
                    continue;
                }
                let ratio = gamma.abs() / norm;
                max_ratio = max_ratio.max(ratio);
                if ratio <= TOL {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let up = u_cols[p][i];
                    let uq = u_cols[q][i];
                    u_cols[p][i] = c * up - s * uq;
                    u_cols[q][i] = s * up + c * uq;
                }
                for i in 0..n {
                    let vp = v_cols[p][i];
                    let vq = v_cols[q][i];
                    v_cols[p][i] = c * vp - s * vq;
                    v_cols[q][i] = s * vp + c * vq;
                }
            }
        }
        residual = max_ratio;
        if n == 1 || max_ratio <= TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SvdNoConvergence { sweeps: MAX_SWEEPS, residual });
    }

    let mut sigma: Vec<f64> = u_cols
        .iter()
        .map(|col| col.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();

    // Order columns by singular value, non-increasing, ties by original index.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].partial_cmp(&sigma[i]).unwrap().then(i.cmp(&j)));
    let sigma_sorted: Vec<f64> = order.iter().map(|&j| sigma[j]).collect();
    let u_sorted: Vec<Vec<f64>> = order.iter().map(|&j| u_cols[j].clone()).collect();
    let v_sorted: Vec<Vec<f64>> = order.iter().map(|&j| v_cols[j].clone()).collect();
    sigma = sigma_sorted;
    u_cols = u_sorted;
    v_cols = v_sorted;

    // Normalize left columns; complete zero-sigma columns to an orthonormal
    // basis so the factor stays orthogonal (those columns multiply zero).
    for j in 0..n {
        if sigma[j] > 0.0 {
            for v in &mut u_cols[j] {
                *v /= sigma[j];
            }
        } else {
            let mut replacement = None;
            for basis in 0..m {
                let mut w = vec![0.0; m];
                w[basis] = 1.0;
                for fixed in u_cols.iter().take(j) {
                    let proj: f64 = (0..m).map(|i| fixed[i] * w[i]).sum();
                    for i in 0..m {
                        w[i] -= proj * fixed[i];
                    }
                }
                let norm: f64 = w.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.5 {
                    for v in &mut w {
                        *v /= norm;
                    }
                    replacement = Some(w);
                    break;
                }
            }
            u_cols[j] = replacement.expect("orthonormal completion exists while j < m");
        }
    }

    let u = Matrix::from_fn(m, n, |i, j| u_cols[j][i]);
    let r_mat = Matrix::from_fn(n, n, |i, j| v_cols[j][i]);
    Ok(SvdResult { u, sigma, r_mat })
}

/// Largest absolute off-identity entry of `q^T q`, the orthogonality
/// residual used by validity checks on rotation inputs.
pub fn orthogonality_residual(q: &Matrix) -> f64 {
    let mut worst: f64 = 0.0;
    let qt = q.transpose();
    let g = qt.matmul(q).expect("gram");
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g.get(i, j) - target).abs());
        }
    }
    worst
}

/// Reconstructs `u * diag(sigma) * r_mat^T`, used by tests and checks.
pub fn reconstruct(f: &SvdResult) -> Matrix {
    let r = f.sigma.len();
    let scaled = Matrix::from_fn(f.u.rows(), r, |i, j| f.u.get(i, j) * f.sigma[j]);
    scaled.matmul_transpose_b(&f.r_mat).expect("shape")
}
