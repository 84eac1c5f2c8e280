//! Singular values by one-sided Jacobi rotations.
//!
//! Works on the tall orientation (rows >= cols) and sweeps column pairs until
//! every pair is numerically orthogonal; singular values are the final column
//! norms. Intended for analysis at dimensions up to a few hundred, not as a
//! general LAPACK replacement.

use crate::error::{Error, Result};

use super::{Matrix, Vector};

const MAX_SWEEPS: usize = 64;
// Pair (i, j) counts as orthogonal once |ci·cj| <= ORTH_TOL * ‖ci‖‖cj‖.
const ORTH_TOL: f64 = 1e-15;

/// Singular values of `m`, sorted non-increasing. Errors only if the sweep
/// cap is exhausted, reporting how far the iteration got.
pub fn svd_values(m: &Matrix) -> Result<Vector> {
    let a = if m.rows() >= m.cols() {
        m.clone()
    } else {
        m.transpose()
    };
    let (p, q) = (a.rows(), a.cols());

    // Column-major copies: rotations touch whole columns.
    let mut cols: Vec<Vec<f64>> = (0..q)
        .map(|j| (0..p).map(|i| a.get(i, j)).collect())
        .collect();

    if q > 1 {
        let mut converged = false;
        let mut worst_ratio = 0.0_f64;
        for _sweep in 0..MAX_SWEEPS {
            let mut rotated = false;
            worst_ratio = 0.0;
            for i in 0..q - 1 {
                for j in i + 1..q {
                    let (alpha, beta, gamma) = {
                        let (ci, cj) = (&cols[i], &cols[j]);
                        let mut alpha = 0.0;
                        let mut beta = 0.0;
                        let mut gamma = 0.0;
                        for k in 0..p {
                            alpha += ci[k] * ci[k];
                            beta += cj[k] * cj[k];
                            gamma += ci[k] * cj[k];
                        }
                        (alpha, beta, gamma)
                    };
                    let bound = ORTH_TOL * (alpha * beta).sqrt();
                    if gamma.abs() <= bound {
                        continue;
                    }
                    worst_ratio = worst_ratio.max(gamma.abs() / (alpha * beta).sqrt().max(f64::MIN_POSITIVE));
                    rotated = true;
                    let zeta = (beta - alpha) / (2.0 * gamma);
                    let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    let (head, tail) = cols.split_at_mut(j);
                    let ci = &mut head[i];
                    let cj = &mut tail[0];
                    for k in 0..p {
                        let vi = ci[k];
                        let vj = cj[k];
                        ci[k] = c * vi - s * vj;
                        cj[k] = s * vi + c * vj;
                    }
                }
            }
            if !rotated {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::SvdNoConvergence {
                sweeps: MAX_SWEEPS,
                off_diag: worst_ratio,
            });
        }
    }

    let mut sigma: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    sigma.sort_by(|a, b| b.partial_cmp(a).expect("singular values are finite"));
    Vector::new(sigma)
}

/// Count of singular values above `rel_threshold` times the largest one.
/// A zero matrix has rank 0 regardless of the threshold.
pub fn numeric_rank(m: &Matrix, rel_threshold: f64) -> Result<usize> {
    let sigma = svd_values(m)?;
    let top = sigma.get(0);
    if top == 0.0 {
        return Ok(0);
    }
    let cut = rel_threshold * top;
    Ok(sigma.data().iter().filter(|&&s| s > cut).count())
}
