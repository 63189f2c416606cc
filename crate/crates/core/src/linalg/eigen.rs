use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Result, SparcError};

const MAX_SWEEPS: usize = 100;
const CONVERGENCE_RTOL: f64 = 1e-10;
const SYMMETRY_TOL: f64 = 1e-9;

/// Eigenpairs of a symmetric matrix.
///
/// `eigenvalues` are sorted non-increasing; row `i` of `eigenvectors` is the
/// unit eigenvector for `eigenvalues[i]`, with its largest-magnitude entry
/// made positive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenResult {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
    pub sweeps: usize,
}

impl EigenResult {
    /// `Σ λᵢ wᵢ wᵢᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let n = self.eigenvectors.cols();
        let mut out = Matrix::zeros(n, n);
        for (i, &lambda) in self.eigenvalues.iter().enumerate() {
            let w = self.eigenvectors.row(i);
            for r in 0..n {
                let s = lambda * w[r];
                let row = out.row_mut(r);
                for c in 0..n {
                    row[c] += s * w[c];
                }
            }
        }
        out
    }
}

pub(crate) fn check_symmetric(c: &Matrix) -> Result<()> {
    if !c.is_square() {
        return Err(SparcError::Dimension(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            c.rows(),
            c.cols()
        )));
    }
    let tol = SYMMETRY_TOL * c.max_abs().max(1.0);
    let n = c.rows();
    for i in 0..n {
        for j in i + 1..n {
            let d = (c.get(i, j) - c.get(j, i)).abs();
            if d > tol {
                return Err(SparcError::Validation(format!(
                    "matrix not symmetric at ({i}, {j}): |Δ| = {d:e}"
                )));
            }
        }
    }
    Ok(())
}

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += a.get(i, j) * a.get(i, j);
        }
    }
    (2.0 * s).sqrt()
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Sweeps until the off-diagonal Frobenius norm drops to `1e-10·‖C‖_F`
/// (at most 100 sweeps). Equal eigenvalues keep the order of their Jacobi
/// columns; any orthonormal basis of a repeated eigenspace is valid.
pub fn sym_eig(c: &Matrix) -> Result<EigenResult> {
    check_symmetric(c)?;
    let n = c.rows();
    let mut a = Matrix::from_fn(n, n, |i, j| 0.5 * (c.get(i, j) + c.get(j, i)));
    let mut v = Matrix::identity(n);
    let tol = CONVERGENCE_RTOL * a.frobenius_norm();

    let mut sweeps = 0;
    while sweeps < MAX_SWEEPS && off_diagonal_norm(&a) > tol {
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let cos = 1.0 / (t * t + 1.0).sqrt();
                let sin = t * cos;
                rotate(&mut a, &mut v, p, q, cos, sin);
            }
        }
    }
    if off_diagonal_norm(&a) > tol {
        log::warn!("jacobi did not converge within {MAX_SWEEPS} sweeps");
    }

    let diag: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps the Jacobi column order among ties.
    order.sort_by(|&i, &j| diag[j].partial_cmp(&diag[i]).unwrap());

    let eigenvalues = order.iter().map(|&i| diag[i]).collect();
    let mut eigenvectors = Matrix::zeros(n, n);
    for (r, &col) in order.iter().enumerate() {
        let row = eigenvectors.row_mut(r);
        for k in 0..n {
            row[k] = v.get(k, col);
        }
        fix_sign(row);
    }
    Ok(EigenResult {
        eigenvalues,
        eigenvectors,
        sweeps,
    })
}

/// Apply the rotation in the (p, q) plane: `A ← JᵀAJ`, `V ← VJ`.
fn rotate(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize, cos: f64, sin: f64) {
    let n = a.rows();
    for k in 0..n {
        let akp = a.get(k, p);
        let akq = a.get(k, q);
        a.set(k, p, cos * akp - sin * akq);
        a.set(k, q, sin * akp + cos * akq);
    }
    for k in 0..n {
        let apk = a.get(p, k);
        let aqk = a.get(q, k);
        a.set(p, k, cos * apk - sin * aqk);
        a.set(q, k, sin * apk + cos * aqk);
    }
    a.set(p, q, 0.0);
    a.set(q, p, 0.0);
    for k in 0..n {
        let vkp = v.get(k, p);
        let vkq = v.get(k, q);
        v.set(k, p, cos * vkp - sin * vkq);
        v.set(k, q, sin * vkp + cos * vkq);
    }
}

/// Flip `w` so its largest-magnitude entry (lowest index on ties) is positive.
pub(crate) fn fix_sign(w: &mut [f64]) {
    let mut best = 0;
    for (i, x) in w.iter().enumerate() {
        if x.abs() > w[best].abs() {
            best = i;
        }
    }
    if w.get(best).is_some_and(|&x| x < 0.0) {
        for x in w.iter_mut() {
            *x = -*x;
        }
    }
}
