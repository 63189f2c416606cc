use serde::{Deserialize, Serialize};

use super::eigen::{fix_sign, sym_eig};
use super::matrix::{axpy, dot_slice, norm};
use super::Matrix;
use crate::error::{ensure_dims, Result, SparcError};
use crate::io::Crc64;

/// Eigenvalues below this are treated as zero variance.
pub const ZERO_VARIANCE: f64 = 1e-12;
/// Relative eigenvalue cut-off used when estimating numerical rank.
pub const RANK_RTOL: f64 = 1e-8;

const DROP_TOL: f64 = 1e-8;

/// A task's principal subspace: mean, orthonormal component rows and their
/// variances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubspaceBasis {
    /// Content digest of mean and components, hex encoded.
    pub id: String,
    pub mean: Vec<f64>,
    /// k×D, one principal component per row.
    pub components: Matrix,
    pub eigenvalues: Vec<f64>,
    /// Trace of the covariance the basis was extracted from.
    pub total_variance: f64,
}

impl SubspaceBasis {
    /// Assemble a basis and assign its content id. Component rows must be
    /// orthonormal to 1e-6; eigenvalues must be non-negative and non-increasing.
    pub fn new(
        mean: Vec<f64>,
        components: Matrix,
        eigenvalues: Vec<f64>,
        total_variance: f64,
    ) -> Result<Self> {
        ensure_dims!(
            mean.len() == components.cols(),
            "mean has length {} but components have {} columns",
            mean.len(),
            components.cols()
        );
        ensure_dims!(
            eigenvalues.len() == components.rows(),
            "{} eigenvalues for {} components",
            eigenvalues.len(),
            components.rows()
        );
        ensure_dims!(
            components.rows() <= components.cols(),
            "rank {} exceeds source dimension {}",
            components.rows(),
            components.cols()
        );
        if eigenvalues.iter().any(|&l| l < 0.0) || eigenvalues.windows(2).any(|w| w[1] > w[0]) {
            return Err(SparcError::Validation(
                "eigenvalues must be non-negative and non-increasing".into(),
            ));
        }
        let gram = components.dot_t(&components);
        let err = gram.max_abs_diff(&Matrix::identity(components.rows()));
        if err > 1e-6 {
            return Err(SparcError::Validation(format!(
                "components not orthonormal (max |WWᵀ - I| = {err:e})"
            )));
        }
        let mut basis = SubspaceBasis {
            id: String::new(),
            mean,
            components,
            eigenvalues,
            total_variance,
        };
        basis.id = basis.content_id();
        Ok(basis)
    }

    fn content_id(&self) -> String {
        let mut h = Crc64::new();
        h.update(&(self.components.rows() as u64).to_le_bytes());
        h.update(&(self.components.cols() as u64).to_le_bytes());
        h.update_f64s(&self.mean);
        h.update_f64s(self.components.data());
        format!("{:016x}", h.finish())
    }

    pub fn source_dim(&self) -> usize {
        self.components.cols()
    }

    pub fn rank(&self) -> usize {
        self.components.rows()
    }

    /// Fraction of total variance captured by the retained components.
    pub fn retained_variance(&self) -> f64 {
        if self.total_variance <= 0.0 {
            return 0.0;
        }
        (self.eigenvalues.iter().sum::<f64>() / self.total_variance).min(1.0)
    }
}

/// Subtract the column means. Returns the centered data and the mean.
pub fn mean_center(x: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    if x.rows() == 0 || x.cols() == 0 {
        return Err(SparcError::Dimension(
            "cannot center an empty matrix".into(),
        ));
    }
    let n = x.rows() as f64;
    let mut mu = vec![0.0; x.cols()];
    for row in x.iter_rows() {
        axpy(1.0, row, &mut mu);
    }
    mu.iter_mut().for_each(|m| *m /= n);
    let mut xc = x.clone();
    for i in 0..xc.rows() {
        for (v, m) in xc.row_mut(i).iter_mut().zip(&mu) {
            *v -= m;
        }
    }
    Ok((xc, mu))
}

/// `C = (1/N)·Xcᵀ·Xc`, symmetrized.
pub fn covariance(xc: &Matrix) -> Result<Matrix> {
    if xc.rows() == 0 {
        return Err(SparcError::Dimension("covariance of zero rows".into()));
    }
    let mut c = xc.t_dot(xc).scale(1.0 / xc.rows() as f64);
    let d = c.cols();
    for i in 0..d {
        for j in i + 1..d {
            let v = 0.5 * (c.get(i, j) + c.get(j, i));
            c.set(i, j, v);
            c.set(j, i, v);
        }
    }
    Ok(c)
}

/// Top-`k` principal subspace of `x`.
pub fn pca(x: &Matrix, k: usize) -> Result<SubspaceBasis> {
    let (n, d) = x.shape();
    let k_max = if n > 1 { (n - 1).min(d) } else { d };
    if k == 0 || k > k_max {
        return Err(SparcError::Parameter(format!(
            "k = {k} outside 1..={k_max} for {n}x{d} data"
        )));
    }
    let (xc, mu) = mean_center(x)?;
    let c = covariance(&xc)?;
    let eig = sym_eig(&c)?;
    if eig.eigenvalues.iter().all(|&l| l < ZERO_VARIANCE) {
        return Err(SparcError::DegenerateData(
            "data has zero variance in every direction".into(),
        ));
    }
    let total: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0)).sum();
    let components = eig.eigenvectors.slice_rows(0, k);
    let eigenvalues: Vec<f64> = eig.eigenvalues[..k].iter().map(|l| l.max(0.0)).collect();
    let basis = SubspaceBasis::new(mu, components, eigenvalues, total)?;
    log::debug!(
        "pca k={k}: retained variance {:.4}",
        basis.retained_variance()
    );
    Ok(basis)
}

/// Number of covariance eigenvalues above `max(1e-12, 1e-8·λ₁)`.
pub fn numerical_rank(x: &Matrix) -> Result<usize> {
    let (xc, _) = mean_center(x)?;
    let eig = sym_eig(&covariance(&xc)?)?;
    let top = eig.eigenvalues.first().copied().unwrap_or(0.0);
    let cut = ZERO_VARIANCE.max(RANK_RTOL * top);
    Ok(eig.eigenvalues.iter().filter(|&&l| l > cut).count())
}

/// `(X − 1·μᵀ)·Wᵀ`.
pub fn project(x: &Matrix, basis: &SubspaceBasis) -> Result<Matrix> {
    ensure_dims!(
        x.cols() == basis.source_dim(),
        "data has {} columns, basis expects {}",
        x.cols(),
        basis.source_dim()
    );
    let mut xc = x.clone();
    for i in 0..xc.rows() {
        for (v, m) in xc.row_mut(i).iter_mut().zip(&basis.mean) {
            *v -= m;
        }
    }
    Ok(xc.dot_t(&basis.components))
}

/// Orthonormal basis for the row span of `rows` by modified Gram–Schmidt with
/// one re-orthogonalization pass. Rows whose residual falls below `1e-8`
/// relative to their original norm are dropped, so the result may have fewer
/// rows than the input (zero rows for all-zero input).
pub fn orthonormalize(rows: &Matrix) -> Result<Matrix> {
    if rows.rows() == 0 {
        return Err(SparcError::Dimension(
            "orthonormalize needs at least one row".into(),
        ));
    }
    let d = rows.cols();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for row in rows.iter_rows() {
        let original = norm(row);
        if original == 0.0 {
            continue;
        }
        let mut v = row.to_vec();
        for _pass in 0..2 {
            for q in &basis {
                let c = dot_slice(&v, q);
                axpy(-c, q, &mut v);
            }
        }
        let r = norm(&v);
        if r < DROP_TOL * original {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= r);
        basis.push(v);
    }
    let n = basis.len();
    Ok(Matrix::from_vec_unchecked(n, d, basis.concat()))
}

/// `X − X·Vᵀ·V` for row-orthonormal `V` (applied twice for accuracy).
pub fn orthogonal_complement(x: &Matrix, v: &Matrix) -> Result<Matrix> {
    if v.rows() == 0 {
        return Ok(x.clone());
    }
    ensure_dims!(
        x.cols() == v.cols(),
        "data has {} columns, V has {}",
        x.cols(),
        v.cols()
    );
    let mut out = x.clone();
    for _pass in 0..2 {
        let coeffs = out.dot_t(v);
        out = out.sub(&coeffs.dot(v));
    }
    Ok(out)
}

/// Remove any component along `v`'s rows from each row of `w`, then
/// re-orthonormalize and re-apply the sign convention. Used to scrub
/// round-off leakage from bases that must be orthogonal to `v`.
pub(crate) fn scrub_against(w: &Matrix, v: &Matrix) -> Result<Matrix> {
    let cleaned = orthogonal_complement(w, v)?;
    let mut q = orthonormalize(&cleaned)?;
    for i in 0..q.rows() {
        fix_sign(q.row_mut(i));
    }
    Ok(q)
}
