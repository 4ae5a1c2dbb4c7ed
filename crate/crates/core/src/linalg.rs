//! Dense linear algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenvalues and eigenvectors of a symmetric matrix, eigenvalues sorted
/// nonincreasing (columns of the returned matrix follow the same order).
pub fn sym_eigen_desc(m: DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "eigensolve of a {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::numerical("eigensolver", "matrix has non-finite entries"));
    }
    let n = m.nrows();
    let eig = SymmetricEigen::try_new(m, f64::EPSILON, 0)
        .ok_or_else(|| Error::numerical("eigensolver", "symmetric eigensolver did not converge"))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vecs = DMatrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]);
    Ok((vals, vecs))
}

/// Eigenvalues of a symmetric matrix, nonincreasing.
pub fn sym_eigenvalues_desc(m: DMatrix<f64>) -> Result<Vec<f64>> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "eigenvalues of a {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::numerical("eigensolver", "matrix has non-finite entries"));
    }
    let mut vals: Vec<f64> = m.symmetric_eigenvalues().iter().copied().collect();
    vals.sort_by(|a, b| b.total_cmp(a));
    Ok(vals)
}

/// Operator norm of a symmetric matrix by power iteration (the input is
/// symmetrized first). Stops when the estimate moves by less than `tol`
/// relative, or after `max_iter` steps.
pub fn op_norm_sym(m: &DMatrix<f64>, tol: f64, max_iter: usize) -> f64 {
    let n = m.nrows();
    if n == 0 {
        return 0.0;
    }
    let s = (m + m.transpose()) * 0.5;
    // deterministic start with no special alignment to 1 or to e_i
    let mut v = DVector::from_fn(n, |i, _| 1.0 + ((i as f64 + 1.0) * 0.618_033_988_75).fract());
    v /= v.norm();
    let mut est = 0.0;
    for _ in 0..max_iter {
        let w = &s * &v;
        let nw = w.norm();
        if nw == 0.0 {
            return 0.0;
        }
        v = w / nw;
        if (nw - est).abs() <= tol * nw {
            return nw;
        }
        est = nw;
    }
    est
}

/// Default operator norm: tolerance 1e-8, at most 1000 iterations.
pub fn op_norm(m: &DMatrix<f64>) -> f64 {
    op_norm_sym(m, 1e-8, 1000)
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Principal square root of a symmetric positive semidefinite matrix;
/// negative eigenvalues from round-off are clamped to zero.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (vals, vecs) = sym_eigen_desc(m.clone())?;
    let d = DMatrix::from_diagonal(&DVector::from_iterator(
        vals.len(),
        vals.iter().map(|&x| x.max(0.0).sqrt()),
    ));
    Ok(&vecs * d * vecs.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn eigen_sorted_descending() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 2.0, 0.0, 0.0, 0.0, -1.0]);
        let (vals, vecs) = sym_eigen_desc(m.clone()).unwrap();
        assert_abs_diff_eq!(vals[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(vals[1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(vals[2], -1.0, epsilon = 1e-12);
        let v0 = vecs.column(0);
        assert_abs_diff_eq!((&m * v0 - v0 * 3.0).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn power_iteration_matches_eigensolve() {
        let m = DMatrix::from_fn(30, 30, |i, j| 1.0 / (1.0 + i as f64 + j as f64));
        let vals = sym_eigenvalues_desc(m.clone()).unwrap();
        let top = vals[0].abs().max(vals[vals.len() - 1].abs());
        assert_abs_diff_eq!(op_norm(&m), top, epsilon = 1e-7 * top);
    }

    #[test]
    fn op_norm_of_negative_definite() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![-5.0, 1.0, 2.0]));
        assert_abs_diff_eq!(op_norm(&m), 5.0, epsilon = 1e-6);
    }

    #[test]
    fn sqrtm_squares_back() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let r = sqrtm_psd(&a).unwrap();
        assert_abs_diff_eq!((&r * &r - &a).norm(), 0.0, epsilon = 1e-12);
    }
}
