//! Small dense numeric helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative singular-value cutoff used by every pseudo-inverse in the crate.
pub const PINV_RTOL: f64 = 1e-10;

/// `log Σ exp(z_i)` with max-subtraction. Entries equal to `-inf` contribute zero mass.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || !max.is_finite() {
        return max;
    }
    let s = neumaier_sum(z.iter().map(|&v| (v - max).exp()));
    max + s.ln()
}

/// Compensated (Neumaier) summation.
pub fn neumaier_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Moore-Penrose pseudo-inverse with singular values below `rtol * σ_max` treated as zero.
pub fn pinv(a: &DMatrix<f64>, rtol: f64) -> DMatrix<f64> {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return DMatrix::zeros(n, m);
    }
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd computed with u");
    let v_t = svd.v_t.as_ref().expect("svd computed with v_t");
    let smax = svd.singular_values.max();
    let cutoff = rtol * smax;
    let mut out = DMatrix::zeros(n, m);
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            out += (v_t.row(i).transpose() * u.column(i).transpose()) / s;
        }
    }
    out
}

/// 2-norm condition number; infinite for singular input.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let sv = a.singular_values();
    let smax = sv.max();
    let smin = sv.min();
    if smin <= 0.0 {
        f64::INFINITY
    } else {
        smax / smin
    }
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_sym_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 1 {
        return a[(0, 0)];
    }
    SymmetricEigen::new(a.clone()).eigenvalues.min()
}

/// Projects a symmetric matrix onto the positive semidefinite cone (Frobenius norm).
pub fn project_psd(a: &DMatrix<f64>) -> DMatrix<f64> {
    if a.nrows() == 1 {
        return DMatrix::from_element(1, 1, a[(0, 0)].max(0.0));
    }
    let eig = SymmetricEigen::new(a.clone());
    let clipped = eig.eigenvalues.map(|l| l.max(0.0));
    let v = &eig.eigenvectors;
    v * DMatrix::from_diagonal(&clipped) * v.transpose()
}

/// Solves `A x = b` for symmetric positive definite `A`.
pub fn spd_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_spd(a)?;
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::invalid("matrix is not positive definite"))?;
    Ok(chol.solve(b))
}

/// Validates symmetry and a minimum eigenvalue above 1e-10.
pub fn check_spd(a: &DMatrix<f64>) -> Result<()> {
    if !a.is_square() {
        return Err(Error::invalid(format!(
            "covariance must be square, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("covariance has non-finite entries"));
    }
    let scale = a.amax().max(1.0);
    if (a - a.transpose()).amax() > 1e-10 * scale {
        return Err(Error::invalid("covariance is not symmetric"));
    }
    let sym = (a + a.transpose()) * 0.5;
    let lmin = min_sym_eigenvalue(&sym);
    if lmin <= 1e-10 {
        return Err(Error::invalid(format!(
            "covariance is not positive definite (min eigenvalue {lmin:e})"
        )));
    }
    Ok(())
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_handles_large_and_neg_inf() {
        let z = [1000.0, 1000.0];
        assert!((log_sum_exp(&z) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        let z = [f64::NEG_INFINITY, 0.0];
        assert!(log_sum_exp(&z).abs() < 1e-15);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
    }

    #[test]
    fn pinv_of_invertible_is_inverse() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let p = pinv(&a, PINV_RTOL);
        let id = &a * &p;
        assert!((id - DMatrix::identity(2, 2)).amax() < 1e-12);
    }

    #[test]
    fn pinv_truncates_null_space() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let p = pinv(&a, PINV_RTOL);
        assert!((p - DMatrix::from_element(2, 2, 0.25)).amax() < 1e-12);
    }

    #[test]
    fn spd_check_rejects_indefinite() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(check_spd(&a).is_err());
        assert!(check_spd(&DMatrix::identity(3, 3)).is_ok());
    }
}
