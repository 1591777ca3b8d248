//! Dense least-squares kernels shared by the coefficient initialisation and
//! the Gauss-Newton step.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Minimum-norm least-squares solution of `a * x ≈ b` (column by column)
/// via SVD. Singular values below `max(rows, cols) * eps * sigma_max` are
/// treated as zero.
pub fn lstsq_min_norm(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.nrows() != b.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "lstsq: lhs has {} rows, rhs has {}",
            a.nrows(),
            b.nrows()
        )));
    }
    if a.ncols() == 0 || b.ncols() == 0 {
        return Ok(DMatrix::zeros(a.ncols(), b.ncols()));
    }
    check_finite(a.iter().chain(b.iter()))?;
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return Ok(DMatrix::zeros(a.ncols(), b.ncols()));
    }
    let eps = smax * (a.nrows().max(a.ncols()) as f64) * f64::EPSILON;
    svd.solve(b, eps)
        .map_err(|e| Error::NumericalFailure(e.to_string()))
}

/// Solves `min |J x - r|` for a tall weighted system.
///
/// Rows are ordered by decreasing magnitude before a Householder QR so that
/// heavily weighted rows are eliminated first. When the triangular factor
/// is numerically singular the minimum-norm SVD solution is returned.
pub fn weighted_lstsq(j: &DMatrix<f64>, r: &DVector<f64>) -> Result<DVector<f64>> {
    let (rows, cols) = j.shape();
    if rows != r.len() {
        return Err(Error::DimensionMismatch(format!(
            "jacobian has {rows} rows, residual has {}",
            r.len()
        )));
    }
    check_finite(j.iter().chain(r.iter()))?;
    if cols == 0 {
        return Ok(DVector::zeros(0));
    }
    if rows >= cols {
        if let Some(x) = qr_lstsq(j, r) {
            return Ok(x);
        }
    }
    let rhs = DMatrix::from_column_slice(rows, 1, r.as_slice());
    let x = lstsq_min_norm(j, &rhs)?;
    Ok(x.column(0).into_owned())
}

/// Householder QR least squares on rows sorted by decreasing magnitude;
/// `None` when `R` has a negligible diagonal entry.
pub(crate) fn qr_lstsq(j: &DMatrix<f64>, r: &DVector<f64>) -> Option<DVector<f64>> {
    let (rows, cols) = j.shape();
    if rows < cols {
        return None;
    }
    let mut order: Vec<(usize, f64)> = (0..rows).map(|i| (i, j.row(i).amax())).collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1));
    let sorted = DMatrix::from_fn(rows, cols, |i, k| j[(order[i].0, k)]);
    let mut rhs = DVector::from_fn(rows, |i, _| r[order[i].0]);

    let qr = sorted.qr();
    let upper = qr.r();
    let diag_max = upper.diagonal().amax();
    let tol = diag_max * (rows.max(cols) as f64) * f64::EPSILON;
    if diag_max == 0.0 || upper.diagonal().iter().any(|d| d.abs() <= tol) {
        return None;
    }
    qr.q_tr_mul(&mut rhs);
    let top = rhs.rows(0, cols).into_owned();
    upper.solve_upper_triangular(&top)
}

fn check_finite<'a>(mut values: impl Iterator<Item = &'a f64>) -> Result<()> {
    if values.any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure(
            "non-finite value in least-squares system".into(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matches_normal_equations_when_well_conditioned() {
        let j = random(40, 12, 1);
        let r = random(40, 1, 2).column(0).into_owned();
        let x = weighted_lstsq(&j, &r).unwrap();
        let jtj = j.transpose() * &j;
        let expected = jtj.try_inverse().unwrap() * j.transpose() * &r;
        assert!((x - &expected).norm() / expected.norm() < 1e-10);
    }

    #[test]
    fn orthonormal_columns_give_transpose_product() {
        let q = random(20, 5, 3).qr().q();
        let r = random(20, 1, 4).column(0).into_owned();
        let x = weighted_lstsq(&q, &r).unwrap();
        assert!((x - q.transpose() * &r).norm() < 1e-12);
    }

    #[test]
    fn rank_deficient_falls_back_to_min_norm() {
        let mut j = random(10, 4, 5);
        let c0 = j.column(0).into_owned();
        j.set_column(3, &c0);
        let r = random(10, 1, 6).column(0).into_owned();
        let x = weighted_lstsq(&j, &r).unwrap();
        // minimum norm splits the duplicated column evenly
        assert!((x[0] - x[3]).abs() < 1e-10);
        let pinv = j.clone().pseudo_inverse(1e-12).unwrap();
        assert!((x - pinv * r).norm() < 1e-10);
    }

    #[test]
    fn rejects_non_finite() {
        let mut j = random(6, 2, 7);
        j[(2, 1)] = f64::NAN;
        let r = DVector::zeros(6);
        assert!(matches!(
            weighted_lstsq(&j, &r),
            Err(Error::NumericalFailure(_))
        ));
    }

    #[test]
    fn min_norm_of_zero_matrix_is_zero() {
        let x = lstsq_min_norm(&DMatrix::zeros(4, 3), &random(4, 2, 8)).unwrap();
        assert_eq!(x, DMatrix::zeros(3, 2));
    }
}
