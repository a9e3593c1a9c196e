//! Small dense helpers shared by the analytic modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Residual ceiling for every production linear solve.
pub const SOLVE_RESIDUAL_TOL: f64 = 1e-8;

/// Solves `a * x = b` by partial-pivoting LU and refuses the answer when the
/// residual exceeds [`SOLVE_RESIDUAL_TOL`] (scaled by the magnitude of `b`).
pub fn solve_checked(a: &DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let lu = a.clone().lu();
    let x = lu.solve(b).ok_or_else(|| {
        Error::solver(
            what,
            format!("matrix is singular (condition estimate {:e})", condition_estimate(a)),
        )
    })?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::solver(what, "solution contains non-finite entries"));
    }
    let residual = (a * &x - b).amax();
    let scale = b.amax().max(1.0);
    if residual > SOLVE_RESIDUAL_TOL * scale {
        return Err(Error::solver(
            what,
            format!(
                "residual {residual:e} exceeds tolerance (condition estimate {:e})",
                condition_estimate(a)
            ),
        ));
    }
    Ok(x)
}

pub fn solve_vec_checked(a: &DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let rhs = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
    let x = solve_checked(a, &rhs, what)?;
    Ok(x.column(0).into_owned())
}

/// Ratio of extreme singular values; infinite for singular input.
pub fn condition_estimate(a: &DMatrix<f64>) -> f64 {
    let sv = a.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Largest singular value (operator 2-norm).
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone().svd(false, false).singular_values.max()
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_symmetric_eigenvalue(a: &DMatrix<f64>) -> f64 {
    a.clone().symmetric_eigen().eigenvalues.min()
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

pub fn from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    for row in rows {
        if row.len() != ncols {
            return Err(Error::dims(what, ncols, row.len()));
        }
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}
