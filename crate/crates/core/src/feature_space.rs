//! Feature matrices, the `pi`-weighted geometry on `R^s`, and the
//! feasibility test on the feature scale.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::markov::StationaryDistribution;

/// Relative rank threshold: `sigma_min > RANK_TOL * sigma_max`.
pub const RANK_TOL: f64 = 1e-10;

/// `s x d` feature matrix; row `i` is `phi(i)^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    phi: DMatrix<f64>,
}

impl FeatureMap {
    pub fn new(phi: DMatrix<f64>) -> Result<Self> {
        let (s, d) = phi.shape();
        if d == 0 || s < d {
            return Err(Error::InvalidProblem(format!(
                "feature matrix must satisfy s >= d >= 1, got s = {s}, d = {d}"
            )));
        }
        if phi.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidProblem("feature matrix has non-finite entries".into()));
        }
        let sv = phi.clone().svd(false, false).singular_values;
        let (smallest, largest) = (sv.min(), sv.max());
        if largest == 0.0 || smallest <= RANK_TOL * largest {
            return Err(Error::RankDeficient { smallest, largest });
        }
        Ok(Self { phi })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(linalg::from_rows(rows, "feature matrix row")?)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn n_states(&self) -> usize {
        self.phi.nrows()
    }

    pub fn dim(&self) -> usize {
        self.phi.ncols()
    }

    /// `phi(i)` as a column vector.
    pub fn row(&self, i: usize) -> DVector<f64> {
        self.phi.row(i).transpose()
    }

    pub fn max_row_norm(&self) -> f64 {
        (0..self.n_states())
            .map(|i| self.phi.row(i).norm())
            .fold(0.0, f64::max)
    }

    /// `Phi^T D Phi`.
    pub fn gram_d(&self, pi: &StationaryDistribution) -> DMatrix<f64> {
        self.phi.transpose() * pi.diag() * &self.phi
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(&self.phi * c)
    }
}

fn check_len(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::dims(what, expected, got));
    }
    Ok(())
}

/// `||x||_D = (sum_i pi(i) x(i)^2)^(1/2)`.
pub fn weighted_norm(x: &DVector<f64>, pi: &StationaryDistribution) -> Result<f64> {
    check_len("weighted norm argument", pi.len(), x.len())?;
    Ok(x.iter()
        .zip(pi.pi().iter())
        .map(|(xi, p)| p * xi * xi)
        .sum::<f64>()
        .sqrt())
}

/// `<x, y>_D`.
pub fn weighted_inner(x: &DVector<f64>, y: &DVector<f64>, pi: &StationaryDistribution) -> Result<f64> {
    check_len("weighted inner product argument", pi.len(), x.len())?;
    check_len("weighted inner product argument", pi.len(), y.len())?;
    Ok(x.component_mul(y).dot(pi.pi()))
}

/// Largest singular value of `Phi^T sqrt(D)`.
pub fn lambda_m(features: &FeatureMap, pi: &StationaryDistribution) -> Result<f64> {
    check_len("stationary distribution", features.n_states(), pi.len())?;
    let psi = features.matrix().transpose() * pi.sqrt_diag();
    Ok(linalg::spectral_norm(&psi))
}

/// `sqrt(2(1 - gamma)) / (1 + gamma)`.
pub fn feature_threshold(gamma: f64) -> f64 {
    (2.0 * (1.0 - gamma)).sqrt() / (1.0 + gamma)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub lambda_m: f64,
    pub threshold: f64,
    pub satisfied: bool,
    pub max_row_norm: f64,
    pub row_condition_satisfied: bool,
    /// `threshold / lambda_m`: any feature scale strictly below this passes.
    pub suggested_scale: f64,
}

pub fn check_assumption(
    features: &FeatureMap,
    pi: &StationaryDistribution,
    gamma: f64,
) -> Result<AssumptionReport> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidProblem(format!("gamma = {gamma} must lie in (0, 1)")));
    }
    let lambda_m = lambda_m(features, pi)?;
    let threshold = feature_threshold(gamma);
    let max_row_norm = features.max_row_norm();
    Ok(AssumptionReport {
        lambda_m,
        threshold,
        satisfied: lambda_m < threshold,
        max_row_norm,
        row_condition_satisfied: max_row_norm < threshold,
        suggested_scale: if lambda_m > 0.0 {
            threshold / lambda_m
        } else {
            f64::INFINITY
        },
    })
}

/// `Pi v = Phi (Phi^T D Phi)^{-1} Phi^T D v`.
pub fn project_d(
    v: &DVector<f64>,
    features: &FeatureMap,
    pi: &StationaryDistribution,
) -> Result<DVector<f64>> {
    check_len("projection argument", features.n_states(), v.len())?;
    let phi = features.matrix();
    let rhs = phi.transpose() * pi.diag() * v;
    let w = linalg::solve_vec_checked(&features.gram_d(pi), &rhs, "D-weighted projection")?;
    Ok(phi * w)
}
