//! Exact ground truth for a policy-evaluation problem.
//!
//! Everything here is a finite linear-algebra computation: the mean-field
//! map and its fixed point, the exact value function, the contraction
//! factor, the Poisson-equation solutions for the Markov noise, and the
//! constants that enter the concentration bound.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::feature_space::{self, AssumptionReport, FeatureMap};
use crate::linalg;
use crate::markov::{stationary_distribution, MarkovChain, StationaryDistribution};

/// Ceiling on fixed-point and Poisson residuals.
pub const RESIDUAL_TOL: f64 = 1e-8;

/// Chain, rewards, discount and features, with the stationary distribution
/// and the feasibility report computed once at construction.
#[derive(Debug, Clone)]
pub struct PolicyEvalProblem {
    chain: MarkovChain,
    rewards: DVector<f64>,
    gamma: f64,
    features: FeatureMap,
    stationary: StationaryDistribution,
    phi_rows: Vec<DVector<f64>>,
    /// `P Phi`: row `i` is `sum_j p(j|i) phi(j)^T`.
    next_features: DMatrix<f64>,
    assumption: AssumptionReport,
}

impl PolicyEvalProblem {
    /// Builds the problem. A failing feature condition is recorded in
    /// [`Self::assumption`] but does not prevent construction.
    pub fn new(
        chain: MarkovChain,
        rewards: DVector<f64>,
        gamma: f64,
        features: FeatureMap,
    ) -> Result<Self> {
        let s = chain.n_states();
        if rewards.len() != s {
            return Err(Error::dims("reward vector", s, rewards.len()));
        }
        if features.n_states() != s {
            return Err(Error::dims("feature matrix rows", s, features.n_states()));
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidProblem("rewards must be finite".into()));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidProblem(format!("gamma = {gamma} must lie in (0, 1)")));
        }
        let stationary = stationary_distribution(&chain)?;
        let assumption = feature_space::check_assumption(&features, &stationary, gamma)?;
        let next_features = chain.matrix() * features.matrix();
        let phi_rows = (0..s).map(|i| features.row(i)).collect();
        Ok(Self {
            chain,
            rewards,
            gamma,
            features,
            stationary,
            phi_rows,
            next_features,
            assumption,
        })
    }

    pub fn chain(&self) -> &MarkovChain {
        &self.chain
    }
    pub fn rewards(&self) -> &DVector<f64> {
        &self.rewards
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn features(&self) -> &FeatureMap {
        &self.features
    }
    pub fn stationary(&self) -> &StationaryDistribution {
        &self.stationary
    }
    pub fn assumption(&self) -> &AssumptionReport {
        &self.assumption
    }
    pub fn n_states(&self) -> usize {
        self.chain.n_states()
    }
    pub fn dim(&self) -> usize {
        self.features.dim()
    }

    pub fn phi(&self, i: usize) -> &DVector<f64> {
        &self.phi_rows[i]
    }

    /// `sum_j p(j|i) phi(j)`.
    pub fn expected_next_phi(&self, i: usize) -> DVector<f64> {
        self.next_features.row(i).transpose()
    }

    /// `F1(i) = phi(i) r(i)`.
    pub fn f1(&self, i: usize) -> DVector<f64> {
        self.phi(i) * self.rewards[i]
    }

    /// `F2(i) = phi(i) (gamma * sum_j p(j|i) phi(j) - phi(i))^T`.
    pub fn f2(&self, i: usize) -> DMatrix<f64> {
        let phi = self.phi(i);
        let dir = self.expected_next_phi(i) * self.gamma - phi;
        phi * dir.transpose()
    }

    /// `F(x, i) = F1(i) + F2(i) x + x`.
    pub fn f(&self, x: &DVector<f64>, i: usize) -> DVector<f64> {
        let phi = self.phi(i);
        let td = self.rewards[i] + self.gamma * self.next_features.row(i).dot(&x.transpose())
            - phi.dot(x);
        phi * td + x
    }

    /// `sum_i pi(i) F(x, i)`.
    pub fn mean_field(&self, x: &DVector<f64>) -> DVector<f64> {
        let pi = self.stationary.pi();
        (0..self.n_states()).fold(DVector::zeros(self.dim()), |acc, i| acc + self.f(x, i) * pi[i])
    }

    /// `(A, b)` with `mean_field(x) = A x + b`, where
    /// `A = gamma Phi^T D P Phi - Phi^T D Phi + I` and `b = Phi^T D r`.
    pub fn mean_field_affine(&self) -> (DMatrix<f64>, DVector<f64>) {
        let phi = self.features.matrix();
        let d = self.stationary.diag();
        let phi_t_d = phi.transpose() * d;
        let a = &phi_t_d * &self.next_features * self.gamma - &phi_t_d * phi
            + DMatrix::identity(self.dim(), self.dim());
        (a, phi_t_d * &self.rewards)
    }

    /// Bellman operator image `r + gamma P v`.
    pub fn bellman(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.rewards + self.chain.matrix() * v * self.gamma
    }
}

/// Solves `(Phi^T D Phi - gamma Phi^T D P Phi) x = Phi^T D r`.
pub fn fixed_point(problem: &PolicyEvalProblem) -> Result<DVector<f64>> {
    let (a, b) = problem.mean_field_affine();
    let system = DMatrix::identity(problem.dim(), problem.dim()) - a;
    let x = linalg::solve_vec_checked(&system, &b, "fixed point")?;
    let residual = (problem.mean_field(&x) - &x).norm();
    if residual > RESIDUAL_TOL {
        return Err(Error::solver(
            "fixed point",
            format!("mean-field residual {residual:e} exceeds 1e-8"),
        ));
    }
    Ok(x)
}

/// Solves `(I - gamma P) V = r`.
pub fn exact_value_function(problem: &PolicyEvalProblem) -> Result<DVector<f64>> {
    let s = problem.n_states();
    let system = DMatrix::identity(s, s) - problem.chain().matrix() * problem.gamma();
    linalg::solve_vec_checked(&system, problem.rewards(), "value function")
}

/// The explicit Euclidean Lipschitz constant of the mean-field map,
/// `sqrt(1 - mu (2(1-gamma) - lambda_M^2 (1+gamma)^2))` with `mu` the
/// smallest eigenvalue of `Phi^T D Phi`.
pub fn contraction_factor(problem: &PolicyEvalProblem) -> Result<f64> {
    let report = problem.assumption();
    if !report.satisfied {
        return Err(Error::AssumptionViolated {
            lambda_m: report.lambda_m,
            threshold: report.threshold,
            suggested_scale: report.suggested_scale,
        });
    }
    let gamma = problem.gamma();
    let mu = linalg::min_symmetric_eigenvalue(&problem.features().gram_d(problem.stationary()));
    let slack = 2.0 * (1.0 - gamma) - report.lambda_m.powi(2) * (1.0 + gamma).powi(2);
    let alpha_sq = 1.0 - mu * slack;
    let alpha = alpha_sq.max(0.0).sqrt();
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::solver(
            "contraction factor",
            format!("computed alpha = {alpha} is outside (0, 1)"),
        ));
    }
    Ok(alpha)
}

/// Anchored solutions of the Poisson equations for `F1` and `F2`.
#[derive(Debug, Clone)]
pub struct PoissonSolution {
    /// `U(i)` for each state.
    pub u: Vec<DVector<f64>>,
    /// `W(i)` for each state.
    pub w: Vec<DMatrix<f64>>,
    pub anchor_state: usize,
    /// Largest absolute residual of the `U` equations.
    pub u_residual: f64,
    /// Largest absolute residual of the `W` equations.
    pub w_residual: f64,
}

impl PoissonSolution {
    /// `U(Y') - sum_j p(j|y) U(j)`.
    pub fn u_tilde(&self, chain: &MarkovChain, y: usize, y_next: usize) -> DVector<f64> {
        let mut out = self.u[y_next].clone();
        for (j, uj) in self.u.iter().enumerate() {
            out -= uj * chain.prob(y, j);
        }
        out
    }

    /// `W(Y') - sum_j p(j|y) W(j)`.
    pub fn w_tilde(&self, chain: &MarkovChain, y: usize, y_next: usize) -> DMatrix<f64> {
        let mut out = self.w[y_next].clone();
        for (j, wj) in self.w.iter().enumerate() {
            out -= wj * chain.prob(y, j);
        }
        out
    }
}

/// Solves `(I - P) u = g - pi.g` componentwise for every entry of `F1` and
/// `F2`, with equation `i0` replaced by `u(i0) = 0`.
pub fn poisson_solve(problem: &PolicyEvalProblem, i0: usize) -> Result<PoissonSolution> {
    let s = problem.n_states();
    let d = problem.dim();
    if i0 >= s {
        return Err(Error::InvalidProblem(format!("anchor state {i0} out of range 0..{s}")));
    }
    let p = problem.chain().matrix();
    // One column per scalar component: d for F1 then d*d for F2 (row-major).
    let k = d + d * d;
    let mut g = DMatrix::<f64>::zeros(s, k);
    for i in 0..s {
        let f1 = problem.f1(i);
        let f2 = problem.f2(i);
        for a in 0..d {
            g[(i, a)] = f1[a];
            for b in 0..d {
                g[(i, d + a * d + b)] = f2[(a, b)];
            }
        }
    }
    let pi = problem.stationary().pi();
    let means = g.transpose() * pi;
    let mut centered = g.clone();
    for c in 0..k {
        centered.column_mut(c).add_scalar_mut(-means[c]);
    }

    let mut system = DMatrix::<f64>::identity(s, s) - p;
    system.row_mut(i0).fill(0.0);
    system[(i0, i0)] = 1.0;
    let mut rhs = centered.clone();
    rhs.row_mut(i0).fill(0.0);
    let mut sol = linalg::solve_checked(&system, &rhs, "Poisson equation")?;
    sol.row_mut(i0).fill(0.0);

    // Residual of the original (unanchored) equations.
    let residual = &sol - &centered - p * &sol;
    let scale = centered.amax().max(1.0);
    let u_residual = residual.columns(0, d).amax();
    let w_residual = if d * d > 0 {
        residual.columns(d, d * d).amax()
    } else {
        0.0
    };
    if u_residual.max(w_residual) > RESIDUAL_TOL * scale {
        return Err(Error::solver(
            "Poisson equation",
            format!("residual {:e} exceeds 1e-8", u_residual.max(w_residual)),
        ));
    }

    let u = (0..s)
        .map(|i| DVector::from_fn(d, |a, _| sol[(i, a)]))
        .collect();
    let w = (0..s)
        .map(|i| DMatrix::from_fn(d, d, |a, b| sol[(i, d + a * d + b)]))
        .collect();
    Ok(PoissonSolution {
        u,
        w,
        anchor_state: i0,
        u_residual,
        w_residual,
    })
}

/// Constants of the concentration bound.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstantsBundle {
    pub u_max: f64,
    pub w_max: f64,
    pub m_max: f64,
    pub k1: f64,
    pub k2: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub alpha: f64,
    pub lambda_m: f64,
    pub x_star_norm: f64,
    pub dim: usize,
}

impl ConstantsBundle {
    /// Branch point of the martingale tail,
    /// `sqrt(d) c3 (2 + |x*| + (a(n0)(c2 + 1) + 1) / (1 - alpha - a(n0) c1))`.
    pub fn tail_branch_point(&self, a_n0: f64) -> f64 {
        let margin = 1.0 - self.alpha - a_n0 * self.c1;
        (self.dim as f64).sqrt()
            * self.c3
            * (2.0 + self.x_star_norm + (a_n0 * (self.c2 + 1.0) + 1.0) / margin)
    }
}

pub fn compute_constants(
    problem: &PolicyEvalProblem,
    poisson: &PoissonSolution,
    x_star: &DVector<f64>,
    alpha: f64,
) -> ConstantsBundle {
    let s = problem.n_states();
    let gamma = problem.gamma();
    let u_max = poisson.u.iter().map(|u| u.norm()).fold(0.0, f64::max);
    let w_max = poisson
        .w
        .iter()
        .map(linalg::spectral_norm)
        .fold(0.0, f64::max);
    let phis: Vec<&DVector<f64>> = (0..s).map(|i| problem.phi(i)).collect();
    let k1 = (0..s)
        .map(|i| phis[i].norm() * problem.rewards()[i].abs())
        .fold(0.0, f64::max);
    // Rank-one operator norms: |a b^T| = |a| |b|.
    let mut k2 = 0.0f64;
    let mut m_max = 0.0f64;
    for i in 0..s {
        let next = problem.expected_next_phi(i);
        for j in 0..s {
            k2 = k2.max(phis[i].norm() * (phis[j] * gamma - phis[i]).norm());
            if problem.chain().prob(i, j) > 0.0 {
                m_max = m_max.max(gamma * phis[i].norm() * (phis[j] - &next).norm());
            }
        }
    }
    let x_star_norm = x_star.norm();
    let c1 = w_max * (4.0 + k2);
    let c2 = 4.0 * u_max + k1 * w_max + c1 * x_star_norm;
    let c3 = (m_max + 2.0 * w_max).max(2.0 * u_max);
    ConstantsBundle {
        u_max,
        w_max,
        m_max,
        k1,
        k2,
        c1,
        c2,
        c3,
        alpha,
        lambda_m: problem.assumption().lambda_m,
        x_star_norm,
        dim: problem.dim(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Residuals {
    pub mean_field: f64,
    pub projected_bellman: f64,
    pub poisson_u: f64,
    pub poisson_w: f64,
}

/// Full ground truth for a problem.
#[derive(Debug, Clone)]
pub struct AnalyticSolution {
    pub pi: StationaryDistribution,
    pub x_star: DVector<f64>,
    pub v_exact: DVector<f64>,
    pub v_approx: DVector<f64>,
    pub poisson: PoissonSolution,
    pub constants: ConstantsBundle,
    pub residuals: Residuals,
}

impl AnalyticSolution {
    /// Solves everything with the Poisson anchor at `i0`. Fails with
    /// [`Error::AssumptionViolated`] when the feature condition does not hold.
    pub fn compute(problem: &PolicyEvalProblem, i0: usize) -> Result<Self> {
        let alpha = contraction_factor(problem)?;
        let x_star = fixed_point(problem)?;
        let v_exact = exact_value_function(problem)?;
        let v_approx = problem.features().matrix() * &x_star;
        let projected = feature_space::project_d(
            &problem.bellman(&v_approx),
            problem.features(),
            problem.stationary(),
        )?;
        let projected_bellman = (&v_approx - projected).norm();
        if projected_bellman > RESIDUAL_TOL {
            return Err(Error::solver(
                "projected Bellman fixed point",
                format!("residual {projected_bellman:e} exceeds 1e-8"),
            ));
        }
        let poisson = poisson_solve(problem, i0)?;
        let constants = compute_constants(problem, &poisson, &x_star, alpha);
        let residuals = Residuals {
            mean_field: (problem.mean_field(&x_star) - &x_star).norm(),
            projected_bellman,
            poisson_u: poisson.u_residual,
            poisson_w: poisson.w_residual,
        };
        Ok(Self {
            pi: problem.stationary().clone(),
            x_star,
            v_exact,
            v_approx,
            poisson,
            constants,
            residuals,
        })
    }

    pub fn report(&self, problem: &PolicyEvalProblem) -> AnalyticReport {
        AnalyticReport {
            stationary_distribution: self.pi.pi().iter().copied().collect(),
            x_star: self.x_star.iter().copied().collect(),
            v_exact: self.v_exact.iter().copied().collect(),
            v_approx: self.v_approx.iter().copied().collect(),
            poisson_anchor_state: self.poisson.anchor_state,
            poisson_u: self.poisson.u.iter().map(|u| u.iter().copied().collect()).collect(),
            poisson_w: self.poisson.w.iter().map(linalg::to_rows).collect(),
            constants: self.constants.clone(),
            assumption: problem.assumption().clone(),
            residuals: self.residuals.clone(),
        }
    }
}

/// Serializable view of [`AnalyticSolution`].
#[derive(Debug, Clone, Serialize)]
pub struct AnalyticReport {
    pub stationary_distribution: Vec<f64>,
    pub x_star: Vec<f64>,
    pub v_exact: Vec<f64>,
    pub v_approx: Vec<f64>,
    pub poisson_anchor_state: usize,
    pub poisson_u: Vec<Vec<f64>>,
    pub poisson_w: Vec<Vec<Vec<f64>>>,
    pub constants: ConstantsBundle,
    pub assumption: AssumptionReport,
    pub residuals: Residuals,
}
