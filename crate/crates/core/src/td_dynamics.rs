//! Online TD(0) along a single sample path, the noiseless comparison
//! recursion, and the per-step noise decomposition.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::analytic::{AnalyticSolution, PolicyEvalProblem};
use crate::error::{Error, Result};
use crate::schedule::StepSchedule;

/// Runs longer than this keep only scalar series and checkpoints.
pub const FULL_HISTORY_LIMIT: usize = 100_000;
/// Checkpoint spacing for long runs.
pub const CHECKPOINT_EVERY: usize = 1_000;
/// Per-step tolerance on the drift + noise reconstruction.
pub const DECOMPOSITION_TOL: f64 = 1e-10;

/// One TD(0) update:
/// `x + a phi(y) (r(y) + gamma phi(y')^T x - phi(y)^T x)`.
pub fn td0_step(
    problem: &PolicyEvalProblem,
    x: &DVector<f64>,
    y: usize,
    y_next: usize,
    a_n: f64,
) -> DVector<f64> {
    let phi = problem.phi(y);
    let td_error =
        problem.rewards()[y] + problem.gamma() * problem.phi(y_next).dot(x) - phi.dot(x);
    x + phi * (a_n * td_error)
}

/// `M_{n+1} = gamma phi(y) (phi(y') - sum_j p(j|y) phi(j))^T`.
pub fn martingale_matrix(problem: &PolicyEvalProblem, y: usize, y_next: usize) -> DMatrix<f64> {
    let dir = problem.phi(y_next) - problem.expected_next_phi(y);
    problem.phi(y) * dir.transpose() * problem.gamma()
}

/// Mean-field map in affine form, `x -> A x + b`.
#[derive(Debug, Clone)]
pub struct MeanField {
    a: DMatrix<f64>,
    b: DVector<f64>,
}

impl MeanField {
    pub fn new(problem: &PolicyEvalProblem) -> Self {
        let (a, b) = problem.mean_field_affine();
        Self { a, b }
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b
    }

    /// `z + a (mean_field(z) - z)`.
    pub fn step(&self, z: &DVector<f64>, a_n: f64) -> DVector<f64> {
        z + (self.apply(z) - z) * a_n
    }
}

/// Start of a run: `x_{n0}` and `Y_{n0}`.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub n0: usize,
    pub horizon: usize,
    pub initial_x: DVector<f64>,
    pub initial_state: usize,
}

impl RunSpec {
    pub fn validate(&self, problem: &PolicyEvalProblem, schedule: &StepSchedule) -> Result<()> {
        if self.horizon <= self.n0 {
            return Err(Error::InvalidConfig(format!(
                "horizon {} must exceed n0 {}",
                self.horizon, self.n0
            )));
        }
        if self.initial_x.len() != problem.dim() {
            return Err(Error::dims("initial iterate", problem.dim(), self.initial_x.len()));
        }
        if self.initial_state >= problem.n_states() {
            return Err(Error::InvalidConfig(format!(
                "initial state {} out of range 0..{}",
                self.initial_state,
                problem.n_states()
            )));
        }
        schedule.covers(self.horizon)
    }
}

/// Noise terms of one transition `(n, Y_n) -> Y_{n+1}`.
#[derive(Debug, Clone)]
pub struct StepNoise {
    pub n: usize,
    /// `a(n) (mean_field(x_n) - x_n)`.
    pub drift: DVector<f64>,
    /// `a(n) M_{n+1} x_n`.
    pub tau1: DVector<f64>,
    /// `a(n) (F(x_n, Y_n) - mean_field(x_n))`.
    pub tau2: DVector<f64>,
    /// `U(Y_{n+1}) - sum_j p(j|Y_n) U(j)`.
    pub u_tilde: DVector<f64>,
    /// `(W(Y_{n+1}) - sum_j p(j|Y_n) W(j)) x_n`.
    pub w_tilde_x: DVector<f64>,
    /// `|x_{n+1} - x_n - drift - tau1 - tau2|`.
    pub reconstruction_residual: f64,
    /// Norm of the discounted martingale sum through step `n`:
    /// `|sum_{k=n0}^{n} chi(n, k+1) a(k) (M_{k+1} x_k + W~_{k+1} x_k + U~_{k+1})|`.
    pub martingale_sum_norm: f64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub n: usize,
    pub x: DVector<f64>,
    pub z: DVector<f64>,
}

/// Everything recorded along one run from `n0` to `horizon`.
///
/// Index `k` of each series refers to time `n0 + k`.
#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub n0: usize,
    pub horizon: usize,
    pub states: Vec<usize>,
    /// Full iterate history; empty when the run exceeds [`FULL_HISTORY_LIMIT`].
    pub x: Vec<DVector<f64>>,
    pub z: Vec<DVector<f64>>,
    pub err_x: Vec<f64>,
    pub err_xz: Vec<f64>,
    /// Running `sup_{n0 <= k <= m} |x_k - z_k|`.
    pub x_prime: Vec<f64>,
    pub checkpoints: Vec<Checkpoint>,
    pub noise_log: Option<Vec<StepNoise>>,
    pub final_x: DVector<f64>,
    pub final_state: usize,
}

impl TrajectoryRecord {
    pub fn has_full_history(&self) -> bool {
        !self.x.is_empty()
    }

    /// CSV with columns `n, Y_n, err_x, err_xz, x_prime` and, when
    /// `with_components` is set, `x_0 .. x_{d-1}`.
    pub fn write_csv<W: Write>(&self, out: W, with_components: bool) -> Result<()> {
        if with_components && !self.has_full_history() {
            return Err(Error::InvalidConfig(format!(
                "per-component export needs full history (runs up to {FULL_HISTORY_LIMIT} steps)"
            )));
        }
        let mut w = csv::Writer::from_writer(out);
        let d = self.final_x.len();
        let mut header: Vec<String> = ["n", "Y_n", "err_x", "err_xz", "x_prime"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        if with_components {
            header.extend((0..d).map(|c| format!("x_{c}")));
        }
        w.write_record(&header)?;
        for k in 0..self.states.len() {
            let mut row = vec![
                (self.n0 + k).to_string(),
                self.states[k].to_string(),
                self.err_x[k].to_string(),
                self.err_xz[k].to_string(),
                self.x_prime[k].to_string(),
            ];
            if with_components {
                row.extend(self.x[k].iter().map(|v| v.to_string()));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Stepping engine for online TD(0); the harness drives it directly to
/// avoid storing histories.
#[derive(Debug, Clone)]
pub struct OnlineTd<'a> {
    problem: &'a PolicyEvalProblem,
    schedule: &'a StepSchedule,
    n: usize,
    x: DVector<f64>,
    y: usize,
}

impl<'a> OnlineTd<'a> {
    pub fn new(
        problem: &'a PolicyEvalProblem,
        schedule: &'a StepSchedule,
        n: usize,
        x: DVector<f64>,
        y: usize,
    ) -> Self {
        Self {
            problem,
            schedule,
            n,
            x,
            y,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn x(&self) -> &DVector<f64> {
        &self.x
    }
    pub fn state(&self) -> usize {
        self.y
    }

    /// Samples `Y_{n+1}` and applies the update with `a(n)`; returns `Y_{n+1}`.
    pub fn advance<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<usize> {
        let y_next = self.problem.chain().step(self.y, rng);
        self.advance_to(y_next)?;
        Ok(y_next)
    }

    /// Applies the update for a given successor state.
    pub fn advance_to(&mut self, y_next: usize) -> Result<()> {
        let a = self.schedule.try_a(self.n)?;
        let next = td0_step(self.problem, &self.x, self.y, y_next, a);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step: self.n + 1,
                trajectory: None,
            });
        }
        self.x = next;
        self.y = y_next;
        self.n += 1;
        Ok(())
    }
}

/// Runs the online recursion from `spec.n0` to `spec.horizon` alongside the
/// comparison iterate `z` (with `z_{n0} = x_{n0}`). With `log_noise` the
/// decomposition is recorded per step and checked to reconstruct the update.
pub fn run_online<R: Rng + ?Sized>(
    problem: &PolicyEvalProblem,
    solution: &AnalyticSolution,
    schedule: &StepSchedule,
    spec: &RunSpec,
    rng: &mut R,
    log_noise: bool,
) -> Result<TrajectoryRecord> {
    spec.validate(problem, schedule)?;
    let steps = spec.horizon - spec.n0;
    let full = steps <= FULL_HISTORY_LIMIT;
    let mean_field = MeanField::new(problem);
    let x_star = &solution.x_star;
    let chain = problem.chain();

    let mut engine = OnlineTd::new(
        problem,
        schedule,
        spec.n0,
        spec.initial_x.clone(),
        spec.initial_state,
    );
    let mut z = spec.initial_x.clone();
    let mut record = TrajectoryRecord {
        n0: spec.n0,
        horizon: spec.horizon,
        states: Vec::with_capacity(steps + 1),
        x: Vec::new(),
        z: Vec::new(),
        err_x: Vec::with_capacity(steps + 1),
        err_xz: Vec::with_capacity(steps + 1),
        x_prime: Vec::with_capacity(steps + 1),
        checkpoints: Vec::new(),
        noise_log: log_noise.then(|| Vec::with_capacity(steps)),
        final_x: spec.initial_x.clone(),
        final_state: spec.initial_state,
    };
    let mut running_sup = 0.0f64;
    let mut martingale_sum = DVector::<f64>::zeros(problem.dim());

    let mut observe = |record: &mut TrajectoryRecord, n: usize, y: usize, x: &DVector<f64>, z: &DVector<f64>| {
        let gap = (x - z).norm();
        running_sup = running_sup.max(gap);
        record.states.push(y);
        record.err_x.push((x - x_star).norm());
        record.err_xz.push(gap);
        record.x_prime.push(running_sup);
        if full {
            record.x.push(x.clone());
            record.z.push(z.clone());
        } else if (n - spec.n0) % CHECKPOINT_EVERY == 0 || n == spec.horizon {
            record.checkpoints.push(Checkpoint {
                n,
                x: x.clone(),
                z: z.clone(),
            });
        }
    };

    observe(&mut record, spec.n0, spec.initial_state, engine.x(), &z);
    for n in spec.n0..spec.horizon {
        let a = schedule.a(n);
        let y = engine.state();
        let x_n = engine.x().clone();
        let y_next = chain.step(y, rng);
        engine.advance_to(y_next)?;
        if let Some(log) = record.noise_log.as_mut() {
            let mf = mean_field.apply(&x_n);
            let drift = (&mf - &x_n) * a;
            let m_x = martingale_matrix(problem, y, y_next) * &x_n;
            let tau1 = &m_x * a;
            let tau2 = (problem.f(&x_n, y) - &mf) * a;
            let residual = (engine.x() - &x_n - &drift - &tau1 - &tau2).norm();
            if residual > DECOMPOSITION_TOL {
                return Err(Error::DecompositionMismatch { step: n, residual });
            }
            let u_tilde = solution.poisson.u_tilde(chain, y, y_next);
            let w_tilde_x = solution.poisson.w_tilde(chain, y, y_next) * &x_n;
            martingale_sum = &martingale_sum * (1.0 - a) + (&m_x + &w_tilde_x + &u_tilde) * a;
            log.push(StepNoise {
                n,
                drift,
                tau1,
                tau2,
                u_tilde,
                w_tilde_x,
                reconstruction_residual: residual,
                martingale_sum_norm: martingale_sum.norm(),
            });
        }
        z = mean_field.step(&z, a);
        observe(&mut record, n + 1, y_next, engine.x(), &z);
    }
    record.final_x = engine.x().clone();
    record.final_state = engine.state();
    Ok(record)
}

/// The noiseless recursion `z_{n+1} = z_n + a(n)(mean_field(z_n) - z_n)`,
/// returned for `n0..=horizon`.
pub fn run_deterministic(
    problem: &PolicyEvalProblem,
    schedule: &StepSchedule,
    n0: usize,
    horizon: usize,
    initial_z: &DVector<f64>,
) -> Result<Vec<DVector<f64>>> {
    if horizon < n0 {
        return Err(Error::InvalidConfig(format!("horizon {horizon} is below n0 {n0}")));
    }
    schedule.covers(horizon)?;
    let mean_field = MeanField::new(problem);
    let mut out = Vec::with_capacity(horizon - n0 + 1);
    let mut z = initial_z.clone();
    out.push(z.clone());
    for n in n0..horizon {
        z = mean_field.step(&z, schedule.a(n));
        out.push(z.clone());
    }
    Ok(out)
}

/// Sample means and standard errors of a vector-valued noise term.
#[derive(Debug, Clone)]
pub struct VectorMoments {
    pub mean: DVector<f64>,
    pub std_err: DVector<f64>,
}

impl VectorMoments {
    fn from_samples(sum: &DVector<f64>, sum_sq: &DVector<f64>, n: usize) -> Self {
        let nf = n as f64;
        let mean = sum / nf;
        let var = (sum_sq / nf - mean.component_mul(&mean)).map(|v| v.max(0.0) * nf / (nf - 1.0));
        Self {
            std_err: var.map(|v| (v / nf).sqrt()),
            mean,
        }
    }

    /// Largest `|mean| / std_err` over components; zero-variance components
    /// count as zero when the mean is exactly zero.
    pub fn max_z_score(&self) -> f64 {
        self.mean
            .iter()
            .zip(self.std_err.iter())
            .map(|(m, se)| {
                if *se > 0.0 {
                    m.abs() / se
                } else if m.abs() < 1e-14 {
                    0.0
                } else {
                    f64::INFINITY
                }
            })
            .fold(0.0, f64::max)
    }
}

/// Conditional moments of the three martingale differences given `Y_k = state`.
#[derive(Debug, Clone)]
pub struct ConditionalNoise {
    pub state: usize,
    pub m_x: VectorMoments,
    pub u_tilde: VectorMoments,
    pub w_tilde_x: VectorMoments,
}

/// Simulates `transitions` successors from every state with `x` held fixed
/// and reports the sample moments of `M x`, `U~` and `W~ x`.
pub fn conditional_noise_moments<R: Rng + ?Sized>(
    problem: &PolicyEvalProblem,
    solution: &AnalyticSolution,
    x: &DVector<f64>,
    transitions: usize,
    rng: &mut R,
) -> Vec<ConditionalNoise> {
    let d = problem.dim();
    let chain = problem.chain();
    (0..problem.n_states())
        .map(|y| {
            let mut sums = [DVector::<f64>::zeros(d), DVector::zeros(d), DVector::zeros(d)];
            let mut sq = sums.clone();
            for _ in 0..transitions {
                let y_next = chain.step(y, rng);
                let terms = [
                    martingale_matrix(problem, y, y_next) * x,
                    solution.poisson.u_tilde(chain, y, y_next),
                    solution.poisson.w_tilde(chain, y, y_next) * x,
                ];
                for (t, v) in terms.iter().enumerate() {
                    sums[t] += v;
                    sq[t] += v.component_mul(v);
                }
            }
            ConditionalNoise {
                state: y,
                m_x: VectorMoments::from_samples(&sums[0], &sq[0], transitions),
                u_tilde: VectorMoments::from_samples(&sums[1], &sq[1], transitions),
                w_tilde_x: VectorMoments::from_samples(&sums[2], &sq[2], transitions),
            }
        })
        .collect()
}
