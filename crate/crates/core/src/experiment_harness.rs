//! Monte Carlo checks of the all-time bound: many independent TD(0)
//! trajectories, `p_init` estimates, fitting of the tail constant `D`, and
//! convergence summaries.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic::{AnalyticSolution, PolicyEvalProblem};
use crate::bound_calculus::{self, BoundQuery, Horizon, PInitSource};
use crate::error::{Error, Result};
use crate::rng;
use crate::schedule::StepSchedule;
use crate::td_dynamics::{martingale_matrix, OnlineTd};

/// Trajectories are simulated and folded in batches of this size.
pub const BATCH_SIZE: usize = 10_000;
/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959_963_984_540_054;
/// Quantiles of the pooled tail samples used when no fitting grid is given.
pub const DEFAULT_FIT_QUANTILES: [f64; 5] = [0.5, 0.7, 0.9, 0.97, 0.99];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "state")]
pub enum InitialStatePolicy {
    Fixed(usize),
    Stationary,
    Uniform,
}

impl Default for InitialStatePolicy {
    fn default() -> Self {
        Self::Stationary
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub n0: usize,
    pub horizon: usize,
    pub n_trajectories: usize,
    pub master_seed: u64,
    pub epsilon: f64,
    pub delta: f64,
    /// Fitted from simulated tails when absent.
    pub d_const: Option<f64>,
    pub initial_state_policy: InitialStatePolicy,
    /// `x_0`; zeros when absent.
    pub initial_x: Option<Vec<f64>>,
    /// Extra values swept with common random numbers; the primary value is
    /// always included.
    pub epsilon_grid: Vec<f64>,
    pub delta_grid: Vec<f64>,
    /// Thresholds for fitting `D`; derived from the samples when absent.
    pub fit_delta_grid: Option<Vec<f64>>,
}

impl ExperimentConfig {
    pub fn new(n0: usize, horizon: usize, n_trajectories: usize, master_seed: u64, epsilon: f64, delta: f64) -> Self {
        Self {
            n0,
            horizon,
            n_trajectories,
            master_seed,
            epsilon,
            delta,
            d_const: None,
            initial_state_policy: InitialStatePolicy::Stationary,
            initial_x: None,
            epsilon_grid: Vec::new(),
            delta_grid: Vec::new(),
            fit_delta_grid: None,
        }
    }

    /// Checks sizes, the schedule range and the bound's hypotheses at
    /// `(epsilon, delta, n0)` for every grid point.
    pub fn validate(&self, problem: &PolicyEvalProblem, solution: &AnalyticSolution, schedule: &StepSchedule) -> Result<()> {
        if self.n_trajectories == 0 {
            return Err(Error::InvalidConfig("n_trajectories must be at least 1".into()));
        }
        if self.horizon <= self.n0 {
            return Err(Error::InvalidConfig(format!(
                "horizon {} must exceed n0 {}",
                self.horizon, self.n0
            )));
        }
        if let Some(x) = &self.initial_x {
            if x.len() != problem.dim() {
                return Err(Error::dims("initial_x", problem.dim(), x.len()));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidConfig("initial_x has non-finite entries".into()));
            }
        }
        if let InitialStatePolicy::Fixed(i) = self.initial_state_policy {
            if i >= problem.n_states() {
                return Err(Error::InvalidConfig(format!(
                    "initial state {i} out of range 0..{}",
                    problem.n_states()
                )));
            }
        }
        if let Some(d) = self.d_const {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::InvalidConfig(format!("D = {d} must be positive")));
            }
        }
        if let Some(g) = &self.fit_delta_grid {
            if g.len() < 3 || g.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::InvalidConfig(
                    "fit_delta_grid needs at least 3 positive values".into(),
                ));
            }
        }
        for (eps, delta) in self.grid() {
            BoundQuery::new(
                eps,
                delta,
                self.n0,
                Horizon::Finite(self.horizon),
                1.0,
                0.0,
                PInitSource::Empirical,
                &solution.constants,
                schedule,
            )?;
        }
        Ok(())
    }

    fn epsilons(&self) -> Vec<f64> {
        sorted_unique(self.epsilon_grid.iter().copied().chain([self.epsilon]))
    }

    fn deltas(&self) -> Vec<f64> {
        sorted_unique(self.delta_grid.iter().copied().chain([self.delta]))
    }

    /// `(epsilon, delta)` sweep, epsilon-major, both ascending.
    pub fn grid(&self) -> Vec<(f64, f64)> {
        let deltas = self.deltas();
        self.epsilons()
            .into_iter()
            .flat_map(|e| deltas.iter().map(move |d| (e, *d)))
            .collect()
    }

    fn initial_x(&self, dim: usize) -> DVector<f64> {
        match &self.initial_x {
            Some(x) => DVector::from_column_slice(x),
            None => DVector::zeros(dim),
        }
    }
}

fn sorted_unique(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// A binomial proportion with its Wilson 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProportionEstimate {
    pub successes: u64,
    pub trials: u64,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub half_width: f64,
}

impl ProportionEstimate {
    pub fn wilson(successes: u64, trials: u64) -> Self {
        assert!(trials > 0 && successes <= trials);
        let n = trials as f64;
        let p = successes as f64 / n;
        let z2 = Z_95 * Z_95;
        let denom = 1.0 + z2 / n;
        let center = (p + z2 / (2.0 * n)) / denom;
        let half = Z_95 / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
        Self {
            successes,
            trials,
            estimate: p,
            lower: if successes == 0 { 0.0 } else { (center - half).max(0.0) },
            upper: if successes == trials { 1.0 } else { (center + half).min(1.0) },
            half_width: half,
        }
    }
}

/// Log-spaced report steps: `n0`, every `{1, 2, 5} x 10^k` inside
/// `(n0, horizon)`, and `horizon`.
pub fn checkpoint_grid(n0: usize, horizon: usize) -> Vec<usize> {
    let mut out = vec![n0];
    let mut scale = 1usize;
    'outer: loop {
        for mult in [1usize, 2, 5] {
            let Some(m) = scale.checked_mul(mult) else { break 'outer };
            if m >= horizon {
                break 'outer;
            }
            if m > n0 {
                out.push(m);
            }
        }
        scale = match scale.checked_mul(10) {
            Some(s) => s,
            None => break,
        };
    }
    if horizon > n0 {
        out.push(horizon);
    }
    out
}

/// Shared read-only inputs of a run.
struct Plan<'a> {
    problem: &'a PolicyEvalProblem,
    solution: &'a AnalyticSolution,
    schedule: &'a StepSchedule,
    config: &'a ExperimentConfig,
    /// `exp(-(1-alpha) b_{n0}(m-1))` for `m in n0..=horizon`.
    decay: Vec<f64>,
    /// `(epsilon, floor)` per grid point.
    grid: Vec<(f64, f64)>,
    primary: usize,
    checkpoints: Vec<usize>,
    collect_gamma: bool,
}

impl<'a> Plan<'a> {
    fn new(
        problem: &'a PolicyEvalProblem,
        solution: &'a AnalyticSolution,
        schedule: &'a StepSchedule,
        config: &'a ExperimentConfig,
        with_grid: bool,
        collect_gamma: bool,
    ) -> Result<Self> {
        let c = &solution.constants;
        let decay = bound_calculus::radius_values(1.0, 0.0, config.n0, config.horizon, c, schedule)?
            .into_iter()
            .map(|r| r - bound_calculus::floor_term(1.0, 0.0, schedule.a(config.n0), c))
            .collect();
        let a_n0 = schedule.try_a(config.n0)?;
        let points = if with_grid { config.grid() } else { vec![(config.epsilon, config.delta)] };
        let primary = points
            .iter()
            .position(|p| *p == (config.epsilon, config.delta))
            .expect("primary point is part of the grid");
        let grid = points
            .into_iter()
            .map(|(e, d)| (e, bound_calculus::floor_term(e, d, a_n0, c)))
            .collect();
        Ok(Self {
            problem,
            solution,
            schedule,
            config,
            decay,
            grid,
            primary,
            checkpoints: checkpoint_grid(config.n0, config.horizon),
            collect_gamma,
        })
    }

    fn radius(&self, g: usize, m: usize) -> f64 {
        let (eps, floor) = self.grid[g];
        self.decay[m - self.config.n0] * eps + floor
    }
}

/// What one trajectory contributes to the aggregates.
struct TrajectoryOutcome {
    err_n0: f64,
    /// Per grid point: whether the radius was ever exceeded.
    violated: Vec<bool>,
    /// Steps at which the primary radius is exceeded.
    primary_violations: Vec<usize>,
    checkpoint_errors: Vec<f64>,
    /// `Gamma_m` at each checkpoint after `n0`.
    gamma: Vec<f64>,
}

/// Draws `Y_0` according to the policy.
pub fn initial_state<R: Rng + ?Sized>(policy: InitialStatePolicy, problem: &PolicyEvalProblem, rng: &mut R) -> usize {
    match policy {
        InitialStatePolicy::Fixed(i) => i,
        InitialStatePolicy::Stationary => problem.stationary().sample(rng),
        InitialStatePolicy::Uniform => rng.random_range(0..problem.n_states()),
    }
}

/// Runs trajectory `index` from step 0 to `n0`.
fn warm_up<'a>(
    problem: &'a PolicyEvalProblem,
    schedule: &'a StepSchedule,
    config: &ExperimentConfig,
    index: usize,
) -> Result<(OnlineTd<'a>, rng::RngStream)> {
    let mut rng = rng::stream(config.master_seed, index as u64);
    let y0 = initial_state(config.initial_state_policy, problem, &mut rng);
    let mut engine = OnlineTd::new(problem, schedule, 0, config.initial_x(problem.dim()), y0);
    while engine.n() < config.n0 {
        engine.advance(&mut rng).map_err(|e| with_trajectory(e, index))?;
    }
    Ok((engine, rng))
}

fn with_trajectory(err: Error, index: usize) -> Error {
    match err {
        Error::NonFinite { step, .. } => Error::NonFinite {
            step,
            trajectory: Some(index),
        },
        other => other,
    }
}

fn run_trajectory(plan: &Plan<'_>, index: usize) -> Result<TrajectoryOutcome> {
    let problem = plan.problem;
    let chain = problem.chain();
    let config = plan.config;
    let x_star = &plan.solution.x_star;
    let (mut engine, mut rng) = warm_up(problem, plan.schedule, config, index)?;

    let mut out = TrajectoryOutcome {
        err_n0: 0.0,
        violated: vec![false; plan.grid.len()],
        primary_violations: Vec::new(),
        checkpoint_errors: Vec::with_capacity(plan.checkpoints.len()),
        gamma: Vec::new(),
    };
    let mut next_checkpoint = 0;
    let mut martingale_sum = DVector::<f64>::zeros(problem.dim());

    let mut m = config.n0;
    loop {
        let err = (engine.x() - x_star).norm();
        if m == config.n0 {
            out.err_n0 = err;
        }
        for g in 0..plan.grid.len() {
            let over = err > plan.radius(g, m);
            if over {
                out.violated[g] = true;
                if g == plan.primary {
                    out.primary_violations.push(m);
                }
            }
        }
        if plan.checkpoints.get(next_checkpoint) == Some(&m) {
            out.checkpoint_errors.push(err);
            if plan.collect_gamma && m > config.n0 {
                out.gamma.push(martingale_sum.norm());
            }
            next_checkpoint += 1;
        }
        if m == config.horizon {
            break;
        }
        let y = engine.state();
        let y_next = chain.step(y, &mut rng);
        if plan.collect_gamma {
            let a = plan.schedule.a(m);
            let x = engine.x();
            let xi = martingale_matrix(problem, y, y_next) * x
                + plan.solution.poisson.w_tilde(chain, y, y_next) * x
                + plan.solution.poisson.u_tilde(chain, y, y_next);
            martingale_sum = martingale_sum * (1.0 - a) + xi * a;
        }
        engine.advance_to(y_next).map_err(|e| with_trajectory(e, index))?;
        m += 1;
    }
    Ok(out)
}

/// Simulates all trajectories in fixed-size batches and hands each batch to
/// `fold` in trajectory order, so the result does not depend on the thread count.
fn simulate<F>(plan: &Plan<'_>, mut fold: F) -> Result<()>
where
    F: FnMut(usize, TrajectoryOutcome),
{
    let n = plan.config.n_trajectories;
    let mut start = 0;
    while start < n {
        let end = (start + BATCH_SIZE).min(n);
        let batch: Vec<Result<TrajectoryOutcome>> =
            (start..end).into_par_iter().map(|i| run_trajectory(plan, i)).collect();
        for (offset, outcome) in batch.into_iter().enumerate() {
            fold(start + offset, outcome?);
        }
        start = end;
    }
    Ok(())
}

/// `P(|x_{n0} - x*| > epsilon)` at one epsilon.
#[derive(Debug, Clone, Serialize)]
pub struct PInitPoint {
    pub epsilon: f64,
    pub estimate: ProportionEstimate,
}

/// Runs every trajectory to `n0` and reports the exceedance frequency for
/// each epsilon in the sweep (same sample for all of them).
pub fn estimate_p_init(
    problem: &PolicyEvalProblem,
    solution: &AnalyticSolution,
    schedule: &StepSchedule,
    config: &ExperimentConfig,
) -> Result<Vec<PInitPoint>> {
    if config.n_trajectories == 0 {
        return Err(Error::InvalidConfig("n_trajectories must be at least 1".into()));
    }
    schedule.covers(config.n0)?;
    let errors: Vec<Result<f64>> = (0..config.n_trajectories)
        .into_par_iter()
        .map(|i| {
            let (engine, _) = warm_up(problem, schedule, config, i)?;
            Ok((engine.x() - &solution.x_star).norm())
        })
        .collect();
    let errors = errors.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(p_init_points(&errors, &config.epsilons()))
}

fn p_init_points(errors: &[f64], epsilons: &[f64]) -> Vec<PInitPoint> {
    epsilons
        .iter()
        .map(|&epsilon| PInitPoint {
            epsilon,
            estimate: ProportionEstimate::wilson(
                errors.iter().filter(|e| **e > epsilon).count() as u64,
                errors.len() as u64,
            ),
        })
        .collect()
}

/// Samples of `Gamma_m` at a set of steps, one per trajectory.
#[derive(Debug, Clone, Serialize)]
pub struct GammaSamples {
    pub n0: usize,
    pub steps: Vec<usize>,
    /// `samples[j][i]` is trajectory `i` at `steps[j]`.
    pub samples: Vec<Vec<f64>>,
}

impl GammaSamples {
    fn pooled_quantiles(&self, qs: &[f64]) -> Vec<f64> {
        let mut pooled: Vec<f64> = self.samples.iter().flatten().copied().collect();
        pooled.sort_by(f64::total_cmp);
        qs.iter().map(|q| quantile_sorted(&pooled, *q)).collect()
    }
}

/// Distinct positive pooled quantiles at [`DEFAULT_FIT_QUANTILES`].
pub fn default_fit_grid(samples: &GammaSamples) -> Vec<f64> {
    sorted_unique(
        samples
            .pooled_quantiles(&DEFAULT_FIT_QUANTILES)
            .into_iter()
            .filter(|d| *d > 0.0 && d.is_finite()),
    )
}

/// One `(m, delta)` point of the tail fit.
#[derive(Debug, Clone, Serialize)]
pub struct FitPoint {
    pub m: usize,
    pub delta: f64,
    pub p_hat: f64,
    /// `delta^2 / beta_{n0}(m)`.
    pub t: f64,
    /// `-ln(p_hat / 2d)`.
    pub y: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DFit {
    /// Least-squares slope through the origin of `y` on `t`.
    pub d_lsq: f64,
    /// Largest `D` under which every point satisfies the tail model.
    pub d_conservative: f64,
    pub rms_residual: f64,
    pub points: Vec<FitPoint>,
}

/// Fits `p_hat ~ 2d exp(-D t)` through the origin in log space. Points with
/// `p_hat` of 0 or 1 are dropped.
pub fn fit_d_points(points: &[(usize, f64, f64, f64)], dim: usize) -> Result<DFit> {
    let two_d = 2.0 * dim as f64;
    let mut kept: Vec<FitPoint> = points
        .iter()
        .filter(|(_, _, p, t)| *p > 0.0 && *p < 1.0 && *t > 0.0)
        .map(|&(m, delta, p_hat, t)| FitPoint {
            m,
            delta,
            p_hat,
            t,
            y: -(p_hat / two_d).ln(),
            residual: 0.0,
        })
        .collect();
    if kept.is_empty() {
        return Err(Error::InsufficientTailData(
            "every empirical tail probability is 0 or 1".into(),
        ));
    }
    let sty: f64 = kept.iter().map(|p| p.t * p.y).sum();
    let stt: f64 = kept.iter().map(|p| p.t * p.t).sum();
    let d_lsq = sty / stt;
    let d_conservative = kept.iter().map(|p| p.y / p.t).fold(f64::INFINITY, f64::min);
    for p in &mut kept {
        p.residual = p.y - d_lsq * p.t;
    }
    let rms_residual = (kept.iter().map(|p| p.residual * p.residual).sum::<f64>() / kept.len() as f64).sqrt();
    if !(d_lsq > 0.0) {
        return Err(Error::InsufficientTailData(format!("fitted D = {d_lsq} is not positive")));
    }
    Ok(DFit {
        d_lsq,
        d_conservative,
        rms_residual,
        points: kept,
    })
}

/// Fits `D` over the `(m, delta)` grid from simulated `Gamma_m` samples.
pub fn fit_d(samples: &GammaSamples, delta_grid: &[f64], schedule: &StepSchedule, dim: usize) -> Result<DFit> {
    if delta_grid.len() < 3 {
        return Err(Error::InvalidQuery(format!(
            "fitting D needs at least 3 delta values, got {}",
            delta_grid.len()
        )));
    }
    let mut points = Vec::new();
    for (j, &m) in samples.steps.iter().enumerate() {
        let col = &samples.samples[j];
        if col.is_empty() {
            continue;
        }
        let beta = schedule.beta(samples.n0, m);
        for &delta in delta_grid {
            let p_hat = col.iter().filter(|g| **g > delta).count() as f64 / col.len() as f64;
            points.push((m, delta, p_hat, delta * delta / beta));
        }
    }
    fit_d_points(&points, dim)
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    // Linear interpolation between order statistics.
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Error quantiles across trajectories at one step.
#[derive(Debug, Clone, Serialize)]
pub struct ErrorQuantiles {
    pub m: usize,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub q90: f64,
    pub max: f64,
}

impl ErrorQuantiles {
    fn from_samples(m: usize, mut errs: Vec<f64>) -> Self {
        errs.sort_by(f64::total_cmp);
        Self {
            m,
            q25: quantile_sorted(&errs, 0.25),
            median: quantile_sorted(&errs, 0.5),
            q75: quantile_sorted(&errs, 0.75),
            q90: quantile_sorted(&errs, 0.9),
            max: *errs.last().unwrap_or(&f64::NAN),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceSummary {
    pub checkpoints: Vec<ErrorQuantiles>,
    /// Least-squares slope of `ln median` on `ln(m + 1)` over checkpoints
    /// after `n0` (harmonic schedules only).
    pub log_log_slope: Option<f64>,
}

fn summarize_convergence(checkpoints: &[usize], columns: Vec<Vec<f64>>, schedule: &StepSchedule, n0: usize) -> ConvergenceSummary {
    let checkpoints: Vec<ErrorQuantiles> = checkpoints
        .iter()
        .zip(columns)
        .map(|(&m, errs)| ErrorQuantiles::from_samples(m, errs))
        .collect();
    let log_log_slope = schedule.is_harmonic().then(|| {
        let pts: Vec<(f64, f64)> = checkpoints
            .iter()
            .filter(|c| c.m > n0 && c.median > 0.0)
            .map(|c| (((c.m + 1) as f64).ln(), c.median.ln()))
            .collect();
        if pts.len() < 2 {
            return None;
        }
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
        Some(sxy / sxx)
    }).flatten();
    ConvergenceSummary {
        checkpoints,
        log_log_slope,
    }
}

/// Median, quartiles and log-log slope of `|x_m - x*|` at the checkpoint steps.
pub fn convergence_diagnostics(
    problem: &PolicyEvalProblem,
    solution: &AnalyticSolution,
    schedule: &StepSchedule,
    config: &ExperimentConfig,
) -> Result<ConvergenceSummary> {
    if config.horizon <= config.n0 || config.n_trajectories == 0 {
        return Err(Error::InvalidConfig("need horizon > n0 and at least one trajectory".into()));
    }
    schedule.covers(config.horizon)?;
    let plan = Plan::new(problem, solution, schedule, config, false, false)?;
    let mut columns = vec![Vec::with_capacity(config.n_trajectories); plan.checkpoints.len()];
    simulate(&plan, |_, o| {
        for (col, e) in columns.iter_mut().zip(o.checkpoint_errors) {
            col.push(e);
        }
    })?;
    Ok(summarize_convergence(&plan.checkpoints, columns, schedule, config.n0))
}

/// One `(epsilon, delta)` point of the sweep.
#[derive(Debug, Clone, Serialize)]
pub struct GridResult {
    pub epsilon: f64,
    pub delta: f64,
    pub floor_term: f64,
    pub violations: u64,
    pub empirical_alltime_prob: ProportionEstimate,
    pub p_init: f64,
    pub theoretical_lower_bound: Option<f64>,
    pub tail_sum: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub empirical_alltime_prob: ProportionEstimate,
    pub empirical_p_init: ProportionEstimate,
    pub p_init_by_epsilon: Vec<PInitPoint>,
    /// `None` when no `D` was supplied and the fit failed.
    pub theoretical_lower_bound: Option<f64>,
    pub d_const_used: Option<f64>,
    pub fitted_d: Option<DFit>,
    /// Reason the fit was unavailable, if it was attempted and failed.
    pub fit_error: Option<String>,
    /// Nonzero counts only, keyed by step.
    pub per_m_violation_counts: BTreeMap<usize, u64>,
    pub grid: Vec<GridResult>,
    pub convergence: ConvergenceSummary,
    #[serde(skip)]
    pub wall_time: f64,
    #[serde(skip)]
    per_m_dense: Vec<u64>,
    #[serde(skip)]
    radius: Vec<f64>,
}

impl ExperimentResult {
    pub fn to_json(&self) -> Result<serde_json::Value> {
        serde_json::to_value(self).map_err(|e| Error::Io(e.to_string()))
    }

    /// Per-step curve: `m, radius, violations` on every step, error
    /// quantiles on checkpoint steps only.
    pub fn write_curve_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["m", "radius", "violations", "err_q25", "err_median", "err_q75", "err_q90", "err_max"])?;
        let n0 = self.config.n0;
        let mut cps = self.convergence.checkpoints.iter().peekable();
        for (k, (&count, &radius)) in self.per_m_dense.iter().zip(&self.radius).enumerate() {
            let m = n0 + k;
            let mut row = vec![m.to_string(), radius.to_string(), count.to_string()];
            match cps.peek() {
                Some(c) if c.m == m => {
                    row.extend([c.q25, c.median, c.q75, c.q90, c.max].iter().map(|v| v.to_string()));
                    cps.next();
                }
                _ => row.extend(std::iter::repeat_n(String::new(), 5)),
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// One row per `(epsilon, delta)` point.
    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "epsilon",
            "delta",
            "violations",
            "n_trajectories",
            "empirical_alltime_prob",
            "wilson_lower",
            "wilson_upper",
            "p_init",
            "theoretical_lower_bound",
            "floor_term",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for g in &self.grid {
            w.write_record([
                g.epsilon.to_string(),
                g.delta.to_string(),
                g.violations.to_string(),
                self.config.n_trajectories.to_string(),
                g.empirical_alltime_prob.estimate.to_string(),
                g.empirical_alltime_prob.lower.to_string(),
                g.empirical_alltime_prob.upper.to_string(),
                g.p_init.to_string(),
                opt(g.theoretical_lower_bound),
                g.floor_term.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Samples `Gamma_m` at the checkpoint steps after `n0`.
pub fn collect_gamma_samples(
    problem: &PolicyEvalProblem,
    solution: &AnalyticSolution,
    schedule: &StepSchedule,
    config: &ExperimentConfig,
) -> Result<GammaSamples> {
    config.validate(problem, solution, schedule)?;
    let plan = Plan::new(problem, solution, schedule, config, false, true)?;
    let steps: Vec<usize> = plan.checkpoints[1..].to_vec();
    let mut samples = vec![Vec::with_capacity(config.n_trajectories); steps.len()];
    simulate(&plan, |_, o| {
        for (col, g) in samples.iter_mut().zip(o.gamma) {
            col.push(g);
        }
    })?;
    Ok(GammaSamples {
        n0: config.n0,
        steps,
        samples,
    })
}

/// The full all-time experiment: one ensemble of trajectories, reused for
/// every `(epsilon, delta)` point, compared against the theoretical bound.
pub fn run_alltime_experiment(
    problem: &PolicyEvalProblem,
    solution: &AnalyticSolution,
    schedule: &StepSchedule,
    config: &ExperimentConfig,
) -> Result<ExperimentResult> {
    let started = Instant::now();
    config.validate(problem, solution, schedule)?;
    let plan = Plan::new(problem, solution, schedule, config, true, config.d_const.is_none())?;
    let steps = config.horizon - config.n0;
    let n = config.n_trajectories;

    let mut err_n0 = Vec::with_capacity(n);
    let mut violators = vec![0u64; plan.grid.len()];
    let mut per_m = vec![0u64; steps + 1];
    let mut columns = vec![Vec::with_capacity(n); plan.checkpoints.len()];
    let mut gamma = vec![Vec::with_capacity(if plan.collect_gamma { n } else { 0 }); plan.checkpoints.len() - 1];
    simulate(&plan, |_, o| {
        err_n0.push(o.err_n0);
        for (count, v) in violators.iter_mut().zip(&o.violated) {
            *count += u64::from(*v);
        }
        for m in o.primary_violations {
            per_m[m - config.n0] += 1;
        }
        for (col, e) in columns.iter_mut().zip(o.checkpoint_errors) {
            col.push(e);
        }
        for (col, g) in gamma.iter_mut().zip(o.gamma) {
            col.push(g);
        }
    })?;

    let epsilons = config.epsilons();
    let p_init_by_epsilon = p_init_points(&err_n0, &epsilons);
    let p_init_at = |eps: f64| {
        p_init_by_epsilon
            .iter()
            .find(|p| p.epsilon == eps)
            .map(|p| p.estimate)
            .expect("epsilon is part of the sweep")
    };

    let (fitted_d, fit_error) = if plan.collect_gamma {
        let samples = GammaSamples {
            n0: config.n0,
            steps: plan.checkpoints[1..].to_vec(),
            samples: gamma,
        };
        let deltas = match &config.fit_delta_grid {
            Some(g) => g.clone(),
            None => default_fit_grid(&samples),
        };
        match fit_d(&samples, &deltas, schedule, problem.dim()) {
            Ok(fit) => (Some(fit), None),
            Err(e) => (None, Some(e.to_string())),
        }
    } else {
        (None, None)
    };
    let d_const_used = config.d_const.or(fitted_d.as_ref().map(|f| f.d_lsq));

    let mut grid = Vec::with_capacity(plan.grid.len());
    for (g, (&(epsilon, floor_term), &violations)) in plan.grid.iter().zip(&violators).enumerate() {
        let delta = config.grid()[g].1;
        let p_init = p_init_at(epsilon).estimate;
        let (theoretical_lower_bound, tail_sum) = match d_const_used {
            Some(d) => {
                let q = BoundQuery::new(
                    epsilon,
                    delta,
                    config.n0,
                    Horizon::Finite(config.horizon),
                    d,
                    p_init,
                    PInitSource::Empirical,
                    &solution.constants,
                    schedule,
                )?;
                let t = bound_calculus::tail_probability(&q, &solution.constants, schedule)?;
                (Some(t.prob_lower_bound), Some(t.tail_sum))
            }
            None => (None, None),
        };
        grid.push(GridResult {
            epsilon,
            delta,
            floor_term,
            violations,
            empirical_alltime_prob: ProportionEstimate::wilson(n as u64 - violations, n as u64),
            p_init,
            theoretical_lower_bound,
            tail_sum,
        });
    }
    let primary = &grid[plan.primary];
    let radius = (config.n0..=config.horizon).map(|m| plan.radius(plan.primary, m)).collect();

    Ok(ExperimentResult {
        config: config.clone(),
        empirical_alltime_prob: primary.empirical_alltime_prob,
        empirical_p_init: p_init_at(config.epsilon),
        theoretical_lower_bound: primary.theoretical_lower_bound,
        p_init_by_epsilon,
        d_const_used,
        fitted_d,
        fit_error,
        per_m_violation_counts: per_m
            .iter()
            .enumerate()
            .filter(|(_, c)| **c > 0)
            .map(|(k, c)| (config.n0 + k, *c))
            .collect(),
        convergence: summarize_convergence(&plan.checkpoints, columns, schedule, config.n0),
        grid,
        wall_time: started.elapsed().as_secs_f64(),
        per_m_dense: per_m,
        radius,
    })
}
