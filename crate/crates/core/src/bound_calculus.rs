//! Closed-form evaluation of the all-time concentration bound: the radius
//! curve, the martingale tail terms, the `n0` feasibility condition, and the
//! `1/(n+1)` rate expression.

use std::io::Write;

use serde::Serialize;
use statrs::function::gamma::{gamma, gamma_ur};

use crate::analytic::ConstantsBundle;
use crate::error::{Error, Result};
use crate::schedule::StepSchedule;

/// Infinite tails stop once the certified remainder is below this fraction
/// of the running sum.
pub const SERIES_RTOL: f64 = 1e-16;
/// Hard cap on explicitly summed tail terms; the remainder beyond it is
/// added as a certified upper bound.
pub const MAX_SERIES_TERMS: usize = 50_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Horizon {
    Finite(usize),
    Infinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PInitSource {
    /// Estimated by simulation.
    Empirical,
    /// Supplied by the user as an analytic bound.
    UserBound,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct N0Check {
    pub n0: usize,
    pub feasible: bool,
    /// `1 - alpha - a(n0) c1`.
    pub margin: f64,
    /// Smallest `n0 >= max(1, valid_from)` satisfying the condition.
    pub smallest_feasible: Option<usize>,
}

/// Checks `alpha + a(n0) c1 < 1` and locates the smallest feasible `n0`.
pub fn check_n0(constants: &ConstantsBundle, schedule: &StepSchedule, n0: usize) -> Result<N0Check> {
    let feasible_at = |n: usize| -> Result<bool> {
        Ok(constants.alpha + schedule.try_a(n)? * constants.c1 < 1.0)
    };
    let margin = 1.0 - constants.alpha - schedule.try_a(n0)? * constants.c1;
    let start = schedule.valid_from().max(1);
    let last = schedule.max_index().unwrap_or(1 << 50);
    let smallest_feasible = if start > last {
        None
    } else if feasible_at(start)? {
        Some(start)
    } else {
        // Steps are non-increasing from `start`, so feasibility is monotone.
        let mut hi = start;
        let mut lo = start;
        loop {
            if hi >= last {
                hi = last;
                break;
            }
            lo = hi;
            hi = hi.saturating_mul(2).min(last);
            if feasible_at(hi)? {
                break;
            }
        }
        if !feasible_at(hi)? {
            None
        } else {
            while hi - lo > 1 {
                let mid = lo + (hi - lo) / 2;
                if feasible_at(mid)? {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            Some(hi)
        }
    };
    Ok(N0Check {
        n0,
        feasible: margin > 0.0,
        margin,
        smallest_feasible,
    })
}

/// Inputs of one bound evaluation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundQuery {
    pub epsilon: f64,
    pub delta: f64,
    pub n0: usize,
    pub horizon: Horizon,
    pub d_const: f64,
    pub p_init: f64,
    pub p_init_source: PInitSource,
}

impl BoundQuery {
    /// Validates the query against the theorem's hypotheses, including the
    /// `n0` feasibility condition.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        epsilon: f64,
        delta: f64,
        n0: usize,
        horizon: Horizon,
        d_const: f64,
        p_init: f64,
        p_init_source: PInitSource,
        constants: &ConstantsBundle,
        schedule: &StepSchedule,
    ) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            return Err(Error::InvalidQuery(format!("epsilon = {epsilon} must lie in (0, 1]")));
        }
        if !(delta > 0.0 && delta <= 1.0) {
            return Err(Error::InvalidQuery(format!("delta = {delta} must lie in (0, 1]")));
        }
        if !(d_const > 0.0 && d_const.is_finite()) {
            return Err(Error::InvalidQuery(format!("D = {d_const} must be positive")));
        }
        if !(0.0..=1.0).contains(&p_init) {
            return Err(Error::InvalidQuery(format!("p_init = {p_init} must lie in [0, 1]")));
        }
        if n0 == 0 || n0 < schedule.valid_from() {
            return Err(Error::InvalidQuery(format!(
                "n0 = {n0} must be positive and at least {} (start of the step-size assumptions)",
                schedule.valid_from()
            )));
        }
        if let Horizon::Finite(n) = horizon {
            if n < n0 {
                return Err(Error::InvalidQuery(format!("horizon {n} is below n0 {n0}")));
            }
            schedule.covers(n)?;
        }
        let check = check_n0(constants, schedule, n0)?;
        if !check.feasible {
            return Err(Error::N0Infeasible {
                n0,
                value: 1.0 - check.margin,
            });
        }
        Ok(Self {
            epsilon,
            delta,
            n0,
            horizon,
            d_const,
            p_init,
            p_init_source,
        })
    }
}

/// `(a(n0)(c2 + c1 eps) + delta) / (1 - alpha - a(n0) c1)`.
pub fn floor_term(epsilon: f64, delta: f64, a_n0: f64, constants: &ConstantsBundle) -> f64 {
    (a_n0 * (constants.c2 + constants.c1 * epsilon) + delta)
        / (1.0 - constants.alpha - a_n0 * constants.c1)
}

/// Radius `exp(-(1-alpha) b_{n0}(m-1)) eps + floor` for every
/// `m in n0..=upto`. `epsilon = 0` is accepted here and yields a flat curve.
pub fn radius_values(
    epsilon: f64,
    delta: f64,
    n0: usize,
    upto: usize,
    constants: &ConstantsBundle,
    schedule: &StepSchedule,
) -> Result<Vec<f64>> {
    schedule.covers(upto)?;
    let floor = floor_term(epsilon, delta, schedule.try_a(n0)?, constants);
    let rate = 1.0 - constants.alpha;
    let mut out = Vec::with_capacity(upto.saturating_sub(n0) + 1);
    let mut b = 0.0;
    for m in n0..=upto {
        if m > n0 {
            b += schedule.a(m - 1);
        }
        out.push((-rate * b).exp() * epsilon + floor);
    }
    Ok(out)
}

/// Radius curve of a validated query over `n0..=upto`.
pub fn radius_curve(
    query: &BoundQuery,
    constants: &ConstantsBundle,
    schedule: &StepSchedule,
    upto: usize,
) -> Result<Vec<f64>> {
    radius_values(query.epsilon, query.delta, query.n0, upto, constants, schedule)
}

/// `2d exp(-D delta^2 / omega)` when `delta <= C`, else `2d exp(-D delta / omega)`.
pub fn martingale_tail(delta: f64, branch_point: f64, d_const: f64, omega: f64, dim: usize) -> f64 {
    let power = if delta <= branch_point { delta * delta } else { delta };
    2.0 * dim as f64 * (-d_const * power / omega).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailReport {
    /// `2d sum_{m > n0} exp(-D delta^q / beta_{n0}(m))` (plus any certified remainder).
    pub tail_sum: f64,
    /// `1 - tail_sum - p_init`; negative values mean the bound is vacuous.
    pub prob_lower_bound: f64,
    pub vacuous: bool,
    /// The branch point `C` of the tail estimate.
    pub branch_point: f64,
    /// True when `delta <= C` (quadratic exponent).
    pub quadratic_branch: bool,
    /// Last explicitly summed index.
    pub last_index: usize,
    /// Certified bound on the part of the series beyond `last_index`.
    pub remainder_bound: f64,
}

/// Evaluates the probability side of the bound.
pub fn tail_probability(
    query: &BoundQuery,
    constants: &ConstantsBundle,
    schedule: &StepSchedule,
) -> Result<TailReport> {
    let (tail_sum, last_index, remainder_bound, branch_point, quadratic) =
        tail_sum(query, constants, schedule)?;
    let prob_lower_bound = 1.0 - tail_sum - query.p_init;
    Ok(TailReport {
        tail_sum,
        prob_lower_bound,
        vacuous: prob_lower_bound <= 0.0,
        branch_point,
        quadratic_branch: quadratic,
        last_index,
        remainder_bound,
    })
}

/// Per-`m` tail terms for `m in n0+1..=upto`.
pub fn tail_terms(
    query: &BoundQuery,
    constants: &ConstantsBundle,
    schedule: &StepSchedule,
    upto: usize,
) -> Result<Vec<f64>> {
    let branch_point = constants.tail_branch_point(schedule.try_a(query.n0)?);
    Ok((query.n0 + 1..=upto)
        .map(|m| {
            martingale_tail(
                query.delta,
                branch_point,
                query.d_const,
                schedule.beta(query.n0, m),
                constants.dim,
            )
        })
        .collect())
}

fn tail_sum(
    query: &BoundQuery,
    constants: &ConstantsBundle,
    schedule: &StepSchedule,
) -> Result<(f64, usize, f64, f64, bool)> {
    if !(query.d_const > 0.0) || !(query.delta > 0.0) {
        return Err(Error::SeriesDivergence(format!(
            "terms do not decay for D = {}, delta = {}",
            query.d_const, query.delta
        )));
    }
    let n0 = query.n0;
    let dim = constants.dim;
    let branch_point = constants.tail_branch_point(schedule.try_a(n0)?);
    let quadratic = query.delta <= branch_point;
    let term = |m: usize| {
        martingale_tail(query.delta, branch_point, query.d_const, schedule.beta(n0, m), dim)
    };
    match query.horizon {
        Horizon::Finite(n) => {
            let sum = (n0 + 1..=n).map(term).sum();
            Ok((sum, n, 0.0, branch_point, quadratic))
        }
        Horizon::Infinite => {
            // Every term has the form 2d exp(-c m^p) with p in (0, 1].
            let power = if quadratic { query.delta * query.delta } else { query.delta };
            let (d1, d2) = (schedule.d1(), schedule.d2());
            let (c, p) = if d1 <= d2 {
                (query.d_const * power * (n0 as f64).powf(d2 - d1), d1)
            } else {
                (query.d_const * power, d2)
            };
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::SeriesDivergence(format!("decay rate c = {c} is not positive")));
            }
            let prefactor = 2.0 * dim as f64;
            let remainder = |last: usize| -> f64 {
                let s = 1.0 / p;
                let x = c * (last as f64).powf(p);
                prefactor * gamma(s) * gamma_ur(s, x) / (p * c.powf(s))
            };
            let mut sum = 0.0;
            let mut m = n0;
            loop {
                m += 1;
                let t = term(m);
                sum += t;
                let done_candidate = t <= SERIES_RTOL * sum || t < f64::MIN_POSITIVE;
                if done_candidate || (m - n0) % 4096 == 0 || m - n0 >= MAX_SERIES_TERMS {
                    let rem = remainder(m);
                    if rem <= SERIES_RTOL * sum || rem < f64::MIN_POSITIVE {
                        return Ok((sum, m, rem, branch_point, quadratic));
                    }
                    if m - n0 >= MAX_SERIES_TERMS {
                        if !rem.is_finite() {
                            return Err(Error::SeriesDivergence(
                                "remainder bound is not finite".into(),
                            ));
                        }
                        return Ok((sum + rem, m, rem, branch_point, quadratic));
                    }
                }
            }
        }
    }
}

/// Radius curve plus probability side, ready for serialization.
#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub query: BoundQuery,
    pub n0_check: N0Check,
    pub floor_term: f64,
    /// Last `m` covered by `radius`.
    pub radius_upto: usize,
    pub radius: Vec<f64>,
    pub tail: TailReport,
}

impl BoundReport {
    /// Evaluates everything. For infinite horizons the radius is tabulated
    /// through `report_upto`.
    pub fn evaluate(
        query: &BoundQuery,
        constants: &ConstantsBundle,
        schedule: &StepSchedule,
        report_upto: usize,
    ) -> Result<Self> {
        let upto = match query.horizon {
            Horizon::Finite(n) => n,
            Horizon::Infinite => report_upto.max(query.n0),
        };
        Ok(Self {
            query: query.clone(),
            n0_check: check_n0(constants, schedule, query.n0)?,
            floor_term: floor_term(query.epsilon, query.delta, schedule.try_a(query.n0)?, constants),
            radius_upto: upto,
            radius: radius_curve(query, constants, schedule, upto)?,
            tail: tail_probability(query, constants, schedule)?,
        })
    }

    /// CSV with columns `m, radius, tail_term, cumulative_tail`.
    pub fn write_csv<W: Write>(
        &self,
        out: W,
        constants: &ConstantsBundle,
        schedule: &StepSchedule,
    ) -> Result<()> {
        let terms = tail_terms(&self.query, constants, schedule, self.radius_upto)?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["m", "radius", "tail_term", "cumulative_tail"])?;
        let mut cumulative = 0.0;
        for (k, r) in self.radius.iter().enumerate() {
            let m = self.query.n0 + k;
            let term = if k == 0 { 0.0 } else { terms[k - 1] };
            cumulative += term;
            w.write_record([
                m.to_string(),
                r.to_string(),
                term.to_string(),
                cumulative.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Shape of the rate for harmonic steps, with all hidden constants set to one:
/// `sqrt(log(1/eps1) / n0) + sqrt(log(n0) / n0) / sqrt(eps2) * (n0/m + 1/n0)`.
pub fn corollary_rate(n0: usize, m: usize, eps1: f64, eps2: f64) -> f64 {
    let n0f = n0 as f64;
    let mf = m as f64;
    (1.0 / eps1).ln().sqrt() / n0f.sqrt()
        + (n0f.ln() / n0f).sqrt() / eps2.sqrt() * (n0f / mf + 1.0 / n0f)
}

/// `max_{n0 <= k <= m} a(k) chi(m, k+1)` and `gamma2 * beta_{n0}(m)`.
pub fn step_weight_domination(schedule: &StepSchedule, n0: usize, m: usize) -> (f64, f64) {
    let mut chi = 1.0; // chi(m, m+1)
    let mut max = 0.0f64;
    for k in (n0..=m).rev() {
        max = max.max(schedule.a(k) * chi);
        chi *= 1.0 - schedule.a(k);
    }
    (max, schedule.gamma2() * schedule.beta(n0, m))
}

/// `|chi(m, n0) + sum_{k=n0}^{m} chi(m, k+1) a(k) - 1|`.
pub fn telescoping_residual(schedule: &StepSchedule, n0: usize, m: usize) -> f64 {
    let mut chi = 1.0;
    let mut sum = 0.0;
    for k in (n0..=m).rev() {
        sum += chi * schedule.a(k);
        chi *= 1.0 - schedule.a(k);
    }
    (chi + sum - 1.0).abs()
}

/// For `m in n0..=upto`, the pairs `(exp(-(1-alpha) b_{n0}(m-1)), (n0+1)/(m+1))`.
pub fn rate_domination(
    schedule: &StepSchedule,
    alpha: f64,
    n0: usize,
    upto: usize,
) -> Vec<(f64, f64)> {
    let mut b = 0.0;
    (n0..=upto)
        .map(|m| {
            if m > n0 {
                b += schedule.a(m - 1);
            }
            (
                (-(1.0 - alpha) * b).exp(),
                (n0 + 1) as f64 / (m + 1) as f64,
            )
        })
        .collect()
}
