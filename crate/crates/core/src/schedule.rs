//! Step-size sequences and the partial-sum / product calculus built on them.
//!
//! A schedule carries its envelope constants `(d1, d2, d3)`:
//! `d1/(n+1) <= a(n) <= d3/(n+1)^d2`, together with `a(n) < 1` and
//! non-increase. The constraints are enforced from `valid_from` on
//! (zero by default).

use serde::Serialize;

use crate::error::{Error, Result};

/// Number of factors above which products switch to log-space.
pub const LOG_SPACE_THRESHOLD: usize = 10_000;

/// Default grid on which analytic schedules are validated.
pub const DEFAULT_CHECK_HORIZON: usize = 1_000_000;

const ENVELOPE_RTOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `a(n) = d1 / (n + 1)`.
    Harmonic,
    /// `a(n) = d3 / (n + 1)^d2`.
    Polynomial,
    /// Explicit values `a(0), a(1), ...`.
    Table { values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepSchedule {
    #[serde(flatten)]
    kind: ScheduleKind,
    d1: f64,
    d2: f64,
    d3: f64,
    valid_from: usize,
}

impl StepSchedule {
    /// `a(n) = d1/(n+1)`, with envelope `(d1, 1, d1)`.
    pub fn harmonic(d1: f64) -> Result<Self> {
        Self::new(ScheduleKind::Harmonic, d1, 1.0, d1, 0)
    }

    /// `a(n) = d3/(n+1)^d2`, with envelope `(d3, d2, d3)`.
    pub fn polynomial(d3: f64, d2: f64) -> Result<Self> {
        Self::new(ScheduleKind::Polynomial, d3, d2, d3, 0)
    }

    pub fn table(values: Vec<f64>, d1: f64, d2: f64, d3: f64) -> Result<Self> {
        Self::new(ScheduleKind::Table { values }, d1, d2, d3, 0)
    }

    /// General constructor. Validation covers `valid_from..=` the table end,
    /// or up to [`DEFAULT_CHECK_HORIZON`] for the analytic kinds.
    pub fn new(kind: ScheduleKind, d1: f64, d2: f64, d3: f64, valid_from: usize) -> Result<Self> {
        if !(d1 > 0.0 && d1.is_finite()) {
            return Err(Error::InvalidSchedule(format!("d1 = {d1} must be positive")));
        }
        if !(d2 > 0.0 && d2 <= 1.0) {
            return Err(Error::InvalidSchedule(format!("d2 = {d2} must lie in (0, 1]")));
        }
        if !(d3 > 0.0 && d3.is_finite()) {
            return Err(Error::InvalidSchedule(format!("d3 = {d3} must be positive")));
        }
        let schedule = Self {
            kind,
            d1,
            d2,
            d3,
            valid_from,
        };
        let end = match &schedule.kind {
            ScheduleKind::Table { values } => {
                if values.is_empty() {
                    return Err(Error::InvalidSchedule("step table is empty".into()));
                }
                values.len() - 1
            }
            _ => DEFAULT_CHECK_HORIZON,
        };
        schedule.validate_range(valid_from, end)?;
        Ok(schedule)
    }

    /// Same schedule with constraints enforced only from `n >= valid_from`.
    pub fn with_valid_from(self, valid_from: usize) -> Result<Self> {
        Self::new(self.kind, self.d1, self.d2, self.d3, valid_from)
    }

    fn validate_range(&self, start: usize, end: usize) -> Result<()> {
        let mut prev = f64::INFINITY;
        for n in start..=end {
            let a = self.raw(n);
            let t = (n + 1) as f64;
            if !a.is_finite() {
                return Err(Error::InvalidSchedule(format!("a({n}) = {a} is not finite")));
            }
            if a >= 1.0 {
                return Err(Error::InvalidSchedule(format!(
                    "a({n}) = {a} violates a(n) < 1"
                )));
            }
            if a > prev {
                return Err(Error::InvalidSchedule(format!(
                    "a({n}) = {a} exceeds a({}) = {prev}; steps must be non-increasing",
                    n - 1
                )));
            }
            let lower = self.d1 / t;
            let upper = self.d3 / t.powf(self.d2);
            if a < lower * (1.0 - ENVELOPE_RTOL) || a > upper * (1.0 + ENVELOPE_RTOL) {
                return Err(Error::InvalidSchedule(format!(
                    "a({n}) = {a} is outside the envelope [{lower}, {upper}]"
                )));
            }
            prev = a;
        }
        Ok(())
    }

    fn raw(&self, n: usize) -> f64 {
        match &self.kind {
            ScheduleKind::Harmonic => self.d1 / (n + 1) as f64,
            ScheduleKind::Polynomial => self.d3 / ((n + 1) as f64).powf(self.d2),
            ScheduleKind::Table { values } => values[n],
        }
    }

    pub fn kind(&self) -> &ScheduleKind {
        &self.kind
    }
    pub fn d1(&self) -> f64 {
        self.d1
    }
    pub fn d2(&self) -> f64 {
        self.d2
    }
    pub fn d3(&self) -> f64 {
        self.d3
    }
    pub fn valid_from(&self) -> usize {
        self.valid_from
    }

    pub fn is_harmonic(&self) -> bool {
        matches!(self.kind, ScheduleKind::Harmonic)
    }

    /// Largest index the schedule can evaluate.
    pub fn max_index(&self) -> Option<usize> {
        match &self.kind {
            ScheduleKind::Table { values } => Some(values.len() - 1),
            _ => None,
        }
    }

    /// Errors when `n` lies beyond a tabulated schedule.
    pub fn covers(&self, n: usize) -> Result<()> {
        match self.max_index() {
            Some(max) if n > max => Err(Error::ScheduleOutOfRange {
                index: n,
                len: max + 1,
            }),
            _ => Ok(()),
        }
    }

    pub fn try_a(&self, n: usize) -> Result<f64> {
        self.covers(n)?;
        Ok(self.raw(n))
    }

    /// Step size at `n`.
    ///
    /// # Panics
    /// For tabulated schedules when `n` is past the table; check with
    /// [`Self::covers`] first.
    pub fn a(&self, n: usize) -> f64 {
        self.try_a(n).unwrap_or_else(|e| panic!("{e}"))
    }

    /// `b_k(n) = sum_{m=k}^{n} a(m)`; zero when `n < k`.
    pub fn b(&self, k: usize, n: i64) -> f64 {
        if n < k as i64 {
            return 0.0;
        }
        (k..=n as usize).map(|m| self.a(m)).sum()
    }

    /// `beta_k(n)` for this schedule's `(d1, d2)`.
    pub fn beta(&self, k: usize, n: usize) -> f64 {
        beta(k, n, self.d1, self.d2)
    }

    /// `chi(n, m) = prod_{k=m}^{n} (1 - a(k))`; one when `n < m`.
    pub fn chi(&self, n: usize, m: usize) -> f64 {
        if n < m {
            return 1.0;
        }
        product((m..=n).map(|k| 1.0 - self.a(k)), n - m + 1)
    }

    /// `psi(n, m) = prod_{k=m}^{n-1} (1 - (1 - alpha) a(k))`; one when `n <= m`.
    pub fn psi(&self, n: usize, m: usize, alpha: f64) -> f64 {
        if n <= m {
            return 1.0;
        }
        product((m..n).map(|k| 1.0 - (1.0 - alpha) * self.a(k)), n - m)
    }

    /// `gamma2 = d3 * 2^d1`.
    pub fn gamma2(&self) -> f64 {
        self.d3 * 2f64.powf(self.d1)
    }
}

fn product(factors: impl Iterator<Item = f64>, count: usize) -> f64 {
    if count <= LOG_SPACE_THRESHOLD {
        return factors.product();
    }
    let mut log_sum = 0.0;
    let mut sign = 1.0;
    for f in factors {
        if f == 0.0 {
            return 0.0;
        }
        if f < 0.0 {
            sign = -sign;
        }
        log_sum += f.abs().ln();
    }
    sign * log_sum.exp()
}

/// `beta_k(n) = 1 / (k^(d2-d1) n^d1)` when `d1 <= d2`, else `1 / n^d2`.
pub fn beta(k: usize, n: usize, d1: f64, d2: f64) -> f64 {
    let (k, n) = (k as f64, n as f64);
    if d1 <= d2 {
        1.0 / (k.powf(d2 - d1) * n.powf(d1))
    } else {
        1.0 / n.powf(d2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn constant(a: f64, len: usize) -> StepSchedule {
        // A constant table sits inside the envelope (a, 1e-9, 1) for short horizons:
        // a/(n+1) <= a <= 1/(n+1)^1e-9.
        StepSchedule::table(vec![a; len], a, 1e-9, 1.0).unwrap()
    }

    #[test]
    fn strict_bound_at_zero() {
        assert!(StepSchedule::harmonic(1.0).is_err());
        assert!(StepSchedule::harmonic(0.999).is_ok());
    }

    #[test]
    fn evaluations() {
        assert_abs_diff_eq!(StepSchedule::harmonic(0.5).unwrap().a(1), 0.25);
        assert_abs_diff_eq!(StepSchedule::polynomial(0.9, 0.5).unwrap().a(3), 0.45, epsilon = 1e-15);
    }

    #[test]
    fn partial_sums() {
        let h = StepSchedule::harmonic(0.99).unwrap();
        assert_eq!(h.b(5, 4), 0.0);
        assert_eq!(h.b(0, -1), 0.0);
        let b = h.b(2, 4) / 0.99;
        assert_abs_diff_eq!(b, 47.0 / 60.0, epsilon = 1e-14);
        for n in 3..50 {
            assert_abs_diff_eq!(h.b(3, n + 1), h.b(3, n) + h.a(n as usize + 1), epsilon = 1e-14);
        }
    }

    #[test]
    fn beta_cases() {
        assert_abs_diff_eq!(beta(4, 100, 0.5, 1.0), 0.05, epsilon = 1e-15);
        assert_abs_diff_eq!(beta(7, 13, 1.0, 1.0), 1.0 / 13.0, epsilon = 1e-15);
        assert_abs_diff_eq!(beta(3, 10, 2.0, 1.0), 0.1, epsilon = 1e-15);
    }

    #[test]
    fn chi_psi_products() {
        let c = constant(0.1, 10);
        assert_eq!(c.chi(1, 2), 1.0);
        assert_abs_diff_eq!(c.chi(4, 2), 0.729, epsilon = 1e-15);
        assert_eq!(c.psi(2, 2, 0.5), 1.0);
        assert_abs_diff_eq!(c.psi(3, 1, 0.5), 0.9025, epsilon = 1e-15);
    }

    #[test]
    fn psi_below_exponential() {
        let h = StepSchedule::harmonic(0.9).unwrap();
        for (n, m) in [(10, 1), (100, 5), (20_000, 3)] {
            let bound = (-(0.3) * h.b(m, n as i64 - 1)).exp();
            assert!(h.psi(n, m, 0.7) <= bound * (1.0 + 1e-12));
        }
    }

    #[test]
    fn log_space_matches_direct() {
        let h = StepSchedule::harmonic(0.9).unwrap();
        let direct: f64 = (5..=20_005).map(|k| 1.0 - h.a(k)).product();
        assert_abs_diff_eq!(h.chi(20_005, 5), direct, epsilon = 1e-12);
    }

    #[test]
    fn validation_rejects_bad_tables() {
        assert!(StepSchedule::table(vec![0.1, 0.2], 0.1, 1e-9, 1.0).is_err());
        assert!(StepSchedule::table(vec![0.5, 0.01], 0.1, 1.0, 1.0).is_err());
        assert!(StepSchedule::table(vec![], 0.1, 1.0, 1.0).is_err());
        let t = constant(0.1, 3);
        assert!(t.try_a(3).is_err());
        assert!(matches!(t.covers(10), Err(Error::ScheduleOutOfRange { .. })));
    }

    #[test]
    fn polynomial_envelope_violation() {
        // d1 > d3 breaks the lower envelope at n = 0.
        assert!(StepSchedule::new(ScheduleKind::Polynomial, 0.95, 0.5, 0.9, 0).is_err());
        assert!(StepSchedule::new(ScheduleKind::Harmonic, 0.5, 1.0, 0.4, 0).is_err());
    }

    #[test]
    fn late_validation_for_large_d1() {
        let h = StepSchedule::new(ScheduleKind::Harmonic, 3.0, 1.0, 3.0, 0);
        assert!(h.is_err());
        let h = StepSchedule::new(ScheduleKind::Harmonic, 3.0, 1.0, 3.0, 3).unwrap();
        assert_abs_diff_eq!(h.a(3), 0.75);
        assert!(StepSchedule::new(ScheduleKind::Harmonic, 3.0, 1.0, 3.0, 2).is_err());
    }

    #[test]
    fn telescoping_identity() {
        let h = StepSchedule::harmonic(0.8).unwrap();
        for m in [10usize, 100, 300] {
            for k in 1..=m {
                let lhs = h.chi(m, k) + h.chi(m, k + 1) * h.a(k);
                assert_abs_diff_eq!(lhs, h.chi(m, k + 1), epsilon = 1e-14);
            }
        }
    }
}
