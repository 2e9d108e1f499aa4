//! Decreasing step sequences for the ergodic estimator.
//!
//! The power-law family `γ_k = γ₀ k^(−θ)` is the supported schedule; an
//! arbitrary finite sequence can be supplied through [`StepSchedule::custom`],
//! which checks the usual step conditions numerically:
//!
//! 1. `γ_k > 0`,
//! 2. `γ_k` nonincreasing and tending to zero,
//! 3. `Γ_k = Σ_{j≤k} γ_j` diverging,
//! 4. `Σ γ_k² / Γ_k` converging.
//!
//! Conditions 3 and 4 can only be judged heuristically on a finite prefix; see
//! [`StepSchedule::custom`] for the thresholds.
//!
//! Partial sums `Γ_M^{[r]} = Σ_{k≤M} γ_k^r` are accumulated with Neumaier
//! compensated summation and cached per power `r`.

use std::sync::Arc;

use parking_lot::RwLock;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("step index must be at least 1")]
    ZeroIndex,
    #[error("theta must lie in (0,1), got {0}")]
    InvalidTheta(f64),
    #[error("gamma0 must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("inner-length scale M1 must be positive and finite, got {0}")]
    InvalidInnerScale(f64),
    #[error("slow step count n must be at least 1")]
    ZeroSlowSteps,
    #[error("chain length must be at least 1")]
    ZeroLength,
    #[error("power r must be positive and finite, got {0}")]
    InvalidPower(f64),
    #[error("custom schedule has {available} steps but {requested} were requested")]
    TooShort { available: usize, requested: usize },
    #[error("custom schedule violates step condition ({condition}): {detail}")]
    Condition {
        condition: &'static str,
        detail: String,
    },
}

/// Running Neumaier sum.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub(crate) fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.compensation += (self.sum - t) + value;
        } else {
            self.compensation += (value - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

#[derive(Debug, Clone)]
enum StepKind {
    PowerLaw { gamma0: f64, theta: f64 },
    Custom(Arc<[f64]>),
}

#[derive(Debug, Clone)]
struct SumCache {
    power: f64,
    acc: CompensatedSum,
    /// `values[m - 1] = Γ_m^{[power]}`
    values: Vec<f64>,
}

/// A decreasing step sequence with cached generalized partial sums.
///
/// Queries take `&self`. The cache sits behind a read-write lock: reads of an
/// already-cached prefix only take the shared lock, growth takes it exclusively.
/// Warm the cache with [`StepSchedule::table`] or [`StepSchedule::gamma_sum`]
/// before fanning out to workers.
#[derive(Debug)]
pub struct StepSchedule {
    kind: StepKind,
    cache: RwLock<Vec<SumCache>>,
}

impl Clone for StepSchedule {
    fn clone(&self) -> Self {
        StepSchedule {
            kind: self.kind.clone(),
            cache: RwLock::new(self.cache.read().clone()),
        }
    }
}

impl StepSchedule {
    /// `γ_k = gamma0 · k^(−theta)`.
    pub fn power_law(gamma0: f64, theta: f64) -> Result<Self, ScheduleError> {
        if !(theta > 0.0 && theta < 1.0) {
            return Err(ScheduleError::InvalidTheta(theta));
        }
        if !(gamma0 > 0.0 && gamma0.is_finite()) {
            return Err(ScheduleError::InvalidScale(gamma0));
        }
        Ok(Self::from_kind(StepKind::PowerLaw { gamma0, theta }))
    }

    /// Wraps a user-provided finite step sequence (`steps[0] = γ_1`).
    ///
    /// Conditions 1 and 2 are checked exactly. Divergence of `Γ` is accepted
    /// when the second half of the sequence adds at least 2% to `Γ_{L/2}`;
    /// convergence of `Σ γ_k²/Γ_k` is accepted when its second half adds less
    /// than 5% of the total. At least 16 steps are required for either check
    /// to mean anything.
    pub fn custom(steps: Vec<f64>) -> Result<Self, ScheduleError> {
        const MIN_LEN: usize = 16;
        const MIN_TAIL_MASS: f64 = 0.02;
        const MAX_PLATEAU_DRIFT: f64 = 0.05;

        if steps.len() < MIN_LEN {
            return Err(ScheduleError::Condition {
                condition: "length",
                detail: format!("need at least {MIN_LEN} steps, got {}", steps.len()),
            });
        }
        if let Some((i, v)) = steps
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v > 0.0 && v.is_finite()))
        {
            return Err(ScheduleError::Condition {
                condition: "i, positivity",
                detail: format!("gamma_{} = {v}", i + 1),
            });
        }
        if let Some(i) = steps.windows(2).position(|w| w[1] > w[0]) {
            return Err(ScheduleError::Condition {
                condition: "ii, decreasing",
                detail: format!("gamma_{} < gamma_{}", i + 1, i + 2),
            });
        }
        if steps[steps.len() - 1] >= steps[0] {
            return Err(ScheduleError::Condition {
                condition: "ii, vanishing",
                detail: "sequence is constant".into(),
            });
        }

        let half = steps.len() / 2;
        let mut gamma = CompensatedSum::default();
        let mut series = CompensatedSum::default();
        let (mut gamma_half, mut series_half) = (0.0, 0.0);
        for (i, &g) in steps.iter().enumerate() {
            gamma.add(g);
            series.add(g * g / gamma.value());
            if i + 1 == half {
                gamma_half = gamma.value();
                series_half = series.value();
            }
        }
        let tail_mass = (gamma.value() - gamma_half) / gamma_half;
        if tail_mass < MIN_TAIL_MASS {
            return Err(ScheduleError::Condition {
                condition: "iii, divergent sum",
                detail: format!("second half adds only {:.3}% to Gamma", 100.0 * tail_mass),
            });
        }
        let drift = (series.value() - series_half) / series.value();
        if drift >= MAX_PLATEAU_DRIFT {
            return Err(ScheduleError::Condition {
                condition: "iv, summable gamma^2/Gamma",
                detail: format!("partial sums still moving by {:.3}%", 100.0 * drift),
            });
        }
        Ok(Self::from_kind(StepKind::Custom(steps.into())))
    }

    fn from_kind(kind: StepKind) -> Self {
        StepSchedule {
            kind,
            cache: RwLock::new(Vec::new()),
        }
    }

    /// Exponent of the power law, `None` for custom sequences.
    pub fn theta(&self) -> Option<f64> {
        match self.kind {
            StepKind::PowerLaw { theta, .. } => Some(theta),
            StepKind::Custom(_) => None,
        }
    }

    /// First step `γ_1`.
    pub fn gamma0(&self) -> f64 {
        match &self.kind {
            StepKind::PowerLaw { gamma0, .. } => *gamma0,
            StepKind::Custom(steps) => steps[0],
        }
    }

    /// Number of available steps, `None` when unbounded.
    pub fn len_limit(&self) -> Option<usize> {
        match &self.kind {
            StepKind::PowerLaw { .. } => None,
            StepKind::Custom(steps) => Some(steps.len()),
        }
    }

    pub fn gamma(&self, k: usize) -> Result<f64, ScheduleError> {
        if k == 0 {
            return Err(ScheduleError::ZeroIndex);
        }
        match &self.kind {
            StepKind::PowerLaw { gamma0, theta } => Ok(gamma0 * (k as f64).powf(-theta)),
            StepKind::Custom(steps) => {
                steps
                    .get(k - 1)
                    .copied()
                    .ok_or(ScheduleError::TooShort {
                        available: steps.len(),
                        requested: k,
                    })
            }
        }
    }

    fn gamma_pow(&self, k: usize, r: f64) -> Result<f64, ScheduleError> {
        let g = self.gamma(k)?;
        Ok(if r == 1.0 {
            g
        } else if r == 2.0 {
            g * g
        } else {
            g.powf(r)
        })
    }

    fn check_request(&self, m: usize, r: f64) -> Result<(), ScheduleError> {
        if m == 0 {
            return Err(ScheduleError::ZeroLength);
        }
        if !(r > 0.0 && r.is_finite()) {
            return Err(ScheduleError::InvalidPower(r));
        }
        if let Some(available) = self.len_limit() {
            if m > available {
                return Err(ScheduleError::TooShort {
                    available,
                    requested: m,
                });
            }
        }
        Ok(())
    }

    /// `Γ_M^{[r]} = Σ_{k=1..M} γ_k^r`, served from the cache when possible.
    pub fn gamma_sum(&self, m: usize, r: f64) -> Result<f64, ScheduleError> {
        self.check_request(m, r)?;
        {
            let cache = self.cache.read();
            if let Some(entry) = cache.iter().find(|c| c.power == r) {
                if let Some(v) = entry.values.get(m - 1) {
                    return Ok(*v);
                }
            }
        }
        let mut cache = self.cache.write();
        let idx = match cache.iter().position(|c| c.power == r) {
            Some(idx) => idx,
            None => {
                cache.push(SumCache {
                    power: r,
                    acc: CompensatedSum::default(),
                    values: Vec::new(),
                });
                cache.len() - 1
            }
        };
        let entry = &mut cache[idx];
        entry.values.reserve(m.saturating_sub(entry.values.len()));
        for k in entry.values.len() + 1..=m {
            entry.acc.add(self.gamma_pow(k, r)?);
            entry.values.push(entry.acc.value());
        }
        Ok(entry.values[m - 1])
    }

    /// The same compensated sum as [`gamma_sum`](Self::gamma_sum), recomputed
    /// from scratch without touching the cache.
    pub fn uncached_gamma_sum(&self, m: usize, r: f64) -> Result<f64, ScheduleError> {
        self.check_request(m, r)?;
        let mut acc = CompensatedSum::default();
        for k in 1..=m {
            acc.add(self.gamma_pow(k, r)?);
        }
        Ok(acc.value())
    }

    /// Precomputes `γ_k`, `√γ_k` and the recursive weights `γ_k/Γ_k` for
    /// `k = 1..=m`.
    pub fn table(&self, m: usize) -> Result<StepTable, ScheduleError> {
        self.gamma_sum(m, 1.0)?;
        let cache = self.cache.read();
        let partial = &cache
            .iter()
            .find(|c| c.power == 1.0)
            .expect("cache populated above")
            .values[..m];
        let mut steps = Vec::with_capacity(m);
        let mut sqrt_steps = Vec::with_capacity(m);
        let mut weights = Vec::with_capacity(m);
        for (k, big_gamma) in (1..=m).zip(partial) {
            let g = self.gamma(k)?;
            steps.push(g);
            sqrt_steps.push(g.sqrt());
            weights.push(g / big_gamma);
        }
        Ok(StepTable {
            steps: steps.into(),
            sqrt_steps: sqrt_steps.into(),
            weights: weights.into(),
            total: partial[m - 1],
        })
    }
}

/// Read-only per-step quantities for a chain of fixed length.
#[derive(Debug, Clone)]
pub struct StepTable {
    steps: Arc<[f64]>,
    sqrt_steps: Arc<[f64]>,
    weights: Arc<[f64]>,
    total: f64,
}

impl StepTable {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `γ_1..γ_M`
    pub fn steps(&self) -> &[f64] {
        &self.steps
    }

    pub fn sqrt_steps(&self) -> &[f64] {
        &self.sqrt_steps
    }

    /// `γ_k/Γ_k`; the first weight is exactly 1.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `Γ_M`
    pub fn total(&self) -> f64 {
        self.total
    }
}

/// `M(n) = ⌈M₁ · n^{1/(1−θ)}⌉`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerLengthSchedule {
    m1: f64,
    theta: f64,
}

impl InnerLengthSchedule {
    pub fn new(m1: f64, theta: f64) -> Result<Self, ScheduleError> {
        if !(theta > 0.0 && theta < 1.0) {
            return Err(ScheduleError::InvalidTheta(theta));
        }
        if !(m1 > 0.0 && m1.is_finite()) {
            return Err(ScheduleError::InvalidInnerScale(m1));
        }
        Ok(InnerLengthSchedule { m1, theta })
    }

    pub fn m1(&self) -> f64 {
        self.m1
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn inner_length(&self, n: usize) -> Result<usize, ScheduleError> {
        if n == 0 {
            return Err(ScheduleError::ZeroSlowSteps);
        }
        let raw = self.m1 * (n as f64).powf(1.0 / (1.0 - self.theta));
        // powf can land one ulp above an exact integer (10·100^1.5).
        let nearest = raw.round();
        let value = if (raw - nearest).abs() <= 1e-9 * nearest.max(1.0) {
            nearest
        } else {
            raw.ceil()
        };
        Ok((value as usize).max(1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_examples() {
        let s = StepSchedule::power_law(1.0, 1.0 / 3.0).unwrap();
        assert_eq!(s.gamma(1).unwrap(), 1.0);
        assert!((s.gamma(8).unwrap() - 0.5).abs() < 1e-15);
        let s = StepSchedule::power_law(2.0, 0.5).unwrap();
        assert_eq!(s.gamma(4).unwrap(), 1.0);
        assert_eq!(s.gamma(0), Err(ScheduleError::ZeroIndex));
    }

    #[test]
    fn gamma_sum_examples() {
        let s = StepSchedule::power_law(1.0, 0.5).unwrap();
        let direct = 1.0 + 0.5f64.sqrt() + (1.0f64 / 3.0).sqrt();
        assert!((s.gamma_sum(3, 1.0).unwrap() - 2.28446).abs() < 1e-5);
        assert!((s.gamma_sum(3, 1.0).unwrap() - direct).abs() < 1e-15);
        assert!((s.gamma_sum(3, 2.0).unwrap() - 1.83333).abs() < 1e-5);
        let s = StepSchedule::power_law(0.7, 0.2).unwrap();
        assert_eq!(s.gamma_sum(1, 1.0).unwrap(), 0.7);
    }

    #[test]
    fn inner_length_examples() {
        let sched = InnerLengthSchedule::new(10.0, 1.0 / 3.0).unwrap();
        assert_eq!(sched.inner_length(100).unwrap(), 10_000);
        assert_eq!(sched.inner_length(50).unwrap(), 3536);
        let sched = InnerLengthSchedule::new(1.0, 0.5).unwrap();
        assert_eq!(sched.inner_length(1).unwrap(), 1);
        assert_eq!(sched.inner_length(0), Err(ScheduleError::ZeroSlowSteps));
    }

    #[test]
    fn inner_length_nondecreasing() {
        let sched = InnerLengthSchedule::new(0.37, 0.2).unwrap();
        let mut prev = 0;
        for n in 1..2000 {
            let m = sched.inner_length(n).unwrap();
            assert!(m >= prev.max(1));
            prev = m;
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(StepSchedule::power_law(1.0, 1.0).is_err());
        assert!(StepSchedule::power_law(1.0, 0.0).is_err());
        assert!(StepSchedule::power_law(-1.0, 0.5).is_err());
        assert!(InnerLengthSchedule::new(0.0, 0.5).is_err());
    }

    #[test]
    fn cached_sum_matches_fresh_sum_bitwise() {
        let s = StepSchedule::power_law(1.3, 1.0 / 3.0).unwrap();
        for &r in &[1.0, 2.0, 1.5, 3.0] {
            // grow the cache in uneven increments
            for &m in &[7usize, 1000, 999, 54_321, 100_000] {
                let cached = s.gamma_sum(m, r).unwrap();
                let fresh = s.uncached_gamma_sum(m, r).unwrap();
                assert_eq!(cached.to_bits(), fresh.to_bits(), "m={m} r={r}");
            }
        }
    }

    #[test]
    fn gamma_sum_asymptotics() {
        // Γ_M ~ γ₀ M^(1−θ)/(1−θ)
        for &theta in &[0.2, 1.0 / 3.0, 0.5] {
            let s = StepSchedule::power_law(1.0, theta).unwrap();
            let m = 1_000_000usize;
            let ratio = s.gamma_sum(m, 1.0).unwrap() / ((m as f64).powf(1.0 - theta) / (1.0 - theta));
            assert!((ratio - 1.0).abs() < 0.02, "theta={theta} ratio={ratio}");
        }
    }

    #[test]
    fn summable_series_plateaus() {
        let s = StepSchedule::power_law(1.0, 1.0 / 3.0).unwrap();
        let series = |m: usize| {
            let mut acc = CompensatedSum::default();
            for k in 1..=m {
                let g = s.gamma(k).unwrap();
                acc.add(g * g / s.gamma_sum(k, 1.0).unwrap());
            }
            acc.value()
        };
        let (a, b) = (series(100_000), series(1_000_000));
        assert!((b - a) / b < 0.01, "{a} {b}");
    }

    #[test]
    fn higher_powers_are_smaller_when_steps_below_one() {
        let s = StepSchedule::power_law(0.9, 0.4).unwrap();
        for &m in &[1usize, 10, 1000] {
            let g1 = s.gamma_sum(m, 1.0).unwrap();
            let g2 = s.gamma_sum(m, 2.0).unwrap();
            let g3 = s.gamma_sum(m, 3.0).unwrap();
            assert!(g3 <= g2 && g2 <= g1);
        }
    }

    #[test]
    fn table_weights() {
        let s = StepSchedule::power_law(1.0, 1.0 / 3.0).unwrap();
        let t = s.table(500).unwrap();
        assert_eq!(t.len(), 500);
        assert_eq!(t.weights()[0], 1.0);
        assert_eq!(t.total(), s.gamma_sum(500, 1.0).unwrap());
        for w in t.weights().windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn custom_schedule_accepts_power_law_prefix() {
        let steps: Vec<f64> = (1..=200_000).map(|k| (k as f64).powf(-0.4)).collect();
        let s = StepSchedule::custom(steps).unwrap();
        assert_eq!(s.gamma(2).unwrap(), 2f64.powf(-0.4));
        assert_eq!(
            s.gamma(200_001),
            Err(ScheduleError::TooShort {
                available: 200_000,
                requested: 200_001
            })
        );
        assert!(s.table(200_001).is_err());
    }

    #[test]
    fn custom_schedule_rejections() {
        let increasing: Vec<f64> = (1..=100).map(|k| k as f64).collect();
        assert!(matches!(
            StepSchedule::custom(increasing),
            Err(ScheduleError::Condition { condition: "ii, decreasing", .. })
        ));
        let constant = vec![0.1; 100];
        assert!(StepSchedule::custom(constant).is_err());
        let summable: Vec<f64> = (1..=10_000).map(|k| (k as f64).powi(-2)).collect();
        assert!(matches!(
            StepSchedule::custom(summable),
            Err(ScheduleError::Condition { condition: "iii, divergent sum", .. })
        ));
        let negative: Vec<f64> = (1..=100).map(|k| 1.0 - k as f64 / 50.0).collect();
        assert!(StepSchedule::custom(negative).is_err());
    }
}
