//! Monte Carlo studies: strong convergence, rescaled-error samples,
//! efficiency, and option pricing.
//!
//! Paths are simulated in parallel on a private rayon pool and collected in
//! path order, so every reported number depends only on the seed.

use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::cholesky::FailurePolicy;
use crate::estimator::{ErgodicEstimator, EstimatorConfig, EstimatorError, ExtrapolationTarget, Variant};
use crate::model::{heston_full_system, heston_model, HestonParams, ModelError, MultiscaleModel};
use crate::schedule::{InnerLengthSchedule, ScheduleError, StepSchedule};
use crate::solver::{
    coupled_path, euler_baseline_path, msds_path, Coefficients, PathKey, SlowGrid, SolverError,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid study: {0}")]
    InvalidStudy(String),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("{failed} of {paths} paths failed (budget {budget}); first failure: {first}")]
    FailureBudget {
        failed: usize,
        paths: usize,
        budget: usize,
        first: SolverError,
    },
    #[error("{diverged} of {paths} paths diverged (more than 1%)")]
    TooManyDiverged { diverged: usize, paths: usize },
    #[error("cannot build worker pool: {0}")]
    Pool(String),
}

/// Inner chain length per slow step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InnerLength {
    /// `⌈M₁ n^{1/(1−θ)}⌉`
    Rule(InnerLengthSchedule),
    /// The same `M` for every `n`.
    Fixed(usize),
}

impl InnerLength {
    pub fn length(&self, n: usize) -> Result<usize, ScheduleError> {
        match self {
            InnerLength::Rule(rule) => rule.inner_length(n),
            InnerLength::Fixed(0) => Err(ScheduleError::ZeroLength),
            InnerLength::Fixed(m) => Ok(*m),
        }
    }
}

/// Everything needed to build the per-`n` ergodic estimator.
#[derive(Debug, Clone)]
pub struct MethodConfig {
    pub schedule: StepSchedule,
    pub inner: InnerLength,
    pub variant: Variant,
    pub varsigma: u32,
    pub warm_start: bool,
    pub cholesky_policy: FailurePolicy,
    pub extrapolation_target: ExtrapolationTarget,
}

impl MethodConfig {
    /// Power-law steps `γ₀k^{−θ}` with `M(n) = ⌈M₁ n^{1/(1−θ)}⌉`.
    pub fn power_law(gamma0: f64, theta: f64, m1: f64) -> Result<Self, ScheduleError> {
        Ok(MethodConfig {
            schedule: StepSchedule::power_law(gamma0, theta)?,
            inner: InnerLength::Rule(InnerLengthSchedule::new(m1, theta)?),
            variant: Variant::Plain,
            varsigma: 4,
            warm_start: false,
            cholesky_policy: FailurePolicy::Repair,
            extrapolation_target: ExtrapolationTarget::Covariance,
        })
    }

    pub fn extrapolated(mut self, lambda: f64) -> Self {
        self.variant = Variant::Extrapolated { lambda };
        self
    }

    pub fn with_fixed_length(mut self, m: usize) -> Self {
        self.inner = InnerLength::Fixed(m);
        self
    }

    pub fn estimator(&self, n: usize) -> Result<ErgodicEstimator, ExperimentError> {
        let config = EstimatorConfig {
            schedule: self.schedule.clone(),
            chain_length: self.inner.length(n)?,
            variant: self.variant,
            varsigma: self.varsigma,
            warm_start: self.warm_start,
            cholesky_policy: self.cholesky_policy,
            extrapolation_target: self.extrapolation_target,
        };
        Ok(ErgodicEstimator::new(config)?)
    }
}

/// Runs `f(0..paths)` on `workers` threads (all cores when `None`), returning
/// results in path order.
pub fn parallel_paths<T, F>(paths: usize, workers: Option<usize>, f: F) -> Result<Vec<T>, ExperimentError>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        if w == 0 {
            return Err(ExperimentError::InvalidStudy("workers must be at least 1".into()));
        }
        builder = builder.num_threads(w);
    }
    let pool = builder.build().map_err(|e| ExperimentError::Pool(e.to_string()))?;
    Ok(pool.install(|| (0..paths as u64).into_par_iter().map(&f).collect()))
}

/// Splits results into successes and enforces the failure budget.
fn within_budget<T>(
    results: Vec<Result<T, SolverError>>,
    budget: usize,
) -> Result<Vec<T>, ExperimentError> {
    let paths = results.len();
    let mut ok = Vec::with_capacity(paths);
    let mut failed = 0;
    let mut first = None;
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => {
                failed += 1;
                first.get_or_insert(e);
            }
        }
    }
    match first {
        Some(first) if failed > budget => Err(ExperimentError::FailureBudget {
            failed,
            paths,
            budget,
            first,
        }),
        _ => Ok(ok),
    }
}

#[derive(Debug, Clone)]
pub struct ConvergenceStudy {
    pub n_grid: Vec<usize>,
    pub paths: usize,
    /// `(n_min, paths)`: every `n ≥ n_min` uses at most `paths` paths.
    pub path_caps: Vec<(usize, usize)>,
    pub horizon: f64,
    pub seed: u64,
    pub method: MethodConfig,
    pub workers: Option<usize>,
    pub failure_budget: usize,
    /// Drive every `n` with the same Brownian path (sampled at the lcm of
    /// the grid).
    pub common_noise: bool,
}

impl ConvergenceStudy {
    pub fn new(n_grid: Vec<usize>, paths: usize, seed: u64, method: MethodConfig) -> Self {
        ConvergenceStudy {
            n_grid,
            paths,
            path_caps: Vec::new(),
            horizon: 1.0,
            seed,
            method,
            workers: None,
            failure_budget: 0,
            common_noise: true,
        }
    }

    pub fn paths_for(&self, n: usize) -> usize {
        self.path_caps
            .iter()
            .filter(|(n_min, _)| n >= *n_min)
            .map(|(_, cap)| *cap)
            .fold(self.paths, usize::min)
    }

    fn grid(&self, n: usize) -> Result<SlowGrid, ExperimentError> {
        let grid = SlowGrid::new(n, self.horizon)?;
        if self.common_noise {
            Ok(grid.with_noise_resolution(lcm_all(&self.n_grid))?)
        } else {
            Ok(grid)
        }
    }

    fn validate(&self) -> Result<(), ExperimentError> {
        if self.n_grid.is_empty() {
            return Err(ExperimentError::InvalidStudy("n grid is empty".into()));
        }
        if self.paths == 0 {
            return Err(ExperimentError::InvalidStudy("paths must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub n: usize,
    pub m: usize,
    pub paths: usize,
    /// `√(mean sup-error²)`
    pub l2_error: f64,
    pub stderr: f64,
    /// Fast steps per path.
    pub ops: u64,
    pub wall_seconds: f64,
}

/// `√mean(e²)` with delta-method standard error.
pub fn l2_summary(errors: &[f64]) -> (f64, f64) {
    let sq: Vec<f64> = errors.iter().map(|e| e * e).collect();
    let (mean_sq, se_sq) = mean_and_stderr(&sq);
    let l2 = mean_sq.sqrt();
    let se = if l2 > 0.0 { se_sq / (2.0 * l2) } else { 0.0 };
    (l2, se)
}

/// Sample mean and its standard error (zero for a single sample).
pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Sup errors of every successful path at one `n`.
pub fn coupled_errors<M: MultiscaleModel + ?Sized>(
    model: &M,
    study: &ConvergenceStudy,
    n: usize,
) -> Result<Vec<f64>, ExperimentError> {
    let est = study.method.estimator(n)?;
    let grid = study.grid(n)?;
    let results = parallel_paths(study.paths_for(n), study.workers, |p| {
        coupled_path(model, &grid, Coefficients::Estimated(&est), PathKey::new(study.seed, p))
            .map(|c| c.sup_error())
    })?;
    within_budget(results, study.failure_budget)
}

pub fn run_convergence<M: MultiscaleModel + ?Sized>(
    model: &M,
    study: &ConvergenceStudy,
) -> Result<Vec<ConvergenceRow>, ExperimentError> {
    study.validate()?;
    if model.oracle().is_none() {
        return Err(SolverError::NoOracle.into());
    }
    let mut rows = Vec::with_capacity(study.n_grid.len());
    for &n in &study.n_grid {
        let start = Instant::now();
        let est = study.method.estimator(n)?;
        let errors = coupled_errors(model, study, n)?;
        let (l2_error, stderr) = l2_summary(&errors);
        rows.push(ConvergenceRow {
            n,
            m: est.chain_length(),
            paths: errors.len(),
            l2_error,
            stderr,
            ops: n as u64 * est.ops_per_query(),
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        log::info!("n={n} M={} l2={l2_error:.6} ({} paths)", est.chain_length(), errors.len());
    }
    Ok(rows)
}

/// Efficiency rows are convergence rows read as `(ops, error)` pairs.
pub fn run_efficiency<M: MultiscaleModel + ?Sized>(
    model: &M,
    study: &ConvergenceStudy,
) -> Result<Vec<ConvergenceRow>, ExperimentError> {
    run_convergence(model, study)
}

/// Slope of `log l2_error` against `log n` over the rows.
pub fn convergence_slope(rows: &[ConvergenceRow]) -> Result<LogLogFit, ExperimentError> {
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.n as f64, r.l2_error)).collect();
    fit_loglog_slope(&pts)
}

/// Slope of `log l2_error` against `log ops` over the rows.
pub fn efficiency_slope(rows: &[ConvergenceRow]) -> Result<LogLogFit, ExperimentError> {
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.ops as f64, r.l2_error)).collect();
    fit_loglog_slope(&pts)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Least squares of `log y` on `log x`.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Result<LogLogFit, ExperimentError> {
    if points.iter().any(|(x, y)| !(*x > 0.0 && *y > 0.0)) {
        return Err(ExperimentError::InvalidStudy(
            "log-log fit needs positive coordinates".into(),
        ));
    }
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if !(sxx > 0.0) {
        return Err(ExperimentError::InvalidStudy(
            "log-log fit needs at least two distinct x values".into(),
        ));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my) * (y - my)).sum();
    let slope = sxy / sxx;
    let r_squared = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    Ok(LogLogFit {
        slope,
        intercept: my - slope * mx,
        r_squared,
    })
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let m = (n + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - m) * (b - m);
        sxx += (a - m) * (a - m);
        syy += (b - m) * (b - m);
    }
    sxy / (sxx * syy).sqrt()
}

#[derive(Debug, Clone)]
pub struct QqStudy {
    pub n: usize,
    pub paths: usize,
    pub horizon: f64,
    pub seed: u64,
    pub method: MethodConfig,
    pub workers: Option<usize>,
    pub failure_budget: usize,
}

/// Sorted samples of `√n (X_T − X̌_T)`, one vector per slow component.
#[derive(Debug, Clone, PartialEq)]
pub struct QqReport {
    pub n: usize,
    pub components: Vec<Vec<f64>>,
}

pub fn run_qq<M: MultiscaleModel + ?Sized>(model: &M, study: &QqStudy) -> Result<QqReport, ExperimentError> {
    if study.paths == 0 {
        return Err(ExperimentError::InvalidStudy("paths must be at least 1".into()));
    }
    if model.oracle().is_none() {
        return Err(SolverError::NoOracle.into());
    }
    let est = study.method.estimator(study.n)?;
    let grid = SlowGrid::new(study.n, study.horizon)?;
    let results = parallel_paths(study.paths, study.workers, |p| {
        coupled_path(model, &grid, Coefficients::Estimated(&est), PathKey::new(study.seed, p))
            .map(|c| c.terminal_difference())
    })?;
    let diffs = within_budget(results, study.failure_budget)?;
    let scale = (study.n as f64).sqrt();
    let components = (0..model.slow_dim())
        .map(|i| {
            let mut v: Vec<f64> = diffs.iter().map(|d| scale * d[i]).collect();
            v.sort_by(f64::total_cmp);
            v
        })
        .collect();
    Ok(QqReport {
        n: study.n,
        components,
    })
}

/// Two-sample Kolmogorov-Smirnov statistic `sup |F_a − F_b|`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Payoff {
    /// `X_T − (1/n) Σ_{k<n} X_{t_k}`
    AsianFloatCall,
    /// `X_T − min_k X_{t_k}`
    LookbackFloatCall,
}

impl Payoff {
    pub fn name(&self) -> &'static str {
        match self {
            Payoff::AsianFloatCall => "asian",
            Payoff::LookbackFloatCall => "lookback",
        }
    }
}

#[derive(Debug, Clone)]
pub enum PricingMethod {
    /// MsDS or EMsDS on the effective model, chosen by the method's variant.
    Multiscale(MethodConfig),
    /// Euler-Maruyama on the full ε-system.
    EulerBaseline { epsilon: f64, n_steps: usize },
}

impl PricingMethod {
    pub fn name(&self) -> &'static str {
        match self {
            PricingMethod::Multiscale(m) => match m.variant {
                Variant::Plain => "msds",
                Variant::Extrapolated { .. } => "emsds",
            },
            PricingMethod::EulerBaseline { .. } => "euler",
        }
    }
}

#[derive(Debug, Clone)]
pub struct PricingStudy {
    pub params: HestonParams,
    pub method: PricingMethod,
    /// Slow steps (ignored by the Euler baseline).
    pub n: usize,
    pub paths: usize,
    pub seed: u64,
    pub floor: bool,
    pub discount: bool,
    pub workers: Option<usize>,
    /// Brownian sampling resolution; a multiple of `n`.
    pub noise_resolution: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriceEstimate {
    pub price: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PricingReport {
    pub method: &'static str,
    pub n: usize,
    /// Inner chain length (1 for the Euler baseline, one fused step).
    pub m: usize,
    /// Paths that completed.
    pub paths: usize,
    pub asian: PriceEstimate,
    pub lookback: PriceEstimate,
    /// Fast steps per path.
    pub ops: u64,
    pub repairs: u64,
    pub diverged: usize,
}

impl PricingReport {
    pub fn price(&self, payoff: Payoff) -> PriceEstimate {
        match payoff {
            Payoff::AsianFloatCall => self.asian,
            Payoff::LookbackFloatCall => self.lookback,
        }
    }
}

struct PathPayoffs {
    asian: f64,
    lookback: f64,
    repairs: u32,
}

fn payoffs_from_grid(xs: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut min = f64::INFINITY;
    let mut last = f64::NAN;
    for x in xs {
        if count > 0 {
            sum += last;
        }
        min = min.min(x);
        last = x;
        count += 1;
    }
    (last - sum / (count - 1) as f64, last - min)
}

pub fn run_pricing(study: &PricingStudy) -> Result<PricingReport, ExperimentError> {
    if study.paths == 0 {
        return Err(ExperimentError::InvalidStudy("paths must be at least 1".into()));
    }
    let horizon = study.params.horizon;
    let key = |p| PathKey::new(study.seed, p);
    let (results, n, m, ops) = match &study.method {
        PricingMethod::Multiscale(method) => {
            let model = heston_model(study.params.clone())?;
            let est = method.estimator(study.n)?;
            let mut grid = SlowGrid::new(study.n, horizon)?;
            if let Some(r) = study.noise_resolution {
                grid = grid.with_noise_resolution(r)?;
            }
            let results = parallel_paths(study.paths, study.workers, |p| {
                msds_path(&model, &grid, Coefficients::Estimated(&est), key(p)).map(|path| {
                    let (asian, lookback) = payoffs_from_grid(path.states.iter().map(|s| s[0]));
                    PathPayoffs {
                        asian,
                        lookback,
                        repairs: path.repairs,
                    }
                })
            })?;
            let ops = study.n as u64 * est.ops_per_query();
            (results, study.n, est.chain_length(), ops)
        }
        PricingMethod::EulerBaseline { epsilon, n_steps } => {
            let system = heston_full_system(study.params.clone())?;
            let results = parallel_paths(study.paths, study.workers, |p| {
                euler_baseline_path(&system, *epsilon, *n_steps, horizon, key(p)).map(|b| PathPayoffs {
                    asian: b.terminal[0] - b.average,
                    lookback: b.terminal[0] - b.minimum,
                    repairs: 0,
                })
            })?;
            (results, *n_steps, 1, *n_steps as u64)
        }
    };

    let mut kept = Vec::with_capacity(results.len());
    let mut diverged = 0;
    for r in results {
        match r {
            Ok(v) => kept.push(v),
            Err(SolverError::PathDiverged { .. }) => diverged += 1,
            Err(e) => return Err(e.into()),
        }
    }
    if diverged * 100 > study.paths {
        return Err(ExperimentError::TooManyDiverged {
            diverged,
            paths: study.paths,
        });
    }
    if kept.is_empty() {
        return Err(ExperimentError::TooManyDiverged {
            diverged,
            paths: study.paths,
        });
    }
    let df = if study.discount {
        (-study.params.r * horizon).exp()
    } else {
        1.0
    };
    let transform = |v: f64| df * if study.floor { v.max(0.0) } else { v };
    let estimate = |get: fn(&PathPayoffs) -> f64| {
        let v: Vec<f64> = kept.iter().map(|p| transform(get(p))).collect();
        let (price, stderr) = mean_and_stderr(&v);
        PriceEstimate { price, stderr }
    };
    Ok(PricingReport {
        method: study.method.name(),
        n,
        m,
        paths: kept.len(),
        asian: estimate(|p| p.asian),
        lookback: estimate(|p| p.lookback),
        ops,
        repairs: kept.iter().map(|p| p.repairs as u64).sum(),
        diverged,
    })
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Least common multiple of a nonempty list of positive integers.
pub fn lcm_all(values: &[usize]) -> usize {
    values.iter().fold(1, |acc, &v| acc / gcd(acc, v) * v)
}
