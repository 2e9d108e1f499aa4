//! Decreasing-step ergodic averages of the slow coefficients.
//!
//! For a frozen slow state `x` the fast diffusion is discretized with the
//! decreasing steps `γ_k`:
//!
//! ```text
//! Ŷ_0 = y0,   Ŷ_k = Ŷ_{k−1} + γ_k b(x, Ŷ_{k−1}) + √γ_k σ(x, Ŷ_{k−1}) U_k
//! ```
//!
//! and `F(x) = ∫ f(x,y) μˣ(dy)` is estimated by the weighted average
//! `F̂^M = Γ_M⁻¹ Σ_{k≤M} γ_k f(x, Ŷ_{k−1})`, evaluated through the recursion
//! `F̂^k = F̂^{k−1} + (γ_k/Γ_k)(f(x, Ŷ_{k−1}) − F̂^{k−1})`. The covariance
//! `H = ∫ g·gᵀ dμˣ` is averaged along the same chain and factorized into `Ĝ`.
//!
//! The extrapolated variant runs a second, independent chain with steps
//! `γ_k/λ` and combines the two Romberg-style so that the leading bias term
//! cancels.

use thiserror::Error;

use crate::cholesky::{factorize_with_repair, CholeskyError, FailurePolicy};
use crate::linalg::Matrix;
use crate::model::{Mode, MultiscaleModel};
use crate::random::GaussianStream;
use crate::schedule::{ScheduleError, StepSchedule, StepTable};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("lambda must be greater than 1, got {0}")]
    InvalidLambda(f64),
    #[error("varsigma must be an even integer >= 4, got {0}")]
    InvalidVarsigma(u32),
    #[error("covariance estimate at x={x:?} (slow step {slow_step}, M={chain_length}) could not be factorized: {source}")]
    Factorization {
        x: Vec<f64>,
        slow_step: u64,
        chain_length: usize,
        source: CholeskyError,
    },
    #[error("fast chain at x={x:?} (slow step {slow_step}) produced a non-finite value")]
    NonFinite { x: Vec<f64>, slow_step: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variant {
    Plain,
    Extrapolated { lambda: f64 },
}

/// Where the Romberg combination is applied in SDE mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExtrapolationTarget {
    /// Combine the two `Ĥ`, then factorize once.
    #[default]
    Covariance,
    /// Factorize each chain's `Ĥ` and combine the two factors.
    Factor,
}

#[derive(Debug, Clone)]
pub struct EstimatorConfig {
    pub schedule: StepSchedule,
    /// `M`, the number of averaged terms per chain.
    pub chain_length: usize,
    pub variant: Variant,
    /// Index of the first nonvanishing bias term; selects the Romberg weights.
    pub varsigma: u32,
    /// Start each query's chain from the previous query's terminal state
    /// instead of the model's `y0`.
    pub warm_start: bool,
    pub cholesky_policy: FailurePolicy,
    pub extrapolation_target: ExtrapolationTarget,
}

impl EstimatorConfig {
    pub fn new(schedule: StepSchedule, chain_length: usize) -> Self {
        EstimatorConfig {
            schedule,
            chain_length,
            variant: Variant::Plain,
            varsigma: 4,
            warm_start: false,
            cholesky_policy: FailurePolicy::Repair,
            extrapolation_target: ExtrapolationTarget::Covariance,
        }
    }

    pub fn extrapolated(mut self, lambda: f64) -> Self {
        self.variant = Variant::Extrapolated { lambda };
        self
    }
}

/// Romberg weights `w_fine = a/(a−1)`, `w_coarse = −1/(a−1)` with
/// `a = λ^{ς/2−1}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtrapolationWeights {
    pub fine: f64,
    pub coarse: f64,
}

impl ExtrapolationWeights {
    pub fn new(lambda: f64, varsigma: u32) -> Result<Self, EstimatorError> {
        if !(lambda > 1.0 && lambda.is_finite()) {
            return Err(EstimatorError::InvalidLambda(lambda));
        }
        if varsigma < 4 || varsigma % 2 != 0 {
            return Err(EstimatorError::InvalidVarsigma(varsigma));
        }
        let a = lambda.powi((varsigma / 2 - 1) as i32);
        Ok(ExtrapolationWeights {
            fine: a / (a - 1.0),
            coarse: -1.0 / (a - 1.0),
        })
    }

    /// `w_fine·fine + w_coarse·coarse`, evaluated as
    /// `coarse + w_fine·(fine − coarse)` so equal inputs pass through exactly.
    #[inline]
    pub fn combine(&self, fine: f64, coarse: f64) -> f64 {
        coarse + self.fine * (fine - coarse)
    }

    pub fn combine_slices(&self, fine: &[f64], coarse: &[f64]) -> Vec<f64> {
        fine.iter()
            .zip(coarse)
            .map(|(f, c)| self.combine(*f, *c))
            .collect()
    }
}

/// `Ĉ_φ(λ) = √(λ³+1)/(λ−1)`, the variance inflation of the extrapolated
/// estimator.
pub fn extrapolation_constant(lambda: f64) -> Result<f64, EstimatorError> {
    if !(lambda > 1.0 && lambda.is_finite()) {
        return Err(EstimatorError::InvalidLambda(lambda));
    }
    Ok((lambda.powi(3) + 1.0).sqrt() / (lambda - 1.0))
}

/// Minimizes [`extrapolation_constant`] on `(lower, upper]` by golden-section
/// search. Returns `(λ*, Ĉ_φ(λ*))`.
pub fn minimize_extrapolation_constant(lower: f64, upper: f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let c = |l: f64| extrapolation_constant(l).unwrap_or(f64::INFINITY);
    let (mut a, mut b) = (lower, upper);
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let (mut f1, mut f2) = (c(x1), c(x2));
    while b - a > 1e-12 * (1.0 + a.abs()) {
        if f1 < f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = c(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = c(x2);
        }
    }
    let lambda = 0.5 * (a + b);
    (lambda, c(lambda))
}

/// Result of one estimator query.
#[derive(Debug, Clone, PartialEq)]
pub struct ErgodicEstimate {
    pub f_hat: Vec<f64>,
    /// Exactly symmetric; `None` in ODE mode.
    pub h_hat: Option<Matrix>,
    /// Lower-triangular root of `h_hat`; `None` in ODE mode.
    pub g_hat: Option<Matrix>,
    /// Fast Euler steps consumed.
    pub ops: u64,
    pub repairs: u32,
    /// Terminal state `Ŷ_M` of the `γ_k` chain.
    pub terminal_fast: Vec<f64>,
    /// Terminal state of the `γ_k/λ` chain (extrapolated only).
    pub terminal_fast_lambda: Option<Vec<f64>>,
}

/// One Euler step of the fast chain: `y + γ b(x,y) + √γ σ(x,y) u`.
pub fn fast_chain_step<M: MultiscaleModel + ?Sized>(
    model: &M,
    x: &[f64],
    y: &[f64],
    gamma: f64,
    u: &[f64],
) -> Vec<f64> {
    let dy = model.fast_dim();
    let mut b = vec![0.0; dy];
    let mut s = vec![0.0; dy * dy];
    let mut out = vec![0.0; dy];
    model.fast_drift(x, y, &mut b);
    model.fast_diffusion(x, y, &mut s);
    step_into(y, &b, &s, gamma, gamma.sqrt(), u, &mut out);
    out
}

#[inline(always)]
fn step_into(y: &[f64], b: &[f64], s: &[f64], gamma: f64, sqrt_gamma: f64, u: &[f64], out: &mut [f64]) {
    let d = y.len();
    for i in 0..d {
        let mut noise = 0.0;
        for j in 0..d {
            noise += s[i * d + j] * u[j];
        }
        out[i] = y[i] + gamma * b[i] + sqrt_gamma * noise;
    }
}

struct ChainAverages {
    f: Vec<f64>,
    h: Option<Matrix>,
    terminal: Vec<f64>,
}

/// Estimator bound to a fixed configuration and chain length.
#[derive(Debug, Clone)]
pub struct ErgodicEstimator {
    config: EstimatorConfig,
    table: StepTable,
    weights: Option<ExtrapolationWeights>,
}

impl ErgodicEstimator {
    pub fn new(config: EstimatorConfig) -> Result<Self, EstimatorError> {
        if config.chain_length == 0 {
            return Err(ScheduleError::ZeroLength.into());
        }
        if config.varsigma < 4 || config.varsigma % 2 != 0 {
            return Err(EstimatorError::InvalidVarsigma(config.varsigma));
        }
        let weights = match config.variant {
            Variant::Plain => None,
            Variant::Extrapolated { lambda } => {
                Some(ExtrapolationWeights::new(lambda, config.varsigma)?)
            }
        };
        let table = config.schedule.table(config.chain_length)?;
        Ok(ErgodicEstimator {
            config,
            table,
            weights,
        })
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    pub fn table(&self) -> &StepTable {
        &self.table
    }

    pub fn chain_length(&self) -> usize {
        self.config.chain_length
    }

    pub fn extrapolation_weights(&self) -> Option<ExtrapolationWeights> {
        self.weights
    }

    pub fn is_extrapolated(&self) -> bool {
        self.weights.is_some()
    }

    /// Fast steps per query: `M`, or `2M` when extrapolated.
    pub fn ops_per_query(&self) -> u64 {
        let m = self.config.chain_length as u64;
        if self.is_extrapolated() {
            2 * m
        } else {
            m
        }
    }

    /// Plain decreasing-step estimate at `x` from a single chain.
    ///
    /// `y_start` overrides the model's `y0` (warm start). `slow_step` is only
    /// used to annotate errors.
    pub fn estimate<M: MultiscaleModel + ?Sized>(
        &self,
        model: &M,
        x: &[f64],
        slow_step: u64,
        stream: &mut GaussianStream,
        y_start: Option<&[f64]>,
    ) -> Result<ErgodicEstimate, EstimatorError> {
        let chain = self.run_chain(model, x, 1.0, stream, y_start.unwrap_or(model.y0()));
        self.check_finite(&chain, x, slow_step)?;
        let (g_hat, repairs) = match &chain.h {
            Some(h) => {
                let fact = self.factorize(h, x, slow_step)?;
                (Some(fact.factor), fact.repairs)
            }
            None => (None, 0),
        };
        Ok(ErgodicEstimate {
            f_hat: chain.f,
            h_hat: chain.h,
            g_hat,
            ops: self.config.chain_length as u64,
            repairs,
            terminal_fast: chain.terminal,
            terminal_fast_lambda: None,
        })
    }

    /// Extrapolated estimate: a `γ_k/λ` chain on `fine_stream` and a `γ_k`
    /// chain on `coarse_stream`, combined with the Romberg weights.
    ///
    /// Falls back to [`estimate`](Self::estimate) on `coarse_stream` when the
    /// estimator is not configured as extrapolated.
    pub fn estimate_extrapolated<M: MultiscaleModel + ?Sized>(
        &self,
        model: &M,
        x: &[f64],
        slow_step: u64,
        fine_stream: &mut GaussianStream,
        coarse_stream: &mut GaussianStream,
        y_start: Option<(&[f64], &[f64])>,
    ) -> Result<ErgodicEstimate, EstimatorError> {
        let (weights, lambda) = match (self.weights, self.config.variant) {
            (Some(w), Variant::Extrapolated { lambda }) => (w, lambda),
            _ => {
                return self.estimate(model, x, slow_step, coarse_stream, y_start.map(|(_, c)| c))
            }
        };
        let (fine_start, coarse_start) = y_start.unwrap_or((model.y0(), model.y0()));
        let fine = self.run_chain(model, x, lambda.recip(), fine_stream, fine_start);
        self.check_finite(&fine, x, slow_step)?;
        let coarse = self.run_chain(model, x, 1.0, coarse_stream, coarse_start);
        self.check_finite(&coarse, x, slow_step)?;

        let f_hat = weights.combine_slices(&fine.f, &coarse.f);
        let (h_hat, g_hat, repairs) = match (&fine.h, &coarse.h) {
            (Some(hf), Some(hc)) => {
                let d = hf.rows();
                let h = Matrix::from_row_major(
                    d,
                    d,
                    weights.combine_slices(hf.as_slice(), hc.as_slice()),
                );
                match self.config.extrapolation_target {
                    ExtrapolationTarget::Covariance => {
                        let fact = self.factorize(&h, x, slow_step)?;
                        (Some(h), Some(fact.factor), fact.repairs)
                    }
                    ExtrapolationTarget::Factor => {
                        let gf = self.factorize(hf, x, slow_step)?;
                        let gc = self.factorize(hc, x, slow_step)?;
                        let g = Matrix::from_row_major(
                            d,
                            d,
                            weights.combine_slices(gf.factor.as_slice(), gc.factor.as_slice()),
                        );
                        (Some(h), Some(g), gf.repairs + gc.repairs)
                    }
                }
            }
            _ => (None, None, 0),
        };
        Ok(ErgodicEstimate {
            f_hat,
            h_hat,
            g_hat,
            ops: 2 * self.config.chain_length as u64,
            repairs,
            terminal_fast: coarse.terminal,
            terminal_fast_lambda: Some(fine.terminal),
        })
    }

    fn check_finite(&self, chain: &ChainAverages, x: &[f64], slow_step: u64) -> Result<(), EstimatorError> {
        let finite = chain.f.iter().all(|v| v.is_finite())
            && chain
                .h
                .as_ref()
                .map_or(true, |h| h.as_slice().iter().all(|v| v.is_finite()));
        if finite {
            Ok(())
        } else {
            Err(EstimatorError::NonFinite {
                x: x.to_vec(),
                slow_step,
            })
        }
    }

    fn factorize(
        &self,
        h: &Matrix,
        x: &[f64],
        slow_step: u64,
    ) -> Result<crate::cholesky::Factorization, EstimatorError> {
        factorize_with_repair(h, self.config.cholesky_policy).map_err(|source| {
            EstimatorError::Factorization {
                x: x.to_vec(),
                slow_step,
                chain_length: self.config.chain_length,
                source,
            }
        })
    }

    /// Runs `M` chain steps with steps `scale·γ_k`, averaging `f` (and `h` in
    /// SDE mode) over `Ŷ_0..Ŷ_{M−1}`.
    fn run_chain<M: MultiscaleModel + ?Sized>(
        &self,
        model: &M,
        x: &[f64],
        scale: f64,
        stream: &mut GaussianStream,
        y_start: &[f64],
    ) -> ChainAverages {
        let dx = model.slow_dim();
        let dy = model.fast_dim();
        let sqrt_scale = scale.sqrt();
        let steps = self.table.steps();
        let sqrt_steps = self.table.sqrt_steps();
        let weights = self.table.weights();

        let mut y = y_start.to_vec();
        let mut y_next = vec![0.0; dy];
        let mut b = vec![0.0; dy];
        let mut s = vec![0.0; dy * dy];
        let mut u = vec![0.0; dy];
        let mut f = vec![0.0; dx];
        let mut f_avg = vec![0.0; dx];

        match model.mode() {
            Mode::Ode => {
                for k in 0..steps.len() {
                    model.slow_drift(x, &y, &mut f);
                    let w = weights[k];
                    for i in 0..dx {
                        f_avg[i] += w * (f[i] - f_avg[i]);
                    }
                    model.fast_drift(x, &y, &mut b);
                    model.fast_diffusion(x, &y, &mut s);
                    stream.fill(&mut u);
                    step_into(&y, &b, &s, scale * steps[k], sqrt_scale * sqrt_steps[k], &u, &mut y_next);
                    std::mem::swap(&mut y, &mut y_next);
                }
                ChainAverages {
                    f: f_avg,
                    h: None,
                    terminal: y,
                }
            }
            Mode::Sde => {
                let mut h = vec![0.0; dx * dx];
                let mut h_avg = vec![0.0; dx * dx];
                for k in 0..steps.len() {
                    model.slow_drift(x, &y, &mut f);
                    model.slow_covariance(x, &y, &mut h);
                    let w = weights[k];
                    for i in 0..dx {
                        f_avg[i] += w * (f[i] - f_avg[i]);
                        for j in i..dx {
                            let idx = i * dx + j;
                            h_avg[idx] += w * (h[idx] - h_avg[idx]);
                        }
                    }
                    model.fast_drift(x, &y, &mut b);
                    model.fast_diffusion(x, &y, &mut s);
                    stream.fill(&mut u);
                    step_into(&y, &b, &s, scale * steps[k], sqrt_scale * sqrt_steps[k], &u, &mut y_next);
                    std::mem::swap(&mut y, &mut y_next);
                }
                for i in 0..dx {
                    for j in 0..i {
                        h_avg[i * dx + j] = h_avg[j * dx + i];
                    }
                }
                ChainAverages {
                    f: f_avg,
                    h: Some(Matrix::from_row_major(dx, dx, h_avg)),
                    terminal: y,
                }
            }
        }
    }
}
