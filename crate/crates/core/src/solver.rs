//! Slow-scale Euler scheme with estimated coefficients.
//!
//! On the grid `t_k = T·k/n`:
//!
//! ```text
//! X̌_{k+1} = X̌_k + F̂(X̌_k) Δt + Ĝ(X̌_k) ΔW_{k+1}
//! ```
//!
//! where `(F̂, Ĝ)` come from a fresh fast chain per step. The same driver
//! accepts the model's closed-form coefficients instead, which yields the
//! classical Euler scheme for the effective equation.

use thiserror::Error;

use crate::estimator::{ErgodicEstimator, EstimatorError};
use crate::linalg::Matrix;
use crate::model::{HestonSystem, Mode, MultiscaleModel};
use crate::random::{gaussian_stream, Chain, StreamKey};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("model has no closed-form effective coefficients")]
    NoOracle,
    #[error("path {path_id}, slow step {step}: {source}")]
    Estimator {
        path_id: u64,
        step: usize,
        source: EstimatorError,
    },
    #[error("path {path_id} diverged at step {step}")]
    PathDiverged { path_id: u64, step: usize },
}

/// Identifies one Monte Carlo path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PathKey {
    pub master_seed: u64,
    pub path_id: u64,
}

impl PathKey {
    pub fn new(master_seed: u64, path_id: u64) -> Self {
        PathKey {
            master_seed,
            path_id,
        }
    }

    pub fn stream_key(&self, slow_step: u64, chain: Chain) -> StreamKey {
        StreamKey::new(self.master_seed, self.path_id, slow_step, chain)
    }
}

/// Uniform slow grid with `n` steps on `[0, T]`.
///
/// Slow Brownian increments are drawn at `noise_resolution` sub-steps and
/// summed in blocks of `noise_resolution / n`. Studies that compare several
/// `n` set a common resolution so all of them see the same Brownian path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlowGrid {
    n: usize,
    horizon: f64,
    noise_resolution: usize,
}

impl SlowGrid {
    pub fn new(n: usize, horizon: f64) -> Result<Self, SolverError> {
        if n == 0 {
            return Err(SolverError::InvalidGrid("n must be at least 1".into()));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(SolverError::InvalidGrid(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        Ok(SlowGrid {
            n,
            horizon,
            noise_resolution: n,
        })
    }

    pub fn with_noise_resolution(mut self, resolution: usize) -> Result<Self, SolverError> {
        if resolution == 0 || resolution % self.n != 0 {
            return Err(SolverError::InvalidGrid(format!(
                "noise resolution {resolution} is not a multiple of n = {}",
                self.n
            )));
        }
        self.noise_resolution = resolution;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn noise_resolution(&self) -> usize {
        self.noise_resolution
    }

    pub fn mesh(&self) -> f64 {
        self.horizon / self.n as f64
    }

    /// `t_k = T·k/n`, `k = 0..=n`.
    pub fn times(&self) -> Vec<f64> {
        (0..=self.n)
            .map(|k| self.horizon * k as f64 / self.n as f64)
            .collect()
    }
}

/// Slow Brownian increments `ΔW_1..ΔW_n` of one path, each a `dim`-vector.
pub fn slow_increments(key: PathKey, dim: usize, grid: &SlowGrid) -> Vec<Vec<f64>> {
    let block = grid.noise_resolution / grid.n;
    let scale = (grid.horizon / grid.noise_resolution as f64).sqrt();
    let mut stream = gaussian_stream(key.stream_key(0, Chain::SlowBrownian));
    let mut draw = vec![0.0; dim];
    (0..grid.n)
        .map(|_| {
            let mut inc = vec![0.0; dim];
            for _ in 0..block {
                stream.fill(&mut draw);
                for (a, z) in inc.iter_mut().zip(&draw) {
                    *a += scale * z;
                }
            }
            inc
        })
        .collect()
}

/// Where the slow coefficients come from.
#[derive(Debug, Clone, Copy)]
pub enum Coefficients<'a> {
    /// Decreasing-step ergodic estimates.
    Estimated(&'a ErgodicEstimator),
    /// The model's closed-form effective coefficients.
    Oracle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlowPath {
    pub horizon: f64,
    pub n: usize,
    /// `X̌_{t_0..t_n}`
    pub states: Vec<Vec<f64>>,
    /// `ΔW_1..ΔW_n`; empty in ODE mode.
    pub increments: Vec<Vec<f64>>,
    pub ops: u64,
    pub repairs: u32,
}

impl SlowPath {
    pub fn times(&self) -> Vec<f64> {
        (0..=self.n)
            .map(|k| self.horizon * k as f64 / self.n as f64)
            .collect()
    }

    pub fn terminal(&self) -> &[f64] {
        &self.states[self.n]
    }
}

/// `x + f·dt + g·dw`
#[inline]
pub fn euler_update(x: &[f64], f: &[f64], g: Option<&[f64]>, dt: f64, dw: &[f64]) -> Vec<f64> {
    let d = x.len();
    let mut out = Vec::with_capacity(d);
    for i in 0..d {
        let mut v = x[i] + f[i] * dt;
        if let Some(g) = g {
            let mut noise = 0.0;
            for j in 0..d {
                noise += g[i * d + j] * dw[j];
            }
            v += noise;
        }
        out.push(v);
    }
    out
}

pub fn msds_path<M: MultiscaleModel + ?Sized>(
    model: &M,
    grid: &SlowGrid,
    coefficients: Coefficients<'_>,
    key: PathKey,
) -> Result<SlowPath, SolverError> {
    let d = model.slow_dim();
    let sde = model.mode() == Mode::Sde;
    let increments = if sde {
        slow_increments(key, d, grid)
    } else {
        Vec::new()
    };
    let oracle = match coefficients {
        Coefficients::Oracle => Some(model.oracle().ok_or(SolverError::NoOracle)?),
        Coefficients::Estimated(_) => None,
    };
    let dt = grid.mesh();
    let mut states = Vec::with_capacity(grid.n + 1);
    states.push(model.x0().to_vec());
    let (mut ops, mut repairs) = (0u64, 0u32);
    let mut warm: Option<(Vec<f64>, Option<Vec<f64>>)> = None;
    let mut f = vec![0.0; d];
    let mut g = vec![0.0; d * d];

    for k in 0..grid.n {
        let x = &states[k];
        let g_used: Option<&[f64]> = match (coefficients, oracle) {
            (Coefficients::Estimated(est), _) => {
                let wrap = |source| match source {
                    EstimatorError::NonFinite { .. } => SolverError::PathDiverged {
                        path_id: key.path_id,
                        step: k,
                    },
                    source => SolverError::Estimator {
                        path_id: key.path_id,
                        step: k,
                        source,
                    },
                };
                let step = k as u64;
                let e = if est.is_extrapolated() {
                    let mut fine = gaussian_stream(key.stream_key(step, Chain::FastLambda));
                    let mut coarse = gaussian_stream(key.stream_key(step, Chain::FastPrimary));
                    let start = warm
                        .as_ref()
                        .filter(|_| est.config().warm_start)
                        .and_then(|(c, fl)| fl.as_deref().map(|fl| (fl, c.as_slice())));
                    est.estimate_extrapolated(model, x, step, &mut fine, &mut coarse, start)
                } else {
                    let mut s = gaussian_stream(key.stream_key(step, Chain::FastPrimary));
                    let start = warm
                        .as_ref()
                        .filter(|_| est.config().warm_start)
                        .map(|(c, _)| c.as_slice());
                    est.estimate(model, x, step, &mut s, start)
                }
                .map_err(wrap)?;
                ops += e.ops;
                repairs += e.repairs;
                f.copy_from_slice(&e.f_hat);
                let g_hat = e.g_hat.map(Matrix::into_vec);
                warm = Some((e.terminal_fast, e.terminal_fast_lambda));
                match g_hat {
                    Some(v) if sde => {
                        g.copy_from_slice(&v);
                        Some(&g)
                    }
                    _ => None,
                }
            }
            (Coefficients::Oracle, Some(o)) => {
                o.drift(x, &mut f);
                if sde {
                    o.diffusion(x, &mut g);
                    Some(&g)
                } else {
                    None
                }
            }
            (Coefficients::Oracle, None) => unreachable!(),
        };
        let dw: &[f64] = if sde { &increments[k] } else { &[] };
        let next = euler_update(x, &f, g_used, dt, dw);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::PathDiverged {
                path_id: key.path_id,
                step: k + 1,
            });
        }
        states.push(next);
    }
    Ok(SlowPath {
        horizon: grid.horizon,
        n: grid.n,
        states,
        increments,
        ops,
        repairs,
    })
}

/// Approximate path coupled with the exact effective path.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledPath {
    pub approximate: SlowPath,
    pub exact: Vec<Vec<f64>>,
}

impl CoupledPath {
    /// `max_k |X̌_{t_k} − X_{t_k}|` (Euclidean norm).
    pub fn sup_error(&self) -> f64 {
        self.approximate
            .states
            .iter()
            .zip(&self.exact)
            .map(|(a, b)| distance(a, b))
            .fold(0.0, f64::max)
    }

    /// `X_T − X̌_T`
    pub fn terminal_difference(&self) -> Vec<f64> {
        let n = self.approximate.n;
        self.exact[n]
            .iter()
            .zip(&self.approximate.states[n])
            .map(|(e, a)| e - a)
            .collect()
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn coupled_path<M: MultiscaleModel + ?Sized>(
    model: &M,
    grid: &SlowGrid,
    coefficients: Coefficients<'_>,
    key: PathKey,
) -> Result<CoupledPath, SolverError> {
    let oracle = model.oracle().ok_or(SolverError::NoOracle)?;
    let approximate = msds_path(model, grid, coefficients, key)?;
    let exact = oracle.exact_path(model.x0(), grid.horizon, grid.n, &approximate.increments);
    Ok(CoupledPath { approximate, exact })
}

/// Discrete sup error between the scheme and the exact effective path on
/// shared slow increments.
pub fn coupled_error<M: MultiscaleModel + ?Sized>(
    model: &M,
    grid: &SlowGrid,
    coefficients: Coefficients<'_>,
    key: PathKey,
) -> Result<f64, SolverError> {
    Ok(coupled_path(model, grid, coefficients, key)?.sup_error())
}

/// Summary of one Euler-Maruyama path of the full `(X, Y, Z)` system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselinePath {
    pub terminal: [f64; 3],
    /// `(1/n) Σ_{k<n} X_{t_k}`
    pub average: f64,
    /// `min_{k≤n} X_{t_k}`
    pub minimum: f64,
    pub ops: u64,
}

pub fn euler_baseline_path(
    system: &HestonSystem,
    epsilon: f64,
    n_steps: usize,
    horizon: f64,
    key: PathKey,
) -> Result<BaselinePath, SolverError> {
    if !(epsilon > 0.0) {
        return Err(SolverError::InvalidGrid(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let grid = SlowGrid::new(n_steps, horizon)?;
    let dt = grid.mesh();
    let mut stream = gaussian_stream(key.stream_key(0, Chain::FullSystemFast));
    let mut s = system.initial_state();
    let mut sum = 0.0;
    let mut minimum = s[0];
    let mut iid = [0.0; 3];
    for k in 0..n_steps {
        sum += s[0];
        stream.fill(&mut iid);
        s = system.step(s, dt, epsilon, iid);
        if !s.iter().all(|v| v.is_finite()) {
            return Err(SolverError::PathDiverged {
                path_id: key.path_id,
                step: k + 1,
            });
        }
        minimum = minimum.min(s[0]);
    }
    Ok(BaselinePath {
        terminal: s,
        average: sum / n_steps as f64,
        minimum,
        ops: n_steps as u64,
    })
}
