//! Keyed Gaussian streams.
//!
//! Every stream is identified by a [`StreamKey`] `(master_seed, path_id,
//! slow_step, chain)`. The four fields are each passed through the SplitMix64
//! finalizer (a bijection on `u64`) and concatenated into the 256-bit key of a
//! ChaCha8 generator, so distinct keys always give distinct generator keys and
//! no state is shared between streams. Normal deviates come from the Ziggurat
//! sampler of `rand_distr::StandardNormal`. Both algorithms are pinned through
//! `Cargo.lock`; changing either changes every simulated number.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RandomError {
    #[error("correlation must lie in [-1, 1], got {0}")]
    InvalidCorrelation(f64),
}

/// Which noise source a stream feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Chain {
    /// Slow Brownian increments `ΔW` of one path.
    SlowBrownian,
    /// Fast chain with steps `γ_k` at one slow step.
    FastPrimary,
    /// Fast chain with steps `γ_k/λ` (extrapolated estimator only).
    FastLambda,
    /// Drivers of the full ε-system in the Euler baseline.
    FullSystemFast,
}

impl Chain {
    fn tag(self) -> u64 {
        match self {
            Chain::SlowBrownian => 1,
            Chain::FastPrimary => 2,
            Chain::FastLambda => 3,
            Chain::FullSystemFast => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub master_seed: u64,
    pub path_id: u64,
    pub slow_step: u64,
    pub chain: Chain,
}

impl StreamKey {
    pub fn new(master_seed: u64, path_id: u64, slow_step: u64, chain: Chain) -> Self {
        StreamKey {
            master_seed,
            path_id,
            slow_step,
            chain,
        }
    }
}

const SALTS: [u64; 4] = [
    0x243f_6a88_85a3_08d3,
    0x1319_8a2e_0370_7344,
    0xa409_3822_299f_31d0,
    0x082e_fa98_ec4e_6c89,
];

fn splitmix_finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn derive_seed(key: &StreamKey) -> [u8; 32] {
    let words = [
        key.master_seed,
        key.path_id,
        key.slow_step,
        key.chain.tag(),
    ];
    let mut seed = [0u8; 32];
    for (i, (word, salt)) in words.iter().zip(SALTS).enumerate() {
        let mixed = splitmix_finalize(word ^ salt);
        seed[8 * i..8 * (i + 1)].copy_from_slice(&mixed.to_le_bytes());
    }
    seed
}

/// An endless i.i.d. `N(0,1)` sequence, deterministic per key.
#[derive(Debug, Clone)]
pub struct GaussianStream {
    rng: ChaCha8Rng,
}

impl GaussianStream {
    #[inline]
    pub fn next_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Fills `out` with consecutive deviates; one call per `d`-vector.
    #[inline]
    pub fn fill(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.rng.sample(StandardNormal);
        }
    }
}

impl Iterator for GaussianStream {
    type Item = f64;

    #[inline]
    fn next(&mut self) -> Option<f64> {
        Some(self.next_normal())
    }
}

pub fn gaussian_stream(key: StreamKey) -> GaussianStream {
    GaussianStream {
        rng: ChaCha8Rng::from_seed(derive_seed(&key)),
    }
}

/// Pairs `(Z₁, ρZ₁ + √(1−ρ²)Z')` built from consecutive draws of `stream`.
#[derive(Debug, Clone)]
pub struct CorrelatedPairs<I> {
    stream: I,
    rho: f64,
    complement: f64,
}

impl<I: Iterator<Item = f64>> Iterator for CorrelatedPairs<I> {
    type Item = (f64, f64);

    fn next(&mut self) -> Option<(f64, f64)> {
        let z1 = self.stream.next()?;
        let z_indep = self.stream.next()?;
        Some((z1, self.rho * z1 + self.complement * z_indep))
    }
}

pub fn correlated_pair<I: Iterator<Item = f64>>(
    stream: I,
    rho: f64,
) -> Result<CorrelatedPairs<I>, RandomError> {
    if !(-1.0..=1.0).contains(&rho) {
        return Err(RandomError::InvalidCorrelation(rho));
    }
    Ok(CorrelatedPairs {
        stream,
        rho,
        complement: (1.0 - rho * rho).sqrt(),
    })
}

/// Sample Pearson correlation. Used by tests and diagnostics.
pub fn sample_correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}
