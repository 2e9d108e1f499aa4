//! Two-time-scale models.
//!
//! A model describes the slow coefficients `f(x,y)`, `g(x,y)` and the fast
//! coefficients `b(x,y)`, `σ(x,y)` of
//!
//! ```text
//! dX = f(X,Y) dt + g(X,Y) dW
//! dY = ε⁻¹ b(X,Y) dt + ε^(−1/2) σ(X,Y) dW̃
//! ```
//!
//! All coefficient evaluations write into caller-provided buffers; matrices
//! are row-major. Two instances ship with the crate: the Ornstein-Uhlenbeck
//! toy problem (which has an exact effective equation) and the mean-reverting
//! corrected Heston model.

use thiserror::Error;

use crate::cholesky::cholesky;
use crate::linalg::Matrix;

/// Upper bound on the slow dimension for the stack buffers used by default
/// trait methods.
pub const MAX_SLOW_DIM: usize = 10;

/// Whether the slow equation carries a Brownian term. Fixed per model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// `g ≡ 0`: ODE with random coefficients.
    Ode,
    Sde,
}

pub trait MultiscaleModel: Sync {
    fn slow_dim(&self) -> usize;
    fn fast_dim(&self) -> usize;
    fn mode(&self) -> Mode;
    fn x0(&self) -> &[f64];
    fn y0(&self) -> &[f64];

    fn slow_drift(&self, x: &[f64], y: &[f64], out: &mut [f64]);

    /// `g(x,y)`, `d_x × d_x`. Never called in [`Mode::Ode`].
    fn slow_diffusion(&self, x: &[f64], y: &[f64], out: &mut [f64]);

    /// `h = g·gᵀ`. Override when a cheaper closed form exists.
    fn slow_covariance(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        let d = self.slow_dim();
        assert!(d <= MAX_SLOW_DIM, "slow dimension above MAX_SLOW_DIM");
        let mut g = [0.0; MAX_SLOW_DIM * MAX_SLOW_DIM];
        self.slow_diffusion(x, y, &mut g[..d * d]);
        for i in 0..d {
            for j in 0..=i {
                let v: f64 = (0..d).map(|k| g[i * d + k] * g[j * d + k]).sum();
                out[i * d + j] = v;
                out[j * d + i] = v;
            }
        }
    }

    fn fast_drift(&self, x: &[f64], y: &[f64], out: &mut [f64]);

    /// `σ(x,y)`, `d_y × d_y`.
    fn fast_diffusion(&self, x: &[f64], y: &[f64], out: &mut [f64]);

    fn oracle(&self) -> Option<&dyn EffectiveOracle> {
        None
    }
}

/// Closed-form effective coefficients and exact effective paths.
pub trait EffectiveOracle: Sync {
    /// `F(x)`
    fn drift(&self, x: &[f64], out: &mut [f64]);

    /// `G(x)`, lower-triangular root of `H(x)`. Left untouched in ODE mode.
    fn diffusion(&self, x: &[f64], out: &mut [f64]);

    /// `H(x)`
    fn covariance(&self, x: &[f64], out: &mut [f64]);

    /// Exact effective solution at `t_k = horizon·k/n`, `k = 0..=n`, driven by
    /// the given slow Brownian increments (ignored in ODE mode, where the
    /// slice may be empty).
    fn exact_path(
        &self,
        x0: &[f64],
        horizon: f64,
        n: usize,
        increments: &[Vec<f64>],
    ) -> Vec<Vec<f64>>;
}

/// Ornstein-Uhlenbeck toy problem with `d_x = 2`, `d_y = 1`:
///
/// ```text
/// fast:  dY = (c(x) − Y) dt + √2 dW̃,   c(x) = (|x|² + 1)^(−1/2)
/// f(x,y) = (1 + y − c(x), 1)
/// g(x,y) = √( (|x|²+1)/(2|x|²+3) · (y²+1) ) · [[1,0],[1,1]]
/// ```
///
/// The fast invariant law is `N(c(x), 1)`, so `F ≡ (1,1)`,
/// `H ≡ [[1,1],[1,2]]` and `G ≡ [[1,0],[1,1]]`; the effective solution is
/// `x0 + (t, t) + (W¹_t, W¹_t + W²_t)`. In ODE mode `g` is dropped and the
/// effective solution is `x0 + (t, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    x0: [f64; 2],
    y0: [f64; 1],
    mode: Mode,
}

impl ToyModel {
    pub fn new(x0: [f64; 2], y0: f64, mode: Mode) -> Self {
        ToyModel {
            x0,
            y0: [y0],
            mode,
        }
    }

    /// Invariant mean of the fast chain at `x`.
    pub fn fast_mean(x: &[f64]) -> f64 {
        (x[0] * x[0] + x[1] * x[1] + 1.0).sqrt().recip()
    }

    fn covariance_prefactor(x: &[f64]) -> f64 {
        let r2 = x[0] * x[0] + x[1] * x[1];
        (r2 + 1.0) / (2.0 * r2 + 3.0)
    }
}

/// Toy model in SDE mode, started at `x0 = (0,0)`, `y0 = 0`.
pub fn toy_model() -> ToyModel {
    ToyModel::new([0.0, 0.0], 0.0, Mode::Sde)
}

/// Toy model with `g` removed.
pub fn toy_ode_model() -> ToyModel {
    ToyModel::new([0.0, 0.0], 0.0, Mode::Ode)
}

impl MultiscaleModel for ToyModel {
    fn slow_dim(&self) -> usize {
        2
    }

    fn fast_dim(&self) -> usize {
        1
    }

    fn mode(&self) -> Mode {
        self.mode
    }

    fn x0(&self) -> &[f64] {
        &self.x0
    }

    fn y0(&self) -> &[f64] {
        &self.y0
    }

    #[inline]
    fn slow_drift(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        out[0] = 1.0 + y[0] - Self::fast_mean(x);
        out[1] = 1.0;
    }

    #[inline]
    fn slow_diffusion(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        let s = (Self::covariance_prefactor(x) * (y[0] * y[0] + 1.0)).sqrt();
        out[0] = s;
        out[1] = 0.0;
        out[2] = s;
        out[3] = s;
    }

    #[inline]
    fn slow_covariance(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        let s2 = Self::covariance_prefactor(x) * (y[0] * y[0] + 1.0);
        out[0] = s2;
        out[1] = s2;
        out[2] = s2;
        out[3] = 2.0 * s2;
    }

    #[inline]
    fn fast_drift(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        out[0] = Self::fast_mean(x) - y[0];
    }

    #[inline]
    fn fast_diffusion(&self, _x: &[f64], _y: &[f64], out: &mut [f64]) {
        out[0] = std::f64::consts::SQRT_2;
    }

    fn oracle(&self) -> Option<&dyn EffectiveOracle> {
        Some(self)
    }
}

impl EffectiveOracle for ToyModel {
    fn drift(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
        out[1] = 1.0;
    }

    fn diffusion(&self, _x: &[f64], out: &mut [f64]) {
        if self.mode == Mode::Sde {
            out.copy_from_slice(&[1.0, 0.0, 1.0, 1.0]);
        }
    }

    fn covariance(&self, _x: &[f64], out: &mut [f64]) {
        match self.mode {
            Mode::Sde => out.copy_from_slice(&[1.0, 1.0, 1.0, 2.0]),
            Mode::Ode => out.fill(0.0),
        }
    }

    fn exact_path(
        &self,
        x0: &[f64],
        horizon: f64,
        n: usize,
        increments: &[Vec<f64>],
    ) -> Vec<Vec<f64>> {
        let mut states = Vec::with_capacity(n + 1);
        let (mut w1, mut w2) = (0.0, 0.0);
        states.push(x0.to_vec());
        for k in 1..=n {
            let t = horizon * k as f64 / n as f64;
            if self.mode == Mode::Sde {
                w1 += increments[k - 1][0];
                w2 += increments[k - 1][1];
            }
            states.push(vec![x0[0] + t + w1, x0[1] + t + w1 + w2]);
        }
        states
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid Heston parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
}

/// Parameters of the mean-reverting corrected Heston model
///
/// ```text
/// dX = r X dt + Σ X dWˣ,            Σ = √Z (1 + Y²)
/// dY = ε⁻¹ Z (m − Y) dt + ν √(2 Z ε⁻¹) dWʸ
/// dZ = κ (θ − Z) dt + σ √Z dWᶻ
/// ```
///
/// `theta_cir` and `sigma_cir` are the CIR level and volatility. The defaults
/// are the reference parameter set, with `epsilon = 10⁻³` and a one-year
/// horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct HestonParams {
    pub x0: f64,
    pub z0: f64,
    pub y0: f64,
    pub m: f64,
    pub nu: f64,
    pub kappa: f64,
    pub r: f64,
    pub theta_cir: f64,
    pub sigma_cir: f64,
    pub rho_xy: f64,
    pub rho_yz: f64,
    pub rho_xz: f64,
    pub epsilon: f64,
    pub horizon: f64,
}

impl Default for HestonParams {
    fn default() -> Self {
        HestonParams {
            x0: 100.0,
            z0: 0.24,
            y0: 0.06,
            m: 0.06,
            nu: 1.0,
            kappa: 1.0,
            r: 0.05,
            theta_cir: 1.0,
            sigma_cir: 0.39,
            rho_xy: 0.0,
            rho_yz: 0.0,
            rho_xz: -0.33,
            epsilon: 1e-3,
            horizon: 1.0,
        }
    }
}

impl HestonParams {
    /// Zero is allowed for `z0` and `kappa·theta_cir` so that the variance
    /// can be pinned at zero for deterministic checks.
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |name: &'static str, reason: &str| {
            Err(ModelError::InvalidParameter {
                name,
                reason: reason.to_string(),
            })
        };
        let all = [
            self.x0,
            self.z0,
            self.y0,
            self.m,
            self.nu,
            self.kappa,
            self.r,
            self.theta_cir,
            self.sigma_cir,
            self.rho_xy,
            self.rho_yz,
            self.rho_xz,
            self.epsilon,
            self.horizon,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return bad("*", "all parameters must be finite");
        }
        if self.z0 < 0.0 {
            return bad("z0", "must be nonnegative");
        }
        if self.kappa * self.theta_cir < 0.0 {
            return bad("kappa*theta_cir", "must be nonnegative");
        }
        if self.rho_xz.abs() >= 1.0 {
            return bad("rho_xz", "must satisfy |rho_xz| < 1");
        }
        if self.rho_xy.abs() > 1.0 {
            return bad("rho_xy", "must lie in [-1, 1]");
        }
        if self.rho_yz.abs() > 1.0 {
            return bad("rho_yz", "must lie in [-1, 1]");
        }
        if self.nu < 0.0 || self.sigma_cir < 0.0 {
            return bad("nu/sigma_cir", "volatilities must be nonnegative");
        }
        if self.epsilon <= 0.0 {
            return bad("epsilon", "must be positive");
        }
        if self.horizon <= 0.0 {
            return bad("horizon", "must be positive");
        }
        Ok(())
    }

    fn correlation(&self) -> Matrix {
        Matrix::from_rows(&[
            &[1.0, self.rho_xy, self.rho_xz],
            &[self.rho_xy, 1.0, self.rho_yz],
            &[self.rho_xz, self.rho_yz, 1.0],
        ])
    }
}

/// Effective-scale view of the Heston model: slow state `(X, Z)`, fast `Y`.
///
/// The variance enters every square root and the fast coefficients through
/// `Z⁺ = max(Z, 0)` (full truncation).
#[derive(Debug, Clone, PartialEq)]
pub struct HestonModel {
    params: HestonParams,
    x0: [f64; 2],
    y0: [f64; 1],
    rho_complement: f64,
}

pub fn heston_model(params: HestonParams) -> Result<HestonModel, ModelError> {
    params.validate()?;
    Ok(HestonModel {
        x0: [params.x0, params.z0],
        y0: [params.y0],
        rho_complement: (1.0 - params.rho_xz * params.rho_xz).sqrt(),
        params,
    })
}

impl HestonModel {
    pub fn params(&self) -> &HestonParams {
        &self.params
    }

    /// `Σ = √Z⁺ (1 + y²)`
    pub fn volatility(z: f64, y: f64) -> f64 {
        z.max(0.0).sqrt() * (1.0 + y * y)
    }
}

impl MultiscaleModel for HestonModel {
    fn slow_dim(&self) -> usize {
        2
    }

    fn fast_dim(&self) -> usize {
        1
    }

    fn mode(&self) -> Mode {
        Mode::Sde
    }

    fn x0(&self) -> &[f64] {
        &self.x0
    }

    fn y0(&self) -> &[f64] {
        &self.y0
    }

    #[inline]
    fn slow_drift(&self, x: &[f64], _y: &[f64], out: &mut [f64]) {
        let p = &self.params;
        out[0] = p.r * x[0];
        out[1] = p.kappa * (p.theta_cir - x[1]);
    }

    #[inline]
    fn slow_diffusion(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        let sz = x[1].max(0.0).sqrt();
        let vol = sz * (1.0 + y[0] * y[0]);
        out[0] = vol * x[0];
        out[1] = 0.0;
        out[2] = self.params.sigma_cir * sz * self.params.rho_xz;
        out[3] = self.params.sigma_cir * sz * self.rho_complement;
    }

    #[inline]
    fn slow_covariance(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        let zp = x[1].max(0.0);
        let lev = 1.0 + y[0] * y[0];
        let a = zp.sqrt() * lev * x[0];
        let s = self.params.sigma_cir;
        let cross = a * s * zp.sqrt() * self.params.rho_xz;
        out[0] = a * a;
        out[1] = cross;
        out[2] = cross;
        out[3] = s * s * zp;
    }

    #[inline]
    fn fast_drift(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        out[0] = x[1].max(0.0) * (self.params.m - y[0]);
    }

    #[inline]
    fn fast_diffusion(&self, x: &[f64], _y: &[f64], out: &mut [f64]) {
        out[0] = self.params.nu * (2.0 * x[1].max(0.0)).sqrt();
    }
}

/// Euler-Maruyama stepper for the full `(X, Y, Z)` ε-system.
#[derive(Debug, Clone, PartialEq)]
pub struct HestonSystem {
    params: HestonParams,
    correlation_root: Matrix,
}

pub fn heston_full_system(params: HestonParams) -> Result<HestonSystem, ModelError> {
    params.validate()?;
    let correlation_root = cholesky(&params.correlation())
        .map_err(|e| ModelError::InvalidParameter {
            name: "rho_xy/rho_yz/rho_xz",
            reason: format!("correlation matrix not positive definite: {e}"),
        })?
        .into_matrix();
    Ok(HestonSystem {
        params,
        correlation_root,
    })
}

impl HestonSystem {
    pub fn params(&self) -> &HestonParams {
        &self.params
    }

    pub fn initial_state(&self) -> [f64; 3] {
        [self.params.x0, self.params.y0, self.params.z0]
    }

    /// Drift of `(X, Y, Z)` at scale separation `epsilon`.
    pub fn drift(&self, s: [f64; 3], epsilon: f64) -> [f64; 3] {
        let p = &self.params;
        let zp = s[2].max(0.0);
        [
            p.r * s[0],
            zp * (p.m - s[1]) / epsilon,
            p.kappa * (p.theta_cir - s[2]),
        ]
    }

    /// Diagonal diffusion magnitudes before correlation is applied.
    pub fn diffusion(&self, s: [f64; 3], epsilon: f64) -> [f64; 3] {
        let p = &self.params;
        let zp = s[2].max(0.0);
        [
            HestonModel::volatility(s[2], s[1]) * s[0],
            p.nu * (2.0 * zp / epsilon).sqrt(),
            p.sigma_cir * zp.sqrt(),
        ]
    }

    /// Maps three independent standard normals to correlated `(ξˣ, ξʸ, ξᶻ)`.
    pub fn correlate(&self, iid: [f64; 3]) -> [f64; 3] {
        let l = &self.correlation_root;
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..=i).map(|j| l[(i, j)] * iid[j]).sum();
        }
        out
    }

    /// One Euler-Maruyama step with independent standard normals `iid`.
    pub fn step(&self, s: [f64; 3], dt: f64, epsilon: f64, iid: [f64; 3]) -> [f64; 3] {
        let mu = self.drift(s, epsilon);
        let sig = self.diffusion(s, epsilon);
        let xi = self.correlate(iid);
        let sq = dt.sqrt();
        [
            s[0] + mu[0] * dt + sig[0] * sq * xi[0],
            s[1] + mu[1] * dt + sig[1] * sq * xi[1],
            s[2] + mu[2] * dt + sig[2] * sq * xi[2],
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::{gaussian_stream, sample_correlation, Chain, StreamKey};

    #[test]
    fn toy_oracle_values() {
        let toy = toy_model();
        let oracle = toy.oracle().unwrap();
        let mut f = [0.0; 2];
        oracle.drift(&[0.0, 0.0], &mut f);
        assert_eq!(f, [1.0, 1.0]);
        let mut h = [0.0; 4];
        oracle.covariance(&[3.0, -1.0], &mut h);
        assert_eq!(h, [1.0, 1.0, 1.0, 2.0]);
        let path = oracle.exact_path(&[0.0, 0.0], 1.0, 1, &[vec![0.0, 0.0]]);
        assert_eq!(path[1], vec![1.0, 1.0]);
    }

    #[test]
    fn toy_effective_coefficients_by_quadrature() {
        // Independent check of F and H: integrate f and h against N(c(x), 1)
        // with a fine midpoint rule.
        let toy = toy_model();
        for x in [[0.0, 0.0], [1.5, -0.5], [3.0, 2.0]] {
            let c = ToyModel::fast_mean(&x);
            let (mut f_int, mut h_int, mut mass) = ([0.0; 2], [0.0; 4], 0.0);
            let dy = 1e-3;
            let mut y = c - 12.0;
            while y < c + 12.0 {
                let ym = y + 0.5 * dy;
                let w = (-(ym - c) * (ym - c) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt() * dy;
                let (mut f, mut h) = ([0.0; 2], [0.0; 4]);
                toy.slow_drift(&x, &[ym], &mut f);
                toy.slow_covariance(&x, &[ym], &mut h);
                for i in 0..2 {
                    f_int[i] += w * f[i];
                }
                for i in 0..4 {
                    h_int[i] += w * h[i];
                }
                mass += w;
                y += dy;
            }
            assert!((mass - 1.0).abs() < 1e-9);
            assert!((f_int[0] - 1.0).abs() < 1e-8 && (f_int[1] - 1.0).abs() < 1e-8);
            for (a, b) in h_int.iter().zip([1.0, 1.0, 1.0, 2.0]) {
                assert!((a - b).abs() < 1e-8, "{h_int:?}");
            }
        }
    }

    #[test]
    fn toy_covariance_matches_gram_of_diffusion() {
        let toy = toy_model();
        for (x, y) in [([0.3, -2.0], 1.7), ([0.0, 0.0], -4.0), ([10.0, 1.0], 0.0)] {
            let mut g = [0.0; 4];
            toy.slow_diffusion(&x, &[y], &mut g);
            let gram = Matrix::from_row_major(2, 2, g.to_vec()).gram();
            let mut h = [0.0; 4];
            toy.slow_covariance(&x, &[y], &mut h);
            for (a, b) in gram.as_slice().iter().zip(h) {
                assert!((a - b).abs() <= 1e-14 * b.abs().max(1.0));
            }
            let hm = Matrix::from_row_major(2, 2, h.to_vec());
            assert_eq!(hm.asymmetry(), 0.0);
            assert!(hm.symmetric_eigenvalues()[0] >= 0.0);
        }
    }

    #[test]
    fn heston_slow_coefficients() {
        let model = heston_model(HestonParams::default()).unwrap();
        let mut f = [0.0; 2];
        model.slow_drift(&[100.0, 0.24], &[1.3], &mut f);
        assert!((f[0] - 5.0).abs() < 1e-12 && (f[1] - 0.76).abs() < 1e-12);
        let vol = HestonModel::volatility(0.24, 0.06);
        assert!((vol - 0.24f64.sqrt() * 1.0036).abs() < 1e-15);
        assert!((vol - 0.49166).abs() < 1e-5);
        let mut g = [1.0; 4];
        model.slow_diffusion(&[100.0, 0.0], &[0.5], &mut g);
        assert_eq!(&g[2..], &[0.0, 0.0]);
    }

    #[test]
    fn heston_covariance_matches_default_gram() {
        struct ViaGram(HestonModel);
        impl MultiscaleModel for ViaGram {
            fn slow_dim(&self) -> usize { 2 }
            fn fast_dim(&self) -> usize { 1 }
            fn mode(&self) -> Mode { Mode::Sde }
            fn x0(&self) -> &[f64] { self.0.x0() }
            fn y0(&self) -> &[f64] { self.0.y0() }
            fn slow_drift(&self, x: &[f64], y: &[f64], out: &mut [f64]) { self.0.slow_drift(x, y, out) }
            fn slow_diffusion(&self, x: &[f64], y: &[f64], out: &mut [f64]) { self.0.slow_diffusion(x, y, out) }
            fn fast_drift(&self, x: &[f64], y: &[f64], out: &mut [f64]) { self.0.fast_drift(x, y, out) }
            fn fast_diffusion(&self, x: &[f64], y: &[f64], out: &mut [f64]) { self.0.fast_diffusion(x, y, out) }
        }
        let model = heston_model(HestonParams::default()).unwrap();
        let reference = ViaGram(model.clone());
        for (x, y) in [([100.0, 0.24], 0.06), ([80.0, 1.3], -2.0), ([120.0, -0.1], 1.0)] {
            let (mut a, mut b) = ([0.0; 4], [0.0; 4]);
            model.slow_covariance(&x, &[y], &mut a);
            reference.slow_covariance(&x, &[y], &mut b);
            for (u, v) in a.iter().zip(b) {
                assert!((u - v).abs() <= 1e-12 * v.abs().max(1.0), "{a:?} {b:?}");
            }
        }
    }

    #[test]
    fn heston_continuous_at_zero_variance() {
        let model = heston_model(HestonParams::default()).unwrap();
        let eval = |z: f64| {
            let (mut f, mut g, mut b, mut s) = ([0.0; 2], [0.0; 4], [0.0], [0.0]);
            let x = [100.0, z];
            model.slow_drift(&x, &[0.3], &mut f);
            model.slow_diffusion(&x, &[0.3], &mut g);
            model.fast_drift(&x, &[0.3], &mut b);
            model.fast_diffusion(&x, &[0.3], &mut s);
            [f[0], f[1], g[0], g[2], g[3], b[0], s[0]]
        };
        let at_zero = eval(0.0);
        for h in [1e-8, -1e-8, 1e-12, -1e-12] {
            let near = eval(h);
            // Hölder-1/2 through √Z⁺, scaled by X = 100
            for (i, (a, b)) in at_zero.iter().zip(near).enumerate() {
                if h < 0.0 && i != 1 {
                    assert_eq!(*a, b, "{at_zero:?} {near:?}");
                }
                assert!((a - b).abs() < 200.0 * h.abs().sqrt() + 1e-9, "{at_zero:?} {near:?}");
            }
        }
    }

    #[test]
    fn heston_parameter_validation() {
        let mut p = HestonParams::default();
        p.rho_xz = -1.0;
        assert!(heston_model(p).is_err());
        let mut p = HestonParams::default();
        p.z0 = -0.1;
        assert!(heston_model(p).is_err());
        let mut p = HestonParams::default();
        p.epsilon = 0.0;
        assert!(heston_full_system(p).is_err());
        let mut p = HestonParams::default();
        p.rho_xy = 0.9;
        p.rho_yz = 0.9;
        p.rho_xz = -0.9;
        assert!(heston_full_system(p).is_err());
    }

    #[test]
    fn full_system_zero_noise_step() {
        let sys = heston_full_system(HestonParams::default()).unwrap();
        let s = sys.step(sys.initial_state(), 0.01, 1.0, [0.0; 3]);
        assert!((s[0] - 100.05).abs() < 1e-12);
        assert_eq!(s[1], 0.06);
        assert!((s[2] - 0.2476).abs() < 1e-12);
    }

    #[test]
    fn full_system_epsilon_scaling() {
        let sys = heston_full_system(HestonParams::default()).unwrap();
        let state = [100.0, 0.8, 0.3];
        let slow = sys.drift(state, 1.0)[1];
        let fast = sys.drift(state, 1e-3)[1];
        assert!((fast / slow - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn full_system_correlation_wiring() {
        let sys = heston_full_system(HestonParams::default()).unwrap();
        let mut stream = gaussian_stream(StreamKey::new(1, 0, 0, Chain::FullSystemFast));
        let n = 100_000;
        let (mut xs, mut ys, mut zs) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for _ in 0..n {
            let mut iid = [0.0; 3];
            stream.fill(&mut iid);
            let xi = sys.correlate(iid);
            xs.push(xi[0]);
            ys.push(xi[1]);
            zs.push(xi[2]);
        }
        assert!((sample_correlation(&xs, &zs) + 0.33).abs() < 0.013);
        assert!(sample_correlation(&xs, &ys).abs() < 0.013);
        assert!(sample_correlation(&ys, &zs).abs() < 0.013);
    }
}
