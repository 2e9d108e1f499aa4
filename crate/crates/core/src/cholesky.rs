//! Cholesky factorization of small SPD matrices, together with the tools used
//! to reason about how estimation noise in `H` propagates into `G`.
//!
//! * [`cholesky`]: unpivoted `H = G·Gᵀ`.
//! * [`perturbation_bound`]: Sun's a-priori bound on `‖ΔG‖_F` given `ΔH`.
//! * [`first_order_delta`]: the linearized `ΔG`, computed in factorization
//!   order.
//! * [`factorize_with_repair`]: factorization under a [`FailurePolicy`] for
//!   Monte Carlo estimates of `H` that come out indefinite.

use thiserror::Error;

use crate::linalg::Matrix;

/// Pivots at or below `PIVOT_RELATIVE_TOLERANCE · trace(H)/d` are rejected.
pub const PIVOT_RELATIVE_TOLERANCE: f64 = 1e-12;

const MAX_REPAIR_ATTEMPTS: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CholeskyError {
    #[error("matrix is {rows}x{cols}, expected square")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix has non-finite entries")]
    NonFinite,
    /// `index` is zero-based; `pivot` is the offending value of
    /// `H_ii − Σ_k G_ik²`.
    #[error("matrix is not positive definite (pivot {} = {pivot:e})", index + 1)]
    NotPositiveDefinite { index: usize, pivot: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerturbationError {
    /// `‖H⁻¹‖·‖ΔH‖_F ≥ 1/2`: the perturbation is too large for the bound.
    #[error("perturbation too large for the bound: |H^-1|·|dH|_F = {product} >= 1/2")]
    Inapplicable { product: f64 },
    #[error("dimension mismatch")]
    DimensionMismatch,
    #[error(transparent)]
    Factorization(#[from] CholeskyError),
}

/// Lower-triangular factor with strictly positive diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerTriangular(Matrix);

impl LowerTriangular {
    /// Checks the invariants (square, zero above the diagonal, positive
    /// diagonal).
    pub fn new(m: Matrix) -> Option<Self> {
        let ok = m.is_square()
            && m.is_lower_triangular()
            && (0..m.rows()).all(|i| m[(i, i)] > 0.0);
        ok.then_some(LowerTriangular(m))
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    /// `G·Gᵀ`
    pub fn reconstruct(&self) -> Matrix {
        self.0.gram()
    }
}

fn pivot_tolerance(h: &Matrix) -> f64 {
    PIVOT_RELATIVE_TOLERANCE * (h.trace() / h.rows() as f64)
}

/// Factorizes `(H + Hᵀ)/2`.
pub fn cholesky(h: &Matrix) -> Result<LowerTriangular, CholeskyError> {
    if !h.is_square() {
        return Err(CholeskyError::NotSquare {
            rows: h.rows(),
            cols: h.cols(),
        });
    }
    if h.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(CholeskyError::NonFinite);
    }
    let h = h.symmetrized();
    let d = h.rows();
    let tol = pivot_tolerance(&h);
    let mut g = Matrix::zeros(d, d);
    for j in 0..d {
        let mut pivot = h[(j, j)];
        for k in 0..j {
            pivot -= g[(j, k)] * g[(j, k)];
        }
        if pivot <= tol {
            return Err(CholeskyError::NotPositiveDefinite { index: j, pivot });
        }
        let diag = pivot.sqrt();
        g[(j, j)] = diag;
        for i in j + 1..d {
            let mut s = h[(i, j)];
            for k in 0..j {
                s -= g[(i, k)] * g[(j, k)];
            }
            g[(i, j)] = s / diag;
        }
    }
    Ok(LowerTriangular(g))
}

/// Upper bound on `‖ΔG‖_F` where `H + ΔH = (G + ΔG)(G + ΔG)ᵀ`:
///
/// ```text
/// ‖ΔG‖_F ≤ |G| · √2 κ κ₂(H) / (1 + √(1 − 2 κ₂(H) κ)),
/// κ = ‖ΔH‖_F / |H|,  κ₂(H) = |H|·|H⁻¹|
/// ```
///
/// with `|·|` the spectral norm. Valid only while `|H⁻¹|·‖ΔH‖_F < 1/2`.
pub fn perturbation_bound(
    h: &Matrix,
    g: &LowerTriangular,
    delta_h: &Matrix,
) -> Result<f64, PerturbationError> {
    let d = g.dim();
    if h.rows() != d || !h.is_square() || delta_h.rows() != d || !delta_h.is_square() {
        return Err(PerturbationError::DimensionMismatch);
    }
    let eig = h.symmetrized().symmetric_eigenvalues();
    let (lambda_min, lambda_max) = (eig[0], eig[d - 1]);
    if lambda_min <= 0.0 {
        return Err(CholeskyError::NotPositiveDefinite {
            index: 0,
            pivot: lambda_min,
        }
        .into());
    }
    let dh = delta_h.frobenius_norm();
    let product = dh / lambda_min;
    if product >= 0.5 {
        return Err(PerturbationError::Inapplicable { product });
    }
    let g_norm = g.as_matrix().gram().symmetric_eigenvalues()[d - 1].sqrt();
    let kappa = dh / lambda_max;
    let cond = lambda_max / lambda_min;
    let rel = std::f64::consts::SQRT_2 * kappa * cond / (1.0 + (1.0 - 2.0 * cond * kappa).sqrt());
    Ok(g_norm * rel)
}

/// First-order `ΔG` from `ΔH`, row by row in factorization order:
///
/// ```text
/// ΔG_ij = (ΔH_ij − G_ij ΔG_jj − Σ_{k<j} (ΔG_jk G_ik + ΔG_ik G_jk)) / G_jj   (i > j)
/// ΔG_ii = (ΔH_ii − 2 Σ_{k<i} ΔG_ik G_ik) / (2 G_ii)
/// ```
pub fn first_order_delta(g: &LowerTriangular, delta_h: &Matrix) -> Matrix {
    let g = g.as_matrix();
    let d = g.rows();
    assert_eq!((delta_h.rows(), delta_h.cols()), (d, d), "dimension mismatch");
    let dh = delta_h.symmetrized();
    let mut dg = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..i {
            let mut s = dh[(i, j)] - g[(i, j)] * dg[(j, j)];
            for k in 0..j {
                s -= dg[(j, k)] * g[(i, k)] + dg[(i, k)] * g[(j, k)];
            }
            dg[(i, j)] = s / g[(j, j)];
        }
        let mut s = dh[(i, i)];
        for k in 0..i {
            s -= 2.0 * dg[(i, k)] * g[(i, k)];
        }
        dg[(i, i)] = s / (2.0 * g[(i, i)]);
    }
    dg
}

/// What to do when an estimated covariance is not positive definite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FailurePolicy {
    /// Surface the error.
    Fail,
    /// Shift the diagonal by `|most negative eigenvalue| + tolerance` and
    /// refactorize, repeating until it succeeds.
    #[default]
    Repair,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Factorization {
    /// Lower-triangular square root. All zeros when `H` itself is zero.
    pub factor: Matrix,
    /// 1 if a diagonal shift was needed, else 0.
    pub repairs: u32,
}

pub fn factorize_with_repair(
    h: &Matrix,
    policy: FailurePolicy,
) -> Result<Factorization, CholeskyError> {
    match cholesky(h) {
        Ok(g) => {
            return Ok(Factorization {
                factor: g.into_matrix(),
                repairs: 0,
            })
        }
        Err(e) if policy == FailurePolicy::Fail => return Err(e),
        Err(CholeskyError::NotPositiveDefinite { .. }) => {}
        Err(e) => return Err(e),
    }
    // A vanishing covariance (zero diffusion) has the zero matrix as its root.
    if h.as_slice().iter().all(|v| *v == 0.0) {
        return Ok(Factorization {
            factor: Matrix::zeros(h.rows(), h.cols()),
            repairs: 0,
        });
    }
    let d = h.rows();
    let scale = h
        .as_slice()
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    let mut shifted = h.symmetrized();
    let mut last_err = None;
    for _ in 0..MAX_REPAIR_ATTEMPTS {
        match cholesky(&shifted) {
            Ok(g) => {
                return Ok(Factorization {
                    factor: g.into_matrix(),
                    repairs: 1,
                })
            }
            Err(CholeskyError::NotPositiveDefinite { index, pivot }) => {
                // Shifting by the failing pivot alone leaves a near-zero pivot
                // whose reciprocal inflates every later column.
                let tol = 2.0 * pivot_tolerance(&shifted).abs().max(PIVOT_RELATIVE_TOLERANCE * scale);
                let lambda_min = shifted.symmetric_eigenvalues()[0];
                let shift = (-lambda_min).max(0.0) + tol;
                for i in 0..d {
                    shifted[(i, i)] += shift;
                }
                last_err = Some(CholeskyError::NotPositiveDefinite { index, pivot });
            }
            Err(e) => return Err(e),
        }
    }
    Err(last_err.expect("loop ran at least once"))
}
