use msds_core::cholesky::{cholesky, first_order_delta, perturbation_bound};
use msds_core::estimator::{
    fast_chain_step, ErgodicEstimator, EstimatorConfig, ExtrapolationWeights,
};
use msds_core::linalg::Matrix;
use msds_core::model::{toy_model, Mode, MultiscaleModel, ToyModel};
use msds_core::random::{gaussian_stream, Chain, StreamKey};
use msds_core::schedule::{InnerLengthSchedule, StepSchedule};
use msds_core::solver::{msds_path, Coefficients, PathKey, SlowGrid};
use proptest::prelude::*;

/// Toy model whose slow drift is replaced by `a·f + c`.
struct Affine {
    inner: ToyModel,
    a: f64,
    c: f64,
}

impl MultiscaleModel for Affine {
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
        self.inner.x0()
    }
    fn y0(&self) -> &[f64] {
        self.inner.y0()
    }
    fn slow_drift(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        self.inner.slow_drift(x, y, out);
        for v in out {
            *v = self.a * *v + self.c;
        }
    }
    fn slow_diffusion(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        self.inner.slow_diffusion(x, y, out)
    }
    fn slow_covariance(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        self.inner.slow_covariance(x, y, out)
    }
    fn fast_drift(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        self.inner.fast_drift(x, y, out)
    }
    fn fast_diffusion(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        self.inner.fast_diffusion(x, y, out)
    }
}

fn spd(d: usize, entries: &[f64], shift: f64) -> Matrix {
    let a = Matrix::from_row_major(d, d, entries[..d * d].to_vec());
    a.gram().add(&Matrix::identity(d).scale(shift))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cached_sums_match_fresh(gamma0 in 0.1f64..3.0, theta in 0.05f64..0.95, m in 1usize..5000, r in 0.5f64..3.0) {
        let s = StepSchedule::power_law(gamma0, theta).unwrap();
        let fresh = s.uncached_gamma_sum(m, r).unwrap();
        prop_assert_eq!(s.gamma_sum(m, r).unwrap().to_bits(), fresh.to_bits());
        prop_assert!(s.gamma_sum(m + 1, r).unwrap() > fresh);
    }

    #[test]
    fn inner_length_is_monotone(m1 in 0.1f64..10.0, theta in 0.05f64..0.9, n in 1usize..2000) {
        let rule = InnerLengthSchedule::new(m1, theta).unwrap();
        prop_assert!(rule.inner_length(n + 1).unwrap() >= rule.inner_length(n).unwrap());
    }

    #[test]
    fn table_weights_end_at_total(theta in 0.05f64..0.95, m in 1usize..3000) {
        let s = StepSchedule::power_law(1.0, theta).unwrap();
        let t = s.table(m).unwrap();
        prop_assert_eq!(t.weights()[0], 1.0);
        let last = t.weights()[m - 1];
        prop_assert!((last - t.steps()[m - 1] / t.total()).abs() <= 1e-15 * last);
    }

    #[test]
    fn constant_drift_is_exact(c in -50.0f64..50.0, theta in 0.1f64..0.9, m in 1usize..400, seed in any::<u64>()) {
        let model = Affine { inner: toy_model(), a: 0.0, c };
        let est = ErgodicEstimator::new(EstimatorConfig::new(StepSchedule::power_law(1.0, theta).unwrap(), m)).unwrap();
        let mut s = gaussian_stream(StreamKey::new(seed, 0, 0, Chain::FastPrimary));
        let e = est.estimate(&model, &[0.1, 0.2], 0, &mut s, None).unwrap();
        prop_assert_eq!(e.f_hat, vec![c, c]);
        let extra = ErgodicEstimator::new(
            EstimatorConfig::new(StepSchedule::power_law(1.0, theta).unwrap(), m).extrapolated(2.5),
        ).unwrap();
        let mut s1 = gaussian_stream(StreamKey::new(seed, 0, 0, Chain::FastLambda));
        let mut s2 = gaussian_stream(StreamKey::new(seed, 0, 0, Chain::FastPrimary));
        let e = extra.estimate_extrapolated(&model, &[0.1, 0.2], 0, &mut s1, &mut s2, None).unwrap();
        prop_assert_eq!(e.f_hat, vec![c, c]);
    }

    #[test]
    fn estimates_commute_with_affine_maps(a in -5.0f64..5.0, c in -5.0f64..5.0, seed in any::<u64>()) {
        let toy = toy_model();
        let est = ErgodicEstimator::new(EstimatorConfig::new(StepSchedule::power_law(1.0, 0.4).unwrap(), 500)).unwrap();
        let x = [0.3, -0.6];
        let key = StreamKey::new(seed, 1, 2, Chain::FastPrimary);
        let base = est.estimate(&toy, &x, 0, &mut gaussian_stream(key), None).unwrap();
        let mapped = est.estimate(&Affine { inner: toy.clone(), a, c }, &x, 0, &mut gaussian_stream(key), None).unwrap();
        for i in 0..2 {
            let expected = a * base.f_hat[i] + c;
            let scale = (a * base.f_hat[i]).abs() + c.abs() + 1.0;
            prop_assert!((mapped.f_hat[i] - expected).abs() <= 1e-12 * scale);
        }
        prop_assert_eq!(mapped.h_hat, base.h_hat);
    }

    #[test]
    fn extrapolation_weights_are_affine(lambda in 1.01f64..50.0, half in 2u32..6, v in -1e6f64..1e6) {
        let w = ExtrapolationWeights::new(lambda, 2 * half).unwrap();
        prop_assert!((w.fine + w.coarse - 1.0).abs() <= 1e-15 * w.fine.abs().max(1.0));
        prop_assert_eq!(w.combine(v, v), v);
    }

    #[test]
    fn cholesky_round_trip(d in 1usize..=10, entries in prop::collection::vec(-1.0f64..1.0, 100), shift in 0.01f64..2.0) {
        let h = spd(d, &entries, shift);
        let g = cholesky(&h).unwrap();
        prop_assert!(g.as_matrix().is_lower_triangular());
        prop_assert!((0..d).all(|i| g.as_matrix()[(i, i)] > 0.0));
        let err = g.reconstruct().sub(&h).frobenius_norm() / h.frobenius_norm();
        prop_assert!(err <= 1e-12, "relative error {}", err);
    }

    #[test]
    fn perturbation_bound_holds(
        d in 1usize..=6,
        entries in prop::collection::vec(-1.0f64..1.0, 36),
        dir in prop::collection::vec(-1.0f64..1.0, 36),
        size in 0.001f64..0.45,
    ) {
        let h = spd(d, &entries, 0.2);
        let g = cholesky(&h).unwrap();
        let dir = Matrix::from_row_major(d, d, dir[..d * d].to_vec()).symmetrized();
        prop_assume!(dir.frobenius_norm() > 1e-6);
        let lambda_min = h.symmetric_eigenvalues()[0];
        let dh = dir.scale(size * lambda_min / dir.frobenius_norm());
        let bound = perturbation_bound(&h, &g, &dh).unwrap();
        let actual = cholesky(&h.add(&dh)).unwrap().as_matrix().sub(g.as_matrix()).frobenius_norm();
        prop_assert!(actual <= bound * (1.0 + 1e-12), "{} > {}", actual, bound);
    }

    #[test]
    fn first_order_delta_is_linear(
        d in 1usize..=5,
        entries in prop::collection::vec(-1.0f64..1.0, 25),
        dir in prop::collection::vec(-1.0f64..1.0, 25),
        s in -3.0f64..3.0,
    ) {
        let g = cholesky(&spd(d, &entries, 0.5)).unwrap();
        let dir = Matrix::from_row_major(d, d, dir[..d * d].to_vec()).symmetrized();
        let a = first_order_delta(&g, &dir).scale(s);
        let b = first_order_delta(&g, &dir.scale(s));
        prop_assert!(a.sub(&b).frobenius_norm() <= 1e-12 * (1.0 + a.frobenius_norm()));
        // G·ΔGᵀ + ΔG·Gᵀ reproduces ΔH
        let dg = first_order_delta(&g, &dir);
        let gm = g.as_matrix();
        let lin = gm.matmul(&dg.transpose()).add(&dg.matmul(&gm.transpose()));
        prop_assert!(lin.sub(&dir).frobenius_norm() <= 1e-9 * (1.0 + dir.frobenius_norm()));
    }

    #[test]
    fn paths_are_deterministic(seed in any::<u64>(), path in 0u64..1000) {
        let toy = toy_model();
        let grid = SlowGrid::new(4, 1.0).unwrap();
        let est = ErgodicEstimator::new(EstimatorConfig::new(StepSchedule::power_law(1.0, 0.5).unwrap(), 16)).unwrap();
        let a = msds_path(&toy, &grid, Coefficients::Estimated(&est), PathKey::new(seed, path)).unwrap();
        let b = msds_path(&toy, &grid, Coefficients::Estimated(&est), PathKey::new(seed, path)).unwrap();
        prop_assert_eq!(a.ops, 64);
        prop_assert_eq!(a, b);
    }
}

#[test]
fn toy_chain_stays_bounded() {
    let toy = toy_model();
    let sched = StepSchedule::power_law(1.0, 1.0 / 3.0).unwrap();
    let steps: Vec<f64> = (1..=100_000).map(|k| sched.gamma(k).unwrap()).collect();
    let x = [0.0, 0.0];
    for seed in 0..100 {
        let mut s = gaussian_stream(StreamKey::new(seed, 0, 0, Chain::FastPrimary));
        let mut y = toy.y0().to_vec();
        let mut sup = 0.0f64;
        for &g in &steps {
            y = fast_chain_step(&toy, &x, &y, g, &[s.next_normal()]);
            sup = sup.max(y[0].abs());
        }
        assert!(sup < 20.0, "seed {seed}: sup {sup}");
    }
}

#[test]
fn slow_increment_variance_matches_mesh() {
    let grid = SlowGrid::new(10, 1.0).unwrap();
    let paths = 5000;
    let mut sum_sq = vec![0.0; 10];
    for p in 0..paths {
        for (k, inc) in msds_core::solver::slow_increments(PathKey::new(77, p), 1, &grid).iter().enumerate() {
            sum_sq[k] += inc[0] * inc[0];
        }
    }
    for s in sum_sq {
        // variance 0.1, standard error 0.1·√(2/5000) = 0.002
        assert!((s / paths as f64 - 0.1).abs() < 0.01);
    }
}
