mod common;

use common::rng;
use isac_core::linalg::{CMatrix, CVector, C64};
use isac_core::sbl::{
    dense_sbl, e_step, expected_residual, objective, prune_posterior_mean, update_beta, update_gamma, DenseSblConfig,
    SblPrior,
};
use isac_core::signal::complex_gaussian;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

/// Dense reference inverse through nalgebra's LU, independent of the library's factorization.
fn reference_posterior(z: &CMatrix, y: &CVector, gamma: &[f64], beta: f64) -> (CVector, CMatrix) {
    let p = z.ncols();
    let prec = z.ad_mul(z) * C64::new(beta, 0.0) + DMatrix::from_fn(p, p, |r, c| if r == c { C64::new(gamma[r], 0.0) } else { C64::new(0.0, 0.0) });
    let sigma = prec.lu().try_inverse().unwrap();
    let mu = &sigma * z.ad_mul(y) * C64::new(beta, 0.0);
    (mu, sigma)
}

fn instance(seed: u64, m: usize, t: usize, p: usize) -> (CMatrix, CVector, Vec<f64>, f64) {
    let mut r = rng(seed);
    let z = CMatrix::from_fn(m * t, p, |_, _| complex_gaussian(&mut r, 1.0));
    let y = CVector::from_fn(m * t, |_, _| complex_gaussian(&mut r, 1.0));
    let gamma = (0..p).map(|_| r.random_range(0.1..10.0)).collect();
    (z, y, gamma, r.random_range(0.5..50.0))
}

#[test]
fn e_step_matches_dense_inverse() {
    for seed in 0..20 {
        let (z, y, gamma, beta) = instance(seed, 4, 8, 12);
        let post = e_step(&z.ad_mul(&z), &z.ad_mul(&y), &gamma, beta, 0).unwrap();
        let (mu, sigma) = reference_posterior(&z, &y, &gamma, beta);
        assert!((&post.mu - &mu).norm() <= 1e-12 * mu.norm());
        assert!((&post.sigma - &sigma).norm() <= 1e-12 * sigma.norm());
        assert_eq!(post.active.len(), 12);
    }
}

#[test]
fn pruned_coefficients_drop_out() {
    let (z, y, mut gamma, beta) = instance(3, 4, 8, 10);
    gamma[2] = f64::INFINITY;
    gamma[7] = f64::INFINITY;
    let post = e_step(&z.ad_mul(&z), &z.ad_mul(&y), &gamma, beta, 0).unwrap();
    assert_eq!(post.mu[2], C64::new(0.0, 0.0));
    assert!(post.sigma.row(7).iter().all(|v| v.norm() == 0.0));
    // same as solving on the remaining columns
    let keep: Vec<usize> = (0..10).filter(|i| *i != 2 && *i != 7).collect();
    let zs = CMatrix::from_fn(z.nrows(), keep.len(), |r, c| z[(r, keep[c])]);
    let gs: Vec<f64> = keep.iter().map(|&i| gamma[i]).collect();
    let (mu, _) = reference_posterior(&zs, &y, &gs, beta);
    for (c, &i) in keep.iter().enumerate() {
        assert!((post.mu[i] - mu[c]).norm() < 1e-12 * mu.norm());
    }
    let g2 = update_gamma(&post.mu, &post.sigma, &gamma, &SblPrior::default());
    assert!(g2[2].is_infinite() && g2[7].is_infinite());
}

#[test]
fn hyperparameter_updates_have_closed_forms() {
    let (z, y, gamma, beta) = instance(5, 4, 8, 6);
    let post = e_step(&z.ad_mul(&z), &z.ad_mul(&y), &gamma, beta, 0).unwrap();
    let prior = SblPrior { a_gamma: 0.3, b_gamma: 0.2, beta_max: 1e12 };
    let g = update_gamma(&post.mu, &post.sigma, &gamma, &prior);
    for i in 0..6 {
        let want = 1.3 / (0.2 + post.sigma[(i, i)].re + post.mu[i].norm_sqr());
        assert!((g[i] - want).abs() < 1e-14 * want);
    }
    // E‖y − Zω‖² = ‖y − Zμ‖² + tr(Z Σ Zᴴ)
    let er = expected_residual(y.norm_squared(), &z.ad_mul(&y), &z.ad_mul(&z), &post);
    let want = (&y - &z * &post.mu).norm_squared() + (&z * &post.sigma * z.adjoint()).trace().re;
    assert!((er - want).abs() < 1e-10 * want);
    assert_eq!(update_beta(32, 16.0, &prior), 2.0);
    assert_eq!(update_beta(32, 0.0, &prior), 1e12);
}

#[test]
fn objective_matches_log_evidence() {
    // −ln det(C) − yᴴC⁻¹y with C = β⁻¹I + ZΓ⁻¹Zᴴ equals the library objective up to
    // terms that do not depend on y
    let (z, y, gamma, beta) = instance(8, 2, 4, 5);
    let q = z.nrows();
    let prior = SblPrior { a_gamma: 0.0, b_gamma: 0.0, beta_max: 1e12 };
    let post = e_step(&z.ad_mul(&z), &z.ad_mul(&y), &gamma, beta, 0).unwrap();
    let l = objective(q, y.norm_squared(), &z.ad_mul(&y), &z.ad_mul(&z), &post, &gamma, beta, &prior);
    let ginv = DMatrix::from_fn(5, 5, |r, c| if r == c { C64::new(1.0 / gamma[r], 0.0) } else { C64::new(0.0, 0.0) });
    let c = CMatrix::identity(q, q) * C64::new(1.0 / beta, 0.0) + &z * ginv * z.adjoint();
    let lu = c.clone().lu();
    let quad = y.dotc(&lu.solve(&y).unwrap()).re;
    let logdet = lu.determinant().norm().ln();
    assert!((l - (-logdet - quad)).abs() < 1e-9 * l.abs().max(1.0));
}

#[test]
fn dense_sbl_recovers_a_sparse_vector() {
    let mut r = rng(11);
    let (q, p) = (40, 30);
    let a = CMatrix::from_fn(q, p, |_, _| complex_gaussian(&mut r, 1.0 / q as f64));
    let mut x = CVector::zeros(p);
    for i in [3, 17, 25] {
        x[i] = complex_gaussian(&mut r, 1.0);
    }
    let y = &a * &x + CVector::from_fn(q, |_, _| complex_gaussian(&mut r, 1e-6));
    let out = dense_sbl(&a, &y, &DenseSblConfig::default()).unwrap();
    assert!((&out.posterior.mu - &x).norm_squared() / x.norm_squared() < 1e-3);
    for w in out.objective.windows(2) {
        assert!(w[1] >= w[0] - 1e-8 * w[0].abs().max(1.0));
    }
}

proptest! {
    #[test]
    fn pruning_keeps_large_entries(v in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..20), delta in 0.0f64..0.99) {
        let mu = CVector::from_iterator(v.len(), v.iter().map(|(a, b)| C64::new(*a, *b)));
        let max = mu.iter().map(|z| z.norm()).fold(0.0, f64::max);
        let out = prune_posterior_mean(&mu, delta);
        for (a, b) in mu.iter().zip(out.iter()) {
            if a.norm() > delta * max { prop_assert_eq!(a, b); } else { prop_assert_eq!(b.norm(), 0.0); }
        }
    }
}
