mod common;

use common::{fixed_scene, multi_scene, rel_err, rel_err_m};
use isac_core::linalg::{vectorize, CMatrix, CVector};
use isac_core::operator::{stack_bands, ColumnTag};
use isac_core::scma::ScmaCodebook;
use isac_core::signal::complex_gaussian;
use isac_core::FixedSiteOperator;
use rand::SeedableRng;

#[test]
fn fixed_site_factored_matches_dense() {
    let s = fixed_scene(1, false, 12, 3, 0.5, 20.0);
    let x = s.frame.transmitted();
    let op = s.problem.operator(&x).unwrap();
    let dense = op.to_dense();
    assert_eq!(dense.matrix.shape(), (8 * 12, op.cols()));
    let mut r = common::rng(7);
    let omega = CVector::from_fn(op.cols(), |_, _| complex_gaussian(&mut r, 1.0));
    let y = CMatrix::from_fn(8, 12, |_, _| complex_gaussian(&mut r, 1.0));
    assert!(rel_err(&vectorize(&op.apply(&omega)), &(&dense.matrix * &omega)) < 1e-12);
    assert!(rel_err(&op.adjoint_apply(&y), &dense.matrix.ad_mul(&vectorize(&y))) < 1e-12);
    assert!(rel_err_m(&op.gram(), &dense.matrix.ad_mul(&dense.matrix)) < 1e-12);
    for col in [0, 5, op.cols() - 1] {
        assert!(rel_err(&op.column(col), &dense.matrix.column(col).into_owned()) < 1e-14);
    }
    // symbol-free channel times symbols is the measurement
    let h = op.channel(&omega);
    let mut hx = h.clone();
    for (t, mut c) in hx.column_iter_mut().enumerate() {
        c *= x[t];
    }
    assert!(rel_err_m(&hx, &op.apply(&omega)) < 1e-12);
}

#[test]
fn fixed_site_tags_follow_grid_order() {
    let s = fixed_scene(1, false, 4, 3, 0.5, 20.0);
    let op = s.problem.operator(&s.frame.transmitted()).unwrap();
    let tags = op.to_dense().columns;
    assert_eq!(tags[0], ColumnTag::FixedSite { ris: 0, g1: 0, g2: 0, g3: 0 });
    assert_eq!(tags[1 + 3 * (2 + 3 * 1)], ColumnTag::FixedSite { ris: 0, g1: 1, g2: 2, g3: 1 });
    assert_eq!(tags[27], ColumnTag::FixedSite { ris: 1, g1: 0, g2: 0, g3: 0 });
    assert_eq!(op.locate(30), (1, 3));
}

#[test]
fn fixed_site_operator_rejects_mismatched_frames() {
    let s = fixed_scene(1, false, 4, 3, 0.5, 20.0);
    let x = s.frame.transmitted();
    assert!(FixedSiteOperator::new(8, &s.problem.ris, &s.problem.grids, &x[..3]).is_err());
    assert!(FixedSiteOperator::new(8, &s.problem.ris, &s.problem.grids[..1], &x).is_err());
}

#[test]
fn fixed_site_set_grid_equals_rebuild() {
    let s = fixed_scene(2, false, 6, 3, 0.5, 20.0);
    let x = s.frame.transmitted();
    let mut op = s.problem.operator(&x).unwrap();
    let mut g = s.problem.grids.clone();
    g[1].arrival[2] += 0.05;
    g[1].departure_v[1] -= 0.02;
    op.set_grid(1, &s.problem.ris[1], &g[1]);
    let fresh = FixedSiteOperator::new(8, &s.problem.ris, &g, &x).unwrap();
    assert!(rel_err_m(&op.gram(), &fresh.gram()) < 1e-14);
    let mut op2 = FixedSiteOperator::new(8, &s.problem.ris, &g, &s.frame.pilot).unwrap();
    op2.set_symbols(&x);
    assert!(rel_err_m(&op2.gram(), &fresh.gram()) < 1e-14);
}

#[test]
fn fixed_site_estimate_of_true_coefficients_is_exact() {
    let s = fixed_scene(3, true, 8, 4, 0.5, 20.0);
    let op = s.problem.operator(&s.frame.transmitted()).unwrap();
    let h = op.bs_ris_channels(&s.truth_omega(), &s.problem.ris, &s.problem.grids);
    for (a, b) in h.iter().zip(&s.truth_channels()) {
        assert!(rel_err_m(a, b) < 1e-12);
    }
}

#[test]
fn multi_ue_factored_matches_dense() {
    let cb = ScmaCodebook::default_codebook();
    let s = multi_scene(1, false, 6, 3, &cb, 15.0);
    let op = isac_core::MultiUeOperator::new(&s.problem.ris, &s.problem.grids, &s.frame.symbols(&cb)).unwrap();
    let dense = op.to_dense();
    assert_eq!(dense.matrix.shape(), (8 * 6 * 4, 6 * 2 * 9));
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let psi = CVector::from_fn(op.cols(), |_, _| complex_gaussian(&mut r, 1.0));
    let y: Vec<CMatrix> = (0..4).map(|_| CMatrix::from_fn(8, 6, |_, _| complex_gaussian(&mut r, 1.0))).collect();
    assert!(rel_err(&stack_bands(&op.apply(&psi)), &(&dense.matrix * &psi)) < 1e-12);
    assert!(rel_err(&op.adjoint_apply(&y), &dense.matrix.ad_mul(&stack_bands(&y))) < 1e-12);
    assert!(rel_err_m(&op.gram(), &dense.matrix.ad_mul(&dense.matrix)) < 1e-12);
    assert_eq!(dense.columns[op.column_index(2, 1, 4)], ColumnTag::MultiUe { ue: 2, ris: 1, cell: 4 });
}

#[test]
fn multi_ue_column_equals_cascade_times_codeword() {
    // a single active cell reproduces the cascaded channel of that UE
    let cb = ScmaCodebook::default_codebook();
    let s = multi_scene(4, true, 5, 8, &cb, 15.0);
    let syms = s.frame.symbols(&cb);
    let op = isac_core::MultiUeOperator::new(&s.problem.ris, &s.problem.grids, &syms).unwrap();
    let psi = s.truth_psi();
    let casc = s.truth_cascades();
    let y = op.apply(&psi);
    for n in 0..4 {
        let mut want = CMatrix::zeros(8, 5);
        for (k, h) in casc.iter().enumerate() {
            for t in 0..5 {
                let mut c = want.column_mut(t);
                c += h.column(t) * syms[k][(n, t)];
            }
        }
        assert!(rel_err_m(&y[n], &want) < 1e-12);
    }
}
