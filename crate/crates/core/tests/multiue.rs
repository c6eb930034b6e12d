mod common;

use common::{multi_scene, rel_err, rng};
use isac_core::channel::{angles_from_positions, PathAngles, Point3};
use isac_core::linalg::{CMatrix, CVector, OpCounter, C64};
use isac_core::multiue::{
    cgls, channels_from_full, detect_frame, full_grid_gradient, full_objective, localize_n_ris, localize_two_ris,
    reduce_dimension, reduced_gradient, reduced_objective, run_algorithm3, run_algorithm3_traced, step_reduced_angles,
    Algorithm3Config, StepRule,
};
use isac_core::fixed_site::StepSchedule;
use isac_core::operator::{MultiUeOperator, UeGrid};
use isac_core::scma::{MpaConfig, ScmaCodebook};
use isac_core::signal::complex_gaussian;
use proptest::prelude::*;
use rand::Rng;

const LAMBDA: f64 = 0.0107;
const SPACING: f64 = LAMBDA / 2.0;
const SCALE: f64 = 2.0 * SPACING / LAMBDA;

fn dist(a: &Point3, b: &Point3) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn random_geometry<R: Rng>(r: &mut R, n_r: usize) -> (Point3, Vec<Point3>, Vec<PathAngles>) {
    let ue = [r.random_range(0.0..40.0), r.random_range(-20.0..20.0), r.random_range(0.0..15.0)];
    let q: Vec<Point3> = (0..n_r)
        .map(|_| [r.random_range(-40.0..-5.0), r.random_range(-30.0..30.0), r.random_range(0.0..25.0)])
        .collect();
    let a = q.iter().map(|qi| angles_from_positions(&ue, qi, SPACING, LAMBDA).unwrap()).collect();
    (ue, q, a)
}

#[test]
fn localization_recovers_random_geometries() {
    let mut r = rng(11);
    for _ in 0..1000 {
        let (ue, q, a) = random_geometry(&mut r, 2);
        let closed = localize_two_ris(a[0], a[1], &q[0], &q[1], [SCALE; 2]).unwrap();
        assert!(dist(&closed.position, &ue) < 1e-9 * dist(&ue, &q[0]).max(1.0), "{:?} vs {ue:?}", closed.position);
        let ls = localize_n_ris(&a, &q, &[SCALE; 2]).unwrap();
        for c in 0..3 {
            assert!((ls.position[c] - closed.position[c]).abs() < 1e-10 * (1.0 + ue[c].abs()), "{c}: {:?} {:?} {ue:?} {q:?}", ls.position, closed.position);
        }
        for (d, qi) in ls.distances.iter().zip(&q) {
            assert!((d - dist(&ue, qi)).abs() < 1e-9 * d);
        }
    }
}

#[test]
fn three_ris_least_squares_is_exact_without_noise() {
    let mut r = rng(12);
    for _ in 0..200 {
        let (ue, q, a) = random_geometry(&mut r, 3);
        let out = localize_n_ris(&a, &q, &[SCALE; 3]).unwrap();
        assert!(dist(&out.position, &ue) < 1e-8);
        assert!(out.residual < 1e-8);
    }
}

#[test]
fn localization_rejects_bad_input() {
    let q = [[0.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
    let a = PathAngles { u: 0.3, v: 0.2 };
    assert!(localize_two_ris(a, a, &q[0], &q[1], [1.0; 2]).is_err());
    assert!(localize_n_ris(&[a], &q[..1], &[1.0]).is_err());
    assert!(localize_n_ris(&[a, a], &q, &[1.0]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn localization_round_trip(seed in 0u64..1_000_000) {
        let mut r = rng(seed);
        let (ue, q, a) = random_geometry(&mut r, 2);
        let out = localize_n_ris(&a, &q, &[SCALE; 2]).unwrap();
        prop_assert!(dist(&out.position, &ue) < 1e-8);
    }
}

fn perturbed_grids<R: Rng>(grids: &[UeGrid], r: &mut R) -> Vec<UeGrid> {
    grids
        .iter()
        .map(|g| UeGrid {
            u: g.u.iter().map(|x| x + r.random_range(-0.02..0.02)).collect(),
            v: g.v.iter().map(|x| x + r.random_range(-0.02..0.02)).collect(),
        })
        .collect()
}

#[test]
fn full_grid_gradient_matches_finite_differences() {
    let cb = ScmaCodebook::default_codebook();
    for seed in 0..3 {
        let s = multi_scene(seed, false, 8, 4, &cb, 20.0);
        let mut r = rng(100 + seed);
        let grids = perturbed_grids(&s.problem.grids, &mut r);
        let symbols = s.frame.symbols(&cb);
        let op = MultiUeOperator::new(&s.problem.ris, &grids, &symbols).unwrap();
        let psi = &s.truth_psi() + CVector::from_fn(op.cols(), |_, _| complex_gaussian(&mut r, 1e-4));
        let grad = full_grid_gradient(&s.problem, &op, &grids, &psi);
        let h = 1e-6;
        let mut num = Vec::new();
        let mut ana = Vec::new();
        for (i, g) in grids.iter().enumerate() {
            for axis in 0..2 {
                let len = if axis == 0 { g.u.len() } else { g.v.len() };
                for j in 0..len {
                    let eval = |d: f64| {
                        let mut gg = g.clone();
                        if axis == 0 { gg.u[j] += d } else { gg.v[j] += d }
                        let mut o = op.clone();
                        o.set_grid(i, &s.problem.ris[i], &gg);
                        full_objective(&s.problem, &o, &psi)
                    };
                    num.push((eval(h) - eval(-h)) / (2.0 * h));
                    ana.push(if axis == 0 { grad[i].0[j] } else { grad[i].1[j] });
                }
            }
        }
        let err: f64 = num.iter().zip(&ana).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = ana.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(err / norm < 1e-5, "seed {seed}: {:.2e}", err / norm);
    }
}

#[test]
fn reduced_gradient_matches_finite_differences() {
    let cb = ScmaCodebook::default_codebook();
    let ops = OpCounter::new();
    for seed in 0..3 {
        let s = multi_scene(seed, false, 8, 4, &cb, 20.0);
        let symbols = s.frame.symbols(&cb);
        let op = MultiUeOperator::new(&s.problem.ris, &s.problem.grids, &symbols).unwrap();
        let mut r = rng(200 + seed);
        let psi = CVector::from_fn(op.cols(), |_, _| complex_gaussian(&mut r, 1.0));
        let model = reduce_dimension(&op, &s.problem.grids, &psi);
        let y = s.problem.y_vec();
        let grad = reduced_gradient(&s.problem.ris, &model.eta, &symbols, &model.psi, &y, &ops);
        let h = 1e-6;
        let mut err = 0.0;
        let mut norm = 0.0;
        for idx in 0..model.eta.len() {
            for axis in 0..2 {
                let eval = |d: f64| {
                    let mut eta = model.eta.clone();
                    if axis == 0 { eta[idx].u += d } else { eta[idx].v += d }
                    reduced_objective(&s.problem.ris, &eta, &symbols, &model.psi, &y, &ops)
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                let a = if axis == 0 { grad[idx].0 } else { grad[idx].1 };
                err += (num - a).powi(2);
                norm += a * a;
            }
        }
        assert!((err / norm).sqrt() < 1e-5);
    }
}

#[test]
fn accepted_angle_steps_never_raise_the_objective() {
    let cb = ScmaCodebook::default_codebook();
    let ops = OpCounter::new();
    let mut moved = 0;
    for seed in 0..20 {
        let s = multi_scene(seed, false, 8, 4, &cb, 20.0);
        let symbols = s.frame.symbols(&cb);
        let op = MultiUeOperator::new(&s.problem.ris, &s.problem.grids, &symbols).unwrap();
        let mut r = rng(300 + seed);
        let psi = CVector::from_fn(op.cols(), |_, _| complex_gaussian(&mut r, 1.0));
        let model = reduce_dimension(&op, &s.problem.grids, &psi);
        let y = s.problem.y_vec();
        for rule in [StepRule::Normalized, StepRule::GaussNewton] {
            let mut eta = model.eta.clone();
            let mut f = reduced_objective(&s.problem.ris, &eta, &symbols, &model.psi, &y, &ops);
            for j in 0..5 {
                let next = step_reduced_angles(&s.problem, &eta, &symbols, &model.psi, &y, &StepSchedule::default(), rule, j, 8, &ops);
                let g = reduced_objective(&s.problem.ris, &next, &symbols, &model.psi, &y, &ops);
                assert!(g <= f, "seed {seed} {rule:?} step {j}: {f} -> {g}");
                moved += usize::from(next != eta);
                eta = next;
                f = g;
            }
        }
    }
    assert!(moved > 0);
}

#[test]
fn reduction_keeps_the_largest_cell_per_block() {
    let cb = ScmaCodebook::default_codebook().restrict(3).unwrap();
    let s = multi_scene(4, true, 8, 4, &cb, 20.0);
    let op = MultiUeOperator::new(&s.problem.ris, &s.problem.grids, &s.frame.symbols(&cb)).unwrap();
    let mut psi = CVector::zeros(op.cols());
    psi[op.column_index(0, 0, 5)] = C64::new(0.0, 2.0);
    psi[op.column_index(0, 0, 3)] = C64::new(1.0, 0.0);
    psi[op.column_index(2, 1, 7)] = C64::new(-0.5, 0.0);
    let m = reduce_dimension(&op, &s.problem.grids, &psi);
    assert_eq!(m.psi.len(), 3 * 2);
    assert_eq!(m.psi[0], C64::new(0.0, 2.0));
    assert_eq!(m.support[0], op.column_index(0, 0, 5));
    let (u, v) = s.problem.grids[0].cell_angles(5);
    assert_eq!((m.angles(0, 0).u, m.angles(0, 0).v), (u, v));
    assert_eq!(m.psi[2 * 2 + 1], C64::new(-0.5, 0.0));
    assert_eq!(m.empty_blocks, vec![1, 2, 3, 4]);
}

#[test]
fn cgls_reaches_least_squares() {
    let mut r = rng(5);
    let d = CMatrix::from_fn(40, 6, |_, _| complex_gaussian(&mut r, 1.0));
    let y = CVector::from_fn(40, |_, _| complex_gaussian(&mut r, 1.0));
    let ls = (d.ad_mul(&d)).lu().solve(&d.ad_mul(&y)).unwrap();
    let x = cgls(&d, &y, &CVector::zeros(6), 30, 1e-14, &OpCounter::new());
    assert!(rel_err(&x, &ls) < 1e-8);
    // already optimal: no movement
    let x2 = cgls(&d, &y, &ls, 5, 1e-6, &OpCounter::new());
    assert!(rel_err(&x2, &ls) < 1e-10);
}

#[test]
fn perfect_csi_detection_at_high_snr() {
    let cb = ScmaCodebook::default_codebook();
    let s = multi_scene(6, true, 32, 4, &cb, 40.0);
    let (dec, _) = detect_frame(&s.problem, &s.truth_cascades(), s.problem.noise_var, &MpaConfig::default()).unwrap();
    assert_eq!(dec, s.frame.data_index);
    // on grid, the true coefficients reproduce the cascades
    let op = MultiUeOperator::new(&s.problem.ris, &s.problem.grids, &s.frame.symbols(&cb)).unwrap();
    for (a, b) in channels_from_full(&op, &s.truth_psi()).iter().zip(s.truth_cascades()) {
        assert!(common::rel_err_m(a, &b) < 1e-10);
    }
}

#[test]
fn pipeline_runs_end_to_end() {
    let cb = ScmaCodebook::default_codebook();
    let s = multi_scene(8, true, 64, 4, &cb, 30.0);
    let out = run_algorithm3(&s.problem, &Algorithm3Config::default()).unwrap();
    assert_eq!(out.data_index.len(), cb.ues());
    assert_eq!(out.positions.len(), cb.ues());
    assert!(!out.trace.is_empty());
    assert!(out.trace.iter().all(|r| r.objective.is_finite()));
    let errors: usize = out
        .data_index
        .iter()
        .zip(&s.frame.data_index)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| cb.bit_errors(*x, *y)).sum::<usize>())
        .sum();
    let bits = cb.ues() * 64 * cb.bits_per_symbol();
    assert!((errors as f64) < 0.05 * bits as f64, "{errors} of {bits}");
    let bad = Algorithm3Config { max_iterations: 0, ..Default::default() };
    assert!(run_algorithm3(&s.problem, &bad).is_err());
}

fn multiplies(k: usize, g: usize) -> u64 {
    let cb = ScmaCodebook::default_codebook().restrict(k).unwrap();
    let s = multi_scene(9, false, 16, g, &cb, 20.0);
    let cfg = Algorithm3Config { max_iterations: 2, max_halvings: 0, delta_eta: 1e-300, ..Default::default() };
    let ops = OpCounter::new();
    let out = run_algorithm3_traced(&s.problem, &cfg, None, &ops, |_| {}).unwrap();
    out.trace.last().unwrap().multiplies
}

#[test]
fn iteration_cost_is_linear_in_ues_and_free_of_grid_size() {
    let (a, b) = (multiplies(3, 4), multiplies(6, 4));
    let ratio = b as f64 / a as f64;
    assert!((ratio - 2.0).abs() < 0.2, "K ratio {ratio}");
    let c = multiplies(3, 8);
    assert!((c as f64 / a as f64 - 1.0).abs() < 0.05, "G ratio {}", c as f64 / a as f64);
}
