mod common;

use common::{fixed_scene, rng};
use isac_core::linalg::{CMatrix, C64};
use isac_core::signal::{
    apply_symbols, cascaded_channel, fixed_site_cascade, generate_ris_schedule, mean_received_power, noise_matrix,
    noise_variance_for_snr, qpsk_bit_errors, qpsk_demod, qpsk_remod, qpsk_symbol, superimpose, synthesize_fixed_site,
};
use proptest::prelude::*;

#[test]
fn qpsk_is_gray_mapped() {
    for i in 0..4 {
        let s = qpsk_symbol(i);
        assert!((s.norm() - 1.0).abs() < 1e-15);
        assert_eq!(qpsk_demod(s), i);
        // neighbours differ in one bit
        let rot = qpsk_demod(s * C64::new(0.0, 1.0));
        assert_eq!(qpsk_bit_errors(i, rot), 1);
    }
    assert_eq!(qpsk_bit_errors(0, 3), 2);
    assert_eq!(qpsk_remod(C64::new(0.1, -3.0)), qpsk_symbol(2));
}

#[test]
fn superposition_splits_power() {
    let d = vec![qpsk_symbol(0), qpsk_symbol(3)];
    let p = vec![qpsk_symbol(1), qpsk_symbol(1)];
    let x = superimpose(&d, &p, 0.25).unwrap();
    assert!((x[0] - (d[0] * 0.5 + p[0] * 0.75f64.sqrt())).norm() < 1e-15);
    assert!(superimpose(&d, &p, 0.0).is_err());
    assert!(superimpose(&d, &p, 1.0).is_err());
    assert!(superimpose(&d, &p[..1], 0.5).is_err());
}

#[test]
fn cascade_is_sum_of_per_ris_links() {
    let s = fixed_scene(4, false, 16, 4, 0.5, 20.0);
    let all = fixed_site_cascade(&s.chan, &s.schedule, &[0, 1]).unwrap();
    let a = fixed_site_cascade(&s.chan, &s.schedule, &[0]).unwrap();
    let b = fixed_site_cascade(&s.chan, &s.schedule, &[1]).unwrap();
    assert!((&all - (a + b)).norm() < 1e-12 * all.norm());
    // slot-by-slot definition
    for t in 0..16 {
        let mut h = CMatrix::zeros(8, 1);
        for i in 0..2 {
            let hb = &s.chan.fixed_site[i].vector;
            let th = s.schedule.theta[i].column(t);
            let v = hb.component_mul(&th);
            h += &s.chan.bs_ris[i].matrix * v;
        }
        assert!((all.column(t) - h.column(0)).norm() < 1e-12);
    }
    let h = [&s.chan.bs_ris[0].matrix];
    assert!(cascaded_channel(&h, &[], &s.schedule).is_err());
}

#[test]
fn frozen_schedule_repeats_one_slot() {
    let sched = generate_ris_schedule(&[4, 4], 5, &mut rng(1)).unwrap();
    let f = sched.frozen_at(2);
    for t in 0..5 {
        assert_eq!(f.theta[1].column(t), sched.theta[1].column(2));
    }
    for z in sched.theta[0].iter() {
        assert!((z.norm() - 1.0).abs() < 1e-14);
    }
    assert!(generate_ris_schedule(&[4], 0, &mut rng(1)).is_err());
}

#[test]
fn snr_sets_pilot_power_over_noise() {
    let s = fixed_scene(2, false, 128, 4, 0.3, 10.0);
    let casc = fixed_site_cascade(&s.chan, &s.schedule, &[0, 1]).unwrap();
    let n0 = s.problem.noise_var;
    let p = mean_received_power(&casc);
    assert!(((1.0 - 0.3) * p / n0 - 10.0).abs() < 1e-9);
    assert_eq!(noise_variance_for_snr(2.0, 0.5, 0.0), 1.0);
    let clean = apply_symbols(&casc, &s.frame.transmitted()).unwrap();
    assert!((&s.problem.y - clean - &s.noise).norm() < 1e-12);
}

#[test]
fn noise_has_requested_variance() {
    let n = noise_matrix(200, 200, 0.7, &mut rng(9));
    let var = n.norm_squared() / n.len() as f64;
    assert!((var - 0.7).abs() < 0.02);
    let mean: C64 = n.iter().sum::<C64>() / n.len() as f64;
    assert!(mean.norm() < 0.02);
}

#[test]
fn synthesis_reports_its_noise() {
    let s = fixed_scene(5, false, 8, 4, 0.5, 20.0);
    let x = s.frame.transmitted();
    let blk = synthesize_fixed_site(&s.chan, &x, &s.schedule, &[0, 1], 0.1, &mut rng(0)).unwrap();
    let casc = fixed_site_cascade(&s.chan, &s.schedule, &[0, 1]).unwrap();
    assert!((blk.y - blk.noise - apply_symbols(&casc, &x).unwrap()).norm() < 1e-12);
    assert!(apply_symbols(&casc, &x[..4]).is_err());
}

proptest! {
    #[test]
    fn demod_inverts_noisy_symbols(i in 0usize..4, re in -0.5f64..0.5, im in -0.5f64..0.5) {
        prop_assert_eq!(qpsk_demod(qpsk_symbol(i) + C64::new(re, im)), i);
    }

    #[test]
    fn superimposed_energy_is_unit(xi in 0.01f64..0.99, a in 0usize..4, b in 0usize..4) {
        // both unit-modulus, so the energy depends on their alignment only
        let x = superimpose(&[qpsk_symbol(a)], &[qpsk_symbol(b)], xi).unwrap()[0];
        let cross = 2.0 * (xi * (1.0 - xi)).sqrt() * (qpsk_symbol(a) * qpsk_symbol(b).conj()).re;
        prop_assert!((x.norm_sqr() - 1.0 - cross).abs() < 1e-12);
    }
}
