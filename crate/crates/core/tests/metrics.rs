use isac_core::channel::BsRisPath;
use isac_core::linalg::{CMatrix, CVector, C64};
use isac_core::metrics::*;
use isac_core::operator::BsGrid;
use proptest::prelude::*;

fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

#[test]
fn channel_nmse_examples() {
    let h = vec![CMatrix::from_element(2, 2, c(1.0))];
    let e = vec![CMatrix::from_element(2, 2, c(0.9))];
    assert!((nmse_channel(&h, &e).unwrap() - (-20.0)).abs() < 1e-9);
    assert_eq!(nmse_channel(&h, &h).unwrap(), NMSE_FLOOR_DB);
    // pooled over matrices, not averaged per matrix
    let h2 = vec![CMatrix::from_element(1, 1, c(1.0)), CMatrix::from_element(1, 1, c(3.0))];
    let e2 = vec![CMatrix::from_element(1, 1, c(0.0)), CMatrix::from_element(1, 1, c(3.0))];
    assert!((nmse_channel(&h2, &e2).unwrap() - 10.0 * (0.1f64).log10()).abs() < 1e-12);
    assert!(nmse_channel(&h, &[]).is_err());
    assert!(nmse_channel(&[CMatrix::zeros(1, 1)], &[CMatrix::zeros(1, 1)]).is_err());
}

#[test]
fn angle_nmse_matches_paths_up_to_permutation() {
    let truth = vec![vec![[0.1, 0.2, 0.3], [0.5, -0.4, 0.0]]];
    let swapped = vec![vec![[0.5, -0.4, 0.0], [0.1, 0.2, 0.3]]];
    assert_eq!(nmse_angles(&truth, &swapped).unwrap(), NMSE_FLOOR_DB);
    // a missing estimate counts as the zero triple
    let one = vec![vec![[0.5, -0.4, 0.0]]];
    let expect = 10.0 * (0.14f64 / 0.55).log10();
    assert!((nmse_angles(&truth, &one).unwrap() - expect).abs() < 1e-12);
}

#[test]
fn strongest_cells_decode_the_grid_index() {
    let grid = BsGrid { arrival: vec![0.0, 0.1], departure_u: vec![0.2, 0.3, 0.4], departure_v: vec![0.5, 0.6] };
    let mut w = vec![c(0.0); grid.cells()];
    w[1 + 2 * (2 + 3 * 1)] = c(5.0);
    w[0] = c(-1.0);
    assert_eq!(strongest_cells(&grid, &w, 3), vec![[0.1, 0.4, 0.6], [0.0, 0.2, 0.5]]);
    let paths = vec![BsRisPath { gain: c(1.0), arrival: 0.1, departure: isac_core::channel::PathAngles { u: 0.4, v: 0.6 } }];
    assert_eq!(path_triples(&paths), vec![[0.1, 0.4, 0.6]]);
    assert!(estimated_paths(&[grid], &CVector::zeros(3), &[1]).is_err());
}

#[test]
fn fixed_sinr_toy() {
    let h = CMatrix::from_column_slice(2, 2, &[c(1.0), c(0.0), c(0.0), c(2.0)]);
    let e = CMatrix::from_column_slice(2, 2, &[c(1.0), c(0.0), c(0.0), c(1.0)]);
    let s = effective_sinr_fixed(&h, &e, 0.5, 0.1).unwrap();
    assert!((s[0] - 0.5 / 0.1).abs() < 1e-12);
    assert!((s[1] - 0.5 / (0.5 + 0.1)).abs() < 1e-12);
    assert!(effective_sinr_fixed(&h, &CMatrix::zeros(2, 1), 0.5, 0.1).is_err());
}

#[test]
fn multiue_sinr_toy() {
    // two UEs, one slot, scalar channels
    let h = vec![CMatrix::from_element(1, 1, c(1.0)), CMatrix::from_element(1, 1, c(2.0))];
    let e = vec![CMatrix::from_element(1, 1, c(1.0)), CMatrix::from_element(1, 1, c(1.5))];
    let energy = vec![vec![1.0], vec![2.0]];
    let s = effective_sinr_multiue(&h, &e, &energy, &[0.5, 0.5], 0.2).unwrap();
    let sig = [0.5, 0.5 * 2.25];
    let err = [0.0, 0.25 * 2.0];
    assert!((s[0][0] - sig[0] / (err[0] + sig[1] + err[1] + 0.2)).abs() < 1e-12);
    assert!((s[1][0] - sig[1] / (err[1] + sig[0] + err[0] + 0.2)).abs() < 1e-12);
    assert!(effective_sinr_multiue(&h, &e, &energy[..1], &[0.5, 0.5], 0.2).is_err());
}

#[test]
fn se_ber_and_localization() {
    assert!((spectral_efficiency(&[1.0, 3.0], 0.5) - 0.5 * 1.5).abs() < 1e-12);
    assert_eq!(spectral_efficiency(&[], 1.0), 0.0);
    assert_eq!(bit_error_rate(3, 12).unwrap(), 0.25);
    assert!(bit_error_rate(1, 0).is_err());
    assert!(bit_error_rate(5, 4).is_err());
    let truth = [[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]];
    let (m, f) = localization_error(&[Some([3.0, 4.0, 0.0]), None], &truth).unwrap();
    assert_eq!((m, f), (Some(5.0), 1));
    assert_eq!(localization_error(&[None, None], &truth).unwrap(), (None, 2));
}

#[test]
fn summary_examples() {
    let s = summarize(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(s.mean, 2.5);
    assert!((s.stderr - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-12);
    assert_eq!(summarize(&[7.0]).stderr, 0.0);
    assert!(summarize(&[]).mean.is_nan());
    let r = MetricsReport { ber: Some(0.1), se: Some(2.0), ..Default::default() };
    assert_eq!(r.entries(), vec![("ber", 0.1), ("se", 2.0)]);
}

proptest! {
    #[test]
    fn summary_mean_is_bounded(v in proptest::collection::vec(-1e6f64..1e6, 1..50)) {
        let s = summarize(&v);
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(s.mean >= lo - 1e-9 && s.mean <= hi + 1e-9);
        prop_assert!(s.stderr >= 0.0);
    }

    #[test]
    fn nmse_scales_with_error(a in 1e-6f64..1.0) {
        let h = vec![CMatrix::from_element(3, 2, c(1.0))];
        let e = vec![CMatrix::from_element(3, 2, c(1.0 - a))];
        prop_assert!((nmse_channel(&h, &e).unwrap() - 20.0 * a.log10()).abs() < 1e-9);
    }
}
