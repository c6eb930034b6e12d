#![allow(dead_code)]

use isac_core::channel::{bs_ris_coefficients, ue_coefficients};
use isac_core::fixed_site::FixedSiteProblem;
use isac_core::linalg::{CMatrix, CVector, C64};
use isac_core::multiue::{MultiUeProblem, ScmaFrame};
use isac_core::scma::ScmaCodebook;
use isac_core::signal::{
    apply_symbols, fixed_site_cascade, generate_ris_schedule, mean_received_power, noise_matrix,
    noise_variance_for_snr, synthesize_multiue, ue_cascade, RisSchedule, SuperimposedFrame,
};
use isac_core::{
    build_grids, sample_channels, sample_channels_on_grid, ChannelConfig, ChannelRealization, DictionaryGrids,
    GridSizes, SystemGeometry,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn sizes(g: usize, gu: usize) -> GridSizes {
    GridSizes { g1: g, g2: g, g3: g, g4: gu, g5: gu }
}

pub struct FixedScene {
    pub geom: SystemGeometry,
    pub grids: DictionaryGrids,
    pub chan: ChannelRealization,
    pub schedule: RisSchedule,
    pub frame: SuperimposedFrame,
    pub noise: CMatrix,
    pub problem: FixedSiteProblem,
}

impl FixedScene {
    pub fn truth_channels(&self) -> Vec<CMatrix> {
        self.chan.bs_ris.iter().map(|l| l.matrix.clone()).collect()
    }

    /// Stacked sparse coefficients of the true channels (exact when on grid).
    pub fn truth_omega(&self) -> CVector {
        let v: Vec<C64> = self
            .chan
            .bs_ris
            .iter()
            .zip(&self.grids.ris)
            .flat_map(|(l, g)| bs_ris_coefficients(l, g).iter().copied().collect::<Vec<_>>())
            .collect();
        CVector::from_vec(v)
    }
}

/// Two-RIS fixed-site block with `t` slots at the given pilot SNR.
pub fn fixed_scene(seed: u64, on_grid: bool, t: usize, g: usize, xi: f64, snr_db: f64) -> FixedScene {
    let geom = SystemGeometry::desk_scale();
    let grids = build_grids(&geom, sizes(g, 8)).unwrap();
    let mut r = rng(seed);
    let chan = if on_grid {
        sample_channels_on_grid(&geom, &grids, &ChannelConfig::default(), &mut r).unwrap()
    } else {
        sample_channels(&geom, &ChannelConfig::default(), &mut r).unwrap()
    };
    let elements: Vec<usize> = geom.ris.iter().map(|x| x.elements()).collect();
    let schedule = generate_ris_schedule(&elements, t, &mut r).unwrap();
    let frame = SuperimposedFrame::random(t, xi, &mut r);
    let casc = fixed_site_cascade(&chan, &schedule, &[0, 1]).unwrap();
    let n0 = noise_variance_for_snr(mean_received_power(&casc), xi, snr_db);
    let noise = noise_matrix(geom.antennas, t, n0, &mut r);
    let y = apply_symbols(&casc, &frame.transmitted()).unwrap() + &noise;
    let problem =
        FixedSiteProblem::from_scene(&geom, &grids, &chan, &schedule, &[0, 1], y, frame.pilot.clone(), xi, n0).unwrap();
    FixedScene { geom, grids, chan, schedule, frame, noise, problem }
}

pub struct MultiScene {
    pub geom: SystemGeometry,
    pub grids: DictionaryGrids,
    pub chan: ChannelRealization,
    pub schedule: RisSchedule,
    pub frame: ScmaFrame,
    pub noise: Vec<CMatrix>,
    pub problem: MultiUeProblem,
}

impl MultiScene {
    /// `ψ` in operator column order `(k, i, cell)`.
    pub fn truth_psi(&self) -> CVector {
        let mut v = Vec::new();
        for k in 0..self.problem.ues() {
            for (i, g) in self.grids.ris.iter().enumerate() {
                v.extend(ue_coefficients(&self.chan.ue[i][k], g).iter().copied());
            }
        }
        CVector::from_vec(v)
    }

    pub fn truth_cascades(&self) -> Vec<CMatrix> {
        (0..self.problem.ues()).map(|k| ue_cascade(&self.chan, &self.schedule, k).unwrap()).collect()
    }
}

pub fn multi_scene(seed: u64, on_grid: bool, t: usize, gu: usize, cb: &ScmaCodebook, snr_db: f64) -> MultiScene {
    let mut geom = SystemGeometry::desk_scale();
    geom.ue_positions.truncate(cb.ues());
    let grids = build_grids(&geom, sizes(4, gu)).unwrap();
    let mut r = rng(seed);
    let chan = if on_grid {
        sample_channels_on_grid(&geom, &grids, &ChannelConfig::default(), &mut r).unwrap()
    } else {
        sample_channels(&geom, &ChannelConfig::default(), &mut r).unwrap()
    };
    let elements: Vec<usize> = geom.ris.iter().map(|x| x.elements()).collect();
    let schedule = generate_ris_schedule(&elements, t, &mut r).unwrap();
    let xi = 0.5;
    let frame = ScmaFrame::random(cb, t, xi, &mut r);
    let prx = (0..cb.ues()).map(|k| mean_received_power(&ue_cascade(&chan, &schedule, k).unwrap())).sum::<f64>()
        / cb.ues() as f64;
    let n0 = noise_variance_for_snr(prx, xi, snr_db);
    let rx = synthesize_multiue(&chan, &frame.symbols(cb), &schedule, n0, &mut r).unwrap();
    let noise = rx.iter().map(|b| b.noise.clone()).collect();
    let y = rx.into_iter().map(|b| b.y).collect();
    let problem =
        MultiUeProblem::from_scene(&geom, &grids, &chan, &schedule, None, y, frame.pilots(cb), cb.clone(), xi, n0)
            .unwrap();
    MultiScene { geom, grids, chan, schedule, frame, noise, problem }
}

pub fn rel_err(a: &CVector, b: &CVector) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

pub fn rel_err_m(a: &CMatrix, b: &CMatrix) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}
