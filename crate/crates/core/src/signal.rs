//! Superimposed frames, RIS phase schedules and received-signal synthesis.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::channel::ChannelRealization;
use crate::error::{config_err, dim_err, Result};
use crate::linalg::{phasor, CMatrix, CVector, C64, ZERO};

/// Gray-mapped QPSK: bit 0 selects the sign of the real part, bit 1 the imaginary part.
pub fn qpsk_symbol(index: usize) -> C64 {
    let re = if index & 1 == 0 { FRAC_1_SQRT_2 } else { -FRAC_1_SQRT_2 };
    let im = if index & 2 == 0 { FRAC_1_SQRT_2 } else { -FRAC_1_SQRT_2 };
    C64::new(re, im)
}

pub fn qpsk_demod(z: C64) -> usize {
    (z.re < 0.0) as usize | (((z.im < 0.0) as usize) << 1)
}

/// Hard decision followed by re-modulation.
pub fn qpsk_remod(z: C64) -> C64 {
    qpsk_symbol(qpsk_demod(z))
}

pub fn qpsk_bit_errors(a: usize, b: usize) -> usize {
    ((a ^ b) & 3).count_ones() as usize
}

/// `√ξ·d + √(1−ξ)·p`, elementwise.
pub fn superimpose(data: &[C64], pilot: &[C64], xi: f64) -> Result<Vec<C64>> {
    if !(xi > 0.0 && xi < 1.0) {
        return config_err(format!("power split xi = {xi} outside (0, 1)"));
    }
    if data.len() != pilot.len() {
        return dim_err("data and pilot lengths differ");
    }
    Ok(superimpose_unchecked(data, pilot, xi))
}

pub(crate) fn superimpose_unchecked(data: &[C64], pilot: &[C64], xi: f64) -> Vec<C64> {
    let (a, b) = (xi.sqrt(), (1.0 - xi).sqrt());
    data.iter().zip(pilot).map(|(d, p)| d * a + p * b).collect()
}

/// Fixed-site QPSK frame.
#[derive(Clone, Debug)]
pub struct SuperimposedFrame {
    pub data_index: Vec<usize>,
    pub data: Vec<C64>,
    pub pilot: Vec<C64>,
    pub xi: f64,
}

impl SuperimposedFrame {
    pub fn random<R: Rng + ?Sized>(t: usize, xi: f64, rng: &mut R) -> Self {
        let data_index: Vec<usize> = (0..t).map(|_| rng.random_range(0..4)).collect();
        let data = data_index.iter().map(|&i| qpsk_symbol(i)).collect();
        let pilot = (0..t).map(|_| qpsk_symbol(rng.random_range(0..4))).collect();
        Self { data_index, data, pilot, xi }
    }

    pub fn transmitted(&self) -> Vec<C64> {
        superimpose_unchecked(&self.data, &self.pilot, self.xi)
    }

    pub fn slots(&self) -> usize {
        self.data.len()
    }
}

/// Phase-only RIS configurations, one N_i × T matrix per RIS.
#[derive(Clone, Debug, PartialEq)]
pub struct RisSchedule {
    pub theta: Vec<CMatrix>,
}

impl RisSchedule {
    pub fn slots(&self) -> usize {
        self.theta.first().map_or(0, |m| m.ncols())
    }

    /// Same schedule with every slot set to the configuration of slot `t`.
    pub fn frozen_at(&self, t: usize) -> Self {
        let theta = self
            .theta
            .iter()
            .map(|m| CMatrix::from_fn(m.nrows(), m.ncols(), |n, _| m[(n, t)]))
            .collect();
        Self { theta }
    }
}

pub fn generate_ris_schedule<R: Rng + ?Sized>(elements: &[usize], t: usize, rng: &mut R) -> Result<RisSchedule> {
    if t == 0 {
        return dim_err("schedule needs at least one slot");
    }
    let theta = elements
        .iter()
        .map(|&n| CMatrix::from_fn(n, t, |_, _| phasor(rng.random_range(0.0..2.0 * PI))))
        .collect();
    Ok(RisSchedule { theta })
}

pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, var: f64) -> C64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    C64::new(re * s, im * s)
}

pub fn noise_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, var: f64, rng: &mut R) -> CMatrix {
    CMatrix::from_fn(rows, cols, |_, _| complex_gaussian(rng, var))
}

/// Received block of one band.
#[derive(Clone, Debug)]
pub struct ReceivedBlock {
    pub y: CMatrix,
    pub noise: CMatrix,
    pub noise_var: f64,
}

/// Per-slot cascaded channel `h_t = Σ_i H_r,i diag(θ_{i,t}) h_i`, as an M × T matrix.
pub fn cascaded_channel(bs_ris: &[&CMatrix], ris_links: &[&CVector], schedule: &RisSchedule) -> Result<CMatrix> {
    if bs_ris.len() != ris_links.len() || bs_ris.len() > schedule.theta.len() {
        return dim_err("mismatched RIS counts");
    }
    let t = schedule.slots();
    let m = bs_ris.first().map_or(0, |h| h.nrows());
    let mut out = CMatrix::zeros(m, t);
    for (i, (h, hb)) in bs_ris.iter().zip(ris_links).enumerate() {
        let theta = &schedule.theta[i];
        if h.ncols() != hb.len() || theta.nrows() != hb.len() {
            return dim_err(format!("RIS {i}: element counts disagree"));
        }
        // H diag(h_b) Θ = (H diag(h_b)) Θ
        let mut hd = (*h).clone();
        for (n, mut col) in hd.column_iter_mut().enumerate() {
            col *= hb[n];
        }
        out += hd * theta;
    }
    Ok(out)
}

/// Cascaded fixed-site channel for the chosen subset of RISs.
pub fn fixed_site_cascade(chan: &ChannelRealization, schedule: &RisSchedule, active: &[usize]) -> Result<CMatrix> {
    let h: Vec<&CMatrix> = active.iter().map(|&i| &chan.bs_ris[i].matrix).collect();
    let b: Vec<&CVector> = active.iter().map(|&i| &chan.fixed_site[i].vector).collect();
    let theta = RisSchedule { theta: active.iter().map(|&i| schedule.theta[i].clone()).collect() };
    cascaded_channel(&h, &b, &theta)
}

/// Cascaded channel of UE `k` through all RISs.
pub fn ue_cascade(chan: &ChannelRealization, schedule: &RisSchedule, k: usize) -> Result<CMatrix> {
    let h: Vec<&CMatrix> = chan.bs_ris.iter().map(|l| &l.matrix).collect();
    let b: Vec<&CVector> = chan.ue.iter().map(|links| &links[k].vector).collect();
    cascaded_channel(&h, &b, schedule)
}

/// `Y = H_casc·diag(x) + N`.
pub fn apply_symbols(cascade: &CMatrix, x: &[C64]) -> Result<CMatrix> {
    if cascade.ncols() != x.len() {
        return dim_err("symbol count differs from slot count");
    }
    let mut y = cascade.clone();
    for (t, mut col) in y.column_iter_mut().enumerate() {
        col *= x[t];
    }
    Ok(y)
}

/// Fixed-site block `Y_0 = Σ_i H_r,i diag(h_b,i0) Θ_i X_0 + N` over the listed RISs.
pub fn synthesize_fixed_site<R: Rng + ?Sized>(
    chan: &ChannelRealization,
    symbols: &[C64],
    schedule: &RisSchedule,
    active: &[usize],
    noise_var: f64,
    rng: &mut R,
) -> Result<ReceivedBlock> {
    let casc = fixed_site_cascade(chan, schedule, active)?;
    let clean = apply_symbols(&casc, symbols)?;
    let noise = noise_matrix(clean.nrows(), clean.ncols(), noise_var, rng);
    Ok(ReceivedBlock { y: clean + &noise, noise, noise_var })
}

/// Mean per-antenna received power of a cascaded channel with unit-power symbols.
pub fn mean_received_power(cascade: &CMatrix) -> f64 {
    let (m, t) = cascade.shape();
    crate::linalg::frob_sqr(cascade) / (m * t) as f64
}

/// Noise variance giving `snr_db` = received pilot power over N_0.
pub fn noise_variance_for_snr(rx_power: f64, xi: f64, snr_db: f64) -> f64 {
    (1.0 - xi) * rx_power / 10f64.powf(snr_db / 10.0)
}

/// Multi-UE symbols: `symbols[k]` is N_s × T.
pub fn synthesize_multiue<R: Rng + ?Sized>(
    chan: &ChannelRealization,
    symbols: &[CMatrix],
    schedule: &RisSchedule,
    noise_var: f64,
    rng: &mut R,
) -> Result<Vec<ReceivedBlock>> {
    let k_count = symbols.len();
    if k_count == 0 {
        return dim_err("no UE symbols");
    }
    let (ns, t) = symbols[0].shape();
    let cascades: Vec<CMatrix> = (0..k_count).map(|k| ue_cascade(chan, schedule, k)).collect::<Result<_>>()?;
    let m = cascades[0].nrows();
    let mut out = Vec::with_capacity(ns);
    for band in 0..ns {
        let mut y = CMatrix::zeros(m, t);
        for (k, casc) in cascades.iter().enumerate() {
            if symbols[k].shape() != (ns, t) {
                return dim_err("UE symbol matrices differ in shape");
            }
            let row: Vec<C64> = (0..t).map(|s| symbols[k][(band, s)]).collect();
            if row.iter().all(|z| *z == ZERO) {
                continue;
            }
            y += apply_symbols(casc, &row)?;
        }
        let noise = noise_matrix(m, t, noise_var, rng);
        out.push(ReceivedBlock { y: y + &noise, noise, noise_var });
    }
    Ok(out)
}
