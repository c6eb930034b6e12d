//! SCMA codebooks, encoding and message-passing detection.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, IsacError, Result};
use crate::linalg::{CVector, C64, ZERO};

const DEFAULT_CODEBOOK: &str = include_str!("../data/scma_default.json");
const FORMAT: &str = "isac-scma-codebook";

#[derive(Serialize, Deserialize)]
struct CodebookFile {
    format: String,
    version: u32,
    #[serde(default)]
    name: String,
    ues: usize,
    bands: usize,
    size: usize,
    dv: usize,
    dc: usize,
    support: Vec<Vec<usize>>,
    codewords: Vec<Vec<Vec<[f64; 2]>>>,
}

/// Codewords `C_k(n)` with their factor graph.
#[derive(Clone, Debug, PartialEq)]
pub struct ScmaCodebook {
    pub name: String,
    pub bands: usize,
    pub size: usize,
    /// `G_k`: bands used by UE k
    pub ue_bands: Vec<Vec<usize>>,
    /// `F_n`: UEs colliding on band n
    pub band_ues: Vec<Vec<usize>>,
    /// `codewords[k][n]`, an N_s-vector
    pub codewords: Vec<Vec<CVector>>,
}

impl ScmaCodebook {
    /// Six UEs on four bands, two bands per UE, three UEs per band, four codewords.
    pub fn default_codebook() -> Self {
        Self::from_json(DEFAULT_CODEBOOK).expect("bundled codebook is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: CodebookFile = serde_json::from_str(text)?;
        if f.format != FORMAT || f.version != 1 {
            return config_err(format!("unsupported codebook format {} v{}", f.format, f.version));
        }
        if f.support.len() != f.ues || f.codewords.len() != f.ues {
            return config_err("codebook lists disagree with the UE count");
        }
        let mut codewords = Vec::with_capacity(f.ues);
        for words in &f.codewords {
            if words.len() != f.size {
                return config_err("codebook size mismatch");
            }
            let mut v = Vec::with_capacity(f.size);
            for w in words {
                if w.len() != f.bands {
                    return config_err("codeword length differs from band count");
                }
                v.push(CVector::from_iterator(f.bands, w.iter().map(|p| C64::new(p[0], p[1]))));
            }
            codewords.push(v);
        }
        let cb = Self::from_parts(f.name, f.bands, f.support, codewords)?;
        if cb.ue_bands.iter().any(|g| g.len() != f.dv) || cb.band_ues.iter().any(|u| u.len() != f.dc) {
            return config_err("declared dv/dc do not match the support sets");
        }
        Ok(cb)
    }

    pub fn to_json(&self) -> Result<String> {
        let (dv, dc) = (
            self.ue_bands.first().map_or(0, |g| g.len()),
            self.band_ues.first().map_or(0, |u| u.len()),
        );
        let f = CodebookFile {
            format: FORMAT.into(),
            version: 1,
            name: self.name.clone(),
            ues: self.ues(),
            bands: self.bands,
            size: self.size,
            dv,
            dc,
            support: self.ue_bands.clone(),
            codewords: self
                .codewords
                .iter()
                .map(|w| w.iter().map(|c| c.iter().map(|z| [z.re, z.im]).collect()).collect())
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&f)?)
    }

    /// Builds and validates a codebook; supports may be irregular.
    pub fn from_parts(name: String, bands: usize, support: Vec<Vec<usize>>, codewords: Vec<Vec<CVector>>) -> Result<Self> {
        let size = codewords.first().map_or(0, |w| w.len());
        if size < 2 || !size.is_power_of_two() {
            return config_err("codebook size must be a power of two >= 2");
        }
        let mut band_ues = vec![Vec::new(); bands];
        for (k, g) in support.iter().enumerate() {
            let mut g = g.clone();
            g.sort_unstable();
            g.dedup();
            if g.is_empty() || g.iter().any(|&b| b >= bands) {
                return config_err(format!("UE {k} has an invalid band set"));
            }
            for &b in &g {
                band_ues[b].push(k);
            }
            for (n, c) in codewords[k].iter().enumerate() {
                if c.len() != bands {
                    return dim_err("codeword length differs from band count");
                }
                for b in 0..bands {
                    let on = g.contains(&b);
                    if on == (c[b] == ZERO) {
                        return config_err(format!("codeword {n} of UE {k} does not match its support"));
                    }
                }
            }
        }
        let ue_bands = support
            .into_iter()
            .map(|mut g| {
                g.sort_unstable();
                g.dedup();
                g
            })
            .collect();
        Ok(Self { name, bands, size, ue_bands, band_ues, codewords })
    }

    pub fn ues(&self) -> usize {
        self.codewords.len()
    }

    pub fn bits_per_symbol(&self) -> usize {
        self.size.trailing_zeros() as usize
    }

    /// The first `k` UEs of this codebook.
    pub fn restrict(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.ues() {
            return config_err(format!("cannot keep {k} of {} UEs", self.ues()));
        }
        Self::from_parts(
            self.name.clone(),
            self.bands,
            self.ue_bands[..k].to_vec(),
            self.codewords[..k].to_vec(),
        )
    }

    pub fn codeword(&self, k: usize, n: usize) -> &CVector {
        &self.codewords[k][n]
    }

    /// `C_k(n)` for the word whose binary index is `bits` (most significant first).
    pub fn encode(&self, bits: &[bool], k: usize) -> Result<CVector> {
        if bits.len() != self.bits_per_symbol() {
            return dim_err(format!("expected {} bits, got {}", self.bits_per_symbol(), bits.len()));
        }
        if k >= self.ues() {
            return dim_err(format!("no UE {k}"));
        }
        let n = bits.iter().fold(0usize, |acc, &b| (acc << 1) | b as usize);
        Ok(self.codewords[k][n].clone())
    }

    pub fn index_bits(&self, n: usize) -> Vec<bool> {
        let b = self.bits_per_symbol();
        (0..b).rev().map(|i| (n >> i) & 1 == 1).collect()
    }

    pub fn bit_errors(&self, a: usize, b: usize) -> usize {
        (a ^ b).count_ones() as usize
    }
}

/// Observation of one slot: `y[n]` is the M-vector on band n, `h[k]` the channel of UE k.
#[derive(Clone, Debug)]
pub struct SlotObservation<'a> {
    pub y: &'a [CVector],
    pub h: &'a [CVector],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpaConfig {
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for MpaConfig {
    fn default() -> Self {
        Self { max_iterations: 10, tolerance: 1e-6 }
    }
}

/// Messages in the log domain, each normalized to log-sum-exp zero.
#[derive(Clone, Debug)]
pub struct MessageState {
    /// `f2v[n][j]`: band n to its j-th UE
    pub f2v: Vec<Vec<Vec<f64>>>,
    /// `v2f[k][j]`: UE k to its j-th band
    pub v2f: Vec<Vec<Vec<f64>>>,
    pub iterations: usize,
}

#[derive(Clone, Debug)]
pub struct MpaOutput {
    /// normalized log posteriors `[k][n]`
    pub log_posteriors: Vec<Vec<f64>>,
    pub decisions: Vec<usize>,
    pub state: MessageState,
    pub unstable: bool,
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn normalize(v: &mut [f64]) -> bool {
    let l = log_sum_exp(v);
    if !l.is_finite() {
        let u = -(v.len() as f64).ln();
        v.iter_mut().for_each(|x| *x = u);
        return false;
    }
    v.iter_mut().for_each(|x| *x -= l);
    true
}

/// Log-likelihood table of one band over all codeword tuples of its UEs.
/// Tuple index uses the first UE of the band as the fastest digit.
fn band_likelihoods(cb: &ScmaCodebook, band: usize, obs: &SlotObservation, n0: f64) -> Vec<f64> {
    let ues = &cb.band_ues[band];
    let tuples = cb.size.pow(ues.len() as u32);
    let y = &obs.y[band];
    // per UE and codeword: channel-scaled contribution on this band
    let contrib: Vec<Vec<CVector>> = ues
        .iter()
        .map(|&k| (0..cb.size).map(|n| &obs.h[k] * cb.codewords[k][n][band]).collect())
        .collect();
    let mut out = Vec::with_capacity(tuples);
    let mut digits = vec![0usize; ues.len()];
    for _ in 0..tuples {
        let mut r = y.clone();
        for (j, &d) in digits.iter().enumerate() {
            r -= &contrib[j][d];
        }
        out.push(-r.norm_squared() / n0);
        for d in digits.iter_mut() {
            *d += 1;
            if *d < cb.size {
                break;
            }
            *d = 0;
        }
    }
    out
}

fn check_observation(cb: &ScmaCodebook, obs: &SlotObservation, n0: f64) -> Result<()> {
    if !(n0 > 0.0) {
        return config_err("noise variance must be positive");
    }
    if obs.y.len() != cb.bands || obs.h.len() != cb.ues() {
        return dim_err("observation does not match the codebook");
    }
    let m = obs.y[0].len();
    if obs.y.iter().any(|v| v.len() != m) || obs.h.iter().any(|v| v.len() != m) {
        return dim_err("antenna counts differ");
    }
    Ok(())
}

/// Flooding sum-product detection in the log domain.
pub fn mpa_decode(cb: &ScmaCodebook, obs: &SlotObservation, n0: f64, cfg: &MpaConfig) -> Result<MpaOutput> {
    check_observation(cb, obs, n0)?;
    let nc = cb.size;
    let uniform = -(nc as f64).ln();
    let like: Vec<Vec<f64>> = (0..cb.bands).map(|b| band_likelihoods(cb, b, obs, n0)).collect();
    let mut f2v: Vec<Vec<Vec<f64>>> = cb.band_ues.iter().map(|u| vec![vec![uniform; nc]; u.len()]).collect();
    let mut v2f: Vec<Vec<Vec<f64>>> = cb.ue_bands.iter().map(|g| vec![vec![uniform; nc]; g.len()]).collect();
    let mut unstable = false;
    let mut iterations = 0;
    for _ in 0..cfg.max_iterations {
        iterations += 1;
        let mut change: f64 = 0.0;
        // function to variable
        let mut new_f2v = f2v.clone();
        for b in 0..cb.bands {
            let ues = &cb.band_ues[b];
            let incoming: Vec<&Vec<f64>> = ues
                .iter()
                .map(|&k| &v2f[k][cb.ue_bands[k].iter().position(|&x| x == b).unwrap()])
                .collect();
            for j in 0..ues.len() {
                let mut acc = vec![f64::NEG_INFINITY; nc];
                let mut digits = vec![0usize; ues.len()];
                for &l in &like[b] {
                    let mut v = l;
                    for (jj, &d) in digits.iter().enumerate() {
                        if jj != j {
                            v += incoming[jj][d];
                        }
                    }
                    let a = &mut acc[digits[j]];
                    *a = if *a == f64::NEG_INFINITY { v } else { log_add(*a, v) };
                    for d in digits.iter_mut() {
                        *d += 1;
                        if *d < nc {
                            break;
                        }
                        *d = 0;
                    }
                }
                unstable |= !normalize(&mut acc);
                for n in 0..nc {
                    change = change.max((acc[n] - f2v[b][j][n]).abs());
                }
                new_f2v[b][j] = acc;
            }
        }
        f2v = new_f2v;
        // variable to function
        for k in 0..cb.ues() {
            let g = &cb.ue_bands[k];
            for j in 0..g.len() {
                let mut acc = vec![uniform; nc];
                for (jj, &b) in g.iter().enumerate() {
                    if jj == j {
                        continue;
                    }
                    let pos = cb.band_ues[b].iter().position(|&x| x == k).unwrap();
                    for n in 0..nc {
                        acc[n] += f2v[b][pos][n];
                    }
                }
                unstable |= !normalize(&mut acc);
                for n in 0..nc {
                    change = change.max((acc[n] - v2f[k][j][n]).abs());
                }
                v2f[k][j] = acc;
            }
        }
        if change < cfg.tolerance {
            break;
        }
    }
    let mut log_posteriors = Vec::with_capacity(cb.ues());
    let mut decisions = Vec::with_capacity(cb.ues());
    for k in 0..cb.ues() {
        let mut acc = vec![uniform; nc];
        for &b in &cb.ue_bands[k] {
            let pos = cb.band_ues[b].iter().position(|&x| x == k).unwrap();
            for n in 0..nc {
                acc[n] += f2v[b][pos][n];
            }
        }
        unstable |= !normalize(&mut acc);
        decisions.push(argmax(&acc));
        log_posteriors.push(acc);
    }
    Ok(MpaOutput { log_posteriors, decisions, state: MessageState { f2v, v2f, iterations }, unstable })
}

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Exact joint detection over all `N_c^K` hypotheses.
/// Returns the ML decisions and the exact log marginals.
pub fn ml_decode(cb: &ScmaCodebook, obs: &SlotObservation, n0: f64) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    check_observation(cb, obs, n0)?;
    let k = cb.ues();
    let total = (cb.size as u128).checked_pow(k as u32).unwrap_or(u128::MAX);
    if total > 1 << 20 {
        return Err(IsacError::TooLarge(total));
    }
    let nc = cb.size;
    let mut best = (f64::NEG_INFINITY, vec![0usize; k]);
    let mut marg = vec![vec![f64::NEG_INFINITY; nc]; k];
    let mut digits = vec![0usize; k];
    for _ in 0..total {
        let mut ll = 0.0;
        for b in 0..cb.bands {
            let mut r = obs.y[b].clone();
            for &u in &cb.band_ues[b] {
                r -= &obs.h[u] * cb.codewords[u][digits[u]][b];
            }
            ll -= r.norm_squared() / n0;
        }
        if ll > best.0 {
            best = (ll, digits.clone());
        }
        for u in 0..k {
            let a = &mut marg[u][digits[u]];
            *a = if *a == f64::NEG_INFINITY { ll } else { log_add(*a, ll) };
        }
        for d in digits.iter_mut() {
            *d += 1;
            if *d < nc {
                break;
            }
            *d = 0;
        }
    }
    for m in marg.iter_mut() {
        normalize(m);
    }
    Ok((best.1, marg))
}
