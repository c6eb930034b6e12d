//! Error measures, effective SINR and Monte Carlo aggregation.

use serde::Serialize;

use crate::channel::{distance, BsRisPath, Point3};
use crate::error::{dim_err, IsacError, Result};
use crate::linalg::{CMatrix, CVector, C64};
use crate::operator::BsGrid;

/// Reported in place of `−∞ dB` for an exact estimate.
pub const NMSE_FLOOR_DB: f64 = -300.0;

fn ratio_db(err: f64, norm: f64) -> f64 {
    if err <= 0.0 {
        NMSE_FLOOR_DB
    } else {
        (10.0 * (err / norm).log10()).max(NMSE_FLOOR_DB)
    }
}

/// `10·log₁₀(Σ‖H−Ĥ‖² / Σ‖H‖²)`.
pub fn nmse_channel(truth: &[CMatrix], est: &[CMatrix]) -> Result<f64> {
    if truth.len() != est.len() {
        return dim_err(format!("{} true matrices, {} estimates", truth.len(), est.len()));
    }
    let mut err = 0.0;
    let mut norm = 0.0;
    for (h, e) in truth.iter().zip(est) {
        if h.shape() != e.shape() {
            return dim_err(format!("shape {:?} vs {:?}", h.shape(), e.shape()));
        }
        err += (h - e).norm_squared();
        norm += h.norm_squared();
    }
    if norm == 0.0 {
        return Err(IsacError::Numerical { iteration: 0, context: "NMSE of an all-zero truth".into() });
    }
    Ok(ratio_db(err, norm))
}

/// Angle triple `[u^A, u^D, v^D]` of one path.
pub type PathTriple = [f64; 3];

pub fn path_triples(paths: &[BsRisPath]) -> Vec<PathTriple> {
    paths.iter().map(|p| [p.arrival, p.departure.u, p.departure.v]).collect()
}

/// The `count` strongest grid cells of one block of `ω`, as angle triples.
pub fn strongest_cells(grid: &BsGrid, omega: &[C64], count: usize) -> Vec<PathTriple> {
    let mut order: Vec<usize> = (0..omega.len()).filter(|&c| omega[c].norm_sqr() > 0.0).collect();
    order.sort_by(|&a, &b| omega[b].norm_sqr().total_cmp(&omega[a].norm_sqr()).then(a.cmp(&b)));
    let (g1, g2) = (grid.arrival.len(), grid.departure_u.len());
    order
        .into_iter()
        .take(count)
        .map(|c| [grid.arrival[c % g1], grid.departure_u[(c / g1) % g2], grid.departure_v[c / (g1 * g2)]])
        .collect()
}

/// Splits a stacked `ω` into per-RIS strongest-path triples.
pub fn estimated_paths(grids: &[BsGrid], omega: &CVector, paths: &[usize]) -> Result<Vec<Vec<PathTriple>>> {
    let total: usize = grids.iter().map(|g| g.cells()).sum();
    if total != omega.len() || grids.len() != paths.len() {
        return dim_err("grids, path counts and coefficients disagree");
    }
    let mut offset = 0;
    let mut out = Vec::with_capacity(grids.len());
    for (g, &l) in grids.iter().zip(paths) {
        let block = &omega.as_slice()[offset..offset + g.cells()];
        out.push(strongest_cells(g, block, l));
        offset += g.cells();
    }
    Ok(out)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn sq_dist(a: &PathTriple, b: &PathTriple) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// `Σ‖φ−φ̂‖² / Σ‖φ‖²` in dB, each estimated path matched to a true path by
/// the permutation with the least total error. Missing estimates count as zero.
pub fn nmse_angles(truth: &[Vec<PathTriple>], est: &[Vec<PathTriple>]) -> Result<f64> {
    if truth.len() != est.len() {
        return dim_err("RIS count differs between truth and estimate");
    }
    let mut err = 0.0;
    let mut norm = 0.0;
    for (t, e) in truth.iter().zip(est) {
        let l = t.len();
        if l > 8 {
            return Err(IsacError::TooLarge(l as u128));
        }
        let mut padded = e.clone();
        padded.truncate(l);
        padded.resize(l, [0.0; 3]);
        let best = permutations(l)
            .iter()
            .map(|p| p.iter().enumerate().map(|(a, &b)| sq_dist(&t[a], &padded[b])).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        err += best;
        norm += t.iter().map(|x| sq_dist(x, &[0.0; 3])).sum::<f64>();
    }
    if norm == 0.0 {
        return Err(IsacError::Numerical { iteration: 0, context: "angle NMSE of all-zero truth".into() });
    }
    Ok(ratio_db(err, norm))
}

/// `ξ‖ĥ_t‖² / ((1−ξ)‖h_t−ĥ_t‖² + N₀)` for every slot.
pub fn effective_sinr_fixed(truth: &CMatrix, est: &CMatrix, xi: f64, n0: f64) -> Result<Vec<f64>> {
    if truth.shape() != est.shape() {
        return dim_err(format!("cascade shapes {:?} and {:?}", truth.shape(), est.shape()));
    }
    Ok((0..truth.ncols())
        .map(|t| {
            let e = est.column(t);
            xi * e.norm_squared() / ((1.0 - xi) * (truth.column(t) - e).norm_squared() + n0)
        })
        .collect())
}

/// Per-UE, per-slot effective SINR with inter-UE interference.
///
/// `energy[k][t]` is `‖x_{k,t}‖²` and `sigma2[k]` the data power share of UE k.
/// The interference of UE q is `σ²_q‖ĥ_{q,t}‖² + ‖(h_{q,t}−ĥ_{q,t})x_{q,t}‖²`.
pub fn effective_sinr_multiue(
    truth: &[CMatrix],
    est: &[CMatrix],
    energy: &[Vec<f64>],
    sigma2: &[f64],
    n0: f64,
) -> Result<Vec<Vec<f64>>> {
    let k = truth.len();
    if est.len() != k || energy.len() != k || sigma2.len() != k {
        return dim_err("per-UE inputs differ in length");
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let t = truth[0].ncols();
    for q in 0..k {
        if truth[q].shape() != est[q].shape() || truth[q].ncols() != t || energy[q].len() != t {
            return dim_err(format!("UE {q} has inconsistent shapes"));
        }
    }
    let mut signal = vec![vec![0.0; t]; k];
    let mut error = vec![vec![0.0; t]; k];
    for q in 0..k {
        for s in 0..t {
            let e = est[q].column(s);
            signal[q][s] = sigma2[q] * e.norm_squared();
            error[q][s] = (truth[q].column(s) - e).norm_squared() * energy[q][s];
        }
    }
    Ok((0..k)
        .map(|u| {
            (0..t)
                .map(|s| {
                    let interference: f64 = (0..k).filter(|&q| q != u).map(|q| signal[q][s] + error[q][s]).sum();
                    signal[u][s] / (error[u][s] + interference + n0)
                })
                .collect()
        })
        .collect())
}

/// `fraction · mean log₂(1 + SINR)`.
pub fn spectral_efficiency(sinr: &[f64], data_fraction: f64) -> f64 {
    if sinr.is_empty() {
        return 0.0;
    }
    data_fraction * sinr.iter().map(|s| (1.0 + s).log2()).sum::<f64>() / sinr.len() as f64
}

pub fn bit_error_rate(errors: usize, bits: usize) -> Result<f64> {
    if bits == 0 || errors > bits {
        return dim_err(format!("{errors} errors in {bits} bits"));
    }
    Ok(errors as f64 / bits as f64)
}

/// Mean distance over the UEs that were localized, and how many were not.
pub fn localization_error(est: &[Option<Point3>], truth: &[Point3]) -> Result<(Option<f64>, usize)> {
    if est.len() != truth.len() {
        return dim_err("position lists differ in length");
    }
    let d: Vec<f64> = est.iter().zip(truth).filter_map(|(e, t)| e.map(|p| distance(&p, t))).collect();
    let failures = est.len() - d.len();
    if d.is_empty() {
        return Ok((None, failures));
    }
    Ok((Some(d.iter().sum::<f64>() / d.len() as f64), failures))
}

/// Metrics of one trial of one method. Absent fields do not apply to the method.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    pub nmse_hr_db: Option<f64>,
    pub nmse_phi_db: Option<f64>,
    pub nmse_cascade_db: Option<f64>,
    pub ber: Option<f64>,
    pub se: Option<f64>,
    pub effective_throughput: Option<f64>,
    pub localization_error: Option<f64>,
    pub localization_failures: Option<f64>,
    pub iterations: Option<f64>,
}

impl MetricsReport {
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        [
            ("nmse_hr_db", self.nmse_hr_db),
            ("nmse_phi_db", self.nmse_phi_db),
            ("nmse_cascade_db", self.nmse_cascade_db),
            ("ber", self.ber),
            ("se", self.se),
            ("effective_throughput", self.effective_throughput),
            ("localization_error", self.localization_error),
            ("localization_failures", self.localization_failures),
            ("iterations", self.iterations),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect()
    }
}

/// Sample mean and standard error of the mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub stderr: f64,
    pub count: usize,
}

pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len();
    if n == 0 {
        return Summary { mean: f64::NAN, stderr: f64::NAN, count: 0 };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let stderr = if n < 2 {
        0.0
    } else {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    };
    Summary { mean, stderr, count: n }
}
