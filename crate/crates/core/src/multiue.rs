//! Multi-UE simultaneous communication and localization.
//!
//! Pipeline: pilot least squares, SCMA detection, UAMP-SBL on the full
//! dictionary, one grid step, reduction to one coefficient per (UE, RIS)
//! pair, then alternating detection / reduced least squares / angle steps.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{ura_derivatives, ChannelRealization, DictionaryGrids, PathAngles, Point3, SystemGeometry};
use crate::error::{config_err, dim_err, IsacError, Result};
use crate::fixed_site::StepSchedule;
use crate::linalg::{regularized_solve, CMatrix, CVector, OpCounter, C64, ZERO};
use crate::operator::{stack_bands, MultiUeOperator, MultiUeRis, UeGrid};
use crate::scma::{mpa_decode, MpaConfig, ScmaCodebook, SlotObservation};
use crate::signal::RisSchedule;
use crate::uamp::{uamp_sbl_solve, unitary_transform_from_gram, UampConfig};

/// `N_s × T` codeword matrix of UE `k` for the given codeword indices.
pub fn codeword_matrix(cb: &ScmaCodebook, k: usize, index: &[usize]) -> CMatrix {
    CMatrix::from_fn(cb.bands, index.len(), |b, t| cb.codewords[k][index[t]][b])
}

/// SCMA data and pilot codeword indices of every UE.
#[derive(Clone, Debug, PartialEq)]
pub struct ScmaFrame {
    /// `data_index[k][t]`
    pub data_index: Vec<Vec<usize>>,
    pub pilot_index: Vec<Vec<usize>>,
    pub xi: f64,
}

impl ScmaFrame {
    pub fn random<R: Rng + ?Sized>(cb: &ScmaCodebook, t: usize, xi: f64, rng: &mut R) -> Self {
        let draw = |rng: &mut R| -> Vec<Vec<usize>> {
            (0..cb.ues()).map(|_| (0..t).map(|_| rng.random_range(0..cb.size)).collect()).collect()
        };
        let data_index = draw(rng);
        let pilot_index = draw(rng);
        Self { data_index, pilot_index, xi }
    }

    pub fn slots(&self) -> usize {
        self.data_index.first().map_or(0, |d| d.len())
    }

    pub fn pilots(&self, cb: &ScmaCodebook) -> Vec<CMatrix> {
        (0..cb.ues()).map(|k| codeword_matrix(cb, k, &self.pilot_index[k])).collect()
    }

    /// `√ξ·C_k(data) + √(1−ξ)·C_k(pilot)` per UE.
    pub fn symbols(&self, cb: &ScmaCodebook) -> Vec<CMatrix> {
        superimposed_symbols(cb, &self.data_index, &self.pilots(cb), self.xi)
    }
}

pub fn superimposed_symbols(cb: &ScmaCodebook, data_index: &[Vec<usize>], pilots: &[CMatrix], xi: f64) -> Vec<CMatrix> {
    let (a, b) = (xi.sqrt(), (1.0 - xi).sqrt());
    data_index
        .iter()
        .enumerate()
        .map(|(k, idx)| codeword_matrix(cb, k, idx) * C64::new(a, 0.0) + &pilots[k] * C64::new(b, 0.0))
        .collect()
}

/// Everything Algorithm 3 may use.
#[derive(Clone, Debug)]
pub struct MultiUeProblem {
    pub ris: Vec<MultiUeRis>,
    pub ris_positions: Vec<Point3>,
    /// `2·spacing/λ` of each RIS
    pub ris_scales: Vec<f64>,
    /// half-width of the UE-side effective-angle domain of each RIS
    pub ranges: Vec<f64>,
    pub grids: Vec<UeGrid>,
    /// received blocks, one M × T matrix per band
    pub y: Vec<CMatrix>,
    /// pilot codeword matrices per UE (N_s × T)
    pub pilot: Vec<CMatrix>,
    pub codebook: ScmaCodebook,
    pub xi: f64,
    pub noise_var: f64,
}

impl MultiUeProblem {
    /// `bs_ris` overrides the true BS-RIS matrices, e.g. with fixed-site estimates.
    #[allow(clippy::too_many_arguments)]
    pub fn from_scene(
        geom: &SystemGeometry,
        grids: &DictionaryGrids,
        chan: &ChannelRealization,
        schedule: &RisSchedule,
        bs_ris: Option<&[CMatrix]>,
        y: Vec<CMatrix>,
        pilot: Vec<CMatrix>,
        codebook: ScmaCodebook,
        xi: f64,
        noise_var: f64,
    ) -> Result<Self> {
        let n_r = geom.ris.len();
        if schedule.theta.len() < n_r || grids.ris.len() < n_r {
            return dim_err("schedule or grids miss a RIS");
        }
        let ris = (0..n_r)
            .map(|i| MultiUeRis {
                ny: geom.ris[i].ny,
                nz: geom.ris[i].nz,
                bs_ris: bs_ris.map_or_else(|| chan.bs_ris[i].matrix.clone(), |h| h[i].clone()),
                theta: schedule.theta[i].clone(),
            })
            .collect();
        let p = Self {
            ris,
            ris_positions: geom.ris.iter().map(|r| r.position).collect(),
            ris_scales: (0..n_r).map(|i| geom.ris_scale(i)).collect(),
            ranges: grids.ris.iter().take(n_r).map(|g| g.ris_range).collect(),
            grids: grids.ris.iter().take(n_r).map(UeGrid::from_grids).collect(),
            y,
            pilot,
            codebook,
            xi,
            noise_var,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.xi > 0.0 && self.xi < 1.0) {
            return config_err(format!("power split xi = {} outside (0, 1)", self.xi));
        }
        if !(self.noise_var > 0.0) {
            return config_err("noise variance must be positive");
        }
        if self.ris.len() < 2 {
            return config_err("localization needs at least two RISs");
        }
        if self.pilot.len() != self.codebook.ues() || self.y.len() != self.codebook.bands {
            return dim_err("pilots or bands disagree with the codebook");
        }
        let t = self.slots();
        if self.y.iter().any(|b| b.ncols() != t) || self.pilot.iter().any(|p| p.shape() != (self.codebook.bands, t)) {
            return dim_err("slot counts disagree");
        }
        Ok(())
    }

    pub fn ues(&self) -> usize {
        self.codebook.ues()
    }

    pub fn slots(&self) -> usize {
        self.y[0].ncols()
    }

    pub fn antennas(&self) -> usize {
        self.y[0].nrows()
    }

    pub fn measurements(&self) -> usize {
        self.antennas() * self.slots() * self.codebook.bands
    }

    pub fn y_vec(&self) -> CVector {
        stack_bands(&self.y)
    }

    pub fn symbols(&self, data_index: &[Vec<usize>]) -> Vec<CMatrix> {
        superimposed_symbols(&self.codebook, data_index, &self.pilot, self.xi)
    }

    pub fn pilot_symbols(&self) -> Vec<CMatrix> {
        let s = C64::new((1.0 - self.xi).sqrt(), 0.0);
        self.pilot.iter().map(|p| p * s).collect()
    }
}

// ---------------------------------------------------------------- detection

/// Per-UE M × T cascaded channels from the full coefficient vector.
pub fn channels_from_full(op: &MultiUeOperator, psi: &CVector) -> Vec<CMatrix> {
    let (m, t) = (op.antennas, op.slots);
    (0..op.ues())
        .map(|k| {
            let mut h = CVector::zeros(m * t);
            for (i, wi) in op.w.iter().enumerate() {
                let off = op.column_index(k, i, 0);
                h += wi * psi.rows(off, wi.ncols());
            }
            CMatrix::from_column_slice(m, t, h.as_slice())
        })
        .collect()
}

/// SCMA detection of every slot given per-UE cascaded channels.
/// Returns the decisions and the number of slots flagged unstable.
pub fn detect_frame(
    problem: &MultiUeProblem,
    channels: &[CMatrix],
    noise_var: f64,
    cfg: &MpaConfig,
) -> Result<(Vec<Vec<usize>>, usize)> {
    let cb = &problem.codebook;
    let (k_count, t_count, bands) = (cb.ues(), problem.slots(), cb.bands);
    let (a, b) = (problem.xi.sqrt(), (1.0 - problem.xi).sqrt());
    let mut out = vec![vec![0usize; t_count]; k_count];
    let mut unstable = 0;
    for t in 0..t_count {
        let h: Vec<CVector> = channels.iter().map(|c| c.column(t) * C64::new(a, 0.0)).collect();
        let y: Vec<CVector> = (0..bands)
            .map(|n| {
                let mut v = problem.y[n].column(t).into_owned();
                for k in 0..k_count {
                    let p = problem.pilot[k][(n, t)];
                    if p != ZERO {
                        v -= channels[k].column(t) * (p * b);
                    }
                }
                v
            })
            .collect();
        let o = mpa_decode(cb, &SlotObservation { y: &y, h: &h }, noise_var, cfg)?;
        unstable += o.unstable as usize;
        for k in 0..k_count {
            out[k][t] = o.decisions[k];
        }
    }
    Ok((out, unstable))
}

// ---------------------------------------------------------------- full-grid stage

/// `ψ⁽⁰⁾` from the pilot-only operator built with `√(1−ξ)·X_p`.
pub fn pilot_ls_init(problem: &MultiUeProblem, relative_load: f64) -> Result<(CVector, MultiUeOperator)> {
    let op = MultiUeOperator::new(&problem.ris, &problem.grids, &problem.pilot_symbols())?;
    let gram = op.gram();
    let rhs = op.adjoint_apply(&problem.y);
    if rhs.iter().all(|z| *z == ZERO) {
        return Ok((CVector::zeros(op.cols()), op));
    }
    let psi = regularized_solve(&gram, &rhs, relative_load, "pilot least squares")?;
    Ok((psi, op))
}

/// `‖y − D(η)ψ‖²`.
pub fn full_objective(problem: &MultiUeProblem, op: &MultiUeOperator, psi: &CVector) -> f64 {
    op.apply(psi).iter().zip(&problem.y).map(|(a, y)| (a - y).norm_squared()).sum()
}

/// Gradient of [`full_objective`] with respect to the u and v grid values of every RIS.
pub fn full_grid_gradient(
    problem: &MultiUeProblem,
    op: &MultiUeOperator,
    grids: &[UeGrid],
    psi: &CVector,
) -> Vec<(Vec<f64>, Vec<f64>)> {
    let (m, t) = (op.antennas, op.slots);
    let resid: Vec<CMatrix> = op.apply(psi).iter().zip(&problem.y).map(|(a, y)| a - y).collect();
    // z_k = Σ_b conj(x_k[b,t])·r_{b,t}
    let z: Vec<CVector> = (0..op.ues())
        .map(|k| {
            let mut zk = CMatrix::zeros(m, t);
            for (b, r) in resid.iter().enumerate() {
                for s in 0..t {
                    let x = op.symbols[k][(b, s)];
                    if x != ZERO {
                        let mut col = zk.column_mut(s);
                        col.axpy(x.conj(), &r.column(s), C64::new(1.0, 0.0));
                    }
                }
            }
            CVector::from_column_slice(zk.as_slice())
        })
        .collect();
    let mut grads = Vec::with_capacity(grids.len());
    for (i, g) in grids.iter().enumerate() {
        let (du, dv) = op.grid_derivatives(&problem.ris[i], g);
        let gu_len = g.u.len();
        let mut gu = vec![0.0; gu_len];
        let mut gv = vec![0.0; g.v.len()];
        for (k, zk) in z.iter().enumerate() {
            let eu = du.ad_mul(zk);
            let ev = dv.ad_mul(zk);
            let off = op.column_index(k, i, 0);
            for cell in 0..g.cells() {
                let c = psi[off + cell];
                if c == ZERO {
                    continue;
                }
                gu[cell % gu_len] += 2.0 * (c * eu[cell].conj()).re;
                gv[cell / gu_len] += 2.0 * (c * ev[cell].conj()).re;
            }
        }
        grads.push((gu, gv));
    }
    grads
}

fn normalized_step(x: &[f64], g: &[f64], eps: f64, scale: f64, range: f64) -> Vec<f64> {
    if !(scale > 0.0) || !scale.is_finite() {
        return x.to_vec();
    }
    x.iter().zip(g).map(|(a, d)| (a - eps * d / scale).clamp(-range, range)).collect()
}

/// One descent step on all grid values, halving the step until the objective does not increase.
/// Returns the new grids, the new objective and whether a step was taken.
pub fn refine_grids_multi(
    problem: &MultiUeProblem,
    op: &MultiUeOperator,
    grids: &[UeGrid],
    psi: &CVector,
    schedule: &StepSchedule,
    j: usize,
    max_halvings: usize,
) -> Result<(Vec<UeGrid>, f64, bool)> {
    let base = full_objective(problem, op, psi);
    let grads = full_grid_gradient(problem, op, grids, psi);
    if grads.iter().any(|(a, b)| a.iter().chain(b).any(|x| !x.is_finite())) {
        log::warn!("non-finite grid gradient, step skipped");
        return Ok((grids.to_vec(), base, false));
    }
    let mut eps_scale = 1.0;
    for _ in 0..=max_halvings {
        let mut trial_op = op.clone();
        let mut trial = Vec::with_capacity(grids.len());
        for (i, (g, (gu, gv))) in grids.iter().zip(&grads).enumerate() {
            let range = problem.ranges[i];
            let eps = schedule.step(range, -range, j) * eps_scale;
            let max = gu.iter().chain(gv).map(|x| x.abs()).fold(0.0, f64::max);
            let ng = UeGrid { u: normalized_step(&g.u, gu, eps, max, range), v: normalized_step(&g.v, gv, eps, max, range) };
            trial_op.set_grid(i, &problem.ris[i], &ng);
            trial.push(ng);
        }
        let val = full_objective(problem, &trial_op, psi);
        if val <= base {
            return Ok((trial, val, true));
        }
        eps_scale *= 0.5;
    }
    Ok((grids.to_vec(), base, false))
}

// ---------------------------------------------------------------- reduced stage

/// Reduced model: one coefficient and one angle pair per (UE, RIS), index `k·N_R + i`.
#[derive(Clone, Debug)]
pub struct ReducedModel {
    pub psi: CVector,
    pub eta: Vec<PathAngles>,
    /// selected full-vector index per pair
    pub support: Vec<usize>,
    /// pairs whose block was entirely zero
    pub empty_blocks: Vec<usize>,
    pub n_ris: usize,
}

impl ReducedModel {
    pub fn angles(&self, k: usize, i: usize) -> PathAngles {
        self.eta[k * self.n_ris + i]
    }
}

/// Keeps the largest coefficient of every (UE, RIS) block.
pub fn reduce_dimension(op: &MultiUeOperator, grids: &[UeGrid], psi: &CVector) -> ReducedModel {
    let n_r = grids.len();
    let k_count = op.ues();
    let mut out = ReducedModel {
        psi: CVector::zeros(k_count * n_r),
        eta: Vec::with_capacity(k_count * n_r),
        support: Vec::with_capacity(k_count * n_r),
        empty_blocks: Vec::new(),
        n_ris: n_r,
    };
    for k in 0..k_count {
        for (i, g) in grids.iter().enumerate() {
            let off = op.column_index(k, i, 0);
            let mut best = 0;
            for c in 0..g.cells() {
                if psi[off + c].norm() > psi[off + best].norm() {
                    best = c;
                }
            }
            if psi[off + best] == ZERO {
                out.empty_blocks.push(k * n_r + i);
            }
            let (u, v) = g.cell_angles(best);
            out.psi[k * n_r + i] = psi[off + best];
            out.eta.push(PathAngles { u, v });
            out.support.push(off + best);
        }
    }
    out
}

/// Reduced operator `D_redu` with columns `k·N_R + i`, optionally charged to `ops`.
pub fn reduced_operator(
    ris: &[MultiUeRis],
    eta: &[PathAngles],
    symbols: &[CMatrix],
    ops: &OpCounter,
) -> CMatrix {
    let n_r = ris.len();
    let (bands, t) = symbols[0].shape();
    let m = ris[0].bs_ris.nrows();
    let mut d = CMatrix::zeros(m * t * bands, symbols.len() * n_r);
    for (k, x) in symbols.iter().enumerate() {
        for (i, r) in ris.iter().enumerate() {
            let a = eta[k * n_r + i];
            let resp = r.response_at(a.u, a.v);
            ops.add(r.response_cost());
            fill_column(&mut d, k * n_r + i, &resp, x, ops);
        }
    }
    d
}

fn fill_column(d: &mut CMatrix, col: usize, resp: &CMatrix, x: &CMatrix, ops: &OpCounter) {
    let (m, t) = resp.shape();
    let mut c = d.column_mut(col);
    for b in 0..x.nrows() {
        for s in 0..t {
            let xv = x[(b, s)];
            if xv == ZERO {
                continue;
            }
            let base = m * s + m * t * b;
            for a in 0..m {
                c[base + a] = resp[(a, s)] * xv;
            }
            ops.add(m);
        }
    }
}

/// Per-UE M × T channels of the reduced model.
pub fn channels_from_reduced(ris: &[MultiUeRis], model: &ReducedModel, ues: usize, ops: &OpCounter) -> Vec<CMatrix> {
    (0..ues)
        .map(|k| {
            let mut h = CMatrix::zeros(ris[0].bs_ris.nrows(), ris[0].theta.ncols());
            for (i, r) in ris.iter().enumerate() {
                let a = model.angles(k, i);
                ops.add(r.response_cost() + h.len());
                h += r.response_at(a.u, a.v) * model.psi[k * model.n_ris + i];
            }
            h
        })
        .collect()
}

fn counted_matvec(d: &CMatrix, x: &CVector, ops: &OpCounter) -> CVector {
    ops.add(d.nrows() * d.ncols());
    d * x
}

fn counted_adjoint(d: &CMatrix, x: &CVector, ops: &OpCounter) -> CVector {
    ops.add(d.nrows() * d.ncols());
    d.ad_mul(x)
}

/// Conjugate-gradient least squares on `min‖y − Dψ‖²`, warm-started at `x0`.
pub fn cgls(d: &CMatrix, y: &CVector, x0: &CVector, iterations: usize, tol: f64, ops: &OpCounter) -> CVector {
    let mut x = x0.clone();
    let mut r = y - counted_matvec(d, &x, ops);
    let mut s = counted_adjoint(d, &r, ops);
    let mut p = s.clone();
    let mut gamma = s.norm_squared();
    let g0 = gamma;
    for _ in 0..iterations {
        if gamma <= tol * tol * g0.max(f64::MIN_POSITIVE) || gamma == 0.0 {
            break;
        }
        let q = counted_matvec(d, &p, ops);
        let qq = q.norm_squared();
        if qq == 0.0 {
            break;
        }
        let alpha = gamma / qq;
        x.axpy(C64::new(alpha, 0.0), &p, C64::new(1.0, 0.0));
        r.axpy(C64::new(-alpha, 0.0), &q, C64::new(1.0, 0.0));
        s = counted_adjoint(d, &r, ops);
        let gn = s.norm_squared();
        let beta = gn / gamma;
        gamma = gn;
        p = &s + &p * C64::new(beta, 0.0);
    }
    x
}

/// `‖y − D_redu ψ̆‖²`.
pub fn reduced_objective(
    ris: &[MultiUeRis],
    eta: &[PathAngles],
    symbols: &[CMatrix],
    psi: &CVector,
    y: &CVector,
    ops: &OpCounter,
) -> f64 {
    let d = reduced_operator(ris, eta, symbols, ops);
    (y - counted_matvec(&d, psi, ops)).norm_squared()
}

/// Gradient of [`reduced_objective`] with respect to every (u, v) pair.
pub fn reduced_gradient(
    ris: &[MultiUeRis],
    eta: &[PathAngles],
    symbols: &[CMatrix],
    psi: &CVector,
    y: &CVector,
    ops: &OpCounter,
) -> Vec<(f64, f64)> {
    reduced_gradient_curvature(ris, eta, symbols, psi, y, ops).into_iter().map(|(g, _)| g).collect()
}

/// Gradient and the Gauss-Newton diagonal `2|ψ̆|²‖∂d/∂η‖²` of every (u, v) pair.
pub fn reduced_gradient_curvature(
    ris: &[MultiUeRis],
    eta: &[PathAngles],
    symbols: &[CMatrix],
    psi: &CVector,
    y: &CVector,
    ops: &OpCounter,
) -> Vec<((f64, f64), (f64, f64))> {
    let n_r = ris.len();
    let d = reduced_operator(ris, eta, symbols, ops);
    let resid = counted_matvec(&d, psi, ops) - y;
    let mut out = Vec::with_capacity(eta.len());
    let mut col = CMatrix::zeros(d.nrows(), 1);
    for (k, x) in symbols.iter().enumerate() {
        for (i, r) in ris.iter().enumerate() {
            let a = eta[k * n_r + i];
            let (bu, bv) = ura_derivatives(a.u, a.v, r.ny, r.nz);
            let c = psi[k * n_r + i];
            let mut g = [0.0; 2];
            let mut h = [0.0; 2];
            for (slot, b) in [bu, bv].iter().enumerate() {
                let resp = r.response(b);
                ops.add(r.response_cost());
                col.fill(ZERO);
                fill_column(&mut col, 0, &resp, x, ops);
                ops.add(2 * d.nrows());
                g[slot] = 2.0 * (resid.dotc(&col.column(0)) * c).re;
                h[slot] = 2.0 * c.norm_sqr() * col.norm_squared();
            }
            out.push(((g[0], g[1]), (h[0], h[1])));
        }
    }
    out
}

/// How STEP 3 turns the gradient into a move.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepRule {
    /// `ε·F/max|F|` per pair
    Normalized,
    /// `F/h` with the Gauss-Newton diagonal h, each component clipped to `ε`
    GaussNewton,
}

/// STEP 3: per-pair descent step on the reduced angles.
/// `max_halvings = 0` disables the objective check.
#[allow(clippy::too_many_arguments)]
pub fn step_reduced_angles(
    problem: &MultiUeProblem,
    eta: &[PathAngles],
    symbols: &[CMatrix],
    psi: &CVector,
    y: &CVector,
    schedule: &StepSchedule,
    rule: StepRule,
    j: usize,
    max_halvings: usize,
    ops: &OpCounter,
) -> Vec<PathAngles> {
    let n_r = problem.ris.len();
    let grads = reduced_gradient_curvature(&problem.ris, eta, symbols, psi, y, ops);
    if grads.iter().any(|((a, b), _)| !a.is_finite() || !b.is_finite()) {
        log::warn!("non-finite reduced gradient, step skipped");
        return eta.to_vec();
    }
    let propose = |scale: f64| -> Vec<PathAngles> {
        eta.iter()
            .zip(&grads)
            .enumerate()
            .map(|(idx, (a, ((gu, gv), (hu, hv))))| {
                let range = problem.ranges[idx % n_r];
                let eps = schedule.step(range, -range, j) * scale;
                let (du, dv) = match rule {
                    StepRule::Normalized => {
                        let m = gu.abs().max(gv.abs());
                        if m == 0.0 {
                            return *a;
                        }
                        (eps * gu / m, eps * gv / m)
                    }
                    StepRule::GaussNewton => {
                        let newton = |g: f64, h: f64| if h > 0.0 { (g / h).clamp(-eps, eps) } else { 0.0 };
                        (newton(*gu, *hu), newton(*gv, *hv))
                    }
                };
                PathAngles { u: (a.u - du).clamp(-range, range), v: (a.v - dv).clamp(-range, range) }
            })
            .collect()
    };
    if max_halvings == 0 {
        return propose(1.0);
    }
    let base = reduced_objective(&problem.ris, eta, symbols, psi, y, ops);
    let mut scale = 1.0;
    for _ in 0..=max_halvings {
        let trial = propose(scale);
        if reduced_objective(&problem.ris, &trial, symbols, psi, y, ops) <= base {
            return trial;
        }
        scale *= 0.5;
    }
    eta.to_vec()
}

// ---------------------------------------------------------------- driver

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Algorithm3Config {
    pub uamp: UampConfig,
    pub mpa: MpaConfig,
    pub step: StepSchedule,
    pub step_rule: StepRule,
    pub delta_eta: f64,
    pub max_iterations: usize,
    /// CGLS iterations per reduced least-squares update
    pub cgls_iterations: usize,
    pub max_halvings: usize,
    /// Tikhonov load of the pilot least squares, relative to the mean Gram diagonal
    pub ls_load: f64,
    /// eigenvalue cutoff of the unitary transform, relative to the largest
    pub rank_tolerance: f64,
    /// skip the full-grid step before reduction
    pub skip_full_refinement: bool,
}

impl Default for Algorithm3Config {
    fn default() -> Self {
        Self {
            uamp: UampConfig::default(),
            mpa: MpaConfig::default(),
            step: StepSchedule::default(),
            step_rule: StepRule::GaussNewton,
            delta_eta: 1e-3,
            max_iterations: 20,
            cgls_iterations: 8,
            max_halvings: 6,
            ls_load: 1e-6,
            rank_tolerance: 1e-12,
            skip_full_refinement: false,
        }
    }
}

impl Algorithm3Config {
    pub fn validate(&self) -> Result<()> {
        self.step.validate()?;
        if !(self.delta_eta > 0.0) || !(self.uamp.delta_psi > 0.0) {
            return config_err("tolerances must be positive");
        }
        if self.max_iterations == 0 {
            return config_err("max_iterations must be at least 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Algorithm3Record {
    pub iteration: usize,
    pub eta_change: f64,
    pub objective: f64,
    pub data_changes: usize,
    pub ber: Option<f64>,
    pub multiplies: u64,
}

#[derive(Clone, Debug)]
pub struct Algorithm3Output {
    pub data_index: Vec<Vec<usize>>,
    pub psi_full: CVector,
    pub grids: Vec<UeGrid>,
    pub reduced: ReducedModel,
    /// per UE, or the reason localization failed
    pub positions: Vec<std::result::Result<LocalizationResult, String>>,
    pub trace: Vec<Algorithm3Record>,
    pub converged: bool,
    pub uamp_converged: bool,
}

impl Algorithm3Output {
    /// Final cascaded channels per UE.
    pub fn channels(&self, problem: &MultiUeProblem) -> Vec<CMatrix> {
        channels_from_reduced(&problem.ris, &self.reduced, problem.ues(), &OpCounter::new())
    }
}

fn bit_error_rate(cb: &ScmaCodebook, est: &[Vec<usize>], truth: &[Vec<usize>]) -> f64 {
    let mut errors = 0;
    let mut bits = 0;
    for (e, t) in est.iter().zip(truth) {
        for (a, b) in e.iter().zip(t) {
            errors += cb.bit_errors(*a, *b);
            bits += cb.bits_per_symbol();
        }
    }
    errors as f64 / bits.max(1) as f64
}

pub fn run_algorithm3(problem: &MultiUeProblem, cfg: &Algorithm3Config) -> Result<Algorithm3Output> {
    run_algorithm3_traced(problem, cfg, None, &OpCounter::new(), |_| {})
}

/// Full pipeline. `truth` enables per-iteration BER records; `ops` counts the multiplies of the reduced loop.
pub fn run_algorithm3_traced(
    problem: &MultiUeProblem,
    cfg: &Algorithm3Config,
    truth: Option<&[Vec<usize>]>,
    ops: &OpCounter,
    mut on_iteration: impl FnMut(&Algorithm3Record),
) -> Result<Algorithm3Output> {
    problem.validate()?;
    cfg.validate()?;
    let cb = &problem.codebook;
    let n0 = problem.noise_var;
    let y = problem.y_vec();

    // lines 1-2: pilot LS and first detection
    let (psi0, pilot_op) = pilot_ls_init(problem, cfg.ls_load)?;
    let h0 = channels_from_full(&pilot_op, &psi0);
    let (mut data, _) = detect_frame(problem, &h0, n0, &cfg.mpa)?;

    // line 3: UAMP-SBL on the full dictionary
    let symbols = problem.symbols(&data);
    let op = MultiUeOperator::new(&problem.ris, &problem.grids, &symbols)?;
    let transform =
        unitary_transform_from_gram(&op.gram(), &op.adjoint_apply(&problem.y), y.norm_squared(), y.len(), cfg.rank_tolerance)?;
    let sol = uamp_sbl_solve(&transform, &cfg.uamp);
    if sol.non_finite {
        log::warn!("UAMP-SBL produced non-finite values; using the last finite iterate");
    }
    let psi_full = sol.psi.clone();

    // line 4: one grid step on the full dictionary
    let grids = if cfg.skip_full_refinement {
        problem.grids.clone()
    } else {
        refine_grids_multi(problem, &op, &problem.grids, &psi_full, &cfg.step, 0, cfg.max_halvings)?.0
    };
    let op = if grids != problem.grids {
        MultiUeOperator::new(&problem.ris, &grids, &symbols)?
    } else {
        op
    };

    let mut model = reduce_dimension(&op, &grids, &psi_full);
    if !model.empty_blocks.is_empty() {
        log::warn!("{} (UE, RIS) blocks were all zero", model.empty_blocks.len());
    }

    let mut trace = Vec::new();
    let mut converged = false;
    for j in 1..=cfg.max_iterations {
        ops.reset();
        // STEP 1
        let h = channels_from_reduced(&problem.ris, &model, problem.ues(), ops);
        let (new_data, _) = detect_frame(problem, &h, n0, &cfg.mpa)?;
        let data_changes: usize =
            new_data.iter().zip(&data).map(|(a, b)| a.iter().zip(b).filter(|(x, y)| x != y).count()).sum();
        data = new_data;
        let symbols = problem.symbols(&data);
        // STEP 2
        let d = reduced_operator(&problem.ris, &model.eta, &symbols, ops);
        model.psi = cgls(&d, &y, &model.psi, cfg.cgls_iterations, 1e-12, ops);
        // STEP 3
        let eta = step_reduced_angles(
            problem,
            &model.eta,
            &symbols,
            &model.psi,
            &y,
            &cfg.step,
            cfg.step_rule,
            j,
            cfg.max_halvings,
            ops,
        );
        let diff: f64 = eta.iter().zip(&model.eta).map(|(a, b)| (a.u - b.u).powi(2) + (a.v - b.v).powi(2)).sum();
        let norm: f64 = eta.iter().map(|a| a.u * a.u + a.v * a.v).sum();
        let change = if norm > 0.0 { diff / norm } else { 0.0 };
        model.eta = eta;
        let multiplies = ops.get();
        let objective = reduced_objective(&problem.ris, &model.eta, &symbols, &model.psi, &y, &OpCounter::new());
        let rec = Algorithm3Record {
            iteration: j,
            eta_change: change,
            objective,
            data_changes,
            ber: truth.map(|t| bit_error_rate(cb, &data, t)),
            multiplies,
        };
        on_iteration(&rec);
        trace.push(rec);
        if change < cfg.delta_eta {
            converged = true;
            break;
        }
    }

    let n_r = problem.ris.len();
    let positions = (0..problem.ues())
        .map(|k| {
            let angles: Vec<PathAngles> = (0..n_r).map(|i| model.angles(k, i)).collect();
            localize_n_ris(&angles, &problem.ris_positions, &problem.ris_scales).map_err(|e| e.to_string())
        })
        .collect();
    Ok(Algorithm3Output {
        data_index: data,
        psi_full,
        grids,
        reduced: model,
        positions,
        trace,
        converged,
        uamp_converged: sol.converged,
    })
}

// ---------------------------------------------------------------- localization

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LocalizationResult {
    pub position: Point3,
    /// UE-to-RIS distances
    pub distances: Vec<f64>,
    /// least-squares residual of the stacked system
    pub residual: f64,
    /// set when a slightly negative radicand was clipped to zero
    pub clipped: bool,
}

const RADICAND_SLACK: f64 = 1e-9;

fn x_branch(q: &Point3, d: f64, py: f64, pz: f64) -> Result<(f64, bool)> {
    let rad = d * d - (q[1] - py).powi(2) - (q[2] - pz).powi(2);
    if rad < -RADICAND_SLACK {
        return Err(IsacError::InfeasibleAngles(format!("negative radicand {rad:.3e}")));
    }
    Ok((q[0] + rad.max(0.0).sqrt(), rad < 0.0))
}

/// Closed-form position from effective AoAs at two RISs.
pub fn localize_two_ris(
    a1: PathAngles,
    a2: PathAngles,
    q1: &Point3,
    q2: &Point3,
    scales: [f64; 2],
) -> Result<LocalizationResult> {
    let (u1, v1) = (a1.u / scales[0], a1.v / scales[0]);
    let (u2, v2) = (a2.u / scales[1], a2.v / scales[1]);
    let den = u2 * v1 - u1 * v2;
    if den.abs() < 1e-14 {
        return Err(IsacError::DegenerateGeometry("UE directions at the two RISs are parallel".into()));
    }
    let d1 = (u2 * (q1[2] - q2[2]) - v2 * (q1[1] - q2[1])) / den;
    let d2 = (u1 * (q1[2] - q2[2]) - v1 * (q1[1] - q2[1])) / den;
    if !(d1 > 0.0 && d2 > 0.0) {
        return Err(IsacError::InfeasibleAngles(format!("non-positive distances {d1:.3e}, {d2:.3e}")));
    }
    let py = q1[1] - u1 * d1;
    let pz = q1[2] - v1 * d1;
    let (x1, c1) = x_branch(q1, d1, py, pz)?;
    let (x2, c2) = x_branch(q2, d2, py, pz)?;
    Ok(LocalizationResult { position: [(x1 + x2) / 2.0, py, pz], distances: vec![d1, d2], residual: 0.0, clipped: c1 || c2 })
}

/// Least-squares position from effective AoAs at `N_R ≥ 2` RISs.
pub fn localize_n_ris(angles: &[PathAngles], q: &[Point3], scales: &[f64]) -> Result<LocalizationResult> {
    let n_r = angles.len();
    if n_r < 2 || q.len() != n_r || scales.len() != n_r {
        return dim_err("need matching angle, position and scale lists for at least two RISs");
    }
    // unknowns t = [p_y, p_z, d_1, ..., d_NR]
    let mut a = DMatrix::<f64>::zeros(2 * n_r, n_r + 2);
    let mut b = DVector::<f64>::zeros(2 * n_r);
    for i in 0..n_r {
        let (u, v) = (angles[i].u / scales[i], angles[i].v / scales[i]);
        a[(2 * i, 1)] = 1.0;
        a[(2 * i, 2 + i)] = v;
        b[2 * i] = q[i][2];
        a[(2 * i + 1, 0)] = 1.0;
        a[(2 * i + 1, 2 + i)] = u;
        b[2 * i + 1] = q[i][1];
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|&&s| s > 1e-12 * smax.max(1.0)).count();
    if rank < n_r + 2 {
        return Err(IsacError::DegenerateGeometry(format!("localization system has rank {rank} < {}", n_r + 2)));
    }
    let solve = |rhs: &DVector<f64>| svd.solve(rhs, 0.0).map_err(|e| IsacError::DegenerateGeometry(e.to_string()));
    let mut t = solve(&b)?;
    // one refinement step
    t += solve(&(&b - &a * &t))?;
    let residual = (&a * &t - &b).norm();
    let (py, pz) = (t[0], t[1]);
    let mut xs = 0.0;
    let mut clipped = false;
    let mut distances = Vec::with_capacity(n_r);
    for i in 0..n_r {
        let d = t[2 + i];
        if !(d > 0.0) {
            return Err(IsacError::InfeasibleAngles(format!("non-positive distance {d:.3e} to RIS {i}")));
        }
        let (x, c) = x_branch(&q[i], d, py, pz)?;
        xs += x;
        clipped |= c;
        distances.push(d);
    }
    Ok(LocalizationResult { position: [xs / n_r as f64, py, pz], distances, residual, clipped })
}
