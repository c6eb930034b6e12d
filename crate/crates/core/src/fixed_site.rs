//! BS-RIS angle sensing and data detection for the fixed site.

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::channel::{
    ula_derivative, ula_unchecked, ura_derivatives, ura_unchecked, ChannelRealization, DictionaryGrids,
    SystemGeometry,
};
use crate::error::{config_err, dim_err, IsacError, Result};
use crate::linalg::{hermitize, regularized_solve, CMatrix, CVector, C64, ZERO};
use crate::operator::{block_derivatives, BsGrid, FixedSiteOperator, FixedSiteRis};
use crate::sbl::{
    e_step, expected_residual, objective, prune_posterior_mean, update_beta, update_gamma, Posterior, SblPrior,
};
use crate::signal::{qpsk_demod, qpsk_symbol, RisSchedule};

/// Decaying step `ε_j = range/(c·(1 + d·j))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub c: f64,
    pub d: f64,
}

impl Default for StepSchedule {
    fn default() -> Self {
        Self { c: 50.0, d: 0.5 }
    }
}

impl StepSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0) || !(self.d >= 0.0) {
            return config_err("step schedule needs c > 0 and d >= 0");
        }
        Ok(())
    }

    pub fn step(&self, range_max: f64, range_min: f64, j: usize) -> f64 {
        (range_max - range_min) / (self.c * (1.0 + self.d * j as f64))
    }
}

/// Half-widths of the effective-angle domain of one RIS.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridRanges {
    pub arrival: f64,
    pub departure: f64,
}

/// Everything the fixed-site estimator observes.
#[derive(Clone, Debug)]
pub struct FixedSiteProblem {
    pub antennas: usize,
    pub ris: Vec<FixedSiteRis>,
    pub grids: Vec<BsGrid>,
    pub ranges: Vec<GridRanges>,
    pub y: CMatrix,
    pub pilot: Vec<C64>,
    /// data share of the transmit power; 0 means the frame is pilot only
    pub xi: f64,
    pub noise_var: f64,
    pub power: f64,
}

impl FixedSiteProblem {
    /// Problem for the listed RISs, with the site channels taken as known.
    #[allow(clippy::too_many_arguments)]
    pub fn from_scene(
        geom: &SystemGeometry,
        grids: &DictionaryGrids,
        chan: &ChannelRealization,
        schedule: &RisSchedule,
        active: &[usize],
        y: CMatrix,
        pilot: Vec<C64>,
        xi: f64,
        noise_var: f64,
    ) -> Result<Self> {
        let mut ris = Vec::new();
        let mut g = Vec::new();
        let mut ranges = Vec::new();
        for &i in active {
            let r = geom.ris.get(i).ok_or_else(|| IsacError::InvalidDimension(format!("no RIS {i}")))?;
            ris.push(FixedSiteRis {
                ny: r.ny,
                nz: r.nz,
                paths: r.paths,
                site: chan.fixed_site[i].vector.clone(),
                theta: schedule.theta[i].clone(),
            });
            g.push(BsGrid::from_grids(&grids.ris[i]));
            ranges.push(GridRanges { arrival: grids.ris[i].bs_range, departure: grids.ris[i].ris_range });
        }
        let p = Self { antennas: geom.antennas, ris, grids: g, ranges, y, pilot, xi, noise_var, power: 1.0 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ris.is_empty() || self.ris.len() != self.grids.len() || self.ris.len() != self.ranges.len() {
            return dim_err("RIS, grid and range lists differ in length");
        }
        if self.y.shape() != (self.antennas, self.pilot.len()) {
            return dim_err(format!("received block is {:?}, expected {}x{}", self.y.shape(), self.antennas, self.pilot.len()));
        }
        if !(0.0..1.0).contains(&self.xi) {
            return config_err(format!("xi = {} outside [0, 1)", self.xi));
        }
        if !(self.noise_var > 0.0) {
            return config_err("noise variance must be positive");
        }
        Ok(())
    }

    pub fn slots(&self) -> usize {
        self.pilot.len()
    }

    pub fn measurements(&self) -> usize {
        self.y.len()
    }

    /// `√ξ·d + √(1−ξ)·p`
    pub fn transmitted(&self, data: &[C64]) -> Vec<C64> {
        let (a, b) = (self.xi.sqrt(), (1.0 - self.xi).sqrt());
        data.iter().zip(&self.pilot).map(|(d, p)| d * a + p * b).collect()
    }

    pub fn operator(&self, symbols: &[C64]) -> Result<FixedSiteOperator> {
        FixedSiteOperator::new(self.antennas, &self.ris, &self.grids, symbols)
    }
}

/// TR-LS coarse estimate `[ZₚᴴZₚ + ϱ²Υ]⁻¹ Zₚᴴy`.
pub fn tr_ls_init(problem: &FixedSiteProblem, grids: &[BsGrid], rho: f64) -> Result<CVector> {
    if !(rho > 0.0) {
        return config_err("data uncertainty rho must be positive");
    }
    let scaled: Vec<C64> = problem.pilot.iter().map(|p| p * (1.0 - problem.xi).sqrt()).collect();
    let op = FixedSiteOperator::new(problem.antennas, &problem.ris, grids, &scaled)?;
    let mut normal = op.gram();
    if problem.xi > 0.0 {
        normal += upsilon(&op, problem.xi) * C64::new(rho * rho, 0.0);
    }
    regularized_solve(&hermitize(normal), &op.adjoint_apply(&problem.y), 1e-10, "TR-LS normal matrix")
}

/// `Υ = ξ·ZᴴZ` with unit-modulus data, i.e. `ξ` times the symbol-free Gram.
pub fn upsilon(op: &FixedSiteOperator, xi: f64) -> CMatrix {
    op.base_gram() * C64::new(xi, 0.0)
}

/// Per-slot LMMSE data estimate from a known effective channel.
pub fn lmmse_detect(h_eff: &CMatrix, y: &CMatrix, pilot: &[C64], xi: f64, noise_var: f64, power: f64) -> Vec<C64> {
    let (sd, sp) = (xi.sqrt(), (1.0 - xi).sqrt());
    (0..y.ncols())
        .map(|t| {
            let h = h_eff.column(t);
            let r = y.column(t) - h * (pilot[t] * sp);
            h.dotc(&r) / (sd * (h.norm_squared() + noise_var / power))
        })
        .collect()
}

/// LMMSE data estimate using the channel implied by `omega`.
pub fn lmmse_data_init(problem: &FixedSiteProblem, grids: &[BsGrid], omega: &CVector) -> Result<Vec<C64>> {
    if problem.xi == 0.0 {
        return Ok(vec![ZERO; problem.slots()]);
    }
    let op = FixedSiteOperator::new(problem.antennas, &problem.ris, grids, &problem.pilot)?;
    let h = op.channel(omega);
    Ok(lmmse_detect(&h, &problem.y, &problem.pilot, problem.xi, problem.noise_var, problem.power))
}

/// Hard QPSK decisions and their symbols.
pub fn demod_remod(x: &[C64]) -> (Vec<usize>, Vec<C64>) {
    let idx: Vec<usize> = x.iter().map(|&z| qpsk_demod(z)).collect();
    let sym = idx.iter().map(|&i| qpsk_symbol(i)).collect();
    (idx, sym)
}

/// Gradient of `E‖y − Zω‖²` with respect to every grid entry.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GridGradient {
    pub arrival: Vec<f64>,
    pub departure_u: Vec<f64>,
    pub departure_v: Vec<f64>,
}

/// Closed-form `∂E‖y − Zω‖²/∂ν` at the posterior `post`.
///
/// With `S = Σ + μμᴴ`, each column `a` contributes
/// `2Re(−μ_a yᴴ∂z_a + S[a,:]·Zᴴ∂z_a)` to the entry it depends on.
pub fn residual_gradient(
    problem: &FixedSiteProblem,
    op: &FixedSiteOperator,
    grids: &[BsGrid],
    post: &Posterior,
) -> Vec<GridGradient> {
    let s = post.second_moment();
    let mut out = Vec::with_capacity(op.blocks.len());
    for (i, bi) in op.blocks.iter().enumerate() {
        let der = block_derivatives(problem.antennas, &problem.ris[i], &grids[i], &op.symbols);
        let (g1, g2, g3) = (bi.g1, bi.g2, bi.g3);
        let mut grad = GridGradient { arrival: vec![0.0; g1], departure_u: vec![0.0; g2], departure_v: vec![0.0; g3] };
        let families: [(&CMatrix, &CMatrix); 3] = [(&der.da, &bi.zc), (&bi.a, &der.dzu), (&bi.a, &der.dzv)];
        for (f, (fa, fz)) in families.iter().enumerate() {
            // ∂Zᴴy on this block
            let w = (fa.ad_mul(&problem.y) * fz.map(|z| z.conj())) * C64::new(bi.scale, 0.0);
            // Zᴴ∂Z, all rows, this block's columns
            let mut zdz = CMatrix::zeros(op.cols(), bi.cols());
            for bj in &op.blocks {
                let kz = bj.zc.ad_mul(fz);
                let ka = bj.a.ad_mul(fa);
                let blk = kz.kronecker(&ka) * C64::new(bi.scale * bj.scale, 0.0);
                zdz.view_mut((bj.offset, 0), (bj.cols(), bi.cols())).copy_from(&blk);
            }
            for local in 0..bi.cols() {
                let a = bi.offset + local;
                let mut c = -post.mu[a] * w[local].conj();
                for b in 0..op.cols() {
                    c += s[(a, b)] * zdz[(b, local)];
                }
                let v = 2.0 * c.re;
                let (k1, k2, k3) = (local % g1, (local / g1) % g2, local / (g1 * g2));
                match f {
                    0 => grad.arrival[k1] += v,
                    1 => grad.departure_u[k2] += v,
                    _ => grad.departure_v[k3] += v,
                }
            }
        }
        out.push(grad);
    }
    out
}

/// `E‖y − Zω‖²` for the given grids and symbols under a fixed posterior.
pub fn residual_at(problem: &FixedSiteProblem, grids: &[BsGrid], symbols: &[C64], post: &Posterior) -> Result<f64> {
    let op = FixedSiteOperator::new(problem.antennas, &problem.ris, grids, symbols)?;
    Ok(expected_residual(problem.y.norm_squared(), &op.adjoint_apply(&problem.y), &op.gram(), post))
}

/// One normalized sub-gradient step on the refinable grid entries, with backtracking.
/// Returns the accepted grids (or the input on failure) and the new residual.
pub fn refine_grids_fixed(
    problem: &FixedSiteProblem,
    grids: &[BsGrid],
    symbols: &[C64],
    post: &Posterior,
    schedule: &StepSchedule,
    j: usize,
    max_halvings: usize,
) -> Result<(Vec<BsGrid>, f64, bool)> {
    let op = FixedSiteOperator::new(problem.antennas, &problem.ris, grids, symbols)?;
    let base = expected_residual(problem.y.norm_squared(), &op.adjoint_apply(&problem.y), &op.gram(), post);
    let grad = residual_gradient(problem, &op, grids, post);
    if grad.iter().any(|g| g.arrival.iter().chain(&g.departure_u).chain(&g.departure_v).any(|v| !v.is_finite())) {
        warn!("non-finite grid gradient at iteration {j}, refinement skipped");
        return Ok((grids.to_vec(), base, false));
    }
    let mut scale = 1.0;
    for _ in 0..=max_halvings {
        let cand: Vec<BsGrid> = grids
            .iter()
            .zip(&grad)
            .zip(&problem.ranges)
            .map(|((g, d), r)| BsGrid {
                arrival: descend(&g.arrival, &d.arrival, schedule.step(r.arrival, -r.arrival, j) * scale, r.arrival),
                departure_u: descend(&g.departure_u, &d.departure_u, schedule.step(r.departure, -r.departure, j) * scale, r.departure),
                departure_v: descend(&g.departure_v, &d.departure_v, schedule.step(r.departure, -r.departure, j) * scale, r.departure),
            })
            .collect();
        let e = residual_at(problem, &cand, symbols, post)?;
        if e < base {
            return Ok((cand, e, true));
        }
        scale *= 0.5;
    }
    Ok((grids.to_vec(), base, false))
}

/// Moves every entry but the first against the gradient, normalized by its largest magnitude.
fn descend(grid: &[f64], grad: &[f64], eps: f64, range: f64) -> Vec<f64> {
    let max = grad.iter().skip(1).map(|g| g.abs()).fold(0.0, f64::max);
    let mut out = grid.to_vec();
    if max == 0.0 {
        return out;
    }
    for k in 1..grid.len() {
        out[k] = (grid[k] - eps * grad[k] / max).clamp(-range, range);
    }
    out
}

/// `Σ_Heff(t, t)`: trace of the effective-channel covariance of every slot.
pub fn effective_channel_variance(op: &FixedSiteOperator, sigma: &CMatrix) -> Vec<f64> {
    // Ξ reduced over g1: Ξ_red[(i,c),(j,c')] = Σ_{g,g'} Σ[(i,g,c),(j,g',c')]·(a_g'ᴴ a_g)
    let pcs: Vec<usize> = op.blocks.iter().map(|b| b.g2 * b.g3).collect();
    let pc_off: Vec<usize> = pcs.iter().scan(0, |acc, &p| { let o = *acc; *acc += p; Some(o) }).collect();
    let pc_tot: usize = pcs.iter().sum();
    let mut xi = CMatrix::zeros(pc_tot, pc_tot);
    for (bi, oi) in op.blocks.iter().zip(&pc_off) {
        for (bj, oj) in op.blocks.iter().zip(&pc_off) {
            let aha = bj.a.ad_mul(&bi.a);
            for c in 0..bi.g2 * bi.g3 {
                for c2 in 0..bj.g2 * bj.g3 {
                    let mut acc = ZERO;
                    for g in 0..bi.g1 {
                        for g2 in 0..bj.g1 {
                            acc += sigma[(bi.offset + g + bi.g1 * c, bj.offset + g2 + bj.g1 * c2)] * aha[(g2, g)];
                        }
                    }
                    xi[(oi + c, oj + c2)] = acc * (bi.scale * bj.scale);
                }
            }
        }
    }
    (0..op.slots())
        .map(|t| {
            let v = CVector::from_fn(pc_tot, |r, _| {
                let i = pc_off.iter().rposition(|&o| o <= r).unwrap();
                op.blocks[i].base[(t, r - pc_off[i])]
            });
            let xv = &xi * v.map(|z| z.conj());
            v.iter().zip(xv.iter()).map(|(a, b)| a * b).sum::<C64>().re.max(0.0)
        })
        .collect()
}

/// Data step: per-slot Lemma-1 estimate from the pruned mean and the full covariance,
/// projected onto QPSK. Returns the new data indices and symbols and the number of changed slots.
pub fn update_data(
    problem: &FixedSiteProblem,
    op: &FixedSiteOperator,
    post: &Posterior,
    mu_pruned: &CVector,
    data_index: &[usize],
) -> (Vec<usize>, Vec<C64>, usize) {
    let (sd, sp) = (problem.xi.sqrt(), (1.0 - problem.xi).sqrt());
    let var = effective_channel_variance(op, &post.sigma);
    let mean = op.channel(mu_pruned);
    let mut idx = data_index.to_vec();
    let mut changed = 0;
    for t in 0..problem.slots() {
        let m = mean.column(t);
        let e = m.norm_squared() + var[t];
        if e <= 0.0 {
            continue;
        }
        let x = m.dotc(&problem.y.column(t)) / e;
        let cand = qpsk_demod((x - problem.pilot[t] * sp) / sd);
        if cand != idx[t] {
            idx[t] = cand;
            changed += 1;
        }
    }
    let sym = idx.iter().map(|&i| qpsk_symbol(i)).collect();
    (idx, sym, changed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Algorithm1Config {
    pub prior: SblPrior,
    pub rho: f64,
    pub gamma0: f64,
    pub beta0: f64,
    pub delta_chi: f64,
    pub delta_omega: f64,
    pub max_iterations: usize,
    pub step: StepSchedule,
    pub refine: bool,
    pub update_data: bool,
    pub max_halvings: usize,
}

impl Default for Algorithm1Config {
    fn default() -> Self {
        Self {
            prior: SblPrior::default(),
            rho: 1.0,
            gamma0: 1.0,
            beta0: 1.0,
            delta_chi: 1e-3,
            delta_omega: 0.1,
            max_iterations: 50,
            step: StepSchedule::default(),
            refine: true,
            update_data: true,
            max_halvings: 6,
        }
    }
}

impl Algorithm1Config {
    pub fn validate(&self) -> Result<()> {
        self.step.validate()?;
        if !(self.rho > 0.0 && self.gamma0 > 0.0 && self.beta0 > 0.0 && self.delta_chi > 0.0) {
            return config_err("rho, gamma0, beta0 and delta_chi must be positive");
        }
        if !(self.delta_omega > 0.0 && self.delta_omega < 1.0) {
            return config_err("delta_omega must lie in (0, 1)");
        }
        if self.max_iterations == 0 {
            return config_err("max_iterations must be at least 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    pub beta: f64,
    pub support: usize,
    pub grid_step_accepted: bool,
    pub data_changes: usize,
    pub data_reverted: bool,
}

#[derive(Clone, Debug)]
pub struct Algorithm1Output {
    pub omega: CVector,
    pub omega_full: CVector,
    pub grids: Vec<BsGrid>,
    pub data_index: Vec<usize>,
    pub data: Vec<C64>,
    pub gamma: Vec<f64>,
    pub beta: f64,
    pub trace: Vec<IterationRecord>,
    pub converged: bool,
}

impl Algorithm1Output {
    /// Estimated `H_r,i` per RIS.
    pub fn channels(&self, problem: &FixedSiteProblem) -> Result<Vec<CMatrix>> {
        let op = FixedSiteOperator::new(problem.antennas, &problem.ris, &self.grids, &problem.pilot)?;
        Ok(op.bs_ris_channels(&self.omega, &problem.ris, &self.grids))
    }

    /// Estimated cascaded channel per slot.
    pub fn cascade(&self, problem: &FixedSiteProblem) -> Result<CMatrix> {
        let op = FixedSiteOperator::new(problem.antennas, &problem.ris, &self.grids, &problem.pilot)?;
        Ok(op.channel(&self.omega))
    }
}

/// EM-based structure-aware SBL with off-grid refinement.
///
/// Each iteration runs the E-step, then the γ and β updates, the grid step and the
/// data step against the same posterior, so the evidence objective never decreases.
pub fn run_algorithm1(problem: &FixedSiteProblem, cfg: &Algorithm1Config) -> Result<Algorithm1Output> {
    run_algorithm1_traced(problem, cfg, |_| {})
}

pub fn run_algorithm1_traced(
    problem: &FixedSiteProblem,
    cfg: &Algorithm1Config,
    mut on_iteration: impl FnMut(&IterationRecord),
) -> Result<Algorithm1Output> {
    problem.validate()?;
    cfg.validate()?;
    let q = problem.measurements();
    let yn = problem.y.norm_squared();
    let mut grids = problem.grids.clone();
    let omega0 = tr_ls_init(problem, &grids, cfg.rho)?;
    let (mut data_index, mut data) = if problem.xi > 0.0 {
        demod_remod(&lmmse_data_init(problem, &grids, &omega0)?)
    } else {
        (vec![0; problem.slots()], vec![ZERO; problem.slots()])
    };
    let update_data_enabled = cfg.update_data && problem.xi > 0.0;
    let mut op = problem.operator(&problem.transmitted(&data))?;
    let mut gamma = vec![cfg.gamma0; op.cols()];
    let mut beta = cfg.beta0;
    let mut trace = Vec::new();
    let mut last: Option<(Posterior, f64)> = None;
    // symbols in force before the latest data step
    let mut previous: Option<(Vec<usize>, Vec<C64>)> = None;
    let mut converged = false;

    for j in 1..=cfg.max_iterations + 1 {
        let gram = op.gram();
        let zhy = op.adjoint_apply(&problem.y);
        let mut state = e_step(&gram, &zhy, &gamma, beta, j)
            .map(|p| {
                let l = objective(q, yn, &zhy, &gram, &p, &gamma, beta, &cfg.prior);
                (p, l)
            });
        let mut reverted = false;
        let worse = match (&state, &last) {
            (Ok((_, l)), Some((_, lp))) => !l.is_finite() || *l < *lp,
            (Err(_), _) => true,
            _ => false,
        };
        if worse {
            if let Some((idx, sym)) = previous.take() {
                // the data step lowered the objective; the other updates cannot
                data_index = idx;
                data = sym;
                op.set_symbols(&problem.transmitted(&data));
                let gram = op.gram();
                let zhy = op.adjoint_apply(&problem.y);
                state = e_step(&gram, &zhy, &gamma, beta, j).map(|p| {
                    let l = objective(q, yn, &zhy, &gram, &p, &gamma, beta, &cfg.prior);
                    (p, l)
                });
                reverted = true;
            }
        }
        let (post, l) = match state {
            Ok(s) if s.1.is_finite() => s,
            Ok(_) | Err(_) if last.is_some() => {
                warn!("iteration {j} produced no finite state; keeping the last one");
                break;
            }
            Ok(_) => return Err(IsacError::Numerical { iteration: j, context: "objective".into() }),
            Err(e) => return Err(e),
        };
        let gram = op.gram();
        let zhy = op.adjoint_apply(&problem.y);
        let mu_pruned = prune_posterior_mean(&post.mu, cfg.delta_omega);
        if let Some((_, lp)) = &last {
            let rel = (l - lp) / lp.abs().max(1.0);
            if rel.abs() < cfg.delta_chi {
                converged = true;
            }
        }
        let support = mu_pruned.iter().filter(|z| **z != ZERO).count();
        if converged || j > cfg.max_iterations {
            let rec = IterationRecord { iteration: j, objective: l, beta, support, grid_step_accepted: false, data_changes: 0, data_reverted: reverted };
            on_iteration(&rec);
            trace.push(rec);
            last = Some((post, l));
            break;
        }

        let er = expected_residual(yn, &zhy, &gram, &post);
        let new_gamma = update_gamma(&post.mu, &post.sigma, &gamma, &cfg.prior);
        let new_beta = update_beta(q, er, &cfg.prior);

        let mut accepted = false;
        if cfg.refine {
            let symbols = op.symbols.clone();
            let (g, _, ok) = refine_grids_fixed(problem, &grids, &symbols, &post, &cfg.step, j, cfg.max_halvings)?;
            if ok {
                for (i, gi) in g.iter().enumerate() {
                    op.set_grid(i, &problem.ris[i], gi);
                }
                grids = g;
                accepted = true;
            }
        }

        let mut changes = 0;
        previous = None;
        if update_data_enabled {
            let (idx, sym, ch) = update_data(problem, &op, &post, &mu_pruned, &data_index);
            if ch > 0 {
                previous = Some((std::mem::replace(&mut data_index, idx), std::mem::replace(&mut data, sym)));
                op.set_symbols(&problem.transmitted(&data));
            }
            changes = ch;
        }

        let rec = IterationRecord { iteration: j, objective: l, beta, support, grid_step_accepted: accepted, data_changes: changes, data_reverted: reverted };
        debug!("alg1 j={j} L={l:.6e} beta={beta:.3e} support={support} dx={changes}");
        on_iteration(&rec);
        trace.push(rec);
        gamma = new_gamma;
        beta = new_beta;
        last = Some((post, l));
    }

    let (post, _) = last.ok_or_else(|| IsacError::Numerical { iteration: 0, context: "no finite iterate".into() })?;
    Ok(Algorithm1Output {
        omega: prune_posterior_mean(&post.mu, cfg.delta_omega),
        omega_full: post.mu,
        grids,
        data_index,
        data,
        gamma,
        beta,
        trace,
        converged,
    })
}

/// Orthogonal matching pursuit over explicit columns.
/// `columns(k)` returns column `k`; `correlate(r)` returns `Aᴴr`.
pub fn omp(
    y: &CVector,
    cols: usize,
    sparsity: usize,
    columns: impl Fn(usize) -> CVector,
    correlate: impl Fn(&CVector) -> CVector,
    norms: &[f64],
) -> Result<(Vec<usize>, CVector)> {
    let mut support: Vec<usize> = Vec::new();
    let mut basis: Vec<CVector> = Vec::new();
    let mut r = y.clone();
    let mut coef = CVector::zeros(0);
    for _ in 0..sparsity.min(cols) {
        let c = correlate(&r);
        let mut best = None;
        let mut best_v = 0.0;
        for k in 0..cols {
            if support.contains(&k) || norms[k] <= 0.0 {
                continue;
            }
            let v = c[k].norm() / norms[k];
            if v > best_v {
                best_v = v;
                best = Some(k);
            }
        }
        let Some(k) = best else { break };
        support.push(k);
        basis.push(columns(k));
        let phi = CMatrix::from_columns(&basis);
        coef = least_squares(&phi, y)?;
        r = y - &phi * &coef;
    }
    let mut full = CVector::zeros(cols);
    for (s, c) in support.iter().zip(coef.iter()) {
        full[*s] = *c;
    }
    Ok((support, full))
}

/// Least squares through the (lightly loaded) normal equations.
pub fn least_squares(phi: &CMatrix, y: &CVector) -> Result<CVector> {
    regularized_solve(&phi.ad_mul(phi), &phi.ad_mul(y), 1e-12, "least squares")
}

/// On-grid OMP with the given symbols; one atom per path.
pub fn omp_on_grid(problem: &FixedSiteProblem, symbols: &[C64]) -> Result<CVector> {
    let op = problem.operator(symbols)?;
    let gram_diag: Vec<f64> = (0..op.cols()).map(|k| op.column(k).norm()).collect();
    let y = CVector::from_column_slice(problem.y.as_slice());
    let sparsity: usize = problem.ris.iter().map(|r| r.paths).sum();
    let m = problem.antennas;
    let t = problem.slots();
    let (_, omega) = omp(
        &y,
        op.cols(),
        sparsity,
        |k| op.column(k),
        |r| op.adjoint_apply(&CMatrix::from_column_slice(m, t, r.as_slice())),
        &gram_diag,
    )?;
    Ok(omega)
}

/// A continuous BS-RIS path atom.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathAtom {
    pub ris: usize,
    pub arrival: f64,
    pub departure_u: f64,
    pub departure_v: f64,
}

fn atom_column(problem: &FixedSiteProblem, symbols: &[C64], a: &PathAtom, which: Option<usize>) -> CVector {
    let r = &problem.ris[a.ris];
    let m = problem.antennas;
    let s = ((m * r.elements()) as f64 / r.paths as f64).sqrt();
    let (av, bv) = match which {
        None => (ula_unchecked(a.arrival, m), ura_unchecked(a.departure_u, a.departure_v, r.ny, r.nz)),
        Some(0) => (ula_derivative(a.arrival, m), ura_unchecked(a.departure_u, a.departure_v, r.ny, r.nz)),
        Some(k) => {
            let (du, dv) = ura_derivatives(a.departure_u, a.departure_v, r.ny, r.nz);
            (ula_unchecked(a.arrival, m), if k == 1 { du } else { dv })
        }
    };
    let hb = CVector::from_fn(r.elements(), |n, _| bv[n].conj() * r.site[n]);
    let z = r.theta.transpose() * hb;
    CVector::from_fn(m * symbols.len(), |row, _| av[row % m] * z[row / m] * symbols[row / m] * s)
}

/// Estimated `H_r,i` from continuous atoms and their gains.
pub fn atoms_to_channels(problem: &FixedSiteProblem, atoms: &[PathAtom], gains: &CVector) -> Vec<CMatrix> {
    let m = problem.antennas;
    let mut out: Vec<CMatrix> = problem.ris.iter().map(|r| CMatrix::zeros(m, r.elements())).collect();
    for (a, g) in atoms.iter().zip(gains.iter()) {
        let r = &problem.ris[a.ris];
        let s = ((m * r.elements()) as f64 / r.paths as f64).sqrt();
        let av = ula_unchecked(a.arrival, m);
        let bv = ura_unchecked(a.departure_u, a.departure_v, r.ny, r.nz);
        out[a.ris] += av * bv.adjoint() * (g * s);
    }
    out
}

/// Cascaded channel per slot from estimated `H_r,i`.
pub fn cascade_from_channels(problem: &FixedSiteProblem, channels: &[CMatrix]) -> CMatrix {
    let mut out = CMatrix::zeros(problem.antennas, problem.slots());
    for (h, r) in channels.iter().zip(&problem.ris) {
        let mut hd = h.clone();
        for (n, mut col) in hd.column_iter_mut().enumerate() {
            col *= r.site[n];
        }
        out += hd * &r.theta;
    }
    out
}

/// OMP followed by per-atom gradient refinement of the continuous angles.
pub fn omp_off_grid(
    problem: &FixedSiteProblem,
    symbols: &[C64],
    schedule: &StepSchedule,
    rounds: usize,
) -> Result<(Vec<PathAtom>, CVector)> {
    let op = problem.operator(symbols)?;
    let omega = omp_on_grid(problem, symbols)?;
    let mut atoms = Vec::new();
    for k in 0..op.cols() {
        if omega[k] == ZERO {
            continue;
        }
        let (i, local) = op.locate(k);
        let b = &op.blocks[i];
        let (g1, g2, g3) = (local % b.g1, (local / b.g1) % b.g2, local / (b.g1 * b.g2));
        let g = &problem.grids[i];
        atoms.push(PathAtom { ris: i, arrival: g.arrival[g1], departure_u: g.departure_u[g2], departure_v: g.departure_v[g3] });
    }
    let y = CVector::from_column_slice(problem.y.as_slice());
    let build = |atoms: &[PathAtom]| CMatrix::from_columns(&atoms.iter().map(|a| atom_column(problem, symbols, a, None)).collect::<Vec<_>>());
    if atoms.is_empty() {
        return Ok((atoms, CVector::zeros(0)));
    }
    let mut phi = build(&atoms);
    let mut gains = least_squares(&phi, &y)?;
    let mut cost = (&y - &phi * &gains).norm_squared();
    for j in 1..=rounds {
        let mut improved = false;
        for n in 0..atoms.len() {
            let r = &y - &phi * &gains;
            let grad: Vec<f64> = (0..3)
                .map(|w| -2.0 * (gains[n] * r.dotc(&atom_column(problem, symbols, &atoms[n], Some(w)))).re)
                .collect();
            let max = grad.iter().map(|g| g.abs()).fold(0.0, f64::max);
            if max == 0.0 || !max.is_finite() {
                continue;
            }
            let rg = problem.ranges[atoms[n].ris];
            let mut scale = 1.0;
            for _ in 0..8 {
                let mut a = atoms[n];
                a.arrival = (a.arrival - scale * schedule.step(rg.arrival, -rg.arrival, j) * grad[0] / max).clamp(-rg.arrival, rg.arrival);
                a.departure_u = (a.departure_u - scale * schedule.step(rg.departure, -rg.departure, j) * grad[1] / max).clamp(-rg.departure, rg.departure);
                a.departure_v = (a.departure_v - scale * schedule.step(rg.departure, -rg.departure, j) * grad[2] / max).clamp(-rg.departure, rg.departure);
                let mut trial = atoms.clone();
                trial[n] = a;
                let p = build(&trial);
                let g = least_squares(&p, &y)?;
                let c = (&y - &p * &g).norm_squared();
                if c < cost {
                    atoms = trial;
                    phi = p;
                    gains = g;
                    cost = c;
                    improved = true;
                    break;
                }
                scale *= 0.5;
            }
        }
        if !improved {
            break;
        }
    }
    Ok((atoms, gains))
}
