//! Sparse Bayesian learning through unitary approximate message passing.
//!
//! The transform keeps the economy SVD only. Rows of the full unitary
//! transform that fall outside the range of `A` have zero `Λ` rows; their
//! only effect on the recursion is through the noise-precision update, so
//! their energy is carried as a scalar.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::linalg::{counted_adjoint_mul, counted_mul, hermitian_eigen, svd, CMatrix, CVector, OpCounter, C64};

/// `r = U_Lᴴ y`, `Λ = Σ_D U_Rᴴ` and the row energies `λ_e = Σ_D Σ_Dᴴ 1`.
#[derive(Clone, Debug)]
pub struct UnitaryTransform {
    /// left singular vectors; absent when built from the Gram matrix
    pub u_left: Option<CMatrix>,
    pub r: CVector,
    pub lambda: CMatrix,
    pub lambda_e: Vec<f64>,
    /// `‖y‖² − ‖r‖²`, the part of y outside the range of A
    pub residual_energy: f64,
    /// length of the original measurement vector
    pub measurements: usize,
}

pub fn unitary_transform(a: &CMatrix, y: &CVector) -> Result<UnitaryTransform> {
    if a.nrows() != y.len() {
        return dim_err(format!("operator has {} rows, measurements {}", a.nrows(), y.len()));
    }
    if a.nrows() == 0 || a.ncols() == 0 {
        return dim_err("empty operator");
    }
    let d = svd(a)?;
    let r = d.u.ad_mul(y);
    let mut lambda = d.v_adjoint;
    for (i, mut row) in lambda.row_iter_mut().enumerate() {
        row *= C64::new(d.singular[i], 0.0);
    }
    let lambda_e = d.singular.iter().map(|s| s * s).collect();
    let residual_energy = (y.norm_squared() - r.norm_squared()).max(0.0);
    Ok(UnitaryTransform { u_left: Some(d.u), r, lambda, lambda_e, residual_energy, measurements: y.len() })
}

/// The same transform from `DᴴD` and `Dᴴy`, without touching D.
/// Directions with `σ² ≤ rank_tol·σ²_max` are treated as outside the range.
pub fn unitary_transform_from_gram(
    gram: &CMatrix,
    dhy: &CVector,
    y_norm_sqr: f64,
    measurements: usize,
    rank_tol: f64,
) -> Result<UnitaryTransform> {
    let p = gram.ncols();
    if gram.nrows() != p || dhy.len() != p || p == 0 {
        return dim_err("Gram matrix and Dᴴy disagree");
    }
    let (w, v) = hermitian_eigen(gram)?;
    let max = w.iter().cloned().fold(0.0, f64::max);
    // descending order, range directions only
    let keep: Vec<usize> = (0..p).rev().filter(|&i| w[i] > rank_tol * max && w[i] > 0.0).collect();
    let rows = keep.len().min(measurements);
    let mut lambda = CMatrix::zeros(rows, p);
    let mut r = CVector::zeros(rows);
    let mut lambda_e = Vec::with_capacity(rows);
    for (row, &i) in keep.iter().take(rows).enumerate() {
        let s = w[i].sqrt();
        let vi = v.column(i);
        for g in 0..p {
            lambda[(row, g)] = vi[g].conj() * s;
        }
        r[row] = vi.dotc(dhy) / s;
        lambda_e.push(w[i]);
    }
    let residual_energy = (y_norm_sqr - r.norm_squared()).max(0.0);
    Ok(UnitaryTransform { u_left: None, r, lambda, lambda_e, residual_energy, measurements })
}

impl UnitaryTransform {
    /// Same operator, new measurements.
    pub fn with_measurements(&self, y: &CVector) -> Result<Self> {
        if y.len() != self.measurements {
            return dim_err("measurement length changed");
        }
        let Some(u) = &self.u_left else {
            return dim_err("transform was built without left singular vectors");
        };
        let r = u.ad_mul(y);
        let residual_energy = (y.norm_squared() - r.norm_squared()).max(0.0);
        Ok(Self { r, residual_energy, ..self.clone() })
    }

    pub fn coefficients(&self) -> usize {
        self.lambda.ncols()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UampConfig {
    pub delta_psi: f64,
    pub max_iterations: usize,
    /// rate parameter of the precision prior
    pub b_psi: f64,
    /// initial shape parameter
    pub a_epsilon: f64,
    /// lower bound for denominators of elementwise divisions
    pub floor: f64,
}

impl Default for UampConfig {
    fn default() -> Self {
        Self { delta_psi: 1e-3, max_iterations: 200, b_psi: 1e-10, a_epsilon: 1e-3, floor: 1e-15 }
    }
}

/// Internal state of the recursion.
#[derive(Clone, Debug)]
pub struct UampState {
    pub tau_psi: f64,
    pub psi: CVector,
    pub gamma: Vec<f64>,
    pub beta: f64,
    pub s: CVector,
    pub a_epsilon: f64,
}

#[derive(Clone, Debug)]
pub struct UampOutput {
    pub psi: CVector,
    pub state: UampState,
    pub iterations: usize,
    pub converged: bool,
    /// set when the recursion produced non-finite values and the last finite iterate was returned
    pub non_finite: bool,
}

pub fn uamp_sbl_solve(t: &UnitaryTransform, cfg: &UampConfig) -> UampOutput {
    uamp_sbl_solve_counted(t, cfg, &OpCounter::new())
}

/// As [`uamp_sbl_solve`], charging every matrix-vector product to `ops`.
pub fn uamp_sbl_solve_counted(t: &UnitaryTransform, cfg: &UampConfig, ops: &OpCounter) -> UampOutput {
    let rows = t.r.len();
    let p = t.coefficients();
    let pf = p as f64;
    let fl = cfg.floor;
    let mut st = UampState {
        tau_psi: 1.0,
        psi: CVector::zeros(p),
        gamma: vec![1.0; p],
        beta: 1.0,
        s: CVector::zeros(rows),
        a_epsilon: cfg.a_epsilon,
    };
    let mut iterations = 0;
    let mut converged = false;
    let mut non_finite = false;
    while iterations < cfg.max_iterations {
        iterations += 1;
        let tau_p: Vec<f64> = t.lambda_e.iter().map(|l| st.tau_psi * l).collect();
        let mut pv = counted_mul(&t.lambda, &st.psi, ops);
        for q in 0..rows {
            pv[q] -= st.s[q] * tau_p[q];
        }
        let mut res = t.residual_energy;
        let mut vk = 0.0;
        for q in 0..rows {
            let den = (1.0 + st.beta * tau_p[q]).max(fl);
            vk += tau_p[q] / den;
            let kappa = (t.r[q] * (st.beta * tau_p[q]) + pv[q]) / den;
            res += (t.r[q] - kappa).norm_sqr();
        }
        let beta = t.measurements as f64 / (res + vk).max(fl);
        let tau_s: Vec<f64> = tau_p.iter().map(|tp| 1.0 / (tp + 1.0 / beta).max(fl)).collect();
        let s = CVector::from_fn(rows, |q, _| (t.r[q] - pv[q]) * tau_s[q]);
        let inv_tau_q: f64 = t.lambda_e.iter().zip(&tau_s).map(|(l, ts)| l * ts).sum::<f64>() / pf;
        let tau_q = 1.0 / inv_tau_q.max(fl);
        let q = &st.psi + counted_adjoint_mul(&t.lambda, &s, ops) * C64::new(tau_q, 0.0);
        let shrink: Vec<f64> = st.gamma.iter().map(|g| (1.0 + tau_q * g).max(fl)).collect();
        let tau_psi = tau_q / pf * shrink.iter().map(|d| 1.0 / d).sum::<f64>();
        let psi = CVector::from_fn(p, |g, _| q[g] / shrink[g]);
        let gamma: Vec<f64> = psi
            .iter()
            .map(|z| (2.0 * st.a_epsilon + 1.0) / (cfg.b_psi + z.norm_sqr() + tau_psi).max(fl))
            .collect();
        let mean_g = gamma.iter().sum::<f64>() / pf;
        let mean_log = gamma.iter().map(|g| g.ln()).sum::<f64>() / pf;
        // Jensen keeps the radicand non-negative up to rounding
        let a_epsilon = 0.5 * (mean_g.ln() - mean_log).max(0.0).sqrt();

        let finite = beta.is_finite()
            && tau_psi.is_finite()
            && a_epsilon.is_finite()
            && psi.iter().all(|z| z.is_finite())
            && gamma.iter().all(|g| g.is_finite() && *g > 0.0);
        if !finite {
            non_finite = true;
            break;
        }
        let change = (&psi - &st.psi).norm_squared();
        let norm = psi.norm_squared();
        st = UampState { tau_psi, psi, gamma, beta, s, a_epsilon };
        if norm == 0.0 || change / norm < cfg.delta_psi {
            converged = true;
            break;
        }
    }
    UampOutput { psi: st.psi.clone(), state: st, iterations, converged: converged && !non_finite, non_finite }
}

/// Transform and solve in one call.
pub fn uamp_sbl(a: &CMatrix, y: &CVector, cfg: &UampConfig) -> Result<UampOutput> {
    Ok(uamp_sbl_solve(&unitary_transform(a, y)?, cfg))
}
