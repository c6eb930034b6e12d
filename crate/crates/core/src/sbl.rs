//! Dense sparse Bayesian learning pieces shared by the estimators.
//!
//! Coefficients with `γ = +∞` are treated as pruned: they get zero mean and
//! zero covariance and drop out of every determinant.

use serde::{Deserialize, Serialize};

use crate::error::{IsacError, Result};
use crate::linalg::{CMatrix, CVector, HermitianFactor, C64, ZERO};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SblPrior {
    pub a_gamma: f64,
    pub b_gamma: f64,
    pub beta_max: f64,
}

impl Default for SblPrior {
    fn default() -> Self {
        Self { a_gamma: 1e-4, b_gamma: 1e-4, beta_max: 1e12 }
    }
}

/// Gaussian posterior of the sparse coefficients.
#[derive(Clone, Debug)]
pub struct Posterior {
    pub mu: CVector,
    /// Full P × P covariance, zero on pruned rows and columns.
    pub sigma: CMatrix,
    /// Indices with finite precision.
    pub active: Vec<usize>,
    /// `ln det(β G_aa + Γ_a)`
    pub log_det: f64,
}

impl Posterior {
    /// `Σ + μμᴴ`
    pub fn second_moment(&self) -> CMatrix {
        &self.sigma + &self.mu * self.mu.adjoint()
    }
}

pub fn active_set(gamma: &[f64]) -> Vec<usize> {
    (0..gamma.len()).filter(|&g| gamma[g].is_finite()).collect()
}

/// `Σ = (β·ZᴴZ + diag γ)⁻¹`, `μ = β·Σ·Zᴴy` from the Gram matrix and `Zᴴy`.
pub fn e_step(gram: &CMatrix, zhy: &CVector, gamma: &[f64], beta: f64, iteration: usize) -> Result<Posterior> {
    let p = gram.nrows();
    let active = active_set(gamma);
    let na = active.len();
    let mut mu = CVector::zeros(p);
    let mut sigma = CMatrix::zeros(p, p);
    if na == 0 {
        return Ok(Posterior { mu, sigma, active, log_det: 0.0 });
    }
    let mut a = CMatrix::from_fn(na, na, |r, c| gram[(active[r], active[c])] * beta);
    for (r, &g) in active.iter().enumerate() {
        a[(r, r)] += C64::new(gamma[g], 0.0);
    }
    let f = HermitianFactor::new(a, "posterior precision")?;
    let s = f.inverse();
    let rhs = CVector::from_fn(na, |r, _| zhy[active[r]]);
    let m = (&s * rhs) * C64::new(beta, 0.0);
    if m.iter().any(|z| !z.is_finite()) {
        return Err(IsacError::Numerical { iteration, context: "posterior mean".into() });
    }
    for (r, &g) in active.iter().enumerate() {
        mu[g] = m[r];
        for (c, &h) in active.iter().enumerate() {
            sigma[(g, h)] = s[(r, c)];
        }
    }
    Ok(Posterior { mu, sigma, active, log_det: f.log_det() })
}

/// `γ_g = (a+1)/(b + Σ_gg + |μ_g|²)`; pruned entries stay pruned.
pub fn update_gamma(mu: &CVector, sigma: &CMatrix, gamma: &[f64], prior: &SblPrior) -> Vec<f64> {
    (0..mu.len())
        .map(|g| {
            if !gamma[g].is_finite() {
                return f64::INFINITY;
            }
            let e = sigma[(g, g)].re + mu[g].norm_sqr() + prior.b_gamma;
            if e > 0.0 {
                (prior.a_gamma + 1.0) / e
            } else {
                f64::INFINITY
            }
        })
        .collect()
}

/// `E‖y − Zω‖² = ‖y‖² − 2Re(yᴴZμ) + Tr(ZᴴZ·(Σ + μμᴴ))`.
pub fn expected_residual(y_norm_sqr: f64, zhy: &CVector, gram: &CMatrix, post: &Posterior) -> f64 {
    let cross = zhy.dotc(&post.mu).re;
    let gm = gram * &post.mu;
    let quad = post.mu.dotc(&gm).re;
    let mut tr = 0.0;
    for &a in &post.active {
        for &b in &post.active {
            tr += (gram[(a, b)] * post.sigma[(b, a)]).re;
        }
    }
    (y_norm_sqr - 2.0 * cross + quad + tr).max(0.0)
}

/// `β = Q / E‖y − Zω‖²`, clamped to `β_max`.
pub fn update_beta(measurements: usize, expected_residual: f64, prior: &SblPrior) -> f64 {
    if expected_residual <= 0.0 {
        return prior.beta_max;
    }
    (measurements as f64 / expected_residual).min(prior.beta_max)
}

/// Log evidence plus the Gamma hyperprior, up to constants.
pub fn objective(
    measurements: usize,
    y_norm_sqr: f64,
    zhy: &CVector,
    gram: &CMatrix,
    post: &Posterior,
    gamma: &[f64],
    beta: f64,
    prior: &SblPrior,
) -> f64 {
    // ‖y − Zμ‖² from the Gram form avoids touching Z
    let gm = gram * &post.mu;
    let res = (y_norm_sqr - 2.0 * zhy.dotc(&post.mu).re + post.mu.dotc(&gm).re).max(0.0);
    let mut l = measurements as f64 * beta.ln() - post.log_det - beta * res;
    for &g in &post.active {
        let lg = gamma[g].ln();
        l += lg + prior.a_gamma * lg - prior.b_gamma * gamma[g] - gamma[g] * post.mu[g].norm_sqr();
    }
    l
}

/// Zeroes entries with `|μ_g| ≤ δ·max|μ|`.
pub fn prune_posterior_mean(mu: &CVector, delta: f64) -> CVector {
    let max = mu.iter().map(|z| z.norm()).fold(0.0, f64::max);
    if max == 0.0 {
        return mu.clone();
    }
    mu.map(|z| if z.norm() <= delta * max { ZERO } else { z })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenseSblConfig {
    pub prior: SblPrior,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for DenseSblConfig {
    fn default() -> Self {
        Self { prior: SblPrior::default(), max_iterations: 300, tolerance: 1e-6 }
    }
}

#[derive(Clone, Debug)]
pub struct DenseSblResult {
    pub posterior: Posterior,
    pub gamma: Vec<f64>,
    pub beta: f64,
    pub objective: Vec<f64>,
    pub iterations: usize,
}

/// Plain EM-SBL on an explicit matrix; the reference for the message-passing solver.
pub fn dense_sbl(a: &CMatrix, y: &CVector, cfg: &DenseSblConfig) -> Result<DenseSblResult> {
    let gram = a.ad_mul(a);
    let zhy = a.ad_mul(y);
    let q = a.nrows();
    let yn = y.norm_squared();
    let mut gamma = vec![1.0; a.ncols()];
    let mut beta = 1.0;
    let mut trace = Vec::new();
    let mut post = e_step(&gram, &zhy, &gamma, beta, 0)?;
    let mut iterations = 0;
    for j in 0..cfg.max_iterations {
        iterations = j + 1;
        trace.push(objective(q, yn, &zhy, &gram, &post, &gamma, beta, &cfg.prior));
        let old = post.mu.clone();
        let er = expected_residual(yn, &zhy, &gram, &post);
        gamma = update_gamma(&post.mu, &post.sigma, &gamma, &cfg.prior);
        beta = update_beta(q, er, &cfg.prior);
        post = e_step(&gram, &zhy, &gamma, beta, j + 1)?;
        let d = (&post.mu - &old).norm_squared();
        let n = post.mu.norm_squared();
        if n == 0.0 || d / n < cfg.tolerance {
            break;
        }
    }
    Ok(DenseSblResult { posterior: post, gamma, beta, objective: trace, iterations })
}
