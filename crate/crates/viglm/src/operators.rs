//! Empirical aggregates of the per-sample operators: the averaged VI field
//! V_N, the averaged likelihood gradient, their Jacobian/score matrices, and
//! the Minty-condition diagnostics built on the minimal singular value of the
//! augmented design.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::families::{self, Family, Observation};
use crate::links::Link;

/// Fixed seed for the Minty shell probe so reports are reproducible.
const MINTY_PROBE_SEED: u64 = 0x004d_696e_7479;

/// Number of random unit directions probed per radius shell.
const MINTY_PROBE_DIRECTIONS: usize = 256;

/// Radii of the probe shells around the empirical solution.
const MINTY_PROBE_RADII: [f64; 3] = [0.1, 1.0, 10.0];

/// A fixed design: N observations, optional intercept augmentation, and the
/// design constants the finite-sample theory needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    covariates: DMatrix<f64>,
    responses: DVector<f64>,
    intercept: bool,
    /// Cached augmented design X̃ = [1 X] (or X without intercept).
    design: DMatrix<f64>,
    /// Max |x_ij| over the data.
    m_bound: f64,
    /// Optional residual bound R for the finite-sample error analysis.
    r_bound: Option<f64>,
}

impl Dataset {
    /// Builds a dataset from observations sharing one covariate dimension.
    pub fn new(observations: &[Observation], intercept: bool) -> Result<Self> {
        if observations.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let d = observations[0].x.len();
        for obs in observations {
            if obs.x.len() != d {
                return Err(Error::Shape {
                    expected: d,
                    got: obs.x.len(),
                });
            }
        }
        let n = observations.len();
        let covariates = DMatrix::from_fn(n, d, |i, j| observations[i].x[j]);
        let responses = DVector::from_fn(n, |i, _| observations[i].y);
        Self::from_matrix(covariates, responses, intercept)
    }

    /// Builds a dataset from an N×d covariate matrix and response vector.
    pub fn from_matrix(
        covariates: DMatrix<f64>,
        responses: DVector<f64>,
        intercept: bool,
    ) -> Result<Self> {
        let n = covariates.nrows();
        let d = covariates.ncols();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if responses.len() != n {
            return Err(Error::Shape {
                expected: n,
                got: responses.len(),
            });
        }
        if d + usize::from(intercept) == 0 {
            return Err(Error::Parameter(
                "a model without covariates needs an intercept".into(),
            ));
        }
        if covariates.iter().any(|v| !v.is_finite())
            || responses.iter().any(|v| !v.is_finite())
        {
            return Err(Error::Parameter("dataset entries must be finite".into()));
        }
        let design = if intercept {
            let mut m = DMatrix::zeros(n, d + 1);
            m.column_mut(0).fill(1.0);
            m.view_mut((0, 1), (n, d)).copy_from(&covariates);
            m
        } else {
            covariates.clone()
        };
        let m_bound = covariates.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        Ok(Dataset {
            covariates,
            responses,
            intercept,
            design,
            m_bound,
            r_bound: None,
        })
    }

    /// Registers a known residual bound R.
    pub fn with_r_bound(mut self, r: f64) -> Self {
        self.r_bound = Some(r);
        self
    }

    pub fn n(&self) -> usize {
        self.design.nrows()
    }

    /// Covariate dimension d (excluding the intercept).
    pub fn dim(&self) -> usize {
        self.covariates.ncols()
    }

    /// Parameter dimension: d + 1 with an intercept, d without.
    pub fn param_dim(&self) -> usize {
        self.design.ncols()
    }

    pub fn intercept(&self) -> bool {
        self.intercept
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn responses(&self) -> &DVector<f64> {
        &self.responses
    }

    /// The augmented design matrix X̃.
    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    /// Max absolute covariate entry M.
    pub fn m_bound(&self) -> f64 {
        self.m_bound
    }

    pub fn r_bound(&self) -> Option<f64> {
        self.r_bound
    }

    /// Data-driven residual bound: max_i |g⁻¹(x̃ᵢᵀβ) − yᵢ| at a reference β.
    /// Used when no R was supplied; conservative at the empirical solution.
    pub fn estimate_r(&self, link: &Link, beta: &DVector<f64>) -> Result<f64> {
        let z = self.linear_predictor(beta)?;
        let mut r = 0.0f64;
        for i in 0..self.n() {
            r = r.max((link.eval(z[i])? - self.responses[i]).abs());
        }
        Ok(r)
    }

    /// X̃β with a shape check.
    pub fn linear_predictor(&self, beta: &DVector<f64>) -> Result<DVector<f64>> {
        if beta.len() != self.param_dim() {
            return Err(Error::Shape {
                expected: self.param_dim(),
                got: beta.len(),
            });
        }
        Ok(&self.design * beta)
    }

    pub fn observation(&self, i: usize) -> Observation {
        Observation {
            x: self.covariates.row(i).iter().copied().collect(),
            y: self.responses[i],
        }
    }

    /// Minimal singular value σ_N of the augmented design.
    pub fn min_singular_value(&self) -> f64 {
        self.design
            .clone()
            .singular_values()
            .iter()
            .fold(f64::INFINITY, |acc, s| acc.min(*s))
    }
}

/// V_N(β) = (1/N) Σᵢ (g⁻¹(x̃ᵢᵀβ) − yᵢ)·x̃ᵢ.
pub fn empirical_vi(link: &Link, data: &Dataset, beta: &DVector<f64>) -> Result<DVector<f64>> {
    let z = data.linear_predictor(beta)?;
    let mut r = DVector::zeros(data.n());
    for i in 0..data.n() {
        r[i] = link.eval(z[i])? - data.responses[i];
    }
    Ok(data.design.tr_mul(&r) / data.n() as f64)
}

/// Mean likelihood gradient (1/N) Σᵢ (g⁻¹)′(zᵢ)·ℓ′(g⁻¹(zᵢ), yᵢ)·x̃ᵢ.
///
/// The population objective is often written as a sum; averaging instead
/// only rescales step sizes and keeps the canonical identity with
/// [`empirical_vi`] exact.
pub fn empirical_mle_grad(
    family: Family,
    link: &Link,
    data: &Dataset,
    beta: &DVector<f64>,
) -> Result<DVector<f64>> {
    let z = data.linear_predictor(beta)?;
    let mut s = DVector::zeros(data.n());
    for i in 0..data.n() {
        s[i] = families::mle_grad_weight(family, link, z[i], data.responses[i])?;
    }
    Ok(data.design.tr_mul(&s) / data.n() as f64)
}

/// Weighted Gram matrix (1/N) Σᵢ wᵢ·x̃ᵢx̃ᵢᵀ. The blocked matrix product is
/// not bitwise symmetric, so the rank-1 symmetry is restored explicitly.
pub(crate) fn weighted_gram(data: &Dataset, weights: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled = data.design.clone();
    for (i, mut row) in scaled.row_iter_mut().enumerate() {
        row *= weights[i];
    }
    let m = data.design.tr_mul(&scaled) / data.n() as f64;
    (&m + m.transpose()) * 0.5
}

/// Empirical Jacobian of V_N: (1/N) Σᵢ (g⁻¹)′(zᵢ)·x̃ᵢx̃ᵢᵀ, with the fixed
/// right-derivative rule on kinks (each hit increments the kink counter).
pub fn vi_jacobian(link: &Link, data: &Dataset, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
    let z = data.linear_predictor(beta)?;
    let w = DVector::from_fn(data.n(), |i, _| link.solver_deriv(z[i]));
    Ok(weighted_gram(data, &w))
}

/// Score second-moment matrix Γ_N = (1/N) Σᵢ (yᵢ − g⁻¹(zᵢ))²·x̃ᵢx̃ᵢᵀ.
pub fn gamma_matrix(link: &Link, data: &Dataset, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
    let z = data.linear_predictor(beta)?;
    let mut w = DVector::zeros(data.n());
    for i in 0..data.n() {
        let r = data.responses[i] - link.eval(z[i])?;
        w[i] = r * r;
    }
    Ok(weighted_gram(data, &w))
}

/// Diagnostics for the strong Minty condition of V_N.
#[derive(Debug, Clone)]
pub struct MintyReport {
    /// Minimal singular value of the augmented design.
    pub sigma_min: f64,
    /// μ_g·σ_N²/N when the link registers a monotonicity modulus.
    pub guaranteed_modulus: Option<f64>,
    /// Empirical min of ⟨V_N(β), β−β̂⟩ / ‖β−β̂‖² over the probe shells.
    pub grid_min_ratio: f64,
    /// Whether every probe produced a positive ratio. The probe is a
    /// falsifier, not a prover.
    pub satisfied: bool,
}

/// Computes the guaranteed Minty modulus μ_g·σ_N²/N and probes the empirical
/// ratio on shells of random directions around the solution of V_N.
pub fn minty_check(link: &Link, data: &Dataset) -> Result<MintyReport> {
    let sigma_min = data.min_singular_value();
    let guaranteed_modulus = link
        .monotone_modulus()
        .map(|mu_g| mu_g * sigma_min * sigma_min / data.n() as f64);

    let beta_hat = solve_vi_zero(link, data, &DVector::zeros(data.param_dim()), 1e-10, 200)?;

    let mut rng = ChaCha8Rng::seed_from_u64(MINTY_PROBE_SEED);
    let p = data.param_dim();
    let mut grid_min_ratio = f64::INFINITY;
    for _ in 0..MINTY_PROBE_DIRECTIONS {
        let mut dir = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = dir.norm();
        if norm < 1e-12 {
            continue;
        }
        dir /= norm;
        for radius in MINTY_PROBE_RADII {
            let beta = &beta_hat + &dir * radius;
            let v = empirical_vi(link, data, &beta)?;
            let ratio = v.dot(&(&beta - &beta_hat)) / (radius * radius);
            grid_min_ratio = grid_min_ratio.min(ratio);
        }
    }
    Ok(MintyReport {
        sigma_min,
        guaranteed_modulus,
        grid_min_ratio,
        satisfied: grid_min_ratio > 0.0,
    })
}

/// Minty modulus implied by ρ-weak monotonicity plus an error bound μ_EB for
/// an L-Lipschitz field: (μ_EB² − ρL)/(L − ρ) when ρL < μ_EB².
pub fn minty_from_weak_monotone(rho: f64, lipschitz: f64, mu_eb: f64) -> Result<Option<f64>> {
    if !(rho >= 0.0 && lipschitz > rho && mu_eb > 0.0)
        || !rho.is_finite()
        || !lipschitz.is_finite()
        || !mu_eb.is_finite()
    {
        return Err(Error::Parameter(format!(
            "need L > rho >= 0 and mu_eb > 0, got rho = {rho}, L = {lipschitz}, mu_eb = {mu_eb}"
        )));
    }
    if rho * lipschitz < mu_eb * mu_eb {
        Ok(Some((mu_eb * mu_eb - rho * lipschitz) / (lipschitz - rho)))
    } else {
        Ok(None)
    }
}

/// Damped Newton root-finder for V_N, used by the diagnostics and inference
/// paths (the budgeted first-order methods live in `solvers`). Falls back to
/// an SVD least-squares step on singular Jacobians.
pub(crate) fn solve_vi_zero(
    link: &Link,
    data: &Dataset,
    beta0: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<DVector<f64>> {
    let mut beta = beta0.clone();
    let mut v = empirical_vi(link, data, &beta)?;
    for _ in 0..max_iter {
        let res = v.norm();
        if res <= tol * (1.0 + beta.norm()) {
            return Ok(beta);
        }
        let jac = vi_jacobian(link, data, &beta)?;
        let step = jac
            .svd(true, true)
            .solve(&v, 1e-14)
            .map_err(|_| Error::SingularJacobian)?;
        let mut t = 1.0;
        loop {
            let cand = &beta - &step * t;
            let vc = empirical_vi(link, data, &cand)?;
            if vc.norm() <= (1.0 - 1e-4 * t) * res || t < 1e-6 {
                beta = cand;
                v = vc;
                break;
            }
            t *= 0.5;
        }
    }
    let residual = v.norm();
    let threshold = tol * (1.0 + beta.norm());
    if residual <= threshold {
        Ok(beta)
    } else {
        Err(Error::NotConverged {
            residual,
            threshold,
        })
    }
}
