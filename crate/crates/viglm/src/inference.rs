//! Finite-sample error bound, sandwich covariance estimators for the VI and
//! likelihood estimators, and the Monte-Carlo normality/coverage check.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::families::{self, Family};
use crate::links::Link;
use crate::operators::{
    empirical_mle_grad, empirical_vi, gamma_matrix, solve_vi_zero, vi_jacobian, Dataset,
};
use crate::synth::{generate, ExperimentConfig};

/// A β̂ is accepted for inference when ‖V_N(β̂)‖ ≤ RESIDUAL_TOL·(1 + ‖β̂‖);
/// the asymptotics are about the exact zero.
pub const RESIDUAL_TOL: f64 = 1e-8;

/// Condition number past which the bread matrix gets a ridge before
/// inversion.
const RIDGE_CONDITION_LIMIT: f64 = 1e12;

/// Two-sided 97.5% standard normal quantile for the Wald intervals.
const WALD_Z: f64 = 1.96;

/// Estimated sandwich covariance of √N(β̂ − β*): bread⁻¹·filling·bread⁻ᵀ.
#[derive(Debug, Clone)]
pub struct CovarianceEstimate {
    /// ∇V (or likelihood Hessian) estimate at β̂.
    pub jacobian: DMatrix<f64>,
    /// Score second-moment matrix at β̂.
    pub score_cov: DMatrix<f64>,
    /// Symmetrized jac⁻¹·score_cov·jac⁻ᵀ.
    pub sandwich: DMatrix<f64>,
    /// Ridge added to the jacobian before inversion; 0 when well-conditioned.
    pub ridge_used: f64,
}

/// Closed-form estimation error bound (RM/μ)·√(2(d+1)·ln(2(d+1)/ε)/N).
pub fn estimation_error_bound(
    r_bound: f64,
    m_bound: f64,
    mu: f64,
    d: usize,
    n: usize,
    eps: f64,
) -> Result<f64> {
    for (v, name) in [(r_bound, "R"), (m_bound, "M"), (mu, "mu")] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Parameter(format!("{name} must be positive, got {v}")));
        }
    }
    if n == 0 {
        return Err(Error::Parameter("N must be positive".into()));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Parameter(format!("eps must lie in (0,1), got {eps}")));
    }
    let p = (d + 1) as f64;
    Ok(r_bound * m_bound / mu * (2.0 * p * (2.0 * p / eps).ln() / n as f64).sqrt())
}

/// Inverts a symmetric matrix by eigendecomposition, adding a ridge of
/// 1e-8·trace/dim when the condition number exceeds the rescue limit.
fn invert_symmetric(matrix: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let dim = matrix.nrows();
    let sym = (matrix + matrix.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let max_abs = eig.eigenvalues.iter().fold(0.0f64, |a, l| a.max(l.abs()));
    let min_abs = eig
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, l| a.min(l.abs()));
    if max_abs == 0.0 {
        return Err(Error::SingularJacobian);
    }
    let mut ridge = 0.0;
    if max_abs / min_abs > RIDGE_CONDITION_LIMIT {
        ridge = 1e-8 * eig.eigenvalues.sum() / dim as f64;
    }
    let mut inv = DMatrix::zeros(dim, dim);
    for k in 0..dim {
        let lambda = eig.eigenvalues[k] + ridge;
        if lambda.abs() <= 1e-15 * max_abs {
            return Err(Error::SingularJacobian);
        }
        let q = eig.eigenvectors.column(k);
        inv += q * q.transpose() / lambda;
    }
    Ok((inv, ridge))
}

/// Assembles a sandwich from an already-computed bread and filling.
pub fn sandwich_from_parts(
    jacobian: DMatrix<f64>,
    score_cov: DMatrix<f64>,
) -> Result<CovarianceEstimate> {
    let (inv, ridge_used) = invert_symmetric(&jacobian)?;
    let raw = &inv * &score_cov * inv.transpose();
    let sandwich = (&raw + raw.transpose()) * 0.5;
    Ok(CovarianceEstimate {
        jacobian,
        score_cov,
        sandwich,
        ridge_used,
    })
}

fn check_zero(residual: &DVector<f64>, beta: &DVector<f64>) -> Result<()> {
    let norm = residual.norm();
    let threshold = RESIDUAL_TOL * (1.0 + beta.norm());
    if norm <= threshold {
        Ok(())
    } else {
        Err(Error::NotConverged {
            residual: norm,
            threshold,
        })
    }
}

/// Sandwich estimate ∇V̂⁻¹·Γ̂·∇V̂⁻ᵀ at an (approximate) zero of V_N.
pub fn vi_sandwich(link: &Link, data: &Dataset, beta_hat: &DVector<f64>) -> Result<CovarianceEstimate> {
    check_zero(&empirical_vi(link, data, beta_hat)?, beta_hat)?;
    vi_sandwich_at(link, data, beta_hat)
}

/// Same assembly without the zero-residual check; useful for moment studies
/// at a known reference parameter.
pub fn vi_sandwich_at(
    link: &Link,
    data: &Dataset,
    beta: &DVector<f64>,
) -> Result<CovarianceEstimate> {
    sandwich_from_parts(
        vi_jacobian(link, data, beta)?,
        gamma_matrix(link, data, beta)?,
    )
}

/// Likelihood sandwich: empirical NLL Hessian as bread, mean outer product
/// of per-sample score vectors as filling.
pub fn mle_sandwich(
    family: Family,
    link: &Link,
    data: &Dataset,
    beta_hat: &DVector<f64>,
) -> Result<CovarianceEstimate> {
    check_zero(&empirical_mle_grad(family, link, data, beta_hat)?, beta_hat)?;
    mle_sandwich_at(family, link, data, beta_hat)
}

/// Likelihood sandwich at a reference parameter, skipping the zero check.
pub fn mle_sandwich_at(
    family: Family,
    link: &Link,
    data: &Dataset,
    beta: &DVector<f64>,
) -> Result<CovarianceEstimate> {
    let z = data.linear_predictor(beta)?;
    let n = data.n();
    let mut hess_w = DVector::zeros(n);
    let mut score_w = DVector::zeros(n);
    for i in 0..n {
        let y = data.responses()[i];
        hess_w[i] = families::mle_hessian_weight(family, link, z[i], y)?;
        let s = families::mle_grad_weight(family, link, z[i], y)?;
        score_w[i] = s * s;
    }
    let jacobian = crate::operators::weighted_gram(data, &hess_w);
    let score_cov = crate::operators::weighted_gram(data, &score_w);
    sandwich_from_parts(jacobian, score_cov)
}

/// Result of the Monte-Carlo normality check.
#[derive(Debug, Clone)]
pub struct CoverageReport {
    /// Fraction of replications whose 95% Wald interval covered β*_j.
    pub coverage_per_coord: Vec<f64>,
    /// Average sandwich estimate over included replications.
    pub mean_sandwich: DMatrix<f64>,
    /// Sample covariance of the standardized errors √N·Σ̂^{-1/2}(β̂ − β*);
    /// close to the identity when the CLT holds.
    pub mc_covariance: DMatrix<f64>,
    /// Replications dropped because the solve or the sandwich failed.
    pub excluded_reps: usize,
}

struct RepOutcome {
    covered: Vec<bool>,
    standardized: DVector<f64>,
    sandwich: DMatrix<f64>,
}

/// Solves `reps` independent replications of the configured experiment at
/// sample size `n`, forms per-coordinate 95% Wald intervals from the VI
/// sandwich, and reports empirical coverage of β* plus the standardized-error
/// covariance. Replication r uses seed `config.seed + r`.
pub fn normality_check(config: &ExperimentConfig, reps: usize, n: usize) -> Result<CoverageReport> {
    if reps < 100 {
        return Err(Error::Parameter(format!(
            "need at least 100 replications, got {reps}"
        )));
    }
    let beta_star = config.beta_star_vector()?;
    let p = beta_star.len();

    let outcomes: Vec<Option<RepOutcome>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut cfg = config.clone();
            cfg.n = n;
            cfg.seed = config.seed.wrapping_add(r as u64);
            run_replication(&cfg, &beta_star).ok()
        })
        .collect();

    let mut covered_counts = vec![0usize; p];
    let mut mean_sandwich = DMatrix::zeros(p, p);
    let mut standardized: Vec<DVector<f64>> = Vec::new();
    let mut excluded_reps = 0usize;
    for outcome in outcomes {
        match outcome {
            Some(o) => {
                for (j, c) in o.covered.iter().enumerate() {
                    covered_counts[j] += usize::from(*c);
                }
                mean_sandwich += &o.sandwich;
                standardized.push(o.standardized);
            }
            None => excluded_reps += 1,
        }
    }
    let included = reps - excluded_reps;
    if included == 0 {
        return Err(Error::Parameter("every replication failed".into()));
    }
    mean_sandwich /= included as f64;
    let coverage_per_coord = covered_counts
        .iter()
        .map(|&c| c as f64 / included as f64)
        .collect();

    let mean_u = standardized.iter().sum::<DVector<f64>>() / included as f64;
    let mut mc_covariance = DMatrix::zeros(p, p);
    for u in &standardized {
        let c = u - &mean_u;
        mc_covariance += &c * c.transpose();
    }
    mc_covariance /= included as f64;

    Ok(CoverageReport {
        coverage_per_coord,
        mean_sandwich,
        mc_covariance,
        excluded_reps,
    })
}

fn run_replication(config: &ExperimentConfig, beta_star: &DVector<f64>) -> Result<RepOutcome> {
    let data = generate(config)?;
    let beta_hat = solve_vi_zero(
        &config.link,
        &data,
        &DVector::zeros(beta_star.len()),
        1e-10,
        100,
    )?;
    let est = vi_sandwich(&config.link, &data, &beta_hat)?;
    let n = data.n() as f64;
    let covered = (0..beta_star.len())
        .map(|j| {
            let half_width = WALD_Z * (est.sandwich[(j, j)] / n).sqrt();
            (beta_hat[j] - beta_star[j]).abs() <= half_width
        })
        .collect();
    let inv_sqrt = symmetric_inverse_sqrt(&est.sandwich)?;
    let standardized = inv_sqrt * (&beta_hat - beta_star) * n.sqrt();
    Ok(RepOutcome {
        covered,
        standardized,
        sandwich: est.sandwich,
    })
}

fn symmetric_inverse_sqrt(matrix: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(matrix.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, l| a.max(l.abs()));
    let dim = matrix.nrows();
    let mut out = DMatrix::zeros(dim, dim);
    for k in 0..dim {
        let lambda = eig.eigenvalues[k];
        if lambda <= 1e-12 * max {
            return Err(Error::SingularJacobian);
        }
        let q = eig.eigenvectors.column(k);
        out += q * q.transpose() / lambda.sqrt();
    }
    Ok(out)
}
