//! Exponential-family losses ℓ(u, y), their u-derivatives, and the
//! per-sample estimating operators: the VI field (g⁻¹(z) − y)·x̃ and the
//! likelihood gradient (g⁻¹)′(z)·ℓ′(g⁻¹(z), y)·x̃.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::links::Link;

/// Positive floor substituted when a link output collapses onto the loss
/// domain boundary (e.g. softplus underflowing to 0 in the Poisson loss).
/// Keeps the likelihood gradient finite while preserving its blow-up, which
/// is exactly the instability the harness is meant to record.
const DOMAIN_FLOOR: f64 = 1e-300;

/// Largest f64 strictly below 1, for the Bernoulli upper boundary.
const ONE_MINUS: f64 = 1.0 - f64::EPSILON / 2.0;

static CLAMP_EVENTS: AtomicU64 = AtomicU64::new(0);

/// Number of times a likelihood-gradient evaluation had to clamp the mean
/// back into the loss domain.
pub fn clamp_event_count() -> u64 {
    CLAMP_EVENTS.load(Ordering::Relaxed)
}

pub fn reset_clamp_event_count() {
    CLAMP_EVENTS.store(0, Ordering::Relaxed);
}

/// Response families with their canonical links.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Gaussian,
    Bernoulli,
    Poisson,
    Exponential,
}

/// One observation: covariate vector and scalar response.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub x: Vec<f64>,
    pub y: f64,
}

impl Observation {
    pub fn new(x: Vec<f64>, y: f64) -> Result<Self> {
        if !y.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("observation entries must be finite".into()));
        }
        Ok(Observation { x, y })
    }
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Bernoulli => "bernoulli",
            Family::Poisson => "poisson",
            Family::Exponential => "exponential",
        }
    }

    /// The link for which the likelihood gradient equals the VI operator
    /// (up to sign for the exponential family).
    pub fn canonical_link(&self) -> Link {
        match self {
            Family::Gaussian => Link::Identity,
            Family::Bernoulli => Link::Sigmoid,
            Family::Poisson => Link::Exp,
            Family::Exponential => Link::Reciprocal,
        }
    }

    /// Sign relating the canonical likelihood gradient to the VI operator:
    /// ∇ℓ = sign · V. Equals −1 only for the exponential family.
    pub fn canonical_sign(&self) -> f64 {
        match self {
            Family::Exponential => -1.0,
            _ => 1.0,
        }
    }

    /// Whether a response lies in the family's support: nonnegative integers
    /// for Poisson, {0, 1} for Bernoulli, positive reals for Exponential.
    /// The operators themselves never require this (quasi-likelihood use is
    /// legitimate); generation does.
    pub fn valid_response(&self, y: f64) -> bool {
        match self {
            Family::Gaussian => y.is_finite(),
            Family::Bernoulli => y == 0.0 || y == 1.0,
            Family::Poisson => y.is_finite() && y >= 0.0 && y.fract() == 0.0,
            Family::Exponential => y.is_finite() && y >= 0.0,
        }
    }

    /// ℓ(u, y).
    pub fn loss(&self, u: f64, y: f64) -> Result<f64> {
        self.check_domain(u)?;
        Ok(match self {
            Family::Gaussian => 0.5 * (u - y) * (u - y),
            Family::Bernoulli => -y * u.ln() - (1.0 - y) * (1.0 - u).ln(),
            Family::Poisson => -y * u.ln() + u,
            Family::Exponential => u.ln() + y / u,
        })
    }

    /// ∂ℓ/∂u(u, y).
    pub fn loss_deriv(&self, u: f64, y: f64) -> Result<f64> {
        self.check_domain(u)?;
        Ok(match self {
            Family::Gaussian => u - y,
            Family::Bernoulli => -y / u + (1.0 - y) / (1.0 - u),
            Family::Poisson => 1.0 - y / u,
            Family::Exponential => 1.0 / u - y / (u * u),
        })
    }

    /// ∂²ℓ/∂u²(u, y).
    pub fn loss_second_deriv(&self, u: f64, y: f64) -> Result<f64> {
        self.check_domain(u)?;
        Ok(match self {
            Family::Gaussian => 1.0,
            Family::Bernoulli => y / (u * u) + (1.0 - y) / ((1.0 - u) * (1.0 - u)),
            Family::Poisson => y / (u * u),
            Family::Exponential => -1.0 / (u * u) + 2.0 * y / (u * u * u),
        })
    }

    fn check_domain(&self, u: f64) -> Result<()> {
        let ok = match self {
            Family::Gaussian => u.is_finite(),
            Family::Bernoulli => u > 0.0 && u < 1.0,
            Family::Poisson | Family::Exponential => u > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::LossDomain {
                family: self.name(),
                u,
            })
        }
    }

    /// Pulls a mean that collapsed onto the domain boundary back inside.
    /// A mean that is genuinely outside the domain (negative for Poisson,
    /// outside [0, 1] for Bernoulli) is a modeling error and is rejected.
    fn clamp_into_domain(&self, u: f64) -> Result<f64> {
        if u.is_nan() {
            return Err(Error::LossDomain {
                family: self.name(),
                u,
            });
        }
        let clamped = match self {
            Family::Gaussian => return Ok(u),
            Family::Bernoulli => {
                if !(0.0..=1.0).contains(&u) {
                    return Err(Error::LossDomain {
                        family: self.name(),
                        u,
                    });
                }
                u.clamp(DOMAIN_FLOOR, ONE_MINUS)
            }
            Family::Poisson | Family::Exponential => {
                if u < 0.0 {
                    return Err(Error::LossDomain {
                        family: self.name(),
                        u,
                    });
                }
                u.max(DOMAIN_FLOOR)
            }
        };
        if clamped != u {
            CLAMP_EVENTS.fetch_add(1, Ordering::Relaxed);
            log::trace!("{} mean {u} clamped to {clamped}", self.name());
        }
        Ok(clamped)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Family::Gaussian),
            "bernoulli" => Ok(Family::Bernoulli),
            "poisson" => Ok(Family::Poisson),
            "exponential" => Ok(Family::Exponential),
            _ => Err(Error::Parse {
                what: "family",
                input: s.to_string(),
            }),
        }
    }
}

fn check_shape(obs: &Observation, beta: &DVector<f64>, intercept: bool) -> Result<()> {
    let expected = obs.x.len() + usize::from(intercept);
    if beta.len() != expected {
        return Err(Error::Shape {
            expected,
            got: beta.len(),
        });
    }
    Ok(())
}

/// x̃ᵀβ where x̃ = [1; x] when the model carries an intercept.
pub(crate) fn linear_predictor(obs: &Observation, beta: &DVector<f64>, intercept: bool) -> f64 {
    let mut z = 0.0;
    let offset = usize::from(intercept);
    if intercept {
        z += beta[0];
    }
    for (j, xj) in obs.x.iter().enumerate() {
        z += beta[offset + j] * xj;
    }
    z
}

/// s · x̃.
fn scaled_augmented(obs: &Observation, intercept: bool, s: f64) -> DVector<f64> {
    let p = obs.x.len() + usize::from(intercept);
    let mut v = DVector::zeros(p);
    let offset = usize::from(intercept);
    if intercept {
        v[0] = s;
    }
    for (j, xj) in obs.x.iter().enumerate() {
        v[offset + j] = s * xj;
    }
    v
}

/// Per-sample VI operator (g⁻¹(x̃ᵀβ) − y)·x̃. Needs no domain clamping for
/// any catalog link; that asymmetry with the likelihood gradient is the
/// point of the formulation.
pub fn vi_sample_op(
    link: &Link,
    obs: &Observation,
    beta: &DVector<f64>,
    intercept: bool,
) -> Result<DVector<f64>> {
    check_shape(obs, beta, intercept)?;
    let z = linear_predictor(obs, beta, intercept);
    let residual = link.eval(z)? - obs.y;
    Ok(scaled_augmented(obs, intercept, residual))
}

/// Per-sample likelihood gradient (g⁻¹)′(z)·ℓ′(g⁻¹(z), y)·x̃ under the fixed
/// right-derivative kink rule.
pub fn mle_sample_grad(
    family: Family,
    link: &Link,
    obs: &Observation,
    beta: &DVector<f64>,
    intercept: bool,
) -> Result<DVector<f64>> {
    check_shape(obs, beta, intercept)?;
    let z = linear_predictor(obs, beta, intercept);
    let s = mle_grad_weight(family, link, z, obs.y)?;
    Ok(scaled_augmented(obs, intercept, s))
}

/// Scalar factor of the per-sample likelihood gradient.
pub(crate) fn mle_grad_weight(family: Family, link: &Link, z: f64, y: f64) -> Result<f64> {
    let u = family.clamp_into_domain(link.eval(z)?)?;
    Ok(link.solver_deriv(z) * family.loss_deriv(u, y)?)
}

/// Scalar factor of the per-sample likelihood Hessian h(z)·x̃x̃ᵀ:
/// h = (g⁻¹)″·ℓ′(g⁻¹, y) + ((g⁻¹)′)²·ℓ″(g⁻¹, y).
pub(crate) fn mle_hessian_weight(family: Family, link: &Link, z: f64, y: f64) -> Result<f64> {
    let u = family.clamp_into_domain(link.eval(z)?)?;
    let d1 = link.solver_deriv(z);
    Ok(link.solver_second_deriv(z) * family.loss_deriv(u, y)?
        + d1 * d1 * family.loss_second_deriv(u, y)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn loss_values() {
        assert_abs_diff_eq!(Family::Poisson.loss(1.0, 1.0).unwrap(), 1.0);
        assert_abs_diff_eq!(Family::Gaussian.loss(2.5, 2.5).unwrap(), 0.0);
        assert_abs_diff_eq!(Family::Exponential.loss(1.0, 2.0).unwrap(), 2.0);
        assert!(matches!(
            Family::Bernoulli.loss(1.5, 1.0),
            Err(Error::LossDomain { family: "bernoulli", .. })
        ));
        assert!(Family::Poisson.loss(0.0, 1.0).is_err());
    }

    #[test]
    fn loss_deriv_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 1e-6;
        let cases = [
            (Family::Gaussian, -3.0, 3.0, 1.7),
            (Family::Bernoulli, 0.05, 0.95, 1.0),
            (Family::Poisson, 0.1, 5.0, 3.0),
            (Family::Exponential, 0.2, 5.0, 1.4),
        ];
        for (family, lo, hi, y) in cases {
            for _ in 0..200 {
                let u = lo + (hi - lo) * rng.random::<f64>();
                let fd = (family.loss(u + h, y).unwrap() - family.loss(u - h, y).unwrap())
                    / (2.0 * h);
                assert_abs_diff_eq!(family.loss_deriv(u, y).unwrap(), fd, epsilon = 1e-4);
                let fd2 = (family.loss_deriv(u + h, y).unwrap()
                    - family.loss_deriv(u - h, y).unwrap())
                    / (2.0 * h);
                assert_abs_diff_eq!(family.loss_second_deriv(u, y).unwrap(), fd2, epsilon = 1e-3);
            }
        }
    }

    #[test]
    fn vi_sample_values() {
        // d = 0, intercept only: e^0 - 2 = -1.
        let obs = Observation::new(vec![], 2.0).unwrap();
        let v = vi_sample_op(&Link::Exp, &obs, &DVector::from_vec(vec![0.0]), true).unwrap();
        assert_eq!(v.as_slice(), [-1.0]);

        // Exact fit leaves a zero residual.
        let obs = Observation::new(vec![2.0, -1.0], 0.5).unwrap();
        let beta = DVector::from_vec(vec![0.5, 1.0, 1.5]);
        let z = 0.5 + 2.0 - 1.5;
        let obs_fit = Observation { y: z, ..obs };
        let v = vi_sample_op(&Link::Identity, &obs_fit, &beta, true).unwrap();
        assert!(v.iter().all(|c| c.abs() < 1e-15));

        // Softplus at the origin: residual log 2 on both coordinates.
        let obs = Observation::new(vec![1.0], 0.0).unwrap();
        let v = vi_sample_op(
            &Link::Softplus,
            &obs,
            &DVector::from_vec(vec![0.0, 0.0]),
            true,
        )
        .unwrap();
        let ln2 = 2f64.ln();
        assert_abs_diff_eq!(v[0], ln2, epsilon = 1e-15);
        assert_abs_diff_eq!(v[1], ln2, epsilon = 1e-15);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let obs = Observation::new(vec![1.0, 2.0], 0.0).unwrap();
        let beta = DVector::from_vec(vec![0.0, 0.0]);
        assert!(matches!(
            vi_sample_op(&Link::Identity, &obs, &beta, true),
            Err(Error::Shape { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn canonical_gradients_match_vi_per_sample() {
        // Poisson + log link at beta = 0, x = [1], y = 3: both give (1-3)·x̃.
        let obs = Observation::new(vec![1.0], 3.0).unwrap();
        let beta = DVector::from_vec(vec![0.0, 0.0]);
        let g = mle_sample_grad(Family::Poisson, &Link::Exp, &obs, &beta, true).unwrap();
        let v = vi_sample_op(&Link::Exp, &obs, &beta, true).unwrap();
        assert_eq!(g.as_slice(), [-2.0, -2.0]);
        assert_abs_diff_eq!((g - v).norm(), 0.0, epsilon = 1e-15);

        // Exponential + reciprocal link differs by a sign only.
        let obs = Observation::new(vec![0.8], 2.0).unwrap();
        let beta = DVector::from_vec(vec![1.0, 0.5]);
        let g =
            mle_sample_grad(Family::Exponential, &Link::Reciprocal, &obs, &beta, true).unwrap();
        let v = vi_sample_op(&Link::Reciprocal, &obs, &beta, true).unwrap();
        assert_abs_diff_eq!((g + v).norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn softplus_poisson_gradient_value() {
        // d = 0 scalar model at z = 0, y = 1: σ(0)(1 − 1/log 2).
        let obs = Observation::new(vec![], 1.0).unwrap();
        let beta = DVector::from_vec(vec![0.0]);
        let g = mle_sample_grad(Family::Poisson, &Link::Softplus, &obs, &beta, true).unwrap();
        let expected = 0.5 * (1.0 - 1.0 / 2f64.ln());
        assert_abs_diff_eq!(g[0], expected, epsilon = 1e-15);
        assert_abs_diff_eq!(g[0], -0.22134752, epsilon = 1e-7);
    }

    /// The likelihood gradient matches central differences of the composed
    /// loss β ↦ ℓ(g⁻¹(x̃ᵀβ), y) at non-kink points.
    #[test]
    fn mle_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        let cases: Vec<(Family, Link, f64)> = vec![
            (Family::Gaussian, Link::Identity, 0.7),
            (Family::Gaussian, Link::Relu, 0.7),
            (Family::Poisson, Link::Softplus, 2.0),
            (Family::Poisson, Link::Exp, 2.0),
            (Family::Bernoulli, Link::Sigmoid, 1.0),
            (Family::Bernoulli, Link::ArctanCdf, 0.0),
            (
                Family::Poisson,
                Link::gmm_cdf(vec![1.65, 1.35], vec![-0.5, 1.2], vec![0.7, 0.5]).unwrap(),
                1.0,
            ),
        ];
        for (family, link, y) in cases {
            for _ in 0..50 {
                let obs = Observation::new(vec![rng.random::<f64>() * 2.0 - 1.0], y).unwrap();
                let beta =
                    DVector::from_vec(vec![rng.random::<f64>() - 0.5, rng.random::<f64>() + 0.3]);
                let z = linear_predictor(&obs, &beta, true);
                if link.kinks().iter().any(|k| (z - k).abs() < 1e-4) {
                    continue;
                }
                let grad = mle_sample_grad(family, &link, &obs, &beta, true).unwrap();
                for j in 0..beta.len() {
                    let mut bp = beta.clone();
                    let mut bm = beta.clone();
                    bp[j] += h;
                    bm[j] -= h;
                    let up = link.eval(linear_predictor(&obs, &bp, true)).unwrap();
                    let um = link.eval(linear_predictor(&obs, &bm, true)).unwrap();
                    let fd =
                        (family.loss(up, y).unwrap() - family.loss(um, y).unwrap()) / (2.0 * h);
                    assert!(
                        (grad[j] - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                        "{family}/{link}: coord {j} grad {} vs fd {fd}",
                        grad[j]
                    );
                }
            }
        }
    }

    #[test]
    fn boundary_collapse_is_clamped_and_counted() {
        reset_clamp_event_count();
        // Softplus underflows to exactly 0 far in the left tail.
        let obs = Observation::new(vec![], 1.0).unwrap();
        let beta = DVector::from_vec(vec![-800.0]);
        let g = mle_sample_grad(Family::Poisson, &Link::Softplus, &obs, &beta, true).unwrap();
        assert!(g[0].is_finite() || g[0] == f64::NEG_INFINITY || g[0] == 0.0);
        assert!(clamp_event_count() >= 1);

        // A genuinely negative mean is rejected, not clamped.
        let beta = DVector::from_vec(vec![-1.0]);
        assert!(matches!(
            mle_sample_grad(Family::Poisson, &Link::Identity, &obs, &beta, true),
            Err(Error::LossDomain { family: "poisson", .. })
        ));
    }

    /// ‖V_{(x,y)}‖∞ ≤ RM, ‖V_{(x,y)}‖ ≤ √(d+1)·RM, and the per-sample map is
    /// L(1+dM²)-Lipschitz in β on bounded data.
    #[test]
    fn sample_operator_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let link = Link::Softplus;
        let (d, m_bound) = (3usize, 1.0f64);
        for _ in 0..200 {
            let x: Vec<f64> = (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let y = rng.random::<f64>() * 4.0 - 1.0;
            let obs = Observation { x, y };
            let beta = DVector::from_fn(d + 1, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let z = linear_predictor(&obs, &beta, true);
            let r_bound = (link.eval(z).unwrap() - obs.y).abs();
            let v = vi_sample_op(&link, &obs, &beta, true).unwrap();
            // M >= 1 because the augmented vector carries the intercept 1.
            let m_eff = m_bound.max(1.0);
            assert!(v.amax() <= r_bound * m_eff + 1e-12);
            assert!(v.norm() <= ((d + 1) as f64).sqrt() * r_bound * m_eff + 1e-12);

            let beta2 = DVector::from_fn(d + 1, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let v2 = vi_sample_op(&link, &obs, &beta2, true).unwrap();
            let live = (v2 - &v).norm() / (&beta2 - &beta).norm();
            let bound = link.lipschitz() * (1.0 + d as f64 * m_bound * m_bound);
            assert!(live <= bound + 1e-9, "quotient {live} exceeds {bound}");
        }
    }

    #[test]
    fn family_spec_strings() {
        for name in ["gaussian", "bernoulli", "poisson", "exponential"] {
            let family: Family = name.parse().unwrap();
            assert_eq!(family.to_string(), name);
        }
        assert!("gamma".parse::<Family>().is_err());
    }

    #[test]
    fn response_support() {
        assert!(Family::Poisson.valid_response(3.0));
        assert!(!Family::Poisson.valid_response(2.5));
        assert!(!Family::Poisson.valid_response(-1.0));
        assert!(Family::Bernoulli.valid_response(1.0));
        assert!(!Family::Bernoulli.valid_response(0.3));
        assert!(Family::Exponential.valid_response(0.0));
        assert!(!Family::Exponential.valid_response(-0.1));
        assert!(!Family::Gaussian.valid_response(f64::NAN));
    }
}
