//! Inverse link functions: exact values, one-sided derivatives at kinks, and
//! the constants (Lipschitz bound, monotonicity modulus) the theory consumes.
//!
//! All values are immutable after construction and every operation is pure,
//! so links can be shared freely across threads.

use std::f64::consts::{FRAC_1_PI, PI, SQRT_2};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Query points within this distance of a kink are treated as on the kink.
pub const KINK_TOL: f64 = 1e-12;

/// Counts derivative evaluations that landed on a kink and fell back to the
/// fixed right-derivative rule used by solvers and Jacobians.
static KINK_EVENTS: AtomicU64 = AtomicU64::new(0);

pub fn kink_event_count() -> u64 {
    KINK_EVENTS.load(Ordering::Relaxed)
}

pub fn reset_kink_event_count() {
    KINK_EVENTS.store(0, Ordering::Relaxed);
}

/// Which derivative to take at a potentially nondifferentiable point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
    TwoSided,
}

/// An inverse link function g⁻¹.
#[derive(Debug, Clone, PartialEq)]
pub enum Link {
    /// g⁻¹(z) = z
    Identity,
    /// g⁻¹(z) = 1 / (1 + e⁻ᶻ)
    Sigmoid,
    /// g⁻¹(z) = eᶻ (the log link)
    Exp,
    /// g⁻¹(z) = 1/z
    Reciprocal,
    /// g⁻¹(z) = 1/2 + arctan(z)/π
    ArctanCdf,
    /// g⁻¹(z) = log(1 + eᶻ)
    Softplus,
    /// g⁻¹(z) = max{floor, min{eᶻ, cap}}, kinks at log(floor) and log(cap)
    ClippedExp { floor: f64, cap: f64 },
    /// g⁻¹(z) = max{0, z}
    Relu,
    /// g⁻¹(z) = Σᵢ wᵢ Φ((z − mᵢ)/sᵢ), a scaled Gaussian-mixture CDF
    GmmCdf {
        weights: Vec<f64>,
        means: Vec<f64>,
        scales: Vec<f64>,
    },
    /// g⁻¹(z) = z + 2 sin(z) cos(z); non-monotone but strongly Minty
    MintySine,
}

impl Link {
    /// Clipped exponential with 0 ≤ floor < cap.
    pub fn clipped_exp(floor: f64, cap: f64) -> Result<Self> {
        if !(floor.is_finite() && cap.is_finite() && floor >= 0.0 && cap > floor) {
            return Err(Error::Parameter(format!(
                "clipped_exp needs 0 <= c < C, got c = {floor}, C = {cap}"
            )));
        }
        Ok(Link::ClippedExp { floor, cap })
    }

    /// Gaussian-mixture CDF link with positive weights and scales.
    pub fn gmm_cdf(weights: Vec<f64>, means: Vec<f64>, scales: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != scales.len() {
            return Err(Error::Parameter(
                "gmmcdf needs equally sized, nonempty weight/mean/scale lists".into(),
            ));
        }
        let finite = |v: &[f64]| v.iter().all(|c| c.is_finite());
        if !finite(&weights) || !finite(&means) || !finite(&scales) {
            return Err(Error::Parameter("gmmcdf parameters must be finite".into()));
        }
        if weights.iter().any(|&w| w <= 0.0) || scales.iter().any(|&s| s <= 0.0) {
            return Err(Error::Parameter(
                "gmmcdf weights and scales must be positive".into(),
            ));
        }
        Ok(Link::GmmCdf {
            weights,
            means,
            scales,
        })
    }

    /// g⁻¹(z).
    pub fn eval(&self, z: f64) -> Result<f64> {
        if !z.is_finite() {
            return Err(Error::NonFiniteInput { z });
        }
        Ok(self.value(z))
    }

    fn value(&self, z: f64) -> f64 {
        match self {
            Link::Identity => z,
            Link::Sigmoid => sigmoid(z),
            Link::Exp => z.exp(),
            Link::Reciprocal => 1.0 / z,
            Link::ArctanCdf => 0.5 + z.atan() * FRAC_1_PI,
            Link::Softplus => softplus(z),
            Link::ClippedExp { floor, cap } => z.exp().min(*cap).max(*floor),
            Link::Relu => z.max(0.0),
            Link::GmmCdf {
                weights,
                means,
                scales,
            } => weights
                .iter()
                .zip(means)
                .zip(scales)
                .map(|((w, m), s)| w * normal_cdf((z - m) / s))
                .sum(),
            Link::MintySine => z + 2.0 * z.sin() * z.cos(),
        }
    }

    /// (g⁻¹)′(z). A two-sided request on a kink is an error carrying the kink
    /// location; left/right return the one-sided limits.
    pub fn deriv(&self, z: f64, side: Side) -> Result<f64> {
        if !z.is_finite() {
            return Err(Error::NonFiniteInput { z });
        }
        if let Some(kink) = self.kink_near(z) {
            return match side {
                Side::TwoSided => Err(Error::DerivativeAtKink { kink }),
                Side::Left => Ok(self.one_sided_at_kink(kink, false)),
                Side::Right => Ok(self.one_sided_at_kink(kink, true)),
            };
        }
        Ok(self.smooth_deriv(z))
    }

    /// Derivative under the fixed solver rule: on a kink, take the right
    /// derivative (any fixed selection is valid since kink events have
    /// probability zero under continuous designs). Each fallback increments
    /// the kink event counter.
    pub fn solver_deriv(&self, z: f64) -> f64 {
        if let Some(kink) = self.kink_near(z) {
            KINK_EVENTS.fetch_add(1, Ordering::Relaxed);
            return self.one_sided_at_kink(kink, true);
        }
        self.smooth_deriv(z)
    }

    /// (g⁻¹)″(z) under the same right-sided kink rule; used for the
    /// closed-form likelihood Hessians.
    pub fn solver_second_deriv(&self, z: f64) -> f64 {
        match self {
            Link::Identity | Link::Relu => 0.0,
            Link::Sigmoid => {
                let s = sigmoid(z);
                let t = sigmoid(-z);
                s * t * (1.0 - 2.0 * s)
            }
            Link::Exp => z.exp(),
            Link::Reciprocal => 2.0 / (z * z * z),
            Link::ArctanCdf => {
                let q = 1.0 + z * z;
                -2.0 * z / (PI * q * q)
            }
            Link::Softplus => sigmoid(z) * sigmoid(-z),
            Link::ClippedExp { floor, cap } => {
                // Right rule: the lower kink opens into the interior, the
                // upper kink opens into the flat cap region.
                let lower = floor.ln();
                let upper = cap.ln();
                if z >= upper - KINK_TOL || z < lower - KINK_TOL {
                    0.0
                } else {
                    z.exp()
                }
            }
            Link::GmmCdf {
                weights,
                means,
                scales,
            } => weights
                .iter()
                .zip(means)
                .zip(scales)
                .map(|((w, m), s)| {
                    let u = (z - m) / s;
                    -w * u * normal_pdf(u) / (s * s)
                })
                .sum(),
            Link::MintySine => -4.0 * (2.0 * z).sin(),
        }
    }

    fn smooth_deriv(&self, z: f64) -> f64 {
        match self {
            Link::Identity => 1.0,
            Link::Sigmoid => sigmoid(z) * sigmoid(-z),
            Link::Exp => z.exp(),
            Link::Reciprocal => -1.0 / (z * z),
            Link::ArctanCdf => FRAC_1_PI / (1.0 + z * z),
            Link::Softplus => sigmoid(z),
            Link::ClippedExp { floor, cap } => {
                if z < floor.ln() || z > cap.ln() {
                    0.0
                } else {
                    z.exp()
                }
            }
            Link::Relu => {
                if z < 0.0 {
                    0.0
                } else {
                    1.0
                }
            }
            Link::GmmCdf {
                weights,
                means,
                scales,
            } => weights
                .iter()
                .zip(means)
                .zip(scales)
                .map(|((w, m), s)| w * normal_pdf((z - m) / s) / s)
                .sum(),
            Link::MintySine => 1.0 + 2.0 * (2.0 * z).cos(),
        }
    }

    fn one_sided_at_kink(&self, kink: f64, right: bool) -> f64 {
        match self {
            Link::ClippedExp { floor, cap } => {
                let lower = floor.ln();
                if kink == lower {
                    // e^z jumps in from the flat floor region.
                    if right {
                        *floor
                    } else {
                        0.0
                    }
                } else {
                    // Upper kink at log(cap): interior on the left.
                    if right {
                        0.0
                    } else {
                        *cap
                    }
                }
            }
            Link::Relu => {
                if right {
                    1.0
                } else {
                    0.0
                }
            }
            // Smooth kinds never report a kink.
            _ => self.smooth_deriv(kink),
        }
    }

    /// Nondifferentiable points of the kind, in increasing order.
    pub fn kinks(&self) -> Vec<f64> {
        self.kink_pair().into_iter().flatten().collect()
    }

    fn kink_pair(&self) -> [Option<f64>; 2] {
        match self {
            Link::ClippedExp { floor, cap } => {
                let lower = (*floor > 0.0).then(|| floor.ln());
                [lower, Some(cap.ln())]
            }
            Link::Relu => [Some(0.0), None],
            _ => [None, None],
        }
    }

    fn kink_near(&self, z: f64) -> Option<f64> {
        self.kink_pair()
            .into_iter()
            .flatten()
            .find(|k| (z - k).abs() <= KINK_TOL)
    }

    /// Registered constants: the global Lipschitz bound of g⁻¹ and, where a
    /// positive one is known, the strong-monotonicity/Minty modulus of the
    /// scalar map. Kinds whose derivative is unbounded (exp, reciprocal)
    /// report an infinite Lipschitz constant.
    pub fn constants(&self) -> (f64, Option<f64>) {
        match self {
            Link::Identity => (1.0, Some(1.0)),
            Link::Sigmoid => (0.25, None),
            Link::Exp | Link::Reciprocal => (f64::INFINITY, None),
            Link::ArctanCdf => (FRAC_1_PI, None),
            Link::Softplus => (1.0, None),
            Link::ClippedExp { cap, .. } => (*cap, None),
            Link::Relu => (1.0, None),
            Link::GmmCdf {
                weights, scales, ..
            } => {
                let l = weights
                    .iter()
                    .zip(scales)
                    .map(|(w, s)| w / (s * (2.0 * PI).sqrt()))
                    .sum();
                (l, None)
            }
            // sup |1 + 2 cos 2z| = 3; Minty modulus 1/2 around the zero.
            Link::MintySine => (3.0, Some(0.5)),
        }
    }

    pub fn lipschitz(&self) -> f64 {
        self.constants().0
    }

    pub fn monotone_modulus(&self) -> Option<f64> {
        self.constants().1
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + eᶻ), overflow-free on both tails.
fn softplus(z: f64) -> f64 {
    if z <= 0.0 {
        z.exp().ln_1p()
    } else {
        z + (-z).exp().ln_1p()
    }
}

/// Standard normal CDF via the complementary error function.
fn normal_cdf(t: f64) -> f64 {
    0.5 * erfc(-t / SQRT_2)
}

fn normal_pdf(t: f64) -> f64 {
    (-0.5 * t * t).exp() / (2.0 * PI).sqrt()
}

impl fmt::Display for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Link::Identity => write!(f, "identity"),
            Link::Sigmoid => write!(f, "sigmoid"),
            Link::Exp => write!(f, "log"),
            Link::Reciprocal => write!(f, "reciprocal"),
            Link::ArctanCdf => write!(f, "arctan"),
            Link::Softplus => write!(f, "softplus"),
            Link::ClippedExp { floor, cap } => write!(f, "clipped_exp:c={floor},C={cap}"),
            Link::Relu => write!(f, "relu"),
            Link::GmmCdf {
                weights,
                means,
                scales,
            } => {
                let join = |v: &[f64]| {
                    v.iter()
                        .map(|c| c.to_string())
                        .collect::<Vec<_>>()
                        .join(",")
                };
                write!(
                    f,
                    "gmmcdf:w={};m={};s={}",
                    join(weights),
                    join(means),
                    join(scales)
                )
            }
            Link::MintySine => write!(f, "minty_sine"),
        }
    }
}

impl FromStr for Link {
    type Err = Error;

    /// Parses the CLI grammar: `identity`, `sigmoid`, `log`, `reciprocal`,
    /// `arctan`, `softplus`, `relu`, `minty_sine`, `clipped_exp:c=0,C=2`,
    /// `gmmcdf:w=1.65,1.35;m=-0.5,1.2;s=0.7,0.5`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse {
            what: "link",
            input: s.to_string(),
        };
        let (name, params) = match s.split_once(':') {
            Some((n, p)) => (n, Some(p)),
            None => (s, None),
        };
        match (name, params) {
            ("identity", None) => Ok(Link::Identity),
            ("sigmoid", None) => Ok(Link::Sigmoid),
            ("log", None) => Ok(Link::Exp),
            ("reciprocal", None) => Ok(Link::Reciprocal),
            ("arctan" | "arctan_cdf", None) => Ok(Link::ArctanCdf),
            ("softplus", None) => Ok(Link::Softplus),
            ("relu", None) => Ok(Link::Relu),
            ("minty_sine", None) => Ok(Link::MintySine),
            ("clipped_exp", Some(p)) => {
                let mut floor = None;
                let mut cap = None;
                for part in p.split(',') {
                    match part.split_once('=') {
                        Some(("c", v)) => floor = v.parse::<f64>().ok(),
                        Some(("C", v)) => cap = v.parse::<f64>().ok(),
                        _ => return Err(bad()),
                    }
                }
                match (floor, cap) {
                    (Some(c), Some(cc)) => Link::clipped_exp(c, cc),
                    _ => Err(bad()),
                }
            }
            ("gmmcdf", Some(p)) => {
                let mut weights = None;
                let mut means = None;
                let mut scales = None;
                for group in p.split(';') {
                    let (key, list) = group.split_once('=').ok_or_else(bad)?;
                    let values: std::result::Result<Vec<f64>, _> =
                        list.split(',').map(|v| v.parse::<f64>()).collect();
                    let values = values.map_err(|_| bad())?;
                    match key {
                        "w" => weights = Some(values),
                        "m" => means = Some(values),
                        "s" => scales = Some(values),
                        _ => return Err(bad()),
                    }
                }
                match (weights, means, scales) {
                    (Some(w), Some(m), Some(sc)) => Link::gmm_cdf(w, m, sc),
                    _ => Err(bad()),
                }
            }
            _ => Err(bad()),
        }
    }
}
