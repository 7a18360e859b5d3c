//! Canonical-link exponential families: log-partition derivatives, natural
//! parameter estimates and per-observation log-likelihoods.
//!
//! Log-likelihoods drop every term that does not involve `η` (factorials,
//! binomial coefficients, `log 2π`).

use std::fmt;
use std::str::FromStr;

use crate::error::{Result, RvbError};
use crate::scalar::Real;

/// Largest Poisson linear predictor accepted before `e^η` is treated as a
/// divergent state.
pub const POISSON_ETA_MAX: f64 = 500.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    Poisson,
    Binomial,
    /// Binomial with every trial count equal to one.
    Bernoulli,
    /// `y ~ N(η, 1)`. Used for exact-posterior checks.
    GaussianUnit,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Poisson => "poisson",
            Family::Binomial => "binomial",
            Family::Bernoulli => "bernoulli",
            Family::GaussianUnit => "gaussian-unit",
        }
    }

    pub fn uses_trials(self) -> bool {
        matches!(self, Family::Binomial | Family::Bernoulli)
    }

    /// Checks that an observation lies in the family's support.
    pub fn validate<T: Real>(self, obs: Observation<T>) -> bool {
        let integral = |v: T| v.fract() == T::zero();
        match self {
            Family::Poisson => obs.y.is_finite() && obs.y >= T::zero() && integral(obs.y),
            Family::Binomial => {
                obs.m >= T::one()
                    && integral(obs.m)
                    && obs.y >= T::zero()
                    && obs.y <= obs.m
                    && integral(obs.y)
            }
            Family::Bernoulli => obs.m == T::one() && (obs.y == T::zero() || obs.y == T::one()),
            Family::GaussianUnit => obs.y.is_finite(),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = RvbError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "poisson" => Ok(Family::Poisson),
            "binomial" => Ok(Family::Binomial),
            "bernoulli" => Ok(Family::Bernoulli),
            "gaussian-unit" | "gaussian_unit" => Ok(Family::GaussianUnit),
            other => Err(RvbError::Config(format!("unknown family '{other}'"))),
        }
    }
}

/// A single response with its trial count (one for non-binomial families).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation<T> {
    pub y: T,
    pub m: T,
}

impl<T: Real> Observation<T> {
    pub fn new(y: T) -> Self {
        Self { y, m: T::one() }
    }

    pub fn with_trials(y: T, m: T) -> Self {
        Self { y, m }
    }
}

/// `h` and its first three derivatives at one `η`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Derivs<T> {
    pub h: T,
    pub h1: T,
    pub h2: T,
    pub h3: T,
}

/// Logistic function without overflow for large `|η|`.
#[inline]
pub fn logistic<T: Real>(eta: T) -> T {
    if eta >= T::zero() {
        T::one() / (T::one() + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + e^η)` without overflow.
#[inline]
pub fn softplus<T: Real>(eta: T) -> T {
    eta.max(T::zero()) + (-eta.abs()).exp().ln_1p()
}

#[inline]
fn guard<T: Real>(family: Family, eta: T) -> Result<()> {
    if !eta.is_finite() || (family == Family::Poisson && eta > T::lit(POISSON_ETA_MAX)) {
        return Err(RvbError::OverflowGuard { eta: eta.to_f64_lossy() });
    }
    Ok(())
}

/// All log-partition derivatives at once.
pub fn derivs<T: Real>(family: Family, m: T, eta: T) -> Result<Derivs<T>> {
    guard(family, eta)?;
    Ok(match family {
        Family::Poisson => {
            let e = eta.exp();
            Derivs { h: e, h1: e, h2: e, h3: e }
        }
        Family::Binomial | Family::Bernoulli => {
            let s = logistic(eta);
            let v = s * (T::one() - s);
            Derivs {
                h: m * softplus(eta),
                h1: m * s,
                h2: m * v,
                h3: m * v * (T::one() - T::lit(2.0) * s),
            }
        }
        Family::GaussianUnit => Derivs {
            h: T::lit(0.5) * eta * eta,
            h1: eta,
            h2: T::one(),
            h3: T::zero(),
        },
    })
}

pub fn h<T: Real>(family: Family, m: T, eta: T) -> Result<T> {
    derivs(family, m, eta).map(|d| d.h)
}

pub fn h1<T: Real>(family: Family, m: T, eta: T) -> Result<T> {
    derivs(family, m, eta).map(|d| d.h1)
}

pub fn h2<T: Real>(family: Family, m: T, eta: T) -> Result<T> {
    derivs(family, m, eta).map(|d| d.h2)
}

pub fn h3<T: Real>(family: Family, m: T, eta: T) -> Result<T> {
    derivs(family, m, eta).map(|d| d.h3)
}

/// `y η − h(η)`.
pub fn loglik<T: Real>(family: Family, obs: Observation<T>, eta: T) -> Result<T> {
    Ok(obs.y * eta - h(family, obs.m, eta)?)
}

/// Maximum-likelihood natural parameter for a single observation, `None`
/// on the boundary of the support where it does not exist.
pub fn eta_hat_ml<T: Real>(family: Family, obs: Observation<T>) -> Option<T> {
    match family {
        Family::Poisson => (obs.y > T::zero()).then(|| obs.y.ln()),
        Family::Binomial | Family::Bernoulli => {
            (obs.y > T::zero() && obs.y < obs.m).then(|| (obs.y / (obs.m - obs.y)).ln())
        }
        Family::GaussianUnit => Some(obs.y),
    }
}

/// Posterior mean of the natural parameter under the Jeffreys prior; finite
/// for every observation.
pub fn eta_hat_reg<T: Real>(family: Family, obs: Observation<T>) -> T {
    let half = T::lit(0.5);
    match family {
        Family::Poisson => digamma(obs.y + half).expect("positive argument"),
        Family::Binomial | Family::Bernoulli => {
            digamma(obs.y + half).expect("positive argument")
                - digamma(obs.m - obs.y + half).expect("positive argument")
        }
        Family::GaussianUnit => obs.y,
    }
}

/// Digamma function for positive arguments.
///
/// Shifts the argument above 10 with `ψ(x) = ψ(x + 1) − 1/x`, then applies the
/// asymptotic expansion.
pub fn digamma<T: Real>(x: T) -> Result<T> {
    if !(x > T::zero()) || !x.is_finite() {
        return Err(RvbError::Domain { function: "digamma", x: x.to_f64_lossy() });
    }
    let mut x = x;
    let mut acc = T::zero();
    let shift = T::lit(10.0);
    while x < shift {
        acc -= x.recip();
        x += T::one();
    }
    let inv2 = (x * x).recip();
    // Bernoulli-number series in 1/x²
    let coeffs = [
        -1.0 / 12.0,
        1.0 / 120.0,
        -1.0 / 252.0,
        1.0 / 240.0,
        -1.0 / 132.0,
        691.0 / 32760.0,
        -1.0 / 12.0,
    ];
    let mut series = T::zero();
    for &c in coeffs.iter().rev() {
        series = (series + T::lit(c)) * inv2;
    }
    Ok(acc + x.ln() - T::lit(0.5) / x + series)
}
