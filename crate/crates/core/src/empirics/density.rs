//! Exact sampling density of the Pearson coefficient for samples drawn from
//! a bivariate normal distribution (hypergeometric-series form).

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::stats::integrate;

const SERIES_TOL: f64 = 1e-12;

fn check_domain(rho: f64, t: usize) -> Result<()> {
    if !(rho.abs() < 1.0) {
        return Err(Error::InvalidArgument(format!("true correlation {rho} outside (-1, 1)")));
    }
    if t < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 samples, got {t}")));
    }
    Ok(())
}

/// ₂F₁(1/2, 1/2; c; z) for 0 ≤ z < 1, summed until terms drop below
/// `SERIES_TOL` relative to the running sum.
fn hyp2f1_half_half(c: f64, z: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 0.0;
    while k < 1e6 {
        term *= (0.5 + k) * (0.5 + k) / ((c + k) * (k + 1.0)) * z;
        sum += term;
        if term.abs() < SERIES_TOL * sum.abs() {
            break;
        }
        k += 1.0;
    }
    sum
}

/// Density at `c` given `1 − c²` computed by the caller (keeps precision
/// near |c| = 1 under the sine substitution).
fn density_unchecked(c: f64, one_minus_c2: f64, rho: f64, t: usize) -> f64 {
    let n = t as f64;
    let ln_pref = (n - 2.0).ln() + ln_gamma(n - 1.0)
        - 0.5 * (2.0 * std::f64::consts::PI).ln()
        - ln_gamma(n - 0.5)
        + 0.5 * (n - 1.0) * (1.0 - rho * rho).ln()
        + 0.5 * (n - 4.0) * one_minus_c2.ln()
        - (n - 1.5) * (1.0 - rho * c).ln();
    ln_pref.exp() * hyp2f1_half_half(n - 0.5, 0.5 * (1.0 + rho * c))
}

/// Probability density `P(c, C, T)` of the sample correlation `c` of `T`
/// draws from a bivariate normal with correlation `C`.
pub fn sample_corr_density(c: f64, rho: f64, t: usize) -> Result<f64> {
    check_domain(rho, t)?;
    if !(c.abs() < 1.0) {
        return Err(Error::InvalidArgument(format!("sample correlation {c} outside (-1, 1)")));
    }
    Ok(density_unchecked(c, 1.0 - c * c, rho, t))
}

/// ∫ g(c)·P(c, C, T) dc over [a, b] ⊆ [-1, 1], integrated in θ with
/// c = sin θ so the endpoint singularities of small T disappear.
fn integrate_weighted(rho: f64, t: usize, a: f64, b: f64, g: impl Fn(f64) -> f64) -> f64 {
    let (ta, tb) = (a.clamp(-1.0, 1.0).asin(), b.clamp(-1.0, 1.0).asin());
    integrate(
        |theta: f64| {
            let (s, co) = theta.sin_cos();
            g(s) * density_unchecked(s, co * co, rho, t) * co
        },
        ta,
        tb,
        1e-11,
    )
}

/// Probability mass of `P(·, C, T)` on [a, b].
pub fn sample_corr_density_integral(rho: f64, t: usize, a: f64, b: f64) -> Result<f64> {
    check_domain(rho, t)?;
    if a > b {
        return Err(Error::InvalidArgument(format!("empty interval [{a}, {b}]")));
    }
    Ok(integrate_weighted(rho, t, a, b, |_| 1.0))
}

/// Mean of the sampling distribution.
pub fn corr_density_mean(rho: f64, t: usize) -> Result<f64> {
    check_domain(rho, t)?;
    Ok(integrate_weighted(rho, t, -1.0, 1.0, |c| c))
}
