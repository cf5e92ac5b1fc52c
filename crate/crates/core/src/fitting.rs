//! Nonlinear least-squares fits of the three empirical laws: the variance
//! law `V/⟨x⟩ = σ²⟨x⟩ + σ_½²`, the Lorentzian `C(r) = C0/(1+|r/r0|^α)` and
//! the exponential decay `c(Δt) = a·e^{−γΔt}`.
//!
//! All three share [`nls_minimize`], a bounded Levenberg–Marquardt solver
//! with central-difference Jacobians.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::empirics::{BinAxis, BinnedCurve};
use crate::error::{Error, Result};
use crate::stats::median;

#[derive(Debug, Clone, Copy)]
pub struct NlsOptions {
    pub max_iter: usize,
    /// Relative step tolerance.
    pub xtol: f64,
    /// Tolerance on the scaled gradient `max_k |(Jᵀr)_k| / (‖J_k‖·‖r‖)`.
    pub gtol: f64,
    /// Relative finite-difference step.
    pub diff_step: f64,
}

impl Default for NlsOptions {
    fn default() -> Self {
        NlsOptions { max_iter: 500, xtol: 1e-10, gtol: 1e-10, diff_step: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct NlsSolution {
    pub params: Vec<f64>,
    /// `s²·(JᵀJ)⁻¹` with `s² = SSR/(m−k)`; NaN where undefined.
    pub covariance: DMatrix<f64>,
    pub ssr: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Scaled projected gradient at the returned point.
    pub gradient: f64,
}

impl NlsSolution {
    pub fn stderr(&self) -> Vec<f64> {
        (0..self.params.len()).map(|k| self.covariance[(k, k)].sqrt()).collect()
    }
}

fn project(p: &mut [f64], bounds: &[(f64, f64)]) {
    for (v, &(lo, hi)) in p.iter_mut().zip(bounds) {
        *v = v.clamp(lo, hi);
    }
}

fn eval<F: Fn(&[f64], &mut [f64])>(f: &F, p: &[f64], out: &mut [f64]) -> Option<f64> {
    f(p, out);
    let ssr: f64 = out.iter().map(|r| r * r).sum();
    ssr.is_finite().then_some(ssr)
}

fn jacobian<F: Fn(&[f64], &mut [f64])>(
    f: &F,
    p: &[f64],
    m: usize,
    bounds: &[(f64, f64)],
    rel_step: f64,
) -> Result<DMatrix<f64>> {
    let k = p.len();
    let mut jac = DMatrix::zeros(m, k);
    let (mut plus, mut minus) = (vec![0.0; m], vec![0.0; m]);
    let mut q = p.to_vec();
    for c in 0..k {
        let h = if p[c] != 0.0 { rel_step * p[c].abs() } else { rel_step * 1e-4 };
        let (lo, hi) = bounds[c];
        let up = (p[c] + h).min(hi);
        let down = (p[c] - h).max(lo);
        q[c] = up;
        f(&q, &mut plus);
        q[c] = down;
        f(&q, &mut minus);
        q[c] = p[c];
        let span = up - down;
        if span <= 0.0 {
            continue;
        }
        for r in 0..m {
            let d = (plus[r] - minus[r]) / span;
            if !d.is_finite() {
                return Err(Error::NonFiniteResidual(q.clone()));
            }
            jac[(r, c)] = d;
        }
    }
    Ok(jac)
}

/// Gradient components that would push a parameter through an active bound
/// are zeroed.
fn projected_gradient(g: &DVector<f64>, p: &[f64], bounds: &[(f64, f64)]) -> DVector<f64> {
    let mut out = g.clone();
    for k in 0..p.len() {
        let (lo, hi) = bounds[k];
        if (p[k] <= lo && g[k] > 0.0) || (p[k] >= hi && g[k] < 0.0) {
            out[k] = 0.0;
        }
    }
    out
}

fn scaled_gradient(g: &DVector<f64>, jac: &DMatrix<f64>, rnorm: f64) -> f64 {
    if rnorm == 0.0 {
        return 0.0;
    }
    (0..g.len())
        .map(|k| {
            let cn = jac.column(k).norm();
            if cn == 0.0 {
                0.0
            } else {
                g[k].abs() / (cn * rnorm)
            }
        })
        .fold(0.0, f64::max)
}

/// Solves `A·s = −g` over the parameters not held at a bound. Parameters
/// already on a bound with the gradient pushing outwards stay put; any
/// other component that would leave the box is set to land on the bound and
/// the rest re-solved. Plain projection of the full step crawls or zigzags
/// along an active bound instead.
fn bounded_step(
    a: &DMatrix<f64>,
    g: &DVector<f64>,
    raw_g: &DVector<f64>,
    p: &[f64],
    bounds: &[(f64, f64)],
    fallback_scale: f64,
) -> DVector<f64> {
    let k = p.len();
    let mut fixed: Vec<bool> = (0..k)
        .map(|c| {
            let (lo, hi) = bounds[c];
            (p[c] <= lo && raw_g[c] > 0.0) || (p[c] >= hi && raw_g[c] < 0.0)
        })
        .collect();
    let mut s = DVector::zeros(k);
    for _ in 0..=k {
        let free: Vec<usize> = (0..k).filter(|&c| !fixed[c]).collect();
        if free.is_empty() {
            break;
        }
        let af = DMatrix::from_fn(free.len(), free.len(), |i, j| a[(free[i], free[j])]);
        let rhs = DVector::from_fn(free.len(), |i, _| {
            let fi = free[i];
            -g[fi] - (0..k).filter(|&c| fixed[c]).map(|c| a[(fi, c)] * s[c]).sum::<f64>()
        });
        let sf = match af.cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => rhs / fallback_scale,
        };
        for (i, &fi) in free.iter().enumerate() {
            s[fi] = sf[i];
        }
        let mut changed = false;
        for &c in &free {
            let (lo, hi) = bounds[c];
            let t = p[c] + s[c];
            if t < lo || t > hi {
                s[c] = t.clamp(lo, hi) - p[c];
                fixed[c] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    s
}

/// Bounded Levenberg–Marquardt minimization of `Σ r_i(p)²`.
///
/// Stops when the scaled gradient falls below `gtol`, when an accepted step
/// is shorter than `xtol` relative to `‖p‖`, or when no damping produces a
/// decrease. Only running out of iterations reports `converged = false`.
///
/// `residual(p, out)` fills the `m` residuals. Bounds are enforced by
/// projecting every trial point onto the box. When the damped normal
/// equations cannot be factored a scaled gradient step is taken instead.
pub fn nls_minimize<F: Fn(&[f64], &mut [f64])>(
    residual: F,
    m: usize,
    p0: &[f64],
    bounds: &[(f64, f64)],
    opts: &NlsOptions,
) -> Result<NlsSolution> {
    let k = p0.len();
    assert_eq!(bounds.len(), k, "one bound pair per parameter");
    let mut p = p0.to_vec();
    project(&mut p, bounds);
    let mut r = vec![0.0; m];
    let mut ssr = eval(&residual, &p, &mut r).ok_or_else(|| Error::NonFiniteResidual(p.clone()))?;
    let mut trial_r = vec![0.0; m];
    let mut lambda = 1e-8;
    let mut converged = false;
    let mut iterations = 0;
    let mut jac = jacobian(&residual, &p, m, bounds, opts.diff_step)?;
    let mut gradient;

    loop {
        let rv = DVector::from_column_slice(&r);
        let raw_g = jac.transpose() * &rv;
        let g = projected_gradient(&raw_g, &p, bounds);
        gradient = scaled_gradient(&g, &jac, ssr.sqrt());
        if ssr == 0.0 || gradient <= opts.gtol {
            converged = true;
            break;
        }
        if iterations >= opts.max_iter {
            break;
        }
        iterations += 1;

        let jtj = jac.transpose() * &jac;
        let max_diag = jtj.diagonal().max().max(f64::MIN_POSITIVE);
        let mut accepted = false;
        while lambda < 1e20 {
            let mut a = jtj.clone();
            for d in 0..k {
                a[(d, d)] += lambda * jtj[(d, d)].max(1e-12 * max_diag);
            }
            let step = bounded_step(&a, &g, &raw_g, &p, bounds, lambda * max_diag);
            let mut trial: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            project(&mut trial, bounds);
            match eval(&residual, &trial, &mut trial_r) {
                Some(trial_ssr) if trial_ssr < ssr => {
                    let dp: f64 = trial.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                    let pn: f64 = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                    p = trial;
                    std::mem::swap(&mut r, &mut trial_r);
                    ssr = trial_ssr;
                    lambda = (lambda / 3.0).max(1e-15);
                    accepted = true;
                    jac = jacobian(&residual, &p, m, bounds, opts.diff_step)?;
                    if dp <= opts.xtol * (pn + opts.xtol) {
                        let rv = DVector::from_column_slice(&r);
                        let g = projected_gradient(&(jac.transpose() * &rv), &p, bounds);
                        gradient = scaled_gradient(&g, &jac, ssr.sqrt());
                        converged = true;
                    }
                    break;
                }
                _ => lambda *= 4.0,
            }
        }
        if !accepted {
            // No damping yields a decrease: stationary to working precision.
            converged = true;
        }
        if converged {
            break;
        }
    }

    let dof = m.saturating_sub(k);
    let covariance = if dof == 0 {
        DMatrix::from_element(k, k, f64::NAN)
    } else {
        let s2 = ssr / dof as f64;
        match (jac.transpose() * &jac).try_inverse() {
            Some(inv) => inv * s2,
            None => DMatrix::from_element(k, k, f64::NAN),
        }
    };
    Ok(NlsSolution { params: p, covariance, ssr, iterations, converged, gradient })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    VarianceLaw,
    Lorentzian,
    Exponential,
}

/// Fitted parameters with local-curvature standard errors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub model: Model,
    pub params: BTreeMap<String, f64>,
    pub stderr: BTreeMap<String, f64>,
    pub r2: f64,
    pub n_points: usize,
    pub converged: bool,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

impl FitResult {
    pub fn param(&self, name: &str) -> f64 {
        self.params.get(name).copied().unwrap_or(f64::NAN)
    }

    pub fn stderr_of(&self, name: &str) -> f64 {
        self.stderr.get(name).copied().unwrap_or(f64::NAN)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("FitResult serializes")
    }
}

fn r_squared(observed: &[f64], ssr: f64) -> f64 {
    let m = observed.iter().sum::<f64>() / observed.len() as f64;
    let sst: f64 = observed.iter().map(|y| (y - m) * (y - m)).sum();
    if sst == 0.0 {
        if ssr == 0.0 {
            1.0
        } else {
            f64::NEG_INFINITY
        }
    } else {
        1.0 - ssr / sst
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VarianceLawOptions {
    /// Width of the ln⟨x⟩ bins whose medians are fitted.
    pub bin_width: f64,
}

impl Default for VarianceLawOptions {
    fn default() -> Self {
        VarianceLawOptions { bin_width: 0.25 }
    }
}

/// Per-bin medians of a scatter on ln(abscissa) bins; abscissa and ordinate
/// medians are taken independently.
pub fn binned_medians(points: &[(f64, f64)], width: f64) -> Vec<(f64, f64, usize)> {
    let mut bins: BTreeMap<i64, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for &(x, y) in points {
        let e = bins.entry((x.ln() / width).floor() as i64).or_default();
        e.0.push(x);
        e.1.push(y);
    }
    bins.into_values().map(|(xs, ys)| (median(&xs), median(&ys), xs.len())).collect()
}

/// Fits `V[ẋ]/⟨x⟩ = σ²⟨x⟩ + σ_½²` to the binned medians of the scatter,
/// minimizing squared differences of the log ordinate.
pub fn fit_variance_law(points: &[(f64, f64)], opts: &VarianceLawOptions) -> Result<FitResult> {
    if points.len() < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 points, got {}", points.len())));
    }
    if let Some(&(x, _)) = points.iter().find(|p| !(p.0 > 0.0) || !p.0.is_finite()) {
        return Err(Error::InvalidArgument(format!("abscissa {x} is not positive")));
    }
    let first = points[0].0;
    if points.iter().all(|p| p.0 == first) {
        return Err(Error::DegenerateDesign("all abscissae are equal".into()));
    }
    let bins: Vec<(f64, f64)> = binned_medians(points, opts.bin_width)
        .into_iter()
        .filter(|b| b.1 > 0.0)
        .map(|b| (b.0, b.1))
        .collect();
    if bins.len() < 2 {
        return Err(Error::DegenerateDesign(format!("{} usable median bins", bins.len())));
    }
    let (_, y_lo) = bins[0];
    let (x_hi, y_hi) = bins[bins.len() - 1];
    // Asymptotes of the two regimes at the ends of the range.
    let p0 = [(y_hi / x_hi).max(f64::MIN_POSITIVE), y_lo.min(y_hi).max(f64::MIN_POSITIVE)];
    let residual = |p: &[f64], out: &mut [f64]| {
        for (o, &(x, y)) in out.iter_mut().zip(&bins) {
            *o = (p[0] * x + p[1]).max(1e-300).ln() - y.ln();
        }
    };
    let bounds = [(0.0, f64::INFINITY), (0.0, f64::INFINITY)];
    let sol = nls_minimize(residual, bins.len(), &p0, &bounds, &NlsOptions::default())?;
    let se = sol.stderr();
    let (s2, h2) = (sol.params[0], sol.params[1]);
    let (sigma, sigma_half) = (s2.sqrt(), h2.sqrt());
    let log_y: Vec<f64> = bins.iter().map(|b| b.1.ln()).collect();
    let mut params = BTreeMap::new();
    params.insert("sigma".to_owned(), sigma);
    params.insert("sigma_half".to_owned(), sigma_half);
    let mut stderr = BTreeMap::new();
    stderr.insert("sigma".to_owned(), se[0] / (2.0 * sigma));
    stderr.insert("sigma_half".to_owned(), se[1] / (2.0 * sigma_half));
    let mut metadata = BTreeMap::new();
    metadata.insert("ordinate".to_owned(), "log".to_owned());
    metadata.insert("fitted_to".to_owned(), "binned_medians".to_owned());
    metadata.insert("bin_width_ln_x".to_owned(), opts.bin_width.to_string());
    Ok(FitResult {
        model: Model::VarianceLaw,
        params,
        stderr,
        r2: r_squared(&log_y, sol.ssr),
        n_points: bins.len(),
        converged: sol.converged,
        metadata,
    })
}

pub fn lorentzian(r: f64, c0: f64, r0: f64, alpha: f64) -> f64 {
    c0 / (1.0 + (r / r0).abs().powf(alpha))
}

/// Fits `C(r) = C0/(1+|r/r0|^α)` to a distance curve. `alpha` freezes the
/// exponent when given.
pub fn fit_lorentzian(curve: &BinnedCurve, alpha: Option<f64>) -> Result<FitResult> {
    let rs = match curve.axis {
        BinAxis::LnR => curve.linear_centers(),
        other => return Err(Error::InvalidArgument(format!("expected a ln r curve, got {other:?}"))),
    };
    lorentzian_points(&rs, &curve.values, alpha)
}

/// [`fit_lorentzian`] on explicit `(r, C)` samples.
pub fn lorentzian_points(rs: &[f64], values: &[f64], alpha: Option<f64>) -> Result<FitResult> {
    if rs.len() < 4 {
        return Err(Error::InvalidArgument(format!("need at least 4 bins, got {}", rs.len())));
    }
    if let Some(a) = alpha {
        if !(a > 0.0 && a <= 6.0) {
            return Err(Error::InvalidArgument(format!("frozen alpha {a} outside (0, 6]")));
        }
    }
    let c_max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut order: Vec<usize> = (0..rs.len()).collect();
    order.sort_by(|&a, &b| rs[a].total_cmp(&rs[b]));
    let half = order
        .iter()
        .find(|&&k| values[k] <= 0.5 * c_max)
        .map(|&k| rs[k])
        .unwrap_or(rs[order[order.len() - 1]]);
    let c0 = c_max.clamp(1e-3, 1.0);
    let mut bounds = vec![(0.0, 1.0), (1e-9, f64::INFINITY)];
    let mut p0 = vec![c0, half.max(1e-6)];
    if alpha.is_none() {
        bounds.push((1e-6, 6.0));
        p0.push(2.0);
    }
    let fixed = alpha;
    let residual = |p: &[f64], out: &mut [f64]| {
        let a = fixed.unwrap_or_else(|| p[2]);
        for ((o, &r), &y) in out.iter_mut().zip(rs).zip(values) {
            *o = lorentzian(r, p[0], p[1], a) - y;
        }
    };
    let sol = nls_minimize(residual, rs.len(), &p0, &bounds, &NlsOptions::default())?;
    let se = sol.stderr();
    let mut params = BTreeMap::new();
    let mut stderr = BTreeMap::new();
    params.insert("c0".to_owned(), sol.params[0]);
    params.insert("r0".to_owned(), sol.params[1]);
    stderr.insert("c0".to_owned(), se[0]);
    stderr.insert("r0".to_owned(), se[1]);
    let mut metadata = BTreeMap::new();
    match alpha {
        Some(a) => {
            params.insert("alpha".to_owned(), a);
            stderr.insert("alpha".to_owned(), 0.0);
            metadata.insert("alpha".to_owned(), "frozen".to_owned());
        }
        None => {
            params.insert("alpha".to_owned(), sol.params[2]);
            stderr.insert("alpha".to_owned(), se[2]);
        }
    }
    Ok(FitResult {
        model: Model::Lorentzian,
        params,
        stderr,
        r2: r_squared(values, sol.ssr),
        n_points: rs.len(),
        converged: sol.converged,
        metadata,
    })
}

fn exponential_result(a: f64, gamma: f64, se_a: f64, se_g: f64, r2: f64, n: usize, converged: bool, path: &str) -> FitResult {
    let mut params = BTreeMap::new();
    params.insert("a".to_owned(), a);
    params.insert("gamma".to_owned(), gamma);
    params.insert("inv_gamma".to_owned(), 1.0 / gamma);
    let mut stderr = BTreeMap::new();
    stderr.insert("a".to_owned(), se_a);
    stderr.insert("gamma".to_owned(), se_g);
    stderr.insert("inv_gamma".to_owned(), se_g / (gamma * gamma));
    let mut metadata = BTreeMap::new();
    metadata.insert("path".to_owned(), path.to_owned());
    FitResult { model: Model::Exponential, params, stderr, r2, n_points: n, converged, metadata }
}

/// Ordinary least squares of ln c on Δt over the points with c > 0.
pub fn fit_exponential_loglinear(points: &[(f64, f64)]) -> Result<FitResult> {
    let pos: Vec<(f64, f64)> = points.iter().filter(|p| p.1 > 0.0).map(|&(t, c)| (t, c.ln())).collect();
    if pos.is_empty() {
        return Err(Error::InvalidArgument("all correlations are ≤ 0".into()));
    }
    if pos.len() < 2 {
        return Err(Error::DegenerateDesign("fewer than 2 positive correlations".into()));
    }
    let n = pos.len() as f64;
    let mt = pos.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pos.iter().map(|p| p.1).sum::<f64>() / n;
    let stt: f64 = pos.iter().map(|p| (p.0 - mt).powi(2)).sum();
    if stt == 0.0 {
        return Err(Error::DegenerateDesign("all lags are equal".into()));
    }
    let slope = pos.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum::<f64>() / stt;
    let intercept = my - slope * mt;
    let ssr: f64 = pos.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let ys: Vec<f64> = pos.iter().map(|p| p.1).collect();
    let (se_slope, se_icpt) = if pos.len() > 2 {
        let s2 = ssr / (n - 2.0);
        let st2: f64 = pos.iter().map(|p| p.0 * p.0).sum();
        ((s2 / stt).sqrt(), (s2 * st2 / (n * stt)).sqrt())
    } else {
        (f64::NAN, f64::NAN)
    };
    let a = intercept.exp();
    Ok(exponential_result(a, -slope, a * se_icpt, se_slope, r_squared(&ys, ssr), pos.len(), true, "log_linear"))
}

/// Fits `c(Δt) = a·e^{−γΔt}`: log-linear regression for the starting point,
/// refined by direct least squares on all points.
pub fn fit_exponential(points: &[(f64, f64)]) -> Result<FitResult> {
    if points.len() < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 lags, got {}", points.len())));
    }
    if points.iter().all(|p| p.1 <= 0.0) {
        return Err(Error::InvalidArgument("all correlations are ≤ 0".into()));
    }
    let p0 = match fit_exponential_loglinear(points) {
        Ok(f) => [f.param("a"), f.param("gamma").max(0.0)],
        Err(_) => {
            let (t, c) = points.iter().copied().fold((1.0, f64::NEG_INFINITY), |acc, p| if p.1 > acc.1 { p } else { acc });
            [c, 1.0 / t.max(1.0)]
        }
    };
    let residual = |p: &[f64], out: &mut [f64]| {
        for (o, &(t, c)) in out.iter_mut().zip(points) {
            *o = p[0] * (-p[1] * t).exp() - c;
        }
    };
    let bounds = [(0.0, f64::INFINITY), (0.0, f64::INFINITY)];
    let sol = nls_minimize(residual, points.len(), &p0, &bounds, &NlsOptions::default())?;
    let se = sol.stderr();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    Ok(exponential_result(
        sol.params[0],
        sol.params[1],
        se[0],
        se[1],
        r_squared(&ys, sol.ssr),
        points.len(),
        sol.converged,
        "log_linear+nls",
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn quadratic_converges_fast() {
        let res = |p: &[f64], out: &mut [f64]| {
            out[0] = p[0] - 3.0;
            out[1] = 2.0 * (p[1] + 1.0);
            out[2] = p[0] + p[1] - 2.0;
        };
        let sol = nls_minimize(res, 3, &[0.0, 0.0], &[(-10.0, 10.0); 2], &NlsOptions::default()).unwrap();
        assert!(sol.converged);
        assert!(sol.iterations <= 3, "{} iterations", sol.iterations);
    }

    #[test]
    fn rosenbrock_from_standard_start() {
        let res = |p: &[f64], out: &mut [f64]| {
            out[0] = 10.0 * (p[1] - p[0] * p[0]);
            out[1] = 1.0 - p[0];
        };
        let inf = (f64::NEG_INFINITY, f64::INFINITY);
        let sol = nls_minimize(res, 2, &[-1.0, 1.0], &[inf, inf], &NlsOptions::default()).unwrap();
        assert!(sol.converged);
        assert!((sol.params[0] - 1.0).abs() < 1e-8 && (sol.params[1] - 1.0).abs() < 1e-8, "{:?}", sol.params);
    }

    #[test]
    fn bounds_are_respected() {
        let res = |p: &[f64], out: &mut [f64]| out[0] = p[0] + 2.0;
        let sol = nls_minimize(res, 1, &[1.0], &[(0.0, 5.0)], &NlsOptions::default()).unwrap();
        assert_eq!(sol.params[0], 0.0);
        assert!(sol.converged);
    }

    #[test]
    fn nan_residual_is_an_error() {
        let res = |_: &[f64], out: &mut [f64]| out[0] = f64::NAN;
        assert!(matches!(
            nls_minimize(res, 1, &[1.0], &[(0.0, 5.0)], &NlsOptions::default()),
            Err(Error::NonFiniteResidual(_))
        ));
    }

    fn variance_points(sigma: f64, half: f64, n: usize) -> Vec<(f64, f64)> {
        (0..n)
            .map(|k| {
                let x = 10f64.powf(-7.0 + 5.0 * k as f64 / (n - 1) as f64);
                (x, sigma * sigma * x + half * half)
            })
            .collect()
    }

    #[test]
    fn variance_law_noiseless_reference_values() {
        let fit = fit_variance_law(&variance_points(0.0119, 6.9e-5, 400), &VarianceLawOptions::default()).unwrap();
        assert!(fit.converged);
        assert!(rel_err(fit.param("sigma"), 0.0119) < 1e-3);
        assert!(rel_err(fit.param("sigma_half"), 6.9e-5) < 1e-3);
        assert_eq!(fit.metadata["ordinate"], "log");
    }

    #[test]
    fn variance_law_degenerate() {
        let pts = vec![(1e-3, 1.0), (1e-3, 2.0), (1e-3, 3.0)];
        assert!(matches!(fit_variance_law(&pts, &VarianceLawOptions::default()), Err(Error::DegenerateDesign(_))));
        assert!(fit_variance_law(&pts[..2], &VarianceLawOptions::default()).is_err());
        assert!(fit_variance_law(&[(0.0, 1.0), (1.0, 1.0), (2.0, 1.0)], &VarianceLawOptions::default()).is_err());
    }

    fn lorentz_curve(c0: f64, r0: f64, alpha: f64) -> BinnedCurve {
        let centers: Vec<f64> = (17..69).map(|k| (k as f64 + 0.5) * 0.1).collect();
        let values = centers.iter().map(|c| lorentzian(c.exp(), c0, r0, alpha)).collect();
        BinnedCurve {
            axis: BinAxis::LnR,
            width: 0.1,
            counts: vec![1; centers.len()],
            centers,
            values,
            smoothed: None,
            smoothing_width: None,
        }
    }

    #[test]
    fn lorentzian_half_value_at_r0() {
        for alpha in [0.5, 1.0, 2.1, 5.0] {
            assert!((lorentzian(74.0, 0.254, 74.0, alpha) - 0.127).abs() < 1e-15);
        }
    }

    #[test]
    fn lorentzian_noiseless_reference_values() {
        let fit = fit_lorentzian(&lorentz_curve(0.254, 74.0, 2.1), None).unwrap();
        assert!(fit.converged);
        assert!(rel_err(fit.param("c0"), 0.254) < 5e-3);
        assert!(rel_err(fit.param("r0"), 74.0) < 5e-3);
        assert!(rel_err(fit.param("alpha"), 2.1) < 5e-3);
        assert!(fit.r2 > 0.999_999);

        let frozen = fit_lorentzian(&lorentz_curve(0.3, 50.0, 2.0), Some(2.0)).unwrap();
        assert!(rel_err(frozen.param("r0"), 50.0) < 1e-6);
        assert_eq!(frozen.param("alpha"), 2.0);
    }

    #[test]
    fn lorentzian_multistart_agrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut curve = lorentz_curve(0.25, 74.0, 2.1);
        for v in curve.values.iter_mut() {
            *v += rng.gen_range(-0.01..0.01);
        }
        let rs = curve.linear_centers();
        let base = lorentzian_points(&rs, &curve.values, None).unwrap();
        assert!(base.converged);
        for k in 0..5 {
            let p0 = [0.1 + 0.15 * k as f64, 30.0 + 25.0 * k as f64, 1.0 + 0.6 * k as f64];
            let residual = |p: &[f64], out: &mut [f64]| {
                for ((o, &r), &y) in out.iter_mut().zip(&rs).zip(&curve.values) {
                    *o = lorentzian(r, p[0], p[1], p[2]) - y;
                }
            };
            let bounds = [(0.0, 1.0), (1e-9, f64::INFINITY), (1e-6, 6.0)];
            let sol = nls_minimize(residual, rs.len(), &p0, &bounds, &NlsOptions::default()).unwrap();
            for (name, v) in ["c0", "r0", "alpha"].iter().zip(&sol.params) {
                assert!(rel_err(*v, base.param(name)) < 1e-8, "start {k}: {name} {v} vs {}", base.param(name));
            }
        }
    }

    #[test]
    fn lorentzian_needs_four_bins() {
        let mut c = lorentz_curve(0.25, 74.0, 2.0);
        c.centers.truncate(3);
        c.values.truncate(3);
        assert!(fit_lorentzian(&c, None).is_err());
    }

    #[test]
    fn exponential_noiseless_reference_values() {
        let pts: Vec<(f64, f64)> = (1..12).map(|t| (t as f64, 0.70 * (-(t as f64) / 17.2).exp())).collect();
        let fit = fit_exponential(&pts).unwrap();
        assert!(fit.converged);
        assert!(rel_err(fit.param("a"), 0.70) < 1e-3);
        assert!(rel_err(fit.param("inv_gamma"), 17.2) < 1e-3);
        let ll = fit_exponential_loglinear(&pts).unwrap();
        assert!(rel_err(ll.param("gamma"), fit.param("gamma")) < 1e-2);
        assert!(fit_exponential(&[(1.0, -0.1), (2.0, 0.0), (3.0, -0.3)]).is_err());
    }

    #[test]
    fn exponential_tolerates_negative_tail() {
        let mut pts: Vec<(f64, f64)> = (1..30).map(|t| (t as f64, 0.7 * (-(t as f64) / 5.0).exp())).collect();
        pts.push((30.0, -0.01));
        let fit = fit_exponential(&pts).unwrap();
        assert!(rel_err(fit.param("inv_gamma"), 5.0) < 0.05);
    }

    #[test]
    fn noiseless_random_draws_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let (s, h) = (rng.gen_range(1e-3..0.05), rng.gen_range(1e-6..1e-3));
            let fit = fit_variance_law(&variance_points(s, h, 300), &VarianceLawOptions::default()).unwrap();
            assert!(rel_err(fit.param("sigma"), s) < 1e-3 && rel_err(fit.param("sigma_half"), h) < 1e-3, "{s} {h}: {fit:?}");

            let (c0, r0, alpha) = (rng.gen_range(0.05..1.0), rng.gen_range(20.0..200.0), rng.gen_range(0.8..4.0));
            let fit = fit_lorentzian(&lorentz_curve(c0, r0, alpha), None).unwrap();
            for (name, v) in [("c0", c0), ("r0", r0), ("alpha", alpha)] {
                assert!(rel_err(fit.param(name), v) < 1e-3, "{name}: {} vs {v}", fit.param(name));
            }

            let (a, g) = (rng.gen_range(0.1..1.0), rng.gen_range(0.01..0.5));
            let pts: Vec<(f64, f64)> = (1..15).map(|t| (t as f64, a * (-g * t as f64).exp())).collect();
            let fit = fit_exponential(&pts).unwrap();
            assert!(rel_err(fit.param("a"), a) < 1e-3 && rel_err(fit.param("gamma"), g) < 1e-3);
        }
    }

    #[test]
    fn order_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<(f64, f64)> = (1..15).map(|t| (t as f64, 0.6 * (-(t as f64) / 9.0).exp() + rng.gen_range(-0.02..0.02))).collect();
        let mut rev = pts.clone();
        rev.reverse();
        let (f1, f2) = (fit_exponential(&pts).unwrap(), fit_exponential(&rev).unwrap());
        assert!(rel_err(f1.param("gamma"), f2.param("gamma")) < 1e-9);

        let vp: Vec<(f64, f64)> = variance_points(0.01, 1e-4, 200).into_iter().map(|(x, y)| (x, y * rng.gen_range(0.5..1.5))).collect();
        let mut vr = vp.clone();
        vr.reverse();
        let o = VarianceLawOptions::default();
        assert!(rel_err(fit_variance_law(&vp, &o).unwrap().param("sigma"), fit_variance_law(&vr, &o).unwrap().param("sigma")) < 1e-9);
    }

    #[test]
    fn json_shape() {
        let pts: Vec<(f64, f64)> = (1..6).map(|t| (t as f64, (-(t as f64) / 3.0).exp())).collect();
        let v: serde_json::Value = serde_json::from_str(&fit_exponential(&pts).unwrap().to_json()).unwrap();
        for key in ["model", "params", "stderr", "r2", "n_points", "converged"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["model"], "exponential");
    }

    #[test]
    fn active_bound_is_held() {
        // C0 would like to exceed 1; it must sit on the bound and r0 still converge
        let rs: Vec<f64> = (0..12).map(|k| (2.5 + 0.3 * k as f64).exp()).collect();
        let vals: Vec<f64> = rs.iter().map(|&r| lorentzian(r, 1.3, 40.0, 2.0) - 0.1).collect();
        let fit = lorentzian_points(&rs, &vals, Some(2.0)).unwrap();
        assert!(fit.converged);
        assert_eq!(fit.param("c0"), 1.0);

        let sol = nls_minimize(
            |p: &[f64], out: &mut [f64]| {
                out[0] = p[0] + p[1] - 3.0;
                out[1] = p[0] - p[1] - 1.0;
                out[2] = 0.5 * (p[0] - 2.0);
            },
            3,
            &[0.0, 0.0],
            &[(-10.0, 1.5), (-10.0, 10.0)],
            &NlsOptions::default(),
        )
        .unwrap();
        assert!(sol.converged && sol.iterations < 20, "{sol:?}");
        assert_eq!(sol.params[0], 1.5);
        // with p0 fixed at 1.5 the least-squares optimum for p1 is (1.5 + 0.5) / 2
        assert!((sol.params[1] - 1.0).abs() < 1e-8);
    }
}
