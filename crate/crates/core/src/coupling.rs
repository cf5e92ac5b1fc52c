//! Lorentzian force coupling between cities and its normal modes.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// `R(r) = 2(2/πr0²)^{1/4} / (1 + 4(r/r0)²)`.
pub fn kernel(r: f64, r0: f64) -> f64 {
    let pref = 2.0 * (2.0 / (std::f64::consts::PI * r0 * r0)).powf(0.25);
    let s = r / r0;
    pref / (1.0 + 4.0 * s * s)
}

fn check_r0(r0: f64) -> Result<()> {
    if r0 > 0.0 && r0.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("r0 must be positive, got {r0}")))
    }
}

/// Coupling matrix over planar positions in km, diagonal included.
pub fn build_r(positions: &[(f64, f64)], r0: f64) -> Result<DMatrix<f64>> {
    check_r0(r0)?;
    let n = positions.len();
    Ok(DMatrix::from_fn(n, n, |i, j| {
        let (dx, dy) = (positions[i].0 - positions[j].0, positions[i].1 - positions[j].1);
        kernel(dx.hypot(dy), r0)
    }))
}

/// `R·Rᵀ` before normalization.
pub fn raw_q(r: &DMatrix<f64>) -> DMatrix<f64> {
    r * r.transpose()
}

/// `Q_ij = Q̃_ij / √(Q̃_ii Q̃_jj)` with `Q̃ = R·Rᵀ`; the diagonal is set to
/// exactly 1.
pub fn build_q(r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !r.is_square() {
        return Err(Error::InvalidArgument("R must be square".into()));
    }
    let qt = raw_q(r);
    let d: Vec<f64> = qt.diagonal().iter().map(|v| v.sqrt()).collect();
    if let Some(i) = d.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::InvalidArgument(format!("zero diagonal in R·Rᵀ at {i}")));
    }
    let n = r.nrows();
    let mut q = DMatrix::from_fn(n, n, |i, j| qt[(i, j)] / (d[i] * d[j]));
    for i in 0..n {
        q[(i, i)] = 1.0;
        for j in 0..i {
            // enforce exact symmetry
            let v = q[(i, j)];
            q[(j, i)] = v;
        }
    }
    Ok(q)
}

#[derive(Debug, Clone)]
pub struct Modes {
    /// Descending.
    pub eigenvalues: DVector<f64>,
    /// Change of basis, one eigenvector per row.
    pub a: DMatrix<f64>,
}

/// Eigendecomposition of a symmetric matrix, sorted descending, each
/// eigenvector signed so its largest-magnitude component is positive.
pub fn eigendecompose(q: &DMatrix<f64>) -> Modes {
    let n = q.nrows();
    let eig = SymmetricEigen::new(q.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let mut a = DMatrix::zeros(n, n);
    for (row, &k) in order.iter().enumerate() {
        let v = eig.eigenvectors.column(k);
        let mut lead = 0;
        for c in 1..n {
            // first index wins ties, up to rounding
            if v[c].abs() > v[lead].abs() * (1.0 + 1e-12) {
                lead = c;
            }
        }
        let sign = if v[lead] < 0.0 { -1.0 } else { 1.0 };
        for c in 0..n {
            a[(row, c)] = sign * v[c];
        }
    }
    Modes { eigenvalues, a }
}

/// Everything derived from one position set and scale.
#[derive(Debug, Clone)]
pub struct CouplingSet {
    pub positions: Vec<(f64, f64)>,
    pub r0: f64,
    pub r: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub modes: Modes,
}

impl CouplingSet {
    pub fn new(positions: Vec<(f64, f64)>, r0: f64) -> Result<CouplingSet> {
        if positions.is_empty() {
            return Err(Error::InvalidArgument("no positions".into()));
        }
        let r = build_r(&positions, r0)?;
        let q = build_q(&r)?;
        let modes = eigendecompose(&q);
        Ok(CouplingSet { positions, r0, r, q, modes })
    }

    pub fn n(&self) -> usize {
        self.positions.len()
    }

    /// Matrix applied to i.i.d. forces. Normalized rows give
    /// `M·Mᵀ = Q`; otherwise `M = R`.
    pub fn force_matrix(&self, normalized: bool) -> DMatrix<f64> {
        if !normalized {
            return self.r.clone();
        }
        let qt = raw_q(&self.r);
        let mut m = self.r.clone();
        for i in 0..m.nrows() {
            let s = qt[(i, i)].sqrt();
            m.row_mut(i).iter_mut().for_each(|v| *v /= s);
        }
        m
    }

    /// Writes the selected eigenvectors as `city_id,x_km,y_km,mode_index,component`.
    pub fn write_modes_csv<W: Write>(&self, ids: &[String], modes: &[usize], w: W) -> Result<()> {
        if let Some(m) = modes.iter().find(|&&m| m >= self.n()) {
            return Err(Error::InvalidArgument(format!("mode {m} requested from a {}-city system", self.n())));
        }
        if ids.len() != self.n() {
            return Err(Error::InvalidArgument(format!("{} ids for {} cities", ids.len(), self.n())));
        }
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::Io { path: "<modes>".into(), source: e.into() };
        out.write_record(["city_id", "x_km", "y_km", "mode_index", "component"]).map_err(io)?;
        for &m in modes {
            for (c, &(x, y)) in self.positions.iter().enumerate() {
                out.write_record([
                    ids[c].clone(),
                    x.to_string(),
                    y.to_string(),
                    m.to_string(),
                    self.modes.a[(m, c)].to_string(),
                ])
                .map_err(io)?;
            }
        }
        out.flush().map_err(|e| Error::Io { path: "<modes>".into(), source: e })?;
        Ok(())
    }
}

/// `C_ij(Δt) = Q_ij·e^{−γ_jΔt}·2√(γ_iγ_j)/(γ_i+γ_j)`.
pub fn analytic_correlation(q: &DMatrix<f64>, gamma: &[f64], dt: f64) -> Result<DMatrix<f64>> {
    let n = q.nrows();
    if gamma.len() != n {
        return Err(Error::InvalidArgument(format!("{} damping rates for {n} cities", gamma.len())));
    }
    if let Some(g) = gamma.iter().find(|g| !(**g > 0.0)) {
        return Err(Error::InvalidArgument(format!("damping rate {g} is not positive")));
    }
    if !(dt >= 0.0) {
        return Err(Error::InvalidArgument(format!("negative lag {dt}")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| {
        let (gi, gj) = (gamma[i], gamma[j]);
        let factor = if gi == gj { 1.0 } else { 2.0 * (gi * gj).sqrt() / (gi + gj) };
        q[(i, j)] * (-gj * dt).exp() * factor
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridDim {
    One,
    Two,
}

/// Continuum-limit comparison of a gridded `Q` against `1/(1+(r/r0)²)`.
#[derive(Debug, Clone)]
pub struct ContinuumCheck {
    pub max_deviation: f64,
    /// `(r, Q_row(r))` for every compared grid point, sorted by `r`.
    pub profile: Vec<(f64, f64)>,
}

/// Builds the coupling on a regular grid of spacing `h` and side `extent`
/// centred on the origin, normalizes `Q`, and returns the largest absolute
/// deviation of the central row from `1/(1+(r/r0)²)` over `r ≤ extent/3`.
pub fn continuum_q_check(h: f64, extent: f64, r0: f64, dim: GridDim) -> Result<ContinuumCheck> {
    check_r0(r0)?;
    if !(h > 0.0) || h > r0 / 10.0 + 1e-12 * r0 {
        return Err(Error::InvalidArgument(format!("grid spacing {h} must be in (0, r0/10]")));
    }
    if extent < 6.0 * r0 * (1.0 - 1e-12) {
        return Err(Error::InvalidArgument(format!("extent {extent} must be at least 6·r0")));
    }
    let half = (0.5 * extent / h).round() as i64;
    let reach = ((extent / 3.0) / h).floor() as i64;
    // Kernel by integer offset squared.
    let kern = |d2: i64| kernel(h * (d2 as f64).sqrt(), r0);

    let mut profile = Vec::new();
    match dim {
        GridDim::One => {
            let table: Vec<f64> = (0..=2 * half).map(|d| kern(d * d)).collect();
            let k = |a: i64, b: i64| table[(a - b).unsigned_abs() as usize];
            let diag = |j: i64| (-half..=half).map(|m| k(j, m) * k(j, m)).sum::<f64>();
            let d0 = diag(0);
            for j in 0..=reach {
                let cross: f64 = (-half..=half).map(|m| k(0, m) * k(m, j)).sum();
                profile.push((h * j as f64, cross / (d0 * diag(j)).sqrt()));
            }
        }
        GridDim::Two => {
            let side = (2 * half + 1) as usize;
            let mut table = vec![0.0; side * side];
            for a in 0..side {
                for b in 0..side {
                    table[a * side + b] = kern((a * a + b * b) as i64);
                }
            }
            let k = |dx: i64, dy: i64| table[dx.unsigned_abs() as usize * side + dy.unsigned_abs() as usize];
            let row = |jx: i64, jy: i64| -> (f64, f64) {
                let (mut cross, mut diag) = (0.0, 0.0);
                for mx in -half..=half {
                    for my in -half..=half {
                        let kj = k(mx - jx, my - jy);
                        cross += k(mx, my) * kj;
                        diag += kj * kj;
                    }
                }
                (cross, diag)
            };
            let (_, d0) = row(0, 0);
            // The centred square grid is symmetric under the dihedral group,
            // so one octant 0 ≤ jy ≤ jx covers every distance.
            for jx in 0..=reach {
                for jy in 0..=jx {
                    if jx * jx + jy * jy > reach * reach {
                        continue;
                    }
                    let (cross, diag) = row(jx, jy);
                    profile.push((h * ((jx * jx + jy * jy) as f64).sqrt(), cross / (d0 * diag).sqrt()));
                }
            }
        }
    }
    profile.sort_by(|a, b| a.0.total_cmp(&b.0));
    let max_deviation = profile
        .iter()
        .map(|&(r, q)| (q - 1.0 / (1.0 + (r / r0).powi(2))).abs())
        .fold(0.0, f64::max);
    Ok(ContinuumCheck { max_deviation, profile })
}
