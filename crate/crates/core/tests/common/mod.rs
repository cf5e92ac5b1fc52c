//! Naive-loop reference implementations of the panel estimators and a
//! random panel generator. Nothing here calls into the library's numeric
//! helpers, so agreement is a genuine cross-check.

#![allow(dead_code)]

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use popflow::ingest::{to_relative, CensusPanel, Municipality, Position, RelativePanel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct RandomPanel {
    pub census: CensusPanel,
    pub rel: RelativePanel,
    pub xy: Vec<(f64, f64)>,
}

/// n ∈ [2, 10] cities, T+1 ∈ [3, 9] years, planar positions in a 600 km box.
pub fn random_panel(seed: u64) -> RandomPanel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=10);
    let years = rng.gen_range(3..=9);
    let xy: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen_range(0.0..600.0), rng.gen_range(0.0..600.0))).collect();
    let munis = xy
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| Municipality { id: format!("m{i}"), name: format!("M{i}"), position: Position::planar(x, y) })
        .collect();
    let pops = DMatrix::from_fn(n, years, |_, _| rng.gen_range(1.0..1e5_f64).round());
    let census = CensusPanel::new((2000..2000 + years as i32).collect(), munis, pops).unwrap();
    let rel = to_relative(&census);
    RandomPanel { census, rel, xy }
}

pub fn naive_relative(census: &CensusPanel) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let p = census.populations();
    let (n, y) = (p.nrows(), p.ncols());
    let mut x = vec![vec![0.0; y]; n];
    for t in 0..y {
        let mut total = 0.0;
        for i in 0..n {
            total += p[(i, t)];
        }
        for i in 0..n {
            x[i][t] = p[(i, t)] / total;
        }
    }
    let xdot = x.iter().map(|row| (0..y - 1).map(|t| row[t + 1] - row[t]).collect()).collect();
    (x, xdot)
}

pub fn naive_mean(v: &[f64]) -> f64 {
    let mut s = 0.0;
    for a in v {
        s += a;
    }
    s / v.len() as f64
}

pub fn naive_var(v: &[f64]) -> f64 {
    let m = naive_mean(v);
    let mut s = 0.0;
    for a in v {
        s += (a - m) * (a - m);
    }
    s / v.len() as f64
}

pub fn naive_pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let (ma, mb) = (naive_mean(a), naive_mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for k in 0..a.len() {
        sab += (a[k] - ma) * (b[k] - mb);
        saa += (a[k] - ma) * (a[k] - ma);
        sbb += (b[k] - mb) * (b[k] - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        None
    } else {
        Some(sab / (saa * sbb).sqrt())
    }
}

pub fn naive_median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// `(i, j, r, c)` for retained pairs, i < j.
pub fn naive_pairs(x: &[Vec<f64>], xdot: &[Vec<f64>], xy: &[(f64, f64)], min_x: f64) -> Vec<(usize, usize, f64, f64)> {
    let n = x.len();
    let mut out = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if naive_mean(&x[i]) > min_x && naive_mean(&x[j]) > min_x {
                if let Some(c) = naive_pearson(&xdot[i], &xdot[j]) {
                    let r = ((xy[i].0 - xy[j].0).powi(2) + (xy[i].1 - xy[j].1).powi(2)).sqrt();
                    out.push((i, j, r, c));
                }
            }
        }
    }
    out
}

/// Median of c per ln r bin of width `w` inside the open window.
pub fn naive_binned(pairs: &[(usize, usize, f64, f64)], w: f64, lo: f64, hi: f64) -> Vec<(f64, f64, usize)> {
    let mut bins: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
    for p in pairs {
        if p.2 > lo && p.2 < hi {
            bins.entry((p.2.ln() / w).floor() as i64).or_default().push(p.3);
        }
    }
    bins.into_iter().map(|(k, v)| ((k as f64 + 0.5) * w, naive_median(&v), v.len())).collect()
}

/// Average over t of the cross-city Pearson of ẋ(t) and ẋ(t+lag).
pub fn naive_lag(xdot: &[Vec<f64>], cities: &[usize], lag: usize) -> (f64, usize) {
    let t = xdot[0].len();
    let mut cs = Vec::new();
    for s in 0..t - lag {
        let a: Vec<f64> = cities.iter().map(|&i| xdot[i][s]).collect();
        let b: Vec<f64> = cities.iter().map(|&i| xdot[i][s + lag]).collect();
        if let Some(c) = naive_pearson(&a, &b) {
            cs.push(c);
        }
    }
    if cs.is_empty() {
        (f64::NAN, 0)
    } else {
        (naive_mean(&cs), cs.len())
    }
}

/// Column-normalized (ln r, c) weights keyed by (column, cell).
pub fn naive_rc(pairs: &[(usize, usize, f64, f64)], wr: f64, wc: f64, lo: f64, hi: f64) -> BTreeMap<i64, Vec<f64>> {
    let cells = (2.0 / wc - 1e-9).ceil() as usize;
    let mut cols: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
    for p in pairs {
        if p.2 > lo && p.2 < hi {
            let col = cols.entry((p.2.ln() / wr).floor() as i64).or_insert(vec![0.0; cells]);
            let mut cell = ((p.3 + 1.0) / wc).floor() as usize;
            if cell >= cells {
                cell = cells - 1;
            }
            col[cell] += 1.0;
        }
    }
    for col in cols.values_mut() {
        let total: f64 = col.iter().sum();
        for v in col.iter_mut() {
            *v /= total;
        }
    }
    cols
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a.is_nan() && b.is_nan()) || (a - b).abs() <= tol
}

/// Compares every panel estimator against the naive loops; returns the
/// first discrepancy.
pub fn check_panel(p: &RandomPanel, tol: f64) -> Result<(), String> {
    use popflow::empirics::*;
    use popflow::ingest::{distance_matrix, Geometry};

    let (x, xdot) = naive_relative(&p.census);
    let n = x.len();
    let t = xdot[0].len();
    for i in 0..n {
        for s in 0..=t {
            if !close(p.rel.x[(i, s)], x[i][s], tol) {
                return Err(format!("x[{i},{s}]"));
            }
        }
        for s in 0..t {
            if !close(p.rel.xdot[(i, s)], xdot[i][s], tol) {
                return Err(format!("xdot[{i},{s}]"));
            }
        }
    }

    let m = city_moments(&p.rel).map_err(|e| e.to_string())?;
    let sc = variance_scatter(&m);
    for i in 0..n {
        let (mx, mv, vv) = (naive_mean(&x[i]), naive_mean(&xdot[i]), naive_var(&xdot[i]));
        if !close(m.mean_x[i], mx, tol) || !close(m.mean_xdot[i], mv, tol) || !close(m.var_xdot[i], vv, tol) {
            return Err(format!("moments of city {i}"));
        }
        if !close(sc.points[i].1, vv / mx, tol) {
            return Err(format!("scatter of city {i}"));
        }
    }

    for s in 1..=t {
        let col: Vec<f64> = (0..n).map(|i| xdot[i][s - 1]).collect();
        let (mu, var) = cross_section_moments(&p.rel, s).map_err(|e| e.to_string())?;
        if !close(mu, naive_mean(&col), tol) || !close(var, naive_var(&col), tol) {
            return Err(format!("cross-section moments at {s}"));
        }
    }

    let all: Vec<usize> = (0..n).collect();
    for lag in 1..t {
        let lc = time_correlation(&p.rel, lag).map_err(|e| e.to_string())?;
        let (mean, used) = naive_lag(&xdot, &all, lag);
        if !close(lc.mean, mean, tol) || lc.used != used {
            return Err(format!("lag {lag}: {} vs {mean}", lc.mean));
        }
    }

    let d = distance_matrix(p.census.municipalities(), Geometry::Planar).map_err(|e| e.to_string())?;
    for min_x in [0.0, 1.0 / n as f64] {
        let pairs = naive_pairs(&x, &xdot, &p.xy, min_x);
        let got = match pairwise_correlations(&p.rel, &d, min_x) {
            Ok(pc) => pc.records,
            Err(popflow::Error::NoPairsRetained(_)) => Vec::new(),
            Err(e) => return Err(e.to_string()),
        };
        if got.len() != pairs.len() {
            return Err(format!("pair count {} vs {}", got.len(), pairs.len()));
        }
        for (g, w) in got.iter().zip(&pairs) {
            if g.i != w.0 || g.j != w.1 || !close(g.r_km, w.2, tol) || !close(g.c, w.3, tol) {
                return Err(format!("pair ({}, {})", w.0, w.1));
            }
        }
        let naive = naive_binned(&pairs, 0.1, 5.0, 1000.0);
        match bin_statistic(&got, &BinSpec::distance_default()) {
            Ok(curve) => {
                if curve.len() != naive.len() {
                    return Err("bin count".into());
                }
                for (k, (c, v, cnt)) in naive.iter().enumerate() {
                    if !close(curve.centers[k], *c, tol) || !close(curve.values[k], *v, tol) || curve.counts[k] != *cnt {
                        return Err(format!("bin {k}"));
                    }
                }
            }
            Err(_) if naive.is_empty() => {}
            Err(e) => return Err(e.to_string()),
        }
        let naive = naive_rc(&pairs, 0.1, 0.1, 5.0, 1000.0);
        match rc_histogram(&got, 0.1, 0.1, (5.0, 1000.0), None) {
            Ok(h) => {
                for (col, (k, weights)) in naive.iter().enumerate() {
                    if !close(h.ln_r_centers[col], (*k as f64 + 0.5) * 0.1, tol) {
                        return Err("rc column".into());
                    }
                    for (cell, w) in weights.iter().enumerate() {
                        if !close(h.weights[col][cell], *w, tol) {
                            return Err(format!("rc weight {col},{cell}"));
                        }
                    }
                }
            }
            Err(_) if naive.is_empty() => {}
            Err(e) => return Err(e.to_string()),
        }
    }

    // one-year lag correlation per ln⟨x⟩ bin
    let width = 0.5;
    let mut groups: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        groups.entry((naive_mean(&x[i]).ln() / width).floor() as i64).or_default().push(i);
    }
    let mut expected = Vec::new();
    for (k, cities) in groups {
        if cities.len() >= 2 {
            let (c, used) = naive_lag(&xdot, &cities, 1);
            if used > 0 {
                expected.push(((k as f64 + 0.5) * width, c));
            }
        }
    }
    let pc = correlation_by_population(&p.rel, width).map_err(|e| e.to_string())?;
    if pc.curve.len() != expected.len() {
        return Err("population bins".into());
    }
    for (k, (c, v)) in expected.iter().enumerate() {
        if !close(pc.curve.centers[k], *c, tol) || !close(pc.curve.values[k], *v, tol) {
            return Err(format!("population bin {k}"));
        }
    }
    Ok(())
}
