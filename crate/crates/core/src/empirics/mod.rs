//! Empirical statistics of relative population flows: per-city moments,
//! the variance scatter, distance–correlation pairs and their binned
//! medians, lagged cross-section correlations and the (ln r, c) histogram.
//!
//! All sample moments use divisor `T` (or `n` for cross sections); no
//! Bessel correction is applied anywhere. Undefined coefficients caused by
//! zero-variance series are dropped and counted, never replaced by zero.

mod density;

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ingest::{DistanceMatrix, RelativePanel};
use crate::stats::{mean, median, moving_average, pearson, variance};

pub use density::{corr_density_mean, sample_corr_density, sample_corr_density_integral};

/// Per-city moments over the observation window.
#[derive(Debug, Clone)]
pub struct MomentSummary {
    /// ⟨x_i⟩ over T+1 points.
    pub mean_x: Vec<f64>,
    /// ⟨ẋ_i⟩ over T points.
    pub mean_xdot: Vec<f64>,
    /// V[ẋ_i] with divisor T.
    pub var_xdot: Vec<f64>,
    pub t: usize,
}

pub fn city_moments(rel: &RelativePanel) -> Result<MomentSummary> {
    let t = rel.n_changes();
    if t < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 annual changes, have {t}")));
    }
    let n = rel.n_cities();
    let mut summary = MomentSummary {
        mean_x: Vec::with_capacity(n),
        mean_xdot: Vec::with_capacity(n),
        var_xdot: Vec::with_capacity(n),
        t,
    };
    for i in 0..n {
        let x: Vec<f64> = rel.x.row(i).iter().copied().collect();
        let xd: Vec<f64> = rel.xdot.row(i).iter().copied().collect();
        summary.mean_x.push(mean(&x));
        summary.mean_xdot.push(mean(&xd));
        summary.var_xdot.push(variance(&xd));
    }
    Ok(summary)
}

#[derive(Debug, Clone)]
pub struct VarianceScatter {
    /// (⟨x_i⟩, V[ẋ_i]/⟨x_i⟩) for cities with ⟨x_i⟩ > 0.
    pub points: Vec<(f64, f64)>,
    pub excluded: usize,
}

pub fn variance_scatter(m: &MomentSummary) -> VarianceScatter {
    let mut points = Vec::with_capacity(m.mean_x.len());
    let mut excluded = 0;
    for (&mx, &v) in m.mean_x.iter().zip(&m.var_xdot) {
        if mx > 0.0 {
            points.push((mx, v / mx));
        } else {
            excluded += 1;
        }
    }
    VarianceScatter { points, excluded }
}

/// Indices of cities whose mean relative population exceeds `min_x`.
pub fn retained_cities(rel: &RelativePanel, min_x: f64) -> Vec<usize> {
    (0..rel.n_cities())
        .filter(|&i| rel.x.row(i).mean() > min_x)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorrelationRecord {
    /// Row indices into the panel, `i < j`.
    pub i: usize,
    pub j: usize,
    pub r_km: f64,
    pub c: f64,
}

#[derive(Debug, Clone)]
pub struct PairCorrelations {
    pub records: Vec<CorrelationRecord>,
    pub retained: usize,
    /// Pairs dropped because one series has zero variance.
    pub dropped: usize,
}

/// Temporal Pearson coefficient of ẋ for every unordered pair of cities
/// with ⟨x⟩ > `min_x`.
pub fn pairwise_correlations(rel: &RelativePanel, d: &DistanceMatrix, min_x: f64) -> Result<PairCorrelations> {
    if rel.n_changes() < 2 {
        return Err(Error::InvalidArgument("need at least 2 annual changes".into()));
    }
    if d.len() != rel.n_cities() {
        return Err(Error::InvalidArgument(format!(
            "distance matrix has {} cities, panel has {}",
            d.len(),
            rel.n_cities()
        )));
    }
    let keep = retained_cities(rel, min_x);
    if keep.len() < 2 {
        return Err(Error::NoPairsRetained(format!(
            "{} of {} cities exceed min_x = {min_x}",
            keep.len(),
            rel.n_cities()
        )));
    }
    let t = rel.n_changes() as f64;
    // Centered series and their norms, computed once per city.
    let centered: Vec<(Vec<f64>, f64)> = keep
        .iter()
        .map(|&i| {
            let row: Vec<f64> = rel.xdot.row(i).iter().copied().collect();
            let m = mean(&row);
            let c: Vec<f64> = row.iter().map(|v| v - m).collect();
            let var = c.iter().map(|v| v * v).sum::<f64>() / t;
            (c, var)
        })
        .collect();
    let mut records = Vec::with_capacity(keep.len() * (keep.len() - 1) / 2);
    let mut dropped = 0;
    for a in 0..keep.len() {
        for b in (a + 1)..keep.len() {
            let (ca, va) = &centered[a];
            let (cb, vb) = &centered[b];
            if *va <= 0.0 || *vb <= 0.0 {
                dropped += 1;
                continue;
            }
            let cov = ca.iter().zip(cb).map(|(x, y)| x * y).sum::<f64>() / t;
            let c = (cov / (va * vb).sqrt()).clamp(-1.0, 1.0);
            let (i, j) = (keep[a], keep[b]);
            records.push(CorrelationRecord { i, j, r_km: d.get(i, j), c });
        }
    }
    Ok(PairCorrelations { records, retained: keep.len(), dropped })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BinAxis {
    LnR,
    LnX,
    Lag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    Median,
    Mean,
}

/// A statistic evaluated on ordered, non-overlapping bins.
#[derive(Debug, Clone, Serialize)]
pub struct BinnedCurve {
    pub axis: BinAxis,
    pub width: f64,
    pub centers: Vec<f64>,
    pub values: Vec<f64>,
    pub counts: Vec<usize>,
    /// Moving-average smoothed copy of `values`, when requested.
    pub smoothed: Option<Vec<f64>>,
    pub smoothing_width: Option<usize>,
}

impl BinnedCurve {
    /// Bin centers mapped back to linear units (e.g. km for `LnR`).
    pub fn linear_centers(&self) -> Vec<f64> {
        match self.axis {
            BinAxis::LnR | BinAxis::LnX => self.centers.iter().map(|c| c.exp()).collect(),
            BinAxis::Lag => self.centers.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// CSV with header `bin_center,statistic,count`.
    pub fn write_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["bin_center", "statistic", "count"])?;
        for k in 0..self.len() {
            out.write_record([
                self.centers[k].to_string(),
                self.values[k].to_string(),
                self.counts[k].to_string(),
            ])?;
        }
        out.flush()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BinSpec {
    /// Width in ln units.
    pub width: f64,
    /// Open interval on the linear abscissa, e.g. (5, 1000) km.
    pub window: (f64, f64),
    pub stat: Statistic,
    pub smooth: Option<usize>,
}

impl BinSpec {
    pub fn distance_default() -> Self {
        BinSpec { width: 0.1, window: (5.0, 1000.0), stat: Statistic::Median, smooth: None }
    }
}

fn bin_index(ln_value: f64, width: f64) -> i64 {
    (ln_value / width).floor() as i64
}

/// Bins `(abscissa, value)` pairs on the log of the abscissa. A point falls
/// in bin k when ln(abscissa) ∈ [k·w, (k+1)·w).
pub fn bin_log_axis(points: &[(f64, f64)], axis: BinAxis, spec: &BinSpec) -> Result<BinnedCurve> {
    if !(spec.width > 0.0) {
        return Err(Error::InvalidArgument(format!("bin width must be positive, got {}", spec.width)));
    }
    let (lo, hi) = spec.window;
    if !(lo < hi) {
        return Err(Error::EmptyWindow(format!("({lo}, {hi})")));
    }
    let mut bins: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
    for &(a, v) in points {
        if a > lo && a < hi && a > 0.0 {
            bins.entry(bin_index(a.ln(), spec.width)).or_default().push(v);
        }
    }
    if bins.is_empty() {
        return Err(Error::EmptyWindow(format!("no points with abscissa in ({lo}, {hi})")));
    }
    let mut curve = BinnedCurve {
        axis,
        width: spec.width,
        centers: Vec::with_capacity(bins.len()),
        values: Vec::with_capacity(bins.len()),
        counts: Vec::with_capacity(bins.len()),
        smoothed: None,
        smoothing_width: spec.smooth,
    };
    for (k, vals) in bins {
        curve.centers.push((k as f64 + 0.5) * spec.width);
        curve.values.push(match spec.stat {
            Statistic::Median => median(&vals),
            Statistic::Mean => mean(&vals),
        });
        curve.counts.push(vals.len());
    }
    curve.smoothed = spec.smooth.map(|w| moving_average(&curve.values, w));
    Ok(curve)
}

/// Bins correlation records by ln r.
pub fn bin_statistic(records: &[CorrelationRecord], spec: &BinSpec) -> Result<BinnedCurve> {
    let pts: Vec<(f64, f64)> = records.iter().map(|r| (r.r_km, r.c)).collect();
    bin_log_axis(&pts, BinAxis::LnR, spec)
}

/// Mean and variance (divisor n) of ẋ(t) over the given cities. `t` is the
/// 1-based change index, 1 ≤ t ≤ T.
pub fn cross_section_moments_among(rel: &RelativePanel, cities: &[usize], t: usize) -> Result<(f64, f64)> {
    if t == 0 || t > rel.n_changes() {
        return Err(Error::InvalidArgument(format!("t = {t} outside 1..={}", rel.n_changes())));
    }
    if cities.is_empty() {
        return Err(Error::InvalidArgument("no cities selected".into()));
    }
    let v: Vec<f64> = cities.iter().map(|&i| rel.xdot[(i, t - 1)]).collect();
    Ok((mean(&v), variance(&v)))
}

pub fn cross_section_moments(rel: &RelativePanel, t: usize) -> Result<(f64, f64)> {
    let all: Vec<usize> = (0..rel.n_cities()).collect();
    cross_section_moments_among(rel, &all, t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LagCorrelation {
    pub lag: usize,
    /// Average of the per-year cross-section coefficients.
    pub mean: f64,
    /// Standard deviation (divisor count) of those coefficients.
    pub std: f64,
    pub used: usize,
    /// Years dropped because a cross section had zero variance.
    pub dropped: usize,
}

/// Lagged cross-city correlation restricted to `cities`.
pub fn time_correlation_among(rel: &RelativePanel, cities: &[usize], lag: usize) -> Result<LagCorrelation> {
    let t = rel.n_changes();
    if lag == 0 || lag + 1 > t {
        return Err(Error::InvalidArgument(format!("lag {lag} outside 1..={}", t.saturating_sub(1))));
    }
    if cities.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 cities".into()));
    }
    let column = |s: usize| -> Vec<f64> { cities.iter().map(|&i| rel.xdot[(i, s)]).collect() };
    let mut coeffs = Vec::with_capacity(t - lag);
    let mut dropped = 0;
    for s in 0..(t - lag) {
        match pearson(&column(s), &column(s + lag)) {
            Some(c) => coeffs.push(c),
            None => dropped += 1,
        }
    }
    let (mean_c, std) = if coeffs.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        (mean(&coeffs), variance(&coeffs).sqrt())
    };
    Ok(LagCorrelation { lag, mean: mean_c, std, used: coeffs.len(), dropped })
}

pub fn time_correlation(rel: &RelativePanel, lag: usize) -> Result<LagCorrelation> {
    let all: Vec<usize> = (0..rel.n_cities()).collect();
    time_correlation_among(rel, &all, lag)
}

/// `c(Δt)` for every lag in `1..=max_lag`.
pub fn lag_curve(rel: &RelativePanel, cities: &[usize], max_lag: usize) -> Result<Vec<LagCorrelation>> {
    (1..=max_lag).map(|lag| time_correlation_among(rel, cities, lag)).collect()
}

#[derive(Debug, Clone)]
pub struct PopulationCorrelation {
    pub curve: BinnedCurve,
    /// Bins with fewer than two cities, or without any usable year.
    pub skipped: usize,
}

/// One-year lag correlation of the cities falling in each ln⟨x⟩ bin.
pub fn correlation_by_population(rel: &RelativePanel, width: f64) -> Result<PopulationCorrelation> {
    if !(width > 0.0) {
        return Err(Error::InvalidArgument(format!("bin width must be positive, got {width}")));
    }
    if rel.n_changes() < 2 {
        return Err(Error::InvalidArgument("need at least 2 annual changes".into()));
    }
    let mut bins: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for i in 0..rel.n_cities() {
        let mx = rel.x.row(i).mean();
        if mx > 0.0 {
            bins.entry(bin_index(mx.ln(), width)).or_default().push(i);
        }
    }
    let mut curve = BinnedCurve {
        axis: BinAxis::LnX,
        width,
        centers: vec![],
        values: vec![],
        counts: vec![],
        smoothed: None,
        smoothing_width: None,
    };
    let mut skipped = 0;
    for (k, cities) in bins {
        if cities.len() < 2 {
            skipped += 1;
            continue;
        }
        let lc = time_correlation_among(rel, &cities, 1)?;
        if lc.used == 0 {
            skipped += 1;
            continue;
        }
        curve.centers.push((k as f64 + 0.5) * width);
        curve.values.push(lc.mean);
        curve.counts.push(cities.len());
    }
    Ok(PopulationCorrelation { curve, skipped })
}

/// Column-normalized histogram over (ln r, c).
#[derive(Debug, Clone, Serialize)]
pub struct RcHistogram {
    pub ln_r_width: f64,
    pub c_width: f64,
    /// Centers of the non-empty ln r columns.
    pub ln_r_centers: Vec<f64>,
    /// Centers of the c cells spanning [-1, 1].
    pub c_centers: Vec<f64>,
    /// `weights[column][cell]`; every column sums to 1.
    pub weights: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

impl RcHistogram {
    /// Long-form CSV with header `ln_r,c,weight`.
    pub fn write_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["ln_r", "c", "weight"])?;
        for (col, lr) in self.ln_r_centers.iter().enumerate() {
            for (cell, c) in self.c_centers.iter().enumerate() {
                out.write_record([lr.to_string(), c.to_string(), self.weights[col][cell].to_string()])?;
            }
        }
        out.flush()
    }
}

pub fn rc_histogram(
    records: &[CorrelationRecord],
    ln_r_width: f64,
    c_width: f64,
    window: (f64, f64),
    smooth: Option<usize>,
) -> Result<RcHistogram> {
    if !(ln_r_width > 0.0) || !(c_width > 0.0) {
        return Err(Error::InvalidArgument("histogram widths must be positive".into()));
    }
    let (lo, hi) = window;
    if !(lo < hi) {
        return Err(Error::EmptyWindow(format!("({lo}, {hi})")));
    }
    let n_cells = (2.0 / c_width - 1e-9).ceil() as usize;
    let mut columns: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
    for rec in records {
        if !(rec.r_km > lo && rec.r_km < hi) {
            continue;
        }
        let col = columns.entry(bin_index(rec.r_km.ln(), ln_r_width)).or_insert_with(|| vec![0.0; n_cells]);
        let cell = (((rec.c + 1.0) / c_width).floor() as usize).min(n_cells - 1);
        col[cell] += 1.0;
    }
    if columns.is_empty() {
        return Err(Error::EmptyWindow(format!("no records with r in ({lo}, {hi})")));
    }
    let mut hist = RcHistogram {
        ln_r_width,
        c_width,
        ln_r_centers: vec![],
        c_centers: (0..n_cells).map(|k| -1.0 + (k as f64 + 0.5) * c_width).collect(),
        weights: vec![],
        counts: vec![],
    };
    for (k, col) in columns {
        let total: f64 = col.iter().sum();
        hist.ln_r_centers.push((k as f64 + 0.5) * ln_r_width);
        hist.counts.push(total as usize);
        hist.weights.push(col.iter().map(|v| v / total).collect());
    }
    if let Some(w) = smooth {
        // Averaging normalized columns keeps every column summing to one.
        let smoothed: Vec<Vec<f64>> = (0..n_cells)
            .map(|cell| {
                let line: Vec<f64> = hist.weights.iter().map(|col| col[cell]).collect();
                moving_average(&line, w)
            })
            .collect();
        for (col, weights) in hist.weights.iter_mut().enumerate() {
            for (cell, v) in weights.iter_mut().enumerate() {
                *v = smoothed[cell][col];
            }
        }
    }
    Ok(hist)
}

/// Writes pair records as `id_i,id_j,r_km,c`.
pub fn write_records_csv<W: Write>(records: &[CorrelationRecord], ids: &[String], w: W) -> std::io::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["id_i", "id_j", "r_km", "c"])?;
    for r in records {
        out.write_record([ids[r.i].clone(), ids[r.j].clone(), r.r_km.to_string(), r.c.to_string()])?;
    }
    out.flush()
}
