//! The full panel analysis shared by `analyze` and `loopback`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Args;
use popflow::empirics::{
    bin_statistic, city_moments, correlation_by_population, lag_curve, pairwise_correlations, rc_histogram,
    variance_scatter, write_records_csv, BinSpec, BinnedCurve, LagCorrelation, PairCorrelations, PopulationCorrelation,
    RcHistogram, VarianceScatter,
};
use popflow::fitting::{fit_exponential, fit_lorentzian, fit_variance_law, FitResult, VarianceLawOptions};
use popflow::ingest::{DistanceMatrix, RelativePanel};
use serde::Serialize;

use crate::CliError;

#[derive(Debug, Clone, Args, Serialize)]
pub struct AnalysisOptions {
    /// Keep cities whose mean relative population exceeds this.
    #[arg(long, default_value_t = 0.0)]
    pub min_x: f64,
    /// Largest lag (years) of the temporal correlation curve.
    #[arg(long, default_value_t = 20)]
    pub max_lag: usize,
    /// Freeze the Lorentzian exponent instead of fitting it.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Moving-average width reported alongside the distance curve.
    #[arg(long)]
    pub smooth: Option<usize>,
    /// Width of the ln⟨x⟩ bins of the variance-law fit.
    #[arg(long, default_value_t = 0.25)]
    pub variance_bin_width: f64,
    /// Width of the ln⟨x⟩ bins of the correlation-by-population curve.
    #[arg(long, default_value_t = 0.5)]
    pub population_bin_width: f64,
    /// Cell width along c of the (ln r, c) histogram.
    #[arg(long, default_value_t = 0.05)]
    pub rc_c_width: f64,
}

pub struct Analysis {
    pub scatter: VarianceScatter,
    pub variance_fit: Option<FitResult>,
    pub pairs: PairCorrelations,
    pub distance_curve: Option<BinnedCurve>,
    pub lorentzian_fit: Option<FitResult>,
    pub lags: Vec<LagCorrelation>,
    pub exponential_fit: Option<FitResult>,
    pub rc: Option<RcHistogram>,
    pub population: Option<PopulationCorrelation>,
    pub notices: Vec<String>,
}

/// Fit failures caused by too little usable data become notices; anything
/// else is an error.
fn soft<T>(r: popflow::Result<T>, what: &str, notices: &mut Vec<String>) -> popflow::Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(e @ (popflow::Error::InvalidArgument(_) | popflow::Error::DegenerateDesign(_) | popflow::Error::EmptyWindow(_))) => {
            notices.push(format!("{what} skipped: {e}"));
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

pub fn analyze(rel: &RelativePanel, d: &DistanceMatrix, opts: &AnalysisOptions) -> popflow::Result<Analysis> {
    let mut notices = Vec::new();
    let scatter = variance_scatter(&city_moments(rel)?);
    let vopts = VarianceLawOptions { bin_width: opts.variance_bin_width };
    let variance_fit = soft(fit_variance_law(&scatter.points, &vopts), "variance-law fit", &mut notices)?;

    let pairs = pairwise_correlations(rel, d, opts.min_x)?;
    let spec = BinSpec { smooth: opts.smooth, ..BinSpec::distance_default() };
    let distance_curve = soft(bin_statistic(&pairs.records, &spec), "distance curve", &mut notices)?;
    let lorentzian_fit = match &distance_curve {
        Some(c) => soft(fit_lorentzian(c, opts.alpha), "Lorentzian fit", &mut notices)?,
        None => None,
    };

    let max_lag = opts.max_lag.min(rel.n_changes().saturating_sub(1));
    let lags = if max_lag == 0 {
        notices.push("lag curve skipped: fewer than 2 annual changes".into());
        Vec::new()
    } else {
        let keep: Vec<usize> = (0..rel.n_cities()).filter(|&i| rel.x.row(i).mean() > opts.min_x).collect();
        lag_curve(rel, &keep, max_lag)?
    };
    let lag_points: Vec<(f64, f64)> = lags.iter().filter(|l| l.mean.is_finite()).map(|l| (l.lag as f64, l.mean)).collect();
    let exponential_fit = soft(fit_exponential(&lag_points), "exponential fit", &mut notices)?;

    let rc = soft(rc_histogram(&pairs.records, 0.1, opts.rc_c_width, (5.0, 1000.0), opts.smooth), "rc histogram", &mut notices)?;
    let population = soft(correlation_by_population(rel, opts.population_bin_width), "population correlation", &mut notices)?;

    Ok(Analysis { scatter, variance_fit, pairs, distance_curve, lorentzian_fit, lags, exponential_fit, rc, population, notices })
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

/// Writes every product of `a` into `dir` and returns the file list.
pub fn write_analysis(a: &Analysis, ids: &[String], dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files = Vec::new();
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |e: std::io::Error| CliError::io(&p, e)
    };

    let p = dir.join("variance_scatter.csv");
    let mut w = create(&p)?;
    writeln!(w, "mean_x,var_xdot_over_mean_x").map_err(io(&p))?;
    for (x, y) in &a.scatter.points {
        writeln!(w, "{x},{y}").map_err(io(&p))?;
    }
    w.flush().map_err(io(&p))?;
    files.push(p);

    let p = dir.join("pair_correlations.csv");
    write_records_csv(&a.pairs.records, ids, create(&p)?).map_err(io(&p))?;
    files.push(p);

    if let Some(c) = &a.distance_curve {
        let p = dir.join("distance_curve.csv");
        c.write_csv(create(&p)?).map_err(io(&p))?;
        files.push(p);
    }

    let p = dir.join("lag_curve.csv");
    let mut w = create(&p)?;
    writeln!(w, "lag,c,std,used").map_err(io(&p))?;
    for l in &a.lags {
        writeln!(w, "{},{},{},{}", l.lag, l.mean, l.std, l.used).map_err(io(&p))?;
    }
    w.flush().map_err(io(&p))?;
    files.push(p);

    if let Some(h) = &a.rc {
        let p = dir.join("rc_histogram.csv");
        h.write_csv(create(&p)?).map_err(io(&p))?;
        files.push(p);
    }
    if let Some(pc) = &a.population {
        let p = dir.join("population_correlation.csv");
        pc.curve.write_csv(create(&p)?).map_err(io(&p))?;
        files.push(p);
    }
    for (name, fit) in [
        ("variance_fit.json", &a.variance_fit),
        ("lorentzian_fit.json", &a.lorentzian_fit),
        ("exponential_fit.json", &a.exponential_fit),
    ] {
        if let Some(f) = fit {
            let p = dir.join(name);
            write_json(&p, f)?;
            files.push(p);
        }
    }
    Ok(files)
}

pub fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write_json(path, value)
}
