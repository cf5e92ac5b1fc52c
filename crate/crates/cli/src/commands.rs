use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use popflow::coupling::CouplingSet;
use popflow::ingest::{distance_matrix, load_census, read_municipalities, to_relative, CensusPanel, Geometry, Position, EARTH_RADIUS_KM};
use popflow::simulate::{
    equilibrium_stats, run, simulated_census, velocity_autocorrelation, EquilibriumStats, Gamma, Scheme, SimConfig,
};
use serde::Serialize;
use serde_json::json;

use crate::manifest::RunManifest;
use crate::pipeline::{self, AnalysisOptions};
use crate::{CliError, Globals, SimArgs};

pub fn parse_scheme(s: &str) -> Result<Scheme, String> {
    match s {
        "direct" => Ok(Scheme::Direct),
        "normal-mode" | "normal_mode" => Ok(Scheme::NormalMode),
        _ => Err(format!("unknown scheme {s:?} (direct, normal-mode)")),
    }
}

fn geometry(g: &Globals) -> Geometry {
    if g.planar {
        Geometry::Planar
    } else {
        Geometry::Spherical
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<(), CliError> {
    w.flush().map_err(|e| CliError::io(path, e))
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("serializable")
}

fn config_from_file(path: &Path) -> Result<SimConfig, CliError> {
    serde_json::from_str(&read_text(path)?)
        .map_err(|e| CliError::Core(popflow::Error::InvalidConfig(format!("{}: {e}", path.display()))))
}

/// Baseline (or file) configuration with flag overrides, validated.
/// Seed precedence: `--seed`, then the file, then a generated one.
pub fn resolve_config(g: &Globals, a: &SimArgs) -> Result<SimConfig, CliError> {
    let mut cfg = match &a.config {
        Some(p) => {
            let mut c = config_from_file(p)?;
            if let Some(s) = g.seed {
                c.seed = s;
            }
            c
        }
        None => SimConfig::baseline(g.seed_or_generate()),
    };
    if let Some(v) = a.n {
        cfg.n = v;
    }
    if let Some(v) = a.box_km {
        cfg.box_km = v;
    }
    if let Some(v) = a.vf {
        cfg.vf = v;
    }
    if let Some(v) = a.gamma {
        cfg.gamma = Gamma::Uniform(v);
    }
    if let Some(v) = a.r0 {
        cfg.r0 = v;
    }
    if let Some(v) = a.x0 {
        cfg.x0 = v;
    }
    if let Some(v) = a.xm {
        cfg.xm = v;
    }
    if let Some(v) = a.vw {
        cfg.vw = v;
    }
    if let Some(v) = a.dt {
        cfg.dt = v;
    }
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.burn_in {
        cfg.burn_in = v;
    }
    if let Some(v) = a.stride {
        cfg.stride = v;
    }
    if let Some(v) = a.scheme {
        cfg.scheme = v;
    }
    if a.raw_forces {
        cfg.normalize_forces = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct EquilibriumReport {
    #[serde(flatten)]
    stats: EquilibriumStats,
    record_interval: f64,
    /// Pooled `v` autocorrelation one record apart.
    velocity_autocorrelation_1: f64,
}

fn write_census(census: &CensusPanel, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mp = dir.join("municipalities.csv");
    let mut w = create(&mp)?;
    let io = |e| CliError::io(&mp, e);
    writeln!(w, "id,name,x_km,y_km").map_err(io)?;
    for m in census.municipalities() {
        if let Position::Planar { x_km, y_km } = m.position {
            writeln!(w, "{},{},{x_km},{y_km}", m.id, m.name).map_err(io)?;
        }
    }
    finish(w, &mp)?;

    let pp = dir.join("populations.csv");
    let mut w = create(&pp)?;
    let io = |e| CliError::io(&pp, e);
    writeln!(w, "id,year,population").map_err(io)?;
    let pops = census.populations();
    for (i, m) in census.municipalities().iter().enumerate() {
        for (t, year) in census.years().iter().enumerate() {
            writeln!(w, "{},{year},{}", m.id, pops[(i, t)]).map_err(io)?;
        }
    }
    finish(w, &pp)?;
    Ok(vec![mp, pp])
}

/// Runs `cfg` and writes its products into `dir`.
fn simulate_into(cfg: &SimConfig, dir: &Path, notices: &mut Vec<String>) -> Result<Vec<PathBuf>, CliError> {
    let mut files = Vec::new();
    let p = dir.join("config.json");
    fs::write(&p, cfg.to_json() + "\n").map_err(|e| CliError::io(&p, e))?;
    files.push(p);

    let traj = run(cfg)?;
    let p = dir.join("trajectory.csv");
    traj.write_csv(create(&p)?)?;
    files.push(p);

    let report = EquilibriumReport {
        stats: equilibrium_stats(&traj, cfg)?,
        record_interval: traj.record_interval(),
        velocity_autocorrelation_1: velocity_autocorrelation(&traj, 1),
    };
    let p = dir.join("equilibrium.json");
    pipeline::write_json_file(&p, &report)?;
    files.push(p);

    match simulated_census(&traj) {
        Ok(census) => files.extend(write_census(&census, dir)?),
        Err(e) => notices.push(format!("panel export skipped: {e}")),
    }
    Ok(files)
}

pub fn simulate(g: &Globals, a: &SimArgs) -> Result<(), CliError> {
    let cfg = resolve_config(g, a)?;
    let mut notices = Vec::new();
    let files = simulate_into(&cfg, &g.out_dir, &mut notices)?;
    let mut m = RunManifest::new("simulate", to_value(&cfg), Some(cfg.seed));
    if let Some(p) = &a.config {
        m.add_input(p)?;
    }
    m.add_outputs(&g.out_dir, &files)?;
    m.notices = notices;
    m.write(&g.out_dir)?;
    report_notices(&m.notices);
    Ok(())
}

pub fn replay(g: &Globals, manifest_path: &Path) -> Result<(), CliError> {
    let old = RunManifest::parse(&read_text(manifest_path)?)?;
    if old.command != "simulate" {
        return Err(CliError::Invalid(format!("cannot replay a {:?} manifest", old.command)));
    }
    let cfg: SimConfig = serde_json::from_value(old.parameters.clone())
        .map_err(|e| CliError::Core(popflow::Error::InvalidConfig(e.to_string())))?;
    cfg.validate()?;
    let mut notices = Vec::new();
    let files = simulate_into(&cfg, &g.out_dir, &mut notices)?;
    let mut m = RunManifest::new("simulate", old.parameters.clone(), Some(cfg.seed));
    m.add_input(manifest_path)?;
    m.add_outputs(&g.out_dir, &files)?;
    m.notices = notices;

    let mismatched: Vec<&str> = old
        .outputs
        .iter()
        .filter(|o| !m.outputs.iter().any(|n| n == *o))
        .map(|o| o.path.as_str())
        .collect();
    m.write(&g.out_dir)?;
    if !mismatched.is_empty() || old.outputs.len() != m.outputs.len() {
        return Err(CliError::Replay(format!("outputs differ: {}", mismatched.join(", "))));
    }
    eprintln!("replay reproduced {} outputs", m.outputs.len());
    Ok(())
}

pub fn analyze(g: &Globals, municipalities: &Path, populations: &Path, opts: &AnalysisOptions) -> Result<(), CliError> {
    let census = load_census(municipalities, populations, geometry(g))?;
    let d = distance_matrix(census.municipalities(), geometry(g))?;
    let rel = to_relative(&census);
    let a = pipeline::analyze(&rel, &d, opts)?;
    let ids: Vec<String> = census.municipalities().iter().map(|m| m.id.clone()).collect();
    let files = pipeline::write_analysis(&a, &ids, &g.out_dir)?;

    let params = json!({ "options": opts, "geometry": geometry(g) });
    let mut m = RunManifest::new("analyze", params, None);
    m.add_input(municipalities)?;
    m.add_input(populations)?;
    m.add_outputs(&g.out_dir, &files)?;
    m.notices = a.notices;
    m.write(&g.out_dir)?;
    report_notices(&m.notices);
    Ok(())
}

/// Equirectangular projection about the centroid, km.
fn project(positions: &[Position]) -> Vec<(f64, f64)> {
    let deg = std::f64::consts::PI / 180.0;
    let n = positions.len() as f64;
    let (mut lon0, mut lat0) = (0.0, 0.0);
    for p in positions {
        if let Position::Geographic { lon, lat } = *p {
            lon0 += lon / n;
            lat0 += lat / n;
        }
    }
    positions
        .iter()
        .map(|p| match *p {
            Position::Planar { x_km, y_km } => (x_km, y_km),
            Position::Geographic { lon, lat } => {
                (EARTH_RADIUS_KM * (lon - lon0) * deg * (lat0 * deg).cos(), EARTH_RADIUS_KM * (lat - lat0) * deg)
            }
        })
        .collect()
}

pub fn modes(
    g: &Globals,
    k: usize,
    municipalities: Option<&Path>,
    config: Option<&Path>,
    n: Option<usize>,
    box_km: Option<f64>,
    r0: Option<f64>,
) -> Result<(), CliError> {
    let mut inputs = Vec::new();
    let (ids, positions, r0, seed) = if let Some(path) = municipalities {
        let f = File::open(path).map_err(|e| CliError::io(path, e))?;
        let munis = read_municipalities(f, geometry(g))?;
        inputs.push(path.to_path_buf());
        let pos: Vec<Position> = munis.iter().map(|m| m.position).collect();
        (munis.into_iter().map(|m| m.id).collect::<Vec<_>>(), project(&pos), r0.unwrap_or(74.0), None)
    } else {
        let args = SimArgs {
            config: config.map(Path::to_path_buf),
            n,
            box_km,
            r0,
            ..SimArgs::default()
        };
        let cfg = resolve_config(g, &args)?;
        if let Some(p) = config {
            inputs.push(p.to_path_buf());
        }
        ((0..cfg.n).map(|i| i.to_string()).collect(), cfg.resolve_positions(), cfg.r0, Some(cfg.seed))
    };
    if k == 0 || k > positions.len() {
        return Err(CliError::Invalid(format!("k = {k} modes requested from {} cities", positions.len())));
    }
    let set = CouplingSet::new(positions, r0)?;

    let mut files = Vec::new();
    let p = g.out_dir.join("eigenvalues.csv");
    let mut w = create(&p)?;
    writeln!(w, "mode_index,eigenvalue").map_err(|e| CliError::io(&p, e))?;
    for (i, l) in set.modes.eigenvalues.iter().enumerate() {
        writeln!(w, "{i},{l}").map_err(|e| CliError::io(&p, e))?;
    }
    finish(w, &p)?;
    files.push(p);
    for mode in 0..k {
        let p = g.out_dir.join(format!("mode_{mode}.csv"));
        set.write_modes_csv(&ids, &[mode], create(&p)?)?;
        files.push(p);
    }

    let params = json!({ "k": k, "r0": r0, "n": set.n(), "source": if municipalities.is_some() { "municipalities" } else { "layout" } });
    let mut m = RunManifest::new("modes", params, seed);
    for p in &inputs {
        m.add_input(p)?;
    }
    m.add_outputs(&g.out_dir, &files)?;
    m.write(&g.out_dir)?;
    Ok(())
}

#[derive(Serialize)]
struct Estimate {
    value: f64,
    /// The larger of the two below. Neither is reliable alone: batch
    /// estimates degenerate when block fits sit on a bound.
    stderr: f64,
    /// Curvature error of the fit; treats the binned points as independent.
    fit_stderr: f64,
    /// Spread of the estimates over contiguous time blocks, divided by
    /// √blocks. The honest figure for seed-to-seed comparison.
    batch_stderr: Option<f64>,
}

#[derive(Serialize)]
struct Triple<T> {
    inv_gamma: Option<T>,
    r0: Option<T>,
    c0: Option<T>,
}

impl<T> Default for Triple<T> {
    fn default() -> Self {
        Triple { inv_gamma: None, r0: None, c0: None }
    }
}

#[derive(Serialize)]
struct LoopbackReport {
    configured: Triple<f64>,
    recovered: Triple<Estimate>,
    relative_error: Triple<f64>,
    alpha: f64,
    /// Time blocks that produced a fit, per parameter.
    batches: Triple<usize>,
    /// No variance in the simulated panel, nothing to recover.
    degenerate: bool,
    notices: Vec<String>,
}

fn rel_err(est: &Option<Estimate>, target: Option<f64>) -> Option<f64> {
    match (est, target) {
        (Some(e), Some(t)) => Some(e.value / t - 1.0),
        _ => None,
    }
}

fn fitted(an: &pipeline::Analysis) -> Triple<f64> {
    let get = |f: &Option<popflow::fitting::FitResult>, name: &str| f.as_ref().map(|f| f.param(name));
    Triple {
        inv_gamma: get(&an.exponential_fit, "inv_gamma"),
        r0: get(&an.lorentzian_fit, "r0"),
        c0: get(&an.lorentzian_fit, "c0"),
    }
}

/// Batch-means standard errors from `blocks` contiguous sub-panels.
fn batch_errors(census: &CensusPanel, d: &popflow::ingest::DistanceMatrix, opts: &AnalysisOptions, blocks: usize) -> (Triple<f64>, Triple<usize>) {
    let changes = census.years().len() - 1;
    let len = if blocks == 0 { 0 } else { changes / blocks };
    let mut est: [Vec<f64>; 3] = Default::default();
    if len >= 2 {
        for b in 0..blocks {
            let Ok(sub) = census.slice_years(b * len..b * len + len + 1) else { continue };
            let Ok(an) = pipeline::analyze(&to_relative(&sub), d, opts) else { continue };
            let t = fitted(&an);
            for (k, v) in [t.inv_gamma, t.r0, t.c0].into_iter().enumerate() {
                est[k].extend(v);
            }
        }
    }
    let se = |v: &[f64]| {
        (v.len() >= 2).then(|| {
            let n = v.len() as f64;
            let m = v.iter().sum::<f64>() / n;
            (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0) / n).sqrt()
        })
    };
    (
        Triple { inv_gamma: se(&est[0]), r0: se(&est[1]), c0: se(&est[2]) },
        Triple { inv_gamma: Some(est[0].len()), r0: Some(est[1].len()), c0: Some(est[2].len()) },
    )
}

/// `α` is frozen at 2 unless `--alpha` is given.
pub fn loopback(g: &Globals, a: &SimArgs, opts: &AnalysisOptions, blocks: usize) -> Result<(), CliError> {
    let cfg = resolve_config(g, a)?;
    let opts = AnalysisOptions { alpha: Some(opts.alpha.unwrap_or(2.0)), ..opts.clone() };
    let mut notices = Vec::new();
    let traj = run(&cfg)?;
    let census = simulated_census(&traj)?;
    let rel = to_relative(&census);
    let configured = Triple { inv_gamma: cfg.gamma.uniform_value().map(|g| 1.0 / g), r0: Some(cfg.r0), c0: Some(1.0) };
    let degenerate = rel.xdot.iter().all(|v| *v == 0.0);

    let (recovered, batches, files) = if degenerate {
        notices.push("simulated panel has no variance (V_f = 0?); nothing recovered".into());
        (Triple::default(), Triple::default(), Vec::new())
    } else {
        let d = distance_matrix(census.municipalities(), Geometry::Planar)?;
        let an = pipeline::analyze(&rel, &d, &opts)?;
        let ids: Vec<String> = census.municipalities().iter().map(|m| m.id.clone()).collect();
        let files = pipeline::write_analysis(&an, &ids, &g.out_dir)?;
        notices.extend(an.notices.iter().cloned());
        let (se, batches) = batch_errors(&census, &d, &opts, blocks);
        let pick = |f: &Option<popflow::fitting::FitResult>, name: &str, b: Option<f64>| {
            f.as_ref().map(|f| {
                let fit_stderr = f.stderr_of(name);
                Estimate { value: f.param(name), stderr: b.map_or(fit_stderr, |b| b.max(fit_stderr)), fit_stderr, batch_stderr: b }
            })
        };
        let t = Triple {
            inv_gamma: pick(&an.exponential_fit, "inv_gamma", se.inv_gamma),
            r0: pick(&an.lorentzian_fit, "r0", se.r0),
            c0: pick(&an.lorentzian_fit, "c0", se.c0),
        };
        (t, batches, files)
    };
    let relative_error = Triple {
        inv_gamma: rel_err(&recovered.inv_gamma, configured.inv_gamma),
        r0: rel_err(&recovered.r0, configured.r0),
        c0: rel_err(&recovered.c0, configured.c0),
    };
    let report = LoopbackReport { configured, recovered, relative_error, alpha: opts.alpha.unwrap(), batches, degenerate, notices };
    let p = g.out_dir.join("report.json");
    pipeline::write_json_file(&p, &report)?;

    let mut all = files;
    all.push(p);
    let mut m = RunManifest::new("loopback", json!({ "config": cfg, "options": opts, "blocks": blocks }), Some(cfg.seed));
    m.add_outputs(&g.out_dir, &all)?;
    m.notices = report.notices.clone();
    m.write(&g.out_dir)?;
    report_notices(&m.notices);
    Ok(())
}

fn report_notices(notices: &[String]) {
    for n in notices {
        eprintln!("notice: {n}");
    }
}
