//! Langevin city-growth simulator.
//!
//! Each city carries a log-population `u = ln X` and a growth rate `v`:
//!
//! ```text
//! v ← v + (F − γ v) δt
//! u ← u + v δt
//! ```
//!
//! with white-noise forces `F = M f`, `f ~ N(0, V_f/δt)` i.i.d. per step and
//! `M` the (row-normalized) Lorentzian coupling, and reflecting walls at
//! `ln X0` and `ln XM`. The same dynamics can be integrated in the
//! eigenbasis of `M·Mᵀ`, where the modes decouple for a uniform `γ`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::coupling::{eigendecompose, raw_q, CouplingSet, Modes};
use crate::error::{Error, Result};
use crate::ingest::{to_relative, CensusPanel, Municipality, Position, RelativePanel};
use crate::stats::{ks_normal, ks_uniform, KsResult};

const POSITION_STREAM: u64 = u64::MAX;
const INITIAL_STREAM: u64 = u64::MAX - 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Gamma {
    Uniform(f64),
    PerCity(Vec<f64>),
}

impl Gamma {
    pub fn expand(&self, n: usize) -> Vec<f64> {
        match self {
            Gamma::Uniform(g) => vec![*g; n],
            Gamma::PerCity(v) => v.clone(),
        }
    }

    pub fn uniform_value(&self) -> Option<f64> {
        match self {
            Gamma::Uniform(g) => Some(*g),
            Gamma::PerCity(v) => v.iter().all(|g| *g == v[0]).then(|| v[0]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    Direct,
    NormalMode,
}

fn default_stride() -> u64 {
    1
}

fn default_true() -> bool {
    true
}

/// Simulation parameters in km, years and people.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n: usize,
    /// Side of the square in which positions are drawn.
    pub box_km: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positions: Option<Vec<(f64, f64)>>,
    /// Force variance `V_f`, yr⁻².
    pub vf: f64,
    pub gamma: Gamma,
    pub r0: f64,
    pub x0: f64,
    pub xm: f64,
    /// Finite-size noise variance, off by default.
    #[serde(default)]
    pub vw: f64,
    pub dt: f64,
    pub steps: u64,
    pub burn_in: u64,
    #[serde(default = "default_stride")]
    pub stride: u64,
    pub seed: u64,
    #[serde(default)]
    pub scheme: Scheme,
    /// Rescale force rows so that `cor[F_i, F_j] = Q_ij`.
    #[serde(default = "default_true")]
    pub normalize_forces: bool,
    /// Initial `u`; uniform on `[ln X0, ln XM]` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u0: Option<Vec<f64>>,
    /// Initial `v`; zero when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v0: Option<Vec<f64>>,
}

impl SimConfig {
    /// n=100 cities in a 250 km box, V_f=1e−5, γ=1/17, r0=74 km,
    /// X ∈ [1, 10⁴], δt=1.
    pub fn baseline(seed: u64) -> SimConfig {
        SimConfig {
            n: 100,
            box_km: 250.0,
            positions: None,
            vf: 1e-5,
            gamma: Gamma::Uniform(1.0 / 17.0),
            r0: 74.0,
            x0: 1.0,
            xm: 1e4,
            vw: 0.0,
            dt: 1.0,
            steps: 3000,
            burn_in: 0,
            stride: 1,
            seed,
            scheme: Scheme::Direct,
            normalize_forces: true,
            u0: None,
            v0: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n == 0 {
            return bad("n must be at least 1".into());
        }
        if !(self.box_km > 0.0 && self.box_km.is_finite()) {
            return bad(format!("box side {} must be positive", self.box_km));
        }
        if let Some(p) = &self.positions {
            if p.len() != self.n {
                return bad(format!("{} positions for n = {}", p.len(), self.n));
            }
            if p.iter().any(|q| !q.0.is_finite() || !q.1.is_finite()) {
                return bad("non-finite position".into());
            }
        }
        if !(self.vf >= 0.0 && self.vf.is_finite()) {
            return bad(format!("force variance {} must be non-negative", self.vf));
        }
        if !(self.vw >= 0.0 && self.vw.is_finite()) {
            return bad(format!("finite-size variance {} must be non-negative", self.vw));
        }
        let gamma = self.gamma.expand(self.n);
        if gamma.len() != self.n {
            return bad(format!("{} damping rates for n = {}", gamma.len(), self.n));
        }
        if let Some(g) = gamma.iter().find(|g| !(**g > 0.0 && g.is_finite())) {
            return bad(format!("damping rate {g} must be positive"));
        }
        if !(self.r0 > 0.0 && self.r0.is_finite()) {
            return bad(format!("r0 {} must be positive", self.r0));
        }
        if !(self.x0 > 0.0 && self.x0 < self.xm && self.xm.is_finite()) {
            return bad(format!("population bounds need 0 < X0 < XM, got {} and {}", self.x0, self.xm));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("time step {} must be positive", self.dt));
        }
        if self.burn_in >= self.steps {
            return bad(format!("burn-in {} must be below the step count {}", self.burn_in, self.steps));
        }
        if self.stride == 0 {
            return bad("stride must be at least 1".into());
        }
        if self.scheme == Scheme::NormalMode && self.gamma.uniform_value().is_none() {
            return bad("the normal-mode scheme requires a uniform damping rate".into());
        }
        let (lo, hi) = (self.x0.ln(), self.xm.ln());
        if let Some(u) = &self.u0 {
            if u.len() != self.n || u.iter().any(|v| !(*v >= lo && *v <= hi)) {
                return bad("initial u must have n entries within [ln X0, ln XM]".into());
            }
        }
        if let Some(v) = &self.v0 {
            if v.len() != self.n || v.iter().any(|x| !x.is_finite()) {
                return bad("initial v must have n finite entries".into());
            }
        }
        Ok(())
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.x0.ln(), self.xm.ln())
    }

    /// `β = 2γ/V_f` for a uniform γ.
    pub fn beta(&self) -> Option<f64> {
        self.gamma.uniform_value().map(|g| 2.0 * g / self.vf)
    }

    /// Explicit positions, or `n` points uniform in the box from the seed.
    pub fn resolve_positions(&self) -> Vec<(f64, f64)> {
        if let Some(p) = &self.positions {
            return p.clone();
        }
        let mut rng = stream(self.seed, POSITION_STREAM);
        (0..self.n)
            .map(|_| (rng.gen_range(0.0..self.box_km), rng.gen_range(0.0..self.box_km)))
            .collect()
    }

    pub fn n_records(&self) -> usize {
        (self.steps - self.burn_in).div_ceil(self.stride) as usize
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("SimConfig serializes")
    }

    pub fn from_json(text: &str) -> Result<SimConfig> {
        let cfg: SimConfig = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Independent ChaCha stream `index` under `seed`.
pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng.set_word_pos(0);
    rng
}

/// Fills `out` with i.i.d. `N(0, V_f/δt)` samples.
pub fn generate_forces<R: Rng>(rng: &mut R, vf: f64, dt: f64, out: &mut [f64]) {
    let scale = (vf / dt).sqrt();
    for f in out.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *f = scale * z;
    }
}

/// Reflects `u` into `[lo, hi]`, reversing `v` on each bounce.
pub fn apply_bounds(u: &mut f64, v: &mut f64, lo: f64, hi: f64) -> std::result::Result<(), String> {
    if *u > hi {
        *u = 2.0 * hi - *u;
        *v = -*v;
    } else if *u < lo {
        *u = 2.0 * lo - *u;
        *v = -*v;
    }
    if *u < lo || *u > hi {
        return Err(format!("overshoot wider than the domain (u = {u}); reduce the time step"));
    }
    Ok(())
}

/// Positions and velocities of all cities.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

/// One step of `v ← v + (F − γv)δt; u ← u + vδt` without bounds.
pub fn step_direct(state: &mut State, force: &[f64], gamma: &[f64], dt: f64) {
    for i in 0..state.u.len() {
        state.v[i] += (force[i] - gamma[i] * state.v[i]) * dt;
        state.u[i] += state.v[i] * dt;
    }
}

/// One step of the decoupled mode equations
/// `v'_i ← v'_i + (√ε_i f'_i − γ v'_i)δt; u'_i ← u'_i + v'_i δt`.
pub fn step_modes(state: &mut State, f: &[f64], eigenvalues: &[f64], gamma: f64, dt: f64) {
    for i in 0..state.u.len() {
        let scale = eigenvalues[i].max(0.0).sqrt();
        state.v[i] += (scale * f[i] - gamma * state.v[i]) * dt;
        state.u[i] += state.v[i] * dt;
    }
}

/// Recorded `u` and `v`, one column per record.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// Step index (1-based) of each record.
    pub steps: Vec<u64>,
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub dt: f64,
    pub stride: u64,
    pub positions: Vec<(f64, f64)>,
}

impl Trajectory {
    pub fn n_cities(&self) -> usize {
        self.u.nrows()
    }

    pub fn n_records(&self) -> usize {
        self.u.ncols()
    }

    /// Time between records in years.
    pub fn record_interval(&self) -> f64 {
        self.dt * self.stride as f64
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let io = |e: std::io::Error| Error::Io { path: "<trajectory>".into(), source: e };
        let mut w = std::io::BufWriter::new(w);
        writeln!(w, "step,city_id,u,v").map_err(io)?;
        for (k, step) in self.steps.iter().enumerate() {
            for i in 0..self.n_cities() {
                writeln!(w, "{step},{i},{},{}", self.u[(i, k)], self.v[(i, k)]).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }
}

fn initial_state(cfg: &SimConfig) -> State {
    let (lo, hi) = cfg.bounds();
    let u = cfg.u0.clone().unwrap_or_else(|| {
        let mut rng = stream(cfg.seed, INITIAL_STREAM);
        (0..cfg.n).map(|_| rng.gen_range(lo..=hi)).collect()
    });
    let v = cfg.v0.clone().unwrap_or_else(|| vec![0.0; cfg.n]);
    State { u, v }
}

/// Adds `√X·w` to `X = e^u`, `w ~ N(0, V_w δt)`, in place.
fn finite_size_kick<R: Rng>(rng: &mut R, u: &mut [f64], vw: f64, dt: f64, lo: f64) {
    let scale = (vw * dt).sqrt();
    for ui in u.iter_mut() {
        let x = ui.exp();
        let z: f64 = rng.sample(StandardNormal);
        let kicked = (x + x.sqrt() * scale * z).abs();
        *ui = kicked.ln().max(lo);
    }
}

/// Integrates the configured system and records after burn-in.
///
/// Step `s` (1-based) draws its forces from ChaCha stream `s` of the seed,
/// so a run is reproducible regardless of how it is chunked.
pub fn run(cfg: &SimConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let positions = cfg.resolve_positions();
    let set = CouplingSet::new(positions.clone(), cfg.r0)?;
    let m = set.force_matrix(cfg.normalize_forces);
    let gamma = cfg.gamma.expand(cfg.n);
    let (lo, hi) = cfg.bounds();
    let n = cfg.n;

    let records = cfg.n_records();
    let mut traj = Trajectory {
        steps: Vec::with_capacity(records),
        u: DMatrix::zeros(n, records),
        v: DMatrix::zeros(n, records),
        dt: cfg.dt,
        stride: cfg.stride,
        positions,
    };

    let mut state = initial_state(cfg);
    let mut f = vec![0.0; n];
    let mut force = DVector::zeros(n);

    let modes: Option<Modes> = (cfg.scheme == Scheme::NormalMode).then(|| {
        if cfg.normalize_forces {
            set.modes.clone()
        } else {
            eigendecompose(&raw_q(&set.r))
        }
    });
    let to_modes = |a: &DMatrix<f64>, x: &[f64]| -> Vec<f64> { (a * DVector::from_column_slice(x)).as_slice().to_vec() };
    let from_modes = |a: &DMatrix<f64>, x: &[f64]| -> Vec<f64> { (a.tr_mul(&DVector::from_column_slice(x))).as_slice().to_vec() };
    let mut mode_state = modes.as_ref().map(|md| State { u: to_modes(&md.a, &state.u), v: to_modes(&md.a, &state.v) });
    let eigenvalues: Vec<f64> = modes.as_ref().map(|md| md.eigenvalues.as_slice().to_vec()).unwrap_or_default();

    for s in 1..=cfg.steps {
        let mut rng = stream(cfg.seed, s);
        generate_forces(&mut rng, cfg.vf, cfg.dt, &mut f);
        let diverged = |reason: String| Error::Diverged { step: s as usize, reason };

        match (&modes, &mut mode_state) {
            (Some(md), Some(ms)) => {
                step_modes(ms, &f, &eigenvalues, gamma[0], cfg.dt);
                state.u = from_modes(&md.a, &ms.u);
                let outside = state.u.iter().any(|&u| u < lo || u > hi);
                if outside || cfg.vw > 0.0 {
                    state.v = from_modes(&md.a, &ms.v);
                    for i in 0..n {
                        apply_bounds(&mut state.u[i], &mut state.v[i], lo, hi).map_err(diverged)?;
                    }
                    if cfg.vw > 0.0 {
                        finite_size_kick(&mut rng, &mut state.u, cfg.vw, cfg.dt, lo);
                    }
                    ms.u = to_modes(&md.a, &state.u);
                    ms.v = to_modes(&md.a, &state.v);
                }
            }
            _ => {
                force.gemv(1.0, &m, &DVector::from_column_slice(&f), 0.0);
                step_direct(&mut state, force.as_slice(), &gamma, cfg.dt);
                for i in 0..n {
                    apply_bounds(&mut state.u[i], &mut state.v[i], lo, hi).map_err(diverged)?;
                }
                if cfg.vw > 0.0 {
                    finite_size_kick(&mut rng, &mut state.u, cfg.vw, cfg.dt, lo);
                }
            }
        }

        if s > cfg.burn_in && (s - cfg.burn_in - 1) % cfg.stride == 0 {
            if let (Some(md), Some(ms)) = (&modes, &mode_state) {
                state.v = from_modes(&md.a, &ms.v);
            }
            if state.u.iter().chain(&state.v).any(|x| !x.is_finite()) {
                return Err(Error::Diverged { step: s as usize, reason: "non-finite state".into() });
            }
            let k = traj.steps.len();
            traj.u.column_mut(k).copy_from_slice(&state.u);
            traj.v.column_mut(k).copy_from_slice(&state.v);
            traj.steps.push(s);
        }
    }
    Ok(traj)
}

#[derive(Debug, Clone, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    /// Normalized to unit integral.
    pub density: Vec<f64>,
}

impl Histogram {
    pub fn new(samples: &[f64], lo: f64, hi: f64, bins: usize) -> Histogram {
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0usize; bins];
        let mut total = 0usize;
        for &x in samples {
            if x >= lo && x <= hi {
                let k = (((x - lo) / width) as usize).min(bins - 1);
                counts[k] += 1;
                total += 1;
            }
        }
        let edges = (0..=bins).map(|k| lo + k as f64 * width).collect();
        let density = counts
            .iter()
            .map(|&c| if total == 0 { 0.0 } else { c as f64 / (total as f64 * width) })
            .collect();
        Histogram { edges, density }
    }
}

/// Equilibrium observables of a run.
#[derive(Debug, Clone, Serialize)]
pub struct EquilibriumStats {
    /// `⟨v²⟩` over all cities and records.
    pub mean_v2: f64,
    /// `V_f/2γ` for a uniform γ.
    pub expected_v2: Option<f64>,
    pub beta: Option<f64>,
    pub n_samples: usize,
    pub u_hist: Histogram,
    pub udot_hist: Option<Histogram>,
    /// `u` against uniform on `[ln X0, ln XM]`.
    pub ks_u: KsResult,
    /// `u̇` against `N(0, 1/β)`.
    pub ks_udot: Option<KsResult>,
}

/// Subsampled `(u, u̇)` pairs: one city per draw, cycling through cities,
/// with `gap` records between draws.
pub fn decorrelated_samples(traj: &Trajectory, gap: usize) -> (Vec<f64>, Vec<f64>) {
    let gap = gap.max(1);
    let n = traj.n_cities();
    let (mut us, mut vs) = (Vec::new(), Vec::new());
    for (draw, k) in (0..traj.n_records()).step_by(gap).enumerate() {
        let i = draw % n;
        us.push(traj.u[(i, k)]);
        vs.push(traj.v[(i, k)]);
    }
    (us, vs)
}

/// Records spanning five velocity relaxation times of the slowest city.
pub fn decorrelation_gap(traj: &Trajectory, cfg: &SimConfig) -> usize {
    let g_min = cfg.gamma.expand(cfg.n).into_iter().fold(f64::INFINITY, f64::min);
    (5.0 / (g_min * traj.record_interval())).ceil() as usize
}

pub fn equilibrium_stats(traj: &Trajectory, cfg: &SimConfig) -> Result<EquilibriumStats> {
    if traj.n_records() == 0 {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    let mean_v2 = traj.v.iter().map(|v| v * v).sum::<f64>() / traj.v.len() as f64;
    let g = cfg.gamma.uniform_value();
    let expected_v2 = g.map(|g| cfg.vf / (2.0 * g));
    let beta = cfg.beta().filter(|b| b.is_finite());
    let (lo, hi) = cfg.bounds();
    let (us, vs) = decorrelated_samples(traj, decorrelation_gap(traj, cfg));
    let (udot_hist, ks_udot) = match beta {
        Some(b) => {
            let sd = (1.0 / b).sqrt();
            (Some(Histogram::new(&vs, -5.0 * sd, 5.0 * sd, 50)), Some(ks_normal(&vs, 0.0, 1.0 / b)))
        }
        None => (None, None),
    };
    Ok(EquilibriumStats {
        mean_v2,
        expected_v2,
        beta,
        n_samples: us.len(),
        u_hist: Histogram::new(&us, lo, hi, 50),
        udot_hist,
        ks_u: ks_uniform(&us, lo, hi),
        ks_udot,
    })
}

/// Pooled velocity autocorrelation at `lag` records:
/// `Σ_i Σ_t v_i(t)v_i(t+lag) / Σ_i Σ_t v_i(t)²`.
pub fn velocity_autocorrelation(traj: &Trajectory, lag: usize) -> f64 {
    let r = traj.n_records();
    if lag >= r {
        return f64::NAN;
    }
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..traj.n_cities() {
        for t in 0..r - lag {
            num += traj.v[(i, t)] * traj.v[(i, t + lag)];
            den += traj.v[(i, t)] * traj.v[(i, t)];
        }
    }
    num / den
}

/// Populations `X = e^u` as an annual census with years `0, 1, …`.
pub fn simulated_census(traj: &Trajectory) -> Result<CensusPanel> {
    if (traj.record_interval() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "records are {} yr apart; an annual panel needs dt·stride = 1",
            traj.record_interval()
        )));
    }
    if traj.n_records() < 2 {
        return Err(Error::InvalidArgument("need at least 2 records".into()));
    }
    let municipalities = traj
        .positions
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| Municipality { id: i.to_string(), name: format!("city {i}"), position: Position::Planar { x_km: x, y_km: y } })
        .collect();
    let years = (0..traj.n_records() as i32).collect();
    CensusPanel::new(years, municipalities, traj.u.map(f64::exp))
}

pub fn simulated_panel(traj: &Trajectory) -> Result<RelativePanel> {
    Ok(to_relative(&simulated_census(traj)?))
}

/// Generator for a panel obeying `V[ẋ]/x = σ²x + σ_½²`.
#[derive(Debug, Clone, Copy)]
pub struct VarianceLawGenerator {
    pub n: usize,
    pub years: usize,
    pub sigma: f64,
    pub sigma_half: f64,
    /// Shares are log-uniform on `[x_min, x_max]` initially.
    pub x_min: f64,
    pub x_max: f64,
    pub seed: u64,
}

/// Annual shares `x(t+1) = x(t)(1 + v) + √x(t)·w` with i.i.d.
/// `v ~ N(0, σ²)`, `w ~ N(0, σ_½²)`, reflected at zero. Shares are not
/// renormalized, so the law holds without a common-mode correction.
pub fn variance_law_panel(g: &VarianceLawGenerator) -> Result<RelativePanel> {
    if g.n == 0 || g.years < 2 || !(g.x_min > 0.0 && g.x_min < g.x_max) || g.sigma < 0.0 || g.sigma_half < 0.0 {
        return Err(Error::InvalidArgument(format!("invalid generator {g:?}")));
    }
    let mut rng = stream(g.seed, 0);
    let (llo, lhi) = (g.x_min.ln(), g.x_max.ln());
    let mut x = DMatrix::zeros(g.n, g.years + 1);
    for i in 0..g.n {
        x[(i, 0)] = rng.gen_range(llo..lhi).exp();
    }
    for t in 0..g.years {
        for i in 0..g.n {
            let xi: f64 = x[(i, t)];
            let (zv, zw): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
            x[(i, t + 1)] = (xi * (1.0 + g.sigma * zv) + xi.sqrt() * g.sigma_half * zw).abs();
        }
    }
    let xdot = DMatrix::from_fn(g.n, g.years, |i, t| x[(i, t + 1)] - x[(i, t)]);
    Ok(RelativePanel {
        ids: (0..g.n).map(|i| i.to_string()).collect(),
        years: (0..=g.years as i32).collect(),
        x,
        xdot,
    })
}
