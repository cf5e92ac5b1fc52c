use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_popflow");

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn popflow(out: &Path, args: &[&str]) -> Output {
    Command::new(BIN).arg("--out-dir").arg(out).args(args).output().expect("spawn popflow")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn analyze_fixture(out: &Path, extra: &[&str]) -> Output {
    let m = fixture("five_city_municipalities.csv");
    let p = fixture("five_city_populations.csv");
    let mut args = vec!["--planar", "analyze", "--municipalities", m.to_str().unwrap(), "--populations", p.to_str().unwrap(), "--max-lag", "8"];
    args.extend_from_slice(extra);
    popflow(out, &args)
}

/// The sorted file names and contents of a directory, manifest excluded.
fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn analyze_fixture_produces_everything() {
    let dir = tempfile::tempdir().unwrap();
    let o = analyze_fixture(dir.path(), &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in [
        "variance_scatter.csv",
        "variance_fit.json",
        "pair_correlations.csv",
        "distance_curve.csv",
        "lorentzian_fit.json",
        "lag_curve.csv",
        "exponential_fit.json",
        "rc_histogram.csv",
        "population_correlation.csv",
        "manifest.json",
    ] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    for f in ["variance_fit.json", "lorentzian_fit.json", "exponential_fit.json"] {
        assert_eq!(json(&dir.path().join(f))["converged"], true, "{f}");
    }
    // 5 cities give 10 pairs
    let pairs = fs::read_to_string(dir.path().join("pair_correlations.csv")).unwrap();
    assert_eq!(pairs.lines().count(), 11);

    let m = json(&dir.path().join("manifest.json"));
    assert_eq!(m["command"], "analyze");
    assert_eq!(m["inputs"].as_array().unwrap().len(), 2);
    assert_eq!(m["outputs"].as_array().unwrap().len(), 9);
}

#[test]
fn fixture_recovers_the_damping_scale_roughly() {
    // generated with γ = 0.0588 over 100 years: a loose sanity bound only
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&analyze_fixture(dir.path(), &["--alpha", "2"])), 0);
    let fit = json(&dir.path().join("exponential_fit.json"));
    let inv = fit["params"]["inv_gamma"].as_f64().unwrap();
    assert!(inv > 3.0 && inv < 100.0, "1/γ = {inv}");
    assert_eq!(json(&dir.path().join("lorentzian_fit.json"))["params"]["alpha"], 2.0);
}

#[test]
fn analyze_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(code(&analyze_fixture(a.path(), &[])), 0);
    assert_eq!(code(&analyze_fixture(b.path(), &[])), 0);
    assert_eq!(snapshot(a.path()), snapshot(b.path()));
}

#[test]
fn threshold_excluding_everything_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = analyze_fixture(dir.path(), &["--min-x", "0.99"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("no pairs retained"), "{}", stderr(&o));
}

#[test]
fn unreadable_input_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let m = fixture("five_city_municipalities.csv");
    let o = popflow(
        dir.path(),
        &["--planar", "analyze", "--municipalities", m.to_str().unwrap(), "--populations", "/nonexistent/pop.csv"],
    );
    assert_eq!(code(&o), 1);
}

#[test]
fn wrong_geometry_header_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let m = fixture("five_city_municipalities.csv");
    let p = fixture("five_city_populations.csv");
    // no --planar: lon,lat expected
    let o = popflow(dir.path(), &["analyze", "--municipalities", m.to_str().unwrap(), "--populations", p.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&popflow(dir.path(), &["simulate", "--scheme", "leapfrog"])), 2);
    assert_eq!(code(&popflow(dir.path(), &["frobnicate"])), 2);
}

#[test]
fn baseline_flags_run() {
    let dir = tempfile::tempdir().unwrap();
    let o = popflow(
        dir.path(),
        &[
            "--seed", "7", "simulate", "--n", "100", "--L", "250", "--vf", "1e-5", "--gamma", "0.0588", "--r0", "74", "--x0", "1",
            "--xm", "1e4", "--dt", "1",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["config.json", "trajectory.csv", "equilibrium.json", "municipalities.csv", "populations.csv", "manifest.json"] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    let eq = json(&dir.path().join("equilibrium.json"));
    assert!((eq["expected_v2"].as_f64().unwrap() / 8.503e-5 - 1.0).abs() < 1e-3);
    let cfg = json(&dir.path().join("config.json"));
    assert_eq!(cfg["seed"], 7);
    assert_eq!(cfg["n"], 100);
}

#[test]
fn burn_in_beyond_steps_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = popflow(dir.path(), &["--seed", "1", "simulate", "--steps", "10", "--burn-in", "20"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("burn-in"));
}

#[test]
fn normal_mode_with_heterogeneous_gamma_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: Value = json(&fixture("five_city_config.json"));
    cfg["gamma"] = serde_json::json!([0.05, 0.06, 0.07, 0.08, 0.09]);
    cfg["scheme"] = "normal_mode".into();
    let path = dir.path().join("cfg.json");
    fs::write(&path, cfg.to_string()).unwrap();
    let o = popflow(&dir.path().join("out"), &["simulate", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    cfg["scheme"] = "direct".into();
    fs::write(&path, cfg.to_string()).unwrap();
    assert_eq!(code(&popflow(&dir.path().join("out"), &["simulate", "--config", path.to_str().unwrap()])), 0);
}

#[test]
fn unknown_config_field_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: Value = json(&fixture("five_city_config.json"));
    cfg["gama"] = 0.1.into();
    let path = dir.path().join("cfg.json");
    fs::write(&path, cfg.to_string()).unwrap();
    assert_eq!(code(&popflow(dir.path(), &["simulate", "--config", path.to_str().unwrap()])), 2);
}

fn small_sim(out: &Path, seed: &str) -> Output {
    popflow(out, &["--seed", seed, "simulate", "--n", "12", "--steps", "300", "--burn-in", "50"])
}

#[test]
fn same_seed_same_digests() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for (d, s) in [(&a, "3"), (&b, "3"), (&c, "4")] {
        assert_eq!(code(&small_sim(d.path(), s)), 0);
    }
    let outputs = |d: &Path| json(&d.join("manifest.json"))["outputs"].clone();
    assert_eq!(outputs(a.path()), outputs(b.path()));
    assert_ne!(outputs(a.path()), outputs(c.path()));
    assert_eq!(snapshot(a.path()), snapshot(b.path()));
}

#[test]
fn replay_reproduces_and_detects_tampering() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(code(&small_sim(a.path(), "11")), 0);
    let manifest = a.path().join("manifest.json");
    let o = popflow(b.path(), &["simulate", "--replay", manifest.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(snapshot(a.path()), snapshot(b.path()));

    let mut m = json(&manifest);
    m["outputs"][1]["sha256"] = "0".repeat(64).into();
    let tampered = a.path().join("tampered.json");
    fs::write(&tampered, m.to_string()).unwrap();
    let c = tempfile::tempdir().unwrap();
    let o = popflow(c.path(), &["simulate", "--replay", tampered.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("trajectory.csv"), "{}", stderr(&o));
}

#[test]
fn config_file_replays_its_own_run() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = fixture("five_city_config.json");
    assert_eq!(code(&popflow(a.path(), &["simulate", "--config", cfg.to_str().unwrap()])), 0);
    let written = a.path().join("config.json");
    assert_eq!(code(&popflow(b.path(), &["simulate", "--config", written.to_str().unwrap()])), 0);
    assert_eq!(snapshot(a.path()), snapshot(b.path()));
    // the fixture panel is exactly this run's export
    assert_eq!(fs::read(a.path().join("populations.csv")).unwrap(), fs::read(fixture("five_city_populations.csv")).unwrap());
}

#[test]
fn missing_seed_is_generated_and_printed() {
    let dir = tempfile::tempdir().unwrap();
    let o = popflow(dir.path(), &["simulate", "--n", "3", "--steps", "20", "--burn-in", "0"]);
    assert_eq!(code(&o), 0);
    let err = stderr(&o);
    let line = err.lines().find(|l| l.starts_with("seed: ")).expect("seed printed");
    let seed: u64 = line["seed: ".len()..].parse().unwrap();
    assert_eq!(json(&dir.path().join("manifest.json"))["seed"], seed);
}

#[test]
fn coarse_records_skip_the_panel_export() {
    let dir = tempfile::tempdir().unwrap();
    let o = popflow(dir.path(), &["--seed", "1", "simulate", "--n", "4", "--steps", "100", "--burn-in", "0", "--dt", "0.5"]);
    assert_eq!(code(&o), 0);
    assert!(!dir.path().join("populations.csv").exists());
    let m = json(&dir.path().join("manifest.json"));
    assert!(m["notices"][0].as_str().unwrap().contains("panel export skipped"));
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path).unwrap().lines().skip(1).map(|l| l.split(',').map(str::to_owned).collect()).collect()
}

#[test]
fn four_modes_of_the_baseline_layout() {
    let dir = tempfile::tempdir().unwrap();
    let o = popflow(dir.path(), &["--seed", "10", "modes", "--k", "4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for m in 0..4 {
        let rows = read_csv(&dir.path().join(format!("mode_{m}.csv")));
        assert_eq!(rows.len(), 100);
        assert!(rows.iter().all(|r| r[3] == m.to_string()));
    }
    assert!(!dir.path().join("mode_4.csv").exists());
    let ev: Vec<f64> = read_csv(&dir.path().join("eigenvalues.csv")).iter().map(|r| r[1].parse().unwrap()).collect();
    assert_eq!(ev.len(), 100);
    assert!(ev.windows(2).all(|w| w[0] >= w[1]));
    // trace of Q is n
    assert!((ev.iter().sum::<f64>() - 100.0).abs() < 1e-8);
}

fn kernel(r: f64, r0: f64) -> f64 {
    2.0 * (2.0 / (std::f64::consts::PI * r0 * r0)).powf(0.25) / (1.0 + 4.0 * (r / r0).powi(2))
}

#[test]
fn all_modes_reconstruct_q() {
    let dir = tempfile::tempdir().unwrap();
    let n = 9;
    let o = popflow(dir.path(), &["--seed", "2", "modes", "--k", "9", "--n", "9", "--L", "120", "--r0", "30"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ev: Vec<f64> = read_csv(&dir.path().join("eigenvalues.csv")).iter().map(|r| r[1].parse().unwrap()).collect();
    let mut vecs = vec![vec![0.0; n]; n];
    let mut pos = vec![(0.0, 0.0); n];
    for m in 0..n {
        for row in read_csv(&dir.path().join(format!("mode_{m}.csv"))) {
            let c: usize = row[0].parse().unwrap();
            vecs[m][c] = row[4].parse().unwrap();
            pos[c] = (row[1].parse().unwrap(), row[2].parse().unwrap());
        }
    }
    // independent Q from the positions
    let r: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| kernel(((pos[i].0 - pos[j].0) as f64).hypot(pos[i].1 - pos[j].1), 30.0)).collect())
        .collect();
    let rr = |i: usize, j: usize| (0..n).map(|k| r[i][k] * r[j][k]).sum::<f64>();
    for i in 0..n {
        for j in 0..n {
            let q = rr(i, j) / (rr(i, i) * rr(j, j)).sqrt();
            let rec: f64 = (0..n).map(|m| ev[m] * vecs[m][i] * vecs[m][j]).sum();
            assert!((q - rec).abs() < 1e-8, "Q[{i},{j}] {q} vs {rec}");
        }
    }
}

#[test]
fn coincident_points_give_a_uniform_leading_mode() {
    let dir = tempfile::tempdir().unwrap();
    let munis = dir.path().join("m.csv");
    fs::write(&munis, "id,name,x_km,y_km\na,A,5,5\nb,B,5,5\nc,C,5,5\nd,D,5,5\n").unwrap();
    let out = dir.path().join("out");
    let o = popflow(&out, &["--planar", "modes", "--k", "1", "--municipalities", munis.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let comps: Vec<f64> = read_csv(&out.join("mode_0.csv")).iter().map(|r| r[4].parse().unwrap()).collect();
    assert_eq!(comps.len(), 4);
    assert!(comps.iter().all(|&c| (c - 0.5).abs() < 1e-12), "{comps:?}");
    let ev: Vec<f64> = read_csv(&out.join("eigenvalues.csv")).iter().map(|r| r[1].parse().unwrap()).collect();
    assert!((ev[0] - 4.0).abs() < 1e-12);
}

#[test]
fn geographic_positions_are_projected() {
    let dir = tempfile::tempdir().unwrap();
    let munis = dir.path().join("m.csv");
    // one degree of latitude apart at the equator ≈ 111.19 km
    fs::write(&munis, "id,name,lon,lat\nn,North,0,0.5\ns,South,0,-0.5\n").unwrap();
    let out = dir.path().join("out");
    assert_eq!(code(&popflow(&out, &["modes", "--k", "2", "--municipalities", munis.to_str().unwrap()])), 0);
    let rows = read_csv(&out.join("mode_0.csv"));
    let dy = rows[0][2].parse::<f64>().unwrap() - rows[1][2].parse::<f64>().unwrap();
    assert!((dy - 6371.0 * std::f64::consts::PI / 180.0).abs() < 1e-9, "{dy}");
}

#[test]
fn more_modes_than_cities_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = popflow(dir.path(), &["--seed", "1", "modes", "--k", "6", "--n", "5"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn loopback_flags_zero_force_variance() {
    let dir = tempfile::tempdir().unwrap();
    let o = popflow(dir.path(), &["--seed", "1", "loopback", "--n", "20", "--vf", "0", "--steps", "200"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = json(&dir.path().join("report.json"));
    assert_eq!(r["degenerate"], true);
    assert!(r["recovered"]["r0"].is_null());
}

#[test]
fn loopback_reports_configured_and_recovered() {
    let dir = tempfile::tempdir().unwrap();
    let o = popflow(dir.path(), &["--seed", "3", "loopback"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = json(&dir.path().join("report.json"));
    assert_eq!(r["degenerate"], false);
    assert_eq!(r["configured"]["r0"], 74.0);
    assert!((r["configured"]["inv_gamma"].as_f64().unwrap() - 17.0).abs() < 1e-12);
    let inv = r["recovered"]["inv_gamma"]["value"].as_f64().unwrap();
    let rel = r["relative_error"]["inv_gamma"].as_f64().unwrap();
    assert!((rel - (inv / 17.0 - 1.0)).abs() < 1e-12);
    assert_eq!(r["alpha"], 2.0);
    assert!(dir.path().join("lag_curve.csv").is_file());
}

/// Baseline layout from `modes`, written into a config so that only the
/// dynamics change with the seed.
fn fixed_layout_config(dir: &Path) -> PathBuf {
    let m = dir.join("layout");
    assert_eq!(code(&popflow(&m, &["--seed", "10", "modes", "--k", "1"])), 0);
    let positions: Vec<(f64, f64)> =
        read_csv(&m.join("mode_0.csv")).iter().map(|r| (r[1].parse().unwrap(), r[2].parse().unwrap())).collect();
    let cfg = serde_json::json!({
        "n": 100, "box_km": 250.0, "positions": positions, "vf": 1e-5, "gamma": 1.0 / 17.0, "r0": 74.0,
        "x0": 1.0, "xm": 1e4, "dt": 1.0, "steps": 3000, "burn_in": 0, "seed": 0
    });
    let path = dir.join("layout.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn loopback_seeds_agree_within_stated_uncertainties() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixed_layout_config(tmp.path());
    let est = |seed: &str| {
        let out = tmp.path().join(seed);
        let o = popflow(&out, &["--seed", seed, "loopback", "--config", cfg.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        json(&out.join("report.json"))["recovered"].clone()
    };
    let (a, b) = (est("21"), est("22"));
    for k in ["inv_gamma", "r0", "c0"] {
        let (va, vb) = (a[k]["value"].as_f64().unwrap(), b[k]["value"].as_f64().unwrap());
        let (sa, sb) = (a[k]["stderr"].as_f64().unwrap(), b[k]["stderr"].as_f64().unwrap());
        let diff = (va - vb).abs();
        assert!(diff == 0.0 || diff < 3.0 * sa.hypot(sb), "{k}: {va} ± {sa} vs {vb} ± {sb}");
    }
}
