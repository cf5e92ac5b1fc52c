//! Census panel ingestion, normalization to relative populations and
//! pairwise distances.
//!
//! Two CSV files describe a panel. The municipality file carries one row
//! per municipality (`id,name,lon,lat` in degrees, or `id,name,x_km,y_km`
//! for planar layouts) and the population file is long format
//! (`id,year,population`).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius used for great-circle distances.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    /// Longitude and latitude in degrees.
    Geographic { lon: f64, lat: f64 },
    /// Cartesian coordinates in km.
    Planar { x_km: f64, y_km: f64 },
}

impl Position {
    pub fn planar(x_km: f64, y_km: f64) -> Self {
        Position::Planar { x_km, y_km }
    }

    pub fn geographic(lon: f64, lat: f64) -> Self {
        Position::Geographic { lon, lat }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Position::Geographic { lon, lat } => {
                if !lon.is_finite() || !(-180.0..=180.0).contains(&lon) {
                    return Err(Error::InvalidPosition(format!("longitude {lon} out of range")));
                }
                if !lat.is_finite() || !(-90.0..=90.0).contains(&lat) {
                    return Err(Error::InvalidPosition(format!("latitude {lat} out of range")));
                }
            }
            Position::Planar { x_km, y_km } => {
                if !x_km.is_finite() || !y_km.is_finite() {
                    return Err(Error::InvalidPosition("non-finite planar coordinate".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geometry {
    Planar,
    Spherical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Municipality {
    pub id: String,
    pub name: String,
    pub position: Position,
}

/// Absolute populations `X_i(t)` for consecutive years.
#[derive(Debug, Clone)]
pub struct CensusPanel {
    years: Vec<i32>,
    municipalities: Vec<Municipality>,
    /// n × (T+1), one column per year.
    populations: DMatrix<f64>,
}

impl CensusPanel {
    pub fn new(
        years: Vec<i32>,
        municipalities: Vec<Municipality>,
        populations: DMatrix<f64>,
    ) -> Result<Self> {
        if years.is_empty() {
            return Err(Error::InvalidPanel("no years".into()));
        }
        check_contiguous(&years)?;
        if municipalities.is_empty() {
            return Err(Error::InvalidPanel("no municipalities".into()));
        }
        let mut seen = HashSet::new();
        for m in &municipalities {
            if !seen.insert(m.id.as_str()) {
                return Err(Error::InvalidPanel(format!("duplicate municipality id {:?}", m.id)));
            }
            m.position.validate()?;
        }
        if populations.nrows() != municipalities.len() || populations.ncols() != years.len() {
            return Err(Error::InvalidPanel(format!(
                "population matrix is {}x{}, expected {}x{}",
                populations.nrows(),
                populations.ncols(),
                municipalities.len(),
                years.len()
            )));
        }
        for (k, &v) in populations.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                let i = k % populations.nrows();
                let t = k / populations.nrows();
                return Err(Error::InvalidPanel(format!(
                    "population of {} in {} is {v}",
                    municipalities[i].id, years[t]
                )));
            }
        }
        for (t, col) in populations.column_iter().enumerate() {
            if col.sum() <= 0.0 {
                return Err(Error::InvalidPanel(format!("total population is zero in {}", years[t])));
            }
        }
        Ok(CensusPanel { years, municipalities, populations })
    }

    /// Sub-panel of the years with indices in `range`.
    pub fn slice_years(&self, range: std::ops::Range<usize>) -> Result<CensusPanel> {
        if range.is_empty() || range.end > self.years.len() {
            return Err(Error::InvalidArgument(format!("year range {range:?} of {} years", self.years.len())));
        }
        let pops = self.populations.columns(range.start, range.len()).into_owned();
        CensusPanel::new(self.years[range].to_vec(), self.municipalities.clone(), pops)
    }

    pub fn years(&self) -> &[i32] {
        &self.years
    }

    pub fn municipalities(&self) -> &[Municipality] {
        &self.municipalities
    }

    pub fn populations(&self) -> &DMatrix<f64> {
        &self.populations
    }

    pub fn n_cities(&self) -> usize {
        self.municipalities.len()
    }

    /// Total population `N(t)` per year.
    pub fn totals(&self) -> Vec<f64> {
        self.populations.column_iter().map(|c| c.sum()).collect()
    }
}

/// Relative populations `x_i(t) = X_i(t)/N(t)` and annual changes
/// `ẋ_i(t) = x_i(t+1) − x_i(t)`.
#[derive(Debug, Clone)]
pub struct RelativePanel {
    pub ids: Vec<String>,
    pub years: Vec<i32>,
    /// n × (T+1)
    pub x: DMatrix<f64>,
    /// n × T
    pub xdot: DMatrix<f64>,
}

impl RelativePanel {
    pub fn n_cities(&self) -> usize {
        self.x.nrows()
    }

    /// Number of annual changes `T`.
    pub fn n_changes(&self) -> usize {
        self.xdot.ncols()
    }
}

pub fn to_relative(panel: &CensusPanel) -> RelativePanel {
    let pop = panel.populations();
    let totals = panel.totals();
    let mut x = pop.clone();
    for (mut col, total) in x.column_iter_mut().zip(&totals) {
        col /= *total;
    }
    let steps = x.ncols() - 1;
    let n = x.nrows();
    let xdot = DMatrix::from_fn(n, steps, |i, t| x[(i, t + 1)] - x[(i, t)]);
    RelativePanel {
        ids: panel.municipalities().iter().map(|m| m.id.clone()).collect(),
        years: panel.years().to_vec(),
        x,
        xdot,
    }
}

/// Symmetric matrix of pairwise distances in km.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    pub r: DMatrix<f64>,
    pub geometry: Geometry,
}

impl DistanceMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.r[(i, j)]
    }

    pub fn len(&self) -> usize {
        self.r.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.r.nrows() == 0
    }
}

pub fn great_circle_km(lon1: f64, lat1: f64, lon2: f64, lat2: f64) -> f64 {
    let (phi1, phi2) = (lat1.to_radians(), lat2.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (lon2 - lon1).to_radians();
    let a = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
}

pub fn distance_matrix(municipalities: &[Municipality], geometry: Geometry) -> Result<DistanceMatrix> {
    for m in municipalities {
        m.position.validate()?;
        let ok = matches!(
            (geometry, m.position),
            (Geometry::Planar, Position::Planar { .. }) | (Geometry::Spherical, Position::Geographic { .. })
        );
        if !ok {
            return Err(Error::InvalidPosition(format!(
                "municipality {} does not have a {:?} position",
                m.id, geometry
            )));
        }
    }
    let n = municipalities.len();
    let mut r = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = match (municipalities[i].position, municipalities[j].position) {
                (Position::Planar { x_km: x1, y_km: y1 }, Position::Planar { x_km: x2, y_km: y2 }) => {
                    (x1 - x2).hypot(y1 - y2)
                }
                (Position::Geographic { lon: a, lat: b }, Position::Geographic { lon: c, lat: d }) => {
                    great_circle_km(a, b, c, d)
                }
                _ => unreachable!("geometry checked above"),
            };
            r[(i, j)] = d;
            r[(j, i)] = d;
        }
    }
    Ok(DistanceMatrix { r, geometry })
}

fn check_contiguous(years: &[i32]) -> Result<()> {
    for w in years.windows(2) {
        if w[1] != w[0] + 1 {
            return Err(Error::NonContiguousYears(format!("{} is followed by {}", w[0], w[1])));
        }
    }
    Ok(())
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    Error::Malformed { line, reason: e.to_string() }
}

fn parse_f64(field: &str, what: &str, line: u64) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Malformed { line, reason: format!("invalid {what} {field:?}") })
}

/// Parses a municipality table. The header decides the coordinate kind and
/// must agree with `geometry`.
pub fn read_municipalities<R: Read>(reader: R, geometry: Geometry) -> Result<Vec<Municipality>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(str::to_owned).collect();
    let expected: &[&str] = match geometry {
        Geometry::Spherical => &["id", "name", "lon", "lat"],
        Geometry::Planar => &["id", "name", "x_km", "y_km"],
    };
    if header != expected {
        return Err(Error::Malformed {
            line: 1,
            reason: format!("expected header {:?}, found {:?}", expected.join(","), header.join(",")),
        });
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != 4 {
            return Err(Error::Malformed { line, reason: format!("expected 4 fields, found {}", rec.len()) });
        }
        let id = rec[0].to_owned();
        if id.is_empty() {
            return Err(Error::Malformed { line, reason: "empty id".into() });
        }
        if !seen.insert(id.clone()) {
            return Err(Error::Malformed { line, reason: format!("duplicate id {id:?}") });
        }
        let a = parse_f64(&rec[2], expected[2], line)?;
        let b = parse_f64(&rec[3], expected[3], line)?;
        let position = match geometry {
            Geometry::Spherical => Position::geographic(a, b),
            Geometry::Planar => Position::planar(a, b),
        };
        position.validate().map_err(|e| Error::Malformed { line, reason: e.to_string() })?;
        out.push(Municipality { id, name: rec[1].to_owned(), position });
    }
    if out.is_empty() {
        return Err(Error::Malformed { line: 1, reason: "no municipalities".into() });
    }
    Ok(out)
}

/// Parses long-format populations against a known municipality list.
pub fn read_populations<R: Read>(reader: R, municipalities: Vec<Municipality>) -> Result<CensusPanel> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(str::to_owned).collect();
    if header != ["id", "year", "population"] {
        return Err(Error::Malformed {
            line: 1,
            reason: format!("expected header \"id,year,population\", found {:?}", header.join(",")),
        });
    }
    let index: HashMap<&str, usize> =
        municipalities.iter().enumerate().map(|(i, m)| (m.id.as_str(), i)).collect();
    let mut values: BTreeMap<i32, Vec<Option<f64>>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != 3 {
            return Err(Error::Malformed { line, reason: format!("expected 3 fields, found {}", rec.len()) });
        }
        let &i = index
            .get(&rec[0])
            .ok_or_else(|| Error::Malformed { line, reason: format!("unknown municipality id {:?}", &rec[0]) })?;
        let year: i32 = rec[1]
            .parse()
            .map_err(|_| Error::Malformed { line, reason: format!("invalid year {:?}", &rec[1]) })?;
        let pop = parse_f64(&rec[2], "population", line)?;
        if pop < 0.0 {
            return Err(Error::Malformed { line, reason: format!("negative population {pop}") });
        }
        let slot = &mut values.entry(year).or_insert_with(|| vec![None; municipalities.len()])[i];
        if slot.is_some() {
            return Err(Error::Malformed {
                line,
                reason: format!("duplicate entry for {} in {year}", &rec[0]),
            });
        }
        *slot = Some(pop);
    }
    let years: Vec<i32> = values.keys().copied().collect();
    if years.is_empty() {
        return Err(Error::InvalidPanel("no population rows".into()));
    }
    check_contiguous(&years)?;
    let n = municipalities.len();
    let mut pop = DMatrix::zeros(n, years.len());
    for (t, (year, col)) in values.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            pop[(i, t)] = v.ok_or_else(|| Error::MissingYear { id: municipalities[i].id.clone(), year: *year })?;
        }
    }
    CensusPanel::new(years, municipalities, pop)
}

pub fn load_census(municipality_file: &Path, population_file: &Path, geometry: Geometry) -> Result<CensusPanel> {
    let mf = File::open(municipality_file).map_err(|e| io_err(municipality_file, e))?;
    let municipalities = read_municipalities(mf, geometry)?;
    let pf = File::open(population_file).map_err(|e| io_err(population_file, e))?;
    read_populations(pf, municipalities)
}
