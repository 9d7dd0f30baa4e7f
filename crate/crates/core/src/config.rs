//! JSON problem definitions.
//!
//! Every file carries `"schema_version": 1` and a `"kind"`:
//!
//! ```json
//! { "schema_version": 1, "kind": "finite", "horizon": 0.1, "steps": 1000,
//!   "coefficients": { "A": 0.2, "B": [..], "C": [..], "D": [[..]], "R": [[..]],
//!                     "S": [..], "q": 10,
//!                     "constraints": { "bounds": { "lower": [..], "upper": [..] } } },
//!   "q_T": 0 }
//! ```
//!
//! `"stationary"` files omit `horizon`, `steps`, `grid` and `q_T`. Any finite
//! coefficient may be written as `{"series": [...]}` with one entry per point
//! of an explicit `"grid"`. Constraints are either `bounds` or a pair `H`, `d`;
//! omitting them leaves the control unconstrained.
//!
//! `"mean_variance"` files describe a market:
//!
//! ```json
//! { "schema_version": 1, "kind": "mean_variance", "horizon": 12, "x0": 100, "target": 130,
//!   "market": { "r": 0.0025, "mu": [..], "sigma": [[..]], "penalty": [[..]],
//!               "no_short": [2, 3, 4, 6] } }
//! ```
//!
//! `no_short` numbers assets from 1; a general cone `H u >= 0` is given as `"cone"`.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::infinite_horizon::StationaryProblem;
use crate::linalg::serde_dense;
use crate::meanvar::{MarketSlice, MvError, MvProblem};
use crate::problem::{default_steps, uniform_grid, Assumption, Coefficients, ProblemData, ValidationError};
use crate::qp::Polyhedron;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed JSON at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error(transparent)]
    Validation(#[from] ValidationError),
}

impl From<serde_json::Error> for ConfigError {
    fn from(e: serde_json::Error) -> Self {
        let message = e.to_string();
        // serde_json appends " at line L column C"; keep only the description.
        let message = message
            .rsplit_once(" at line ")
            .map_or(message.as_str(), |(head, _)| head)
            .to_string();
        ConfigError::Parse {
            line: e.line(),
            column: e.column(),
            message,
        }
    }
}

fn structure(message: impl Into<String>) -> ConfigError {
    ConfigError::Validation(ValidationError::new(Assumption::Structure, None, message))
}

/// A value that is either constant or given per grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Timed<T> {
    Series { series: Vec<T> },
    Constant(T),
}

impl<T: Clone> Timed<T> {
    fn at(&self, i: usize) -> T {
        match self {
            Timed::Constant(v) => v.clone(),
            Timed::Series { series } => series[i].clone(),
        }
    }

    fn series_len(&self) -> Option<usize> {
        match self {
            Timed::Constant(_) => None,
            Timed::Series { series } => Some(series.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSpec {
    pub lower: Timed<Vec<f64>>,
    pub upper: Timed<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<BoundsSpec>,
    #[serde(rename = "H", default, skip_serializing_if = "Option::is_none")]
    pub h: Option<Timed<Vec<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<Timed<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientSpec {
    #[serde(rename = "A")]
    pub a: Timed<f64>,
    #[serde(rename = "B")]
    pub b: Timed<Vec<f64>>,
    #[serde(rename = "C")]
    pub c: Timed<Vec<f64>>,
    #[serde(rename = "D")]
    pub d: Timed<Vec<Vec<f64>>>,
    #[serde(rename = "R")]
    pub r: Timed<Vec<Vec<f64>>>,
    #[serde(rename = "S")]
    pub s: Timed<Vec<f64>>,
    pub q: Timed<f64>,
    #[serde(default)]
    pub constraints: ConstraintSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSpec {
    pub r: f64,
    pub mu: Vec<f64>,
    pub sigma: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalty: Option<Vec<Vec<f64>>>,
    /// Asset numbers (from 1) that may not be shorted.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub no_short: Vec<usize>,
    /// General cone rows of `H u >= 0`, appended after the no-short rows.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cone: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConfigBody {
    Finite {
        horizon: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        steps: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        grid: Option<Vec<f64>>,
        coefficients: CoefficientSpec,
        #[serde(rename = "q_T", default)]
        q_terminal: f64,
    },
    Stationary {
        coefficients: CoefficientSpec,
    },
    MeanVariance {
        horizon: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        steps: Option<usize>,
        x0: f64,
        target: f64,
        market: MarketSpec,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigFile {
    pub schema_version: u32,
    #[serde(flatten)]
    pub body: ConfigBody,
}

/// Validated problem plus any assumption warnings.
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Problem {
    Finite(ProblemData),
    Stationary(StationaryProblem),
    MeanVariance(MvProblem),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parsed {
    pub problem: Problem,
    pub warnings: Vec<String>,
}

fn vector(v: Vec<f64>) -> DVector<f64> {
    DVector::from_vec(v)
}

fn matrix(rows: &[Vec<f64>], cols: usize, what: &str) -> Result<DMatrix<f64>, ConfigError> {
    if rows.is_empty() {
        return Ok(DMatrix::zeros(0, cols));
    }
    let m = serde_dense::from_rows(rows).map_err(|e| structure(format!("{what}: {e}")))?;
    if m.ncols() != cols {
        return Err(structure(format!("{what} needs {cols} columns, found {}", m.ncols())));
    }
    Ok(m)
}

fn control_dim(spec: &CoefficientSpec) -> usize {
    match &spec.b {
        Timed::Constant(b) => b.len(),
        Timed::Series { series } => series.first().map_or(0, Vec::len),
    }
}

fn noise_dim(spec: &CoefficientSpec) -> usize {
    match &spec.c {
        Timed::Constant(c) => c.len(),
        Timed::Series { series } => series.first().map_or(0, Vec::len),
    }
}

impl CoefficientSpec {
    fn series_lengths(&self) -> Vec<usize> {
        let c = &self.constraints;
        [
            self.a.series_len(),
            self.b.series_len(),
            self.c.series_len(),
            self.d.series_len(),
            self.r.series_len(),
            self.s.series_len(),
            self.q.series_len(),
            c.bounds.as_ref().and_then(|b| b.lower.series_len()),
            c.bounds.as_ref().and_then(|b| b.upper.series_len()),
            c.h.as_ref().and_then(Timed::series_len),
            c.d.as_ref().and_then(Timed::series_len),
        ]
        .into_iter()
        .flatten()
        .collect()
    }

    fn region_at(&self, i: usize, n: usize) -> Result<Polyhedron, ConfigError> {
        let c = &self.constraints;
        match (&c.bounds, &c.h, &c.d) {
            (None, None, None) => Ok(Polyhedron::unconstrained(n)),
            (Some(b), None, None) => {
                let (lo, hi) = (b.lower.at(i), b.upper.at(i));
                if lo.len() != n || hi.len() != n {
                    return Err(structure(format!("bounds need {n} entries each")));
                }
                Polyhedron::from_bounds(&vector(lo), &vector(hi)).map_err(|e| structure(e.to_string()))
            }
            (None, Some(h), Some(d)) => {
                let h = matrix(&h.at(i), n, "H")?;
                Polyhedron::new(h, vector(d.at(i))).map_err(|e| structure(e.to_string()))
            }
            _ => Err(structure("constraints take either `bounds` or both `H` and `d`")),
        }
    }

    fn slice(&self, i: usize) -> Result<Coefficients, ConfigError> {
        let n = control_dim(self);
        let m = noise_dim(self);
        let coeffs = Coefficients {
            a: self.a.at(i),
            b: vector(self.b.at(i)),
            c: vector(self.c.at(i)),
            d: matrix(&self.d.at(i), m, "D")?,
            r: matrix(&self.r.at(i), n, "R")?,
            s: vector(self.s.at(i)),
            q: self.q.at(i),
            region: self.region_at(i, n)?,
        };
        coeffs
            .check_shapes()
            .map_err(|e| ConfigError::Validation(ValidationError::new(Assumption::Structure, Some(i), e)))?;
        Ok(coeffs)
    }
}

impl MarketSpec {
    fn slice(&self) -> Result<MarketSlice, ConfigError> {
        let n = self.mu.len();
        let sigma = matrix(&self.sigma, n, "sigma")?;
        if sigma.nrows() != n {
            return Err(structure(format!("sigma must be {n}x{n}")));
        }
        let penalty = match &self.penalty {
            Some(p) => matrix(p, n, "penalty")?,
            None => DMatrix::zeros(n, n),
        };
        if let Some(&bad) = self.no_short.iter().find(|&&i| i == 0 || i > n) {
            return Err(structure(format!("no_short asset {bad} is outside 1..={n}")));
        }
        let zero_based: Vec<usize> = self.no_short.iter().map(|i| i - 1).collect();
        let mut rows = MarketSlice::no_short_cone(n, &zero_based);
        if !self.cone.is_empty() {
            let extra = matrix(&self.cone, n, "cone")?;
            let k = rows.nrows();
            rows = rows.insert_rows(k, extra.nrows(), 0.0);
            rows.view_mut((k, 0), (extra.nrows(), n)).copy_from(&extra);
        }
        Ok(MarketSlice {
            r: self.r,
            mu: vector(self.mu.clone()),
            sigma,
            cone: rows,
            penalty,
        })
    }
}

fn resolve_grid(horizon: f64, steps: Option<usize>, grid: Option<Vec<f64>>) -> Result<Vec<f64>, ConfigError> {
    if !(horizon > 0.0) {
        return Err(structure("horizon must be > 0"));
    }
    match grid {
        Some(g) => {
            if g.first() != Some(&0.0) || g.last() != Some(&horizon) {
                return Err(structure("grid must run from 0 to the horizon"));
            }
            Ok(g)
        }
        None => Ok(uniform_grid(horizon, steps.unwrap_or_else(|| default_steps(horizon)))),
    }
}

impl ConfigFile {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        // Check the version before the body so that old files get a clear message.
        #[derive(Deserialize)]
        struct Version {
            schema_version: Option<u32>,
        }
        let v: Version = serde_json::from_str(text)?;
        match v.schema_version {
            Some(SCHEMA_VERSION) => {}
            Some(other) => return Err(structure(format!("unsupported schema_version {other} (expected 1)"))),
            None => return Err(structure("missing schema_version")),
        }
        Ok(serde_json::from_str(text)?)
    }

    /// Builds the domain object and runs every assumption check.
    pub fn build(self, steps_override: Option<usize>) -> Result<Parsed, ConfigError> {
        match self.body {
            ConfigBody::Finite {
                horizon,
                steps,
                grid,
                coefficients,
                q_terminal,
            } => {
                let lengths = coefficients.series_lengths();
                let grid = match (&grid, steps_override) {
                    (None, Some(n)) => resolve_grid(horizon, Some(n), None)?,
                    _ => resolve_grid(horizon, steps, grid)?,
                };
                if !lengths.is_empty() && (self_grid_explicit(&lengths, grid.len())) {
                    return Err(structure(format!(
                        "series lengths {lengths:?} must all equal the number of grid points {}",
                        grid.len()
                    )));
                }
                let slices = if lengths.is_empty() {
                    vec![coefficients.slice(0)?]
                } else {
                    (0..grid.len()).map(|i| coefficients.slice(i)).collect::<Result<_, _>>()?
                };
                let data = ProblemData {
                    grid,
                    slices,
                    q_terminal,
                };
                let warnings = data.validate()?;
                Ok(Parsed {
                    problem: Problem::Finite(data),
                    warnings,
                })
            }
            ConfigBody::Stationary { coefficients } => {
                if !coefficients.series_lengths().is_empty() {
                    return Err(structure("stationary coefficients must be constants"));
                }
                let problem = StationaryProblem::new(coefficients.slice(0)?);
                let warnings = problem.validate()?;
                Ok(Parsed {
                    problem: Problem::Stationary(problem),
                    warnings,
                })
            }
            ConfigBody::MeanVariance {
                horizon,
                steps,
                x0,
                target,
                market,
            } => {
                let grid = resolve_grid(horizon, steps_override.or(steps), None)?;
                let problem = MvProblem {
                    grid,
                    market: vec![market.slice()?],
                    x0,
                    target,
                };
                problem.validate().map_err(|e| match e {
                    MvError::InvalidMarket(v) => ConfigError::Validation(v),
                    other => structure(other.to_string()),
                })?;
                Ok(Parsed {
                    problem: Problem::MeanVariance(problem),
                    warnings: Vec::new(),
                })
            }
        }
    }
}

fn self_grid_explicit(lengths: &[usize], points: usize) -> bool {
    lengths.iter().any(|&l| l != points)
}

/// Reads, parses and validates a config file.
pub fn parse_config(path: &Path, steps_override: Option<usize>) -> Result<Parsed, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config_str(&text, steps_override)
}

pub fn parse_config_str(text: &str, steps_override: Option<usize>) -> Result<Parsed, ConfigError> {
    ConfigFile::from_json(text)?.build(steps_override)
}
