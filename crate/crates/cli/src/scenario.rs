//! Scenario files: flat TOML, one scenario per file.
//!
//! ```toml
//! name = "half-variance"
//! kind = "transport_1d"
//! seed = 7
//! checks = ["ma_residual", "distance_identity"]
//! s = 0.5
//!
//! [tolerances]
//! ma_residual = 1e-9
//! ```
//!
//! Matrices are row-major nested arrays, `covariance = [[0.5, 0.1], [0.1, 0.4]]`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Transport1d,
    TransportGaussian,
    TransportGrid,
    LinearOperator,
    PolarDiscrete,
    Ito,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ParamType {
    Number,
    PositiveNumber,
    Count,
    Pair,
    SquareMatrix,
    Choice(&'static [&'static str]),
}

struct ParamSpec {
    key: &'static str,
    ty: ParamType,
    required: bool,
}

const fn req(key: &'static str, ty: ParamType) -> ParamSpec {
    ParamSpec { key, ty, required: true }
}

const fn opt(key: &'static str, ty: ParamType) -> ParamSpec {
    ParamSpec { key, ty, required: false }
}

use ParamType::*;

const ESTIMATORS: &[&str] = &["closed_form", "kernel"];

impl Kind {
    pub const ALL: [Kind; 6] = [
        Kind::Transport1d,
        Kind::TransportGaussian,
        Kind::TransportGrid,
        Kind::LinearOperator,
        Kind::PolarDiscrete,
        Kind::Ito,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Kind::Transport1d => "transport_1d",
            Kind::TransportGaussian => "transport_gaussian",
            Kind::TransportGrid => "transport_grid",
            Kind::LinearOperator => "linear_operator",
            Kind::PolarDiscrete => "polar_discrete",
            Kind::Ito => "ito",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn checks(self) -> &'static [&'static str] {
        match self {
            Kind::Transport1d => &["ma_residual", "distance_identity", "talagrand", "sobolev", "caffarelli", "convex_set_mass"],
            Kind::TransportGaussian => &["ma_residual", "distance_identity", "talagrand", "sobolev", "caffarelli"],
            Kind::TransportGrid => &["ma_residual", "distance_identity", "talagrand", "sobolev", "ladder"],
            Kind::LinearOperator => &["det2", "polar", "lambda_identity"],
            Kind::PolarDiscrete => &["polar_minimal", "recomposition"],
            Kind::Ito => &[
                "drift",
                "decomposition",
                "quadratic_variation",
                "ito_jacobian",
                "free_energy",
                "future_information_control",
                "rotation",
            ],
        }
    }

    fn params(self) -> &'static [ParamSpec] {
        const T1D: &[ParamSpec] = &[
            opt("s", PositiveNumber),
            opt("m", Number),
            opt("interval", Pair),
            opt("set", Pair),
            opt("points", Count),
            opt("radius", PositiveNumber),
        ];
        const GAUSS: &[ParamSpec] = &[req("covariance", SquareMatrix), opt("dimension", Count)];
        const GRID: &[ParamSpec] = &[
            req("covariance", SquareMatrix),
            opt("grid_radius", PositiveNumber),
            opt("grid_points", Count),
        ];
        const LINEAR: &[ParamSpec] = &[req("k", SquareMatrix), opt("dimension", Count), opt("samples", Count)];
        const POLAR: &[ParamSpec] = &[req("atoms", Count), opt("dimension", Count), opt("instances", Count)];
        const ITO: &[ParamSpec] = &[
            req("lambda", Number),
            req("steps", Count),
            req("paths", Count),
            opt("estimator", Choice(ESTIMATORS)),
            opt("bandwidth", PositiveNumber),
        ];
        match self {
            Kind::Transport1d => T1D,
            Kind::TransportGaussian => GAUSS,
            Kind::TransportGrid => GRID,
            Kind::LinearOperator => LINEAR,
            Kind::PolarDiscrete => POLAR,
            Kind::Ito => ITO,
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Param {
    Number(f64),
    Pair(f64, f64),
    Matrix(DMatrix<f64>),
    Text(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub kind: Kind,
    pub seed: u64,
    pub parameters: BTreeMap<String, Param>,
    pub checks: Vec<String>,
    pub tolerances: BTreeMap<String, f64>,
}

impl Scenario {
    pub fn number(&self, key: &str) -> Option<f64> {
        match self.parameters.get(key) {
            Some(Param::Number(x)) => Some(*x),
            _ => None,
        }
    }

    pub fn count(&self, key: &str, default: usize) -> usize {
        self.number(key).map(|x| x as usize).unwrap_or(default)
    }

    pub fn pair(&self, key: &str) -> Option<(f64, f64)> {
        match self.parameters.get(key) {
            Some(Param::Pair(a, b)) => Some((*a, *b)),
            _ => None,
        }
    }

    pub fn matrix(&self, key: &str) -> Option<&DMatrix<f64>> {
        match self.parameters.get(key) {
            Some(Param::Matrix(m)) => Some(m),
            _ => None,
        }
    }

    pub fn text(&self, key: &str) -> Option<&str> {
        match self.parameters.get(key) {
            Some(Param::Text(s)) => Some(s),
            _ => None,
        }
    }

    pub fn tolerance(&self, check: &str, default: f64) -> f64 {
        self.tolerances.get(check).copied().unwrap_or(default)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("cannot read scenario: {0}")]
    Io(String),
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("seed required")]
    SeedRequired,
    #[error("kind required")]
    KindRequired,
    #[error("unknown kind '{0}'")]
    UnknownKind(String),
    #[error("missing parameter '{0}'")]
    MissingParameter(String),
    #[error("unknown parameter '{0}'")]
    UnknownParameter(String),
    #[error("unknown check '{0}'")]
    UnknownCheck(String),
    #[error("malformed matrix '{key}': {reason}")]
    MalformedMatrix { key: String, reason: String },
    #[error("invalid value for '{key}': {reason}")]
    InvalidValue { key: String, reason: String },
}

fn invalid(key: &str, reason: impl Into<String>) -> ValidationError {
    ValidationError::InvalidValue {
        key: key.into(),
        reason: reason.into(),
    }
}

fn as_number(v: &toml::Value) -> Option<f64> {
    match v {
        toml::Value::Float(x) => Some(*x),
        toml::Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

fn parse_matrix(key: &str, v: &toml::Value) -> Result<DMatrix<f64>, ValidationError> {
    let bad = |reason: &str| ValidationError::MalformedMatrix {
        key: key.into(),
        reason: reason.into(),
    };
    let rows = v.as_array().ok_or_else(|| bad("expected an array of rows"))?;
    if rows.is_empty() {
        return Err(bad("no rows"));
    }
    let mut data = Vec::new();
    for r in rows {
        let r = r.as_array().ok_or_else(|| bad("every row must be an array"))?;
        if r.len() != rows.len() {
            return Err(bad(&format!("expected {n} entries per row for a {n}x{n} matrix", n = rows.len())));
        }
        for x in r {
            let x = as_number(x).ok_or_else(|| bad("entries must be numbers"))?;
            if !x.is_finite() {
                return Err(bad("entries must be finite"));
            }
            data.push(x);
        }
    }
    Ok(DMatrix::from_row_slice(rows.len(), rows.len(), &data))
}

fn parse_param(key: &str, ty: ParamType, v: &toml::Value) -> Result<Param, ValidationError> {
    match ty {
        Number | PositiveNumber => {
            let x = as_number(v).ok_or_else(|| invalid(key, "expected a number"))?;
            if !x.is_finite() || (ty == PositiveNumber && x <= 0.0) {
                return Err(invalid(key, if ty == PositiveNumber { "must be positive" } else { "must be finite" }));
            }
            Ok(Param::Number(x))
        }
        Count => match v.as_integer() {
            Some(i) if i > 0 => Ok(Param::Number(i as f64)),
            _ => Err(invalid(key, "expected a positive integer")),
        },
        Pair => {
            let xs: Option<Vec<f64>> = v.as_array().map(|a| a.iter().map(as_number).collect()).unwrap_or(None);
            match xs.as_deref() {
                Some([a, b]) if a < b => Ok(Param::Pair(*a, *b)),
                _ => Err(invalid(key, "expected [lower, upper] with lower < upper")),
            }
        }
        SquareMatrix => parse_matrix(key, v).map(Param::Matrix),
        Choice(options) => match v.as_str() {
            Some(s) if options.contains(&s) => Ok(Param::Text(s.into())),
            _ => Err(invalid(key, format!("expected one of {}", options.join(", ")))),
        },
    }
}

/// Constraints between parameters of one kind.
fn cross_checks(kind: Kind, params: &BTreeMap<String, Param>, checks: &[String], errors: &mut Vec<ValidationError>) {
    let dim_of = |key: &str| match params.get(key) {
        Some(Param::Matrix(m)) => Some(m.nrows()),
        _ => None,
    };
    let declared = match params.get("dimension") {
        Some(Param::Number(d)) => Some(*d as usize),
        _ => None,
    };
    match kind {
        Kind::Transport1d => {
            let targets = ["s", "m", "interval"].iter().filter(|k| params.contains_key(**k)).count();
            if targets == 0 {
                errors.push(ValidationError::MissingParameter("s, m or interval".into()));
            } else if targets > 1 {
                errors.push(invalid("s", "give exactly one of s, m and interval"));
            }
            if checks.iter().any(|c| c == "convex_set_mass") && !params.contains_key("set") {
                errors.push(ValidationError::MissingParameter("set".into()));
            }
        }
        Kind::TransportGaussian | Kind::LinearOperator => {
            let key = if kind == Kind::LinearOperator { "k" } else { "covariance" };
            if let (Some(n), Some(d)) = (dim_of(key), declared) {
                if n != d {
                    errors.push(ValidationError::MalformedMatrix {
                        key: key.into(),
                        reason: format!("{n}x{n} but dimension = {d}"),
                    });
                }
            }
            if kind == Kind::TransportGaussian && dim_of(key).is_some_and(|n| n > 4) {
                errors.push(invalid(key, "quadrature checks support dimension at most 4"));
            }
        }
        Kind::TransportGrid => {
            if dim_of("covariance").is_some_and(|n| n != 2) {
                errors.push(ValidationError::MalformedMatrix {
                    key: "covariance".into(),
                    reason: "the grid solver needs a 2x2 covariance".into(),
                });
            }
        }
        Kind::PolarDiscrete => {
            if let Some(Param::Number(a)) = params.get("atoms") {
                if *a > 8.0 {
                    errors.push(invalid("atoms", "brute-force minimality is limited to 8 atoms"));
                }
            }
        }
        Kind::Ito => {
            if params.get("estimator") == Some(&Param::Text("kernel".into())) && !params.contains_key("bandwidth") {
                errors.push(ValidationError::MissingParameter("bandwidth".into()));
            }
            if checks.iter().any(|c| c == "free_energy") {
                if let Some(Param::Number(k)) = params.get("steps") {
                    if !(*k as usize).is_multiple_of(2) {
                        errors.push(invalid("steps", "free_energy needs an even number of steps"));
                    }
                }
            }
        }
    }
}

/// Parses and validates scenario text; `fallback_name` is used when the
/// file has no `name`. Returns every problem found, not just the first.
pub fn parse_scenario_str(text: &str, fallback_name: &str) -> Result<Scenario, Vec<ValidationError>> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| vec![ValidationError::Syntax(e.message().to_string())])?;
    let mut errors = Vec::new();

    let name = match table.get("name") {
        None => fallback_name.to_string(),
        Some(toml::Value::String(s)) if !s.is_empty() => s.clone(),
        Some(_) => {
            errors.push(invalid("name", "expected a nonempty string"));
            fallback_name.to_string()
        }
    };
    let seed = match table.get("seed") {
        None => {
            errors.push(ValidationError::SeedRequired);
            None
        }
        Some(v) => match v.as_integer() {
            Some(i) if i >= 0 => Some(i as u64),
            _ => {
                errors.push(invalid("seed", "expected a nonnegative integer"));
                None
            }
        },
    };
    let kind = match table.get("kind") {
        None => {
            errors.push(ValidationError::KindRequired);
            None
        }
        Some(toml::Value::String(s)) => {
            let k = Kind::parse(s);
            if k.is_none() {
                errors.push(ValidationError::UnknownKind(s.clone()));
            }
            k
        }
        Some(_) => {
            errors.push(invalid("kind", "expected a string"));
            None
        }
    };

    let raw_checks: Option<Vec<String>> = match table.get("checks") {
        None => None,
        Some(v) => match v.as_array().map(|a| a.iter().map(|c| c.as_str().map(String::from)).collect::<Option<Vec<_>>>()) {
            Some(Some(cs)) => Some(cs),
            _ => {
                errors.push(invalid("checks", "expected an array of strings"));
                Some(vec![])
            }
        },
    };
    let tolerances: BTreeMap<String, f64> = match table.get("tolerances") {
        None => BTreeMap::new(),
        Some(toml::Value::Table(t)) => t
            .iter()
            .filter_map(|(k, v)| match as_number(v) {
                Some(x) if x >= 0.0 && x.is_finite() => Some((k.clone(), x)),
                _ => {
                    errors.push(invalid(&format!("tolerances.{k}"), "expected a nonnegative number"));
                    None
                }
            })
            .collect(),
        Some(_) => {
            errors.push(invalid("tolerances", "expected a table"));
            BTreeMap::new()
        }
    };

    let Some(kind) = kind else {
        return Err(errors);
    };
    // Without an explicit list, every check whose inputs are present.
    let checks = raw_checks.unwrap_or_else(|| {
        kind.checks()
            .iter()
            .filter(|c| **c != "convex_set_mass" || table.contains_key("set"))
            .map(|c| c.to_string())
            .collect()
    });
    for c in checks.iter().chain(tolerances.keys()) {
        if !kind.checks().contains(&c.as_str()) {
            errors.push(ValidationError::UnknownCheck(c.clone()));
        }
    }

    let specs = kind.params();
    let mut parameters = BTreeMap::new();
    for (key, value) in &table {
        if matches!(key.as_str(), "name" | "kind" | "seed" | "checks" | "tolerances") {
            continue;
        }
        match specs.iter().find(|s| s.key == key) {
            None => errors.push(ValidationError::UnknownParameter(key.clone())),
            Some(spec) => match parse_param(key, spec.ty, value) {
                Ok(p) => {
                    parameters.insert(key.clone(), p);
                }
                Err(e) => errors.push(e),
            },
        }
    }
    for spec in specs.iter().filter(|s| s.required) {
        if !table.contains_key(spec.key) {
            errors.push(ValidationError::MissingParameter(spec.key.into()));
        }
    }
    cross_checks(kind, &parameters, &checks, &mut errors);

    match (errors.is_empty(), seed) {
        (true, Some(seed)) => Ok(Scenario {
            name,
            kind,
            seed,
            parameters,
            checks,
            tolerances,
        }),
        _ => Err(errors),
    }
}

pub fn parse_scenario(path: &Path) -> Result<Scenario, Vec<ValidationError>> {
    let text = std::fs::read_to_string(path).map_err(|e| vec![ValidationError::Io(format!("{}: {e}", path.display()))])?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("scenario");
    parse_scenario_str(&text, stem)
}
