//! Partly interval-censored survival observations.
//!
//! Every observation is stored as a pair of endpoints `(t_left, t_right)`:
//! an exact event has `t_left == t_right`, left censoring has `t_left == 0`,
//! right censoring has `t_right == +inf`, and anything else is an interval.

use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use thiserror::Error;

/// Relative tolerance under which two endpoints are considered the same time.
pub const TIE_RELATIVE_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("right endpoint {t_right} is smaller than left endpoint {t_left}")]
    Reversed { t_left: f64, t_right: f64 },
    #[error("both endpoints are zero")]
    ZeroInterval,
    #[error("left endpoint must be finite and nonnegative, got {0}")]
    InvalidLeft(f64),
    #[error("right endpoint must not be NaN")]
    InvalidRight,
    #[error("row {row}: {source}")]
    Row {
        row: usize,
        #[source]
        source: Box<DataError>,
    },
    #[error("row {row}: cannot parse {column:?} value {value:?} as a number")]
    Malformed {
        row: usize,
        column: String,
        value: String,
    },
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("row {row}: expected {expected} covariates, found {found}")]
    CovariateLength {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("dataset has no usable rows")]
    Empty,
    #[error("every observation is right censored; the baseline hazard is not identifiable")]
    AllRightCensored,
    #[error("no finite positive endpoints")]
    NoFiniteEndpoints,
    #[error("csv error: {0}")]
    Csv(String),
}

impl From<csv::Error> for DataError {
    fn from(e: csv::Error) -> Self {
        DataError::Csv(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CensorKind {
    Event,
    Left,
    Right,
    Interval,
}

impl CensorKind {
    pub fn label(self) -> &'static str {
        match self {
            CensorKind::Event => "event",
            CensorKind::Left => "left",
            CensorKind::Right => "right",
            CensorKind::Interval => "interval",
        }
    }
}

fn same_time(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= TIE_RELATIVE_TOL * a.abs().max(b.abs())
}

/// Classifies an observed pair of endpoints.
pub fn classify_censoring(t_left: f64, t_right: f64) -> Result<CensorKind, DataError> {
    if !t_left.is_finite() || t_left < 0.0 {
        return Err(DataError::InvalidLeft(t_left));
    }
    if t_right.is_nan() {
        return Err(DataError::InvalidRight);
    }
    if t_right < t_left && !same_time(t_left, t_right) {
        return Err(DataError::Reversed { t_left, t_right });
    }
    if t_right == 0.0 {
        return Err(DataError::ZeroInterval);
    }
    if t_right == f64::INFINITY {
        return Ok(CensorKind::Right);
    }
    if same_time(t_left, t_right) {
        return Ok(CensorKind::Event);
    }
    if t_left == 0.0 {
        return Ok(CensorKind::Left);
    }
    Ok(CensorKind::Interval)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub t_left: f64,
    pub t_right: f64,
    pub kind: CensorKind,
    pub covariates: Vec<f64>,
}

impl Observation {
    /// Builds an observation, classifying it from its endpoints. Events
    /// within the tie tolerance are snapped to `t_right = t_left`.
    pub fn new(t_left: f64, t_right: f64, covariates: Vec<f64>) -> Result<Self, DataError> {
        let kind = classify_censoring(t_left, t_right)?;
        let t_right = if kind == CensorKind::Event {
            t_left
        } else {
            t_right
        };
        Ok(Observation {
            t_left,
            t_right,
            kind,
            covariates,
        })
    }

    /// The single time point for event, left and right observations.
    pub fn time(&self) -> f64 {
        match self.kind {
            CensorKind::Event | CensorKind::Right => self.t_left,
            CensorKind::Left => self.t_right,
            CensorKind::Interval => self.t_left,
        }
    }

    /// Finite, strictly positive endpoints of this observation.
    pub fn finite_endpoints(&self) -> impl Iterator<Item = f64> {
        let (l, r) = (self.t_left, self.t_right);
        let right = if self.kind == CensorKind::Event {
            None
        } else {
            Some(r)
        };
        std::iter::once(l)
            .chain(right)
            .filter(|t| t.is_finite() && *t > 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    observations: Vec<Observation>,
    p: usize,
    covariate_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        observations: Vec<Observation>,
        covariate_names: Vec<String>,
    ) -> Result<Self, DataError> {
        if observations.is_empty() {
            return Err(DataError::Empty);
        }
        let p = covariate_names.len();
        for (row, obs) in observations.iter().enumerate() {
            if obs.covariates.len() != p {
                return Err(DataError::CovariateLength {
                    row,
                    expected: p,
                    found: obs.covariates.len(),
                });
            }
        }
        if observations.iter().all(|o| o.kind == CensorKind::Right) {
            return Err(DataError::AllRightCensored);
        }
        Ok(Dataset {
            observations,
            p,
            covariate_names,
        })
    }

    /// Dataset with generated covariate names `x1..xp`.
    pub fn from_observations(observations: Vec<Observation>) -> Result<Self, DataError> {
        let p = observations.first().map_or(0, |o| o.covariates.len());
        let names = (1..=p).map(|j| format!("x{j}")).collect();
        Dataset::new(observations, names)
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn n(&self) -> usize {
        self.observations.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn count(&self, kind: CensorKind) -> usize {
        self.observations.iter().filter(|o| o.kind == kind).count()
    }

    /// Sorted finite positive endpoints: event times and censoring bounds,
    /// excluding the zeros of left censoring and the infinities of right
    /// censoring. This is the pool used for knot placement.
    pub fn endpoint_pool(&self) -> Vec<f64> {
        let mut pool: Vec<f64> = self
            .observations
            .iter()
            .flat_map(|o| o.finite_endpoints())
            .collect();
        pool.sort_by(f64::total_cmp);
        pool
    }
}

/// Smallest and largest finite positive observed endpoint.
pub fn time_support(data: &Dataset) -> Result<(f64, f64), DataError> {
    let pool = data.endpoint_pool();
    match (pool.first(), pool.last()) {
        (Some(&a), Some(&b)) => Ok((a, b)),
        _ => Err(DataError::NoFiniteEndpoints),
    }
}

/// Column mapping for delimited input.
#[derive(Debug, Clone, Default)]
pub struct Schema {
    pub t_left: String,
    pub t_right: String,
    /// Covariate columns in model order. Empty means every remaining column.
    pub covariates: Vec<String>,
    /// Field delimiter; `None` sniffs tab vs comma from the header line.
    pub delimiter: Option<u8>,
}

impl Schema {
    pub fn new(t_left: &str, t_right: &str, covariates: &[&str]) -> Self {
        Schema {
            t_left: t_left.to_string(),
            t_right: t_right.to_string(),
            covariates: covariates.iter().map(|s| s.to_string()).collect(),
            delimiter: None,
        }
    }
}

fn parse_time(cell: &str, allow_inf: bool) -> Option<f64> {
    let cell = cell.trim();
    if allow_inf && (cell.is_empty() || cell.eq_ignore_ascii_case("inf")) {
        return Some(f64::INFINITY);
    }
    cell.parse::<f64>().ok().filter(|v| !v.is_nan())
}

/// Reads a delimited table with a header row into a [`Dataset`].
///
/// The right endpoint accepts `inf`, `Inf` or an empty cell for right censoring.
/// Row indices in errors are zero-based data rows (the header is not counted).
pub fn load_dataset<R: Read>(mut source: R, schema: &Schema) -> Result<Dataset, DataError> {
    let mut bytes = Vec::new();
    source
        .read_to_end(&mut bytes)
        .map_err(|e| DataError::Csv(e.to_string()))?;
    let delimiter = schema.delimiter.unwrap_or_else(|| {
        let header = bytes.split(|b| *b == b'\n').next().unwrap_or(&[]);
        if header.contains(&b'\t') && !header.contains(&b',') {
            b'\t'
        } else {
            b','
        }
    });
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .from_reader(bytes.as_slice());
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let left_col = find(&schema.t_left)?;
    let right_col = find(&schema.t_right)?;
    let cov_names: Vec<String> = if schema.covariates.is_empty() {
        headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != left_col && *i != right_col)
            .map(|(_, h)| h.clone())
            .collect()
    } else {
        schema.covariates.clone()
    };
    let cov_cols = cov_names
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>, _>>()?;

    let mut observations = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let cell = |col: usize| record.get(col).unwrap_or("");
        let malformed = |col: usize| DataError::Malformed {
            row,
            column: headers[col].clone(),
            value: cell(col).to_string(),
        };
        let t_left = parse_time(cell(left_col), false).ok_or_else(|| malformed(left_col))?;
        let t_right = parse_time(cell(right_col), true).ok_or_else(|| malformed(right_col))?;
        let covariates = cov_cols
            .iter()
            .map(|&c| {
                cell(c)
                    .trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| malformed(c))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let obs = Observation::new(t_left, t_right, covariates).map_err(|e| DataError::Row {
            row,
            source: Box::new(e),
        })?;
        observations.push(obs);
    }
    if observations.is_empty() {
        return Err(DataError::Empty);
    }
    Dataset::new(observations, cov_names)
}

/// Writes a dataset as comma-separated text readable by [`load_dataset`]
/// with `Schema::new("t_left", "t_right", &[])`. Values use the shortest
/// representation that round-trips exactly.
pub fn write_dataset<W: Write>(data: &Dataset, sink: W) -> Result<(), DataError> {
    let mut writer = csv::Writer::from_writer(sink);
    let mut header = vec!["t_left".to_string(), "t_right".to_string()];
    header.extend(data.covariate_names.iter().cloned());
    writer.write_record(&header)?;
    for obs in &data.observations {
        let mut row = vec![format!("{:?}", obs.t_left)];
        row.push(if obs.t_right.is_infinite() {
            "inf".to_string()
        } else {
            format!("{:?}", obs.t_right)
        });
        row.extend(obs.covariates.iter().map(|v| format!("{v:?}")));
        writer.write_record(&row)?;
    }
    writer.flush().map_err(|e| DataError::Csv(e.to_string()))?;
    Ok(())
}
