//! Typed survival datasets with explicit missingness, CSV I/O and design
//! matrix encoding.
//!
//! A [`Dataset`] holds exactly one time column, one event column and any
//! number of continuous or categorical covariates. Missing cells are the
//! literal token `NA`; they are only allowed in covariate columns.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MISSING_TOKEN: &str = "NA";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("column `{0}` is not declared in the schema")]
    UndeclaredColumn(String),
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("row {row}, column `{column}`: non-numeric token `{token}`")]
    NonNumeric {
        row: usize,
        column: String,
        token: String,
    },
    #[error("row {row}, column `{column}`: empty cell (use `NA` for missing values)")]
    EmptyCell { row: usize, column: String },
    #[error("row {row}: `NA` is not allowed in {kind} column `{column}`")]
    MissingInSurvivalColumn {
        row: usize,
        column: String,
        kind: &'static str,
    },
    #[error("row {row}: event outside {{0,1}} (got `{token}`)")]
    EventOutOfRange { row: usize, token: String },
    #[error("row {row}: time must be finite and >= 0 (got `{token}`)")]
    InvalidTime { row: usize, token: String },
    #[error("row {row}: ragged record ({found} fields, expected {expected})")]
    Ragged {
        row: usize,
        found: usize,
        expected: usize,
    },
    #[error("missing value in covariate `{column}` at row {row}")]
    MissingCell { row: usize, column: String },
    #[error("column `{0}` has the wrong kind for this operation")]
    WrongKind(String),
    #[error("level `{level}` is not a level of column `{column}`")]
    UnknownLevel { column: String, level: String },
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Time,
    Event,
    Continuous,
    Categorical,
}

impl ColumnKind {
    fn label(self) -> &'static str {
        match self {
            ColumnKind::Time => "time",
            ColumnKind::Event => "event",
            ColumnKind::Continuous => "continuous",
            ColumnKind::Categorical => "categorical",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

/// Column-kind declaration, usually read from a TOML document:
///
/// ```toml
/// [[columns]]
/// name = "time"
/// kind = "time"
///
/// [[columns]]
/// name = "income"
/// kind = "categorical"
/// reference = "<11k"
/// ```
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub columns: Vec<ColumnSpec>,
}

impl Schema {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| DataError::Schema(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("schema serializes")
    }

    pub fn with(mut self, name: &str, kind: ColumnKind) -> Self {
        self.columns.push(ColumnSpec {
            name: name.to_string(),
            kind,
            reference: None,
        });
        self
    }

    pub fn with_reference(mut self, name: &str, reference: &str) -> Self {
        self.columns.push(ColumnSpec {
            name: name.to_string(),
            kind: ColumnKind::Categorical,
            reference: Some(reference.to_string()),
        });
        self
    }

    fn get(&self, name: &str) -> Option<&ColumnSpec> {
        self.columns.iter().find(|c| c.name == name)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for c in &self.columns {
            if !seen.insert(c.name.as_str()) {
                return Err(DataError::Schema(format!("column `{}` declared twice", c.name)));
            }
            if c.reference.is_some() && c.kind != ColumnKind::Categorical {
                return Err(DataError::Schema(format!(
                    "reference level given for non-categorical column `{}`",
                    c.name
                )));
            }
        }
        for kind in [ColumnKind::Time, ColumnKind::Event] {
            let count = self.columns.iter().filter(|c| c.kind == kind).count();
            if count != 1 {
                return Err(DataError::Schema(format!(
                    "exactly one {} column required, found {count}",
                    kind.label()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ColumnData {
    /// Time, event and continuous columns.
    Numeric(Vec<Option<f64>>),
    /// Codes index into `levels`; `levels` is in sorted label order.
    Categorical {
        values: Vec<Option<usize>>,
        levels: Vec<String>,
        reference: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
    pub data: ColumnData,
}

impl Column {
    pub fn numeric(name: &str, kind: ColumnKind, values: Vec<Option<f64>>) -> Self {
        debug_assert!(kind != ColumnKind::Categorical);
        Column {
            name: name.to_string(),
            kind,
            data: ColumnData::Numeric(values),
        }
    }

    pub fn categorical(
        name: &str,
        values: Vec<Option<usize>>,
        levels: Vec<String>,
        reference: usize,
    ) -> Self {
        Column {
            name: name.to_string(),
            kind: ColumnKind::Categorical,
            data: ColumnData::Categorical {
                values,
                levels,
                reference,
            },
        }
    }

    pub fn len(&self) -> usize {
        match &self.data {
            ColumnData::Numeric(v) => v.len(),
            ColumnData::Categorical { values, .. } => values.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_missing(&self, row: usize) -> bool {
        match &self.data {
            ColumnData::Numeric(v) => v[row].is_none(),
            ColumnData::Categorical { values, .. } => values[row].is_none(),
        }
    }

    pub fn missing_mask(&self) -> Vec<bool> {
        (0..self.len()).map(|r| self.is_missing(r)).collect()
    }

    pub fn missing_count(&self) -> usize {
        (0..self.len()).filter(|&r| self.is_missing(r)).count()
    }

    pub fn levels(&self) -> Option<&[String]> {
        match &self.data {
            ColumnData::Categorical { levels, .. } => Some(levels),
            ColumnData::Numeric(_) => None,
        }
    }

    /// Rendered cell, `NA` when missing.
    pub fn cell_text(&self, row: usize) -> String {
        match &self.data {
            ColumnData::Numeric(v) => match v[row] {
                None => MISSING_TOKEN.to_string(),
                Some(x) if self.kind == ColumnKind::Event => format!("{}", x as u8),
                Some(x) => format!("{x}"),
            },
            ColumnData::Categorical { values, levels, .. } => match values[row] {
                None => MISSING_TOKEN.to_string(),
                Some(code) => levels[code].clone(),
            },
        }
    }

    fn select(&self, rows: &[usize]) -> Column {
        let data = match &self.data {
            ColumnData::Numeric(v) => ColumnData::Numeric(rows.iter().map(|&r| v[r]).collect()),
            ColumnData::Categorical {
                values,
                levels,
                reference,
            } => ColumnData::Categorical {
                values: rows.iter().map(|&r| values[r]).collect(),
                levels: levels.clone(),
                reference: *reference,
            },
        };
        Column {
            name: self.name.clone(),
            kind: self.kind,
            data,
        }
    }
}

/// Survival dataset: time, event indicator and covariates, with a
/// missingness mask per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    columns: Vec<Column>,
    n_rows: usize,
    time_idx: usize,
    event_idx: usize,
}

impl Dataset {
    /// Builds a dataset and checks every invariant.
    pub fn from_columns(columns: Vec<Column>) -> Result<Self> {
        let n_rows = columns.first().map_or(0, Column::len);
        let mut time_idx = None;
        let mut event_idx = None;
        let mut names = BTreeSet::new();
        for (j, col) in columns.iter().enumerate() {
            if !names.insert(col.name.as_str()) {
                return Err(DataError::Schema(format!("duplicate column `{}`", col.name)));
            }
            if col.len() != n_rows {
                return Err(DataError::Schema(format!(
                    "column `{}` has {} rows, expected {n_rows}",
                    col.name,
                    col.len()
                )));
            }
            match (&col.kind, &col.data) {
                (ColumnKind::Categorical, ColumnData::Categorical { values, levels, reference }) => {
                    if !levels.is_empty() && *reference >= levels.len() {
                        return Err(DataError::Schema(format!(
                            "reference index out of range in `{}`",
                            col.name
                        )));
                    }
                    if let Some(bad) = values.iter().flatten().find(|&&c| c >= levels.len()) {
                        return Err(DataError::Schema(format!(
                            "code {bad} is not a level of `{}`",
                            col.name
                        )));
                    }
                }
                (ColumnKind::Categorical, _) | (_, ColumnData::Categorical { .. }) => {
                    return Err(DataError::WrongKind(col.name.clone()));
                }
                (kind, ColumnData::Numeric(values)) => {
                    for (row, v) in values.iter().enumerate() {
                        match (kind, v) {
                            (ColumnKind::Time | ColumnKind::Event, None) => {
                                return Err(DataError::MissingInSurvivalColumn {
                                    row,
                                    column: col.name.clone(),
                                    kind: kind.label(),
                                })
                            }
                            (ColumnKind::Time, Some(t)) if !t.is_finite() || *t < 0.0 => {
                                return Err(DataError::InvalidTime {
                                    row,
                                    token: t.to_string(),
                                })
                            }
                            (ColumnKind::Event, Some(e)) if *e != 0.0 && *e != 1.0 => {
                                return Err(DataError::EventOutOfRange {
                                    row,
                                    token: e.to_string(),
                                })
                            }
                            (ColumnKind::Continuous, Some(x)) if !x.is_finite() => {
                                return Err(DataError::NonNumeric {
                                    row,
                                    column: col.name.clone(),
                                    token: x.to_string(),
                                })
                            }
                            _ => {}
                        }
                    }
                    match kind {
                        ColumnKind::Time if time_idx.replace(j).is_some() => {
                            return Err(DataError::Schema("more than one time column".into()))
                        }
                        ColumnKind::Event if event_idx.replace(j).is_some() => {
                            return Err(DataError::Schema("more than one event column".into()))
                        }
                        _ => {}
                    }
                }
            }
        }
        let time_idx = time_idx.ok_or_else(|| DataError::Schema("no time column".into()))?;
        let event_idx = event_idx.ok_or_else(|| DataError::Schema("no event column".into()))?;
        Ok(Dataset {
            columns,
            n_rows,
            time_idx,
            event_idx,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column(&self, name: &str) -> Result<&Column> {
        self.columns
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| DataError::UnknownColumn(name.to_string()))
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| DataError::UnknownColumn(name.to_string()))
    }

    pub fn time_name(&self) -> &str {
        &self.columns[self.time_idx].name
    }

    pub fn event_name(&self) -> &str {
        &self.columns[self.event_idx].name
    }

    pub fn times(&self) -> Vec<f64> {
        self.numeric_unchecked(self.time_idx)
    }

    pub fn events(&self) -> Vec<bool> {
        self.numeric_unchecked(self.event_idx)
            .into_iter()
            .map(|e| e == 1.0)
            .collect()
    }

    fn numeric_unchecked(&self, idx: usize) -> Vec<f64> {
        match &self.columns[idx].data {
            ColumnData::Numeric(v) => v.iter().map(|x| x.expect("validated non-missing")).collect(),
            ColumnData::Categorical { .. } => unreachable!("time/event columns are numeric"),
        }
    }

    /// Names of continuous and categorical columns, in column order.
    pub fn covariate_names(&self) -> Vec<String> {
        self.columns
            .iter()
            .filter(|c| matches!(c.kind, ColumnKind::Continuous | ColumnKind::Categorical))
            .map(|c| c.name.clone())
            .collect()
    }

    /// Covariates without any missing cell.
    pub fn fully_observed_covariates(&self) -> Vec<String> {
        self.columns
            .iter()
            .filter(|c| matches!(c.kind, ColumnKind::Continuous | ColumnKind::Categorical))
            .filter(|c| c.missing_count() == 0)
            .map(|c| c.name.clone())
            .collect()
    }

    pub fn missing_mask(&self, name: &str) -> Result<Vec<bool>> {
        Ok(self.column(name)?.missing_mask())
    }

    /// Observation indicator of a column: `true` where the cell is present.
    pub fn observed(&self, name: &str) -> Result<Vec<bool>> {
        Ok(self.missing_mask(name)?.into_iter().map(|m| !m).collect())
    }

    /// Categorical codes of a column.
    pub fn categorical(&self, name: &str) -> Result<(&[Option<usize>], &[String], usize)> {
        match &self.column(name)?.data {
            ColumnData::Categorical {
                values,
                levels,
                reference,
            } => Ok((values, levels, *reference)),
            ColumnData::Numeric(_) => Err(DataError::WrongKind(name.to_string())),
        }
    }

    /// Numeric values of a time, event or continuous column.
    pub fn numeric(&self, name: &str) -> Result<&[Option<f64>]> {
        match &self.column(name)?.data {
            ColumnData::Numeric(v) => Ok(v),
            ColumnData::Categorical { .. } => Err(DataError::WrongKind(name.to_string())),
        }
    }

    /// Subset of rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            columns: self.columns.iter().map(|c| c.select(rows)).collect(),
            n_rows: rows.len(),
            time_idx: self.time_idx,
            event_idx: self.event_idx,
        }
    }

    /// Replaces the codes of a categorical column, keeping its level list.
    pub fn with_categorical_values(&self, name: &str, new_values: Vec<Option<usize>>) -> Result<Dataset> {
        let idx = self.column_index(name)?;
        let mut columns = self.columns.clone();
        match &mut columns[idx].data {
            ColumnData::Categorical { values, levels, .. } => {
                if new_values.len() != self.n_rows {
                    return Err(DataError::Schema("replacement column has wrong length".into()));
                }
                if let Some(&bad) = new_values.iter().flatten().find(|&&c| c >= levels.len()) {
                    return Err(DataError::UnknownLevel {
                        column: name.to_string(),
                        level: bad.to_string(),
                    });
                }
                *values = new_values;
            }
            ColumnData::Numeric(_) => return Err(DataError::WrongKind(name.to_string())),
        }
        Ok(Dataset {
            columns,
            ..self.clone()
        })
    }

    /// Sets the listed rows of a column to missing.
    pub fn with_missing(&self, name: &str, missing: &[bool]) -> Result<Dataset> {
        let idx = self.column_index(name)?;
        let col = &self.columns[idx];
        if matches!(col.kind, ColumnKind::Time | ColumnKind::Event) {
            return Err(DataError::MissingInSurvivalColumn {
                row: 0,
                column: name.to_string(),
                kind: col.kind.label(),
            });
        }
        let mut columns = self.columns.clone();
        match &mut columns[idx].data {
            ColumnData::Numeric(v) => {
                for (cell, &m) in v.iter_mut().zip(missing) {
                    if m {
                        *cell = None;
                    }
                }
            }
            ColumnData::Categorical { values, .. } => {
                for (cell, &m) in values.iter_mut().zip(missing) {
                    if m {
                        *cell = None;
                    }
                }
            }
        }
        Ok(Dataset {
            columns,
            ..self.clone()
        })
    }

    /// Appends a column (e.g. an observation indicator).
    pub fn with_column(&self, column: Column) -> Result<Dataset> {
        let mut columns = self.columns.clone();
        columns.push(column);
        Dataset::from_columns(columns)
    }

    /// Schema reproducing this dataset's kinds and reference levels.
    pub fn schema(&self) -> Schema {
        Schema {
            columns: self
                .columns
                .iter()
                .map(|c| ColumnSpec {
                    name: c.name.clone(),
                    kind: c.kind,
                    reference: match &c.data {
                        ColumnData::Categorical { levels, reference, .. } if !levels.is_empty() => {
                            Some(levels[*reference].clone())
                        }
                        _ => None,
                    },
                })
                .collect(),
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(self.columns.iter().map(|c| c.name.as_str()))?;
        for row in 0..self.n_rows {
            w.write_record(self.columns.iter().map(|c| c.cell_text(row)))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(File::create(path)?)
    }
}

/// Guesses a schema from a CSV: the named time and event columns, numeric
/// columns as continuous and everything else as categorical.
pub fn infer_schema<R: Read>(reader: R, time: &str, event: &str) -> Result<Schema> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    for name in [time, event] {
        if !header.iter().any(|h| h == name) {
            return Err(DataError::UnknownColumn(name.to_string()));
        }
    }
    let mut numeric = vec![true; header.len()];
    for record in rdr.records() {
        for (j, field) in record?.iter().enumerate().take(header.len()) {
            let f = field.trim();
            if f != MISSING_TOKEN && f.parse::<f64>().is_err() {
                numeric[j] = false;
            }
        }
    }
    let mut schema = Schema::default();
    for (name, numeric) in header.iter().zip(numeric) {
        let kind = if name == time {
            ColumnKind::Time
        } else if name == event {
            ColumnKind::Event
        } else if numeric {
            ColumnKind::Continuous
        } else {
            ColumnKind::Categorical
        };
        schema = schema.with(name, kind);
    }
    Ok(schema)
}

pub fn infer_schema_file(path: impl AsRef<Path>, time: &str, event: &str) -> Result<Schema> {
    infer_schema(File::open(path)?, time, event)
}

/// Reads a CSV file against a schema.
pub fn load_dataset(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    read_dataset(File::open(path)?, schema)
}

pub fn read_dataset<R: Read>(reader: R, schema: &Schema) -> Result<Dataset> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    for name in &header {
        if schema.get(name).is_none() {
            return Err(DataError::UndeclaredColumn(name.clone()));
        }
    }
    for spec in &schema.columns {
        if !header.contains(&spec.name) {
            return Err(DataError::UnknownColumn(spec.name.clone()));
        }
    }

    let mut raw: Vec<Vec<String>> = vec![Vec::new(); header.len()];
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        if record.len() != header.len() {
            return Err(DataError::Ragged {
                row,
                found: record.len(),
                expected: header.len(),
            });
        }
        for (j, field) in record.iter().enumerate() {
            raw[j].push(field.trim().to_string());
        }
    }

    let columns = header
        .iter()
        .zip(raw)
        .map(|(name, cells)| {
            let spec = schema.get(name).expect("checked above");
            parse_column(spec, cells)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::from_columns(columns)
}

fn parse_column(spec: &ColumnSpec, cells: Vec<String>) -> Result<Column> {
    let name = spec.name.as_str();
    for (row, cell) in cells.iter().enumerate() {
        if cell.is_empty() {
            return Err(DataError::EmptyCell {
                row,
                column: name.to_string(),
            });
        }
    }
    match spec.kind {
        ColumnKind::Categorical => {
            let levels: Vec<String> = cells
                .iter()
                .filter(|c| c.as_str() != MISSING_TOKEN)
                .cloned()
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            let reference = match &spec.reference {
                None => 0,
                Some(r) => levels.iter().position(|l| l == r).ok_or_else(|| DataError::UnknownLevel {
                    column: name.to_string(),
                    level: r.clone(),
                })?,
            };
            let values = cells
                .iter()
                .map(|c| {
                    (c != MISSING_TOKEN).then(|| levels.binary_search(c).expect("level collected"))
                })
                .collect();
            Ok(Column::categorical(name, values, levels, reference))
        }
        kind => {
            let values = cells
                .iter()
                .enumerate()
                .map(|(row, c)| {
                    if c == MISSING_TOKEN {
                        return match kind {
                            ColumnKind::Time | ColumnKind::Event => Err(DataError::MissingInSurvivalColumn {
                                row,
                                column: name.to_string(),
                                kind: kind.label(),
                            }),
                            _ => Ok(None),
                        };
                    }
                    let v: f64 = c.parse().map_err(|_| DataError::NonNumeric {
                        row,
                        column: name.to_string(),
                        token: c.clone(),
                    })?;
                    match kind {
                        ColumnKind::Event if v != 0.0 && v != 1.0 => Err(DataError::EventOutOfRange {
                            row,
                            token: c.clone(),
                        }),
                        ColumnKind::Time if !v.is_finite() || v < 0.0 => Err(DataError::InvalidTime {
                            row,
                            token: c.clone(),
                        }),
                        ColumnKind::Continuous if !v.is_finite() => Err(DataError::NonNumeric {
                            row,
                            column: name.to_string(),
                            token: c.clone(),
                        }),
                        _ => Ok(Some(v)),
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Column::numeric(name, kind, values))
        }
    }
}

/// How one covariate maps onto design columns.
#[derive(Debug, Clone, PartialEq)]
pub enum Term {
    Continuous {
        variable: String,
        column: usize,
    },
    Categorical {
        variable: String,
        levels: Vec<String>,
        reference: usize,
        /// Dummy columns, one per non-reference level in level order.
        columns: Range<usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub matrix: DMatrix<f64>,
    pub names: Vec<String>,
    pub terms: Vec<Term>,
}

impl DesignMatrix {
    pub fn n_rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.matrix.ncols()
    }

    /// Appends a numeric column.
    pub fn push_column(&mut self, name: &str, values: &[f64]) {
        let j = self.matrix.ncols();
        let n = self.matrix.nrows();
        let m = std::mem::replace(&mut self.matrix, DMatrix::zeros(0, 0));
        let mut m = m.insert_column(j, 0.0);
        for (i, &v) in values.iter().enumerate().take(n) {
            m[(i, j)] = v;
        }
        self.matrix = m;
        self.names.push(name.to_string());
        self.terms.push(Term::Continuous {
            variable: name.to_string(),
            column: j,
        });
    }

    pub fn select_rows(&self, rows: &[usize]) -> DesignMatrix {
        DesignMatrix {
            matrix: self.matrix.select_rows(rows),
            names: self.names.clone(),
            terms: self.terms.clone(),
        }
    }
}

/// Name of the dummy column for a categorical level.
pub fn dummy_name(variable: &str, level: &str) -> String {
    format!("{variable}[{level}]")
}

/// Builds the numeric design for the named covariates. Categorical columns
/// expand to one 0/1 dummy per non-reference level.
pub fn encode<S: AsRef<str>>(dataset: &Dataset, covariates: &[S]) -> Result<DesignMatrix> {
    let n = dataset.n_rows();
    let mut names = Vec::new();
    let mut terms = Vec::new();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for cov in covariates {
        let cov = cov.as_ref();
        let col = dataset.column(cov)?;
        if let Some(row) = (0..n).find(|&r| col.is_missing(r)) {
            return Err(DataError::MissingCell {
                row,
                column: cov.to_string(),
            });
        }
        match &col.data {
            ColumnData::Numeric(v) => {
                terms.push(Term::Continuous {
                    variable: cov.to_string(),
                    column: cols.len(),
                });
                names.push(cov.to_string());
                cols.push(v.iter().map(|x| x.expect("checked non-missing")).collect());
            }
            ColumnData::Categorical {
                values,
                levels,
                reference,
            } => {
                let start = cols.len();
                for (k, level) in levels.iter().enumerate() {
                    if k == *reference {
                        continue;
                    }
                    names.push(dummy_name(cov, level));
                    cols.push(
                        values
                            .iter()
                            .map(|c| if c.expect("checked non-missing") == k { 1.0 } else { 0.0 })
                            .collect(),
                    );
                }
                terms.push(Term::Categorical {
                    variable: cov.to_string(),
                    levels: levels.clone(),
                    reference: *reference,
                    columns: start..cols.len(),
                });
            }
        }
    }
    let matrix = DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]);
    Ok(DesignMatrix {
        matrix,
        names,
        terms,
    })
}
