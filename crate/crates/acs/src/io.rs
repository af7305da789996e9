//! CSV ingestion and result files.

use std::fs;
use std::io::Read;
use std::path::Path;

use acs_core::data::{DataError, Dataset, Fingerprint, PropertySet, Sample};
use acs_core::result::SelectionResult;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("header: {0}")]
    Header(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Where property sets come from.
#[derive(Debug, Clone, PartialEq)]
pub enum PropertySource {
    /// One set for every row.
    Global(PropertySet),
    /// Per-row bounds in these columns; `-inf` and `inf` are allowed.
    Columns { lo: String, hi: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvSchema {
    /// Covariate columns in order; `None` takes every column not claimed below.
    pub covariates: Option<Vec<String>>,
    pub outcome: String,
    pub fingerprint: Option<String>,
    pub group: Option<String>,
    /// Row identifier echoed into selection output.
    pub id: Option<String>,
    pub property: PropertySource,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            covariates: None,
            outcome: "y".into(),
            fingerprint: None,
            group: None,
            id: None,
            property: PropertySource::Global(PropertySet::at_most(0.0)),
        }
    }
}

/// Source row of a sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowInfo {
    pub line: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub dataset: Dataset,
    pub labeled_rows: Vec<RowInfo>,
    pub test_rows: Vec<RowInfo>,
    pub covariates: Vec<String>,
}

pub fn ingest_csv(path: &Path, schema: &CsvSchema) -> Result<Ingested, IngestError> {
    ingest_reader(fs::File::open(path)?, schema)
}

/// Rows with an outcome become labeled samples, rows with an empty outcome
/// cell become test samples; file order is kept within each partition.
pub fn ingest_reader(input: impl Read, schema: &CsvSchema) -> Result<Ingested, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let col = |name: &str| header.iter().position(|h| h == name).ok_or_else(|| IngestError::Header(format!("missing column {name:?}")));
    let outcome = col(&schema.outcome)?;
    let fingerprint = schema.fingerprint.as_deref().map(col).transpose()?;
    let group = schema.group.as_deref().map(col).transpose()?;
    let id = schema.id.as_deref().map(col).transpose()?;
    let bounds = match &schema.property {
        PropertySource::Global(_) => None,
        PropertySource::Columns { lo, hi } => Some((col(lo)?, col(hi)?)),
    };
    let claimed: Vec<usize> =
        [Some(outcome), fingerprint, group, id, bounds.map(|b| b.0), bounds.map(|b| b.1)].into_iter().flatten().collect();
    let covariates: Vec<usize> = match &schema.covariates {
        Some(names) => names.iter().map(|n| col(n)).collect::<Result<_, _>>()?,
        None => (0..header.len()).filter(|i| !claimed.contains(i)).collect(),
    };
    if covariates.is_empty() {
        return Err(IngestError::Header("no covariate columns".into()));
    }

    let (mut labeled, mut test) = (Vec::new(), Vec::new());
    let (mut labeled_rows, mut test_rows) = (Vec::new(), Vec::new());
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let err = |message: String| IngestError::Row { line, message };
        if record.len() != header.len() {
            return Err(err(format!("expected {} fields, found {}", header.len(), record.len())));
        }
        let num = |i: usize| -> Result<f64, IngestError> {
            let cell = &record[i];
            cell.parse::<f64>().map_err(|_| err(format!("column {:?}: cannot parse {cell:?} as a number", header[i])))
        };
        let x = covariates.iter().map(|&i| num(i)).collect::<Result<Vec<_>, _>>()?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(err("covariates must be finite".into()));
        }
        let y = if record[outcome].is_empty() { None } else { Some(num(outcome)?) };
        let property = match (&schema.property, bounds) {
            (PropertySource::Global(p), _) => *p,
            (_, Some((lo, hi))) => PropertySet::new(num(lo)?, num(hi)?).map_err(|e| err(e.to_string()))?,
            _ => unreachable!("bounds are resolved for column sources"),
        };
        let mut sample = Sample::new(x, y, property);
        if let Some(f) = fingerprint {
            sample = sample.with_fingerprint(Fingerprint::parse01(&record[f]).map_err(|e| err(e.to_string()))?);
        }
        if let Some(g) = group {
            sample = sample.with_group(&record[g]);
        }
        let info = RowInfo { line, id: id.map(|i| record[i].to_string()) };
        if y.is_some() {
            labeled.push(sample);
            labeled_rows.push(info);
        } else {
            test.push(sample);
            test_rows.push(info);
        }
    }
    let covariates = covariates.iter().map(|&i| header[i].clone()).collect();
    Ok(Ingested { dataset: Dataset::new(labeled, test)?, labeled_rows, test_rows, covariates })
}

/// A selection together with the source rows of the selected test units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub method: String,
    pub selected_rows: Vec<RowInfo>,
    pub result: SelectionResult,
}

impl SelectionReport {
    pub fn new(method: String, result: SelectionResult, test_rows: &[RowInfo]) -> Self {
        let selected_rows = result.selected.iter().map(|&i| test_rows[i].clone()).collect();
        Self { method, selected_rows, result }
    }
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> std::io::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)
}
