//! Tabular data: typed columns read from CSV with a header row.

use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("I/O error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("CSV parse error: {0}")]
    Csv(#[from] csv::Error),
    #[error("column '{column}' not found (available: {available})")]
    MissingColumn { column: String, available: String },
    #[error("column '{column}' is not numeric (first offending value '{value}' at data line {line})")]
    NotNumeric { column: String, value: String, line: usize },
    #[error("empty table: no data rows")]
    Empty,
    #[error("ragged CSV: row at line {line} has {got} fields, expected {expected}")]
    Ragged { line: usize, got: usize, expected: usize },
}

/// A column, sniffed as numeric when every entry parses as f64.
#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Numeric(Vec<f64>),
    Text(Vec<String>),
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Numeric(v) => v.len(),
            Column::Text(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A named-column table. Column order follows the source header.
#[derive(Debug, Clone, Default)]
pub struct Table {
    names: Vec<String>,
    columns: BTreeMap<String, Column>,
    n_rows: usize,
}

impl Table {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn column_names(&self) -> &[String] {
        &self.names
    }

    pub fn push_numeric(&mut self, name: &str, values: Vec<f64>) {
        if self.names.is_empty() {
            self.n_rows = values.len();
        }
        self.names.push(name.to_string());
        self.columns.insert(name.to_string(), Column::Numeric(values));
    }

    pub fn push_text(&mut self, name: &str, values: Vec<String>) {
        if self.names.is_empty() {
            self.n_rows = values.len();
        }
        self.names.push(name.to_string());
        self.columns.insert(name.to_string(), Column::Text(values));
    }

    pub fn column(&self, name: &str) -> Result<&Column, DataError> {
        self.columns.get(name).ok_or_else(|| DataError::MissingColumn {
            column: name.to_string(),
            available: self.names.join(", "),
        })
    }

    /// Numeric view of a column; text columns are an error naming the column.
    pub fn numeric(&self, name: &str) -> Result<&[f64], DataError> {
        match self.column(name)? {
            Column::Numeric(v) => Ok(v),
            Column::Text(v) => {
                let value = v.first().cloned().unwrap_or_default();
                Err(DataError::NotNumeric { column: name.to_string(), value, line: 2 })
            }
        }
    }

    pub fn text(&self, name: &str) -> Result<Vec<String>, DataError> {
        match self.column(name)? {
            Column::Text(v) => Ok(v.clone()),
            Column::Numeric(v) => Ok(v.iter().map(|x| format!("{x}")).collect()),
        }
    }

    /// Read a CSV file with a header row, sniffing column types.
    pub fn read_csv(path: &Path) -> Result<Self, DataError> {
        let file = std::fs::File::open(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
        let headers: Vec<String> =
            reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
        let mut raw: Vec<Vec<String>> = vec![Vec::new(); headers.len()];
        for (row_idx, record) in reader.records().enumerate() {
            let record = record?;
            if record.len() != headers.len() {
                return Err(DataError::Ragged {
                    line: row_idx + 2,
                    got: record.len(),
                    expected: headers.len(),
                });
            }
            for (j, field) in record.iter().enumerate() {
                raw[j].push(field.trim().to_string());
            }
        }
        if raw.first().map_or(true, |c| c.is_empty()) {
            return Err(DataError::Empty);
        }

        let mut table = Table::new();
        table.n_rows = raw[0].len();
        for (name, values) in headers.iter().zip(raw) {
            let parsed: Result<Vec<f64>, usize> = values
                .iter()
                .enumerate()
                .map(|(i, s)| s.parse::<f64>().map_err(|_| i))
                .collect();
            match parsed {
                Ok(nums) => {
                    table.names.push(name.clone());
                    table.columns.insert(name.clone(), Column::Numeric(nums));
                }
                Err(_) => {
                    table.names.push(name.clone());
                    table.columns.insert(name.clone(), Column::Text(values));
                }
            }
        }
        Ok(table)
    }

    /// Rows at `idx` (with repetition allowed), preserving column types.
    pub fn select_rows(&self, idx: &[usize]) -> Table {
        let mut out = Table::new();
        out.n_rows = idx.len();
        for name in &self.names {
            match &self.columns[name] {
                Column::Numeric(v) => {
                    out.names.push(name.clone());
                    out.columns.insert(
                        name.clone(),
                        Column::Numeric(idx.iter().map(|&i| v[i]).collect()),
                    );
                }
                Column::Text(v) => {
                    out.names.push(name.clone());
                    out.columns.insert(
                        name.clone(),
                        Column::Text(idx.iter().map(|&i| v[i].clone()).collect()),
                    );
                }
            }
        }
        out
    }
}

/// Format an f64 with 17 significant digits so the printed value reparses to
/// the identical bits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}
