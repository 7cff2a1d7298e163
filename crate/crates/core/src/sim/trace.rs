//! Column-oriented simulation trace with a deterministic CSV encoding.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::linalg::fmt17;

/// Time-indexed numeric table. Every row has one value per column.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimTrace {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl SimTrace {
    pub fn new(columns: Vec<String>) -> Self {
        SimTrace { columns, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::DimensionMismatch(format!(
                "trace row has {} values for {} columns",
                row.len(),
                self.columns.len()
            )));
        }
        if let Some(pos) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState(format!("trace column {}", self.columns[pos])));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.index(name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    /// Column values, or an error naming the missing column.
    pub fn require(&self, name: &str) -> Result<Vec<f64>> {
        self.column(name)
            .ok_or_else(|| Error::Scenario(format!("trace has no column `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let io = |e: csv::Error| Error::Scenario(format!("writing trace: {e}"));
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.columns).map_err(io)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| fmt17(*v))).map_err(io)?;
        }
        w.flush().map_err(|e| Error::Scenario(format!("writing trace: {e}")))
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Scenario(e.to_string()))
    }

    /// Parses a trace; errors carry the 1-based line number.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let columns: Vec<String> = r
            .headers()
            .map_err(|e| Error::Scenario(format!("trace header: {e}")))?
            .iter()
            .map(str::to_owned)
            .collect();
        if columns.is_empty() || columns[0] != "t" {
            return Err(Error::Scenario("trace header must start with `t`".into()));
        }
        let mut trace = SimTrace::new(columns);
        for (n, record) in r.records().enumerate() {
            let line = n + 2;
            let record = record.map_err(|e| Error::Scenario(format!("trace line {line}: {e}")))?;
            let row = record
                .iter()
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Scenario(format!("trace line {line}: `{s}` is not a number")))
                })
                .collect::<Result<Vec<f64>>>()?;
            trace
                .push(row)
                .map_err(|e| Error::Scenario(format!("trace line {line}: {e}")))?;
        }
        Ok(trace)
    }
}
