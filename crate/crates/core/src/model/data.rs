use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// `n` i.i.d. observations of a `d`-variate vector, one row per observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    observations: DMatrix<f64>,
}

impl Dataset {
    pub fn new(observations: DMatrix<f64>) -> Result<Self> {
        if observations.nrows() == 0 || observations.ncols() == 0 {
            return Err(Error::InvalidInput("dataset must contain at least one observation and one variate".into()));
        }
        if let Some(pos) = observations.iter().position(|x| !x.is_finite()) {
            let (r, c) = (pos % observations.nrows(), pos / observations.nrows());
            return Err(Error::InvalidInput(format!("non-finite entry at row {r}, column {c}")));
        }
        Ok(Self { observations })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidInput("ragged rows".into()));
        }
        Self::new(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
    }

    pub fn n(&self) -> usize {
        self.observations.nrows()
    }

    pub fn d(&self) -> usize {
        self.observations.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.observations
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.observations.row(i).iter().copied().collect()
    }

    pub fn column_means(&self) -> Vec<f64> {
        (0..self.d()).map(|j| self.observations.column(j).mean()).collect()
    }

    /// Reads a numeric CSV, rows = observations. A first row that does not parse as
    /// numbers is treated as a header.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (idx, record) in rdr.records().enumerate() {
            let record = record?;
            let line = record.position().map(|p| p.line()).unwrap_or(idx as u64 + 1);
            let parsed: std::result::Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
            match parsed {
                Ok(row) => rows.push(row),
                Err(_) if idx == 0 => continue,
                Err(e) => {
                    return Err(Error::Parse {
                        line,
                        message: format!("non-numeric field: {e}"),
                    })
                }
            }
            if !rows.last().is_some_and(|r| r.iter().all(|x| x.is_finite())) {
                return Err(Error::Parse {
                    line,
                    message: "non-finite value".into(),
                });
            }
        }
        if rows.is_empty() {
            return Err(Error::Parse {
                line: 0,
                message: "no data rows".into(),
            });
        }
        Self::from_rows(&rows)
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_csv_reader(file)
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        for i in 0..self.n() {
            wtr.write_record(self.observations.row(i).iter().map(|x| format!("{x:e}")))?;
        }
        wtr.flush()?;
        Ok(())
    }
}
