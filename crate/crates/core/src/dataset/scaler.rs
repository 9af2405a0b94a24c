use serde::{Deserialize, Serialize};

use super::Trace;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleMode {
    Minmax,
    Zscore,
}

/// Per-column affine map. For min-max `offset = min`, `spread = max − min`;
/// for z-score `offset = mean`, `spread = std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnScale {
    pub name: String,
    pub offset: f64,
    pub spread: f64,
    /// Constant column: every value maps to 0.
    pub degenerate: bool,
}

impl ColumnScale {
    pub fn scale(&self, x: f64) -> f64 {
        if self.degenerate {
            0.0
        } else {
            (x - self.offset) / self.spread
        }
    }

    pub fn unscale(&self, y: f64) -> f64 {
        if self.degenerate {
            self.offset
        } else {
            y * self.spread + self.offset
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mode: ScaleMode,
    pub columns: Vec<ColumnScale>,
}

/// Fits per-column statistics. Call on training rows only.
pub fn fit_scaler(trace: &Trace, mode: ScaleMode) -> Result<Scaler> {
    if trace.is_empty() {
        return Err(Error::Data("cannot fit a scaler on an empty trace".into()));
    }
    let mut columns = Vec::with_capacity(trace.columns().len());
    for (c, name) in trace.columns().iter().enumerate() {
        let values: Vec<f64> = trace.records().iter().filter_map(|r| r.values[c]).collect();
        if values.is_empty() {
            return Err(Error::Data(format!("column `{name}` has no values to fit")));
        }
        let (offset, spread) = match mode {
            ScaleMode::Minmax => {
                let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
                let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                (min, max - min)
            }
            ScaleMode::Zscore => {
                let n = values.len() as f64;
                let mean = values.iter().sum::<f64>() / n;
                let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                (mean, var.sqrt())
            }
        };
        columns.push(ColumnScale {
            name: name.clone(),
            offset,
            spread,
            degenerate: spread <= 0.0,
        });
    }
    Ok(Scaler { mode, columns })
}

impl Scaler {
    pub fn column(&self, name: &str) -> Result<&ColumnScale> {
        self.columns
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    fn map(&self, trace: &Trace, f: impl Fn(&ColumnScale, f64) -> f64) -> Result<Trace> {
        let idx: Vec<usize> = self
            .columns
            .iter()
            .map(|c| trace.column_index(&c.name))
            .collect::<Result<_>>()?;
        let mut out = trace.clone();
        for r in out.records_mut() {
            for (cs, &i) in self.columns.iter().zip(&idx) {
                r.values[i] = r.values[i].map(|v| f(cs, v));
            }
        }
        Ok(out)
    }

    pub fn apply(&self, trace: &Trace) -> Result<Trace> {
        self.map(trace, ColumnScale::scale)
    }

    pub fn invert(&self, trace: &Trace) -> Result<Trace> {
        self.map(trace, ColumnScale::unscale)
    }
}
