//! Plain-text parameter checkpoints.
//!
//! ```text
//! FTBAL-CKPT v1 <component>
//! <name> <rows> <cols>
//! <rows*cols values, 17 significant digits, row-major>
//! ...
//! ```

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

use super::{Matrix, ParamStore};

const MAGIC: &str = "FTBAL-CKPT v1";

pub fn to_string(store: &ParamStore, component: &str) -> String {
    let mut out = format!("{MAGIC} {component}\n");
    for (name, p) in store.iter() {
        let v = &p.value;
        writeln!(out, "{} {} {}", name, v.rows(), v.cols()).unwrap();
        for r in 0..v.rows() {
            let line: Vec<String> = v.row(r).iter().map(|x| format!("{x:.16e}")).collect();
            writeln!(out, "{}", line.join(" ")).unwrap();
        }
    }
    out
}

/// Parses `text` into `store`, validating component tag, names, and shapes.
pub fn load_into(text: &str, component: &str, store: &mut ParamStore) -> Result<()> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Checkpoint("empty checkpoint".into()))?;
    let tag = header
        .strip_prefix(MAGIC)
        .map(str::trim)
        .ok_or_else(|| Error::Checkpoint(format!("bad header `{header}`")))?;
    if tag != component {
        return Err(Error::Checkpoint(format!(
            "checkpoint is for `{tag}`, expected `{component}`"
        )));
    }
    let mut tokens = lines.flat_map(str::split_whitespace);
    let mut values = Vec::with_capacity(store.len());
    for (expected_name, p) in store.iter() {
        let name = tokens
            .next()
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{expected_name}`")))?;
        if name != expected_name {
            return Err(Error::Checkpoint(format!(
                "expected parameter `{expected_name}`, found `{name}`"
            )));
        }
        let mut dim = || -> Result<usize> {
            tokens
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("bad shape for `{name}`")))
        };
        let (rows, cols) = (dim()?, dim()?);
        if (rows, cols) != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "shape of `{name}` is {rows}x{cols}, expected {}x{}",
                p.value.rows(),
                p.value.cols()
            )));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let v: f64 = tokens
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("truncated values for `{name}`")))?;
            data.push(v);
        }
        values.push(Matrix::from_vec(rows, cols, data)?);
    }
    if let Some(extra) = tokens.next() {
        return Err(Error::Checkpoint(format!("trailing data starting at `{extra}`")));
    }
    store.set_values(&values)
}

pub fn save(path: &Path, store: &ParamStore, component: &str) -> Result<()> {
    std::fs::write(path, to_string(store, component)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path, component: &str, store: &mut ParamStore) -> Result<()> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    load_into(&text, component, store)
}
