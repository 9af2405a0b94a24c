use serde::{Deserialize, Serialize};

use super::Trace;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CleanConfig {
    /// Centered rolling window for the median/MAD outlier detector.
    pub window: usize,
    /// Outlier threshold in MADs.
    pub k: f64,
    /// Columns imputed but never screened for outliers (sparse counts whose
    /// median absolute deviation is zero almost everywhere).
    pub outlier_exempt: Vec<String>,
}

impl Default for CleanConfig {
    fn default() -> Self {
        Self {
            window: 9,
            k: 5.0,
            outlier_exempt: vec!["Packet_loss".into()],
        }
    }
}

const MAX_PASSES: usize = 64;

/// Imputes missing values and replaces outliers per link and column.
///
/// Outliers are points farther than `k` rolling MADs from the rolling median;
/// they and missing cells are replaced by the mean of the nearest valid
/// predecessor and successor (nearest valid neighbor at the series ends).
/// Detection repeats until a pass finds nothing, so the result is a fixpoint.
pub fn clean(trace: &Trace, cfg: &CleanConfig) -> Result<Trace> {
    let mut out = trace.clone();
    let groups: Vec<_> = trace.link_groups().into_iter().map(|(id, r)| (id.to_string(), r)).collect();
    let columns = trace.columns().to_vec();
    for (link, range) in groups {
        if range.len() < 3 {
            return Err(Error::Data(format!(
                "link {link} has {} records; cleaning needs at least 3",
                range.len()
            )));
        }
        for (c, name) in columns.iter().enumerate() {
            let series: Vec<Option<f64>> = out.records()[range.clone()].iter().map(|r| r.values[c]).collect();
            let screen = !cfg.outlier_exempt.contains(name);
            let cleaned = clean_series(&series, cfg, screen).ok_or_else(|| Error::Cleaning(name.clone()))?;
            for (r, v) in out.records_mut()[range.clone()].iter_mut().zip(cleaned) {
                r.values[c] = Some(v);
            }
        }
    }
    Ok(out)
}

/// Cleans one series; `None` when no value is present.
pub fn clean_series(series: &[Option<f64>], cfg: &CleanConfig, screen_outliers: bool) -> Option<Vec<f64>> {
    let mut current = impute(series)?;
    if !screen_outliers {
        return Some(current);
    }
    // only points whose window changed in the last pass can change their verdict
    let mut dirty = vec![true; current.len()];
    let half = cfg.window / 2;
    for _ in 0..MAX_PASSES {
        let flagged = outliers(&current, cfg.window, cfg.k, &dirty);
        if flagged.iter().all(|f| !f) {
            break;
        }
        let masked: Vec<Option<f64>> = current
            .iter()
            .zip(&flagged)
            .map(|(&v, &f)| if f { None } else { Some(v) })
            .collect();
        // A series that is entirely outliers cannot happen: the median point is never flagged.
        current = impute(&masked)?;
        dirty.fill(false);
        for i in flagged.iter().enumerate().filter(|(_, f)| **f).map(|(i, _)| i) {
            let hi = (i + half + 1).min(dirty.len());
            dirty[i.saturating_sub(half)..hi].fill(true);
        }
    }
    Some(current)
}

fn impute(series: &[Option<f64>]) -> Option<Vec<f64>> {
    if series.iter().all(Option::is_none) {
        return None;
    }
    let n = series.len();
    let mut prev = vec![None; n];
    let mut last = None;
    for i in 0..n {
        prev[i] = last;
        if series[i].is_some() {
            last = series[i];
        }
    }
    let mut next = vec![None; n];
    last = None;
    for i in (0..n).rev() {
        next[i] = last;
        if series[i].is_some() {
            last = series[i];
        }
    }
    Some(
        (0..n)
            .map(|i| match (series[i], prev[i], next[i]) {
                (Some(v), _, _) => v,
                (None, Some(a), Some(b)) => (a + b) / 2.0,
                (None, Some(a), None) | (None, None, Some(a)) => a,
                (None, None, None) => unreachable!("series has at least one value"),
            })
            .collect(),
    )
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

fn outliers(series: &[f64], window: usize, k: f64, check: &[bool]) -> Vec<bool> {
    let half = window / 2;
    let n = series.len();
    let mut buf = Vec::with_capacity(window);
    (0..n)
        .map(|i| {
            if !check[i] {
                return false;
            }
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            buf.clear();
            buf.extend_from_slice(&series[lo..hi]);
            let med = median(&mut buf);
            for v in buf.iter_mut() {
                *v = (*v - med).abs();
            }
            let mad = median(&mut buf);
            (series[i] - med).abs() > k * mad
        })
        .collect()
}
