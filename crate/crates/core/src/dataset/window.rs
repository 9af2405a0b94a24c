use std::collections::BTreeMap;
use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use super::{Record, Trace, TARGET};
use crate::error::{Error, Result};
use crate::nn::Matrix;

/// Splits by time index: the first `floor(fraction · steps)` distinct time
/// steps form the training side, the rest validation.
pub fn split_by_time(trace: &Trace, fraction: f64) -> Result<(Trace, Trace)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction {fraction} must be in (0, 1)")));
    }
    let steps = trace.time_steps();
    let n_train = (fraction * steps.len() as f64).floor() as usize;
    if n_train == 0 || n_train == steps.len() {
        return Err(Error::Data(format!(
            "split fraction {fraction} over {} time steps leaves one side empty",
            steps.len()
        )));
    }
    let cut = steps[n_train];
    Ok((
        trace.filter(|r| r.time_index < cut),
        trace.filter(|r| r.time_index >= cut),
    ))
}

/// Index 0 of every static dictionary is reserved for unseen categories.
pub const UNKNOWN: usize = 0;

pub const STATIC_COLUMNS: [&str; 4] = ["Link_id", "Eth_dst", "In_port", "Out_port"];

/// Stable category dictionaries for the static covariates, ordered by first
/// appearance in the training trace.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryDict {
    pub vocab: [Vec<String>; 4],
}

fn static_values(r: &Record) -> [&str; 4] {
    [&r.link_id, &r.eth_dst, &r.in_port, &r.out_port]
}

impl CategoryDict {
    pub fn fit(trace: &Trace) -> Self {
        let mut vocab: [Vec<String>; 4] = Default::default();
        for r in trace.records() {
            for (v, s) in vocab.iter_mut().zip(static_values(r)) {
                if !v.iter().any(|x| x == s) {
                    v.push(s.to_string());
                }
            }
        }
        Self { vocab }
    }

    /// Table sizes including the UNKNOWN row.
    pub fn sizes(&self) -> [usize; 4] {
        [0, 1, 2, 3].map(|i| self.vocab[i].len() + 1)
    }

    pub fn encode(&self, r: &Record) -> [usize; 4] {
        let vals = static_values(r);
        [0, 1, 2, 3].map(|i| {
            self.vocab[i]
                .iter()
                .position(|x| x == vals[i])
                .map_or(UNKNOWN, |p| p + 1)
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub enc_len: usize,
    pub pred_len: usize,
    pub stride: usize,
    /// Observed columns fed to the encoder (the target is always included first).
    pub encoder_columns: Vec<String>,
    /// Periods (in steps) of the sin/cos calendar features known in advance.
    pub known_periods: Vec<f64>,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            enc_len: 24,
            pred_len: 12,
            stride: 1,
            encoder_columns: [
                "Byte_count",
                "Tx_bitrate",
                "Rx_bitrate",
                "Packet_loss",
                "Tx_bandwidth_utilization",
                "Rx_bandwidth_utilization",
                "Tx_avg_packet_size",
                "Flow_count",
                "Latency",
            ]
            .map(String::from)
            .to_vec(),
            known_periods: vec![24.0, 144.0],
        }
    }
}

impl WindowConfig {
    pub fn observed_columns(&self) -> Vec<String> {
        let mut cols = vec![TARGET.to_string()];
        cols.extend(self.encoder_columns.iter().filter(|c| *c != TARGET).cloned());
        cols
    }

    pub fn known_labels(&self) -> Vec<String> {
        self.known_periods
            .iter()
            .flat_map(|p| [format!("sin_{p}"), format!("cos_{p}")])
            .collect()
    }

    /// Encoder feature labels: observed columns then known calendar features.
    pub fn encoder_labels(&self) -> Vec<String> {
        let mut labels = self.observed_columns();
        labels.extend(self.known_labels());
        labels
    }

    pub fn known_features(&self, time_index: i64) -> Vec<f64> {
        self.known_periods
            .iter()
            .flat_map(|&p| {
                let angle = TAU * time_index as f64 / p;
                [angle.sin(), angle.cos()]
            })
            .collect()
    }
}

/// One training/evaluation example for the forecasters.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastWindow {
    pub link_id: String,
    /// Time index of the first predicted step.
    pub start_time: i64,
    /// `[enc_len × (observed + known)]`.
    pub encoder: Matrix,
    /// `[pred_len × known]`.
    pub decoder_known: Matrix,
    pub static_ids: [usize; 4],
    /// Target values for the `pred_len` predicted steps.
    pub target: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct WindowSet {
    pub windows: Vec<ForecastWindow>,
    /// Links too short to yield a single window.
    pub skipped_links: Vec<String>,
}

impl WindowSet {
    pub fn warnings(&self) -> usize {
        self.skipped_links.len()
    }
}

/// Column indices a [`WindowConfig`] reads from a trace.
#[derive(Clone, Debug)]
pub struct WindowColumns {
    observed: Vec<usize>,
    target: usize,
}

impl WindowColumns {
    pub fn resolve(trace: &Trace, cfg: &WindowConfig) -> Result<Self> {
        Ok(Self {
            observed: cfg
                .observed_columns()
                .iter()
                .map(|c| trace.column_index(c))
                .collect::<Result<_>>()?,
            target: trace.column_index(TARGET)?,
        })
    }
}

fn cell(columns: &[String], r: &Record, c: usize) -> Result<f64> {
    r.values[c].ok_or_else(|| {
        Error::Data(format!(
            "missing `{}` for link {} at time {}; clean the trace first",
            columns[c], r.link_id, r.time_index
        ))
    })
}

/// Window whose encoder covers `recs[start..start + enc_len]` of one link.
/// Targets are read when the records extend far enough, otherwise left at 0.
pub fn window_at(
    trace: &Trace,
    recs: &[Record],
    start: usize,
    cfg: &WindowConfig,
    cols: &WindowColumns,
    dict: &CategoryDict,
) -> Result<ForecastWindow> {
    if start + cfg.enc_len > recs.len() {
        return Err(Error::Data(format!(
            "encoder window at {start} runs past {} records",
            recs.len()
        )));
    }
    let n_known = cfg.known_periods.len() * 2;
    let n_obs = cols.observed.len();
    let mut encoder = Matrix::zeros(cfg.enc_len, n_obs + n_known);
    for t in 0..cfg.enc_len {
        let r = &recs[start + t];
        let row = encoder.row_mut(t);
        for (j, &c) in cols.observed.iter().enumerate() {
            row[j] = cell(trace.columns(), r, c)?;
        }
        row[n_obs..].copy_from_slice(&cfg.known_features(r.time_index));
    }
    let last = recs[start + cfg.enc_len - 1].time_index;
    let mut decoder_known = Matrix::zeros(cfg.pred_len, n_known);
    let mut target = vec![0.0; cfg.pred_len];
    for h in 0..cfg.pred_len {
        let idx = start + cfg.enc_len + h;
        let time = recs.get(idx).map_or(last + 1 + h as i64, |r| r.time_index);
        decoder_known.row_mut(h).copy_from_slice(&cfg.known_features(time));
        if let Some(r) = recs.get(idx) {
            target[h] = cell(trace.columns(), r, cols.target)?;
        }
    }
    Ok(ForecastWindow {
        link_id: recs[start].link_id.clone(),
        start_time: last + 1,
        encoder,
        decoder_known,
        static_ids: dict.encode(&recs[start]),
        target,
    })
}

fn check_config(cfg: &WindowConfig) -> Result<()> {
    if cfg.enc_len == 0 || cfg.pred_len == 0 || cfg.stride == 0 {
        return Err(Error::Config("window lengths and stride must be positive".into()));
    }
    Ok(())
}

/// Sliding windows per link. A link of length `n` yields
/// `(n − enc_len − pred_len) / stride + 1` windows.
pub fn make_windows(trace: &Trace, cfg: &WindowConfig, dict: &CategoryDict) -> Result<WindowSet> {
    check_config(cfg)?;
    let cols = WindowColumns::resolve(trace, cfg)?;
    let span = cfg.enc_len + cfg.pred_len;
    let mut set = WindowSet::default();
    for (link, range) in trace.link_groups() {
        let recs = &trace.records()[range];
        if recs.len() < span {
            log::warn!("link {link}: {} records, need {span} for one window", recs.len());
            set.skipped_links.push(link.to_string());
            continue;
        }
        let mut start = 0;
        while start + span <= recs.len() {
            set.windows.push(window_at(trace, recs, start, cfg, &cols, dict)?);
            start += cfg.stride;
        }
    }
    Ok(set)
}

/// Windows grouped per link, in link order (used for per-link forecasts).
pub fn windows_by_link(set: &WindowSet) -> BTreeMap<&str, Vec<&ForecastWindow>> {
    let mut map: BTreeMap<&str, Vec<&ForecastWindow>> = BTreeMap::new();
    for w in &set.windows {
        map.entry(w.link_id.as_str()).or_default().push(w);
    }
    map
}
