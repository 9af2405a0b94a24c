use std::io::Write;

use serde::Serialize;

use super::metrics::{eval_metrics, MetricReport};
use super::model::{SeqModel, Tft};
use crate::dataset::{write_labeled_matrix, ColumnScale, ForecastWindow, STATIC_COLUMNS};
use crate::error::{Error, Result};
use crate::nn::{Matrix, Tape};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ForecastEvaluation {
    /// Metrics in the model's (scaled) units.
    pub scaled: MetricReport,
    /// Metrics after inverting the target scaling.
    pub unscaled: MetricReport,
    /// Unscaled metrics per horizon, index 0 = one step ahead.
    pub per_horizon: Vec<MetricReport>,
}

/// Scores point forecasts over every (window, horizon) pair.
pub fn evaluate_windows<M: SeqModel>(
    model: &M,
    windows: &[ForecastWindow],
    batch_size: usize,
    target: &ColumnScale,
) -> Result<ForecastEvaluation> {
    if windows.is_empty() {
        return Err(Error::Data("no windows to evaluate".into()));
    }
    let mut preds = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(batch_size.max(1)) {
        let refs: Vec<&ForecastWindow> = chunk.iter().collect();
        preds.extend(model.point_forecast(&refs)?);
    }
    let pred_len = windows[0].target.len();
    let flat = |f: &dyn Fn(f64) -> f64| -> (Vec<f64>, Vec<f64>) {
        let mut a = Vec::new();
        let mut p = Vec::new();
        for (w, pr) in windows.iter().zip(&preds) {
            a.extend(w.target.iter().map(|&v| f(v)));
            p.extend(pr.iter().map(|&v| f(v)));
        }
        (a, p)
    };
    let (a, p) = flat(&|v| v);
    let scaled = eval_metrics(&a, &p)?;
    let (a, p) = flat(&|v| target.unscale(v));
    let unscaled = eval_metrics(&a, &p)?;
    let per_horizon = (0..pred_len)
        .map(|h| {
            let a: Vec<f64> = windows.iter().map(|w| target.unscale(w.target[h])).collect();
            let p: Vec<f64> = preds.iter().map(|pr| target.unscale(pr[h])).collect();
            eval_metrics(&a, &p)
        })
        .collect::<Result<_>>()?;
    Ok(ForecastEvaluation {
        scaled,
        unscaled,
        per_horizon,
    })
}

pub fn quantile_label(tau: f64) -> String {
    format!("q{}", (tau * 100.0).round() as i64)
}

/// Forecast CSV in target units: `link_id,time_index,horizon,q..,actual`.
pub fn write_forecasts<W: Write>(
    w: W,
    model: &Tft,
    windows: &[ForecastWindow],
    batch_size: usize,
    target: &ColumnScale,
) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["link_id".to_string(), "time_index".into(), "horizon".into()];
    header.extend(model.config.quantiles.iter().map(|&q| quantile_label(q)));
    header.push("actual".into());
    out.write_record(&header)?;
    for chunk in windows.chunks(batch_size.max(1)) {
        let refs: Vec<&ForecastWindow> = chunk.iter().collect();
        for (win, q) in chunk.iter().zip(model.predict(&refs)?) {
            for h in 0..q.rows() {
                let mut row = vec![win.link_id.clone(), (win.start_time + h as i64).to_string(), (h + 1).to_string()];
                row.extend(q.row(h).iter().map(|&v| target.unscale(v).to_string()));
                row.push(target.unscale(win.target[h]).to_string());
                out.write_record(&row)?;
            }
        }
    }
    out.flush().map_err(|e| Error::io("<forecast csv>", e))?;
    Ok(())
}

/// Mean variable-selection weights per input group and the mean attention
/// that decoder positions pay to each encoder position.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Importance {
    pub static_labels: Vec<String>,
    pub static_weights: Vec<f64>,
    pub encoder_labels: Vec<String>,
    pub encoder_weights: Vec<f64>,
    pub decoder_labels: Vec<String>,
    pub decoder_weights: Vec<f64>,
    /// One entry per encoder position, oldest first.
    pub attention_profile: Vec<f64>,
    /// Exported from a model that was never trained.
    pub untrained: bool,
}

fn column_means(m: &Matrix, acc: &mut [f64]) {
    for r in 0..m.rows() {
        for (a, v) in acc.iter_mut().zip(m.row(r)) {
            *a += v;
        }
    }
}

pub fn export_importance(model: &Tft, windows: &[ForecastWindow], batch_size: usize) -> Result<Importance> {
    if windows.is_empty() {
        return Err(Error::Data("no windows for importance export".into()));
    }
    if !model.trained {
        log::warn!("exporting importance from an untrained forecaster");
    }
    let wc = &model.config.window;
    let (enc_len, pred_len) = (wc.enc_len, wc.pred_len);
    let mut stat = vec![0.0; STATIC_COLUMNS.len()];
    let mut enc = vec![0.0; model.n_encoder];
    let mut dec = vec![0.0; model.n_known];
    let mut att = vec![0.0; enc_len];
    for chunk in windows.chunks(batch_size.max(1)) {
        let refs: Vec<&ForecastWindow> = chunk.iter().collect();
        let mut tape = Tape::new();
        let (_, fwd) = model.predict_with(&mut tape, &refs)?;
        column_means(tape.value(fwd.static_weights), &mut stat);
        column_means(tape.value(fwd.encoder_weights), &mut enc);
        column_means(tape.value(fwd.decoder_weights), &mut dec);
        let weights = tape.attention_weights(fwd.attention).expect("attention node");
        let b = chunk.len();
        for r in enc_len * b..(enc_len + pred_len) * b {
            for (a, v) in att.iter_mut().zip(&weights.row(r)[..enc_len]) {
                *a += v;
            }
        }
    }
    let n = windows.len() as f64;
    let scale = |v: Vec<f64>, d: f64| v.into_iter().map(|x| x / d).collect::<Vec<_>>();
    Ok(Importance {
        static_labels: STATIC_COLUMNS.iter().map(|s| s.to_string()).collect(),
        static_weights: scale(stat, n),
        encoder_labels: wc.encoder_labels(),
        encoder_weights: scale(enc, n * enc_len as f64),
        decoder_labels: wc.known_labels(),
        decoder_weights: scale(dec, n * pred_len as f64),
        attention_profile: scale(att, n * pred_len as f64),
        untrained: !model.trained,
    })
}

impl Importance {
    pub fn write_group<W: Write>(w: W, labels: &[String], weights: &[f64]) -> Result<()> {
        let m = Matrix::column_vector(weights);
        write_labeled_matrix(w, "feature", labels, &["importance".to_string()], &m)
    }

    /// `relative_time,weight`, relative times `−enc_len..−1`.
    pub fn write_attention<W: Write>(&self, w: W) -> Result<()> {
        let n = self.attention_profile.len() as i64;
        let labels: Vec<String> = (0..n).map(|i| (i - n).to_string()).collect();
        let m = Matrix::column_vector(&self.attention_profile);
        write_labeled_matrix(w, "relative_time", &labels, &["weight".to_string()], &m)
    }

    /// Encoder feature names sorted by decreasing importance.
    pub fn encoder_ranking(&self) -> Vec<&str> {
        let mut idx: Vec<usize> = (0..self.encoder_weights.len()).collect();
        idx.sort_by(|&a, &b| self.encoder_weights[b].total_cmp(&self.encoder_weights[a]));
        idx.into_iter().map(|i| self.encoder_labels[i].as_str()).collect()
    }
}
