use std::io::Write;

use super::model::SeqModel;
use crate::dataset::ForecastWindow;
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, Matrix, RngStream, Tape};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub clip_norm: f64,
    pub log_interval: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<HistoryRow>,
    /// Epoch (1-based) whose parameters were retained.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Training stopped on a non-finite loss or gradient.
    pub diverged: bool,
}

/// Mean loss over `windows` in evaluation mode.
pub fn mean_loss<M: SeqModel>(model: &M, windows: &[ForecastWindow], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut rng = RngStream::new(0);
    for chunk in windows.chunks(batch_size.max(1)) {
        let refs: Vec<&ForecastWindow> = chunk.iter().collect();
        let mut tape = Tape::new();
        let loss = model.batch_loss(&mut tape, &refs, false, &mut rng)?;
        total += tape.scalar(loss) * chunk.len() as f64;
    }
    Ok(total / windows.len() as f64)
}

/// One optimizer step on a batch; `Ok(None)` when the loss or gradient is non-finite.
fn train_step<M: SeqModel>(
    model: &mut M,
    batch: &[&ForecastWindow],
    adam: &AdamConfig,
    clip_norm: f64,
    rng: &mut RngStream,
) -> Result<Option<f64>> {
    let mut tape = Tape::new();
    let loss = model.batch_loss(&mut tape, batch, true, rng)?;
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Ok(None);
    }
    let store = model.params_mut();
    store.zero_grad();
    tape.backward(loss, store);
    let norm = store.clip_grad_norm(clip_norm);
    if !norm.is_finite() {
        return Ok(None);
    }
    match store.adam_step(adam) {
        Ok(()) => Ok(Some(value)),
        Err(Error::Numeric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Mini-batch Adam with gradient clipping. The parameters with the lowest
/// validation loss (training loss when `val` is empty) are restored at the end.
pub fn train_forecaster<M: SeqModel>(
    model: &mut M,
    train: &[ForecastWindow],
    val: &[ForecastWindow],
    settings: &TrainSettings,
    rng: &RngStream,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Data("no training windows; the trace is too short for one window".into()));
    }
    if settings.batch_size == 0 || settings.max_epochs == 0 {
        return Err(Error::Config("batch_size and max_epochs must be positive".into()));
    }
    let adam = AdamConfig::with_lr(settings.learning_rate);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = rng.derive("shuffle");
    let mut dropout_rng = rng.derive("dropout");
    let mut best: Option<(f64, usize, Vec<Matrix>)> = None;
    let mut history = Vec::new();
    let mut diverged = false;

    for epoch in 1..=settings.max_epochs {
        shuffle_rng.shuffle(&mut order);
        let mut sum = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(settings.batch_size) {
            let batch: Vec<&ForecastWindow> = chunk.iter().map(|&i| &train[i]).collect();
            match train_step(model, &batch, &adam, settings.clip_norm, &mut dropout_rng)? {
                Some(loss) => {
                    sum += loss * batch.len() as f64;
                    count += batch.len();
                }
                None => {
                    diverged = true;
                    break;
                }
            }
        }
        if diverged {
            log::warn!("epoch {epoch}: non-finite loss, keeping the best checkpoint so far");
            break;
        }
        let train_loss = sum / count as f64;
        let val_loss = if val.is_empty() {
            train_loss
        } else {
            mean_loss(model, val, settings.batch_size)?
        };
        if !val_loss.is_finite() {
            diverged = true;
            log::warn!("epoch {epoch}: non-finite validation loss, keeping the best checkpoint so far");
            break;
        }
        history.push(HistoryRow {
            epoch,
            train_loss,
            val_loss,
            lr: settings.learning_rate,
        });
        if settings.log_interval > 0 && epoch % settings.log_interval == 0 {
            log::info!("{} epoch {epoch}: train {train_loss:.6} val {val_loss:.6}", M::COMPONENT);
        }
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, model.params().values()));
        }
    }

    let (best_val_loss, best_epoch) = match best {
        Some((loss, epoch, values)) => {
            model.params_mut().set_values(&values)?;
            (loss, epoch)
        }
        None => (f64::NAN, 0),
    };
    model.mark_trained();
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_loss,
        diverged,
    })
}

pub fn write_history<W: Write>(w: W, history: &[HistoryRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["epoch", "train_loss", "val_loss", "lr"])?;
    for r in history {
        out.write_record([r.epoch.to_string(), r.train_loss.to_string(), r.val_loss.to_string(), r.lr.to_string()])?;
    }
    out.flush().map_err(|e| Error::io("<history csv>", e))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LrFindConfig {
    pub min_lr: f64,
    pub max_lr: f64,
    pub steps: usize,
    /// Exponential smoothing factor applied to the recorded losses.
    pub smoothing: f64,
    /// Stop once the smoothed loss exceeds this multiple of the best seen.
    pub diverge_factor: f64,
}

impl Default for LrFindConfig {
    fn default() -> Self {
        Self {
            min_lr: 1e-7,
            max_lr: 1e-1,
            steps: 100,
            smoothing: 0.05,
            diverge_factor: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LrSweep {
    pub lrs: Vec<f64>,
    pub losses: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub suggestion: f64,
}

/// Runs one step per log-spaced learning rate and suggests the rate at the
/// steepest descent of the smoothed loss curve. `step(lr)` performs one update
/// and returns the loss observed before it.
pub fn lr_sweep(cfg: &LrFindConfig, mut step: impl FnMut(f64) -> Result<f64>) -> Result<LrSweep> {
    if !(cfg.min_lr > 0.0 && cfg.max_lr > cfg.min_lr) || cfg.steps < 3 {
        return Err(Error::Config("lr range must satisfy 0 < min < max with at least 3 steps".into()));
    }
    let ratio = (cfg.max_lr / cfg.min_lr).ln() / (cfg.steps - 1) as f64;
    let mut sweep = LrSweep {
        lrs: Vec::new(),
        losses: Vec::new(),
        smoothed: Vec::new(),
        suggestion: f64::NAN,
    };
    let mut avg = 0.0;
    let mut best = f64::INFINITY;
    for i in 0..cfg.steps {
        let lr = cfg.min_lr * (ratio * i as f64).exp();
        let loss = step(lr)?;
        if !loss.is_finite() {
            break;
        }
        avg = if i == 0 { loss } else { cfg.smoothing * loss + (1.0 - cfg.smoothing) * avg };
        sweep.lrs.push(lr);
        sweep.losses.push(loss);
        sweep.smoothed.push(avg);
        if avg > cfg.diverge_factor * best {
            break;
        }
        best = best.min(avg);
    }
    if sweep.lrs.len() < 3 {
        return Err(Error::Numeric(
            "learning-rate sweep diverged immediately; try a smaller lr range".into(),
        ));
    }
    let steepest = (1..sweep.smoothed.len())
        .map(|i| {
            let slope = (sweep.smoothed[i] - sweep.smoothed[i - 1]) / (sweep.lrs[i].ln() - sweep.lrs[i - 1].ln());
            (i, slope)
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("at least two points");
    sweep.suggestion = sweep.lrs[steepest.0];
    Ok(sweep)
}

/// Learning-rate sweep on a copy of `model`, one mini-batch per rate.
pub fn lr_find<M: SeqModel + Clone>(
    model: &M,
    train: &[ForecastWindow],
    batch_size: usize,
    clip_norm: f64,
    cfg: &LrFindConfig,
    rng: &RngStream,
) -> Result<LrSweep> {
    if train.is_empty() {
        return Err(Error::Data("no training windows for the learning-rate sweep".into()));
    }
    let mut probe = model.clone();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = rng.derive("lr_find/shuffle");
    let mut dropout_rng = rng.derive("lr_find/dropout");
    shuffle_rng.shuffle(&mut order);
    let mut cursor = 0;
    lr_sweep(cfg, |lr| {
        if cursor + batch_size > order.len() {
            shuffle_rng.shuffle(&mut order);
            cursor = 0;
        }
        let batch: Vec<&ForecastWindow> = order[cursor..(cursor + batch_size).min(order.len())].iter().map(|&i| &train[i]).collect();
        cursor += batch_size;
        Ok(train_step(&mut probe, &batch, &AdamConfig::with_lr(lr), clip_norm, &mut dropout_rng)?.unwrap_or(f64::NAN))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecaster::model::tests::{small_config, toy_windows};
    use crate::forecaster::{LstmBaseline, Tft};

    fn settings(epochs: usize) -> TrainSettings {
        TrainSettings {
            batch_size: 8,
            learning_rate: 1e-2,
            max_epochs: epochs,
            clip_norm: 1.0,
            log_interval: 0,
        }
    }

    #[test]
    fn one_epoch_one_batch_gives_one_history_row() {
        let cfg = small_config();
        let w = toy_windows(8, &cfg.window, 2, 0);
        let mut m = Tft::new(&cfg, 4, 2, &[4, 2, 3, 1], 0).unwrap();
        let out = train_forecaster(&mut m, &w, &w, &settings(1), &RngStream::new(1)).unwrap();
        assert_eq!(out.history.len(), 1);
        assert!(m.trained);
    }

    #[test]
    fn best_checkpoint_is_retained_and_training_is_reproducible() {
        let cfg = small_config();
        let train = toy_windows(40, &cfg.window, 2, 0);
        let val = toy_windows(10, &cfg.window, 2, 9);
        let run = || {
            let mut m = Tft::new(&cfg, 4, 2, &[4, 2, 3, 1], 3).unwrap();
            let out = train_forecaster(&mut m, &train, &val, &settings(6), &RngStream::new(5)).unwrap();
            (m, out)
        };
        let (m, out) = run();
        let last = out.history.last().unwrap().val_loss;
        assert!(out.best_val_loss <= last);
        assert!(out.history.iter().all(|r| r.val_loss >= out.best_val_loss));
        let retained = mean_loss(&m, &val, 8).unwrap();
        assert!((retained - out.best_val_loss).abs() < 1e-12);

        let (m2, out2) = run();
        assert_eq!(out, out2);
        assert_eq!(m.store.values(), m2.store.values());
    }

    #[test]
    fn divergence_keeps_last_good_parameters() {
        let cfg = small_config();
        let mut w = toy_windows(16, &cfg.window, 2, 0);
        let mut m = LstmBaseline::new(&cfg.window, 3, 4, 0).unwrap();
        let clean = w.clone();
        let out = train_forecaster(&mut m, &clean, &clean, &settings(2), &RngStream::new(0)).unwrap();
        assert!(!out.diverged);
        let kept = m.store.values();
        w[3].target[0] = f64::NAN;
        let out = train_forecaster(&mut m, &w, &clean, &settings(2), &RngStream::new(0)).unwrap();
        assert!(out.diverged);
        assert!(out.history.is_empty());
        assert_eq!(m.store.values(), kept);
    }

    #[test]
    fn empty_train_set_is_an_error() {
        let cfg = small_config();
        let mut m = LstmBaseline::new(&cfg.window, 3, 4, 0).unwrap();
        assert!(train_forecaster(&mut m, &[], &[], &settings(1), &RngStream::new(0)).is_err());
    }

    #[test]
    fn sweep_on_quadratic_stays_below_stability_bound() {
        // f(w) = ½·L·w², gradient descent is stable for lr < 2/L.
        for curvature in [0.5, 4.0, 50.0] {
            let mut w = 3.0;
            let sweep = lr_sweep(&LrFindConfig::default(), |lr| {
                let loss = 0.5 * curvature * w * w;
                w -= lr * curvature * w;
                Ok(loss)
            })
            .unwrap();
            assert!(sweep.suggestion < 2.0 / curvature, "L={curvature}: {}", sweep.suggestion);
            assert!(sweep.suggestion > LrFindConfig::default().min_lr);
        }
    }

    #[test]
    fn sweep_errors_when_everything_diverges() {
        assert!(matches!(lr_sweep(&LrFindConfig::default(), |_| Ok(f64::NAN)), Err(Error::Numeric(_))));
    }

    #[test]
    fn lr_find_is_deterministic() {
        let cfg = small_config();
        let w = toy_windows(32, &cfg.window, 2, 0);
        let m = Tft::new(&cfg, 4, 2, &[4, 2, 3, 1], 0).unwrap();
        let fc = LrFindConfig { steps: 20, ..LrFindConfig::default() };
        let a = lr_find(&m, &w, 8, 1.0, &fc, &RngStream::new(2)).unwrap();
        let b = lr_find(&m, &w, 8, 1.0, &fc, &RngStream::new(2)).unwrap();
        assert_eq!(a, b);
        assert!(a.suggestion > fc.min_lr);
    }
}
