use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::model::{SeqModel, Tft, TftConfig};
use crate::dataset::{
    clean, fit_scaler, make_windows, split_by_time, window_at, CategoryDict, CleanConfig, ForecastWindow, ScaleMode,
    Scaler, Trace, WindowColumns, TARGET,
};
use crate::env::{NextStepForecaster, BACKGROUND_COLUMN};
use crate::error::{Error, Result};
use crate::nn::{checkpoint, Matrix};

/// Cleaned, split, scaled and windowed forecasting data.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub scaler: Scaler,
    pub dict: CategoryDict,
    pub train: Vec<ForecastWindow>,
    pub val: Vec<ForecastWindow>,
    /// Links too short for a single window, across both splits.
    pub skipped_links: Vec<String>,
}

/// Cleans `trace`, splits it by time, fits the scaler and dictionary on the
/// training side only, and cuts windows from each side.
pub fn prepare_data(
    trace: &Trace,
    cfg: &TftConfig,
    clean_cfg: &CleanConfig,
    mode: ScaleMode,
) -> Result<PreparedData> {
    let cleaned = clean(trace, clean_cfg)?;
    let (train, val) = split_by_time(&cleaned, cfg.train_fraction)?;
    let scaler = fit_scaler(&train, mode)?;
    let dict = CategoryDict::fit(&train);
    let tw = make_windows(&scaler.apply(&train)?, &cfg.window, &dict)?;
    let vw = make_windows(&scaler.apply(&val)?, &cfg.window, &dict)?;
    let mut skipped_links = tw.skipped_links;
    skipped_links.extend(vw.skipped_links);
    Ok(PreparedData {
        scaler,
        dict,
        train: tw.windows,
        val: vw.windows,
        skipped_links,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecasterMeta {
    pub config: TftConfig,
    pub scaler: Scaler,
    pub dict: CategoryDict,
    pub n_encoder: usize,
    pub n_known: usize,
    pub static_sizes: Vec<usize>,
    pub trained: bool,
}

/// A TFT together with the preprocessing it was trained under.
#[derive(Clone, Debug)]
pub struct TrainedForecaster {
    pub meta: ForecasterMeta,
    pub model: Tft,
}

pub fn checkpoint_path(dir: &Path, component: &str) -> PathBuf {
    dir.join(format!("{component}.ckpt"))
}

pub fn meta_path(dir: &Path) -> PathBuf {
    dir.join("tft.meta.json")
}

impl TrainedForecaster {
    pub fn new(config: &TftConfig, scaler: Scaler, dict: CategoryDict, seed: u64) -> Result<Self> {
        let n_encoder = config.window.encoder_labels().len();
        let n_known = config.window.known_labels().len();
        let static_sizes = dict.sizes().to_vec();
        let model = Tft::new(config, n_encoder, n_known, &static_sizes, seed)?;
        Ok(Self {
            meta: ForecasterMeta {
                config: config.clone(),
                scaler,
                dict,
                n_encoder,
                n_known,
                static_sizes,
                trained: false,
            },
            model,
        })
    }

    /// Writes `tft.ckpt` and `tft.meta.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        checkpoint::save(&checkpoint_path(dir, Tft::COMPONENT), &self.model.store, Tft::COMPONENT)?;
        let meta = ForecasterMeta {
            trained: self.model.trained,
            ..self.meta.clone()
        };
        let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let path = meta_path(dir);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ckpt = checkpoint_path(dir, Tft::COMPONENT);
        let meta_file = meta_path(dir);
        for p in [&ckpt, &meta_file] {
            if !p.exists() {
                return Err(Error::MissingPrerequisite {
                    path: p.clone(),
                    producer: "train-forecaster",
                });
            }
        }
        let text = fs::read_to_string(&meta_file).map_err(|e| Error::io(&meta_file, e))?;
        let meta: ForecasterMeta = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", meta_file.display())))?;
        let mut model = Tft::new(&meta.config, meta.n_encoder, meta.n_known, &meta.static_sizes, 0)?;
        checkpoint::load(&ckpt, Tft::COMPONENT, &mut model.store)?;
        model.trained = meta.trained;
        Ok(Self { meta, model })
    }

    pub fn target_scale(&self) -> Result<&crate::dataset::ColumnScale> {
        self.meta.scaler.column(TARGET)
    }
}

impl NextStepForecaster for TrainedForecaster {
    /// One-step-ahead median packet forecasts converted to Kbps with each
    /// link's most recent bits-per-packet ratio.
    fn forecast_table(&self, trace: &Trace) -> Result<Matrix> {
        let cfg = &self.meta.config;
        let enc_len = cfg.window.enc_len;
        let scaled = self.meta.scaler.apply(trace)?;
        let cols = WindowColumns::resolve(&scaled, &cfg.window)?;
        let target = self.target_scale()?;
        let packets_col = trace.column_index(TARGET)?;
        let bitrate_col = trace.column_index(BACKGROUND_COLUMN)?;
        let groups = trace.link_groups();
        let steps = groups.first().map_or(0, |g| g.1.len());
        let mut table = Matrix::zeros(steps, groups.len());
        let median = cfg.median_index();
        for (l, (_, range)) in groups.iter().enumerate() {
            let raw = &trace.records()[range.clone()];
            let recs = &scaled.records()[range.clone()];
            if raw.len() != steps {
                return Err(Error::Env("every link in the background trace needs the same number of steps".into()));
            }
            let windows: Vec<ForecastWindow> = (enc_len..steps)
                .map(|t| window_at(&scaled, recs, t - enc_len, &cfg.window, &cols, &self.meta.dict))
                .collect::<Result<_>>()?;
            let mut ratio = 0.0;
            let mut ratios = vec![0.0; steps];
            for (t, r) in raw.iter().enumerate() {
                if let (Some(p), Some(b)) = (r.values[packets_col], r.values[bitrate_col]) {
                    if p > 0.0 {
                        ratio = b / p;
                    }
                }
                ratios[t] = ratio;
            }
            for (chunk_start, chunk) in windows.chunks(cfg.batch_size.max(1)).enumerate().map(|(i, c)| (i * cfg.batch_size.max(1), c)) {
                let refs: Vec<&ForecastWindow> = chunk.iter().collect();
                for (i, q) in self.model.predict(&refs)?.iter().enumerate() {
                    let t = enc_len + chunk_start + i;
                    let packets = target.unscale(q.get(0, median)).max(0.0);
                    table.set(t, l, packets * ratios[t - 1]);
                }
            }
        }
        Ok(table)
    }

    fn warmup(&self) -> usize {
        self.meta.config.window.enc_len
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_trace, SynthProfile, WindowConfig};
    use crate::env::Background;
    use crate::topology::{build_fat_tree, FatTreeConfig};

    fn small() -> TftConfig {
        TftConfig {
            hidden_size: 4,
            hidden_continuous_size: 3,
            window: WindowConfig {
                enc_len: 6,
                pred_len: 2,
                ..WindowConfig::default()
            },
            ..TftConfig::default()
        }
    }

    #[test]
    fn save_load_round_trip_and_forecast_table() {
        let topo = build_fat_tree(&FatTreeConfig::default()).unwrap();
        let trace = synth_trace(&topo, 40, &SynthProfile::default(), 1).unwrap();
        let data = prepare_data(&trace, &small(), &CleanConfig::default(), ScaleMode::Minmax).unwrap();
        assert!(!data.train.is_empty() && !data.val.is_empty());
        let f = TrainedForecaster::new(&small(), data.scaler, data.dict, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        f.save(dir.path()).unwrap();
        let g = TrainedForecaster::load(dir.path()).unwrap();
        assert_eq!(f.meta, g.meta);
        assert_eq!(f.model.store.values(), g.model.store.values());

        let table = g.forecast_table(&trace).unwrap();
        assert_eq!(table.shape(), (40, 40));
        assert!(table.data().iter().all(|v| v.is_finite() && *v >= 0.0));
        let bg = Background::from_trace(&trace, 40).unwrap().with_forecasts(&g, &trace).unwrap();
        assert_eq!(bg.warmup, 6);
    }

    #[test]
    fn missing_checkpoint_names_producer() {
        let dir = tempfile::tempdir().unwrap();
        match TrainedForecaster::load(dir.path()) {
            Err(Error::MissingPrerequisite { producer, .. }) => assert_eq!(producer, "train-forecaster"),
            other => panic!("{other:?}"),
        }
    }
}
