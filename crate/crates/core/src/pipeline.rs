//! End-to-end commands over one run directory.
//!
//! Layout under `<out>/<name>/`:
//!
//! ```text
//! config.echo            every setting of the run, defaults included
//! data/                  trace.csv, topology.csv, correlation.csv
//! checkpoints/           tft.ckpt, tft.meta.json, lstm.ckpt, dqn.ckpt
//! logs/                  training histories, curves, per-episode evaluation logs
//! reports/               metric tables and plot-ready CSVs
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::agents::{
    episode_seed, rollout, train_dqn, write_curves, write_histogram, Greedy, Policy, PolicyKind, QNetwork,
    RoundRobin, WeightedRoundRobin, wrr_weights,
};
use crate::config::{ExperimentConfig, TraceSource};
use crate::dataset::{
    clean, correlation_matrix, load_trace, make_windows, split_by_time, synth_trace, ForecastWindow, Trace,
    NUMERIC_COLUMNS, TARGET,
};
use crate::env::{write_episode_log, Background, Dynamics, Env, EpisodeLogRow, ForecastSource};
use crate::error::{Error, Result};
use crate::forecaster::{
    evaluate_windows, export_importance, lr_find, prepare_data, train_forecaster, write_forecasts, write_history,
    ForecastEvaluation, Importance, LrFindConfig, LstmBaseline, MetricReport, SeqModel, TrainSettings,
    TrainedForecaster,
};
use crate::nn::{checkpoint, RngStream};
use crate::topology::{build_fat_tree, FatTreeTopology};

pub const REPORT_FILES: [&str; 7] = [
    "comparison.csv",
    "training_curves.csv",
    "action_histogram.csv",
    "attention_profile.csv",
    "importance_static.csv",
    "importance_encoder.csv",
    "importance_decoder.csv",
];

pub const GAPS_FILE: &str = "GAPS.txt";

#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn config_echo(&self) -> PathBuf {
        self.root.join("config.echo")
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn trace(&self) -> PathBuf {
        self.data().join("trace.csv")
    }
    pub fn lstm_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("lstm.ckpt")
    }
    pub fn dqn_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("dqn.ckpt")
    }
    pub fn normalization(&self) -> PathBuf {
        self.logs().join("normalization.csv")
    }
    pub fn episode_log(&self, policy: PolicyKind, seed: usize) -> PathBuf {
        self.logs().join(format!("episodes_{}_seed{seed}.csv", policy.label()))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn require(path: &Path, producer: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingPrerequisite {
            path: path.to_path_buf(),
            producer,
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SynthSummary {
    pub records: usize,
    pub links: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct ForecasterSummary {
    pub train_windows: usize,
    pub val_windows: usize,
    pub learning_rate: f64,
    pub tft_best_val_loss: f64,
    pub lstm_best_val_loss: f64,
    pub skipped_links: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ForecastEvalSummary {
    pub tft: ForecastEvaluation,
    pub lstm: ForecastEvaluation,
    pub encoder_ranking: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AgentSummary {
    pub episodes: usize,
    pub best_episode: usize,
    pub best_reward: f64,
    pub gradient_steps: usize,
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PolicySummary {
    pub policy: PolicyKind,
    pub episodes: usize,
    pub throughput: Stat,
    pub latency: Stat,
    pub packet_loss: Stat,
    pub reward: Stat,
}

/// Per-policy metrics over every evaluation episode, from normalized step metrics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub policies: Vec<PolicySummary>,
    /// Multipliers from normalized `[throughput, latency, packet_loss]` to Kbps, ms and ratio.
    pub normalization: Option<[f64; 3]>,
}

/// Episode means of one policy: `[throughput, latency, packet_loss, reward]`.
type EpisodeMeans = Vec<[f64; 4]>;

fn episode_means(rows: &[EpisodeLogRow]) -> EpisodeMeans {
    let mut by_episode: BTreeMap<usize, ([f64; 4], usize)> = BTreeMap::new();
    for r in rows {
        let e = by_episode.entry(r.episode).or_default();
        for (acc, v) in e.0.iter_mut().zip([r.throughput, r.latency, r.packet_loss, r.reward]) {
            *acc += v;
        }
        e.1 += 1;
    }
    by_episode.into_values().map(|(s, n)| s.map(|v| v / n as f64)).collect()
}

fn summarize(policy: PolicyKind, means: &EpisodeMeans) -> PolicySummary {
    let col = |i: usize| Stat::of(&means.iter().map(|m| m[i]).collect::<Vec<_>>());
    PolicySummary {
        policy,
        episodes: means.len(),
        throughput: col(0),
        latency: col(1),
        packet_loss: col(2),
        reward: col(3),
    }
}

pub const COMPARISON_HEADER: [&str; 13] = [
    "policy",
    "episodes",
    "throughput_mean",
    "throughput_std",
    "latency_mean",
    "latency_std",
    "packet_loss_mean",
    "packet_loss_std",
    "reward_mean",
    "reward_std",
    "throughput_kbps",
    "latency_ms",
    "packet_loss_ratio",
];

impl RunReport {
    pub fn policy(&self, kind: PolicyKind) -> Option<&PolicySummary> {
        self.policies.iter().find(|p| p.policy == kind)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(COMPARISON_HEADER)?;
        for p in &self.policies {
            let mut row = vec![p.policy.label().to_string(), p.episodes.to_string()];
            for s in [p.throughput, p.latency, p.packet_loss, p.reward] {
                row.push(s.mean.to_string());
                row.push(s.std.to_string());
            }
            let means = [p.throughput.mean, p.latency.mean, p.packet_loss.mean];
            match self.normalization {
                Some(n) => row.extend(means.iter().zip(n).map(|(m, k)| (m * k).to_string())),
                None => row.extend(["", "", ""].map(String::from)),
            }
            out.write_record(&row)?;
        }
        out.flush().map_err(|e| Error::io("<comparison csv>", e))?;
        Ok(())
    }

    /// Policies ordered best first on each metric: `metric,first,second,...`.
    pub fn write_ranking<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["metric".to_string()];
        header.extend((1..=self.policies.len()).map(|i| format!("rank{i}")));
        out.write_record(&header)?;
        let metrics: [(&str, fn(&PolicySummary) -> f64, bool); 4] = [
            ("throughput", |p| p.throughput.mean, true),
            ("latency", |p| p.latency.mean, false),
            ("packet_loss", |p| p.packet_loss.mean, false),
            ("reward", |p| p.reward.mean, true),
        ];
        for (name, get, higher_better) in metrics {
            let mut order: Vec<&PolicySummary> = self.policies.iter().collect();
            order.sort_by(|a, b| {
                let c = get(a).total_cmp(&get(b));
                if higher_better { c.reverse() } else { c }
            });
            let mut row = vec![name.to_string()];
            row.extend(order.iter().map(|p| p.policy.label().to_string()));
            out.write_record(&row)?;
        }
        out.flush().map_err(|e| Error::io("<ranking csv>", e))?;
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ReportSummary {
    pub written: Vec<String>,
    pub gaps: Vec<String>,
}

/// One experiment bound to its run directory.
pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub paths: RunPaths,
}

impl Pipeline {
    /// Validates `cfg`, creates the run directory under `out` and echoes the config.
    pub fn new(cfg: ExperimentConfig, out: &Path) -> Result<Self> {
        cfg.validate()?;
        let paths = RunPaths { root: cfg.run_dir(out) };
        let echo = cfg.to_toml()?;
        write_file(&paths.config_echo(), |w| w.write_all(echo.as_bytes()).map_err(|e| Error::io("config.echo", e)))?;
        Ok(Self { cfg, paths })
    }

    fn topology(&self) -> Result<FatTreeTopology> {
        build_fat_tree(&self.cfg.topology)
    }

    /// Writes `data/trace.csv` (synthetic or ingested), the topology and the correlation matrix.
    pub fn synth(&self) -> Result<SynthSummary> {
        let topo = self.topology()?;
        let trace = match self.cfg.dataset.source {
            TraceSource::Synthetic => synth_trace(
                &topo,
                self.cfg.dataset.steps,
                &self.cfg.traffic_profile(),
                self.cfg.stage_seed("dataset"),
            )?,
            TraceSource::File => load_trace(self.cfg.dataset.path.as_deref().expect("validated"))?,
        };
        write_file(&self.paths.trace(), |w| trace.write_csv(w))?;
        write_file(&self.paths.data().join("topology.csv"), |w| topo.write_csv(w))?;
        let cleaned = clean(&trace, &self.cfg.dataset.clean)?;
        let columns: Vec<String> = NUMERIC_COLUMNS
            .iter()
            .filter(|c| cleaned.column_index(c).is_ok())
            .map(|c| c.to_string())
            .collect();
        let corr = correlation_matrix(&cleaned, &columns)?;
        write_file(&self.paths.data().join("correlation.csv"), |w| corr.write_csv(w))?;
        log::info!("wrote {} records over {} links", trace.len(), trace.link_ids().len());
        Ok(SynthSummary {
            records: trace.len(),
            links: trace.link_ids().len(),
        })
    }

    fn load_data_trace(&self) -> Result<Trace> {
        require(&self.paths.trace(), "synth")?;
        load_trace(&self.paths.trace())
    }

    fn settings(&self, lr: f64) -> TrainSettings {
        let f = &self.cfg.forecaster;
        TrainSettings {
            batch_size: f.batch_size,
            learning_rate: lr,
            max_epochs: f.max_epochs,
            clip_norm: f.clip_norm,
            log_interval: f.log_interval,
        }
    }

    /// Trains the TFT and the LSTM baseline on identical windows and budget.
    pub fn train_forecaster(&self) -> Result<ForecasterSummary> {
        let trace = self.load_data_trace()?;
        let fc = &self.cfg.forecaster;
        let data = prepare_data(&trace, fc, &self.cfg.dataset.clean, self.cfg.dataset.scale_mode)?;
        for link in &data.skipped_links {
            log::warn!("link {link} is too short for a window and was skipped");
        }
        let seed = self.cfg.stage_seed("forecaster");
        let rng = RngStream::new(seed);
        let mut tft = TrainedForecaster::new(fc, data.scaler.clone(), data.dict.clone(), seed)?;

        let mut lr = fc.learning_rate;
        if fc.use_lr_find {
            let sweep = lr_find(&tft.model, &data.train, fc.batch_size, fc.clip_norm, &LrFindConfig::default(), &rng)?;
            write_file(&self.paths.logs().join("lr_find.csv"), |w| {
                let mut out = csv::Writer::from_writer(w);
                out.write_record(["lr", "loss", "smoothed"])?;
                for ((l, v), s) in sweep.lrs.iter().zip(&sweep.losses).zip(&sweep.smoothed) {
                    out.write_record([l.to_string(), v.to_string(), s.to_string()])?;
                }
                out.flush().map_err(|e| Error::io("lr_find.csv", e))
            })?;
            log::info!("learning-rate sweep suggests {:.3e}", sweep.suggestion);
            lr = sweep.suggestion;
        }
        let settings = self.settings(lr);

        let tft_out = train_forecaster(&mut tft.model, &data.train, &data.val, &settings, &rng.derive("tft"))?;
        write_file(&self.paths.logs().join("tft_history.csv"), |w| write_history(w, &tft_out.history))?;
        tft.save(&self.paths.checkpoints())?;

        let mut lstm = LstmBaseline::new(&fc.window, fc.lstm_hidden_size, tft.meta.n_encoder, seed)?;
        let lstm_out = train_forecaster(&mut lstm, &data.train, &data.val, &settings, &rng.derive("lstm"))?;
        write_file(&self.paths.logs().join("lstm_history.csv"), |w| write_history(w, &lstm_out.history))?;
        checkpoint::save(&self.paths.lstm_checkpoint(), &lstm.store, LstmBaseline::COMPONENT)?;

        if tft_out.diverged || lstm_out.diverged {
            return Err(Error::Numeric("forecaster training diverged; best checkpoints were kept".into()));
        }
        Ok(ForecasterSummary {
            train_windows: data.train.len(),
            val_windows: data.val.len(),
            learning_rate: lr,
            tft_best_val_loss: tft_out.best_val_loss,
            lstm_best_val_loss: lstm_out.best_val_loss,
            skipped_links: data.skipped_links,
        })
    }

    pub fn load_forecaster(&self) -> Result<TrainedForecaster> {
        TrainedForecaster::load(&self.paths.checkpoints())
    }

    fn load_lstm(&self, n_encoder: usize) -> Result<LstmBaseline> {
        require(&self.paths.lstm_checkpoint(), "train-forecaster")?;
        let fc = &self.cfg.forecaster;
        let mut lstm = LstmBaseline::new(&fc.window, fc.lstm_hidden_size, n_encoder, 0)?;
        checkpoint::load(&self.paths.lstm_checkpoint(), LstmBaseline::COMPONENT, &mut lstm.store)?;
        lstm.trained = true;
        Ok(lstm)
    }

    /// Validation windows under the saved scaler and dictionary.
    fn validation_windows(&self, tft: &TrainedForecaster) -> Result<Vec<ForecastWindow>> {
        let trace = self.load_data_trace()?;
        let cleaned = clean(&trace, &self.cfg.dataset.clean)?;
        let (_, val) = split_by_time(&cleaned, tft.meta.config.train_fraction)?;
        let scaled = tft.meta.scaler.apply(&val)?;
        Ok(make_windows(&scaled, &tft.meta.config.window, &tft.meta.dict)?.windows)
    }

    /// Metrics for both forecasters plus forecast, importance and attention exports.
    pub fn eval_forecaster(&self) -> Result<ForecastEvalSummary> {
        let tft = self.load_forecaster()?;
        let lstm = self.load_lstm(tft.meta.n_encoder)?;
        let windows = self.validation_windows(&tft)?;
        let target = tft.meta.scaler.column(TARGET)?.clone();
        let batch = tft.meta.config.batch_size;
        let tft_eval = evaluate_windows(&tft.model, &windows, batch, &target)?;
        let lstm_eval = evaluate_windows(&lstm, &windows, batch, &target)?;
        let reports = self.paths.reports();
        write_file(&reports.join("forecast_metrics.csv"), |w| {
            write_forecast_metrics(w, &[("tft", &tft_eval), ("lstm", &lstm_eval)])
        })?;
        write_file(&reports.join("forecasts.csv"), |w| write_forecasts(w, &tft.model, &windows, batch, &target))?;
        let imp = export_importance(&tft.model, &windows, batch)?;
        write_file(&reports.join("importance_static.csv"), |w| {
            Importance::write_group(w, &imp.static_labels, &imp.static_weights)
        })?;
        write_file(&reports.join("importance_encoder.csv"), |w| {
            Importance::write_group(w, &imp.encoder_labels, &imp.encoder_weights)
        })?;
        write_file(&reports.join("importance_decoder.csv"), |w| {
            Importance::write_group(w, &imp.decoder_labels, &imp.decoder_weights)
        })?;
        write_file(&reports.join("attention_profile.csv"), |w| imp.write_attention(w))?;
        Ok(ForecastEvalSummary {
            tft: tft_eval,
            lstm: lstm_eval,
            encoder_ranking: imp.encoder_ranking().into_iter().map(String::from).collect(),
        })
    }

    /// Environment over one background realization.
    pub fn build_env(&self, background_seed: u64) -> Result<Env> {
        let topo = self.topology()?;
        let env_cfg = self.cfg.env_config();
        let (background, trace) = match env_cfg.dynamics {
            Dynamics::Synthetic => {
                let (bg, trace) =
                    Background::synthetic(&topo, &self.cfg.traffic_profile(), env_cfg.background_steps, background_seed)?;
                (bg, Some(trace))
            }
            Dynamics::Trace => {
                let trace = self.load_data_trace()?;
                (Background::from_trace(&trace, topo.num_links())?, Some(trace))
            }
            Dynamics::Static => {
                let util = if env_cfg.static_utilization.is_empty() {
                    vec![0.5; topo.num_links()]
                } else {
                    env_cfg.static_utilization.clone()
                };
                (Background::constant(topo.links(), &util, env_cfg.background_steps)?, None)
            }
        };
        let background = match (env_cfg.forecast_source, trace) {
            (ForecastSource::Model, Some(trace)) => background.with_forecasts(&self.load_forecaster()?, &trace)?,
            (ForecastSource::Model, None) => {
                return Err(Error::Config(
                    "forecast_source = \"model\" needs synthetic or trace dynamics".into(),
                ))
            }
            (_, _) => background,
        };
        Env::new(&env_cfg, &topo, background)
    }

    /// Trains the DQN and writes its checkpoint, curves and action histogram.
    pub fn train_agent(&self) -> Result<AgentSummary> {
        let mut env = self.build_env(self.cfg.stage_seed("agent/background"))?;
        let out = train_dqn(&mut env, &self.cfg.dqn, self.cfg.stage_seed("agent"))?;
        out.policy.save(&self.paths.dqn_checkpoint())?;
        write_file(&self.paths.logs().join("training_curves.csv"), |w| write_curves(w, &out.curves))?;
        write_file(&self.paths.logs().join("action_histogram.csv"), |w| write_histogram(w, &out.histogram))?;
        if out.diverged {
            return Err(Error::Numeric(format!(
                "DQN training diverged; kept the checkpoint from episode {}",
                out.best_episode
            )));
        }
        Ok(AgentSummary {
            episodes: out.curves.len(),
            best_episode: out.best_episode,
            best_reward: out.best_reward,
            gradient_steps: out.gradient_steps,
        })
    }

    pub fn load_policy(&self, n_links: usize) -> Result<QNetwork> {
        QNetwork::load(&self.paths.dqn_checkpoint(), n_links, &self.cfg.dqn.hidden, self.cfg.dqn.dropout)
    }

    /// Paired evaluation: every policy sees the same background and start
    /// offsets for each (seed, episode).
    pub fn evaluate(&self) -> Result<RunReport> {
        let topo = self.topology()?;
        let n = topo.num_links();
        let net = self.load_policy(n)?;
        let weights = if self.cfg.eval.wrr_weights.is_empty() {
            wrr_weights(&topo.capacities())?
        } else {
            self.cfg.eval.wrr_weights.clone()
        };
        if weights.len() != n {
            return Err(Error::Config(format!("eval.wrr_weights has {} entries for {n} links", weights.len())));
        }
        let source = self.cfg.env.forecast_source;
        let mut means: BTreeMap<PolicyKind, EpisodeMeans> = BTreeMap::new();
        let mut normalization = None;
        for s in 0..self.cfg.eval.seeds {
            let bg_seed = self.cfg.stage_seed(&format!("eval/{s}"));
            let mut env = self.build_env(bg_seed)?;
            normalization = Some(env.normalization());
            for kind in PolicyKind::ALL {
                let mut rr = (RoundRobin::new(), n);
                let mut wrr = WeightedRoundRobin::new(weights.clone())?;
                let mut greedy = Greedy(&net);
                let policy: &mut dyn Policy = match kind {
                    PolicyKind::Dqn => &mut greedy,
                    PolicyKind::Rr => &mut rr,
                    PolicyKind::Wrr => &mut wrr,
                };
                let mut rows = Vec::new();
                for e in 0..self.cfg.eval.episodes {
                    let steps = rollout(&mut env, policy, episode_seed(bg_seed, e))?;
                    rows.extend(steps.iter().enumerate().map(|(i, r)| EpisodeLogRow::from_step(e, i, r, source)));
                }
                write_file(&self.paths.episode_log(kind, s), |w| write_episode_log(w, &rows))?;
                means.entry(kind).or_default().extend(episode_means(&rows));
            }
        }
        if let Some(norm) = normalization {
            write_file(&self.paths.normalization(), |w| write_normalization(w, norm))?;
        }
        let report = RunReport {
            policies: means.iter().map(|(k, m)| summarize(*k, m)).collect(),
            normalization,
        };
        write_file(&self.paths.reports().join("run_report.csv"), |w| report.write_csv(w))?;
        write_file(&self.paths.reports().join("ranking.csv"), |w| report.write_ranking(w))?;
        Ok(report)
    }

    /// Rebuilds the comparison table from episode logs and gathers the
    /// plot-ready CSVs; anything missing is listed in `reports/GAPS.txt`.
    pub fn report(&self) -> Result<ReportSummary> {
        let reports = self.paths.reports();
        fs::create_dir_all(&reports).map_err(|e| Error::io(&reports, e))?;
        let mut gaps = Vec::new();
        let mut written = Vec::new();

        let logs = read_episode_logs(&self.paths.logs())?;
        if logs.is_empty() {
            gaps.push("comparison.csv: no episode logs; run `ftbal evaluate`".to_string());
        } else {
            let normalization = read_normalization(&self.paths.normalization())?;
            let report = RunReport {
                policies: logs.iter().map(|(k, m)| summarize(*k, m)).collect(),
                normalization,
            };
            write_file(&reports.join("comparison.csv"), |w| report.write_csv(w))?;
            written.push("comparison.csv".to_string());
            for kind in PolicyKind::ALL {
                if !logs.contains_key(&kind) {
                    gaps.push(format!("comparison.csv: no episode logs for policy {}", kind.label()));
                }
            }
        }
        for (name, producer) in [("training_curves.csv", "train-agent"), ("action_histogram.csv", "train-agent")] {
            let src = self.paths.logs().join(name);
            if src.exists() {
                fs::copy(&src, reports.join(name)).map_err(|e| Error::io(&src, e))?;
                written.push(name.to_string());
            } else {
                gaps.push(format!("{name}: missing; run `ftbal {producer}`"));
            }
        }
        for name in &REPORT_FILES[3..] {
            if reports.join(name).exists() {
                written.push(name.to_string());
            } else {
                gaps.push(format!("{name}: missing; run `ftbal eval-forecaster`"));
            }
        }
        let gaps_path = reports.join(GAPS_FILE);
        if gaps.is_empty() {
            if gaps_path.exists() {
                fs::remove_file(&gaps_path).map_err(|e| Error::io(&gaps_path, e))?;
            }
        } else {
            for g in &gaps {
                log::warn!("report gap: {g}");
            }
            let text = gaps.join("\n") + "\n";
            write_file(&gaps_path, |w| w.write_all(text.as_bytes()).map_err(|e| Error::io(GAPS_FILE, e)))?;
        }
        Ok(ReportSummary { written, gaps })
    }
}

pub fn write_forecast_metrics<W: Write>(w: W, models: &[(&str, &ForecastEvaluation)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["model", "scope", "mae", "mpae", "smpae", "r2", "mpae_skipped", "smpae_skipped"])?;
    for (name, e) in models {
        let mut rows: Vec<(String, &MetricReport)> = vec![("scaled".into(), &e.scaled), ("unscaled".into(), &e.unscaled)];
        rows.extend(e.per_horizon.iter().enumerate().map(|(h, m)| (format!("h{}", h + 1), m)));
        for (scope, m) in rows {
            out.write_record([
                name.to_string(),
                scope,
                m.mae.to_string(),
                m.mpae.to_string(),
                m.smpae.to_string(),
                m.r2.map(|v| v.to_string()).unwrap_or_default(),
                m.mpae_skipped.to_string(),
                m.smpae_skipped.to_string(),
            ])?;
        }
    }
    out.flush().map_err(|e| Error::io("<forecast metrics csv>", e))?;
    Ok(())
}

fn write_normalization<W: Write>(w: W, n: [f64; 3]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["metric", "scale"])?;
    for (name, v) in ["throughput_kbps", "latency_ms", "packet_loss_ratio"].iter().zip(n) {
        out.write_record([name.to_string(), v.to_string()])?;
    }
    out.flush().map_err(|e| Error::io("<normalization csv>", e))?;
    Ok(())
}

fn read_normalization(path: &Path) -> Result<Option<[f64; 3]>> {
    if !path.exists() {
        return Ok(None);
    }
    let mut r = csv::Reader::from_path(path)?;
    let mut vals = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        vals.push(rec.get(1).and_then(|v| v.parse::<f64>().ok()).ok_or_else(|| {
            Error::Data(format!("{}: malformed scale", path.display()))
        })?);
    }
    let arr: [f64; 3] = vals
        .try_into()
        .map_err(|_| Error::Data(format!("{}: expected three scales", path.display())))?;
    Ok(Some(arr))
}

/// Episode means per policy from every `episodes_<policy>_seed<s>.csv`, seeds in order.
fn read_episode_logs(dir: &Path) -> Result<BTreeMap<PolicyKind, EpisodeMeans>> {
    let mut found: Vec<(PolicyKind, usize, PathBuf)> = Vec::new();
    if dir.exists() {
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
            let Some(rest) = name.strip_prefix("episodes_").and_then(|r| r.strip_suffix(".csv")) else { continue };
            let Some((policy, seed)) = rest.split_once("_seed") else { continue };
            let kind = PolicyKind::ALL.into_iter().find(|k| k.label() == policy);
            if let (Some(kind), Ok(seed)) = (kind, seed.parse::<usize>()) {
                found.push((kind, seed, path));
            }
        }
    }
    found.sort();
    let mut out: BTreeMap<PolicyKind, EpisodeMeans> = BTreeMap::new();
    for (kind, _, path) in found {
        let rows = read_episode_log(&path)?;
        out.entry(kind).or_default().extend(episode_means(&rows));
    }
    Ok(out)
}

fn read_episode_log(path: &Path) -> Result<Vec<EpisodeLogRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| -> Result<&str> {
            rec.get(i).ok_or_else(|| Error::Data(format!("{}: short row", path.display())))
        };
        let num = |i: usize| -> Result<f64> {
            field(i)?
                .parse()
                .map_err(|_| Error::Data(format!("{}: bad number `{}`", path.display(), field(i).unwrap_or(""))))
        };
        let int = |i: usize| -> Result<usize> {
            field(i)?.parse().map_err(|_| Error::Data(format!("{}: bad integer", path.display())))
        };
        let source = match field(7)? {
            "model" => ForecastSource::Model,
            "oracle" => ForecastSource::Oracle,
            _ => ForecastSource::Zero,
        };
        rows.push(EpisodeLogRow {
            episode: int(0)?,
            step: int(1)?,
            action: int(2)?,
            reward: num(3)?,
            throughput: num(4)?,
            latency: num(5)?,
            packet_loss: num(6)?,
            forecast_source: source,
        });
    }
    Ok(rows)
}
