//! Link-selection environment over the fat-tree topology.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::{synth_trace, SynthProfile, Trace};
use crate::error::{Error, Result};
use crate::nn::{Matrix, RngStream};
use crate::topology::{FatTreeTopology, Link};

/// Column order of the per-link state rows.
pub const STATE_COLUMNS: [&str; 4] = ["throughput", "latency", "packet_loss", "forecast"];
pub const STATE_WIDTH: usize = 4;

/// Background column replayed from traces.
pub const BACKGROUND_COLUMN: &str = "Tx_bitrate";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dynamics {
    Synthetic,
    Trace,
    /// Constant per-link background given as a fraction of capacity.
    Static,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForecastSource {
    Model,
    Oracle,
    Zero,
}

impl ForecastSource {
    pub fn label(self) -> &'static str {
        match self {
            ForecastSource::Model => "model",
            ForecastSource::Oracle => "oracle",
            ForecastSource::Zero => "zero",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.gamma];
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || w.iter().all(|v| *v == 0.0) {
            return Err(Error::Config("reward weights must be non-negative and not all zero".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// Traffic routed by each decision, in Kbps.
    pub demand_kbps: f64,
    pub dynamics: Dynamics,
    pub episode_length: usize,
    pub reward: RewardWeights,
    pub forecast_source: ForecastSource,
    /// Length of each generated background realization.
    pub background_steps: usize,
    /// Latency is normalized by this multiple of the largest base latency.
    pub latency_reference: f64,
    /// Per-link utilization for static dynamics; empty means 0.5 everywhere.
    pub static_utilization: Vec<f64>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            demand_kbps: 2000.0,
            dynamics: Dynamics::Synthetic,
            episode_length: 50,
            reward: RewardWeights::default(),
            forecast_source: ForecastSource::Model,
            background_steps: 600,
            latency_reference: 100.0,
            static_utilization: Vec::new(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        self.reward.validate()?;
        if self.episode_length == 0 {
            return Err(Error::Config("episode_length must be at least 1".into()));
        }
        if !(self.demand_kbps >= 0.0) || !(self.latency_reference >= 1.0) {
            return Err(Error::Config("demand_kbps must be ≥ 0 and latency_reference ≥ 1".into()));
        }
        if self.static_utilization.iter().any(|u| !(*u >= 0.0)) {
            return Err(Error::Config("static_utilization entries must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// Predicts the next-step background of every link.
pub trait NextStepForecaster {
    /// Predicted Kbps `[T × L]` with row `t` forecasting time step `t` of
    /// `trace` from the steps before it. Rows below [`Self::warmup`] are unused.
    fn forecast_table(&self, trace: &Trace) -> Result<Matrix>;
    /// History steps needed before the first usable forecast.
    fn warmup(&self) -> usize;
}

/// Background load per time step and link, in Kbps.
#[derive(Clone, Debug, PartialEq)]
pub struct Background {
    pub kbps: Matrix,
    pub forecast: Option<Matrix>,
    /// First time step with a usable model forecast.
    pub warmup: usize,
}

impl Background {
    pub fn new(kbps: Matrix) -> Self {
        Self {
            kbps,
            forecast: None,
            warmup: 0,
        }
    }

    /// Per-link `Tx_bitrate` of a trace; links in sorted id order must match
    /// the topology's link order and share the same time steps.
    pub fn from_trace(trace: &Trace, n_links: usize) -> Result<Self> {
        let col = trace.column_index(BACKGROUND_COLUMN)?;
        let groups = trace.link_groups();
        if groups.len() != n_links {
            return Err(Error::Env(format!(
                "trace has {} links but the topology has {n_links}",
                groups.len()
            )));
        }
        let steps = groups[0].1.len();
        if groups.iter().any(|(_, r)| r.len() != steps) {
            return Err(Error::Env("every link in the background trace needs the same number of steps".into()));
        }
        let mut kbps = Matrix::zeros(steps, n_links);
        for (l, (link, range)) in groups.iter().enumerate() {
            for (t, r) in trace.records()[range.clone()].iter().enumerate() {
                let v = r.values[col].ok_or_else(|| {
                    Error::Data(format!("missing {BACKGROUND_COLUMN} for link {link} at time {}", r.time_index))
                })?;
                kbps.set(t, l, v.max(0.0));
            }
        }
        Ok(Self::new(kbps))
    }

    /// A fresh synthetic realization and the trace it came from.
    pub fn synthetic(topology: &FatTreeTopology, profile: &SynthProfile, steps: usize, seed: u64) -> Result<(Self, Trace)> {
        let trace = synth_trace(topology, steps, profile, seed)?;
        Ok((Self::from_trace(&trace, topology.num_links())?, trace))
    }

    /// Constant background at the given fraction of each link's capacity.
    pub fn constant(links: &[Link], utilization: &[f64], steps: usize) -> Result<Self> {
        let util: Vec<f64> = if utilization.is_empty() {
            vec![0.5; links.len()]
        } else if utilization.len() == links.len() {
            utilization.to_vec()
        } else {
            return Err(Error::Config(format!(
                "static_utilization has {} entries for {} links",
                utilization.len(),
                links.len()
            )));
        };
        let mut kbps = Matrix::zeros(steps, links.len());
        for t in 0..steps {
            for (l, link) in links.iter().enumerate() {
                kbps.set(t, l, util[l] * link.capacity);
            }
        }
        Ok(Self::new(kbps))
    }

    pub fn with_forecasts(mut self, forecaster: &dyn NextStepForecaster, trace: &Trace) -> Result<Self> {
        let table = forecaster.forecast_table(trace)?;
        if table.shape() != self.kbps.shape() {
            return Err(Error::Shape {
                op: "forecast table",
                left: table.shape(),
                right: self.kbps.shape(),
            });
        }
        self.forecast = Some(table);
        self.warmup = forecaster.warmup();
        Ok(self)
    }

    pub fn steps(&self) -> usize {
        self.kbps.rows()
    }
}

/// Raw and normalized metrics of the link chosen at one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub action: usize,
    pub throughput: f64,
    pub latency: f64,
    pub packet_loss: f64,
    pub utilization: f64,
    /// `[throughput, latency, packet_loss]` normalized to [0, 1].
    pub normalized: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub state: Matrix,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// Raw metrics of a link carrying `background` plus `demand` Kbps.
/// Returns `(throughput of the demand, latency, loss ratio, utilization)`.
pub fn link_metrics(link: &Link, background: f64, demand: f64) -> (f64, f64, f64, f64) {
    let u = (background + demand) / link.capacity;
    let throughput = demand.min((link.capacity - background).max(0.0));
    let latency = link.base_latency / (1.0 - u.min(0.99));
    let loss = if u > 1.0 { (u - 1.0) / u } else { 0.0 };
    (throughput, latency, loss, u)
}

/// `α·throughput − β·latency − γ·loss` on normalized metrics.
pub fn reward_of(metrics: [f64; 3], w: &RewardWeights) -> f64 {
    w.alpha * metrics[0] - w.beta * metrics[1] - w.gamma * metrics[2]
}

pub struct Env {
    cfg: EnvConfig,
    links: Vec<Link>,
    background: Background,
    max_capacity: f64,
    latency_scale: f64,
    start: usize,
    step: usize,
    done: bool,
    state: Matrix,
}

impl Env {
    pub fn new(cfg: &EnvConfig, topology: &FatTreeTopology, background: Background) -> Result<Self> {
        cfg.validate()?;
        let links = topology.links().to_vec();
        if links.is_empty() {
            return Err(Error::Env("topology has no links".into()));
        }
        if background.kbps.cols() != links.len() {
            return Err(Error::Env(format!(
                "background has {} links, topology has {}",
                background.kbps.cols(),
                links.len()
            )));
        }
        if cfg.forecast_source == ForecastSource::Model && background.forecast.is_none() {
            return Err(Error::Env(
                "model forecast source needs a trained forecaster checkpoint".into(),
            ));
        }
        let first = if cfg.forecast_source == ForecastSource::Model { background.warmup.max(1) } else { 1 };
        if background.steps() < first + cfg.episode_length + 1 {
            return Err(Error::Env(format!(
                "background has {} steps; an episode of {} needs at least {}",
                background.steps(),
                cfg.episode_length,
                first + cfg.episode_length + 1
            )));
        }
        let max_capacity = links.iter().map(|l| l.capacity).fold(0.0, f64::max);
        let max_base = links.iter().map(|l| l.base_latency).fold(0.0, f64::max);
        Ok(Self {
            cfg: cfg.clone(),
            state: Matrix::zeros(links.len(), STATE_WIDTH),
            links,
            background,
            max_capacity,
            latency_scale: cfg.latency_reference * max_base,
            start: first,
            step: 0,
            done: true,
        })
    }

    pub fn n_links(&self) -> usize {
        self.links.len()
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn state(&self) -> &Matrix {
        &self.state
    }

    /// Time step the next action will face.
    pub fn current_time(&self) -> usize {
        self.start + self.step
    }

    pub fn background(&self) -> &Background {
        &self.background
    }

    /// Multipliers turning normalized `[throughput, latency, packet_loss]` back into raw units.
    pub fn normalization(&self) -> [f64; 3] {
        [self.max_capacity, self.latency_scale, 1.0]
    }

    fn normalize(&self, throughput: f64, latency: f64, loss: f64) -> [f64; 3] {
        [
            (throughput / self.max_capacity).clamp(0.0, 1.0),
            (latency / self.latency_scale).clamp(0.0, 1.0),
            loss.clamp(0.0, 1.0),
        ]
    }

    /// Starts an episode at a seeded offset into the background.
    pub fn reset(&mut self, seed: u64) -> Matrix {
        let first = if self.cfg.forecast_source == ForecastSource::Model { self.background.warmup.max(1) } else { 1 };
        let span = self.background.steps() - self.cfg.episode_length - first;
        let mut rng = RngStream::new(seed).derive("env/reset");
        self.start = first + rng.below(span);
        self.step = 0;
        self.done = false;
        self.observe(self.start - 1, None);
        self.state.clone()
    }

    /// Refreshes the forecast column for the next decision time.
    pub fn inject_forecast(&mut self) {
        self.fill_forecast(self.current_time());
    }

    fn fill_forecast(&mut self, t: usize) {
        for (l, link) in self.links.iter().enumerate() {
            let predicted = match self.cfg.forecast_source {
                ForecastSource::Zero => 0.0,
                ForecastSource::Oracle => self.background.kbps.get(t, l),
                ForecastSource::Model => self.background.forecast.as_ref().map_or(0.0, |f| f.get(t, l)),
            };
            self.state.set(l, 3, (predicted / link.capacity).clamp(0.0, 1.0));
        }
    }

    /// Fills link metrics for time `t`; `selected` carries the demand.
    fn observe(&mut self, t: usize, selected: Option<usize>) -> Option<StepInfo> {
        let mut info = None;
        for l in 0..self.links.len() {
            let link = &self.links[l];
            let b = self.background.kbps.get(t, l);
            let (throughput, latency, loss, u) = match selected {
                Some(a) if a == l => link_metrics(link, b, self.cfg.demand_kbps),
                _ => {
                    let (_, lat, loss, u) = link_metrics(link, b, 0.0);
                    (b.min(link.capacity), lat, loss, u)
                }
            };
            let norm = self.normalize(throughput, latency, loss);
            self.state.row_mut(l)[..3].copy_from_slice(&norm);
            if selected == Some(l) {
                info = Some(StepInfo {
                    action: l,
                    throughput,
                    latency,
                    packet_loss: loss,
                    utilization: u,
                    normalized: norm,
                });
            }
        }
        self.fill_forecast(t + 1);
        info
    }

    /// Routes the demand onto link `action` for the current time step.
    pub fn step(&mut self, action: usize) -> Result<StepResult> {
        if self.done {
            return Err(Error::Env("step called on a finished episode; call reset first".into()));
        }
        if action >= self.links.len() {
            return Err(Error::Env(format!("action {action} out of range for {} links", self.links.len())));
        }
        let t = self.current_time();
        let info = self.observe(t, Some(action)).expect("selected link observed");
        self.step += 1;
        self.done = self.step == self.cfg.episode_length;
        Ok(StepResult {
            state: self.state.clone(),
            reward: reward_of(info.normalized, &self.cfg.reward),
            done: self.done,
            info,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeLogRow {
    pub episode: usize,
    pub step: usize,
    pub action: usize,
    pub reward: f64,
    pub throughput: f64,
    pub latency: f64,
    pub packet_loss: f64,
    pub forecast_source: ForecastSource,
}

impl EpisodeLogRow {
    pub fn from_step(episode: usize, step: usize, result: &StepResult, source: ForecastSource) -> Self {
        let n = result.info.normalized;
        Self {
            episode,
            step,
            action: result.info.action,
            reward: result.reward,
            throughput: n[0],
            latency: n[1],
            packet_loss: n[2],
            forecast_source: source,
        }
    }
}

pub const EPISODE_LOG_HEADER: [&str; 8] =
    ["episode", "step", "action", "reward", "throughput", "latency", "packet_loss", "forecast_source"];

pub fn write_episode_log<W: Write>(w: W, rows: &[EpisodeLogRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(EPISODE_LOG_HEADER)?;
    for r in rows {
        out.write_record([
            r.episode.to_string(),
            r.step.to_string(),
            r.action.to_string(),
            r.reward.to_string(),
            r.throughput.to_string(),
            r.latency.to_string(),
            r.packet_loss.to_string(),
            r.forecast_source.label().to_string(),
        ])?;
    }
    out.flush().map_err(|e| Error::io("<episode log>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{build_fat_tree, FatTreeConfig};
    use proptest::prelude::*;

    fn default_env(source: ForecastSource, seed: u64) -> Env {
        let topo = build_fat_tree(&FatTreeConfig::default()).unwrap();
        let (bg, _) = Background::synthetic(&topo, &SynthProfile::default(), 200, seed).unwrap();
        let cfg = EnvConfig {
            forecast_source: source,
            ..EnvConfig::default()
        };
        Env::new(&cfg, &topo, bg).unwrap()
    }

    fn toy_topology() -> FatTreeTopology {
        build_fat_tree(&FatTreeConfig {
            n_core: 1,
            n_agg: 2,
            n_edge: 1,
            hosts_per_edge: 0,
            ..FatTreeConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn reset_shape_range_and_determinism() {
        let mut env = default_env(ForecastSource::Oracle, 1);
        let s = env.reset(7);
        assert_eq!(s.shape(), (40, 4));
        assert!(s.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(s, env.reset(7));
    }

    #[test]
    fn reward_examples() {
        let w = RewardWeights::default();
        assert_eq!(reward_of([1.0, 0.0, 0.0], &w), 1.0);
        assert_eq!(reward_of([0.0, 1.0, 1.0], &w), -2.0);
        assert!((reward_of([0.5, 0.25, 0.1], &w) - 0.15).abs() < 1e-15);
        assert!(RewardWeights { alpha: 0.0, beta: 0.0, gamma: 0.0 }.validate().is_err());
        assert!(RewardWeights { alpha: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn idle_link_beats_saturated_link() {
        let topo = toy_topology();
        let cfg = EnvConfig {
            dynamics: Dynamics::Static,
            forecast_source: ForecastSource::Oracle,
            episode_length: 1,
            ..EnvConfig::default()
        };
        let bg = Background::constant(topo.links(), &[0.0, 0.95, 0.5, 0.5], 10).unwrap();
        let mut env = Env::new(&cfg, &topo, bg).unwrap();
        env.reset(0);
        let idle = env.step(0).unwrap();
        assert!(idle.done);
        env.reset(0);
        let busy = env.step(1).unwrap();
        assert!(idle.reward > busy.reward);
        assert_eq!(idle.info.packet_loss, 0.0);
        assert!(busy.info.packet_loss > 0.0);
        assert!(env.step(0).is_err());
    }

    #[test]
    fn invalid_actions_are_errors() {
        let mut env = default_env(ForecastSource::Zero, 1);
        env.reset(1);
        assert!(env.step(40).is_err());
        assert!(env.step(39).is_ok());
    }

    #[test]
    fn forecast_sources() {
        let mut env = default_env(ForecastSource::Zero, 2);
        let s = env.reset(3);
        assert!((0..40).all(|l| s.get(l, 3) == 0.0));

        let mut env = default_env(ForecastSource::Oracle, 2);
        let mut s = env.reset(3);
        for _ in 0..5 {
            let t = env.current_time();
            let links = build_fat_tree(&FatTreeConfig::default()).unwrap();
            for (l, link) in links.links().iter().enumerate() {
                let want = (env.background().kbps.get(t, l) / link.capacity).clamp(0.0, 1.0);
                assert_eq!(s.get(l, 3), want);
            }
            s = env.step(0).unwrap().state;
        }

        let topo = build_fat_tree(&FatTreeConfig::default()).unwrap();
        let (bg, _) = Background::synthetic(&topo, &SynthProfile::default(), 100, 1).unwrap();
        let cfg = EnvConfig::default();
        assert!(matches!(Env::new(&cfg, &topo, bg), Err(Error::Env(_))));
    }

    struct Shifted;
    impl NextStepForecaster for Shifted {
        fn forecast_table(&self, trace: &Trace) -> Result<Matrix> {
            let bg = Background::from_trace(trace, 40)?;
            Ok(bg.kbps.map(|v| v * 0.5))
        }
        fn warmup(&self) -> usize {
            24
        }
    }

    #[test]
    fn model_source_uses_forecast_table() {
        let topo = build_fat_tree(&FatTreeConfig::default()).unwrap();
        let (bg, trace) = Background::synthetic(&topo, &SynthProfile::default(), 120, 1).unwrap();
        let bg = bg.with_forecasts(&Shifted, &trace).unwrap();
        let mut env = Env::new(&EnvConfig::default(), &topo, bg).unwrap();
        let s = env.reset(5);
        let t = env.current_time();
        assert!(t >= 24);
        for (l, link) in topo.links().iter().enumerate() {
            let want = (0.5 * env.background().kbps.get(t, l) / link.capacity).clamp(0.0, 1.0);
            assert_eq!(s.get(l, 3), want);
        }
    }

    #[test]
    fn greedy_on_oracle_maximizes_single_step_reward() {
        let topo = build_fat_tree(&FatTreeConfig {
            upper_capacity: 10_000.0,
            host_capacity: 10_000.0,
            ..FatTreeConfig::default()
        })
        .unwrap();
        let util: Vec<f64> = (0..40).map(|i| ((i * 37) % 41) as f64 / 40.0 * 1.2).collect();
        let cfg = EnvConfig {
            dynamics: Dynamics::Static,
            forecast_source: ForecastSource::Oracle,
            static_utilization: util.clone(),
            ..EnvConfig::default()
        };
        let bg = Background::constant(topo.links(), &util, 60).unwrap();
        let mut env = Env::new(&cfg, &topo, bg).unwrap();
        let s = env.reset(1);
        let greedy = (0..40).min_by(|&a, &b| s.get(a, 3).total_cmp(&s.get(b, 3))).unwrap();
        let rewards: Vec<f64> = (0..40)
            .map(|a| {
                env.reset(1);
                env.step(a).unwrap().reward
            })
            .collect();
        let best = rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(rewards[greedy], best);
    }

    #[test]
    fn episode_log_format() {
        let mut env = default_env(ForecastSource::Oracle, 1);
        env.reset(0);
        let r = env.step(2).unwrap();
        let row = EpisodeLogRow::from_step(0, 0, &r, ForecastSource::Oracle);
        let mut buf = Vec::new();
        write_episode_log(&mut buf, &[row]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("episode,step,action,reward,throughput,latency,packet_loss,forecast_source\n0,0,2,"));
        assert!(text.trim_end().ends_with(",oracle"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn low_utilization_means_no_loss(b in 0.0f64..5000.0, d in 0.0f64..5000.0) {
            let link = toy_topology().links()[0].clone();
            let (thr, lat, loss, u) = link_metrics(&link, b, d);
            if u <= 1.0 {
                prop_assert_eq!(loss, 0.0);
            }
            prop_assert!(thr <= d && thr >= 0.0 && lat.is_finite());
        }

        #[test]
        fn reward_monotone(t in 0.0f64..1.0, l in 0.0f64..1.0, p in 0.0f64..1.0, dx in 1e-6f64..0.5) {
            let w = RewardWeights::default();
            prop_assert!(reward_of([t + dx, l, p], &w) > reward_of([t, l, p], &w));
            prop_assert!(reward_of([t, l + dx, p], &w) < reward_of([t, l, p], &w));
            prop_assert!(reward_of([t, l, p + dx], &w) < reward_of([t, l, p], &w));
        }

        #[test]
        fn determinism_and_ranges(seed in 0u64..1000, actions in prop::collection::vec(0usize..40, 50)) {
            let run = || {
                let mut env = default_env(ForecastSource::Oracle, 9);
                let mut states = vec![env.reset(seed)];
                let mut rewards = Vec::new();
                for &a in &actions {
                    let r = env.step(a).unwrap();
                    prop_assert!(r.state.data().iter().all(|v| (0.0..=1.0).contains(v)));
                    prop_assert!(r.info.throughput.is_finite() && r.info.latency.is_finite());
                    states.push(r.state);
                    rewards.push(r.reward);
                }
                Ok((states, rewards))
            };
            prop_assert_eq!(run()?, run()?);
        }
    }
}
