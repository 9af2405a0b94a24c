//! Deep Q-learning link selector and the round-robin baselines.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{Env, StepResult, STATE_WIDTH};
use crate::error::{Error, Result};
use crate::nn::{checkpoint, AdamConfig, Init, Linear, Matrix, ParamStore, RngStream, Tape, Var};

pub const DQN_COMPONENT: &str = "dqn";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DqnConfig {
    pub episodes: usize,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub discount: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay: f64,
    /// Episodes between hard target-network copies.
    pub target_sync_every: usize,
    pub hidden: Vec<usize>,
    pub dropout: f64,
    /// Gradient steps start once the buffer holds more than this many transitions.
    pub warmup_transitions: usize,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            episodes: 1000,
            buffer_capacity: 10_000,
            batch_size: 64,
            learning_rate: 0.003,
            discount: 0.99,
            epsilon_start: 1.0,
            epsilon_end: 0.01,
            epsilon_decay: 0.995,
            target_sync_every: 10,
            hidden: vec![128, 128],
            dropout: 0.1,
            warmup_transitions: 1000,
        }
    }
}

impl DqnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("dqn: {m}")));
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return bad("discount must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.epsilon_start) || !(0.0..=1.0).contains(&self.epsilon_end) {
            return bad("epsilon bounds must be in [0, 1]");
        }
        if self.epsilon_end > self.epsilon_start {
            return bad("epsilon_end must not exceed epsilon_start");
        }
        if !(self.epsilon_decay > 0.0 && self.epsilon_decay <= 1.0) {
            return bad("epsilon_decay must be in (0, 1]");
        }
        if self.batch_size == 0 || self.buffer_capacity < self.batch_size {
            return bad("need 0 < batch_size <= buffer_capacity");
        }
        if self.target_sync_every == 0 {
            return bad("target_sync_every must be positive");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layer sizes must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }
}

/// `ε(e) = max(ε_end, ε_start · decay^e)`.
pub fn epsilon_at(cfg: &DqnConfig, episode: usize) -> f64 {
    let e = i32::try_from(episode).unwrap_or(i32::MAX);
    (cfg.epsilon_start * cfg.epsilon_decay.powi(e)).max(cfg.epsilon_end)
}

/// Fully connected Q-network over the flattened link state.
#[derive(Clone, Debug)]
pub struct QNetwork {
    pub store: ParamStore,
    layers: Vec<Linear>,
    n_links: usize,
    dropout: f64,
}

impl QNetwork {
    pub fn new(n_links: usize, hidden: &[usize], dropout: f64, rng: &mut RngStream) -> Self {
        let mut store = ParamStore::new();
        let mut sizes = vec![n_links * STATE_WIDTH];
        sizes.extend_from_slice(hidden);
        sizes.push(n_links);
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&mut store, &format!("q.l{i}"), w[0], w[1], Init::XavierUniform, rng))
            .collect();
        Self {
            store,
            layers,
            n_links,
            dropout,
        }
    }

    /// Same architecture over different parameter values.
    pub fn with_store(&self, store: ParamStore) -> Self {
        Self { store, ..self.clone() }
    }

    pub fn n_links(&self) -> usize {
        self.n_links
    }

    pub fn input_width(&self) -> usize {
        self.n_links * STATE_WIDTH
    }

    /// `states [B × L·4]` → `[B × L]`.
    pub fn forward(&self, tape: &mut Tape, states: Var, training: bool, rng: &mut RngStream) -> Var {
        let last = self.layers.len() - 1;
        let mut h = states;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, &self.store, h);
            if i < last {
                h = tape.relu(h);
                h = tape.dropout(h, self.dropout, training, rng);
            }
        }
        h
    }

    /// Inference-mode Q-values for a batch of flattened states.
    pub fn q_batch(&self, states: &Matrix) -> Result<Matrix> {
        if states.cols() != self.input_width() {
            return Err(Error::Shape {
                op: "q_forward",
                left: states.shape(),
                right: (1, self.input_width()),
            });
        }
        let mut tape = Tape::new();
        let x = tape.leaf(states.clone());
        // dropout is off in inference, so the stream is never drawn from
        let mut unused = RngStream::new(0);
        let out = self.forward(&mut tape, x, false, &mut unused);
        Ok(tape.value(out).clone())
    }

    pub fn q_forward(&self, state: &[f64]) -> Result<Vec<f64>> {
        Ok(self.q_batch(&Matrix::row_vector(state))?.row(0).to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.store, DQN_COMPONENT)
    }

    /// Loads weights into a network of the given architecture.
    pub fn load(path: &Path, n_links: usize, hidden: &[usize], dropout: f64) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPrerequisite {
                path: path.to_path_buf(),
                producer: "train-agent",
            });
        }
        let mut net = Self::new(n_links, hidden, dropout, &mut RngStream::new(0));
        checkpoint::load(path, DQN_COMPONENT, &mut net.store)?;
        Ok(net)
    }
}

/// Hard copy of every online parameter into the target network.
pub fn sync_target(online: &QNetwork, target: &mut QNetwork) -> Result<()> {
    target.store.copy_values_from(&online.store)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Uniform random action with probability `epsilon`, otherwise greedy.
pub fn select_action(q: &[f64], epsilon: f64, rng: &mut RngStream) -> usize {
    if rng.uniform() < epsilon {
        rng.below(q.len())
    } else {
        argmax(q)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// Bounded FIFO of transitions.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    pub fn push(&mut self, t: Transition) {
        if self.capacity == 0 {
            return;
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    /// Uniform sample of `k` distinct transitions (Floyd's algorithm).
    pub fn sample(&self, k: usize, rng: &mut RngStream) -> Result<Vec<&Transition>> {
        let n = self.items.len();
        if k > n {
            return Err(Error::Data(format!("cannot sample {k} transitions from a buffer of {n}")));
        }
        let mut picked: Vec<usize> = Vec::with_capacity(k);
        for j in n - k..n {
            let t = rng.below(j + 1);
            picked.push(if picked.contains(&t) { j } else { t });
        }
        Ok(picked.into_iter().map(|i| &self.items[i]).collect())
    }
}

/// Bellman targets from a frozen network: `r` if terminal, else `r + γ·max Q′(s′)`.
pub fn td_targets(batch: &[&Transition], target: &QNetwork, discount: f64) -> Result<Vec<f64>> {
    let next = stack(batch.iter().map(|t| t.next_state.as_slice()), target.input_width())?;
    let q = target.q_batch(&next)?;
    Ok(batch
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if t.done {
                t.reward
            } else {
                let best = q.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
                t.reward + discount * best
            }
        })
        .collect())
}

fn stack<'a>(rows: impl Iterator<Item = &'a [f64]>, width: usize) -> Result<Matrix> {
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        if r.len() != width {
            return Err(Error::Shape {
                op: "state batch",
                left: (1, r.len()),
                right: (1, width),
            });
        }
        data.extend_from_slice(r);
        n += 1;
    }
    Matrix::from_vec(n, width, data)
}

/// Mean squared TD error of the online network against fixed targets.
pub fn td_loss(
    tape: &mut Tape,
    online: &QNetwork,
    batch: &[&Transition],
    targets: &[f64],
    training: bool,
    rng: &mut RngStream,
) -> Result<Var> {
    let states = stack(batch.iter().map(|t| t.state.as_slice()), online.input_width())?;
    let actions: Vec<usize> = batch.iter().map(|t| t.action).collect();
    if let Some(&a) = actions.iter().find(|&&a| a >= online.n_links()) {
        return Err(Error::Data(format!("transition action {a} out of range")));
    }
    let x = tape.leaf(states);
    let q = online.forward(tape, x, training, rng);
    let chosen = tape.pick_cols(q, &actions);
    Ok(tape.mse_loss(chosen, Matrix::column_vector(targets)))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurveRow {
    pub episode: usize,
    pub reward: f64,
    pub throughput: f64,
    pub latency: f64,
    pub packet_loss: f64,
    pub epsilon: f64,
}

#[derive(Clone, Debug)]
pub struct DqnOutcome {
    /// Network from the highest-reward episode.
    pub policy: QNetwork,
    pub curves: Vec<CurveRow>,
    /// Actions taken over all training steps, indexed by link.
    pub histogram: Vec<u64>,
    pub best_episode: usize,
    pub best_reward: f64,
    pub syncs: usize,
    pub gradient_steps: usize,
    /// Training stopped early on a non-finite loss.
    pub diverged: bool,
}

/// Reset seed for one episode, distinct across episodes of a run.
pub fn episode_seed(seed: u64, episode: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (episode as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

pub fn flatten(state: &Matrix) -> Vec<f64> {
    state.data().to_vec()
}

pub fn train_dqn(env: &mut Env, cfg: &DqnConfig, seed: u64) -> Result<DqnOutcome> {
    cfg.validate()?;
    let root = RngStream::new(seed).derive("dqn");
    let n = env.n_links();
    let online_init = &mut root.derive("init/online");
    let mut online = QNetwork::new(n, &cfg.hidden, cfg.dropout, online_init);
    let mut target = QNetwork::new(n, &cfg.hidden, cfg.dropout, &mut root.derive("init/target"));
    let mut explore = root.derive("explore");
    let mut replay_rng = root.derive("replay");
    let mut dropout_rng = root.derive("dropout");
    let adam = AdamConfig::with_lr(cfg.learning_rate);

    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let mut curves = Vec::with_capacity(cfg.episodes);
    let mut histogram = vec![0u64; n];
    let mut best: Option<(usize, f64, QNetwork)> = None;
    let (mut syncs, mut gradient_steps, mut diverged) = (0, 0, false);

    'episodes: for e in 0..cfg.episodes {
        let epsilon = epsilon_at(cfg, e);
        let mut state = flatten(&env.reset(episode_seed(seed, e)));
        let (mut total, mut sums, mut steps) = (0.0, [0.0; 3], 0usize);
        loop {
            let q = online.q_forward(&state)?;
            let action = select_action(&q, epsilon, &mut explore);
            let StepResult { state: next, reward, done, info } = env.step(action)?;
            let next = flatten(&next);
            histogram[action] += 1;
            total += reward;
            for (s, v) in sums.iter_mut().zip(info.normalized) {
                *s += v;
            }
            steps += 1;
            buffer.push(Transition {
                state: std::mem::replace(&mut state, next.clone()),
                action,
                reward,
                next_state: next,
                done,
            });
            if buffer.len() > cfg.warmup_transitions && buffer.len() >= cfg.batch_size {
                let batch = buffer.sample(cfg.batch_size, &mut replay_rng)?;
                let targets = td_targets(&batch, &target, cfg.discount)?;
                let mut tape = Tape::new();
                let loss = td_loss(&mut tape, &online, &batch, &targets, true, &mut dropout_rng)?;
                if !tape.scalar(loss).is_finite() {
                    log::error!("non-finite TD loss at episode {e}; keeping the best network so far");
                    diverged = true;
                    break 'episodes;
                }
                online.store.zero_grad();
                tape.backward(loss, &mut online.store);
                online.store.adam_step(&adam)?;
                gradient_steps += 1;
            }
            if done {
                break;
            }
        }
        let k = steps as f64;
        curves.push(CurveRow {
            episode: e,
            reward: total,
            throughput: sums[0] / k,
            latency: sums[1] / k,
            packet_loss: sums[2] / k,
            epsilon,
        });
        if best.as_ref().is_none_or(|b| total > b.1) {
            best = Some((e, total, online.clone()));
        }
        if (e + 1) % cfg.target_sync_every == 0 {
            sync_target(&online, &mut target)?;
            syncs += 1;
        }
        if (e + 1) % 50 == 0 {
            log::info!("episode {}: reward {total:.4}, epsilon {epsilon:.4}", e + 1);
        }
    }
    let (best_episode, best_reward, policy) = best.unwrap_or((0, f64::NEG_INFINITY, online));
    Ok(DqnOutcome {
        policy,
        curves,
        histogram,
        best_episode,
        best_reward,
        syncs,
        gradient_steps,
        diverged,
    })
}

pub const CURVES_HEADER: [&str; 6] = ["episode", "reward", "throughput", "latency", "packet_loss", "epsilon"];

pub fn write_curves<W: Write>(w: W, rows: &[CurveRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CURVES_HEADER)?;
    for r in rows {
        out.write_record([
            r.episode.to_string(),
            r.reward.to_string(),
            r.throughput.to_string(),
            r.latency.to_string(),
            r.packet_loss.to_string(),
            r.epsilon.to_string(),
        ])?;
    }
    out.flush().map_err(|e| Error::io("<curves csv>", e))?;
    Ok(())
}

pub fn write_histogram<W: Write>(w: W, counts: &[u64]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["action", "count"])?;
    for (a, c) in counts.iter().enumerate() {
        out.write_record([a.to_string(), c.to_string()])?;
    }
    out.flush().map_err(|e| Error::io("<histogram csv>", e))?;
    Ok(())
}

/// Cyclic selection starting at index 0.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RoundRobin {
    index: usize,
}

impl RoundRobin {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next(&mut self, n_links: usize) -> Result<usize> {
        if n_links == 0 {
            return Err(Error::Config("round robin over zero links".into()));
        }
        let a = self.index % n_links;
        self.index = (a + 1) % n_links;
        Ok(a)
    }
}

/// Weighted round robin that decrements the current weight by one per pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WeightedRoundRobin {
    weights: Vec<u64>,
    index: usize,
    current: i64,
}

impl WeightedRoundRobin {
    pub fn new(weights: Vec<u64>) -> Result<Self> {
        if weights.is_empty() || weights.contains(&0) {
            return Err(Error::Config("weighted round robin needs weights >= 1".into()));
        }
        Ok(Self {
            index: weights.len() - 1,
            weights,
            current: 0,
        })
    }

    pub fn weights(&self) -> &[u64] {
        &self.weights
    }

    pub fn next(&mut self) -> usize {
        let n = self.weights.len();
        let max = *self.weights.iter().max().expect("non-empty") as i64;
        loop {
            self.index = (self.index + 1) % n;
            if self.index == 0 {
                self.current -= 1;
                if self.current <= 0 {
                    self.current = max;
                }
            }
            if self.weights[self.index] as i64 >= self.current {
                return self.index;
            }
        }
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Capacities reduced to small integers by their greatest common divisor.
pub fn wrr_weights(capacities: &[f64]) -> Result<Vec<u64>> {
    let ints: Vec<u64> = capacities.iter().map(|c| c.round().max(0.0) as u64).collect();
    if ints.is_empty() || ints.contains(&0) {
        return Err(Error::Config("link capacities must round to positive integers".into()));
    }
    let g = ints.iter().copied().fold(0, gcd);
    Ok(ints.into_iter().map(|c| c / g).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Dqn,
    Rr,
    Wrr,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 3] = [PolicyKind::Dqn, PolicyKind::Rr, PolicyKind::Wrr];

    pub fn label(self) -> &'static str {
        match self {
            PolicyKind::Dqn => "dqn",
            PolicyKind::Rr => "rr",
            PolicyKind::Wrr => "wrr",
        }
    }
}

/// Anything that picks a link from the current state.
pub trait Policy {
    fn act(&mut self, state: &Matrix) -> Result<usize>;
}

/// Greedy actions from a trained network.
pub struct Greedy<'a>(pub &'a QNetwork);

impl Policy for Greedy<'_> {
    fn act(&mut self, state: &Matrix) -> Result<usize> {
        Ok(argmax(&self.0.q_forward(state.data())?))
    }
}

impl Policy for (RoundRobin, usize) {
    fn act(&mut self, _: &Matrix) -> Result<usize> {
        self.0.next(self.1)
    }
}

impl Policy for WeightedRoundRobin {
    fn act(&mut self, _: &Matrix) -> Result<usize> {
        Ok(self.next())
    }
}

/// Runs one full episode from `env.reset(seed)`.
pub fn rollout(env: &mut Env, policy: &mut dyn Policy, seed: u64) -> Result<Vec<StepResult>> {
    let mut state = env.reset(seed);
    let mut steps = Vec::with_capacity(env.config().episode_length);
    loop {
        let a = policy.act(&state)?;
        let r = env.step(a)?;
        state = r.state.clone();
        let done = r.done;
        steps.push(r);
        if done {
            return Ok(steps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Background, Dynamics, EnvConfig, ForecastSource};
    use crate::nn::finite_diff_check;
    use crate::topology::{build_fat_tree, FatTreeConfig};
    use proptest::prelude::*;

    fn toy_env(utilization: &[f64], episode_length: usize) -> Env {
        let topo = build_fat_tree(&FatTreeConfig {
            n_core: 1,
            n_agg: 2,
            n_edge: 1,
            hosts_per_edge: 0,
            ..FatTreeConfig::default()
        })
        .unwrap();
        let cfg = EnvConfig {
            dynamics: Dynamics::Static,
            forecast_source: ForecastSource::Oracle,
            episode_length,
            ..EnvConfig::default()
        };
        let bg = Background::constant(topo.links(), utilization, episode_length * 4).unwrap();
        Env::new(&cfg, &topo, bg).unwrap()
    }

    fn transition(rng: &mut RngStream, width: usize, n: usize) -> Transition {
        let mut v = || (0..width).map(|_| rng.uniform()).collect::<Vec<_>>();
        let (state, next_state) = (v(), v());
        Transition {
            state,
            action: rng.below(n),
            reward: rng.uniform_range(-1.0, 1.0),
            next_state,
            done: rng.bernoulli(0.2),
        }
    }

    #[test]
    fn q_forward_shape_and_inference_determinism() {
        let net = QNetwork::new(40, &[128, 128], 0.1, &mut RngStream::new(1));
        let s: Vec<f64> = (0..160).map(|i| i as f64 / 160.0).collect();
        let q = net.q_forward(&s).unwrap();
        assert_eq!(q.len(), 40);
        assert_eq!(q, net.q_forward(&s).unwrap());
        assert!(net.q_forward(&s[..100]).is_err());
    }

    #[test]
    fn action_selection_examples() {
        let mut rng = RngStream::new(0);
        assert_eq!(select_action(&[1.0, 3.0, 2.0], 0.0, &mut rng), 1);
        assert_eq!(select_action(&[5.0, 5.0, 1.0], 0.0, &mut rng), 0);
        let mut counts = [0usize; 4];
        let draws = 100_000;
        for _ in 0..draws {
            counts[select_action(&[9.0, 0.0, 0.0, 0.0], 1.0, &mut rng)] += 1;
        }
        for c in counts {
            assert!((c as f64 / draws as f64 - 0.25).abs() < 0.01, "{counts:?}");
        }
    }

    #[test]
    fn epsilon_schedule() {
        let cfg = DqnConfig::default();
        assert_eq!(epsilon_at(&cfg, 0), 1.0);
        assert!((epsilon_at(&cfg, 1) - 0.995).abs() < 1e-15);
        let floor = (0.01f64.ln() / 0.995f64.ln()).ceil() as usize;
        assert_eq!(floor, 919);
        assert!(epsilon_at(&cfg, 918) > 0.01);
        assert_eq!(epsilon_at(&cfg, 919), 0.01);
        assert_eq!(epsilon_at(&cfg, 5000), 0.01);
    }

    #[test]
    fn buffer_fifo_and_sampling() {
        let mut rng = RngStream::new(2);
        let mut b = ReplayBuffer::new(3);
        let items: Vec<Transition> = (0..4).map(|_| transition(&mut rng, 2, 2)).collect();
        for t in &items {
            b.push(t.clone());
        }
        assert_eq!(b.len(), 3);
        assert!(b.iter().all(|t| *t != items[0]));
        let mut all = b.sample(3, &mut rng).unwrap();
        all.sort_by(|x, y| x.reward.total_cmp(&y.reward));
        let mut expect: Vec<&Transition> = items[1..].iter().collect();
        expect.sort_by(|x, y| x.reward.total_cmp(&y.reward));
        assert_eq!(all, expect);
        assert!(b.sample(4, &mut rng).is_err());
    }

    #[test]
    fn sampling_is_uniform() {
        let mut rng = RngStream::new(3);
        let n = 20;
        let mut b = ReplayBuffer::new(n);
        for i in 0..n {
            b.push(Transition {
                state: vec![],
                action: i,
                reward: 0.0,
                next_state: vec![],
                done: false,
            });
        }
        let mut counts = vec![0usize; n];
        let draws = 10_000;
        for _ in 0..draws / 5 {
            let s = b.sample(5, &mut rng).unwrap();
            let mut seen: Vec<usize> = s.iter().map(|t| t.action).collect();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen.len(), 5);
            for t in s {
                counts[t.action] += 1;
            }
        }
        let expected = draws as f64 / n as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 19 degrees of freedom, 0.1% critical value
        assert!(chi2 < 43.82, "chi2 = {chi2}");
    }

    #[test]
    fn td_target_examples() {
        let net = QNetwork::new(2, &[4], 0.0, &mut RngStream::new(0));
        let done = Transition {
            state: vec![0.0; 8],
            action: 0,
            reward: 2.0,
            next_state: vec![0.3; 8],
            done: true,
        };
        assert_eq!(td_targets(&[&done], &net, 0.99).unwrap(), vec![2.0]);
        let live = Transition { done: false, ..done.clone() };
        assert_eq!(td_targets(&[&live], &net, 1e-300).unwrap()[0], 2.0);

        // output layer set so that Q′ = [2, 1.5] everywhere
        let mut net = net;
        let ids: Vec<_> = net.store.ids().collect();
        for &id in &ids[2..] {
            for v in net.store.get_mut(id).value.data_mut() {
                *v = 0.0;
            }
        }
        net.store.get_mut(ids[3]).value = Matrix::row_vector(&[2.0, 1.5]);
        let one = Transition { reward: 1.0, ..live };
        assert!((td_targets(&[&one], &net, 0.99).unwrap()[0] - 2.98).abs() < 1e-12);
    }

    #[test]
    fn td_loss_gradients() {
        for seed in 0..20u64 {
            let mut rng = RngStream::new(seed);
            let mut online = QNetwork::new(2, &[5, 4], 0.0, &mut rng);
            let mut target = QNetwork::new(2, &[5, 4], 0.0, &mut rng);
            // zero biases put a fully inactive layer exactly on the ReLU kink
            for id in online.store.ids().collect::<Vec<_>>() {
                if online.store.name(id).ends_with(".b") {
                    for v in online.store.get_mut(id).value.data_mut() {
                        *v = rng.uniform_range(-0.1, 0.1);
                    }
                }
            }
            let batch: Vec<Transition> = (0..6).map(|_| transition(&mut rng, 8, 2)).collect();
            let refs: Vec<&Transition> = batch.iter().collect();
            let targets = td_targets(&refs, &target, 0.9).unwrap();
            let store = &mut online.store;
            let net = QNetwork { store: ParamStore::new(), ..target.clone() };
            let err = finite_diff_check(store, 1e-5, |s, tape| {
                let probe = QNetwork { store: s.clone(), ..net.clone() };
                td_loss(tape, &probe, &refs, &targets, true, &mut RngStream::new(0))
            })
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");

            target.store.zero_grad();
            let mut tape = Tape::new();
            let loss = td_loss(&mut tape, &online, &refs, &targets, false, &mut rng).unwrap();
            tape.backward(loss, &mut online.store);
            assert!(target.store.grads().iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
        }
    }

    #[test]
    fn target_sync_is_exact() {
        let mut rng = RngStream::new(5);
        let online = QNetwork::new(3, &[8, 8], 0.1, &mut rng.derive("a"));
        let mut target = QNetwork::new(3, &[8, 8], 0.1, &mut rng.derive("b"));
        let s: Vec<f64> = (0..12).map(|_| rng.uniform()).collect();
        assert_ne!(online.q_forward(&s).unwrap(), target.q_forward(&s).unwrap());
        sync_target(&online, &mut target).unwrap();
        assert_eq!(online.q_forward(&s).unwrap(), target.q_forward(&s).unwrap());
        let other = QNetwork::new(4, &[8, 8], 0.1, &mut rng);
        assert!(sync_target(&other, &mut target).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = QNetwork::new(3, &[6], 0.1, &mut RngStream::new(9));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dqn.ckpt");
        net.save(&path).unwrap();
        let back = QNetwork::load(&path, 3, &[6], 0.1).unwrap();
        assert_eq!(net.store.values(), back.store.values());
        assert!(QNetwork::load(&path, 3, &[7], 0.1).is_err());
        assert!(matches!(
            QNetwork::load(&dir.path().join("nope"), 3, &[6], 0.1),
            Err(Error::MissingPrerequisite { .. })
        ));
    }

    fn small_dqn(episodes: usize) -> DqnConfig {
        DqnConfig {
            episodes,
            hidden: vec![16, 16],
            warmup_transitions: 50,
            batch_size: 16,
            buffer_capacity: 500,
            target_sync_every: 5,
            ..DqnConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic_and_syncs_on_schedule() {
        let cfg = small_dqn(20);
        let run = || {
            let mut env = toy_env(&[0.9, 0.9, 0.1, 0.9], 10);
            train_dqn(&mut env, &cfg, 11).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.curves, b.curves);
        assert_eq!(a.histogram, b.histogram);
        assert_eq!(a.policy.store.values(), b.policy.store.values());
        assert_eq!(a.curves.len(), 20);
        assert_eq!(a.syncs, 4);
        assert_eq!(a.histogram.iter().sum::<u64>(), 200);
        assert_eq!(a.gradient_steps, 200 - 50);
        assert_eq!(a.best_reward, a.curves.iter().map(|c| c.reward).fold(f64::MIN, f64::max));
        let mut csv = Vec::new();
        write_curves(&mut csv, &a.curves).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("episode,reward,throughput,latency,packet_loss,epsilon\n0,"));
        assert_eq!(text.lines().count(), 21);
    }

    #[test]
    fn learns_the_dominant_link() {
        let mut env = toy_env(&[0.9, 0.9, 0.1, 0.9], 20);
        let out = train_dqn(&mut env, &small_dqn(60), 4).unwrap();
        let steps = rollout(&mut env, &mut Greedy(&out.policy), 1234).unwrap();
        let hits = steps.iter().filter(|s| s.info.action == 2).count();
        assert!(hits as f64 >= 0.95 * steps.len() as f64, "{hits}/{}", steps.len());
    }

    #[test]
    fn round_robin_examples() {
        let mut rr = RoundRobin::new();
        let picks: Vec<usize> = (0..4).map(|_| rr.next(3).unwrap()).collect();
        assert_eq!(picks, [0, 1, 2, 0]);
        let mut rr = RoundRobin::new();
        assert!((0..5).all(|_| rr.next(1).unwrap() == 0));
        assert!(rr.next(0).is_err());
    }

    #[test]
    fn weighted_round_robin_examples() {
        let mut w = WeightedRoundRobin::new(vec![1, 1]).unwrap();
        assert_eq!((0..4).map(|_| w.next()).collect::<Vec<_>>(), [0, 1, 0, 1]);

        let mut w = WeightedRoundRobin::new(vec![3, 1, 1]).unwrap();
        for _ in 0..4 {
            let cycle: Vec<usize> = (0..5).map(|_| w.next()).collect();
            assert_eq!(cycle.iter().filter(|&&a| a == 0).count(), 3, "{cycle:?}");
        }

        let mut w = WeightedRoundRobin::new(vec![2, 1]).unwrap();
        let zeros = (0..3000).filter(|_| w.next() == 0).count();
        assert_eq!(zeros, 2000);

        assert!(WeightedRoundRobin::new(vec![]).is_err());
        assert!(WeightedRoundRobin::new(vec![0, 0]).is_err());
    }

    #[test]
    fn wrr_weights_from_capacities() {
        assert_eq!(wrr_weights(&[10_000.0, 5_000.0, 10_000.0]).unwrap(), vec![2, 1, 2]);
        assert_eq!(wrr_weights(&[7.0]).unwrap(), vec![1]);
        assert!(wrr_weights(&[0.0]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn buffer_bound_and_order(cap in 1usize..10, ops in prop::collection::vec(0u8..3, 0..60)) {
            let mut b = ReplayBuffer::new(cap);
            let mut rng = RngStream::new(1);
            let mut pushed = 0usize;
            for op in ops {
                if op < 2 {
                    b.push(Transition { state: vec![], action: pushed, reward: 0.0, next_state: vec![], done: false });
                    pushed += 1;
                } else if !b.is_empty() {
                    let k = 1 + rng.below(b.len());
                    prop_assert_eq!(b.sample(k, &mut rng).unwrap().len(), k);
                }
                prop_assert!(b.len() <= cap);
                let held: Vec<usize> = b.iter().map(|t| t.action).collect();
                let expect: Vec<usize> = (pushed.saturating_sub(cap)..pushed).collect();
                prop_assert_eq!(held, expect);
            }
        }

        #[test]
        fn epsilon_closed_form(e in 0usize..3000) {
            let cfg = DqnConfig::default();
            prop_assert_eq!(epsilon_at(&cfg, e), 0.01f64.max(0.995f64.powi(e as i32)));
        }

        #[test]
        fn rr_counts_are_exact(n in 1usize..12, k in 1usize..6) {
            let mut rr = RoundRobin::new();
            let mut counts = vec![0usize; n];
            for _ in 0..k * n {
                counts[rr.next(n).unwrap()] += 1;
            }
            prop_assert!(counts.iter().all(|&c| c == k));
        }

        #[test]
        fn wrr_frequencies(weights in prop::collection::vec(1u64..6, 1..6)) {
            let mut w = WeightedRoundRobin::new(weights.clone()).unwrap();
            let picks = 10_000;
            let mut counts = vec![0usize; weights.len()];
            for _ in 0..picks {
                counts[w.next()] += 1;
            }
            let total: u64 = weights.iter().sum();
            for (c, wt) in counts.iter().zip(&weights) {
                let f = *c as f64 / picks as f64;
                prop_assert!((f - *wt as f64 / total as f64).abs() < 0.01, "{:?} {:?}", counts, weights);
            }
        }

        #[test]
        fn equal_weights_reduce_to_rr(n in 1usize..8, w in 1u64..5) {
            let mut wrr = WeightedRoundRobin::new(vec![w; n]).unwrap();
            let mut rr = RoundRobin::new();
            for _ in 0..3 * n {
                prop_assert_eq!(wrr.next(), rr.next(n).unwrap());
            }
        }
    }
}
