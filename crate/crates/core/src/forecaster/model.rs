use serde::{Deserialize, Serialize};

use super::components::{Gate, GruCell, LstmCell, SelfAttention, StaticEncoder, VariableSelection};
use crate::dataset::{ForecastWindow, WindowConfig};
use crate::error::{Error, Result};
use crate::nn::{Init, Linear, Matrix, ParamId, ParamStore, RngStream, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TftConfig {
    pub hidden_size: usize,
    pub attention_heads: usize,
    pub dropout: f64,
    /// Width of each per-feature embedding.
    pub hidden_continuous_size: usize,
    pub batch_size: usize,
    pub quantiles: Vec<f64>,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub log_interval: usize,
    pub clip_norm: f64,
    pub lstm_hidden_size: usize,
    /// Fraction of time steps used for training; the rest validate.
    pub train_fraction: f64,
    /// Replace `learning_rate` with the learning-rate finder's suggestion.
    pub use_lr_find: bool,
    pub window: WindowConfig,
}

impl Default for TftConfig {
    fn default() -> Self {
        Self {
            hidden_size: 8,
            attention_heads: 1,
            dropout: 0.1,
            hidden_continuous_size: 8,
            batch_size: 128,
            quantiles: vec![0.1, 0.5, 0.9],
            learning_rate: 6.6069345e-5,
            max_epochs: 64,
            log_interval: 2,
            clip_norm: 1.0,
            lstm_hidden_size: 8,
            train_fraction: 0.8,
            use_lr_find: false,
            window: WindowConfig::default(),
        }
    }
}

impl TftConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.hidden_size == 0 || self.hidden_continuous_size == 0 || self.lstm_hidden_size == 0 {
            return bad("forecaster hidden sizes must be positive");
        }
        if self.attention_heads != 1 || self.hidden_size % self.attention_heads != 0 {
            return bad("only single-head attention is supported (attention_heads = 1)");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("forecaster dropout must be in [0, 1)");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("forecaster batch_size and max_epochs must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.clip_norm > 0.0) {
            return bad("forecaster learning_rate and clip_norm must be positive");
        }
        let q = &self.quantiles;
        if q.is_empty() || q.iter().any(|&t| !(t > 0.0 && t < 1.0)) || q.windows(2).any(|w| w[0] >= w[1]) {
            return bad("quantiles must be strictly increasing inside (0, 1)");
        }
        if !q.contains(&0.5) {
            return bad("quantiles must contain 0.5");
        }
        Ok(())
    }

    pub fn median_index(&self) -> usize {
        self.quantiles.iter().position(|&q| q == 0.5).expect("validated quantiles")
    }
}

/// Common surface of the trainable forecasters.
pub trait SeqModel {
    /// Checkpoint component tag.
    const COMPONENT: &'static str;

    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Training objective over a mini-batch.
    fn batch_loss(&self, tape: &mut Tape, batch: &[&ForecastWindow], training: bool, rng: &mut RngStream) -> Result<Var>;
    /// Point forecasts (scaled units), one vector of `pred_len` per window.
    fn point_forecast(&self, batch: &[&ForecastWindow]) -> Result<Vec<Vec<f64>>>;
    fn mark_trained(&mut self);
}

/// Row `t·B + b` holds row `t` of `pick(windows[b])`.
fn time_major(batch: &[&ForecastWindow], pick: impl Fn(&ForecastWindow) -> &Matrix) -> Matrix {
    let (steps, cols) = pick(batch[0]).shape();
    let b = batch.len();
    let mut m = Matrix::zeros(steps * b, cols);
    for (i, w) in batch.iter().enumerate() {
        let src = pick(w);
        for t in 0..steps {
            m.row_mut(t * b + i).copy_from_slice(src.row(t));
        }
    }
    m
}

fn time_major_target(batch: &[&ForecastWindow], pred_len: usize) -> Matrix {
    let b = batch.len();
    let mut m = Matrix::zeros(pred_len * b, 1);
    for (i, w) in batch.iter().enumerate() {
        for h in 0..pred_len {
            m.set(h * b + i, 0, w.target[h]);
        }
    }
    m
}

fn check_batch(batch: &[&ForecastWindow], window: &WindowConfig, n_enc: usize, n_known: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Data("empty forecast batch".into()));
    }
    for w in batch {
        if w.encoder.shape() != (window.enc_len, n_enc) {
            return Err(Error::Shape {
                op: "forecast encoder",
                left: w.encoder.shape(),
                right: (window.enc_len, n_enc),
            });
        }
        if w.decoder_known.shape() != (window.pred_len, n_known) {
            return Err(Error::Shape {
                op: "forecast decoder",
                left: w.decoder_known.shape(),
                right: (window.pred_len, n_known),
            });
        }
        if w.target.len() != window.pred_len {
            return Err(Error::Shape {
                op: "forecast target",
                left: (w.target.len(), 1),
                right: (window.pred_len, 1),
            });
        }
    }
    Ok(())
}

/// Per-window nodes of one forward pass.
pub struct TftForward {
    /// `[pred·B × Q]`, time-major.
    pub quantiles: Var,
    pub static_weights: Var,
    pub encoder_weights: Var,
    pub decoder_weights: Var,
    pub attention: Var,
}

/// Miniature temporal fusion transformer.
#[derive(Clone, Debug)]
pub struct Tft {
    pub config: TftConfig,
    pub store: ParamStore,
    pub n_encoder: usize,
    pub n_known: usize,
    pub trained: bool,
    static_enc: StaticEncoder,
    enc_embed: (ParamId, ParamId),
    dec_embed: (ParamId, ParamId),
    enc_select: VariableSelection,
    dec_select: VariableSelection,
    input_proj: Option<Linear>,
    gru: GruCell,
    attention: SelfAttention,
    gate: Gate,
    head: Linear,
}

impl Tft {
    /// `n_encoder` encoder features (observed then known), `n_known` decoder
    /// features, and static dictionary sizes.
    pub fn new(config: &TftConfig, n_encoder: usize, n_known: usize, static_sizes: &[usize], seed: u64) -> Result<Self> {
        config.validate()?;
        if n_encoder == 0 || n_known == 0 || static_sizes.is_empty() {
            return Err(Error::Config("forecaster needs encoder, decoder and static inputs".into()));
        }
        let (h, e) = (config.hidden_size, config.hidden_continuous_size);
        let mut rng = RngStream::new(seed).derive("tft/init");
        let mut store = ParamStore::new();
        let static_enc = StaticEncoder::new(&mut store, "static", static_sizes, h, &mut rng);
        let mut embed = |store: &mut ParamStore, name: &str, n: usize| {
            (
                store.add_init(format!("{name}.w"), n, e, Init::XavierUniform, &mut rng),
                store.add_init(format!("{name}.b"), n, e, Init::Zeros, &mut rng),
            )
        };
        let enc_embed = embed(&mut store, "enc_embed", n_encoder);
        let dec_embed = embed(&mut store, "dec_embed", n_known);
        let enc_select = VariableSelection::new(&mut store, "enc_select", n_encoder, e, h, &mut rng);
        let dec_select = VariableSelection::new(&mut store, "dec_select", n_known, e, h, &mut rng);
        let input_proj = (e != h).then(|| Linear::new(&mut store, "input_proj", e, h, Init::XavierUniform, &mut rng));
        let gru = GruCell::new(&mut store, "gru", h, h, &mut rng);
        let attention = SelfAttention::new(&mut store, "attention", h, &mut rng);
        let gate = Gate::new(&mut store, "gate", h, &mut rng);
        let head = Linear::new(&mut store, "head", h, config.quantiles.len(), Init::XavierUniform, &mut rng);
        Ok(Self {
            config: config.clone(),
            store,
            n_encoder,
            n_known,
            trained: false,
            static_enc,
            enc_embed,
            dec_embed,
            enc_select,
            dec_select,
            input_proj,
            gru,
            attention,
            gate,
            head,
        })
    }

    pub fn forward(&self, tape: &mut Tape, batch: &[&ForecastWindow], training: bool, rng: &mut RngStream) -> Result<TftForward> {
        check_batch(batch, &self.config.window, self.n_encoder, self.n_known)?;
        let s = &self.store;
        let b = batch.len();
        let (enc_len, pred_len) = (self.config.window.enc_len, self.config.window.pred_len);

        let ids: Vec<Vec<usize>> = batch.iter().map(|w| w.static_ids.to_vec()).collect();
        let (context, static_weights) = self.static_enc.forward(tape, s, &ids);

        let select = |tape: &mut Tape, x: Matrix, embed: (ParamId, ParamId), vsn: &VariableSelection, steps: usize| {
            let x = tape.leaf(x);
            let (w, bias) = (tape.param(s, embed.0), tape.param(s, embed.1));
            let emb = tape.feature_embed(x, w, bias);
            let ctx = tape.concat_rows(&vec![context; steps]);
            vsn.forward(tape, s, emb, Some(ctx))
        };
        let (encoder_weights, enc_in) = select(tape, time_major(batch, |w| &w.encoder), self.enc_embed, &self.enc_select, enc_len);
        let (decoder_weights, dec_in) =
            select(tape, time_major(batch, |w| &w.decoder_known), self.dec_embed, &self.dec_select, pred_len);
        let mut seq = tape.concat_rows(&[enc_in, dec_in]);
        if let Some(p) = &self.input_proj {
            seq = p.forward(tape, s, seq);
        }

        let steps = enc_len + pred_len;
        let mut h = context;
        let mut states = Vec::with_capacity(steps);
        for t in 0..steps {
            let x = tape.slice_rows(seq, t * b, b);
            h = self.gru.step(tape, s, h, x);
            states.push(h);
        }
        let temporal = tape.concat_rows(&states);
        let temporal = tape.dropout(temporal, self.config.dropout, training, rng);
        let attention = self.attention.forward(tape, s, temporal, b, steps);

        let attended = tape.slice_rows(attention, enc_len * b, pred_len * b);
        let residual = tape.slice_rows(temporal, enc_len * b, pred_len * b);
        let gated = self.gate.forward(tape, s, attended);
        let fused = tape.add(gated, residual);
        let quantiles = self.head.forward(tape, s, fused);
        Ok(TftForward {
            quantiles,
            static_weights,
            encoder_weights,
            decoder_weights,
            attention,
        })
    }

    /// Sorted quantile forecasts `[pred_len × Q]` per window plus the forward nodes.
    pub fn predict_with(&self, tape: &mut Tape, batch: &[&ForecastWindow]) -> Result<(Vec<Matrix>, TftForward)> {
        let mut rng = RngStream::new(0);
        let fwd = self.forward(tape, batch, false, &mut rng)?;
        let q = tape.value(fwd.quantiles);
        let b = batch.len();
        let pred_len = self.config.window.pred_len;
        let out = (0..b)
            .map(|i| {
                let mut m = Matrix::zeros(pred_len, q.cols());
                for h in 0..pred_len {
                    let row = m.row_mut(h);
                    row.copy_from_slice(q.row(h * b + i));
                    row.sort_by(f64::total_cmp);
                }
                m
            })
            .collect();
        Ok((out, fwd))
    }

    pub fn predict(&self, batch: &[&ForecastWindow]) -> Result<Vec<Matrix>> {
        let mut tape = Tape::new();
        Ok(self.predict_with(&mut tape, batch)?.0)
    }
}

impl SeqModel for Tft {
    const COMPONENT: &'static str = "tft";

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn batch_loss(&self, tape: &mut Tape, batch: &[&ForecastWindow], training: bool, rng: &mut RngStream) -> Result<Var> {
        let fwd = self.forward(tape, batch, training, rng)?;
        let target = time_major_target(batch, self.config.window.pred_len);
        Ok(tape.pinball_loss(fwd.quantiles, target, &self.config.quantiles))
    }

    fn point_forecast(&self, batch: &[&ForecastWindow]) -> Result<Vec<Vec<f64>>> {
        let m = self.config.median_index();
        Ok(self
            .predict(batch)?
            .into_iter()
            .map(|q| (0..q.rows()).map(|h| q.get(h, m)).collect())
            .collect())
    }

    fn mark_trained(&mut self) {
        self.trained = true;
    }
}

/// LSTM over the encoder window with a direct multi-horizon dense head.
#[derive(Clone, Debug)]
pub struct LstmBaseline {
    pub window: WindowConfig,
    pub store: ParamStore,
    pub n_encoder: usize,
    pub trained: bool,
    cell: LstmCell,
    head: Linear,
}

impl LstmBaseline {
    pub fn new(window: &WindowConfig, hidden: usize, n_encoder: usize, seed: u64) -> Result<Self> {
        if hidden == 0 || n_encoder == 0 {
            return Err(Error::Config("LSTM baseline needs positive hidden size and inputs".into()));
        }
        let mut rng = RngStream::new(seed).derive("lstm/init");
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "lstm", n_encoder, hidden, &mut rng);
        let head = Linear::new(&mut store, "head", hidden, window.pred_len, Init::XavierUniform, &mut rng);
        Ok(Self {
            window: window.clone(),
            store,
            n_encoder,
            trained: false,
            cell,
            head,
        })
    }

    /// `[B × pred_len]` direct forecasts.
    pub fn forward(&self, tape: &mut Tape, batch: &[&ForecastWindow]) -> Result<Var> {
        let n_known = batch.first().map_or(0, |w| w.decoder_known.cols());
        check_batch(batch, &self.window, self.n_encoder, n_known)?;
        let s = &self.store;
        let b = batch.len();
        let x = tape.leaf(time_major(batch, |w| &w.encoder));
        let mut h = tape.leaf(Matrix::zeros(b, self.cell.hidden));
        let mut c = tape.leaf(Matrix::zeros(b, self.cell.hidden));
        for t in 0..self.window.enc_len {
            let xt = tape.slice_rows(x, t * b, b);
            (h, c) = self.cell.step(tape, s, h, c, xt);
        }
        Ok(self.head.forward(tape, s, h))
    }
}

impl SeqModel for LstmBaseline {
    const COMPONENT: &'static str = "lstm";

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn batch_loss(&self, tape: &mut Tape, batch: &[&ForecastWindow], _training: bool, _rng: &mut RngStream) -> Result<Var> {
        let pred = self.forward(tape, batch)?;
        let mut target = Matrix::zeros(batch.len(), self.window.pred_len);
        for (i, w) in batch.iter().enumerate() {
            target.row_mut(i).copy_from_slice(&w.target);
        }
        Ok(tape.mse_loss(pred, target))
    }

    fn point_forecast(&self, batch: &[&ForecastWindow]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let pred = self.forward(&mut tape, batch)?;
        let v = tape.value(pred);
        Ok((0..batch.len()).map(|i| v.row(i).to_vec()).collect())
    }

    fn mark_trained(&mut self) {
        self.trained = true;
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::nn::finite_diff_check;

    pub(crate) fn toy_windows(n: usize, cfg: &WindowConfig, n_obs: usize, seed: u64) -> Vec<ForecastWindow> {
        let mut rng = RngStream::new(seed);
        let n_known = cfg.known_periods.len() * 2;
        (0..n)
            .map(|i| {
                let mut encoder = Matrix::zeros(cfg.enc_len, n_obs + n_known);
                for v in encoder.data_mut() {
                    *v = rng.uniform();
                }
                let mut decoder_known = Matrix::zeros(cfg.pred_len, n_known);
                for v in decoder_known.data_mut() {
                    *v = rng.uniform_range(-1.0, 1.0);
                }
                ForecastWindow {
                    link_id: format!("l{}", i % 3),
                    start_time: i as i64,
                    encoder,
                    decoder_known,
                    static_ids: [i % 3 + 1, 1, (i % 2) + 1, 0],
                    target: (0..cfg.pred_len).map(|_| rng.uniform()).collect(),
                }
            })
            .collect()
    }

    pub(crate) fn small_config() -> TftConfig {
        TftConfig {
            hidden_size: 4,
            hidden_continuous_size: 3,
            window: WindowConfig {
                enc_len: 5,
                pred_len: 3,
                encoder_columns: vec!["Byte_count".into()],
                known_periods: vec![24.0],
                ..WindowConfig::default()
            },
            ..TftConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(TftConfig::default().validate().is_ok());
        for bad in [
            TftConfig { quantiles: vec![0.1, 0.9], ..TftConfig::default() },
            TftConfig { quantiles: vec![0.5, 0.1], ..TftConfig::default() },
            TftConfig { quantiles: vec![0.0, 0.5], ..TftConfig::default() },
            TftConfig { attention_heads: 2, ..TftConfig::default() },
            TftConfig { hidden_size: 0, ..TftConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn default_output_shape_and_simplices() {
        let cfg = TftConfig::default();
        let n_obs = cfg.window.observed_columns().len();
        let windows = toy_windows(3, &cfg.window, n_obs, 1);
        let refs: Vec<&ForecastWindow> = windows.iter().collect();
        let model = Tft::new(&cfg, n_obs + 4, 4, &[5, 3, 3, 3], 7).unwrap();
        let mut tape = Tape::new();
        let (preds, fwd) = model.predict_with(&mut tape, &refs).unwrap();
        assert_eq!(preds[0].shape(), (12, 3));
        for q in &preds {
            for h in 0..12 {
                assert!(q.row(h).windows(2).all(|w| w[0] <= w[1]));
            }
        }
        for node in [fwd.static_weights, fwd.encoder_weights, fwd.decoder_weights] {
            let m = tape.value(node);
            for r in 0..m.rows() {
                assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(m.row(r).iter().all(|&v| v >= 0.0));
            }
        }
        let att = tape.attention_weights(fwd.attention).unwrap();
        assert_eq!(att.shape(), (36 * 3, 36));
        for r in 0..att.rows() {
            let i = r / 3;
            assert!((att.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(att.row(r)[i + 1..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn malformed_window_is_a_shape_error() {
        let cfg = small_config();
        let mut windows = toy_windows(2, &cfg.window, 2, 1);
        windows[1].encoder = Matrix::zeros(4, 4);
        let refs: Vec<&ForecastWindow> = windows.iter().collect();
        let model = Tft::new(&cfg, 4, 2, &[4, 2, 3, 1], 1).unwrap();
        assert!(matches!(model.predict(&refs), Err(Error::Shape { .. })));
    }

    #[test]
    fn end_to_end_gradients() {
        let cfg = TftConfig {
            dropout: 0.0,
            ..small_config()
        };
        for seed in 0..3 {
            let windows = toy_windows(2, &cfg.window, 2, seed);
            let refs: Vec<&ForecastWindow> = windows.iter().collect();
            let mut tft = Tft::new(&cfg, 4, 2, &[4, 2, 3, 1], seed).unwrap();
            let model = tft.clone();
            let err = finite_diff_check(&mut tft.store, 1e-5, |s, t| {
                let m = Tft { store: s.clone(), ..model.clone() };
                m.batch_loss(t, &refs, false, &mut RngStream::new(0))
            })
            .unwrap();
            assert!(err < 1e-4, "tft seed {seed}: {err}");

            let mut lstm = LstmBaseline::new(&cfg.window, 4, 4, seed).unwrap();
            let model = lstm.clone();
            let err = finite_diff_check(&mut lstm.store, 1e-5, |s, t| {
                let m = LstmBaseline { store: s.clone(), ..model.clone() };
                m.batch_loss(t, &refs, false, &mut RngStream::new(0))
            })
            .unwrap();
            assert!(err < 1e-4, "lstm seed {seed}: {err}");
        }
    }

    #[test]
    fn lstm_shapes() {
        let cfg = small_config();
        let windows = toy_windows(4, &cfg.window, 2, 2);
        let refs: Vec<&ForecastWindow> = windows.iter().collect();
        let m = LstmBaseline::new(&cfg.window, 4, 4, 0).unwrap();
        let out = m.point_forecast(&refs).unwrap();
        assert_eq!(out.len(), 4);
        assert!(out.iter().all(|v| v.len() == 3));
    }
}
