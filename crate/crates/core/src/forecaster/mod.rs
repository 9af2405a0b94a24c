//! Miniature temporal fusion transformer, LSTM baseline, training and evaluation.

mod bundle;
mod components;
mod export;
mod metrics;
mod model;
mod train;

pub use bundle::{checkpoint_path, meta_path, prepare_data, ForecasterMeta, PreparedData, TrainedForecaster};
pub use components::{
    attention, gate, gru_step, lstm_step, quantile_loss, variable_select, Gate, GruCell, LstmCell, SelfAttention,
    StaticEncoder, VariableSelection,
};
pub use export::{evaluate_windows, export_importance, quantile_label, write_forecasts, ForecastEvaluation, Importance};
pub use metrics::{eval_metrics, MetricReport};
pub use model::{LstmBaseline, SeqModel, Tft, TftConfig, TftForward};
pub use train::{
    lr_find, lr_sweep, mean_loss, train_forecaster, write_history, HistoryRow, LrFindConfig, LrSweep, TrainOutcome,
    TrainSettings,
};
