//! Trace ingestion, cleaning, scaling, windowing, synthesis, and correlation export.

mod clean;
mod correlation;
mod scaler;
mod synth;
mod trace;
mod window;

pub use clean::{clean, clean_series, CleanConfig};
pub use correlation::{correlation_matrix, CorrelationMatrix};
pub(crate) use correlation::write_labeled_matrix;
pub use scaler::{fit_scaler, ColumnScale, ScaleMode, Scaler};
pub use synth::{link_label, synth_trace, synth_trace_window, SynthProfile};
pub use trace::{
    load_trace, read_trace, Record, Trace, CATEGORICAL_COLUMNS, ETH_DST, IN_PORT, LINK_ID, NUMERIC_COLUMNS,
    OUT_PORT, SWITCH_ID, TARGET, TIME_INDEX,
};
pub use window::{
    make_windows, split_by_time, window_at, windows_by_link, CategoryDict, ForecastWindow, WindowColumns, WindowConfig, WindowSet,
    STATIC_COLUMNS, UNKNOWN,
};
