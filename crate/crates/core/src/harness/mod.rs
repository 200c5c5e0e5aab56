//! Configuration, checkpoints, metrics, plots and staged runs.

mod checkpoint;
mod config;
mod metrics;
mod plot;
mod run;
mod stats;

pub use checkpoint::{fnv1a, Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{toy_model_config, Mode, RunConfig, SEED_ENV};
pub use metrics::{read_metrics, rows_to_csv, MetricRow, MetricsReport};
pub use plot::{
    render_svg, scatter_series, series_from_metrics, write_svg, PlotKind, Series, ERROR_PREFIX,
};
pub use run::{
    run, RunSummary, CHECKPOINT_FILE, EMBED_PREFIX, ERROR_PLOT, LOSS_PLOT, METRICS_FILE,
    MODEL_PREFIX, REPORT_FILE, RETRIEVAL_FILE,
};
pub use stats::{energy_distance, median_heuristic, mmd2};

#[cfg(test)]
mod tests;
