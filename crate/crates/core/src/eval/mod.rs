//! Classification metrics, repeated-run evaluation, and 2-D projection.

mod auc;
mod confusion;
mod report;
mod runs;
mod tsne;

pub use auc::{auc_ovr, AucOvr};
pub use confusion::{confusion, f1_scores, ConfusionMatrix, F1Scores};
pub use report::{
    export_projection, export_report, read_projection, read_report, render_projection_png,
    ProjectionRow, PALETTE,
};
pub use runs::{
    format_mean_std, mean_std, repeated_runs, MeanStd, MetricsReport, ReportMetrics, RunMetrics,
};
pub use tsne::{tsne, Projection2D, TsneConfig};
