//! Training runs and sweeps.

mod config;
mod coord;
mod presets;
mod report;
mod sweep;
mod train;

pub use config::{CheckpointPolicy, PlanSpec, RunConfig, ENGINE_REVISION};
pub use coord::{coord_check, CoordCheckReport, ProbeMetric, ProbeRow};
pub use presets::{
    desk_alphas, desk_run, desk_sweep, DeskScale, DESK_CONTEXT, DESK_HEAD_DIM, DESK_PROXY_WIDTH,
    DESK_VOCAB, DESK_WIDTHS,
};
pub use report::{
    alpha_label, read_csv, render_text, table_rows, transfer_report, write_csv, TableRow,
    TransferVerdict, Verdict, WidthVerdict,
};
pub use sweep::{
    lr_sweep, mean_std, CellRun, CellStore, SweepCell, SweepConfig, SweepOptions, SweepRecord,
};
pub use train::{train, write_run_dir, RunRecord, StepOutcome, Trainer};
