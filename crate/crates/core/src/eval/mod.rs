//! Downstream tasks, metrics, and the results table.

mod metrics;
mod probe;
mod report;
mod task;

pub use metrics::{average_ranks, compute_metric, MetricKind};
pub use probe::{corrupt, make_probe_task, swap_adjacent, Corruption, MAX_CORRUPTION_ATTEMPTS};
pub use report::{build_report, Cell, ReportRow, ReportTable, RunResult, TABLE1_TASKS};
pub use task::{load_task, parse_split, Example, LabelSpace, TaskDataset, TaskKind, TaskSchema, TaskStats};
