//! Experiment harness: dataset generation, federated training runs,
//! missing-modality and unseen-client evaluation, and result tables.
//!
//! Every command is a plain function here; `src/main.rs` only parses
//! arguments.

pub mod evaluate;
mod files;
pub mod generate;
pub mod plan;
mod plot;
pub mod report;
pub mod rundir;
pub mod train;

pub use evaluate::{
    cmd_eval_generalize, cmd_eval_missing, read_report, AppliedNorm, BnHandling,
    EvalGeneralizeArgs, EvalKind, EvalMissingArgs, EvalReport, EvalRow, ExclusionPolicy,
};
pub use generate::{cmd_generate, GenerateArgs, GenerateConfig};
pub use plan::{ExperimentPlan, Overrides, PlannedRun, Protocol};
pub use report::{cmd_report, Report, ReportArgs, ReportRow, Setting};
pub use rundir::{Dataset, LoadedRun, RunRecord, RunSummary};
pub use train::{cmd_train, TrainArgs};
