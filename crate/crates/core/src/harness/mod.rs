//! Experiment driver: pretraining, editing runs, sweeps, ensembles, reports
//! and run manifests.

mod data;
mod edit;
mod ensembles;
pub mod manifest;
mod pretrain;
mod report;
mod stats;
mod sweep;

pub use data::{check_pair, DataDir};
pub use edit::{load_edited, run_edit, score_epoch, score_epochs, BaseModel, EditOutcome, EditRun, EpochScore, ModelKind};
pub use ensembles::{ensemble_runs, EnsembleRun, EnsembleSummary};
pub use manifest::RunManifest;
pub use pretrain::{pretrain, CurvePoint, PretrainConfig, PretrainOutcome};
pub use report::{entries_from_sweep, entry_from_ensemble, ReportEntry, ReportTable, TableRow};
pub use stats::{mean, std_of_mean};
pub use sweep::{
    run_sweep, sample_configs, select_winner, BallResult, Baseline, Dist, LoraScale, RunRecord, SearchSpace, SweepResult,
    SweepSpec, TestRun, TestSummary, TrialSummary, PAPER_MAX_RANK,
};
