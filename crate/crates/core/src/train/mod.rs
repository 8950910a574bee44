//! Training loop, data, configuration and experiment plumbing.

mod checkpoint;
mod compare;
mod config;
mod data;
mod metrics;
mod optim;
mod run;

pub use checkpoint::{Checkpoint, DenseRecord, MaskedRecord, Restored, MAGIC, VERSION};
pub use compare::{compare, write_report, CompareOptions, CompareReport, MethodSummary};
pub use config::{InitScheme, PhasingSettings, RunConfig, TopologySettings, TrainSettings, REFERENCE_STEPS_PER_EPOCH};
pub use data::{load_dataset, read_cifar, read_idx_pair, resolve_dir, Blobs, DataSpec, Dataset, Splits, DATA_DIR_ENV};
pub use metrics::{read_metrics, MetricRow, MetricSink, PreactRow, Split};
pub use optim::{grad_norm_sum, Sgd};
pub use run::{
    evaluate, median, resume_run, run, run_with_data, EpochLog, EvalStats, RunOptions, RunOutput, RunSummary, StepOutcome,
    Trainer, EARLY_EPOCHS,
};
