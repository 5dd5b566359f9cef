//! Training loop, evaluation and experiment protocols.

mod config;
mod evaluate;
mod optim;
mod protocol;
mod train;

pub use config::{BetaSchedule, Protocol, TrainConfig};
pub use evaluate::evaluate;
pub use optim::{adam_step, lr_schedule, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use protocol::{
    run_protocol, write_table, ComparisonTable, ProtocolPlan, RunRow, Suite, SummaryRow,
    ABLATION_VARIANTS, K_SWEEP, RUNS_CSV, SUMMARY_CSV, TABLE_JSON,
};
pub use train::{
    score_images, split_protocol, train, train_on, write_report, EpochLog, RunReport,
    TrainOutcome, CHECKPOINT_FILE, LOG_FILE, REPORT_FILE, TIMING_FILE,
};
