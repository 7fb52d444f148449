//! Dataset ingestion, experiment configuration, campaigns and reports.

pub mod campaign;
pub mod config;
pub mod dataset;
pub mod metrics;
pub mod models;
pub mod report;

pub use campaign::{
    image_seed, run_and_report, run_campaign, run_experiment, run_repeat, Campaign, ImageRecord, OracleSource,
    RepeatOutcome,
};
pub use config::{default_out_dir, desk_attack, ExperimentConfig, Variant, KEYS, OUT_DIR_ENV};
pub use dataset::{attack_set, load_dataset, split_paths, AttackSet};
pub use metrics::{avgq_convert, metrics, metrics_csv, parse_metrics_csv, MetricsRow};
pub use models::{load_splits, save_models, train_models, TrainPlan, Trained, TrainedModels};
pub use report::{emit_report, read_traces, save_adversarial};
