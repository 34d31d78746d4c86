//! Training loop, evaluation, persistence and ablation sweeps.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod experiment;
pub mod metrics;
pub mod optim;
pub mod seeds;
pub mod trainer;

pub use ablation::{run_ablation, AblationAxis, AblationReport};
pub use checkpoint::Checkpoint;
pub use config::{ExperimentConfig, TrainMode};
pub use eval::{evaluate_miou, ConfusionMatrix, IouReport};
pub use experiment::{run_experiment, ExperimentReport};
pub use metrics::{parse_stream, EvalMetrics, MetricsRecord};
pub use optim::{lr_at, AdamW};
pub use trainer::{RunOutcome, StepTrace, Trainer};
