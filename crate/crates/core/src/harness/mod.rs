//! Multi-domain task-incremental benchmark: synthetic streams, session
//! training, identifier-free evaluation and the forgetting metrics.

pub mod domain;
pub mod eval;
pub mod metrics;
pub mod state;
pub mod train;

pub use domain::{
    build_world, generate_domain, AttributeUniverse, DomainData, DomainSpec, PretrainConfig,
    StreamConfig, TaskOrder, TaskStream,
};
pub use eval::{evaluate_all, EvalOutcome, FeatureCache, TelemetryRow};
pub use metrics::{compute_metrics, AccuracyMatrix, MetricsReport};
pub use state::{AblationConfig, PromptedModel};
pub use train::{pretrain_backbone, train_session, OptimConfig, SessionTelemetry};
