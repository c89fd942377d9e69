//! Target assignment, optimization and the two-phase training schedule.

pub mod optim;
pub mod pipeline;
pub mod predict;
pub mod run;
pub mod targets;

pub use optim::{OptimizerConfig, Sgd};
pub use pipeline::{assign, encode_cloud, frame_seed, prepare_frame, Encoded, Matching, Prepared};
pub use predict::{decode_maps, dump_posteriors, predict, predict_encoded, PredictConfig};
pub use run::{
    batch_loss, best_checkpoint, read_metrics, train, train_step, validate, StepRecord, TrainConfig,
    TrainOutcome, TrainSummary, METRICS_HEADER,
};
