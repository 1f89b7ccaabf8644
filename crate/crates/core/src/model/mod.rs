//! Single-layer cross-attention encoder, its training objective, a synthetic
//! planted-concept task and the trainer.

pub mod encoder;
pub mod objective;
pub mod synth;
pub mod train;

pub use encoder::{encode, forward, EncoderParams, EncoderShape, FeatureMapSet, Forward, ParamGrads};
pub use objective::{backward, objective, ObjectiveConfig, ObjectiveValue, Repulsion, Sample};
pub use synth::{gen_synthetic, SyntheticConfig, SyntheticDataset, SyntheticSample};
pub use train::{
    collapse_metric, evaluate_retrieval, gallery_from, split_point, train, DirectionMetrics, StepRecord, TrainConfig,
    TrainOutcome, TrainReport,
};
