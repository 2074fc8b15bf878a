//! Toy vision transformer with sparse expert layers: configuration,
//! parameters, forward graph, synthetic data, training, checkpointing, and
//! the few-shot linear probe.

pub mod checkpoint;
pub mod data;
pub mod probe;
pub mod train;
pub mod vit;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngSnapshot};
pub use data::{Dataset, SyntheticSpec};
pub use probe::{linear_probe, ProbeResult};
pub use train::{evaluate, train, MetricsSeries, StepMetrics, TrainConfig};
pub use vit::{
    accuracy, correct_count, forward_graph, model_forward, EvalOptions, ForwardRecord,
    LayerRecord, ModelConfig, ModelParams, Placement, RandomRouterKind, RandomizeRouters,
};
