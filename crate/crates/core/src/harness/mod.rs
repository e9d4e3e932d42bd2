//! Training, evaluation, inference, persistence and benchmarking around the
//! model components.

pub mod ablate;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod gradients;
pub mod infer;
pub mod model;
pub mod optim;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{Config, DecoderKind, ModelConfig, TrainConfig};
pub use eval::{evaluate, score, Metrics};
pub use infer::{infer_file, infer_image, Inference};
pub use model::{Model, Stage};
pub use optim::Adam;
pub use train::{EpochStats, Trainer};
