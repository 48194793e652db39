//! Losses, SGD training, gradient verification and synthetic data.

pub mod config;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod synth;
pub mod trainer;

pub use config::{Ablation, DataGeometry, Task, TrainConfig};
pub use gradcheck::{finite_diff_grad, model_gradcheck, GradCheckReport};
pub use loss::{cross_entropy, weighted_cross_entropy};
pub use metrics::EpochMetrics;
pub use synth::{generate_synthetic, Dataset, Sample, SyntheticDatasetSpec};
pub use trainer::{evaluate, prepare, train, PreparedSample};
