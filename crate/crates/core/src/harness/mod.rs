//! Synthetic data, partitioning, optimization, training, evaluation and the
//! ablation driver.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod optim;
pub mod partition;
pub mod train;

pub use ablate::{ablate, AblationReport};
pub use config::RunConfig;
pub use data::{synthesize, CaptionPolicy, ConditionMix, Dataset, SceneCondition, SyntheticSample};
pub use eval::{average_precision, evaluate, Metrics};
pub use gradcheck::{gradcheck, GradReport};
pub use optim::{AdamW, OptimizerConfig};
pub use partition::{partition, ParamPartition, Role, TrainMode};
pub use train::{train, Trainer, TrainingReport};
