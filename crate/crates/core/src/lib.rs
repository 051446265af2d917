//! Sparse Kernel Flows: learning sparse combinations of elemental kernels for
//! forecasting chaotic dynamical systems from delay-embedded trajectories.

pub mod data;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod forecaster;
pub mod kernels;
pub mod linalg;
pub mod loss;
pub mod metrics;
pub mod optimizer;

pub use embedding::{build_delay_dataset, split_train_test, DelayDataset, TimeSeries};
pub use error::{KflowError, Result};
pub use forecaster::TrainedModel;
pub use kernels::{ElementalKernelId, KernelParams, ParamIndex, NUM_KERNELS, NUM_PARAMS, NUM_THETA};
pub use optimizer::{TrainConfig, TrainReport};
