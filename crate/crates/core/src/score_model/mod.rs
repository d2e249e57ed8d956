//! Toy noise-prediction networks, synthetic datasets and MAP training.

mod data;
mod net;
mod train;

pub use data::{gaussian_params, synth_dataset, Dataset, DatasetDescriptor, DatasetKind};
pub use net::{Dense, NetConfig, ScoreNet, TrainBatch, MAX_FEATURE_DIM};
pub use train::{sample_batch, train_map, window_means, TrainConfig, TrainOutcome};
