//! Cross-view masked-autoencoder training: view selection, AdamW with a
//! warmup-cosine schedule, the training loop and the compute estimator.

mod config;
mod data;
mod flops;
mod optim;
mod select;
mod trainer;

pub use config::{Strategy, TrainConfig};
pub use data::{scene_seed, BagDataset};
pub use flops::{estimate_flops, flops_breakdown, FlopsBreakdown};
pub use optim::{adamw_update, lr_at, AdamW, OptimizerState, ADAM_EPS};
pub use select::{knn_pair_select, nearest_neighbors, select_views, Selection};
pub use trainer::{prepare_sample, sample_gradients, sample_rng, train_step, StepRecord, Trainer};
