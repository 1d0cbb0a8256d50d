//! Cost-sensitive graph neural network with bandit-driven neighbor sampling
//! for node classification on class-imbalanced graphs.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod cost;
pub mod error;
pub mod gnn;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod metrics;
pub mod numeric;
pub mod sampler;
pub mod trainer;
pub mod transform;

pub use config::{Ablation, Optimizer, TrainConfig};
pub use error::{Error, Result};
pub use metrics::{compute_metrics, MetricsReport};
pub use trainer::{predict, train, Model, TrainState};
