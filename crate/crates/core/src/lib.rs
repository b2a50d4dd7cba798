//! Gradient-free training of a two-branch convolutional classifier that
//! labels a pair of scans (earlier, later) as progression or regression.
//!
//! The network is trained by an evolution strategy: Gaussian weight
//! mutations scored by training-set accuracy and merged back into a single
//! parent genome. All randomness is seed-derived and every reduction runs in
//! a fixed order, so runs are bitwise reproducible for any worker count.

pub mod data;
pub mod error;
pub mod evolution;
pub mod model;
pub mod persistence;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use evolution::{EvolutionConfig, FitnessShaping, GenerationStats, TrainState, Trainer};
pub use model::{genome_len, Class, Genome, Model, ModelConfig};
