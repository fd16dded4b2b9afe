//! Contrastive outlier detection for human semantic trajectories.
//!
//! The pipeline simulates or loads check-ins, segments them into daily
//! trajectories, embeds staypoints in a shared semantic space, encodes
//! each day into one vector, and scores users by how far their recent
//! days drift from their own history and from the population.

pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod modality;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod polsim;
pub mod scoring;

pub use config::Config;
pub use data::{DailyTrajectory, Dataset, LabelTable, StayPoint};
pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use objective::TrainConfig;
pub use scoring::{ScoreConfig, UserScore};
