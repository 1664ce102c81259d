//! The burst restoration network, its configuration and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod net;

pub use checkpoint::{Checkpoint, HostTensor};
pub use config::{GuideSource, ModelConfig, StageLayout};
pub use net::{count_params_flops, count_params_flops_at, BurstInput, BurstTensors, ForwardOutput, GcpFeatures, GcpNet};
