//! Structured-reward GRPO for caption-then-reason policies, with a synthetic
//! shortcut-learning environment and a small trainable policy.

pub mod config;
pub mod dataio;
pub mod env;
pub mod exec;
pub mod grpo;
pub mod judge;
pub mod metrics;
pub mod policy;
pub mod rewards;
pub mod structured;
pub mod trainer;

pub use config::{ConfigError, ExperimentConfig};
pub use env::{generate_split, EnvConfig, SyntheticTask};
pub use grpo::{compute_advantages, KlSchedule, KlStrategy};
pub use policy::PolicyParams;
pub use structured::{parse_response, FormatMode, StructuredResponse};
pub use trainer::{evaluate, run_experiment, train_step, RunOptions, TrainerConfig, TrainerState};
