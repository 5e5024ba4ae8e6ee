//! Continual few-shot learning benchmark toolkit.
//!
//! Episodes are sequences of small support sets followed by a target set.
//! This crate samples them deterministically from packed image datasets,
//! streams them to learners under a strict one-set-at-a-time guard, and
//! accounts for the memory and compute learners spend along the way.

pub mod client;
pub mod config;
pub mod downsample;
pub mod harness;
pub mod learners;
pub mod metrics;
pub mod pack;
pub mod protocol;
pub mod rng;
pub mod sampler;
pub mod server;
pub mod session;
pub mod synth;

pub use config::{ConfigError, TaskConfig, TaskKind};
pub use pack::{DatasetPack, SplitSpec};
pub use sampler::{sample_episode, sample_eval_suite, Episode};
pub use session::{EpisodeSession, GuardError};
