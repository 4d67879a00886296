//! Direction-adaptive self-distillation on a tabular autoregressive policy.
//!
//! The crate contains the token-level credit kernels ([`credit`]), a windowed
//! softmax policy with a privileged answer slot ([`policy`]), a modular
//! arithmetic task with a step verifier ([`taskenv`]), a group-relative PPO
//! trainer ([`trainer`]), diagnostic probes ([`probes`]), evaluation metrics
//! ([`metrics`]) and run-directory reporting ([`report`]).

pub mod checkpoint;
pub mod config;
pub mod credit;
pub mod error;
pub mod metrics;
pub mod policy;
pub mod probes;
pub mod report;
pub mod rng;
pub mod stats;
pub mod taskenv;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, PolicyCheckpoint};
pub use config::{Mode, TrainConfig};
pub use credit::{CategoricalDist, DirectionMap, GateVariant, RouterSignal, RoutingConfig};
pub use error::{Error, ErrorClass, Result};
pub use metrics::{EvalSample, HealthReport};
pub use policy::{PolicyParams, Token, Vocabulary};
pub use report::RunDir;
pub use taskenv::{TaskInstance, VerifierResult};
pub use trainer::{Trainer, UpdateStats};
