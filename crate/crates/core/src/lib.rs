//! Desk-scale laboratory for DDIM inversion.
//!
//! A deterministic DDIM sampler is run backward (inversion) and forward
//! (reconstruction) under a closed-form Gaussian-mixture noise predictor, so
//! the trajectory deviation caused by the predictor being queried at
//! different latents in the two directions can be measured exactly. Several
//! strategies for shrinking that deviation are implemented side by side:
//! multi-branch ensembles, Monte-Carlo branch selection, and per-step random
//! invertible transforms replayed during reconstruction.

pub mod engine;
pub mod error;
pub mod harness;
pub mod latent;
pub mod metrics;
pub mod oracle;
pub mod predictor;
pub mod rng;
pub mod schedule;
pub mod transform;

pub use engine::{round_trip, run_inversion, run_reconstruction, BranchSource, StrategyConfig, Trajectory, Variant};
pub use error::{Error, Result};
pub use harness::{ablate, emit, load_config, run_experiment, AblationPreset, ExperimentConfig, RunRecord};
pub use latent::{GridShape, Latent};
pub use metrics::MetricsReport;
pub use predictor::{GaussianMixture, PredictorConfig};
pub use schedule::{build_linear_schedule, NoiseSchedule, ScheduleSpec};
pub use transform::{PoolPreset, TransformSchedule, TransformSpec};
