//! Multi-aspect text-driven latent editing.
//!
//! A prompt pair is parsed into aspect-level edit actions ([`plan`]), the
//! actions are typed and grouped from their attention masks ([`grouping`]),
//! and every group is realised by one branch of a parallel consistency
//! sampler calibrated against its predecessor ([`engine`]). The exact
//! Gaussian-mixture backend in [`gmm`] makes the whole pipeline checkable
//! without a trained network; [`remote`] speaks the line protocol used by
//! external backends.

pub mod attention;
pub mod codec;
pub mod config;
pub mod error;
pub mod engine;
pub mod gmm;
pub mod grouping;
pub mod metrics;
pub mod plan;
pub mod predictor;
pub mod remote;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;

pub use attention::{AttentionMap, BinaryMask, MapOrigin};
pub use config::RunConfig;
pub use engine::{run_edit, EditOutcome, EngineConfig, ExecutionMode};
pub use error::{Error, Result};
pub use gmm::{GaussianMixtureWorld, GmmPredictor};
pub use grouping::{plan_branches, BranchPlan, BranchSpec, EditType, GroupingParams};
pub use plan::{ActionKind, EditAction, EditPlan};
pub use predictor::{Conditioning, NoisePredictor, PredictionResult};
pub use sampler::SamplerConfig;
pub use schedule::{DiffusionSchedule, ScheduleKind};
pub use tensor::{LatentTensor, Shape};
