//! Risk-guided diffusion navigation at desk scale.
//!
//! A small diffusion policy over planar waypoint sequences ("System 1") is
//! constrained at inference time by a physics-based CVaR risk map
//! ("System 2"). The crate covers the whole loop: synthetic elevation-belief
//! terrain, stochastic traversability costs and CVaR risk maps, an
//! ε-prediction denoiser trained with manual backprop, classifier-style and
//! projection-based guidance, an expert demonstrator, a closed-loop episode
//! simulator with goal-success / safety-failure metrics, and a 1-D Langevin
//! demonstration comparing guidance strategies.

pub mod diffusion;
pub mod expert;
pub mod geometry;
pub mod guidance;
pub mod kv;
pub mod oned;
pub mod risk;
pub mod rng;
pub mod sim;
pub mod terrain;

pub use diffusion::{
    ActionSequence, Context, Dataset, NoiseSchedule, Policy, TrainConfig, CONTEXT_DIM, EMBED_DIM,
    NUM_WAYPOINTS,
};
pub use expert::DemoEpisode;
pub use geometry::Pose;
pub use guidance::GuidanceMode;
pub use risk::{CostParams, RiskConfig, RiskMap, RiskSurrogate, SafeSet};
pub use sim::{EpisodeConfig, EpisodeOutcome, EpisodeResult, EvalMethod, MetricsReport};
pub use terrain::{ElevationBelief, GridSpec, TerrainRecipe};
