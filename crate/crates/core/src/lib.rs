//! Image classification by denoising diffusion in label space, conditioned
//! on global and ROI-level priors from a dual-granularity guidance network.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dcg;
pub mod denoiser;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod sampler;
pub mod schedule;
pub mod training;
pub mod viz;

pub use ablation::{run_ablation, AblationReport};
pub use checkpoint::CheckpointMeta;
pub use config::{F1Average, RunConfig, Variant};
pub use data::{Dataset, Image, SynthSpec};
pub use dcg::{Dcg, PriorPair};
pub use denoiser::{Denoiser, ImageEncoder};
pub use error::{Error, Result};
pub use model::Model;
pub use objectives::MmdConfig;
pub use sampler::{classify_batch, Classification};
pub use schedule::{LabelVector, NoiseSchedule, PriorCombine};
pub use training::{evaluate, prepare_data, run_experiment, EvalReport, ExperimentReport, Trainer};
pub use viz::{trajectory_viz, VizReport};
