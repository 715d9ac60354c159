//! Attention concatenation volume stereo matching: feature extraction, cost
//! volumes, 3-D aggregation, disparity regression, training, evaluation and
//! file formats.

pub mod aggregate;
pub mod backbone;
pub mod baseline;
pub mod checkpoint;
pub mod config;
pub mod costvol;
pub mod error;
pub mod evalio;
pub mod fastpath;
pub mod gradcheck;
pub mod models;
pub mod oracle;
pub mod params;
pub mod regress;
pub mod selftest;
pub mod trainloss;

pub use aggregate::Mode;
pub use config::{ChannelPlan, PipelineConfig};
pub use error::{AcvError, Result};
pub use evalio::{EvalReport, StereoSample};
pub use models::{AcvNet, AcvNetFast, Filtering, ModelRegistry, Prediction, StereoModel};
pub use params::ParamSet;
pub use trainloss::{run_training, LossWeights, StepRecord, TrainPlan};
