//! Differentiable stochastic duration modelling for monotonic sequence
//! alignment.

pub mod config;
pub mod error;
pub mod grad;
pub mod io;
pub mod kernel;
pub mod losses;
pub mod oracle;
pub mod real;
pub mod regulator;
pub mod trainer;
pub mod verify;

pub use config::ConfigFile;
pub use error::{Error, Result};
pub use grad::{AlignGradients, GradCheckReport, GradientTape};
pub use kernel::{
    align, Alignment, AttentionMatrix, CumulativeDurationDistribution, DurationParams,
    ExpandedSequence, HiddenSequence, LengthProbability, EPS,
};
pub use losses::{DiscriminatorOutputs, FeatureReduction, LogMelMatrix, LossWeights};
pub use oracle::JointOutcome;
pub use real::{DoubleDouble, Real};
pub use regulator::DurationVector;
pub use trainer::{SyntheticTask, TrainConfig, TrainReport};
