//! Tumor-aware recurrent diffeomorphic registration of thoracic volumes.

pub mod dataio;
pub mod deformation;
pub mod engine;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod tensor;
pub mod volume;

pub use dataio::RegistrationPair;
pub use deformation::{DeformationField, VelocityField};
pub use engine::{Conditioning, EngineConfig, NetworkParams, Registration, StepRecord};
pub use error::{Error, Result};
pub use losses::{LossBreakdown, LossWeights, SmoothnessMode};
pub use metrics::MetricsReport;
pub use tensor::{Gradients, Tape, Tensor, Var};
pub use volume::Volume;
