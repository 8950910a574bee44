pub mod activation;
pub mod error;
pub mod model;
pub mod sharing;
pub mod tensor;
pub mod topology;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{GradMode, Graph, Real, Tensor, Var};
pub use activation::{DyReluConfig, PhasingSchedule};
pub use model::{ActivationMode, ArchSpec, Family, Model};
pub use sharing::{Census, SharingPlan};
pub use topology::{MaskedParam, TopologyConfig, TopologyController};
pub use train::{RunConfig, RunSummary, Trainer};
