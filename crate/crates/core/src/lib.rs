//! Branching processes in i.i.d. random environment: simulation, tilted
//! importance sampling, conditioned random walks and spine decompositions.

pub mod bpre;
pub mod environment;
pub mod error;
pub mod experiments;
pub mod offspring;
pub mod oracle;
pub mod parallel;
pub mod spine;
pub mod stats;
pub mod walk;

pub use environment::{Classification, Environment, EnvironmentSpec, Family, Measure};
pub use error::{Error, Result};
pub use offspring::{OffspringKind, OffspringLaw};
pub use parallel::{MonteCarlo, StreamRng, Tag};
pub use stats::Estimate;
