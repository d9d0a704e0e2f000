//! Convergence assessment for MCMC over Bayesian cluster allocations.
//!
//! The crate models multivariate data with replicates under a spike-slab
//! clustering prior, samples allocations with Gibbs and split-merge
//! kernels, and tests stationarity with a regenerative Hotelling statistic
//! on the visit frequencies of high-mass allocation states. Small problems
//! admit exact posterior enumeration, used throughout for oracle checks.

pub mod consensus;
pub mod diagnostics;
mod error;
pub mod eb;
pub mod io;
pub mod math;
pub mod model;
pub mod oracle;
pub mod partition;
pub mod refimpl;
pub mod regen;
pub mod samplers;

pub use error::{Error, Result};
pub use model::{DataMatrix, HyperParams};
pub use partition::{Allocation, StateKey};
pub use samplers::{ChainConfig, KernelKind, Trace};
