//! Bayesian optimization when evaluations report back after random delays.
//!
//! Pending queries stay in the Gaussian-process posterior with a censored
//! target of zero until their observation arrives, and the acquisition width
//! is inflated by the posterior spread over everything still pending.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod contextual;
pub mod env;
pub mod error;
pub mod harness;
pub mod kernel;
pub mod ledger;
mod linalg;
pub mod oracle;
pub mod policy;
pub mod posterior;
mod table;

pub use error::{Error, Result};
pub use kernel::{grid_domain, Domain, Kernel, ProductKernel, SqExpKernel};
pub use ledger::{rho_m, DelayModel, Ledger};
pub use policy::{Rule, WidthMode, WidthSchedule};
pub use posterior::PosteriorState;
