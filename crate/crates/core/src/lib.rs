//! Partial-identification bounds for estimands computed from non-randomly
//! selected samples.
//!
//! Inverse selection probabilities are only assumed to lie in a known box
//! `[1/b, 1/a]`. The crate computes the identified interval of a ratio
//! estimand over that box, asymptotic and bootstrap confidence intervals,
//! tighter intervals under auxiliary population constraints, and bounds
//! under a parametric selection model. A Monte-Carlo harness reproduces the
//! standard simulation experiments.

pub mod bootstrap;
pub mod constraints;
pub mod error;
pub mod estimand;
pub mod exec;
pub mod inference;
pub mod lfp;
pub mod parametric;
pub mod rng;
pub mod simharness;
pub mod sum;
pub mod support;

pub use error::{Error, Result};
pub use estimand::{Estimand, EstimandKind, ObservationSet};
pub use exec::Exec;
pub use support::{
    collapse_support, collapse_with_index, evaluate, IntervalEstimate, SupportTable, WeightBox,
};
