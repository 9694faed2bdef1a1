//! Shadowing for nonautonomous linear-plus-Lipschitz systems with (mu, nu)-dichotomies.
//!
//! The crate builds the contraction operator whose fixed point corrects a pseudo-orbit into a
//! trajectory that is exact up to motion along the center fibers, in discrete and continuous
//! time, and certifies every inequality that the construction relies on over a finite window.

// `!(x <= tol)` is used on purpose throughout so that NaN fails a check
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// index loops read closer to the recurrences they implement
#![allow(clippy::needless_range_loop)]

pub mod adapted_norms;
pub mod certificate;
pub mod cli;
pub mod error;
pub mod examples;
pub mod higher_order;
pub mod linalg;
pub mod linear_continuous;
pub mod linear_discrete;
pub mod nonlinearity;
pub mod oracle;
pub mod rates;
pub mod shadow_continuous;
pub mod shadow_discrete;

pub use certificate::{Certificate, Check};
pub use error::{Error, Result};
pub use linalg::{Fiber, Norm, Projections};
pub use linear_discrete::DichotomyConstants;
pub use rates::{RateKind, RatePair, RateSequence};

/// Which time model a constant or solver refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeMode {
    Discrete,
    Continuous,
}
