//! Coarse-grained identification of stable SISO plants from noisy finite
//! experiments, with lp-constrained experiment design, H-infinity error
//! bounds and robust certification of feedback controllers.

// `!(x > 0.0)` style checks are deliberate: they reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod design;
pub mod error;
pub mod estimator;
pub mod lti;
pub mod monte_carlo;
pub mod par;
pub mod pipeline;
pub mod plant;
pub mod rng;
pub mod robust;

pub use error::{Error, Result};
