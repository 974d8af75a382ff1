//! Image immunization against tampering: an encoder that hides a
//! self-recovery signal, a verifier that localizes tampering, and a decoder
//! that restores the tampered region.

// NaN must fail range checks, hence the negated comparisons.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments, clippy::type_complexity)]

pub mod appio;
pub mod attacks;
pub mod backbone;
pub mod error;
pub mod evalmetrics;
pub mod losses;
pub mod masks;
pub mod models;
pub mod training;

pub use error::{ImugeError, Result};
