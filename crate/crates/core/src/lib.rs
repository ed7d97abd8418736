//! Set reconciliation between two peers holding the same chronologically
//! ordered package set, one of them missing `d` packages at unknown
//! positions.
//!
//! The pipeline: a deletion polar code lets the incomplete peer recover one
//! column of the complete peer's data ([`deletion`]), aligning that column
//! with its own exposes the candidate deletion positions ([`alignment`]),
//! and the resulting mask is fed back after source-polarization compression
//! ([`feedback`]). [`protocol`] runs both peers end to end.

pub mod alignment;
pub mod bits;
pub mod deletion;
pub mod error;
pub mod exec;
pub mod experiments;
pub mod feedback;
pub mod polar;
pub mod protocol;
pub mod wire;

pub use bits::BitVec;
pub use error::{Error, Result};
pub use exec::Execution;
pub use polar::PolarDimension;
