//! Multi-task loss weighting on a desk-scale two-task benchmark.
//!
//! The crate bundles a small reverse-mode differentiation engine ([`grad`]),
//! a shared-trunk two-head network ([`net`]), a procedural segmentation +
//! detection benchmark ([`tasks`]), nine loss weighting strategies
//! ([`weighting`]), per-task update-frequency masking ([`schedule`]), an
//! evolution-strategies search over task weights ([`evo`]) and the
//! experiment driver tying them together ([`bench`]).

pub mod bench;
pub mod error;
pub mod evo;
pub mod grad;
pub mod net;
pub mod task;
pub mod schedule;
pub mod tasks;
pub mod weighting;

pub use error::{Error, Result};
pub use task::{PerTask, Task};
