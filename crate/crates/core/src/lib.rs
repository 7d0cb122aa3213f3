//! Coherence runtime for arrays partitioned across simulated processes, each
//! owning one accelerator with its own memory.
//!
//! Kernels declare what they read and write with offset tuples relative to a
//! work item, or with explicit per-device sections. From those declarations
//! the runtime derives the local use/def sets of every process and keeps, per
//! array, a table of pending definitions that tells exactly which cells must
//! travel between processes before each launch.

pub mod access;
pub mod cache;
pub mod comm;
pub mod error;
pub mod frontend;
pub mod model;
pub mod oracle;
pub mod runtime;
pub mod scenario;
pub mod sections;

pub use error::{Error, Result};
