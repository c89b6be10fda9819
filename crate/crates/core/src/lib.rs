//! Online initialization of unknown UWB anchor positions from tag-to-anchor
//! range measurements.
//!
//! The pipeline ingests time-synchronized (tag position, range) pairs per
//! anchor, rejects outlier ranges with a streaming triangle-rule consistency
//! check, tracks a conservative closest-point PDOP estimate incrementally,
//! and — once the geometry is good enough — solves for the anchor position
//! and constant range bias with a linear initialization refined by
//! Levenberg-Marquardt under an adaptive robust kernel.
//!
//! Modules:
//! - [`geometry`]: PDOP computation (true, hypothesis-based, and the
//!   conservative closest-point variant) plus incremental streaming updates.
//! - [`filter`]: triangle-rule outlier rejection for range streams.
//! - [`solver`]: linear (pivot-differencing) initialization, generalized
//!   robust loss, adaptive kernel-shape fitting, and LM refinement.
//! - [`initializer`]: per-anchor session lifecycle and multi-anchor manager.
//! - [`sim`]: synthetic trajectories, range generation, baseline strategies
//!   (fixed-window, RANSAC) and the Monte Carlo evaluation harness.

pub mod filter;
pub mod geometry;
pub mod initializer;
pub mod sim;
pub mod solver;

pub use geometry::{SyncedSample, Vec3};
pub use initializer::{AnchorManager, AnchorSession, IngestEvent, Phase, PipelineConfig};
pub use solver::AnchorEstimate;
