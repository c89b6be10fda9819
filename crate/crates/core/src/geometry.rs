//! PDOP computation for range-only anchor geometry.
//!
//! The Positional Dilution of Precision of a set of range measurements is
//! `sqrt(trace((GᵀG)⁻¹))`, where each row of `G` is the unit-normalized
//! direction from the anchor to the tag position, scaled by the measured
//! range. A lower PDOP means a better-conditioned geometry for solving the
//! anchor position.
//!
//! Because the anchor position is unknown before initialization, this module
//! also provides the closest-point variant: the tag position with the
//! smallest measured range stands in for the anchor, its own row is dropped,
//! and the remaining rows are normalized by the measured ranges. The rows
//! then have norm ≤ 1 whenever every sample is at least as close to the
//! closest point as to the anchor, which makes the estimate conservative in
//! the typical approach geometry. [`StreamingPdop`] maintains the same
//! quantity incrementally for online use.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

/// World-frame position in meters.
pub type Vec3 = Vector3<f64>;

/// Relative eigenvalue cutoff below which an information matrix is treated
/// as singular and the PDOP reported as `+inf`. A threshold comparator only
/// needs "definitely too large", not a precise huge value.
pub const SINGULARITY_RATIO: f64 = 1e-10;

/// A tag position time-aligned with one range measurement.
///
/// Invariants expected by every consumer: `t` finite, `range > 0`, all
/// position components finite, and `t` strictly increasing within a stream.
/// They are enforced at the ingestion boundaries (parsers, generators,
/// session ingest), not by this plain data type.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyncedSample {
    /// Measurement timestamp, seconds.
    pub t: f64,
    /// Tag position in the world frame, meters.
    pub tag_pos: Vec3,
    /// Measured range, meters.
    pub range: f64,
}

impl SyncedSample {
    pub fn new(t: f64, tag_pos: Vec3, range: f64) -> Self {
        Self { t, tag_pos, range }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("insufficient samples: need at least {need}, got {got}")]
    InsufficientSamples { need: usize, got: usize },
    #[error("degenerate direction: anchor coincides with tag position at t={t}")]
    DegenerateDirection { t: f64 },
    #[error("out-of-order timestamp: {t} does not follow {last}")]
    OutOfOrder { t: f64, last: f64 },
}

/// Accumulated 3×3 information matrix `Σ uₖuₖᵀ` of direction rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometrySummary {
    pub info: Matrix3<f64>,
    pub n_rows: usize,
}

impl GeometrySummary {
    pub fn empty() -> Self {
        Self { info: Matrix3::zeros(), n_rows: 0 }
    }

    fn add_row(&mut self, row: Vec3) {
        self.info += row * row.transpose();
        self.n_rows += 1;
    }

    /// `sqrt(trace(info⁻¹))`, or `+inf` when the matrix is singular or
    /// nearly so (smallest eigenvalue below [`SINGULARITY_RATIO`] times the
    /// largest). The inverse trace is evaluated through a symmetric
    /// eigendecomposition; conditioning near the trigger threshold matters,
    /// so no explicit cofactor inverse is used.
    pub fn pdop(&self) -> f64 {
        if self.n_rows < 3 {
            return f64::INFINITY;
        }
        let eigvals = self.info.symmetric_eigenvalues();
        let max = eigvals.max();
        let min = eigvals.min();
        if !(max > 0.0) || min < SINGULARITY_RATIO * max {
            return f64::INFINITY;
        }
        eigvals.iter().map(|l| 1.0 / l).sum::<f64>().sqrt()
    }
}

/// Tracks the sample with the minimal measured range seen so far.
/// Ties keep the earliest timestamp, so the tracker is deterministic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosestPointTracker {
    pub closest: SyncedSample,
}

impl ClosestPointTracker {
    pub fn d_min(&self) -> f64 {
        self.closest.range
    }
}

/// Index of the sample with minimal range; earliest timestamp on ties.
pub fn closest_index(samples: &[SyncedSample]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in samples.iter().enumerate() {
        match best {
            None => best = Some(i),
            Some(b) if s.range < samples[b].range => best = Some(i),
            _ => {}
        }
    }
    best
}

fn info_from_rows<'a>(
    samples: impl Iterator<Item = &'a SyncedSample>,
    origin: &Vec3,
) -> GeometrySummary {
    let mut summary = GeometrySummary::empty();
    for s in samples {
        summary.add_row((s.tag_pos - origin) / s.range);
    }
    summary
}

/// PDOP of `samples` as seen from an arbitrary hypothesis position.
///
/// Row k of the geometry matrix is `(p_k − hypothesis)ᵀ / d_k` with the
/// *measured* range `d_k` in the denominator; with noisy ranges the rows
/// deviate slightly from unit norm.
pub fn pdop_at(samples: &[SyncedSample], hypothesis: &Vec3) -> Result<f64, GeometryError> {
    if samples.is_empty() {
        return Err(GeometryError::InsufficientSamples { need: 1, got: 0 });
    }
    for s in samples {
        if (s.tag_pos - hypothesis).norm() == 0.0 {
            return Err(GeometryError::DegenerateDirection { t: s.t });
        }
    }
    Ok(info_from_rows(samples.iter(), hypothesis).pdop())
}

/// PDOP of `samples` with respect to the true anchor position.
pub fn pdop_true(samples: &[SyncedSample], anchor: &Vec3) -> Result<f64, GeometryError> {
    pdop_at(samples, anchor)
}

/// Conservative closest-point PDOP: the minimal-range sample stands in for
/// the unknown anchor, its own row is removed, and the remaining rows are
/// `(p_k − p_C)ᵀ / d_k`.
pub fn pdop_closest_point(samples: &[SyncedSample]) -> Result<f64, GeometryError> {
    if samples.len() < 4 {
        return Err(GeometryError::InsufficientSamples { need: 4, got: samples.len() });
    }
    let j = closest_index(samples).expect("non-empty");
    let origin = samples[j].tag_pos;
    let summary = info_from_rows(
        samples.iter().enumerate().filter(|(i, _)| *i != j).map(|(_, s)| s),
        &origin,
    );
    Ok(summary.pdop())
}

/// Incremental state for the closest-point PDOP over a growing stream.
///
/// Adding a sample whose range is not a new minimum is a rank-1 update of
/// the information matrix. When a new minimum arrives the stand-in origin
/// changes, so the summary is rebuilt from the retained sample buffer. The
/// result matches [`pdop_closest_point`] on the full buffer exactly: after
/// the last rebuild both paths accumulate the same rows in the same order.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamingPdop {
    tracker: Option<ClosestPointTracker>,
    summary: GeometrySummary,
    last_t: Option<f64>,
}

impl StreamingPdop {
    pub fn new() -> Self {
        Self { tracker: None, summary: GeometrySummary::empty(), last_t: None }
    }

    pub fn tracker(&self) -> Option<&ClosestPointTracker> {
        self.tracker.as_ref()
    }

    pub fn summary(&self) -> &GeometrySummary {
        &self.summary
    }

    /// Closest-point PDOP of everything ingested so far.
    pub fn pdop(&self) -> f64 {
        if self.summary.n_rows < 3 {
            return f64::INFINITY;
        }
        self.summary.pdop()
    }

    /// Ingest the next sample. `buffer` must hold every previously ingested
    /// (retained) sample followed by `new` as its last element; it is only
    /// read when the closest point changes and the summary is rebuilt.
    /// Returns whether a rebuild happened.
    pub fn update_summary(
        &mut self,
        buffer: &[SyncedSample],
        new: &SyncedSample,
    ) -> Result<bool, GeometryError> {
        if let Some(last) = self.last_t {
            if new.t <= last {
                return Err(GeometryError::OutOfOrder { t: new.t, last });
            }
        }
        self.last_t = Some(new.t);
        debug_assert!(matches!(buffer.last(), Some(b) if b == new));

        let new_minimum = match &self.tracker {
            None => true,
            // Strict: an equal range keeps the earliest sample as closest.
            Some(t) => new.range < t.d_min(),
        };
        if new_minimum {
            self.tracker = Some(ClosestPointTracker { closest: *new });
            self.rebuild(buffer);
            Ok(true)
        } else {
            let origin = self.tracker.as_ref().expect("tracker set").closest.tag_pos;
            self.summary.add_row((new.tag_pos - origin) / new.range);
            Ok(false)
        }
    }

    /// Recompute the summary from scratch over `buffer`, e.g. after the
    /// closest point changed or old samples were evicted.
    pub fn rebuild(&mut self, buffer: &[SyncedSample]) {
        let Some(j) = closest_index(buffer) else {
            self.tracker = None;
            self.summary = GeometrySummary::empty();
            return;
        };
        self.tracker = Some(ClosestPointTracker { closest: buffer[j] });
        let origin = buffer[j].tag_pos;
        self.summary = info_from_rows(
            buffer.iter().enumerate().filter(|(i, _)| *i != j).map(|(_, s)| s),
            &origin,
        );
    }
}

impl Default for StreamingPdop {
    fn default() -> Self {
        Self::new()
    }
}
