//! Snapshot schedules.
//!
//! Every bridge computation runs on a unit-spaced grid: the raw observation
//! times `t_0 < t_1 < ... < t_N` are rank-normalized to `0, 1, ..., N`, so
//! segment `n` always spans `[n, n + 1)`. The raw times are kept for reporting
//! and for mapping off-schedule (held-out) times onto the normalized axis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSchedule {
    raw_times: Vec<f64>,
}

impl SnapshotSchedule {
    pub fn new(raw_times: &[f64]) -> Result<Self> {
        normalize_schedule(raw_times)
    }

    /// Unit-spaced schedule `0, 1, ..., num_segments`.
    pub fn uniform(num_segments: usize) -> Result<Self> {
        let times: Vec<f64> = (0..=num_segments).map(|n| n as f64).collect();
        normalize_schedule(&times)
    }

    pub fn raw_times(&self) -> &[f64] {
        &self.raw_times
    }

    pub fn normalized_times(&self) -> Vec<f64> {
        (0..self.raw_times.len()).map(|n| n as f64).collect()
    }

    /// `N`: number of marginals minus one.
    pub fn num_segments(&self) -> usize {
        self.raw_times.len() - 1
    }

    pub fn num_marginals(&self) -> usize {
        self.raw_times.len()
    }

    /// Final normalized time `T = N`.
    pub fn horizon(&self) -> f64 {
        self.num_segments() as f64
    }

    /// Segment containing normalized time `t`; the final pin belongs to the last segment.
    pub fn segment_of(&self, t: f64) -> usize {
        let n = self.num_segments();
        if t <= 0.0 {
            0
        } else {
            (t.floor() as usize).min(n - 1)
        }
    }

    /// Maps a raw time onto the normalized axis by piecewise-linear interpolation.
    pub fn normalize_time(&self, raw: f64) -> Result<f64> {
        let times = &self.raw_times;
        let first = times[0];
        let last = times[times.len() - 1];
        if !(first..=last).contains(&raw) {
            return Err(Error::Domain(format!(
                "time {raw} outside schedule range [{first}, {last}]"
            )));
        }
        let n = times
            .windows(2)
            .position(|w| raw <= w[1])
            .unwrap_or(times.len() - 2);
        let (a, b) = (times[n], times[n + 1]);
        Ok(n as f64 + (raw - a) / (b - a))
    }

    /// Schedule with the time axis reversed (`t -> t_N + t_0 - t`), used for backward sweeps.
    pub fn mirrored(&self) -> Self {
        let first = self.raw_times[0];
        let last = self.raw_times[self.raw_times.len() - 1];
        let raw_times = self
            .raw_times
            .iter()
            .rev()
            .map(|t| first + last - t)
            .collect();
        SnapshotSchedule { raw_times }
    }
}

/// Validates raw times and builds the rank-normalized schedule.
pub fn normalize_schedule(raw_times: &[f64]) -> Result<SnapshotSchedule> {
    if raw_times.len() < 2 {
        return Err(Error::Schedule(format!(
            "need at least two snapshot times, got {}",
            raw_times.len()
        )));
    }
    if let Some(t) = raw_times.iter().find(|t| !t.is_finite()) {
        return Err(Error::Schedule(format!("non-finite time {t}")));
    }
    for (i, w) in raw_times.windows(2).enumerate() {
        if w[1] <= w[0] {
            let kind = if w[1] == w[0] { "duplicate" } else { "descending" };
            return Err(Error::Schedule(format!(
                "{kind} times at positions {i} and {}: {} then {}",
                i + 1,
                w[0],
                w[1]
            )));
        }
    }
    Ok(SnapshotSchedule {
        raw_times: raw_times.to_vec(),
    })
}
