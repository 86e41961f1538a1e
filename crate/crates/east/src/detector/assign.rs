//! Anchor-free target assignment: every sampled frame inside a
//! ground-truth instance regresses that instance's boundaries; everything
//! else is background.

use crate::error::Result;
use crate::types::{validate_annotations, SegmentAnnotation};

/// Pyramid geometry needed for assignment, decoupled from the tensors.
#[derive(Debug, Clone, Copy)]
pub struct PyramidSpec {
    pub levels: usize,
    /// Level-0 max-offset cap in sampled frames.
    pub base_range: f64,
    /// Seconds between consecutive sampled frames.
    pub frame_period: f64,
}

impl PyramidSpec {
    /// Max-offset gate `[lo, hi)` of a level, in seconds.
    pub fn level_range(&self, level: usize) -> (f64, f64) {
        let base = self.base_range * self.frame_period;
        let lo = if level == 0 {
            0.0
        } else {
            base * (1 << (level - 1)) as f64
        };
        let hi = if level + 1 == self.levels {
            f64::INFINITY
        } else {
            base * (1 << level) as f64
        };
        (lo, hi)
    }

    pub fn level_for_extent(&self, max_offset: f64) -> usize {
        for l in 0..self.levels {
            let (lo, hi) = self.level_range(l);
            if max_offset >= lo && max_offset < hi {
                return l;
            }
        }
        self.levels - 1
    }
}

/// Regression target of one sampled frame. `class_index` uses the
/// distribution convention (0 = background); background frames carry no
/// offsets and no assigned level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionTarget {
    pub class_index: usize,
    pub d_start: f64,
    pub d_end: f64,
    pub level: usize,
    pub gt_start: f64,
    pub gt_end: f64,
}

impl RegressionTarget {
    pub fn background() -> Self {
        RegressionTarget {
            class_index: 0,
            d_start: 0.0,
            d_end: 0.0,
            level: 0,
            gt_start: 0.0,
            gt_end: 0.0,
        }
    }

    pub fn is_action(&self) -> bool {
        self.class_index != 0
    }
}

/// Assign each sampled frame its enclosing instance (half-open
/// `start <= t < end`), offsets in seconds, and the pyramid level whose
/// regression range contains the larger offset. Overlapping annotations
/// are rejected.
pub fn assign_targets(
    annotations: &[SegmentAnnotation],
    timestamps: &[f64],
    spec: &PyramidSpec,
) -> Result<Vec<RegressionTarget>> {
    let sorted = validate_annotations(annotations)?;
    let mut out = Vec::with_capacity(timestamps.len());
    for &t in timestamps {
        let hit = sorted
            .iter()
            .find(|a| a.start <= t && t < a.end);
        match hit {
            None => out.push(RegressionTarget::background()),
            Some(a) => {
                let d_start = t - a.start;
                let d_end = a.end - t;
                out.push(RegressionTarget {
                    class_index: a.class_id + 1,
                    d_start,
                    d_end,
                    level: spec.level_for_extent(d_start.max(d_end)),
                    gt_start: a.start,
                    gt_end: a.end,
                });
            }
        }
    }
    Ok(out)
}
