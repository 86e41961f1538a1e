//! Domain types shared across the pipeline.
//!
//! Class index convention: probability distributions run over
//! `A = num_actions + 1` entries with background at index 0 and action `a`
//! at index `a + 1`. [`SegmentAnnotation::class_id`] is an action id
//! (background never appears as an annotated instance).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One ground-truth action instance, boundaries in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentAnnotation {
    pub start: f64,
    pub end: f64,
    pub class_id: usize,
}

impl SegmentAnnotation {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

/// Validate a per-video annotation list: positive-width, non-overlapping
/// instances (touching boundaries allowed). Returns the list sorted by
/// start time.
pub fn validate_annotations(anns: &[SegmentAnnotation]) -> Result<Vec<SegmentAnnotation>> {
    let mut sorted = anns.to_vec();
    for a in &sorted {
        if !(a.start < a.end) {
            return Err(Error::Data(format!(
                "annotation has non-positive extent: [{}, {}]",
                a.start, a.end
            )));
        }
    }
    sorted.sort_by(|a, b| a.start.partial_cmp(&b.start).unwrap());
    for w in sorted.windows(2) {
        if w[1].start < w[0].end {
            return Err(Error::Data(format!(
                "overlapping annotations: [{}, {}] and [{}, {}]",
                w[0].start, w[0].end, w[1].start, w[1].end
            )));
        }
    }
    Ok(sorted)
}

/// One action proposal: boundaries in seconds, a class distribution over
/// all `A` classes (background included), and a confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionProposal {
    pub t_start: f64,
    pub t_end: f64,
    pub dist: Vec<f64>,
    pub confidence: f64,
    /// Sampled frame this proposal was generated from.
    #[serde(default)]
    pub source_frame: usize,
    /// Pyramid level whose regression produced the boundaries.
    #[serde(default)]
    pub source_level: usize,
}

impl ActionProposal {
    /// Most likely action (excluding background), as an action id.
    pub fn action_argmax(&self) -> Option<usize> {
        if self.dist.len() < 2 {
            return None;
        }
        let mut best = 1;
        for i in 2..self.dist.len() {
            if self.dist[i] > self.dist[best] {
                best = i;
            }
        }
        if self.dist[best] >= self.dist[0] {
            Some(best - 1)
        } else {
            None // background outscores every action
        }
    }

    pub fn label_argmax(&self) -> usize {
        let mut best = 0;
        for i in 1..self.dist.len() {
            if self.dist[i] > self.dist[best] {
                best = i;
            }
        }
        best
    }
}

/// JSONL record for proposal dumps
/// (`{video_id, t_start, t_end, dist, confidence}` per line).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub video_id: String,
    pub t_start: f64,
    pub t_end: f64,
    pub dist: Vec<f64>,
    pub confidence: f64,
}

impl ProposalRecord {
    pub fn from_proposal(video_id: &str, p: &ActionProposal) -> Self {
        ProposalRecord {
            video_id: video_id.to_string(),
            t_start: p.t_start,
            t_end: p.t_end,
            dist: p.dist.clone(),
            confidence: p.confidence,
        }
    }

    pub fn into_proposal(self) -> ActionProposal {
        ActionProposal {
            t_start: self.t_start,
            t_end: self.t_end,
            dist: self.dist,
            confidence: self.confidence,
            source_frame: 0,
            source_level: 0,
        }
    }
}

/// Per-frame class distributions (soft labeling) at a given frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLabeling {
    pub fps: f64,
    pub num_classes: usize,
    /// `[T x A]` row-major; every row sums to 1.
    pub dists: Vec<f64>,
}

impl FrameLabeling {
    pub fn num_frames(&self) -> usize {
        self.dists.len() / self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.dists[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub fn timestamp(&self, i: usize) -> f64 {
        (i as f64 + 0.5) / self.fps
    }

    /// Argmax labels; ties resolve to the lowest class index.
    pub fn hard_labels(&self) -> Vec<usize> {
        (0..self.num_frames())
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}
