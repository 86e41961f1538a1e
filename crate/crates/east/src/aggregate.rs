//! Proposal aggregation: every frame of the unsampled video averages the
//! class distributions of all proposals covering its timestamp, normalized
//! to sum 1.
//!
//! Coverage is tested half-open (`t_start <= t < t_end`) so a frame on a
//! shared boundary is counted once. Frames covered by no proposal fall
//! back to the uniform distribution (Eq-style normalization is undefined
//! at zero coverage); a background-one-hot fallback is available.
//! Accumulation runs in f64 over a canonical proposal order, making the
//! result exactly invariant to the input ordering.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ActionProposal, FrameLabeling};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroCoverage {
    Uniform,
    Background,
}

fn canonical_order(proposals: &[ActionProposal]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..proposals.len()).collect();
    idx.sort_by(|&i, &j| {
        let a = &proposals[i];
        let b = &proposals[j];
        a.t_start
            .partial_cmp(&b.t_start)
            .unwrap()
            .then(a.t_end.partial_cmp(&b.t_end).unwrap())
            .then_with(|| {
                for (x, y) in a.dist.iter().zip(&b.dist) {
                    match x.partial_cmp(y).unwrap() {
                        std::cmp::Ordering::Equal => continue,
                        other => return other,
                    }
                }
                std::cmp::Ordering::Equal
            })
    });
    idx
}

/// Aggregate `proposals` into per-frame distributions over `num_frames`
/// frames at `fps` (frame `i` sits at `(i + 0.5) / fps` seconds).
pub fn aggregate(
    proposals: &[ActionProposal],
    num_frames: usize,
    fps: f64,
    zero_coverage: ZeroCoverage,
) -> Result<FrameLabeling> {
    if num_frames == 0 {
        return Err(Error::Invalid("aggregate needs at least one frame".into()));
    }
    if fps <= 0.0 {
        return Err(Error::Invalid(format!("fps must be positive, got {fps}")));
    }
    let num_classes = match proposals.first() {
        Some(p) => p.dist.len(),
        None => {
            return Err(Error::Invalid(
                "aggregate needs the class count; got an empty proposal set".into(),
            ))
        }
    };
    for p in proposals {
        if p.dist.len() != num_classes {
            return Err(Error::shape(
                "aggregate",
                format!(
                    "proposal distributions disagree: {} vs {num_classes} classes",
                    p.dist.len()
                ),
            ));
        }
    }

    let order = canonical_order(proposals);
    let mut dists = vec![0.0f64; num_frames * num_classes];
    for i in 0..num_frames {
        let t = (i as f64 + 0.5) / fps;
        let row = &mut dists[i * num_classes..(i + 1) * num_classes];
        let mut covered = false;
        for &pi in &order {
            let p = &proposals[pi];
            if p.t_start <= t && t < p.t_end {
                covered = true;
                for (acc, &v) in row.iter_mut().zip(&p.dist) {
                    *acc += v;
                }
            }
        }
        if covered {
            let sum: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= sum;
            }
        } else {
            match zero_coverage {
                ZeroCoverage::Uniform => {
                    let u = 1.0 / num_classes as f64;
                    for v in row.iter_mut() {
                        *v = u;
                    }
                }
                ZeroCoverage::Background => row[0] = 1.0,
            }
        }
    }
    Ok(FrameLabeling {
        fps,
        num_classes,
        dists,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn prop(s: f64, e: f64, dist: Vec<f64>) -> ActionProposal {
        ActionProposal {
            t_start: s,
            t_end: e,
            dist,
            confidence: 0.0,
            source_frame: 0,
            source_level: 0,
        }
    }

    #[test]
    fn single_covering_proposal_copies_its_distribution() {
        let props = vec![prop(0.0, 10.0, vec![0.8, 0.2])];
        let lab = aggregate(&props, 20, 2.0, ZeroCoverage::Uniform).unwrap();
        for i in 0..20 {
            assert_eq!(lab.row(i), &[0.8, 0.2]);
        }
    }

    #[test]
    fn two_covering_proposals_sum_then_normalize() {
        let props = vec![
            prop(0.0, 10.0, vec![0.8, 0.2]),
            prop(0.0, 10.0, vec![0.4, 0.6]),
        ];
        let lab = aggregate(&props, 4, 1.0, ZeroCoverage::Uniform).unwrap();
        for i in 0..4 {
            let row = lab.row(i);
            assert!((row[0] - 0.6).abs() < 1e-15);
            assert!((row[1] - 0.4).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_coverage_fallbacks() {
        let props = vec![prop(5.0, 6.0, vec![0.5, 0.5, 0.0])];
        let lab = aggregate(&props, 2, 1.0, ZeroCoverage::Uniform).unwrap();
        let third = 1.0 / 3.0;
        assert_eq!(lab.row(0), &[third, third, third]);
        let lab = aggregate(&props, 2, 1.0, ZeroCoverage::Background).unwrap();
        assert_eq!(lab.row(0), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn half_open_coverage_at_boundary() {
        // frame at t = 1.5; proposal ending exactly there must not cover it
        let props = vec![
            prop(0.0, 1.5, vec![1.0, 0.0]),
            prop(1.5, 3.0, vec![0.0, 1.0]),
        ];
        let lab = aggregate(&props, 2, 1.0, ZeroCoverage::Uniform).unwrap();
        // frames at 0.5 and 1.5
        assert_eq!(lab.row(0), &[1.0, 0.0]);
        assert_eq!(lab.row(1), &[0.0, 1.0]);
    }

    #[test]
    fn order_invariance_is_exact_and_matches_bruteforce() {
        let mut rng = Rng::new(77);
        for case in 0..100 {
            let a = 2 + rng.below(5);
            let n = 1 + rng.below(40);
            let t = 1 + rng.below(60);
            let fps = rng.range(0.5, 30.0);
            let mut props = Vec::with_capacity(n);
            for _ in 0..n {
                let s = rng.range(0.0, t as f64 / fps);
                let e = s + rng.range(0.01, 10.0);
                let mut dist: Vec<f64> = (0..a).map(|_| rng.uniform() + 1e-3).collect();
                let sum: f64 = dist.iter().sum();
                for v in dist.iter_mut() {
                    *v /= sum;
                }
                props.push(prop(s, e, dist));
            }
            let lab = aggregate(&props, t, fps, ZeroCoverage::Uniform).unwrap();

            // independent brute force: per proposal, accumulate into frames
            let mut acc = vec![0.0f64; t * a];
            let mut count = vec![0usize; t];
            for p in &props {
                for i in 0..t {
                    let ti = (i as f64 + 0.5) / fps;
                    if p.t_start <= ti && ti < p.t_end {
                        count[i] += 1;
                        for c in 0..a {
                            acc[i * a + c] += p.dist[c];
                        }
                    }
                }
            }
            for i in 0..t {
                let row = &mut acc[i * a..(i + 1) * a];
                if count[i] > 0 {
                    let s: f64 = row.iter().sum();
                    for v in row.iter_mut() {
                        *v /= s;
                    }
                } else {
                    for v in row.iter_mut() {
                        *v = 1.0 / a as f64;
                    }
                }
            }
            let max_diff = lab
                .dists
                .iter()
                .zip(&acc)
                .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            assert!(max_diff < 1e-9, "case {case}: diff {max_diff}");

            // row sums
            for i in 0..t {
                let s: f64 = lab.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }

            // exact order invariance
            let mut shuffled = props.clone();
            rng.shuffle(&mut shuffled);
            let lab2 = aggregate(&shuffled, t, fps, ZeroCoverage::Uniform).unwrap();
            assert_eq!(lab.dists, lab2.dists, "case {case}: ordering changed bits");
        }
    }

    #[test]
    fn duplicating_a_proposal_shifts_mass_toward_it() {
        let props = vec![
            prop(0.0, 4.0, vec![0.9, 0.1]),
            prop(0.0, 4.0, vec![0.2, 0.8]),
        ];
        let base = aggregate(&props, 4, 1.0, ZeroCoverage::Uniform).unwrap();
        let mut dup = props.clone();
        dup.push(props[1].clone());
        let shifted = aggregate(&dup, 4, 1.0, ZeroCoverage::Uniform).unwrap();
        for i in 0..4 {
            assert!(shifted.row(i)[1] > base.row(i)[1]);
        }
    }
}
