//! Detection average precision over proposals, and 1-D NMS.
//!
//! AP uses confidence-ranked greedy matching per class with all-point
//! interpolation; classes without ground truth are excluded from the mean.
//! Because every sampled frame emits a proposal, near-duplicates of one
//! instance are unavoidable — evaluation therefore runs class-wise NMS
//! before ranking (aggregation never does).

use std::collections::BTreeMap;

use crate::types::{ActionProposal, SegmentAnnotation};

fn interval_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Class-wise non-maximum suppression: keep proposals in confidence order,
/// dropping any whose IoU with an already-kept proposal of the same action
/// class reaches `iou_threshold`. Background-argmax proposals are dropped.
/// Returns indices into `proposals`, in confidence order.
pub fn nms(proposals: &[ActionProposal], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..proposals.len())
        .filter(|&i| proposals[i].action_argmax().is_some())
        .collect();
    order.sort_by(|&i, &j| {
        proposals[j]
            .confidence
            .partial_cmp(&proposals[i].confidence)
            .unwrap()
            .then(i.cmp(&j))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let ci = proposals[i].action_argmax();
        let overlap = kept.iter().any(|&k| {
            proposals[k].action_argmax() == ci
                && interval_iou(
                    (proposals[i].t_start, proposals[i].t_end),
                    (proposals[k].t_start, proposals[k].t_end),
                ) >= iou_threshold
        });
        if !overlap {
            kept.push(i);
        }
    }
    kept
}

#[derive(Debug, Clone)]
pub struct ApReport {
    /// (IoU threshold, AP averaged over classes with ground truth).
    pub per_threshold: Vec<(f64, f64)>,
    pub map: f64,
}

/// AP/mAP of proposals against annotations, both grouped per video.
/// A proposal's class is its action argmax; proposals whose argmax is
/// background assert no action and are skipped.
pub fn detection_ap(
    proposals: &BTreeMap<String, Vec<ActionProposal>>,
    annotations: &BTreeMap<String, Vec<SegmentAnnotation>>,
    iou_thresholds: &[f64],
    num_actions: usize,
) -> ApReport {
    let mut per_threshold = Vec::with_capacity(iou_thresholds.len());
    for &thr in iou_thresholds {
        let mut class_aps = Vec::new();
        for class in 0..num_actions {
            let ap = class_ap(proposals, annotations, class, thr);
            if let Some(ap) = ap {
                class_aps.push(ap);
            }
        }
        let mean = if class_aps.is_empty() {
            0.0
        } else {
            class_aps.iter().sum::<f64>() / class_aps.len() as f64
        };
        per_threshold.push((thr, mean));
    }
    let map = if per_threshold.is_empty() {
        0.0
    } else {
        per_threshold.iter().map(|(_, ap)| ap).sum::<f64>() / per_threshold.len() as f64
    };
    ApReport { per_threshold, map }
}

/// AP of one class at one threshold; `None` when the class has no ground
/// truth anywhere (excluded from the mean).
fn class_ap(
    proposals: &BTreeMap<String, Vec<ActionProposal>>,
    annotations: &BTreeMap<String, Vec<SegmentAnnotation>>,
    class: usize,
    thr: f64,
) -> Option<f64> {
    // ground truth per video
    let mut gt: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    let mut total_gt = 0usize;
    for (vid, anns) in annotations {
        let list: Vec<(f64, f64)> = anns
            .iter()
            .filter(|a| a.class_id == class)
            .map(|a| (a.start, a.end))
            .collect();
        total_gt += list.len();
        gt.insert(vid.as_str(), list);
    }
    if total_gt == 0 {
        return None;
    }

    // all predictions of this class, ranked by confidence
    let mut preds: Vec<(&str, usize, f64, (f64, f64))> = Vec::new();
    for (vid, props) in proposals {
        for (idx, p) in props.iter().enumerate() {
            if p.action_argmax() == Some(class) {
                preds.push((vid.as_str(), idx, p.confidence, (p.t_start, p.t_end)));
            }
        }
    }
    preds.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap()
            .then(a.0.cmp(b.0))
            .then(a.1.cmp(&b.1))
    });

    let mut matched: BTreeMap<&str, Vec<bool>> =
        gt.iter().map(|(v, g)| (*v, vec![false; g.len()])).collect();
    let mut tp = Vec::with_capacity(preds.len());
    for (vid, _, _, interval) in &preds {
        let g = &gt[vid];
        let taken = matched.get_mut(vid).unwrap();
        let mut best: Option<(usize, f64)> = None;
        for (gi, &ginterval) in g.iter().enumerate() {
            if taken[gi] {
                continue;
            }
            let iou = interval_iou(*interval, ginterval);
            if iou >= thr && best.map(|(_, b)| iou > b).unwrap_or(true) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, _)) => {
                taken[gi] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }

    // all-point interpolated AP
    let mut cum_tp = 0usize;
    let n = tp.len();
    let mut precisions = Vec::with_capacity(n);
    let mut recalls = Vec::with_capacity(n);
    for (k, &is_tp) in tp.iter().enumerate() {
        if is_tp {
            cum_tp += 1;
        }
        precisions.push(cum_tp as f64 / (k + 1) as f64);
        recalls.push(cum_tp as f64 / total_gt as f64);
    }
    // precision envelope from the right
    for k in (0..n.saturating_sub(1)).rev() {
        if precisions[k + 1] > precisions[k] {
            precisions[k] = precisions[k + 1];
        }
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..n {
        ap += (recalls[k] - prev_recall) * precisions[k];
        prev_recall = recalls[k];
    }
    Some(ap)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prop(s: f64, e: f64, class: usize, conf: f64, a: usize) -> ActionProposal {
        let mut dist = vec![(1.0 - conf) / (a - 1) as f64; a];
        dist[class + 1] = conf;
        ActionProposal {
            t_start: s,
            t_end: e,
            dist,
            confidence: conf,
            source_frame: 0,
            source_level: 0,
        }
    }

    fn ann(s: f64, e: f64, class: usize) -> SegmentAnnotation {
        SegmentAnnotation { start: s, end: e, class_id: class }
    }

    fn one_video(
        props: Vec<ActionProposal>,
        anns: Vec<SegmentAnnotation>,
    ) -> (
        BTreeMap<String, Vec<ActionProposal>>,
        BTreeMap<String, Vec<SegmentAnnotation>>,
    ) {
        let mut p = BTreeMap::new();
        p.insert("v".to_string(), props);
        let mut a = BTreeMap::new();
        a.insert("v".to_string(), anns);
        (p, a)
    }

    #[test]
    fn single_correct_proposal_is_perfect_up_to_its_iou() {
        // IoU( [0,8], [0,10] ) = 0.8
        let (p, a) = one_video(vec![prop(0.0, 8.0, 2, 0.9, 5)], vec![ann(0.0, 10.0, 2)]);
        let rep = detection_ap(&p, &a, &[0.3, 0.4, 0.5, 0.6, 0.7], 4);
        for (thr, ap) in &rep.per_threshold {
            assert_eq!(*ap, 1.0, "thr {thr}");
        }
        assert_eq!(rep.map, 1.0);

        let rep = detection_ap(&p, &a, &[0.9], 4);
        assert_eq!(rep.per_threshold[0].1, 0.0);
        assert_eq!(rep.map, 0.0);
    }

    #[test]
    fn duplicate_matches_count_as_false_positives() {
        let (p, a) = one_video(
            vec![prop(0.0, 10.0, 0, 0.9, 3), prop(0.0, 10.0, 0, 0.8, 3)],
            vec![ann(0.0, 10.0, 0)],
        );
        let rep = detection_ap(&p, &a, &[0.5], 2);
        // first hits (P=1, R=1), second is FP after the recall is saturated
        assert_eq!(rep.per_threshold[0].1, 1.0);
    }

    #[test]
    fn classes_without_ground_truth_are_excluded() {
        let (p, a) = one_video(vec![prop(0.0, 5.0, 1, 0.9, 4)], vec![ann(0.0, 5.0, 1)]);
        // three action classes exist but only class 1 has GT
        let rep = detection_ap(&p, &a, &[0.5], 3);
        assert_eq!(rep.per_threshold[0].1, 1.0);
    }

    #[test]
    fn nms_keeps_best_of_overlapping_same_class() {
        let props = vec![
            prop(0.0, 10.0, 0, 0.7, 3),
            prop(0.5, 10.5, 0, 0.9, 3),
            prop(0.2, 10.2, 1, 0.8, 3), // other class survives
            prop(20.0, 30.0, 0, 0.6, 3),
        ];
        let kept = nms(&props, 0.5);
        assert_eq!(kept, vec![1, 2, 3]);
    }

    // Independent O(n^2) reference: recompute AP by explicit greedy
    // matching and direct summation over the PR points.
    fn reference_ap(
        preds: &[(f64, f64, usize, f64)],
        gts: &[(f64, f64, usize)],
        class: usize,
        thr: f64,
    ) -> Option<f64> {
        let gt: Vec<(f64, f64)> = gts
            .iter()
            .filter(|g| g.2 == class)
            .map(|g| (g.0, g.1))
            .collect();
        if gt.is_empty() {
            return None;
        }
        let mut order: Vec<usize> = (0..preds.len()).filter(|&i| preds[i].2 == class).collect();
        order.sort_by(|&i, &j| preds[j].3.partial_cmp(&preds[i].3).unwrap().then(i.cmp(&j)));
        let mut used = vec![false; gt.len()];
        let mut tps = Vec::new();
        for &i in &order {
            let mut best_iou = -1.0;
            let mut best_g = None;
            for (gi, g) in gt.iter().enumerate() {
                if used[gi] {
                    continue;
                }
                let iou = interval_iou((preds[i].0, preds[i].1), *g);
                if iou >= thr && iou > best_iou {
                    best_iou = iou;
                    best_g = Some(gi);
                }
            }
            if let Some(gi) = best_g {
                used[gi] = true;
                tps.push(1.0);
            } else {
                tps.push(0.0);
            }
        }
        let n = tps.len();
        let mut ap = 0.0;
        let mut cum = 0.0;
        for k in 0..n {
            cum += tps[k];
            if tps[k] > 0.0 {
                // all-point interpolation: precision at this recall point is
                // the max precision at any rank >= k+1
                let mut best_p = 0.0f64;
                let mut c2 = 0.0;
                for (k2, &v) in tps.iter().enumerate() {
                    c2 += v;
                    if k2 >= k {
                        best_p = best_p.max(c2 / (k2 + 1) as f64);
                    }
                }
                ap += best_p / gt.len() as f64;
            }
        }
        let _ = cum;
        Some(ap)
    }

    #[test]
    fn randomized_sets_match_reference_matcher() {
        use crate::tensor::Rng;
        let mut rng = Rng::new(33);
        for case in 0..50 {
            let nc = 3usize;
            let n_gt = 1 + rng.below(4);
            let mut gts = Vec::new();
            let mut cursor = 0.0;
            for _ in 0..n_gt {
                cursor += rng.range(0.5, 2.0);
                let s = cursor;
                let e = s + rng.range(0.5, 3.0);
                cursor = e;
                gts.push((s, e, rng.below(nc)));
            }
            let n_pred = 1 + rng.below(8);
            let mut preds = Vec::new();
            for _ in 0..n_pred {
                let g = gts[rng.below(gts.len())];
                let jitter = rng.range(-1.0, 1.0);
                let s = g.0 + jitter * 0.8;
                let e = (g.1 + rng.range(-1.0, 1.0) * 0.8).max(s + 0.1);
                let class = if rng.uniform() < 0.8 { g.2 } else { rng.below(nc) };
                preds.push((s, e, class, rng.uniform()));
            }

            let annotations: Vec<SegmentAnnotation> = gts
                .iter()
                .map(|&(s, e, c)| SegmentAnnotation { start: s, end: e, class_id: c })
                .collect();
            let proposals: Vec<ActionProposal> = preds
                .iter()
                .map(|&(s, e, c, conf)| {
                    let mut dist = vec![0.0; nc + 1];
                    dist[c + 1] = conf.max(0.51);
                    let rest = (1.0 - dist[c + 1]) / nc as f64;
                    for (ci, v) in dist.iter_mut().enumerate() {
                        if ci != c + 1 {
                            *v = rest;
                        }
                    }
                    ActionProposal {
                        t_start: s,
                        t_end: e,
                        dist,
                        confidence: conf,
                        source_frame: 0,
                        source_level: 0,
                    }
                })
                .collect();
            // recompute pred class/conf the way detection_ap sees them
            let preds_ref: Vec<(f64, f64, usize, f64)> = proposals
                .iter()
                .map(|p| {
                    (
                        p.t_start,
                        p.t_end,
                        p.action_argmax().unwrap(),
                        p.confidence,
                    )
                })
                .collect();

            let mut pm = BTreeMap::new();
            pm.insert("v".to_string(), proposals);
            let mut am = BTreeMap::new();
            am.insert("v".to_string(), annotations);
            for thr in [0.3, 0.5, 0.7] {
                let mine = detection_ap(&pm, &am, &[thr], nc).per_threshold[0].1;
                let mut refs = Vec::new();
                for class in 0..nc {
                    if let Some(ap) = reference_ap(&preds_ref, &gts, class, thr) {
                        refs.push(ap);
                    }
                }
                let reference = refs.iter().sum::<f64>() / refs.len() as f64;
                assert!(
                    (mine - reference).abs() < 1e-12,
                    "case {case} thr {thr}: {mine} vs {reference}"
                );
            }
        }
    }
}
