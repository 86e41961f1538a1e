//! Segmentation metrics: framewise accuracy, segmental edit score,
//! segmental F1 at IoU thresholds, and dataset-level evaluation.
//!
//! Benchmark conventions, applied explicitly: background frames count in
//! accuracy; background segments are excluded from the Edit/F1 segment
//! lists (configurable); Edit and F1 are computed per video then averaged,
//! accuracy over the concatenated frames.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Run-length segment over frame indices `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub class: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Run-length encode per-frame labels into contiguous segments covering
/// `[0, T)`; adjacent segments always differ in class.
pub fn segments_from_labels(labels: &[usize]) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=labels.len() {
        if i == labels.len() || labels[i] != labels[start] {
            out.push(Segment {
                start,
                end: i,
                class: labels[start],
            });
            start = i;
        }
    }
    out
}

pub fn labels_from_segments(segments: &[Segment]) -> Vec<usize> {
    let t = segments.last().map(|s| s.end).unwrap_or(0);
    let mut labels = vec![0usize; t];
    for s in segments {
        for l in labels.iter_mut().take(s.end).skip(s.start) {
            *l = s.class;
        }
    }
    labels
}

/// 100 * matching frames / T. Lengths must agree.
pub fn framewise_accuracy(pred: &[usize], gt: &[usize]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Data(format!(
            "framewise_accuracy: {} predicted frames vs {} ground-truth frames",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Ok(100.0);
    }
    let matching = pred.iter().zip(gt).filter(|(a, b)| a == b).count();
    Ok(100.0 * matching as f64 / pred.len() as f64)
}

fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let (m, n) = (a.len(), b.len());
    let mut prev: Vec<usize> = (0..=n).collect();
    let mut cur = vec![0usize; n + 1];
    for i in 1..=m {
        cur[0] = i;
        for j in 1..=n {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[n]
}

/// Segmental edit score over the class sequences of two segmentations:
/// `100 * (1 - Levenshtein / max(|pred|, |gt|))`; 100 when both are empty.
pub fn edit_score(pred: &[Segment], gt: &[Segment]) -> f64 {
    let a: Vec<usize> = pred.iter().map(|s| s.class).collect();
    let b: Vec<usize> = gt.iter().map(|s| s.class).collect();
    let denom = a.len().max(b.len());
    if denom == 0 {
        return 100.0;
    }
    100.0 * (1.0 - levenshtein(&a, &b) as f64 / denom as f64)
}

fn frame_iou(a: &Segment, b: &Segment) -> f64 {
    let inter = a.end.min(b.end).saturating_sub(a.start.max(b.start));
    let union = a.end.max(b.end) - a.start.min(b.start);
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Segmental F1 at overlap threshold `k` percent: a predicted segment is a
/// true positive when its best frame-IoU against a not-yet-matched
/// same-class ground-truth segment reaches `k / 100`. 100 when both sides
/// are empty, 0 when exactly one side is.
pub fn f1_at_k(pred: &[Segment], gt: &[Segment], k: f64) -> f64 {
    if pred.is_empty() && gt.is_empty() {
        return 100.0;
    }
    if pred.is_empty() || gt.is_empty() {
        return 0.0;
    }
    let thr = k / 100.0;
    let mut matched = vec![false; gt.len()];
    let mut tp = 0usize;
    for p in pred {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gt.iter().enumerate() {
            if matched[gi] || g.class != p.class {
                continue;
            }
            let iou = frame_iou(p, g);
            if iou >= thr && best.map(|(_, b)| iou > b).unwrap_or(true) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, _)) = best {
            matched[gi] = true;
            tp += 1;
        }
    }
    let fp = pred.len() - tp;
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / gt.len() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        100.0 * 2.0 * precision * recall / (precision + recall)
    }
}

/// Segment list used for Edit/F1: run-length encoding with background
/// segments dropped (unless `keep_background`).
pub fn metric_segments(labels: &[usize], keep_background: bool) -> Vec<Segment> {
    segments_from_labels(labels)
        .into_iter()
        .filter(|s| keep_background || s.class != 0)
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VideoMetrics {
    pub video_id: String,
    pub acc: f64,
    pub edit: f64,
    pub f1: Vec<f64>,
    pub frames: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetReport {
    /// Accuracy over all concatenated frames.
    pub acc: f64,
    /// Edit score averaged over videos.
    pub edit: f64,
    /// F1@{thresholds}, each averaged over videos.
    pub f1: Vec<f64>,
    pub f1_thresholds: Vec<f64>,
    pub per_video: Vec<VideoMetrics>,
}

impl DatasetReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("video_id,frames,acc,edit");
        for k in &self.f1_thresholds {
            out.push_str(&format!(",f1@{k}"));
        }
        out.push('\n');
        for v in &self.per_video {
            out.push_str(&format!("{},{},{:.4},{:.4}", v.video_id, v.frames, v.acc, v.edit));
            for f in &v.f1 {
                out.push_str(&format!(",{f:.4}"));
            }
            out.push('\n');
        }
        out.push_str(&format!("__overall__,,{:.4},{:.4}", self.acc, self.edit));
        for f in &self.f1 {
            out.push_str(&format!(",{f:.4}"));
        }
        out.push('\n');
        out
    }
}

pub const DEFAULT_F1_THRESHOLDS: [f64; 3] = [10.0, 25.0, 50.0];

/// Evaluate label sequences per video. `keep_background` controls whether
/// background segments enter the Edit/F1 segment lists.
pub fn evaluate_labelings(
    videos: &BTreeMap<String, (Vec<usize>, Vec<usize>)>,
    f1_thresholds: &[f64],
    keep_background: bool,
) -> Result<DatasetReport> {
    let mut per_video = Vec::new();
    let mut match_frames = 0usize;
    let mut total_frames = 0usize;
    for (id, (pred, gt)) in videos {
        let acc = framewise_accuracy(pred, gt)?;
        let pseg = metric_segments(pred, keep_background);
        let gseg = metric_segments(gt, keep_background);
        let edit = edit_score(&pseg, &gseg);
        let f1: Vec<f64> = f1_thresholds
            .iter()
            .map(|&k| f1_at_k(&pseg, &gseg, k))
            .collect();
        match_frames += pred.iter().zip(gt).filter(|(a, b)| a == b).count();
        total_frames += pred.len();
        per_video.push(VideoMetrics {
            video_id: id.clone(),
            acc,
            edit,
            f1,
            frames: pred.len(),
        });
    }
    if per_video.is_empty() {
        return Err(Error::Data("evaluate_labelings: no videos".into()));
    }
    let nv = per_video.len() as f64;
    Ok(DatasetReport {
        acc: 100.0 * match_frames as f64 / total_frames.max(1) as f64,
        edit: per_video.iter().map(|v| v.edit).sum::<f64>() / nv,
        f1: (0..f1_thresholds.len())
            .map(|i| per_video.iter().map(|v| v.f1[i]).sum::<f64>() / nv)
            .collect(),
        f1_thresholds: f1_thresholds.to_vec(),
        per_video,
    })
}

// ---------------------------------------------------------------------------
// Label files: plain text, one class name per line per frame, plus a
// class-list mapping file ("<index> <name>" per line).
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ClassMap {
    names: Vec<String>,
    indices: BTreeMap<String, usize>,
}

impl ClassMap {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut indices = BTreeMap::new();
        for (i, n) in names.iter().enumerate() {
            if indices.insert(n.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate class name {n}")));
            }
        }
        Ok(ClassMap { names, indices })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, idx: usize) -> Result<&str> {
        self.names
            .get(idx)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Data(format!("class index {idx} out of range")))
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.indices.get(name).copied()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for (i, n) in self.names.iter().enumerate() {
            s.push_str(&format!("{i} {n}\n"));
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut names = Vec::new();
        for (lineno, line) in s.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (idx, name) = line.split_once(' ').ok_or_else(|| {
                Error::format(path, format!("line {}: expected '<index> <name>'", lineno + 1))
            })?;
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::format(path, format!("line {}: bad index", lineno + 1)))?;
            if idx != names.len() {
                return Err(Error::format(
                    path,
                    format!("line {}: indices must be dense and ascending", lineno + 1),
                ));
            }
            names.push(name.to_string());
        }
        ClassMap::new(names)
    }
}

/// Read a per-frame label file (one class name per line) into indices.
/// Unknown names are reported with the offending line.
pub fn load_label_file(path: &Path, classes: &ClassMap) -> Result<Vec<usize>> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut unknown: Vec<String> = Vec::new();
    for line in s.lines() {
        let name = line.trim();
        if name.is_empty() {
            continue;
        }
        match classes.index(name) {
            Some(i) => out.push(i),
            None => {
                if !unknown.contains(&name.to_string()) {
                    unknown.push(name.to_string());
                }
            }
        }
    }
    if !unknown.is_empty() {
        return Err(Error::format(
            path,
            format!("unknown class names: {}", unknown.join(", ")),
        ));
    }
    Ok(out)
}

pub fn save_label_file(path: &Path, labels: &[usize], classes: &ClassMap) -> Result<()> {
    let mut s = String::with_capacity(labels.len() * 8);
    for &l in labels {
        s.push_str(classes.name(l)?);
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Evaluate a directory of predicted label files against ground truth.
/// Video ids come from the ground-truth file names; a missing prediction
/// is an error listing every absent id.
pub fn evaluate_dataset(
    pred_dir: &Path,
    gt_dir: &Path,
    classes: &ClassMap,
    f1_thresholds: &[f64],
    keep_background: bool,
) -> Result<DatasetReport> {
    let mut ids: Vec<String> = Vec::new();
    for entry in fs::read_dir(gt_dir).map_err(|e| Error::io(gt_dir, e))? {
        let entry = entry.map_err(|e| Error::io(gt_dir, e))?;
        let path = entry.path();
        if path.extension().map(|e| e == "txt").unwrap_or(false) {
            ids.push(path.file_stem().unwrap().to_string_lossy().to_string());
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(Error::Data(format!(
            "no ground-truth label files in {}",
            gt_dir.display()
        )));
    }
    let missing: Vec<String> = ids
        .iter()
        .filter(|id| !pred_dir.join(format!("{id}.txt")).exists())
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "missing predictions for: {}",
            missing.join(", ")
        )));
    }
    let mut videos = BTreeMap::new();
    for id in ids {
        let gt = load_label_file(&gt_dir.join(format!("{id}.txt")), classes)?;
        let pred = load_label_file(&pred_dir.join(format!("{id}.txt")), classes)?;
        if pred.len() != gt.len() {
            return Err(Error::Data(format!(
                "{id}: {} predicted frames vs {} ground-truth frames",
                pred.len(),
                gt.len()
            )));
        }
        videos.insert(id, (pred, gt));
    }
    evaluate_labelings(&videos, f1_thresholds, keep_background)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn accuracy_hand_cases() {
        assert_eq!(framewise_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 100.0);
        assert_eq!(framewise_accuracy(&[1, 1], &[2, 2]).unwrap(), 0.0);
        assert_eq!(framewise_accuracy(&[1, 2], &[1, 3]).unwrap(), 50.0);
        assert!(framewise_accuracy(&[1], &[1, 2]).is_err());
    }

    fn segs(classes: &[usize]) -> Vec<Segment> {
        classes
            .iter()
            .enumerate()
            .map(|(i, &c)| Segment {
                start: i * 10,
                end: (i + 1) * 10,
                class: c,
            })
            .collect()
    }

    #[test]
    fn edit_score_hand_cases() {
        assert_eq!(edit_score(&segs(&[1, 2, 3]), &segs(&[1, 2, 3])), 100.0);
        // ABC vs AC: one deletion over max length 3
        let v = edit_score(&segs(&[1, 2, 3]), &segs(&[1, 3]));
        assert!((v - 100.0 * (1.0 - 1.0 / 3.0)).abs() < 1e-12);
        assert!((v - 66.67).abs() < 0.01);
        assert_eq!(edit_score(&[], &[]), 100.0);
        assert_eq!(edit_score(&segs(&[1]), &[]), 0.0);
    }

    #[test]
    fn edit_score_matches_independent_dp_on_random_sequences() {
        // second, independently written Levenshtein (full-matrix recursion)
        fn reference(a: &[usize], b: &[usize]) -> usize {
            let mut dp = vec![vec![0usize; b.len() + 1]; a.len() + 1];
            for (i, row) in dp.iter_mut().enumerate() {
                row[0] = i;
            }
            for j in 0..=b.len() {
                dp[0][j] = j;
            }
            for i in 1..=a.len() {
                for j in 1..=b.len() {
                    dp[i][j] = if a[i - 1] == b[j - 1] {
                        dp[i - 1][j - 1]
                    } else {
                        1 + dp[i - 1][j - 1].min(dp[i - 1][j]).min(dp[i][j - 1])
                    };
                }
            }
            dp[a.len()][b.len()]
        }
        let mut rng = crate::tensor::Rng::new(3);
        for _ in 0..1000 {
            let la = rng.below(12);
            let lb = rng.below(12);
            let a: Vec<usize> = (0..la).map(|_| rng.below(4)).collect();
            let b: Vec<usize> = (0..lb).map(|_| rng.below(4)).collect();
            assert_eq!(levenshtein(&a, &b), reference(&a, &b), "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn f1_hand_cases() {
        // exact segmentation
        let gt = segs(&[1, 2, 1]);
        for k in [10.0, 25.0, 50.0] {
            assert_eq!(f1_at_k(&gt, &gt, k), 100.0);
        }
        // GT [0,10) class A, pred [0,8): IoU 0.8 >= 0.5
        let gt = vec![Segment { start: 0, end: 10, class: 1 }];
        let pred = vec![Segment { start: 0, end: 8, class: 1 }];
        assert_eq!(f1_at_k(&pred, &gt, 50.0), 100.0);

        // prediction splits one GT segment into two same-class pieces:
        // one TP, one FP -> F1 = 2*(1/2)/(3/2) = 66.67
        let pred = vec![
            Segment { start: 0, end: 5, class: 1 },
            Segment { start: 5, end: 10, class: 1 },
        ];
        let v = f1_at_k(&pred, &gt, 10.0);
        assert!((v - 200.0 / 3.0).abs() < 1e-9, "{v}");

        // empty conventions
        assert_eq!(f1_at_k(&[], &[], 50.0), 100.0);
        assert_eq!(f1_at_k(&pred, &[], 50.0), 0.0);
        assert_eq!(f1_at_k(&[], &gt, 50.0), 0.0);
    }

    #[test]
    fn f1_matches_reference_greedy_matcher_on_random_inputs() {
        // reference: same contract, written as explicit set bookkeeping
        fn reference(pred: &[Segment], gt: &[Segment], thr: f64) -> f64 {
            if pred.is_empty() && gt.is_empty() {
                return 100.0;
            }
            if pred.is_empty() || gt.is_empty() {
                return 0.0;
            }
            let mut available: Vec<usize> = (0..gt.len()).collect();
            let mut tp = 0;
            for p in pred {
                let mut choices: Vec<(usize, f64)> = available
                    .iter()
                    .map(|&gi| (gi, frame_iou(p, &gt[gi])))
                    .filter(|&(gi, iou)| gt[gi].class == p.class && iou >= thr / 100.0)
                    .collect();
                choices.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
                if let Some(&(gi, _)) = choices.first() {
                    available.retain(|&x| x != gi);
                    tp += 1;
                }
            }
            let p = tp as f64 / pred.len() as f64;
            let r = tp as f64 / gt.len() as f64;
            if p + r == 0.0 {
                0.0
            } else {
                100.0 * 2.0 * p * r / (p + r)
            }
        }
        let mut rng = crate::tensor::Rng::new(8);
        for _ in 0..300 {
            let t = 30 + rng.below(50);
            let labels_p: Vec<usize> = (0..t).map(|_| rng.below(4)).collect();
            let labels_g: Vec<usize> = (0..t).map(|_| rng.below(4)).collect();
            let pred = metric_segments(&labels_p, false);
            let gt = metric_segments(&labels_g, false);
            for k in [10.0, 25.0, 50.0] {
                let a = f1_at_k(&pred, &gt, k);
                let b = reference(&pred, &gt, k);
                assert!((a - b).abs() < 1e-12, "k={k}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn dataset_evaluation_files_and_missing_ids() {
        let dir = tempfile::tempdir().unwrap();
        let gt_dir = dir.path().join("gt");
        let pred_dir = dir.path().join("pred");
        fs::create_dir_all(&gt_dir).unwrap();
        fs::create_dir_all(&pred_dir).unwrap();
        let classes =
            ClassMap::new(vec!["background".into(), "pour".into(), "cut".into()]).unwrap();
        let labels = vec![0usize, 1, 1, 1, 2, 2, 0];
        save_label_file(&gt_dir.join("v0.txt"), &labels, &classes).unwrap();
        save_label_file(&gt_dir.join("v1.txt"), &labels, &classes).unwrap();

        // missing predictions listed by id
        let err = evaluate_dataset(&pred_dir, &gt_dir, &classes, &DEFAULT_F1_THRESHOLDS, false)
            .unwrap_err()
            .to_string();
        assert!(err.contains("v0") && err.contains("v1"), "{err}");

        save_label_file(&pred_dir.join("v0.txt"), &labels, &classes).unwrap();
        save_label_file(&pred_dir.join("v1.txt"), &labels, &classes).unwrap();
        let rep =
            evaluate_dataset(&pred_dir, &gt_dir, &classes, &DEFAULT_F1_THRESHOLDS, false).unwrap();
        assert_eq!(rep.acc, 100.0);
        assert_eq!(rep.edit, 100.0);
        assert!(rep.f1.iter().all(|&v| v == 100.0));
        assert_eq!(rep.per_video.len(), 2);

        // label round trip with class names
        let loaded = load_label_file(&gt_dir.join("v0.txt"), &classes).unwrap();
        assert_eq!(loaded, labels);

        // unknown class names are listed
        fs::write(pred_dir.join("v0.txt"), "pour\nmystery\n").unwrap();
        let err = load_label_file(&pred_dir.join("v0.txt"), &classes)
            .unwrap_err()
            .to_string();
        assert!(err.contains("mystery"), "{err}");

        let cpath = dir.path().join("classes.txt");
        classes.save(&cpath).unwrap();
        let reloaded = ClassMap::load(&cpath).unwrap();
        assert_eq!(reloaded.names(), classes.names());
    }

    proptest! {
        #[test]
        fn rle_roundtrip(labels in proptest::collection::vec(0usize..5, 1..200)) {
            let segs = segments_from_labels(&labels);
            // contiguity and class alternation
            prop_assert_eq!(segs[0].start, 0);
            prop_assert_eq!(segs.last().unwrap().end, labels.len());
            for w in segs.windows(2) {
                prop_assert_eq!(w[0].end, w[1].start);
                prop_assert_ne!(w[0].class, w[1].class);
            }
            prop_assert_eq!(labels_from_segments(&segs), labels);
        }

        #[test]
        fn metrics_invariant_under_integer_upsampling(
            pred in proptest::collection::vec(0usize..4, 5..60),
            gt_seed in 0u64..1000,
            factor in 2usize..5,
        ) {
            let mut rng = crate::tensor::Rng::new(gt_seed);
            let gt: Vec<usize> = (0..pred.len()).map(|_| rng.below(4)).collect();
            let up = |xs: &[usize]| -> Vec<usize> {
                xs.iter().flat_map(|&x| std::iter::repeat(x).take(factor)).collect()
            };
            let (pu, gu) = (up(&pred), up(&gt));

            let acc0 = framewise_accuracy(&pred, &gt).unwrap();
            let acc1 = framewise_accuracy(&pu, &gu).unwrap();
            prop_assert!((acc0 - acc1).abs() < 1e-9);

            let e0 = edit_score(&metric_segments(&pred, false), &metric_segments(&gt, false));
            let e1 = edit_score(&metric_segments(&pu, false), &metric_segments(&gu, false));
            prop_assert!((e0 - e1).abs() < 1e-9);

            for k in [10.0, 25.0, 50.0] {
                let f0 = f1_at_k(&metric_segments(&pred, false), &metric_segments(&gt, false), k);
                let f1v = f1_at_k(&metric_segments(&pu, false), &metric_segments(&gu, false), k);
                prop_assert!((f0 - f1v).abs() < 1e-9, "k={}: {} vs {}", k, f0, f1v);
            }
        }

        #[test]
        fn f1_non_increasing_in_k_and_all_metrics_bounded(
            (pred, gt) in (5usize..80).prop_flat_map(|len| {
                (
                    proptest::collection::vec(0usize..4, len),
                    proptest::collection::vec(0usize..4, len),
                )
            }),
        ) {
            let ps = metric_segments(&pred, false);
            let gs = metric_segments(&gt, false);
            let mut last = f64::INFINITY;
            for k in [10.0, 25.0, 50.0, 75.0, 90.0] {
                let v = f1_at_k(&ps, &gs, k);
                prop_assert!((0.0..=100.0).contains(&v));
                prop_assert!(v <= last + 1e-12);
                last = v;
            }
            let e = edit_score(&ps, &gs);
            prop_assert!((0.0..=100.0).contains(&e));
            let a = framewise_accuracy(&pred, &gt).unwrap();
            prop_assert!((0.0..=100.0).contains(&a));
        }
    }
}
