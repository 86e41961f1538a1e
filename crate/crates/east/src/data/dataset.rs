//! Dataset access: split files, lazy per-video loading, and training-time
//! random crops.

use std::fs;
use std::path::{Path, PathBuf};

use crate::backbone::{load_features, load_sidecar, FeatureFile};
use crate::error::{Error, Result};
use crate::metrics::ClassMap;
use crate::tensor::Rng;
use crate::types::{validate_annotations, SegmentAnnotation};

#[derive(Debug, Clone)]
pub struct VideoRecord {
    pub id: String,
    pub features: FeatureFile,
    /// Per-frame class indices at fps_high.
    pub labels: Vec<usize>,
    pub annotations: Vec<SegmentAnnotation>,
    pub num_frames_original: usize,
}

impl VideoRecord {
    pub fn sampled_timestamps(&self) -> Vec<f64> {
        self.features.timestamps()
    }
}

pub struct Dataset {
    pub root: PathBuf,
    pub ids: Vec<String>,
    pub classes: ClassMap,
}

impl Dataset {
    /// Open a dataset root with the given split file (one video id per
    /// line; blank lines ignored).
    pub fn open(root: &Path, split: &str) -> Result<Dataset> {
        let split_path = root.join("splits").join(format!("{split}.txt"));
        let text = fs::read_to_string(&split_path).map_err(|e| Error::io(&split_path, e))?;
        let ids: Vec<String> = text
            .lines()
            .map(|l| l.trim().to_string())
            .filter(|l| !l.is_empty())
            .collect();
        if ids.is_empty() {
            return Err(Error::Data(format!("split file {} lists no videos", split_path.display())));
        }
        let classes = ClassMap::load(&root.join("classes.txt"))?;
        Ok(Dataset {
            root: root.to_path_buf(),
            ids,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn load(&self, index: usize) -> Result<VideoRecord> {
        let id = &self.ids[index];
        self.load_id(id)
    }

    pub fn load_id(&self, id: &str) -> Result<VideoRecord> {
        let fpath = self.root.join("features").join(format!("{id}.easf"));
        let features = load_features(&fpath)?;
        let sidecar = load_sidecar(&self.root.join("features").join(format!("{id}.json")))?;
        let labels =
            crate::metrics::load_label_file(&self.root.join("labels").join(format!("{id}.txt")), &self.classes)?;
        let apath = self.root.join("annotations").join(format!("{id}.json"));
        let ann_text = fs::read_to_string(&apath).map_err(|e| Error::io(&apath, e))?;
        let annotations: Vec<SegmentAnnotation> = serde_json::from_str(&ann_text)
            .map_err(|e| Error::format(&apath, e.to_string()))?;
        let annotations = validate_annotations(&annotations)?;
        if labels.len() != sidecar.num_frames_original {
            return Err(Error::Data(format!(
                "{id}: {} label lines vs {} frames in sidecar",
                labels.len(),
                sidecar.num_frames_original
            )));
        }
        Ok(VideoRecord {
            id: id.to_string(),
            features,
            labels,
            annotations,
            num_frames_original: sidecar.num_frames_original,
        })
    }

    pub fn clip_path(&self, id: &str) -> PathBuf {
        self.root.join("clips").join(format!("{id}.easc"))
    }
}

/// A training sample: a window of the video, everything re-expressed
/// relative to the window start.
#[derive(Debug, Clone)]
pub struct CroppedSample {
    /// Sampled-frame feature rows inside the window.
    pub features: Vec<f32>,
    pub feature_dim: usize,
    /// Timestamps of those rows, shifted so the window starts at 0.
    pub timestamps: Vec<f64>,
    /// High-FPS labels inside the window.
    pub labels: Vec<usize>,
    /// Annotations clipped to the window, shifted to window time.
    pub annotations: Vec<SegmentAnnotation>,
    /// Index range of sampled frames within the full video.
    pub sampled_range: (usize, usize),
    /// Window start time in the source video, seconds.
    pub window_start: f64,
}

/// Random crop of `window_frames` high-FPS frames (the whole video when it
/// is shorter). The sampled-feature window is every feature whose center
/// falls inside the crop's time span; crops that would leave fewer than
/// `min_sampled` features are widened deterministically toward the start.
pub fn random_crop(
    record: &VideoRecord,
    fps_high: f64,
    window_frames: usize,
    min_sampled: usize,
    rng: &mut Rng,
) -> Result<CroppedSample> {
    let t_high = record.labels.len();
    let w = window_frames.min(t_high);
    let max_start = t_high - w;
    let mut start_frame = if max_start == 0 { 0 } else { rng.below(max_start + 1) };

    loop {
        let t0 = start_frame as f64 / fps_high;
        let t1 = (start_frame + w) as f64 / fps_high;
        let ts = record.sampled_timestamps();
        let lo = ts.partition_point(|&t| t < t0);
        let hi = ts.partition_point(|&t| t < t1);
        if hi - lo >= min_sampled.min(record.features.num_frames()) || start_frame == 0 {
            let dim = record.features.dim;
            let features = record.features.data[lo * dim..hi * dim].to_vec();
            let timestamps: Vec<f64> = ts[lo..hi].iter().map(|&t| t - t0).collect();
            let labels = record.labels[start_frame..start_frame + w].to_vec();
            let mut annotations = Vec::new();
            for a in &record.annotations {
                let s = a.start.max(t0);
                let e = a.end.min(t1);
                if e - s > 1e-9 {
                    annotations.push(SegmentAnnotation {
                        start: s - t0,
                        end: e - t0,
                        class_id: a.class_id,
                    });
                }
            }
            return Ok(CroppedSample {
                features,
                feature_dim: dim,
                timestamps,
                labels,
                annotations,
                sampled_range: (lo, hi),
                window_start: t0,
            });
        }
        // widen toward the start until enough sampled frames fit
        start_frame = start_frame.saturating_sub(w.max(1) / 2);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_dataset, SyntheticSpec};

    fn make_dataset() -> (tempfile::TempDir, Dataset) {
        let spec = SyntheticSpec {
            num_actions: 3,
            instances_per_video: 5,
            feature_dim: 6,
            train_videos: 2,
            val_videos: 1,
            ..SyntheticSpec::default()
        };
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&spec, dir.path()).unwrap();
        let ds = Dataset::open(dir.path(), "train").unwrap();
        (dir, ds)
    }

    #[test]
    fn split_listing_and_lazy_loading() {
        let (_dir, ds) = make_dataset();
        assert_eq!(ds.len(), 2);
        let rec = ds.load(0).unwrap();
        assert_eq!(rec.labels.len(), rec.num_frames_original);
        assert!(rec.features.num_frames() > 0);
        assert!(!rec.annotations.is_empty());
    }

    #[test]
    fn single_video_split_yields_one_item() {
        let (dir, _) = make_dataset();
        let ds = Dataset::open(dir.path(), "val").unwrap();
        assert_eq!(ds.len(), 1);
        assert!(ds.load(0).is_ok());
    }

    #[test]
    fn crop_length_and_timestamp_alignment() {
        let (_dir, ds) = make_dataset();
        let rec = ds.load(0).unwrap();
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let crop = random_crop(&rec, 15.0, 120, 4, &mut rng).unwrap();
            assert_eq!(crop.labels.len(), 120.min(rec.labels.len()));
            // every sampled timestamp sits inside the label window
            let span = crop.labels.len() as f64 / 15.0;
            for &t in &crop.timestamps {
                assert!(t >= 0.0 && t < span, "timestamp {t} outside [0, {span})");
            }
            // feature rows match the global rows they came from
            let (lo, hi) = crop.sampled_range;
            assert_eq!(crop.features.len(), (hi - lo) * crop.feature_dim);
            assert_eq!(
                &rec.features.data[lo * crop.feature_dim..hi * crop.feature_dim],
                &crop.features[..]
            );
            // crop annotations stay inside the window and keep classes
            for a in &crop.annotations {
                assert!(a.start >= -1e-9 && a.end <= span + 1e-9);
                assert!(a.start < a.end);
            }
        }
    }

    #[test]
    fn crop_of_short_video_is_whole_video() {
        let (_dir, ds) = make_dataset();
        let rec = ds.load(1).unwrap();
        let mut rng = Rng::new(6);
        let crop = random_crop(&rec, 15.0, 10_000, 4, &mut rng).unwrap();
        assert_eq!(crop.labels.len(), rec.labels.len());
        assert_eq!(crop.sampled_range, (0, rec.features.num_frames()));
        assert_eq!(crop.window_start, 0.0);
    }
}
