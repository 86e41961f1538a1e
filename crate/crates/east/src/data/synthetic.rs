//! Synthetic dataset generation: videos with known segment structure,
//! per-frame labels at the original rate, and features (or clips) at the
//! sampled rate. Every byte on disk is a pure function of (spec, seed).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{save_features, save_sidecar, FeatureFile, FeatureSidecar};
use crate::error::{Error, Result};
use crate::metrics::ClassMap;
use crate::tensor::Rng;
use crate::types::SegmentAnnotation;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_actions: usize,
    /// Mean / std of instance duration, seconds.
    pub mean_duration: f64,
    pub std_duration: f64,
    pub instances_per_video: usize,
    pub feature_dim: usize,
    /// Noise level added to class signatures (0 = perfectly separable).
    pub noise: f64,
    pub fps_high: f64,
    pub fps_low: f64,
    pub train_videos: usize,
    pub val_videos: usize,
    /// Mean background gap between instances, seconds (half the gaps are 0).
    pub background_gap: f64,
    pub seed: u64,
    /// Also write clip files for end-to-end (backbone) training.
    pub with_clips: bool,
    /// Clip spatial extent (pixels) when `with_clips`.
    pub clip_pixels: usize,
    /// Frames consumed per feature when `with_clips` (backbone window).
    pub clip_window: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_actions: 8,
            mean_duration: 2.5,
            std_duration: 0.8,
            instances_per_video: 20,
            feature_dim: 32,
            noise: 0.25,
            fps_high: 15.0,
            fps_low: 3.0,
            train_videos: 40,
            val_videos: 10,
            background_gap: 0.6,
            seed: 1,
            with_clips: false,
            clip_pixels: 20,
            clip_window: 16,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_actions == 0 || self.instances_per_video == 0 {
            return Err(Error::Invalid("need at least one action class and instance".into()));
        }
        if self.mean_duration <= 0.0 || self.fps_high <= 0.0 || self.fps_low <= 0.0 {
            return Err(Error::Invalid("durations and frame rates must be positive".into()));
        }
        if self.fps_low > self.fps_high {
            return Err(Error::Invalid(format!(
                "fps_low ({}) must not exceed fps_high ({})",
                self.fps_low, self.fps_high
            )));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        let mut names = vec!["background".to_string()];
        for a in 0..self.num_actions {
            names.push(format!("action_{a:02}"));
        }
        names
    }
}

/// One generated video, in memory.
#[derive(Debug, Clone)]
pub struct SyntheticVideo {
    pub id: String,
    pub annotations: Vec<SegmentAnnotation>,
    /// Per-frame class indices at fps_high (0 = background).
    pub labels: Vec<usize>,
    pub features: FeatureFile,
    pub duration: f64,
}

fn class_signature(spec: &SyntheticSpec, class_index: usize) -> Vec<f64> {
    // class_index over A = actions + background(0)
    let mut rng = Rng::derive(spec.seed, &format!("signature/{class_index}"));
    (0..spec.feature_dim).map(|_| rng.normal()).collect()
}

/// Class index (0 = background) at time `t` given the annotations.
fn class_at(annotations: &[SegmentAnnotation], t: f64) -> usize {
    annotations
        .iter()
        .find(|a| a.start <= t && t < a.end)
        .map(|a| a.class_id + 1)
        .unwrap_or(0)
}

pub fn generate_video(spec: &SyntheticSpec, split: &str, index: usize) -> SyntheticVideo {
    let id = format!("{split}_{index:03}");
    let mut rng = Rng::derive(spec.seed, &format!("video/{id}"));

    // segment layout
    let mut annotations = Vec::with_capacity(spec.instances_per_video);
    let mut cursor = 0.0f64;
    let mut prev_class: Option<usize> = None;
    for _ in 0..spec.instances_per_video {
        let gap = if rng.uniform() < 0.5 {
            0.0
        } else {
            rng.range(0.5, 2.0 * spec.background_gap.max(0.25))
        };
        cursor += gap;
        let duration = rng
            .normal_scaled(spec.mean_duration, spec.std_duration)
            .max(3.0 / spec.fps_low); // at least ~3 sampled frames long
        let class = loop {
            let c = rng.below(spec.num_actions);
            if prev_class != Some(c) || spec.num_actions == 1 {
                break c;
            }
        };
        prev_class = Some(class);
        annotations.push(SegmentAnnotation {
            start: cursor,
            end: cursor + duration,
            class_id: class,
        });
        cursor += duration;
    }
    cursor += rng.range(0.3, 1.0); // trailing background

    let t_high = (cursor * spec.fps_high).ceil() as usize;
    let duration = t_high as f64 / spec.fps_high;
    let labels: Vec<usize> = (0..t_high)
        .map(|i| class_at(&annotations, (i as f64 + 0.5) / spec.fps_high))
        .collect();

    // features at fps_low: signature of the covering class + AR(1) noise
    let t_low = ((duration * spec.fps_low).round() as usize).max(1);
    let signatures: Vec<Vec<f64>> =
        (0..=spec.num_actions).map(|c| class_signature(spec, c)).collect();
    let alpha = 0.5f64;
    let mut eta = vec![0.0f64; spec.feature_dim];
    let mut data = Vec::with_capacity(t_low * spec.feature_dim);
    for i in 0..t_low {
        let t = (i as f64 + 0.5) / spec.fps_low;
        let sig = &signatures[class_at(&annotations, t)];
        for (d, e) in eta.iter_mut().enumerate() {
            *e = alpha * *e + (1.0 - alpha * alpha).sqrt() * rng.normal();
            data.push((sig[d] + spec.noise * *e) as f32);
        }
    }
    SyntheticVideo {
        id,
        annotations,
        labels,
        features: FeatureFile {
            dim: spec.feature_dim,
            fps: spec.fps_low as f32,
            data,
        },
        duration,
    }
}

pub const CLIP_MAGIC: [u8; 4] = *b"EASC";
pub const CLIP_VERSION: u32 = 1;

/// Clip file: magic, version u32, Tclip u64, H u32, W u32, fps f32, then
/// `[3, Tclip, H, W]` f32 little-endian row-major values in [0, 1].
pub fn save_clip(path: &Path, t: usize, h: usize, w: usize, fps: f32, data: &[f32]) -> Result<()> {
    if data.len() != 3 * t * h * w {
        return Err(Error::Invalid(format!(
            "clip payload {} does not match 3*{t}*{h}*{w}",
            data.len()
        )));
    }
    let mut buf = Vec::with_capacity(28 + data.len() * 4);
    buf.extend_from_slice(&CLIP_MAGIC);
    buf.extend_from_slice(&CLIP_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t as u64).to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(&fps.to_le_bytes());
    for &v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_clip(path: &Path) -> Result<(usize, usize, usize, f32, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 28 {
        return Err(Error::format(path, "truncated clip header"));
    }
    if bytes[0..4] != CLIP_MAGIC {
        return Err(Error::format(path, "bad clip magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CLIP_VERSION {
        return Err(Error::format(path, format!("unsupported clip version {version}")));
    }
    let t = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[20..24].try_into().unwrap()) as usize;
    let fps = f32::from_le_bytes(bytes[24..28].try_into().unwrap());
    let need = 3 * t * h * w * 4;
    if bytes.len() != 28 + need {
        return Err(Error::format(path, "truncated clip payload"));
    }
    let data: Vec<f32> = bytes[28..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok((t, h, w, fps, data))
}

/// Clip pixels for one video: per-class random spatial pattern plus noise,
/// `clip_window` frames per sampled feature frame.
pub fn generate_clip(spec: &SyntheticSpec, video: &SyntheticVideo) -> (usize, Vec<f32>) {
    let px = spec.clip_pixels;
    let w = spec.clip_window;
    let t_low = video.features.num_frames();
    let t_clip = t_low * w;
    let fps_clip = spec.fps_low * w as f64;
    let patterns: Vec<Vec<f64>> = (0..=spec.num_actions)
        .map(|c| {
            let mut rng = Rng::derive(spec.seed, &format!("pattern/{c}"));
            (0..3 * px * px).map(|_| rng.uniform()).collect()
        })
        .collect();
    let mut rng = Rng::derive(spec.seed, &format!("clip/{}", video.id));
    // [3, Tclip, H, W]
    let mut data = vec![0.0f32; 3 * t_clip * px * px];
    for f in 0..t_clip {
        let t = (f as f64 + 0.5) / fps_clip;
        let pat = &patterns[class_at(&video.annotations, t)];
        for c in 0..3 {
            for p in 0..px * px {
                let v = pat[c * px * px + p] + spec.noise * 0.2 * rng.normal();
                data[(c * t_clip + f) * px * px + p] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    (t_clip, data)
}

/// Write the full dataset tree:
///
/// ```text
/// root/
///   classes.txt                 index -> name
///   spec.json                   the generating spec
///   features/<id>.easf + .json  sampled-rate features + sidecar
///   labels/<id>.txt             per-frame class names at fps_high
///   annotations/<id>.json       segment annotations (seconds)
///   clips/<id>.easc             optional clip pixels
///   splits/train.txt, val.txt   one video id per line
/// ```
pub fn generate_dataset(spec: &SyntheticSpec, root: &Path) -> Result<()> {
    spec.validate()?;
    let classes = ClassMap::new(spec.class_names())?;
    for sub in ["features", "labels", "annotations", "splits"] {
        fs::create_dir_all(root.join(sub)).map_err(|e| Error::io(root.join(sub), e))?;
    }
    if spec.with_clips {
        fs::create_dir_all(root.join("clips")).map_err(|e| Error::io(root.join("clips"), e))?;
    }
    classes.save(&root.join("classes.txt"))?;
    fs::write(
        root.join("spec.json"),
        serde_json::to_string_pretty(spec).expect("spec serializes"),
    )
    .map_err(|e| Error::io(root.join("spec.json"), e))?;

    for (split, count) in [("train", spec.train_videos), ("val", spec.val_videos)] {
        let mut ids = Vec::with_capacity(count);
        for i in 0..count {
            let video = generate_video(spec, split, i);
            save_features(
                &root.join("features").join(format!("{}.easf", video.id)),
                &video.features,
            )?;
            save_sidecar(
                &root.join("features").join(format!("{}.json", video.id)),
                &FeatureSidecar {
                    video_id: video.id.clone(),
                    fps: spec.fps_low as f32,
                    num_frames_original: video.labels.len(),
                },
            )?;
            crate::metrics::save_label_file(
                &root.join("labels").join(format!("{}.txt", video.id)),
                &video.labels,
                &classes,
            )?;
            fs::write(
                root.join("annotations").join(format!("{}.json", video.id)),
                serde_json::to_string_pretty(&video.annotations).expect("annotations serialize"),
            )
            .map_err(|e| Error::io(root.join("annotations"), e))?;
            if spec.with_clips {
                let (t_clip, data) = generate_clip(spec, &video);
                save_clip(
                    &root.join("clips").join(format!("{}.easc", video.id)),
                    t_clip,
                    spec.clip_pixels,
                    spec.clip_pixels,
                    (spec.fps_low * spec.clip_window as f64) as f32,
                    &data,
                )?;
            }
            ids.push(video.id);
        }
        fs::write(
            root.join("splits").join(format!("{split}.txt")),
            ids.join("\n") + "\n",
        )
        .map_err(|e| Error::io(root.join("splits"), e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{metric_segments, segments_from_labels};

    fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec {
            num_actions: 4,
            instances_per_video: 6,
            feature_dim: 8,
            train_videos: 2,
            val_videos: 1,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn noiseless_features_are_nearest_centroid_separable() {
        let spec = SyntheticSpec {
            noise: 0.0,
            ..tiny_spec()
        };
        let video = generate_video(&spec, "train", 0);
        let signatures: Vec<Vec<f64>> =
            (0..=spec.num_actions).map(|c| class_signature(&spec, c)).collect();
        let f = &video.features;
        let mut correct = 0;
        for i in 0..f.num_frames() {
            let row: Vec<f64> = f.data[i * f.dim..(i + 1) * f.dim]
                .iter()
                .map(|&v| v as f64)
                .collect();
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, sig) in signatures.iter().enumerate() {
                let d: f64 = row.iter().zip(sig).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            let t = (i as f64 + 0.5) / spec.fps_low;
            if best == class_at(&video.annotations, t) {
                correct += 1;
            }
        }
        assert_eq!(correct, f.num_frames(), "nearest centroid must be perfect at zero noise");
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let spec = tiny_spec();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_dataset(&spec, d1.path()).unwrap();
        generate_dataset(&spec, d2.path()).unwrap();
        for sub in ["features", "labels", "annotations", "splits"] {
            let mut names: Vec<_> = fs::read_dir(d1.path().join(sub))
                .unwrap()
                .map(|e| e.unwrap().file_name())
                .collect();
            names.sort();
            assert!(!names.is_empty());
            for n in names {
                let a = fs::read(d1.path().join(sub).join(&n)).unwrap();
                let b = fs::read(d2.path().join(sub).join(&n)).unwrap();
                assert_eq!(a, b, "{sub}/{n:?} differs between regenerations");
            }
        }
    }

    #[test]
    fn label_files_roundtrip_to_annotations_through_rle() {
        let spec = tiny_spec();
        let video = generate_video(&spec, "val", 0);
        // RLE the frame labels, drop background, convert to seconds
        let segs = metric_segments(&video.labels, false);
        // each annotation long enough to cover at least one frame appears
        // as exactly one segment with matching class and boundaries within
        // one frame period
        let period = 1.0 / spec.fps_high;
        let mut si = 0;
        for ann in &video.annotations {
            let covers_frame = video
                .labels
                .iter()
                .enumerate()
                .any(|(i, &l)| {
                    let t = (i as f64 + 0.5) / spec.fps_high;
                    ann.start <= t && t < ann.end && l == ann.class_id + 1
                });
            if !covers_frame {
                continue;
            }
            let seg = segs[si];
            si += 1;
            assert_eq!(seg.class, ann.class_id + 1);
            let s = seg.start as f64 / spec.fps_high;
            let e = seg.end as f64 / spec.fps_high;
            assert!((s - ann.start).abs() <= period + 1e-9, "{s} vs {}", ann.start);
            assert!((e - ann.end).abs() <= period + 1e-9, "{e} vs {}", ann.end);
        }
        assert_eq!(si, segs.len());
        // full RLE round trip
        let rt = crate::metrics::labels_from_segments(&segments_from_labels(&video.labels));
        assert_eq!(rt, video.labels);
    }

    #[test]
    fn clip_roundtrip_and_shapes() {
        let spec = SyntheticSpec {
            with_clips: true,
            clip_pixels: 10,
            clip_window: 4,
            instances_per_video: 3,
            ..tiny_spec()
        };
        let video = generate_video(&spec, "train", 0);
        let (t_clip, data) = generate_clip(&spec, &video);
        assert_eq!(t_clip, video.features.num_frames() * 4);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.easc");
        save_clip(&p, t_clip, 10, 10, 12.0, &data).unwrap();
        let (t2, h2, w2, fps2, data2) = load_clip(&p).unwrap();
        assert_eq!((t2, h2, w2, fps2), (t_clip, 10, 10, 12.0));
        assert_eq!(data, data2);
    }
}
