//! End-to-end orchestration: model assembly, two-stage training, sliding
//! window inference and dataset evaluation.
//!
//! Stage 1 trains the detector (and, in clip mode, the adapters through
//! the frozen backbone) on the combined focal + DIoU loss. Stage 2 adds
//! aggregation and TCN refinement with proposal-drop augmentation, jointly
//! optimizing detector and refiner. Every random choice (shuffles, crops,
//! augmentation draws) comes from a stream derived from the run seed, so
//! identical manifests give bit-identical artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::aggregate::aggregate;
use crate::augment::augmented_batches;
use crate::backbone::{Backbone, ClipBatch};
use crate::data::{
    load_checkpoint, random_crop, save_checkpoint, CroppedSample, DataMode, Dataset,
    PipelineConfig, TrainProgress, VideoRecord,
};
use crate::detector::{
    assign_targets, decode_proposals, detection_ap, detector_loss, nms, ApReport, Detector,
    DetectorOutput, PyramidSpec,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_labelings, DatasetReport};
use crate::refine::{labeling_to_tensor, Refiner};
use crate::tensor::{Adam, AdamConfig, ParamStore, Rng, Tensor};
use crate::types::{ActionProposal, FrameLabeling};

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub detector: Detector,
    pub refiner: Refiner,
    pub backbone: Option<Backbone>,
}

/// Per-video inference output.
#[derive(Debug, Clone)]
pub struct VideoInference {
    pub video_id: String,
    /// All proposals from all windows (aggregation input; no NMS).
    pub proposals: Vec<ActionProposal>,
    /// Initial per-sampled-frame labeling.
    pub y1: Vec<usize>,
    /// Aggregated full-rate distributions.
    pub aggregated: FrameLabeling,
    /// Baseline labeling: argmax of the aggregation.
    pub baseline: Vec<usize>,
    /// Refined full-rate labeling.
    pub y2: Vec<usize>,
    pub degenerate_intervals: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub metrics: DatasetReport,
    pub ap_per_iou: Vec<(f64, f64)>,
    pub map: f64,
    pub degenerate_intervals: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub stage: u32,
    pub epoch: u32,
    pub train_loss: f64,
    pub val_map: f64,
    pub val_acc: f64,
    pub val_edit: f64,
    pub val_f1: Vec<f64>,
    pub selection: f64,
}

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub epochs: Vec<EpochLog>,
    pub best_selection: f64,
    pub best_stage: u32,
    pub best_epoch: u32,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let detector = Detector::new(cfg.detector.clone())?;
        let refiner = Refiner::new(cfg.refiner.clone())?;
        let backbone = match cfg.data.mode {
            DataMode::Clip => Some(Backbone::new(cfg.backbone.clone())?),
            DataMode::Feature => None,
        };
        Ok(Pipeline {
            cfg,
            detector,
            refiner,
            backbone,
        })
    }

    /// Register every parameter. In clip mode the backbone is frozen and
    /// only its adapters train.
    pub fn register(&self, store: &mut ParamStore<f32>) -> Result<()> {
        let seed = self.cfg.train.seed;
        if let Some(bb) = &self.backbone {
            bb.register(store, seed, true)?;
        }
        self.detector.register(store, seed);
        self.refiner.register(store, seed);
        Ok(())
    }

    /// Sampled window length for detection, in feature rows.
    fn window_sampled(&self) -> usize {
        let d = &self.cfg.data;
        let min_t = 1usize << (self.cfg.detector.levels - 1);
        let w = (d.window_frames as f64 * d.fps_low / d.fps_high).round() as usize;
        w.max(min_t)
    }

    /// Features for a window of a video. Feature mode slices rows; clip
    /// mode runs the toy backbone over the matching clip frames.
    fn window_features(
        &self,
        leaves: &BTreeMap<String, Tensor<f32>>,
        record: &VideoRecord,
        clip: Option<&(usize, usize, usize, Vec<f32>)>, // (t_clip, h, w, data)
        lo: usize,
        hi: usize,
    ) -> Result<(Tensor<f32>, Vec<f64>)> {
        let ts_all = record.sampled_timestamps();
        let timestamps = ts_all[lo..hi].to_vec();
        match self.cfg.data.mode {
            DataMode::Feature => {
                let dim = record.features.dim;
                let rows: Vec<f32> = record.features.data[lo * dim..hi * dim].to_vec();
                let data: Vec<f32> = rows;
                Ok((
                    Tensor::from_vec(&[1, hi - lo, dim], data)?,
                    timestamps,
                ))
            }
            DataMode::Clip => {
                let bb = self.backbone.as_ref().expect("clip mode has a backbone");
                let (t_clip, h, w, data) = clip.ok_or_else(|| {
                    Error::Data(format!("{}: clip payload missing", record.id))
                })?;
                let wsz = bb.cfg.patch_temporal;
                let (flo, fhi) = (lo * wsz, (hi * wsz).min(*t_clip));
                let tw = fhi - flo;
                // slice [3, Tclip, H, W] along the frame axis
                let mut sliced = Vec::with_capacity(3 * tw * h * w);
                for c in 0..3 {
                    let base = (c * t_clip + flo) * h * w;
                    sliced.extend_from_slice(&data[base..base + tw * h * w]);
                }
                let fps_clip = self.cfg.data.fps_low * wsz as f64;
                let t0 = flo as f64 / fps_clip;
                let clip_ts: Vec<f64> = (0..tw)
                    .map(|i| t0 + (i as f64 + 0.5) / fps_clip)
                    .collect();
                let values = Tensor::from_vec(&[1, 3, tw, *h, *w], sliced)?;
                let batch = ClipBatch::new(values, clip_ts)?;
                let (feats, fts) = bb.features_for_clip(&batch, leaves)?;
                debug_assert_eq!(fts.len(), hi - lo);
                Ok((feats, timestamps))
            }
        }
    }

    /// Detector forward for one window; returns the differentiable output.
    fn detect_window(
        &self,
        leaves: &BTreeMap<String, Tensor<f32>>,
        features: &Tensor<f32>,
        timestamps: &[f64],
    ) -> Result<DetectorOutput<f32>> {
        let pyramid = self.detector.build_pyramid(features, timestamps, leaves)?;
        self.detector.predict(&pyramid, leaves)
    }

    fn pyramid_spec(&self) -> PyramidSpec {
        PyramidSpec {
            levels: self.cfg.detector.levels,
            base_range: self.cfg.detector.base_range,
            frame_period: 1.0 / self.cfg.data.fps_low,
        }
    }

    /// Full-video inference: 0.25-overlap sliding windows over the sampled
    /// frames, proposal sets concatenated before aggregation, then TCN
    /// refinement over the original frame rate.
    pub fn infer_video(
        &self,
        store: &ParamStore<f32>,
        record: &VideoRecord,
        clip: Option<&(usize, usize, usize, Vec<f32>)>,
    ) -> Result<VideoInference> {
        let leaves = store.leaves();
        let t_prime = record.features.num_frames();
        let win = self.window_sampled();
        let min_t = 1usize << (self.cfg.detector.levels - 1);

        // window starts with ~cfg.window_overlap fractional overlap
        let mut starts = Vec::new();
        if t_prime <= win {
            starts.push(0usize);
        } else {
            let stride =
                ((win as f64) * (1.0 - self.cfg.data.window_overlap)).round().max(1.0) as usize;
            let mut s = 0;
            while s + win < t_prime {
                starts.push(s);
                s += stride;
            }
            starts.push(t_prime - win);
            starts.dedup();
        }

        let mut proposals: Vec<ActionProposal> = Vec::new();
        let mut y1 = vec![0usize; t_prime];
        let mut best_interiority = vec![isize::MIN; t_prime];
        let mut degenerate = 0usize;
        for &s in &starts {
            let e = (s + win).min(t_prime);
            let (mut feats, mut ts) = self.window_features(&leaves, record, clip, s, e)?;
            let real = e - s;
            if real < min_t {
                // pad with zero rows; proposals from padded frames are dropped
                let dim = feats.shape()[2];
                let pad = min_t - real;
                let zeros = Tensor::zeros(&[1, pad, dim]);
                feats = Tensor::concat(&[&feats, &zeros], 1)?;
                let period = if ts.len() > 1 {
                    ts[ts.len() - 1] - ts[ts.len() - 2]
                } else {
                    1.0 / self.cfg.data.fps_low
                };
                let last = *ts.last().unwrap();
                for i in 0..pad {
                    ts.push(last + period * (i as f64 + 1.0));
                }
            }
            let out = self.detect_window(&leaves, &feats, &ts)?;
            let preds = self.detector.frame_predictions(&out)?;
            let (mut props, labels, diag) = decode_proposals(
                &preds,
                &ts,
                self.cfg.detector.confidence_includes_background,
            )?;
            degenerate += diag.degenerate_intervals;
            props.truncate(real); // drop padded frames
            for (j, p) in props.iter_mut().enumerate() {
                p.source_frame = s + j;
            }
            proposals.extend(props);
            for j in 0..real {
                let frame = s + j;
                let interiority = (j as isize).min((real - 1 - j) as isize);
                if interiority > best_interiority[frame] {
                    best_interiority[frame] = interiority;
                    y1[frame] = labels[j];
                }
            }
        }

        let t_high = record.num_frames_original;
        let aggregated = aggregate(
            &proposals,
            t_high,
            self.cfg.data.fps_high,
            self.cfg.aggregate.zero_coverage,
        )?;
        let baseline = aggregated.hard_labels();
        let dists = labeling_to_tensor::<f32>(&aggregated);
        let stage_logits = self.refiner.forward(&dists, &leaves)?;
        let y2 = Refiner::final_labels(&stage_logits);
        Ok(VideoInference {
            video_id: record.id.clone(),
            proposals,
            y1,
            aggregated,
            baseline,
            y2,
            degenerate_intervals: degenerate,
        })
    }

    fn load_clip_payload(
        &self,
        dataset: &Dataset,
        id: &str,
    ) -> Result<Option<(usize, usize, usize, Vec<f32>)>> {
        match self.cfg.data.mode {
            DataMode::Feature => Ok(None),
            DataMode::Clip => {
                let (t, h, w, _fps, data) =
                    crate::data::synthetic::load_clip(&dataset.clip_path(id))?;
                Ok(Some((t, h, w, data)))
            }
        }
    }

    /// Evaluate on a split: per-video inference (parallel, reduced in
    /// video order), label metrics plus proposal AP (class-wise NMS before
    /// ranking only).
    pub fn evaluate(&self, store: &ParamStore<f32>, dataset: &Dataset) -> Result<EvalSummary> {
        let inferences = self.infer_split(store, dataset)?;
        self.summarize(dataset, &inferences)
    }

    pub fn infer_split(
        &self,
        store: &ParamStore<f32>,
        dataset: &Dataset,
    ) -> Result<Vec<VideoInference>> {
        let ids: Vec<String> = dataset.ids.clone();
        ids.par_iter()
            .map(|id| {
                let record = dataset.load_id(id)?;
                let clip = self.load_clip_payload(dataset, id)?;
                self.infer_video(store, &record, clip.as_ref())
            })
            .collect()
    }

    pub fn summarize(
        &self,
        dataset: &Dataset,
        inferences: &[VideoInference],
    ) -> Result<EvalSummary> {
        let mut videos = BTreeMap::new();
        let mut props = BTreeMap::new();
        let mut anns = BTreeMap::new();
        let mut degenerate = 0usize;
        for inf in inferences {
            let record = dataset.load_id(&inf.video_id)?;
            videos.insert(inf.video_id.clone(), (inf.y2.clone(), record.labels.clone()));
            let kept = nms(&inf.proposals, self.cfg.eval.nms_iou);
            props.insert(
                inf.video_id.clone(),
                kept.into_iter().map(|i| inf.proposals[i].clone()).collect::<Vec<_>>(),
            );
            anns.insert(inf.video_id.clone(), record.annotations.clone());
            degenerate += inf.degenerate_intervals;
        }
        let metrics = evaluate_labelings(
            &videos,
            &self.cfg.eval.f1_thresholds,
            self.cfg.eval.keep_background_segments,
        )?;
        let ap: ApReport = detection_ap(
            &props,
            &anns,
            &self.cfg.eval.iou_thresholds,
            self.cfg.data.num_actions,
        );
        Ok(EvalSummary {
            metrics,
            ap_per_iou: ap.per_threshold,
            map: ap.map,
            degenerate_intervals: degenerate,
        })
    }

    // -- training ----------------------------------------------------------

    fn crop_to_tensors(
        &self,
        leaves: &BTreeMap<String, Tensor<f32>>,
        record: &VideoRecord,
        clip: Option<&(usize, usize, usize, Vec<f32>)>,
        crop: &CroppedSample,
    ) -> Result<(Tensor<f32>, Vec<f64>)> {
        match self.cfg.data.mode {
            DataMode::Feature => Ok((
                Tensor::from_vec(
                    &[1, crop.timestamps.len(), crop.feature_dim],
                    crop.features.clone(),
                )?,
                crop.timestamps.clone(),
            )),
            DataMode::Clip => {
                let (lo, hi) = crop.sampled_range;
                let (feats, _) = self.window_features(leaves, record, clip, lo, hi)?;
                Ok((feats, crop.timestamps.clone()))
            }
        }
    }

    fn collect_grads(
        leaves: &BTreeMap<String, Tensor<f32>>,
    ) -> BTreeMap<String, Vec<f32>> {
        leaves
            .iter()
            .filter_map(|(n, l)| l.grad().map(|g| (n.clone(), g)))
            .collect()
    }

    /// Two-stage training. Logs one CSV row per epoch to
    /// `out_dir/training_log.csv`, keeps the best checkpoint (stage-1
    /// selection: detector mAP; stage-2: mean of Acc/Edit/F1s) in
    /// `best.ckpt` and the running state in `last.ckpt`.
    pub fn train(
        &self,
        store: &mut ParamStore<f32>,
        train_set: &Dataset,
        val_set: &Dataset,
        out_dir: &Path,
        resume_from: Option<&Path>,
    ) -> Result<TrainSummary> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let cfg_text = self.cfg.to_toml();
        let seed = self.cfg.train.seed;
        let min_t = 1usize << (self.cfg.detector.levels - 1);

        // preload training videos (desk scale: everything fits)
        let mut records = Vec::with_capacity(train_set.len());
        for i in 0..train_set.len() {
            let rec = train_set.load(i)?;
            let clip = self.load_clip_payload(train_set, &rec.id)?;
            records.push((rec, clip));
        }

        let mut adam = Adam::new(AdamConfig {
            lr: self.cfg.train.lr,
            ..AdamConfig::default()
        });
        let mut start_stage = 1u32;
        let mut start_epoch = 0u32;
        if let Some(path) = resume_from {
            let ck = load_checkpoint(path)?;
            let notes = ck.apply_to(store, &cfg_text)?;
            if notes.config_differs {
                eprintln!("warning: checkpoint config differs from the current config");
            }
            adam = Adam::import(
                AdamConfig {
                    lr: self.cfg.train.lr,
                    ..AdamConfig::default()
                },
                &ck.adam
                    .iter()
                    .map(|t| (t.name.clone(), t.shape.clone(), t.data.clone()))
                    .collect::<Vec<_>>(),
            )?;
            start_stage = ck.progress.stage;
            start_epoch = ck.progress.epoch;
        }

        let mut log: Vec<EpochLog> = Vec::new();
        let mut best: Option<(f64, u32, u32, ParamStore<f32>)> = None;
        let mut log_csv = String::from(
            "stage,epoch,train_loss,val_map,val_acc,val_edit,val_f1_10,val_f1_25,val_f1_50,selection\n",
        );

        for stage in [1u32, 2u32] {
            if stage < start_stage {
                continue;
            }
            let epochs = match stage {
                1 => self.cfg.train.stage1_epochs,
                _ => self.cfg.train.stage2_epochs,
            } as u32;
            if stage == 2 && start_stage < 2 {
                // fresh optimizer state for the new objective
                adam = Adam::new(AdamConfig {
                    lr: self.cfg.train.lr,
                    ..AdamConfig::default()
                });
            }
            let first_epoch = if stage == start_stage { start_epoch } else { 0 };
            for epoch in first_epoch..epochs {
                let mut order: Vec<usize> = (0..records.len()).collect();
                Rng::derive(seed, &format!("order/{stage}/{epoch}")).shuffle(&mut order);
                let mut epoch_loss = 0.0f64;
                for &vi in &order {
                    let (record, clip) = &records[vi];
                    let mut crop_rng =
                        Rng::derive(seed, &format!("crop/{stage}/{epoch}/{}", record.id));
                    let crop = random_crop(
                        record,
                        self.cfg.data.fps_high,
                        self.cfg.data.window_frames,
                        min_t,
                        &mut crop_rng,
                    )?;
                    if crop.timestamps.len() < min_t {
                        continue; // video too short even unwindowed
                    }
                    let leaves = store.leaves();
                    let (feats, ts) = self.crop_to_tensors(&leaves, record, clip.as_ref(), &crop)?;
                    let out = self.detect_window(&leaves, &feats, &ts)?;
                    let targets = assign_targets(&crop.annotations, &ts, &self.pyramid_spec())?;
                    let det_loss = detector_loss(&self.cfg.detector, &out, &targets)?;

                    let loss = if stage == 1 {
                        det_loss
                    } else {
                        // decode (detached), augment, aggregate, refine
                        let preds = self.detector.frame_predictions(&out)?;
                        let (props, _, _) = decode_proposals(
                            &preds,
                            &ts,
                            self.cfg.detector.confidence_includes_background,
                        )?;
                        let variants = augmented_batches(
                            &props,
                            &self.cfg.augment,
                            seed,
                            &format!("{stage}/{epoch}/{}", record.id),
                        )?;
                        let mut ref_loss: Option<Tensor<f32>> = None;
                        let nvar = variants.len() as f64;
                        for (variant, _) in &variants {
                            let agg = aggregate(
                                variant,
                                crop.labels.len(),
                                self.cfg.data.fps_high,
                                self.cfg.aggregate.zero_coverage,
                            )?;
                            let dists = labeling_to_tensor::<f32>(&agg);
                            let stage_logits = self.refiner.forward(&dists, &leaves)?;
                            let l = self.refiner.refinement_loss(&stage_logits, &crop.labels)?;
                            ref_loss = Some(match ref_loss {
                                None => l,
                                Some(acc) => acc.add(&l)?,
                            });
                        }
                        let ref_loss = ref_loss
                            .expect("at least one augmentation variant")
                            .scale(1.0 / nvar);
                        det_loss.add(&ref_loss)?
                    };

                    let loss_value = loss.item() as f64;
                    if !loss_value.is_finite() {
                        let dump = serde_json::json!({
                            "stage": stage,
                            "epoch": epoch,
                            "video_id": record.id,
                            "loss": format!("{loss_value}"),
                        });
                        let _ = fs::write(
                            out_dir.join("diagnostic.json"),
                            serde_json::to_string_pretty(&dump).unwrap(),
                        );
                        return Err(Error::Numeric(format!(
                            "non-finite loss at stage {stage} epoch {epoch} video {}; diagnostic written",
                            record.id
                        )));
                    }
                    epoch_loss += loss_value;
                    loss.backward()?;
                    let grads = Self::collect_grads(&leaves);
                    adam.step(store, &grads)?;
                }
                epoch_loss /= records.len().max(1) as f64;

                let summary = self.evaluate(store, val_set)?;
                let selection = match stage {
                    1 => summary.map * 100.0,
                    _ => {
                        let m = &summary.metrics;
                        let mut vals = vec![m.acc, m.edit];
                        vals.extend(&m.f1);
                        vals.iter().sum::<f64>() / vals.len() as f64
                    }
                };
                let row = EpochLog {
                    stage,
                    epoch,
                    train_loss: epoch_loss,
                    val_map: summary.map,
                    val_acc: summary.metrics.acc,
                    val_edit: summary.metrics.edit,
                    val_f1: summary.metrics.f1.clone(),
                    selection,
                };
                log_csv.push_str(&format!(
                    "{},{},{:.6},{:.4},{:.3},{:.3},{:.3},{:.3},{:.3},{:.4}\n",
                    row.stage,
                    row.epoch,
                    row.train_loss,
                    row.val_map,
                    row.val_acc,
                    row.val_edit,
                    row.val_f1.first().copied().unwrap_or(0.0),
                    row.val_f1.get(1).copied().unwrap_or(0.0),
                    row.val_f1.get(2).copied().unwrap_or(0.0),
                    row.selection
                ));
                fs::write(out_dir.join("training_log.csv"), &log_csv)
                    .map_err(|e| Error::io(out_dir.join("training_log.csv"), e))?;

                // model selection favors stage 2: any stage-2 epoch
                // outranks stage-1 snapshots once stage 2 begins
                let replace = match &best {
                    None => true,
                    Some((best_sel, best_stage, _, _)) => {
                        stage > *best_stage || (stage == *best_stage && selection >= *best_sel)
                    }
                };
                if replace {
                    best = Some((selection, stage, epoch, store.clone()));
                }
                log.push(row);

                save_checkpoint(
                    &out_dir.join("last.ckpt"),
                    store,
                    &cfg_text,
                    Some(&adam),
                    TrainProgress {
                        stage,
                        epoch: epoch + 1,
                    },
                )?;
            }
            start_epoch = 0;
        }

        let (best_sel, best_stage, best_epoch, best_store) = best
            .ok_or_else(|| Error::Invalid("training ran zero epochs".into()))?;
        save_checkpoint(
            &out_dir.join("best.ckpt"),
            &best_store,
            &cfg_text,
            None,
            TrainProgress {
                stage: best_stage,
                epoch: best_epoch,
            },
        )?;
        *store = best_store;
        Ok(TrainSummary {
            epochs: log,
            best_selection: best_sel,
            best_stage,
            best_epoch,
        })
    }
}

/// Nearest-sampled-frame upsampling of a sampled-rate labeling to the full
/// frame rate (used to compare the initial labeling against full-rate
/// ground truth).
pub fn upsample_labels(
    sampled: &[usize],
    sampled_timestamps: &[f64],
    t_high: usize,
    fps_high: f64,
) -> Vec<usize> {
    (0..t_high)
        .map(|i| {
            let t = (i as f64 + 0.5) / fps_high;
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, &ts) in sampled_timestamps.iter().enumerate() {
                let d = (ts - t).abs();
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            sampled[best]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_dataset, SyntheticSpec};

    fn tiny_cfg(root: &str) -> PipelineConfig {
        let mut cfg = PipelineConfig::synthetic_default(root, 3, 8);
        cfg.detector.dim = 16;
        cfg.detector.heads = 2;
        cfg.detector.levels = 2;
        cfg.refiner.channels = 8;
        cfg.refiner.layers = 2;
        cfg.refiner.stages = 2;
        cfg.train.stage1_epochs = 2;
        cfg.train.stage2_epochs = 1;
        cfg.train.lr = 1e-3;
        cfg
    }

    fn tiny_dataset(dir: &Path) {
        let spec = SyntheticSpec {
            num_actions: 3,
            instances_per_video: 4,
            feature_dim: 8,
            train_videos: 3,
            val_videos: 2,
            ..SyntheticSpec::default()
        };
        generate_dataset(&spec, dir).unwrap();
    }

    #[test]
    fn smoke_train_runs_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path());
        let run = |out: &Path| -> (Vec<u8>, f64) {
            let cfg = tiny_cfg(dir.path().to_str().unwrap());
            let pipe = Pipeline::new(cfg).unwrap();
            let mut store = ParamStore::new();
            pipe.register(&mut store).unwrap();
            let train = Dataset::open(dir.path(), "train").unwrap();
            let val = Dataset::open(dir.path(), "val").unwrap();
            let summary = pipe.train(&mut store, &train, &val, out, None).unwrap();
            let ck = fs::read(out.join("best.ckpt")).unwrap();
            (ck, summary.epochs.last().unwrap().train_loss)
        };
        let o1 = dir.path().join("run1");
        let o2 = dir.path().join("run2");
        let (c1, l1) = run(&o1);
        let (c2, l2) = run(&o2);
        assert_eq!(c1, c2, "checkpoints must be bit-identical across runs");
        assert_eq!(l1.to_bits(), l2.to_bits());
        // logs identical too
        assert_eq!(
            fs::read(o1.join("training_log.csv")).unwrap(),
            fs::read(o2.join("training_log.csv")).unwrap()
        );
    }

    #[test]
    fn inference_short_video_matches_unwindowed_path() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path());
        let cfg = tiny_cfg(dir.path().to_str().unwrap());
        let pipe = Pipeline::new(cfg).unwrap();
        let mut store = ParamStore::new();
        pipe.register(&mut store).unwrap();
        let val = Dataset::open(dir.path(), "val").unwrap();
        let record = val.load(0).unwrap();
        // default window (768 high-fps frames -> ~154 sampled) exceeds the
        // video, so the windowed path is the single-window path
        let inf = pipe.infer_video(&store, &record, None).unwrap();
        assert_eq!(inf.proposals.len(), record.features.num_frames());
        assert_eq!(inf.y1.len(), record.features.num_frames());
        assert_eq!(inf.y2.len(), record.labels.len());
        for row in 0..inf.aggregated.num_frames() {
            let s: f64 = inf.aggregated.row(row).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn window_stitching_consistent_on_constant_features() {
        // constant features + untrained (uniform) heads: whole-video and
        // windowed processing agree on the aggregated labeling
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path());
        let mut cfg = tiny_cfg(dir.path().to_str().unwrap());
        cfg.data.window_frames = 60; // force several windows
        let pipe = Pipeline::new(cfg.clone()).unwrap();
        let mut store = ParamStore::new();
        pipe.register(&mut store).unwrap();
        let val = Dataset::open(dir.path(), "val").unwrap();
        let mut record = val.load(0).unwrap();
        for v in record.features.data.iter_mut() {
            *v = 0.25;
        }
        let windowed = pipe.infer_video(&store, &record, None).unwrap();

        let mut whole_cfg = cfg.clone();
        whole_cfg.data.window_frames = 100_000;
        let whole_pipe = Pipeline::new(whole_cfg).unwrap();
        let whole = whole_pipe.infer_video(&store, &record, None).unwrap();
        assert_eq!(windowed.y2, whole.y2);
        assert_eq!(windowed.baseline, whole.baseline);
    }

    #[test]
    fn resumed_training_continues_identically() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path());
        let cfg = tiny_cfg(dir.path().to_str().unwrap());
        let train = Dataset::open(dir.path(), "train").unwrap();
        let val = Dataset::open(dir.path(), "val").unwrap();

        // uninterrupted: 2 + 1 epochs
        let out_a = dir.path().join("a");
        let pipe = Pipeline::new(cfg.clone()).unwrap();
        let mut store_a = ParamStore::new();
        pipe.register(&mut store_a).unwrap();
        pipe.train(&mut store_a, &train, &val, &out_a, None).unwrap();

        // interrupted after stage 1 epoch 1 (stage1_epochs=1), then resumed
        // with the full schedule
        let out_b1 = dir.path().join("b1");
        let mut cfg_short = cfg.clone();
        cfg_short.train.stage1_epochs = 1;
        cfg_short.train.stage2_epochs = 0;
        // keep the embedded config identical for the resume comparison:
        // train with the full config but stop early via a custom run
        let pipe_short = Pipeline::new(cfg_short).unwrap();
        let mut store_b = ParamStore::new();
        pipe_short.register(&mut store_b).unwrap();
        pipe_short
            .train(&mut store_b, &train, &val, &out_b1, None)
            .unwrap();

        let out_b2 = dir.path().join("b2");
        let pipe_full = Pipeline::new(cfg).unwrap();
        let mut store_b2 = ParamStore::new();
        pipe_full.register(&mut store_b2).unwrap();
        pipe_full
            .train(
                &mut store_b2,
                &train,
                &val,
                &out_b2,
                Some(&out_b1.join("last.ckpt")),
            )
            .unwrap();

        // the resumed run ends at the same parameters as the uninterrupted
        // one (bit-exact: same streams, same optimizer moments)
        let a = fs::read(out_a.join("best.ckpt")).unwrap();
        let b = fs::read(out_b2.join("best.ckpt")).unwrap();
        assert_eq!(a, b);
    }
}
