//! Pipeline configuration: one TOML file carrying every hyperparameter,
//! serialized losslessly and embedded into checkpoints. Unknown keys are
//! rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterKind;
use crate::aggregate::ZeroCoverage;
use crate::augment::AugmentSpec;
use crate::backbone::BackboneConfig;
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::refine::RefinerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataMode {
    /// Precomputed features on disk feed the detector directly.
    Feature,
    /// Synthetic clips run through the toy backbone (end-to-end).
    Clip,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub root: String,
    pub mode: DataMode,
    pub feature_dim: usize,
    pub num_actions: usize,
    pub fps_high: f64,
    pub fps_low: f64,
    /// Training crop / inference window length, in high-FPS frames.
    pub window_frames: usize,
    /// Fractional overlap of consecutive inference windows.
    pub window_overlap: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    /// NMS threshold applied before AP evaluation (never before aggregation).
    pub nms_iou: f64,
    pub f1_thresholds: Vec<f64>,
    pub keep_background_segments: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: vec![0.3, 0.4, 0.5, 0.6, 0.7],
            nms_iou: 0.6,
            f1_thresholds: vec![10.0, 25.0, 50.0],
            keep_background_segments: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregateConfig {
    pub zero_coverage: ZeroCoverage,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub detector: DetectorConfig,
    pub aggregate: AggregateConfig,
    pub refiner: RefinerConfig,
    pub augment: AugmentSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    /// Total classes (actions + background).
    pub fn num_classes(&self) -> usize {
        self.data.num_actions + 1
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.fps_low <= 0.0 || d.fps_high <= 0.0 || d.fps_low > d.fps_high {
            return Err(Error::Config(format!(
                "need 0 < fps_low <= fps_high, got {} and {}",
                d.fps_low, d.fps_high
            )));
        }
        if !(0.0..1.0).contains(&d.window_overlap) {
            return Err(Error::Config(format!(
                "window_overlap must be in [0, 1), got {}",
                d.window_overlap
            )));
        }
        if d.window_frames == 0 {
            return Err(Error::Config("window_frames must be positive".into()));
        }
        let expected_input = match d.mode {
            DataMode::Feature => d.feature_dim,
            DataMode::Clip => self.backbone.dim,
        };
        if self.detector.input_dim != expected_input {
            return Err(Error::Config(format!(
                "detector.input_dim ({}) must match {} ({})",
                self.detector.input_dim,
                match d.mode {
                    DataMode::Feature => "data.feature_dim",
                    DataMode::Clip => "backbone.dim",
                },
                expected_input
            )));
        }
        if self.detector.num_classes != self.num_classes() {
            return Err(Error::Config(format!(
                "detector.num_classes ({}) must equal num_actions + 1 ({})",
                self.detector.num_classes,
                self.num_classes()
            )));
        }
        if self.refiner.num_classes != self.num_classes() {
            return Err(Error::Config(format!(
                "refiner.num_classes ({}) must equal num_actions + 1 ({})",
                self.refiner.num_classes,
                self.num_classes()
            )));
        }
        self.detector.validate()?;
        self.refiner.validate()?;
        if d.mode == DataMode::Clip {
            self.backbone.validate()?;
        }
        self.augment.validate()?;
        if self.train.lr <= 0.0 {
            return Err(Error::Config(format!("lr must be positive, got {}", self.train.lr)));
        }
        if self.eval.iou_thresholds.is_empty() {
            return Err(Error::Config("eval.iou_thresholds must be non-empty".into()));
        }
        Ok(())
    }

    /// Desk-scale default wired for a synthetic feature-level dataset.
    pub fn synthetic_default(root: &str, num_actions: usize, feature_dim: usize) -> Self {
        let num_classes = num_actions + 1;
        PipelineConfig {
            data: DataConfig {
                root: root.to_string(),
                mode: DataMode::Feature,
                feature_dim,
                num_actions,
                fps_high: 15.0,
                fps_low: 3.0,
                window_frames: 768,
                window_overlap: 0.25,
            },
            backbone: BackboneConfig::default(),
            detector: DetectorConfig {
                input_dim: feature_dim,
                num_classes,
                ..DetectorConfig::default()
            },
            aggregate: AggregateConfig {
                zero_coverage: ZeroCoverage::Uniform,
            },
            refiner: RefinerConfig {
                num_classes,
                ..RefinerConfig::default()
            },
            augment: AugmentSpec::default(),
            train: TrainConfig {
                seed: 1,
                lr: 2e-4,
                stage1_epochs: 40,
                stage2_epochs: 15,
            },
            eval: EvalConfig::default(),
        }
    }

    pub fn adapter_kind(&self) -> AdapterKind {
        self.backbone.adapter.kind
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(msg) => Error::format(path, msg),
        other => other,
    })
}

pub fn parse_config(text: &str) -> Result<PipelineConfig> {
    let cfg: PipelineConfig =
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_config(path: &Path, cfg: &PipelineConfig) -> Result<()> {
    let mut text = String::from(
        "# Pipeline configuration. Every hyperparameter lives here; unknown\n# keys are rejected.\n\n",
    );
    text.push_str(&cfg.to_toml());
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_lossless() {
        let cfg = PipelineConfig::synthetic_default("data/synth", 8, 32);
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        let back = parse_config(&text).unwrap();
        assert_eq!(text, back.to_toml());
    }

    #[test]
    fn unknown_keys_rejected_and_comments_allowed() {
        let cfg = PipelineConfig::synthetic_default("d", 4, 16);
        let mut text = String::from("# a comment\n");
        text.push_str(&cfg.to_toml());
        assert!(parse_config(&text).is_ok());

        let bad = text.replace("[train]", "[train]\nmystery_knob = 3");
        let err = parse_config(&bad).unwrap_err().to_string();
        assert!(err.contains("mystery_knob"), "{err}");
    }

    #[test]
    fn cross_field_validation() {
        let mut cfg = PipelineConfig::synthetic_default("d", 4, 16);
        cfg.detector.num_classes = 99;
        assert!(cfg.validate().is_err());

        let mut cfg = PipelineConfig::synthetic_default("d", 4, 16);
        cfg.data.fps_low = 30.0; // exceeds fps_high
        assert!(cfg.validate().is_err());

        let mut cfg = PipelineConfig::synthetic_default("d", 4, 16);
        cfg.detector.input_dim = 7;
        assert!(cfg.validate().is_err());
    }
}
