//! Dataset generation, loading, configuration and persistence.

mod checkpoint;
mod config;
mod dataset;
pub mod synthetic;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, LoadNotes, TrainProgress};
pub use config::{
    load_config, parse_config, save_config, AggregateConfig, DataConfig, DataMode, EvalConfig,
    PipelineConfig, TrainConfig,
};
pub use dataset::{random_crop, CroppedSample, Dataset, VideoRecord};
pub use synthetic::SyntheticSpec;
