pub mod checkpoint;
pub mod grid;
pub mod io;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod patch;
pub mod tensor;
pub mod training;
pub mod volume;

pub use checkpoint::{Checkpoint, CheckpointError, LoadOptions};
pub use grid::Grid;
pub use labels::{LabelEntry, LabelError, LabelTable, NUM_CLASSES};
pub use metrics::{CaseReport, MetricsError, RegionMetrics, ReportTable};
pub use model::{ModelConfig, ModelError, Network, SkipFusion};
pub use patch::{PatchError, PatchGrid, PatchModel, PatchPlan, Segmentation, PATCH_SIZE, PATCH_STRIDE};
pub use tensor::{FeatureMap, Matrix};
pub use training::{TrainConfig, TrainError, TrainState, TrainingCase};
pub use volume::{ConformedVolume, CropFrame, Geometry, IntensityVolume, LabelVolume, ResampleReport, Volume, VolumeError};
