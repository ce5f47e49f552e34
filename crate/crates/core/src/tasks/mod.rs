//! Desk-scale two-task benchmark: scene generation, losses and metrics.

mod loss;
mod metrics;
mod scene;

use std::fs;
use std::path::Path;

pub use loss::{
    decode_detections, decode_segmentation, det_loss, non_max_suppression, det_loss_unscaled, seg_loss, DetTargets, Detection,
    DET_BOX_CHANNELS, DET_FIXED_CHANNELS,
};
pub use metrics::{
    average_precision, combined_metric, eval_map, eval_miou, geometric_mean, MetricReport, IOU_MATCH_THRESHOLD,
};
pub use scene::{
    generate_dataset, loss_scale_preset, render_scene, BBox, BenchmarkConfig, Dataset, DetLossCoefs, Preset, Scene,
    BACKGROUND, BOX_SCALE, FIRST_OBJECT, ROAD,
};

use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "taskweigh-dataset/1";

#[derive(serde::Serialize, serde::Deserialize)]
struct DatasetFile {
    format: String,
    #[serde(flatten)]
    dataset: Dataset,
}

/// Writes the dataset as pretty JSON: `{format, config, train: [Scene], val: [Scene]}`.
pub fn export_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let file = DatasetFile {
        format: DATASET_FORMAT.to_string(),
        dataset: ds.clone(),
    };
    let text = serde_json::to_string_pretty(&file).map_err(|e| Error::Serde(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn import_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: DatasetFile = serde_json::from_str(&text).map_err(|e| Error::Serde(e.to_string()))?;
    if file.format != DATASET_FORMAT {
        return Err(Error::Serde(format!("unsupported dataset format `{}`", file.format)));
    }
    Ok(file.dataset)
}
