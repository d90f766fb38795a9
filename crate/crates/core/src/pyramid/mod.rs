//! Multi-level detector built from relaxation blocks, plus segment decoding.

mod config;
mod decode;
mod model;
mod segment;

pub use config::PyramidConfig;
pub use decode::{decode, detections_jsonl, nms, DecodeConfig};
pub use model::{
    Detector, DetectorOutput, HeadWeights, LevelFeatures, LevelOutput, LevelPrediction, Predictions, StemWeights,
};
pub use segment::{iou, ActionSegment};
