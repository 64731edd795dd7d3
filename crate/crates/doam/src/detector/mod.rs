//! Anchor-based single-stage detector: model, matching/losses, decoding.

pub mod anchors;
pub mod boxes;
pub mod decode;
pub mod loss;
pub mod model;

pub use anchors::{grid_anchors, Anchor, AnchorSpec};
pub use boxes::{decode as decode_box, encode as encode_box, VAR_CENTER, VAR_SIZE};
pub use decode::{decode_predictions, nms, DecodeConfig, Detection};
pub use loss::{
    detection_loss, focal_loss, match_anchors, smooth_l1, ConfLoss, LossGrads, LossPair, Target,
};
pub use model::{Detector, DetectorCache, DetectorConfig, DetectorGrads, DetectorOutput};
