//! Anchor-based one-stage detection with precise box-score labels: anchor
//! geometry, IoU label assignment, losses, a small CPU convolutional
//! detector, teacher/student distillation, inference and evaluation.

pub mod assignment;
pub mod data;
pub mod distill;
mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod inference;
pub mod loss;
pub mod micronet;
pub mod num;
pub mod pipeline;

pub use assignment::{assign, decode_box, regression_targets, AnchorLabel, Assignment, LabelRule};
pub use distill::{distill_loss, distill_train, shrink_model, DistillConfig};
pub use error::{Error, Result};
pub use eval::{average_precision, evaluate, match_detections, tpr_at_fp, EvalResult};
pub use geometry::{generate_anchors, iou, AnchorConfig, BBox};
pub use inference::{decode_outputs, detect, nms, top_k, Detection, InferenceConfig};
pub use loss::LossConfig;
pub use micronet::{DetectorNet, HeadKind, NetConfig, TrainConfig, TrainParams};
