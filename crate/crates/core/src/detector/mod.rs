//! Detector assembly, head decoding, anchors and NMS.

pub mod anchors;
pub mod config;
pub mod head;
pub mod model;
pub mod nms;

pub use anchors::{kmeans_anchors, AnchorSet};
pub use config::ModelConfig;
pub use head::{decode, Detection, HeadLayout, SlotPred};
pub use model::{Detector, PostProcess};
pub use nms::nms;
