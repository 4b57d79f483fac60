//! SSD-style detection scaffold: priors, box coding, multibox loss, NMS,
//! mAP evaluation and a small configurable network.

mod boxes;
mod loss;
mod map;
mod network;
mod nms;
mod priors;

pub use boxes::{decode_boxes, encode_boxes, iou, BBox, BoxSet, Detection};
pub use loss::{match_priors, multibox_loss, GroundTruth, MultiboxConfig, MultiboxLoss};
pub use map::{
    average_precision, detections_to_jsonl, evaluate_map, ClassAp, DetectionRecord, MapReport,
};
pub use network::{
    build_network, decode_detections, AttachedBlock, Attachment, BackboneLayer,
    DetectionHeadConfig, DetectorNet, ExtraLayer, ExtraParams, FluffSpec, InputSpec, MapSpec,
    NetCache, NetOutput, Reduce,
};
pub use nms::{nms, nms_indices, score_order, NmsConfig};
pub use priors::{generate_priors, PriorBoxSpec, PriorMap};
