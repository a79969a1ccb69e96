from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .geometry import (
    Assignment,
    assign_targets,
    decode_box,
    decode_boxes,
    encode_box,
    encode_boxes,
    generate_anchors,
    iou,
    iou_matrix,
    nms,
)
from .model import (
    ArchConfig,
    Detection,
    DetectorModel,
    architecture_signature,
    build_model,
    forward_train,
    parameter_count,
    predict,
    roi_pool,
)

__all__ = [
    "Checkpoint",
    "load_checkpoint",
    "save_checkpoint",
    "Assignment",
    "assign_targets",
    "decode_box",
    "decode_boxes",
    "encode_box",
    "encode_boxes",
    "generate_anchors",
    "iou",
    "iou_matrix",
    "nms",
    "ArchConfig",
    "Detection",
    "DetectorModel",
    "architecture_signature",
    "build_model",
    "forward_train",
    "parameter_count",
    "predict",
    "roi_pool",
]
