"""Region-proposal adversarial perturbation workbench."""

from .numerics import Tape, Tensor, backward, finite_diff_check
from .rpn import (
    AnchorConfig, Box, Descriptor, GroundTruth, Proposal, RpnModel,
    TrainingConfig, decode_box, encode_box, forward, generate_anchors,
    load_checkpoint, save_checkpoint, train_rpn,
)
from .scenes import GeometryConfig, Scene, generate_dataset, generate_scene
from .attack import (
    AttackConfig, AttackTrace, Perturbation, accumulate, apply_perturbation,
    gaussian_baseline, label_loss, positive_mask, run_attack, shape_loss,
)
from .metrics import (
    Detection, EvalReport, average_precision, evaluate, iou, nms,
    psnr_luminance,
)

__all__ = [
    "AnchorConfig", "AttackConfig", "AttackTrace", "Box", "Descriptor",
    "Detection", "EvalReport", "GeometryConfig", "GroundTruth", "Perturbation",
    "Proposal", "RpnModel", "Scene", "Tape", "Tensor", "TrainingConfig",
    "accumulate", "apply_perturbation", "average_precision", "backward",
    "decode_box", "encode_box", "evaluate", "finite_diff_check", "forward",
    "gaussian_baseline", "generate_anchors", "generate_dataset",
    "generate_scene", "iou", "label_loss", "load_checkpoint", "nms",
    "positive_mask", "psnr_luminance", "run_attack", "save_checkpoint",
    "shape_loss", "train_rpn",
]
