"""Evaluation primitives: IoU, luminance PSNR, NMS, average precision.

Boxes are center-size (x, y, w, h) throughout. All functions are pure; the
pooled AP sweep sorts detections by (score desc, scene index, detection index)
so results never depend on evaluation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# serialized stand-in for an infinite PSNR (zero MSE)
PSNR_SENTINEL_DB = 999.0

# BT.601 luminance weights
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class Detection:
    """A scored class-agnostic box, center-size coordinates."""
    box: tuple[float, float, float, float]
    score: float


@dataclass(frozen=True)
class EvalReport:
    ap50: float
    ap70: float
    recall50: float
    n_scenes: int
    n_truths: int
    n_detections: int


def _corners(boxes: np.ndarray) -> np.ndarray:
    """(N,4) center-size -> (N,4) x0,y0,x1,y1."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    half = b[:, 2:4] / 2.0
    return np.concatenate([b[:, 0:2] - half, b[:, 0:2] + half], axis=1)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (N,4) vs (M,4) center-size boxes -> (N,M)."""
    ca, cb = _corners(a), _corners(b)
    x0 = np.maximum(ca[:, None, 0], cb[None, :, 0])
    y0 = np.maximum(ca[:, None, 1], cb[None, :, 1])
    x1 = np.minimum(ca[:, None, 2], cb[None, :, 2])
    y1 = np.minimum(ca[:, None, 3], cb[None, :, 3])
    inter = np.clip(x1 - x0, 0.0, None) * np.clip(y1 - y0, 0.0, None)
    area_a = (ca[:, 2] - ca[:, 0]) * (ca[:, 3] - ca[:, 1])
    area_b = (cb[:, 2] - cb[:, 0]) * (cb[:, 3] - cb[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0.0)
    return out


def iou(a, b) -> float:
    """IoU of two center-size boxes; degenerate zero-area union gives 0."""
    a = _box_tuple(a)
    b = _box_tuple(b)
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def _box_tuple(b) -> tuple[float, float, float, float]:
    if hasattr(b, "x"):
        return (b.x, b.y, b.w, b.h)
    x, y, w, h = b
    return (float(x), float(y), float(w), float(h))


def psnr_luminance(reference: np.ndarray, candidate: np.ndarray) -> float:
    """PSNR in dB between the BT.601 luminance channels of two RGB images.

    Returns math.inf for identical luminance; serialize that via
    PSNR_SENTINEL_DB.
    """
    ref = np.asarray(reference, dtype=np.float64)
    cand = np.asarray(candidate, dtype=np.float64)
    if ref.shape != cand.shape:
        raise ValueError(f"psnr: shape mismatch {ref.shape} vs {cand.shape}")
    y_ref = ref @ _LUMA
    y_cand = cand @ _LUMA
    mse = float(np.mean((y_ref - y_cand) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / mse)


def psnr_for_output(value: float) -> float:
    """Map the +inf sentinel to 999 dB for serialized reports."""
    return PSNR_SENTINEL_DB if math.isinf(value) else value


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float = 0.5) -> list[int]:
    """Greedy descending-score suppression; suppress at IoU > threshold.

    Score ties break toward the earlier index. Returns kept indices in
    descending score order.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"nms: threshold must be in (0, 1], got {iou_threshold}")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    n = len(scores)
    if n == 0:
        return []
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    ious = iou_matrix(boxes, boxes)
    kept: list[int] = []
    for i in order:
        if all(ious[i, j] <= iou_threshold for j in kept):
            kept.append(i)
    return kept


def nms(detections: list[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    if not detections:
        return []
    boxes = np.array([d.box for d in detections])
    scores = np.array([d.score for d in detections])
    return [detections[i] for i in nms_indices(boxes, scores, iou_threshold)]


def _match_sweep(detections_per_scene, truths_per_scene, iou_threshold):
    """Global descending-score sweep with greedy per-scene matching.

    Returns (tp flags, total truths) in sweep order. Each detection matches
    the highest-IoU still-unmatched truth in its scene; a match needs
    IoU >= threshold.
    """
    if len(detections_per_scene) != len(truths_per_scene):
        raise ValueError("detections and truths must align per scene")
    total_truths = 0
    pool = []  # (-score, scene_idx, det_idx, box)
    truth_arrays = []
    for s, (dets, truths) in enumerate(zip(detections_per_scene, truths_per_scene)):
        tboxes = np.array([_box_tuple(t) for t in truths], dtype=np.float64).reshape(-1, 4)
        truth_arrays.append(tboxes)
        total_truths += len(tboxes)
        for k, det in enumerate(dets):
            if isinstance(det, Detection):
                pool.append((-det.score, s, k, det.box))
            else:
                box, score = det
                pool.append((-float(score), s, k, _box_tuple(box)))
    if total_truths == 0:
        raise ValueError("average precision undefined: zero ground-truth boxes")
    pool.sort(key=lambda row: row[:3])
    matched = [np.zeros(len(t), dtype=bool) for t in truth_arrays]
    tp = np.zeros(len(pool), dtype=bool)
    for idx, (_, s, _, box) in enumerate(pool):
        truths = truth_arrays[s]
        if len(truths) == 0:
            continue
        ious = iou_matrix(np.array([box]), truths)[0]
        ious[matched[s]] = -1.0
        best = int(np.argmax(ious))
        if ious[best] >= iou_threshold:
            matched[s][best] = True
            tp[idx] = True
    return tp, total_truths


def average_precision(detections_per_scene, truths_per_scene,
                      iou_threshold: float) -> float:
    """All-point (continuous) class-agnostic AP.

    Precision is integrated over recall using the running-max precision
    envelope; duplicate detections of one truth count as false positives.
    """
    tp, total_truths = _match_sweep(detections_per_scene, truths_per_scene,
                                    iou_threshold)
    if len(tp) == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(~tp)
    recall = cum_tp / total_truths
    precision = cum_tp / (cum_tp + cum_fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * envelope))


def recall_at(detections_per_scene, truths_per_scene, iou_threshold: float) -> float:
    tp, total_truths = _match_sweep(detections_per_scene, truths_per_scene,
                                    iou_threshold)
    return float(tp.sum() / total_truths)


def evaluate(model, scenes, perturbations=None, top_k: int = 50,
             nms_threshold: float = 0.5) -> EvalReport:
    """Score a model over scenes, optionally after adding perturbations.

    Per scene: clip(image + perturbation) -> forward -> decode -> clip boxes
    to image bounds -> NMS -> top_k by score; detections are pooled into
    AP@0.5, AP@0.7 and recall@0.5.
    """
    from .attack import apply_perturbation
    from .rpn import forward

    dets_per_scene = []
    truths_per_scene = []
    n_truths = 0
    n_dets = 0
    for i, scene in enumerate(scenes):
        image = scene.image
        if perturbations is not None:
            pert = perturbations[i]
            if pert is not None:
                image = apply_perturbation(image, pert)
        out = forward(model, image)
        boxes = out.decoded.copy()
        h, w = scene.image.shape[:2]
        _clip_boxes(boxes, w, h)
        scores = out.scores.values
        kept = nms_indices(boxes, scores, nms_threshold)[:top_k]
        dets = [(tuple(boxes[j]), float(scores[j])) for j in kept]
        dets_per_scene.append(dets)
        truths_per_scene.append(scene.truth.boxes)
        n_truths += len(scene.truth.boxes)
        n_dets += len(dets)
    return EvalReport(
        ap50=average_precision(dets_per_scene, truths_per_scene, 0.5),
        ap70=average_precision(dets_per_scene, truths_per_scene, 0.7),
        recall50=recall_at(dets_per_scene, truths_per_scene, 0.5),
        n_scenes=len(dets_per_scene),
        n_truths=n_truths,
        n_detections=n_dets,
    )


def _clip_boxes(boxes: np.ndarray, width: float, height: float) -> None:
    """Clip center-size boxes to image bounds, in place."""
    c = _corners(boxes)
    c[:, 0::2] = np.clip(c[:, 0::2], 0.0, width)
    c[:, 1::2] = np.clip(c[:, 1::2], 0.0, height)
    boxes[:, 0] = (c[:, 0] + c[:, 2]) / 2.0
    boxes[:, 1] = (c[:, 1] + c[:, 3]) / 2.0
    boxes[:, 2] = np.maximum(c[:, 2] - c[:, 0], 1e-6)
    boxes[:, 3] = np.maximum(c[:, 3] - c[:, 1], 1e-6)
