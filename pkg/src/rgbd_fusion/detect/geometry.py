"""Box geometry for the detector: anchors, IoU, delta coding, matching, NMS.

Boxes are ``(x_min, y_min, x_max, y_max)`` float arrays in pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import NonPositiveSize, ValidationError

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


def generate_anchors(feature_w: int, feature_h: int, stride: float, scales: Sequence[float], ratios: Sequence[float]) -> np.ndarray:
    """One anchor per (cell, scale, ratio), cells row-major.

    ``ratio`` is height/width; every anchor has area ``scale**2``.
    """
    if stride < 1:
        raise ValidationError("stride must be >= 1")
    if not len(scales) or not len(ratios):
        raise ValidationError("scales and ratios must be non-empty")
    scales = np.asarray(scales, dtype=np.float64)
    ratios = np.asarray(ratios, dtype=np.float64)
    ws = (scales[:, None] / np.sqrt(ratios[None, :])).ravel()
    hs = (scales[:, None] * np.sqrt(ratios[None, :])).ravel()
    base = np.stack([-ws / 2, -hs / 2, ws / 2, hs / 2], axis=1)  # (S*R, 4)
    cy, cx = np.meshgrid((np.arange(feature_h) + 0.5) * stride, (np.arange(feature_w) + 0.5) * stride, indexing="ij")
    centers = np.stack([cx.ravel(), cy.ravel(), cx.ravel(), cy.ravel()], axis=1)  # (H*W, 4)
    return (centers[:, None, :] + base[None, :, :]).reshape(-1, 4)


def box_area(boxes: np.ndarray) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    return np.clip(b[..., 2] - b[..., 0], 0, None) * np.clip(b[..., 3] - b[..., 1], 0, None)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def iou(a, b) -> float:
    return float(iou_matrix(a, b)[0, 0])


def encode_boxes(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Deltas ``(tx, ty, tw, th)`` taking each anchor onto its box."""
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gw, gh = gt[:, 2] - gt[:, 0], gt[:, 3] - gt[:, 1]
    aw, ah = anchors[:, 2] - anchors[:, 0], anchors[:, 3] - anchors[:, 1]
    if np.any(gw <= 0) or np.any(gh <= 0) or np.any(aw <= 0) or np.any(ah <= 0):
        raise NonPositiveSize("boxes and anchors need positive width and height")
    tx = ((gt[:, 0] + gt[:, 2]) / 2 - (anchors[:, 0] + anchors[:, 2]) / 2) / aw
    ty = ((gt[:, 1] + gt[:, 3]) / 2 - (anchors[:, 1] + anchors[:, 3]) / 2) / ah
    return np.stack([tx, ty, np.log(gw / aw), np.log(gh / ah)], axis=1)


def decode_boxes(deltas: np.ndarray, anchors: np.ndarray, max_log_scale: float | None = None) -> np.ndarray:
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    aw, ah = anchors[:, 2] - anchors[:, 0], anchors[:, 3] - anchors[:, 1]
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise NonPositiveSize("anchors need positive width and height")
    tw, th = deltas[:, 2], deltas[:, 3]
    if max_log_scale is not None:
        tw, th = np.minimum(tw, max_log_scale), np.minimum(th, max_log_scale)
    cx = (anchors[:, 0] + anchors[:, 2]) / 2 + deltas[:, 0] * aw
    cy = (anchors[:, 1] + anchors[:, 3]) / 2 + deltas[:, 1] * ah
    w, h = aw * np.exp(tw), ah * np.exp(th)
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def encode_box(gt, anchor) -> tuple[float, float, float, float]:
    return tuple(float(v) for v in encode_boxes(gt, anchor)[0])


def decode_box(delta, anchor) -> tuple[float, float, float, float]:
    return tuple(float(v) for v in decode_boxes(delta, anchor)[0])


def clip_boxes(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    b = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    b[:, 0::2] = np.clip(b[:, 0::2], 0, width)
    b[:, 1::2] = np.clip(b[:, 1::2], 0, height)
    return b


@dataclass
class Assignment:
    labels: np.ndarray  # (A,) POSITIVE / NEGATIVE / IGNORE
    matched_gt: np.ndarray  # (A,) gt index for positives, -1 otherwise
    classes: np.ndarray  # (A,) gt class for positives, -1 otherwise
    deltas: np.ndarray  # (A, 4) regression targets, zero for non-positives
    max_iou: np.ndarray  # (A,)


def assign_targets(
    anchors: np.ndarray,
    gt_boxes: np.ndarray,
    gt_classes: np.ndarray,
    pos_iou: float,
    neg_iou: float,
    force_match: bool = True,
) -> Assignment:
    """Label anchors positive / negative / ignore against ground truth.

    Positive: best IoU >= ``pos_iou``, or (with ``force_match``) the
    highest-IoU anchor of some gt box, first anchor on ties, provided that
    IoU is non-zero. Negative: best IoU < ``neg_iou``. A positive anchor
    regresses toward its own best-IoU gt (first gt on ties).
    """
    if not 0 <= neg_iou <= pos_iou <= 1:
        raise ValidationError("need 0 <= neg_iou <= pos_iou <= 1")
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    n = len(anchors)
    labels = np.full(n, IGNORE, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    classes = np.full(n, -1, dtype=np.int64)
    deltas = np.zeros((n, 4))
    if len(gt_boxes) == 0:
        labels[:] = NEGATIVE
        return Assignment(labels, matched, classes, deltas, np.zeros(n))

    ious = iou_matrix(anchors, gt_boxes)  # (A, G)
    best_gt = ious.argmax(axis=1)
    max_iou = ious[np.arange(n), best_gt]
    labels[max_iou < neg_iou] = NEGATIVE
    pos = max_iou >= pos_iou
    if force_match:
        best_anchor = ious.argmax(axis=0)
        has_overlap = ious[best_anchor, np.arange(len(gt_boxes))] > 0
        pos[best_anchor[has_overlap]] = True
    labels[pos] = POSITIVE
    matched[pos] = best_gt[pos]
    classes[pos] = gt_classes[best_gt[pos]]
    if pos.any():
        deltas[pos] = encode_boxes(gt_boxes[best_gt[pos]], anchors[pos])
    return Assignment(labels, matched, classes, deltas, max_iou)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float, classes: np.ndarray | None = None) -> np.ndarray:
    """Greedy class-wise NMS; returns kept indices in descending score order.

    Equal scores keep the lower original index first. A box is suppressed
    when its IoU with a kept box of the same class exceeds the threshold.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(scores)):
        raise ValidationError("scores must be finite")
    n = len(scores)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    classes = np.zeros(n, dtype=np.int64) if classes is None else np.asarray(classes).reshape(-1)
    order = np.lexsort((np.arange(n), -scores))
    suppressed = np.zeros(n, dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        same = classes == classes[i]
        suppressed |= same & (iou_matrix(boxes[i], boxes)[0] > iou_threshold)
    return np.asarray(keep, dtype=np.int64)


def roi_bins(lo: float, hi: float, k: int, size: int) -> list[tuple[int, int]]:
    """Index ranges ``[start, end)`` of the feature cells each of ``k`` bins covers."""
    out = []
    step = (hi - lo) / k
    for i in range(k):
        a, b = lo + i * step, lo + (i + 1) * step
        start = min(max(int(math.floor(a)), 0), size - 1)
        end = min(max(int(math.ceil(b)), start + 1), size)
        out.append((start, end))
    return out
