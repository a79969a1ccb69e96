"""Reduced two-stage (Faster R-CNN style) detector.

The backbone is a small conv stack; the three input variants differ only in
the first convolution's input channels.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..dataset import NUM_CLASSES
from ..errors import ConfigInvalid, EmptyBox, ShapeMismatch
from ..fusion import VariantKind
from . import geometry as geo

# anchors/proposals never grow more than 1000/16 times their reference box
MAX_LOG_SCALE = math.log(1000.0 / 16)


@dataclass(frozen=True)
class ArchConfig:
    widths: tuple[int, ...] = (16, 32, 64, 64)
    strides: tuple[int, ...] = (2, 2, 2, 2)
    first_kernel: int = 3
    num_classes: int = NUM_CLASSES
    anchor_scales: tuple[float, ...] = (16.0, 32.0, 64.0)
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    rpn_channels: int = 64
    roi_size: int = 7
    head_hidden: int = 128
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    head_pos_iou: float = 0.5
    head_neg_iou: float = 0.5
    rpn_batch: int = 256  # sampled anchors per image; 0 = all labelled anchors
    roi_batch: int = 128  # sampled RoIs per image; 0 = all
    roi_positive_fraction: float = 0.25
    pre_nms_top: int = 1000
    proposals_train: int = 300
    proposals_test: int = 100
    proposal_nms: float = 0.7
    output_nms: float = 0.5
    min_proposal_size: float = 1.0
    head_box_weights: tuple[float, float, float, float] = (10.0, 10.0, 5.0, 5.0)
    smooth_l1_beta: float = 1.0

    def __post_init__(self):
        if not self.widths or len(self.widths) != len(self.strides):
            raise ConfigInvalid("widths and strides must be non-empty and equally long")
        if any(w < 1 for w in self.widths) or any(s < 1 for s in self.strides):
            raise ConfigInvalid("widths and strides must be >= 1")
        if self.first_kernel < 1 or self.first_kernel % 2 == 0:
            raise ConfigInvalid("first_kernel must be a positive odd integer")
        if self.num_classes < 1 or self.roi_size < 1:
            raise ConfigInvalid("num_classes and roi_size must be >= 1")
        if not self.anchor_scales or not self.anchor_ratios:
            raise ConfigInvalid("anchor scales and ratios must be non-empty")
        if not 0 <= self.rpn_neg_iou <= self.rpn_pos_iou <= 1 or not 0 <= self.head_neg_iou <= self.head_pos_iou <= 1:
            raise ConfigInvalid("IoU thresholds must satisfy 0 <= neg <= pos <= 1")
        for name in ("widths", "strides", "anchor_scales", "anchor_ratios", "head_box_weights"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.strides))

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_scales) * len(self.anchor_ratios)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, doc: dict) -> "ArchConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(doc) - known
        if extra:
            raise ConfigInvalid(f"unknown arch config keys: {sorted(extra)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()})


@dataclass
class Detection:
    bbox: tuple[float, float, float, float]
    class_id: int
    score: float


class DetectorModel(nn.Module):
    def __init__(self, variant: VariantKind, arch: ArchConfig = ArchConfig()):
        super().__init__()
        self.variant = VariantKind(variant)
        self.arch = arch
        layers = []
        c_in = self.variant.num_channels
        for i, (w, s) in enumerate(zip(arch.widths, arch.strides)):
            k = arch.first_kernel if i == 0 else 3
            layers += [nn.Conv2d(c_in, w, k, stride=s, padding=k // 2), nn.ReLU()]
            c_in = w
        self.backbone = nn.Sequential(*layers)
        a = arch.num_anchors
        self.rpn_conv = nn.Conv2d(c_in, arch.rpn_channels, 3, padding=1)
        self.rpn_cls = nn.Conv2d(arch.rpn_channels, a * 2, 1)
        self.rpn_reg = nn.Conv2d(arch.rpn_channels, a * 4, 1)
        self.fc = nn.Linear(c_in * arch.roi_size ** 2, arch.head_hidden)
        self.cls_score = nn.Linear(arch.head_hidden, arch.num_classes + 1)
        self.bbox_pred = nn.Linear(arch.head_hidden, arch.num_classes * 4)
        for layer, std in ((self.rpn_cls, 0.01), (self.rpn_reg, 0.01), (self.cls_score, 0.01), (self.bbox_pred, 0.001)):
            nn.init.normal_(layer.weight, std=std)
            nn.init.zeros_(layer.bias)
        self._anchor_cache: dict[tuple[int, int], np.ndarray] = {}

    @property
    def first_conv(self) -> nn.Conv2d:
        return self.backbone[0]

    def anchors(self, feat_h: int, feat_w: int) -> np.ndarray:
        key = (feat_h, feat_w)
        if key not in self._anchor_cache:
            self._anchor_cache[key] = geo.generate_anchors(
                feat_w, feat_h, self.arch.total_stride, self.arch.anchor_scales, self.arch.anchor_ratios
            )
        return self._anchor_cache[key]

    def rpn(self, images: torch.Tensor):
        """Backbone features plus per-anchor RPN logits (N, A, 2) and deltas (N, A, 4)."""
        if images.ndim != 4 or images.shape[1] != self.variant.num_channels:
            raise ShapeMismatch(
                f"{self.variant.value} model expects (N, {self.variant.num_channels}, H, W), got {tuple(images.shape)}"
            )
        feats = self.backbone(images)
        n, _, h, w = feats.shape
        a = self.arch.num_anchors
        t = F.relu(self.rpn_conv(feats))
        logits = self.rpn_cls(t).view(n, a, 2, h, w).permute(0, 3, 4, 1, 2).reshape(n, h * w * a, 2)
        deltas = self.rpn_reg(t).view(n, a, 4, h, w).permute(0, 3, 4, 1, 2).reshape(n, h * w * a, 4)
        return feats, logits, deltas

    def head(self, feats: torch.Tensor, boxes: np.ndarray):
        """Class logits (R, K+1) and class-specific deltas (R, K, 4) for boxes in image pixels."""
        pooled = roi_pool(feats, torch.as_tensor(boxes / self.arch.total_stride, dtype=feats.dtype), self.arch.roi_size)
        hidden = F.relu(self.fc(pooled.flatten(1)))
        return self.cls_score(hidden), self.bbox_pred(hidden).view(-1, self.arch.num_classes, 4)


def roi_pool(features: torch.Tensor, boxes, k: int) -> torch.Tensor:
    """Max-pool each box (feature-map coordinates) into a k x k grid.

    The box is clipped to the map and split into k equal sub-intervals per
    axis; a bin covers cells ``floor(lo) .. ceil(hi) - 1``, at least one.
    ``features`` is (C, H, W); returns (R, C, k, k).
    """
    c, h, w = features.shape
    b = torch.as_tensor(boxes, dtype=torch.float64).reshape(-1, 4).detach().cpu().numpy()
    b = geo.clip_boxes(b, w, h)
    if np.any(b[:, 2] <= b[:, 0]) or np.any(b[:, 3] <= b[:, 1]):
        raise EmptyBox("RoI has no area inside the feature map")
    r0, r1 = _bin_ranges(b[:, 1], b[:, 3], k, h)  # (R, k) row ranges
    c0, c1 = _bin_ranges(b[:, 0], b[:, 2], k, w)
    # max over every contiguous row range, then every column range of those
    by_rows = _range_max(features, dim=1)  # (h(h+1)/2, C, W)
    table = _range_max(by_rows, dim=2)  # (w(w+1)/2, h(h+1)/2, C)
    rid = torch.as_tensor(_range_id(r0, r1, h))
    cid = torch.as_tensor(_range_id(c0, c1, w))
    out = table[cid[:, None, :], rid[:, :, None]]  # (R, k, k, C)
    return out.permute(0, 3, 1, 2)


def _range_max(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Stack of maxima of ``t`` over every [s, e) slice along ``dim``, ordered by (s, e)."""
    n = t.shape[dim]
    out = []
    for s in range(n):
        cur = t.select(dim, s)
        out.append(cur)
        for e in range(s + 2, n + 1):
            cur = torch.maximum(cur, t.select(dim, e - 1))
            out.append(cur)
    return torch.stack(out)


def _range_id(start: np.ndarray, end: np.ndarray, n: int) -> np.ndarray:
    # ranges starting before s: sum_{i<s} (n - i)
    return start * n - start * (start - 1) // 2 + (end - start - 1)


def _bin_ranges(lo: np.ndarray, hi: np.ndarray, k: int, size: int):
    step = (hi - lo) / k
    i = np.arange(k)
    a = lo[:, None] + i[None, :] * step[:, None]
    bnd = lo[:, None] + (i[None, :] + 1) * step[:, None]
    start = np.clip(np.floor(a), 0, size - 1).astype(np.int64)
    end = np.minimum(np.maximum(np.ceil(bnd).astype(np.int64), start + 1), size)
    return start, end


def build_model(variant, arch: ArchConfig = ArchConfig(), seed: int = 0) -> DetectorModel:
    """Randomly initialised model; identical seeds give identical weights."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return DetectorModel(VariantKind(variant), arch)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def architecture_signature(model: DetectorModel) -> dict[str, tuple[int, ...]]:
    return {name: tuple(p.shape) for name, p in model.named_parameters()}


# ---- losses ----

def smooth_l1(x: torch.Tensor, beta: float) -> torch.Tensor:
    ax = x.abs()
    return torch.where(ax < beta, 0.5 * ax ** 2 / beta, ax - 0.5 * beta)


def _sample(labels: np.ndarray, batch: int, pos_fraction: float, generator: np.random.Generator | None) -> np.ndarray:
    """Indices of labelled entries to train on; keeps all when batch is 0 or no generator."""
    pos = np.flatnonzero(labels == geo.POSITIVE)
    neg = np.flatnonzero(labels == geo.NEGATIVE)
    if batch <= 0 or generator is None:
        return np.sort(np.concatenate([pos, neg]))
    n_pos = min(len(pos), int(batch * pos_fraction))
    n_neg = min(len(neg), batch - n_pos)
    pos = generator.choice(pos, n_pos, replace=False) if n_pos < len(pos) else pos
    neg = generator.choice(neg, n_neg, replace=False) if n_neg < len(neg) else neg
    return np.sort(np.concatenate([pos, neg]))


def _proposals(model: DetectorModel, logits, deltas, anchors, height, width, top_n) -> np.ndarray:
    arch = model.arch
    obj = torch.softmax(logits.detach(), dim=-1)[:, 1].cpu().numpy().astype(np.float64)
    d = deltas.detach().cpu().numpy().astype(np.float64)
    order = np.lexsort((np.arange(len(obj)), -obj))[: arch.pre_nms_top]
    boxes = geo.clip_boxes(geo.decode_boxes(d[order], anchors[order], MAX_LOG_SCALE), width, height)
    wh = boxes[:, 2:] - boxes[:, :2]
    ok = (wh[:, 0] >= arch.min_proposal_size) & (wh[:, 1] >= arch.min_proposal_size)
    boxes, scores = boxes[ok], obj[order][ok]
    keep = geo.nms(boxes, scores, arch.proposal_nms)[:top_n]
    return boxes[keep]


def forward_train(
    model: DetectorModel,
    images: torch.Tensor,
    targets: Sequence[tuple[np.ndarray, np.ndarray]],
    proposals: Sequence[np.ndarray] | None = None,
    generator: np.random.Generator | None = None,
) -> dict[str, torch.Tensor]:
    """The four detector losses, averaged over the batch, plus their sum as ``total``.

    ``targets`` holds (boxes (G, 4) pixels, class ids (G,)) per image.
    ``proposals`` overrides the RPN-derived RoIs (ground truth is appended
    either way). Without a ``generator`` every labelled anchor/RoI is used.
    """
    arch = model.arch
    if len(targets) != images.shape[0]:
        raise ShapeMismatch(f"{images.shape[0]} images but {len(targets)} targets")
    feats, logits, deltas = model.rpn(images)
    _, _, height, width = images.shape
    anchors = model.anchors(feats.shape[2], feats.shape[3])
    zero = images.new_zeros(())
    sums = {"rpn_cls": zero, "rpn_reg": zero, "det_cls": zero, "det_reg": zero}
    weights = torch.as_tensor(arch.head_box_weights, dtype=images.dtype)

    for i, (gt_boxes, gt_classes) in enumerate(targets):
        gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
        gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)

        a = geo.assign_targets(anchors, gt_boxes, gt_classes, arch.rpn_pos_iou, arch.rpn_neg_iou)
        idx = _sample(a.labels, arch.rpn_batch, 0.5, generator)
        if len(idx):
            target = torch.as_tensor((a.labels[idx] == geo.POSITIVE).astype(np.int64))
            sums["rpn_cls"] = sums["rpn_cls"] + F.cross_entropy(logits[i, idx], target)
        pos = idx[a.labels[idx] == geo.POSITIVE]
        if len(pos):
            t = torch.as_tensor(a.deltas[pos], dtype=images.dtype)
            sums["rpn_reg"] = sums["rpn_reg"] + smooth_l1(deltas[i, pos] - t, arch.smooth_l1_beta).sum(1).mean()

        if proposals is None:
            rois = _proposals(model, logits[i], deltas[i], anchors, height, width, arch.proposals_train)
        else:
            rois = np.asarray(proposals[i], dtype=np.float64).reshape(-1, 4)
        rois = np.vstack([rois, gt_boxes])
        if len(rois) == 0:
            continue
        h = geo.assign_targets(rois, gt_boxes, gt_classes, arch.head_pos_iou, arch.head_neg_iou, force_match=False)
        ridx = _sample(h.labels, arch.roi_batch, arch.roi_positive_fraction, generator)
        if len(ridx) == 0:
            continue
        cls_logits, box_deltas = model.head(feats[i], rois[ridx])
        cls_target = np.where(h.labels[ridx] == geo.POSITIVE, h.classes[ridx] + 1, 0)
        sums["det_cls"] = sums["det_cls"] + F.cross_entropy(cls_logits, torch.as_tensor(cls_target))
        is_pos = np.flatnonzero(h.labels[ridx] == geo.POSITIVE)
        if len(is_pos):
            pred = box_deltas[torch.as_tensor(is_pos), torch.as_tensor(h.classes[ridx][is_pos])]
            t = torch.as_tensor(h.deltas[ridx][is_pos], dtype=images.dtype) * weights
            sums["det_reg"] = sums["det_reg"] + smooth_l1(pred - t, arch.smooth_l1_beta).sum(1).mean()

    n = len(targets)
    losses = {k: v / n for k, v in sums.items()}
    losses["total"] = losses["rpn_cls"] + losses["rpn_reg"] + losses["det_cls"] + losses["det_reg"]
    return losses


@torch.no_grad()
def predict(
    model: DetectorModel,
    image: torch.Tensor,
    score_threshold: float = 0.5,
    nms_threshold: float | None = None,
    max_detections: int = 100,
) -> list[Detection]:
    """Detections for one normalised (C, H, W) image, boxes clipped to the image."""
    arch = model.arch
    nms_threshold = arch.output_nms if nms_threshold is None else nms_threshold
    if image.ndim != 3:
        raise ShapeMismatch(f"expected a (C, H, W) image, got {tuple(image.shape)}")
    was_training = model.training
    model.eval()
    try:
        _, height, width = image.shape
        feats, logits, deltas = model.rpn(image[None])
        anchors = model.anchors(feats.shape[2], feats.shape[3])
        rois = _proposals(model, logits[0], deltas[0], anchors, height, width, arch.proposals_test)
        if len(rois) == 0:
            return []
        cls_logits, box_deltas = model.head(feats[0], rois)
    finally:
        model.train(was_training)
    probs = torch.softmax(cls_logits, dim=-1).double().numpy()[:, 1:]  # drop background
    d = box_deltas.double().numpy() / np.asarray(arch.head_box_weights)
    r, k = probs.shape
    boxes = geo.decode_boxes(d.reshape(-1, 4), np.repeat(rois, k, axis=0), MAX_LOG_SCALE)
    boxes = geo.clip_boxes(boxes, width, height)
    scores = probs.reshape(-1)
    classes = np.tile(np.arange(k), r)
    ok = (scores >= score_threshold) & (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    boxes, scores, classes = boxes[ok], scores[ok], classes[ok]
    keep = geo.nms(boxes, scores, nms_threshold, classes)[:max_detections]
    return [Detection(tuple(float(v) for v in boxes[j]), int(classes[j]), float(scores[j])) for j in keep]
