"""Detection matching, AP / mAP@0.5, Mean Precision, run aggregation and reports."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .detect.geometry import iou_matrix
from .detect.model import Detection
from .errors import DivisionByZero, EmptyRuns, MalformedJson, NoClasses, NoGroundTruth, ValidationError

VARIANT_LABELS = {"depth": "Depth-only", "rgb": "RGB-only", "rgbd": "RGB-D"}


@dataclass
class MatchResult:
    tp: np.ndarray  # (D,) bool, per detection in the given order
    matched_gt: np.ndarray  # (D,) gt index or -1
    gt_matched: np.ndarray  # (G,) bool

    @property
    def fp(self) -> np.ndarray:
        return ~self.tp


def match_detections(det_boxes, det_scores, gt_boxes, iou_threshold: float = 0.5) -> MatchResult:
    """Greedy matching of one class in one image.

    Detections are visited by descending score (ties: lower index first); each
    claims the still-unmatched gt with the highest IoU if it reaches the
    threshold. Results are reported in the detections' input order.
    """
    if not 0 < iou_threshold <= 1:
        raise ValidationError("iou_threshold must lie in (0, 1]")
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    det_scores = np.asarray(det_scores, dtype=np.float64).reshape(-1)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    d, g = len(det_boxes), len(gt_boxes)
    tp = np.zeros(d, dtype=bool)
    matched = np.full(d, -1, dtype=np.int64)
    taken = np.zeros(g, dtype=bool)
    if d and g:
        ious = iou_matrix(det_boxes, gt_boxes)
        for i in np.lexsort((np.arange(d), -det_scores)):
            cand = np.where(taken, -1.0, ious[i])
            j = int(np.argmax(cand))
            if cand[j] >= iou_threshold:
                tp[i], matched[i], taken[j] = True, j, True
    return MatchResult(tp, matched, taken)


def average_precision(scores, tp_flags, num_gt: int, points: int = 101) -> float:
    """Interpolated AP over ``points`` evenly spaced recall levels (101 COCO-style, 11 PASCAL)."""
    if num_gt < 1:
        raise NoGroundTruth("average precision needs at least one ground-truth box")
    if points < 2:
        raise ValidationError("need at least two recall points")
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    tp = np.asarray(tp_flags, dtype=bool).reshape(-1)
    if len(scores) == 0:
        return 0.0
    order = np.lexsort((np.arange(len(scores)), -scores))
    tp_cum = np.cumsum(tp[order])
    precision = tp_cum / np.arange(1, len(order) + 1)
    steps = points - 1
    total = 0.0
    for i in range(points):
        # recall >= i/steps, compared in integers to avoid float drift
        reach = tp_cum * steps >= i * num_gt
        total += precision[reach].max() if reach.any() else 0.0
    return total / points


@dataclass
class EvalReport:
    per_class_ap: dict[int, float]
    per_class_precision: dict[int, float]
    map_50: float
    mean_precision: float
    num_images: int
    num_gt: int
    num_detections: int
    gt_per_class: dict[int, int] = field(default_factory=dict)

    def to_dict(self, class_names: Sequence[str] | None = None) -> dict:
        def name(c):
            return class_names[c] if class_names else str(c)

        return {
            "map_50": self.map_50,
            "mean_precision": self.mean_precision,
            "per_class_ap": {name(c): v for c, v in sorted(self.per_class_ap.items())},
            "per_class_precision": {name(c): v for c, v in sorted(self.per_class_precision.items())},
            "gt_per_class": {name(c): v for c, v in sorted(self.gt_per_class.items())},
            "num_images": self.num_images,
            "num_gt": self.num_gt,
            "num_detections": self.num_detections,
        }


def mean_ap(per_class_ap: Mapping[int, float]) -> float:
    if not per_class_ap:
        raise NoClasses("no class has ground truth")
    return float(np.mean(list(per_class_ap.values())))


def _per_class_matches(detections, ground_truth, iou_threshold):
    """{class: (scores, tp flags)} pooled over images plus gt counts per class."""
    pooled: dict[int, tuple[list, list]] = {}
    gt_count: dict[int, int] = {}
    for dets, (gt_boxes, gt_classes) in zip(detections, ground_truth):
        gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
        gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
        for c in np.unique(gt_classes):
            gt_count[int(c)] = gt_count.get(int(c), 0) + int(np.sum(gt_classes == c))
        classes = {d.class_id for d in dets}
        for c in classes:
            mine = [d for d in dets if d.class_id == c]
            m = match_detections([d.bbox for d in mine], [d.score for d in mine], gt_boxes[gt_classes == c], iou_threshold)
            s, t = pooled.setdefault(c, ([], []))
            s.extend(d.score for d in mine)
            t.extend(m.tp.tolist())
    return pooled, gt_count


def mean_precision(detections, ground_truth, score_threshold: float = 0.5, iou_threshold: float = 0.5) -> tuple[float, dict[int, float]]:
    """Class-averaged TP / (TP + FP) among detections scoring at least ``score_threshold``.

    Only classes with ground truth count; such a class with no retained
    detection contributes 0.
    """
    kept = [[d for d in dets if d.score >= score_threshold] for dets in detections]
    pooled, gt_count = _per_class_matches(kept, ground_truth, iou_threshold)
    if not gt_count:
        raise NoClasses("no class has ground truth")
    per_class = {}
    for c in sorted(gt_count):
        flags = pooled.get(c, ([], []))[1]
        per_class[c] = float(np.mean(flags)) if flags else 0.0
    return float(np.mean(list(per_class.values()))), per_class


def evaluate_detections(
    detections: Sequence[Sequence[Detection]],
    ground_truth: Sequence[tuple[np.ndarray, np.ndarray]],
    iou_threshold: float = 0.5,
    score_threshold: float = 0.5,
    ap_points: int = 101,
) -> EvalReport:
    """mAP@``iou_threshold`` and Mean Precision over a split."""
    if len(detections) != len(ground_truth):
        raise ValidationError("detections and ground truth must cover the same images")
    pooled, gt_count = _per_class_matches(detections, ground_truth, iou_threshold)
    if not gt_count:
        raise NoClasses("no class has ground truth in this split")
    ap = {}
    for c in sorted(gt_count):
        s, t = pooled.get(c, ([], []))
        ap[c] = average_precision(s, t, gt_count[c], ap_points)
    mp, per_prec = mean_precision(detections, ground_truth, score_threshold, iou_threshold)
    return EvalReport(
        per_class_ap=ap, per_class_precision=per_prec, map_50=mean_ap(ap), mean_precision=mp,
        num_images=len(detections), num_gt=sum(gt_count.values()),
        num_detections=sum(len(d) for d in detections), gt_per_class=dict(sorted(gt_count.items())),
    )


@dataclass
class RunAggregate:
    mean: dict[str, float]
    std: dict[str, float]  # population
    n_runs: int

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "n_runs": self.n_runs}


def aggregate_runs(records: Sequence[Mapping[str, float]]) -> RunAggregate:
    records = list(records)
    if not records:
        raise EmptyRuns("no runs to aggregate")
    keys = list(records[0])
    if any(set(r) != set(keys) for r in records):
        raise ValidationError("all run records must report the same metrics")
    mean, std = {}, {}
    for k in keys:
        v = np.array([float(r[k]) for r in records])
        # shifted by the first run so identical runs give that exact value and std 0
        m = float(v[0] + math.fsum(v - v[0]) / len(v))
        mean[k] = m
        std[k] = float(math.sqrt(math.fsum((v - m) ** 2) / len(v)))
    return RunAggregate(mean, std, len(records))


def relative_improvement(a: float, b: float) -> float:
    """``100 * (a - b) / b`` rounded to one decimal, halves away from zero.

    Computed in decimal on the shortest repr of the inputs, so 0.05 stays a half.
    """
    if b == 0:
        raise DivisionByZero("baseline mean is zero")
    da, db = Decimal(repr(float(a))), Decimal(repr(float(b)))
    raw = Decimal(100) * (da - db) / db
    return float(raw.quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


@dataclass
class ComparisonReport:
    rows: list[dict]
    deltas: list[dict]

    def markdown(self) -> str:
        lines = ["| Model | Mean mAP | mAP std | Mean Precision | Precision std | Runs |", "|---|---|---|---|---|---|"]
        for r in self.rows:
            lines.append(
                f"| {r['model']} | {r['map_50']:.3f} | {r['map_50_std']:.3f} | "
                f"{r['mean_precision']:.3f} | {r['mean_precision_std']:.3f} | {r['n_runs']} |"
            )
        lines += ["", "| Comparison | mAP change (%) | Mean Precision change (%) |", "|---|---|---|"]
        for d in self.deltas:
            lines.append(f"| {d['model']} vs {d['baseline']} | {d['map_50']:+.1f} | {d['mean_precision']:+.1f} |")
        return "\n".join(lines) + "\n"

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "map_50", "map_50_std", "mean_precision", "mean_precision_std", "n_runs"])
        for r in self.rows:
            w.writerow([r["model"], r["map_50"], r["map_50_std"], r["mean_precision"], r["mean_precision_std"], r["n_runs"]])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"rows": self.rows, "deltas": self.deltas}

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.md").write_text(self.markdown())
        (out / "report.csv").write_text(self.csv())
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def comparison_report(aggregates: Mapping[str, RunAggregate]) -> ComparisonReport:
    """Table rows ordered depth, rgb, rgbd (others after) plus every ordered pairwise delta."""
    if len(aggregates) < 2:
        raise ValidationError("a comparison needs at least two variants")
    order = sorted(aggregates, key=lambda k: (list(VARIANT_LABELS).index(k) if k in VARIANT_LABELS else 99, k))
    rows = []
    for k in order:
        agg = aggregates[k]
        rows.append({
            "variant": k, "model": VARIANT_LABELS.get(k, k),
            "map_50": agg.mean["map_50"], "map_50_std": agg.std.get("map_50", 0.0),
            "mean_precision": agg.mean["mean_precision"], "mean_precision_std": agg.std.get("mean_precision", 0.0),
            "n_runs": agg.n_runs,
        })
    deltas = []
    for a in reversed(order):
        for b in order:
            if a == b:
                continue
            deltas.append({
                "model": VARIANT_LABELS.get(a, a), "baseline": VARIANT_LABELS.get(b, b), "variant": a, "baseline_variant": b,
                "map_50": relative_improvement(aggregates[a].mean["map_50"], aggregates[b].mean["map_50"]),
                "mean_precision": relative_improvement(aggregates[a].mean["mean_precision"], aggregates[b].mean["mean_precision"]),
            })
    return ComparisonReport(rows, deltas)


# ---- COCO results arrays ----

def detections_to_coco(per_image: Mapping[int, Iterable[Detection]]) -> list[dict]:
    out = []
    for image_id, dets in per_image.items():
        for d in dets:
            x0, y0, x1, y1 = d.bbox
            out.append({"image_id": int(image_id), "category_id": d.class_id + 1, "bbox": [x0, y0, x1 - x0, y1 - y0], "score": d.score})
    return out


def detections_from_coco(results: Sequence[Mapping]) -> dict[int, list[Detection]]:
    out: dict[int, list[Detection]] = {}
    try:
        for r in results:
            x, y, w, h = (float(v) for v in r["bbox"])
            out.setdefault(int(r["image_id"]), []).append(Detection((x, y, x + w, y + h), int(r["category_id"]) - 1, float(r["score"])))
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedJson(f"bad COCO results entry: {exc!r}") from exc
    return out


def load_detections(path) -> dict[int, list[Detection]]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedJson(f"cannot read detections {path}: {exc}") from exc
    if not isinstance(doc, list):
        raise MalformedJson(f"{path}: expected a COCO results array")
    return detections_from_coco(doc)
