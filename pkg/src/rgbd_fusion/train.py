"""SGD/Nesterov training with validation-mAP early stopping, and repeated runs."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .dataset import DatasetView
from .detect.checkpoint import Checkpoint
from .detect.model import ArchConfig, DetectorModel, build_model, forward_train, predict
from .errors import ConfigInvalid, DivergedLoss, EmptySplit, NonFiniteGradient, ShapeMismatch
from .evaluate import EvalReport, evaluate_detections
from .fusion import ChannelStats, VariantKind, normalize_input

log = logging.getLogger(__name__)

LOSS_KEYS = ("rpn_cls", "rpn_reg", "det_cls", "det_reg")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 1e-4
    batch_size: int = 4
    patience_epochs: int = 10
    max_epochs: int = 200
    seed: int = 0
    eval_score_threshold: float = 0.05  # detections kept for the AP curve
    precision_threshold: float = 0.5  # score cut for Mean Precision
    max_detections: int = 100

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigInvalid("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigInvalid("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigInvalid("weight_decay must be >= 0")
        if self.batch_size < 1 or self.patience_epochs < 1 or self.max_epochs < 1:
            raise ConfigInvalid("batch_size, patience_epochs and max_epochs must be >= 1")

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        extra = set(doc) - set(cls.__dataclass_fields__)
        if extra:
            raise ConfigInvalid(f"unknown train config keys: {sorted(extra)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


def load_config_file(path) -> dict:
    """Parse a TOML or JSON config file into a dict."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
    try:
        if p.suffix.lower() == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:  # python < 3.11
                import tomli as tomllib
            return tomllib.loads(text)
        return json.loads(text)
    except ValueError as exc:
        raise ConfigInvalid(f"cannot parse config {path}: {exc}") from exc


def sgd_nesterov_step(params, grads, velocity, config: TrainConfig):
    """One SGD step with coupled L2 weight decay and (Nesterov) momentum.

    Works on numpy arrays or torch tensors; returns new ``(params, velocity)``
    lists and leaves the inputs untouched.
    """
    if not (len(params) == len(grads) == len(velocity)):
        raise ShapeMismatch("params, grads and velocity must have equal length")
    lr, mu, wd = config.learning_rate, config.momentum, config.weight_decay
    new_p, new_v = [], []
    for p, g, v in zip(params, grads, velocity):
        if tuple(p.shape) != tuple(g.shape) or tuple(p.shape) != tuple(v.shape):
            raise ShapeMismatch(f"shape mismatch: param {tuple(p.shape)}, grad {tuple(g.shape)}, velocity {tuple(v.shape)}")
        finite = torch.isfinite(g).all() if isinstance(g, torch.Tensor) else np.all(np.isfinite(g))
        if not finite:
            raise NonFiniteGradient("gradient contains NaN or inf")
        g = g + wd * p
        v = mu * v + g
        step = g + mu * v if config.nesterov else v
        new_p.append(p - lr * step)
        new_v.append(v)
    return new_p, new_v


@dataclass
class Sample:
    id: int
    image: torch.Tensor  # (C, H, W) normalised float32
    boxes: np.ndarray  # (G, 4) pixels
    classes: np.ndarray  # (G,)

    @property
    def target(self):
        return self.boxes, self.classes


def prepare_samples(view: DatasetView, ids: Sequence[int], stats: ChannelStats, scale: float = 1.0) -> list[Sample]:
    """Load, channel-select and normalise the examples with the given ids.

    ``scale`` < 1 downsamples (nearest neighbour) and scales boxes to match.
    """
    lookup = {ex.id: ex for ex in view.examples}
    mean, std = stats.restrict(view.variant)
    out = []
    for i in ids:
        ex = lookup[i]
        x = normalize_input(view.load_channels(ex), mean, std)
        t = torch.from_numpy(np.ascontiguousarray(x.transpose(2, 0, 1))).float()
        boxes = ex.boxes()
        if scale != 1.0:
            size = (max(1, round(t.shape[1] * scale)), max(1, round(t.shape[2] * scale)))
            t = torch.nn.functional.interpolate(t[None], size=size, mode="nearest")[0]
            boxes = boxes * scale
        out.append(Sample(ex.id, t, boxes, ex.labels()))
    return out


def predict_samples(model: DetectorModel, samples: Sequence[Sample], config: TrainConfig):
    return [predict(model, s.image, config.eval_score_threshold, None, config.max_detections) for s in samples]


def evaluate_model(model: DetectorModel, samples: Sequence[Sample], config: TrainConfig = TrainConfig()) -> EvalReport:
    dets = predict_samples(model, samples, config)
    return evaluate_detections(dets, [s.target for s in samples], 0.5, config.precision_threshold)


class ValidationEvaluator:
    """mAP@0.5 / Mean Precision of a model over fixed samples."""

    def __init__(self, samples: Sequence[Sample], config: TrainConfig = TrainConfig()):
        self.samples = list(samples)
        self.config = config

    def __call__(self, model: DetectorModel) -> EvalReport:
        return evaluate_model(model, self.samples, self.config)


@dataclass
class EpochRecord:
    epoch: int
    losses: dict[str, float]
    val_map: float
    val_mean_precision: float
    seconds: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0  # 1-based; 0 before the first epoch

    CSV_HEADER = ("epoch", *LOSS_KEYS, "val_map", "val_mean_precision", "seconds")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.CSV_HEADER)
            for r in self.epochs:
                w.writerow([r.epoch, *(r.losses[k] for k in LOSS_KEYS), r.val_map, r.val_mean_precision, round(r.seconds, 3)])

    def to_dict(self) -> dict:
        return {"best_epoch": self.best_epoch, "epochs": [asdict(r) for r in self.epochs]}

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")


def batch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Example order for an epoch; depends only on (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def train(
    model: DetectorModel,
    train_samples: Sequence[Sample],
    val_samples: Sequence[Sample],
    config: TrainConfig,
    evaluator: Callable[[DetectorModel], EvalReport] | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[Checkpoint, TrainHistory]:
    """Train until validation mAP stalls for ``patience_epochs`` epochs or ``max_epochs``.

    Only a strictly higher validation mAP replaces the best checkpoint. The
    last partial batch of an epoch is kept.
    """
    if not train_samples or not val_samples:
        raise EmptySplit("train and validation splits must be non-empty")
    evaluator = evaluator or ValidationEvaluator(val_samples, config)
    torch.manual_seed(config.seed)
    params = [p for p in model.parameters()]
    velocity = [torch.zeros_like(p) for p in params]
    history = TrainHistory()
    best: Checkpoint | None = None
    best_map = -math.inf
    stale = 0

    for epoch in range(1, config.max_epochs + 1):
        start = time.perf_counter()
        model.train()
        order = batch_order(len(train_samples), config.seed, epoch)
        sums = dict.fromkeys(LOSS_KEYS, 0.0)
        n_batches = 0
        for b, lo in enumerate(range(0, len(order), config.batch_size)):
            batch = [train_samples[i] for i in order[lo:lo + config.batch_size]]
            images = torch.stack([s.image for s in batch])
            rng = np.random.default_rng([config.seed, epoch, b])
            model.zero_grad(set_to_none=False)
            losses = forward_train(model, images, [s.target for s in batch], generator=rng)
            if not torch.isfinite(losses["total"]):
                raise DivergedLoss(f"non-finite loss at epoch {epoch}, batch {b}")
            losses["total"].backward()
            with torch.no_grad():
                grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in params]
                new_p, velocity = sgd_nesterov_step([p.detach() for p in params], grads, velocity, config)
                for p, q in zip(params, new_p):
                    p.copy_(q)
            for k in LOSS_KEYS:
                sums[k] += float(losses[k].detach())
            n_batches += 1

        report = evaluator(model)
        record = EpochRecord(
            epoch, {k: v / n_batches for k, v in sums.items()}, float(report.map_50), float(report.mean_precision),
            time.perf_counter() - start,
        )
        history.epochs.append(record)
        if record.val_map > best_map:
            best_map = record.val_map
            history.best_epoch = epoch
            best = Checkpoint.from_model(model, config.seed, epoch=epoch, val_map=record.val_map,
                                         val_mean_precision=record.val_mean_precision)
            stale = 0
        else:
            stale += 1
        log.info("epoch %d: loss %.4f val mAP %.4f (best %.4f @ %d)", epoch, sum(record.losses.values()),
                 record.val_map, best_map, history.best_epoch)
        if on_epoch:
            on_epoch(record)
        if stale >= config.patience_epochs:
            break
    return best, history


@dataclass
class RunResult:
    run_index: int
    seed: int
    checkpoint: Checkpoint
    history: TrainHistory
    test_report: EvalReport

    @property
    def metrics(self) -> dict[str, float]:
        return {"map_50": self.test_report.map_50, "mean_precision": self.test_report.mean_precision}


def run_single(variant, arch: ArchConfig, train_samples, val_samples, test_samples, config: TrainConfig, seed: int) -> RunResult:
    """Train one model with ``seed`` and evaluate its best checkpoint on the test samples."""
    cfg = TrainConfig.from_dict({**config.to_dict(), "seed": seed})
    model = build_model(variant, arch, seed)
    best, history = train(model, train_samples, val_samples, cfg)
    report = evaluate_model(best.to_model(), test_samples, cfg)
    return RunResult(-1, seed, best, history, report)


def run_repeated(
    variant,
    arch: ArchConfig,
    train_samples,
    val_samples,
    test_samples,
    config: TrainConfig,
    n_runs: int = 10,
    on_run: Callable[[RunResult], None] | None = None,
) -> list[RunResult]:
    """``n_runs`` independent trainings with seeds ``config.seed + i``."""
    if n_runs < 1:
        raise ConfigInvalid("n_runs must be >= 1")
    results = []
    for i in range(n_runs):
        r = run_single(VariantKind(variant), arch, train_samples, val_samples, test_samples, config, config.seed + i)
        r.run_index = i
        results.append(r)
        if on_run:
            on_run(r)
    return results
