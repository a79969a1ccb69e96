"""``rgbd-fusion`` command line: batch orchestration of the whole pipeline.

Exit codes: 0 success, 2 usage or validation error, 1 runtime failure.
Logs go to stderr; data goes to files (and small summaries to stdout).
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import PipelineError, ValidationError

log = logging.getLogger("rgbd_fusion")

VARIANT_CHOICES = ("rgb", "depth", "rgbd", "all")


@dataclass
class PipelineConfig:
    """Settings shared by subcommands; command-line flags override file values."""

    calibration: str | None = None
    dataset_root: str | None = None
    output_root: str | None = None
    variant: str = "all"
    seed: int = 0
    scale: float = 1.0
    split_counts: tuple[int, int, int] | None = None
    train: dict = field(default_factory=dict)
    arch: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        from .train import load_config_file

        doc = load_config_file(path)
        paths = doc.pop("paths", {})
        known = set(cls.__dataclass_fields__)
        merged = {**paths, **doc}
        extra = set(merged) - known
        if extra:
            raise ValidationError(f"unknown config keys: {sorted(extra)}")
        cfg = cls(**merged)
        if cfg.variant not in VARIANT_CHOICES:
            raise ValidationError(f"variant must be one of {VARIANT_CHOICES}")
        return cfg


def _config(args) -> PipelineConfig:
    return PipelineConfig.load(args.config) if getattr(args, "config", None) else PipelineConfig()


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"{what} not found: {p}")
    return p


def _require_dir(path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise ValidationError(f"{what} not found: {p}")
    return p


# ---- subcommands ----

def cmd_synth(args) -> int:
    from .synth import SceneConfig, default_scene_config, generate_dataset

    if args.n < 0:
        raise ValidationError("--n must be >= 0")
    if args.config:
        scene = SceneConfig.from_json(_require_file(args.config, "scene config"))
    else:
        scene = default_scene_config(args.width, args.height, low_contrast=args.low_contrast)
    ds = generate_dataset(scene, args.seed, args.n, args.out, args.cloud_format)
    print(f"wrote {len(ds)} scenes, {sum(len(e.annotations) for e in ds.examples)} annotations to {args.out}")
    return 0


def cmd_project(args) -> int:
    from .calib import load_calibration
    from .depth import compute_depth_stats, point_cloud_to_depth_map, quantize_mm, read_cloud, write_depth_png

    cfg = _config(args)
    calib_path = args.calib or cfg.calibration
    if not calib_path:
        raise ValidationError("--calib is required")
    calib = load_calibration(_require_file(calib_path, "calibration file"))
    clouds = sorted(p for p in _require_dir(args.clouds, "cloud directory").iterdir() if p.suffix in (".xyz", ".xyzb"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    maps = []
    for p in clouds:
        # stats must describe the maps exactly as stored (whole millimeters)
        depth = quantize_mm(point_cloud_to_depth_map(read_cloud(p), calib))
        write_depth_png(depth, out / f"{p.stem}.png")
        maps.append(depth)
    stats_path = Path(args.stats_out) if args.stats_out else out / "depth_stats.json"
    if maps:
        compute_depth_stats(maps).to_json(stats_path)
    print(f"projected {len(maps)} clouds into {out}")
    return 0


def cmd_pack(args) -> int:
    from .depth import DepthStats, depth_map_to_channel, read_depth_png
    from .fusion import pack_rgbd, read_rgb, write_rgbd

    stats = DepthStats.from_json(_require_file(args.stats, "depth stats"))
    rgb_dir = _require_dir(args.rgb, "rgb directory")
    depth_dir = _require_dir(args.depth, "depth directory")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    for rgb_path in sorted(p for p in rgb_dir.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg")):
        depth_path = depth_dir / f"{rgb_path.stem}.png"
        if not depth_path.is_file():
            raise ValidationError(f"no depth map for {rgb_path.name}")
        channel = depth_map_to_channel(read_depth_png(depth_path), stats)
        write_rgbd(pack_rgbd(read_rgb(rgb_path), channel), out / f"{rgb_path.stem}.png")
        n += 1
    print(f"packed {n} RGB-D images into {out}")
    return 0


def _parse_counts(text: str) -> tuple[int, int, int]:
    try:
        parts = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise ValidationError(f"--counts must be three comma-separated integers, got {text!r}") from None
    if len(parts) != 3:
        raise ValidationError(f"--counts must have three entries, got {text!r}")
    return parts


def cmd_split(args) -> int:
    from .dataset import DEFAULT_SPLIT_COUNTS, load_coco, split_dataset

    cfg = _config(args)
    coco = _require_file(args.coco, "COCO file")
    ds = load_coco(coco, require_media=False)
    counts = _parse_counts(args.counts) if args.counts else (cfg.split_counts or DEFAULT_SPLIT_COUNTS)
    seed = cfg.seed if args.seed is None else args.seed
    split = split_dataset(ds, counts, seed)
    out = Path(args.out) if args.out else coco.parent / "split.json"
    split.to_json(out)
    print(f"train {len(split.train)} / val {len(split.val)} / test {len(split.test)} -> {out}")
    return 0


def _variants(name: str):
    from .fusion import VariantKind

    if name == "all":
        return [VariantKind.DEPTH, VariantKind.RGB, VariantKind.RGBD]
    return [VariantKind.parse(name)]


def _train_config(cfg: PipelineConfig, args):
    from .train import TrainConfig

    doc = dict(cfg.train)
    for flag, key in (("lr", "learning_rate"), ("batch_size", "batch_size"), ("patience", "patience_epochs"),
                      ("max_epochs", "max_epochs")):
        val = getattr(args, flag, None)
        if val is not None:
            doc[key] = val
    seed = getattr(args, "seed", None)
    doc["seed"] = seed if seed is not None else doc.get("seed", cfg.seed)
    return TrainConfig.from_dict(doc)


def _load_data(root: Path, coco_path, split_path):
    from .dataset import DatasetSplit, load_coco

    coco = Path(coco_path) if coco_path else root / "annotations.json"
    ds = load_coco(_require_file(coco, "COCO file"), root)
    split = DatasetSplit.from_json(_require_file(Path(split_path) if split_path else root / "split.json", "split manifest"))
    return ds, split


def cmd_train(args) -> int:
    from .detect.checkpoint import save_checkpoint
    from .detect.model import ArchConfig
    from .evaluate import aggregate_runs
    from .fusion import compute_channel_stats
    from .dataset import derive_variant_dataset
    from .train import prepare_samples, run_repeated

    cfg = _config(args)
    root_s = args.data or cfg.dataset_root
    if not root_s:
        raise ValidationError("--data is required")
    root = _require_dir(root_s, "dataset root")
    out_s = args.out or cfg.output_root
    if not out_s:
        raise ValidationError("--out is required")
    if args.runs < 1:
        raise ValidationError("--runs must be >= 1")
    tcfg = _train_config(cfg, args)
    arch = ArchConfig.from_dict(cfg.arch)
    scale = args.scale if args.scale is not None else cfg.scale
    ds, split = _load_data(root, args.coco, args.split)
    out = Path(out_s)
    out.mkdir(parents=True, exist_ok=True)

    # normalisation statistics come from the training split only
    train_view = derive_variant_dataset(ds.subset(split.train), "rgbd")
    stats = compute_channel_stats(train_view.load_rgbd(ex) for ex in train_view.examples)
    stats_path = out / "channel_stats.json"
    stats.to_json(stats_path)

    for variant in _variants(args.variant or cfg.variant):
        view = derive_variant_dataset(ds, variant)
        parts = [prepare_samples(view, ids, stats, scale) for ids in (split.train, split.val, split.test)]
        vdir = out / variant.value

        def on_run(r, vdir=vdir):
            rdir = vdir / f"run_{r.run_index:02d}"
            rdir.mkdir(parents=True, exist_ok=True)
            r.checkpoint.channel_stats = str(stats_path.resolve())
            r.checkpoint.meta["scale"] = scale
            save_checkpoint(r.checkpoint, rdir / "checkpoint.ckpt")
            r.history.write_csv(rdir / "history.csv")
            r.history.write_json(rdir / "history.json")
            (rdir / "test_metrics.json").write_text(json.dumps(
                {"seed": r.seed, "best_epoch": r.history.best_epoch, **r.metrics, "report": r.test_report.to_dict()}, indent=1
            ) + "\n")
            log.info("%s run %d: test mAP %.4f, mean precision %.4f", variant.value, r.run_index, *r.metrics.values())

        results = run_repeated(variant, arch, *parts, tcfg, args.runs, on_run=on_run)
        agg = aggregate_runs([r.metrics for r in results])
        (vdir / "aggregate.json").write_text(json.dumps(agg.to_dict(), indent=1) + "\n")
        print(f"{variant.value}: mAP {agg.mean['map_50']:.4f} +- {agg.std['map_50']:.4f}, "
              f"mean precision {agg.mean['mean_precision']:.4f} +- {agg.std['mean_precision']:.4f} over {agg.n_runs} runs")
    return 0


def cmd_eval(args) -> int:
    from .detect.checkpoint import load_checkpoint
    from .dataset import ClassCatalog, derive_variant_dataset
    from .evaluate import detections_to_coco, evaluate_detections
    from .fusion import ChannelStats
    from .train import TrainConfig, predict_samples, prepare_samples

    cfg = _config(args)
    ckpt = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    root_s = args.data or cfg.dataset_root
    if not root_s:
        raise ValidationError("--data is required")
    root = _require_dir(root_s, "dataset root")
    ds, split = _load_data(root, args.coco, args.split_file)
    stats_path = args.channel_stats or ckpt.channel_stats or Path(args.checkpoint).parents[2] / "channel_stats.json"
    stats = ChannelStats.from_json(_require_file(stats_path, "channel stats"))
    scale = float(ckpt.meta.get("scale", 1.0))
    ids = split.part(args.split)
    samples = prepare_samples(derive_variant_dataset(ds, ckpt.variant), ids, stats, scale)
    tcfg = TrainConfig.from_dict({**cfg.train, "seed": ckpt.seed})
    dets = predict_samples(ckpt.to_model(), samples, tcfg)
    report = evaluate_detections(dets, [s.target for s in samples], 0.5, tcfg.precision_threshold,
                                 int(cfg.eval.get("ap_points", 101)))
    text = json.dumps(report.to_dict(ClassCatalog().names), indent=1) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if args.detections_out:
        inv = 1.0 / scale
        results = detections_to_coco({s.id: [_rescale(d, inv) for d in ds_] for s, ds_ in zip(samples, dets)})
        Path(args.detections_out).write_text(json.dumps(results, indent=1) + "\n")
    return 0


def _rescale(det, factor: float):
    from .detect.model import Detection

    return Detection(tuple(v * factor for v in det.bbox), det.class_id, det.score)


def cmd_report(args) -> int:
    from .evaluate import RunAggregate, aggregate_runs, comparison_report

    aggregates = {}
    if args.aggregates:
        doc = json.loads(_require_file(args.aggregates, "aggregates file").read_text())
        for variant, rec in doc.items():
            if "mean" in rec:
                aggregates[variant] = RunAggregate(rec["mean"], rec.get("std", {}), int(rec.get("n_runs", 1)))
            else:
                aggregates[variant] = aggregate_runs([{"map_50": rec["map_50"], "mean_precision": rec["mean_precision"]}])
    else:
        runs_dir = _require_dir(args.runs_dir, "runs directory")
        for vdir in sorted(p for p in runs_dir.iterdir() if p.is_dir()):
            metrics = [json.loads(f.read_text()) for f in sorted(vdir.glob("run_*/test_metrics.json"))]
            if metrics:
                aggregates[vdir.name] = aggregate_runs([{k: m[k] for k in ("map_50", "mean_precision")} for m in metrics])
    report = comparison_report(aggregates)
    out = args.out or args.runs_dir
    if out:
        report.write(out)
    sys.stdout.write(report.markdown())
    return 0


def cmd_overlay(args) -> int:
    from PIL import Image, ImageDraw

    from .dataset import CLASS_NAMES
    from .evaluate import load_detections

    img_path = _require_file(args.image, "image")
    per_image = load_detections(_require_file(args.detections, "detections file"))
    if args.image_id is not None:
        dets = per_image.get(args.image_id, [])
    elif len(per_image) <= 1:
        dets = next(iter(per_image.values()), [])
    else:
        raise ValidationError("detections cover several images; pass --image-id")
    dets = [d for d in dets if d.score >= args.min_score]
    if not dets:
        shutil.copyfile(img_path, args.out)
        return 0
    with Image.open(img_path) as im:
        canvas = im.convert("RGB")
    draw = ImageDraw.Draw(canvas)
    w, h = canvas.size
    for d in dets:
        x0, y0, x1, y1 = d.bbox
        box = (max(0, round(x0)), max(0, round(y0)), min(w - 1, round(x1)), min(h - 1, round(y1)))
        color = _class_color(d.class_id)
        draw.rectangle(box, outline=color, width=1)
        name = CLASS_NAMES[d.class_id] if 0 <= d.class_id < len(CLASS_NAMES) else str(d.class_id)
        draw.text((box[0] + 2, box[1] + 1), f"{name} {d.score:.2f}", fill=color)
    canvas.save(args.out, format="PNG")
    return 0


def _class_color(class_id: int) -> tuple[int, int, int]:
    rng = np.random.default_rng(class_id + 17)
    return tuple(int(v) for v in rng.integers(64, 256, 3))


def cmd_prune(args) -> int:
    from .calib import load_pair_errors, prune_calibration_pairs

    pairs = load_pair_errors(_require_file(args.pairs, "pair error CSV"))
    kept = prune_calibration_pairs(pairs, args.max_translation, args.max_rotation)
    for p in kept:
        print(f"{p.pair_id},{p.translation_error},{p.rotation_error}")
    log.info("retained %d of %d calibration pairs", len(kept), len(pairs))
    return 0


# ---- entry point ----

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rgbd-fusion", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic fixture dataset")
    p.add_argument("--config", help="scene config JSON (default: built-in nine-class scene)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, required=True, help="number of scenes")
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int, default=160)
    p.add_argument("--height", type=int, default=120)
    p.add_argument("--low-contrast", action="store_true", help="objects nearly the table colour")
    p.add_argument("--cloud-format", choices=("xyz", "xyzb"), default="xyz")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("project", help="project point clouds into 16-bit depth PNGs plus depth stats")
    p.add_argument("--config")
    p.add_argument("--calib")
    p.add_argument("--clouds", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stats-out", help="depth stats JSON (default <out>/depth_stats.json)")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("pack", help="pack RGB images and depth maps into RGB-D PNGs")
    p.add_argument("--rgb", required=True)
    p.add_argument("--depth", required=True)
    p.add_argument("--stats", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("split", help="seeded train/val/test split of a COCO file")
    p.add_argument("--config")
    p.add_argument("--coco", required=True)
    p.add_argument("--counts", help="n_train,n_val,n_test (default 226,45,30)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="split manifest (default <coco dir>/split.json)")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train detector variants, repeated over seeds")
    p.add_argument("--config")
    p.add_argument("--variant", choices=VARIANT_CHOICES)
    p.add_argument("--data", help="dataset root with rgbd/, annotations.json, split.json")
    p.add_argument("--coco")
    p.add_argument("--split", help="split manifest path")
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--out", help="runs directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--scale", type=float, help="input downscale factor")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--data")
    p.add_argument("--coco")
    p.add_argument("--split-file")
    p.add_argument("--channel-stats")
    p.add_argument("--out", help="report JSON (default stdout)")
    p.add_argument("--detections-out", help="write COCO results array")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="comparison table with relative improvements")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--runs-dir")
    src.add_argument("--aggregates", help="JSON {variant: {map_50, mean_precision}}")
    p.add_argument("--out", help="directory for report.md/.csv/.json (default runs dir)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("overlay", help="draw detections onto an image")
    p.add_argument("--image", required=True)
    p.add_argument("--detections", required=True, help="COCO results JSON")
    p.add_argument("--image-id", type=int)
    p.add_argument("--min-score", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_overlay)

    p = sub.add_parser("prune", help="iteratively drop calibration pairs with high errors")
    p.add_argument("--pairs", required=True, help="CSV pair_id,translation_error_m,rotation_error_deg")
    p.add_argument("--max-translation", type=float, default=0.0045)
    p.add_argument("--max-rotation", type=float, default=4.5)
    p.set_defaults(func=cmd_prune)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        log.error("%s", exc)
        return 2
    except (PipelineError, OSError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
