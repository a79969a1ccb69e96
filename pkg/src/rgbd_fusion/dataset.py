"""COCO ingestion/export, deterministic splitting, class balance and variant views."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    CountMismatch,
    DegenerateBox,
    MalformedFile,
    MalformedJson,
    MissingMedia,
    UnknownCategory,
    ValidationError,
)
from .fusion import RgbdImage, VariantKind, read_rgbd, select_channels

CLASS_NAMES = (
    "large_gear",
    "small_gear",
    "usbc_connector",
    "nut",
    "waterproof_connector",
    "small_rect_pin",
    "large_rect_pin",
    "small_round_pin",
    "large_round_pin",
)
NUM_CLASSES = len(CLASS_NAMES)

DEFAULT_SPLIT_COUNTS = (226, 45, 30)


@dataclass(frozen=True)
class ClassCatalog:
    names: tuple[str, ...] = CLASS_NAMES

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ValidationError("class names must be unique")

    def __len__(self):
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise UnknownCategory(f"category {name!r} is not in the class catalog") from None


@dataclass(frozen=True)
class Annotation:
    class_id: int
    bbox: tuple[float, float, float, float]  # x_min, y_min, x_max, y_max in pixels

    def __post_init__(self):
        x0, y0, x1, y1 = self.bbox
        if not (x0 < x1 and y0 < y1):
            raise DegenerateBox(f"box {self.bbox} has non-positive extent")
        if not 0 <= self.class_id < NUM_CLASSES:
            raise UnknownCategory(f"class id {self.class_id} outside 0..{NUM_CLASSES - 1}")
        object.__setattr__(self, "bbox", tuple(float(v) for v in self.bbox))

    def within(self, width: int, height: int) -> bool:
        x0, y0, x1, y1 = self.bbox
        return x0 >= 0 and y0 >= 0 and x1 <= width and y1 <= height


@dataclass
class Example:
    id: int
    file_name: str
    width: int
    height: int
    annotations: list[Annotation] = field(default_factory=list)
    rgb_path: Path | None = None
    cloud_path: Path | None = None
    rgbd_path: Path | None = None

    @property
    def stem(self) -> str:
        return Path(self.file_name).stem

    def boxes(self) -> np.ndarray:
        return np.array([a.bbox for a in self.annotations], dtype=np.float64).reshape(-1, 4)

    def labels(self) -> np.ndarray:
        return np.array([a.class_id for a in self.annotations], dtype=np.int64)


@dataclass
class Dataset:
    examples: list[Example]
    catalog: ClassCatalog = field(default_factory=ClassCatalog)
    root: Path | None = None

    def __len__(self):
        return len(self.examples)

    def by_id(self) -> dict[int, Example]:
        return {ex.id: ex for ex in self.examples}

    def subset(self, ids: Sequence[int]) -> "Dataset":
        lookup = self.by_id()
        return Dataset([lookup[i] for i in ids], self.catalog, self.root)


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]

    def to_dict(self) -> dict:
        return {"train": list(self.train), "val": list(self.val), "test": list(self.test)}

    @classmethod
    def from_dict(cls, doc: dict) -> "DatasetSplit":
        return cls(tuple(doc["train"]), tuple(doc["val"]), tuple(doc["test"]))

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def from_json(cls, path) -> "DatasetSplit":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise MalformedFile(f"cannot read split manifest {path}: {exc}") from exc

    def part(self, name: str) -> tuple[int, ...]:
        if name not in ("train", "val", "test"):
            raise ValidationError(f"unknown split {name!r}")
        return getattr(self, name)


def _media(root: Path, sub: str, stem: str, exts: Sequence[str]) -> Path | None:
    for ext in exts:
        p = root / sub / f"{stem}{ext}"
        if p.exists():
            return p
    return None


def load_coco(json_path, media_root=None, require_media: bool = True, catalog: ClassCatalog | None = None) -> Dataset:
    """Read a COCO detection file; boxes become corner form.

    Media are looked up as ``<root>/{rgb,cloud,rgbd}/<stem>.<ext>``. With
    ``require_media`` each image needs an RGB or an RGB-D file.
    """
    catalog = catalog or ClassCatalog()
    try:
        doc = json.loads(Path(json_path).read_text())
    except OSError as exc:
        raise MalformedJson(f"cannot read {json_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise MalformedJson(f"{json_path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict) or not all(isinstance(doc.get(k), list) for k in ("images", "annotations", "categories")):
        raise MalformedJson(f"{json_path}: needs 'images', 'annotations' and 'categories' arrays")
    root = Path(media_root) if media_root is not None else Path(json_path).parent

    try:
        cat_map = {int(c["id"]): catalog.index(c["name"]) for c in doc["categories"]}
        examples: dict[int, Example] = {}
        for im in doc["images"]:
            ex = Example(id=int(im["id"]), file_name=str(im["file_name"]), width=int(im["width"]), height=int(im["height"]))
            if ex.id in examples:
                raise MalformedJson(f"duplicate image id {ex.id}")
            ex.rgb_path = _media(root, "rgb", ex.stem, (Path(ex.file_name).suffix or ".png", ".png", ".jpg"))
            ex.cloud_path = _media(root, "cloud", ex.stem, (".xyz", ".xyzb"))
            ex.rgbd_path = _media(root, "rgbd", ex.stem, (".png",))
            if require_media and ex.rgb_path is None and ex.rgbd_path is None:
                raise MissingMedia(f"no rgb or rgbd file for image {ex.file_name} under {root}")
            examples[ex.id] = ex
        for ann in doc["annotations"]:
            if ann.get("iscrowd", 0) or ann.get("ignore", 0):
                raise MalformedJson(f"annotation {ann.get('id')}: crowd/ignore regions are not supported")
            cid = int(ann["category_id"])
            if cid not in cat_map:
                raise UnknownCategory(f"annotation {ann.get('id')} uses undeclared category {cid}")
            x, y, w, h = (float(v) for v in ann["bbox"])
            if w <= 0 or h <= 0:
                raise DegenerateBox(f"annotation {ann.get('id')} has bbox {ann['bbox']}")
            img_id = int(ann["image_id"])
            if img_id not in examples:
                raise MalformedJson(f"annotation {ann.get('id')} references unknown image {img_id}")
            examples[img_id].annotations.append(Annotation(cat_map[cid], (x, y, x + w, y + h)))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise MalformedJson(f"{json_path}: malformed record ({exc!r})") from exc
    return Dataset(list(examples.values()), catalog, root)


def to_coco(dataset: Dataset) -> dict:
    images, anns = [], []
    for ex in dataset.examples:
        images.append({"id": ex.id, "file_name": ex.file_name, "width": ex.width, "height": ex.height})
        for a in ex.annotations:
            x0, y0, x1, y1 = a.bbox
            anns.append({
                "id": len(anns) + 1, "image_id": ex.id, "category_id": a.class_id + 1,
                "bbox": [x0, y0, x1 - x0, y1 - y0], "area": (x1 - x0) * (y1 - y0), "iscrowd": 0,
            })
    cats = [{"id": i + 1, "name": n, "supercategory": "component"} for i, n in enumerate(dataset.catalog.names)]
    return {"images": images, "annotations": anns, "categories": cats}


def save_coco(dataset: Dataset, path) -> None:
    Path(path).write_text(json.dumps(to_coco(dataset), indent=1) + "\n")


def split_dataset(dataset: Dataset, counts: Sequence[int], seed: int) -> DatasetSplit:
    """Seeded shuffle of example ids, then consecutive train/val/test slices."""
    n_train, n_val, n_test = (int(c) for c in counts)
    if min(n_train, n_val, n_test) < 0 or n_train + n_val + n_test != len(dataset):
        raise CountMismatch(f"split counts {tuple(counts)} do not sum to dataset size {len(dataset)}")
    ids = np.array([ex.id for ex in dataset.examples], dtype=np.int64)
    order = ids[np.random.default_rng(seed).permutation(len(ids))].tolist()
    return DatasetSplit(
        tuple(order[:n_train]), tuple(order[n_train:n_train + n_val]), tuple(order[n_train + n_val:])
    )


@dataclass(frozen=True)
class ClassBalance:
    counts: dict[str, int]
    min_max_ratio: float  # 0.0 when no annotations exist

    def format(self) -> str:
        width = max(len(n) for n in self.counts)
        lines = [f"{n:<{width}}  {c}" for n, c in self.counts.items()]
        lines.append(f"min/max ratio: {self.min_max_ratio:.3f}")
        return "\n".join(lines)


def class_balance(dataset: Dataset) -> ClassBalance:
    counts = np.zeros(len(dataset.catalog), dtype=np.int64)
    for ex in dataset.examples:
        for a in ex.annotations:
            counts[a.class_id] += 1
    top = counts.max() if len(counts) else 0
    ratio = float(counts.min() / top) if top > 0 else 0.0
    return ClassBalance({n: int(c) for n, c in zip(dataset.catalog.names, counts)}, ratio)


@dataclass
class DatasetView:
    """A dataset seen through one model variant; labels are shared untouched."""

    dataset: Dataset
    variant: VariantKind

    @property
    def examples(self) -> list[Example]:
        return self.dataset.examples

    def __len__(self):
        return len(self.dataset)

    def load_rgbd(self, ex: Example) -> RgbdImage:
        if ex.rgbd_path is None:
            raise MissingMedia(f"image {ex.file_name} has no RGB-D file")
        return read_rgbd(ex.rgbd_path)

    def load_channels(self, ex: Example) -> np.ndarray:
        return select_channels(self.load_rgbd(ex), self.variant)


def derive_variant_dataset(dataset: Dataset, variant: VariantKind) -> DatasetView:
    missing = [ex.file_name for ex in dataset.examples if ex.rgbd_path is None]
    if missing:
        raise MissingMedia(f"{len(missing)} examples lack RGB-D media, e.g. {missing[0]}")
    return DatasetView(dataset, VariantKind(variant))
