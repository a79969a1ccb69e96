"""Four-channel RGB-D packing, PNG persistence and model-input normalisation."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

from .errors import DimensionMismatch, EmptyDataset, IoFailure, MalformedFile, NotFourChannel, ValidationError, ZeroStd


class VariantKind(str, enum.Enum):
    RGB = "rgb"
    DEPTH = "depth"
    RGBD = "rgbd"

    @property
    def channels(self) -> tuple[int, ...]:
        return _CHANNELS[self]

    @property
    def num_channels(self) -> int:
        return len(_CHANNELS[self])

    @classmethod
    def parse(cls, name: str) -> "VariantKind":
        key = name.strip().lower().replace("-", "").replace("_", "")
        aliases = {"rgb": cls.RGB, "rgbonly": cls.RGB, "depth": cls.DEPTH, "depthonly": cls.DEPTH, "rgbd": cls.RGBD}
        try:
            return aliases[key]
        except KeyError:
            raise ValidationError(f"unknown variant {name!r}") from None


_CHANNELS = {VariantKind.RGB: (0, 1, 2), VariantKind.DEPTH: (3,), VariantKind.RGBD: (0, 1, 2, 3)}


@dataclass(frozen=True, eq=False)
class RgbdImage:
    pixels: np.ndarray  # (H, W, 4) uint8: R, G, B, scaled depth

    def __post_init__(self):
        p = np.asarray(self.pixels)
        if p.ndim != 3 or p.shape[2] != 4:
            raise NotFourChannel(f"expected (H, W, 4) pixels, got shape {p.shape}")
        if p.dtype != np.uint8:
            raise ValidationError(f"expected uint8 pixels, got {p.dtype}")
        object.__setattr__(self, "pixels", p)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def rgb(self) -> np.ndarray:
        return self.pixels[..., :3]

    @property
    def depth(self) -> np.ndarray:
        return self.pixels[..., 3]

    def __eq__(self, other):
        return isinstance(other, RgbdImage) and np.array_equal(self.pixels, other.pixels)


@dataclass(frozen=True)
class ChannelStats:
    mean: tuple[float, float, float, float]
    std: tuple[float, float, float, float]

    def __post_init__(self):
        if len(self.mean) != 4 or len(self.std) != 4:
            raise ValidationError("channel stats need exactly 4 entries")
        if any(s < 0 for s in self.std):
            raise ValidationError("channel std must be >= 0")
        object.__setattr__(self, "mean", tuple(float(m) for m in self.mean))
        object.__setattr__(self, "std", tuple(float(s) for s in self.std))

    def restrict(self, variant: VariantKind) -> tuple[np.ndarray, np.ndarray]:
        idx = list(variant.channels)
        return np.asarray(self.mean)[idx], np.asarray(self.std)[idx]

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, doc: dict) -> "ChannelStats":
        return cls(tuple(doc["mean"]), tuple(doc["std"]))

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def from_json(cls, path) -> "ChannelStats":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise MalformedFile(f"cannot read channel stats from {path}: {exc}") from exc


def pack_rgbd(rgb: np.ndarray, depth_channel: np.ndarray) -> RgbdImage:
    rgb = np.asarray(rgb)
    depth_channel = np.asarray(depth_channel)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DimensionMismatch(f"rgb must be (H, W, 3), got {rgb.shape}")
    if depth_channel.shape != rgb.shape[:2]:
        raise DimensionMismatch(f"rgb is {rgb.shape[:2]} but depth channel is {depth_channel.shape}")
    if rgb.dtype != np.uint8 or depth_channel.dtype != np.uint8:
        raise ValidationError("rgb and depth channel must both be uint8")
    return RgbdImage(np.concatenate([rgb, depth_channel[..., None]], axis=2))


def write_rgbd(img: RgbdImage, path) -> None:
    # straight (non-premultiplied) RGBA keeps the colour bytes untouched
    try:
        Image.fromarray(img.pixels, mode="RGBA").save(path, format="PNG")
    except (OSError, ValueError) as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_rgbd(path) -> RgbdImage:
    try:
        with Image.open(path) as im:
            mode = im.mode
            arr = np.array(im)
    except (OSError, ValueError) as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if mode != "RGBA":
        raise NotFourChannel(f"{path}: expected an 8-bit RGBA PNG, got mode {mode}")
    return RgbdImage(arr)


def read_rgb(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode not in ("RGB", "L", "P", "RGBA"):
                raise DimensionMismatch(f"{path}: unsupported image mode {im.mode}")
            return np.array(im.convert("RGB"))
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def select_channels(img: RgbdImage, variant: VariantKind) -> np.ndarray:
    """(H, W, C) uint8 view of the channels a variant consumes."""
    return img.pixels[..., list(variant.channels)]


def normalize_input(channels: np.ndarray, mean, std) -> np.ndarray:
    """Per-channel standardisation of an (H, W, C) or (N, H, W, C) grid."""
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if np.any(std <= 0):
        raise ZeroStd(f"channel std must be > 0, got {std.tolist()}")
    x = np.asarray(channels, dtype=np.float64)
    if x.shape[-1] != len(mean):
        raise DimensionMismatch(f"{x.shape[-1]} channels but {len(mean)} stats entries")
    return (x - mean) / std


def compute_channel_stats(images: Iterable[RgbdImage]) -> ChannelStats:
    """Population mean/std per channel on the 0-255 scale.

    The depth channel includes no-data zeros, i.e. exactly what the network
    sees. Uses exact integer histograms, so the result does not depend on
    image order.
    """
    hist = np.zeros((4, 256), dtype=np.int64)
    n = 0
    for img in images:
        flat = img.pixels.reshape(-1, 4)
        for c in range(4):
            hist[c] += np.bincount(flat[:, c], minlength=256)
        n += flat.shape[0]
    if n == 0:
        raise EmptyDataset("cannot compute channel stats of an empty collection")
    levels = np.arange(256, dtype=np.float64)
    mean = (hist * levels).sum(axis=1) / n
    var = (hist * (levels[None, :] - mean[:, None]) ** 2).sum(axis=1) / n
    return ChannelStats(tuple(mean), tuple(np.sqrt(var)))
