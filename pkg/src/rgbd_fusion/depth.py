"""Point-cloud to depth-map projection and depth normalisation/scaling.

Depth is camera-frame z in meters; 0.0 marks a pixel with no sensor return.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

from .calib import CalibrationBundle, project_points, round_half_away
from .errors import DegenerateRange, IoFailure, MalformedFile, NoValidPixels, OutOfRange, ValidationError


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray  # (N, 3) meters, depth-sensor frame

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(p)):
            raise ValidationError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", p)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True, eq=False)
class DepthMap:
    values: np.ndarray  # (H, W) meters, 0.0 = no data

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValidationError(f"depth map must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValidationError("depth values must be finite and >= 0")
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return self.values > 0

    def __eq__(self, other):
        return isinstance(other, DepthMap) and np.array_equal(self.values, other.values)


@dataclass(frozen=True)
class DepthStats:
    d_min: float
    d_max: float
    mean_scaled: float
    std_scaled: float
    valid_pixel_count: int

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")

    @classmethod
    def from_json(cls, path) -> "DepthStats":
        try:
            doc = json.loads(Path(path).read_text())
            return cls(
                d_min=float(doc["d_min"]), d_max=float(doc["d_max"]),
                mean_scaled=float(doc["mean_scaled"]), std_scaled=float(doc["std_scaled"]),
                valid_pixel_count=int(doc["valid_pixel_count"]),
            )
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise MalformedFile(f"cannot read depth stats from {path}: {exc}") from exc


def point_cloud_to_depth_map(cloud: PointCloud, calib: CalibrationBundle) -> DepthMap:
    """Z-buffer the cloud into a depth map; the nearest point wins each pixel."""
    values = np.zeros((calib.height, calib.width), dtype=np.float64)
    if len(cloud) == 0:
        return DepthMap(values)
    cols, rows, z, _ = project_points(cloud.points, calib)
    flat = np.full(values.size, np.inf)
    np.minimum.at(flat, rows * calib.width + cols, z)
    hit = np.isfinite(flat)
    values.reshape(-1)[hit] = flat[hit]
    return DepthMap(values)


def normalize_depth(d, stats: DepthStats):
    """Min-max normalise metric depth to [0, 1]; no-data zeros pass through as 0."""
    span = stats.d_max - stats.d_min
    if span <= 0:
        raise DegenerateRange(f"d_max == d_min == {stats.d_min}: constant-depth dataset")
    d = np.asarray(d, dtype=np.float64)
    out = np.where(d > 0, (d - stats.d_min) / span, 0.0)
    return float(out) if out.ndim == 0 else out


def scale_depth(d_norm):
    """Map [0, 1] to an 8-bit value, rounding half away from zero."""
    a = np.asarray(d_norm, dtype=np.float64)
    if np.any(~np.isfinite(a)) or np.any(a < 0) or np.any(a > 1):
        raise OutOfRange("normalised depth must lie in [0, 1]")
    out = round_half_away(a * 255.0)
    if isinstance(out, int):
        return out
    return out.astype(np.uint8)


def depth_map_to_channel(depth: DepthMap, stats: DepthStats) -> np.ndarray:
    """Compose normalisation and scaling per pixel; returns an (H, W) uint8 grid.

    Depths outside ``[d_min, d_max]`` (e.g. a map from outside the stats
    collection) are clipped first. A valid pixel at exactly ``d_min`` encodes
    to 0, the same value as a no-data pixel.
    """
    norm = normalize_depth(depth.values, stats)
    norm = np.clip(norm, 0.0, 1.0)
    return np.asarray(scale_depth(norm), dtype=np.uint8).reshape(depth.values.shape)


def compute_depth_stats(maps: Iterable[DepthMap]) -> DepthStats:
    """Dataset-wide depth range plus moments of the scaled valid depths.

    Accumulates integer histograms of scaled values so batches can be merged
    in any order with identical results.
    """
    maps = list(maps)
    valid = [m.values[m.valid] for m in maps]
    count = sum(len(v) for v in valid)
    if count == 0:
        raise NoValidPixels("no valid depth pixels in the collection")
    d_min = min(float(v.min()) for v in valid if len(v))
    d_max = max(float(v.max()) for v in valid if len(v))
    span = d_max - d_min
    hist = np.zeros(256, dtype=np.int64)
    for v in valid:
        if len(v) == 0:
            continue
        scaled = np.zeros(len(v), dtype=np.int64) if span == 0 else round_half_away((v - d_min) / span * 255.0)
        hist += np.bincount(np.atleast_1d(scaled), minlength=256)
    levels = np.arange(256, dtype=np.float64)
    mean = float((hist * levels).sum() / count)
    var = float((hist * (levels - mean) ** 2).sum() / count)
    return DepthStats(d_min=d_min, d_max=d_max, mean_scaled=mean, std_scaled=var ** 0.5, valid_pixel_count=int(count))


# ---- file formats ----

def read_xyz(path) -> PointCloud:
    """ASCII cloud, one ``x y z`` triple per line (meters)."""
    try:
        data = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except (OSError, ValueError) as exc:
        raise MalformedFile(f"cannot parse XYZ cloud {path}: {exc}") from exc
    if data.size == 0:
        return PointCloud(np.zeros((0, 3)))
    if data.shape[1] != 3:
        raise MalformedFile(f"{path}: expected 3 columns, got {data.shape[1]}")
    return PointCloud(data)


def write_xyz(cloud: PointCloud, path) -> None:
    np.savetxt(path, cloud.points, fmt="%.9g")


def read_xyzb(path) -> PointCloud:
    """Binary cloud: little-endian float32 triples."""
    try:
        raw = np.fromfile(path, dtype="<f4")
    except OSError as exc:
        raise MalformedFile(f"cannot read {path}: {exc}") from exc
    if raw.size % 3:
        raise MalformedFile(f"{path}: byte length is not a multiple of 12")
    return PointCloud(raw.reshape(-1, 3).astype(np.float64))


def write_xyzb(cloud: PointCloud, path) -> None:
    cloud.points.astype("<f4").tofile(path)


def read_cloud(path) -> PointCloud:
    return read_xyzb(path) if str(path).endswith(".xyzb") else read_xyz(path)


def quantize_mm(depth: DepthMap) -> DepthMap:
    """Round to whole millimeters, the resolution of the on-disk format."""
    mm = round_half_away(depth.values * 1000.0)
    if np.any(mm > 65535):
        raise OutOfRange("depth beyond 65.535 m cannot be stored as 16-bit millimeters")
    return DepthMap(np.asarray(mm, dtype=np.float64) / 1000.0)


def write_depth_png(depth: DepthMap, path) -> None:
    mm = np.asarray(round_half_away(depth.values * 1000.0))
    if np.any(mm > 65535):
        raise OutOfRange("depth beyond 65.535 m cannot be stored as 16-bit millimeters")
    try:
        Image.fromarray(mm.astype(np.uint16)).save(path, format="PNG")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_depth_png(path) -> DepthMap:
    try:
        with Image.open(path) as im:
            arr = np.array(im)
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if arr.ndim != 2:
        raise MalformedFile(f"{path}: depth PNG must be single-channel")
    return DepthMap(arr.astype(np.float64) / 1000.0)
