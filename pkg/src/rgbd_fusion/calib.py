"""Calibration data model, pinhole projection and calibration-pair pruning."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyResult, InvalidExtrinsics, InvalidIntrinsics, MalformedFile, ValidationError

Z_MIN = 1e-6
ORTHO_TOL = 1e-6

# thresholds reached by the iterative pruning in the reference calibration run
DEFAULT_MAX_TRANSLATION_M = 0.0045
DEFAULT_MAX_ROTATION_DEG = 4.5


def round_half_away(x):
    """Round to nearest integer, ties away from zero. Works on scalars and arrays."""
    a = np.asarray(x, dtype=np.float64)
    out = np.sign(a) * np.floor(np.abs(a) + 0.5)
    if out.ndim == 0:
        return int(out)
    return out.astype(np.int64)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidIntrinsics("intrinsics must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidIntrinsics(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise InvalidIntrinsics(f"image size must be >= 1, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidIntrinsics(f"principal point ({self.cx}, {self.cy}) outside image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """4x4 homogeneous transform. Translation is in meters."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise InvalidExtrinsics(f"expected a 4x4 matrix, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise InvalidExtrinsics("extrinsic matrix has non-finite entries")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise InvalidExtrinsics(f"bottom row must be [0,0,0,1], got {m[3].tolist()}")
        r = m[:3, :3]
        if np.max(np.abs(r.T @ r - np.eye(3))) >= ORTHO_TOL:
            raise InvalidExtrinsics("rotation block is not orthonormal")
        if np.linalg.det(r) <= 0:
            raise InvalidExtrinsics("rotation block has non-positive determinant")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(4))

    @classmethod
    def from_rt(cls, rotation, translation) -> "RigidTransform":
        m = np.eye(4)
        m[:3, :3] = rotation
        m[:3, 3] = translation
        return cls(m)

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def inverse(self) -> "RigidTransform":
        r = self.rotation
        return RigidTransform.from_rt(r.T, -r.T @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return ``self @ other`` (apply ``other`` first)."""
        m = self.matrix @ other.matrix
        m[3] = (0.0, 0.0, 0.0, 1.0)
        return RigidTransform(m)

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def __eq__(self, other):
        return isinstance(other, RigidTransform) and np.array_equal(self.matrix, other.matrix)

    def __hash__(self):
        return hash(self.matrix.tobytes())


@dataclass(frozen=True)
class CalibrationBundle:
    intrinsics: CameraIntrinsics
    extrinsics: RigidTransform  # depth-sensor frame -> camera frame

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height

    def to_dict(self) -> dict:
        k = self.intrinsics
        return {
            "intrinsics": {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy, "width": k.width, "height": k.height},
            "extrinsic": [float(v) for v in self.extrinsics.matrix.ravel()],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CalibrationBundle":
        try:
            k = doc["intrinsics"]
            intr = CameraIntrinsics(
                fx=float(k["fx"]), fy=float(k["fy"]), cx=float(k["cx"]), cy=float(k["cy"]),
                width=int(k["width"]), height=int(k["height"]),
            )
            ext = [float(v) for v in doc["extrinsic"]]
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise MalformedFile(f"calibration document is malformed: {exc!r}") from exc
        if len(ext) != 16:
            raise MalformedFile(f"extrinsic must hold 16 numbers, got {len(ext)}")
        return cls(intr, RigidTransform(np.array(ext).reshape(4, 4)))


def load_calibration(path) -> CalibrationBundle:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise MalformedFile(f"cannot read calibration file {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedFile(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise MalformedFile(f"{path}: top level must be an object")
    return CalibrationBundle.from_dict(doc)


def save_calibration(calib: CalibrationBundle, path) -> None:
    Path(path).write_text(json.dumps(calib.to_dict(), indent=2) + "\n")


def project_exact(points, calib: CalibrationBundle):
    """Continuous projection of an (N, 3) array of depth-sensor points.

    Returns ``(u, v, z)`` float arrays without rounding or frame checks; ``u``
    and ``v`` are NaN where ``z <= Z_MIN``.
    """
    cam = calib.extrinsics.apply(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
    k = calib.intrinsics
    front = z > Z_MIN
    safe_z = np.where(front, z, 1.0)
    u = np.where(front, k.fx * x / safe_z + k.cx, np.nan)
    v = np.where(front, k.fy * y / safe_z + k.cy, np.nan)
    return u, v, z


def project_points(points, calib: CalibrationBundle):
    """Vectorised ``project_point``.

    Returns ``(cols, rows, z, keep)`` where ``keep`` masks the points that land
    in frame; ``cols``/``rows``/``z`` are already filtered by ``keep``.
    """
    u, v, z = project_exact(points, calib)
    front = z > Z_MIN
    cols = round_half_away(np.where(front, u, -1.0)).reshape(-1)
    rows = round_half_away(np.where(front, v, -1.0)).reshape(-1)
    keep = front & (cols >= 0) & (cols < calib.width) & (rows >= 0) & (rows < calib.height)
    return cols[keep], rows[keep], z[keep], keep


def project_point(p: Sequence[float], calib: CalibrationBundle):
    """Project one depth-sensor point; ``None`` if behind the camera or out of frame."""
    cols, rows, z, _ = project_points(np.asarray(p, dtype=np.float64).reshape(1, 3), calib)
    if len(z) == 0:
        return None
    return int(cols[0]), int(rows[0]), float(z[0])


def back_project(u, v, z, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Camera-frame 3D point(s) for pixel coordinates at depth ``z``."""
    u, v, z = (np.asarray(a, dtype=np.float64) for a in (u, v, z))
    x = (u - intrinsics.cx) * z / intrinsics.fx
    y = (v - intrinsics.cy) * z / intrinsics.fy
    return np.stack([x, y, z], axis=-1)


@dataclass(frozen=True)
class PairError:
    pair_id: str
    translation_error: float  # meters
    rotation_error: float  # degrees

    def __post_init__(self):
        if not (self.translation_error >= 0 and self.rotation_error >= 0):
            raise ValidationError(f"pair {self.pair_id}: errors must be >= 0")


def load_pair_errors(path) -> list[PairError]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"pair_id", "translation_error_m", "rotation_error_deg"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise MalformedFile(f"{path}: header must contain {sorted(need)}")
        for rec in reader:
            try:
                rows.append(PairError(rec["pair_id"], float(rec["translation_error_m"]), float(rec["rotation_error_deg"])))
            except ValueError as exc:
                raise MalformedFile(f"{path}: bad row {rec}") from exc
    return rows


def prune_calibration_pairs(
    errors: Iterable[PairError],
    max_translation: float = DEFAULT_MAX_TRANSLATION_M,
    max_rotation: float = DEFAULT_MAX_ROTATION_DEG,
) -> list[PairError]:
    """Drop the worst pair one at a time until every survivor is under both thresholds.

    Worst means the largest ``max(t / max_translation, r / max_rotation)``;
    ties go to the earliest pair. Survivors keep their input order.
    """
    if max_translation <= 0 or max_rotation <= 0:
        raise ValidationError("thresholds must be positive")
    kept = list(errors)

    def badness(e: PairError) -> float:
        return max(e.translation_error / max_translation, e.rotation_error / max_rotation)

    while kept:
        if max(e.translation_error for e in kept) < max_translation and max(
            e.rotation_error for e in kept
        ) < max_rotation:
            return kept
        worst = max(range(len(kept)), key=lambda i: (badness(kept[i]), -i))
        del kept[worst]
    raise EmptyResult("every calibration pair exceeds the error thresholds")
