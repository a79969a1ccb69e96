"""Synthetic table-top scenes with exact ground truth.

A camera looks straight down (+z) at a table plane. Objects are flat-shaded
prisms (boxes, or cylinders approximated by a 24-gon) standing on the plane.
The renderer is deliberately primitive: painter's order, no lighting model.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .calib import CalibrationBundle, CameraIntrinsics, RigidTransform, save_calibration
from .dataset import Annotation, ClassCatalog, Dataset, Example, NUM_CLASSES, save_coco
from .depth import PointCloud, write_xyz, write_xyzb
from .errors import ConfigInvalid

CYLINDER_SIDES = 24


def fixture_calibration(width: int = 160, height: int = 120) -> CalibrationBundle:
    """Default rig: square pixels, slightly offset and rotated depth sensor."""
    f = 2.0 * width
    intr = CameraIntrinsics(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0, width=width, height=height)
    a = math.radians(2.0)
    rot = np.array([[math.cos(a), -math.sin(a), 0.0], [math.sin(a), math.cos(a), 0.0], [0.0, 0.0, 1.0]])
    return CalibrationBundle(intr, RigidTransform.from_rt(rot, [0.03, -0.01, 0.0]))


@dataclass
class ObjectTemplate:
    class_id: int
    shape: str = "box"  # "box" or "cylinder"
    footprint: tuple[tuple[float, float], tuple[float, float]] = ((0.04, 0.08), (0.04, 0.08))  # meters
    height: tuple[float, float] = (0.02, 0.05)
    color: tuple[int, int, int] = (200, 60, 60)
    color_jitter: int = 0
    points: int = 400

    def validate(self):
        if not 0 <= self.class_id < NUM_CLASSES:
            raise ConfigInvalid(f"class_id {self.class_id} out of range")
        if self.shape not in ("box", "cylinder"):
            raise ConfigInvalid(f"unknown shape {self.shape!r}")
        for lo, hi in (*self.footprint, self.height):
            if not 0 < lo <= hi:
                raise ConfigInvalid(f"size range ({lo}, {hi}) must satisfy 0 < lo <= hi")
        if self.points < 0:
            raise ConfigInvalid("points must be >= 0")


@dataclass
class SceneConfig:
    width: int = 160
    height: int = 120
    plane_depth: float = 0.5
    background: tuple[int, int, int] = (110, 110, 110)
    noise: float = 0.0  # stddev of additive RGB noise
    plane_points: int | None = None  # default: one per pixel
    objects_per_scene: tuple[int, int] = (2, 4)
    templates: list[ObjectTemplate] = field(default_factory=list)
    calibration: CalibrationBundle | None = None

    def __post_init__(self):
        if self.calibration is None:
            self.calibration = fixture_calibration(self.width, self.height)
        if (self.calibration.width, self.calibration.height) != (self.width, self.height):
            raise ConfigInvalid("calibration image size differs from scene size")
        lo, hi = self.objects_per_scene
        if not 0 <= lo <= hi:
            raise ConfigInvalid(f"objects_per_scene {self.objects_per_scene} invalid")
        if hi > 0 and not self.templates:
            raise ConfigInvalid("objects requested but no templates configured")
        if self.plane_depth <= 0:
            raise ConfigInvalid("plane_depth must be positive")
        for t in self.templates:
            t.validate()

    @classmethod
    def from_dict(cls, doc: dict) -> "SceneConfig":
        doc = dict(doc)
        try:
            templates = []
            for t in doc.pop("templates", []):
                t = dict(t)
                if "footprint" in t:
                    t["footprint"] = tuple(tuple(r) for r in t["footprint"])
                for key in ("height", "color"):
                    if key in t:
                        t[key] = tuple(t[key])
                templates.append(ObjectTemplate(**t))
            calib = doc.pop("calibration", None)
            if calib is not None:
                calib = CalibrationBundle.from_dict(calib)
            for key in ("background", "objects_per_scene"):
                if key in doc:
                    doc[key] = tuple(doc[key])
            return cls(templates=templates, calibration=calib, **doc)
        except TypeError as exc:
            raise ConfigInvalid(f"bad scene config: {exc}") from exc

    @classmethod
    def from_json(cls, path) -> "SceneConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigInvalid(f"cannot read scene config {path}: {exc}") from exc


def default_scene_config(width: int = 160, height: int = 120, low_contrast: bool = False) -> SceneConfig:
    """Nine templates, one per class. ``low_contrast`` tints every object close to the table colour."""
    bg = (110, 110, 110)
    palette = [
        (220, 180, 40), (200, 90, 40), (40, 40, 40), (180, 180, 190), (30, 90, 200),
        (200, 40, 40), (40, 160, 60), (150, 60, 170), (230, 230, 230),
    ]
    shapes = ["cylinder", "cylinder", "box", "cylinder", "cylinder", "box", "box", "cylinder", "cylinder"]
    foot = [
        ((0.07, 0.08), (0.07, 0.08)), ((0.045, 0.05), (0.045, 0.05)), ((0.05, 0.06), (0.025, 0.03)),
        ((0.035, 0.04), (0.035, 0.04)), ((0.05, 0.055), (0.05, 0.055)), ((0.03, 0.035), (0.03, 0.035)),
        ((0.06, 0.07), (0.035, 0.04)), ((0.028, 0.032), (0.028, 0.032)), ((0.04, 0.045), (0.04, 0.045)),
    ]
    heights = [(0.02, 0.025), (0.015, 0.02), (0.01, 0.015), (0.01, 0.012), (0.04, 0.05),
               (0.03, 0.04), (0.05, 0.06), (0.035, 0.045), (0.06, 0.07)]
    templates = []
    for cid in range(NUM_CLASSES):
        color = palette[cid]
        if low_contrast:
            # objects differ from the table by only a few grey levels
            color = tuple(int(b + (c - b) * 0.06) for b, c in zip(bg, color))
        templates.append(ObjectTemplate(cid, shapes[cid], foot[cid], heights[cid], color, 0, 400))
    return SceneConfig(width=width, height=height, background=bg, noise=6.0 if low_contrast else 0.0,
                       objects_per_scene=(2, 4), templates=templates)


@dataclass
class PlacedObject:
    class_id: int
    base: np.ndarray  # (K, 2) footprint polygon on the plane, camera-frame x/y meters
    top_z: float
    bottom_z: float
    color: tuple[int, int, int]
    points: int

    def corners(self) -> np.ndarray:
        k = len(self.base)
        top = np.column_stack([self.base, np.full(k, self.top_z)])
        bottom = np.column_stack([self.base, np.full(k, self.bottom_z)])
        return np.vstack([top, bottom])


@dataclass
class Scene:
    rgb: np.ndarray  # (H, W, 3) uint8
    cloud: PointCloud  # depth-sensor frame
    annotations: list[Annotation]
    objects: list[PlacedObject]


def _footprint(template: ObjectTemplate, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    sx = rng.uniform(*template.footprint[0])
    sy = rng.uniform(*template.footprint[1])
    if template.shape == "box":
        local = np.array([[-sx, -sy], [sx, -sy], [sx, sy], [-sx, sy]]) / 2.0
        yaw = rng.uniform(0, math.pi)
    else:
        ang = np.arange(CYLINDER_SIDES) * 2 * math.pi / CYLINDER_SIDES
        local = np.column_stack([np.cos(ang), np.sin(ang)]) * (sx / 2.0)
        yaw = 0.0
    c, s = math.cos(yaw), math.sin(yaw)
    local = local @ np.array([[c, s], [-s, c]])
    radius = float(np.max(np.linalg.norm(local, axis=1)))
    return local, radius


def _project_cam(points: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    return np.column_stack([intr.fx * points[:, 0] / points[:, 2] + intr.cx, intr.fy * points[:, 1] / points[:, 2] + intr.cy])


def projected_bbox(obj: PlacedObject, intr: CameraIntrinsics) -> tuple[float, float, float, float]:
    uv = _project_cam(obj.corners(), intr)
    return float(uv[:, 0].min()), float(uv[:, 1].min()), float(uv[:, 0].max()), float(uv[:, 1].max())


def _sample_polygon(poly: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples inside a convex polygon via fan triangulation."""
    if n == 0:
        return np.zeros((0, 2))
    tris = np.stack([np.repeat(poly[:1], len(poly) - 2, axis=0), poly[1:-1], poly[2:]], axis=1)
    e1, e2 = tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]
    areas = 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    pick = rng.choice(len(tris), size=n, p=areas / areas.sum())
    r1, r2 = rng.random(n), rng.random(n)
    flip = r1 + r2 > 1
    r1[flip], r2[flip] = 1 - r1[flip], 1 - r2[flip]
    t = tris[pick]
    return t[:, 0] + r1[:, None] * (t[:, 1] - t[:, 0]) + r2[:, None] * (t[:, 2] - t[:, 0])


def _object_points(obj: PlacedObject, rng: np.random.Generator) -> np.ndarray:
    n_top = int(round(obj.points * 0.7))
    n_side = obj.points - n_top
    top = np.column_stack([_sample_polygon(obj.base, n_top, rng), np.full(n_top, obj.top_z)])
    k = len(obj.base)
    edge = rng.integers(0, k, size=n_side)
    t = rng.random(n_side)[:, None]
    xy = obj.base[edge] + t * (obj.base[(edge + 1) % k] - obj.base[edge])
    z = rng.uniform(obj.top_z, obj.bottom_z, size=n_side)
    side = np.column_stack([xy, z])
    return np.vstack([top, side])


def generate_synthetic_scene(seed, config: SceneConfig) -> Scene:
    """Render one scene. Identical ``seed`` and config give identical outputs."""
    rng = np.random.default_rng(seed)
    calib = config.calibration
    intr = calib.intrinsics
    zp = config.plane_depth
    x_lo, x_hi = (0 - intr.cx) * zp / intr.fx, (intr.width - intr.cx) * zp / intr.fx
    y_lo, y_hi = (0 - intr.cy) * zp / intr.fy, (intr.height - intr.cy) * zp / intr.fy

    lo, hi = config.objects_per_scene
    n_obj = int(rng.integers(lo, hi + 1)) if hi > 0 else 0
    placed: list[PlacedObject] = []
    footprints: list[tuple[np.ndarray, float]] = []
    for _ in range(n_obj):
        tpl = config.templates[int(rng.integers(len(config.templates)))]
        local, radius = _footprint(tpl, rng)
        h = rng.uniform(*tpl.height)
        jitter = rng.integers(-tpl.color_jitter, tpl.color_jitter + 1, size=3) if tpl.color_jitter else np.zeros(3, int)
        color = tuple(int(v) for v in np.clip(np.array(tpl.color) + jitter, 0, 255))
        for _attempt in range(50):
            center = np.array([rng.uniform(x_lo, x_hi), rng.uniform(y_lo, y_hi)])
            if any(np.linalg.norm(center - c) < radius + r + 0.005 for c, r in footprints):
                continue
            obj = PlacedObject(tpl.class_id, local + center, zp - h, zp, color, tpl.points)
            x0, y0, x1, y1 = projected_bbox(obj, intr)
            if x0 >= 0 and y0 >= 0 and x1 <= intr.width - 1 and y1 <= intr.height - 1:
                placed.append(obj)
                footprints.append((center, radius))
                break

    img = Image.new("RGB", (intr.width, intr.height), tuple(config.background))
    draw = ImageDraw.Draw(img)
    # tallest objects last so they overdraw their neighbours
    for obj in sorted(placed, key=lambda o: -o.top_z):
        uv = _project_cam(obj.corners(), intr)
        k = len(obj.base)
        side_color = tuple(int(c * 0.8) for c in obj.color)
        hull = _convex_hull(uv)
        draw.polygon([tuple(p) for p in hull], fill=side_color)
        draw.polygon([tuple(p) for p in uv[:k]], fill=obj.color)
    rgb = np.array(img)
    if config.noise > 0:
        noise = rng.normal(0.0, config.noise, size=rgb.shape)
        rgb = np.clip(np.rint(rgb + noise), 0, 255).astype(np.uint8)

    n_plane = intr.width * intr.height if config.plane_points is None else config.plane_points
    plane = np.column_stack([rng.uniform(x_lo, x_hi, n_plane), rng.uniform(y_lo, y_hi, n_plane), np.full(n_plane, zp)])
    cam_pts = [plane] + [_object_points(o, rng) for o in placed]
    cam = np.vstack(cam_pts)
    sensor = calib.extrinsics.inverse().apply(cam)

    anns = [Annotation(o.class_id, projected_bbox(o, intr)) for o in placed]
    return Scene(rgb=rgb, cloud=PointCloud(sensor), annotations=anns, objects=placed)


def _convex_hull(pts: np.ndarray) -> np.ndarray:
    """Monotone-chain convex hull of 2-D points."""
    p = sorted(map(tuple, np.round(pts, 9)))
    if len(p) <= 2:
        return np.array(p)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for q in p:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], q) <= 0:
            lower.pop()
        lower.append(q)
    for q in reversed(p):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], q) <= 0:
            upper.pop()
        upper.append(q)
    return np.array(lower[:-1] + upper[:-1])


def scene_seed(seed: int, index: int) -> np.random.SeedSequence:
    """Per-example seed derived from the run seed; stable across processes."""
    return np.random.SeedSequence([int(seed), int(index)])


def generate_dataset(config: SceneConfig, seed: int, n: int, out_dir, cloud_format: str = "xyz") -> Dataset:
    """Write ``n`` scenes under ``out_dir`` as rgb/, cloud/, annotations.json, manifest.json, calib.json."""
    if cloud_format not in ("xyz", "xyzb"):
        raise ConfigInvalid(f"cloud format must be xyz or xyzb, got {cloud_format!r}")
    out = Path(out_dir)
    (out / "rgb").mkdir(parents=True, exist_ok=True)
    (out / "cloud").mkdir(parents=True, exist_ok=True)
    examples, manifest = [], []
    for i in range(n):
        scene = generate_synthetic_scene(scene_seed(seed, i), config)
        stem = f"{i:06d}"
        rgb_path = out / "rgb" / f"{stem}.png"
        cloud_path = out / "cloud" / f"{stem}.{cloud_format}"
        Image.fromarray(scene.rgb).save(rgb_path, format="PNG")
        (write_xyz if cloud_format == "xyz" else write_xyzb)(scene.cloud, cloud_path)
        examples.append(Example(i + 1, f"{stem}.png", config.width, config.height, scene.annotations,
                                rgb_path=rgb_path, cloud_path=cloud_path))
        manifest.append({
            "id": i + 1, "file_name": f"{stem}.png", "num_points": len(scene.cloud),
            "objects": [{"class_id": a.class_id, "bbox": list(a.bbox)} for a in scene.annotations],
        })
    ds = Dataset(examples, ClassCatalog(), out)
    save_coco(ds, out / "annotations.json")
    (out / "manifest.json").write_text(json.dumps({"seed": seed, "n": n, "scenes": manifest}, indent=1) + "\n")
    save_calibration(config.calibration, out / "calib.json")
    return ds
