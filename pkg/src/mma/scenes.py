"""Synthetic primitive scenes and weak-label jitter."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .geometry import ObjectRecord, PointCloud

SHAPES = ("box", "sphere", "cylinder")
BACKGROUND = len(SHAPES)
NUM_POINT_CLASSES = len(SHAPES) + 1
JITTER_DISTRIBUTIONS = ("uniform-ball", "gaussian")


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    num_points: int = 512
    num_objects: int = 1
    shapes: tuple[str, ...] = SHAPES
    extent_range: tuple[float, float] = (0.5, 1.5)
    clutter_fraction: float = 0.0
    noise_sigma: float = 0.0
    seed: int = 0
    room_size: tuple[float, float, float] = (4.0, 4.0, 2.0)
    rotate: bool = True
    feature_kind: str = "centered"  # "centered" positions or constant "ones"

    def __post_init__(self):
        if self.num_points < 1 or self.num_objects < 0:
            raise ValueError("num_points must be >= 1 and num_objects >= 0")
        if not self.shapes or any(s not in SHAPES for s in self.shapes):
            raise ValueError(f"shapes must be drawn from {SHAPES}")
        lo, hi = self.extent_range
        if not 0 < lo <= hi:
            raise ValueError(f"extent range must satisfy 0 < lo <= hi, got {self.extent_range}")
        if not 0 <= self.clutter_fraction <= 1:
            raise ValueError("clutter_fraction must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.num_objects and self.clutter_fraction == 1:
            raise ValueError("objects need at least one surface point")
        if self.feature_kind not in ("centered", "ones"):
            raise ValueError(f"unknown feature kind {self.feature_kind!r}")

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "SceneSpec":
        conv = {
            "num_points": int,
            "num_objects": int,
            "seed": int,
            "clutter_fraction": float,
            "noise_sigma": float,
            "shapes": lambda v: tuple(s.strip() for s in v.split(",") if s.strip()),
            "extent_range": lambda v: tuple(float(x) for x in v.split(",")),
            "room_size": lambda v: tuple(float(x) for x in v.split(",")),
            "rotate": lambda v: v.strip().lower() in ("1", "true", "yes"),
            "feature_kind": str.strip,
        }
        unknown = set(kv) - set(conv)
        if unknown:
            raise ValueError(f"unknown scene keys: {sorted(unknown)}")
        return cls(**{k: conv[k](v) for k, v in kv.items()})


def _yaw_matrix(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def sample_surface(shape: str, extent: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points uniform by area on a primitive centred at the origin.

    ``extent`` is the full axis-aligned size; spheres use ``extent[0]`` as the
    diameter, cylinders ``extent[0]`` as diameter and ``extent[2]`` as height.
    """
    ext = np.asarray(extent, dtype=np.float64)
    if shape == "box":
        h = ext / 2
        areas = np.array([ext[1] * ext[2], ext[0] * ext[2], ext[0] * ext[1]])
        axis = rng.choice(3, size=n, p=areas / areas.sum())
        pts = rng.uniform(-h, h, size=(n, 3))
        sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
        pts[np.arange(n), axis] = sign * h[axis]
        return pts
    if shape == "sphere":
        v = rng.normal(size=(n, 3))
        return v / np.linalg.norm(v, axis=1, keepdims=True) * (ext[0] / 2)
    if shape == "cylinder":
        r, hh = ext[0] / 2, ext[2] / 2
        side, cap = 2 * math.pi * r * ext[2], 2 * math.pi * r * r
        on_side = rng.random(n) < side / (side + cap)
        theta = rng.uniform(0, 2 * math.pi, n)
        rad = np.where(on_side, r, r * np.sqrt(rng.random(n)))
        z = np.where(on_side, rng.uniform(-hh, hh, n), np.where(rng.random(n) < 0.5, -hh, hh))
        return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)
    raise ValueError(f"unknown shape {shape!r}")


def _object_extent(shape: str, lo: float, hi: float, rng) -> np.ndarray:
    if shape == "box":
        return rng.uniform(lo, hi, 3)
    if shape == "sphere":
        return np.full(3, rng.uniform(lo, hi))
    d, h = rng.uniform(lo, hi, 2)
    return np.array([d, d, h])


def generate_scene(spec: SceneSpec, forced_shapes: tuple[str, ...] | None = None) -> PointCloud:
    """Place non-overlapping primitives on the floor of a room and sample them.

    Points are shuffled; labels are the owning object's class or
    ``BACKGROUND`` for clutter.  ``forced_shapes`` pins the shape of each
    object instead of drawing it from ``spec.shapes``.
    """
    rng = np.random.default_rng(spec.seed)
    room = np.asarray(spec.room_size, dtype=np.float64)
    placed: list[tuple[str, np.ndarray, np.ndarray, float, float]] = []
    for i in range(spec.num_objects):
        shape = forced_shapes[i] if forced_shapes else spec.shapes[rng.integers(len(spec.shapes))]
        ext = _object_extent(shape, *spec.extent_range, rng)
        yaw = rng.uniform(0, 2 * math.pi) if spec.rotate else 0.0
        radius = 0.5 * math.hypot(ext[0], ext[1])
        half = np.maximum(room[:2] / 2 - radius, 0.0)
        for _ in range(1000):
            xy = rng.uniform(-half, half)
            if all(np.hypot(*(xy - c[:2])) >= radius + r for _, c, _, r, _ in placed):
                break
        else:
            raise PlacementError(f"could not place object {i} without overlap after 1000 tries")
        center = np.array([xy[0], xy[1], ext[2] / 2])
        placed.append((shape, center, ext, radius, yaw))

    n_clutter = round(spec.num_points * spec.clutter_fraction) if spec.num_objects else spec.num_points
    n_obj = spec.num_points - n_clutter
    chunks, labels, objects = [], [], []
    for i, (shape, center, ext, _, yaw) in enumerate(placed):
        count = n_obj // len(placed) + (1 if i < n_obj % len(placed) else 0)
        pts = sample_surface(shape, ext, count, rng)
        if spec.rotate:
            pts = pts @ _yaw_matrix(yaw).T
        if spec.noise_sigma > 0:
            pts = pts + rng.normal(scale=spec.noise_sigma, size=pts.shape)
        chunks.append(pts + center)
        labels.append(np.full(count, SHAPES.index(shape)))
        objects.append(ObjectRecord(SHAPES.index(shape), center, ext))
    if n_clutter:
        lo = np.array([-room[0] / 2, -room[1] / 2, 0.0])
        chunks.append(rng.uniform(lo, lo + room, size=(n_clutter, 3)))
        labels.append(np.full(n_clutter, BACKGROUND))
    pos = np.concatenate(chunks)
    lab = np.concatenate(labels).astype(np.int64)
    perm = rng.permutation(len(pos))
    pos, lab = pos[perm], lab[perm]
    return PointCloud(pos, scene_features(pos, spec.feature_kind), lab, objects, NUM_POINT_CLASSES)


def scene_features(pos: np.ndarray, kind: str = "centered") -> np.ndarray:
    if kind == "ones":
        return np.ones((len(pos), 1))
    return pos - pos.mean(axis=0)


def scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def make_dataset(spec: SceneSpec, count: int, balanced: bool = False) -> list[PointCloud]:
    """``count`` scenes with per-scene seeds derived from ``spec.seed``.

    ``balanced`` cycles single-object scenes through ``spec.shapes`` so every
    class appears equally often.
    """
    scenes = []
    for i in range(count):
        sub = replace(spec, seed=scene_seed(spec.seed, i))
        forced = None
        if balanced:
            forced = (spec.shapes[i % len(spec.shapes)],) * spec.num_objects
        scenes.append(generate_scene(sub, forced))
    return scenes


# -- jitter -----------------------------------------------------------------


@dataclass(frozen=True)
class JitterSpec:
    fraction: float = 0.0
    distribution: str = "uniform-ball"
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.fraction <= 1:
            raise ValueError(f"jitter fraction must lie in [0, 1], got {self.fraction}")
        if self.distribution not in JITTER_DISTRIBUTIONS:
            raise ValueError(f"distribution must be one of {JITTER_DISTRIBUTIONS}")


def _unit_displacement(distribution: str, rng: np.random.Generator) -> np.ndarray:
    """Displacement for a radius bound of 1, independent of the jitter level."""
    if distribution == "uniform-ball":
        v = rng.normal(size=3)
        v /= np.linalg.norm(v)
        return v * rng.random() ** (1.0 / 3.0)
    while True:
        z = rng.normal(size=3)
        # sigma = bound / 2, truncated at the bound
        if np.linalg.norm(z) <= 2.0:
            return z / 2.0


def inject_jitter(objects: list[ObjectRecord], spec: JitterSpec) -> list[ObjectRecord]:
    """Copies of ``objects`` whose weak labels are displaced from the true centers.

    The displacement bound is ``fraction * max(extent)``.  Draws do not depend
    on ``fraction``, so the same seed moves labels along the same directions
    at every level.
    """
    rng = np.random.default_rng(spec.seed)
    out = []
    for o in objects:
        u = _unit_displacement(spec.distribution, rng)
        if spec.fraction == 0:
            weak = o.center.copy()
        else:
            weak = o.center + u * (spec.fraction * o.max_extent)
        out.append(ObjectRecord(o.class_id, o.center.copy(), o.extent.copy(), weak))
    return out


def jitter_dataset(scenes: list[PointCloud], spec: JitterSpec) -> list[PointCloud]:
    """Scenes sharing positions/features but with freshly jittered weak labels."""
    out = []
    for i, pc in enumerate(scenes):
        objs = inject_jitter(pc.objects, replace(spec, seed=scene_seed(spec.seed, i)))
        out.append(PointCloud(pc.positions, pc.features, pc.point_labels, objs, pc.num_classes))
    return out
