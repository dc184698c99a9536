"""Point-cloud containers and deterministic spatial kernels.

All kernels are brute force over pairwise distances and break ties by the
smallest index, so results are a pure function of the inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Tensor, mul, take, tsum

SCENE_MAGIC = "MMASCENE"
SCENE_VERSION = 1
INTERP_EPS = 1e-8


class SceneFormatError(ValueError):
    """A scene file could not be parsed; the message names line and field."""


@dataclass
class ObjectRecord:
    class_id: int
    center: np.ndarray
    extent: np.ndarray
    weak_label: np.ndarray | None = None

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.extent = np.asarray(self.extent, dtype=np.float64).reshape(3)
        if self.weak_label is None:
            self.weak_label = self.center.copy()
        self.weak_label = np.asarray(self.weak_label, dtype=np.float64).reshape(3)
        if not np.all(self.extent > 0):
            raise ValueError(f"object extent must be positive, got {self.extent}")
        if not np.all(np.isfinite(self.weak_label)) or not np.all(np.isfinite(self.center)):
            raise ValueError("object center and weak label must be finite")

    @property
    def max_extent(self) -> float:
        return float(self.extent.max())


@dataclass
class PointCloud:
    positions: np.ndarray
    features: np.ndarray
    point_labels: np.ndarray | None = None
    objects: list[ObjectRecord] = field(default_factory=list)
    num_classes: int = 0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3 or len(self.positions) < 1:
            raise ValueError(f"positions must be N x 3 with N >= 1, got {self.positions.shape}")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions must be finite")
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features.reshape(-1, 1)
        if self.features.shape[0] != len(self.positions):
            raise ValueError("features must have one row per point")
        if self.point_labels is not None:
            self.point_labels = np.asarray(self.point_labels, dtype=np.int64)
            if self.point_labels.shape != (len(self.positions),):
                raise ValueError("point_labels must have length N")
            if self.num_classes and (self.point_labels.min() < 0 or self.point_labels.max() >= self.num_classes):
                raise ValueError(f"point labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def translated(self, offset) -> "PointCloud":
        """Copy with positions, object centers and weak labels shifted by ``offset``."""
        offset = np.asarray(offset, dtype=np.float64)
        objs = [
            ObjectRecord(o.class_id, o.center + offset, o.extent.copy(), o.weak_label + offset)
            for o in self.objects
        ]
        labels = None if self.point_labels is None else self.point_labels.copy()
        return PointCloud(self.positions + offset, self.features.copy(), labels, objs, self.num_classes)


@dataclass(frozen=True)
class NeighborhoodIndex:
    """k source indices per query, ascending by distance with index tie-break."""

    indices: np.ndarray
    source_count: int

    def __post_init__(self):
        idx = self.indices
        if idx.ndim != 2 or idx.shape[1] < 1:
            raise ValueError("neighborhood index must be query_count x k with k >= 1")
        if idx.size and (idx.min() < 0 or idx.max() >= self.source_count):
            raise IndexError("neighborhood index out of range")

    @property
    def query_count(self) -> int:
        return self.indices.shape[0]

    @property
    def k(self) -> int:
        return self.indices.shape[1]


def pairwise_sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # difference form (not the |a|^2+|b|^2-2ab expansion) so translations cancel exactly
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("qsd,qsd->qs", diff, diff)


def farthest_point_sample(positions: np.ndarray, m: int, start: int = 0) -> np.ndarray:
    """Greedy max-min subset of ``m`` indices, beginning at ``start``."""
    pos = np.asarray(positions, dtype=np.float64)
    n = len(pos)
    if m < 1 or m > n:
        raise ValueError(f"cannot sample {m} of {n} points")
    if not 0 <= start < n:
        raise ValueError(f"start index {start} outside [0, {n})")
    selected = np.empty(m, dtype=np.int64)
    selected[0] = start
    diff = pos - pos[start]
    mind = np.einsum("nd,nd->n", diff, diff)
    for i in range(1, m):
        nxt = int(np.argmax(mind))  # first maximum -> smallest index on ties
        selected[i] = nxt
        diff = pos - pos[nxt]
        np.minimum(mind, np.einsum("nd,nd->n", diff, diff), out=mind)
    return selected


def knn_query(source: np.ndarray, queries: np.ndarray, k: int) -> NeighborhoodIndex:
    source = np.asarray(source, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    s = len(source)
    if k < 1 or k > s:
        raise ValueError(f"k={k} must lie in [1, {s}]")
    d2 = pairwise_sq_dist(queries, source)
    # stable sort keeps ascending index order among equal distances
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return NeighborhoodIndex(order.astype(np.int64), s)


def group_features(features: Tensor, index: NeighborhoodIndex) -> Tensor:
    """Gather ``features[index[q][j]]`` into a Q x k x C tensor."""
    if features.shape[0] != index.source_count:
        raise IndexError(
            f"index built over {index.source_count} points, features have {features.shape[0]}"
        )
    return take(features, index.indices)


def interpolation_weights(
    coarse_pos: np.ndarray, fine_pos: np.ndarray, k: int = 3
) -> tuple[NeighborhoodIndex, np.ndarray]:
    """Inverse-distance weights over the k nearest coarse points of each fine point."""
    coarse_pos = np.asarray(coarse_pos, dtype=np.float64)
    fine_pos = np.asarray(fine_pos, dtype=np.float64)
    if k > len(coarse_pos):
        raise ValueError(f"k={k} exceeds {len(coarse_pos)} coarse points")
    index = knn_query(coarse_pos, fine_pos, k)
    diff = fine_pos[:, None, :] - coarse_pos[index.indices]
    dist = np.sqrt(np.einsum("nkd,nkd->nk", diff, diff))
    inv = 1.0 / (dist + INTERP_EPS)
    return index, inv / inv.sum(axis=1, keepdims=True)


def interpolate_features(
    coarse_pos: np.ndarray,
    coarse_feat: Tensor,
    fine_pos: np.ndarray,
    k: int = 3,
    weights: tuple[NeighborhoodIndex, np.ndarray] | None = None,
) -> Tensor:
    """Propagate coarse features onto ``fine_pos`` by inverse-distance weighting.

    ``weights`` may carry a precomputed result of :func:`interpolation_weights`.
    """
    if not isinstance(coarse_feat, Tensor):
        coarse_feat = Tensor(coarse_feat)
    index, w = weights if weights is not None else interpolation_weights(coarse_pos, fine_pos, k)
    grouped = group_features(coarse_feat, index)
    return tsum(mul(grouped, w[:, :, None].astype(coarse_feat.dtype)), axis=1)


# -- scene files ------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def format_scene(pc: PointCloud) -> str:
    """Canonical text serialization; reals use shortest round-trip repr."""
    n, c = pc.features.shape
    labels = pc.point_labels if pc.point_labels is not None else np.full(n, -1, dtype=np.int64)
    lines = [f"{SCENE_MAGIC} {SCENE_VERSION}", f"points {n} {c} {pc.num_classes}"]
    for p, f, lab in zip(pc.positions, pc.features, labels):
        lines.append(" ".join([*(_fmt(v) for v in p), *(_fmt(v) for v in f), str(int(lab))]))
    lines.append(f"objects {len(pc.objects)}")
    for o in pc.objects:
        vals = [*o.center, *o.extent, *o.weak_label]
        lines.append(" ".join([str(int(o.class_id)), *(_fmt(v) for v in vals)]))
    return "\n".join(lines) + "\n"


def save_scene_file(pc: PointCloud, path) -> None:
    Path(path).write_text(format_scene(pc), encoding="ascii", newline="\n")


def _parse_float(tok: str, lineno: int, name: str) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise SceneFormatError(f"line {lineno}: field {name}: not a number: {tok!r}") from None
    if not math.isfinite(v):
        raise SceneFormatError(f"line {lineno}: field {name}: non-finite value {tok!r}")
    return v


def _parse_int(tok: str, lineno: int, name: str) -> int:
    try:
        return int(tok)
    except ValueError:
        raise SceneFormatError(f"line {lineno}: field {name}: not an integer: {tok!r}") from None


def parse_scene(text: str) -> PointCloud:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()

    def line(i: int) -> list[str]:
        if i >= len(lines):
            raise SceneFormatError(f"line {i + 1}: unexpected end of file")
        return lines[i].split()

    head = line(0)
    if len(head) != 2 or head[0] != SCENE_MAGIC:
        raise SceneFormatError(f"line 1: expected '{SCENE_MAGIC} {SCENE_VERSION}'")
    if _parse_int(head[1], 1, "version") != SCENE_VERSION:
        raise SceneFormatError(f"line 1: unsupported scene version {head[1]}")
    toks = line(1)
    if len(toks) != 4 or toks[0] != "points":
        raise SceneFormatError("line 2: expected 'points N C num_classes'")
    n, c, num_classes = (_parse_int(t, 2, f) for t, f in zip(toks[1:], ("N", "C", "num_classes")))
    if n < 1 or c < 0:
        raise SceneFormatError(f"line 2: invalid sizes N={n} C={c}")
    pos = np.empty((n, 3))
    feat = np.empty((n, c))
    labels = np.empty(n, dtype=np.int64)
    names = ["x", "y", "z", *(f"f{i + 1}" for i in range(c)), "label"]
    for i in range(n):
        lineno = i + 3
        toks = line(i + 2)
        if len(toks) != 4 + c:
            raise SceneFormatError(f"line {lineno}: expected {4 + c} fields, got {len(toks)}")
        vals = [_parse_float(t, lineno, nm) for t, nm in zip(toks[:-1], names[:-1])]
        pos[i] = vals[:3]
        feat[i] = vals[3:]
        labels[i] = _parse_int(toks[-1], lineno, "label")
        if num_classes and not (labels[i] == -1 or 0 <= labels[i] < num_classes):
            raise SceneFormatError(f"line {lineno}: field label: {labels[i]} outside [0, {num_classes})")
    has_labels = not np.all(labels == -1)
    if has_labels and np.any(labels == -1):
        raise SceneFormatError("point labels must be given for all points or none")
    k_line = n + 2
    toks = line(k_line)
    if len(toks) != 2 or toks[0] != "objects":
        raise SceneFormatError(f"line {k_line + 1}: expected 'objects K'")
    k = _parse_int(toks[1], k_line + 1, "K")
    objects = []
    onames = ["cx", "cy", "cz", "ex", "ey", "ez", "wx", "wy", "wz"]
    for j in range(k):
        lineno = k_line + 2 + j
        toks = line(k_line + 1 + j)
        if len(toks) != 10:
            raise SceneFormatError(f"line {lineno}: expected 10 object fields, got {len(toks)}")
        cls = _parse_int(toks[0], lineno, "class")
        v = [_parse_float(t, lineno, nm) for t, nm in zip(toks[1:], onames)]
        if min(v[3:6]) <= 0:
            raise SceneFormatError(f"line {lineno}: field extent: components must be positive")
        objects.append(ObjectRecord(cls, v[0:3], v[3:6], v[6:9]))
    if k_line + 1 + k != len(lines):
        raise SceneFormatError(f"line {k_line + 2 + k}: trailing content")
    return PointCloud(pos, feat, labels if has_labels else None, objects, num_classes)


def load_scene_file(path) -> PointCloud:
    return parse_scene(Path(path).read_text(encoding="ascii"))
