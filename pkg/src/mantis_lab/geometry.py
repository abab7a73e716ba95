"""Point-cloud ingestion, normalization, FPS, and KNN patch building.

All routines are pure functions over immutable numpy arrays and use
brute-force distance computation; desk-scale clouds make acceleration
structures pointless.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ArgumentError, ValidationError


@dataclass(frozen=True)
class PointCloud:
    """Raw M x 3 coordinates, optionally labelled with a class index."""

    points: np.ndarray
    label: int | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ValidationError(f"expected (M, 3) points with M >= 1, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValidationError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", pts)

    @property
    def size(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class KeyPoints:
    """Selected key points: indices into the source cloud plus coordinates."""

    indices: np.ndarray
    coords: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if len(np.unique(idx)) != len(idx):
            raise ValidationError("key point indices must be distinct")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "coords", np.asarray(self.coords, dtype=np.float64))

    @property
    def count(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class PatchSet:
    """Local neighborhoods re-centered on their key points.

    ``neighborhoods`` has shape (n, K, 3); row i holds the K nearest
    cloud points to center i, expressed as offsets from that center.
    """

    centers: KeyPoints
    neighborhoods: np.ndarray

    def __post_init__(self):
        nb = np.asarray(self.neighborhoods, dtype=np.float64)
        if nb.ndim != 3 or nb.shape[0] != self.centers.count or nb.shape[2] != 3:
            raise ValidationError(f"bad neighborhood shape {nb.shape}")
        object.__setattr__(self, "neighborhoods", nb)

    @property
    def patch_size(self) -> int:
        return self.neighborhoods.shape[1]


class SeedRule(Enum):
    """How farthest point sampling picks its first point."""

    CENTROID_FARTHEST = "centroid-farthest"
    FIRST_INDEX = "first-index"


def normalize(cloud: PointCloud) -> PointCloud:
    """Center the cloud on its centroid and scale the farthest point to norm 1.

    A single-point (or otherwise degenerate all-equal) cloud maps to the
    origin.
    """
    pts = cloud.points - cloud.points.mean(axis=0)
    radius = np.linalg.norm(pts, axis=1).max()
    if radius > 0:
        pts = pts / radius
    return PointCloud(pts, cloud.label)


def farthest_point_sample(
    cloud: PointCloud,
    n: int,
    seed_rule: SeedRule = SeedRule.CENTROID_FARTHEST,
) -> KeyPoints:
    """Greedy max-min subset selection of ``n`` key points.

    Each selected point maximizes the minimum Euclidean distance to the
    already-selected set.  Ties break toward the lowest index, so the
    result is deterministic.
    """
    pts = cloud.points
    m = pts.shape[0]
    if not 1 <= n <= m:
        raise ArgumentError(f"need 1 <= n <= M, got n={n}, M={m}")
    if seed_rule is SeedRule.CENTROID_FARTHEST:
        # squared distances: max-equivalent, and the comparison stays
        # exact (no sqrt rounding to scramble ties)
        d0 = np.sum((pts - pts.mean(axis=0)) ** 2, axis=1)
        first = int(np.argmax(d0))  # argmax takes the lowest index on ties
    else:
        first = 0
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = first
    min_d2 = np.sum((pts - pts[first]) ** 2, axis=1)
    for i in range(1, n):
        nxt = int(np.argmax(min_d2))
        chosen[i] = nxt
        min_d2 = np.minimum(min_d2, np.sum((pts - pts[nxt]) ** 2, axis=1))
    return KeyPoints(chosen, pts[chosen])


def knn_patches(cloud: PointCloud, centers: KeyPoints, k: int) -> PatchSet:
    """K nearest cloud points per center, re-centered on the center.

    Distance ties break toward the lowest point index (stable sort), so
    neighborhoods are platform-independent.
    """
    pts = cloud.points
    if k > pts.shape[0]:
        raise ArgumentError(f"K={k} exceeds cloud size M={pts.shape[0]}")
    d2 = np.sum((centers.coords[:, None, :] - pts[None, :, :]) ** 2, axis=2)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    neighborhoods = pts[order] - centers.coords[:, None, :]
    return PatchSet(centers, neighborhoods)


# -- plain-text interchange ------------------------------------------------
#
# One point per line, three whitespace-separated decimals; an optional
# header line holding a single integer gives the class label.


def save_pointcloud(cloud: PointCloud, path: str | Path) -> None:
    lines = []
    if cloud.label is not None:
        lines.append(str(int(cloud.label)))
    for p in cloud.points:
        lines.append(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_pointcloud(path: str | Path) -> PointCloud:
    raw = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not raw:
        raise ValidationError(f"empty point cloud file: {path}")
    label = None
    if len(raw[0].split()) == 1:
        label = int(raw[0])
        raw = raw[1:]
    try:
        pts = np.array([[float(v) for v in ln.split()] for ln in raw])
    except ValueError as e:
        raise ValidationError(f"malformed point line in {path}: {e}") from e
    return PointCloud(pts, label)
