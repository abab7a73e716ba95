"""Synthetic parametric shape dataset for desk-scale experiments.

Eight surface samplers; each cloud is sampled deterministically from a
per-cloud RNG derived from (seed, class, sample index), gets optional
additive coordinate noise, and is normalized.  The train/test split
shuffles globally with the dataset seed; the test share is
floor(0.2 * total).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .geometry import PointCloud, normalize

SHAPE_NAMES = ("sphere", "cube", "cylinder", "torus", "cone", "pyramid",
               "ellipsoid", "helix")


def _unit_sphere(rng: np.random.Generator, m: int) -> np.ndarray:
    v = rng.normal(size=(m, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _cube(rng, m):
    # uniform over the six faces of [-1, 1]^3
    face = rng.integers(0, 6, size=m)
    uv = rng.uniform(-1, 1, size=(m, 2))
    pts = np.empty((m, 3))
    axis = face % 3
    sign = np.where(face < 3, 1.0, -1.0)
    for i in range(m):
        coords = [0.0, 0.0, 0.0]
        coords[axis[i]] = sign[i]
        others = [j for j in range(3) if j != axis[i]]
        coords[others[0]], coords[others[1]] = uv[i]
        pts[i] = coords
    return pts


def _cylinder(rng, m):
    # lateral wall and two caps, area-weighted (r=1, h=2)
    lateral_area = 2 * np.pi * 2.0
    cap_area = np.pi
    probs = np.array([lateral_area, cap_area, cap_area])
    probs = probs / probs.sum()
    part = rng.choice(3, size=m, p=probs)
    theta = rng.uniform(0, 2 * np.pi, size=m)
    pts = np.empty((m, 3))
    wall = part == 0
    pts[wall] = np.c_[np.cos(theta[wall]), np.sin(theta[wall]),
                      rng.uniform(-1, 1, size=wall.sum())]
    for which, z in ((1, 1.0), (2, -1.0)):
        capm = part == which
        rr = np.sqrt(rng.uniform(0, 1, size=capm.sum()))
        pts[capm] = np.c_[rr * np.cos(theta[capm]), rr * np.sin(theta[capm]),
                          np.full(capm.sum(), z)]
    return pts


def _torus(rng, m, big_r=1.0, small_r=0.4):
    pts = np.empty((m, 3))
    filled = 0
    while filled < m:
        need = m - filled
        u = rng.uniform(0, 2 * np.pi, size=2 * need)
        v = rng.uniform(0, 2 * np.pi, size=2 * need)
        # rejection keeps the surface measure uniform in v
        keep = rng.uniform(0, 1 + small_r / big_r, size=2 * need) <= \
            1 + (small_r / big_r) * np.cos(v)
        u, v = u[keep][:need], v[keep][:need]
        got = len(u)
        ring = big_r + small_r * np.cos(v)
        pts[filled:filled + got] = np.c_[
            ring * np.cos(u), ring * np.sin(u), small_r * np.sin(v)]
        filled += got
    return pts


def _cone(rng, m):
    # lateral surface plus base disk (r=1, apex at z=1, base at z=-1)
    slant = np.sqrt(1 + 4)
    lateral_area = np.pi * slant
    base_area = np.pi
    p_lat = lateral_area / (lateral_area + base_area)
    lat = rng.uniform(size=m) < p_lat
    theta = rng.uniform(0, 2 * np.pi, size=m)
    pts = np.empty((m, 3))
    rr = np.sqrt(rng.uniform(0, 1, size=m))
    lat_r = rr[lat]
    pts[lat] = np.c_[lat_r * np.cos(theta[lat]), lat_r * np.sin(theta[lat]),
                     1.0 - 2.0 * lat_r]
    base = ~lat
    pts[base] = np.c_[rr[base] * np.cos(theta[base]),
                      rr[base] * np.sin(theta[base]),
                      np.full(base.sum(), -1.0)]
    return pts


def _pyramid(rng, m):
    # square base (side 2) at z=-1, apex at (0, 0, 1)
    apex = np.array([0.0, 0.0, 1.0])
    base = np.array([[-1, -1, -1], [1, -1, -1], [1, 1, -1], [-1, 1, -1]],
                    dtype=float)
    tris = [(base[i], base[(i + 1) % 4], apex) for i in range(4)]
    tris += [(base[0], base[1], base[2]), (base[0], base[2], base[3])]
    areas = np.array([np.linalg.norm(np.cross(b - a, c - a)) / 2
                      for a, b, c in tris])
    which = rng.choice(len(tris), size=m, p=areas / areas.sum())
    r1 = np.sqrt(rng.uniform(size=m))
    r2 = rng.uniform(size=m)
    pts = np.empty((m, 3))
    for i, t in enumerate(which):
        a, b, c = tris[t]
        pts[i] = (1 - r1[i]) * a + r1[i] * (1 - r2[i]) * b + r1[i] * r2[i] * c
    return pts


def _ellipsoid(rng, m):
    return _unit_sphere(rng, m) * np.array([1.0, 0.7, 0.45])


def _helix(rng, m):
    # three turns with a thin tube cross-section
    t = rng.uniform(0, 1, size=m)
    angle = 6 * np.pi * t
    core = np.c_[np.cos(angle), np.sin(angle), 2.0 * t - 1.0]
    tube = rng.normal(scale=0.05, size=(m, 3))
    return core + tube


_SAMPLERS = {
    "sphere": _unit_sphere, "cube": _cube, "cylinder": _cylinder,
    "torus": _torus, "cone": _cone, "pyramid": _pyramid,
    "ellipsoid": _ellipsoid, "helix": _helix,
}


@dataclass(frozen=True)
class DatasetSpec:
    classes: tuple[str, ...] = SHAPE_NAMES
    points: int = 128
    noise: float = 0.0
    samples_per_class: int = 16

    def __post_init__(self):
        unknown = set(self.classes) - set(SHAPE_NAMES)
        if unknown:
            raise ConfigError(f"unknown shape classes {sorted(unknown)}")
        if len(self.classes) < 2:
            raise ConfigError("need at least 2 shape classes")
        if self.samples_per_class < 8:
            raise ConfigError("need at least 8 samples per class")


@dataclass
class SyntheticDataset:
    spec: DatasetSpec
    seed: int
    train: list[PointCloud]
    test: list[PointCloud]

    @property
    def num_classes(self) -> int:
        return len(self.spec.classes)


def sample_shape(name: str, rng: np.random.Generator, m: int,
                 noise: float = 0.0) -> np.ndarray:
    pts = _SAMPLERS[name](rng, m)
    if noise > 0:
        pts = pts + rng.normal(scale=noise, size=pts.shape)
    return pts


def generate_dataset(spec: DatasetSpec, seed: int) -> SyntheticDataset:
    clouds: list[PointCloud] = []
    for label, name in enumerate(spec.classes):
        for idx in range(spec.samples_per_class):
            rng = np.random.default_rng([seed, label, idx])
            pts = sample_shape(name, rng, spec.points, spec.noise)
            clouds.append(normalize(PointCloud(pts, label)))
    total = len(clouds)
    n_test = int(np.floor(0.2 * total))
    order = np.random.default_rng([seed, 10_000]).permutation(total)
    test_idx = set(order[:n_test].tolist())
    train = [clouds[i] for i in range(total) if i not in test_idx]
    test = [clouds[i] for i in range(total) if i in test_idx]
    return SyntheticDataset(spec, seed, train, test)
