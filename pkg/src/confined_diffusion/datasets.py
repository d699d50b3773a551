"""Toy point clouds on boxes and CSV persistence.

Every generator rejects or truncates to its box, so outputs always satisfy the
domain's containment test.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import Box, Domain

CLUSTER_STD = 0.04  # variance 0.2**4


class DatasetError(ValueError):
    pass


class ContainmentViolation(DatasetError):
    def __init__(self, rows):
        self.rows = list(rows)
        shown = ", ".join(str(r) for r in self.rows[:20])
        more = "" if len(self.rows) <= 20 else f" (+{len(self.rows) - 20} more)"
        super().__init__(f"points outside the domain at rows {shown}{more}")


@dataclass
class PointCloud:
    points: np.ndarray
    domain: Optional[Domain] = None
    provenance: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim == 1 and self.points.size == 0:
            dim = self.domain.dim if self.domain is not None else 0
            self.points = self.points.reshape(0, dim)

    def __len__(self):
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def _gaussian_clusters(means, n: int, std: float, box: Box, rng: np.random.Generator) -> np.ndarray:
    """Equal-weight isotropic mixture, rejection-sampled into the box."""
    means = np.asarray(means, dtype=float)
    out, have = [], 0
    while have < n:
        m = max(2 * (n - have), 64)
        comp = rng.integers(0, len(means), size=m)
        y = means[comp] + std * rng.standard_normal((m, means.shape[1]))
        y = y[box.contains(y, tol=0.0)]
        out.append(y)
        have += y.shape[0]
    if not out:
        return np.zeros((0, means.shape[1]))
    return np.concatenate(out)[:n]


def gen_gaussian_mixture(n: int = 4000, seed: int = 0) -> PointCloud:
    """Four side-hugging clusters at (+-3, 0), (0, +-3) inside [-3, 3]^2."""
    box = Box.cube(-3.0, 3.0, 2)
    means = [(3.0, 0.0), (-3.0, 0.0), (0.0, 3.0), (0.0, -3.0)]
    pts = _gaussian_clusters(means, n, CLUSTER_STD, box, np.random.default_rng(seed))
    return PointCloud(pts, box, f"gaussian_mixture(n={n}, seed={seed})")


def gen_two_blob_unit_square(n: int = 2000, seed: int = 0) -> PointCloud:
    """Two clusters at (0.5, 0) and (0.5, 1) inside [0, 1]^2."""
    box = Box.cube(0.0, 1.0, 2)
    pts = _gaussian_clusters([(0.5, 0.0), (0.5, 1.0)], n, CLUSTER_STD, box, np.random.default_rng(seed))
    return PointCloud(pts, box, f"two_blob(n={n}, seed={seed})")


def _jittered(curve_pts: np.ndarray, jitter: float, box: Box, rng: np.random.Generator) -> np.ndarray:
    y = curve_pts + jitter * rng.standard_normal(curve_pts.shape)
    return box.clip(y)


def gen_wheel_like(n: int = 1232, seed: int = 0) -> PointCloud:
    """Outer ring, hub ring and six spokes in [-3, 3]^2."""
    box = Box.cube(-3.0, 3.0, 2)
    rng = np.random.default_rng(seed)
    r_out, r_hub, n_spokes = 2.5, 0.5, 6
    lengths = np.array([2 * math.pi * r_out, 2 * math.pi * r_hub] + [r_out - r_hub] * n_spokes)
    part = rng.choice(lengths.size, size=n, p=lengths / lengths.sum())
    u = rng.random(n)
    pts = np.empty((n, 2))
    ring = part == 0
    hub = part == 1
    spoke = part >= 2
    phi = 2 * math.pi * u
    pts[ring] = r_out * np.c_[np.cos(phi[ring]), np.sin(phi[ring])]
    pts[hub] = r_hub * np.c_[np.cos(phi[hub]), np.sin(phi[hub])]
    ang = 2 * math.pi * (part[spoke] - 2) / n_spokes
    rad = r_hub + (r_out - r_hub) * u[spoke]
    pts[spoke] = rad[:, None] * np.c_[np.cos(ang), np.sin(ang)]
    return PointCloud(_jittered(pts, 0.05, box, rng), box, f"wheel(n={n}, seed={seed})")


# corridor segments (x0, y0, x1, y1) of a small axis-aligned maze
_MAZE = np.array([
    (-2.5, -2.5, 2.5, -2.5), (2.5, -2.5, 2.5, 2.5), (2.5, 2.5, -2.5, 2.5), (-2.5, 2.5, -2.5, -1.0),
    (-2.5, -1.0, 1.0, -1.0), (1.0, -1.0, 1.0, 1.0), (1.0, 1.0, -1.0, 1.0), (-1.0, 1.0, -1.0, 0.0),
    (-1.0, 0.0, 0.0, 0.0),
])


def gen_maze_like(n: int = 825, seed: int = 0) -> PointCloud:
    """Points along axis-aligned corridor segments in [-3, 3]^2."""
    box = Box.cube(-3.0, 3.0, 2)
    rng = np.random.default_rng(seed)
    seg = _MAZE
    lengths = np.abs(seg[:, 2] - seg[:, 0]) + np.abs(seg[:, 3] - seg[:, 1])
    k = rng.choice(len(seg), size=n, p=lengths / lengths.sum())
    u = rng.random(n)[:, None]
    pts = seg[k, :2] + u * (seg[k, 2:] - seg[k, :2])
    return PointCloud(_jittered(pts, 0.05, box, rng), box, f"maze(n={n}, seed={seed})")


def gen_flower_like(n: int = 1185, seed: int = 0, petals: int = 5) -> PointCloud:
    """Rose curve r = 4 |cos(k phi)| with k petals-per-half in [-5, 5]^2."""
    box = Box.cube(-5.0, 5.0, 2)
    rng = np.random.default_rng(seed)
    phi = 2 * math.pi * rng.random(n)
    r = 4.0 * np.abs(np.cos(petals * phi / 2)) * np.sqrt(rng.random(n))
    pts = r[:, None] * np.c_[np.cos(phi), np.sin(phi)]
    return PointCloud(_jittered(pts, 0.05, box, rng), box, f"flower(n={n}, seed={seed})")


GENERATORS = {
    "gm": gen_gaussian_mixture,
    "two_blob": gen_two_blob_unit_square,
    "wheel": gen_wheel_like,
    "maze": gen_maze_like,
    "flower": gen_flower_like,
}
DATASET_DOMAINS = {
    "gm": Box.cube(-3.0, 3.0, 2),
    "two_blob": Box.cube(0.0, 1.0, 2),
    "wheel": Box.cube(-3.0, 3.0, 2),
    "maze": Box.cube(-3.0, 3.0, 2),
    "flower": Box.cube(-5.0, 5.0, 2),
}
DEFAULT_COUNTS = {"gm": 4000, "two_blob": 2000, "wheel": 1232, "maze": 825, "flower": 1185}


def generate_dataset(name: str, n: Optional[int] = None, seed: int = 0) -> PointCloud:
    if name not in GENERATORS:
        raise DatasetError(f"unknown dataset {name!r}; expected one of {tuple(GENERATORS)}")
    return GENERATORS[name](DEFAULT_COUNTS[name] if n is None else n, seed)


# --------------------------------------------------------------------------
# CSV


def save_csv(cloud, path):
    """Write ``x0,...,x{d-1}`` with 17 significant digits."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
    if pts.ndim != 2:
        raise DatasetError("points must be a 2-D array")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i}" for i in range(pts.shape[1])])
        for row in pts:
            w.writerow([f"{v:.17g}" for v in row])


def load_csv(path, domain: Optional[Domain] = None) -> PointCloud:
    """Read a point cloud; with a domain, rows outside its closure are an error (1-based row numbers)."""
    text = Path(path).read_text()
    if not text.strip():
        return PointCloud(np.zeros((0, domain.dim if domain is not None else 0)), domain, str(path))
    rows = list(csv.reader(text.splitlines()))
    header = [c.strip() for c in rows[0]]
    if header != [f"x{i}" for i in range(len(header))]:
        raise DatasetError(f"bad header {header!r}; expected x0,...,x{{d-1}}")
    dim = len(header)
    pts = np.empty((len(rows) - 1, dim))
    for i, row in enumerate(rows[1:], start=1):
        if len(row) != dim:
            raise DatasetError(f"row {i} has {len(row)} fields, expected {dim}")
        try:
            pts[i - 1] = [float(c) for c in row]
        except ValueError as exc:
            raise DatasetError(f"row {i}: {exc}") from None
        if not np.all(np.isfinite(pts[i - 1])):
            raise DatasetError(f"row {i} has non-finite values")
    if domain is not None:
        if dim != domain.dim:
            raise DatasetError(f"file has dimension {dim}, domain has {domain.dim}")
        bad = np.flatnonzero(~domain.contains(pts, tol=0.0)) if len(pts) else []
        if len(bad):
            raise ContainmentViolation(np.asarray(bad) + 1)
    return PointCloud(pts, domain, str(path))
