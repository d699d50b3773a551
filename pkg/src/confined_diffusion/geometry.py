"""Constraint sets and boundary queries.

Two domain shapes are supported: an axis-aligned box and a Euclidean ball.
All batched queries take arrays of shape ``(n, d)``; single points of shape
``(d,)`` are accepted wherever that makes sense.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

CONTAIN_TOL = 1e-12
BOUNDARY_TOL = 1e-9
MAX_REFLECTIONS = 64


class GeometryError(ValueError):
    pass


class NonFiniteError(GeometryError, FloatingPointError):
    pass


@dataclass(frozen=True)
class SegmentHit:
    tau: float
    point: np.ndarray
    normal: np.ndarray


class Domain:
    dim: int

    def _check_dim(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise GeometryError(f"expected points of dimension {self.dim}, got shape {x.shape}")
        return x

    def contains(self, x, tol: float = CONTAIN_TOL):
        raise NotImplementedError

    def project(self, x):
        raise NotImplementedError

    def boundary_point(self, x):
        """Nearest point of the boundary (differs from `project` for interior x)."""
        raise NotImplementedError

    def dist_to_boundary(self, x):
        x = self._check_dim(x)
        return np.linalg.norm(x - self.boundary_point(x), axis=-1)

    def normal_at(self, p):
        raise NotImplementedError

    def segment_exit(self, y, z, h) -> Optional[SegmentHit]:
        raise NotImplementedError

    def clip(self, x):
        """Guard against round-off: returns a copy of x with every row in the closure."""
        raise NotImplementedError

    def bounding_box(self):
        raise NotImplementedError

    def volume(self) -> float:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


class Box(Domain):
    """Axis-aligned hyper-rectangle ``[lo_1, hi_1] x ... x [lo_d, hi_d]``."""

    def __init__(self, lo, hi):
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise GeometryError("lo and hi must be 1-d arrays of equal length")
        if not np.all(lo < hi):
            raise GeometryError("box requires lo < hi on every axis")
        self.lo = lo
        self.hi = hi
        self.dim = lo.size

    @classmethod
    def cube(cls, a: float, b: float, dim: int) -> "Box":
        return cls(np.full(dim, a), np.full(dim, b))

    def __repr__(self):
        return f"Box(lo={self.lo.tolist()}, hi={self.hi.tolist()})"

    def __eq__(self, other):
        return isinstance(other, Box) and np.array_equal(self.lo, other.lo) and np.array_equal(self.hi, other.hi)

    def contains(self, x, tol: float = CONTAIN_TOL):
        x = self._check_dim(x)
        return np.all((x >= self.lo - tol) & (x <= self.hi + tol), axis=-1)

    def project(self, x):
        x = self._check_dim(x)
        return np.clip(x, self.lo, self.hi)

    def clip(self, x):
        return np.clip(x, self.lo, self.hi)

    def boundary_point(self, x):
        x = self._check_dim(x)
        x2 = np.atleast_2d(x)
        out = np.clip(x2, self.lo, self.hi)
        inside = np.all((x2 > self.lo) & (x2 < self.hi), axis=-1)
        if np.any(inside):
            xi = x2[inside]
            dlo = xi - self.lo
            dhi = self.hi - xi
            axis = np.argmin(np.minimum(dlo, dhi), axis=1)
            rows = np.arange(xi.shape[0])
            to_hi = dhi[rows, axis] < dlo[rows, axis]
            q = xi.copy()
            q[rows, axis] = np.where(to_hi, self.hi[axis], self.lo[axis])
            out[inside] = q
        return out.reshape(x.shape)

    def normal_at(self, p):
        """Outward normal at a boundary point.

        At edges and corners the face with the largest penetration wins; ties go
        to the lowest axis index.
        """
        p = self._check_dim(p)
        single = p.ndim == 1
        p2 = np.atleast_2d(p)
        over_hi = p2 - self.hi
        under_lo = self.lo - p2
        pen = np.maximum(over_hi, under_lo)  # signed: >= -tol on an active face
        if np.any(np.abs(np.max(pen, axis=1)) > BOUNDARY_TOL):
            raise GeometryError("normal_at called with a point off the boundary")
        axis = np.argmax(pen, axis=1)
        rows = np.arange(p2.shape[0])
        sign = np.where(over_hi[rows, axis] >= under_lo[rows, axis], 1.0, -1.0)
        n = np.zeros_like(p2)
        n[rows, axis] = sign
        return n[0] if single else n

    def outward_normal_of_exterior(self, x):
        """Unit vector (x - project(x)) / |x - project(x)| for exterior rows, zeros elsewhere."""
        x = self._check_dim(x)
        diff = x - np.clip(x, self.lo, self.hi)
        d = np.linalg.norm(diff, axis=-1)
        safe = np.where(d > 0, d, 1.0)
        return diff / safe[..., None], d

    def exit_times(self, y, z):
        """Per-row time until the ray y + t z leaves the box, and the axis/sign hit."""
        with np.errstate(divide="ignore", invalid="ignore"):
            t_hi = np.where(z > 0, (self.hi - y) / z, np.inf)
            t_lo = np.where(z < 0, (self.lo - y) / z, np.inf)
        t_axis = np.minimum(t_hi, t_lo)
        t_axis = np.maximum(t_axis, 0.0)
        axis = np.argmin(t_axis, axis=-1)
        rows = np.arange(y.shape[0])
        tau = t_axis[rows, axis]
        sign = np.where(t_hi[rows, axis] <= t_lo[rows, axis], 1.0, -1.0)
        return tau, axis, sign

    def segment_exit(self, y, z, h) -> Optional[SegmentHit]:
        y = self._check_dim(y)
        z = np.asarray(z, dtype=float)
        if not np.any(z):
            if not self.contains(y):
                raise GeometryError("zero direction from a point outside the domain")
            return None
        tau, axis, sign = self.exit_times(y[None, :], z[None, :])
        tau = float(tau[0])
        if tau >= h:
            return None
        point = y + tau * z
        a = int(axis[0])
        point[a] = self.hi[a] if sign[0] > 0 else self.lo[a]
        normal = np.zeros(self.dim)
        normal[a] = sign[0]
        return SegmentHit(tau=tau, point=point, normal=normal)

    def bounding_box(self):
        return self.lo.copy(), self.hi.copy()

    def volume(self) -> float:
        return float(np.prod(self.hi - self.lo))

    def to_dict(self) -> dict:
        return {"type": "box", "lo": self.lo.tolist(), "hi": self.hi.tolist()}


class Ball(Domain):
    """Closed Euclidean ball."""

    def __init__(self, center, radius: float):
        center = np.atleast_1d(np.asarray(center, dtype=float))
        if center.ndim != 1:
            raise GeometryError("center must be a point")
        if not radius > 0:
            raise GeometryError("ball radius must be positive")
        self.center = center
        self.radius = float(radius)
        self.dim = center.size

    def __repr__(self):
        return f"Ball(center={self.center.tolist()}, radius={self.radius})"

    def __eq__(self, other):
        return isinstance(other, Ball) and np.array_equal(self.center, other.center) and self.radius == other.radius

    def contains(self, x, tol: float = CONTAIN_TOL):
        x = self._check_dim(x)
        return np.linalg.norm(x - self.center, axis=-1) <= self.radius + tol

    def _radial(self, x):
        rel = x - self.center
        r = np.linalg.norm(rel, axis=-1)
        return rel, r

    def project(self, x):
        x = self._check_dim(x)
        rel, r = self._radial(x)
        scale = np.where(r > self.radius, self.radius / np.where(r > 0, r, 1.0), 1.0)
        return self.clip(self.center + rel * scale[..., None])

    def clip(self, x):
        x = np.array(x, dtype=float, copy=True)
        rel, r = self._radial(x)
        bad = r > self.radius
        while np.any(bad):
            x[bad] = self.center + rel[bad] * (np.nextafter(self.radius, 0.0) / r[bad])[..., None]
            rel, r = self._radial(x)
            bad = r > self.radius
        return x

    def boundary_point(self, x):
        x = self._check_dim(x)
        rel, r = self._radial(x)
        if np.any(r == 0):
            rel = np.where((r == 0)[..., None], np.eye(self.dim)[0], rel)
            r = np.where(r == 0, 1.0, r)
        return self.center + rel * (self.radius / r)[..., None]

    def normal_at(self, p):
        p = self._check_dim(p)
        rel, r = self._radial(p)
        if np.any(np.abs(r - self.radius) > BOUNDARY_TOL):
            raise GeometryError("normal_at called with a point off the boundary")
        return rel / r[..., None]

    def outward_normal_of_exterior(self, x):
        x = self._check_dim(x)
        diff = x - self.project(x)
        d = np.linalg.norm(diff, axis=-1)
        rel, r = self._radial(x)
        n = rel / np.where(r > 0, r, 1.0)[..., None]
        n = np.where((d > 0)[..., None], n, 0.0)
        return n, d

    def exit_times(self, y, z):
        """Largest root of |y + t z - c| = r per row (inf for zero z)."""
        rel = y - self.center
        a = np.einsum("ij,ij->i", z, z)
        b = np.einsum("ij,ij->i", rel, z)
        c = np.einsum("ij,ij->i", rel, rel) - self.radius**2
        c = np.minimum(c, 0.0)  # start point is in the closure
        with np.errstate(divide="ignore", invalid="ignore"):
            disc = np.sqrt(np.maximum(b * b - a * c, 0.0))
            # numerically stable form of (-b + disc) / a
            tau = np.where(b > 0, -c / (b + disc), (disc - b) / a)
        tau = np.where(a > 0, np.maximum(tau, 0.0), np.inf)
        return tau

    def segment_exit(self, y, z, h) -> Optional[SegmentHit]:
        y = self._check_dim(y)
        z = np.asarray(z, dtype=float)
        if not np.any(z):
            if not self.contains(y):
                raise GeometryError("zero direction from a point outside the domain")
            return None
        tau = float(self.exit_times(y[None, :], z[None, :])[0])
        if tau >= h:
            return None
        point = self.boundary_point(y + tau * z)
        return SegmentHit(tau=tau, point=point, normal=self.normal_at(point))

    def bounding_box(self):
        return self.center - self.radius, self.center + self.radius

    def volume(self) -> float:
        from math import gamma, pi

        return pi ** (self.dim / 2) / gamma(self.dim / 2 + 1) * self.radius**self.dim

    def to_dict(self) -> dict:
        return {"type": "ball", "center": self.center.tolist(), "radius": self.radius}


def domain_from_dict(spec: dict) -> Domain:
    kind = spec.get("type")
    if kind == "box":
        extra = set(spec) - {"type", "lo", "hi"}
        if extra:
            raise GeometryError(f"unknown box keys: {sorted(extra)}")
        return Box(spec["lo"], spec["hi"])
    if kind == "ball":
        extra = set(spec) - {"type", "center", "radius"}
        if extra:
            raise GeometryError(f"unknown ball keys: {sorted(extra)}")
        return Ball(spec["center"], spec["radius"])
    raise GeometryError(f"unknown domain type {kind!r}")


def specular_reflect(v, n):
    """Mirror v in the plane with unit normal n: v - 2 <n, v> n. Works row-wise.

    Evaluated in extended precision (dividing by |n|^2 to absorb rounding in n)
    so the speed is preserved to a couple of ulps.
    """
    vl = np.asarray(v, dtype=np.longdouble)
    nl = np.asarray(n, dtype=np.longdouble)
    coef = 2 * np.sum(vl * nl, axis=-1, keepdims=True) / np.sum(nl * nl, axis=-1, keepdims=True)
    return (vl - coef * nl).astype(float)


def fold_box(box: Box, y_aux, return_flips: bool = False):
    """Reflect each coordinate back into ``[lo_i, hi_i]``.

    Coordinates beyond ``hi`` map to ``2 hi - y`` and below ``lo`` to ``2 lo - y``;
    the map repeats until the coordinate lands inside, so overshoots longer than
    the box width are handled. With ``return_flips`` the per-coordinate parity of
    the number of folds is returned as well (odd parity means the velocity
    component flips sign).
    """
    y = np.array(y_aux, dtype=float, copy=True)
    if not np.all(np.isfinite(y)):
        raise NonFiniteError("fold_box received non-finite coordinates")
    flips = np.zeros(y.shape, dtype=bool)
    lo = np.broadcast_to(box.lo, y.shape)
    hi = np.broadcast_to(box.hi, y.shape)
    for _ in range(MAX_REFLECTIONS):
        above = y > hi
        below = y < lo
        if not (above.any() or below.any()):
            break
        y = np.where(above, 2.0 * hi - y, y)
        y = np.where(below, 2.0 * lo - y, y)
        flips ^= above | below
    else:
        raise GeometryError(f"more than {MAX_REFLECTIONS} folds in one move")
    if return_flips:
        return y, flips
    return y
