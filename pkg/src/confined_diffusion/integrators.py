"""Step kernels and forward schemes for the two boundary-respecting diffusions.

Kinetic (position/velocity) dynamics keep the position inside the domain by
specular reflection of the velocity; the overdamped dynamics are kept inside by
one of several discrete boundary treatments. Arrays are batched: positions and
velocities have shape ``(n, d)``, one row per trajectory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .geometry import MAX_REFLECTIONS, Ball, Box, Domain, GeometryError, fold_box, specular_reflect
from .noise import INCREMENTS, NoiseSource

FORWARD_CLD_SCHEMES = ("AcOAc", "OAcO", "CBBK")
REFLECTED_METHODS = ("projection", "symmetrized", "penalty", "barrier")


class CollisionError(GeometryError):
    """Raised when one transport step needs more reflections than allowed."""


@dataclass(frozen=True)
class Drift:
    """Position-dependent drift b(x): zero, linear b(x) = -x, or -grad U for a user potential."""

    kind: str = "zero"
    grad_potential: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if self.kind not in ("zero", "linear", "potential"):
            raise ValueError(f"unknown drift kind {self.kind!r}")
        if self.kind == "potential" and self.grad_potential is None:
            raise ValueError("potential drift needs grad_potential")

    @classmethod
    def parse(cls, value) -> "Drift":
        if isinstance(value, Drift):
            return value
        if value in (None, 0, "0", "zero"):
            return cls("zero")
        if value in ("linear", "-x"):
            return cls("linear")
        raise ValueError(f"cannot build a drift from {value!r}")

    @property
    def is_zero(self) -> bool:
        return self.kind == "zero"

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "zero":
            return np.zeros_like(x)
        if self.kind == "linear":
            return -x
        return -np.asarray(self.grad_potential(x), dtype=float)

    def to_json(self) -> str:
        if self.kind == "potential":
            raise ValueError("user potentials cannot be serialised")
        return self.kind


@dataclass(frozen=True)
class DynamicsConfig:
    T: float = 1.0
    h: float = 0.005
    gamma: float = 1.0
    drift: Drift = field(default_factory=Drift)
    increments: str = "gaussian"

    def __post_init__(self):
        if not (self.T > 0 and self.h > 0):
            raise ValueError("T and h must be positive")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.increments not in INCREMENTS:
            raise ValueError(f"increments must be one of {INCREMENTS}")
        n = round(self.T / self.h)
        if n < 1 or abs(n * self.h - self.T) > 1e-9 * self.T:
            raise ValueError(f"T / h must be an integer (T={self.T}, h={self.h})")
        if not isinstance(self.drift, Drift):
            object.__setattr__(self, "drift", Drift.parse(self.drift))

    @property
    def N(self) -> int:
        return round(self.T / self.h)

    def times(self) -> np.ndarray:
        return np.arange(self.N + 1) * self.h


@dataclass
class KineticState:
    x: np.ndarray
    v: np.ndarray
    k: int = 0


@dataclass
class OverdampedState:
    x: np.ndarray
    k: int = 0


@dataclass
class StepEvents:
    """Boundary interaction of one overdamped step.

    ``d`` is the overshoot distance of the auxiliary Euler point, ``p_proj`` its
    projection on the boundary and ``n_proj`` the outward normal there. Rows
    that did not leave the domain have ``d == 0``.
    """

    t: float
    exited: np.ndarray
    d: np.ndarray
    p_proj: np.ndarray
    n_proj: np.ndarray
    fallback: np.ndarray


# --------------------------------------------------------------------------
# single-step kernels


def a_c_step(domain: Domain, x, v, h: float, reverse: bool = False, method: str = "auto", return_hits: bool = False):
    """Free transport over time h with specular reflection at the boundary.

    Forward moves along +v, reverse along -v. On a box the default uses the
    per-axis fold; ``method="ray"`` forces the generic hit-and-reflect loop.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    single = x.ndim == 1
    x2, v2 = np.atleast_2d(x), np.atleast_2d(v)
    if method == "auto":
        method = "fold" if isinstance(domain, Box) else "ray"
    if method == "fold":
        if not isinstance(domain, Box):
            raise ValueError("fold transport only applies to boxes")
        sgn = -1.0 if reverse else 1.0
        y, flips = fold_box(domain, x2 + sgn * h * v2, return_flips=True)
        v_new = np.where(flips, -v2, v2)
        hits = flips.sum(axis=1)
    elif method == "ray":
        y, v_new, hits = _transport_ray(domain, x2, v2, h, reverse)
    else:
        raise ValueError(f"unknown transport method {method!r}")
    y = domain.clip(y)
    if single:
        y, v_new, hits = y[0], v_new[0], hits[0]
    if return_hits:
        return y, v_new, hits
    return y, v_new


def _transport_ray(domain: Domain, x, v, h, reverse):
    sgn = -1.0 if reverse else 1.0
    y = x.copy()
    z = v.copy()
    rem = np.full(x.shape[0], float(h))
    hits = np.zeros(x.shape[0], dtype=int)
    active = np.flatnonzero(np.any(z != 0, axis=1))
    for _ in range(MAX_REFLECTIONS + 1):
        if active.size == 0:
            break
        ya, za, ra = y[active], z[active], rem[active]
        dirn = sgn * za
        if isinstance(domain, Box):
            tau, axis, side = domain.exit_times(ya, dirn)
        else:
            tau = domain.exit_times(ya, dirn)
        hit = tau < ra
        done = ~hit
        y[active[done]] = ya[done] + ra[done, None] * dirn[done]
        if not hit.any():
            active = active[:0]
            break
        idx = active[hit]
        th = tau[hit]
        p = ya[hit] + th[:, None] * dirn[hit]
        if isinstance(domain, Box):
            rows = np.arange(idx.size)
            ax = axis[hit]
            sd = side[hit]
            p[rows, ax] = np.where(sd > 0, domain.hi[ax], domain.lo[ax])
            n = np.zeros_like(p)
            n[rows, ax] = sd
        else:
            p = domain.boundary_point(p)
            n = (p - domain.center) / domain.radius
        y[idx] = p
        z[idx] = specular_reflect(za[hit], n)
        rem[idx] = ra[hit] - th
        hits[idx] += 1
        active = idx
    else:
        raise CollisionError(f"more than {MAX_REFLECTIONS} reflections in one transport step")
    if np.any(hits > MAX_REFLECTIONS):
        raise CollisionError(f"more than {MAX_REFLECTIONS} reflections in one transport step")
    return y, z, hits


def o_step_forward(v, h: float, gamma: float, xi):
    """Exact Ornstein-Uhlenbeck velocity update over time h."""
    return v * math.exp(-gamma * h) + math.sqrt(-math.expm1(-2.0 * gamma * h)) * xi


def o_step_reverse(p, h: float, gamma: float, xi):
    """Reverse-time counterpart with the expanding factor exp(gamma h)."""
    return p * math.exp(gamma * h) + math.sqrt(math.expm1(2.0 * gamma * h)) * xi


def b_step(p, q, h: float, drift: Drift):
    """Reverse drift kick p - b(q) h."""
    return p - drift(q) * h


def _kick(v, x, h, drift: Drift):
    # forward drift kick v + b(x) h
    if drift.is_zero:
        return v
    return v + drift(x) * h


def forward_cld_step(domain: Domain, scheme: str, state: KineticState, config: DynamicsConfig, noise: NoiseSource):
    """One step of a forward kinetic splitting; returns (new state, reflections per row)."""
    x, v, k = state.x, state.v, state.k
    h, g, drift = config.h, config.gamma, config.drift
    shape = v.shape
    if scheme == "AcOAc":
        v = _kick(v, x, h / 2, drift)
        x, v, n1 = a_c_step(domain, x, v, h / 2, return_hits=True)
        v = o_step_forward(v, h, g, noise.xi(k + 1, shape))
        x, v, n2 = a_c_step(domain, x, v, h / 2, return_hits=True)
        v = _kick(v, x, h / 2, drift)
        hits = n1 + n2
    elif scheme == "OAcO":
        v = o_step_forward(v, h / 2, g, noise.xi(k + 1, shape, slot=0))
        v = _kick(v, x, h / 2, drift)
        x, v, hits = a_c_step(domain, x, v, h, return_hits=True)
        v = _kick(v, x, h / 2, drift)
        v = o_step_forward(v, h / 2, g, noise.xi(k + 1, shape, slot=1))
    elif scheme == "CBBK":
        # the second half-kick of step k and the first of step k+1 share xi_{k+1}
        a = math.sqrt(g * h / 2)
        v_half = v - (h * g / 2) * v + a * noise.xi(k, shape) + (h / 2) * drift(x)
        x, v_hat, hits = a_c_step(domain, x, v_half, h, return_hits=True)
        v = (v_hat + (h / 2) * drift(x) + a * noise.xi(k + 1, shape)) / (1 + h * g / 2)
    else:
        raise ValueError(f"unknown forward kinetic scheme {scheme!r}; expected one of {FORWARD_CLD_SCHEMES}")
    return KineticState(x, v, k + 1), hits


# --------------------------------------------------------------------------
# overdamped kernels


def euler_aux(h: float, f, xi):
    """Euler increment f h + sqrt(2 h) xi."""
    return np.asarray(f) * h + math.sqrt(2.0 * h) * np.asarray(xi)


def barrier_collar(domain: Domain) -> float:
    if isinstance(domain, Box):
        return 0.1 * float(np.min(domain.hi - domain.lo) / 2)
    return 0.1 * domain.radius


def barrier_drift(domain: Domain, x, eta: float, collar: Optional[float] = None, r_min: float = 1e-6):
    """Drift 2 grad R / (eta sinh(2R/eta)) with R the distance to the boundary.

    Only active inside the collar; grad R points from the nearest boundary point
    to x, i.e. into the domain. Points outside the closure get no barrier force.
    """
    if eta <= 0:
        raise ValueError("barrier eta must be positive")
    if collar is None:
        collar = barrier_collar(domain)
    x = np.atleast_2d(x)
    q = domain.boundary_point(x)
    diff = x - q
    R = np.linalg.norm(diff, axis=1)
    inside = domain.contains(x, tol=0.0)
    active = inside & (R <= collar)
    Rc = np.maximum(R, r_min)
    with np.errstate(over="ignore"):
        mag = 2.0 / (eta * np.sinh(2.0 * Rc / eta))
    direction = np.where((R > 0)[:, None], diff / np.where(R > 0, R, 1.0)[:, None], 0.0)
    if np.any(active & (R == 0)):
        # exactly on the boundary: push along the inward normal
        on = active & (R == 0)
        direction[on] = -_outward_normal_on_boundary(domain, x[on])
    return np.where(active[:, None], mag[:, None] * direction, 0.0)


def _outward_normal_on_boundary(domain, p):
    return domain.normal_at(p)


def reflected_step(method: str, domain: Domain, x, h: float, f, xi, t: float = 0.0, lam: Optional[float] = None,
                   eta: float = 0.05, collar: Optional[float] = None, r_min: float = 1e-6):
    """One overdamped step with the chosen boundary treatment.

    Returns ``(x_next, StepEvents)``. ``f`` is the drift evaluated at (t, x).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    delta = euler_aux(h, f, xi)
    n_rows = x.shape[0]
    no_fallback = np.zeros(n_rows, dtype=bool)
    if method in ("projection", "symmetrized"):
        x_aux = x + delta
        n_out, d = domain.outward_normal_of_exterior(x_aux)
        exited = d > 0
        p_proj = domain.project(x_aux)
        if method == "projection":
            x_new = p_proj
            fallback = no_fallback
        else:
            x_new = x_aux - 2.0 * d[:, None] * n_out
            fallback = exited & ~domain.contains(x_new, tol=0.0)
            if fallback.any():
                x_new[fallback] = p_proj[fallback]
        x_new = domain.clip(x_new)
        return x_new, StepEvents(t, exited, d, p_proj, n_out, fallback)
    if method == "penalty":
        if lam is None:
            lam = h
        if lam <= 0:
            raise ValueError("penalty lambda must be positive")
        x_new = x + delta - (h / lam) * (x - domain.project(x))
    elif method == "barrier":
        x_new = x + delta + h * barrier_drift(domain, x, eta, collar, r_min)
    else:
        raise ValueError(f"unknown reflected method {method!r}; expected one of {REFLECTED_METHODS}")
    n_out, d = domain.outward_normal_of_exterior(x_new)
    return x_new, StepEvents(t, d > 0, d, domain.project(x_new), n_out, no_fallback)


def unconstrained_euler_step(x, h: float, f, xi):
    return np.asarray(x, dtype=float) + euler_aux(h, f, xi)


# --------------------------------------------------------------------------
# batch drivers


@dataclass
class KineticPath:
    x: np.ndarray  # (N+1, n, d)
    v: np.ndarray  # (N+1, n, d)
    hits: np.ndarray  # (N, n)


@dataclass
class OverdampedPath:
    x: np.ndarray  # (N+1, n, d)
    exited: np.ndarray  # (N, n)
    d: np.ndarray  # (N, n)
    p_proj: np.ndarray  # (N, n, d)
    n_proj: np.ndarray  # (N, n, d)


def simulate_cld(domain: Domain, scheme: str, config: DynamicsConfig, x0, v0, noise: NoiseSource,
                 steps: Optional[int] = None) -> KineticPath:
    steps = config.N if steps is None else steps
    x0 = np.asarray(x0, dtype=float)
    v0 = np.asarray(v0, dtype=float)
    xs = np.empty((steps + 1,) + x0.shape)
    vs = np.empty_like(xs)
    hits = np.zeros((steps, x0.shape[0]), dtype=int)
    xs[0], vs[0] = x0, v0
    state = KineticState(x0, v0, 0)
    for k in range(steps):
        state, hits[k] = forward_cld_step(domain, scheme, state, config, noise)
        xs[k + 1], vs[k + 1] = state.x, state.v
    return KineticPath(xs, vs, hits)


def simulate_reflected(domain: Optional[Domain], method: str, config: DynamicsConfig, x0, noise: NoiseSource,
                       steps: Optional[int] = None, **params) -> OverdampedPath:
    """Forward overdamped paths; ``domain=None`` or ``method="none"`` runs plain Euler."""
    steps = config.N if steps is None else steps
    x0 = np.asarray(x0, dtype=float)
    n, dim = x0.shape
    xs = np.empty((steps + 1, n, dim))
    exited = np.zeros((steps, n), dtype=bool)
    dd = np.zeros((steps, n))
    pp = np.zeros((steps, n, dim))
    nn = np.zeros((steps, n, dim))
    xs[0] = x0
    x = x0
    drift = config.drift
    for k in range(steps):
        xi = noise.xi(k + 1, x.shape)
        if domain is None or method == "none":
            x = unconstrained_euler_step(x, config.h, drift(x), xi)
        else:
            x, ev = reflected_step(method, domain, x, config.h, drift(x), xi, t=k * config.h, **params)
            exited[k], dd[k], pp[k], nn[k] = ev.exited, ev.d, ev.p_proj, ev.n_proj
        xs[k + 1] = x
    return OverdampedPath(xs, exited, dd, pp, nn)


def write_trajectory_csv(path, xs, vs=None, h: float = 1.0, row: int = 0):
    """Dump one trajectory (row ``row`` of the batch) as step,t,x0..[,v0..]."""
    xs = np.asarray(xs)[:, row]
    d = xs.shape[1]
    cols = ["step", "t"] + [f"x{i}" for i in range(d)]
    if vs is not None:
        vs = np.asarray(vs)[:, row]
        cols += [f"v{i}" for i in range(d)]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for k in range(xs.shape[0]):
            vals = list(xs[k]) + (list(vs[k]) if vs is not None else [])
            fh.write(f"{k},{k * h!r}," + ",".join(repr(float(v)) for v in vals) + "\n")


def write_event_csv(path, path_obj: OverdampedPath, h: float, row: int = 0):
    """Dump the boundary events of one trajectory as step,t,d,p0..,n0.."""
    d = path_obj.p_proj.shape[2]
    cols = ["step", "t", "d"] + [f"p{i}" for i in range(d)] + [f"n{i}" for i in range(d)]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for k in np.flatnonzero(path_obj.exited[:, row]):
            vals = [path_obj.d[k, row], *path_obj.p_proj[k, row], *path_obj.n_proj[k, row]]
            fh.write(f"{k + 1},{k * h!r}," + ",".join(repr(float(v)) for v in vals) + "\n")
