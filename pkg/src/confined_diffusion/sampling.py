"""Reverse-time generation for the kinetic and overdamped models.

A score source is any callable ``score(tau, x, v=None) -> (n, d) array`` taking
forward time ``tau``; samplers call it at ``tau = T - t``. Every call on a batch
counts as one function evaluation (NFE).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .geometry import Ball, Box, Domain
from .integrators import (REFLECTED_METHODS, DynamicsConfig, Drift, a_c_step, b_step, o_step_reverse,
                          reflected_step, unconstrained_euler_step)
from .noise import NoiseSource

# per-step score evaluations of each reverse kinetic scheme
KINETIC_NFE = {
    "saoas": 2,
    "saoas_2fe": 2,
    "saoas_1fe": 1,
    "baoas": 1,
    "osaso": 2,
    "asosa": 2,
    "aosoa": 1,
    "obaso": 1,
    "cbbk_s": 1,
}
REFLECTED_SCHEMES = tuple(f"reflected_{m}" for m in REFLECTED_METHODS)
SCHEMES = tuple(KINETIC_NFE) + REFLECTED_SCHEMES + ("unconstrained",)
INITS = ("uniform_gauss", "truncated_gibbs", "custom")
HARD_CONSTRAINED = tuple(KINETIC_NFE) + ("reflected_projection", "reflected_symmetrized")
MIN_ACCEPTANCE = 1e-4


class ContainmentError(RuntimeError):
    pass


def canonical_scheme(name: str) -> str:
    if name in SCHEMES:
        return name
    if name in REFLECTED_METHODS:
        return f"reflected_{name}"
    raise ValueError(f"unknown sampling scheme {name!r}; expected one of {SCHEMES}")


def is_kinetic(scheme: str) -> bool:
    return canonical_scheme(scheme) in KINETIC_NFE


def nfe_per_step(scheme: str) -> int:
    return KINETIC_NFE.get(canonical_scheme(scheme), 1)


# --------------------------------------------------------------------------
# score sources


class AnalyticScore:
    """Wrap a closed-form score ``fn(tau, x, v)`` (``v`` omitted for position scores)."""

    def __init__(self, fn: Callable, kinetic: bool):
        self.fn = fn
        self.kinetic = kinetic

    def __call__(self, tau, x, v=None):
        out = self.fn(tau, x, v) if self.kinetic else self.fn(tau, x)
        return np.asarray(out, dtype=float)


def zero_score(kinetic: bool) -> AnalyticScore:
    return AnalyticScore((lambda t, x, v=None: np.zeros_like(np.asarray(x, dtype=float))), kinetic)


def gaussian_velocity_score() -> AnalyticScore:
    """Score of N(0, I) in v: the exact kinetic score at stationarity."""
    return AnalyticScore(lambda t, x, v: -np.asarray(v, dtype=float), kinetic=True)


class CountingScore:
    """Counts batched score evaluations and evaluated rows."""

    def __init__(self, score):
        self.score = score
        self.calls = 0
        self.rows = 0

    @property
    def kinetic(self) -> bool:
        return bool(getattr(self.score, "kinetic", False))

    def __call__(self, tau, x, v=None):
        self.calls += 1
        self.rows += np.atleast_2d(x).shape[0]
        if v is None:
            return self.score(tau, x)
        return self.score(tau, x, v)


# --------------------------------------------------------------------------
# step kernels


def s_step(t: float, q, p, gamma_eff: float, h: float, score, T: float, drift: Drift):
    """Score kick ``p - b(q) h + 2 gamma_eff s(T - t, q, p) h``."""
    if not 0.0 <= t <= T + 1e-12:
        raise ValueError(f"time {t} outside [0, {T}]")
    return b_step(p, q, h, drift) + 2.0 * gamma_eff * h * np.asarray(score(T - t, q, p))


@dataclass
class ReverseState:
    x: np.ndarray
    v: Optional[np.ndarray] = None
    k: int = 0


def reverse_cld_step(domain: Domain, scheme: str, state: ReverseState, config: DynamicsConfig, score,
                     noise: NoiseSource):
    """One reverse kinetic step; returns (new state, score evaluations used)."""
    scheme = canonical_scheme(scheme)
    q, p, k = state.x, state.v, state.k
    h, g, drift, T = config.h, config.gamma, config.drift, config.T
    t = k * h
    shape = p.shape

    def S(q, p, gamma_eff, hh):
        return s_step(t, q, p, gamma_eff, hh, score, T, drift)

    def A(q, p, hh):
        return a_c_step(domain, q, p, hh, reverse=True)

    def O(p, hh, slot=0):
        return o_step_reverse(p, hh, g, noise.xi(k + 1, shape, slot=slot))

    if scheme in ("saoas", "saoas_2fe"):
        p = S(q, p, g, h / 2)
        q, p = A(q, p, h / 2)
        p = O(p, h)
        q, p = A(q, p, h / 2)
        p = S(q, p, g, h / 2)
    elif scheme in ("saoas_1fe", "baoas"):
        p = b_step(p, q, h / 2, drift)
        q, p = A(q, p, h / 2)
        p = O(p, h)
        q, p = A(q, p, h / 2)
        p = S(q, p, 2 * g, h / 2)
    elif scheme == "osaso":
        p = O(p, h / 2, 0)
        p = S(q, p, g, h / 2)
        q, p = A(q, p, h)
        p = S(q, p, g, h / 2)
        p = O(p, h / 2, 1)
    elif scheme == "asosa":
        q, p = A(q, p, h / 2)
        p = S(q, p, g, h / 2)
        p = O(p, h)
        p = S(q, p, g, h / 2)
        q, p = A(q, p, h / 2)
    elif scheme == "aosoa":
        q, p = A(q, p, h / 2)
        p = O(p, h / 2, 0)
        p = S(q, p, g, h)
        p = O(p, h / 2, 1)
        q, p = A(q, p, h / 2)
    elif scheme == "obaso":
        p = O(p, h / 2, 0)
        p = b_step(p, q, h / 2, drift)
        q, p = A(q, p, h)
        p = S(q, p, 2 * g, h / 2)
        p = O(p, h / 2, 1)
    elif scheme == "cbbk_s":
        if h * g / 2 >= 1:
            raise ValueError(f"CBBK-S needs h*gamma/2 < 1 (got {h * g / 2})")
        a = math.sqrt(g * h / 2)
        # as in the forward scheme, xi_{k+1} is shared by consecutive steps
        p_half = p + (h * g / 2) * p + a * noise.xi(k, shape) - (h / 2) * drift(q)
        q, p_hat = A(q, p_half, h)
        s = np.asarray(score(T - t, q, p_hat))
        p = (p_hat - (h / 2) * drift(q) + a * noise.xi(k + 1, shape) + 2 * h * g * s) / (1 - h * g / 2)
    else:
        raise ValueError(f"{scheme!r} is not a kinetic scheme")
    return ReverseState(q, p, k + 1), KINETIC_NFE[scheme]


def reverse_reflected_step(domain: Optional[Domain], scheme: str, state: ReverseState, config: DynamicsConfig,
                           score, noise: NoiseSource, **params):
    """One reverse overdamped step with drift ``-b(x) + 2 s(T - t, x)``; returns (state, 1)."""
    scheme = canonical_scheme(scheme)
    x, k = state.x, state.k
    t = k * config.h
    f = -config.drift(x) + 2.0 * np.asarray(score(config.T - t, x))
    xi = noise.xi(k + 1, x.shape)
    if scheme == "unconstrained":
        x = unconstrained_euler_step(x, config.h, f, xi)
    else:
        x, _ = reflected_step(scheme[len("reflected_"):], domain, x, config.h, f, xi, t=t, **params)
    return ReverseState(x, None, k + 1), 1


# --------------------------------------------------------------------------
# initialisation and generation


def _rejection(domain: Optional[Domain], n: int, propose, rng: np.random.Generator) -> np.ndarray:
    if domain is None:
        return propose(rng, n)
    out, have, tried = [], 0, 0
    chunk = max(2 * n, 100_000)
    while have < n:
        y = propose(rng, chunk)
        keep = y[domain.contains(y, tol=0.0)]
        tried += chunk
        if tried >= 100_000 and (have + keep.shape[0]) / tried < MIN_ACCEPTANCE:
            raise ValueError(f"rejection acceptance below {MIN_ACCEPTANCE}; domain is degenerate for this init")
        out.append(keep)
        have += keep.shape[0]
    return np.concatenate(out)[:n]


def uniform_in(domain: Domain, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform points in the domain (direct on a box, rejection from the bounding box otherwise)."""
    if isinstance(domain, Box):
        return domain.lo + (domain.hi - domain.lo) * rng.random((n, domain.dim))
    lo, hi = domain.bounding_box()
    return _rejection(domain, n, lambda g, m: lo + (hi - lo) * g.random((m, lo.size)), rng)


def init_reverse(init: str, domain: Optional[Domain], n: int, dim: int, kinetic: bool, noise: NoiseSource,
                 custom=None):
    """Initial reverse states ``(x, v)``; ``v`` is None for overdamped samplers.

    ``truncated_gibbs`` draws x from the standard normal restricted to the domain
    (the unrestricted normal when ``domain`` is None).
    """
    rng = noise.rng(0, slot=1000)
    if init == "uniform_gauss":
        if domain is None:
            raise ValueError("uniform initialisation needs a bounded domain")
        x = uniform_in(domain, n, rng)
    elif init == "truncated_gibbs":
        x = _rejection(domain, n, lambda g, m: g.standard_normal((m, dim)), rng)
    elif init == "custom":
        if custom is None:
            raise ValueError("custom initialisation needs initial points")
        x = np.array(custom, dtype=float, copy=True)
        if x.shape != (n, dim):
            raise ValueError(f"custom initial points have shape {x.shape}, expected {(n, dim)}")
        if domain is not None and not domain.contains(x, tol=0.0).all():
            raise ContainmentError("custom initial points leave the domain")
    else:
        raise ValueError(f"unknown init {init!r}; expected one of {INITS}")
    v = noise.gaussian(0, (n, dim), slot=1001) if kinetic else None
    return x, v


@dataclass
class GenConfig:
    scheme: str = "saoas"
    n_samples: int = 2000
    T: float = 1.0
    h: float = 0.005
    gamma: float = 1.0
    drift: str = "zero"
    init: str = "uniform_gauss"
    seed: int = 0
    use_ema: bool = True
    keep_velocity: bool = False
    penalty_lambda: Optional[float] = None
    barrier_eta: float = 0.05

    def __post_init__(self):
        self.scheme = canonical_scheme(self.scheme)
        if self.n_samples < 0:
            raise ValueError("n_samples must be nonnegative")
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}")
        DynamicsConfig(self.T, self.h, self.gamma, Drift.parse(self.drift))
        if self.kinetic and self.gamma * self.h > 0.5:
            warnings.warn(f"gamma*h = {self.gamma * self.h:g} > 0.5: the reverse O step amplifies noise strongly",
                          RuntimeWarning, stacklevel=2)

    @property
    def kinetic(self) -> bool:
        return is_kinetic(self.scheme)

    @property
    def dynamics(self) -> DynamicsConfig:
        return DynamicsConfig(self.T, self.h, self.gamma, Drift.parse(self.drift))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GenResult:
    x: np.ndarray
    v: Optional[np.ndarray]
    nfe: int
    nfe_per_step: int
    steps: int


def generate(config: GenConfig, domain: Optional[Domain], score, dim: Optional[int] = None,
             custom_init=None, check: bool = True) -> GenResult:
    """Run N = T/h reverse steps from ``init_reverse``.

    With ``check`` the hard-constrained schemes verify every output point lies
    in the closed domain and raise :class:`ContainmentError` otherwise.
    """
    scheme = config.scheme
    kinetic = config.kinetic
    score_kinetic = getattr(score, "kinetic", None)
    if score_kinetic is not None and bool(score_kinetic) != kinetic:
        need = "(x, v)" if kinetic else "x"
        raise ValueError(f"scheme {scheme} needs a score of {need}")
    if scheme != "unconstrained" and domain is None:
        raise ValueError(f"scheme {scheme} needs a domain")
    if dim is None:
        dim = getattr(score, "dim", None) or (domain.dim if domain is not None else None)
    if dim is None:
        raise ValueError("cannot infer the dimension")
    dyn = config.dynamics
    noise = NoiseSource(config.seed, stream=0)
    n = config.n_samples
    x, v = init_reverse(config.init, domain, n, dim, kinetic, noise, custom_init)
    state = ReverseState(x, v, 0)
    nfe = 0
    params = {}
    if scheme == "reflected_penalty":
        params["lam"] = config.penalty_lambda
    elif scheme == "reflected_barrier":
        params["eta"] = config.barrier_eta
    if n > 0:
        for _ in range(dyn.N):
            if kinetic:
                state, used = reverse_cld_step(domain, scheme, state, dyn, score, noise)
            else:
                state, used = reverse_reflected_step(domain, scheme, state, dyn, score, noise, **params)
            nfe += used
            if not np.all(np.isfinite(state.x)) or (state.v is not None and not np.all(np.isfinite(state.v))):
                raise FloatingPointError(f"non-finite state at reverse step {state.k}")
    else:
        nfe = dyn.N * nfe_per_step(scheme)
    if check and scheme in HARD_CONSTRAINED and n > 0:
        bad = np.flatnonzero(~domain.contains(state.x, tol=0.0))
        if bad.size:
            raise ContainmentError(f"{bad.size} generated samples outside the domain (first index {bad[0]})")
    v_out = state.v if config.keep_velocity else None
    return GenResult(state.x, v_out, nfe, nfe_per_step(scheme), dyn.N)


def write_metadata(path, config: GenConfig, result: GenResult, checkpoint_sha: Optional[str] = None, extra=None):
    meta = {"scheme": config.scheme, "nfe": result.nfe, "nfe_per_step": result.nfe_per_step,
            "steps": result.steps, "seed": config.seed, "n_samples": int(result.x.shape[0]),
            "checkpoint_sha256": checkpoint_sha, "config": config.to_dict()}
    if extra:
        meta.update(extra)
    Path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta
