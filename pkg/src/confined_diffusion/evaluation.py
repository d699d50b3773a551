"""Sample-quality metrics and numerical convergence studies."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import sparse, stats
from scipy.sparse.linalg import splu
from scipy.spatial.distance import cdist, pdist

from .geometry import Box, Domain
from .integrators import Drift, reflected_step
from .noise import NoiseSource


# --------------------------------------------------------------------------
# metrics


def median_bandwidth(X, Y) -> float:
    Z = np.concatenate([np.atleast_2d(X), np.atleast_2d(Y)])
    if Z.shape[0] > 4000:
        # deterministic subsample keeps the pairwise pass affordable
        Z = Z[np.linspace(0, Z.shape[0] - 1, 4000).astype(int)]
    med = float(np.median(pdist(Z)))
    return med if med > 0 else 1.0


def _kernel_mean(A, B, sigma, block=2048) -> float:
    total = 0.0
    for i in range(0, A.shape[0], block):
        d2 = cdist(A[i:i + block], B, "sqeuclidean")
        total += np.exp(-d2 / (2 * sigma * sigma)).sum()
    return total / (A.shape[0] * B.shape[0])


def mmd(X, Y, bandwidth: Optional[float] = None) -> float:
    """Biased (V-statistic) Gaussian-kernel MMD, returned as the square root."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if X.shape[0] == 0 or Y.shape[0] == 0 or X.size == 0 or Y.size == 0:
        raise ValueError("mmd needs two non-empty point clouds")
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    sigma = median_bandwidth(X, Y) if bandwidth is None else float(bandwidth)
    if sigma <= 0:
        raise ValueError("bandwidth must be positive")
    val = _kernel_mean(X, X, sigma) + _kernel_mean(Y, Y, sigma) - 2 * _kernel_mean(X, Y, sigma)
    return math.sqrt(max(val, 0.0))


def constraint_violation(points, domain: Domain) -> float:
    """Fraction of points outside the closed domain (zero tolerance)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[0] == 0:
        return 0.0
    return float(np.mean(~domain.contains(pts, tol=0.0)))


def mean_stderr(values) -> tuple:
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return float(v.mean()) if v.size else float("nan"), float("nan")
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


# --------------------------------------------------------------------------
# stationarity


def _cell_probabilities(domain: Domain, edges, density: Optional[Callable], sub: int = 40) -> np.ndarray:
    """Cell masses of ``density`` restricted to the domain by midpoint quadrature on each cell."""
    dim = len(edges)
    fine = []
    for e in edges:
        w = np.diff(e)
        mids = e[:-1, None] + (np.arange(sub)[None, :] + 0.5) / sub * w[:, None]
        fine.append(mids.reshape(-1))
    grids = np.meshgrid(*fine, indexing="ij")
    pts = np.stack([g.reshape(-1) for g in grids], axis=1)
    weight = domain.contains(pts, tol=0.0).astype(float)
    if density is not None:
        weight = weight * density(pts)
    shape = tuple(len(e) - 1 for e in edges)
    weight = weight.reshape(tuple(s * sub for s in shape))
    for ax in range(dim):
        new_shape = weight.shape[:ax] + (shape[ax], sub) + weight.shape[ax + 1:]
        weight = weight.reshape(new_shape).sum(axis=ax + 1)
    return weight / weight.sum()


def stationarity_tests(x, v=None, domain: Optional[Domain] = None, gibbs: bool = False, bins: int = 10) -> dict:
    """Chi-square position test against the stationary law and velocity moment z-scores.

    The stationary position law is uniform on the domain, or the standard normal
    restricted to it when ``gibbs`` (linear drift). Positions must be 1-D or 2-D.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = x.shape[0]
    if n < 1000:
        raise ValueError(f"stationarity tests need at least 1000 samples, got {n}")
    report = {"n": n}
    if domain is not None:
        if x.shape[1] not in (1, 2):
            raise ValueError("position test supports dimension 1 or 2")
        lo, hi = domain.bounding_box()
        edges = [np.linspace(lo[i], hi[i], bins + 1) for i in range(x.shape[1])]
        density = (lambda p: np.exp(-0.5 * (p * p).sum(axis=1))) if gibbs else None
        probs = _cell_probabilities(domain, edges, density)
        counts, _ = np.histogramdd(x, bins=edges)
        mask = probs > 0
        expected = probs[mask] * n
        observed = counts[mask]
        chi2 = float(((observed - expected) ** 2 / expected).sum())
        dof = int(mask.sum()) - 1
        report["position"] = {"chi2": chi2, "dof": dof, "p_value": float(stats.chi2.sf(chi2, dof)),
                              "cells": int(mask.sum()), "outside_cells": int(counts[~mask].sum())}
    if v is not None:
        v = np.atleast_2d(np.asarray(v, dtype=float))
        mean = v.mean(axis=0)
        var = v.var(axis=0)
        kurt = stats.kurtosis(v, axis=0, fisher=True)
        report["velocity"] = {
            "mean": mean.tolist(),
            "var": var.tolist(),
            "var_rel_err": (np.abs(var - 1.0)).tolist(),
            "excess_kurtosis": np.atleast_1d(kurt).tolist(),
            "z_mean": (mean * math.sqrt(n)).tolist(),
            "z_var": ((var - 1.0) / math.sqrt(2.0 / n)).tolist(),
            "z_kurtosis": (np.atleast_1d(kurt) / math.sqrt(24.0 / n)).tolist(),
        }
    return report


# --------------------------------------------------------------------------
# studies


@dataclass
class StudyReport:
    metric: str
    rows: list = field(default_factory=list)
    orders: dict = field(default_factory=dict)
    reference: dict = field(default_factory=dict)
    runtime: float = 0.0
    seeds: list = field(default_factory=list)
    params: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "StudyReport":
        return cls(**json.loads(text))

    def save(self, stem) -> tuple:
        stem = Path(stem)
        json_path = stem.with_suffix(".json")
        csv_path = stem.with_suffix(".csv")
        json_path.write_text(self.to_json() + "\n")
        if self.rows:
            keys = list(self.rows[0])
            with open(csv_path, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
                w.writeheader()
                for row in self.rows:
                    w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return json_path, csv_path


def fit_order(h, err) -> float:
    """Least-squares slope of log(err) against log(h)."""
    h = np.asarray(h, dtype=float)
    err = np.asarray(err, dtype=float)
    if h.size < 2 or np.any(err <= 0) or not np.all(np.isfinite(err)):
        return float("nan")
    return float(np.polyfit(np.log(h), np.log(err), 1)[0])


def terminal_reflected(domain: Domain, method: str, h: float, T: float, drift: Drift, x0, n: int,
                       noise: NoiseSource, psi: Optional[Callable] = None, c: float = 2.0,
                       chunk: int = 1_000_000, **params):
    """Final positions after T/h forward steps and the boundary estimator ``c sum d psi(t_k, Pi X')``.

    Returns ``(x_T, Z)`` with one row per trajectory; chunks of ``chunk`` rows
    use their own noise stream so the result does not depend on memory limits
    only through the chunk size.
    """
    steps = round(T / h)
    if abs(steps * h - T) > 1e-9 * T:
        raise ValueError("T / h must be an integer")
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    xs, zs = [], []
    for ci, start in enumerate(range(0, n, chunk)):
        m = min(chunk, n - start)
        src = noise.child(noise.stream * 1000 + ci)
        x = np.tile(x0, (m, 1))
        z = np.zeros(m)
        for k in range(steps):
            xi = src.xi(k + 1, x.shape)
            x, ev = reflected_step(method, domain, x, h, drift(x), xi, t=k * h, **params)
            if psi is not None and ev.exited.any():
                rows = ev.exited
                z[rows] += c * ev.d[rows] * np.asarray(psi(k * h, ev.p_proj[rows])).reshape(-1)
        xs.append(x)
        zs.append(z)
    return np.concatenate(xs), np.concatenate(zs)


def reflected_generator_expectation(phi: Callable, x0: float, T: float, drift: Drift = Drift("linear"),
                                    lo: float = -1.0, hi: float = 1.0, nx: int = 4001, nt: int = 4000) -> float:
    """E phi(X_T) for the 1-D reflected diffusion dX = b dt + sqrt(2) dW on [lo, hi].

    Solves the backward equation u_t = u_xx + b u_x with Neumann ends by
    Crank-Nicolson (two implicit Euler half-steps first to damp the start).
    """
    x = np.linspace(lo, hi, nx)
    dx = x[1] - x[0]
    b = drift(x[:, None])[:, 0]
    main = np.full(nx, -2.0 / dx**2)
    upper = 1.0 / dx**2 + b[:-1] / (2 * dx)
    lower = 1.0 / dx**2 - b[1:] / (2 * dx)
    # ghost-point Neumann closure
    upper[0] = 2.0 / dx**2
    lower[-1] = 2.0 / dx**2
    L = sparse.diags([lower, main, upper], [-1, 0, 1], format="csc")
    I = sparse.identity(nx, format="csc")
    u = np.asarray(phi(x), dtype=float)
    dt = T / nt
    be = splu((I - (dt / 2) * L).tocsc())
    for _ in range(4):
        u = be.solve(u)
    A = splu((I - (dt / 2) * L).tocsc())
    B = (I + (dt / 2) * L).tocsc()
    for _ in range(nt - 2):
        u = A.solve(B @ u)
    return float(np.interp(x0, x, u))


def weak_order_study(method: str, domain: Domain, h_list: Sequence[float], observable: Callable, x0,
                     T: float = 1.0, drift: Drift = Drift("linear"), n: int = 1_000_000, seed: int = 0,
                     reference=None, ref_h: Optional[float] = None, n_ref: Optional[int] = None,
                     chunk: int = 1_000_000, **params) -> StudyReport:
    """|E phi(X_T^h) - reference| per step size and the fitted log-log order.

    ``reference`` is a number (e.g. a PDE value); when omitted it is estimated
    by the same scheme at ``ref_h`` (default min(h) / 128).
    """
    h_list = sorted(float(h) for h in h_list)[::-1]
    if len(h_list) < 3:
        raise ValueError("a convergence study needs at least 3 step sizes")
    t0 = time.perf_counter()
    ref_info = {}
    if reference is None:
        ref_h = min(h_list) / 128 if ref_h is None else ref_h
        xr, _ = terminal_reflected(domain, method, ref_h, T, drift, x0, n_ref or n,
                                   NoiseSource(seed, 10_000), chunk=chunk, **params)
        vals = np.asarray(observable(xr)).reshape(-1)
        reference, ref_se = float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(vals.size))
        ref_info = {"kind": "fine", "h": ref_h, "value": reference, "stderr": ref_se}
    else:
        ref_info = {"kind": "given", "value": float(reference), "stderr": 0.0}
    rows = []
    for i, h in enumerate(h_list):
        xh, _ = terminal_reflected(domain, method, h, T, drift, x0, n, NoiseSource(seed, i + 1), chunk=chunk,
                                   **params)
        vals = np.asarray(observable(xh)).reshape(-1)
        est = float(vals.mean())
        rows.append({"h": h, "estimate": est, "stderr": float(vals.std(ddof=1) / math.sqrt(vals.size)),
                     "error": abs(est - ref_info["value"])})
    order = fit_order([r["h"] for r in rows], [r["error"] for r in rows])
    return StudyReport("weak_error", rows, {method: order}, ref_info, time.perf_counter() - t0, [seed],
                       {"method": method, "T": T, "n": n, "x0": np.asarray(x0, dtype=float).tolist(),
                        "drift": drift.to_json(), "domain": domain.to_dict()})


def reflected_bm_local_time_mean(x0: float, t: float, terms: int = 200) -> float:
    """E of the limit of 2 sum d for reflected sqrt(2) W on [0, 1]: 2t + f(x0) - E f(X_t), f = (x - 1/2)^2."""
    f = lambda y: (y - 0.5) ** 2
    ef = 1.0 / 12.0
    for k in range(1, terms + 1):
        a = math.exp(-(k * math.pi) ** 2 * t)
        if a < 1e-300:
            break
        ck = (1 + (-1) ** k) / (k * math.pi) ** 2  # int_0^1 cos(k pi y) f(y) dy
        ef += 2.0 * a * math.cos(k * math.pi * x0) * ck
    return 2.0 * t + f(x0) - ef


def local_time_rate_study(h_list: Sequence[float], increments: str = "gaussian", domain: Optional[Domain] = None,
                          psi: Optional[Callable] = None, x0=0.5, t: float = 1.0, n: int = 100_000,
                          seed: int = 0, method: str = "symmetrized", ref_factor: int = 128,
                          reference: str = "fine", chunk: int = 1_000_000) -> StudyReport:
    """Boundary-estimator error against a reference, per step size.

    The estimator is ``c sum_k d_{k+1} psi(t_k, Pi X'_{k+1})`` over steps before t
    with c = 2 (symmetrized) or 1 (projection). ``reference="fine"`` runs the
    same estimator at ``min(h) / ref_factor``; ``"analytic"`` uses the closed
    form for psi = 1 on [0, 1] with zero drift.
    """
    if domain is None:
        domain = Box.cube(0.0, 1.0, 1)
    if psi is None:
        psi = lambda s, p: np.ones(p.shape[0])
    c = {"symmetrized": 2.0, "projection": 1.0}[method]
    h_list = sorted(float(h) for h in h_list)[::-1]
    if len(h_list) < 3:
        raise ValueError("a convergence study needs at least 3 step sizes")
    t0 = time.perf_counter()
    drift = Drift("zero")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    seed_key = seed * 2 + (1 if increments == "rademacher" else 0)
    if reference == "fine":
        ref_h = min(h_list) / ref_factor
        _, z = terminal_reflected(domain, method, ref_h, t, drift, x0, n,
                                  NoiseSource(seed_key, 10_000, increments), psi=psi, c=c, chunk=chunk)
        ref = {"kind": "fine", "h": ref_h, "value": float(z.mean()),
               "stderr": float(z.std(ddof=1) / math.sqrt(z.size))}
    elif reference == "analytic":
        if domain != Box.cube(0.0, 1.0, 1) or method != "symmetrized":
            raise ValueError("the analytic reference covers the symmetrized scheme on [0, 1]")
        ref = {"kind": "analytic", "value": reflected_bm_local_time_mean(float(x0[0]), t), "stderr": 0.0}
    else:
        raise ValueError("reference must be 'fine' or 'analytic'")
    rows = []
    for i, h in enumerate(h_list):
        _, z = terminal_reflected(domain, method, h, t, drift, x0, n, NoiseSource(seed_key, i + 1, increments),
                                  psi=psi, c=c, chunk=chunk)
        est = float(z.mean())
        rows.append({"h": h, "estimate": est, "stderr": float(z.std(ddof=1) / math.sqrt(z.size)),
                     "error": abs(est - ref["value"])})
    order = fit_order([r["h"] for r in rows], [r["error"] for r in rows])
    return StudyReport("local_time_estimator_error", rows, {increments: order}, ref,
                       time.perf_counter() - t0, [seed],
                       {"method": method, "t": t, "n": n, "x0": x0.tolist(), "increments": increments,
                        "domain": domain.to_dict()})
