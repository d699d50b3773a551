"""Implicit score-matching objectives and the training loop.

Forward trajectories are re-simulated every iteration from the data; each
trajectory contributes ``times_per_traj`` random grid times ``t_m`` with
``m`` uniform on ``1..N`` (the initial time is never used).
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .geometry import Domain
from .integrators import (FORWARD_CLD_SCHEMES, REFLECTED_METHODS, DynamicsConfig, Drift, KineticPath,
                          OverdampedPath, simulate_cld, simulate_reflected)
from .noise import NoiseSource
from .score_model import EMA, Adam, ScoreNetwork, loss_gradient, save_checkpoint

log = logging.getLogger(__name__)

MODELS = ("cld", "reflected", "unconstrained")
LOSSES = ("ism_cld", "ism_reflected_uncorrected", "ism_reflected_corrected")
DTYPES = {"float64": torch.float64, "float32": torch.float32}


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    model: str = "cld"
    scheme: str = "AcOAc"
    T: float = 1.0
    h: float = 0.005
    gamma: float = 1.0
    drift: str = "zero"
    increments: str = "gaussian"
    iterations: int = 5000
    batch: int = 0  # 0 means the whole dataset every iteration
    times_per_traj: int = 1
    loss: str = ""
    c: Optional[float] = None
    lr: float = 5e-4
    ema_decay: float = 0.999
    delta: float = 1e-3
    hidden: tuple = (128, 128, 128)
    dtype: str = "float64"
    seed: int = 0
    penalty_lambda: Optional[float] = None
    barrier_eta: float = 0.05
    log_every: int = 0

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}")
        if not self.loss:
            self.loss = "ism_cld" if self.model == "cld" else (
                "ism_reflected_corrected" if self.model == "reflected" else "ism_reflected_uncorrected")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if self.times_per_traj < 1:
            raise ValueError("times_per_traj must be at least 1")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {tuple(DTYPES)}")
        if self.model == "cld":
            if self.scheme not in FORWARD_CLD_SCHEMES:
                raise ValueError(f"cld scheme must be one of {FORWARD_CLD_SCHEMES}")
            if self.loss != "ism_cld":
                raise ValueError("the kinetic model trains with ism_cld")
        elif self.model == "reflected":
            if self.scheme not in REFLECTED_METHODS:
                raise ValueError(f"reflected scheme must be one of {REFLECTED_METHODS}")
            if self.loss == "ism_cld":
                raise ValueError("ism_cld needs the kinetic model")
        else:
            self.scheme = "euler"
            if self.loss != "ism_reflected_uncorrected":
                raise ValueError("the unconstrained baseline has no boundary correction")
        if self.loss == "ism_reflected_corrected":
            expected = {"symmetrized": 2.0, "projection": 1.0}.get(self.scheme)
            if expected is None:
                raise ValueError("the corrected loss needs projection or symmetrized forward steps")
            if self.c is None:
                self.c = expected
            elif self.c != expected:
                raise ValueError(f"correction factor {self.c} does not match scheme {self.scheme} (expected {expected})")
        DynamicsConfig(self.T, self.h, self.gamma, Drift.parse(self.drift), self.increments)

    @property
    def dynamics(self) -> DynamicsConfig:
        return DynamicsConfig(self.T, self.h, self.gamma, Drift.parse(self.drift), self.increments)

    @property
    def corrected(self) -> bool:
        return self.loss == "ism_reflected_corrected"

    def correction_factor(self) -> float:
        if self.c is not None:
            return float(self.c)
        return {"symmetrized": 2.0, "projection": 1.0}.get(self.scheme, 0.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class TrajectoryBatch:
    """Forward paths plus, for overdamped models, per-step boundary events."""

    kinetic: Optional[KineticPath] = None
    overdamped: Optional[OverdampedPath] = None
    x0: Optional[np.ndarray] = None

    @property
    def n_steps(self) -> int:
        path = self.kinetic if self.kinetic is not None else self.overdamped
        return path.x.shape[0] - 1


def simulate_batch(domain: Optional[Domain], config: TrainConfig, x0, noise: NoiseSource) -> TrajectoryBatch:
    """Forward trajectories from the given initial positions (velocities ~ N(0, I))."""
    x0 = np.asarray(x0, dtype=float)
    if domain is not None and config.model != "unconstrained":
        bad = ~domain.contains(x0)
        if bad.any():
            raise ValueError(f"{int(bad.sum())} initial points lie outside the domain (first row {int(np.argmax(bad))})")
    dyn = config.dynamics
    if config.model == "cld":
        v0 = noise.gaussian(0, x0.shape, slot=9)
        return TrajectoryBatch(kinetic=simulate_cld(domain, config.scheme, dyn, x0, v0, noise), x0=x0)
    params = {}
    if config.scheme == "penalty":
        params["lam"] = config.penalty_lambda
    elif config.scheme == "barrier":
        params["eta"] = config.barrier_eta
    method = "none" if config.model == "unconstrained" else config.scheme
    path = simulate_reflected(None if method == "none" else domain, method, dyn, x0, noise, **params)
    return TrajectoryBatch(overdamped=path, x0=x0)


def sample_time_indices(rng: np.random.Generator, n: int, N: int, per_traj: int = 1) -> np.ndarray:
    """Grid indices uniform on 1..N, shape ``(per_traj, n)``."""
    return rng.integers(1, N + 1, size=(per_traj, n))


def ism_cld_loss(net: ScoreNetwork, t, x, v, delta: float = 1e-3, theta=None):
    """Mean of |s|^2 + 2 div_v s over the given (t, x, v) samples; returns (loss, terms)."""
    s, div = net.score_and_divergence(t, x, v, delta=delta, theta=theta)
    sq = (s * s).sum(dim=1).mean()
    dv = 2 * div.mean()
    return sq + dv, {"term1": sq, "term2": dv}


def local_time_correction(net: ScoreNetwork, t_events, p_events, n_events, d_events, owner, t_m, c: float,
                          theta=None):
    """Per-sample boundary estimate ``(c / t_m) * sum d <s(t_k, p), n>``.

    Event arrays are flat over all included boundary events; ``owner[e]`` is the
    sample index event ``e`` contributes to. Returns a tensor of length
    ``len(t_m)``.
    """
    t_m = torch.as_tensor(np.asarray(t_m, dtype=float), dtype=net.dtype)
    if torch.any(t_m <= 0):
        raise ValueError("correction needs t_m > 0")
    out = torch.zeros(t_m.shape[0], dtype=net.dtype)
    if len(owner) == 0:
        return out
    s = net.forward(np.asarray(t_events), np.asarray(p_events), theta=theta)
    n = torch.as_tensor(np.asarray(n_events), dtype=net.dtype)
    d = torch.as_tensor(np.asarray(d_events), dtype=net.dtype)
    owner_t = torch.as_tensor(np.asarray(owner), dtype=torch.long)
    contrib = d * (s * n).sum(dim=1)
    out = out.index_add(0, owner_t, contrib)
    return c * out / t_m


def gather_events(path: OverdampedPath, traj, m, h: float):
    """Boundary events of trajectory ``traj[i]`` strictly before step ``m[i]``, flattened."""
    ks, js = np.nonzero(path.exited)
    if ks.size == 0:
        empty = np.zeros((0, path.x.shape[2]))
        return np.zeros(0), empty, empty, np.zeros(0), np.zeros(0, dtype=int)
    owners, idx = [], []
    order = np.argsort(js, kind="stable")
    ks, js = ks[order], js[order]
    starts = np.searchsorted(js, traj, side="left")
    stops = np.searchsorted(js, traj, side="right")
    for i, (a, b) in enumerate(zip(starts, stops)):
        if b > a:
            sel = np.arange(a, b)
            sel = sel[ks[sel] < m[i]]
            idx.append(sel)
            owners.append(np.full(sel.size, i))
    if not idx:
        empty = np.zeros((0, path.x.shape[2]))
        return np.zeros(0), empty, empty, np.zeros(0), np.zeros(0, dtype=int)
    idx = np.concatenate(idx)
    owner = np.concatenate(owners)
    k, j = ks[idx], js[idx]
    return k * h, path.p_proj[k, j], path.n_proj[k, j], path.d[k, j], owner


def ism_reflected_loss(net: ScoreNetwork, t, x, corrected: bool, c: float = 2.0, events=None,
                       delta: float = 1e-3, theta=None):
    """Mean of |s|^2 + 2 div_x s - 2 * correction; the correction is dropped when not ``corrected``.

    ``events`` is the tuple from :func:`gather_events` (owners index the rows of
    ``x``); the correction value is reported in the terms either way.
    """
    s, div = net.score_and_divergence(t, x, None, delta=delta, theta=theta)
    sq = (s * s).sum(dim=1).mean()
    dv = 2 * div.mean()
    t_arr = np.asarray(t, dtype=float).reshape(-1)
    if events is None:
        corr = torch.zeros((), dtype=net.dtype)
    elif corrected:
        corr = local_time_correction(net, *events[:4], events[4], t_arr, c, theta=theta).mean()
    else:
        with torch.no_grad():
            corr = local_time_correction(net, *events[:4], events[4], t_arr, c, theta=theta).mean()
    loss = sq + dv - 2 * corr if corrected else sq + dv
    return loss, {"term1": sq, "term2": dv, "correction": corr}


@dataclass
class TrainResult:
    net: ScoreNetwork
    ema: torch.Tensor
    history: list = field(default_factory=list)
    config: Optional[TrainConfig] = None
    seconds: float = 0.0

    def ema_network(self) -> ScoreNetwork:
        net = ScoreNetwork(self.net.dim, self.net.kinetic, self.net.hidden, dtype=self.net.dtype)
        net.set_parameters(self.ema.detach().cpu().numpy())
        return net

    def final_loss(self, window: int = 100) -> float:
        vals = [row["total"] for row in self.history[-window:]]
        return float(np.mean(vals))


def _iteration_loss(net, config: TrainConfig, batch: TrajectoryBatch, pairs_traj, pairs_m, theta):
    h = config.h
    t = pairs_m * h
    if config.model == "cld":
        path = batch.kinetic
        x = path.x[pairs_m, pairs_traj]
        v = path.v[pairs_m, pairs_traj]
        return ism_cld_loss(net, t, x, v, delta=config.delta, theta=theta)
    path = batch.overdamped
    x = path.x[pairs_m, pairs_traj]
    events = None
    if config.model == "reflected":
        events = gather_events(path, pairs_traj, pairs_m, h)
    return ism_reflected_loss(net, t, x, config.corrected, config.correction_factor(), events,
                              delta=config.delta, theta=theta)


def train(config: TrainConfig, domain: Optional[Domain], data, net: Optional[ScoreNetwork] = None,
          callback=None) -> TrainResult:
    """Simulate, evaluate the loss, and take one Adam + EMA step per iteration."""
    data = np.asarray(data, dtype=float)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError("training data must be a non-empty (n, d) array")
    dim = data.shape[1]
    if net is None:
        net = ScoreNetwork(dim, config.model == "cld", config.hidden, dtype=DTYPES[config.dtype], seed=config.seed)
    adam = Adam(net.n_params, lr=config.lr, dtype=net.dtype)
    ema = EMA(net.theta, config.ema_decay)
    N = config.dynamics.N
    n_data = data.shape[0]
    history = []
    t0 = time.perf_counter()
    for it in range(config.iterations):
        rng = np.random.default_rng([config.seed, it, 1])
        if config.batch and config.batch < n_data:
            x0 = data[rng.choice(n_data, size=config.batch, replace=False)]
        else:
            x0 = data
        noise = NoiseSource(config.seed, stream=it + 1, increments=config.increments)
        batch = simulate_batch(domain, config, x0, noise)
        m = sample_time_indices(rng, x0.shape[0], N, config.times_per_traj)
        pairs_traj = np.tile(np.arange(x0.shape[0]), config.times_per_traj)
        pairs_m = m.reshape(-1)
        terms = {}

        def loss_fn(theta):
            loss, parts = _iteration_loss(net, config, batch, pairs_traj, pairs_m, theta)
            terms.update(parts)
            return loss

        try:
            loss, grad = loss_gradient(net, loss_fn)
        except FloatingPointError as exc:
            detail = {k: float(torch.as_tensor(v).detach()) for k, v in terms.items()}
            raise TrainingError(f"non-finite loss at iteration {it}: {detail}") from exc
        adam.step(net.theta, grad)
        ema.update(net.theta)
        row = {"iteration": it, "total": float(loss)}
        for key in ("term1", "term2", "correction"):
            row[key] = float(terms[key].detach()) if key in terms else 0.0
        history.append(row)
        if config.log_every and it % config.log_every == 0:
            log.info("iter %d loss %.5f", it, row["total"])
        if callback is not None:
            callback(it, row, net)
    return TrainResult(net, ema.shadow.clone(), history, config, time.perf_counter() - t0)


def write_history(path, history):
    fields = ["iteration", "total", "term1", "term2", "correction"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for row in history:
            w.writerow({k: repr(float(row[k])) if k != "iteration" else row[k] for k in fields})


def save_result(result: TrainResult, checkpoint_path, domain: Optional[Domain] = None) -> str:
    meta = {"train": result.config.to_dict() if result.config else {},
            "domain": domain.to_dict() if domain is not None else None}
    return save_checkpoint(checkpoint_path, result.net,
                           {"raw": result.net.parameters_numpy(), "ema": result.ema.detach().cpu().numpy()},
                           meta=json.loads(json.dumps(meta)))
