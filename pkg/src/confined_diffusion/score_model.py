"""Score network, finite-difference divergence, Adam and parameter EMA.

The network is a plain SiLU MLP whose weights live in one flat parameter
vector; time is fed in raw as the first input column. Reverse-mode gradients
come from torch autograd.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

DEFAULT_HIDDEN = (128, 128, 128)


class ScoreNetwork:
    """MLP ``s_theta(t, x[, v]) -> R^d``.

    ``kinetic=True`` takes ``(t, x, v)`` and is differentiated in v;
    otherwise the input is ``(t, x)``.
    """

    def __init__(self, dim: int, kinetic: bool, hidden: Sequence[int] = DEFAULT_HIDDEN,
                 dtype=torch.float64, seed: int = 0, zero_last: bool = True):
        self.dim = int(dim)
        self.kinetic = bool(kinetic)
        self.hidden = tuple(int(w) for w in hidden)
        self.dtype = dtype
        self.sizes = [1 + self.dim * (2 if kinetic else 1), *self.hidden, self.dim]
        self._slices = []
        offset = 0
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            w = slice(offset, offset + fan_in * fan_out)
            offset += fan_in * fan_out
            b = slice(offset, offset + fan_out)
            offset += fan_out
            self._slices.append((w, b, fan_in, fan_out))
        self.n_params = offset
        self.reset_parameters(seed, zero_last)

    @property
    def layout(self) -> str:
        return "t,x,v" if self.kinetic else "t,x"

    def reset_parameters(self, seed: int = 0, zero_last: bool = True):
        gen = torch.Generator().manual_seed(int(seed))
        theta = torch.zeros(self.n_params, dtype=self.dtype)
        last = len(self._slices) - 1
        for i, (w, b, fan_in, fan_out) in enumerate(self._slices):
            if i == last and zero_last:
                continue
            bound = math.sqrt(6.0 / fan_in)  # Kaiming-uniform, gain sqrt(2)
            theta[w] = (torch.rand(fan_in * fan_out, generator=gen, dtype=self.dtype) * 2 - 1) * bound
            if i == last:
                theta[b] = (torch.rand(fan_out, generator=gen, dtype=self.dtype) * 2 - 1) / math.sqrt(fan_in)
        self.theta = theta.requires_grad_(True)

    def set_parameters(self, values):
        values = torch.as_tensor(np.asarray(values, dtype=np.float64), dtype=self.dtype)
        if values.numel() != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {values.numel()}")
        self.theta = values.clone().requires_grad_(True)

    def parameters_numpy(self) -> np.ndarray:
        return self.theta.detach().cpu().numpy().astype(np.float64)

    def _inputs(self, t, x, v=None):
        x = torch.as_tensor(x, dtype=self.dtype)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[-1] != self.dim:
            raise ValueError(f"x has dimension {x.shape[-1]}, network expects {self.dim}")
        n = x.shape[0]
        t = torch.as_tensor(t, dtype=self.dtype)
        t = t.expand(n) if t.ndim == 0 else t.reshape(n)
        cols = [t[:, None], x]
        if self.kinetic:
            if v is None:
                raise ValueError("kinetic network needs v")
            v = torch.as_tensor(v, dtype=self.dtype)
            if v.ndim == 1:
                v = v[None, :]
            if v.shape != x.shape:
                raise ValueError("x and v shapes differ")
            cols.append(v)
        elif v is not None:
            raise ValueError("position-only network takes no v")
        return torch.cat(cols, dim=1)

    def apply(self, inp, theta=None):
        theta = self.theta if theta is None else theta
        h = inp
        last = len(self._slices) - 1
        for i, (w, b, fan_in, fan_out) in enumerate(self._slices):
            h = h @ theta[w].view(fan_in, fan_out) + theta[b]
            if i < last:
                h = F.silu(h)
        return h

    def forward(self, t, x, v=None, theta=None):
        return self.apply(self._inputs(t, x, v), theta)

    def __call__(self, t, x, v=None):
        """Numpy in, numpy out, no graph."""
        with torch.no_grad():
            return self.forward(t, x, v).cpu().numpy().astype(np.float64)

    def score_and_divergence(self, t, x, v=None, delta: float = 1e-3, theta=None):
        """Score at the input and its central-difference divergence.

        The divergence is taken in v for kinetic networks and in x otherwise.
        All 1 + 2d evaluations go through one batched forward pass.
        """
        if delta <= 0:
            raise ValueError("delta must be positive")
        inp = self._inputs(t, x, v)
        n, d = inp.shape[0], self.dim
        col0 = 1 + (d if self.kinetic else 0)
        eye = torch.eye(d, dtype=self.dtype) * delta
        plus = inp.unsqueeze(0).repeat(d, 1, 1)
        minus = plus.clone()
        plus[:, :, col0:col0 + d] += eye[:, None, :]
        minus[:, :, col0:col0 + d] -= eye[:, None, :]
        stacked = torch.cat([inp, plus.reshape(d * n, -1), minus.reshape(d * n, -1)], dim=0)
        out = self.apply(stacked, theta)
        s = out[:n]
        sp = out[n:n + d * n].reshape(d, n, d)
        sm = out[n + d * n:].reshape(d, n, d)
        idx = torch.arange(d)
        div = ((sp[idx, :, idx] - sm[idx, :, idx]) / (2 * delta)).sum(dim=0)
        return s, div


def divergence_fd(fn: Callable, u, delta: float = 1e-3):
    """Central-difference divergence of a vector field ``fn: (n, d) -> (n, d)`` (numpy)."""
    u = np.atleast_2d(np.asarray(u, dtype=float))
    n, d = u.shape
    div = np.zeros(n)
    for i in range(d):
        e = np.zeros(d)
        e[i] = delta
        div += (np.asarray(fn(u + e))[:, i] - np.asarray(fn(u - e))[:, i]) / (2 * delta)
    return div


def loss_gradient(net: ScoreNetwork, loss_fn: Callable[[torch.Tensor], torch.Tensor]):
    """Value and flat parameter gradient of a scalar loss built from ``net``.

    ``loss_fn`` receives the parameter vector and must route every network
    evaluation through it.
    """
    theta = net.theta
    loss = loss_fn(theta)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss.item()}")
    (grad,) = torch.autograd.grad(loss, theta, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(theta)
    return loss.detach(), grad.detach()


@dataclass
class Adam:
    n_params: int
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dtype: torch.dtype = torch.float64

    def __post_init__(self):
        self.m = torch.zeros(self.n_params, dtype=self.dtype)
        self.v = torch.zeros(self.n_params, dtype=self.dtype)
        self.step_count = 0

    def step(self, theta: torch.Tensor, grad: torch.Tensor):
        """In-place bias-corrected Adam update of ``theta``."""
        self.step_count += 1
        with torch.no_grad():
            self.m.mul_(self.beta1).add_(grad, alpha=1 - self.beta1)
            self.v.mul_(self.beta2).addcmul_(grad, grad, value=1 - self.beta2)
            m_hat = self.m / (1 - self.beta1**self.step_count)
            v_hat = self.v / (1 - self.beta2**self.step_count)
            theta.sub_(self.lr * m_hat / (v_hat.sqrt() + self.eps))
        return theta


class EMA:
    def __init__(self, params: torch.Tensor, decay: float = 0.999):
        if not 0.0 <= decay <= 1.0:
            raise ValueError("decay must be in [0, 1]")
        self.decay = decay
        self.shadow = params.detach().clone()

    def update(self, params: torch.Tensor):
        with torch.no_grad():
            self.shadow.mul_(self.decay).add_(params.detach(), alpha=1 - self.decay)
        return self.shadow


# --------------------------------------------------------------------------
# checkpoints: one JSON header line followed by little-endian float64 blocks


def save_checkpoint(path, net: ScoreNetwork, blocks: dict, meta: Optional[dict] = None) -> str:
    """Write ``blocks`` (name -> flat parameter array) and return the sha256 of the file."""
    header = {
        "format": "confined-diffusion-checkpoint/1",
        "sizes": net.sizes,
        "activation": "silu",
        "input_layout": net.layout,
        "dim": net.dim,
        "kinetic": net.kinetic,
        "hidden": list(net.hidden),
        "n_params": net.n_params,
        "blocks": list(blocks),
        "meta": meta or {},
    }
    buf = io.BytesIO()
    buf.write((json.dumps(header, sort_keys=True) + "\n").encode())
    for name in blocks:
        arr = np.asarray(blocks[name], dtype="<f8")
        if arr.size != net.n_params:
            raise ValueError(f"block {name!r} has {arr.size} values, expected {net.n_params}")
        buf.write(arr.tobytes())
    data = buf.getvalue()
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path, block: str = "ema", dtype=torch.float64):
    """Return ``(net, header, sha256)`` with the chosen parameter block loaded."""
    data = Path(path).read_bytes()
    nl = data.index(b"\n")
    header = json.loads(data[:nl].decode())
    net = ScoreNetwork(header["dim"], header["kinetic"], header["hidden"], dtype=dtype)
    if block not in header["blocks"]:
        raise KeyError(f"checkpoint has no block {block!r}; available: {header['blocks']}")
    i = header["blocks"].index(block)
    n = header["n_params"]
    raw = np.frombuffer(data, dtype="<f8", count=n, offset=nl + 1 + 8 * n * i).copy()
    net.set_parameters(raw)
    return net, header, hashlib.sha256(data).hexdigest()
