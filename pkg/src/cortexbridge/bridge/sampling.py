"""Gaussian bridge sampling and discrete Markov trajectory simulation.

Between two states ``x_a`` at ``t_a`` and ``x_b`` at ``t_b`` the bridge is
Gaussian with

    mean     = s * x_b + (1 - s) * x_a
    variance = s * (1 - s) * tau * (t_b - t_a),   s = (t - t_a) / (t_b - t_a).

A trajectory starts at ``x_0``; at every grid time ``t_j`` the generator
predicts ``x1_hat`` from ``x_{t_j}`` and the next state is a bridge sample
between ``x_{t_j}`` and ``x1_hat`` at ``t_{j+1}``. The last element of a
trajectory is the generator's prediction at ``t_{N-1}``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from ..errors import DegenerateInterval, ShapeMismatch

ENTROPY_ESTIMATORS = ("off", "gaussian-proxy")


@dataclass(frozen=True)
class TimeGrid:
    steps: tuple

    def __post_init__(self):
        s = tuple(float(x) for x in self.steps)
        if len(s) < 2 or s[0] != 0.0 or s[-1] != 1.0:
            raise ValueError("time grid must start at exactly 0 and end at exactly 1")
        if any(b <= a for a, b in zip(s, s[1:])):
            raise ValueError("time grid must be strictly increasing")
        object.__setattr__(self, "steps", s)

    @classmethod
    def uniform(cls, n: int = 5) -> "TimeGrid":
        if n < 1:
            raise ValueError("need at least one step")
        return cls(tuple(i / n for i in range(n)) + (1.0,))

    @property
    def N(self) -> int:
        return len(self.steps) - 1


@dataclass(frozen=True)
class BridgeConfig:
    """Diffusion scale, time grid and loss weights.

    ``lambda_reg_patchnce`` and ``lambda_reg_msssim`` weight the two content
    regularizers; ``entropy_draws`` is the number of generator draws per input
    used by the Gaussian-proxy entropy estimate.
    """

    tau: float = 0.01
    grid: TimeGrid = field(default_factory=TimeGrid.uniform)
    lambda_sb: float = 1.0
    lambda_reg_patchnce: float = 0.5
    lambda_reg_msssim: float = 1.0
    entropy_estimator: str = "gaussian-proxy"
    entropy_draws: int = 2

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if min(self.lambda_sb, self.lambda_reg_patchnce, self.lambda_reg_msssim) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.entropy_estimator not in ENTROPY_ESTIMATORS:
            raise ValueError(f"entropy_estimator must be one of {ENTROPY_ESTIMATORS}")
        if self.entropy_draws < 2:
            raise ValueError("entropy_draws must be >= 2")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid.steps)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BridgeConfig":
        d = dict(d)
        grid = d.pop("grid", None)
        if isinstance(grid, int):
            grid = TimeGrid.uniform(grid)
        elif grid is not None:
            grid = TimeGrid(tuple(grid))
        return cls(grid=grid or TimeGrid.uniform(), **d)


def _check_interval(t_a, t_b, t):
    if t_b == t_a:
        raise DegenerateInterval("bridge interval has zero length")
    tt = np.asarray(t, dtype=np.float64)
    if np.any(tt < t_a) or np.any(tt > t_b):
        raise ValueError("t must lie in [t_a, t_b]")


def bridge_moments(t_a: float, t_b: float, t, tau: float):
    """Interpolation weight ``s`` and variance of the bridge at time ``t``."""
    _check_interval(t_a, t_b, t)
    s = (np.asarray(t, dtype=np.float64) - t_a) / (t_b - t_a)
    return s, s * (1.0 - s) * tau * (t_b - t_a)


def sample_bridge(x_a, x_b, t_a: float, t_b: float, t: float, tau: float, rng: np.random.Generator, mask=None):
    """Draw one bridge sample per pixel (numpy).

    Endpoints are returned exactly: ``t == t_a`` gives a copy of ``x_a`` and
    ``t == t_b`` a copy of ``x_b``. Pixels outside ``mask`` receive no noise.

    Raises
    ------
    DegenerateInterval
        If ``t_b == t_a``.
    """
    x_a = np.asarray(x_a, dtype=np.float64)
    x_b = np.asarray(x_b, dtype=np.float64)
    if x_a.shape != x_b.shape:
        raise ShapeMismatch("bridge endpoints must have the same shape")
    s, var = bridge_moments(t_a, t_b, t, tau)
    if t == t_a:
        return x_a.copy()
    if t == t_b:
        return x_b.copy()
    noise = rng.standard_normal(x_a.shape)
    if mask is not None:
        noise = noise * np.asarray(mask, dtype=bool)
    return s * x_b + (1.0 - s) * x_a + np.sqrt(var) * noise


def sample_bridge_t(x_a, x_b, t_a: float, t_b: float, t: float, tau: float, generator: torch.Generator, mask=None):
    """Torch version of :func:`sample_bridge` (no gradient tracking implied)."""
    if x_a.shape != x_b.shape:
        raise ShapeMismatch("bridge endpoints must have the same shape")
    s, var = bridge_moments(t_a, t_b, t, tau)
    if t == t_a:
        return x_a.clone()
    if t == t_b:
        return x_b.clone()
    noise = torch.randn(x_a.shape, generator=generator, dtype=x_a.dtype)
    if mask is not None:
        noise = noise * mask.to(x_a.dtype)
    return float(s) * x_b + (1.0 - float(s)) * x_a + float(np.sqrt(var)) * noise


def _as_generator(rng) -> torch.Generator:
    if isinstance(rng, torch.Generator):
        return rng
    g = torch.Generator()
    g.manual_seed(int(rng) if rng is not None else 0)
    return g


@torch.no_grad()
def simulate_trajectory(x0, gen, cfg: BridgeConfig, rng=0, mask=None) -> list:
    """Markov simulation over the time grid.

    Parameters
    ----------
    x0 : array_like or Tensor, shape (B, H, W) or (H, W)
    gen : object with ``sample(x, t, generator, mask)`` returning ``x1_hat``
    rng : int seed or torch.Generator

    Returns
    -------
    list of N + 1 states ``x_{t_0}, ..., x_{t_{N-1}}, x1_hat`` in the input's
    array type.
    """
    as_numpy = not isinstance(x0, torch.Tensor)
    x = torch.as_tensor(np.asarray(x0), dtype=torch.float64) if as_numpy else x0
    squeeze = x.dim() == 2
    if squeeze:
        x = x[None]
    m = None if mask is None else torch.as_tensor(np.asarray(mask) if as_numpy else mask).to(torch.bool)
    g = _as_generator(rng)
    steps = cfg.grid.steps
    states = [x]
    for j in range(cfg.grid.N):
        x1_hat = gen.sample(x, steps[j], g, m)
        if j == cfg.grid.N - 1:
            states.append(x1_hat)
        else:
            x = sample_bridge_t(x, x1_hat, steps[j], 1.0, steps[j + 1], cfg.tau, g, m)
            states.append(x)
    if squeeze:
        states = [s[0] for s in states]
    if as_numpy:
        states = [s.detach().cpu().numpy().astype(np.float64) for s in states]
    return states
