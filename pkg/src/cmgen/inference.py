"""Single- and few-step generation, plus a Heun probability-flow-ODE
reference solver used as a correctness oracle in tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Rng
from .model import Conditioning, DenoiserParams, Sample, consistency_fn
from .schedule import TimeGrid

__all__ = ["StepPlan", "generate_single", "generate_multi", "ode_reference_solve"]


@dataclass(frozen=True)
class StepPlan:
    """Strictly decreasing time points tau_1 = t_max > ... > tau_T >= eps."""

    taus: tuple

    def __post_init__(self):
        taus = tuple(float(t) for t in self.taus)
        object.__setattr__(self, "taus", taus)
        if len(taus) < 1:
            raise ValueError("plan needs at least one step")
        if any(b >= a for a, b in zip(taus, taus[1:])):
            raise ValueError("plan time points must be strictly decreasing")

    @property
    def steps(self) -> int:
        return len(self.taus)

    @classmethod
    def from_grid(cls, grid: TimeGrid, steps: int) -> "StepPlan":
        """Evenly spaced grid indices including both endpoints, high to low."""
        if steps < 1:
            raise ValueError("steps must be >= 1")
        if steps == 1:
            return cls(taus=(grid.t_max,))
        idx = np.round(np.linspace(grid.n_sub - 1, 0, steps)).astype(int)
        return cls(taus=tuple(grid.boundaries[i] for i in idx))


def _predict(params, x, cond, t, epsilon, sigma_data):
    return consistency_fn(params, x, cond, t, epsilon, sigma_data).data


def generate_single(params: DenoiserParams, cond: Conditioning, shape, rng: Rng,
                    grid: TimeGrid, sigma_data: float = 0.5) -> Sample:
    """One-step generation: x_T = t_max * z, return f(x_T, t_max)."""
    z = rng.gaussian(shape)
    x_t = grid.t_max * z
    out = _predict(params, x_t, cond, grid.t_max, grid.epsilon, sigma_data)
    return Sample(values=out)


def generate_multi(params: DenoiserParams, cond: Conditioning, shape, rng: Rng,
                   plan: StepPlan, epsilon: float, sigma_data: float = 0.5,
                   noise_log: list | None = None) -> Sample:
    """Alternating denoise / noise-inject loop.

    After each intermediate denoise the estimate is re-noised with fresh
    noise at scale sqrt(tau^2 - eps^2), keeping the marginal level
    consistent with the trajectory definition.
    """
    z = rng.gaussian(shape)
    x = plan.taus[0] * z
    out = None
    for i, tau in enumerate(plan.taus):
        out = _predict(params, x, cond, tau, epsilon, sigma_data)
        if i + 1 < plan.steps:
            tau_next = plan.taus[i + 1]
            scale = np.sqrt(max(tau_next**2 - epsilon**2, 0.0))
            zi = rng.gaussian(shape)
            if noise_log is not None:
                noise_log.append((tau_next, scale, zi.copy()))
            x = out + scale * zi
    return Sample(values=out)


def ode_reference_solve(score_fn, x_t: np.ndarray, t_grid: np.ndarray) -> np.ndarray:
    """Heun (2nd-order) integration of dx/dt = -t * score(x, t) from the
    first grid point down to the last. ``t_grid`` must be decreasing."""
    t_grid = np.asarray(t_grid, dtype=np.float64)
    if t_grid.ndim != 1 or len(t_grid) < 2:
        raise ValueError("need a 1-D time grid with at least two points")
    if np.any(np.diff(t_grid) >= 0):
        raise ValueError("time grid must be strictly decreasing")
    x = np.array(x_t, dtype=np.float64, copy=True)
    for t0, t1 in zip(t_grid[:-1], t_grid[1:]):
        h = t1 - t0
        if h == 0.0:
            raise FloatingPointError("step underflow in ODE solve")
        d0 = -t0 * score_fn(x, t0)
        x_pred = x + h * d0
        d1 = -t1 * score_fn(x_pred, t1)
        x = x + 0.5 * h * (d0 + d1)
    return x
