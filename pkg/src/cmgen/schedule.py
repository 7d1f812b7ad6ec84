"""Warped time-step grid and the training-step curriculum for (N, mu).

The grid concentrates boundaries near the low-noise end via a power
warp; boundary arithmetic is always float64 so the endpoints are exact
regardless of training precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["TimeGrid", "Curriculum", "build_grid", "curriculum_at"]


@dataclass(frozen=True)
class TimeGrid:
    epsilon: float
    t_max: float
    p: float
    n_sub: int
    boundaries: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "boundaries", np.asarray(self.boundaries, dtype=np.float64))


def build_grid(epsilon: float, t_max: float, p: float, n: int) -> TimeGrid:
    """Boundaries t_1..t_N between ``epsilon`` and ``t_max``.

    t_k = [t_max^(1/p) + (k-1)/(N-1) * (epsilon^(1/p) - t_max^(1/p))]^p,
    then reversed so t_1 = epsilon and t_N = t_max. Endpoints are pinned
    exactly to avoid last-ulp drift from the power round trip.
    """
    if not (0.0 < epsilon < t_max):
        raise ValueError(f"need 0 < epsilon < t_max, got {epsilon}, {t_max}")
    if n < 2:
        raise ValueError(f"need at least 2 boundaries, got N={n}")
    if p < 1:
        raise ValueError(f"warp exponent must be >= 1, got {p}")
    lo = np.float64(epsilon) ** (1.0 / p)
    hi = np.float64(t_max) ** (1.0 / p)
    frac = np.arange(n, dtype=np.float64) / (n - 1)
    b = (hi + frac * (lo - hi)) ** p
    b = b[::-1].copy()
    b[0] = epsilon
    b[-1] = t_max
    if np.any(np.diff(b) <= 0):
        raise ValueError("grid boundaries are not strictly increasing")
    return TimeGrid(epsilon=float(epsilon), t_max=float(t_max), p=float(p), n_sub=n, boundaries=b)


@dataclass(frozen=True)
class Curriculum:
    """Ramp for the sub-interval count N(k) and EMA decay mu(k).

    N follows a square-root ramp from roughly s0+1 up to s1+1 over the
    K training steps; mu tightens as N grows so the target network
    tracks proportionally to the shrinking step gaps.
    """

    s0: int = 2
    s1: int = 150
    mu0: float = 0.9
    total_steps: int = 20_000


def curriculum_at(cur: Curriculum, k: int) -> tuple[int, float]:
    if not (0 <= k <= cur.total_steps):
        raise ValueError(f"step {k} outside [0, {cur.total_steps}]")
    frac = k / cur.total_steps
    lo = (cur.s0 + 1) ** 2
    hi = (cur.s1 + 1) ** 2
    n = int(np.ceil(np.sqrt(frac * (hi - lo) + lo) - 1.0)) + 1
    n = max(n, 2)
    mu = float(np.exp(cur.s0 * np.log(cur.mu0) / n))
    return n, mu
