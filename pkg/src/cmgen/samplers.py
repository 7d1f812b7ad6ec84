"""Weighted samplers for the trajectory index n in [1, N-1].

Three families: uniform, linear (increasing or decreasing in n), and an
importance sampler driven by a per-index ring buffer of recent losses.
Probabilities are always normalized; the importance sampler falls back
to uniform until every index has at least one recorded loss, so warm-up
stays unbiased.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Rng

__all__ = ["SamplerState", "weights", "draw", "record_loss"]

KINDS = ("uniform", "linear_up", "linear_down", "importance")


@dataclass
class SamplerState:
    kind: str = "uniform"
    alpha: float = 1.0
    phi: float = 0.1
    history_depth: int = 10
    n_indices: int = 0
    loss_history: np.ndarray = field(default=None, repr=False)
    fill_count: np.ndarray = field(default=None, repr=False)
    write_pos: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if not (0.0 < self.phi <= 1.0):
            raise ValueError(f"phi must be in (0, 1], got {self.phi}")
        if self.n_indices:
            self._alloc(self.n_indices)

    def _alloc(self, n_indices: int) -> None:
        self.loss_history = np.zeros((n_indices, self.history_depth))
        self.fill_count = np.zeros(n_indices, dtype=np.int64)
        self.write_pos = np.zeros(n_indices, dtype=np.int64)
        self.n_indices = n_indices

    def resize(self, n_indices: int) -> None:
        """Grow/shrink to a new index count, keeping surviving rows."""
        if self.loss_history is None:
            self._alloc(n_indices)
            return
        if n_indices == self.n_indices:
            return
        old = min(self.n_indices, n_indices)
        hist = np.zeros((n_indices, self.history_depth))
        fills = np.zeros(n_indices, dtype=np.int64)
        pos = np.zeros(n_indices, dtype=np.int64)
        hist[:old] = self.loss_history[:old]
        fills[:old] = self.fill_count[:old]
        pos[:old] = self.write_pos[:old]
        self.loss_history, self.fill_count, self.write_pos = hist, fills, pos
        self.n_indices = n_indices


def weights(state: SamplerState, n_sub: int) -> np.ndarray:
    """Probability vector over indices 1..N-1 (returned 0-based, length N-1)."""
    if n_sub < 2:
        raise ValueError(f"need N >= 2, got {n_sub}")
    m = n_sub - 1
    if state.kind == "uniform":
        c = np.ones(m)
    elif state.kind == "linear_up":
        c = state.alpha * np.arange(1, m + 1, dtype=np.float64)
    elif state.kind == "linear_down":
        c = state.alpha * (n_sub - np.arange(1, m + 1, dtype=np.float64))
    else:
        c = _importance_weights(state, m)
    return c / c.sum()


def _importance_weights(state: SamplerState, m: int) -> np.ndarray:
    if state.loss_history is None or state.n_indices < m:
        # history not yet sized for this N: treat missing rows as empty
        return np.ones(m)
    fills = state.fill_count[:m]
    if np.any(fills == 0):
        return np.ones(m)
    # average over recorded entries only, so short rows are not biased low
    row_sums = state.loss_history[:m].sum(axis=1)
    row_means = row_sums / fills
    total = row_means.sum()
    if total <= 0.0:
        return np.ones(m)
    return (1.0 - state.phi) * (row_means / total) + state.phi


def draw(state: SamplerState, n_sub: int, rng: Rng) -> int:
    """Draw an index n in [1, N-1] (1-based) per the sampler weights."""
    s = weights(state, n_sub)
    return rng.choice(n_sub - 1, p=s) + 1


def record_loss(state: SamplerState, n: int, loss: float) -> None:
    """Ring-buffer insert of a per-index training loss (1-based index)."""
    if not np.isfinite(loss) or loss < 0.0:
        raise ValueError(f"loss must be finite and nonnegative, got {loss}")
    if state.loss_history is None:
        raise ValueError("sampler has no allocated history; call resize first")
    row = n - 1
    if not (0 <= row < state.n_indices):
        raise IndexError(f"index {n} out of range [1, {state.n_indices}]")
    pos = state.write_pos[row]
    state.loss_history[row, pos] = loss
    state.write_pos[row] = (pos + 1) % state.history_depth
    state.fill_count[row] = min(state.fill_count[row] + 1, state.history_depth)
