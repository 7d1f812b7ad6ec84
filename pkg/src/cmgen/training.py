"""Consistency-training loop.

Two-point forward diffusion along the trajectory, squared-l2 consistency
loss against an EMA target network, a masked reconstruction loss at the
generation entry point, Adam updates for the online network only, and
the exponential learning-rate schedule.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Rng, Tensor
from .model import Conditioning, DenoiserParams, consistency_fn, init_params
from .samplers import SamplerState, draw, record_loss
from .schedule import Curriculum, TimeGrid, build_grid, curriculum_at

__all__ = [
    "ModelPair",
    "TrainConfig",
    "Adam",
    "Trainer",
    "TrainingDiverged",
    "forward_pair",
    "consistency_loss",
    "recon_loss",
    "ema_update",
]


class TrainingDiverged(RuntimeError):
    """Raised when a training step produces a non-finite loss."""

    def __init__(self, step: int, diagnostics: dict):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.diagnostics = diagnostics


@dataclass
class ModelPair:
    online: DenoiserParams
    target: DenoiserParams
    mu: float = 0.9

    def __post_init__(self):
        on = {k: t.data.shape for k, t in self.online.items()}
        tg = {k: t.data.shape for k, t in self.target.items()}
        if on != tg:
            raise ValueError("online and target parameter shapes differ")


@dataclass
class TrainConfig:
    # grid / curriculum
    epsilon: float = 0.002
    t_max: float = 80.0
    p: float = 7.0
    s0: int = 2
    s1: int = 150
    mu0: float = 0.9
    # sampler
    sampler: str = "uniform"
    alpha: float = 1.0
    phi: float = 0.1
    history_depth: int = 10
    # model
    width: int = 64
    depth: int = 4
    time_dim: int = 32
    sigma_data: float = 0.5
    # optimization
    batch_size: int = 32
    total_steps: int = 20_000
    lr0: float = 1e-4
    lr_decay: float = 0.999
    lr_decay_interval: int = 1_000
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    # losses
    loss_norm: str = "l1"  # for the reconstruction term
    padding_mode: str = "include"
    recon_weight: float = 1.0
    lambda_kind: str = "constant"
    # frontend loss weights recorded for config fidelity; their terms are
    # produced by the (external) variance adaptor and are inactive here
    lambda_duration: float = 0.1
    lambda_pitch: float = 0.1
    lambda_energy: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for name in ("mu0", "lr_decay", "lr_decay_interval"):
            pass
        if not (0.0 < self.lr_decay <= 1.0):
            raise ValueError("lr_decay must be in (0, 1]")
        if not (0.0 < self.mu0 <= 1.0):
            raise ValueError("mu0 must be in (0, 1]")
        if self.loss_norm not in ("l1", "l2"):
            raise ValueError(f"loss_norm must be l1 or l2, got {self.loss_norm!r}")
        if self.padding_mode not in ("include", "exclude"):
            raise ValueError(f"padding_mode must be include or exclude, got {self.padding_mode!r}")

    def curriculum(self) -> Curriculum:
        return Curriculum(s0=self.s0, s1=self.s1, mu0=self.mu0, total_steps=self.total_steps)

    def to_dict(self) -> dict:
        return asdict(self)


def forward_pair(x0: np.ndarray, z: np.ndarray, grid: TimeGrid, n: int):
    """Two points on one trajectory: (x0 + t_{n+1} z, x0 + t_n z), same z."""
    if not (1 <= n <= grid.n_sub - 1):
        raise IndexError(f"index {n} outside [1, {grid.n_sub - 1}]")
    if np.shape(z) != np.shape(x0):
        raise ValueError("noise shape must match sample shape")
    t_lo = grid.boundaries[n - 1]
    t_hi = grid.boundaries[n]
    return x0 + t_hi * z, x0 + t_lo * z


def _masked(loss_field, mask, padding_mode):
    if padding_mode == "include":
        return ad.mean(loss_field)
    m = np.broadcast_to(np.asarray(mask, dtype=bool)[:, None], loss_field.data.shape)
    return ad.masked_mean(loss_field, m)


def consistency_loss(pair: ModelPair, x0, cond: Conditioning, grid: TimeGrid, n: int,
                     z, sigma_data=0.5, lambda_fn=None, padding_mode="include", mask=None):
    """lambda(t_n) * mean squared distance between the online prediction at
    t_{n+1} and the gradient-detached target prediction at t_n."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if mask is None:
        mask = np.ones(x0.shape[0], dtype=bool)
    x_hi, x_lo = forward_pair(x0, z, grid, n)
    t_lo = grid.boundaries[n - 1]
    t_hi = grid.boundaries[n]
    online = consistency_fn(pair.online, x_hi, cond, t_hi, grid.epsilon, sigma_data)
    target = consistency_fn(pair.target, x_lo, cond, t_lo, grid.epsilon, sigma_data)
    diff = ad.sub(online, target.detach())
    lam = 1.0 if lambda_fn is None else float(lambda_fn(t_lo, t_hi))
    return ad.mul(_masked(ad.square(diff), mask, padding_mode), lam)


def make_lambda(kind: str):
    """Step-weight hook for the consistency loss: constant 1 (default) or
    the inverse-gap weighting 1/(t_{n+1} - t_n)."""
    if kind == "constant":
        return None
    if kind == "inverse_gap":
        return lambda t_lo, t_hi: 1.0 / (t_hi - t_lo)
    if kind == "inverse_sqrt_gap":
        return lambda t_lo, t_hi: 1.0 / np.sqrt(t_hi - t_lo)
    raise ValueError(f"unknown lambda kind {kind!r}")


def recon_loss(pair: ModelPair, x0, cond: Conditioning, grid: TimeGrid, z,
               norm="l1", padding_mode="include", mask=None, sigma_data=0.5):
    """MAE/MSE between x0 and the single-step prediction f(x0 + T z, T)."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if mask is None:
        mask = np.ones(x0.shape[0], dtype=bool)
    x_t = x0 + grid.t_max * z
    pred = consistency_fn(pair.online, x_t, cond, grid.t_max, grid.epsilon, sigma_data)
    err = ad.sub(pred, Tensor(x0))
    field = ad.abs_(err) if norm == "l1" else ad.square(err)
    return _masked(field, mask, padding_mode)


def ema_update(pair: ModelPair, mu: float) -> None:
    """theta_minus <- mu * theta_minus + (1 - mu) * theta, outside the tape."""
    if not (0.0 <= mu <= 1.0):
        raise ValueError(f"mu must be in [0, 1], got {mu}")
    for name, t in pair.target.items():
        t.data = mu * t.data + (1.0 - mu) * pair.online.tensors[name].data


class Adam:
    """Adam: m <- b1 m + (1-b1) g; v <- b2 v + (1-b2) g^2;
    p <- p - lr * mhat / (sqrt(vhat) + eps)."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: DenoiserParams, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class StepLosses:
    step: int
    n_drawn: int
    l_ct: float
    l_recon: float
    l_total: float
    lr: float
    n_sub: int
    mu: float


class Trainer:
    """Owns all mutable training state: model pair, sampler history,
    optimizer moments, the RNG stream, and the step counter."""

    def __init__(self, config: TrainConfig, bins: int, cond_dim: int = 1,
                 n_speakers: int = 0):
        self.config = config
        self.rng = Rng(config.seed)
        online = init_params(self.rng, bins, cond_dim, width=config.width,
                             depth=config.depth, time_dim=config.time_dim,
                             n_speakers=n_speakers)
        self.pair = ModelPair(online=online, target=online.copy(), mu=config.mu0)
        self.sampler = SamplerState(kind=config.sampler, alpha=config.alpha,
                                    phi=config.phi, history_depth=config.history_depth)
        self.optimizer = Adam(config.beta1, config.beta2, config.eps_opt)
        self.k = 0
        self._grid_cache: TimeGrid | None = None

    def lr_at(self, k: int) -> float:
        c = self.config
        return c.lr0 * c.lr_decay ** (k // c.lr_decay_interval)

    def grid_for(self, n_sub: int) -> TimeGrid:
        c = self.config
        if self._grid_cache is None or self._grid_cache.n_sub != n_sub:
            self._grid_cache = build_grid(c.epsilon, c.t_max, c.p, n_sub)
        return self._grid_cache

    def step(self, batch) -> StepLosses:
        """One training step on a batch of (Sample, Conditioning) pairs."""
        c = self.config
        n_sub, mu_k = curriculum_at(c.curriculum(), self.k)
        grid = self.grid_for(n_sub)
        self.sampler.resize(n_sub - 1)

        x0 = np.concatenate([s.values for s, _ in batch], axis=0)
        cond = Conditioning(np.concatenate([cd.vector for _, cd in batch], axis=0))
        mask = np.concatenate([s.mask for s, _ in batch])

        n = draw(self.sampler, n_sub, self.rng)
        z_ct = self.rng.gaussian(x0.shape)
        z_rec = self.rng.gaussian(x0.shape)

        l_ct = consistency_loss(self.pair, x0, cond, grid, n, z_ct,
                                sigma_data=c.sigma_data, padding_mode=c.padding_mode,
                                mask=mask, lambda_fn=make_lambda(c.lambda_kind))
        if c.recon_weight > 0.0:
            l_rec = recon_loss(self.pair, x0, cond, grid, z_rec, norm=c.loss_norm,
                               padding_mode=c.padding_mode, mask=mask,
                               sigma_data=c.sigma_data)
            total = ad.add(l_ct, ad.mul(l_rec, c.recon_weight))
            l_rec_val = l_rec.item()
        else:
            total = l_ct
            l_rec_val = 0.0

        if not np.isfinite(total.data):
            raise TrainingDiverged(self.k, {"n": n, "l_ct": l_ct.item()})

        ad.backward(total)
        lr = self.lr_at(self.k)
        self.optimizer.step(self.pair.online, lr)
        ema_update(self.pair, mu_k)
        record_loss(self.sampler, n, total.item())

        losses = StepLosses(step=self.k, n_drawn=n, l_ct=l_ct.item(),
                            l_recon=l_rec_val, l_total=total.item(), lr=lr,
                            n_sub=n_sub, mu=mu_k)
        self.k += 1
        return losses
