"""The consistency function and its small conditional denoiser.

f(x, t) = c_skip(t) * x + c_out(t) * F(x, t), with coefficients chosen
so f(x, eps) == x exactly (architecture-enforced boundary condition).
The denoiser is a stack of per-frame residual blocks with additive
sinusoidal-time and conditioning projections; the output projection is
zero-initialized so training starts from the identity map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Rng, Tensor

__all__ = [
    "Sample",
    "Conditioning",
    "DenoiserParams",
    "time_embed",
    "init_params",
    "denoise_raw",
    "consistency_fn",
    "c_skip",
    "c_out",
    "score_from_denoiser",
]


@dataclass
class Sample:
    """A frames x bins array with a per-frame validity mask."""

    values: np.ndarray
    mask: np.ndarray = None

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        if self.mask is None:
            self.mask = np.ones(self.values.shape[0], dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != (self.values.shape[0],):
            raise ValueError("mask length must equal frame count")
        if not self.mask.any():
            raise ValueError("sample needs at least one valid frame")

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def bins(self) -> int:
        return self.values.shape[1]


@dataclass
class Conditioning:
    """Stand-in for the encoder/adaptor output: one vector per frame."""

    vector: np.ndarray
    speaker_id: int | None = None

    def __post_init__(self):
        self.vector = np.atleast_2d(np.asarray(self.vector, dtype=np.float64))

    @classmethod
    def none(cls, frames: int, c_dim: int = 1) -> "Conditioning":
        return cls(vector=np.zeros((frames, c_dim)))


@dataclass
class DenoiserParams:
    """All weights of the denoiser, keyed by name. Values are Tensors."""

    bins: int
    cond_dim: int
    width: int
    depth: int
    time_dim: int
    n_speakers: int = 0
    tensors: dict = field(default_factory=dict, repr=False)

    def items(self):
        return self.tensors.items()

    def param_count(self) -> int:
        return sum(int(t.data.size) for t in self.tensors.values())

    def copy(self) -> "DenoiserParams":
        clone = DenoiserParams(self.bins, self.cond_dim, self.width, self.depth,
                               self.time_dim, self.n_speakers)
        clone.tensors = {k: Tensor(t.data.copy(), requires_grad=t.requires_grad)
                         for k, t in self.tensors.items()}
        return clone


def time_embed(t: float, dim: int) -> np.ndarray:
    """Sinusoidal embedding of the noise level with geometric frequencies
    spanning [1, 1e-4] over dim/2 bands."""
    if t <= 0:
        raise ValueError(f"time embedding needs t > 0, got {t}")
    if dim % 2 != 0:
        raise ValueError(f"embedding dim must be even, got {dim}")
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, np.log(1e-4), half))
    angles = t * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)])


def init_params(rng: Rng, bins: int, cond_dim: int, width: int = 64, depth: int = 4,
                time_dim: int = 32, n_speakers: int = 0) -> DenoiserParams:
    p = DenoiserParams(bins=bins, cond_dim=cond_dim, width=width, depth=depth,
                       time_dim=time_dim, n_speakers=n_speakers)

    def w(name, shape, scale):
        p.tensors[name] = Tensor(rng.gaussian(shape) * scale, requires_grad=True)

    def b(name, n):
        p.tensors[name] = Tensor(np.zeros(n), requires_grad=True)

    w("in.w", (bins, width), 1.0 / np.sqrt(bins))
    b("in.b", width)
    w("time.w", (time_dim, width), 1.0 / np.sqrt(time_dim))
    b("time.b", width)
    w("cond.w", (cond_dim, width), 1.0 / np.sqrt(cond_dim))
    b("cond.b", width)
    if n_speakers:
        w("spk.emb", (n_speakers, width), 0.1)
    for r in range(depth):
        w(f"blk{r}.w1", (width, width), 1.0 / np.sqrt(width))
        b(f"blk{r}.b1", width)
        w(f"blk{r}.w2", (width, width), 1.0 / np.sqrt(width))
        b(f"blk{r}.b2", width)
    # zero init: the raw denoiser starts as the zero map
    p.tensors["out.w"] = Tensor(np.zeros((width, bins)), requires_grad=True)
    b("out.b", bins)
    return p


def denoise_raw(params: DenoiserParams, x, cond: Conditioning, t: float,
                speaker_id: int | None = None, sigma_data: float = 0.5):
    """Raw network F(x, t): Tensor of the same shape as x.

    ``x`` may be a numpy array or Tensor of shape [frames, bins]; the
    conditioning vector must have matching frame count. The input is
    scaled by 1/sqrt(sigma_data^2 + t^2) so the first layer sees
    unit-scale activations at every noise level.
    """
    x = x if isinstance(x, Tensor) else Tensor(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    cvec = np.atleast_2d(cond.vector)
    if cvec.shape[0] != x.data.shape[0]:
        raise ValueError(f"conditioning frames {cvec.shape[0]} != sample frames {x.data.shape[0]}")
    if x.data.shape[1] != params.bins:
        raise ValueError(f"expected {params.bins} bins, got {x.data.shape[1]}")

    te = Tensor(time_embed(t, params.time_dim)[None, :])
    tproj = ad.add(ad.matmul(te, params.tensors["time.w"]), params.tensors["time.b"])
    cproj = ad.add(ad.matmul(Tensor(cvec), params.tensors["cond.w"]), params.tensors["cond.b"])
    sid = speaker_id if speaker_id is not None else cond.speaker_id
    if sid is not None and params.n_speakers:
        cproj = ad.add(cproj, ad.slice_(params.tensors["spk.emb"], (slice(sid, sid + 1), slice(None))))

    c_in = 1.0 / np.sqrt(sigma_data**2 + t**2)
    h = ad.add(ad.matmul(ad.mul(x, c_in), params.tensors["in.w"]), params.tensors["in.b"])
    inject = ad.add(tproj, cproj)
    for r in range(params.depth):
        pre = ad.add(ad.add(ad.matmul(h, params.tensors[f"blk{r}.w1"]),
                            params.tensors[f"blk{r}.b1"]), inject)
        post = ad.add(ad.matmul(ad.relu(pre), params.tensors[f"blk{r}.w2"]),
                      params.tensors[f"blk{r}.b2"])
        h = ad.add(h, post)
    return ad.add(ad.matmul(h, params.tensors["out.w"]), params.tensors["out.b"])


def c_skip(t: float, epsilon: float, sigma_data: float = 0.5) -> float:
    return sigma_data**2 / ((t - epsilon) ** 2 + sigma_data**2)


def c_out(t: float, epsilon: float, sigma_data: float = 0.5) -> float:
    return sigma_data * (t - epsilon) / np.sqrt(sigma_data**2 + t**2)


def consistency_fn(params: DenoiserParams, x, cond: Conditioning, t: float,
                   epsilon: float, sigma_data: float = 0.5):
    """f(x, t) = c_skip(t) x + c_out(t) F(x, t); f(x, eps) == x exactly."""
    if t < epsilon:
        raise ValueError(f"t={t} below the grid floor {epsilon}")
    x = x if isinstance(x, Tensor) else Tensor(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    raw = denoise_raw(params, x, cond, t, sigma_data=sigma_data)
    return ad.add(ad.mul(x, c_skip(t, epsilon, sigma_data)),
                  ad.mul(raw, c_out(t, epsilon, sigma_data)))


def score_from_denoiser(f_out: np.ndarray, x: np.ndarray, t: float) -> np.ndarray:
    """Score estimate (f(x,t) - x) / t^2 under the x_t = x_0 + t z noising."""
    if t == 0:
        raise ValueError("score undefined at t == 0")
    return (np.asarray(f_out) - np.asarray(x)) / (t * t)
