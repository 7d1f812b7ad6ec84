"""Objective evaluation metrics as pure functions over arrays.

Feature extraction (real MFCC DSP) is out of scope; callers supply
feature sets directly. All functions reject non-finite inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "FeatureSet",
    "fid",
    "cosine_similarity",
    "ssim",
    "rmse",
    "ffe",
    "mcd",
    "recall",
    "rtf",
]

FRAMESHIFT_SECONDS = 0.010  # 10 ms hop between frames


@dataclass
class FeatureSet:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature set contains non-finite values")

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    """Symmetric matrix square root with negative eigenvalues clamped to 0."""
    sym = 0.5 * (mat + mat.T)
    vals, vecs = np.linalg.eigh(sym)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(real: FeatureSet, gen: FeatureSet) -> float:
    """Frechet distance between Gaussian fits of two feature sets."""
    if real.dim != gen.dim:
        raise ValueError(f"feature dims differ: {real.dim} vs {gen.dim}")
    if real.rows < 2 or gen.rows < 2:
        raise ValueError("FID needs at least 2 rows per set")
    mu_p, mu_a = real.values.mean(axis=0), gen.values.mean(axis=0)
    sig_p = np.cov(real.values, rowvar=False).reshape(real.dim, real.dim)
    sig_a = np.cov(gen.values, rowvar=False).reshape(gen.dim, gen.dim)
    # Tr((Sp Sa)^(1/2)) computed via the symmetric product sqrt for stability
    root_p = _psd_sqrt(sig_p)
    cross = _psd_sqrt(root_p @ sig_a @ root_p)
    val = float(np.sum((mu_p - mu_a) ** 2) + np.trace(sig_p + sig_a - 2.0 * cross))
    return max(val, 0.0)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError("vectors must have equal length")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for zero vectors")
    return float(np.dot(a, b) / (na * nb))


def ssim(p, a, c1: float = 1e-4, c2: float = 9e-4) -> float:
    """Global (windowless) structural similarity between two 2-D arrays."""
    p = np.asarray(p, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if p.shape != a.shape:
        raise ValueError("arrays must have equal shapes")
    mu_p, mu_a = p.mean(), a.mean()
    var_p, var_a = p.var(), a.var()
    cov = ((p - mu_p) * (a - mu_a)).mean()
    return float((2 * mu_p * mu_a + c1) * (2 * cov + c2)
                 / ((mu_p**2 + mu_a**2 + c1) * (var_p + var_a + c2)))


def rmse(f, g) -> float:
    f = np.asarray(f, dtype=np.float64).ravel()
    g = np.asarray(g, dtype=np.float64).ravel()
    if f.shape != g.shape:
        raise ValueError("sequences must have equal length")
    return float(np.sqrt(np.mean((f - g) ** 2)))


def ffe(f, g) -> float:
    """Mean absolute frame error between two frequency tracks."""
    f = np.asarray(f, dtype=np.float64).ravel()
    g = np.asarray(g, dtype=np.float64).ravel()
    if f.shape != g.shape:
        raise ValueError("sequences must have equal length")
    return float(np.mean(np.abs(f - g)))


def mcd(p, a, classic_scale: bool = False) -> float:
    """Mean per-frame Euclidean distance between coefficient vectors.

    ``classic_scale`` applies the conventional 10/ln10 * sqrt(2) factor.
    """
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    if p.shape != a.shape:
        raise ValueError("frame features must have equal shapes")
    d = float(np.mean(np.linalg.norm(p - a, axis=1)))
    if classic_scale:
        d *= 10.0 / np.log(10.0) * np.sqrt(2.0)
    return d


def recall(real: FeatureSet, gen: FeatureSet, k: int = 3) -> float:
    """Fraction of real vectors inside the k-NN manifold of the generated set."""
    if real.dim != gen.dim:
        raise ValueError("feature dims differ")
    if gen.rows < k + 1 or real.rows < 1:
        raise ValueError(f"need at least k+1={k + 1} generated rows")
    g = gen.values
    # pairwise distances within gen; k-th NN excludes the point itself
    d_gg = np.linalg.norm(g[:, None, :] - g[None, :, :], axis=-1)
    np.fill_diagonal(d_gg, np.inf)
    radius = np.sort(d_gg, axis=1)[:, k - 1]
    d_rg = np.linalg.norm(real.values[:, None, :] - g[None, :, :], axis=-1)
    nearest = np.argmin(d_rg, axis=1)
    inside = d_rg[np.arange(real.rows), nearest] <= radius[nearest]
    return float(inside.mean())


def rtf(synthesis_seconds: float, audio_seconds: float) -> float:
    if audio_seconds <= 0:
        raise ValueError("audio duration must be positive")
    return float(synthesis_seconds) / float(audio_seconds)


def audio_seconds_from_frames(frames: int, frameshift: float = FRAMESHIFT_SECONDS) -> float:
    return frames * frameshift
