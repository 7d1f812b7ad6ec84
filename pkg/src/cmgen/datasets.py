"""Toy datasets and the binary sample-file format.

Dataset kinds: flat Gaussians and Gaussian mixtures (with analytic
moments for oracle checks), a sine-bank "spectrogram" generator with
variable lengths and honest padding masks, and ingestion of sample
files written by the generator.

Sample file layout (little-endian): magic b"CMG1", u32 count, then per
sample u32 frames, u32 bins, u32 valid_frames, f32 values row-major.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Rng
from .model import Conditioning, Sample

__all__ = ["ToyDataset", "make_dataset", "write_samples", "read_samples"]

MAGIC = b"CMG1"


@dataclass
class ToyDataset:
    kind: str
    samples: list = field(repr=False)
    mean: np.ndarray | None = None  # analytic, flat kinds only
    cov: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def frames(self) -> int:
        return self.samples[0].frames

    @property
    def bins(self) -> int:
        return self.samples[0].bins

    def draw_batch(self, rng: Rng, batch_size: int):
        idx = rng.integer_array(0, len(self.samples), batch_size)
        return [(self.samples[i], Conditioning.none(self.samples[i].frames)) for i in idx]


def _mixture_moments(weights, means, covs):
    weights = np.asarray(weights, dtype=np.float64)
    means = np.asarray(means, dtype=np.float64)
    covs = np.asarray(covs, dtype=np.float64)
    mu = weights @ means
    dim = means.shape[1]
    cov = np.zeros((dim, dim))
    for w, m, c in zip(weights, means, covs):
        d = m - mu
        cov += w * (c + np.outer(d, d))
    return mu, cov


def make_gaussian(rng: Rng, mean, cov, count: int) -> ToyDataset:
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim == 0:
        cov = float(cov) * np.eye(len(mean))
    chol = np.linalg.cholesky(cov)
    samples = [Sample(values=(mean + chol @ rng.gaussian(len(mean)))[None, :])
               for _ in range(count)]
    return ToyDataset(kind="gaussian", samples=samples, mean=mean, cov=cov)


def make_gaussian_mixture(rng: Rng, weights, means, covs, count: int) -> ToyDataset:
    weights = np.asarray(weights, dtype=np.float64)
    weights = weights / weights.sum()
    means = np.asarray(means, dtype=np.float64)
    covs = np.asarray(covs, dtype=np.float64)
    if covs.ndim == 1:  # isotropic variance per component
        covs = np.stack([v * np.eye(means.shape[1]) for v in covs])
    chols = [np.linalg.cholesky(c) for c in covs]
    samples = []
    for _ in range(count):
        j = rng.choice(len(weights), p=weights)
        x = means[j] + chols[j] @ rng.gaussian(means.shape[1])
        samples.append(Sample(values=x[None, :]))
    mu, cov = _mixture_moments(weights, means, covs)
    return ToyDataset(kind="gaussian_mixture", samples=samples, mean=mu, cov=cov)


def make_sine_bank(rng: Rng, count: int, bins: int = 8, max_frames: int = 32,
                   min_frames: int = 8) -> ToyDataset:
    """Banks of sinusoids over frames, one frequency/phase per bin,
    amplitude <= 1, padded to max_frames with zero frames and honest masks."""
    samples = []
    for _ in range(count):
        frames = rng.integers(min_frames, max_frames + 1)
        t = np.arange(frames)[:, None]
        freq = 0.05 + 0.4 * rng.uniform((bins,))
        phase = 2 * np.pi * rng.uniform((bins,))
        amp = 0.2 + 0.8 * rng.uniform((bins,))
        vals = amp * np.sin(2 * np.pi * freq * t + phase)
        padded = np.zeros((max_frames, bins))
        padded[:frames] = vals
        mask = np.zeros(max_frames, dtype=bool)
        mask[:frames] = True
        samples.append(Sample(values=padded, mask=mask))
    return ToyDataset(kind="sine_bank_spectrogram", samples=samples)


def make_dataset(spec: dict, rng: Rng) -> ToyDataset:
    kind = spec.get("kind")
    count = int(spec.get("count", 1024))
    if kind == "gaussian":
        return make_gaussian(rng, spec["mean"], np.asarray(spec["cov"]), count)
    if kind == "gaussian_mixture":
        return make_gaussian_mixture(rng, spec["weights"], spec["means"],
                                     np.asarray(spec["covs"]), count)
    if kind == "sine_bank_spectrogram":
        return make_sine_bank(rng, count, bins=int(spec.get("bins", 8)),
                              max_frames=int(spec.get("max_frames", 32)),
                              min_frames=int(spec.get("min_frames", 8)))
    if kind == "file":
        return read_samples(spec["path"])
    raise ValueError(f"unknown dataset kind {kind!r}")


def write_samples(path, samples) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(samples)))
        for s in samples:
            fh.write(struct.pack("<III", s.frames, s.bins, int(s.mask.sum())))
            fh.write(s.values.astype("<f4").tobytes())


def read_samples(path) -> ToyDataset:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic, not a CMG1 sample file")
    off = 4
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    samples = []
    for _ in range(count):
        if off + 12 > len(data):
            raise ValueError(f"{path}: truncated header at sample {len(samples)}")
        frames, bins, valid = struct.unpack_from("<III", data, off)
        off += 12
        nbytes = frames * bins * 4
        if off + nbytes > len(data):
            raise ValueError(f"{path}: truncated payload at sample {len(samples)}")
        vals = np.frombuffer(data, dtype="<f4", count=frames * bins, offset=off)
        off += nbytes
        if valid < 1 or valid > frames:
            raise ValueError(f"{path}: invalid valid_frames={valid} for frames={frames}")
        vals = vals.reshape(frames, bins).astype(np.float64)
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"{path}: non-finite values in sample {len(samples)}")
        mask = np.zeros(frames, dtype=bool)
        mask[:valid] = True
        samples.append(Sample(values=vals, mask=mask))
    return ToyDataset(kind="file", samples=samples)
