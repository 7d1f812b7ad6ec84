"""Run configuration, checkpoint persistence, and scripted experiments.

Configs are YAML (nested key/value); every artifact a run writes embeds
the sha256 hash of the canonical config so models, sample files, and
reports can be cross-checked.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import yaml

from .autodiff import Rng
from .datasets import ToyDataset, make_dataset, write_samples
from .inference import StepPlan, generate_multi
from .metrics import (FeatureSet, audio_seconds_from_frames, cosine_similarity,
                      fid, mcd, recall, rmse, rtf, ssim)
from .model import Conditioning
from .samplers import SamplerState
from .schedule import build_grid
from .training import TrainConfig, Trainer

__all__ = ["RunConfig", "save_checkpoint", "load_checkpoint", "run_training",
           "run_generate", "run_evaluate", "ConfigError"]

CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


DEFAULT_DATASET = {
    "kind": "gaussian_mixture",
    "count": 2048,
    "weights": [0.5, 0.5],
    "means": [[0.5, -0.5], [-0.5, 0.5]],
    "covs": [0.0625, 0.0625],
}


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    dataset: dict = field(default_factory=lambda: dict(DEFAULT_DATASET))
    train: TrainConfig = field(default_factory=TrainConfig)
    inference_steps: int = 1
    n_generate: int = 1000
    metrics: list = field(default_factory=lambda: ["fid", "recall", "ssim", "rmse", "mcd", "cos"])
    checkpoint_every: int = 5000

    def __post_init__(self):
        if isinstance(self.train, dict):
            try:
                self.train = TrainConfig(**self.train)
            except (TypeError, ValueError) as exc:
                raise ConfigError(str(exc)) from exc
        # run seed feeds the trainer unless the train block pins its own
        if self.train.seed == 0 and self.seed != 0:
            self.train.seed = self.seed

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a mapping")
        return cls.from_dict(raw)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=True)

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def apply_overrides(self, overrides: list[str]) -> None:
        """`--set a.b=value` style dotted-path overrides."""
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override must look like key=value: {item!r}")
            key, raw = item.split("=", 1)
            value = yaml.safe_load(raw)
            parts = key.split(".")
            obj = self
            for part in parts[:-1]:
                obj = obj[part] if isinstance(obj, dict) else getattr(obj, part)
            last = parts[-1]
            if isinstance(obj, dict):
                obj[last] = value
            elif hasattr(obj, last):
                setattr(obj, last, value)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        # setattr bypasses dataclass validation; re-run it on the result
        try:
            self.train.__post_init__()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


# -- checkpoints --------------------------------------------------------


def save_checkpoint(path, trainer: Trainer, config: RunConfig) -> None:
    arrays = {}
    for name, t in trainer.pair.online.items():
        arrays[f"online/{name}"] = t.data
    for name, t in trainer.pair.target.items():
        arrays[f"target/{name}"] = t.data
    for name, m in trainer.optimizer.m.items():
        arrays[f"adam_m/{name}"] = m
        arrays[f"adam_v/{name}"] = trainer.optimizer.v[name]
    if trainer.sampler.loss_history is not None:
        arrays["sampler/loss_history"] = trainer.sampler.loss_history
        arrays["sampler/fill_count"] = trainer.sampler.fill_count
        arrays["sampler/write_pos"] = trainer.sampler.write_pos
    meta = {
        "version": CHECKPOINT_VERSION,
        "config_hash": config.hash(),
        "step": trainer.k,
        "adam_t": trainer.optimizer.t,
        "rng_state": trainer.rng.state(),
        "model": {
            "bins": trainer.pair.online.bins,
            "cond_dim": trainer.pair.online.cond_dim,
            "width": trainer.pair.online.width,
            "depth": trainer.pair.online.depth,
            "time_dim": trainer.pair.online.time_dim,
            "n_speakers": trainer.pair.online.n_speakers,
        },
        "sampler": {
            "kind": trainer.sampler.kind,
            "alpha": trainer.sampler.alpha,
            "phi": trainer.sampler.phi,
            "history_depth": trainer.sampler.history_depth,
            "n_indices": trainer.sampler.n_indices,
        },
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez_compressed(path, **arrays)


def load_checkpoint(path, config: RunConfig) -> tuple[Trainer, dict]:
    with np.load(path) as npz:
        meta = json.loads(bytes(npz["meta"]).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        m = meta["model"]
        trainer = Trainer(config.train, bins=m["bins"], cond_dim=m["cond_dim"],
                          n_speakers=m["n_speakers"])
        for name, t in trainer.pair.online.items():
            t.data = npz[f"online/{name}"].copy()
        for name, t in trainer.pair.target.items():
            t.data = npz[f"target/{name}"].copy()
        for key in npz.files:
            if key.startswith("adam_m/"):
                name = key[len("adam_m/"):]
                trainer.optimizer.m[name] = npz[key].copy()
                trainer.optimizer.v[name] = npz[f"adam_v/{name}"].copy()
        trainer.optimizer.t = meta["adam_t"]
        trainer.k = meta["step"]
        s = meta["sampler"]
        trainer.sampler = SamplerState(kind=s["kind"], alpha=s["alpha"], phi=s["phi"],
                                       history_depth=s["history_depth"])
        if "sampler/loss_history" in npz.files:
            trainer.sampler._alloc(s["n_indices"])
            trainer.sampler.loss_history = npz["sampler/loss_history"].copy()
            trainer.sampler.fill_count = npz["sampler/fill_count"].copy()
            trainer.sampler.write_pos = npz["sampler/write_pos"].copy()
        trainer.rng.set_state(meta["rng_state"])
    return trainer, meta


def checkpoint_hash(path) -> str:
    with np.load(path) as npz:
        return json.loads(bytes(npz["meta"]).decode())["config_hash"]


# -- runs ---------------------------------------------------------------


def build_run_dataset(config: RunConfig) -> ToyDataset:
    # dataset stream is independent of the training stream so batches
    # drawn after a resume line up with the straight-through run
    return make_dataset(config.dataset, Rng(config.seed).spawn(1))


def run_training(config: RunConfig, resume: str | None = None,
                 log_path=None) -> tuple[Trainer, Path]:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.yaml")
    dataset = build_run_dataset(config)

    if resume is not None:
        trainer, meta = load_checkpoint(resume, config)
        if meta["config_hash"] != config.hash():
            raise ConfigError("checkpoint config hash does not match this config")
        mode = "a"
    else:
        trainer = Trainer(config.train, bins=dataset.bins, cond_dim=1)
        mode = "w"

    log_path = Path(log_path) if log_path else out / "loss.csv"
    with open(log_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(["step", "n_drawn", "L_CT", "L_recon", "L_total",
                             "lr", "N_k", "mu_k", "config_hash"])
        while trainer.k < config.train.total_steps:
            batch = dataset.draw_batch(trainer.rng, config.train.batch_size)
            losses = trainer.step(batch)
            writer.writerow([losses.step, losses.n_drawn,
                             f"{losses.l_ct:.10g}", f"{losses.l_recon:.10g}",
                             f"{losses.l_total:.10g}", f"{losses.lr:.10g}",
                             losses.n_sub, f"{losses.mu:.10g}", config.hash()])
            if config.checkpoint_every and trainer.k % config.checkpoint_every == 0:
                save_checkpoint(out / f"ckpt_{trainer.k:07d}.npz", trainer, config)
    final = out / "ckpt_final.npz"
    save_checkpoint(final, trainer, config)
    return trainer, final


def run_generate(config: RunConfig, checkpoint, n_samples=None, steps=None,
                 seed_offset: int = 7) -> tuple[list, float, Path]:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trainer, meta = load_checkpoint(checkpoint, config)
    dataset = build_run_dataset(config)
    n_samples = n_samples if n_samples is not None else config.n_generate
    steps = steps if steps is not None else config.inference_steps
    c = config.train
    grid = build_grid(c.epsilon, c.t_max, c.p, max(c.s1 + 1, 2))
    plan = StepPlan.from_grid(grid, steps)
    rng = Rng(config.seed).spawn(seed_offset)
    shape = (dataset.frames, dataset.bins)
    cond = Conditioning.none(dataset.frames)
    samples = []
    t0 = time.perf_counter()
    for _ in range(n_samples):
        samples.append(generate_multi(trainer.pair.online, cond, shape, rng, plan,
                                      epsilon=c.epsilon, sigma_data=c.sigma_data))
    elapsed = time.perf_counter() - t0
    path = out / f"samples_T{steps}.cmg"
    write_samples(path, samples)
    with open(str(path) + ".json", "w") as fh:
        json.dump({"config_hash": config.hash(), "steps": steps,
                   "n_samples": n_samples, "seconds": elapsed}, fh)
    return samples, elapsed, path


def evaluate_samples(real: ToyDataset, gen_samples: list, metric_names,
                     synthesis_seconds: float | None = None) -> dict:
    real_feats = FeatureSet(np.stack([s.values.ravel() for s in real.samples[:len(gen_samples)]]))
    gen_feats = FeatureSet(np.stack([s.values.ravel() for s in gen_samples]))
    n_pairs = min(real_feats.rows, gen_feats.rows)
    results = {}
    for name in metric_names:
        if name == "fid":
            results["fid"] = fid(real_feats, gen_feats)
        elif name == "recall":
            results["recall"] = recall(real_feats, gen_feats, k=3)
        elif name == "ssim":
            results["ssim"] = float(np.mean([
                ssim(real.samples[i].values, gen_samples[i].values)
                for i in range(n_pairs)]))
        elif name == "rmse":
            results["rmse"] = float(np.mean([
                rmse(real.samples[i].values, gen_samples[i].values)
                for i in range(n_pairs)]))
        elif name == "mcd":
            results["mcd"] = float(np.mean([
                mcd(real.samples[i].values, gen_samples[i].values)
                for i in range(n_pairs)]))
        elif name == "cos":
            results["cos"] = float(np.mean([
                cosine_similarity(real.samples[i].values, gen_samples[i].values)
                for i in range(n_pairs)]))
        elif name == "ffe":
            results["ffe"] = float(np.mean([
                np.mean(np.abs(real.samples[i].values - gen_samples[i].values))
                for i in range(n_pairs)]))
        elif name == "rtf":
            if synthesis_seconds is None:
                continue
            audio = audio_seconds_from_frames(sum(s.frames for s in gen_samples))
            results["rtf"] = rtf(synthesis_seconds, audio)
        else:
            raise ConfigError(f"unknown metric {name!r}")
    return results


def run_evaluate(config: RunConfig, checkpoint, allow_hash_mismatch=False) -> dict:
    out = Path(config.out_dir)
    if checkpoint_hash(checkpoint) != config.hash() and not allow_hash_mismatch:
        raise ConfigError("checkpoint was trained under a different config "
                          "(pass --allow-hash-mismatch to override)")
    dataset = build_run_dataset(config)
    gen, elapsed, _ = run_generate(config, checkpoint)
    names = list(config.metrics) + (["rtf"] if "rtf" not in config.metrics else [])
    results = evaluate_samples(dataset, gen, names, synthesis_seconds=elapsed)
    report = out / "metrics.csv"
    with open(report, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value", "config_hash"])
        for k, v in results.items():
            writer.writerow([k, f"{v:.10g}", config.hash()])
    return results
