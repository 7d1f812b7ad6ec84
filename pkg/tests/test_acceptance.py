"""End-to-end acceptance suite.

Each test checks one numbered acceptance criterion at its stated
tolerance and records a single pass/fail line (echoed in the terminal
summary). The two trained models are session fixtures; everything runs
on CPU at desk scale.
"""

import csv
import time

import numpy as np
import pytest

from cmgen import autodiff as ad
from cmgen.autodiff import Rng, tensor
from cmgen.cli import main as cli_main
from cmgen.datasets import make_gaussian, make_gaussian_mixture
from cmgen.inference import StepPlan, generate_multi, ode_reference_solve
from cmgen.metrics import FeatureSet, cosine_similarity, ffe, fid, mcd, recall, rmse, ssim
from cmgen.model import Conditioning, consistency_fn, denoise_raw, init_params
from cmgen.samplers import KINDS, SamplerState, draw, record_loss, weights
from cmgen.schedule import build_grid
from cmgen.training import ModelPair, TrainConfig, Trainer, consistency_loss, ema_update

EPS = 0.002
GOLDEN_N4 = [0.002, 0.46997905799774678669, 9.723201355260126535, 80.0]


# -- trained-model fixtures ----------------------------------------------


def train(dataset, **cfg_kw):
    base = dict(total_steps=20_000, batch_size=32, width=64, depth=4,
                lr0=1e-3, lr_decay=0.95, lr_decay_interval=2000,
                sampler="importance", recon_weight=0.0,
                lambda_kind="inverse_sqrt_gap", seed=1)
    base.update(cfg_kw)
    cfg = TrainConfig(**base)
    trainer = Trainer(cfg, bins=dataset.bins)
    losses = [trainer.step(dataset.draw_batch(trainer.rng, cfg.batch_size)).l_total
              for _ in range(cfg.total_steps)]
    return trainer, losses


def sample_batch(trainer, steps, n, seed, s1=None):
    c = trainer.config
    grid = build_grid(c.epsilon, c.t_max, c.p, (s1 or c.s1) + 1)
    plan = StepPlan.from_grid(grid, steps)
    return generate_multi(trainer.pair.online, Conditioning.none(n), (n, 2),
                          Rng(seed), plan, epsilon=c.epsilon,
                          sigma_data=c.sigma_data).values


@pytest.fixture(scope="session")
def mixture_model():
    """Gaussian-mixture toy task shared by criteria 6 and 7."""
    data = make_gaussian_mixture(Rng(5), [0.5, 0.5],
                                 [[0.5, -0.5], [-0.5, 0.5]],
                                 np.array([0.0625, 0.0625]), 2048)
    trainer, losses = train(data)
    return trainer, losses, data


@pytest.fixture(scope="session")
def gaussian_model():
    """Analytic single-Gaussian task for the ODE-oracle criterion."""
    mean = np.array([1.0, -1.0])
    var = 0.25
    data = make_gaussian(Rng(7), mean, var * np.eye(2), 2048)
    trainer, _ = train(data, s1=80)
    return trainer, mean, var


# -- criteria ------------------------------------------------------------


def test_criterion_1_grid_correctness(criterion):
    t0 = time.perf_counter()
    ok = True
    for n in range(2, 152):
        g = build_grid(EPS, 80.0, 7.0, n)
        ok &= g.boundaries[0] == EPS and g.boundaries[-1] == 80.0
        ok &= bool(np.all(np.diff(g.boundaries) > 0))
    interior = build_grid(EPS, 80.0, 7.0, 4).boundaries
    ok &= all(abs(a - b) <= 1e-12 * abs(b) for a, b in zip(interior, GOLDEN_N4))
    ok &= time.perf_counter() - t0 < 1.0
    criterion(1, "grid correctness", ok)


def test_criterion_2_boundary_condition(criterion):
    t0 = time.perf_counter()
    rng = Rng(101)
    params = init_params(rng, 2, 1, width=32, depth=3)
    params.tensors["out.w"].data = rng.gaussian(params.tensors["out.w"].data.shape)
    x = rng.gaussian((1000, 2)) * 3.0
    cond = Conditioning(rng.gaussian((1000, 1)))
    out = consistency_fn(params, x, cond, EPS, EPS).data
    ok = np.abs(out - x).max() < 1e-6
    ok &= time.perf_counter() - t0 < 5.0
    criterion(2, "boundary condition", ok)


def _fd(f, arr, h=1e-5):
    g = np.zeros_like(arr)
    flat, gflat = arr.ravel(), g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f()
        flat[i] = orig - h
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * h)
    return g


def _fd_ok(build, arrs, tol=1e-4):
    """build(tensors) -> scalar Tensor; checks every input's gradient."""
    ts = [tensor(a, requires_grad=True) for a in arrs]
    ad.backward(build(ts))
    for i, t in enumerate(ts):
        def value(i=i):
            fresh = [tensor(q.data) for q in ts]
            return float(build(fresh).data)
        fd = _fd(value, t.data)
        scale = max(np.abs(fd).max(), np.abs(t.grad).max(), 1e-8)
        if np.abs(fd - t.grad).max() / scale >= tol:
            return False
    return True


def test_criterion_3_gradient_fidelity(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(42)
    ok = True
    points = 0
    while points < 100 and ok:
        a = rng.normal(size=(3, 3))
        b = rng.normal(size=(3, 3))
        a[np.abs(a) < 0.05] += 0.1  # stay clear of relu/abs kinks
        mask = rng.random((3, 3)) > 0.3
        mask.flat[0] = True
        ok &= _fd_ok(lambda t: ad.sum_(ad.square(ad.add(t[0], t[1]))), [a, b])
        ok &= _fd_ok(lambda t: ad.sum_(ad.square(ad.sub(t[0], t[1]))), [a, b])
        ok &= _fd_ok(lambda t: ad.sum_(ad.square(ad.mul(t[0], t[1]))), [a, b])
        ok &= _fd_ok(lambda t: ad.sum_(ad.square(ad.matmul(t[0], t[1]))), [a, b])
        ok &= _fd_ok(lambda t: ad.sum_(ad.relu(t[0])), [a])
        ok &= _fd_ok(lambda t: ad.sum_(ad.abs_(t[0])), [a])
        ok &= _fd_ok(lambda t: ad.mean(ad.square(t[0])), [a])
        ok &= _fd_ok(lambda t: ad.masked_mean(ad.square(t[0]), mask), [a])
        ok &= _fd_ok(lambda t: ad.mean(ad.concat([t[0], t[1]], axis=0)[1:5]), [a, b])
        points += 10
    # the composed denoiser and loss graphs, checked per parameter
    params = init_params(Rng(7), 2, 1, width=8, depth=2, time_dim=4)
    params.tensors["out.w"].data = Rng(8).gaussian((8, 2)) * 0.3
    x = Rng(9).gaussian((3, 2))
    cond = Conditioning.none(3)

    def loss_value():
        return float(ad.sum_(ad.square(denoise_raw(params, x, cond, 0.9))).data)

    out = ad.sum_(ad.square(denoise_raw(params, x, cond, 0.9)))
    ad.backward(out)
    for name, t in params.items():
        fd = _fd(loss_value, t.data)
        scale = max(np.abs(fd).max(), np.abs(t.grad).max(), 1e-8)
        ok &= np.abs(fd - t.grad).max() / scale < 1e-4
    ok &= time.perf_counter() - t0 < 30.0
    criterion(3, "gradient fidelity", ok)


def test_criterion_4_ema_stopgrad(criterion):
    t0 = time.perf_counter()
    online = init_params(Rng(11), 2, 1, width=8, depth=2, time_dim=4)
    pair = ModelPair(online=online, target=online.copy())
    for t in pair.online.tensors.values():
        t.data = t.data + 0.5
    ok = True
    for mu, expect in ((1.0, "target"), (0.0, "online"), (0.5, "mid")):
        p = ModelPair(online=pair.online.copy(), target=pair.target.copy())
        before = {k: t.data.copy() for k, t in p.target.items()}
        ema_update(p, mu)
        for k, t in p.target.items():
            want = mu * before[k] + (1 - mu) * p.online.tensors[k].data
            ok &= np.abs(t.data - want).max() <= 1e-12
    # stopgrad: no gradient reaches the target parameters
    grid = build_grid(EPS, 80.0, 7.0, 4)
    loss = consistency_loss(pair, Rng(12).gaussian((2, 2)), Conditioning.none(2),
                            grid, 2, Rng(13).gaussian((2, 2)))
    targets = list(pair.target.tensors.values())
    grads = ad.backward(loss, params=targets)
    ok &= all(np.all(grads[id(t)] == 0.0) for t in targets)
    ok &= time.perf_counter() - t0 < 1.0
    criterion(4, "EMA/stopgrad", ok)


def test_criterion_5_sampler_laws(criterion):
    t0 = time.perf_counter()
    ok = True
    for kind in KINDS:
        for n in range(2, 152):
            s = SamplerState(kind=kind)
            s.resize(n - 1)
            if kind == "importance":
                for i in range(1, n):
                    record_loss(s, i, float(i))
            ok &= abs(weights(s, n).sum() - 1.0) <= 1e-12
    rng = Rng(55)
    uniform = SamplerState(kind="uniform")
    counts = np.zeros(2)
    for _ in range(100_000):
        counts[draw(uniform, 3, rng) - 1] += 1
    ok &= bool(np.all(np.abs(counts / counts.sum() - 0.5) < 0.01))
    eq = SamplerState(kind="importance")
    eq.resize(4)
    for i in range(1, 5):
        record_loss(eq, i, 3.3)
    ok &= bool(np.array_equal(weights(eq, 5), np.full(4, 0.25)))
    phi1 = SamplerState(kind="importance", phi=1.0)
    phi1.resize(4)
    for i, v in enumerate((9.0, 1.0, 4.0, 2.0), start=1):
        record_loss(phi1, i, v)
    ok &= bool(np.array_equal(weights(phi1, 5), np.full(4, 0.25)))
    ok &= time.perf_counter() - t0 < 10.0
    criterion(5, "sampler laws", ok)


def test_criterion_6_toy_convergence(criterion, mixture_model):
    trainer, losses, data = mixture_model
    early = float(np.mean(losses[50:150]))
    late = float(np.mean(losses[-100:]))
    ok = late < 0.25 * early
    samples = sample_batch(trainer, steps=1, n=5000, seed=55)
    mean_err = np.abs(samples.mean(axis=0) - data.mean).max()
    cov_err = np.linalg.norm(np.cov(samples, rowvar=False) - data.cov)
    ok &= mean_err < 0.1
    ok &= cov_err < 0.2
    criterion(6, "toy convergence", ok)


def _sliced_w2(a, b, seed=77, n_proj=64):
    rng = Rng(seed)
    dirs = rng.gaussian((n_proj, a.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    total = 0.0
    for d in dirs:
        pa = np.sort(a @ d)
        pb = np.sort(b @ d)
        total += np.mean((pa - pb) ** 2)
    return float(np.sqrt(total / n_proj))


def test_criterion_7_few_step_parity(criterion, mixture_model):
    t0 = time.perf_counter()
    trainer, _, data = mixture_model
    target = np.concatenate(
        [s.values for s in make_gaussian_mixture(Rng(505), [0.5, 0.5],
                                                 [[0.5, -0.5], [-0.5, 0.5]],
                                                 np.array([0.0625, 0.0625]),
                                                 5000).samples])
    w2 = {}
    for steps in (1, 2, 4):
        samples = sample_batch(trainer, steps=steps, n=5000, seed=56)
        w2[steps] = _sliced_w2(samples, target)
    ok = w2[4] <= 1.25 * w2[1]
    # the T in {2,4} runs must follow the exact alternating schedule
    c = trainer.config
    grid = build_grid(c.epsilon, c.t_max, c.p, c.s1 + 1)
    for steps in (2, 4):
        plan = StepPlan.from_grid(grid, steps)
        log = []
        generate_multi(trainer.pair.online, Conditioning.none(4), (4, 2),
                       Rng(57), plan, epsilon=c.epsilon, sigma_data=c.sigma_data,
                       noise_log=log)
        ok &= len(log) == steps - 1
        ok &= all(tau == want and
                  abs(scale - np.sqrt(max(want**2 - c.epsilon**2, 0.0))) < 1e-12
                  for (tau, scale, _), want in zip(log, plan.taus[1:]))
    ok &= time.perf_counter() - t0 < 120.0
    criterion(7, "few-step parity", ok)


def test_criterion_8_ode_oracle_agreement(criterion, gaussian_model):
    t0 = time.perf_counter()
    trainer, mean, var = gaussian_model

    def score(y, t):
        return -(y - mean) / (var + t * t)

    t_grid = build_grid(EPS, 80.0, 7.0, 201).boundaries[::-1]
    x_t = mean + 80.0 * Rng(111).gaussian((3000, 2))
    ref = ode_reference_solve(score, x_t, t_grid)
    gen = sample_batch(trainer, steps=1, n=5000, seed=58)
    mean_diff = np.abs(gen.mean(axis=0) - ref.mean(axis=0)).max()
    cov_diff = np.linalg.norm(np.cov(gen, rowvar=False) - np.cov(ref, rowvar=False))
    ok = mean_diff < 0.1 and cov_diff < 0.2

    x0 = np.array([[3.0, -2.0]]) * 40.0
    exact = mean + (x0 - mean) * np.sqrt((var + EPS**2) / (var + 80.0**2))

    def err(steps):
        out = ode_reference_solve(score, x0, np.linspace(80.0, EPS, steps + 1))
        return np.abs(out - exact).max()

    for ratio in (err(100) / err(200), err(200) / err(400)):
        ok &= 3.5 < ratio < 4.5
    ok &= time.perf_counter() - t0 < 120.0
    criterion(8, "ODE oracle agreement", ok)


def test_criterion_9_metric_unit_suite(criterion):
    t0 = time.perf_counter()
    rng = Rng(200)
    x = rng.gaussian((300, 3))
    ok = fid(FeatureSet(x), FeatureSet(x.copy())) <= 1e-8
    a = rng.gaussian((100_000, 1))
    b = rng.gaussian((100_000, 1)) + 1.0
    ok &= abs(fid(FeatureSet(a), FeatureSet(b)) - 1.0) < 0.05
    p = rng.gaussian((8, 5))
    ok &= ssim(p, p) == pytest.approx(1.0)
    va, vb = rng.gaussian((6,)), rng.gaussian((6,))
    ok &= abs(cosine_similarity(2.5 * va, 0.3 * vb)
              - cosine_similarity(va, vb)) <= 1e-12
    gen = rng.gaussian((80, 2))
    real = np.concatenate([rng.gaussian((40, 2)), rng.gaussian((40, 2)) + 6.0])
    got = recall(FeatureSet(real), FeatureSet(gen), k=3)
    brute = 0.0
    for r in real:
        d = np.linalg.norm(gen - r, axis=1)
        j = int(np.argmin(d))
        radius = np.sort(np.linalg.norm(gen - gen[j], axis=1))[3]
        brute += d[j] <= radius
    ok &= abs(got - brute / len(real)) <= 0.05
    f = rng.gaussian((20,))
    ok &= rmse(f, f + 2.0) == pytest.approx(2.0)
    ok &= ffe(f, f + 2.0) == pytest.approx(2.0)
    ok &= mcd([[0.0, 0.0]], [[3.0, 4.0]]) == pytest.approx(5.0)
    ok &= time.perf_counter() - t0 < 30.0
    criterion(9, "metric unit suite", ok)


ABLATION_BASE = [
    "--set", "train.total_steps=300",
    "--set", "train.batch_size=8",
    "--set", "train.width=16",
    "--set", "train.depth=2",
    "--set", "train.time_dim=8",
    "--set", "train.s1=10",
    "--set", "train.lr0=0.001",
    "--set", "n_generate=32",
    "--set", "checkpoint_every=0",
]


def _sine_dataset(min_frames):
    return ("--set",
            f"dataset={{kind: sine_bank_spectrogram, count: 128, bins: 4, "
            f"max_frames: 16, min_frames: {min_frames}}}")


def _read_rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_criterion_10_ablation_harness(criterion, tmp_path):
    t0 = time.perf_counter()
    out_s = tmp_path / "samplers"
    code = cli_main(["ablate-samplers", "--out", str(out_s), "--seed", "5",
                     *ABLATION_BASE, *_sine_dataset(4)])
    rows = _read_rows(out_s / "ablate_samplers.csv")
    ok = code == 0
    ok &= [r[0] for r in rows[1:]] == ["uniform", "linear_up", "linear_down",
                                       "importance"]
    ok &= all(np.isfinite(float(v)) for r in rows[1:] for v in r[1:-1])

    def cells(rows):
        # drop rtf (wall-clock, nondeterministic) and the config hash
        header = rows[0]
        keep = [i for i, h in enumerate(header)
                if h not in ("norm", "padding", "rtf", "config_hash")]
        return {(r[0], r[1]): [r[i] for i in keep] for r in rows[1:]}

    out_v = tmp_path / "pad_variable"
    code = cli_main(["ablate-padding", "--out", str(out_v), "--seed", "5",
                     *ABLATION_BASE, *_sine_dataset(4)])
    rows_v = _read_rows(out_v / "ablate_padding.csv")
    ok &= code == 0 and len(rows_v) == 5
    ok &= all(np.isfinite(float(v)) for r in rows_v[1:] for v in r[2:-1])
    by_cell = cells(rows_v)
    # include vs exclude must actually differ on variable-length data
    ok &= by_cell[("l1", "include")] != by_cell[("l1", "exclude")]
    ok &= by_cell[("l2", "include")] != by_cell[("l2", "exclude")]

    out_f = tmp_path / "pad_full"
    code = cli_main(["ablate-padding", "--out", str(out_f), "--seed", "5",
                     *ABLATION_BASE, *_sine_dataset(16)])
    rows_f = _read_rows(out_f / "ablate_padding.csv")
    ok &= code == 0
    by_cell = cells(rows_f)
    # ...and coincide exactly when every mask is full
    ok &= by_cell[("l1", "include")] == by_cell[("l1", "exclude")]
    ok &= by_cell[("l2", "include")] == by_cell[("l2", "exclude")]
    ok &= time.perf_counter() - t0 < 2700.0
    criterion(10, "ablation harness", ok)


def test_criterion_11_reproducibility(criterion, tmp_path):
    args = ["--set", "dataset={kind: gaussian, mean: [0.3, -0.3], cov: 0.04, "
            "count: 64}",
            "--set", "train.total_steps=40", "--set", "train.batch_size=4",
            "--set", "train.width=8", "--set", "train.depth=2",
            "--set", "train.time_dim=4", "--set", "train.s1=6",
            "--set", "checkpoint_every=20"]
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    ok = cli_main(["train", "--out", str(out_a), "--seed", "5", *args]) == 0
    ok &= cli_main(["train", "--out", str(out_b), "--seed", "5", *args]) == 0
    strip = lambda p: [row.rsplit(",", 1)[0]  # config hash differs via out_dir
                       for row in (p / "loss.csv").read_text().splitlines()]
    ok &= strip(out_a) == strip(out_b)

    # resume from the mid-run snapshot and compare final parameters
    from cmgen.harness import RunConfig, run_training
    cfg = RunConfig.load(out_a / "config.yaml")
    with np.load(out_a / "ckpt_final.npz") as npz:
        straight = {k: npz[k].copy() for k in npz.files if k != "meta"}
    _, final = run_training(cfg, resume=str(out_a / "ckpt_0000020.npz"),
                            log_path=tmp_path / "resumed.csv")
    with np.load(final) as npz:
        same = all(np.array_equal(npz[k], v) for k, v in straight.items()
                   if k.startswith(("online/", "target/", "adam_")))
    ok &= same
    criterion(11, "reproducibility", ok)
