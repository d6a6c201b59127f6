"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict; the lines are printed in the pytest
terminal summary (and immediately when run with ``-s``). Run directly with
``python tests/test_acceptance.py``.
"""

import itertools
import math
import os
import subprocess
import sys
import time
from dataclasses import replace

import numpy as np
import pytest

from adapterlab.adapter import adapter_forward, adapter_param_count, total_trainable_count
from adapterlab.backbone import ModelConfig, attach_downstream, classify, init_encoder
from adapterlab.bench.config import ExperimentConfig, SweepSpec, apply_overrides
from adapterlab.bench.sweep import aggregate, prepare_task, run_one, run_sweep
from adapterlab.metrics import read_csv, rows_to_csv
from adapterlab.numkernel import make_rng
from adapterlab.theory import (
    constructive_adapter,
    elbow_check,
    make_shift,
    monte_carlo_curve,
    tail_decay,
    truncate,
    verify_bound_monte_carlo,
)
from adapterlab.training import loss_and_grads

from .conftest import record_acceptance

SEEDS = (0, 1, 2)


def verdict(number, ok, detail, started):
    record_acceptance(number, ok, f"{detail} ({time.monotonic() - started:.1f}s)")
    assert ok, detail


# ---- shared planted-task runs ------------------------------------------------


class PlantedRuns:
    """Default planted task with a lazily filled cache of downstream runs."""

    def __init__(self):
        self.exp = ExperimentConfig()
        self.prepared = prepare_task(self.exp)
        self.cache = {}

    def final_val(self, seed, **point):
        key = (seed, tuple(sorted((k, str(v)) for k, v in point.items())))
        if key not in self.cache:
            rows = run_one(self.prepared, self.exp, point, seed, run_id=str(key))
            last = [r for r in rows if r.split == "val"][-1]
            self.cache[key] = last.top1
        return self.cache[key]

    def stats(self, seeds=SEEDS, **point):
        vals = np.array([self.final_val(s, **point) for s in seeds])
        return float(vals.mean()), float(vals.std()), vals


@pytest.fixture(scope="session")
def planted():
    return PlantedRuns()


# ---- 1 ------------------------------------------------------------------------


def test_criterion_1_identity_at_init():
    t0 = time.monotonic()
    X = np.random.default_rng(0).normal(size=(128, 16))
    bad = []
    for d, L, r, k in itertools.product((8, 64), (2, 12), (2, 16), (1, 2)):
        if r > d:
            continue
        cfg = ModelConfig(d=d, L=L, heads=4, n_tokens=5, input_dim=16, C=5, rank=r, every_k=k)
        backbone = init_encoder(replace(cfg, regime="full_ft"), make_rng(d, L, r, k))
        state = attach_downstream(backbone, cfg, make_rng(7))
        assert len(state.adapters) == L // k
        if not np.array_equal(classify(state, X), classify(state.without_adapters(), X)):
            bad.append((d, L, r, k))
    verdict(1, not bad, f"bitwise identity over 16 geometries x 128 inputs; mismatches {bad}", t0)


# ---- 2 ------------------------------------------------------------------------


def test_criterion_2_parameter_counts():
    t0 = time.monotonic()
    ok = adapter_param_count(16, 192) * 12 == 76_224
    for r, d, L, C, k in itertools.product((1, 4, 16), (8, 64, 192), (1, 6, 12), (2, 10, 1000), (1, 2, 3)):
        if r > d:
            continue
        cfg = ModelConfig(d=d, L=L, heads=1, n_tokens=2, input_dim=4, C=C, rank=r, every_k=k)
        ok &= total_trainable_count(cfg) == (L // k) * (2 * r * d + r + d) + C * d
    verdict(2, ok, "DeiT-T adapters 76,224 and formula totals exact over the grid", t0)


# ---- 3 ------------------------------------------------------------------------


def _fd_worst(state, X, y, step=1e-5):
    _, grads, _ = loss_and_grads(state, X, y)
    worst = 0.0
    for name in state.trainable_names():
        p = state.params[name]
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + step
            up = loss_and_grads(state, X, y)[0]
            p[idx] = old - step
            down = loss_and_grads(state, X, y)[0]
            p[idx] = old
            num[idx] = (up - down) / (2 * step)
        denom = max(np.abs(num).max(), np.abs(grads[name]).max(), 1e-6)  # k.bias grad is exactly 0
        worst = max(worst, float(np.abs(num - grads[name]).max() / denom))
    return worst


def test_criterion_3_gradients():
    t0 = time.monotonic()
    cfg = ModelConfig(d=8, L=2, heads=2, n_tokens=5, input_dim=12, C=3, rank=2)
    rng = np.random.default_rng(0)
    X, y = rng.normal(size=(4, 12)), np.array([0, 1, 2, 1])
    worst = {}
    for regime in ("adaptertune", "full_ft", "head_only"):
        c = replace(cfg, regime=regime)
        state = attach_downstream(init_encoder(replace(c, regime="full_ft"), make_rng(1)), c, make_rng(2))
        for k in state.params:
            if k.startswith("adapters.") and not k.endswith("w_down"):
                state.params[k] = rng.normal(scale=0.3, size=state.params[k].shape)
        worst[regime] = _fd_worst(state, X, y)
    zero = attach_downstream(init_encoder(replace(cfg, regime="full_ft"), make_rng(1)), cfg, make_rng(2))
    _, g, _ = loss_and_grads(zero, X, y)
    down_zero = all(not np.any(g[f"adapters.{b}.w_down"]) for b in zero.adapter_blocks)
    up_nonzero = all(np.any(g[f"adapters.{b}.w_up"]) for b in zero.adapter_blocks)
    ok = max(worst.values()) < 1e-4 and down_zero and up_nonzero
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(3, ok, f"max rel FD error {detail}; dW_down==0 {down_zero}; dW_up!=0 {up_nonzero}", t0)


# ---- 4 ------------------------------------------------------------------------


def test_criterion_4_truncation_bound():
    t0 = time.monotonic()
    rng = make_rng(2024)
    n = 100_000
    worst_trunc = worst_cons = 0.0
    worst_ratio = 0.0
    cross = []
    for trial in range(50):
        d = (8, 32, 64)[trial % 3]
        shift = make_shift(d, float(rng.uniform(0.5, 3.0)), float(rng.uniform(0.6, 2.0)), rng)
        eye = np.eye(d)
        for r in range(d + 1):
            tail = float(np.sum(shift.sigmas[r:] ** 2))
            worst_trunc = max(worst_trunc, abs(np.sum((shift.delta - truncate(shift, r)) ** 2) - tail))
            if r >= 1:
                ad = constructive_adapter(shift, r, 1.0)
                mapped = ad.alpha * adapter_forward(ad, eye).T  # column j = image of e_j
                worst_cons = max(worst_cons, abs(np.sum((shift.delta - mapped) ** 2) - tail))
        draw_seed = int(rng.integers(2**32))
        curve = monte_carlo_curve(shift, range(d + 1), 1.0, n, make_rng(draw_seed))
        for res in curve:
            if res.bound > 0:
                worst_ratio = max(worst_ratio, res.empirical_mse / res.tolerance)
            assert res.passed
        if trial < 3:
            r = d // 2
            direct = verify_bound_monte_carlo(shift, r, 1.0, n, make_rng(draw_seed))
            cross.append(abs(direct.empirical_mse - curve[r].empirical_mse) / direct.empirical_mse)
    ok = worst_trunc < 1e-9 and worst_cons < 1e-9 and worst_ratio <= 1.0 and max(cross) < 1e-8
    verdict(
        4, ok,
        f"trunc err {worst_trunc:.1e}, constructive err {worst_cons:.1e}, "
        f"max MC/tolerance {worst_ratio:.3f}, direct-vs-projected MC {max(cross):.1e}",
        t0,
    )


# ---- 5 ------------------------------------------------------------------------


def test_criterion_5_tail_decay():
    t0 = time.monotonic()
    oracle = math.sqrt(math.pi**2 / 6 - sum(1.0 / i**2 for i in range(1, 11)))
    v = tail_decay(10, 1.0, 1.0)
    ratio = tail_decay(1024) / tail_decay(512)
    ok = abs(v - oracle) < 1e-6 and abs(ratio / 2**-0.5 - 1) < 0.05
    verdict(5, ok, f"tail_decay(10)={v:.9f} vs {oracle:.9f}; doubling ratio {ratio:.5f} vs {2**-0.5:.5f}", t0)


# ---- 6 ------------------------------------------------------------------------


def test_criterion_6_rank_elbow(planted):
    t0 = time.monotonic()
    ranks = (2, 4, 8, 16, 32)
    stats = [planted.stats(rank=r) for r in ranks]
    means = [m for m, _, _ in stats]
    stds = [s for _, s, _ in stats]
    monotone = all(
        means[i + 1] >= means[i] - max(stds[i], stds[i + 1]) for i in range(len(ranks) - 1)
    )
    rep = elbow_check(list(zip(ranks, means)))
    curve = ", ".join(f"r{r}:{m:.2f}+-{s:.2f}" for r, m, s in zip(ranks, means, stds))
    verdict(6, monotone and rep.passed, f"{curve}; monotone {monotone}; elbow {rep.passed} "
            f"(last {rep.last_increment:+.2f} vs earlier {rep.earlier_gain:+.2f})", t0)


# ---- 7 ------------------------------------------------------------------------


def test_criterion_7_regime_ordering(planted):
    t0 = time.monotonic()
    head, _, _ = planted.stats(regime="head_only")
    at, _, _ = planted.stats(rank=16)
    ft, _, _ = planted.stats(regime="full_ft")
    ok = at - head >= 5.0 and at >= 0.9 * ft
    verdict(7, ok, f"head-only {head:.2f}, adapters r16 {at:.2f}, full {ft:.2f}; "
            f"gap {at - head:+.2f}, ratio {at / ft:.3f}", t0)


# ---- 8 ------------------------------------------------------------------------


def test_criterion_8_determinism(tmp_path):
    t0 = time.monotonic()
    env = {**os.environ, "ADAPTERLAB_THREADS": "1"}
    args = [
        "--override", "sweep.regime=head_only,adaptertune", "--override", "sweep.rank=4,16",
        "--override", "sweep.seeds=0,1", "--override", "train.epochs=4",
        "--override", "pretrain.epochs=4",
    ]
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        proc = subprocess.run(
            [sys.executable, "-m", "adapterlab", "sweep", "--out", str(out), *args],
            env=env, capture_output=True, text=True,
        )
        assert proc.returncode == 0, proc.stderr
        outs.append(rows_to_csv(read_csv(out / "metrics.csv"), zero_wall=True).encode())
    ok = outs[0] == outs[1] and len(outs[0]) > 0
    n_rows = outs[0].count(b"\n") - 1
    verdict(8, ok, f"two processes, {n_rows} rows, byte-identical {ok}", t0)


# ---- 9 ------------------------------------------------------------------------


def test_criterion_9_zero_init_stability(planted):
    t0 = time.monotonic()
    seeds = (0, 1, 2, 3, 4)
    zm, zs, zv = planted.stats(seeds, rank=16)
    rm, rs, rv = planted.stats(seeds, rank=16, init="small_random:0.01")
    verdict(9, zs <= rs, f"zero init {zm:.2f}+-{zs:.3f} {zv.tolist()}; "
            f"small_random(1e-2) {rm:.2f}+-{rs:.3f} {rv.tolist()}", t0)


# ---- 10 -----------------------------------------------------------------------


def test_criterion_10_hparam_grid():
    t0 = time.monotonic()
    exp = apply_overrides(
        ExperimentConfig(), ["train.epochs=2", "train.warmup_epochs=1", "pretrain.epochs=4"]
    )
    prepared = prepare_task(exp)
    spec = SweepSpec(
        {"lr": (5e-4, 1e-3, 2e-3), "wd": (0.0, 0.05, 0.1), "alpha": (0.5, 1.0, 2.0)}, seeds=SEEDS
    )
    rows = run_sweep(spec, prepared, exp)
    summary = aggregate(rows)
    errors = [r for r in rows if r.split == "error"]
    ok = len(summary) == 27 and not errors and all(s.n_seeds == 3 for s in summary)
    verdict(10, ok, f"{spec.n_runs} runs, {len(summary)} aggregated rows, {len(errors)} failures", t0)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
