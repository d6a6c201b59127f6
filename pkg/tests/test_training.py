import math
from dataclasses import replace

import numpy as np
import pytest

from adapterlab.adapter import InitScheme
from adapterlab.backbone import ModelConfig, encode, frozen_digest
from adapterlab.exceptions import ConfigError, StaleCacheError
from adapterlab.training import (
    OptState,
    TrainConfig,
    adamw_step,
    backward,
    clip_global,
    cross_entropy,
    decays,
    global_norm,
    loss_and_grads,
    lr_at,
    train,
)

from .conftest import blob_dataset, make_state


def batch_loss(state, X, y):
    return loss_and_grads(state, X, y)[0]


def fd_check(state, X, y, step=1e-5):
    _, grads, _ = loss_and_grads(state, X, y)
    worst = 0.0
    for name in state.trainable_names():
        p = state.params[name]
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + step
            up = batch_loss(state, X, y)
            p[idx] = old - step
            down = batch_loss(state, X, y)
            p[idx] = old
            num[idx] = (up - down) / (2 * step)
        denom = max(np.abs(num).max(), np.abs(grads[name]).max(), 1e-6)  # k.bias grad is exactly 0
        worst = max(worst, np.abs(num - grads[name]).max() / denom)
    return worst


def perturbed(cfg, regime, seed=0):
    state = make_state(cfg, seed, regime)
    rng = np.random.default_rng(seed + 100)
    for k in state.trainable_names():
        if k.endswith(("w_up", "b_up", "b_down")):
            state.params[k] = rng.normal(scale=0.3, size=state.params[k].shape)
    return state


def test_cross_entropy_examples():
    assert cross_entropy([0.0, 0.0], 0) == pytest.approx(math.log(2), abs=1e-12)
    assert cross_entropy([10.0, 0.0], 0) == pytest.approx(math.log1p(math.exp(-10)), rel=1e-9)
    z = np.array([0.3, -1.2, 2.0])
    assert cross_entropy(z + 123.4, 2) == pytest.approx(cross_entropy(z, 2), abs=1e-12)
    with pytest.raises(ValueError):
        cross_entropy([0.0, 1.0], 2)


@pytest.mark.parametrize("regime", ["adaptertune", "head_only", "full_ft"])
def test_gradients_match_finite_differences(tiny_cfg, regime):
    state = perturbed(tiny_cfg, regime)
    rng = np.random.default_rng(1)
    X, y = rng.normal(size=(3, tiny_cfg.input_dim)), np.array([0, 2, 1])
    assert fd_check(state, X, y) < 1e-4


def test_zero_init_down_projection_gradient_is_exactly_zero(tiny_cfg):
    state = make_state(tiny_cfg, 3)
    rng = np.random.default_rng(2)
    _, grads, _ = loss_and_grads(state, rng.normal(size=(4, tiny_cfg.input_dim)), [0, 1, 2, 1])
    for b in state.adapter_blocks:
        assert np.array_equal(grads[f"adapters.{b}.w_down"], np.zeros_like(grads[f"adapters.{b}.w_down"]))
        assert np.array_equal(grads[f"adapters.{b}.b_down"], np.zeros_like(grads[f"adapters.{b}.b_down"]))
        assert np.abs(grads[f"adapters.{b}.w_up"]).max() > 0


def test_batch_gradient_is_mean_of_example_gradients(tiny_cfg):
    state = perturbed(tiny_cfg, "adaptertune", 4)
    rng = np.random.default_rng(5)
    X, y = rng.normal(size=(4, tiny_cfg.input_dim)), np.array([2, 0, 1, 1])
    _, full, _ = loss_and_grads(state, X, y)
    singles = [loss_and_grads(state, X[i : i + 1], y[i : i + 1])[1] for i in range(4)]
    for k in full:
        assert np.allclose(full[k], np.mean([g[k] for g in singles], axis=0), atol=1e-12, rtol=0)


def test_stale_cache_rejected(tiny_cfg):
    state = make_state(tiny_cfg)
    _, cache = encode(state, np.zeros((1, tiny_cfg.input_dim)))
    _, grads, _ = loss_and_grads(state, np.zeros((1, tiny_cfg.input_dim)), [0])
    adamw_step(state, OptState.zeros(state), grads, 1e-3, TrainConfig())
    with pytest.raises(StaleCacheError):
        backward(state, cache, np.array([0]))


def test_lr_schedule():
    cfg = TrainConfig(base_lr=1e-3, epochs=25, warmup_epochs=5)
    assert lr_at(cfg, 0) == pytest.approx(2e-4)
    assert lr_at(cfg, 4) == pytest.approx(1e-3)
    assert lr_at(cfg, 5) == 1e-3
    assert lr_at(cfg, 15) == pytest.approx(5e-4, abs=1e-12)
    assert lr_at(cfg, 24) == pytest.approx(1e-3 * 0.5 * (1 + math.cos(math.pi * 19 / 20)))
    long = TrainConfig(epochs=1000, warmup_epochs=5)
    assert lr_at(long, 999) < 1e-8
    with pytest.raises(ValueError):
        lr_at(cfg, 25)


def test_clip_examples():
    g = {"a": np.array([3.0, 4.0])}
    assert np.allclose(clip_global(g, 1.0)["a"], [0.6, 0.8])
    small = {"a": np.array([0.1, 0.2]), "b": np.array([[0.3]])}
    out = clip_global(small, 1.0)
    assert all(out[k] is small[k] for k in small)


def test_clip_norm_and_idempotence():
    rng = np.random.default_rng(6)
    for _ in range(20):
        g = {k: rng.normal(scale=5, size=s) for k, s in [("a", (3, 4)), ("b", (7,))]}
        once = clip_global(g, 1.0)
        assert global_norm(once) <= 1.0 + 1e-12
        twice = clip_global(once, 1.0)
        assert all(np.array_equal(once[k], twice[k]) for k in g)


def test_adamw_single_step_closed_form(tiny_cfg):
    state = make_state(tiny_cfg, regime="head_only")
    state.params["head.weight"][:] = 1.0
    state.params["head.bias"][:] = 1.0
    grads = {"head.weight": np.ones_like(state.params["head.weight"]), "head.bias": np.ones(3)}
    adamw_step(state, OptState.zeros(state), grads, 1e-3, TrainConfig(weight_decay=0.05))
    expect = 1 - 1e-3 * (1 / (1 + 1e-8)) - 1e-3 * 0.05
    assert np.allclose(state.params["head.weight"], expect, rtol=0, atol=1e-15)
    assert round(expect, 6) == 0.998950
    # biases are not decayed
    assert np.allclose(state.params["head.bias"], 1 - 1e-3 / (1 + 1e-8), rtol=0, atol=1e-15)


def test_adamw_zero_grad_zero_decay_is_noop(tiny_cfg):
    state = make_state(tiny_cfg)
    before = {k: v.copy() for k, v in state.params.items()}
    grads = {k: np.zeros_like(state.params[k]) for k in state.trainable_names()}
    adamw_step(state, OptState.zeros(state), grads, 1e-3, TrainConfig(weight_decay=0.0))
    assert all(np.array_equal(before[k], state.params[k]) for k in before)


def test_adamw_ignores_frozen_grads(tiny_cfg):
    state = make_state(tiny_cfg)
    digest = frozen_digest(state)
    grads = {k: np.full_like(v, 7.0) for k, v in state.params.items()}
    adamw_step(state, OptState.zeros(state), grads, 1e-1, TrainConfig())
    assert frozen_digest(state) == digest


def test_decay_partition():
    assert decays("head.weight") and decays("adapters.1.w_up") and decays("adapters.0.w_down")
    for name in ["head.bias", "blocks.0.ln1.gamma", "embed.pos", "embed.cls", "adapters.0.b_up"]:
        assert not decays(name)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=5, warmup_epochs=5)
    with pytest.raises(ConfigError):
        TrainConfig(base_lr=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(clip_norm=-1.0)
    TrainConfig(epochs=0, warmup_epochs=5)


def test_train_zero_epochs(tiny_cfg):
    state = make_state(tiny_cfg)
    out, rows = train(state, blob_dataset(), TrainConfig(epochs=0))
    assert rows == []
    assert all(np.array_equal(out.params[k], state.params[k]) for k in state.params)


def test_train_deterministic_and_rows(tiny_cfg):
    data = blob_dataset()
    cfg = TrainConfig(epochs=3, warmup_epochs=1, batch_size=16, seed=3)
    a, rows_a = train(make_state(tiny_cfg), data, cfg, run_id="x")
    b, rows_b = train(make_state(tiny_cfg), data, cfg, run_id="x")
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    strip = lambda rows: [replace(r, wall_ms=0) for r in rows]  # noqa: E731
    assert strip(rows_a) == strip(rows_b)
    assert [(r.epoch, r.split) for r in rows_a] == [(e, s) for e in range(3) for s in ("train", "val")]
    assert all(r.trainable_params == 2 * (2 * 2 * 8 + 2 + 8) + 3 * 8 for r in rows_a)
    c, _ = train(make_state(tiny_cfg), data, replace(cfg, seed=4), run_id="x")
    assert any(not np.array_equal(a.params[k], c.params[k]) for k in a.params)


def test_loss_decreases_over_warmup(tiny_cfg):
    data = blob_dataset(60)
    for seed in range(3):
        cfg = TrainConfig(epochs=6, warmup_epochs=3, batch_size=16, base_lr=3e-3, seed=seed)
        _, rows = train(make_state(tiny_cfg, seed), data, cfg)
        tr = [r for r in rows if r.split == "train"]
        assert tr[3].loss < tr[0].loss


def test_small_random_init_breaks_identity(tiny_cfg):
    cfg = replace(tiny_cfg, init=InitScheme.small_random(1e-2))
    state = make_state(cfg)
    X = np.random.default_rng(0).normal(size=(4, tiny_cfg.input_dim))
    assert not np.array_equal(encode(state, X)[0], encode(state.without_adapters(), X)[0])


def test_model_config_accepts_init_text():
    cfg = ModelConfig(init="small_random:0.001")
    assert cfg.init == InitScheme.small_random(1e-3)
