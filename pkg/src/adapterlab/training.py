"""Cross-entropy training over the trainable partition of an encoder.

Gradients are derived by hand, layer by layer, from the forward cache.
Frozen tensors never receive a gradient entry; activation gradients are
propagated only as far down as the lowest trainable tensor.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields

import numpy as np

from .backbone import EncoderState, ForwardCache, encode
from .exceptions import ConfigError, StaleCacheError
from .metrics import MetricsRow
from .adapter import total_trainable_count
from .numkernel import gelu_grad, make_rng, matmul

__all__ = [
    "TrainConfig",
    "OptState",
    "cross_entropy",
    "loss_and_grads",
    "backward",
    "lr_at",
    "clip_global",
    "global_norm",
    "adamw_step",
    "evaluate",
    "train",
    "decays",
]

SHUFFLE_KEY = 0x5F1E


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-3
    weight_decay: float = 0.05
    epochs: int = 20
    warmup_epochs: int = 5
    clip_norm: float = 1.0
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        problems = []
        if self.epochs < 0:
            problems.append(f"epochs must be >= 0, got {self.epochs}")
        if self.warmup_epochs < 0 or (self.epochs > 0 and self.warmup_epochs >= self.epochs):
            problems.append(
                f"need 0 <= warmup_epochs < epochs, got {self.warmup_epochs} and {self.epochs}"
            )
        if not self.base_lr > 0:
            problems.append(f"base_lr must be positive, got {self.base_lr}")
        if not self.clip_norm > 0:
            problems.append(f"clip_norm must be positive, got {self.clip_norm}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.weight_decay < 0:
            problems.append(f"weight_decay must be >= 0, got {self.weight_decay}")
        if problems:
            raise ConfigError("; ".join(problems))

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class OptState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros(cls, state: EncoderState) -> "OptState":
        names = state.trainable_names()
        return cls(
            {k: np.zeros_like(state.params[k]) for k in names},
            {k: np.zeros_like(state.params[k]) for k in names},
        )


def cross_entropy(logits, label) -> float:
    """``-log softmax(logits)[label]`` for a single logit vector."""
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    if not 0 <= int(label) < z.size:
        raise ValueError(f"label {label} out of range for {z.size} classes")
    zmax = z.max()
    return float(zmax + math.log(np.sum(np.exp(z - zmax))) - z[int(label)])


def _log_softmax(logits):
    zmax = logits.max(axis=-1, keepdims=True)
    shifted = logits - zmax
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def _head_logits(state, feat):
    return matmul(feat, state.params["head.weight"].T) + state.params["head.bias"]


def _ln_backward(dy, xhat, inv, gamma):
    dxhat = dy * gamma
    return inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
    )


def _flat(x):
    return x.reshape(-1, x.shape[-1])


def _weight_grad(dy, x):
    # sum over every leading (batch, token) position of dy^T x
    return matmul(_flat(dy).T, _flat(x))


def _bias_grad(dy):
    return _flat(dy).sum(axis=0)


def _lowest_needed_block(state: EncoderState) -> int | None:
    """Lowest block the activation gradient must reach, or None for head-only."""
    cfg = state.cfg
    trainable = state.trainable_names()
    if any(k.startswith(("embed.", "blocks.")) for k in trainable):
        return -1
    blocks = [int(k.split(".")[1]) for k in trainable if k.startswith("adapters.")]
    return min(blocks) if blocks else None


def backward(state: EncoderState, cache: ForwardCache, labels) -> dict:
    """Gradients of the batch-mean cross-entropy w.r.t. trainable tensors."""
    if cache.state_id != id(state) or cache.version != state.version:
        raise StaleCacheError("forward cache does not belong to the current state")
    cfg, p = state.cfg, state.params
    tr = {k for k in p if not state.frozen[k]}
    grads = {}

    def put(name, fn):
        if name in tr:
            grads[name] = fn()

    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    feat = cache["cls"]
    B = feat.shape[0]
    if labels.shape[0] != B:
        raise ValueError(f"got {labels.shape[0]} labels for a batch of {B}")
    if labels.min() < 0 or labels.max() >= cfg.C:
        raise ValueError(f"labels must lie in [0, {cfg.C})")
    logits = _head_logits(state, feat)
    dlogits = np.exp(_log_softmax(logits))
    dlogits[np.arange(B), labels] -= 1.0
    dlogits /= B
    put("head.weight", lambda: matmul(dlogits.T, feat))
    put("head.bias", lambda: dlogits.sum(axis=0))

    stop = _lowest_needed_block(state)
    if stop is None:
        return grads

    dfeat = matmul(dlogits, p["head.weight"])
    dhf = np.zeros_like(cache["h_out"])
    dhf[:, 0, :] = dfeat
    put("norm.gamma", lambda: (dhf * cache["norm_xhat"]).sum(axis=(0, 1)))
    put("norm.beta", lambda: dhf.sum(axis=(0, 1)))
    dh = _ln_backward(dhf, cache["norm_xhat"], cache["norm_inv"], p["norm.gamma"])

    scale = 1.0 / math.sqrt(cfg.head_dim)
    for i in range(cfg.L - 1, max(stop, 0) - 1, -1):
        c = cache["blocks"][i]
        b = f"blocks.{i}."
        a_pre = f"adapters.{i}."
        if a_pre + "w_down" in p:
            dout = cfg.alpha * dh
            put(a_pre + "w_up", lambda: _weight_grad(dout, c["ad_act"]))
            put(a_pre + "b_up", lambda: _bias_grad(dout))
            dpre = matmul(dout, p[a_pre + "w_up"]) * gelu_grad(c["ad_pre"])
            put(a_pre + "w_down", lambda: _weight_grad(dpre, c["z"]))
            put(a_pre + "b_down", lambda: _bias_grad(dpre))
            if i == stop:
                break
            dh = dh + matmul(dpre, p[a_pre + "w_down"])
        elif i == stop:
            break
        dz = dh
        # MLP sub-block
        put(b + "mlp.fc2.weight", lambda: _weight_grad(dz, c["g"]))
        put(b + "mlp.fc2.bias", lambda: _bias_grad(dz))
        df1 = matmul(dz, p[b + "mlp.fc2.weight"]) * gelu_grad(c["f1"])
        put(b + "mlp.fc1.weight", lambda: _weight_grad(df1, c["ln2_out"]))
        put(b + "mlp.fc1.bias", lambda: _bias_grad(df1))
        dm = matmul(df1, p[b + "mlp.fc1.weight"])
        put(b + "ln2.gamma", lambda: (dm * c["ln2_xhat"]).sum(axis=(0, 1)))
        put(b + "ln2.beta", lambda: dm.sum(axis=(0, 1)))
        dy = dz + _ln_backward(dm, c["ln2_xhat"], c["ln2_inv"], p[b + "ln2.gamma"])
        # attention sub-block
        put(b + "attn.o.weight", lambda: _weight_grad(dy, c["ctx"]))
        put(b + "attn.o.bias", lambda: _bias_grad(dy))
        dctx = matmul(dy, p[b + "attn.o.weight"])
        Bn, T, d = dctx.shape
        dctx_h = dctx.reshape(Bn, T, cfg.heads, cfg.head_dim).transpose(0, 2, 1, 3)
        probs = c["probs"]
        dprobs = matmul(dctx_h, c["v"].transpose(0, 1, 3, 2))
        dv = matmul(probs.transpose(0, 1, 3, 2), dctx_h)
        dscores = probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True)) * scale
        dq = matmul(dscores, c["k"])
        dk = matmul(dscores.transpose(0, 1, 3, 2), c["q"])
        da = np.zeros_like(dy)
        for proj, dproj in (("q", dq), ("k", dk), ("v", dv)):
            dflat = dproj.transpose(0, 2, 1, 3).reshape(Bn, T, d)
            name = b + f"attn.{proj}"
            put(name + ".weight", lambda: _weight_grad(dflat, c["ln1_out"]))
            put(name + ".bias", lambda: _bias_grad(dflat))
            da = da + matmul(dflat, p[name + ".weight"])
        put(b + "ln1.gamma", lambda: (da * c["ln1_xhat"]).sum(axis=(0, 1)))
        put(b + "ln1.beta", lambda: da.sum(axis=(0, 1)))
        dh = dy + _ln_backward(da, c["ln1_xhat"], c["ln1_inv"], p[b + "ln1.gamma"])

    if stop == -1:
        put("embed.pos", lambda: dh.sum(axis=0))
        put("embed.cls", lambda: dh[:, 0, :].sum(axis=0))
        dtok = dh[:, 1:, :]
        put("embed.weight", lambda: _weight_grad(dtok, cache["patches"]))
        put("embed.bias", lambda: _bias_grad(dtok))
    return grads


def loss_and_grads(state: EncoderState, x, labels):
    """Mean cross-entropy over the batch, its gradients and the logits."""
    feat, cache = encode(state, x)
    logits = _head_logits(state, feat)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    loss = float(-np.mean(_log_softmax(logits)[np.arange(labels.size), labels]))
    return loss, backward(state, cache, labels), logits


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Per-epoch learning rate: linear warmup, then cosine decay to zero."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    w = cfg.warmup_epochs
    if epoch < w:
        return cfg.base_lr * (epoch + 1) / w
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * (epoch - w) / (cfg.epochs - w)))


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_global(grads: dict, max_norm: float) -> dict:
    """Rescale all gradients together when their joint L2 norm exceeds ``max_norm``."""
    if not max_norm > 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


def decays(name: str) -> bool:
    """Weight decay applies to projection matrices only."""
    return name.endswith((".weight", ".w_down", ".w_up"))


def adamw_step(state: EncoderState, opt: OptState, grads: dict, lr: float, cfg: TrainConfig):
    """One AdamW update in place on the trainable tensors; returns ``(state, opt)``."""
    opt.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**opt.t
    c2 = 1.0 - b2**opt.t
    for name, g in grads.items():
        if state.frozen[name]:
            continue
        m = opt.m[name] = b1 * opt.m[name] + (1.0 - b1) * g
        v = opt.v[name] = b2 * opt.v[name] + (1.0 - b2) * g * g
        theta = state.params[name]
        step = lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        if decays(name) and cfg.weight_decay:
            state.params[name] = theta - step - lr * cfg.weight_decay * theta
        else:
            state.params[name] = theta - step
    state.version += 1
    return state, opt


def evaluate(state: EncoderState, X, y, batch_size: int = 256):
    """Mean cross-entropy and top-1 accuracy (percent)."""
    y = np.asarray(y, dtype=np.int64)
    if y.size == 0:
        return float("nan"), float("nan")
    total_loss = 0.0
    correct = 0
    for start in range(0, y.size, batch_size):
        xb = X[start : start + batch_size]
        yb = y[start : start + batch_size]
        feat, _ = encode(state, xb)
        logp = _log_softmax(_head_logits(state, feat))
        total_loss -= float(np.sum(logp[np.arange(yb.size), yb]))
        correct += int(np.sum(np.argmax(logp, axis=1) == yb))
    return total_loss / y.size, 100.0 * correct / y.size


def train(state: EncoderState, data, cfg: TrainConfig, run_id: str = "", extra=None):
    """Train a copy of ``state`` on ``data``'s train split.

    Returns ``(new_state, rows)`` with one train row (running averages over
    the epoch) and, when a validation split exists, one val row per epoch.
    """
    X_tr, y_tr = data.split("train")
    if len(y_tr) == 0:
        raise ValueError(f"dataset {data.name!r} has no training examples")
    X_va, y_va = data.split("val")
    state = state.copy()
    opt = OptState.zeros(state)
    meta = dict(
        run_id=run_id,
        dataset=data.name,
        regime=state.cfg.regime,
        rank=state.cfg.rank if state.cfg.regime == "adaptertune" else 0,
        every_k=state.cfg.every_k,
        init=str(state.cfg.init),
        alpha=state.cfg.alpha,
        lr=cfg.base_lr,
        wd=cfg.weight_decay,
        seed=cfg.seed,
        trainable_params=total_trainable_count(state.cfg),
    )
    if extra:
        meta.update(extra)
    rows = []
    n = len(y_tr)
    for epoch in range(cfg.epochs):
        t0 = time.monotonic()
        lr = lr_at(cfg, epoch)
        perm = make_rng(cfg.seed, SHUFFLE_KEY, epoch).permutation(n)
        loss_sum = 0.0
        correct = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            loss, grads, logits = loss_and_grads(state, X_tr[idx], y_tr[idx])
            loss_sum += loss * idx.size
            correct += int(np.sum(np.argmax(logits, axis=1) == y_tr[idx]))
            grads = clip_global(grads, cfg.clip_norm)
            adamw_step(state, opt, grads, lr, cfg)
        train_ms = int((time.monotonic() - t0) * 1000)
        rows.append(
            MetricsRow(
                **meta, epoch=epoch, split="train", loss=loss_sum / n,
                top1=100.0 * correct / n, wall_ms=train_ms,
            )
        )
        if len(y_va):
            t1 = time.monotonic()
            vloss, vtop1 = evaluate(state, X_va, y_va)
            rows.append(
                MetricsRow(
                    **meta, epoch=epoch, split="val", loss=vloss, top1=vtop1,
                    wall_ms=int((time.monotonic() - t1) * 1000),
                )
            )
    return state, rows
