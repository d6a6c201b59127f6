"""Miniature pre-norm ViT encoder with optional residual adapters.

Inputs are flat feature vectors cut into ``n_tokens - 1`` equal patches,
linearly embedded, prefixed with a CLS token and given learned positional
embeddings. Each block is ``h + MSA(LN(h))`` followed by ``h + MLP(LN(h))``;
an adapter, when present at a block, wraps the whole block output. The
CLS row after a final LayerNorm feeds a linear head.

Parameters live in a flat ``{name: ndarray}`` dict so that freezing,
optimisation and serialisation all work on one mapping.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .adapter import ZERO_INIT, AdapterParams, InitScheme, init_adapter
from .exceptions import ConfigError, ShapeError
from .numkernel import gelu, make_rng, matmul, softmax_rows

__all__ = [
    "REGIMES",
    "ModelConfig",
    "EncoderState",
    "ForwardCache",
    "adapter_positions",
    "init_encoder",
    "attach_downstream",
    "encode",
    "classify",
    "pretrain_frozen_backbone",
    "is_trainable",
    "frozen_digest",
]

REGIMES = ("head_only", "adaptertune", "full_ft")


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    L: int = 2
    heads: int = 4
    n_tokens: int = 5
    input_dim: int = 64
    mlp_ratio: float = 4.0
    C: int = 10
    rank: int = 16
    alpha: float = 1.0
    every_k: int = 1
    init: InitScheme = ZERO_INIT
    regime: str = "adaptertune"
    ln_eps: float = 1e-5

    def __post_init__(self):
        if isinstance(self.init, str):
            object.__setattr__(self, "init", InitScheme.parse(self.init))
        problems = []
        if self.d < 1 or self.heads < 1 or self.d % self.heads:
            problems.append(f"heads ({self.heads}) must divide d ({self.d})")
        if self.L < 1:
            problems.append(f"L must be >= 1, got {self.L}")
        if self.n_tokens < 2:
            problems.append(f"n_tokens must be >= 2 (CLS + patches), got {self.n_tokens}")
        elif self.input_dim % (self.n_tokens - 1):
            problems.append(
                f"input_dim ({self.input_dim}) must split evenly into "
                f"{self.n_tokens - 1} patches"
            )
        if self.C < 2:
            problems.append(f"C must be >= 2, got {self.C}")
        if not 1 <= self.rank <= self.d:
            problems.append(f"rank must satisfy 1 <= rank <= d, got {self.rank}")
        if self.every_k < 1:
            problems.append(f"every_k must be >= 1, got {self.every_k}")
        if not self.alpha > 0:
            problems.append(f"alpha must be positive, got {self.alpha}")
        if not self.mlp_ratio > 0:
            problems.append(f"mlp_ratio must be positive, got {self.mlp_ratio}")
        if self.regime not in REGIMES:
            problems.append(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def patch_dim(self) -> int:
        return self.input_dim // (self.n_tokens - 1)

    @property
    def hidden(self) -> int:
        return int(round(self.mlp_ratio * self.d))

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    def backbone_param_count(self) -> int:
        d, hid = self.d, self.hidden
        embed = d * self.patch_dim + d + self.n_tokens * d + d
        block = 4 * d + 4 * (d * d + d) + (hid * d + hid) + (d * hid + d)
        return embed + self.L * block + 2 * d

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def adapter_positions(L: int, every_k: int) -> list[int]:
    """Blocks followed by an adapter: every ``every_k``-th, ``L // every_k`` total."""
    if L < 1 or every_k < 1:
        raise ValueError(f"need L >= 1 and every_k >= 1, got L={L}, every_k={every_k}")
    return [i for i in range(L) if i % every_k == every_k - 1]


def is_trainable(name: str, regime: str) -> bool:
    if regime == "full_ft":
        return True
    if regime == "head_only":
        return name.startswith("head.")
    return name.startswith(("head.", "adapters."))


@dataclass
class EncoderState:
    cfg: ModelConfig
    params: dict
    frozen: dict = field(default_factory=dict)
    version: int = 0

    def __post_init__(self):
        if not self.frozen:
            self.frozen = {k: not is_trainable(k, self.cfg.regime) for k in self.params}

    @property
    def adapter_blocks(self) -> list[int]:
        return sorted({int(k.split(".")[1]) for k in self.params if k.startswith("adapters.")})

    def adapter(self, block: int) -> AdapterParams:
        p = self.params
        pre = f"adapters.{block}."
        return AdapterParams(
            p[pre + "w_down"], p[pre + "b_down"], p[pre + "w_up"], p[pre + "b_up"],
            alpha=self.cfg.alpha,
        )

    @property
    def adapters(self) -> list[AdapterParams]:
        return [self.adapter(b) for b in self.adapter_blocks]

    def trainable_names(self) -> list[str]:
        return [k for k in self.params if not self.frozen[k]]

    def copy(self) -> "EncoderState":
        return EncoderState(
            self.cfg, {k: v.copy() for k, v in self.params.items()}, dict(self.frozen), self.version
        )

    def without_adapters(self) -> "EncoderState":
        keep = [k for k in self.params if not k.startswith("adapters.")]
        return EncoderState(
            self.cfg,
            {k: self.params[k].copy() for k in keep},
            {k: self.frozen[k] for k in keep},
        )


def frozen_digest(state: EncoderState) -> str:
    """SHA-256 over every frozen tensor, in parameter order."""
    h = hashlib.sha256()
    for name, value in state.params.items():
        if state.frozen[name]:
            h.update(name.encode())
            h.update(np.ascontiguousarray(value).tobytes())
    return h.hexdigest()


def _linear_init(rng, out_dim, in_dim):
    return rng.normal(0.0, 1.0 / math.sqrt(in_dim), size=(out_dim, in_dim))


def init_encoder(cfg: ModelConfig, rng) -> EncoderState:
    """Randomly initialised backbone and head (no adapters)."""
    d, hid = cfg.d, cfg.hidden
    p = {
        "embed.weight": _linear_init(rng, d, cfg.patch_dim),
        "embed.bias": np.zeros(d),
        "embed.pos": rng.normal(0.0, 0.02, size=(cfg.n_tokens, d)),
        "embed.cls": rng.normal(0.0, 0.02, size=d),
    }
    for i in range(cfg.L):
        b = f"blocks.{i}."
        p[b + "ln1.gamma"] = np.ones(d)
        p[b + "ln1.beta"] = np.zeros(d)
        for proj in ("q", "k", "v", "o"):
            p[b + f"attn.{proj}.weight"] = _linear_init(rng, d, d)
            p[b + f"attn.{proj}.bias"] = np.zeros(d)
        p[b + "ln2.gamma"] = np.ones(d)
        p[b + "ln2.beta"] = np.zeros(d)
        p[b + "mlp.fc1.weight"] = _linear_init(rng, hid, d)
        p[b + "mlp.fc1.bias"] = np.zeros(hid)
        p[b + "mlp.fc2.weight"] = _linear_init(rng, d, hid)
        p[b + "mlp.fc2.bias"] = np.zeros(d)
    p["norm.gamma"] = np.ones(d)
    p["norm.beta"] = np.zeros(d)
    p["head.weight"] = rng.normal(0.0, 0.02, size=(cfg.C, d))
    p["head.bias"] = np.zeros(cfg.C)
    return EncoderState(cfg, p)


def attach_downstream(backbone: EncoderState, cfg: ModelConfig, rng) -> EncoderState:
    """Copy a backbone, add a fresh ``cfg.C``-way head and adapters per ``cfg``.

    Adapters are attached only for the ``adaptertune`` regime. The frozen
    mask follows ``cfg.regime``.
    """
    src = backbone.cfg
    geometry = ("d", "L", "heads", "n_tokens", "input_dim", "mlp_ratio")
    for name in geometry:
        if getattr(src, name) != getattr(cfg, name):
            raise ShapeError(
                f"backbone {name}={getattr(src, name)} does not match config {getattr(cfg, name)}"
            )
    p = {
        k: v.copy()
        for k, v in backbone.params.items()
        if not k.startswith(("head.", "adapters."))
    }
    if cfg.regime == "adaptertune":
        for i in adapter_positions(cfg.L, cfg.every_k):
            a = init_adapter(cfg.d, cfg.rank, cfg.alpha, cfg.init, rng)
            p[f"adapters.{i}.w_down"] = a.w_down
            p[f"adapters.{i}.b_down"] = a.b_down
            p[f"adapters.{i}.w_up"] = a.w_up
            p[f"adapters.{i}.b_up"] = a.b_up
    p["head.weight"] = rng.normal(0.0, 0.02, size=(cfg.C, cfg.d))
    p["head.bias"] = np.zeros(cfg.C)
    return EncoderState(cfg, p)


class ForwardCache(dict):
    """Intermediates of one forward pass, tagged with the producing state."""

    def __init__(self, state: EncoderState, **kw):
        super().__init__(**kw)
        self.state_id = id(state)
        self.version = state.version


def _layernorm_fwd(x, gamma, beta, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat * gamma + beta, xhat, inv


def _linear(x, p, name):
    return matmul(x, p[name + ".weight"].T) + p[name + ".bias"]


def _split_heads(x, heads):
    B, T, d = x.shape
    return x.reshape(B, T, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, H, T, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * hd)


def _as_batch(state, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != state.cfg.input_dim:
        raise ShapeError(
            f"encoder expects inputs of dim {state.cfg.input_dim}, got shape {x.shape}"
        )
    return x


def encode(state: EncoderState, x):
    """Forward pass. Returns ``(cls_feature (B, d), ForwardCache)``."""
    cfg, p = state.cfg, state.params
    x = _as_batch(state, x)
    B = x.shape[0]
    patches = x.reshape(B, cfg.n_tokens - 1, cfg.patch_dim)
    tok = _linear(patches, p, "embed")
    cls = np.broadcast_to(p["embed.cls"], (B, 1, cfg.d))
    h = np.concatenate([cls, tok], axis=1) + p["embed.pos"]
    cache = ForwardCache(state, x=x, patches=patches, blocks=[])
    scale = 1.0 / math.sqrt(cfg.head_dim)
    for i in range(cfg.L):
        b = f"blocks.{i}."
        c = {"h_in": h}
        a, c["ln1_xhat"], c["ln1_inv"] = _layernorm_fwd(
            h, p[b + "ln1.gamma"], p[b + "ln1.beta"], cfg.ln_eps
        )
        c["ln1_out"] = a
        q = _split_heads(_linear(a, p, b + "attn.q"), cfg.heads)
        k = _split_heads(_linear(a, p, b + "attn.k"), cfg.heads)
        v = _split_heads(_linear(a, p, b + "attn.v"), cfg.heads)
        probs = softmax_rows(matmul(q, k.transpose(0, 1, 3, 2)) * scale)
        ctx = _merge_heads(matmul(probs, v))
        c.update(q=q, k=k, v=v, probs=probs, ctx=ctx)
        y = h + _linear(ctx, p, b + "attn.o")
        c["y"] = y
        m, c["ln2_xhat"], c["ln2_inv"] = _layernorm_fwd(
            y, p[b + "ln2.gamma"], p[b + "ln2.beta"], cfg.ln_eps
        )
        c["ln2_out"] = m
        f1 = _linear(m, p, b + "mlp.fc1")
        g = gelu(f1)
        c.update(f1=f1, g=g)
        z = y + _linear(g, p, b + "mlp.fc2")
        c["z"] = z
        key = f"adapters.{i}.w_down"
        if key in p:
            ad = state.adapter(i)
            pre = matmul(z, ad.w_down.T) + ad.b_down
            act = gelu(pre)
            out = matmul(act, ad.w_up.T) + ad.b_up
            c.update(ad_pre=pre, ad_act=act)
            z = z + ad.alpha * out
        h = z
        cache["blocks"].append(c)
    hf, cache["norm_xhat"], cache["norm_inv"] = _layernorm_fwd(
        h, p["norm.gamma"], p["norm.beta"], cfg.ln_eps
    )
    cache["h_out"] = h
    feat = hf[:, 0, :]
    cache["cls"] = feat
    return feat, cache


def classify(state: EncoderState, x):
    """Logits ``(B, C)``."""
    feat, _ = encode(state, x)
    return matmul(feat, state.params["head.weight"].T) + state.params["head.bias"]


def pretrain_frozen_backbone(cfg: ModelConfig, source_task, budget, return_metrics=False):
    """Train a full model on ``source_task``, then re-head it for ``cfg``.

    The source head is discarded; the returned state carries a fresh
    ``cfg.C``-way head, adapters if ``cfg.regime`` asks for them, and the
    regime's frozen mask. Deterministic in ``budget.seed``.
    """
    from .training import train  # training imports this module

    src_cfg = replace(cfg, C=source_task.n_classes, regime="full_ft")
    state = init_encoder(src_cfg, make_rng(budget.seed, 0x5EED))
    state, rows = train(state, source_task, budget, run_id="pretrain")
    out = attach_downstream(state, cfg, make_rng(budget.seed, 0xA77AC))
    return (out, rows) if return_metrics else out
