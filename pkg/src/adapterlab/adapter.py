"""Residual low-rank bottleneck adapter.

``A(h) = gelu(h @ w_down.T + b_down) @ w_up.T + b_up`` is applied per token
and added back to its input as ``h + alpha * A(h)``. With ``w_up`` and
``b_up`` at zero the adapted network computes exactly the frozen one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ShapeError
from .numkernel import gelu, matmul

__all__ = [
    "AdapterParams",
    "InitScheme",
    "ZERO_INIT",
    "adapter_forward",
    "residual_apply",
    "init_adapter",
    "adapter_param_count",
    "total_trainable_count",
]

DOWN_STD = 0.02


@dataclass
class AdapterParams:
    w_down: np.ndarray  # (r, d)
    b_down: np.ndarray  # (r,)
    w_up: np.ndarray  # (d, r)
    b_up: np.ndarray  # (d,)
    alpha: float = 1.0
    linear: bool = False  # skip the GELU; used by the constructive adapter

    def __post_init__(self):
        r, d = self.w_down.shape
        if r < 1 or r > d:
            raise ShapeError(f"adapter rank must satisfy 1 <= r <= d, got r={r}, d={d}")
        if self.b_down.shape != (r,) or self.w_up.shape != (d, r) or self.b_up.shape != (d,):
            raise ShapeError(
                f"inconsistent adapter shapes: w_down {self.w_down.shape}, b_down "
                f"{self.b_down.shape}, w_up {self.w_up.shape}, b_up {self.b_up.shape}"
            )
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")

    @property
    def rank(self) -> int:
        return self.w_down.shape[0]

    @property
    def d(self) -> int:
        return self.w_down.shape[1]


@dataclass(frozen=True)
class InitScheme:
    """``zero`` (up-projection and its bias at zero) or ``small_random``."""

    kind: str = "zero"
    sigma0: float | None = None

    def __post_init__(self):
        if self.kind not in ("zero", "small_random"):
            raise ValueError(f"unknown init scheme {self.kind!r}")
        if self.kind == "small_random" and not (self.sigma0 is not None and self.sigma0 > 0):
            raise ValueError("small_random init needs sigma0 > 0")

    @classmethod
    def small_random(cls, sigma0: float) -> "InitScheme":
        return cls("small_random", float(sigma0))

    @classmethod
    def parse(cls, text: str) -> "InitScheme":
        """Parse ``zero`` or ``small_random:<sigma0>``."""
        text = text.strip()
        if text == "zero":
            return cls()
        name, _, sigma = text.partition(":")
        if name == "small_random" and sigma:
            return cls.small_random(float(sigma))
        raise ValueError(f"cannot parse init scheme {text!r}")

    def __str__(self) -> str:
        return "zero" if self.kind == "zero" else f"small_random:{self.sigma0!r}"


ZERO_INIT = InitScheme()


def adapter_forward(p: AdapterParams, h):
    """Adapter output for every row (token) of ``h``; shape ``(..., d)``."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != p.d:
        raise ShapeError(f"adapter expects last dim {p.d}, got input shape {h.shape}")
    z = matmul(h, p.w_down.T) + p.b_down
    a = z if p.linear else gelu(z)
    return matmul(a, p.w_up.T) + p.b_up


def residual_apply(p: AdapterParams, h):
    """``h + alpha * A(h)``. No shortcut for zero adapters: the sum is exact."""
    h = np.asarray(h, dtype=np.float64)
    return h + p.alpha * adapter_forward(p, h)


def init_adapter(d: int, r: int, alpha: float = 1.0, scheme: InitScheme = ZERO_INIT, rng=None):
    if not 1 <= r <= d:
        raise ValueError(f"adapter rank must satisfy 1 <= r <= d, got r={r}, d={d}")
    if rng is None:
        raise ValueError("init_adapter needs an rng")
    w_down = rng.normal(0.0, DOWN_STD, size=(r, d))
    if scheme.kind == "zero":
        w_up = np.zeros((d, r))
    else:
        w_up = rng.normal(0.0, scheme.sigma0, size=(d, r))
    return AdapterParams(w_down, np.zeros(r), w_up, np.zeros(d), alpha=float(alpha))


def adapter_param_count(r: int, d: int) -> int:
    if r < 1 or d < 1:
        raise ValueError(f"r and d must be positive, got r={r}, d={d}")
    return 2 * r * d + r + d


def total_trainable_count(cfg, include_head_bias: bool = False) -> int:
    """Trainable parameters of a model configuration.

    For the adapter regime this is ``n_adapters * (2rd + r + d) + C*d`` with
    ``n_adapters = L // every_k``. Head-only trains just the head; full
    fine-tuning trains every backbone tensor plus the head.
    ``include_head_bias`` adds the ``C`` head biases.
    """
    head = cfg.C * cfg.d + (cfg.C if include_head_bias else 0)
    regime = str(cfg.regime)
    if regime == "head_only":
        return head
    if regime == "full_ft":
        return cfg.backbone_param_count() + head
    n_adapters = cfg.L // cfg.every_k
    return n_adapters * adapter_param_count(cfg.rank, cfg.d) + head
