"""Low-rank task shifts and the rank/approximation-error trade-off.

A task shift is a ``d x d`` matrix ``delta = U diag(sigma) V^T``. A rank-r
adapter evaluated without its nonlinearity is the linear map
``alpha * w_up @ w_down``; choosing it from the leading ``r`` singular
triplets reproduces the truncated SVD, whose squared Frobenius error is the
tail energy ``sum_{i>r} sigma_i**2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .adapter import AdapterParams
from .exceptions import AdapterLabError
from .numkernel import matmul

__all__ = [
    "Spectrum",
    "ShiftMatrix",
    "BoundInputs",
    "MonteCarloResult",
    "ElbowReport",
    "BoundViolation",
    "make_shift",
    "random_orthogonal",
    "truncate",
    "tail_energy",
    "constructive_adapter",
    "approx_bound",
    "sphere_draws",
    "verify_bound_monte_carlo",
    "monte_carlo_curve",
    "tail_decay",
    "elbow_check",
]


class BoundViolation(AdapterLabError, AssertionError):
    pass


@dataclass(frozen=True)
class Spectrum:
    sigmas: np.ndarray
    c_decay: float | None = None
    p_decay: float | None = None

    def __post_init__(self):
        s = np.asarray(self.sigmas, dtype=np.float64)
        object.__setattr__(self, "sigmas", s)
        if s.ndim != 1 or np.any(s < 0) or np.any(np.diff(s) > 0):
            raise ValueError("singular values must be a non-increasing, non-negative vector")

    @classmethod
    def power_law(cls, d: int, c_decay: float, p_decay: float) -> "Spectrum":
        i = np.arange(1, d + 1, dtype=np.float64)
        return cls(c_decay * i**-p_decay, c_decay, p_decay)

    def __len__(self) -> int:
        return self.sigmas.size


@dataclass(frozen=True)
class ShiftMatrix:
    delta: np.ndarray
    u: np.ndarray
    vt: np.ndarray
    spectrum: Spectrum

    @property
    def d(self) -> int:
        return self.delta.shape[0]

    @property
    def sigmas(self) -> np.ndarray:
        return self.spectrum.sigmas

    @classmethod
    def from_factors(cls, u, sigmas, vt, c_decay=None, p_decay=None) -> "ShiftMatrix":
        spec = Spectrum(sigmas, c_decay, p_decay)
        return cls(matmul(u * spec.sigmas, vt), u, vt, spec)


@dataclass(frozen=True)
class BoundInputs:
    b_norm: float = 1.0
    rank: int = 1
    n_samples: int = 1
    l_blocks: int = 1

    def __post_init__(self):
        if not (self.b_norm > 0 and self.rank > 0 and self.n_samples > 0 and self.l_blocks > 0):
            raise ValueError("bound inputs must all be positive")


def _check_p(p_decay):
    if not p_decay > 0.5:
        raise ValueError(f"polynomial decay needs p > 1/2 for a finite tail, got p={p_decay}")


def random_orthogonal(d: int, rng) -> np.ndarray:
    """Haar-distributed orthogonal matrix (QR of a Gaussian, sign-fixed)."""
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def make_shift(d: int, c_decay: float, p_decay: float, rng) -> ShiftMatrix:
    """Random shift with singular values ``c_decay * i**-p_decay``."""
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    if not c_decay > 0:
        raise ValueError(f"c_decay must be positive, got {c_decay}")
    _check_p(p_decay)
    u = random_orthogonal(d, rng)
    v = random_orthogonal(d, rng)
    spec = Spectrum.power_law(d, c_decay, p_decay)
    return ShiftMatrix(matmul(u * spec.sigmas, v.T), u, v.T.copy(), spec)


def _check_rank(shift, r, low=0):
    if not low <= r <= shift.d:
        raise ValueError(f"rank must lie in [{low}, {shift.d}], got {r}")


def truncate(shift: ShiftMatrix, r: int) -> np.ndarray:
    """Best rank-``r`` approximation ``U_r diag(sigma_1..r) V_r^T``."""
    _check_rank(shift, r)
    if r == 0:
        return np.zeros_like(shift.delta)
    return matmul(shift.u[:, :r] * shift.sigmas[:r], shift.vt[:r])


def tail_energy(shift: ShiftMatrix, r: int) -> float:
    """``sum_{i>r} sigma_i**2``."""
    _check_rank(shift, r)
    t = shift.sigmas[r:]
    return float(np.sum(t * t))


def constructive_adapter(shift: ShiftMatrix, r: int, alpha: float = 1.0) -> AdapterParams:
    """Linear-mode adapter whose map ``alpha * w_up @ w_down`` is the rank-r truncation.

    ``w_up = U_r sqrt(S_r) / alpha`` and ``w_down = sqrt(S_r) V_r^T``, biases zero.
    """
    _check_rank(shift, r, low=1)
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    root = np.sqrt(shift.sigmas[:r])
    w_up = shift.u[:, :r] * root / alpha
    w_down = root[:, None] * shift.vt[:r]
    return AdapterParams(w_down, np.zeros(r), w_up, np.zeros(shift.d), alpha=alpha, linear=True)


def approx_bound(shift: ShiftMatrix, r: int, b=1.0) -> float:
    """``B**2 * sum_{i>r} sigma_i**2``; ``b`` is a norm bound or a :class:`BoundInputs`."""
    b_norm = b.b_norm if isinstance(b, BoundInputs) else float(b)
    return b_norm * b_norm * tail_energy(shift, r)


def sphere_draws(n: int, d: int, radius: float, rng) -> np.ndarray:
    """``n`` points uniform on the radius-``radius`` sphere in ``R^d``."""
    g = rng.normal(size=(n, d))
    return radius * g / np.linalg.norm(g, axis=1, keepdims=True)


class MonteCarloResult(NamedTuple):
    empirical_mse: float
    bound: float
    n_draws: int

    @property
    def tolerance(self) -> float:
        return self.bound * (1.0 + 3.0 / math.sqrt(self.n_draws))

    @property
    def passed(self) -> bool:
        return self.empirical_mse <= self.tolerance


def verify_bound_monte_carlo(shift, r, b, n_draws, rng, check=True, chunk=20000):
    """Monte Carlo mean of ``||(delta - delta_r) h||**2`` over the B-sphere.

    Raises :class:`BoundViolation` when ``check`` and the mean exceeds
    ``bound * (1 + 3 / sqrt(n_draws))``.
    """
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    resid = shift.delta - truncate(shift, r)
    total = 0.0
    done = 0
    while done < n_draws:
        m = min(chunk, n_draws - done)
        h = sphere_draws(m, shift.d, float(b), rng)
        e = matmul(h, resid.T)
        total += float(np.sum(e * e))
        done += m
    res = MonteCarloResult(total / n_draws, approx_bound(shift, r, b), n_draws)
    if check and not res.passed:
        raise BoundViolation(
            f"rank {r}: empirical {res.empirical_mse:.6g} exceeds bound tolerance {res.tolerance:.6g}"
        )
    return res


def monte_carlo_curve(shift, ranks, b, n_draws, rng):
    """Monte Carlo residuals for several ranks from one set of sphere draws.

    Uses ``||(delta - delta_r) h||**2 = sum_{i>r} sigma_i**2 (v_i . h)**2``
    (orthonormal left factors), so the draws are projected once and every
    rank costs O(d). Returns one :class:`MonteCarloResult` per rank.
    """
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    for r in ranks:
        _check_rank(shift, r)
    h = sphere_draws(n_draws, shift.d, float(b), rng)
    z = matmul(h, shift.vt.T)
    second = np.mean(z * z, axis=0)
    weighted = shift.sigmas**2 * second
    out = []
    for r in ranks:
        emp = float(np.sum(weighted[r:]))
        out.append(MonteCarloResult(emp, approx_bound(shift, r, b), n_draws))
    return out


def tail_decay(r: int, c_decay: float = 1.0, p_decay: float = 1.0, d: int | None = None) -> float:
    """``sqrt(sum_{i>r} (c * i**-p)**2)``.

    With ``d`` the sum stops at ``i = d``. Otherwise the series is summed
    explicitly for a stretch of terms and the remainder is taken from the
    Euler-Maclaurin expansion around the integral of ``x**-2p``; the
    neglected terms are below ``1e-10`` relative for every ``p > 1/2``.
    """
    if r < 0:
        raise ValueError(f"r must be >= 0, got {r}")
    _check_p(p_decay)
    s = 2.0 * p_decay
    if d is not None:
        if r >= d:
            return 0.0
        i = np.arange(r + 1, d + 1, dtype=np.float64)
        return c_decay * math.sqrt(float(np.sum(i**-s)))
    n = r + 400
    i = np.arange(r + 1, n + 1, dtype=np.float64)
    head = float(np.sum(i[::-1] ** -s))
    # sum_{i>n} f(i) = int_n^inf f - f(n)/2 - f'(n)/12 + f'''(n)/720 - ...
    f = n**-s
    f1 = -s * n ** (-s - 1)
    f3 = -s * (s + 1) * (s + 2) * n ** (-s - 3)
    rest = n ** (1 - s) / (s - 1) - f / 2 - f1 / 12 + f3 / 720
    return c_decay * math.sqrt(head + rest)


class ElbowReport(NamedTuple):
    ranks: tuple
    increments: tuple
    last_increment: float
    earlier_gain: float
    passed: bool


def elbow_check(curve) -> ElbowReport:
    """Diminishing-returns check on a metric-versus-rank curve.

    Passes when the gain over the final interval does not exceed the total
    gain accumulated up to the start of that interval.
    """
    pts = [(int(r), float(m)) for r, m in curve]
    if len(pts) < 3:
        raise ValueError(f"elbow check needs at least 3 points, got {len(pts)}")
    ranks = [r for r, _ in pts]
    if any(b <= a for a, b in zip(ranks, ranks[1:])):
        raise ValueError(f"ranks must be strictly increasing, got {ranks}")
    vals = [m for _, m in pts]
    inc = tuple(b - a for a, b in zip(vals, vals[1:]))
    last = inc[-1]
    earlier = vals[-2] - vals[0]
    return ElbowReport(tuple(ranks), inc, last, earlier, bool(last <= earlier))
