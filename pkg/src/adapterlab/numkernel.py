"""Dense float64 kernels used by every other module.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. Matrix
products go through :func:`matmul`, which accumulates each output entry
left to right over the inner index, so results do not depend on BLAS
blocking or thread count.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numba
import numpy as np
from scipy.special import erfc

from .exceptions import ShapeError, SvdConvergenceError

__all__ = [
    "SvdResult",
    "matmul",
    "svd",
    "gelu",
    "gelu_grad",
    "layernorm",
    "softmax_rows",
    "make_rng",
    "RNG_ALGORITHM",
]

RNG_ALGORITHM = "numpy.PCG64/SeedSequence"

SVD_MAX_SWEEPS = 100
SVD_TOL = 1e-12

_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@numba.njit(cache=True)
def _mm2(a, b):
    m, kk = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for k in range(kk):
            aik = a[i, k]
            for j in range(n):
                out[i, j] += aik * b[k, j]
    return out


@numba.njit(cache=True)
def _mm3(a, b):
    p, m, kk = a.shape
    n = b.shape[2]
    out = np.zeros((p, m, n))
    for t in range(p):
        for i in range(m):
            for k in range(kk):
                aik = a[t, i, k]
                for j in range(n):
                    out[t, i, j] += aik * b[t, k, j]
    return out


def matmul(a, b):
    """Matrix product with a fixed summation order.

    Accepts 2-D operands or stacks of matrices. When ``b`` is 2-D the
    leading dimensions of ``a`` are flattened into rows; otherwise the
    leading dimensions are broadcast.

    Each output entry equals ``sum(a[i, k] * b[k, j] for k in range(K))``
    evaluated strictly in increasing ``k``, so it is bitwise equal to a
    naive triple loop.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul dimension mismatch: {a.shape} x {b.shape} "
            f"(inner {a.shape[-1]} != {b.shape[-2]})"
        )
    if b.ndim == 2:
        lead = a.shape[:-1]
        out = _mm2(np.ascontiguousarray(a.reshape(-1, a.shape[-1])), np.ascontiguousarray(b))
        return out.reshape(*lead, b.shape[1])
    lead = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    a3 = np.broadcast_to(a, lead + a.shape[-2:]).reshape(-1, *a.shape[-2:])
    b3 = np.broadcast_to(b, lead + b.shape[-2:]).reshape(-1, *b.shape[-2:])
    out = _mm3(np.ascontiguousarray(a3), np.ascontiguousarray(b3))
    return out.reshape(*lead, a.shape[-2], b.shape[-1])


class SvdResult(NamedTuple):
    """Thin SVD ``a = u @ diag(s) @ vt`` with ``s`` non-increasing."""

    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray


@numba.njit(cache=True)
def _jacobi_sweeps(w, v, max_sweeps, tol):
    # One-sided (Hestenes) Jacobi on the columns of w, accumulating into v.
    m, n = w.shape
    scale = 0.0
    for i in range(m):
        for j in range(n):
            scale += w[i, j] * w[i, j]
    residual = 0.0
    for sweep in range(max_sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for i in range(m):
                    alpha += w[i, p] * w[i, p]
                    beta += w[i, q] * w[i, q]
                    gamma += w[i, p] * w[i, q]
                off += gamma * gamma
                if gamma == 0.0 or abs(gamma) <= 1e-15 * math.sqrt(alpha * beta):
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                sgn = 1.0 if zeta >= 0.0 else -1.0
                t = sgn / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                for i in range(m):
                    wp = w[i, p]
                    wq = w[i, q]
                    w[i, p] = c * wp - s * wq
                    w[i, q] = s * wp + c * wq
                for i in range(n):
                    vp = v[i, p]
                    vq = v[i, q]
                    v[i, p] = c * vp - s * vq
                    v[i, q] = s * vp + c * vq
        residual = math.sqrt(off) / scale if scale > 0.0 else 0.0
        if residual <= tol:
            return sweep + 1, residual
    return -1, residual


def _orthonormal_columns(w, s):
    """Normalise the columns of ``w`` and repair numerically null ones."""
    m, k = w.shape
    thresh = max(m, k) * np.finfo(np.float64).eps * (s[0] if k else 0.0)
    u = np.zeros((m, k))
    for j in range(k):
        col = w[:, j] / s[j] if s[j] > thresh else np.zeros(m)
        for _ in range(2):
            col = col - u[:, :j] @ (u[:, :j].T @ col)
        norm = np.linalg.norm(col)
        if norm < 0.5:
            # Replace by the standard basis vector least covered so far.
            resid = 1.0 - np.sum(u[:, :j] ** 2, axis=1)
            col = np.zeros(m)
            col[int(np.argmax(resid))] = 1.0
            for _ in range(2):
                col = col - u[:, :j] @ (u[:, :j].T @ col)
            norm = np.linalg.norm(col)
        u[:, j] = col / norm
    return u


def svd(a, max_sweeps=SVD_MAX_SWEEPS, tol=SVD_TOL):
    """Thin singular value decomposition by one-sided Jacobi rotations.

    Converged when the off-diagonal mass of the column Gram matrix,
    relative to ``||a||_F**2``, drops below ``tol``. Raises
    :class:`SvdConvergenceError` after ``max_sweeps`` sweeps.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or min(a.shape) < 1:
        raise ShapeError(f"svd needs a non-empty matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("svd input contains non-finite entries")
    if a.shape[0] < a.shape[1]:
        r = svd(a.T, max_sweeps=max_sweeps, tol=tol)
        return SvdResult(r.vt.T.copy(), r.s, r.u.T.copy())
    w = a.copy()
    n = a.shape[1]
    v = np.eye(n)
    sweeps, residual = _jacobi_sweeps(w, v, max_sweeps, tol)
    if sweeps < 0:
        raise SvdConvergenceError(max_sweeps, residual)
    norms = np.sqrt(np.sum(w * w, axis=0))
    order = np.argsort(-norms, kind="stable")
    s = norms[order]
    u = _orthonormal_columns(w[:, order], s)
    return SvdResult(u, s, v[:, order].T.copy())


def gelu(x):
    """Exact GELU, ``x * Phi(x)``.

    ``Phi`` is evaluated as ``0.5 * erfc(-x / sqrt(2))``, which keeps full
    relative precision in the negative tail where ``1 + erf`` cancels.
    """
    if np.isscalar(x):
        return 0.5 * x * math.erfc(-x * _SQRT1_2)
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * erfc(-x * _SQRT1_2)


def gelu_grad(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * erfc(-x * _SQRT1_2) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def layernorm(x, gamma, beta, eps=1e-5):
    """Normalise the last axis to zero mean and unit (biased) variance."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    denom = np.sqrt(var + eps)
    with np.errstate(invalid="ignore", divide="ignore"):
        xhat = np.where(denom > 0, xc / np.where(denom > 0, denom, 1.0), 0.0)
    return xhat * np.reshape(gamma, -1) + np.reshape(beta, -1)


def softmax_rows(a):
    """Softmax over the last axis with max subtraction."""
    a = np.asarray(a, dtype=np.float64)
    z = a - a.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def make_rng(seed, *keys):
    """Seeded generator; extra integer ``keys`` derive independent streams.

    Uses numpy's PCG64 bit generator fed by a SeedSequence, whose output is
    specified bit-for-bit and identical across platforms.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, keys)])))
