"""Dense numerical primitives shared by every other module.

Matrices and vectors are plain ``numpy.ndarray`` objects in float64.
Random streams come from :func:`make_rng`, which always uses the Philox
counter-based generator so that a seed reproduces the same stream on every
platform and numpy release that ships Philox.
"""

from __future__ import annotations

import numpy as np

RNG_ALGORITHM = "philox4x64-10"


class NumericalError(ArithmeticError):
    """Raised when an iteration produces non-finite values."""


def make_rng(seed: int) -> np.random.Generator:
    """Seeded Philox4x64-10 generator (never the platform default)."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def as_vector(v) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"expected a vector, got shape {arr.shape}")
    return arr


def log_sum_exp(v) -> float:
    """Max-shifted ``log(sum(exp(v)))``."""
    v = as_vector(v)
    if v.size == 0:
        raise ValueError("empty input")
    m = np.max(v)
    if v.size == 1 or not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.sum(np.exp(v - m))))


def log_sum_exp_rows(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Vectorised :func:`log_sum_exp` along ``axis``; rows of all ``-inf`` give ``-inf``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[axis] == 0:
        raise ValueError("empty input")
    m = np.max(x, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(x - m_safe), axis=axis, keepdims=True)) + m_safe
    return np.squeeze(out, axis=axis)


def softmax(v) -> np.ndarray:
    v = as_vector(v)
    if v.size == 0:
        raise ValueError("empty input")
    e = np.exp(v - np.max(v))
    return e / np.sum(e)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] == 0:
        raise ValueError("empty input")
    e = np.exp(x - np.max(x, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def power_iteration(
    W: np.ndarray,
    iters: int = 100,
    u0: np.ndarray | None = None,
    tol: float = 1e-10,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Estimate the largest singular value of ``W``.

    Alternates ``v <- W^T u / |W^T u|`` and ``u <- W v / |W v|`` starting
    from ``u0`` (length ``rows``), and stops early once the estimate
    ``sigma = |W v|`` moves by less than ``tol``.

    Returns ``(sigma, u, v)`` with unit-norm left/right vector estimates.
    A zero matrix gives ``sigma = 0``, the normalised ``u0`` and the first
    basis vector as ``v``.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.size == 0:
        raise ValueError("power_iteration needs a non-empty matrix")
    rows, cols = W.shape
    if u0 is None:
        u0 = np.ones(rows)
    u = as_vector(u0).copy()
    if u.shape[0] != rows:
        raise ValueError(f"u0 has length {u.shape[0]}, matrix has {rows} rows")
    norm = np.linalg.norm(u)
    if norm == 0.0:
        raise ValueError("u0 must be nonzero")
    u /= norm

    v = np.zeros(cols)
    v[0] = 1.0
    if not np.any(W):
        return 0.0, u, v

    sigma = 0.0
    for _ in range(max(int(iters), 1)):
        wt_u = W.T @ u
        n = np.linalg.norm(wt_u)
        if n == 0.0:
            # u0 orthogonal to the column space; restart from a dense vector
            u = np.ones(rows) / np.sqrt(rows)
            wt_u = W.T @ u
            n = np.linalg.norm(wt_u)
            if n == 0.0:
                u = np.abs(W).sum(axis=1)
                u /= np.linalg.norm(u)
                wt_u = W.T @ u
                n = np.linalg.norm(wt_u)
        v = wt_u / n
        wv = W @ v
        new_sigma = float(np.linalg.norm(wv))
        u = wv / new_sigma
        done = abs(new_sigma - sigma) < tol
        sigma = new_sigma
        if done:
            break
    return sigma, u, v
