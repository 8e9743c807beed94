"""Dense double-precision linear algebra underpinning the compression stack.

All routines work on plain 2-D ``numpy.ndarray`` objects in row-major order
and are pure functions: identical inputs give identical outputs, including
singular-vector signs, so factor files are reproducible across runs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    ContractViolationError,
    FactorizationError,
    UndefinedCorrelationError,
)

__all__ = [
    "SvdFactors",
    "as_matrix",
    "svd",
    "sym_eig",
    "frobenius_norm",
    "pearson",
    "seeded_rng",
    "clamp_small_eigvals",
]

# Eigenvalues below this fraction of the largest are treated as exact zeros
# before any inversion.
EIG_CLAMP_REL = 1e-12


def as_matrix(a, name="matrix"):
    """Coerce ``a`` to a 2-D float64 array, rejecting NaN/Inf and empty input."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ContractViolationError(f"{name} must be 2-D, got ndim={arr.ndim}")
    if arr.size == 0:
        raise ContractViolationError(f"{name} must be non-empty")
    if not np.isfinite(arr).all():
        raise ContractViolationError(f"{name} contains non-finite entries")
    return np.ascontiguousarray(arr)


def _fix_signs(u, vt=None):
    # Make the first non-negligible entry of each u-column non-negative;
    # flip the paired vt-row so the product is unchanged.
    for j in range(u.shape[1]):
        col = u[:, j]
        big = np.abs(col) > 1e-12 * max(np.abs(col).max(), 1e-300)
        idx = np.argmax(big)
        if big[idx] and col[idx] < 0:
            u[:, j] = -col
            if vt is not None:
                vt[j, :] = -vt[j, :]
    return u, vt


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD ``a = u @ diag(sigma) @ vt`` with a fixed sign convention."""

    u: np.ndarray
    sigma: np.ndarray
    vt: np.ndarray

    @property
    def rank(self):
        return self.sigma.size

    def reconstruct(self):
        return (self.u * self.sigma) @ self.vt


def svd(a):
    """Thin singular value decomposition with deterministic signs.

    Parameters
    ----------
    a : array_like
        Real matrix, all entries finite.

    Returns
    -------
    SvdFactors
        ``u`` has orthonormal columns, ``sigma`` is non-increasing and
        non-negative, ``vt`` has orthonormal rows. The first non-negligible
        entry of every ``u`` column is non-negative.
    """
    arr = as_matrix(a)
    try:
        u, s, vt = np.linalg.svd(arr, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(
            f"SVD failed to converge for {arr.shape[0]}x{arr.shape[1]} matrix"
        ) from exc
    u = np.ascontiguousarray(u)
    vt = np.ascontiguousarray(vt)
    _fix_signs(u, vt)
    return SvdFactors(u=u, sigma=s, vt=vt)


def sym_eig(g, sym_tol=1e-10):
    """Eigendecomposition of a symmetric matrix, eigenvalues non-increasing.

    Raises :class:`ContractViolationError` when ``g`` is not square symmetric
    within ``sym_tol`` (relative to the largest entry magnitude).
    """
    arr = as_matrix(g, name="symmetric matrix")
    if arr.shape[0] != arr.shape[1]:
        raise ContractViolationError(
            f"expected a square matrix, got {arr.shape[0]}x{arr.shape[1]}"
        )
    scale = max(1.0, float(np.abs(arr).max()))
    if float(np.abs(arr - arr.T).max()) > sym_tol * scale:
        raise ContractViolationError("matrix is not symmetric within tolerance")
    try:
        vals, vecs = np.linalg.eigh(arr)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(
            f"eigendecomposition failed for {arr.shape[0]}x{arr.shape[0]} matrix"
        ) from exc
    vals = vals[::-1].copy()
    vecs = np.ascontiguousarray(vecs[:, ::-1])
    _fix_signs(vecs)
    return vecs, vals


def frobenius_norm(a):
    """Square root of the sum of squared entries."""
    arr = as_matrix(a)
    return float(np.sqrt(np.sum(arr * arr)))


def pearson(x, y):
    """Pearson correlation of two equal-length vectors.

    Raises :class:`UndefinedCorrelationError` when either input has zero
    variance; the result is clipped into [-1, 1] against roundoff.
    """
    xv = np.asarray(x, dtype=np.float64).ravel()
    yv = np.asarray(y, dtype=np.float64).ravel()
    if xv.size != yv.size:
        raise ContractViolationError(
            f"length mismatch: {xv.size} vs {yv.size}"
        )
    if xv.size < 2:
        raise ContractViolationError("pearson needs at least 2 samples")
    if not (np.isfinite(xv).all() and np.isfinite(yv).all()):
        raise ContractViolationError("pearson inputs must be finite")
    xd = xv - xv.mean()
    yd = yv - yv.mean()
    sx = float(np.sqrt(np.sum(xd * xd)))
    sy = float(np.sqrt(np.sum(yd * yd)))
    if sx == 0.0 or sy == 0.0:
        raise UndefinedCorrelationError("zero variance input")
    r = float(np.sum(xd * yd) / (sx * sy))
    return float(np.clip(r, -1.0, 1.0))


def seeded_rng(seed):
    """Deterministic random generator: equal seeds give equal streams."""
    return np.random.default_rng(int(seed))


def clamp_small_eigvals(vals, rel=EIG_CLAMP_REL):
    """Zero out eigenvalues below ``rel`` times the largest one.

    Keeps numerical noise from being amplified when the values are later
    inverted or square-rooted.
    """
    v = np.asarray(vals, dtype=np.float64).copy()
    top = float(v.max(initial=0.0))
    if top <= 0.0:
        return np.zeros_like(v)
    v[v < rel * top] = 0.0
    return v
