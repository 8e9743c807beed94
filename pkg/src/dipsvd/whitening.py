"""Channel-weighted data whitening.

Pipeline per weight matrix: score each input channel by how strongly it
aligns with the dominant sample-space variance, amplify the top fraction of
channels through a diagonal matrix D, then factor the (damped) channel Gram
of X D into an invertible S with S @ S.T = (XD).T @ (XD) + damping*I.

With that factor, truncating singular triples of W @ S costs exactly the
root-sum-square of the dropped singular values when measured on X D, which
is what makes rank selection loss-aware.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calibration import CalibrationMatrix
from .errors import ContractViolationError, ShapeError, SingularWhiteningError
from .linalg import as_matrix, clamp_small_eigvals, sym_eig

__all__ = [
    "ChannelScaling",
    "WhiteningTransform",
    "channel_importance",
    "build_scaling",
    "identity_scaling",
    "build_whitening",
    "identity_whitening",
    "default_damping",
]


def _data(x):
    return x.x if isinstance(x, CalibrationMatrix) else as_matrix(x)


def channel_importance(x):
    """Per-channel importance: the norm of the channel's Gram column.

    For channel j this equals sqrt(x_j.T @ (X @ X.T) @ x_j), i.e. the length
    of x_j's image under the sample Gram, but is computed from the much
    smaller channel Gram X.T @ X.
    """
    arr = _data(x)
    gram = arr.T @ arr
    return np.sqrt(np.sum(gram * gram, axis=0))


@dataclass(frozen=True)
class ChannelScaling:
    """Diagonal amplification: each entry is 1 or ``amplify``."""

    d_diag: np.ndarray
    amplify: float
    top_fraction: float

    def __post_init__(self):
        d = np.asarray(self.d_diag, dtype=np.float64).ravel()
        object.__setattr__(self, "d_diag", d)

    @property
    def amplified_count(self):
        return int(np.sum(self.d_diag != 1.0))


def identity_scaling(n):
    return ChannelScaling(d_diag=np.ones(n), amplify=1.0, top_fraction=0.0)


def top_count(top_fraction, n):
    """Number of amplified channels: ceil(top_fraction * n), at least 1
    whenever the fraction is positive. A 1e-9 guard keeps products that are
    mathematically integral (0.03 * 100) from rounding up."""
    if top_fraction <= 0.0:
        return 0
    count = int(np.ceil(top_fraction * n - 1e-9))
    return max(1, min(count, n))


def build_scaling(importance, amplify, top_fraction):
    """Amplify the channels with the largest importance scores.

    Channels are ranked by descending importance, ties broken by the lower
    channel index; exactly ``top_count(top_fraction, n)`` get the factor
    ``amplify`` (>= 1), the rest stay at 1.
    """
    alpha = np.asarray(importance, dtype=np.float64).ravel()
    if amplify < 1.0:
        raise ContractViolationError(f"amplify must be >= 1, got {amplify}")
    if not 0.0 <= top_fraction <= 1.0:
        raise ContractViolationError(
            f"top_fraction must lie in [0, 1], got {top_fraction}"
        )
    n = alpha.size
    count = top_count(top_fraction, n)
    d = np.ones(n)
    if count > 0:
        order = np.argsort(-alpha, kind="stable")
        d[order[:count]] = amplify
    return ChannelScaling(d_diag=d, amplify=float(amplify), top_fraction=float(top_fraction))


@dataclass(frozen=True)
class WhiteningTransform:
    """Invertible factor of one weight's input-space Gram.

    Satisfies s @ s.T = (X D).T @ (X D) + damping * I and s @ s_inv = I.
    """

    s: np.ndarray
    s_inv: np.ndarray
    scaling: ChannelScaling
    damping: float

    @property
    def channels(self):
        return self.s.shape[0]


def identity_whitening(n):
    """No-op transform: plain truncated SVD territory."""
    eye = np.eye(n)
    return WhiteningTransform(s=eye, s_inv=eye.copy(),
                              scaling=identity_scaling(n), damping=0.0)


def default_damping(gram):
    """1e-6 of the mean diagonal mass: keeps rank-deficient Grams invertible."""
    g = np.asarray(gram)
    return 1e-6 * float(np.trace(g)) / g.shape[0]


def build_whitening(x, scaling=None, damping=None):
    """Factor the channel Gram of the (amplified) calibration data.

    Parameters
    ----------
    x : CalibrationMatrix or array_like
        Activation samples, tokens x channels.
    scaling : ChannelScaling, optional
        Diagonal amplification; identity when omitted.
    damping : float, optional
        Ridge added to the Gram diagonal. ``None`` picks
        1e-6 * trace(G)/n; pass 0.0 explicitly for the exact loss identity.

    Returns
    -------
    WhiteningTransform
        Symmetric square root ``s`` of the damped Gram and its inverse.

    Raises
    ------
    SingularWhiteningError
        When the damped Gram's smallest eigenvalue falls below 1e-12 of the
        largest — the inverse would amplify noise; raise the damping.
    """
    arr = _data(x)
    n = arr.shape[1]
    if scaling is None:
        scaling = identity_scaling(n)
    if scaling.d_diag.size != n:
        raise ShapeError(
            f"scaling has {scaling.d_diag.size} channels, data has {n}"
        )
    xd = arr * scaling.d_diag
    gram = xd.T @ xd
    gram = 0.5 * (gram + gram.T)
    if damping is None:
        damping = default_damping(gram)
    if damping < 0.0:
        raise ContractViolationError(f"damping must be >= 0, got {damping}")
    if damping > 0.0:
        gram = gram + damping * np.eye(n)
    vecs, vals = sym_eig(gram)
    vals = clamp_small_eigvals(vals)
    top = float(vals[0])
    if top <= 0.0 or float(vals[-1]) < 1e-12 * top:
        raise SingularWhiteningError(
            "channel Gram is numerically singular; increase damping "
            f"(smallest/largest eigenvalue = {float(vals[-1]):.3e}/{top:.3e})"
        )
    root = np.sqrt(vals)
    s = (vecs * root) @ vecs.T
    s_inv = (vecs / root) @ vecs.T
    s = 0.5 * (s + s.T)
    s_inv = 0.5 * (s_inv + s_inv.T)
    return WhiteningTransform(s=s, s_inv=s_inv, scaling=scaling, damping=float(damping))
