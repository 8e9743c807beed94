"""Calibration activation matrices: synthesis, persistence, and capture.

A calibration matrix holds activation samples, rows are tokens and columns
are channels. The synthetic generator plants an exact singular spectrum so
downstream tests can dial up well-conditioned or near-singular channel
Grams on demand.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolationError, ShapeError
from .linalg import as_matrix, seeded_rng
from . import matio

__all__ = [
    "CalibrationMatrix",
    "generate_synthetic",
    "load_matrix",
    "save_matrix",
    "capture_activations",
]

DEFAULT_TOKENS = 256  # default sample count for synthetic calibration data


def _numerical_rank(x):
    # rank of x.T @ x == rank of x; singular values below 1e-12 of the top
    # count as zero
    sig = np.linalg.svd(x, compute_uv=False)
    top = float(sig.max(initial=0.0))
    if top == 0.0:
        return 0
    return int(np.sum(sig > 1e-12 * top))


@dataclass(frozen=True)
class CalibrationMatrix:
    """Activation samples (tokens x channels) plus provenance."""

    x: np.ndarray
    source: str = "file"
    seed: int | None = None
    gram_rank: int = -1

    def __post_init__(self):
        arr = as_matrix(self.x, name="calibration matrix")
        object.__setattr__(self, "x", arr)
        if self.source not in ("file", "synthetic", "captured"):
            raise ContractViolationError(f"unknown source tag {self.source!r}")
        if self.gram_rank < 0:
            object.__setattr__(self, "gram_rank", _numerical_rank(arr))

    @property
    def tokens(self):
        return self.x.shape[0]

    @property
    def channels(self):
        return self.x.shape[1]


def _seeded_orthonormal(rng, rows, cols):
    # QR with sign-fixed R diagonal: deterministic orthonormal columns
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    d = np.sign(np.diag(r))
    d[d == 0] = 1.0
    return q * d


def generate_synthetic(m, n, spectrum, seed, noise=0.0):
    """Build X = Q1 @ diag(spectrum) @ Q2.T with optional white noise.

    Parameters
    ----------
    m, n : int
        Token and channel counts; requires ``m >= n`` so all ``n`` planted
        singular values fit.
    spectrum : array_like
        The exact singular values of the noiseless matrix, length ``n``,
        all non-negative.
    seed : int
        Drives both orthonormal factors and the noise; equal seeds give
        bit-identical matrices.
    noise : float
        Standard deviation of added white noise (0 keeps the spectrum exact).
    """
    spec = np.asarray(spectrum, dtype=np.float64).ravel()
    if spec.size != n:
        raise ContractViolationError(
            f"spectrum length {spec.size} must equal channel count {n}"
        )
    if (spec < 0).any():
        raise ContractViolationError("spectrum entries must be non-negative")
    if m < n:
        raise ContractViolationError(
            f"need at least as many tokens as channels to plant {n} singular "
            f"values, got m={m}"
        )
    rng = seeded_rng(seed)
    q1 = _seeded_orthonormal(rng, m, n)
    q2 = _seeded_orthonormal(rng, n, n)
    x = (q1 * spec) @ q2.T
    if noise > 0.0:
        x = x + noise * rng.standard_normal((m, n))
    return CalibrationMatrix(x=x, source="synthetic", seed=int(seed))


def load_matrix(path):
    """Load a DSVD or CSV file into a calibration matrix."""
    return CalibrationMatrix(x=matio.load_matrix_file(path), source="file")


def save_matrix(m, path):
    """Persist a matrix (or calibration wrapper) to DSVD or CSV by extension."""
    arr = m.x if isinstance(m, CalibrationMatrix) else m
    matio.save_matrix_file(arr, path)


def capture_activations(model, calib):
    """Record the exact input every compressible weight sees.

    Returns one captured :class:`CalibrationMatrix` per weight, in the
    model's forward order. The capture recomputes a plain forward pass, so
    the model's outputs are untouched.
    """
    x = calib.x if isinstance(calib, CalibrationMatrix) else as_matrix(calib)
    if x.shape[1] != model.input_dim:
        raise ShapeError(
            f"layer 0 expects {model.input_dim} input channels, got {x.shape[1]}"
        )
    _, _, captured = model.forward_capture(x)
    return [CalibrationMatrix(x=c, source="captured") for c in captured]
