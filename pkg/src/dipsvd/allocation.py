"""Layer-wise compression budgets from Fisher sensitivity and effective rank.

The heuristic scores each layer two ways — gradient-to-parameter norm
ratios (how hard the loss reacts to the layer) and the effective rank of
its hidden state (how much spectral room it has) — min-max normalizes both,
power-combines them, and turns the combined scores into per-layer
preservation ratios whose mean hits the global budget exactly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import (
    ContractViolationError,
    DegenerateSpectrumError,
    InfeasibleBudgetError,
)
from .linalg import as_matrix
from .toymodel import gradients
from . import matio

__all__ = [
    "LayerScores",
    "CompressionPlan",
    "fisher_from_gradients",
    "fisher_sensitivity",
    "effective_rank",
    "layer_effective_ranks",
    "combine_scores",
    "score_layers",
    "allocate",
    "uniform_plan",
    "plan_to_dict",
    "plan_from_dict",
    "save_plan",
    "load_plan",
    "waterfill_proportional",
    "waterfill_additive",
]

NORM_EPS = 1e-6       # floor added after min-max normalization
WEIGHT_NORM_EPS = 1e-12
ENERGY_MODES = ("values", "squares")


@dataclass(frozen=True)
class LayerScores:
    """Per-layer sensitivity, effective rank, and their combination."""

    fisher: np.ndarray
    eff_rank: np.ndarray
    combined: np.ndarray
    beta: float
    threshold: float | None = None
    energy_mode: str | None = None


@dataclass(frozen=True)
class CompressionPlan:
    """Preserved fraction per layer; mean(preserve) == 1 - target_k."""

    preserve: np.ndarray
    target_k: float
    layer_count: int
    beta: float | None = None
    tau: float | None = None
    energy_mode: str | None = None

    def __post_init__(self):
        p = np.asarray(self.preserve, dtype=np.float64).ravel()
        object.__setattr__(self, "preserve", p)
        if p.size != self.layer_count:
            raise ContractViolationError(
                f"plan lists {p.size} ratios for {self.layer_count} layers"
            )

    @property
    def compression_ratios(self):
        return 1.0 - self.preserve


def fisher_from_gradients(model, grads):
    """Per layer, sum over its weights of ||grad||_F / (||weight||_F + eps)."""
    out = np.zeros(len(model.layers))
    for li, layer in enumerate(model.layers):
        total = 0.0
        for name, w in layer.weights.items():
            g = grads[li][name]
            total += float(np.linalg.norm(g)) / (float(np.linalg.norm(w)) + WEIGHT_NORM_EPS)
        out[li] = total
    return out


def _batches(n_rows, batch_size):
    if batch_size is None or batch_size >= n_rows:
        return [slice(0, n_rows)]
    return [slice(i, min(i + batch_size, n_rows)) for i in range(0, n_rows, batch_size)]


def fisher_sensitivity(model, x, target, batch_size=None):
    """Gradient-to-parameter norm ratios per layer, averaged over batches."""
    arr = x.x if hasattr(x, "x") else as_matrix(x)
    tgt = as_matrix(target, name="target")
    chunks = _batches(arr.shape[0], batch_size)
    acc = np.zeros(len(model.layers))
    for sl in chunks:
        grads = gradients(model, arr[sl], tgt[sl])
        acc += fisher_from_gradients(model, grads)
    return acc / len(chunks)


def effective_rank(hidden, tau, energy_mode="squares"):
    """Smallest spectral prefix reaching a ``tau`` fraction of total energy.

    ``energy_mode`` picks the cumulative quantity: raw singular values
    ("values") or their squares ("squares").
    """
    if not 0.0 < tau < 1.0:
        raise ContractViolationError(f"tau must lie in (0, 1), got {tau}")
    if energy_mode not in ENERGY_MODES:
        raise ContractViolationError(
            f"energy_mode must be one of {ENERGY_MODES}, got {energy_mode!r}"
        )
    arr = hidden.x if hasattr(hidden, "x") else as_matrix(hidden, name="hidden state")
    sig = np.linalg.svd(arr, compute_uv=False)
    if float(sig.max(initial=0.0)) == 0.0:
        raise DegenerateSpectrumError("hidden state is identically zero")
    energy = sig if energy_mode == "values" else sig * sig
    frac = np.cumsum(energy) / np.sum(energy)
    return int(np.argmax(frac >= tau)) + 1


def layer_effective_ranks(model, x, tau, energy_mode="squares", batch_size=None):
    """Effective rank of every layer's hidden state, averaged over batches."""
    arr = x.x if hasattr(x, "x") else as_matrix(x)
    chunks = _batches(arr.shape[0], batch_size)
    acc = np.zeros(len(model.layers))
    for sl in chunks:
        _, hiddens = model.forward(arr[sl])
        for li, h in enumerate(hiddens):
            acc[li] += effective_rank(h, tau, energy_mode)
    return acc / len(chunks)


def _minmax(v):
    v = np.asarray(v, dtype=np.float64)
    span = float(v.max() - v.min())
    # a (near-)constant vector carries no ordering information; stretching
    # its roundoff noise to full range would fabricate one
    if span <= 1e-9 * max(float(np.abs(v).max()), 1e-300):
        return np.ones_like(v)
    return (v - v.min()) / span + NORM_EPS


def combine_scores(fisher, eff_rank, beta, tau=None, energy_mode=None):
    """Min-max normalize both score vectors and power-combine them.

    combined = norm(fisher)^beta * norm(eff_rank)^(1-beta); a constant input
    vector normalizes to all-ones, contributing nothing to the ordering.
    """
    f = np.asarray(fisher, dtype=np.float64).ravel()
    r = np.asarray(eff_rank, dtype=np.float64).ravel()
    if f.size != r.size:
        raise ContractViolationError(
            f"score length mismatch: {f.size} vs {r.size}"
        )
    if not 0.0 <= beta <= 1.0:
        raise ContractViolationError(f"beta must lie in [0, 1], got {beta}")
    combined = _minmax(f) ** beta * _minmax(r) ** (1.0 - beta)
    return LayerScores(
        fisher=f, eff_rank=r, combined=combined, beta=float(beta),
        threshold=tau, energy_mode=energy_mode,
    )


def score_layers(model, x, target, beta=0.25, tau=0.95, energy_mode="squares",
                 batch_size=None):
    """One-stop heuristic scoring: Fisher + effective rank + combination."""
    fisher = fisher_sensitivity(model, x, target, batch_size=batch_size)
    ranks = layer_effective_ranks(model, x, tau, energy_mode, batch_size=batch_size)
    return combine_scores(fisher, ranks, beta, tau=tau, energy_mode=energy_mode)


def waterfill_proportional(q, total, lo, hi):
    """Solve sum(clip(c * q_i, lo, hi)) == total exactly.

    The clip-sum is continuous, piecewise linear and non-decreasing in c, so
    the crossing segment is found by scanning the breakpoints where entries
    hit a bound, then solved linearly. Output preserves the ordering of q.
    """
    q = np.asarray(q, dtype=np.float64).ravel()
    L = q.size
    if (q <= 0).any():
        raise ContractViolationError("scores must be strictly positive")
    if not lo <= hi:
        raise ContractViolationError(f"empty bound interval [{lo}, {hi}]")
    tol = 1e-9
    if total < L * lo - tol or total > L * hi + tol:
        raise InfeasibleBudgetError(
            f"budget {total:.6g} outside attainable range [{L * lo:.6g}, {L * hi:.6g}]"
        )
    total = float(np.clip(total, L * lo, L * hi))
    breaks = np.unique(np.concatenate([lo / q, hi / q]))
    prev = 0.0
    for b in list(breaks) + [None]:
        probe = prev + 1.0 if b is None else 0.5 * (prev + b)
        vals = np.clip(probe * q, lo, hi)
        low_mask = probe * q <= lo
        high_mask = probe * q >= hi
        free = ~(low_mask | high_mask)
        seg_end_sum = L * hi if b is None else float(np.clip(b * q, lo, hi).sum())
        if total <= seg_end_sum + 1e-12:
            fixed = float(lo * low_mask.sum() + hi * high_mask.sum())
            qf = float(q[free].sum())
            if qf == 0.0:
                # flat segment: the clamps alone must meet the budget
                return vals
            c = (total - fixed) / qf
            return np.clip(c * q, lo, hi)
        prev = b
    raise InfeasibleBudgetError("budget scan failed")  # pragma: no cover


def waterfill_additive(raw, total, lo, hi):
    """Solve sum(clip(raw_i + t, lo, hi)) == total exactly.

    Uniform-shift twin of :func:`waterfill_proportional`, used to project
    arbitrary candidate vectors onto the budget constraint.
    """
    r = np.asarray(raw, dtype=np.float64).ravel()
    L = r.size
    if not lo <= hi:
        raise ContractViolationError(f"empty bound interval [{lo}, {hi}]")
    tol = 1e-9
    if total < L * lo - tol or total > L * hi + tol:
        raise InfeasibleBudgetError(
            f"budget {total:.6g} outside attainable range [{L * lo:.6g}, {L * hi:.6g}]"
        )
    total = float(np.clip(total, L * lo, L * hi))
    breaks = np.unique(np.concatenate([lo - r, hi - r]))
    prev = float(breaks[0]) - 1.0
    for b in list(breaks) + [None]:
        probe = prev + 1.0 if b is None else 0.5 * (prev + b)
        vals = np.clip(r + probe, lo, hi)
        low_mask = r + probe <= lo
        high_mask = r + probe >= hi
        free = ~(low_mask | high_mask)
        seg_end_sum = L * hi if b is None else float(np.clip(r + b, lo, hi).sum())
        if total <= seg_end_sum + 1e-12:
            fixed = float(lo * low_mask.sum() + hi * high_mask.sum())
            nf = int(free.sum())
            if nf == 0:
                return vals
            t = (total - fixed - float(r[free].sum())) / nf
            return np.clip(r + t, lo, hi)
        prev = b
    raise InfeasibleBudgetError("budget scan failed")  # pragma: no cover


def allocate(scores, k, p_min=0.25):
    """Turn combined importance scores into a budget-exact compression plan.

    Raw ratios are proportional to the scores (mean 1 - k), then water-filled
    into [p_min, 1]: entries pinned at a bound hand their surplus or deficit
    to the still-free layers in proportion to their scores.
    """
    q = scores.combined if isinstance(scores, LayerScores) else np.asarray(scores, dtype=np.float64).ravel()
    if not 0.0 < k < 1.0:
        raise ContractViolationError(f"k must lie in (0, 1), got {k}")
    if p_min < 0.0 or p_min > 1.0 - k + 1e-12:
        raise InfeasibleBudgetError(
            f"p_min={p_min} incompatible with mean preserve {1.0 - k}"
        )
    L = q.size
    preserve = waterfill_proportional(q, L * (1.0 - k), p_min, 1.0)
    meta = {}
    if isinstance(scores, LayerScores):
        meta = dict(beta=scores.beta, tau=scores.threshold,
                    energy_mode=scores.energy_mode)
    return CompressionPlan(preserve=preserve, target_k=float(k), layer_count=L, **meta)


def uniform_plan(layer_count, k):
    """Everyone carries the same burden: preserve = 1 - k in every layer."""
    if not 0.0 < k < 1.0:
        raise ContractViolationError(f"k must lie in (0, 1), got {k}")
    return CompressionPlan(
        preserve=np.full(layer_count, 1.0 - k),
        target_k=float(k),
        layer_count=layer_count,
    )


def plan_to_dict(plan):
    return {
        "target_k": plan.target_k,
        "beta": plan.beta,
        "tau": plan.tau,
        "energy_mode": plan.energy_mode,
        "preserve": [float(p) for p in plan.preserve],
    }


def plan_from_dict(d):
    preserve = np.asarray(d["preserve"], dtype=np.float64)
    return CompressionPlan(
        preserve=preserve,
        target_k=float(d["target_k"]),
        layer_count=preserve.size,
        beta=d.get("beta"),
        tau=d.get("tau"),
        energy_mode=d.get("energy_mode"),
    )


def save_plan(plan, path):
    matio.atomic_write_text(path, json.dumps(plan_to_dict(plan), indent=2) + "\n")


def load_plan(path):
    with open(path, "r", encoding="utf-8") as fh:
        return plan_from_dict(json.load(fh))
