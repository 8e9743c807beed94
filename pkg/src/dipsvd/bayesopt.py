"""Budget-constrained search over per-layer preservation ratios.

The optimizer maximizes the cosine similarity between the original and
compressed model outputs, subject to the per-layer ratios averaging exactly
to the global budget. Candidates live in a box (default [0.25, 1] per
layer) and are projected onto the budget constraint by a uniform shift plus
water-filling, so every evaluated plan is feasible by construction.

Trial 1 is always the uniform plan: the returned best can never be worse
than uniform allocation, and the surrogate starts from a sane anchor.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .allocation import CompressionPlan, waterfill_additive
from .compressor import compress_model
from .errors import ContractViolationError, DipsvdError, InfeasibleBudgetError
from .linalg import pearson, seeded_rng
from .toymodel import cosine_output_similarity
from . import matio

__all__ = [
    "BoConfig",
    "BoTrace",
    "TraceEntry",
    "project_to_budget",
    "optimize",
    "compare_allocators",
    "expected_improvement",
    "save_trace_jsonl",
]


@dataclass(frozen=True)
class BoConfig:
    budget: int = 64
    domain: tuple = (0.25, 1.0)
    seed: int = 0
    surrogate: str = "gp-ei"
    jitter: float = 0.01
    candidate_pool: int = 256

    def __post_init__(self):
        lo, hi = self.domain
        if not lo < hi:
            raise ContractViolationError(f"domain must satisfy lo < hi, got {self.domain}")
        if self.budget < 1:
            raise ContractViolationError(f"budget must be >= 1, got {self.budget}")
        if self.surrogate not in ("gp-ei", "random-search"):
            raise ContractViolationError(
                f"surrogate must be 'gp-ei' or 'random-search', got {self.surrogate!r}"
            )


@dataclass(frozen=True)
class TraceEntry:
    iteration: int
    preserve: np.ndarray
    objective: float


@dataclass
class BoTrace:
    entries: list = field(default_factory=list)

    def record(self, preserve, objective):
        self.entries.append(
            TraceEntry(
                iteration=len(self.entries) + 1,
                preserve=np.asarray(preserve, dtype=np.float64).copy(),
                objective=float(objective),
            )
        )

    @property
    def best_entry(self):
        return max(self.entries, key=lambda e: e.objective)

    @property
    def best_value(self):
        return self.best_entry.objective

    @property
    def best_preserve(self):
        return self.best_entry.preserve


def project_to_budget(raw, k, domain):
    """Shift a raw ratio vector so its mean is exactly 1 - k, inside the box.

    The shift is uniform; coordinates pushed past a bound are pinned there
    and the residual is spread over the still-free coordinates.
    """
    lo, hi = domain
    r = np.clip(np.asarray(raw, dtype=np.float64).ravel(), lo, hi)
    target = 1.0 - k
    if target < lo - 1e-12 or target > hi + 1e-12:
        raise InfeasibleBudgetError(
            f"mean preserve {target:.6g} outside domain [{lo}, {hi}]"
        )
    return waterfill_additive(r, r.size * target, lo, hi)


def _rbf(a, b, lengthscale):
    sq = (
        np.sum(a * a, axis=1)[:, None]
        + np.sum(b * b, axis=1)[None, :]
        - 2.0 * a @ b.T
    )
    return np.exp(-0.5 * np.maximum(sq, 0.0) / (lengthscale * lengthscale))


class _GaussianProcess:
    """Minimal squared-exponential GP on standardized targets."""

    def __init__(self, x, y, lengthscale, noise=1e-6):
        self.x = np.ascontiguousarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        self.y_mean = float(y.mean())
        self.y_std = float(y.std())
        if self.y_std < 1e-12:
            self.y_std = 1.0
        self.y = (y - self.y_mean) / self.y_std
        self.lengthscale = float(lengthscale)
        k = _rbf(self.x, self.x, self.lengthscale)
        jitter = noise
        for _ in range(8):
            try:
                self.chol = np.linalg.cholesky(k + jitter * np.eye(len(y)))
                break
            except np.linalg.LinAlgError:
                jitter *= 10.0
        else:  # pragma: no cover
            raise ContractViolationError("GP kernel matrix is not positive definite")
        self.alpha = np.linalg.solve(
            self.chol.T, np.linalg.solve(self.chol, self.y)
        )

    def predict(self, xs):
        ks = _rbf(np.asarray(xs, dtype=np.float64), self.x, self.lengthscale)
        mu = ks @ self.alpha
        v = np.linalg.solve(self.chol, ks.T)
        var = np.maximum(1.0 - np.sum(v * v, axis=0), 0.0)
        return mu, np.sqrt(var)

    @property
    def best_standardized(self):
        return float(self.y.max())


def expected_improvement(mu, sigma, best, jitter=0.0):
    """EI for maximization: E[max(f - best - jitter, 0)] under N(mu, sigma)."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    imp = mu - best - jitter
    out = np.maximum(imp, 0.0)
    ok = sigma > 1e-12
    z = np.zeros_like(mu)
    z[ok] = imp[ok] / sigma[ok]
    pdf = np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)
    out = np.where(ok, imp * ndtr(z) + sigma * pdf, out)
    return out


def default_scorer(model, x, transforms, k):
    """Compress under a candidate plan and score output cosine similarity."""
    arr = x.x if hasattr(x, "x") else x
    layer_count = len(model.layers)

    def score(preserve):
        plan = CompressionPlan(
            preserve=preserve, target_k=k, layer_count=layer_count
        )
        compressed = compress_model(model, plan, transforms)
        return cosine_output_similarity(model, compressed, arr)

    return score


def optimize(model, x, transforms, k, cfg=None, scorer=None):
    """Search per-layer preservation ratios maximizing the injected objective.

    Returns the best feasible plan and the full evaluation trace. A failed
    candidate evaluation (any package error) scores -inf and the search
    continues. Deterministic for a fixed config seed.
    """
    cfg = cfg or BoConfig()
    if not 0.0 < k < 1.0:
        raise ContractViolationError(f"k must lie in (0, 1), got {k}")
    lo, hi = cfg.domain
    layer_count = len(model.layers)
    if scorer is None:
        scorer = default_scorer(model, x, transforms, k)
    rng = seeded_rng(cfg.seed)
    trace = BoTrace()

    def evaluate(preserve):
        try:
            value = float(scorer(preserve))
            if np.isnan(value):
                value = float("-inf")
        except DipsvdError:
            value = float("-inf")
        trace.record(preserve, value)
        return value

    uniform = project_to_budget(np.full(layer_count, 1.0 - k), k, cfg.domain)
    evaluate(uniform)

    # a single layer is fully pinned by the constraint: nothing to search
    trials = 1 if layer_count == 1 else cfg.budget
    lengthscale = 0.2 * (hi - lo)
    while len(trace.entries) < trials:
        if cfg.surrogate == "random-search":
            cand = project_to_budget(rng.uniform(lo, hi, layer_count), k, cfg.domain)
        else:
            cand = _propose_ei(trace, rng, layer_count, k, cfg, lengthscale)
        evaluate(cand)

    best = trace.best_preserve
    plan = CompressionPlan(preserve=best, target_k=float(k), layer_count=layer_count)
    return plan, trace


def _propose_ei(trace, rng, layer_count, k, cfg, lengthscale):
    lo, hi = cfg.domain
    draws = rng.uniform(lo, hi, size=(cfg.candidate_pool, layer_count))
    pool = np.stack([
        waterfill_additive(row, layer_count * (1.0 - k), lo, hi) for row in draws
    ])
    xs = np.stack([e.preserve for e in trace.entries])
    ys = np.array([e.objective for e in trace.entries])
    finite = np.isfinite(ys)
    if finite.sum() < 2:
        return pool[0]
    gp = _GaussianProcess(xs[finite], ys[finite], lengthscale)
    mu, sigma = gp.predict(pool)
    ei = expected_improvement(mu, sigma, gp.best_standardized, cfg.jitter)
    return pool[int(np.argmax(ei))]


def compare_allocators(plan_a, plan_b):
    """Pearson correlation between two plans' preservation vectors."""
    return pearson(plan_a.preserve, plan_b.preserve)


def save_trace_jsonl(trace, path):
    """One JSON object per evaluated candidate, stamped at write time."""
    now = time.time()
    lines = [
        json.dumps({
            "iteration": e.iteration,
            "preserve": [float(p) for p in e.preserve],
            "objective": e.objective if np.isfinite(e.objective) else None,
            "timestamp": now,
        })
        for e in trace.entries
    ]
    matio.atomic_write_text(path, "\n".join(lines) + "\n")
