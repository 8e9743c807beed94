"""End-to-end orchestration: capture, whiten, allocate, compress, report.

Every run is configured by a :class:`RunConfig`, executes in named stages,
and emits a machine-readable report plus factor files. Stage failures
propagate with the stage name attached and leave no partial artifacts:
nothing is written until every stage has finished.
"""
from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, fields

import numpy as np

from . import matio
from .allocation import (
    allocate,
    plan_to_dict,
    score_layers,
    uniform_plan,
)
from .bayesopt import BoConfig, compare_allocators, optimize, save_trace_jsonl
from .calibration import (
    CalibrationMatrix,
    capture_activations,
    generate_synthetic,
    load_matrix,
)
from .compressor import (
    CompressedLayer,
    CompressedModel,
    WeightMatrix,
    compress_weight,
    drop_singular_triples,
    flops_report,
    save_factors,
    truncation_loss_observed,
)
from .errors import ConfigError, DipsvdError, UndefinedCorrelationError
from .linalg import seeded_rng
from .toymodel import (
    ToyModel,
    cosine_output_similarity,
    load_model,
    load_model_spec,
    model_from_spec,
)
from .whitening import (
    build_scaling,
    build_whitening,
    channel_importance,
    identity_whitening,
)

__all__ = [
    "RunConfig",
    "run_compress",
    "run_allocate",
    "run_verify_loss",
    "method_comparison",
    "render_report",
    "fisher_target",
]

WHITENING_MODES = ("channel-weighted", "plain", "none")
ALLOCATORS = ("heuristic", "bayes", "uniform")


@dataclass
class RunConfig:
    """Everything one run needs; validated before any work happens."""

    model_spec: object = None          # path, dict, or in-memory ToyModel
    calibration: object = "synthetic"  # path, "synthetic", array, or wrapper
    k: float = 0.3
    amplify: float = 30.0
    top_fraction: float = 0.03
    beta: float = 0.25
    tau: float = 0.95
    p_min: float = 0.25
    damping: float | None = None       # None -> 1e-6 * trace(G)/n per weight
    allocator: str = "heuristic"
    whitening: str = "channel-weighted"
    energy_mode: str = "squares"
    seed: int = 0
    bo_budget: int = 64
    bo_seed: int | None = None
    surrogate: str = "gp-ei"
    verify_instances: int = 100
    calibration_tokens: int = 256
    output_dir: str | None = None

    def validate(self):
        if not 0.0 < self.k < 1.0:
            raise ConfigError(f"k must lie in (0, 1), got {self.k}")
        if self.amplify < 1.0:
            raise ConfigError(f"amplify must be >= 1, got {self.amplify}")
        if not 0.0 <= self.top_fraction <= 1.0:
            raise ConfigError(
                f"top_fraction must lie in [0, 1], got {self.top_fraction}"
            )
        if not 0.0 < self.tau < 1.0:
            raise ConfigError(f"tau must lie in (0, 1), got {self.tau}")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")
        if self.p_min < 0.0 or self.p_min > 1.0:
            raise ConfigError(f"p_min must lie in [0, 1], got {self.p_min}")
        if self.damping is not None and self.damping < 0.0:
            raise ConfigError(f"damping must be >= 0, got {self.damping}")
        if self.allocator not in ALLOCATORS:
            raise ConfigError(
                f"allocator must be one of {ALLOCATORS}, got {self.allocator!r}"
            )
        if self.whitening not in WHITENING_MODES:
            raise ConfigError(
                f"whitening must be one of {WHITENING_MODES}, got {self.whitening!r}"
            )
        if self.energy_mode not in ("values", "squares"):
            raise ConfigError(
                f"energy_mode must be 'values' or 'squares', got {self.energy_mode!r}"
            )
        if self.bo_budget < 1:
            raise ConfigError(f"bo_budget must be >= 1, got {self.bo_budget}")
        return self

    def echo(self):
        """Deterministic config echo for reports (objects become tags)."""
        d = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name in ("model_spec", "calibration") and not isinstance(
                value, (str, int, float, type(None), dict)
            ):
                value = "<in-memory>"
            d[f.name] = value
        return d


class _Stage:
    """Context manager timing a stage and tagging escaping errors with it."""

    def __init__(self, name, timing):
        self.name = name
        self.timing = timing

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.timing[self.name] = time.perf_counter() - self.start
        if exc is not None and isinstance(exc, DipsvdError):
            exc.args = (f"stage '{self.name}': {exc}",)
        return False


def _build_model(cfg):
    spec = cfg.model_spec
    if isinstance(spec, ToyModel):
        return spec
    if isinstance(spec, dict):
        return model_from_spec(spec)
    if isinstance(spec, str):
        try:
            if os.path.isdir(spec):
                return load_model(spec)
            return load_model_spec(spec)
        except OSError as exc:
            raise ConfigError(f"cannot read model spec {spec!r}: {exc}") from exc
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"bad model spec {spec!r}: {exc}") from exc
    raise ConfigError("model_spec must be a path, a spec dict, or a model")


def _build_calibration(cfg, model):
    source = cfg.calibration
    if isinstance(source, CalibrationMatrix):
        return source
    if isinstance(source, np.ndarray):
        return CalibrationMatrix(x=source, source="file")
    if source == "synthetic":
        n = model.input_dim
        m = max(cfg.calibration_tokens, 2 * n)
        spectrum = np.geomspace(1.0, 0.01, n)
        return generate_synthetic(m, n, spectrum, seed=cfg.seed)
    if isinstance(source, str):
        try:
            return load_matrix(source)
        except OSError as exc:
            raise ConfigError(f"cannot read calibration {source!r}: {exc}") from exc
    raise ConfigError("calibration must be a path, 'synthetic', or a matrix")


def fisher_target(model, x, seed):
    """Teacher output nudged by seeded unit noise.

    At the teacher point itself the squared-error gradients vanish, so the
    sensitivity probe differentiates against a perturbed copy; score order
    does not depend on the perturbation scale.
    """
    arr = x.x if hasattr(x, "x") else x
    out, _ = model.forward(arr)
    rng = seeded_rng(seed + 7919)
    return out + rng.standard_normal(out.shape)


def _build_transforms(model, captures, cfg):
    transforms = []
    for capture in captures:
        n = capture.channels
        if cfg.whitening == "none":
            transforms.append(identity_whitening(n))
        elif cfg.whitening == "plain":
            transforms.append(build_whitening(capture, None, cfg.damping))
        else:
            scaling = build_scaling(
                channel_importance(capture), cfg.amplify, cfg.top_fraction
            )
            transforms.append(build_whitening(capture, scaling, cfg.damping))
    return transforms


def _build_plan(cfg, model, calib, transforms):
    if cfg.allocator == "uniform":
        return uniform_plan(len(model.layers), cfg.k), None, None
    if cfg.allocator == "heuristic":
        target = fisher_target(model, calib, cfg.seed)
        scores = score_layers(
            model, calib, target,
            beta=cfg.beta, tau=cfg.tau, energy_mode=cfg.energy_mode,
        )
        return allocate(scores, cfg.k, cfg.p_min), scores, None
    bo_cfg = BoConfig(
        budget=cfg.bo_budget,
        domain=(cfg.p_min, 1.0),
        seed=cfg.seed if cfg.bo_seed is None else cfg.bo_seed,
        surrogate=cfg.surrogate,
    )
    plan, trace = optimize(model, calib, transforms, cfg.k, bo_cfg)
    return plan, None, trace


def run_compress(cfg, write=True):
    """Execute the full pipeline and return the report dict.

    Writes report.json, plan.json and the factor files under
    ``cfg.output_dir`` (unless ``write=False`` or no directory is set);
    all writes happen after every stage has succeeded.
    """
    cfg.validate()
    timing = {}
    started = time.time()

    with _Stage("setup", timing):
        model = _build_model(cfg)
        calib = _build_calibration(cfg, model)
    with _Stage("capture", timing):
        captures = capture_activations(model, calib)
    with _Stage("whitening", timing):
        transforms = _build_transforms(model, captures, cfg)
    with _Stage("allocation", timing):
        plan, scores, trace = _build_plan(cfg, model, calib, transforms)
    with _Stage("compression", timing):
        weight_records = []
        layer_factors = [dict() for _ in model.layers]
        j = 0
        for li, layer in enumerate(model.layers):
            for name, w in layer.weights.items():
                factors, loss = compress_weight(
                    WeightMatrix(w=w, layer=li, name=name),
                    transforms[j],
                    float(plan.preserve[li]),
                )
                observed = truncation_loss_observed(w, factors, captures[j].x)
                layer_factors[li][name] = factors
                weight_records.append({
                    "layer": li,
                    "name": name,
                    "rows": int(w.shape[0]),
                    "cols": int(w.shape[1]),
                    "original_params": int(w.size),
                    "rank": factors.rank,
                    "preserved_ratio": float(plan.preserve[li]),
                    "predicted_loss": loss.predicted,
                    "observed_loss": observed,
                })
                j += 1
        compressed = CompressedModel(
            layers=[
                CompressedLayer(factors=facs, activation=layer.activation)
                for facs, layer in zip(layer_factors, model.layers)
            ],
            input_dim=model.input_dim,
            hidden_dim=model.hidden_dim,
        )
    with _Stage("report", timing):
        cosine = cosine_output_similarity(model, compressed, calib.x)
        out_orig, _ = model.forward(calib.x)
        out_comp, _ = compressed.forward(calib.x)
        end_to_end = float(np.linalg.norm(out_orig - out_comp))
        orig_norm = float(np.linalg.norm(out_orig))
        flops = flops_report(model, compressed, seq_len=calib.tokens)
        observed = np.array([r["observed_loss"] for r in weight_records])
        predicted = np.array([r["predicted_loss"] for r in weight_records])
        original_params = model.parameter_count()
        compressed_params = compressed.parameter_count()
        report = {
            "config": cfg.echo(),
            "plan": plan_to_dict(plan),
            "weights": weight_records,
            "totals": {
                "original_params": int(original_params),
                "compressed_params": int(compressed_params),
                "parameter_ratio": compressed_params / original_params,
                "flops_reduction": flops["reduction"],
                "cosine_similarity": cosine,
                "observed_loss_sum": float(observed.sum()),
                "observed_loss_rss": float(np.sqrt(np.sum(observed * observed))),
                "predicted_loss_rss": float(np.sqrt(np.sum(predicted * predicted))),
                "output_error": end_to_end,
                "output_error_relative": end_to_end / orig_norm if orig_norm else float("nan"),
            },
            "flops": flops,
        }

    report["timing"] = {"started": started, "stages": timing}

    if write and cfg.output_dir:
        os.makedirs(cfg.output_dir, exist_ok=True)
        save_factors(compressed, os.path.join(cfg.output_dir, "factors"), transforms)
        matio.atomic_write_text(
            os.path.join(cfg.output_dir, "plan.json"),
            json.dumps(plan_to_dict(plan), indent=2) + "\n",
        )
        matio.atomic_write_text(
            os.path.join(cfg.output_dir, "report.json"),
            json.dumps(report, indent=2, sort_keys=True) + "\n",
        )
        if trace is not None:
            save_trace_jsonl(trace, os.path.join(cfg.output_dir, "bo_trace.jsonl"))
    return report


def run_allocate(cfg, write=True):
    """Compute per-layer scores and a plan; correlate paired allocators.

    The heuristic score table is always computed (it is the explainable
    artifact); when the Bayesian allocator runs, the report also carries the
    heuristic plan and the Pearson correlation between the two.
    """
    cfg.validate()
    timing = {}
    started = time.time()

    with _Stage("setup", timing):
        model = _build_model(cfg)
        calib = _build_calibration(cfg, model)
    with _Stage("scores", timing):
        target = fisher_target(model, calib, cfg.seed)
        scores = score_layers(
            model, calib, target,
            beta=cfg.beta, tau=cfg.tau, energy_mode=cfg.energy_mode,
        )
        heuristic = allocate(scores, cfg.k, cfg.p_min)
    trace = None
    correlation = None
    with _Stage("allocation", timing):
        if cfg.allocator == "uniform":
            plan = uniform_plan(len(model.layers), cfg.k)
        elif cfg.allocator == "heuristic":
            plan = heuristic
        else:
            captures = capture_activations(model, calib)
            transforms = _build_transforms(model, captures, cfg)
            plan, _, trace = _build_plan(cfg, model, calib, transforms)
            try:
                correlation = compare_allocators(heuristic, plan)
            except UndefinedCorrelationError:
                correlation = None

    record = {
        "config": cfg.echo(),
        "scores": {
            "fisher": [float(v) for v in scores.fisher],
            "effective_rank": [float(v) for v in scores.eff_rank],
            "combined": [float(v) for v in scores.combined],
        },
        "plan": plan_to_dict(plan),
        "heuristic_plan": plan_to_dict(heuristic),
        "correlation": correlation,
    }
    record["timing"] = {"started": started, "stages": timing}

    if write and cfg.output_dir:
        os.makedirs(cfg.output_dir, exist_ok=True)
        matio.atomic_write_text(
            os.path.join(cfg.output_dir, "plan.json"),
            json.dumps(plan_to_dict(plan), indent=2) + "\n",
        )
        matio.atomic_write_text(
            os.path.join(cfg.output_dir, "allocate.json"),
            json.dumps(record, indent=2, sort_keys=True) + "\n",
        )
        if trace is not None:
            save_trace_jsonl(trace, os.path.join(cfg.output_dir, "bo_trace.jsonl"))
    return record


def run_verify_loss(cfg, write=True):
    """Randomized check that truncation loss matches the dropped spectrum.

    Each instance whitens a random weight's input space (no damping unless
    configured), drops every single singular triple and several random
    subsets, and compares observed against predicted losses. Damped
    configurations are measured but flagged instead of failed; singular
    Grams are surfaced in the record rather than thrown.
    """
    cfg.validate()
    rng = seeded_rng(cfg.seed)
    damping = 0.0 if cfg.damping is None else cfg.damping
    damped = damping > 0.0
    tolerance = 1e-6

    max_single = 0.0
    max_subset = 0.0
    errors = []
    instances = 0
    for _ in range(cfg.verify_instances):
        d_out = int(rng.integers(4, 33))
        n = int(rng.integers(4, 33))
        m = 2 * n + int(rng.integers(0, n + 1))
        spectrum = np.geomspace(1.0, 0.05, n) * rng.uniform(0.5, 1.5, n)
        calib = generate_synthetic(m, n, spectrum, seed=int(rng.integers(0, 2**31)))
        w = rng.standard_normal((d_out, n))
        scaling = build_scaling(
            channel_importance(calib), cfg.amplify, cfg.top_fraction
        )
        try:
            transform = build_whitening(calib, scaling, damping)
        except DipsvdError as exc:
            errors.append(str(exc))
            continue
        instances += 1
        f_rank = min(d_out, n)
        for i in range(f_rank):
            factors, loss = drop_singular_triples(w, transform, [i])
            observed = truncation_loss_observed(
                w, factors, calib, scaling=transform.scaling
            )
            if loss.predicted > 0:
                max_single = max(
                    max_single, abs(observed - loss.predicted) / loss.predicted
                )
        for _ in range(3):
            size = int(rng.integers(1, f_rank))
            drop = rng.choice(f_rank, size=size, replace=False)
            factors, loss = drop_singular_triples(w, transform, drop)
            observed = truncation_loss_observed(
                w, factors, calib, scaling=transform.scaling
            )
            if loss.predicted > 0:
                max_subset = max(
                    max_subset, abs(observed - loss.predicted) / loss.predicted
                )

    # deterministic probe of the degenerate path: a rank-deficient Gram with
    # no damping must surface the singular-whitening diagnosis, not crash
    singular_probe = None
    if not damped:
        probe = generate_synthetic(16, 6, [1.0, 1.0, 1.0, 1.0, 0.0, 0.0], seed=cfg.seed)
        try:
            build_whitening(probe, None, 0.0)
        except DipsvdError as exc:
            singular_probe = str(exc)

    record = {
        "config": cfg.echo(),
        "instances": instances,
        "damping": damping,
        "damped": damped,
        "tolerance": tolerance,
        "max_single_triple_deviation": max_single,
        "max_subset_deviation": max_subset,
        "errors": errors,
        "singular_probe": singular_probe,
        "passed": (
            "damped"
            if damped
            else bool(max_single < tolerance and max_subset < tolerance and instances > 0)
        ),
    }
    if write and cfg.output_dir:
        os.makedirs(cfg.output_dir, exist_ok=True)
        matio.atomic_write_text(
            os.path.join(cfg.output_dir, "verify_loss.json"),
            json.dumps(record, indent=2, sort_keys=True) + "\n",
        )
    return record


def method_comparison(model, calib, k, seed=0, amplify=30.0, top_fraction=0.03,
                      beta=0.25, tau=0.95, p_min=0.25):
    """A/B/C harness: dual protection vs plain whitening vs raw truncation.

    Runs the same model and calibration through three configurations and
    returns their reports keyed as ``full`` (channel-weighted whitening +
    heuristic allocation), ``plain`` (unweighted whitening + uniform
    allocation) and ``none`` (no whitening + uniform allocation).
    """
    base = dict(
        model_spec=model, calibration=calib, k=k, seed=seed,
        amplify=amplify, top_fraction=top_fraction,
        beta=beta, tau=tau, p_min=p_min,
    )
    runs = {
        "full": RunConfig(**base, whitening="channel-weighted", allocator="heuristic"),
        "plain": RunConfig(**base, whitening="plain", allocator="uniform"),
        "none": RunConfig(**base, whitening="none", allocator="uniform"),
    }
    return {tag: run_compress(cfg, write=False) for tag, cfg in runs.items()}


def render_report(report):
    """Aligned plain-text table for humans; the JSON stays the machine form."""
    lines = []
    header = (
        f"{'layer':>5} {'name':<8} {'shape':<12} {'rank':>5} "
        f"{'kept%':>7} {'predicted':>12} {'observed':>12}"
    )
    lines.append(header)
    lines.append("-" * len(header))
    for r in report["weights"]:
        shape = f"{r['rows']}x{r['cols']}"
        lines.append(
            f"{r['layer']:>5} {r['name']:<8} {shape:<12} {r['rank']:>5} "
            f"{100.0 * r['preserved_ratio']:>6.1f}% "
            f"{r['predicted_loss']:>12.6g} {r['observed_loss']:>12.6g}"
        )
    t = report["totals"]
    lines.append("-" * len(header))
    lines.append(
        f"params {t['compressed_params']}/{t['original_params']} "
        f"(ratio {t['parameter_ratio']:.4f})   "
        f"flops reduction {100.0 * t['flops_reduction']:.2f}%"
    )
    lines.append(
        f"cosine similarity {t['cosine_similarity']:.6f}   "
        f"output error {t['output_error']:.6g} "
        f"(relative {t['output_error_relative']:.4g})"
    )
    return "\n".join(lines)
