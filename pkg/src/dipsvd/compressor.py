"""Per-weight SVD compression and whole-model assembly.

A weight ``w`` (d_out x n) is compressed by factoring ``w @ s`` where ``s``
is the whitening factor of its input space, keeping the top singular
triples allowed by the parameter budget, and splitting the kept part into
the stored pair ``w_u @ w_v ~= w``:

    w_u = U_r * sqrt(sigma_r)           (d_out x r)
    w_v = sqrt(sigma_r) * Vt_r @ s_inv  (r x n)

The predicted loss sqrt(sum of dropped sigma^2) equals the observed output
error on the amplified calibration data whenever the Gram was not damped.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractViolationError, ShapeError
from .linalg import as_matrix, frobenius_norm, svd
from .toymodel import _activate
from . import matio

__all__ = [
    "WeightMatrix",
    "LowRankFactors",
    "CompressionLoss",
    "CompressedLayer",
    "CompressedModel",
    "rank_from_ratio",
    "compress_weight",
    "drop_singular_triples",
    "truncation_loss_observed",
    "compress_model",
    "mac_counts",
    "flops_report",
    "save_factors",
    "load_factors",
]


@dataclass(frozen=True)
class WeightMatrix:
    """A weight plus bookkeeping about where it lives in the model."""

    w: np.ndarray
    layer: int = 0
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "w", as_matrix(self.w, name="weight"))


@dataclass(frozen=True)
class LowRankFactors:
    """Stored factor pair replacing one weight matrix."""

    w_u: np.ndarray
    w_v: np.ndarray
    rank: int
    preserved_ratio: float

    def reconstruct(self):
        return self.w_u @ self.w_v

    @property
    def parameter_count(self):
        return self.w_u.size + self.w_v.size


@dataclass(frozen=True)
class CompressionLoss:
    """Predicted loss is the root-sum-square of dropped singular values;
    observed is measured on calibration data (filled in when evaluated)."""

    predicted: float
    observed: float | None = None

    def with_observed(self, value):
        return replace(self, observed=float(value))


def rank_from_ratio(d_out, n, preserved):
    """Largest rank whose factor pair fits the parameter budget.

    ``r * (d_out + n) <= preserved * d_out * n``, floored, never below 1.
    """
    if preserved <= 0.0 or preserved > 1.0:
        raise ContractViolationError(
            f"preserved ratio must lie in (0, 1], got {preserved}"
        )
    raw = preserved * d_out * n / (d_out + n)
    return max(1, int(np.floor(raw + 1e-9)))


def _as_weight(w):
    return w if isinstance(w, WeightMatrix) else WeightMatrix(w=w)


def _factors_from_kept(factors, s_inv, keep, preserved_ratio):
    root = np.sqrt(factors.sigma[keep])
    w_u = factors.u[:, keep] * root
    w_v = (root[:, None] * factors.vt[keep, :]) @ s_inv
    return LowRankFactors(
        w_u=np.ascontiguousarray(w_u),
        w_v=np.ascontiguousarray(w_v),
        rank=len(keep),
        preserved_ratio=float(preserved_ratio),
    )


def compress_weight(weight, transform, preserved):
    """Compress one weight under its whitening transform and budget.

    Returns the stored factor pair and the predicted truncation loss.
    """
    wm = _as_weight(weight)
    d_out, n = wm.w.shape
    if transform.channels != n:
        raise ShapeError(
            f"whitening built for {transform.channels} channels, weight has {n}"
        )
    f = svd(wm.w @ transform.s)
    r = min(rank_from_ratio(d_out, n, preserved), f.rank)
    keep = np.arange(r)
    factors = _factors_from_kept(f, transform.s_inv, keep, preserved)
    dropped = f.sigma[r:]
    predicted = float(np.sqrt(np.sum(dropped * dropped)))
    return factors, CompressionLoss(predicted=predicted)


def drop_singular_triples(weight, transform, drop):
    """Zero an arbitrary set of singular triples of ``w @ s``.

    Diagnostic twin of :func:`compress_weight`: keeps the complement of
    ``drop`` instead of a top prefix, so tests and the loss-identity suite
    can knock out any single triple or subset.
    """
    wm = _as_weight(weight)
    d_out, n = wm.w.shape
    if transform.channels != n:
        raise ShapeError(
            f"whitening built for {transform.channels} channels, weight has {n}"
        )
    f = svd(wm.w @ transform.s)
    drop = np.asarray(sorted(set(int(i) for i in drop)), dtype=int)
    if drop.size and (drop.min() < 0 or drop.max() >= f.rank):
        raise ContractViolationError(
            f"drop indices must lie in [0, {f.rank - 1}]"
        )
    keep = np.setdiff1d(np.arange(f.rank), drop)
    if keep.size == 0:
        raise ContractViolationError("cannot drop every singular triple")
    nominal = min(1.0, keep.size * (d_out + n) / (d_out * n))
    factors = _factors_from_kept(f, transform.s_inv, keep, nominal)
    dropped = f.sigma[drop]
    predicted = float(np.sqrt(np.sum(dropped * dropped)))
    return factors, CompressionLoss(predicted=predicted)


def truncation_loss_observed(weight, factors, x, scaling=None):
    """Frobenius norm of the output difference on (amplified) calibration data.

    ``scaling`` applies the channel amplification to ``x`` first; omit it to
    measure on the raw activations.
    """
    wm = _as_weight(weight)
    arr = x.x if hasattr(x, "x") else as_matrix(x)
    if arr.shape[1] != wm.w.shape[1]:
        raise ShapeError(
            f"data has {arr.shape[1]} channels, weight expects {wm.w.shape[1]}"
        )
    if scaling is not None:
        if scaling.d_diag.size != arr.shape[1]:
            raise ShapeError(
                f"scaling has {scaling.d_diag.size} channels, data has {arr.shape[1]}"
            )
        arr = arr * scaling.d_diag
    diff = wm.w - factors.reconstruct()
    return frobenius_norm(arr @ diff.T)


@dataclass(frozen=True)
class CompressedLayer:
    factors: dict
    activation: str


@dataclass(frozen=True)
class CompressedModel:
    """Forward-compatible twin of ToyModel evaluating through factor pairs."""

    layers: list
    input_dim: int
    hidden_dim: int

    def iter_factors(self):
        for li, layer in enumerate(self.layers):
            for name, f in layer.factors.items():
                yield li, name, f

    def parameter_count(self):
        return sum(f.parameter_count for _, _, f in self.iter_factors())

    def forward(self, x):
        h = as_matrix(x, name="input")
        if h.shape[1] != self.input_dim:
            raise ShapeError(
                f"layer 0 expects {self.input_dim} input channels, got {h.shape[1]}"
            )
        hiddens = []
        for layer in self.layers:
            t = h
            for f in layer.factors.values():
                t = (t @ f.w_v.T) @ f.w_u.T
            h = _activate(layer.activation, t)
            hiddens.append(h)
        return h, hiddens


def compress_model(model, plan, transforms):
    """Replace every weight with its factor pair.

    ``plan.preserve[l]`` is the preserved fraction for all weights of layer
    ``l``; ``transforms`` lists one whitening transform per weight in
    forward order.
    """
    if plan.layer_count != len(model.layers):
        raise ContractViolationError(
            f"plan covers {plan.layer_count} layers, model has {len(model.layers)}"
        )
    weight_total = model.weight_count()
    if len(transforms) != weight_total:
        raise ContractViolationError(
            f"need {weight_total} whitening transforms, got {len(transforms)}"
        )
    out_layers = []
    j = 0
    for li, layer in enumerate(model.layers):
        preserved = float(plan.preserve[li])
        factors = {}
        for name, w in layer.weights.items():
            f, _ = compress_weight(
                WeightMatrix(w=w, layer=li, name=name), transforms[j], preserved
            )
            factors[name] = f
            j += 1
        out_layers.append(CompressedLayer(factors=factors, activation=layer.activation))
    return CompressedModel(
        layers=out_layers, input_dim=model.input_dim, hidden_dim=model.hidden_dim
    )


def mac_counts(d_out, d_in, rank, tokens):
    """Multiply-accumulate counts: dense path vs factored path."""
    dense = tokens * d_out * d_in
    factored = tokens * rank * (d_out + d_in)
    return dense, factored


def flops_report(original, compressed, seq_len):
    """Dense-vs-factored multiply-accumulate accounting for a model pair."""
    rows = []
    total_dense = 0
    total_fact = 0
    factor_map = {(li, name): f for li, name, f in compressed.iter_factors()}
    for li, name, w in original.iter_weights():
        f = factor_map.get((li, name))
        if f is None:
            raise ContractViolationError(
                f"compressed model is missing factors for layer {li} {name!r}"
            )
        d_out, d_in = w.shape
        dense, fact = mac_counts(d_out, d_in, f.rank, seq_len)
        total_dense += dense
        total_fact += fact
        rows.append({
            "layer": li,
            "name": name,
            "rows": d_out,
            "cols": d_in,
            "rank": f.rank,
            "dense_macs": dense,
            "factored_macs": fact,
            "reduction": 1.0 - fact / dense,
        })
    return {
        "seq_len": seq_len,
        "weights": rows,
        "total_dense_macs": total_dense,
        "total_factored_macs": total_fact,
        "reduction": 1.0 - total_fact / total_dense,
    }


def save_factors(compressed, directory, transforms=None):
    """Persist factor pairs as DSVD files plus a JSON manifest.

    When ``transforms`` is given, each weight's whitening factor is stored
    alongside so predicted losses can be re-derived from disk.
    """
    os.makedirs(directory, exist_ok=True)
    entries = []
    transform_list = list(transforms) if transforms is not None else None
    j = 0
    for li, name, f in compressed.iter_factors():
        stem = f"layer{li}_{name}"
        u_file = f"{stem}_u.dsvd"
        v_file = f"{stem}_v.dsvd"
        matio.save_dsvd(f.w_u, os.path.join(directory, u_file))
        matio.save_dsvd(f.w_v, os.path.join(directory, v_file))
        entry = {
            "layer": li,
            "name": name,
            "rank": f.rank,
            "preserved_ratio": f.preserved_ratio,
            "u_file": u_file,
            "v_file": v_file,
        }
        if transform_list is not None:
            s_file = f"{stem}_whitening.dsvd"
            matio.save_dsvd(transform_list[j].s, os.path.join(directory, s_file))
            entry["whitening_file"] = s_file
        entries.append(entry)
        j += 1
    manifest = {
        "input_dim": compressed.input_dim,
        "hidden_dim": compressed.hidden_dim,
        "activations": [layer.activation for layer in compressed.layers],
        "weights": entries,
    }
    matio.atomic_write_text(
        os.path.join(directory, "manifest.json"),
        json.dumps(manifest, indent=2, sort_keys=True) + "\n",
    )
    return manifest


def load_factors(directory):
    """Rebuild a CompressedModel from a factors directory."""
    with open(os.path.join(directory, "manifest.json"), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    activations = manifest["activations"]
    layer_factors = [dict() for _ in activations]
    for entry in manifest["weights"]:
        f = LowRankFactors(
            w_u=matio.load_dsvd(os.path.join(directory, entry["u_file"])),
            w_v=matio.load_dsvd(os.path.join(directory, entry["v_file"])),
            rank=int(entry["rank"]),
            preserved_ratio=float(entry["preserved_ratio"]),
        )
        layer_factors[int(entry["layer"])][entry["name"]] = f
    layers = [
        CompressedLayer(factors=facs, activation=act)
        for facs, act in zip(layer_factors, activations)
    ]
    input_dim = int(manifest["input_dim"])
    hidden_dim = int(manifest["hidden_dim"])
    return CompressedModel(layers=layers, input_dim=input_dim, hidden_dim=hidden_dim)
